//! Scene routing through per-task one-layer autoencoders.
//!
//! Images map to a fixed 64-dimensional representation (grayscale thumbnail
//! plus color histogram through a seeded random projection). Each task trains
//! one autoencoder on its own representations; at inference the task whose
//! autoencoder reconstructs the input best wins. Training couples the
//! reconstruction error with a scene contrastive term that pushes the new
//! reconstruction away from what the old autoencoders produce.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::AdaptiveOpt;
use crate::seeds::rng_for;
use crate::tensor::Vol;

pub const REPR_DIM: usize = 64;
pub const BOTTLENECK: usize = 16;
pub const TEMPERATURE: f64 = 2.0;
pub const CONTRASTIVE_WEIGHT: f64 = 0.1;
pub const SIM_EPS: f64 = 1e-8;
pub const TRAIN_EPOCHS: usize = 200;
pub const TRAIN_LR: f64 = 1e-2;

const THUMB: usize = 16;
const HIST_BINS: usize = 8;
/// The histogram block enters the projection scaled up so its 24 dimensions
/// carry energy comparable to the 256 thumbnail dimensions.
const HIST_WEIGHT: f64 = 4.0;
/// The projection matrix is part of the encoder definition, not of any run.
const ENCODER_SEED: u64 = 0x5ce2_e04a_11b7_3c19;

/// 8-bin per-channel intensity histogram, normalized per channel.
pub fn color_histogram(image: &Vol) -> Vec<f64> {
    let mut hist = vec![0.0; image.c * HIST_BINS];
    let n = image.spatial() as f64;
    for c in 0..image.c {
        for &v in image.channel(c) {
            let bin = ((v.clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
            hist[c * HIST_BINS + bin] += 1.0;
        }
    }
    for v in &mut hist {
        *v /= n;
    }
    hist
}

fn gray_thumbnail(image: &Vol) -> Vec<f64> {
    let (h, w) = (image.h, image.w);
    let mut out = vec![0.0; THUMB * THUMB];
    for ty in 0..THUMB {
        let y0 = ty * h / THUMB;
        let y1 = ((ty + 1) * h / THUMB).max(y0 + 1).min(h);
        for tx in 0..THUMB {
            let x0 = tx * w / THUMB;
            let x1 = ((tx + 1) * w / THUMB).max(x0 + 1).min(w);
            let mut s = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    for c in 0..image.c {
                        s += image.at(c, 0, y, x);
                    }
                }
            }
            out[ty * THUMB + tx] = s / ((y1 - y0) * (x1 - x0) * image.c) as f64;
        }
    }
    out
}

fn projection_matrix() -> Vec<f64> {
    let rows = REPR_DIM;
    let cols = THUMB * THUMB + 3 * HIST_BINS;
    let mut rng = rng_for(ENCODER_SEED, "router/projection");
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows * cols)
        .map(|_| {
            let u1: f64 = rng.gen::<f64>().max(1e-12);
            let u2: f64 = rng.gen();
            scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

/// Deterministic image representation: thumbnail + histogram through the
/// fixed random projection, squashed into (0, 1).
pub fn encode_representation(image: &Vol) -> Vec<f64> {
    let mut v = gray_thumbnail(image);
    v.extend(color_histogram(image).into_iter().map(|h| h * HIST_WEIGHT));
    let proj = projection_matrix();
    let cols = v.len();
    (0..REPR_DIM)
        .map(|r| {
            let dot: f64 = proj[r * cols..(r + 1) * cols]
                .iter()
                .zip(&v)
                .map(|(a, b)| a * b)
                .sum();
            0.5 + 0.5 * dot.tanh()
        })
        .collect()
}

/// One-layer autoencoder: linear encoder, linear decoder with a sigmoid on
/// the reconstruction. Weights live in one flat buffer.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Autoencoder {
    pub weights: Vec<f64>,
}

const W_ENC: usize = 0;
const B_ENC: usize = W_ENC + BOTTLENECK * REPR_DIM;
const W_DEC: usize = B_ENC + BOTTLENECK;
const B_DEC: usize = W_DEC + REPR_DIM * BOTTLENECK;
pub const AE_LEN: usize = B_DEC + REPR_DIM;

impl Autoencoder {
    pub fn init(seed: u64, tag: &str) -> Autoencoder {
        let mut rng = rng_for(seed, tag);
        let mut weights = vec![0.0; AE_LEN];
        let gauss = |scale: f64, rng: &mut ChaCha8Rng| {
            let u1: f64 = rng.gen::<f64>().max(1e-12);
            let u2: f64 = rng.gen();
            scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        for i in 0..BOTTLENECK * REPR_DIM {
            weights[W_ENC + i] = gauss(1.0 / (REPR_DIM as f64).sqrt(), &mut rng);
        }
        for i in 0..REPR_DIM * BOTTLENECK {
            weights[W_DEC + i] = gauss(1.0 / (BOTTLENECK as f64).sqrt(), &mut rng);
        }
        Autoencoder { weights }
    }

    /// Identity-free reconstruction: sigmoid(Wd (We x + be) + bd).
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != REPR_DIM {
            return Err(Error::ShapeMismatch(format!(
                "representation has {} dims, expected {REPR_DIM}",
                x.len()
            )));
        }
        let w = &self.weights;
        let mut h = vec![0.0; BOTTLENECK];
        for b in 0..BOTTLENECK {
            let mut s = w[B_ENC + b];
            for r in 0..REPR_DIM {
                s += w[W_ENC + b * REPR_DIM + r] * x[r];
            }
            h[b] = s;
        }
        let mut out = vec![0.0; REPR_DIM];
        for r in 0..REPR_DIM {
            let mut s = w[B_DEC + r];
            for b in 0..BOTTLENECK {
                s += w[W_DEC + r * BOTTLENECK + b] * h[b];
            }
            out[r] = sigmoid(s);
        }
        Ok(out)
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch("mse operands".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Mean squared reconstruction error of one representation under one task's
/// autoencoder.
pub fn reconstruction_error(x: &[f64], ae: &Autoencoder) -> Result<f64> {
    let recon = ae.reconstruct(x)?;
    mse(x, &recon)
}

/// Inverse-MSE similarity.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 / (mse(a, b)? + SIM_EPS))
}

/// The scene contrastive loss over inverse-MSE similarities. With no old
/// tasks the loss is zero by definition.
pub fn scene_contrastive_loss(
    recon_new: &[f64],
    x_new: &[f64],
    old_recons: &[Vec<f64>],
) -> Result<f64> {
    if old_recons.is_empty() {
        return Ok(0.0);
    }
    let s_nn = similarity(recon_new, x_new)? / TEMPERATURE;
    let s_old: Vec<f64> = old_recons
        .iter()
        .map(|o| similarity(recon_new, o).map(|s| s / TEMPERATURE))
        .collect::<Result<_>>()?;
    // -log softmax(s_nn), computed with a max shift
    let m = s_old.iter().cloned().fold(s_nn, f64::max);
    let z: f64 = (s_nn - m).exp() + s_old.iter().map(|s| (s - m).exp()).sum::<f64>();
    Ok(-(s_nn - m) + z.ln())
}

/// Per-task autoencoders plus the shared fixed encoder.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct RouterBank {
    pub autoencoders: Vec<Autoencoder>,
    pub lambda: f64,
}

impl RouterBank {
    pub fn new(lambda: f64) -> RouterBank {
        RouterBank { autoencoders: Vec::new(), lambda }
    }

    pub fn task_count(&self) -> usize {
        self.autoencoders.len()
    }
}

struct AeGrads {
    buf: Vec<f64>,
}

impl AeGrads {
    fn zero() -> AeGrads {
        AeGrads { buf: vec![0.0; AE_LEN] }
    }
}

/// Backprop of dL/d(recon) through the autoencoder for one sample.
fn accumulate_grads(ae: &Autoencoder, x: &[f64], d_recon: &[f64], grads: &mut AeGrads) {
    let w = &ae.weights;
    // forward intermediates
    let mut h = vec![0.0; BOTTLENECK];
    for b in 0..BOTTLENECK {
        let mut s = w[B_ENC + b];
        for r in 0..REPR_DIM {
            s += w[W_ENC + b * REPR_DIM + r] * x[r];
        }
        h[b] = s;
    }
    let mut recon = vec![0.0; REPR_DIM];
    for r in 0..REPR_DIM {
        let mut s = w[B_DEC + r];
        for b in 0..BOTTLENECK {
            s += w[W_DEC + r * BOTTLENECK + b] * h[b];
        }
        recon[r] = sigmoid(s);
    }
    // through the sigmoid
    let du: Vec<f64> = (0..REPR_DIM).map(|r| d_recon[r] * recon[r] * (1.0 - recon[r])).collect();
    let mut dh = vec![0.0; BOTTLENECK];
    for r in 0..REPR_DIM {
        grads.buf[B_DEC + r] += du[r];
        for b in 0..BOTTLENECK {
            grads.buf[W_DEC + r * BOTTLENECK + b] += du[r] * h[b];
            dh[b] += du[r] * w[W_DEC + r * BOTTLENECK + b];
        }
    }
    for b in 0..BOTTLENECK {
        grads.buf[B_ENC + b] += dh[b];
        for r in 0..REPR_DIM {
            grads.buf[W_ENC + b * REPR_DIM + r] += dh[b] * x[r];
        }
    }
}

/// Train task `t`'s autoencoder on its representations; earlier autoencoders
/// provide contrastive negatives and stay bit-identical.
pub fn train_router_entry(bank: &mut RouterBank, reprs: &[Vec<f64>], seed: u64) -> Result<()> {
    if reprs.is_empty() {
        return Err(Error::InvalidState("router training needs at least one image".into()));
    }
    let task = bank.task_count() + 1;
    let mut ae = Autoencoder::init(seed, &format!("router/task{task}"));
    let old: Vec<Autoencoder> = bank.autoencoders.clone();
    let mut opt = AdaptiveOpt::new(TRAIN_LR);
    let inv_n = 1.0 / reprs.len() as f64;

    for _ in 0..TRAIN_EPOCHS {
        let mut grads = AeGrads::zero();
        for x in reprs {
            let recon = ae.reconstruct(x)?;
            // MSE term
            let mut d_recon: Vec<f64> =
                (0..REPR_DIM).map(|r| 2.0 * (recon[r] - x[r]) / REPR_DIM as f64).collect();
            if bank.lambda != 0.0 && !old.is_empty() {
                let old_recons: Vec<Vec<f64>> =
                    old.iter().map(|o| o.reconstruct(x)).collect::<Result<_>>()?;
                // softmax weights over similarities, max-shifted
                let s_nn = similarity(&recon, x)? / TEMPERATURE;
                let s_old: Vec<f64> = old_recons
                    .iter()
                    .map(|o| similarity(&recon, o).map(|s| s / TEMPERATURE))
                    .collect::<Result<_>>()?;
                let m = s_old.iter().cloned().fold(s_nn, f64::max);
                let e_nn = (s_nn - m).exp();
                let e_old: Vec<f64> = s_old.iter().map(|s| (s - m).exp()).collect();
                let z = e_nn + e_old.iter().sum::<f64>();
                let p_nn = e_nn / z;

                // d L_con / d s_nn = -(1 - p_nn)/1 (temperature folded into s)
                let mse_nn = mse(&recon, x)?;
                let dsim_nn = -(1.0 - p_nn) / TEMPERATURE;
                let dmse_nn = dsim_nn * (-1.0 / ((mse_nn + SIM_EPS) * (mse_nn + SIM_EPS)));
                for r in 0..REPR_DIM {
                    d_recon[r] +=
                        bank.lambda * dmse_nn * 2.0 * (recon[r] - x[r]) / REPR_DIM as f64;
                }
                for (i, o) in old_recons.iter().enumerate() {
                    let p_i = e_old[i] / z;
                    let mse_i = mse(&recon, o)?;
                    let dsim_i = p_i / TEMPERATURE;
                    let dmse_i = dsim_i * (-1.0 / ((mse_i + SIM_EPS) * (mse_i + SIM_EPS)));
                    for r in 0..REPR_DIM {
                        d_recon[r] +=
                            bank.lambda * dmse_i * 2.0 * (recon[r] - o[r]) / REPR_DIM as f64;
                    }
                }
            }
            for v in &mut d_recon {
                *v *= inv_n;
            }
            accumulate_grads(&ae, x, &d_recon, &mut grads);
        }
        opt.step("router-ae", &mut ae.weights, &grads.buf);
    }
    bank.autoencoders.push(ae);
    Ok(())
}

/// Route to the task whose autoencoder reconstructs the image best; ties go
/// to the lowest task index. Returns the 1-based task and per-task errors.
pub fn route(image: &Vol, bank: &RouterBank) -> Result<(usize, Vec<f64>)> {
    if bank.autoencoders.is_empty() {
        return Err(Error::InvalidState("routing with an empty bank".into()));
    }
    let x = encode_representation(image);
    let errors: Vec<f64> = bank
        .autoencoders
        .iter()
        .map(|ae| reconstruction_error(&x, ae))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, &e) in errors.iter().enumerate() {
        if e < errors[best] {
            best = i;
        }
    }
    Ok((best + 1, errors))
}
