//! Training losses and their gradients with respect to the disparity map.
//!
//! The supervised loss is a masked smooth-l1 on disparity. The
//! self-supervised loss combines an SSIM + l1 photometric term on the
//! warped right image with an edge-aware first-order smoothness term.
//! Each loss returns `(value, d value / d disparity)` so the caller can chain
//! into the network backward pass; the gradients are verified against central
//! finite differences in the acceptance suite.

use crate::error::{Error, Result};
use crate::tensor::{Grid, Mask, Vol};

pub const SSIM_C1: f64 = 1e-4; // 0.01^2
pub const SSIM_C2: f64 = 9e-4; // 0.03^2
pub const PHOTO_ALPHA: f64 = 0.85;
pub const SMOOTH_WEIGHT: f64 = 0.1;

/// rho(e) = 0.5 e^2 for |e| < 1, |e| - 0.5 otherwise; mean over valid pixels.
pub fn smooth_l1_loss(pred: &Grid, gt: &Grid, mask: &Mask) -> Result<(f64, Grid)> {
    if pred.h != gt.h || pred.w != gt.w || pred.h != mask.h || pred.w != mask.w {
        return Err(Error::ShapeMismatch("smooth_l1 inputs".into()));
    }
    let n = mask.count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Grid::zeros(pred.h, pred.w);
    for i in 0..pred.data.len() {
        if !mask.data[i] {
            continue;
        }
        let e = pred.data[i] - gt.data[i];
        if e.abs() < 1.0 {
            loss += 0.5 * e * e;
            grad.data[i] = e * inv_n;
        } else {
            loss += e.abs() - 0.5;
            grad.data[i] = e.signum() * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Reconstruct the left view by sampling the right image at x - d with
/// bilinear horizontal interpolation. Samples outside the image are flagged
/// invalid and filled by edge clamping.
pub fn warp_right_to_left(right: &Vol, disparity: &Grid) -> Result<(Vol, Mask)> {
    if right.h != disparity.h || right.w != disparity.w {
        return Err(Error::ShapeMismatch("warp image/disparity".into()));
    }
    let (h, w) = (disparity.h, disparity.w);
    let mut out = Vol::zeros(right.c, 1, h, w);
    let mut mask = Mask::filled(h, w, false);
    for y in 0..h {
        for x in 0..w {
            let xr = x as f64 - disparity.at(y, x);
            let valid = xr >= 0.0 && xr <= (w - 1) as f64;
            mask.set(y, x, valid);
            let xc = xr.clamp(0.0, (w - 1) as f64);
            let x0 = xc.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let f = xc - x0 as f64;
            for c in 0..right.c {
                let v = (1.0 - f) * right.at(c, 0, y, x0) + f * right.at(c, 0, y, x1);
                *out.at_mut(c, 0, y, x) = v;
            }
        }
    }
    Ok((out, mask))
}

/// d warped / d disparity at each pixel: zero where the sample clamps.
fn warp_disparity_jacobian(right: &Vol, disparity: &Grid) -> Vol {
    let (h, w) = (disparity.h, disparity.w);
    let mut jac = Vol::zeros(right.c, 1, h, w);
    for y in 0..h {
        for x in 0..w {
            let xr = x as f64 - disparity.at(y, x);
            if xr < 0.0 || xr > (w - 1) as f64 {
                continue;
            }
            let x0 = (xr.floor() as usize).min(w - 2);
            let x1 = x0 + 1;
            for c in 0..right.c {
                *jac.at_mut(c, 0, y, x) = -(right.at(c, 0, y, x1) - right.at(c, 0, y, x0));
            }
        }
    }
    jac
}

/// 3x3 box mean over interior positions; the border ring stays zero.
fn box3_valid(src: &Grid) -> Grid {
    let (h, w) = (src.h, src.w);
    let mut out = Grid::zeros(h, w);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut s = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    s += src.at(y + dy - 1, x + dx - 1);
                }
            }
            *out.at_mut(y, x) = s / 9.0;
        }
    }
    out
}

/// Transpose of [`box3_valid`]: scatter interior values onto their windows.
fn box3_valid_transpose(src: &Grid) -> Grid {
    let (h, w) = (src.h, src.w);
    let mut out = Grid::zeros(h, w);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let v = src.at(y, x) / 9.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    *out.at_mut(y + dy - 1, x + dx - 1) += v;
                }
            }
        }
    }
    out
}

fn channel_grid(v: &Vol, c: usize) -> Grid {
    Grid { h: v.h, w: v.w, data: v.channel(c).to_vec() }
}

struct PhotoResult {
    loss: f64,
    /// Gradient with respect to the reconstructed image.
    grad_recon: Vol,
}

/// Masked SSIM + l1 photometric term. SSIM statistics use 3x3 windows over
/// interior pixels; the mean runs over interior pixels whose warp sample was
/// in range.
fn photometric(left: &Vol, recon: &Vol, valid: &Mask) -> PhotoResult {
    let (h, w) = (left.h, left.w);
    let mut support = Mask::filled(h, w, false);
    let mut n = 0usize;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            if valid.at(y, x) {
                support.set(y, x, true);
                n += 1;
            }
        }
    }
    if n == 0 {
        return PhotoResult { loss: 0.0, grad_recon: Vol::zeros(left.c, 1, h, w) };
    }
    let norm = 1.0 / (left.c as f64 * n as f64);
    let mut loss = 0.0;
    let mut grad_recon = Vol::zeros(left.c, 1, h, w);

    for c in 0..left.c {
        let xg = channel_grid(left, c);
        let yg = channel_grid(recon, c);
        let x2: Grid = Grid { h, w, data: xg.data.iter().map(|v| v * v).collect() };
        let y2: Grid = Grid { h, w, data: yg.data.iter().map(|v| v * v).collect() };
        let xy: Grid = Grid { h, w, data: xg.data.iter().zip(&yg.data).map(|(a, b)| a * b).collect() };
        let mu_x = box3_valid(&xg);
        let mu_y = box3_valid(&yg);
        let ex2 = box3_valid(&x2);
        let ey2 = box3_valid(&y2);
        let exy = box3_valid(&xy);

        let mut g_mu = Grid::zeros(h, w);
        let mut g_ey2 = Grid::zeros(h, w);
        let mut g_exy = Grid::zeros(h, w);

        for y in 1..h - 1 {
            for x in 1..w - 1 {
                if !support.at(y, x) {
                    continue;
                }
                let (mx, my) = (mu_x.at(y, x), mu_y.at(y, x));
                let sx2 = ex2.at(y, x) - mx * mx;
                let sy2 = ey2.at(y, x) - my * my;
                let sxy = exy.at(y, x) - mx * my;
                let a1 = 2.0 * mx * my + SSIM_C1;
                let a2 = 2.0 * sxy + SSIM_C2;
                let b1 = mx * mx + my * my + SSIM_C1;
                let b2 = sx2 + sy2 + SSIM_C2;
                let s = (a1 * a2) / (b1 * b2);

                let l1 = (xg.at(y, x) - yg.at(y, x)).abs();
                loss += norm * (PHOTO_ALPHA * (1.0 - s) / 2.0 + (1.0 - PHOTO_ALPHA) * l1);

                // direct l1 gradient at the centre pixel
                let sign = (yg.at(y, x) - xg.at(y, x)).signum();
                *grad_recon.at_mut(c, 0, y, x) += norm * (1.0 - PHOTO_ALPHA) * sign;

                // SSIM gradient through the filtered statistics
                let base = -norm * PHOTO_ALPHA / 2.0;
                *g_mu.at_mut(y, x) =
                    base * s * (2.0 * mx / a1 - 2.0 * mx / a2 - 2.0 * my / b1 + 2.0 * my / b2);
                *g_ey2.at_mut(y, x) = base * (-s / b2);
                *g_exy.at_mut(y, x) = base * (2.0 * s / a2);
            }
        }

        let t_mu = box3_valid_transpose(&g_mu);
        let t_ey2 = box3_valid_transpose(&g_ey2);
        let t_exy = box3_valid_transpose(&g_exy);
        let gr = grad_recon.channel_mut(c);
        for i in 0..gr.len() {
            gr[i] += t_mu.data[i] + 2.0 * yg.data[i] * t_ey2.data[i] + xg.data[i] * t_exy.data[i];
        }
    }
    PhotoResult { loss, grad_recon }
}

/// Edge-aware first-order smoothness: |grad d| weighted by exp(-|grad I|),
/// image gradients averaged over channels, forward differences, means over
/// the horizontal and vertical difference sets.
fn smoothness(left: &Vol, disparity: &Grid) -> (f64, Grid) {
    let (h, w) = (disparity.h, disparity.w);
    let c = left.c as f64;
    let nx = (h * (w - 1)) as f64;
    let ny = ((h - 1) * w) as f64;
    let mut loss = 0.0;
    let mut grad = Grid::zeros(h, w);
    for y in 0..h {
        for x in 0..w - 1 {
            let dd = disparity.at(y, x + 1) - disparity.at(y, x);
            let mut ig = 0.0;
            for ch in 0..left.c {
                ig += (left.at(ch, 0, y, x + 1) - left.at(ch, 0, y, x)).abs();
            }
            let wgt = (-ig / c).exp();
            loss += dd.abs() * wgt / nx;
            let s = dd.signum() * wgt / nx;
            *grad.at_mut(y, x + 1) += s;
            *grad.at_mut(y, x) -= s;
        }
    }
    for y in 0..h - 1 {
        for x in 0..w {
            let dd = disparity.at(y + 1, x) - disparity.at(y, x);
            let mut ig = 0.0;
            for ch in 0..left.c {
                ig += (left.at(ch, 0, y + 1, x) - left.at(ch, 0, y, x)).abs();
            }
            let wgt = (-ig / c).exp();
            loss += dd.abs() * wgt / ny;
            let s = dd.signum() * wgt / ny;
            *grad.at_mut(y + 1, x) += s;
            *grad.at_mut(y, x) -= s;
        }
    }
    (loss, grad)
}

/// L_self = L_photo + 0.1 * L_smooth, with its gradient w.r.t. disparity.
pub fn self_supervised_loss(left: &Vol, right: &Vol, pred: &Grid) -> Result<(f64, Grid)> {
    if left.h != pred.h || left.w != pred.w {
        return Err(Error::ShapeMismatch("image/disparity".into()));
    }
    let (recon, valid) = warp_right_to_left(right, pred)?;
    let photo = photometric(left, &recon, &valid);
    let jac = warp_disparity_jacobian(right, pred);

    let (h, w) = (pred.h, pred.w);
    let mut grad = Grid::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut g = 0.0;
            for c in 0..left.c {
                g += photo.grad_recon.at(c, 0, y, x) * jac.at(c, 0, y, x);
            }
            *grad.at_mut(y, x) = g;
        }
    }

    let (s_loss, s_grad) = smoothness(left, pred);
    for i in 0..grad.data.len() {
        grad.data[i] += SMOOTH_WEIGHT * s_grad.data[i];
    }
    Ok((photo.loss + SMOOTH_WEIGHT * s_loss, grad))
}

/// Photometric value alone (diagnostics and tests).
pub fn photometric_loss(left: &Vol, right: &Vol, pred: &Grid) -> Result<f64> {
    let (recon, valid) = warp_right_to_left(right, pred)?;
    Ok(photometric(left, &recon, &valid).loss)
}

/// Supervision mask: ground truth valid and strictly inside (0, max_disparity).
pub fn supervision_mask(gt: &Grid, gt_mask: Option<&Mask>, max_disparity: f64) -> Mask {
    let mut m = Mask::filled(gt.h, gt.w, false);
    for i in 0..gt.data.len() {
        let base = gt_mask.map_or(true, |mm| mm.data[i]);
        let d = gt.data[i];
        m.data[i] = base && d > 0.0 && d < max_disparity;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_for;
    use rand::Rng;

    #[test]
    fn smooth_l1_known_values() {
        let gt = Grid::constant(1, 1, 3.0);
        let mask = Mask::filled(1, 1, true);
        let (l, _) = smooth_l1_loss(&Grid::constant(1, 1, 3.0), &gt, &mask).unwrap();
        assert_eq!(l, 0.0);
        let (l, _) = smooth_l1_loss(&Grid::constant(1, 1, 5.0), &gt, &mask).unwrap();
        assert!((l - 1.5).abs() < 1e-12); // |e| - 0.5 at e = 2
        let (l, _) = smooth_l1_loss(&Grid::constant(1, 1, 3.5), &gt, &mask).unwrap();
        assert!((l - 0.125).abs() < 1e-12); // 0.5 e^2 at e = 0.5
        let empty = Mask::filled(1, 1, false);
        assert!(smooth_l1_loss(&gt, &gt, &empty).is_err());
    }

    #[test]
    fn warp_zero_disparity_is_identity() {
        let mut rng = rng_for(41, "warp-id");
        let right = Vol::from_vec(3, 1, 4, 6, (0..72).map(|_| rng.gen()).collect());
        let (out, mask) = warp_right_to_left(&right, &Grid::zeros(4, 6)).unwrap();
        assert_eq!(out.data, right.data);
        assert_eq!(mask.count(), 24);
    }

    #[test]
    fn warp_shifted_pair_reconstructs_interior() {
        // right(y, u) = left(y, u + 4): constant disparity 4
        let mut rng = rng_for(42, "warp-shift");
        let (h, w) = (6, 16);
        let wide: Vec<f64> = (0..h * (w + 4)).map(|_| rng.gen()).collect();
        let mut left = Vol::zeros(1, 1, h, w);
        let mut right = Vol::zeros(1, 1, h, w);
        for y in 0..h {
            for x in 0..w {
                *left.at_mut(0, 0, y, x) = wide[y * (w + 4) + x];
                *right.at_mut(0, 0, y, x) = wide[y * (w + 4) + x + 4];
            }
        }
        let disp = Grid::constant(h, w, 4.0);
        let (recon, mask) = warp_right_to_left(&right, &disp).unwrap();
        for y in 0..h {
            for x in 4..w {
                assert!(mask.at(y, x));
                assert!((recon.at(0, 0, y, x) - left.at(0, 0, y, x)).abs() < 1e-6);
            }
            assert!(!mask.at(y, 0));
        }
    }

    #[test]
    fn warp_bilinear_value_is_closed_form() {
        // a horizontal ramp: right(y, x) = x; disparity 2.5 samples x - 2.5
        let (h, w) = (2, 8);
        let mut right = Vol::zeros(1, 1, h, w);
        for y in 0..h {
            for x in 0..w {
                *right.at_mut(0, 0, y, x) = x as f64;
            }
        }
        let (recon, _) = warp_right_to_left(&right, &Grid::constant(h, w, 2.5)).unwrap();
        assert!((recon.at(0, 0, 1, 5) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn self_supervised_zero_when_views_identical() {
        let mut rng = rng_for(43, "selfsup-zero");
        let img = Vol::from_vec(3, 1, 6, 8, (0..144).map(|_| rng.gen()).collect());
        let pred = Grid::zeros(6, 8);
        // identical views at zero disparity: photometric exactly zero
        let photo = photometric_loss(&img, &img, &pred).unwrap();
        assert!(photo.abs() < 1e-12);
        // constant disparity: smoothness exactly zero
        let (s, _) = smoothness(&img, &Grid::constant(6, 8, 3.0));
        assert_eq!(s, 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng_for(44, "loss-fd");
        let (h, w) = (8, 8);
        let left = Vol::from_vec(3, 1, h, w, (0..3 * h * w).map(|_| rng.gen()).collect());
        let right = Vol::from_vec(3, 1, h, w, (0..3 * h * w).map(|_| rng.gen()).collect());
        let pred = Grid::from_vec(h, w, (0..h * w).map(|_| rng.gen_range(0.3..3.7)).collect());

        let (_, grad) = self_supervised_loss(&left, &right, &pred).unwrap();
        let eps = 1e-5;
        let mut max_rel: f64 = 0.0;
        for i in 0..pred.data.len() {
            let mut p = pred.clone();
            p.data[i] += eps;
            let (lp, _) = self_supervised_loss(&left, &right, &p).unwrap();
            p.data[i] -= 2.0 * eps;
            let (lm, _) = self_supervised_loss(&left, &right, &p).unwrap();
            let num = (lp - lm) / (2.0 * eps);
            let rel = (grad.data[i] - num).abs() / num.abs().max(1e-6);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-4, "max rel err {max_rel}");

        // smooth_l1 too
        let gt = Grid::from_vec(h, w, (0..h * w).map(|_| rng.gen_range(0.0..4.0)).collect());
        let mask = Mask::filled(h, w, true);
        let (_, grad) = smooth_l1_loss(&pred, &gt, &mask).unwrap();
        for i in (0..pred.data.len()).step_by(7) {
            let mut p = pred.clone();
            p.data[i] += eps;
            let (lp, _) = smooth_l1_loss(&p, &gt, &mask).unwrap();
            p.data[i] -= 2.0 * eps;
            let (lm, _) = smooth_l1_loss(&p, &gt, &mask).unwrap();
            let num = (lp - lm) / (2.0 * eps);
            assert!((grad.data[i] - num).abs() / num.abs().max(1e-6) < 1e-4);
        }
    }
}
