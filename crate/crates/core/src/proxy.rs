//! Proxy supervision: transfer the color statistics of labeled synthetic
//! pairs toward a target scene, keeping geometry untouched.
//!
//! The transfer is single-step global moment matching in a decorrelated
//! log-opponent color space: per channel, shift and scale so the source
//! statistics match the target's. Both views of a pair transfer with the
//! same parameters, so ground-truth disparities carry over unchanged.

use crate::error::{Error, Result};
use crate::scene::{SceneDataset, StereoPair};
use crate::tensor::Vol;

/// Per-channel mean and standard deviation in the decorrelated space.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ColorStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

const LMS_FLOOR: f64 = 1e-6;

/// RGB (values in [0, 1]) to the log-opponent space, per pixel.
pub fn rgb_to_lab(image: &Vol) -> Vol {
    let mut out = Vol::zeros(3, 1, image.h, image.w);
    let n = image.spatial();
    let (r, g, b) = (image.channel(0), image.channel(1), image.channel(2));
    for i in 0..n {
        let (rv, gv, bv) = (r[i], g[i], b[i]);
        let l = (0.3811 * rv + 0.5783 * gv + 0.0402 * bv).max(LMS_FLOOR).log10();
        let m = (0.1967 * rv + 0.7244 * gv + 0.0782 * bv).max(LMS_FLOOR).log10();
        let s = (0.0241 * rv + 0.1288 * gv + 0.8444 * bv).max(LMS_FLOOR).log10();
        out.channel_mut(0)[i] = (l + m + s) / 3f64.sqrt();
        out.channel_mut(1)[i] = (l + m - 2.0 * s) / 6f64.sqrt();
        out.channel_mut(2)[i] = (l - m) / 2f64.sqrt();
    }
    out
}

/// Back to RGB, clipped to [0, 1].
pub fn lab_to_rgb(lab: &Vol) -> Vol {
    let mut out = Vol::zeros(3, 1, lab.h, lab.w);
    let n = lab.spatial();
    let (lc, ac, bc) = (lab.channel(0), lab.channel(1), lab.channel(2));
    for i in 0..n {
        let l = lc[i] / 3f64.sqrt() + ac[i] / 6f64.sqrt() + bc[i] / 2f64.sqrt();
        let m = lc[i] / 3f64.sqrt() + ac[i] / 6f64.sqrt() - bc[i] / 2f64.sqrt();
        let s = lc[i] / 3f64.sqrt() - 2.0 * ac[i] / 6f64.sqrt();
        let (lv, mv, sv) = (10f64.powf(l), 10f64.powf(m), 10f64.powf(s));
        // exact inverse of the forward RGB -> LMS matrix
        let r = 4.4686698634962552 * lv - 3.5886759034721267 * mv + 0.11960436657860116 * sv;
        let g = -1.2197166276177631 * lv + 2.3830879129554567 * mv - 0.16263011175140055 * sv;
        let b = 0.058508476938545856 * lv - 0.26107843902769368 * mv + 1.2056659085256229 * sv;
        out.channel_mut(0)[i] = r.clamp(0.0, 1.0);
        out.channel_mut(1)[i] = g.clamp(0.0, 1.0);
        out.channel_mut(2)[i] = b.clamp(0.0, 1.0);
    }
    out
}

/// Pooled per-channel statistics over every pixel of every image.
pub fn scene_color_stats(images: &[&Vol]) -> Result<ColorStats> {
    if images.is_empty() {
        return Err(Error::Domain("color statistics need at least one image".into()));
    }
    lab_stats_of(&images.iter().map(|img| rgb_to_lab(img)).collect::<Vec<_>>())
}

/// Statistics over volumes already in the decorrelated space.
pub fn lab_stats_of(labs: &[Vol]) -> Result<ColorStats> {
    if labs.is_empty() {
        return Err(Error::Domain("color statistics need at least one image".into()));
    }
    let mut mean = [0.0; 3];
    let mut count = 0usize;
    for lab in labs {
        for c in 0..3 {
            mean[c] += lab.channel(c).iter().sum::<f64>();
        }
        count += lab.spatial();
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = [0.0; 3];
    for lab in labs {
        for c in 0..3 {
            var[c] += lab.channel(c).iter().map(|v| (v - mean[c]) * (v - mean[c])).sum::<f64>();
        }
    }
    let mut std = [0.0; 3];
    for c in 0..3 {
        std[c] = (var[c] / count as f64).sqrt();
    }
    Ok(ColorStats { mean, std })
}

/// Affine moment matching in the decorrelated space. Channels whose source
/// deviation vanishes keep unit scale and only shift their mean.
pub fn transfer_lab(lab: &Vol, source: &ColorStats, target: &ColorStats) -> Vol {
    let mut out = lab.clone();
    for c in 0..3 {
        let scale = if source.std[c] > 0.0 { target.std[c] / source.std[c] } else { 1.0 };
        let (mu_s, mu_t) = (source.mean[c], target.mean[c]);
        for v in out.channel_mut(c) {
            *v = (*v - mu_s) * scale + mu_t;
        }
    }
    out
}

/// Full transfer: into the decorrelated space, moment matching, back to RGB
/// with clipping.
pub fn color_transfer(image: &Vol, source: &ColorStats, target: &ColorStats) -> Vol {
    lab_to_rgb(&transfer_lab(&rgb_to_lab(image), source, target))
}

/// Euclidean distance between channel-mean vectors; the scene-gap measure.
pub fn mean_color_distance(a: &ColorStats, b: &ColorStats) -> f64 {
    (0..3).map(|c| (a.mean[c] - b.mean[c]).powi(2)).sum::<f64>().sqrt()
}

/// Synthetic pairs restyled toward a target scene, geometry untouched.
#[derive(Debug, Clone)]
pub struct ProxyDataset {
    pub pairs: Vec<StereoPair>,
    pub source_tag: String,
    pub target_tag: String,
    pub source_stats: ColorStats,
    pub target_stats: ColorStats,
}

/// Transfer every synthetic pair toward the color statistics of the real
/// scene's images. Ground-truth disparities are required and copied bitwise.
pub fn build_proxy_dataset(
    synthetic: &SceneDataset,
    real_images: &[&Vol],
    target_tag: &str,
) -> Result<ProxyDataset> {
    if synthetic.train.iter().chain(&synthetic.test).any(|p| p.gt_disparity.is_none()) {
        return Err(Error::InvalidState("proxy source needs ground-truth disparity".into()));
    }
    let source_views: Vec<&Vol> = synthetic
        .train
        .iter()
        .chain(&synthetic.test)
        .flat_map(|p| [&p.left, &p.right])
        .collect();
    let source_stats = scene_color_stats(&source_views)?;
    let target_stats = scene_color_stats(real_images)?;

    let transfer_pair = |p: &StereoPair| StereoPair {
        left: color_transfer(&p.left, &source_stats, &target_stats),
        right: color_transfer(&p.right, &source_stats, &target_stats),
        gt_disparity: p.gt_disparity.clone(),
        gt_mask: p.gt_mask.clone(),
    };
    let pairs: Vec<StereoPair> =
        synthetic.train.iter().chain(&synthetic.test).map(transfer_pair).collect();
    Ok(ProxyDataset {
        pairs,
        source_tag: synthetic.spec.name.clone(),
        target_tag: target_tag.to_string(),
        source_stats,
        target_stats,
    })
}

/// Provenance manifest for an on-disk proxy dataset.
pub fn provenance_manifest(ds: &ProxyDataset) -> String {
    let mut s = String::new();
    s.push_str(&format!("source: {}\n", ds.source_tag));
    s.push_str(&format!("target: {}\n", ds.target_tag));
    for (label, st) in [("source_stats", &ds.source_stats), ("target_stats", &ds.target_stats)] {
        s.push_str(&format!(
            "{label}: mean {:.12} {:.12} {:.12} std {:.12} {:.12} {:.12}\n",
            st.mean[0], st.mean[1], st.mean[2], st.std[0], st.std[1], st.std[2]
        ));
    }
    s
}
