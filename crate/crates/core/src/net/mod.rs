//! Executable differentiable stereo networks.

pub mod blocks;
pub mod cell;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;

pub use loss::{self_supervised_loss, smooth_l1_loss, supervision_mask, warp_right_to_left};
pub use model::{build_cost_volume, regress_disparity, CellExec, ForwardCtx, GradSet, ModelExec};
pub use optim::AdaptiveOpt;
pub use params::{AdapterLayout, CellLayout};

use crate::error::Result;
use crate::scene::StereoPair;
use crate::tensor::Grid;

/// Which objective drives a training phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LossKind {
    Supervised,
    SelfSupervised,
}

/// One optimizer step on one stereo pair. Returns the loss value.
pub fn train_step(
    exec: &mut ModelExec,
    opt: &mut AdaptiveOpt,
    pair: &StereoPair,
    loss_kind: LossKind,
) -> Result<f64> {
    let (pred, ctx) = exec.forward(&pair.left, &pair.right, true)?;
    let (loss, grad) = match loss_kind {
        LossKind::Supervised => {
            let gt = pair
                .gt_disparity
                .as_ref()
                .ok_or_else(|| crate::Error::InvalidState("supervised step without ground truth".into()))?;
            let mask = supervision_mask(gt, pair.gt_mask.as_ref(), exec.topo.max_disparity as f64);
            smooth_l1_loss(&pred, gt, &mask)?
        }
        LossKind::SelfSupervised => self_supervised_loss(&pair.left, &pair.right, &pred)?,
    };
    let grads = exec.backward(&ctx, &grad);
    if let Some(g) = grads.adapter {
        opt.step(&exec.adapter_id, &mut exec.adapter, &g);
    }
    for (cell, g) in exec.cells.iter_mut().zip(grads.cells) {
        if let Some(g) = g {
            opt.step(&cell.id, &mut cell.params, &g);
        }
    }
    Ok(loss)
}

/// One pass over the pairs in order.
pub fn train_epoch(
    exec: &mut ModelExec,
    opt: &mut AdaptiveOpt,
    pairs: &[StereoPair],
    loss_kind: LossKind,
) -> Result<f64> {
    let mut total = 0.0;
    for pair in pairs {
        total += train_step(exec, opt, pair, loss_kind)?;
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Deterministic inference with frozen statistics.
pub fn predict(exec: &ModelExec, pair: &StereoPair) -> Result<Grid> {
    exec.forward_eval(&pair.left, &pair.right)
}

/// Inference over a batch, parallel across pairs. Outputs are positionally
/// ordered and bit-identical to sequential evaluation.
pub fn predict_batch(exec: &ModelExec, pairs: &[StereoPair]) -> Result<Vec<Grid>> {
    use rayon::prelude::*;
    pairs.par_iter().map(|p| predict(exec, p)).collect()
}
