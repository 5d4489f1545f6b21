//! Conv block execution: convolution + affine normalization + leaky rectifier,
//! with explicit backward passes over flat parameter buffers.

use crate::net::params::{block_grad_slots, block_view, block_view_mut, BlockSpec};
use crate::tensor::{
    conv_backward, conv_forward, leaky_relu, leaky_relu_backward, norm_backward_eval,
    norm_backward_train, norm_forward_eval, norm_forward_train, NormCtx, Vol,
};

pub struct BlockCtx {
    /// Convolution input, kept for the weight-gradient pass.
    pub x: Vol,
    /// Present iff the forward ran in training mode (batch statistics).
    pub norm: Option<NormCtx>,
    /// Block output; its sign drives the activation backward.
    pub y: Vol,
}

/// Forward in training mode: batch-statistic normalization with a running
/// update. `params` must be the block's slice of its unit buffer.
pub fn block_forward_train(params: &mut [f64], spec: &BlockSpec, x: &Vol) -> (Vol, BlockCtx) {
    let v = block_view_mut(params, spec);
    let z = conv_forward(x, v.w, v.b, &spec.shape);
    let (n, norm_ctx) = if spec.norm {
        let (n, ctx) = norm_forward_train(&z, v.gamma, v.beta, v.running_mean, v.running_var);
        (n, Some(ctx))
    } else {
        (z, None)
    };
    let y = if spec.act { leaky_relu(&n) } else { n };
    let ctx = BlockCtx { x: x.clone(), norm: norm_ctx, y: y.clone() };
    (y, ctx)
}

/// Forward with frozen statistics (inference, or any frozen unit).
pub fn block_forward_eval(params: &[f64], spec: &BlockSpec, x: &Vol) -> (Vol, BlockCtx) {
    let v = block_view(params, spec);
    let z = conv_forward(x, v.w, v.b, &spec.shape);
    let n = if spec.norm {
        norm_forward_eval(&z, v.gamma, v.beta, v.running_mean, v.running_var)
    } else {
        z
    };
    let y = if spec.act { leaky_relu(&n) } else { n };
    let ctx = BlockCtx { x: x.clone(), norm: None, y: y.clone() };
    (y, ctx)
}

pub fn block_forward(params: &mut [f64], spec: &BlockSpec, x: &Vol, train: bool) -> (Vol, BlockCtx) {
    if train {
        block_forward_train(params, spec, x)
    } else {
        block_forward_eval(params, spec, x)
    }
}

/// Backward through one block. Returns the input gradient; when `grad_out_buf`
/// is given, parameter gradients are accumulated into the block's slots.
/// The normalization branch follows the forward: training statistics if the
/// context carries them, frozen statistics otherwise.
pub fn block_backward(
    params: &[f64],
    spec: &BlockSpec,
    ctx: &BlockCtx,
    grad_out: &Vol,
    grad_out_buf: Option<&mut [f64]>,
) -> Vol {
    let v = block_view(params, spec);
    let g_act = if spec.act { leaky_relu_backward(&ctx.y, grad_out) } else { grad_out.clone() };

    let mut norm_grads = None;
    let g_conv_out = if spec.norm {
        match &ctx.norm {
            Some(nctx) => {
                let (gx, ng) = norm_backward_train(nctx, v.gamma, &g_act);
                norm_grads = Some(ng);
                gx
            }
            None => norm_backward_eval(v.gamma, v.running_var, &g_act),
        }
    } else {
        g_act
    };

    let want = grad_out_buf.is_some();
    let (gx, conv_grads) = conv_backward(&ctx.x, v.w, &spec.shape, &g_conv_out, want);

    if let Some(buf) = grad_out_buf {
        let slots = block_grad_slots(buf, spec);
        let cg = conv_grads.expect("param grads requested");
        for (dst, src) in slots.w.iter_mut().zip(&cg.w) {
            *dst += src;
        }
        for (dst, src) in slots.b.iter_mut().zip(&cg.b) {
            *dst += src;
        }
        if let Some(ng) = norm_grads {
            for (dst, src) in slots.gamma.iter_mut().zip(&ng.gamma) {
                *dst += src;
            }
            for (dst, src) in slots.beta.iter_mut().zip(&ng.beta) {
                *dst += src;
            }
        }
    }
    gx
}
