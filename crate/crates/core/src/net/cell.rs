//! Cell execution: the searched DAG unit.
//!
//! Intermediate nodes sum one operation output per incoming edge; the output
//! node concatenates the three intermediates and projects back to the layer
//! width. The `ops` argument gives the effective operation per edge, which
//! lets a supernet cell (all-conv parameter layout) execute any sampled
//! genotype while sharing weights across trials.

use crate::arch::{OpKind, CELL_EDGES, NUM_INPUT_NODES, NUM_INTERMEDIATE_NODES};
use crate::net::blocks::{block_backward, block_forward, BlockCtx};
use crate::net::params::CellLayout;
use crate::tensor::Vol;

pub struct CellCtx {
    /// Node activations: two inputs then three intermediates.
    pub nodes: Vec<Vol>,
    pub edge_ctxs: Vec<Option<BlockCtx>>,
    pub proj_ctx: BlockCtx,
}

fn add_assign(dst: &mut Vol, src: &Vol) {
    debug_assert!(dst.same_shape(src));
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}

pub fn cell_forward(
    params: &mut [f64],
    layout: &CellLayout,
    ops: &[OpKind],
    s0: &Vol,
    s1: &Vol,
    train: bool,
) -> (Vol, CellCtx) {
    debug_assert_eq!(ops.len(), CELL_EDGES.len());
    let mut nodes: Vec<Vol> = vec![s0.clone(), s1.clone()];
    let mut edge_ctxs: Vec<Option<BlockCtx>> = (0..CELL_EDGES.len()).map(|_| None).collect();

    for j in NUM_INPUT_NODES..NUM_INPUT_NODES + NUM_INTERMEDIATE_NODES {
        let mut acc = Vol::zeros(s0.c, s0.d, s0.h, s0.w);
        for (e, &(src, dst)) in CELL_EDGES.iter().enumerate() {
            if dst != j {
                continue;
            }
            match ops[e] {
                OpKind::Skip => add_assign(&mut acc, &nodes[src]),
                _ => {
                    let (spec, off) = layout.edges[e]
                        .expect("conv op sampled on an edge without parameters");
                    let input = nodes[src].clone();
                    let (y, ctx) =
                        block_forward(&mut params[off..off + spec.len()], &spec, &input, train);
                    add_assign(&mut acc, &y);
                    edge_ctxs[e] = Some(ctx);
                }
            }
        }
        nodes.push(acc);
    }

    let concat = Vol::concat_channels(&[&nodes[2], &nodes[3], &nodes[4]]);
    let (proj_spec, proj_off) = layout.proj;
    let (out, proj_ctx) =
        block_forward(&mut params[proj_off..proj_off + proj_spec.len()], &proj_spec, &concat, train);
    (out, CellCtx { nodes, edge_ctxs, proj_ctx })
}

/// Inference-only forward with frozen statistics; allocates no contexts.
pub fn cell_forward_eval(
    params: &[f64],
    layout: &CellLayout,
    ops: &[OpKind],
    s0: &Vol,
    s1: &Vol,
) -> Vol {
    let mut nodes: Vec<Vol> = vec![s0.clone(), s1.clone()];
    for j in NUM_INPUT_NODES..NUM_INPUT_NODES + NUM_INTERMEDIATE_NODES {
        let mut acc = Vol::zeros(s0.c, s0.d, s0.h, s0.w);
        for (e, &(src, dst)) in CELL_EDGES.iter().enumerate() {
            if dst != j {
                continue;
            }
            match ops[e] {
                OpKind::Skip => add_assign(&mut acc, &nodes[src]),
                _ => {
                    let (spec, off) = layout.edges[e].expect("conv op without parameters");
                    let (y, _) = crate::net::blocks::block_forward_eval(
                        &params[off..off + spec.len()],
                        &spec,
                        &nodes[src],
                    );
                    add_assign(&mut acc, &y);
                }
            }
        }
        nodes.push(acc);
    }
    let concat = Vol::concat_channels(&[&nodes[2], &nodes[3], &nodes[4]]);
    let (proj_spec, proj_off) = layout.proj;
    let (out, _) = crate::net::blocks::block_forward_eval(
        &params[proj_off..proj_off + proj_spec.len()],
        &proj_spec,
        &concat,
    );
    out
}

/// Backward through a cell. Returns gradients for the two cell inputs;
/// parameter gradients accumulate into `grad_buf` when provided.
pub fn cell_backward(
    params: &[f64],
    layout: &CellLayout,
    ops: &[OpKind],
    ctx: &CellCtx,
    grad_out: &Vol,
    mut grad_buf: Option<&mut [f64]>,
) -> (Vol, Vol) {
    let width = ctx.nodes[2].c;
    let (proj_spec, proj_off) = layout.proj;
    let g_concat = block_backward(
        &params[proj_off..proj_off + proj_spec.len()],
        &proj_spec,
        &ctx.proj_ctx,
        grad_out,
        grad_buf.as_deref_mut().map(|b| &mut b[proj_off..proj_off + proj_spec.len()]),
    );

    // split the concat gradient back onto the intermediate nodes
    let mut node_grads: Vec<Vol> = ctx
        .nodes
        .iter()
        .map(|n| Vol::zeros(n.c, n.d, n.h, n.w))
        .collect();
    let spatial = g_concat.spatial();
    for (i, j) in (NUM_INPUT_NODES..NUM_INPUT_NODES + NUM_INTERMEDIATE_NODES).enumerate() {
        let src = &g_concat.data[i * width * spatial..(i + 1) * width * spatial];
        node_grads[j].data.copy_from_slice(src);
    }

    // walk intermediates from the top so every node's gradient is complete
    // before it propagates to its own inputs
    for j in (NUM_INPUT_NODES..NUM_INPUT_NODES + NUM_INTERMEDIATE_NODES).rev() {
        let g_node = node_grads[j].clone();
        for (e, &(src, dst)) in CELL_EDGES.iter().enumerate() {
            if dst != j {
                continue;
            }
            match ops[e] {
                OpKind::Skip => add_assign(&mut node_grads[src], &g_node),
                _ => {
                    let (spec, off) = layout.edges[e].expect("conv op without parameters");
                    let ectx = ctx.edge_ctxs[e].as_ref().expect("missing edge context");
                    let gx = block_backward(
                        &params[off..off + spec.len()],
                        &spec,
                        ectx,
                        &g_node,
                        grad_buf.as_deref_mut().map(|b| &mut b[off..off + spec.len()]),
                    );
                    add_assign(&mut node_grads[src], &gx);
                }
            }
        }
    }

    let g1 = node_grads.swap_remove(1);
    let g0 = node_grads.swap_remove(0);
    (g0, g1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{CellGenotype, Family};
    use crate::net::params::init_cell_params;
    use crate::seeds::rng_for;
    use rand::Rng;

    #[test]
    fn cell_gradients_match_finite_differences() {
        let mut g = CellGenotype::all_conv(Family::Feature);
        g.edges.insert((1, 2), OpKind::Skip);
        g.edges.insert((0, 4), OpKind::Skip);
        let width = 3;
        // width-3 genotype variant for the test
        let layout = CellLayout::new(&g, width);
        let ops = g.ops();
        let mut rng = rng_for(31, "cell-fd");
        let params = init_cell_params(&layout, &mut rng);
        let s0 = Vol::from_vec(width, 1, 4, 4, (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let s1 = Vol::from_vec(width, 1, 4, 4, (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect());

        let loss = |params: &[f64], s0: &Vol, s1: &Vol| -> f64 {
            let mut p = params.to_vec();
            let (y, _) = cell_forward(&mut p, &layout, &ops, s0, s1, true);
            0.5 * y.data.iter().map(|v| v * v).sum::<f64>()
        };

        let mut p = params.clone();
        let (y, ctx) = cell_forward(&mut p, &layout, &ops, &s0, &s1, true);
        let mut grads = vec![0.0; layout.len];
        let (g0, g1) = cell_backward(&params, &layout, &ops, &ctx, &y, Some(&mut grads));

        let eps = 1e-6;
        for idx in [0usize, 17, 47] {
            let mut sp = s0.clone();
            sp.data[idx] += eps;
            let mut sm = s0.clone();
            sm.data[idx] -= eps;
            let num = (loss(&params, &sp, &s1) - loss(&params, &sm, &s1)) / (2.0 * eps);
            assert!((g0.data[idx] - num).abs() < 1e-5, "s0[{idx}]");

            let mut sp = s1.clone();
            sp.data[idx] += eps;
            let mut sm = s1.clone();
            sm.data[idx] -= eps;
            let num = (loss(&params, &s0, &sp) - loss(&params, &s0, &sm)) / (2.0 * eps);
            assert!((g1.data[idx] - num).abs() < 1e-5, "s1[{idx}]");
        }
        for idx in [0usize, layout.len / 2, layout.len - 3 * width - 1] {
            let mut pp = params.clone();
            pp[idx] += eps;
            let mut pm = params.clone();
            pm[idx] -= eps;
            let num = (loss(&pp, &s0, &s1) - loss(&pm, &s0, &s1)) / (2.0 * eps);
            assert!(
                (grads[idx] - num).abs() < 1e-5,
                "param {idx}: analytic {} numeric {num}",
                grads[idx]
            );
        }
    }

    #[test]
    fn all_skip_cell_still_projects() {
        let g = CellGenotype::all_skip(Family::Feature);
        let layout = CellLayout::new(&g, 4);
        let mut rng = rng_for(32, "cell-skip");
        let mut params = init_cell_params(&layout, &mut rng);
        let s0 = Vol::from_vec(4, 1, 3, 3, (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let s1 = Vol::from_vec(4, 1, 3, 3, (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (y, _) = cell_forward(&mut params, &layout, &g.ops(), &s0, &s1, false);
        assert_eq!((y.c, y.h, y.w), (4, 3, 3));
    }
}
