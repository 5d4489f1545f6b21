//! Flat parameter buffers and their layouts.
//!
//! Every unit (a cell instance, a task's adapter stack, a router autoencoder)
//! owns one flat `Vec<f64>`. Layouts map structured views (conv weights,
//! biases, normalization parameters, running statistics) onto ranges of that
//! buffer. Flat buffers make freezing trivial (never hand out `&mut`),
//! checkpointing exact (concatenate buffers, record offsets), and the
//! optimizer a single elementwise walk.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{CellGenotype, Family, NetworkTopology, OpKind, CELL_EDGES, NUM_INTERMEDIATE_NODES};
use crate::tensor::ConvShape;

/// One conv block: convolution, optionally followed by per-channel affine
/// normalization and the leaky rectifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub shape: ConvShape,
    pub norm: bool,
    pub act: bool,
}

impl BlockSpec {
    pub fn len(&self) -> usize {
        let co = self.shape.co;
        self.shape.weight_len() + co + if self.norm { 4 * co } else { 0 }
    }
}

/// Borrowed structured view over one block's parameters.
pub struct BlockView<'a> {
    pub w: &'a [f64],
    pub b: &'a [f64],
    pub gamma: &'a [f64],
    pub beta: &'a [f64],
    pub running_mean: &'a [f64],
    pub running_var: &'a [f64],
}

/// Mutable view; only the running statistics are written during forward.
pub struct BlockViewMut<'a> {
    pub w: &'a [f64],
    pub b: &'a [f64],
    pub gamma: &'a [f64],
    pub beta: &'a [f64],
    pub running_mean: &'a mut [f64],
    pub running_var: &'a mut [f64],
}

pub fn block_view<'a>(params: &'a [f64], spec: &BlockSpec) -> BlockView<'a> {
    let co = spec.shape.co;
    let wl = spec.shape.weight_len();
    let (w, rest) = params.split_at(wl);
    let (b, rest) = rest.split_at(co);
    if spec.norm {
        let (gamma, rest) = rest.split_at(co);
        let (beta, rest) = rest.split_at(co);
        let (rm, rv) = rest.split_at(co);
        BlockView { w, b, gamma, beta, running_mean: rm, running_var: &rv[..co] }
    } else {
        BlockView { w, b, gamma: &[], beta: &[], running_mean: &[], running_var: &[] }
    }
}

pub fn block_view_mut<'a>(params: &'a mut [f64], spec: &BlockSpec) -> BlockViewMut<'a> {
    let co = spec.shape.co;
    let wl = spec.shape.weight_len();
    let (w, rest) = params.split_at_mut(wl);
    let (b, rest) = rest.split_at_mut(co);
    if spec.norm {
        let (gamma, rest) = rest.split_at_mut(co);
        let (beta, rest) = rest.split_at_mut(co);
        let (rm, rest) = rest.split_at_mut(co);
        let rv = &mut rest[..co];
        BlockViewMut { w, b, gamma, beta, running_mean: rm, running_var: rv }
    } else {
        BlockViewMut { w, b, gamma: &[], beta: &[], running_mean: &mut [], running_var: &mut [] }
    }
}

/// Write gradient slices for one block into a flat gradient buffer.
/// Running-statistic slots stay zero: they are state, not parameters.
pub struct BlockGradSlots<'a> {
    pub w: &'a mut [f64],
    pub b: &'a mut [f64],
    pub gamma: &'a mut [f64],
    pub beta: &'a mut [f64],
}

pub fn block_grad_slots<'a>(grads: &'a mut [f64], spec: &BlockSpec) -> BlockGradSlots<'a> {
    let co = spec.shape.co;
    let wl = spec.shape.weight_len();
    let (w, rest) = grads.split_at_mut(wl);
    let (b, rest) = rest.split_at_mut(co);
    if spec.norm {
        let (gamma, rest) = rest.split_at_mut(co);
        let (beta, _) = rest.split_at_mut(co);
        BlockGradSlots { w, b, gamma, beta }
    } else {
        BlockGradSlots { w, b, gamma: &mut [], beta: &mut [] }
    }
}

/// Layout of one cell instance: one optional block per DAG edge (convolution
/// edges only) plus the fixed output projection.
#[derive(Debug, Clone)]
pub struct CellLayout {
    /// Block spec and buffer offset per canonical edge; None for skip edges.
    pub edges: Vec<Option<(BlockSpec, usize)>>,
    pub proj: (BlockSpec, usize),
    pub len: usize,
}

fn conv_block_for(family: Family, width: usize) -> BlockSpec {
    let shape = match family {
        Family::Feature => ConvShape::conv2d_3x3(width, width),
        Family::Matching => ConvShape::conv3d_3x3x3(width, width),
    };
    BlockSpec { shape, norm: true, act: true }
}

impl CellLayout {
    pub fn new(genotype: &CellGenotype, width: usize) -> CellLayout {
        let mut offset = 0;
        let mut edges = Vec::with_capacity(CELL_EDGES.len());
        for (src, dst) in CELL_EDGES {
            match genotype.op(src, dst) {
                OpKind::Skip => edges.push(None),
                _ => {
                    let spec = conv_block_for(genotype.family, width);
                    edges.push(Some((spec, offset)));
                    offset += spec.len();
                }
            }
        }
        let proj_spec = BlockSpec {
            shape: ConvShape::pointwise(NUM_INTERMEDIATE_NODES * width, width),
            norm: true,
            act: true,
        };
        let proj = (proj_spec, offset);
        offset += proj_spec.len();
        CellLayout { edges, proj, len: offset }
    }
}

/// Layout of a task's adapter stack: feature stems, matching stems, and the
/// disparity head. Owned per task and trained only during that task.
#[derive(Debug, Clone)]
pub struct AdapterLayout {
    pub blocks: Vec<(BlockSpec, usize)>,
    pub len: usize,
}

/// Indices into [`AdapterLayout::blocks`].
pub const FSTEM0: usize = 0;
pub const FSTEM1: usize = 1;
pub const FSTEM2: usize = 2;
pub const MSTEM0: usize = 3;
pub const MSTEM1: usize = 4;
pub const HEAD: usize = 5;

impl AdapterLayout {
    pub fn new(topo: &NetworkTopology) -> AdapterLayout {
        let cf = topo.feature_channels;
        let cm = topo.matching_channels;
        let specs = [
            BlockSpec { shape: ConvShape::conv2d_3x3_stride3(3, cf), norm: true, act: true },
            BlockSpec { shape: ConvShape::conv2d_3x3(cf, cf), norm: true, act: true },
            BlockSpec { shape: ConvShape::conv2d_3x3(cf, cf), norm: true, act: true },
            BlockSpec { shape: ConvShape::conv3d_3x3x3(2 * cf, cm), norm: true, act: true },
            BlockSpec { shape: ConvShape::conv3d_3x3x3(cm, cm), norm: true, act: true },
            // plain cost head: unbounded outputs, no normalization
            BlockSpec { shape: ConvShape::pointwise(cm, 1), norm: false, act: false },
        ];
        let mut blocks = Vec::with_capacity(specs.len());
        let mut offset = 0;
        for spec in specs {
            blocks.push((spec, offset));
            offset += spec.len();
        }
        AdapterLayout { blocks, len: offset }
    }
}

/// He-style init: weights N(0, sqrt(2/fan_in)), biases zero, gamma one,
/// beta zero, running mean zero, running variance one.
pub fn init_block(params: &mut [f64], spec: &BlockSpec, rng: &mut ChaCha8Rng) {
    let fan_in = (spec.shape.ci * spec.shape.kernel_volume()) as f64;
    let std = (2.0 / fan_in).sqrt();
    let co = spec.shape.co;
    let wl = spec.shape.weight_len();
    let (w, rest) = params.split_at_mut(wl);
    for value in w.iter_mut() {
        // gaussian via Box-Muller
        let u1: f64 = rng.gen::<f64>().max(1e-12);
        let u2: f64 = rng.gen();
        *value = std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
    let (b, rest) = rest.split_at_mut(co);
    b.fill(0.0);
    if spec.norm {
        let (gamma, rest) = rest.split_at_mut(co);
        gamma.fill(1.0);
        let (beta, rest) = rest.split_at_mut(co);
        beta.fill(0.0);
        let (rm, rest) = rest.split_at_mut(co);
        rm.fill(0.0);
        rest[..co].fill(1.0);
    }
}

pub fn init_cell_params(layout: &CellLayout, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut params = vec![0.0; layout.len];
    for entry in layout.edges.iter().flatten() {
        let (spec, off) = entry;
        init_block(&mut params[*off..*off + spec.len()], spec, rng);
    }
    let (spec, off) = layout.proj;
    init_block(&mut params[off..off + spec.len()], &spec, rng);
    params
}

pub fn init_adapter_params(layout: &AdapterLayout, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut params = vec![0.0; layout.len];
    for (spec, off) in &layout.blocks {
        init_block(&mut params[*off..*off + spec.len()], spec, rng);
    }
    params
}
