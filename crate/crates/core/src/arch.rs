//! Cell genotypes, candidate operation sets, and the fixed base topology.
//!
//! A cell is a fully-connected DAG with two input nodes (outputs of the two
//! preceding layers), three intermediate nodes, and one output node. Each
//! intermediate node sums the outputs of one operation per incoming edge;
//! the output node concatenates the three intermediates and projects back to
//! the layer width with a fixed pointwise convolution.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Candidate operation on a cell edge. Each network family has exactly two
/// candidates: its convolution and the skip connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum OpKind {
    Conv2d3x3,
    Conv3d3x3x3,
    Skip,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2d3x3 => "conv2d_3x3",
            OpKind::Conv3d3x3x3 => "conv3d_3x3x3",
            OpKind::Skip => "skip",
        }
    }

    pub fn parse(s: &str) -> Result<OpKind> {
        match s {
            "conv2d_3x3" => Ok(OpKind::Conv2d3x3),
            "conv3d_3x3x3" => Ok(OpKind::Conv3d3x3x3),
            "skip" => Ok(OpKind::Skip),
            other => Err(Error::Parse(format!("unknown operation '{other}'"))),
        }
    }

    pub fn is_conv(&self) -> bool {
        !matches!(self, OpKind::Skip)
    }

    /// Kernel volume in scalars per (ci, co) pair.
    pub fn kernel_volume(&self) -> usize {
        match self {
            OpKind::Conv2d3x3 => 9,
            OpKind::Conv3d3x3x3 => 27,
            OpKind::Skip => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Family {
    Feature,
    Matching,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Feature => "feature",
            Family::Matching => "matching",
        }
    }

    pub fn parse(s: &str) -> Result<Family> {
        match s {
            "feature" => Ok(Family::Feature),
            "matching" => Ok(Family::Matching),
            other => Err(Error::Parse(format!("unknown family '{other}'"))),
        }
    }

    /// The two candidates for this family, in canonical order. Index 0 is the
    /// convolution, index 1 the skip connection; ties in the search always
    /// resolve to the lower index.
    pub fn candidates(&self) -> [OpKind; CANDIDATES_PER_EDGE] {
        match self {
            Family::Feature => [OpKind::Conv2d3x3, OpKind::Skip],
            Family::Matching => [OpKind::Conv3d3x3x3, OpKind::Skip],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// K: candidate operations per edge.
pub const CANDIDATES_PER_EDGE: usize = 2;

/// Node indices: 0 and 1 are the inputs, 2..=4 the intermediates. The output
/// node is implicit (concat of nodes 2, 3, 4).
pub const NUM_INPUT_NODES: usize = 2;
pub const NUM_INTERMEDIATE_NODES: usize = 3;

/// Canonical edge order: for each intermediate node, edges from every
/// lower-indexed node.
pub const CELL_EDGES: [(usize, usize); 9] = [
    (0, 2),
    (1, 2),
    (0, 3),
    (1, 3),
    (2, 3),
    (0, 4),
    (1, 4),
    (2, 4),
    (3, 4),
];

/// A concrete cell: one chosen operation per DAG edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellGenotype {
    pub family: Family,
    /// Keyed by (source node, target node).
    pub edges: BTreeMap<(usize, usize), OpKind>,
}

// serialized as the family plus operations in canonical edge order
#[derive(serde::Serialize, serde::Deserialize)]
struct GenotypeWire {
    family: Family,
    ops: Vec<OpKind>,
}

impl serde::Serialize for CellGenotype {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GenotypeWire { family: self.family, ops: self.ops() }.serialize(s)
    }
}

impl<'de> serde::Deserialize<'de> for CellGenotype {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let wire = GenotypeWire::deserialize(d)?;
        CellGenotype::from_ops(wire.family, &wire.ops).map_err(serde::de::Error::custom)
    }
}

impl CellGenotype {
    /// Build from operations listed in canonical edge order.
    pub fn from_ops(family: Family, ops: &[OpKind]) -> Result<CellGenotype> {
        if ops.len() != CELL_EDGES.len() {
            return Err(Error::InvalidState(format!(
                "expected {} edge operations, got {}",
                CELL_EDGES.len(),
                ops.len()
            )));
        }
        let edges = CELL_EDGES.iter().copied().zip(ops.iter().copied()).collect();
        let g = CellGenotype { family, edges };
        match g.validate() {
            Verdict::Valid => Ok(g),
            Verdict::Invalid(reason) => Err(Error::InvalidState(reason)),
        }
    }

    /// All edges the family's convolution.
    pub fn all_conv(family: Family) -> CellGenotype {
        let conv = family.candidates()[0];
        CellGenotype::from_ops(family, &[conv; 9]).expect("all-conv genotype is valid")
    }

    /// All edges skip connections.
    pub fn all_skip(family: Family) -> CellGenotype {
        CellGenotype::from_ops(family, &[OpKind::Skip; 9]).expect("all-skip genotype is valid")
    }

    /// Operations in canonical edge order.
    pub fn ops(&self) -> Vec<OpKind> {
        CELL_EDGES.iter().map(|e| self.edges[e]).collect()
    }

    pub fn op(&self, src: usize, dst: usize) -> OpKind {
        self.edges[&(src, dst)]
    }

    pub fn validate(&self) -> Verdict {
        validate_genotype(self)
    }

    /// Serialize to the structured-text genotype document.
    pub fn to_text(&self) -> String {
        let mut s = format!("family: {}\n", self.family.name());
        for (src, dst) in CELL_EDGES {
            s.push_str(&format!("edge {src}->{dst}: {}\n", self.edges[&(src, dst)].name()));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<CellGenotype> {
        let mut family = None;
        let mut edges = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("family:") {
                family = Some(Family::parse(rest.trim())?);
            } else if let Some(rest) = line.strip_prefix("edge ") {
                let (edge, op) = rest
                    .split_once(':')
                    .ok_or_else(|| Error::Parse(format!("bad edge line '{line}'")))?;
                let (src, dst) = edge
                    .trim()
                    .split_once("->")
                    .ok_or_else(|| Error::Parse(format!("bad edge spec '{edge}'")))?;
                let src: usize = src.trim().parse().map_err(|_| Error::Parse(format!("bad node '{src}'")))?;
                let dst: usize = dst.trim().parse().map_err(|_| Error::Parse(format!("bad node '{dst}'")))?;
                edges.insert((src, dst), OpKind::parse(op.trim())?);
            } else {
                return Err(Error::Parse(format!("unrecognized genotype line '{line}'")));
            }
        }
        let family = family.ok_or_else(|| Error::Parse("genotype missing family".into()))?;
        let g = CellGenotype { family, edges };
        match g.validate() {
            Verdict::Valid => Ok(g),
            Verdict::Invalid(reason) => Err(Error::Parse(format!("invalid genotype: {reason}"))),
        }
    }
}

/// Validation outcome; carries the first violated invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Valid,
    Invalid(String),
}

impl Verdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, Verdict::Valid)
    }
}

/// Accepts iff the node/edge structure satisfies the cell invariants; the
/// verdict names the first violation found.
pub fn validate_genotype(g: &CellGenotype) -> Verdict {
    for (src, dst) in CELL_EDGES {
        if !g.edges.contains_key(&(src, dst)) {
            return Verdict::Invalid(format!("missing edge ({src} -> {dst})"));
        }
    }
    for (&(src, dst), op) in &g.edges {
        if src >= dst {
            return Verdict::Invalid(format!("non-ascending edge ({src} -> {dst})"));
        }
        if !CELL_EDGES.contains(&(src, dst)) {
            return Verdict::Invalid(format!("unexpected edge ({src} -> {dst})"));
        }
        let allowed = g.family.candidates();
        if !allowed.contains(op) {
            return Verdict::Invalid(format!(
                "operation {} not a {} candidate",
                op.name(),
                g.family.name()
            ));
        }
    }
    Verdict::Valid
}

/// Channel widths and layer counts of the base model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetworkTopology {
    pub feature_layers: usize,
    pub matching_layers: usize,
    pub feature_channels: usize,
    pub matching_channels: usize,
    /// Full-resolution disparity range in pixels.
    pub max_disparity: usize,
}

impl NetworkTopology {
    pub fn total_layers(&self) -> usize {
        self.feature_layers + self.matching_layers
    }

    pub fn family_of_layer(&self, layer: usize) -> Family {
        if layer < self.feature_layers {
            Family::Feature
        } else {
            Family::Matching
        }
    }

    pub fn width_of(&self, family: Family) -> usize {
        match family {
            Family::Feature => self.feature_channels,
            Family::Matching => self.matching_channels,
        }
    }

    /// Disparity levels searched at feature resolution (stride-3 features).
    pub fn disparity_levels(&self) -> usize {
        self.max_disparity / 3 + 1
    }
}

/// The fixed base topology: a 4-layer feature network over stride-3 stems and
/// an 8-layer matching network, at desk-scale channel widths.
pub fn build_base_topology() -> NetworkTopology {
    NetworkTopology {
        feature_layers: 4,
        matching_layers: 8,
        feature_channels: 8,
        matching_channels: 4,
        max_disparity: 24,
    }
}

/// Number of trainable scalars, for growth scoring and reuse accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct ParamCount(pub u64);

impl ParamCount {
    pub fn as_f64(&self) -> f64 {
        self.0 as f64
    }
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;
    fn add(self, rhs: ParamCount) -> ParamCount {
        ParamCount(self.0 + rhs.0)
    }
}

/// Conv-edge parameters of a single cell at the given width: kernel volume x
/// in x out plus a bias per output channel. Skip edges contribute nothing.
pub fn cell_param_count(genotype: &CellGenotype, width: usize) -> ParamCount {
    let mut total = 0u64;
    for op in genotype.edges.values() {
        if op.is_conv() {
            total += (op.kernel_volume() * width * width + width) as u64;
        }
    }
    ParamCount(total)
}

/// Sum of conv-edge parameters over a list of cells, one channel width per
/// cell. Errors when the width list does not match the cell list.
pub fn count_parameters(cells: &[CellGenotype], channels: &[usize]) -> Result<ParamCount> {
    if cells.len() != channels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} cells but {} channel widths (first unmatched layer {})",
            cells.len(),
            channels.len(),
            cells.len().min(channels.len())
        )));
    }
    let mut total = ParamCount(0);
    for (g, &width) in cells.iter().zip(channels) {
        total = total + cell_param_count(g, width);
    }
    Ok(total)
}
