//! Task-specific cell search by multinomial distribution learning.
//!
//! Candidate probabilities per edge update from trial outcomes: a candidate
//! with fewer trials and a higher validation score gains probability, one
//! with more trials and a lower score decays, and a softmax keeps each edge
//! on the simplex. One search trains a weight-sharing supernet: every edge
//! owns persistent convolution weights reused whenever that edge samples the
//! convolution candidate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{CellGenotype, Family, NetworkTopology, OpKind, CANDIDATES_PER_EDGE, CELL_EDGES};
use crate::error::{Error, Result};
use crate::metrics::d1_all;
use crate::net::{
    params, train_epoch, AdaptiveOpt, CellExec, LossKind, ModelExec,
};
use crate::scene::StereoPair;
use crate::seeds::rng_for;

pub const UPDATE_MOMENTUM: f64 = 0.01;

/// Per-edge candidate bookkeeping: validation scores, trial counts, and
/// sampling probabilities.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SearchState {
    pub deltas: Vec<Vec<f64>>,
    pub counts: Vec<Vec<u64>>,
    pub probs: Vec<Vec<f64>>,
    pub alpha: f64,
    pub trials_recorded: u64,
}

/// Chosen candidate index per edge.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Selection(pub Vec<usize>);

/// Uniform probabilities, zero scores, zero counts.
pub fn init_search_state(edges: usize, k: usize) -> Result<SearchState> {
    if k < 2 {
        return Err(Error::Domain(format!("need at least 2 candidates per edge, got {k}")));
    }
    Ok(SearchState {
        deltas: vec![vec![0.0; k]; edges],
        counts: vec![vec![0; k]; edges],
        probs: vec![vec![1.0 / k as f64; k]; edges],
        alpha: UPDATE_MOMENTUM,
        trials_recorded: 0,
    })
}

/// Draw one candidate per edge from the categorical distributions.
pub fn sample_selection(state: &SearchState, rng: &mut ChaCha8Rng) -> Selection {
    let sel = state
        .probs
        .iter()
        .map(|p| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (k, pk) in p.iter().enumerate() {
                acc += pk;
                if u < acc {
                    return k;
                }
            }
            p.len() - 1
        })
        .collect();
    Selection(sel)
}

/// Record a trial outcome: every selected candidate's score becomes
/// 1 - sigma and its count increments. Unselected entries are untouched.
pub fn record_trial(state: &mut SearchState, sel: &Selection, sigma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Domain(format!("error rate {sigma} outside [0, 1]")));
    }
    record_trial_scored(state, sel, 1.0 - sigma)
}

/// Record an arbitrary-valued score (the network-level growth reuses this
/// update with its own score function).
pub fn record_trial_scored(state: &mut SearchState, sel: &Selection, score: f64) -> Result<()> {
    if sel.0.len() != state.deltas.len() {
        return Err(Error::ShapeMismatch("selection/edges".into()));
    }
    for (e, &m) in sel.0.iter().enumerate() {
        state.deltas[e][m] = score;
        state.counts[e][m] += 1;
    }
    state.trials_recorded += 1;
    Ok(())
}

/// The probability update: the selected candidate gains alpha per competitor
/// it beats while being tried less, decays alpha per competitor it loses to
/// while being tried more, then the edge renormalizes through a softmax.
pub fn update_probabilities(state: &mut SearchState, sel: &Selection) {
    for (e, &m) in sel.0.iter().enumerate() {
        let (c, d) = (&state.counts[e], &state.deltas[e]);
        let mut gain = 0i64;
        let mut decay = 0i64;
        for k in 0..c.len() {
            if c[m] < c[k] && d[m] > d[k] {
                gain += 1;
            }
            if c[m] > c[k] && d[m] < d[k] {
                decay += 1;
            }
        }
        state.probs[e][m] += state.alpha * (gain - decay) as f64;
        softmax_in_place(&mut state.probs[e]);
    }
}

pub fn softmax_in_place(p: &mut [f64]) {
    let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in p.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in p.iter_mut() {
        *v /= z;
    }
}

/// Per edge, the highest-probability candidate; ties break to the lowest
/// index. Errors if no trial was ever recorded.
pub fn finalize_selection(state: &SearchState) -> Result<Selection> {
    if state.trials_recorded == 0 {
        return Err(Error::InvalidState("finalize before any recorded trial".into()));
    }
    let sel = state
        .probs
        .iter()
        .map(|p| {
            let mut best = 0;
            for (k, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    Ok(Selection(sel))
}

/// Translate an edge selection into a genotype for the family.
pub fn selection_to_genotype(family: Family, sel: &Selection) -> Result<CellGenotype> {
    let cands = family.candidates();
    let ops: Vec<OpKind> = sel.0.iter().map(|&k| cands[k]).collect();
    CellGenotype::from_ops(family, &ops)
}

pub fn finalize_cell(state: &SearchState, family: Family) -> Result<CellGenotype> {
    selection_to_genotype(family, &finalize_selection(state)?)
}

/// One line of the search trace.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub feature_selection: Vec<usize>,
    pub matching_selection: Vec<usize>,
    pub sigma: f64,
    pub feature_probs: Vec<Vec<f64>>,
    pub matching_probs: Vec<Vec<f64>>,
}

pub struct SearchConfig {
    pub trials: usize,
    pub epochs_per_trial: usize,
    pub loss: LossKind,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { trials: 40, epochs_per_trial: 1, loss: LossKind::Supervised }
    }
}

/// Trained supernet buffers handed to growth and final training: the task
/// adapter plus one all-conv cell buffer per layer.
pub struct SupernetHarvest {
    pub adapter: Vec<f64>,
    pub cell_bufs: Vec<Vec<f64>>,
}

pub struct SearchOutcome {
    pub feature: CellGenotype,
    pub matching: CellGenotype,
    pub harvest: SupernetHarvest,
    pub trace: Vec<TrialRecord>,
}

/// Mean D1-all over validation pairs as a fraction in [0, 1].
pub fn validation_error_rate(exec: &ModelExec, val: &[StereoPair]) -> Result<f64> {
    let preds = crate::net::predict_batch(exec, val)?;
    let mut total = 0.0;
    for (pair, pred) in val.iter().zip(&preds) {
        let gt = pair
            .gt_disparity
            .as_ref()
            .ok_or_else(|| Error::InvalidState("validation pair lacks ground truth".into()))?;
        let mask = crate::net::supervision_mask(gt, pair.gt_mask.as_ref(), exec.topo.max_disparity as f64);
        total += d1_all(pred, gt, &mask)? / 100.0;
    }
    Ok(total / val.len().max(1) as f64)
}

fn all_conv_supernet(topo: &NetworkTopology, seed: u64) -> ModelExec {
    let adapter_layout = params::AdapterLayout::new(topo);
    let adapter = params::init_adapter_params(&adapter_layout, &mut rng_for(seed, "supernet/adapter"));
    let cells = (0..topo.total_layers())
        .map(|layer| {
            let fam = topo.family_of_layer(layer);
            let genotype = CellGenotype::all_conv(fam);
            let width = topo.width_of(fam);
            let layout = params::CellLayout::new(&genotype, width);
            let p = params::init_cell_params(&layout, &mut rng_for(seed, &format!("supernet/cell{layer}")));
            CellExec::new(format!("supernet-{layer}"), &genotype, width, p, true)
        })
        .collect();
    ModelExec {
        topo: topo.clone(),
        adapter_id: "supernet-adapter".into(),
        adapter_layout,
        adapter,
        adapter_live: true,
        cells,
    }
}

fn apply_selection_ops(exec: &mut ModelExec, feature: &Selection, matching: &Selection) {
    let fl = exec.topo.feature_layers;
    let f_ops: Vec<OpKind> = feature.0.iter().map(|&k| Family::Feature.candidates()[k]).collect();
    let m_ops: Vec<OpKind> = matching.0.iter().map(|&k| Family::Matching.candidates()[k]).collect();
    for (layer, cell) in exec.cells.iter_mut().enumerate() {
        cell.ops = if layer < fl { f_ops.clone() } else { m_ops.clone() };
    }
}

/// Search task-specific cells for both families jointly: sample a genotype
/// pair, train the shared supernet for `epochs_per_trial`, score D1-all on
/// the validation split, and update both distributions.
pub fn run_cell_search(
    train: &[StereoPair],
    val: &[StereoPair],
    topo: &NetworkTopology,
    cfg: &SearchConfig,
    seed: u64,
) -> Result<SearchOutcome> {
    if cfg.trials == 0 {
        return Err(Error::Domain("cell search needs at least one trial".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidState("cell search needs train and validation pairs".into()));
    }

    let mut exec = all_conv_supernet(topo, seed);
    let mut opt = AdaptiveOpt::new(crate::net::optim::LEARNING_RATE);
    let mut state_f = init_search_state(CELL_EDGES.len(), CANDIDATES_PER_EDGE)?;
    let mut state_m = init_search_state(CELL_EDGES.len(), CANDIDATES_PER_EDGE)?;
    let mut rng = rng_for(seed, "search/sample");
    let mut trace = Vec::with_capacity(cfg.trials);

    for trial in 0..cfg.trials {
        let sel_f = sample_selection(&state_f, &mut rng);
        let sel_m = sample_selection(&state_m, &mut rng);
        apply_selection_ops(&mut exec, &sel_f, &sel_m);
        for _ in 0..cfg.epochs_per_trial {
            train_epoch(&mut exec, &mut opt, train, cfg.loss)?;
        }
        let sigma = validation_error_rate(&exec, val)?;
        record_trial(&mut state_f, &sel_f, sigma)?;
        record_trial(&mut state_m, &sel_m, sigma)?;
        update_probabilities(&mut state_f, &sel_f);
        update_probabilities(&mut state_m, &sel_m);
        trace.push(TrialRecord {
            trial,
            feature_selection: sel_f.0.clone(),
            matching_selection: sel_m.0.clone(),
            sigma,
            feature_probs: state_f.probs.clone(),
            matching_probs: state_m.probs.clone(),
        });
    }

    let feature = finalize_cell(&state_f, Family::Feature)?;
    let matching = finalize_cell(&state_m, Family::Matching)?;
    let harvest = SupernetHarvest {
        adapter: exec.adapter,
        cell_bufs: exec.cells.into_iter().map(|c| c.params).collect(),
    };
    Ok(SearchOutcome { feature, matching, harvest, trace })
}

/// Copy the blocks a finalized genotype keeps out of a supernet buffer
/// (all-conv layout) into a fresh buffer with the final layout.
pub fn extract_cell_params(
    supernet_buf: &[f64],
    family: Family,
    width: usize,
    final_genotype: &CellGenotype,
) -> Vec<f64> {
    let super_layout = params::CellLayout::new(&CellGenotype::all_conv(family), width);
    let final_layout = params::CellLayout::new(final_genotype, width);
    let mut out = vec![0.0; final_layout.len];
    for e in 0..CELL_EDGES.len() {
        if let (Some((fspec, foff)), Some((sspec, soff))) = (final_layout.edges[e], super_layout.edges[e]) {
            debug_assert_eq!(fspec.len(), sspec.len());
            out[foff..foff + fspec.len()].copy_from_slice(&supernet_buf[soff..soff + sspec.len()]);
        }
    }
    let (fspec, foff) = final_layout.proj;
    let (_, soff) = super_layout.proj;
    out[foff..foff + fspec.len()].copy_from_slice(&supernet_buf[soff..soff + fspec.len()]);
    out
}

pub fn write_trace_jsonl(trace: &[TrialRecord]) -> String {
    trace
        .iter()
        .map(|r| serde_json::to_string(r).expect("trace serializes"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn read_trace_jsonl(text: &str) -> Result<Vec<TrialRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse(format!("trace line: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_uniform_and_zeroed() {
        let s = init_search_state(9, 2).unwrap();
        assert!(s.probs.iter().all(|p| p == &vec![0.5, 0.5]));
        assert!(s.deltas.iter().flatten().all(|&d| d == 0.0));
        assert!(s.counts.iter().flatten().all(|&c| c == 0));
        assert!(init_search_state(9, 1).is_err());
    }

    #[test]
    fn sampling_respects_degenerate_distributions() {
        let mut s = init_search_state(3, 2).unwrap();
        for e in 0..3 {
            s.probs[e] = vec![1.0, 0.0];
        }
        let mut rng = rng_for(1, "sample-test");
        for _ in 0..100 {
            assert_eq!(sample_selection(&s, &mut rng).0, vec![0, 0, 0]);
        }
    }

    #[test]
    fn sampling_frequency_concentrates() {
        let s = init_search_state(1, 2).unwrap();
        let mut rng = rng_for(2, "freq-test");
        let mut zero = 0;
        for _ in 0..10_000 {
            if sample_selection(&s, &mut rng).0[0] == 0 {
                zero += 1;
            }
        }
        let f = zero as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&f), "frequency {f}");
    }

    #[test]
    fn record_trial_applies_score_to_selected_only() {
        let mut s = init_search_state(2, 2).unwrap();
        let sel = Selection(vec![0, 1]);
        record_trial(&mut s, &sel, 0.25).unwrap();
        assert_eq!(s.deltas[0], vec![0.75, 0.0]);
        assert_eq!(s.deltas[1], vec![0.0, 0.75]);
        assert_eq!(s.counts[0], vec![1, 0]);
        record_trial(&mut s, &sel, 0.0).unwrap();
        assert_eq!(s.deltas[0][0], 1.0);
        assert_eq!(s.counts[0], vec![2, 0]);
        assert!(record_trial(&mut s, &sel, 1.5).is_err());
    }

    #[test]
    fn update_indicator_directions() {
        // selected candidate tried less but scoring higher gains
        let mut s = init_search_state(1, 2).unwrap();
        s.counts[0] = vec![1, 2];
        s.deltas[0] = vec![0.9, 0.5];
        let p_before = s.probs[0].clone();
        update_probabilities(&mut s, &Selection(vec![0]));
        // +alpha then softmax: selected strictly above the uniform softmax
        let mut expect = vec![p_before[0] + 0.01, p_before[1]];
        softmax_in_place(&mut expect);
        assert!((s.probs[0][0] - expect[0]).abs() < 1e-15);

        // selected tried more and scoring lower decays
        let mut s = init_search_state(1, 2).unwrap();
        s.counts[0] = vec![3, 1];
        s.deltas[0] = vec![0.4, 0.8];
        update_probabilities(&mut s, &Selection(vec![0]));
        let mut expect = vec![0.5 - 0.01, 0.5];
        softmax_in_place(&mut expect);
        assert!((s.probs[0][0] - expect[0]).abs() < 1e-15);

        // equal counts and scores: only the softmax renormalization applies
        let mut s = init_search_state(1, 2).unwrap();
        s.counts[0] = vec![2, 2];
        s.deltas[0] = vec![0.5, 0.5];
        update_probabilities(&mut s, &Selection(vec![0]));
        assert_eq!(s.probs[0], vec![0.5, 0.5]);
    }

    #[test]
    fn probabilities_stay_on_the_simplex() {
        let mut s = init_search_state(4, 2).unwrap();
        let mut rng = rng_for(3, "simplex");
        for _ in 0..2000 {
            let sel = sample_selection(&s, &mut rng);
            record_trial(&mut s, &sel, rng.gen()).unwrap();
            update_probabilities(&mut s, &sel);
            for p in &s.probs {
                let sum: f64 = p.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(p.iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn finalize_needs_trials_and_breaks_ties_low() {
        let s = init_search_state(9, 2).unwrap();
        assert!(finalize_selection(&s).is_err());
        let mut s = init_search_state(9, 2).unwrap();
        s.trials_recorded = 1;
        s.probs[0] = vec![0.7, 0.3];
        s.probs[3] = vec![0.3, 0.7];
        // remaining edges tie at (0.5, 0.5) and resolve to candidate 0
        let sel = finalize_selection(&s).unwrap();
        let mut expect = vec![0; 9];
        expect[3] = 1;
        assert_eq!(sel.0, expect);
        let g = selection_to_genotype(Family::Feature, &sel).unwrap();
        assert!(g.validate().is_valid());
    }

    #[test]
    fn single_edge_dominance() {
        // the better candidate's argmax wins on a stub where the edge's own
        // choice drives the error rate: A -> 0.1, B -> 0.5
        for seed in 0..20 {
            let mut s = init_search_state(1, 2).unwrap();
            let mut rng = rng_for(seed, "dominance");
            for _ in 0..60 {
                let sel = sample_selection(&s, &mut rng);
                let sigma = if sel.0[0] == 0 { 0.1 } else { 0.5 };
                record_trial(&mut s, &sel, sigma).unwrap();
                update_probabilities(&mut s, &sel);
            }
            assert_eq!(finalize_selection(&s).unwrap().0, vec![0], "seed {seed}");
        }
    }

    #[test]
    fn trace_round_trip() {
        let rec = TrialRecord {
            trial: 3,
            feature_selection: vec![0, 1, 0],
            matching_selection: vec![1, 1, 0],
            sigma: 0.25,
            feature_probs: vec![vec![0.6, 0.4]; 3],
            matching_probs: vec![vec![0.5, 0.5]; 3],
        };
        let text = write_trace_jsonl(&[rec.clone()]);
        let back = read_trace_jsonl(&text).unwrap();
        assert_eq!(back, vec![rec]);
    }
}
