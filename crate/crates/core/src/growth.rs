//! Network-level reusable architecture growth.
//!
//! For each layer the growth chooses between the frozen cells of earlier
//! tasks and the newly searched cell. Sampling, scoring, and probability
//! updates follow the same multinomial policy as the cell search, with three
//! changes: old cells start with a non-zero trial count, their initial
//! probability is a multiple of the new cell's, and the trial score couples
//! the validation error with the parameter mass of the reused cells.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::arch::{cell_param_count, CellGenotype, NetworkTopology};
use crate::error::{Error, Result};
use crate::search::{
    record_trial_scored, sample_selection, softmax_in_place, SearchState, Selection,
};

pub type CellId = u32;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LedgerCell {
    pub id: CellId,
    pub layer: usize,
    pub genotype: CellGenotype,
    /// 1-based task index that owns (and trained) this cell.
    pub owner_task: usize,
    pub frozen: bool,
}

/// Registry of adopted cells per layer plus each task's architecture path.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct GrowthLedger {
    pub cells: BTreeMap<CellId, LedgerCell>,
    /// Adopted cell ids per layer, in adoption order.
    pub layers: Vec<Vec<CellId>>,
    /// Chosen path per task (index 0 = task 1): one cell id per layer.
    pub paths: Vec<Vec<CellId>>,
    pub next_id: CellId,
}

impl GrowthLedger {
    pub fn new(total_layers: usize) -> GrowthLedger {
        GrowthLedger {
            cells: BTreeMap::new(),
            layers: vec![Vec::new(); total_layers],
            paths: Vec::new(),
            next_id: 0,
        }
    }

    pub fn add_cell(&mut self, layer: usize, genotype: CellGenotype, owner_task: usize) -> CellId {
        let id = self.next_id;
        self.next_id += 1;
        self.cells.insert(
            id,
            LedgerCell { id, layer, genotype, owner_task, frozen: false },
        );
        self.layers[layer].push(id);
        id
    }

    pub fn cell(&self, id: CellId) -> Result<&LedgerCell> {
        self.cells
            .get(&id)
            .ok_or_else(|| Error::InvalidState(format!("unknown cell id {id}")))
    }

    /// Freeze every cell owned by `task`.
    pub fn freeze_task(&mut self, task: usize) {
        for cell in self.cells.values_mut() {
            if cell.owner_task == task {
                cell.frozen = true;
            }
        }
    }

    pub fn record_path(&mut self, task: usize, path: Vec<CellId>) -> Result<()> {
        if task != self.paths.len() + 1 {
            return Err(Error::InvalidState(format!(
                "paths must be recorded in task order (got task {task}, have {})",
                self.paths.len()
            )));
        }
        for (layer, id) in path.iter().enumerate() {
            let cell = self.cell(*id)?;
            if cell.layer != layer {
                return Err(Error::InvalidState(format!(
                    "path for task {task} puts cell {id} at layer {layer}, it lives at {}",
                    cell.layer
                )));
            }
            if cell.owner_task > task {
                return Err(Error::InvalidState(format!(
                    "path for task {task} references future cell {id}"
                )));
            }
        }
        self.paths.push(path);
        Ok(())
    }

    pub fn path(&self, task: usize) -> Result<&[CellId]> {
        self.paths
            .get(task - 1)
            .map(|p| p.as_slice())
            .ok_or_else(|| Error::InvalidState(format!("no path for task {task}")))
    }

    /// Conv-edge parameter count of one cell at its layer's width.
    pub fn cell_params(&self, id: CellId, topo: &NetworkTopology) -> Result<u64> {
        let cell = self.cell(id)?;
        let width = topo.width_of(topo.family_of_layer(cell.layer));
        Ok(cell_param_count(&cell.genotype, width).0)
    }
}

/// Remove the unadopted new cells of `task`: cells it owns that its chosen
/// path does not use. Earlier paths must keep resolving; a removal that
/// breaks one reports internal corruption.
pub fn prune_unadopted(ledger: &mut GrowthLedger, task: usize, chosen: &[CellId]) -> Result<Vec<CellId>> {
    let doomed: Vec<CellId> = ledger
        .cells
        .values()
        .filter(|c| c.owner_task == task && !chosen.contains(&c.id))
        .map(|c| c.id)
        .collect();
    for earlier in &ledger.paths {
        for id in earlier {
            if doomed.contains(id) {
                return Err(Error::InvalidState(format!(
                    "pruning cell {id} would break an existing path (ledger corruption)"
                )));
            }
        }
    }
    for id in &doomed {
        ledger.cells.remove(id);
        for layer in &mut ledger.layers {
            layer.retain(|c| c != id);
        }
    }
    Ok(doomed)
}

/// Which score couples error and reuse during growth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreForm {
    /// 1 - sigma, the plain cell-search score.
    ErrorRate,
    /// Weighted linear combination of accuracy and reuse terms.
    Linear,
    /// The adaptive product form (default).
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GrowthConfig {
    pub trials: usize,
    /// Initial trial count of old cells.
    pub c0: u64,
    /// Initial probability multiple of old cells over the new cell.
    pub gamma: f64,
    pub score: ScoreForm,
    /// Target reused parameters as a fraction of the base-model cell total.
    pub phi_fraction: f64,
    /// Accuracy weight of the linear score.
    pub mu: f64,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        // supervised regime defaults
        GrowthConfig { trials: 60, c0: 10, gamma: 2.0, score: ScoreForm::Adaptive, phi_fraction: 0.5, mu: 0.9 }
    }
}

impl GrowthConfig {
    pub fn self_supervised() -> GrowthConfig {
        GrowthConfig { c0: 5, phi_fraction: 1.0, ..GrowthConfig::default() }
    }
}

/// delta = sqrt(1 - sigma) * ln(phi_m / phi + 1).
pub fn growth_score(sigma: f64, phi_m: f64, phi: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Domain(format!("error rate {sigma} outside [0, 1]")));
    }
    if phi <= 0.0 {
        return Err(Error::Domain("target parameter count must be positive".into()));
    }
    Ok((1.0 - sigma).sqrt() * (phi_m / phi + 1.0).ln())
}

/// delta = mu * sqrt(1 - sigma) + (1 - mu) * ln(phi_m / phi + 1).
pub fn growth_score_linear(sigma: f64, phi_m: f64, phi: f64, mu: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Domain(format!("error rate {sigma} outside [0, 1]")));
    }
    if phi <= 0.0 {
        return Err(Error::Domain("target parameter count must be positive".into()));
    }
    Ok(mu * (1.0 - sigma).sqrt() + (1.0 - mu) * (phi_m / phi + 1.0).ln())
}

pub fn score_for(cfg: &GrowthConfig, sigma: f64, phi_m: f64, phi: f64) -> Result<f64> {
    match cfg.score {
        ScoreForm::ErrorRate => {
            if !(0.0..=1.0).contains(&sigma) {
                return Err(Error::Domain(format!("error rate {sigma} outside [0, 1]")));
            }
            Ok(1.0 - sigma)
        }
        ScoreForm::Linear => growth_score_linear(sigma, phi_m, phi, cfg.mu),
        ScoreForm::Adaptive => growth_score(sigma, phi_m, phi),
    }
}

/// One candidate at one layer during growth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrowthCandidate {
    pub cell: CellId,
    pub owner_task: usize,
    /// Conv-edge parameter count of the cell.
    pub params: u64,
}

/// Per-layer candidate bookkeeping plus the growth constants.
#[derive(Debug, Clone)]
pub struct GrowthState {
    pub state: SearchState,
    pub gamma: f64,
    pub c0: u64,
    pub phi: f64,
    pub phi_total: f64,
}

/// Initialize per-layer distributions: old cells at probability
/// gamma / (gamma * n_old + 1) each with trial count c0, the new cell (last
/// candidate) at 1 / (gamma * n_old + 1) with count zero.
pub fn init_growth_state(
    task: usize,
    n_old_per_layer: &[usize],
    gamma: f64,
    c0: u64,
    phi: f64,
    phi_total: f64,
) -> Result<GrowthState> {
    if task < 2 {
        return Err(Error::Domain("growth starts at the second task".into()));
    }
    if gamma < 1.0 {
        return Err(Error::Domain("gamma must be at least 1".into()));
    }
    if phi <= 0.0 {
        return Err(Error::Domain("target parameter count must be positive".into()));
    }
    let layers = n_old_per_layer.len();
    let mut state = SearchState {
        deltas: Vec::with_capacity(layers),
        counts: Vec::with_capacity(layers),
        probs: Vec::with_capacity(layers),
        alpha: crate::search::UPDATE_MOMENTUM,
        trials_recorded: 0,
    };
    for &n_old in n_old_per_layer {
        let k = n_old + 1;
        let denom = gamma * n_old as f64 + 1.0;
        let mut probs = vec![gamma / denom; k];
        probs[k - 1] = 1.0 / denom;
        state.probs.push(probs);
        let mut counts = vec![c0; k];
        counts[k - 1] = 0;
        state.counts.push(counts);
        state.deltas.push(vec![0.0; k]);
    }
    Ok(GrowthState { state, gamma, c0, phi, phi_total })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GrowthTrialRecord {
    pub trial: usize,
    /// Chosen candidate index per layer.
    pub selection: Vec<usize>,
    pub sigma: f64,
    pub phi_m: f64,
    pub delta: f64,
    pub probs: Vec<Vec<f64>>,
}

pub struct GrowthRun {
    /// Chosen candidate index per layer.
    pub chosen: Vec<usize>,
    pub state: GrowthState,
    pub trace: Vec<GrowthTrialRecord>,
}

/// The growth loop over abstract candidates: sample a path, get its
/// validation error from the evaluator, score it with the configured form,
/// and update each layer's distribution. Finalization takes the per-layer
/// argmax; ties resolve to the oldest owner, then the lowest cell id, which
/// the candidate ordering (owners ascending, new cell last) encodes.
pub fn run_growth_dynamics(
    candidates: &[Vec<GrowthCandidate>],
    task: usize,
    cfg: &GrowthConfig,
    phi: f64,
    phi_total: f64,
    mut eval: impl FnMut(usize, &[usize]) -> Result<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<GrowthRun> {
    if cfg.trials == 0 {
        return Err(Error::Domain("growth needs at least one trial".into()));
    }
    for (layer, cands) in candidates.iter().enumerate() {
        if cands.is_empty() {
            return Err(Error::InvalidState(format!("layer {layer} has no candidates")));
        }
        if cands.last().unwrap().owner_task != task {
            return Err(Error::InvalidState(format!(
                "layer {layer}: the new cell must be the last candidate"
            )));
        }
    }
    let n_old: Vec<usize> = candidates.iter().map(|c| c.len() - 1).collect();
    let mut gs = init_growth_state(task, &n_old, cfg.gamma, cfg.c0, phi, phi_total)?;
    let mut trace = Vec::with_capacity(cfg.trials);

    for trial in 0..cfg.trials {
        let sel = sample_selection(&gs.state, rng);
        let sigma = eval(trial, &sel.0)?;
        let phi_m: f64 = sel
            .0
            .iter()
            .zip(candidates)
            .map(|(&k, cands)| {
                let c = &cands[k];
                if c.owner_task < task {
                    c.params as f64
                } else {
                    0.0
                }
            })
            .sum();
        let delta = score_for(cfg, sigma, phi_m, phi)?;
        record_trial_scored(&mut gs.state, &sel, delta)?;
        update_growth_probabilities(&mut gs.state, &sel);
        trace.push(GrowthTrialRecord {
            trial,
            selection: sel.0.clone(),
            sigma,
            phi_m,
            delta,
            probs: gs.state.probs.clone(),
        });
    }

    let chosen = gs
        .state
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
    Ok(GrowthRun { chosen, state: gs, trace })
}

/// Identical policy to the cell search update, applied per layer.
pub fn update_growth_probabilities(state: &mut SearchState, sel: &Selection) {
    for (layer, &m) in sel.0.iter().enumerate() {
        let (c, d) = (&state.counts[layer], &state.deltas[layer]);
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
        state.probs[layer][m] += state.alpha * (gain - decay) as f64;
        softmax_in_place(&mut state.probs[layer]);
    }
}

/// Average Reuse Rate over tasks 2..=n: the mean fraction of each task path's
/// conv-edge parameters owned by earlier tasks.
pub fn average_reuse_rate(ledger: &GrowthLedger, topo: &NetworkTopology, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::Domain("ARR needs at least two tasks".into()));
    }
    let mut total = 0.0;
    for task in 2..=n {
        let path = ledger.path(task)?;
        let mut reused = 0u64;
        let mut all = 0u64;
        for id in path {
            let cell = ledger.cell(*id)?;
            let p = ledger.cell_params(*id, topo)?;
            all += p;
            if cell.owner_task < task {
                reused += p;
            }
        }
        total += if all == 0 { 0.0 } else { reused as f64 / all as f64 };
    }
    Ok(total / (n - 1) as f64)
}

/// DOT rendering of the grown architecture: one node per adopted cell,
/// task paths drawn as chains across layers.
pub fn growth_graph_dot(ledger: &GrowthLedger) -> String {
    let mut s = String::from("digraph growth {\n  rankdir=LR;\n  node [shape=box];\n");
    for (layer, ids) in ledger.layers.iter().enumerate() {
        for id in ids {
            let cell = &ledger.cells[id];
            s.push_str(&format!(
                "  c{id} [label=\"cell {id}\\nlayer {layer} task {}\"];\n",
                cell.owner_task
            ));
        }
    }
    for (i, path) in ledger.paths.iter().enumerate() {
        let task = i + 1;
        for pair in path.windows(2) {
            s.push_str(&format!("  c{} -> c{} [label=\"t{task}\"];\n", pair[0], pair[1]));
        }
    }
    s.push_str("}\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_base_topology, Family};
    use crate::seeds::rng_for;

    #[test]
    fn eq6_initialization_exact() {
        // gamma = 2, t = 2: (2/3, 1/3)
        let gs = init_growth_state(2, &[1], 2.0, 10, 100.0, 200.0).unwrap();
        assert!((gs.state.probs[0][0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((gs.state.probs[0][1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(gs.state.counts[0], vec![10, 0]);

        // gamma = 2, t = 4: (2/7, 2/7, 2/7, 1/7)
        let gs = init_growth_state(4, &[3], 2.0, 10, 100.0, 200.0).unwrap();
        for k in 0..3 {
            assert!((gs.state.probs[0][k] - 2.0 / 7.0).abs() < 1e-15);
        }
        assert!((gs.state.probs[0][3] - 1.0 / 7.0).abs() < 1e-15);

        // gamma = 1, t = 3: uniform thirds
        let gs = init_growth_state(3, &[2], 1.0, 10, 100.0, 200.0).unwrap();
        for k in 0..3 {
            assert!((gs.state.probs[0][k] - 1.0 / 3.0).abs() < 1e-15);
        }

        assert!(init_growth_state(1, &[0], 2.0, 10, 100.0, 200.0).is_err());
    }

    #[test]
    fn growth_score_plug_ins() {
        // sigma = 0, phi_m = phi -> ln 2
        assert!((growth_score(0.0, 5.0, 5.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        // sigma = 1 -> 0 regardless of phi_m
        assert_eq!(growth_score(1.0, 123.0, 5.0).unwrap(), 0.0);
        // sigma = 0.19, phi_m = phi -> 0.9 ln 2
        assert!((growth_score(0.19, 5.0, 5.0).unwrap() - 0.9 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(growth_score(0.5, 1.0, 0.0).is_err());
        assert!(growth_score(1.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn linear_score_plug_ins() {
        assert!((growth_score_linear(0.0, 0.0, 5.0, 0.9).unwrap() - 0.9).abs() < 1e-15);
        let v = growth_score_linear(1.0, 5.0, 5.0, 0.9).unwrap();
        assert!((v - 0.1 * std::f64::consts::LN_2).abs() < 1e-12);
        // mu = 1 reduces to sqrt(1 - sigma)
        let v = growth_score_linear(0.36, 7.0, 5.0, 1.0).unwrap();
        assert!((v - 0.8).abs() < 1e-12);
    }

    #[test]
    fn ledger_paths_and_pruning() {
        let topo = build_base_topology();
        let mut ledger = GrowthLedger::new(2);
        let a0 = ledger.add_cell(0, CellGenotype::all_conv(Family::Feature), 1);
        let a1 = ledger.add_cell(1, CellGenotype::all_conv(Family::Matching), 1);
        ledger.record_path(1, vec![a0, a1]).unwrap();
        ledger.freeze_task(1);

        let b0 = ledger.add_cell(0, CellGenotype::all_skip(Family::Feature), 2);
        let b1 = ledger.add_cell(1, CellGenotype::all_conv(Family::Matching), 2);
        // task 2 reuses layer 0, adopts its new cell at layer 1
        ledger.record_path(2, vec![a0, b1]).unwrap();
        let removed = prune_unadopted(&mut ledger, 2, &[a0, b1]).unwrap();
        assert_eq!(removed, vec![b0]);
        assert!(ledger.cells.contains_key(&b1));
        assert_eq!(ledger.layers[0], vec![a0]);
        // earlier paths still resolve
        assert!(ledger.path(1).unwrap().iter().all(|id| ledger.cell(*id).is_ok()));
        let _ = topo;
    }

    #[test]
    fn prune_all_old_and_all_new_paths() {
        let mut ledger = GrowthLedger::new(2);
        let a0 = ledger.add_cell(0, CellGenotype::all_conv(Family::Feature), 1);
        let a1 = ledger.add_cell(1, CellGenotype::all_conv(Family::Matching), 1);
        ledger.record_path(1, vec![a0, a1]).unwrap();
        let b0 = ledger.add_cell(0, CellGenotype::all_conv(Family::Feature), 2);
        let b1 = ledger.add_cell(1, CellGenotype::all_conv(Family::Matching), 2);

        // all-old: every new cell removed
        let mut l2 = ledger.clone();
        l2.record_path(2, vec![a0, a1]).unwrap();
        let removed = prune_unadopted(&mut l2, 2, &[a0, a1]).unwrap();
        assert_eq!(removed.len(), 2);

        // all-new: nothing removed
        let mut l3 = ledger.clone();
        l3.record_path(2, vec![b0, b1]).unwrap();
        let removed = prune_unadopted(&mut l3, 2, &[b0, b1]).unwrap();
        assert!(removed.is_empty());
    }

    #[test]
    fn arr_hand_cases() {
        let topo = build_base_topology();
        let mut ledger = GrowthLedger::new(topo.total_layers());
        let a0 = ledger.add_cell(0, CellGenotype::all_conv(Family::Feature), 1);
        let a1 = ledger.add_cell(1, CellGenotype::all_conv(Family::Feature), 1);
        let mut path1 = vec![a0, a1];
        for layer in 2..topo.total_layers() {
            let fam = topo.family_of_layer(layer);
            path1.push(ledger.add_cell(layer, CellGenotype::all_conv(fam), 1));
        }
        ledger.record_path(1, path1.clone()).unwrap();

        // task 2 reuses everything: ARR = 1
        ledger.record_path(2, path1.clone()).unwrap();
        assert_eq!(average_reuse_rate(&ledger, &topo, 2).unwrap(), 1.0);

        // task 3 uses a fresh cell everywhere: per-task ratios 1.0 and 0.0
        let mut path3 = Vec::new();
        for layer in 0..topo.total_layers() {
            let fam = topo.family_of_layer(layer);
            path3.push(ledger.add_cell(layer, CellGenotype::all_conv(fam), 3));
        }
        ledger.record_path(3, path3).unwrap();
        assert!((average_reuse_rate(&ledger, &topo, 3).unwrap() - 0.5).abs() < 1e-15);
        assert!(average_reuse_rate(&ledger, &topo, 1).is_err());
    }

    #[test]
    fn dynamics_respect_candidate_order_contract() {
        let cands = vec![vec![
            GrowthCandidate { cell: 0, owner_task: 1, params: 100 },
            GrowthCandidate { cell: 1, owner_task: 2, params: 100 },
        ]];
        let cfg = GrowthConfig { trials: 5, ..GrowthConfig::default() };
        let mut rng = rng_for(1, "growth-contract");
        let run = run_growth_dynamics(&cands, 2, &cfg, 100.0, 200.0, |_, _| Ok(0.5), &mut rng).unwrap();
        assert_eq!(run.chosen.len(), 1);
        // new cell not last -> error
        let bad = vec![vec![
            GrowthCandidate { cell: 1, owner_task: 2, params: 100 },
            GrowthCandidate { cell: 0, owner_task: 1, params: 100 },
        ]];
        let mut rng = rng_for(1, "growth-contract2");
        assert!(run_growth_dynamics(&bad, 2, &cfg, 100.0, 200.0, |_, _| Ok(0.5), &mut rng).is_err());
    }
}
