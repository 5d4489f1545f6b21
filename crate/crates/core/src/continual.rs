//! The continual training loop: per task, search task-specific cells, grow
//! the network against the frozen history, train, register a router entry,
//! and evaluate the full error matrix. Also the incremental-finetuning
//! baseline that demonstrates catastrophic forgetting.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::arch::{cell_param_count, CellGenotype, Family, NetworkTopology};
use crate::config::{Regime, RunConfig};
use crate::error::{Error, Result};
use crate::growth::{
    average_reuse_rate, prune_unadopted, run_growth_dynamics, CellId, GrowthCandidate,
    GrowthLedger,
};
use crate::metrics::{compute_bwt, compute_fae, d1_all, epe, ErrorMatrix};
use crate::net::{
    params, train_epoch, AdaptiveOpt, CellExec, LossKind, ModelExec,
};
use crate::proxy::build_proxy_dataset;
use crate::router::{encode_representation, route, train_router_entry, RouterBank};
use crate::scene::{generate_scene, SceneDataset, SceneSpec, StereoPair};
use crate::search::{run_cell_search, SearchConfig};
use crate::seeds::{derive_seed, hash_f64s};
use crate::tensor::Grid;

pub const STATE_VERSION: u32 = 1;

/// Task data access. The continual loop reads `train(t)` only while working
/// on task `t`; a logging implementation can enforce that in tests.
pub trait SceneSource {
    fn count(&self) -> usize;
    fn spec(&self, index: usize) -> &SceneSpec;
    /// Training pairs of the zero-based scene `index`.
    fn train(&self, index: usize) -> &[StereoPair];
    /// Test pairs of the zero-based scene `index`.
    fn test(&self, index: usize) -> &[StereoPair];
    /// Phase notifications, for access-logging doubles.
    fn note_phase(&self, _task: usize, _phase: &str) {}
}

/// Scenes generated from the config, in order.
pub struct GeneratedScenes {
    pub datasets: Vec<SceneDataset>,
}

impl GeneratedScenes {
    pub fn from_config(config: &RunConfig) -> Result<GeneratedScenes> {
        let datasets = config
            .scenes
            .iter()
            .map(|s| generate_scene(s, config.regime.max_disparity))
            .collect::<Result<Vec<_>>>()?;
        Ok(GeneratedScenes { datasets })
    }
}

impl SceneSource for GeneratedScenes {
    fn count(&self) -> usize {
        self.datasets.len()
    }
    fn spec(&self, index: usize) -> &SceneSpec {
        &self.datasets[index].spec
    }
    fn train(&self, index: usize) -> &[StereoPair] {
        &self.datasets[index].train
    }
    fn test(&self, index: usize) -> &[StereoPair] {
        &self.datasets[index].test
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Search,
    Grow,
    Train,
    Finish,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Cursor {
    /// 1-based task currently being learned.
    pub task: usize,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TaskScratch {
    pub feature_genotype: CellGenotype,
    pub matching_genotype: CellGenotype,
    /// New cell ids, one per layer.
    pub new_cells: Vec<CellId>,
    /// Chosen path once growth (or task 1's search) finalized.
    pub path: Option<Vec<CellId>>,
}

/// Complete mutable state of a continual run; checkpointable between phases.
#[derive(Debug)]
pub struct RunState {
    pub version: u32,
    pub config: RunConfig,
    pub seed: u64,
    pub ledger: GrowthLedger,
    pub cell_params: BTreeMap<CellId, Vec<f64>>,
    pub adapters: BTreeMap<usize, Vec<f64>>,
    pub router: RouterBank,
    pub errors: ErrorMatrix,
    /// Fingerprint of the concatenated test predictions per (task, eval task).
    pub pred_hashes: Vec<Vec<u64>>,
    pub cursor: Cursor,
    pub scratch: Option<TaskScratch>,
    pub search_traces: Vec<String>,
    pub growth_traces: Vec<String>,
    pub wall_clock_s: f64,
    /// Kept only when requested; never serialized.
    pub kept_predictions: Option<BTreeMap<(usize, usize), Vec<Grid>>>,
}

impl RunState {
    pub fn new(config: RunConfig, seed: u64) -> Result<RunState> {
        config.validate_for_run()?;
        let topo = config.topology();
        Ok(RunState {
            version: STATE_VERSION,
            seed,
            ledger: GrowthLedger::new(topo.total_layers()),
            cell_params: BTreeMap::new(),
            adapters: BTreeMap::new(),
            router: RouterBank::new(config.router.lambda),
            errors: ErrorMatrix::default(),
            pred_hashes: Vec::new(),
            cursor: Cursor { task: 1, phase: Phase::Search },
            scratch: None,
            search_traces: Vec::new(),
            growth_traces: Vec::new(),
            wall_clock_s: 0.0,
            kept_predictions: None,
            config,
        })
    }

    pub fn topology(&self) -> NetworkTopology {
        self.config.topology()
    }

    pub fn keep_predictions(&mut self) {
        self.kept_predictions = Some(BTreeMap::new());
    }

    fn unit_seed(&self, tag: &str) -> u64 {
        derive_seed(self.seed, tag)
    }
}

/// Conv-edge parameter total of the all-conv base model, the reuse target's
/// reference mass.
pub fn base_model_cell_params(topo: &NetworkTopology) -> u64 {
    (0..topo.total_layers())
        .map(|layer| {
            let fam = topo.family_of_layer(layer);
            cell_param_count(&CellGenotype::all_conv(fam), topo.width_of(fam)).0
        })
        .sum()
}

struct PhaseData {
    /// Pool the search and growth trials train on (proxy pairs when
    /// self-supervised), already split.
    search_train: Vec<StereoPair>,
    search_val: Vec<StereoPair>,
    /// Pairs for the final supervised training phase.
    final_train: Vec<StereoPair>,
    /// Real pairs for self-supervised adaptation.
    adapt: Option<Vec<StereoPair>>,
}

fn split_pool(mut pool: Vec<StereoPair>, val_fraction: f64) -> (Vec<StereoPair>, Vec<StereoPair>) {
    let n = pool.len();
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let val = pool.split_off(n - n_val);
    (pool, val)
}

fn phase_data(state: &RunState, source: &dyn SceneSource, task: usize) -> Result<PhaseData> {
    let scene_idx = task - 1;
    let real_train = source.train(scene_idx);
    if real_train.is_empty() {
        return Err(Error::InvalidState(format!("scene {scene_idx} has no training pairs")));
    }
    match state.config.regime_kind()? {
        Regime::Supervised => {
            let pool: Vec<StereoPair> = real_train.to_vec();
            let (tr, val) = split_pool(pool.clone(), state.config.search.val_fraction);
            Ok(PhaseData { search_train: tr, search_val: val, final_train: pool, adapt: None })
        }
        Regime::SelfSupervised => {
            let synth = generate_scene(&state.config.synthetic_spec(), state.config.regime.max_disparity)?;
            let views: Vec<&crate::tensor::Vol> =
                real_train.iter().flat_map(|p| [&p.left, &p.right]).collect();
            let proxy = build_proxy_dataset(&synth, &views, &state.config.scenes[scene_idx].name)?;
            let (tr, val) = split_pool(proxy.pairs.clone(), state.config.search.val_fraction);
            Ok(PhaseData {
                search_train: tr,
                search_val: val,
                final_train: proxy.pairs,
                adapt: Some(real_train.to_vec()),
            })
        }
    }
}

/// Assemble an executable model for `path`, marking units owned by
/// `live_task` trainable. Buffers are cloned from the store; the caller
/// writes live buffers back with [`absorb_exec`].
fn build_exec(
    state: &RunState,
    path: &[CellId],
    adapter_task: usize,
    live_task: Option<usize>,
) -> Result<ModelExec> {
    let topo = state.topology();
    let mut cells = Vec::with_capacity(path.len());
    for (layer, id) in path.iter().enumerate() {
        let cell = state.ledger.cell(*id)?;
        let width = topo.width_of(topo.family_of_layer(layer));
        let buf = state
            .cell_params
            .get(id)
            .ok_or_else(|| Error::InvalidState(format!("missing parameters for cell {id}")))?
            .clone();
        let live = live_task == Some(cell.owner_task);
        cells.push(CellExec::new(format!("cell-{id}"), &cell.genotype, width, buf, live));
    }
    let adapter = state
        .adapters
        .get(&adapter_task)
        .ok_or_else(|| Error::InvalidState(format!("missing adapter for task {adapter_task}")))?
        .clone();
    Ok(ModelExec {
        adapter_id: format!("adapter-{adapter_task}"),
        adapter_layout: params::AdapterLayout::new(&topo),
        adapter,
        adapter_live: live_task == Some(adapter_task),
        cells,
        topo,
    })
}

/// Read-only model for a learned task's path, for inference and evaluation.
pub fn build_eval_exec(state: &RunState, path: &[CellId], task: usize) -> Result<ModelExec> {
    build_exec(state, path, task, None)
}

/// Write the trainable buffers of an exec back into the store.
fn absorb_exec(state: &mut RunState, exec: ModelExec, adapter_task: usize) {
    if exec.adapter_live {
        state.adapters.insert(adapter_task, exec.adapter);
    }
    for cell in exec.cells {
        if cell.live {
            let id: CellId = cell
                .id
                .strip_prefix("cell-")
                .and_then(|s| s.parse().ok())
                .expect("cell exec ids are cell-<id>");
            state.cell_params.insert(id, cell.params);
        }
    }
}

fn phase_search(state: &mut RunState, source: &dyn SceneSource) -> Result<()> {
    let task = state.cursor.task;
    source.note_phase(task, "search");
    let topo = state.topology();
    let data = phase_data(state, source, task)?;
    let cfg = SearchConfig {
        trials: state.config.search.trials,
        epochs_per_trial: state.config.search.epochs_per_trial,
        loss: LossKind::Supervised,
    };
    let outcome = run_cell_search(
        &data.search_train,
        &data.search_val,
        &topo,
        &cfg,
        state.unit_seed(&format!("task{task}/search")),
    )?;

    let mut new_cells = Vec::with_capacity(topo.total_layers());
    for layer in 0..topo.total_layers() {
        let fam = topo.family_of_layer(layer);
        let genotype = match fam {
            Family::Feature => outcome.feature.clone(),
            Family::Matching => outcome.matching.clone(),
        };
        let buf = crate::search::extract_cell_params(
            &outcome.harvest.cell_bufs[layer],
            fam,
            topo.width_of(fam),
            &genotype,
        );
        let id = state.ledger.add_cell(layer, genotype, task);
        state.cell_params.insert(id, buf);
        new_cells.push(id);
    }
    state.adapters.insert(task, outcome.harvest.adapter);
    state.search_traces.push(crate::search::write_trace_jsonl(&outcome.trace));

    let path = if task == 1 {
        state.ledger.record_path(1, new_cells.clone())?;
        Some(new_cells.clone())
    } else {
        None
    };
    state.scratch = Some(TaskScratch {
        feature_genotype: outcome.feature,
        matching_genotype: outcome.matching,
        new_cells,
        path,
    });
    state.cursor.phase = if task == 1 { Phase::Train } else { Phase::Grow };
    Ok(())
}

fn phase_grow(state: &mut RunState, source: &dyn SceneSource) -> Result<()> {
    let task = state.cursor.task;
    source.note_phase(task, "grow");
    let topo = state.topology();
    let data = phase_data(state, source, task)?;
    let growth_cfg = state.config.growth_config()?;
    let phi_total = base_model_cell_params(&topo) as f64;
    let phi = growth_cfg.phi_fraction * phi_total;

    // candidates per layer: adopted old cells (owners ascending) then the new
    let scratch = state.scratch.clone().ok_or_else(|| {
        Error::InvalidState("growth phase reached without a searched scratch".into())
    })?;
    let mut candidates: Vec<Vec<GrowthCandidate>> = Vec::with_capacity(topo.total_layers());
    for layer in 0..topo.total_layers() {
        let mut cands: Vec<GrowthCandidate> = Vec::new();
        for id in &state.ledger.layers[layer] {
            let cell = state.ledger.cell(*id)?;
            let params = state.ledger.cell_params(*id, &topo)?;
            cands.push(GrowthCandidate { cell: *id, owner_task: cell.owner_task, params });
        }
        cands.sort_by_key(|c| (c.owner_task, c.cell));
        if cands.last().map(|c| c.owner_task) != Some(task) {
            return Err(Error::InvalidState(format!(
                "layer {layer} lacks the searched new cell"
            )));
        }
        candidates.push(cands);
    }

    let mut opt = AdaptiveOpt::new(crate::net::optim::LEARNING_RATE);
    let mut rng = crate::seeds::rng_for(state.seed, &format!("task{task}/growth"));

    // the evaluator needs mutable access to the store (trained new cells
    // persist across trials), so state splits via a RefCell-free dance:
    // buffers round-trip through build/absorb on each trial
    let state_cell = std::cell::RefCell::new(&mut *state);
    let run = {
        let eval = |_trial: usize, sel: &[usize]| -> Result<f64> {
            let mut st = state_cell.borrow_mut();
            let path: Vec<CellId> =
                sel.iter().zip(&candidates).map(|(&k, c)| c[k].cell).collect();
            let mut exec = build_exec(&st, &path, task, Some(task))?;
            train_epoch(&mut exec, &mut opt, &data.search_train, LossKind::Supervised)?;
            let sigma = crate::search::validation_error_rate(&exec, &data.search_val)?;
            absorb_exec(&mut st, exec, task);
            Ok(sigma)
        };
        run_growth_dynamics(&candidates, task, &growth_cfg, phi, phi_total, eval, &mut rng)?
    };
    let state = &mut *state_cell.into_inner();

    let path: Vec<CellId> =
        run.chosen.iter().zip(&candidates).map(|(&k, c)| c[k].cell).collect();
    state.ledger.record_path(task, path.clone())?;
    let removed = prune_unadopted(&mut state.ledger, task, &path)?;
    for id in removed {
        state.cell_params.remove(&id);
    }
    state.growth_traces.push(
        run.trace
            .iter()
            .map(|r| serde_json::to_string(r).expect("trace serializes"))
            .collect::<Vec<_>>()
            .join("\n"),
    );
    if let Some(s) = state.scratch.as_mut() {
        s.path = Some(path);
    }
    let _ = scratch;
    state.cursor.phase = Phase::Train;
    Ok(())
}

fn phase_train(state: &mut RunState, source: &dyn SceneSource) -> Result<()> {
    let task = state.cursor.task;
    source.note_phase(task, "train");
    let data = phase_data(state, source, task)?;
    let path = state
        .scratch
        .as_ref()
        .and_then(|s| s.path.clone())
        .ok_or_else(|| Error::InvalidState("train phase reached without a chosen path".into()))?;

    let mut exec = build_exec(state, &path, task, Some(task))?;
    let mut opt = AdaptiveOpt::new(crate::net::optim::LEARNING_RATE);
    for _ in 0..state.config.regime.train_epochs {
        train_epoch(&mut exec, &mut opt, &data.final_train, LossKind::Supervised)?;
    }
    if let Some(adapt) = &data.adapt {
        for _ in 0..state.config.regime.adapt_epochs {
            train_epoch(&mut exec, &mut opt, adapt, LossKind::SelfSupervised)?;
        }
    }
    absorb_exec(state, exec, task);
    state.ledger.freeze_task(task);
    state.cursor.phase = Phase::Finish;
    Ok(())
}

fn eval_task_row(
    state: &mut RunState,
    source: &dyn SceneSource,
    upto: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<u64>)> {
    let mut epe_row = Vec::with_capacity(upto);
    let mut d1_row = Vec::with_capacity(upto);
    let mut hashes = Vec::with_capacity(upto);
    for i in 1..=upto {
        let path = state.ledger.path(i)?.to_vec();
        let exec = build_exec(state, &path, i, None)?;
        let (e, d, h, preds) = eval_model_on(&exec, source.test(i - 1))?;
        epe_row.push(e);
        d1_row.push(d);
        hashes.push(h);
        if let Some(kept) = state.kept_predictions.as_mut() {
            kept.insert((upto, i), preds);
        }
    }
    Ok((epe_row, d1_row, hashes))
}

/// Mean EPE and D1 over a test set plus a bit-exact prediction fingerprint.
/// Pairs evaluate in parallel; metrics accumulate in pair order.
fn eval_model_on(
    exec: &ModelExec,
    pairs: &[StereoPair],
) -> Result<(f64, f64, u64, Vec<Grid>)> {
    let preds = crate::net::predict_batch(exec, pairs)?;
    let mut es = 0.0;
    let mut ds = 0.0;
    let mut all: Vec<f64> = Vec::new();
    for (pair, pred) in pairs.iter().zip(&preds) {
        let gt = pair
            .gt_disparity
            .as_ref()
            .ok_or_else(|| Error::InvalidState("test pair lacks ground truth".into()))?;
        let mask = pair
            .gt_mask
            .clone()
            .unwrap_or_else(|| crate::tensor::Mask::filled(gt.h, gt.w, true));
        es += epe(pred, gt, &mask)?;
        ds += d1_all(pred, gt, &mask)?;
        all.extend_from_slice(&pred.data);
    }
    let n = pairs.len().max(1) as f64;
    Ok((es / n, ds / n, hash_f64s(&all), preds))
}

fn phase_finish(state: &mut RunState, source: &dyn SceneSource) -> Result<()> {
    let task = state.cursor.task;
    source.note_phase(task, "finish");

    // router entry trains on the real scene images in either regime
    let reprs: Vec<Vec<f64>> = source
        .train(task - 1)
        .iter()
        .map(|p| encode_representation(&p.left))
        .collect();
    let router_seed = state.unit_seed(&format!("task{task}/router"));
    train_router_entry(&mut state.router, &reprs, router_seed)?;

    let (epe_row, d1_row, hashes) = eval_task_row(state, source, task)?;
    state.errors.push_row(epe_row, d1_row)?;
    state.pred_hashes.push(hashes);

    state.scratch = None;
    if task == source.count() {
        state.cursor.phase = Phase::Done;
    } else {
        state.cursor = Cursor { task: task + 1, phase: Phase::Search };
    }
    Ok(())
}

/// Advance one phase.
pub fn advance(state: &mut RunState, source: &dyn SceneSource) -> Result<()> {
    if source.count() != state.config.scenes.len() {
        return Err(Error::InvalidState("scene source does not match the config".into()));
    }
    let t0 = Instant::now();
    let r = match state.cursor.phase {
        Phase::Search => phase_search(state, source),
        Phase::Grow => phase_grow(state, source),
        Phase::Train => phase_train(state, source),
        Phase::Finish => phase_finish(state, source),
        Phase::Done => Err(Error::InvalidState("run already complete".into())),
    };
    state.wall_clock_s += t0.elapsed().as_secs_f64();
    r
}

pub fn run_to_completion(state: &mut RunState, source: &dyn SceneSource) -> Result<()> {
    while state.cursor.phase != Phase::Done {
        advance(state, source)?;
    }
    Ok(())
}

/// Measured routing accuracy over every scene's held-out images.
pub fn routing_accuracy(state: &RunState, source: &dyn SceneSource) -> Result<(f64, Vec<f64>)> {
    let mut per_scene = Vec::with_capacity(source.count());
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in 0..source.count() {
        let mut c = 0usize;
        let pairs = source.test(i);
        for pair in pairs {
            let (task, _) = route(&pair.left, &state.router)?;
            if task == i + 1 {
                c += 1;
            }
        }
        per_scene.push(c as f64 / pairs.len().max(1) as f64);
        correct += c;
        total += pairs.len();
    }
    Ok((correct as f64 / total.max(1) as f64, per_scene))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub method: String,
    pub regime: String,
    pub seed: u64,
    pub config_hash: String,
    pub tasks: usize,
    pub fae_epe: f64,
    pub fae_d1: f64,
    pub bwt_epe: Option<f64>,
    pub bwt_d1: Option<f64>,
    pub arr: Option<f64>,
    pub routing_accuracy: Option<f64>,
    pub routing_per_scene: Vec<f64>,
    pub wall_clock_s: f64,
    pub epe_matrix: Vec<Vec<f64>>,
    pub d1_matrix: Vec<Vec<f64>>,
    pub pred_hashes: Vec<Vec<String>>,
}

impl RunReport {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_toml(text: &str) -> Result<RunReport> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("report: {e}")))
    }

    /// Everything except wall-clock, which is inherently non-deterministic.
    pub fn content_digest(&self) -> u64 {
        let mut clone = self.clone();
        clone.wall_clock_s = 0.0;
        crate::seeds::fnv1a(clone.to_toml().as_bytes())
    }
}

fn finish_report(state: &RunState, source: &dyn SceneSource, method: &str) -> Result<RunReport> {
    let n = source.count();
    let (fae_epe, fae_d1) = compute_fae(&state.errors, n)?;
    let (bwt_epe, bwt_d1) = if n >= 2 {
        let (a, b) = compute_bwt(&state.errors, n)?;
        (Some(a), Some(b))
    } else {
        (None, None)
    };
    let (arr, routing, per_scene) = if method == "growth" {
        let arr = if n >= 2 {
            Some(average_reuse_rate(&state.ledger, &state.topology(), n)?)
        } else {
            None
        };
        let (acc, per) = routing_accuracy(state, source)?;
        (arr, Some(acc), per)
    } else {
        (None, None, Vec::new())
    };
    Ok(RunReport {
        version: STATE_VERSION,
        method: method.to_string(),
        regime: state.config.regime.kind.clone(),
        seed: state.seed,
        config_hash: format!("{:016x}", state.config.content_hash()),
        tasks: n,
        fae_epe,
        fae_d1,
        bwt_epe,
        bwt_d1,
        arr,
        routing_accuracy: routing,
        routing_per_scene: per_scene,
        wall_clock_s: state.wall_clock_s,
        epe_matrix: state.errors.epe.clone(),
        d1_matrix: state.errors.d1.clone(),
        pred_hashes: state
            .pred_hashes
            .iter()
            .map(|row| row.iter().map(|h| format!("{h:016x}")).collect())
            .collect(),
    })
}

/// Full continual run with reusable architecture growth.
pub fn run_continual(
    config: &RunConfig,
    seed: u64,
    source: &dyn SceneSource,
    keep_predictions: bool,
) -> Result<(RunState, RunReport)> {
    let mut state = RunState::new(config.clone(), seed)?;
    if keep_predictions {
        state.keep_predictions();
    }
    run_to_completion(&mut state, source)?;
    let report = finish_report(&state, source, "growth")?;
    Ok((state, report))
}

/// Resume from a loaded state and produce the final report.
pub fn resume_continual(
    state: &mut RunState,
    source: &dyn SceneSource,
) -> Result<RunReport> {
    run_to_completion(state, source)?;
    finish_report(state, source, "growth")
}

/// Incremental finetuning: one fixed architecture (cells searched on the
/// first scene), sequentially finetuned, everything trainable throughout.
pub fn run_finetune_baseline(
    config: &RunConfig,
    seed: u64,
    source: &dyn SceneSource,
    keep_predictions: bool,
) -> Result<(RunState, RunReport)> {
    let mut state = RunState::new(config.clone(), seed)?;
    if keep_predictions {
        state.keep_predictions();
    }
    let t0 = Instant::now();

    // task 1: identical search to the growth run
    phase_search(&mut state, source)?;
    let path = state.ledger.path(1)?.to_vec();

    for task in 1..=source.count() {
        source.note_phase(task, "train");
        let data = phase_data(&state, source, task)?;
        // the single model lives under task 1's units; all of them train
        let mut exec = build_exec(&state, &path, 1, Some(1))?;
        let mut opt = AdaptiveOpt::new(crate::net::optim::LEARNING_RATE);
        match state.config.regime_kind()? {
            Regime::Supervised => {
                for _ in 0..state.config.regime.train_epochs {
                    train_epoch(&mut exec, &mut opt, &data.final_train, LossKind::Supervised)?;
                }
            }
            Regime::SelfSupervised => {
                if task == 1 {
                    for _ in 0..state.config.regime.train_epochs {
                        train_epoch(&mut exec, &mut opt, &data.final_train, LossKind::Supervised)?;
                    }
                }
                let adapt = data.adapt.as_ref().expect("self-supervised data");
                for _ in 0..state.config.regime.adapt_epochs {
                    train_epoch(&mut exec, &mut opt, adapt, LossKind::SelfSupervised)?;
                }
            }
        }
        absorb_exec(&mut state, exec, 1);

        source.note_phase(task, "finish");
        let mut epe_row = Vec::new();
        let mut d1_row = Vec::new();
        let mut hashes = Vec::new();
        for i in 1..=task {
            let exec = build_exec(&state, &path, 1, None)?;
            let (e, d, h, preds) = eval_model_on(&exec, source.test(i - 1))?;
            epe_row.push(e);
            d1_row.push(d);
            hashes.push(h);
            if let Some(kept) = state.kept_predictions.as_mut() {
                kept.insert((task, i), preds);
            }
        }
        state.errors.push_row(epe_row, d1_row)?;
        state.pred_hashes.push(hashes);
    }
    state.cursor = Cursor { task: source.count(), phase: Phase::Done };
    state.wall_clock_s = t0.elapsed().as_secs_f64();
    let report = finish_report(&state, source, "finetune")?;
    Ok((state, report))
}
