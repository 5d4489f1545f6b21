//! End-to-end continual runs at smoke scale: schema, frozen-history
//! equalities, the continual data constraint, and the self-supervised regime.

use std::cell::RefCell;

use growstereo_core::config::RunConfig;
use growstereo_core::continual::{
    run_continual, run_finetune_baseline, GeneratedScenes, SceneSource,
};
use growstereo_core::scene::{SceneSpec, SceneStyle, StereoPair};

fn scene(name: &str, tint: [f64; 3], brightness: f64, seed: u64) -> SceneSpec {
    SceneSpec {
        name: name.into(),
        style: SceneStyle { tint, brightness, noise_sigma: 0.03, texture_density: 0.6 },
        disparity_min: 2.0,
        disparity_max: 10.0,
        disparity_layers: 3,
        height: 48,
        width: 48,
        train_pairs: 6,
        test_pairs: 2,
        seed,
    }
}

fn smoke_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.scenes = vec![
        scene("amber", [1.0, 0.6, 0.2], 0.0, 601),
        scene("violet", [0.5, 0.2, 1.0], 0.12, 602),
    ];
    cfg.search.trials = 3;
    cfg.growth.trials = 4;
    cfg.regime.train_epochs = 3;
    cfg.regime.max_disparity = 12;
    cfg
}

#[test]
fn supervised_smoke_has_frozen_history() {
    use growstereo_core::continual::{advance, Phase, RunState};

    let cfg = smoke_config();
    let scenes = GeneratedScenes::from_config(&cfg).unwrap();

    // snapshot task 1's parameter bytes the moment it finishes, then make
    // sure learning task 2 never moves a single bit of them
    let mut stepped = RunState::new(cfg.clone(), 5).unwrap();
    while !(stepped.cursor.task == 2 && stepped.cursor.phase == Phase::Search) {
        advance(&mut stepped, &scenes).unwrap();
    }
    let snapshot: Vec<(u32, Vec<u64>)> = stepped
        .cell_params
        .iter()
        .map(|(id, buf)| (*id, buf.iter().map(|v| v.to_bits()).collect()))
        .collect();
    let adapter_snapshot: Vec<u64> = stepped.adapters[&1].iter().map(|v| v.to_bits()).collect();
    while stepped.cursor.phase != Phase::Done {
        advance(&mut stepped, &scenes).unwrap();
    }
    for (id, bits) in &snapshot {
        let now: Vec<u64> = stepped.cell_params[id].iter().map(|v| v.to_bits()).collect();
        assert_eq!(&now, bits, "frozen cell {id} moved");
    }
    let adapter_now: Vec<u64> = stepped.adapters[&1].iter().map(|v| v.to_bits()).collect();
    assert_eq!(adapter_now, adapter_snapshot, "frozen adapter moved");

    let (state, report) = run_continual(&cfg, 5, &scenes, false).unwrap();

    assert_eq!(report.tasks, 2);
    assert_eq!(report.bwt_epe, Some(0.0));
    assert_eq!(report.bwt_d1, Some(0.0));
    // matrix form of the same property: earlier-task entries never move
    assert_eq!(report.epe_matrix[1][0], report.epe_matrix[0][0]);
    assert_eq!(report.pred_hashes[1][0], report.pred_hashes[0][0]);
    let arr = report.arr.unwrap();
    assert!((0.0..=1.0).contains(&arr));
    assert!(report.routing_accuracy.is_some());
    assert_eq!(state.ledger.paths.len(), 2);

    // frozen cells are bit-identical after task 2 by construction; verify via
    // the cell buffers of task 1's path captured before task 2 ran
    for id in state.ledger.path(1).unwrap() {
        assert!(state.ledger.cell(*id).unwrap().frozen);
    }
}

#[test]
fn identical_seeds_reproduce_reports() {
    let cfg = smoke_config();
    let scenes = GeneratedScenes::from_config(&cfg).unwrap();
    let (_, a) = run_continual(&cfg, 21, &scenes, false).unwrap();
    let (_, b) = run_continual(&cfg, 21, &scenes, false).unwrap();
    assert_eq!(a.content_digest(), b.content_digest());
    let (_, c) = run_continual(&cfg, 22, &scenes, false).unwrap();
    assert_ne!(a.content_digest(), c.content_digest());
}

#[test]
fn self_supervised_smoke_completes() {
    let mut cfg = smoke_config();
    cfg.regime.kind = "self_supervised".into();
    cfg.regime.train_epochs = 2;
    cfg.regime.adapt_epochs = 2;
    cfg.regime.synthetic_pairs = 6;
    cfg.growth = growstereo_core::config::GrowthSection {
        c0: 5,
        phi_fraction: 1.0,
        trials: 3,
        ..Default::default()
    };
    let scenes = GeneratedScenes::from_config(&cfg).unwrap();
    let (_, report) = run_continual(&cfg, 9, &scenes, false).unwrap();
    assert_eq!(report.regime, "self_supervised");
    assert_eq!(report.bwt_epe, Some(0.0));
    assert!(report.fae_epe.is_finite());
}

/// Source double that records which task's training data each phase touches.
struct LoggingSource {
    inner: GeneratedScenes,
    current_task: RefCell<usize>,
    violations: RefCell<Vec<String>>,
    train_reads: RefCell<usize>,
}

impl SceneSource for LoggingSource {
    fn count(&self) -> usize {
        self.inner.count()
    }
    fn spec(&self, index: usize) -> &SceneSpec {
        self.inner.spec(index)
    }
    fn train(&self, index: usize) -> &[StereoPair] {
        let current = *self.current_task.borrow();
        *self.train_reads.borrow_mut() += 1;
        if index + 1 != current {
            self.violations
                .borrow_mut()
                .push(format!("task {} read training data of scene {}", current, index + 1));
        }
        self.inner.train(index)
    }
    fn test(&self, index: usize) -> &[StereoPair] {
        self.inner.test(index)
    }
    fn note_phase(&self, task: usize, _phase: &str) {
        *self.current_task.borrow_mut() = task;
    }
}

#[test]
fn training_never_reads_other_tasks_data() {
    let cfg = smoke_config();
    let source = LoggingSource {
        inner: GeneratedScenes::from_config(&cfg).unwrap(),
        current_task: RefCell::new(0),
        violations: RefCell::new(Vec::new()),
        train_reads: RefCell::new(0),
    };
    let (_, _) = run_continual(&cfg, 31, &source, false).unwrap();
    assert!(*source.train_reads.borrow() > 0);
    assert!(
        source.violations.borrow().is_empty(),
        "continual constraint violated: {:?}",
        source.violations.borrow()
    );

    // the finetune baseline obeys the same access discipline
    let source = LoggingSource {
        inner: GeneratedScenes::from_config(&cfg).unwrap(),
        current_task: RefCell::new(0),
        violations: RefCell::new(Vec::new()),
        train_reads: RefCell::new(0),
    };
    let (_, report) = run_finetune_baseline(&cfg, 31, &source, false).unwrap();
    assert!(source.violations.borrow().is_empty());
    assert_eq!(report.method, "finetune");
    assert!(report.arr.is_none());
}
