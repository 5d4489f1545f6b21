//! Command-line interface for the continual stereo pipeline.
//!
//! Subcommands mirror the pipeline: `gen-scenes`, stepwise `search` / `grow` /
//! `train`, the full `run` (with `--baseline` for incremental finetuning),
//! plus `route`, `eval`, and `report` over a run directory. Any config field
//! can be overridden with a flag of its dotted name, e.g.
//! `--search.trials 12` or `--scenes.0.seed 7`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use growstereo_core::checkpoint::{load_checkpoint, save_checkpoint};
use growstereo_core::config::RunConfig;
use growstereo_core::continual::{
    advance, resume_continual, run_continual, run_finetune_baseline, GeneratedScenes, Phase,
    RunState,
};
use growstereo_core::error::Error;
use growstereo_core::growth::growth_graph_dot;
use growstereo_core::io::{read_image_png, write_pfm, write_scene};
use growstereo_core::net::predict;
use growstereo_core::router::route;

#[derive(Parser)]
#[command(name = "growstereo", about = "Continual stereo matching via reusable architecture growth", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured scenes to disk.
    GenScenes {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the cell search for the next task and checkpoint.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run network growth for the current task and checkpoint.
    Grow {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Train the selected model, finish the task (router + evaluation), and
    /// checkpoint.
    Train {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Full continual run (every task, with checkpoints after each phase).
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Mandatory master seed.
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Run the incremental-finetuning baseline instead of growth.
        #[arg(long)]
        baseline: bool,
        /// Continue from an existing checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Route one image through the scene router.
    Route {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Evaluate the stored models on a scene's test set.
    Eval {
        #[arg(long)]
        dir: PathBuf,
        /// 1-based learned task to evaluate; defaults to every learned task.
        #[arg(long)]
        task: Option<usize>,
        /// Write predicted disparities as PFM files into this directory.
        #[arg(long)]
        save_pfm: Option<PathBuf>,
    },
    /// Print the run report and the growth graph.
    Report {
        #[arg(long)]
        dir: PathBuf,
        /// Also write the growth graph as DOT.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    // peel off dotted config overrides before clap sees the arguments
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut args: Vec<String> = Vec::new();
    let mut raw = std::env::args().peekable();
    while let Some(arg) = raw.next() {
        if let Some(name) = arg.strip_prefix("--") {
            if name.contains('.') {
                let (key, value) = match name.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => match raw.next() {
                        Some(v) => (name.to_string(), v),
                        None => {
                            return fail(&Error::InvalidConfig(format!(
                                "override --{name} needs a value"
                            )))
                        }
                    },
                };
                overrides.push((key, value));
                continue;
            }
        }
        args.push(arg);
    }

    let cli = Cli::parse_from(args);
    match dispatch(cli.command, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    let record = serde_json::json!({
        "error": { "kind": e.kind(), "message": e.to_string() }
    });
    eprintln!("{record}");
    ExitCode::FAILURE
}

fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = RunConfig::from_toml(&text)?;
    for (key, value) in overrides {
        cfg = cfg.with_override(key, value)?;
    }
    Ok(cfg)
}

fn write_run_outputs(dir: &Path, state: &RunState, report_toml: &str) -> Result<(), Error> {
    save_checkpoint(state, dir)?;
    std::fs::write(dir.join("report.toml"), report_toml)?;
    std::fs::write(dir.join("errors.csv"), state.errors.to_csv())?;
    Ok(())
}

fn dispatch(cmd: Command, overrides: &[(String, String)]) -> Result<(), Error> {
    match cmd {
        Command::GenScenes { config, out } => {
            let cfg = load_config(&config, overrides)?;
            cfg.validate_common()?;
            for spec in &cfg.scenes {
                let ds = growstereo_core::scene::generate_scene(spec, cfg.regime.max_disparity)?;
                write_scene(&out.join(&spec.name), &ds)?;
                println!(
                    "scene {}: {} train + {} test pairs",
                    spec.name,
                    ds.train.len(),
                    ds.test.len()
                );
            }
            Ok(())
        }
        Command::Search { config, dir, seed } => {
            let mut state = if dir.join("state.toml").exists() {
                load_checkpoint(&dir)?
            } else {
                let cfg = load_config(&config, overrides)?;
                let seed = seed.ok_or_else(|| {
                    Error::InvalidConfig("--seed is required to start a new run".into())
                })?;
                RunState::new(cfg, seed)?
            };
            expect_phase(&state, Phase::Search)?;
            let scenes = GeneratedScenes::from_config(&state.config)?;
            advance(&mut state, &scenes)?;
            save_checkpoint(&state, &dir)?;
            println!("searched task {}; next phase {:?}", state.cursor.task, state.cursor.phase);
            Ok(())
        }
        Command::Grow { dir } => {
            let mut state = load_checkpoint(&dir)?;
            expect_phase(&state, Phase::Grow)?;
            let scenes = GeneratedScenes::from_config(&state.config)?;
            advance(&mut state, &scenes)?;
            save_checkpoint(&state, &dir)?;
            let task = state.cursor.task;
            println!("grew task {task}; path {:?}", state.ledger.path(task)?);
            Ok(())
        }
        Command::Train { dir } => {
            let mut state = load_checkpoint(&dir)?;
            expect_phase(&state, Phase::Train)?;
            let scenes = GeneratedScenes::from_config(&state.config)?;
            advance(&mut state, &scenes)?; // train
            if state.cursor.phase == Phase::Finish {
                advance(&mut state, &scenes)?; // router + evaluation
            }
            save_checkpoint(&state, &dir)?;
            println!("trained; cursor {:?}", state.cursor);
            Ok(())
        }
        Command::Run { config, seed, out, baseline, resume } => {
            if resume && out.join("state.toml").exists() {
                let mut state = load_checkpoint(&out)?;
                let scenes = GeneratedScenes::from_config(&state.config)?;
                let report = resume_continual(&mut state, &scenes)?;
                write_run_outputs(&out, &state, &report.to_toml())?;
                println!("{}", report.to_toml());
                return Ok(());
            }
            let cfg = load_config(&config, overrides)?;
            cfg.validate_for_run()?;
            let scenes = GeneratedScenes::from_config(&cfg)?;
            let (state, report) = if baseline {
                run_finetune_baseline(&cfg, seed, &scenes, false)?
            } else {
                run_continual(&cfg, seed, &scenes, false)?
            };
            write_run_outputs(&out, &state, &report.to_toml())?;
            println!("{}", report.to_toml());
            Ok(())
        }
        Command::Route { dir, image } => {
            let state = load_checkpoint(&dir)?;
            let img = read_image_png(&image)?;
            let (task, errors) = route(&img, &state.router)?;
            println!(
                "{}",
                serde_json::json!({ "task": task, "reconstruction_errors": errors })
            );
            Ok(())
        }
        Command::Eval { dir, task, save_pfm } => {
            let state = load_checkpoint(&dir)?;
            let scenes = GeneratedScenes::from_config(&state.config)?;
            let learned = state.ledger.paths.len();
            let tasks: Vec<usize> = match task {
                Some(t) if t >= 1 && t <= learned => vec![t],
                Some(t) => {
                    return Err(Error::InvalidConfig(format!(
                        "task {t} not learned yet (have {learned})"
                    )))
                }
                None => (1..=learned).collect(),
            };
            for t in tasks {
                let (e, d, preds) = evaluate_task(&state, &scenes, t)?;
                println!("task {t}: EPE {e:.4} D1 {d:.3}%");
                if let Some(dirp) = &save_pfm {
                    std::fs::create_dir_all(dirp)?;
                    for (i, p) in preds.iter().enumerate() {
                        write_pfm(&dirp.join(format!("task{t}_pair{i:03}.pfm")), p)?;
                    }
                }
            }
            Ok(())
        }
        Command::Report { dir, dot } => {
            let state = load_checkpoint(&dir)?;
            let report_path = dir.join("report.toml");
            if report_path.exists() {
                println!("{}", std::fs::read_to_string(report_path)?);
            } else {
                println!("run incomplete; cursor {:?}", state.cursor);
                println!("{}", state.errors.to_csv());
            }
            let graph = growth_graph_dot(&state.ledger);
            match dot {
                Some(path) => std::fs::write(path, graph)?,
                None => println!("{graph}"),
            }
            Ok(())
        }
    }
}

fn expect_phase(state: &RunState, phase: Phase) -> Result<(), Error> {
    if state.cursor.phase != phase {
        return Err(Error::InvalidState(format!(
            "expected phase {phase:?}, checkpoint is at {:?} (task {})",
            state.cursor.phase, state.cursor.task
        )));
    }
    Ok(())
}

fn evaluate_task(
    state: &RunState,
    scenes: &GeneratedScenes,
    task: usize,
) -> Result<(f64, f64, Vec<growstereo_core::tensor::Grid>), Error> {
    use growstereo_core::metrics::{d1_all, epe};
    let path = state.ledger.path(task)?.to_vec();
    let exec = growstereo_core::continual::build_eval_exec(state, &path, task)?;
    let pairs = &scenes.datasets[task - 1].test;
    let mut es = 0.0;
    let mut ds = 0.0;
    let mut preds = Vec::new();
    for pair in pairs {
        let pred = predict(&exec, pair)?;
        let gt = pair.gt_disparity.as_ref().ok_or(Error::EmptyMask)?;
        let mask = pair
            .gt_mask
            .clone()
            .unwrap_or_else(|| growstereo_core::tensor::Mask::filled(gt.h, gt.w, true));
        es += epe(&pred, gt, &mask)?;
        ds += d1_all(&pred, gt, &mask)?;
        preds.push(pred);
    }
    let n = pairs.len().max(1) as f64;
    Ok((es / n, ds / n, preds))
}
