//! Checkpoint directory layout:
//!
//! ```text
//! <dir>/state.toml            run metadata, cursor, scratch, config
//! <dir>/ledger.txt            cells (id, layer, owner, frozen) and task paths
//! <dir>/genotypes/cell-N.txt  one genotype document per cell
//! <dir>/params.bin            every unit's parameters, flat little-endian f64
//! <dir>/params.manifest.txt   unit id, offset, length per line
//! <dir>/errors.csv            error-matrix rows so far
//! <dir>/traces/               per-task search and growth traces (JSONL)
//! ```
//!
//! Loading validates the whole directory before constructing any state, so a
//! corrupt checkpoint never yields a partially restored run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::arch::CellGenotype;
use crate::config::RunConfig;
use crate::continual::{Cursor, RunState, TaskScratch, STATE_VERSION};
use crate::error::{Error, Result};
use crate::growth::{CellId, GrowthLedger, LedgerCell};
use crate::metrics::ErrorMatrix;
use crate::net::params::CellLayout;
use crate::net::AdapterLayout;
use crate::router::{Autoencoder, RouterBank, AE_LEN};

#[derive(serde::Serialize, serde::Deserialize)]
struct ScratchDoc {
    feature_genotype: String,
    matching_genotype: String,
    new_cells: Vec<CellId>,
    path: Option<Vec<CellId>>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct StateDoc {
    version: u32,
    seed: u64,
    config_hash: String,
    cursor: Cursor,
    scratch: Option<ScratchDoc>,
    router_lambda: f64,
    router_tasks: usize,
    pred_hashes: Vec<Vec<String>>,
    wall_clock_s: f64,
    config: RunConfig,
}

fn ledger_to_text(ledger: &GrowthLedger) -> String {
    let mut s = String::new();
    s.push_str("version 1\n");
    s.push_str(&format!("layers {}\n", ledger.layers.len()));
    s.push_str(&format!("next_id {}\n", ledger.next_id));
    for cell in ledger.cells.values() {
        s.push_str(&format!(
            "cell {} layer {} owner {} frozen {}\n",
            cell.id, cell.layer, cell.owner_task, cell.frozen
        ));
    }
    for (i, path) in ledger.paths.iter().enumerate() {
        let ids: Vec<String> = path.iter().map(|id| id.to_string()).collect();
        s.push_str(&format!("path {} {}\n", i + 1, ids.join(",")));
    }
    s
}

fn ledger_from_text(text: &str, genotypes: &BTreeMap<CellId, CellGenotype>) -> Result<GrowthLedger> {
    let mut layers_count = None;
    let mut next_id = 0;
    let mut cells: BTreeMap<CellId, LedgerCell> = BTreeMap::new();
    let mut paths: Vec<(usize, Vec<CellId>)> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["version", "1"] => {}
            ["layers", n] => {
                layers_count = Some(n.parse::<usize>().map_err(|_| bad_ledger(line))?)
            }
            ["next_id", n] => next_id = n.parse().map_err(|_| bad_ledger(line))?,
            ["cell", id, "layer", layer, "owner", owner, "frozen", frozen] => {
                let id: CellId = id.parse().map_err(|_| bad_ledger(line))?;
                let genotype = genotypes
                    .get(&id)
                    .ok_or_else(|| Error::Checkpoint(format!("missing genotype for cell {id}")))?
                    .clone();
                cells.insert(
                    id,
                    LedgerCell {
                        id,
                        layer: layer.parse().map_err(|_| bad_ledger(line))?,
                        genotype,
                        owner_task: owner.parse().map_err(|_| bad_ledger(line))?,
                        frozen: frozen.parse().map_err(|_| bad_ledger(line))?,
                    },
                );
            }
            ["path", task, ids] => {
                let task: usize = task.parse().map_err(|_| bad_ledger(line))?;
                let ids = ids
                    .split(',')
                    .map(|s| s.parse::<CellId>().map_err(|_| bad_ledger(line)))
                    .collect::<Result<Vec<_>>>()?;
                paths.push((task, ids));
            }
            _ => return Err(bad_ledger(line)),
        }
    }
    let layers_count =
        layers_count.ok_or_else(|| Error::Checkpoint("ledger missing layer count".into()))?;
    let mut layers: Vec<Vec<CellId>> = vec![Vec::new(); layers_count];
    for cell in cells.values() {
        if cell.layer >= layers_count {
            return Err(Error::Checkpoint(format!(
                "cell {} names layer {} of {layers_count}",
                cell.id, cell.layer
            )));
        }
        layers[cell.layer].push(cell.id);
    }
    // adoption order: owners ascending then id, matching how cells were added
    for layer in &mut layers {
        layer.sort_by_key(|id| (cells[id].owner_task, *id));
    }
    paths.sort_by_key(|(t, _)| *t);
    let mut ledger = GrowthLedger { cells, layers, paths: Vec::new(), next_id };
    for (task, ids) in paths {
        if task != ledger.paths.len() + 1 {
            return Err(Error::Checkpoint(format!("ledger paths not contiguous at task {task}")));
        }
        ledger
            .record_path(task, ids)
            .map_err(|e| Error::Checkpoint(format!("ledger path {task}: {e}")))?;
    }
    Ok(ledger)
}

fn bad_ledger(line: &str) -> Error {
    Error::Checkpoint(format!("unparseable ledger line '{line}'"))
}

/// Persist the full run state.
pub fn save_checkpoint(state: &RunState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::create_dir_all(dir.join("genotypes"))?;
    fs::create_dir_all(dir.join("traces"))?;

    // parameters: cells, adapters, router entries, concatenated in id order
    let mut bin: Vec<u8> = Vec::new();
    let mut manifest = String::new();
    let push = |id: &str, data: &[f64], bin: &mut Vec<u8>, manifest: &mut String| {
        let offset = bin.len() / 8;
        for v in data {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        manifest.push_str(&format!("{id} {offset} {}\n", data.len()));
    };
    for (id, buf) in &state.cell_params {
        push(&format!("cell-{id}"), buf, &mut bin, &mut manifest);
    }
    for (task, buf) in &state.adapters {
        push(&format!("adapter-{task}"), buf, &mut bin, &mut manifest);
    }
    for (i, ae) in state.router.autoencoders.iter().enumerate() {
        push(&format!("router-ae-{}", i + 1), &ae.weights, &mut bin, &mut manifest);
    }
    fs::write(dir.join("params.bin"), &bin)?;
    fs::write(dir.join("params.manifest.txt"), manifest)?;

    for (id, cell) in &state.ledger.cells {
        fs::write(dir.join("genotypes").join(format!("cell-{id}.txt")), cell.genotype.to_text())?;
    }
    fs::write(dir.join("ledger.txt"), ledger_to_text(&state.ledger))?;
    fs::write(dir.join("errors.csv"), state.errors.to_csv())?;

    for (i, trace) in state.search_traces.iter().enumerate() {
        fs::write(dir.join("traces").join(format!("search-task{}.jsonl", i + 1)), trace)?;
    }
    // growth only happens from the second task on
    for (i, trace) in state.growth_traces.iter().enumerate() {
        fs::write(dir.join("traces").join(format!("growth-task{}.jsonl", i + 2)), trace)?;
    }

    let doc = StateDoc {
        version: state.version,
        seed: state.seed,
        config_hash: format!("{:016x}", state.config.content_hash()),
        cursor: state.cursor,
        scratch: state.scratch.as_ref().map(|s| ScratchDoc {
            feature_genotype: s.feature_genotype.to_text(),
            matching_genotype: s.matching_genotype.to_text(),
            new_cells: s.new_cells.clone(),
            path: s.path.clone(),
        }),
        router_lambda: state.router.lambda,
        router_tasks: state.router.task_count(),
        pred_hashes: state
            .pred_hashes
            .iter()
            .map(|row| row.iter().map(|h| format!("{h:016x}")).collect())
            .collect(),
        wall_clock_s: state.wall_clock_s,
        config: state.config.clone(),
    };
    fs::write(
        dir.join("state.toml"),
        toml::to_string_pretty(&doc).map_err(|e| Error::Checkpoint(e.to_string()))?,
    )?;
    Ok(())
}

fn parse_manifest(text: &str, bin_len_f64: usize) -> Result<BTreeMap<String, (usize, usize)>> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Checkpoint(format!("bad manifest line '{line}'")));
        }
        let offset: usize = parts[1]
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad manifest offset in '{line}'")))?;
        let len: usize = parts[2]
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad manifest length in '{line}'")))?;
        if offset + len > bin_len_f64 {
            return Err(Error::Checkpoint(format!(
                "manifest entry '{}' exceeds params.bin ({} > {bin_len_f64})",
                parts[0],
                offset + len
            )));
        }
        if map.insert(parts[0].to_string(), (offset, len)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate manifest entry '{}'", parts[0])));
        }
    }
    Ok(map)
}

/// Load and fully validate a checkpoint.
pub fn load_checkpoint(dir: &Path) -> Result<RunState> {
    let read = |name: &str| -> Result<String> {
        fs::read_to_string(dir.join(name))
            .map_err(|e| Error::Checkpoint(format!("missing {name}: {e}")))
    };
    let doc: StateDoc = toml::from_str(&read("state.toml")?)
        .map_err(|e| Error::Checkpoint(format!("state.toml: {e}")))?;
    if doc.version != STATE_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} does not match {}",
            doc.version, STATE_VERSION
        )));
    }
    let recomputed = format!("{:016x}", doc.config.content_hash());
    if recomputed != doc.config_hash {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }

    let bin = fs::read(dir.join("params.bin"))
        .map_err(|e| Error::Checkpoint(format!("missing params.bin: {e}")))?;
    if bin.len() % 8 != 0 {
        return Err(Error::Checkpoint("params.bin length not a multiple of 8".into()));
    }
    let floats: Vec<f64> = bin
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let manifest = parse_manifest(&read("params.manifest.txt")?, floats.len())?;
    let slice_of = |id: &str| -> Result<Vec<f64>> {
        let (off, len) = manifest
            .get(id)
            .ok_or_else(|| Error::Checkpoint(format!("manifest lacks unit '{id}'")))?;
        Ok(floats[*off..*off + *len].to_vec())
    };

    // genotypes
    let mut genotypes: BTreeMap<CellId, CellGenotype> = BTreeMap::new();
    let gdir = dir.join("genotypes");
    if gdir.is_dir() {
        for entry in fs::read_dir(&gdir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().to_string();
            if let Some(id) = name.strip_prefix("cell-").and_then(|s| s.strip_suffix(".txt")) {
                let id: CellId = id
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad genotype filename {name}")))?;
                let g = CellGenotype::from_text(&fs::read_to_string(entry.path())?)
                    .map_err(|e| Error::Checkpoint(format!("genotype {name}: {e}")))?;
                genotypes.insert(id, g);
            }
        }
    }
    let ledger = ledger_from_text(&read("ledger.txt")?, &genotypes)?;

    let topo = doc.config.topology();
    let mut cell_params = BTreeMap::new();
    for cell in ledger.cells.values() {
        let width = topo.width_of(topo.family_of_layer(cell.layer));
        let expect = CellLayout::new(&cell.genotype, width).len;
        let buf = slice_of(&format!("cell-{}", cell.id))?;
        if buf.len() != expect {
            return Err(Error::Checkpoint(format!(
                "cell {} has {} parameters, expected {expect}",
                cell.id,
                buf.len()
            )));
        }
        cell_params.insert(cell.id, buf);
    }
    let adapter_len = AdapterLayout::new(&topo).len;
    let mut adapters = BTreeMap::new();
    for id in manifest.keys() {
        if let Some(task) = id.strip_prefix("adapter-") {
            let task: usize = task
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad adapter id '{id}'")))?;
            let buf = slice_of(id)?;
            if buf.len() != adapter_len {
                return Err(Error::Checkpoint(format!(
                    "adapter {task} has {} parameters, expected {adapter_len}",
                    buf.len()
                )));
            }
            adapters.insert(task, buf);
        }
    }

    let mut router = RouterBank::new(doc.router_lambda);
    for t in 1..=doc.router_tasks {
        let buf = slice_of(&format!("router-ae-{t}"))?;
        if buf.len() != AE_LEN {
            return Err(Error::Checkpoint(format!("router autoencoder {t} has a bad length")));
        }
        router.autoencoders.push(Autoencoder { weights: buf });
    }

    let errors = ErrorMatrix::from_csv(&read("errors.csv")?)
        .map_err(|e| Error::Checkpoint(format!("errors.csv: {e}")))?;
    let mut pred_hashes = Vec::new();
    for row in &doc.pred_hashes {
        let mut out = Vec::new();
        for h in row {
            out.push(
                u64::from_str_radix(h, 16)
                    .map_err(|_| Error::Checkpoint(format!("bad prediction hash '{h}'")))?,
            );
        }
        pred_hashes.push(out);
    }
    if errors.tasks_done() != pred_hashes.len() {
        return Err(Error::Checkpoint("error matrix and prediction hashes disagree".into()));
    }

    let scratch = match doc.scratch {
        None => None,
        Some(s) => Some(TaskScratch {
            feature_genotype: CellGenotype::from_text(&s.feature_genotype)
                .map_err(|e| Error::Checkpoint(format!("scratch feature genotype: {e}")))?,
            matching_genotype: CellGenotype::from_text(&s.matching_genotype)
                .map_err(|e| Error::Checkpoint(format!("scratch matching genotype: {e}")))?,
            new_cells: s.new_cells,
            path: s.path,
        }),
    };

    let mut search_traces = Vec::new();
    let mut growth_traces = Vec::new();
    let tdir = dir.join("traces");
    for t in 1.. {
        let p = tdir.join(format!("search-task{t}.jsonl"));
        if !p.exists() {
            break;
        }
        search_traces.push(fs::read_to_string(p)?);
    }
    for t in 2.. {
        let p = tdir.join(format!("growth-task{t}.jsonl"));
        if !p.exists() {
            break;
        }
        growth_traces.push(fs::read_to_string(p)?);
    }

    Ok(RunState {
        version: doc.version,
        seed: doc.seed,
        ledger,
        cell_params,
        adapters,
        router,
        errors,
        pred_hashes,
        cursor: doc.cursor,
        scratch,
        search_traces,
        growth_traces,
        wall_clock_s: doc.wall_clock_s,
        kept_predictions: None,
        config: doc.config,
    })
}
