//! Command runners: each reads its inputs, writes artifacts into an output
//! directory and returns the manifest it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Model;
use crate::csvio::{fmt_f64, Table};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{
    factors_checkpoint, factors_from_checkpoint, lora_checkpoint, lora_from_checkpoint, Checkpoint, DType,
};
use crate::harness::config::{ProbeInstance, RunConfig};
use crate::harness::manifest::Manifest;
use crate::harness::pipeline::{self, MetricRow, PreliminaryRow};
use crate::linalg::alloc_stats;
use crate::lora::{LoraInit, SigmaMode, TaylorReport};
use crate::stats::{ema, mean, spearman, std_err};
use crate::subspace::{project_energies, select, surrogate_basis, SurrogateBasis};

/// Smoothing factor of the EMA columns in the preliminary tables.
pub const EMA_FACTOR: f64 = 0.3;

pub const MODEL_FILE: &str = "model.filt";

pub fn factors_file(layer: usize) -> String {
    format!("factors_layer{layer}.filt")
}

pub fn init_file(layer: usize) -> String {
    format!("init_layer{layer}.filt")
}

pub fn energies_file(layer: usize) -> String {
    format!("energies_layer{layer}.csv")
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

struct Outputs<'a> {
    dir: &'a Path,
    manifest: Manifest,
}

impl<'a> Outputs<'a> {
    fn new(dir: &'a Path, command: &str, cfg: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Outputs { dir, manifest: Manifest::new(command, cfg) })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.artifact_paths.push(name.to_string());
        self.dir.join(name)
    }

    fn table(&mut self, name: &str, t: &Table) -> Result<()> {
        let p = self.path(name);
        t.write(&p)
    }

    fn checkpoint(&mut self, name: &str, ck: &Checkpoint) -> Result<()> {
        let p = self.path(name);
        ck.write(&p)
    }

    fn time(&mut self, phase: &str, start: Instant) {
        self.manifest.phase_timings_ms.insert(phase.to_string(), ms_since(start));
    }

    fn finish(self, command: &str) -> Result<Manifest> {
        self.manifest.write(&self.dir.join(format!("manifest_{command}.json")))?;
        Ok(self.manifest)
    }
}

pub fn model_checkpoint(model: &Model) -> Checkpoint {
    let mut ck = Checkpoint::new();
    for (k, layer) in model.layers().enumerate() {
        ck.insert_matrix(&format!("layer{k}.weight"), &layer.weight, DType::F64);
    }
    ck
}

/// Rebuilds the configured architecture with weights from a checkpoint.
pub fn model_from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::mlp(&cfg.model.dims, cfg.model.activation, cfg.model.loss, &mut rng)?;
    model.set_tapped(&cfg.tapped_layers())?;
    for k in 0..model.layer_count() {
        let w = ck.matrix(&format!("layer{k}.weight"))?;
        model.set_weight(k, w)?;
    }
    Ok(model)
}

fn load_model(cfg: &RunConfig, dir: &Path) -> Result<Model> {
    model_from_checkpoint(cfg, &Checkpoint::read(&dir.join(MODEL_FILE))?)
}

/// Statistics pass: base model, minibatches, accumulated and finalized
/// factors per tapped layer.
pub fn cmd_stats(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let mut o = Outputs::new(out, "stats", cfg)?;
    let t = Instant::now();
    let model = pipeline::base_model(cfg)?;
    let task = pipeline::task(cfg)?;
    o.time("model", t);
    let t = Instant::now();
    let batches = pipeline::stats_batches(cfg, &task.train)?;
    let factors = pipeline::collect_factors(&model, &batches, pipeline::tap_normalization(cfg))?;
    o.time("stats", t);
    o.checkpoint(MODEL_FILE, &model_checkpoint(&model))?;
    for f in &factors {
        o.checkpoint(&factors_file(f.layer_id), &factors_checkpoint(f)?)?;
    }
    o.manifest.counts.insert("minibatches".into(), batches.len() as u64);
    o.manifest.counts.insert("columns".into(), factors.first().map_or(0, |f| f.columns_seen()) as u64);
    o.finish("stats")
}

fn energy_table(spectrum: &crate::subspace::EnergySpectrum, selected: &[usize]) -> Table {
    let mut t = spectrum.to_table();
    t.header.push("selected".into());
    for (j, row) in t.rows.iter_mut().enumerate() {
        row.push(selected.contains(&j).to_string());
    }
    t
}

/// Initialization from the factors and model written by [`cmd_stats`].
pub fn cmd_init(cfg: &RunConfig, stats_dir: &Path, out: &Path) -> Result<Manifest> {
    let model = load_model(cfg, stats_dir)?;
    let mut o = Outputs::new(out, "init", cfg)?;
    let t = Instant::now();
    let mut inits = Vec::new();
    for id in cfg.tapped_layers() {
        let stored = factors_from_checkpoint(&Checkpoint::read(&stats_dir.join(factors_file(id)))?)?;
        let w0 = model.weight(id)?;
        if stored.s_x.rows() != w0.cols() || stored.s_y.rows() != w0.rows() {
            return Err(Error::shape(
                "cmd_init",
                format!("layer {id}: factors {}/{} vs weight {:?}", stored.s_x.rows(), stored.s_y.rows(), w0.shape()),
            ));
        }
        inits.push(pipeline::init_layer(w0, &stored.s_x, &stored.s_y, id, &cfg.init, &cfg.strategy())?);
    }
    o.time("init", t);
    o.checkpoint(MODEL_FILE, &model_checkpoint(&model))?;
    for (init, spectrum) in &inits {
        o.checkpoint(&init_file(init.layer_id), &lora_checkpoint(init))?;
        o.table(&energies_file(init.layer_id), &energy_table(spectrum, &init.indices))?;
    }
    o.finish("init")
}

pub fn metrics_table(rows: &[MetricRow]) -> Table {
    let mut t = Table::new(["step", "train_loss", "eval_loss", "eval_accuracy"]);
    for r in rows {
        t.push(vec![r.step.to_string(), fmt_f64(r.train_loss), fmt_f64(r.eval_loss), fmt_f64(r.eval_accuracy)]);
    }
    t
}

fn load_inits(cfg: &RunConfig, dir: &Path) -> Result<Vec<LoraInit>> {
    cfg.tapped_layers()
        .into_iter()
        .map(|id| lora_from_checkpoint(&Checkpoint::read(&dir.join(init_file(id)))?))
        .collect()
}

/// Adapter training from the checkpoints written by [`cmd_init`]. A
/// divergent run still writes its manifest, with status `diverged`.
pub fn cmd_train(cfg: &RunConfig, init_dir: &Path, out: &Path) -> Result<Manifest> {
    let model = load_model(cfg, init_dir)?;
    let inits = load_inits(cfg, init_dir)?;
    let task = pipeline::task(cfg)?;
    let mut o = Outputs::new(out, "train", cfg)?;
    let t = Instant::now();
    match pipeline::train(&model, inits, &task, &cfg.train) {
        Ok(rows) => {
            o.time("train", t);
            o.table("metrics.csv", &metrics_table(&rows))?;
            o.finish("train")
        }
        Err(e @ Error::Diverged { .. }) => {
            o.time("train", t);
            o.manifest.status = Some(e.to_string());
            o.finish("train")?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

pub fn cmd_probe(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let mut o = Outputs::new(out, "probe", cfg)?;
    let t = Instant::now();
    let (indices, report) = match cfg.probe.instance {
        ProbeInstance::Mlp => {
            let model = pipeline::base_model(cfg)?;
            let task = pipeline::task(cfg)?;
            pipeline::probe(cfg, &model, &task)?
        }
        ProbeInstance::Quadratic => {
            let (indices, rows) = pipeline::probe_quadratic(cfg)?;
            (indices, TaylorReport::from_rows(rows))
        }
    };
    o.time("probe", t);
    let mut table = Table::new([
        "direction",
        "candidate_index",
        "gamma",
        "probe_curvature",
        "half_factored_energy",
        "half_exact_energy",
        "relative_error_factored",
    ]);
    for r in &report.rows {
        let rel = (r.curvature - r.half_factored_energy).abs() / r.half_factored_energy.abs().max(1e-300);
        table.push(vec![
            r.direction.to_string(),
            indices[r.direction].to_string(),
            fmt_f64(r.gamma),
            fmt_f64(r.curvature),
            fmt_f64(r.half_factored_energy),
            r.half_exact_energy.map_or("nan".into(), fmt_f64),
            fmt_f64(rel),
        ]);
    }
    o.table("probe.csv", &table)?;
    let mut summary = Table::new(["comparison", "spearman"]);
    summary.push(vec!["curvature_vs_factored".into(), fmt_f64(report.spearman_factored)]);
    summary.push(vec!["curvature_vs_exact".into(), report.spearman_exact.map_or("nan".into(), fmt_f64)]);
    o.table("probe_summary.csv", &summary)?;
    o.finish("probe")
}

/// Preliminary rows ordered by `key`, with EMA columns computed per sigma mode.
pub fn preliminary_table(rows: &[PreliminaryRow], by_energy: bool) -> Table {
    let ema_loss = format!("ema{EMA_FACTOR}_final_eval_loss");
    let ema_train = format!("ema{EMA_FACTOR}_final_train_loss");
    let ema_acc = format!("ema{EMA_FACTOR}_final_eval_accuracy");
    let mut t = Table::new([
        "sigma_mode",
        "group",
        "singular_index",
        "group_energy",
        "final_train_loss",
        "final_eval_loss",
        "final_eval_accuracy",
        ema_train.as_str(),
        ema_loss.as_str(),
        ema_acc.as_str(),
    ]);
    for mode in [SigmaMode::Min, SigmaMode::Max] {
        let mut sel: Vec<&PreliminaryRow> = rows.iter().filter(|r| r.sigma_mode == mode).collect();
        if by_energy {
            sel.sort_by(|a, b| a.group_energy.total_cmp(&b.group_energy).then(a.group.cmp(&b.group)));
        } else {
            sel.sort_by_key(|r| r.singular_index);
        }
        let smooth = |f: fn(&PreliminaryRow) -> f64| ema(&sel.iter().map(|r| f(r)).collect::<Vec<_>>(), EMA_FACTOR);
        let et = smooth(|r| r.final_train_loss);
        let el = smooth(|r| r.final_eval_loss);
        let ea = smooth(|r| r.final_eval_accuracy);
        for (k, r) in sel.iter().enumerate() {
            t.push(vec![
                mode.name().into(),
                r.group.to_string(),
                r.singular_index.to_string(),
                fmt_f64(r.group_energy),
                fmt_f64(r.final_train_loss),
                fmt_f64(r.final_eval_loss),
                fmt_f64(r.final_eval_accuracy),
                fmt_f64(et[k]),
                fmt_f64(el[k]),
                fmt_f64(ea[k]),
            ]);
        }
    }
    t
}

/// Spearman correlation between group energy and a final metric.
pub fn preliminary_spearman(rows: &[PreliminaryRow], mode: SigmaMode, metric: fn(&PreliminaryRow) -> f64) -> f64 {
    let sel: Vec<&PreliminaryRow> = rows.iter().filter(|r| r.sigma_mode == mode).collect();
    let e: Vec<f64> = sel.iter().map(|r| r.group_energy).collect();
    let m: Vec<f64> = sel.iter().map(|r| metric(r)).collect();
    spearman(&e, &m)
}

fn sign(x: f64) -> &'static str {
    if x > 0.0 {
        "+"
    } else if x < 0.0 {
        "-"
    } else if x == 0.0 {
        "0"
    } else {
        "nan"
    }
}

pub fn cmd_preliminary(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let model = pipeline::base_model(cfg)?;
    let task = pipeline::task(cfg)?;
    let mut o = Outputs::new(out, "preliminary", cfg)?;
    let t = Instant::now();
    let rows = pipeline::preliminary(cfg, &model, &task, &[SigmaMode::Min, SigmaMode::Max])?;
    o.time("preliminary", t);
    o.table("preliminary_by_sigma.csv", &preliminary_table(&rows, false))?;
    o.table("preliminary_by_energy.csv", &preliminary_table(&rows, true))?;
    let mut summary = Table::new(["sigma_mode", "metric", "spearman_with_group_energy", "sign"]);
    for mode in [SigmaMode::Min, SigmaMode::Max] {
        let metrics: [(&str, fn(&PreliminaryRow) -> f64); 3] = [
            ("final_train_loss", |r| r.final_train_loss),
            ("final_eval_loss", |r| r.final_eval_loss),
            ("final_eval_accuracy", |r| r.final_eval_accuracy),
        ];
        for (name, f) in metrics {
            let rho = preliminary_spearman(&rows, mode, f);
            summary.push(vec![mode.name().into(), name.into(), fmt_f64(rho), sign(rho).into()]);
        }
    }
    o.table("preliminary_summary.csv", &summary)?;
    o.finish("preliminary")
}

pub fn ablation_table(rows: &[pipeline::AblationRow]) -> Table {
    let mut t = Table::new(["seed", "variant", "final_train_loss", "final_eval_loss", "final_eval_accuracy"]);
    for r in rows {
        t.push(vec![
            r.seed.to_string(),
            r.variant.clone(),
            fmt_f64(r.final_train_loss),
            fmt_f64(r.final_eval_loss),
            fmt_f64(r.final_eval_accuracy),
        ]);
    }
    t
}

/// Per-variant mean and standard error of a metric, in first-seen order.
pub fn variant_stats(rows: &[pipeline::AblationRow], metric: fn(&pipeline::AblationRow) -> f64) -> Vec<(String, f64, f64)> {
    let mut order: Vec<String> = Vec::new();
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows {
        if !values.contains_key(&r.variant) {
            order.push(r.variant.clone());
        }
        values.entry(r.variant.clone()).or_default().push(metric(r));
    }
    order
        .into_iter()
        .map(|v| {
            let xs = &values[&v];
            (v, mean(xs), std_err(xs))
        })
        .collect()
}

/// Paired differences `a − b` of a metric across seeds.
pub fn paired_differences(rows: &[pipeline::AblationRow], a: &str, b: &str, metric: fn(&pipeline::AblationRow) -> f64) -> Vec<f64> {
    let pick = |name: &str| -> BTreeMap<u64, f64> {
        rows.iter().filter(|r| r.variant == name).map(|r| (r.seed, metric(r))).collect()
    };
    let (xa, xb) = (pick(a), pick(b));
    xa.iter().filter_map(|(s, va)| xb.get(s).map(|vb| va - vb)).collect()
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let mut o = Outputs::new(out, "ablate", cfg)?;
    let t = Instant::now();
    let rows = pipeline::ablate(cfg)?;
    o.time("ablate", t);
    o.table("ablation.csv", &ablation_table(&rows))?;
    let mut summary = Table::new([
        "variant",
        "seeds",
        "mean_eval_loss",
        "stderr_eval_loss",
        "ci95_low",
        "ci95_high",
        "mean_train_loss",
        "mean_eval_accuracy",
    ]);
    let loss = variant_stats(&rows, |r| r.final_eval_loss);
    let train = variant_stats(&rows, |r| r.final_train_loss);
    let acc = variant_stats(&rows, |r| r.final_eval_accuracy);
    for (k, (name, m, se)) in loss.iter().enumerate() {
        summary.push(vec![
            name.clone(),
            cfg.ablate_seeds.to_string(),
            fmt_f64(*m),
            fmt_f64(*se),
            fmt_f64(m - 1.96 * se),
            fmt_f64(m + 1.96 * se),
            fmt_f64(train[k].1),
            fmt_f64(acc[k].1),
        ]);
    }
    o.table("ablation_summary.csv", &summary)?;
    let mut cmp = Table::new(["comparison", "mean_diff_eval_loss", "stderr_diff", "sign"]);
    for (a, b) in [("M-fisher", "P-fisher"), ("M-fisher", "R-fisher"), ("M-svd_sigma", "P-svd_sigma")] {
        let d = paired_differences(&rows, a, b, |r| r.final_eval_loss);
        let m = mean(&d);
        cmp.push(vec![format!("{a}_minus_{b}"), fmt_f64(m), fmt_f64(std_err(&d)), sign(m).into()]);
    }
    o.table("ablation_compare.csv", &cmp)?;
    o.finish("ablate")
}

/// Task names allowed in overlap tables.
pub fn valid_task_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Selected indices per tapped layer of one init directory, keyed by layer.
pub fn read_selections(dir: &Path) -> Result<BTreeMap<usize, (Vec<usize>, (usize, usize))>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_prefix("init_layer").and_then(|s| s.strip_suffix(".filt")) {
            let Ok(id) = id.parse::<usize>() else { continue };
            let init = lora_from_checkpoint(&Checkpoint::read(&dir.join(&name))?)?;
            out.insert(id, (init.indices, init.w_res.shape()));
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!("no init checkpoints in {}", dir.display())));
    }
    Ok(out)
}

fn model_keys(m: &Manifest) -> BTreeMap<String, String> {
    m.config_echo
        .iter()
        .filter(|(k, _)| k.starts_with("model.") || k.as_str() == "init.rank")
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

pub fn overlap_table(names: &[String], values: &crate::linalg::Matrix) -> Table {
    let mut header = vec!["task".to_string()];
    header.extend(names.iter().cloned());
    let mut t = Table::new(header);
    for (i, name) in names.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend((0..names.len()).map(|j| fmt_f64(values[(i, j)])));
        t.push(row);
    }
    t
}

/// Overlap matrix across tasks given as `(name, init_dir)` pairs.
pub fn cmd_overlap(cfg: &RunConfig, tasks: &[(String, PathBuf)], out: &Path) -> Result<Manifest> {
    if tasks.len() < 2 {
        return Err(Error::InvalidArgument("overlap needs at least two tasks".into()));
    }
    let mut selections = Vec::new();
    let mut reference: Option<(BTreeMap<usize, (usize, (usize, usize))>, Option<BTreeMap<String, String>>)> = None;
    for (name, dir) in tasks {
        if !valid_task_name(name) {
            return Err(Error::InvalidArgument(format!("task name {name:?} must match [A-Za-z0-9_-]+")));
        }
        let sel = read_selections(dir)?;
        let shape: BTreeMap<usize, (usize, (usize, usize))> = sel.iter().map(|(k, (i, s))| (*k, (i.len(), *s))).collect();
        let spec = Manifest::read(&dir.join("manifest_init.json")).ok().map(|m| model_keys(&m));
        match &reference {
            None => reference = Some((shape, spec)),
            Some((ref_shape, ref_spec)) => {
                if *ref_shape != shape {
                    return Err(Error::InvalidArgument(format!("task {name}: layers, ranks or shapes differ from the first task")));
                }
                if let (Some(a), Some(b)) = (ref_spec, &spec) {
                    if a != b {
                        return Err(Error::InvalidArgument(format!("task {name}: model spec differs from the first task")));
                    }
                }
            }
        }
        selections.push(sel.into_values().map(|(i, _)| i).collect::<Vec<_>>());
    }
    let mut o = Outputs::new(out, "overlap", cfg)?;
    let t = Instant::now();
    let values = pipeline::overlap_matrix(&selections)?;
    o.time("overlap", t);
    let names: Vec<String> = tasks.iter().map(|(n, _)| n.clone()).collect();
    o.table("overlap.csv", &overlap_table(&names, &values))?;
    o.finish("overlap")
}

/// Wall-clock and peak matrix bytes for each phase of the initialization
/// pipeline, written as `timing.json` in manifest form.
pub fn cmd_timing(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let model = pipeline::base_model(cfg)?;
    let task = pipeline::task(cfg)?;
    let mut o = Outputs::new(out, "timing", cfg)?;
    let mut peaks = BTreeMap::new();
    let mut phase = |o: &mut Outputs, name: &str, t: Instant| {
        o.time(name, t);
        peaks.insert(name.to_string(), alloc_stats::peak_bytes() as u64);
    };

    alloc_stats::reset_peak();
    let t = Instant::now();
    let batches = pipeline::stats_batches(cfg, &task.train)?;
    let stats = pipeline::finalize_all(&pipeline::collect_factors(&model, &batches, pipeline::tap_normalization(cfg))?)?;
    phase(&mut o, "stats", t);

    alloc_stats::reset_peak();
    let t = Instant::now();
    let bases: Vec<SurrogateBasis> =
        stats.iter().map(|(id, _, _)| surrogate_basis(model.weight(*id)?)).collect::<Result<_>>()?;
    phase(&mut o, "basis", t);

    alloc_stats::reset_peak();
    let t = Instant::now();
    let spectra = bases
        .iter()
        .zip(&stats)
        .map(|(b, (_, sx, sy))| project_energies(b, sx, sy))
        .collect::<Result<Vec<_>>>()?;
    phase(&mut o, "energies", t);

    alloc_stats::reset_peak();
    let t = Instant::now();
    let strategy = cfg.strategy();
    let picks = spectra.iter().map(|s| select(s, cfg.init.rank, &strategy)).collect::<Result<Vec<_>>>()?;
    phase(&mut o, "selection", t);

    alloc_stats::reset_peak();
    let t = Instant::now();
    for (((id, _, _), basis), (spectrum, idx)) in stats.iter().zip(&bases).zip(spectra.iter().zip(picks)) {
        let sigma: Vec<f64> = idx.iter().map(|&j| spectrum.energies[j]).collect();
        let (u, v) = crate::subspace::selected_directions(basis, &idx)?;
        let f = crate::lora::build_factors(&u, &v, &sigma, idx, cfg.init.alpha, cfg.init.raw_alpha)?;
        crate::lora::decompose(model.weight(*id)?, f, *id)?;
    }
    phase(&mut o, "factor_build", t);

    o.manifest.peak_matrix_bytes = peaks;
    o.manifest.counts.insert("minibatches".into(), batches.len() as u64);
    o.manifest.artifact_paths.push("timing.json".into());
    let json = o.manifest.to_json()?;
    std::fs::write(out.join("timing.json"), json)?;
    Ok(o.manifest)
}
