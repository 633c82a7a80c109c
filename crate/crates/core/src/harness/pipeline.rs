//! In-memory experiment steps shared by the CLI commands and the test suites.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward, forward, train_step, Batch, Model};
use crate::error::{Error, Result};
use crate::fisher::{
    fisher_energy_exact, fisher_energy_factored, full_fisher, FisherFactors, FullFisher, TapNormalization, FULL_FISHER_LIMIT,
};
use crate::harness::config::{derive_seed, InitMethod, InitSpec, ProbeSource, RunConfig, Trainable, TrainSpec};
use crate::harness::data::{accuracy, blobs, BlobSpec, Dataset, Task};
use crate::linalg::{kron, matmul, matmul_nt, matmul_tn, Matrix};
use crate::lora::{
    build_factors, decompose, plain_lora_init, preliminary_init, sym_perturb_probe, taylor_report, AdaptedModel, Direction,
    LoraInit, ProbeRow, SigmaMode, TaylorReport,
};
use crate::subspace::{
    exact_svd_basis, group_energy, project_energies, select, selected_directions, surrogate_basis, BasisKind,
    DirectionBasis, EnergySpectrum, GroupAggregate, Scaling, SelectionStrategy,
};

/// Training loss above this aborts a run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

pub fn blob_spec(cfg: &RunConfig) -> BlobSpec {
    let d = &cfg.dataset;
    BlobSpec {
        n_features: d.n_features,
        n_classes: d.n_classes,
        n_train: d.n_train,
        n_eval: d.n_eval,
        noise: d.noise,
        separation: d.separation,
    }
}

pub fn task_seed(cfg: &RunConfig) -> u64 {
    cfg.dataset.task_seed.unwrap_or_else(|| derive_seed(cfg.seed, "task"))
}

/// Downstream task of the run.
pub fn task(cfg: &RunConfig) -> Result<Task> {
    blobs(&blob_spec(cfg), task_seed(cfg))
}

/// Seeded MLP, optionally pre-trained on a separate blob task drawn from the
/// run seed. Depends only on the seed and model/pretrain settings, so runs
/// that differ only in `dataset.task_seed` share `W₀`.
pub fn base_model(cfg: &RunConfig) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "model"));
    let mut model = Model::mlp(&cfg.model.dims, cfg.model.activation, cfg.model.loss, &mut rng)?;
    model.set_tapped(&cfg.tapped_layers())?;
    if cfg.pretrain.steps > 0 {
        let pre = blobs(&blob_spec(cfg), derive_seed(cfg.seed, "pretrain"))?;
        let batch = pre.train.to_batch(cfg.model.loss)?;
        let all = vec![true; model.layer_count()];
        for step in 0..cfg.pretrain.steps {
            let (next, loss) = train_step(&model, &batch, &all, cfg.pretrain.lr)?;
            if !(loss <= DIVERGENCE_LIMIT) {
                return Err(Error::Diverged { step, loss });
            }
            model = next;
        }
    }
    Ok(model)
}

/// `minibatch_count` minibatches drawn without replacement from a seeded
/// shuffle of the training split, reshuffling whenever it runs out.
pub fn stats_batches(cfg: &RunConfig, train: &Dataset) -> Result<Vec<Batch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(task_seed(cfg) ^ cfg.seed, "stats"));
    let size = cfg.fisher.minibatch_size.min(train.len());
    let mut order: Vec<usize> = Vec::new();
    let mut pos = 0;
    let mut batches = Vec::with_capacity(cfg.fisher.minibatch_count);
    for _ in 0..cfg.fisher.minibatch_count {
        if pos + size > order.len() {
            order = (0..train.len()).collect();
            order.shuffle(&mut rng);
            pos = 0;
        }
        batches.push(train.subset(&order[pos..pos + size])?.to_batch(cfg.model.loss)?);
        pos += size;
    }
    Ok(batches)
}

pub fn tap_normalization(cfg: &RunConfig) -> TapNormalization {
    if cfg.fisher.alg1_literal {
        TapNormalization::FeatureDim
    } else {
        TapNormalization::Columns
    }
}

/// Runs forward/backward over every batch and accumulates one factor pair
/// per tapped layer, in ascending layer order.
pub fn collect_factors(model: &Model, batches: &[Batch], normalization: TapNormalization) -> Result<Vec<FisherFactors>> {
    let mut factors: Vec<FisherFactors> = model
        .tapped_ids()
        .into_iter()
        .map(|id| {
            let w = model.weight(id)?;
            Ok(FisherFactors::new(id, w.cols(), w.rows()).with_normalization(normalization))
        })
        .collect::<Result<_>>()?;
    for (b, batch) in batches.iter().enumerate() {
        let (loss, cache) = match forward(model, batch) {
            Ok(out) => out,
            Err(Error::NonFinite { .. } | Error::NonFiniteLoss { .. }) => return Err(Error::NonFiniteBatchLoss { batch: b }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteBatchLoss { batch: b });
        }
        for tap in backward(model, &cache)?.taps {
            let slot = factors
                .iter_mut()
                .find(|f| f.layer_id == tap.layer_id)
                .expect("taps come from tapped layers");
            slot.accumulate(&tap)?;
        }
    }
    Ok(factors)
}

/// Finalized `(layer_id, S_X, S_Y)` per tapped layer.
pub fn finalize_all(factors: &[FisherFactors]) -> Result<Vec<(usize, Matrix, Matrix)>> {
    factors
        .iter()
        .map(|f| {
            let (sx, sy) = f.finalize()?;
            Ok((f.layer_id, sx, sy))
        })
        .collect()
}

/// Per-layer selection seed, so random draws differ across layers.
fn layer_strategy(strategy: &SelectionStrategy, layer_id: usize) -> SelectionStrategy {
    SelectionStrategy { rng_seed: derive_seed(strategy.rng_seed, &format!("layer{layer_id}")), ..*strategy }
}

fn finish_init<B: DirectionBasis>(
    w0: &Matrix,
    basis: &B,
    spectrum: &EnergySpectrum,
    indices: Vec<usize>,
    svd_sigma: Option<&[f64]>,
    spec: &InitSpec,
    layer_id: usize,
) -> Result<LoraInit> {
    let mut sigma_sel: Vec<f64> = match svd_sigma {
        Some(s) => indices.iter().map(|&j| s[j]).collect(),
        None => indices.iter().map(|&j| spectrum.energies[j]).collect(),
    };
    if spec.normalize_sigma {
        let top = sigma_sel.iter().copied().fold(0.0, f64::max);
        if top > 0.0 {
            sigma_sel.iter_mut().for_each(|s| *s /= top);
        }
    }
    let (u_sel, v_sel) = selected_directions(basis, &indices)?;
    let factors = build_factors(&u_sel, &v_sel, &sigma_sel, indices, spec.alpha, spec.raw_alpha)?;
    decompose(w0, factors, layer_id)
}

/// Basis, energies, selection, factors and residual for one layer.
pub fn init_layer(
    w0: &Matrix,
    s_x: &Matrix,
    s_y: &Matrix,
    layer_id: usize,
    spec: &InitSpec,
    strategy: &SelectionStrategy,
) -> Result<(LoraInit, EnergySpectrum)> {
    strategy.validate()?;
    let strategy = layer_strategy(strategy, layer_id);
    match (spec.method, strategy.basis) {
        (InitMethod::Plain, _) => {
            let spectrum = project_energies(&surrogate_basis(w0)?, s_x, s_y)?;
            let seed = derive_seed(strategy.rng_seed, "plain");
            Ok((plain_lora_init(w0, layer_id, spec.rank, spec.alpha, spec.raw_alpha, seed)?, spectrum))
        }
        (InitMethod::Fisher, BasisKind::Surrogate) => {
            let basis = surrogate_basis(w0)?;
            let spectrum = project_energies(&basis, s_x, s_y)?;
            let indices = select(&spectrum, spec.rank, &strategy)?;
            Ok((finish_init(w0, &basis, &spectrum, indices, None, spec, layer_id)?, spectrum))
        }
        (InitMethod::Fisher, BasisKind::ExactSvd) => {
            let basis = exact_svd_basis(w0)?;
            let spectrum = project_energies(&basis, s_x, s_y)?;
            let indices = select(&spectrum, spec.rank, &strategy)?;
            let sigma = (strategy.scaling == Scaling::SvdSigma).then_some(basis.sigma.as_slice());
            Ok((finish_init(w0, &basis, &spectrum, indices, sigma, spec, layer_id)?, spectrum))
        }
    }
}

/// Initializes every tapped layer of `model` from its finalized factors.
pub fn init_all(
    model: &Model,
    stats: &[(usize, Matrix, Matrix)],
    spec: &InitSpec,
    strategy: &SelectionStrategy,
) -> Result<Vec<(LoraInit, EnergySpectrum)>> {
    stats
        .iter()
        .map(|(id, sx, sy)| init_layer(model.weight(*id)?, sx, sy, *id, spec, strategy))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

fn evaluate(model: &Model, step: usize, train_loss: f64, eval: &Dataset, eval_batch: &Batch) -> Result<MetricRow> {
    let out = model.predict(&eval.inputs)?;
    Ok(MetricRow {
        step,
        train_loss,
        eval_loss: model.loss(eval_batch)?,
        eval_accuracy: accuracy(&out, &eval.labels)?,
    })
}

/// Full-batch gradient descent. With `Trainable::Adapters` only `A`, `B` of
/// each adapter move; with `Trainable::Full` the merged weights of every
/// layer are trained directly. Rows are logged every `log_every` steps and
/// after the last step.
pub fn train(base: &Model, adapters: Vec<LoraInit>, task: &Task, spec: &TrainSpec) -> Result<Vec<MetricRow>> {
    let loss_kind = base.loss_kind();
    let train_batch = task.train.to_batch(loss_kind)?;
    let eval_batch = task.eval.to_batch(loss_kind)?;
    let check = |step: usize, loss: f64| -> Result<()> {
        if loss <= DIVERGENCE_LIMIT {
            Ok(())
        } else {
            Err(Error::Diverged { step, loss })
        }
    };
    let mut rows = Vec::new();
    match spec.trainable {
        Trainable::Adapters => {
            let mut am = AdaptedModel::new(base.clone(), adapters)?;
            for step in 0..spec.steps {
                if step % spec.log_every == 0 {
                    let eff = am.effective_model()?;
                    let loss = eff.loss(&train_batch)?;
                    check(step, loss)?;
                    rows.push(evaluate(&eff, step, loss, &task.eval, &eval_batch)?);
                }
                let loss = am.train_step(&train_batch, spec.lr)?;
                check(step, loss)?;
            }
            let eff = am.effective_model()?;
            let loss = eff.loss(&train_batch)?;
            check(spec.steps, loss)?;
            rows.push(evaluate(&eff, spec.steps, loss, &task.eval, &eval_batch)?);
        }
        Trainable::Full => {
            let mut model = AdaptedModel::new(base.clone(), adapters)?.effective_model()?;
            let all = vec![true; model.layer_count()];
            for step in 0..spec.steps {
                let (next, loss) = train_step(&model, &train_batch, &all, spec.lr)?;
                check(step, loss)?;
                if step % spec.log_every == 0 {
                    rows.push(evaluate(&model, step, loss, &task.eval, &eval_batch)?);
                }
                model = next;
            }
            let loss = model.loss(&train_batch)?;
            check(spec.steps, loss)?;
            rows.push(evaluate(&model, spec.steps, loss, &task.eval, &eval_batch)?);
        }
    }
    Ok(rows)
}

/// Probe directions for one layer plus the report over the training split.
pub fn probe(cfg: &RunConfig, model: &Model, task: &Task) -> Result<(Vec<usize>, TaylorReport)> {
    let layer = cfg.probe.layer;
    if !model.layer(layer)?.tapped {
        return Err(Error::InvalidArgument(format!("probe.layer {layer} is not tapped")));
    }
    let batches = stats_batches(cfg, &task.train)?;
    let factors = collect_factors(model, &batches, tap_normalization(cfg))?;
    let f = factors.iter().find(|f| f.layer_id == layer).expect("tapped layer has factors");
    let (s_x, s_y) = f.finalize()?;
    let w0 = model.weight(layer)?;
    let full = if w0.rows() * w0.cols() <= FULL_FISHER_LIMIT {
        let mut taps = Vec::new();
        for batch in &batches {
            let (_, cache) = forward(model, batch)?;
            taps.extend(backward(model, &cache)?.taps.into_iter().filter(|t| t.layer_id == layer));
        }
        Some(full_fisher(&taps)?)
    } else {
        None
    };
    let basis = surrogate_basis(w0)?;
    let spectrum = project_energies(&basis, &s_x, &s_y)?;
    let indices: Vec<usize> = match cfg.probe.source {
        ProbeSource::Candidates => spectrum.live_indices().into_iter().take(cfg.probe.max_directions).collect(),
        ProbeSource::Selected => select(&spectrum, cfg.init.rank, &layer_strategy(&cfg.strategy(), layer))?,
    };
    let directions = indices
        .iter()
        .map(|&j| Direction::normalized(&basis.u_hat.column(j), &basis.v_hat.column(j)))
        .collect::<Result<Vec<_>>>()?;
    let batch = task.train.to_batch(cfg.model.loss)?;
    let report = taylor_report(model, &batch, layer, &directions, &cfg.probe.gammas, &s_x, &s_y, full.as_ref())?;
    Ok((indices, report))
}

/// Seeded PSD matrix `R Rᵀ/n + 0.1·I`.
pub fn random_psd(n: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let r = Matrix::random_normal(n, n, rng);
    let mut out = matmul_nt(&r, &r)?.scaled(1.0 / n as f64);
    out.axpy(0.1, &Matrix::identity(n))?;
    Ok(out.symmetrized())
}

/// `½·vec(D)ᵀ (S_X ⊗ S_Y) vec(D)` with `D = W − W*`, evaluated as
/// `½·tr(Dᵀ S_Y D S_X)`.
pub fn quadratic_loss(w: &Matrix, w_star: &Matrix, s_x: &Matrix, s_y: &Matrix) -> Result<f64> {
    let d = w.sub(w_star)?;
    let left = matmul_tn(&d, &matmul(s_y, &d)?)?;
    let prod = matmul(&left, s_x)?;
    Ok(0.5 * prod.trace())
}

/// Probe report on a seeded quadratic layer shaped like `probe.layer`, where
/// the Hessian is exactly `S_X ⊗ S_Y`, so curvature equals half the factored
/// energy up to rounding.
pub fn probe_quadratic(cfg: &RunConfig) -> Result<(Vec<usize>, Vec<ProbeRow>)> {
    let (n, m) = (cfg.model.dims[cfg.probe.layer], cfg.model.dims[cfg.probe.layer + 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "quadratic"));
    let s_x = random_psd(n, &mut rng)?;
    let s_y = random_psd(m, &mut rng)?;
    let w_star = Matrix::random_normal(m, n, &mut rng);
    let w0 = Matrix::random_normal(m, n, &mut rng);
    let full = if m * n <= FULL_FISHER_LIMIT {
        Some(FullFisher { layer_id: cfg.probe.layer, s_w: kron(&s_x, &s_y)?, sample_count: 0, m, n })
    } else {
        None
    };
    let basis = surrogate_basis(&w0)?;
    let spectrum = project_energies(&basis, &s_x, &s_y)?;
    let indices: Vec<usize> = match cfg.probe.source {
        ProbeSource::Candidates => spectrum.live_indices().into_iter().take(cfg.probe.max_directions).collect(),
        ProbeSource::Selected => select(&spectrum, cfg.init.rank, &layer_strategy(&cfg.strategy(), cfg.probe.layer))?,
    };
    let loss = |w: &Matrix| quadratic_loss(w, &w_star, &s_x, &s_y);
    let mut rows = Vec::new();
    for (d, &j) in indices.iter().enumerate() {
        let z = Direction::normalized(&basis.u_hat.column(j), &basis.v_hat.column(j))?;
        let ef = fisher_energy_factored(&s_x, &s_y, &z.u, &z.v)?;
        let ee = full.as_ref().map(|f| fisher_energy_exact(f, &z.u, &z.v)).transpose()?;
        for &gamma in &cfg.probe.gammas {
            rows.push(ProbeRow {
                direction: d,
                gamma,
                curvature: sym_perturb_probe(loss, &w0, &z, gamma)? / (gamma * gamma),
                half_factored_energy: 0.5 * ef,
                half_exact_energy: ee.map(|e| 0.5 * e),
            });
        }
    }
    Ok((indices, rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreliminaryRow {
    pub group: usize,
    pub sigma_mode: SigmaMode,
    /// First singular index of the group.
    pub singular_index: usize,
    pub group_energy: f64,
    pub final_train_loss: f64,
    pub final_eval_loss: f64,
    pub final_eval_accuracy: f64,
}

/// Trains one adapter per direction group and sigma mode on
/// `preliminary.layer`, with every other layer frozen.
pub fn preliminary(cfg: &RunConfig, model: &Model, task: &Task, modes: &[SigmaMode]) -> Result<Vec<PreliminaryRow>> {
    let layer = cfg.preliminary.layer;
    if !model.layer(layer)?.tapped {
        return Err(Error::InvalidArgument(format!("preliminary.layer {layer} is not tapped")));
    }
    let groups = cfg.preliminary.groups;
    let w0 = model.weight(layer)?.clone();
    let h = w0.rows().min(w0.cols());
    if groups * cfg.init.rank > h {
        return Err(Error::InvalidArgument(format!(
            "{groups} groups of rank {} need {} directions but layer {layer} has {h}; at most {} groups fit",
            cfg.init.rank,
            groups * cfg.init.rank,
            h / cfg.init.rank
        )));
    }
    let batches = stats_batches(cfg, &task.train)?;
    let factors = collect_factors(model, &batches, tap_normalization(cfg))?;
    let f = factors.iter().find(|f| f.layer_id == layer).expect("tapped layer has factors");
    let (s_x, s_y) = f.finalize()?;
    let basis = exact_svd_basis(&w0)?;
    let spectrum = project_energies(&basis, &s_x, &s_y)?;
    let jobs: Vec<(usize, SigmaMode)> = (0..groups).flat_map(|g| modes.iter().map(move |&m| (g, m))).collect();
    let run = |&(group, mode): &(usize, SigmaMode)| -> Result<PreliminaryRow> {
        let init = preliminary_init(&w0, &basis, group, groups, cfg.init.rank, mode, cfg.init.alpha, cfg.init.raw_alpha, layer)?;
        let energy = group_energy(&spectrum, &init.indices, GroupAggregate::Sum)?;
        let singular_index = init.indices[0];
        let rows = train(model, vec![init], task, &cfg.train)?;
        let last = rows.last().expect("train logs the final step");
        Ok(PreliminaryRow {
            group,
            sigma_mode: mode,
            singular_index,
            group_energy: energy,
            final_train_loss: last.train_loss,
            final_eval_loss: last.eval_loss,
            final_eval_accuracy: last.eval_accuracy,
        })
    };
    parallel_map(&jobs, run)
}

/// The six ablation cells in output order.
pub fn ablation_cells() -> Vec<SelectionStrategy> {
    use crate::subspace::Criterion::*;
    let mut out = Vec::new();
    for scaling in [Scaling::Fisher, Scaling::SvdSigma] {
        for criterion in [MaxEnergy, Random, MinEnergy] {
            let basis = match scaling {
                Scaling::Fisher => BasisKind::Surrogate,
                Scaling::SvdSigma => BasisKind::ExactSvd,
            };
            out.push(SelectionStrategy { criterion, scaling, basis, rng_seed: 0 });
        }
    }
    out
}

pub fn variant_name(s: &SelectionStrategy) -> String {
    format!("{}-{}", s.criterion.tag(), s.scaling.name())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub variant: String,
    pub final_train_loss: f64,
    pub final_eval_loss: f64,
    pub final_eval_accuracy: f64,
}

/// One seed of the ablation grid: shared model, task and statistics, six
/// initializations, identical training.
pub fn ablate_seed(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let model = base_model(cfg)?;
    let task = task(cfg)?;
    let batches = stats_batches(cfg, &task.train)?;
    let stats = finalize_all(&collect_factors(&model, &batches, tap_normalization(cfg))?)?;
    let select_seed = derive_seed(cfg.seed, "select") ^ cfg.init.rng_seed;
    let spec = InitSpec { method: InitMethod::Fisher, ..cfg.init.clone() };
    ablation_cells()
        .into_iter()
        .map(|cell| {
            let strategy = SelectionStrategy { rng_seed: select_seed, ..cell };
            let inits = init_all(&model, &stats, &spec, &strategy)?.into_iter().map(|(i, _)| i).collect();
            let rows = train(&model, inits, &task, &cfg.train)?;
            let last = rows.last().expect("train logs the final step");
            Ok(AblationRow {
                seed: cfg.seed,
                variant: variant_name(&strategy),
                final_train_loss: last.train_loss,
                final_eval_loss: last.eval_loss,
                final_eval_accuracy: last.eval_accuracy,
            })
        })
        .collect()
}

/// Runs `cfg.ablate_seeds` seeds starting at `cfg.seed`, in parallel, and
/// returns rows in seed order.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let seeds: Vec<u64> = (0..cfg.ablate_seeds as u64).map(|s| cfg.seed.wrapping_add(s)).collect();
    let per_seed = parallel_map(&seeds, |&seed| ablate_seed(&RunConfig { seed, ..cfg.clone() }))?;
    Ok(per_seed.into_iter().flatten().collect())
}

/// Maps `f` over `items` on scoped threads and returns results in input
/// order. The first error in input order wins.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len()).max(1);
    let slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let done = std::sync::Mutex::new(slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                done.lock().expect("worker panicked")[i] = Some(out);
            });
        }
    });
    let slots = done.into_inner().expect("worker panicked");
    slots.into_iter().map(|s| s.expect("every item ran")).collect()
}

/// `100·|I₁ ∩ I₂|/r` averaged over layers.
pub fn overlap_percent(a: &[Vec<usize>], b: &[Vec<usize>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidArgument(format!("selections cover {} vs {} layers", a.len(), b.len())));
    }
    let mut total = 0.0;
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::InvalidArgument(format!("layer {k}: rank {} vs {}", x.len(), y.len())));
        }
        let common = x.iter().filter(|i| y.contains(i)).count();
        total += 100.0 * common as f64 / x.len() as f64;
    }
    Ok(total / a.len() as f64)
}

/// Pairwise overlap percentages; `selections[t][k]` is task `t`'s index set
/// on layer `k`.
pub fn overlap_matrix(selections: &[Vec<Vec<usize>>]) -> Result<Matrix> {
    let t = selections.len();
    if t == 0 {
        return Err(Error::InvalidArgument("no tasks".into()));
    }
    let mut out = Matrix::zeros(t, t);
    for i in 0..t {
        for j in i..t {
            let v = overlap_percent(&selections[i], &selections[j])?;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}
