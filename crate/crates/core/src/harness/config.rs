//! Run configuration: flat `key = value` text with dotted section prefixes.
//!
//! ```text
//! # comment
//! seed = 7
//! model.dims = 8,32,4
//! init.rank = 4
//! ```
//!
//! Unknown keys and repeated keys are errors. Every key has a default, so an
//! empty file is a valid config.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::autodiff::{Activation, LossKind};
use crate::error::{Error, Result};
use crate::subspace::{BasisKind, Criterion, Scaling, SelectionStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMethod {
    Fisher,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Adapters,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeSource {
    /// Every live candidate of the surrogate basis, up to `max_directions`.
    Candidates,
    /// The `r` directions chosen by the configured strategy.
    Selected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeInstance {
    /// The configured MLP on the task's training split.
    Mlp,
    /// A single seeded quadratic layer whose Hessian is exactly `S_X ⊗ S_Y`.
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SortMetric {
    EvalLoss,
    TrainLoss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
    /// `None` taps every linear layer.
    pub tapped: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_features: usize,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub noise: f64,
    pub separation: f64,
    /// Seed for the downstream task; derived from the run seed when absent.
    pub task_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSpec {
    pub steps: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherSpec {
    pub minibatch_count: usize,
    pub minibatch_size: usize,
    /// Divide by feature dimension instead of tap columns.
    pub alg1_literal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitSpec {
    pub method: InitMethod,
    pub rank: usize,
    pub alpha: f64,
    pub criterion: Criterion,
    pub scaling: Scaling,
    pub basis: BasisKind,
    pub rng_seed: u64,
    /// Divide the selected scaling values by their maximum.
    pub normalize_sigma: bool,
    pub raw_alpha: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub steps: usize,
    pub lr: f64,
    pub trainable: Trainable,
    pub log_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSpec {
    pub instance: ProbeInstance,
    pub layer: usize,
    pub gammas: Vec<f64>,
    pub source: ProbeSource,
    pub max_directions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreliminarySpec {
    pub groups: usize,
    pub layer: usize,
    pub sort: SortMetric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub pretrain: PretrainSpec,
    pub fisher: FisherSpec,
    pub init: InitSpec,
    pub train: TrainSpec,
    pub probe: ProbeSpec,
    pub preliminary: PreliminarySpec,
    pub ablate_seeds: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelSpec {
                dims: vec![8, 32, 4],
                activation: Activation::Tanh,
                loss: LossKind::SoftmaxCrossEntropy,
                tapped: None,
            },
            dataset: DatasetSpec {
                n_features: 8,
                n_classes: 4,
                n_train: 256,
                n_eval: 256,
                noise: 1.0,
                separation: 1.5,
                task_seed: None,
            },
            pretrain: PretrainSpec { steps: 0, lr: 0.1 },
            fisher: FisherSpec { minibatch_count: 10, minibatch_size: 32, alg1_literal: false },
            init: InitSpec {
                method: InitMethod::Fisher,
                rank: 4,
                alpha: 8.0,
                criterion: Criterion::MinEnergy,
                scaling: Scaling::Fisher,
                basis: BasisKind::Surrogate,
                rng_seed: 0,
                normalize_sigma: false,
                raw_alpha: false,
            },
            train: TrainSpec { steps: 200, lr: 0.1, trainable: Trainable::Adapters, log_every: 10 },
            probe: ProbeSpec {
                instance: ProbeInstance::Mlp,
                layer: 0,
                gammas: vec![1e-1, 1e-2, 1e-3],
                source: ProbeSource::Candidates,
                max_directions: 16,
            },
            preliminary: PreliminarySpec { groups: 8, layer: 0, sort: SortMetric::EvalLoss },
            ablate_seeds: 10,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse::<T>().map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> std::result::Result<Vec<T>, String> {
    value.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {value:?}")),
    }
}

fn parse_enum<T>(key: &str, value: &str, f: impl Fn(&str) -> Option<T>) -> std::result::Result<T, String> {
    f(value).ok_or_else(|| format!("{key}: unknown value {value:?}"))
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value;
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "model.dims" => self.model.dims = parse_list(key, v)?,
            "model.activation" => self.model.activation = parse_enum(key, v, Activation::parse)?,
            "model.loss" => self.model.loss = parse_enum(key, v, LossKind::parse)?,
            "model.tapped" => {
                self.model.tapped = if v == "all" { None } else { Some(parse_list(key, v)?) };
            }
            "dataset.kind" => {
                if v != "blobs" {
                    return Err(format!("{key}: only blobs is supported, got {v:?}"));
                }
            }
            "dataset.n_features" => self.dataset.n_features = parse_num(key, v)?,
            "dataset.n_classes" => self.dataset.n_classes = parse_num(key, v)?,
            "dataset.n_train" => self.dataset.n_train = parse_num(key, v)?,
            "dataset.n_eval" => self.dataset.n_eval = parse_num(key, v)?,
            "dataset.noise" => self.dataset.noise = parse_num(key, v)?,
            "dataset.separation" => self.dataset.separation = parse_num(key, v)?,
            "dataset.task_seed" => {
                self.dataset.task_seed = if v == "auto" { None } else { Some(parse_num(key, v)?) };
            }
            "pretrain.steps" => self.pretrain.steps = parse_num(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse_num(key, v)?,
            "fisher.minibatch_count" => self.fisher.minibatch_count = parse_num(key, v)?,
            "fisher.minibatch_size" => self.fisher.minibatch_size = parse_num(key, v)?,
            "fisher.alg1_literal" => self.fisher.alg1_literal = parse_bool(key, v)?,
            "init.method" => {
                self.init.method = parse_enum(key, v, |s| match s {
                    "fisher" => Some(InitMethod::Fisher),
                    "plain" => Some(InitMethod::Plain),
                    _ => None,
                })?
            }
            "init.rank" => self.init.rank = parse_num(key, v)?,
            "init.alpha" => self.init.alpha = parse_num(key, v)?,
            "init.criterion" => self.init.criterion = parse_enum(key, v, Criterion::parse)?,
            "init.scaling" => self.init.scaling = parse_enum(key, v, Scaling::parse)?,
            "init.basis" => self.init.basis = parse_enum(key, v, BasisKind::parse)?,
            "init.rng_seed" => self.init.rng_seed = parse_num(key, v)?,
            "init.normalize_sigma" => self.init.normalize_sigma = parse_bool(key, v)?,
            "init.raw_alpha" => self.init.raw_alpha = parse_bool(key, v)?,
            "train.steps" => self.train.steps = parse_num(key, v)?,
            "train.lr" => self.train.lr = parse_num(key, v)?,
            "train.trainable" => {
                self.train.trainable = parse_enum(key, v, |s| match s {
                    "adapters" => Some(Trainable::Adapters),
                    "full" => Some(Trainable::Full),
                    _ => None,
                })?
            }
            "train.log_every" => self.train.log_every = parse_num(key, v)?,
            "probe.instance" => {
                self.probe.instance = parse_enum(key, v, |s| match s {
                    "mlp" => Some(ProbeInstance::Mlp),
                    "quadratic" => Some(ProbeInstance::Quadratic),
                    _ => None,
                })?
            }
            "probe.layer" => self.probe.layer = parse_num(key, v)?,
            "probe.gammas" => self.probe.gammas = parse_list(key, v)?,
            "probe.directions" => {
                self.probe.source = parse_enum(key, v, |s| match s {
                    "candidates" => Some(ProbeSource::Candidates),
                    "selected" => Some(ProbeSource::Selected),
                    _ => None,
                })?
            }
            "probe.max_directions" => self.probe.max_directions = parse_num(key, v)?,
            "preliminary.groups" => self.preliminary.groups = parse_num(key, v)?,
            "preliminary.layer" => self.preliminary.layer = parse_num(key, v)?,
            "preliminary.sort" => {
                self.preliminary.sort = parse_enum(key, v, |s| match s {
                    "eval_loss" => Some(SortMetric::EvalLoss),
                    "train_loss" => Some(SortMetric::TrainLoss),
                    _ => None,
                })?
            }
            "ablate.seeds" => self.ablate_seeds = parse_num(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config { line, msg: format!("expected key = value, got {content:?}") })?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(prev) = seen.insert(key.to_string(), line) {
                return Err(Error::Config { line, msg: format!("{key} already set on line {prev}") });
            }
            cfg.set(key, value).map_err(|msg| Error::Config { line, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its current value, in a fixed order. Feeding the
    /// pairs back through [`RunConfig::parse`] reproduces the config.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let name_method = match self.init.method {
            InitMethod::Fisher => "fisher",
            InitMethod::Plain => "plain",
        };
        let name_trainable = match self.train.trainable {
            Trainable::Adapters => "adapters",
            Trainable::Full => "full",
        };
        let name_source = match self.probe.source {
            ProbeSource::Candidates => "candidates",
            ProbeSource::Selected => "selected",
        };
        let name_instance = match self.probe.instance {
            ProbeInstance::Mlp => "mlp",
            ProbeInstance::Quadratic => "quadratic",
        };
        let name_sort = match self.preliminary.sort {
            SortMetric::EvalLoss => "eval_loss",
            SortMetric::TrainLoss => "train_loss",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("model.dims", join(&self.model.dims)),
            ("model.activation", self.model.activation.name().into()),
            ("model.loss", self.model.loss.name().into()),
            ("model.tapped", self.model.tapped.as_ref().map_or("all".into(), |t| join(t))),
            ("dataset.kind", "blobs".into()),
            ("dataset.n_features", self.dataset.n_features.to_string()),
            ("dataset.n_classes", self.dataset.n_classes.to_string()),
            ("dataset.n_train", self.dataset.n_train.to_string()),
            ("dataset.n_eval", self.dataset.n_eval.to_string()),
            ("dataset.noise", self.dataset.noise.to_string()),
            ("dataset.separation", self.dataset.separation.to_string()),
            ("dataset.task_seed", self.dataset.task_seed.map_or("auto".into(), |s| s.to_string())),
            ("pretrain.steps", self.pretrain.steps.to_string()),
            ("pretrain.lr", self.pretrain.lr.to_string()),
            ("fisher.minibatch_count", self.fisher.minibatch_count.to_string()),
            ("fisher.minibatch_size", self.fisher.minibatch_size.to_string()),
            ("fisher.alg1_literal", self.fisher.alg1_literal.to_string()),
            ("init.method", name_method.into()),
            ("init.rank", self.init.rank.to_string()),
            ("init.alpha", self.init.alpha.to_string()),
            ("init.criterion", self.init.criterion.name().into()),
            ("init.scaling", self.init.scaling.name().into()),
            ("init.basis", self.init.basis.name().into()),
            ("init.rng_seed", self.init.rng_seed.to_string()),
            ("init.normalize_sigma", self.init.normalize_sigma.to_string()),
            ("init.raw_alpha", self.init.raw_alpha.to_string()),
            ("train.steps", self.train.steps.to_string()),
            ("train.lr", self.train.lr.to_string()),
            ("train.trainable", name_trainable.into()),
            ("train.log_every", self.train.log_every.to_string()),
            ("probe.instance", name_instance.into()),
            ("probe.layer", self.probe.layer.to_string()),
            ("probe.gammas", join(&self.probe.gammas)),
            ("probe.directions", name_source.into()),
            ("probe.max_directions", self.probe.max_directions.to_string()),
            ("preliminary.groups", self.preliminary.groups.to_string()),
            ("preliminary.layer", self.preliminary.layer.to_string()),
            ("preliminary.sort", name_sort.into()),
            ("ablate.seeds", self.ablate_seeds.to_string()),
            ("output.dir", self.output_dir.display().to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn layer_count(&self) -> usize {
        self.model.dims.len() - 1
    }

    /// Tapped linear-layer ids in ascending order.
    pub fn tapped_layers(&self) -> Vec<usize> {
        match &self.model.tapped {
            None => (0..self.layer_count()).collect(),
            Some(t) => t.clone(),
        }
    }

    pub fn strategy(&self) -> SelectionStrategy {
        SelectionStrategy {
            criterion: self.init.criterion,
            scaling: self.init.scaling,
            basis: self.init.basis,
            rng_seed: self.init.rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config { line: 0, msg });
        let d = &self.model.dims;
        if d.len() < 2 || d.contains(&0) {
            return fail(format!("model.dims must list at least two positive sizes, got {d:?}"));
        }
        if self.dataset.n_features != d[0] {
            return fail(format!("dataset.n_features {} must equal model.dims[0] {}", self.dataset.n_features, d[0]));
        }
        if self.dataset.n_classes < 2 || self.dataset.n_classes != d[d.len() - 1] {
            return fail(format!(
                "dataset.n_classes {} must be at least 2 and equal the output size {}",
                self.dataset.n_classes,
                d[d.len() - 1]
            ));
        }
        if self.dataset.n_train == 0 || self.dataset.n_eval == 0 {
            return fail("dataset.n_train and dataset.n_eval must be positive".into());
        }
        if !(self.dataset.noise >= 0.0 && self.dataset.noise.is_finite())
            || !(self.dataset.separation >= 0.0 && self.dataset.separation.is_finite())
        {
            return fail("dataset.noise and dataset.separation must be finite and non-negative".into());
        }
        if let Some(t) = &self.model.tapped {
            if t.is_empty() || t.windows(2).any(|w| w[1] <= w[0]) || t.iter().any(|&i| i >= self.layer_count()) {
                return fail(format!("model.tapped must be strictly increasing layer ids below {}, got {t:?}", self.layer_count()));
            }
        }
        if self.fisher.minibatch_count == 0 || self.fisher.minibatch_size == 0 {
            return fail("fisher.minibatch_count and fisher.minibatch_size must be at least 1".into());
        }
        if self.init.rank == 0 {
            return fail("init.rank must be at least 1".into());
        }
        if !self.init.alpha.is_finite() {
            return fail("init.alpha must be finite".into());
        }
        self.strategy().validate().map_err(|e| Error::Config { line: 0, msg: e.to_string() })?;
        for (name, lr) in [("train.lr", self.train.lr), ("pretrain.lr", self.pretrain.lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return fail(format!("{name} must be finite and non-negative"));
            }
        }
        if self.train.log_every == 0 {
            return fail("train.log_every must be at least 1".into());
        }
        if self.probe.gammas.is_empty()
            || self.probe.gammas.iter().any(|g| !(*g > 0.0))
            || self.probe.gammas.windows(2).any(|w| w[1] >= w[0])
        {
            return fail("probe.gammas must be positive and strictly decreasing".into());
        }
        if self.probe.layer >= self.layer_count() || self.preliminary.layer >= self.layer_count() {
            return fail(format!("probe.layer and preliminary.layer must be below {}", self.layer_count()));
        }
        if self.probe.max_directions == 0 || self.preliminary.groups == 0 || self.ablate_seeds == 0 {
            return fail("probe.max_directions, preliminary.groups and ablate.seeds must be at least 1".into());
        }
        if self.output_dir.as_os_str().is_empty() {
            return fail("output.dir must not be empty".into());
        }
        Ok(())
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent sub-seed for a named stream.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    tag.bytes().fold(splitmix64(seed), |acc, b| splitmix64(acc ^ b as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn comments_and_dotted_keys() {
        let cfg = RunConfig::parse("# header\nseed = 9  # trailing\n\ninit.rank = 2\nmodel.tapped = 0\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.init.rank, 2);
        assert_eq!(cfg.tapped_layers(), vec![0]);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("probe.gammas", "0.5,0.05").unwrap();
        cfg.set("init.criterion", "random").unwrap();
        cfg.set("dataset.task_seed", "3").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn errors_carry_line_numbers() {
        match RunConfig::parse("seed = 1\nbogus = 2\n") {
            Err(Error::Config { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2\n"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(RunConfig::parse("init.rank = x\n"), Err(Error::Config { line: 1, .. })));
        assert!(RunConfig::parse("no equals sign\n").is_err());
    }

    #[test]
    fn invariants_enforced() {
        assert!(RunConfig::parse("init.rank = 0").is_err());
        assert!(RunConfig::parse("fisher.minibatch_size = 0").is_err());
        assert!(RunConfig::parse("init.scaling = svd_sigma").is_err());
        assert!(RunConfig::parse("init.scaling = svd_sigma\ninit.basis = exact_svd").is_ok());
        assert!(RunConfig::parse("probe.gammas = 0.01,0.1").is_err());
        assert!(RunConfig::parse("model.dims = 5,3").is_err());
        assert!(RunConfig::parse("model.tapped = 1,0").is_err());
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
        assert_eq!(derive_seed(5, "task"), derive_seed(5, "task"));
    }
}
