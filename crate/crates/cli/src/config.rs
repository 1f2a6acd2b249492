//! Run configuration: parsing, validation and the derived objects every
//! subcommand needs.

use std::path::{Path, PathBuf};

use attrib_ens::cost::UnitCosts;
use attrib_ens::data::{
    gen_synthetic_classification, gen_synthetic_sequences, load_mnist_idx, Dataset, SequenceGenerator,
};
use attrib_ens::ensembles::{EnsembleConfig, Strategy};
use attrib_ens::model::{build_linear, build_mlp, build_tiny_transformer, ModelSpec};
use attrib_ens::output::OutputFnKind;
use attrib_ens::tda::Method;
use attrib_ens::training::{Optimizer, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSection {
    /// Gaussian blobs; the first `n_train` samples train, the rest test.
    SyntheticClassification {
        n_train: usize,
        n_test: usize,
        dim: usize,
        classes: usize,
        separation: f64,
        #[serde(default)]
        label_noise: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// IDX files; relative paths resolve against the config file.
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        n_train: Option<usize>,
        #[serde(default)]
        n_test: Option<usize>,
    },
    SyntheticSequences {
        n_train: usize,
        n_test: usize,
        vocab: usize,
        context_len: usize,
        /// Defaults to an order-1 Markov chain keyed by the dataset seed.
        #[serde(default)]
        generator: Option<SequenceGenerator>,
        #[serde(default)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSection {
    Linear,
    Mlp {
        hidden: Vec<usize>,
        #[serde(default)]
        dropout: f64,
    },
    TinyTransformer {
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        d_ff: usize,
        #[serde(default)]
        dropout: f64,
    },
}

fn default_optimizer() -> Optimizer {
    Optimizer::SgdMomentum { lr: 0.01, momentum: 0.9 }
}

fn default_batch() -> usize {
    64
}

fn half() -> f64 {
    0.5
}

/// Training hyperparameters; the seed comes from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "half")]
    pub subset_fraction: f64,
    #[serde(default)]
    pub checkpoint_epochs: Vec<usize>,
    #[serde(default)]
    pub weight_decay: f64,
}

impl TrainingSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            subset_fraction: self.subset_fraction,
            checkpoint_epochs: self.checkpoint_epochs.clone(),
            weight_decay: self.weight_decay,
        }
    }
}

fn default_m() -> usize {
    20
}

fn default_top_k() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    /// Ground-truth subsets.
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "half")]
    pub alpha: f64,
    /// Defaults to the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Retraining recipe for ground truth and the leave-one-out oracle;
    /// defaults to the training section on the whole given subset.
    #[serde(default)]
    pub retrain: Option<TrainingSection>,
    /// Defaults to the attribution method's output function.
    #[serde(default)]
    pub output_fn: Option<OutputFnKind>,
    /// Training indices listed per test point in the summary.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            m: default_m(),
            alpha: half(),
            seed: None,
            retrain: None,
            output_fn: None,
            top_k: default_top_k(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// I
    Members,
    /// D
    Masks,
    /// L
    Adapters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    /// Unit costs for prediction; pass counts are used when absent.
    #[serde(default)]
    pub costs: Option<UnitCosts>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// A parsed, validated config with everything resolved that can be
/// resolved without touching data.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    /// Directory relative input paths resolve against.
    pub base_dir: PathBuf,
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub ensemble: EnsembleConfig,
}

impl Run {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str(&text, base_dir, overrides)
    }

    pub fn from_str(text: &str, base_dir: PathBuf, overrides: &Overrides) -> Result<Self, Failure> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Failure::Config(format!("config is not valid JSON: {e}")))?;
        if raw.pointer("/ensemble/seed").is_some() {
            return Err(Failure::Config(
                "ensemble.seed: projection seeds follow the top-level `seed`; remove this field".into(),
            ));
        }
        let mut config: RunConfig = serde_path_to_error::deserialize(&raw).map_err(|e| {
            let path = e.path().to_string();
            Failure::Config(format!("{path}: {}", e.into_inner()))
        })?;
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(out) = &overrides.out {
            config.output_dir = out.clone();
        } else if config.output_dir.is_relative() {
            config.output_dir = base_dir.join(&config.output_dir);
        }
        let spec = build_model(&config.model, &config.dataset).map_err(|e| field("model", e))?;
        let train = config.training.to_train_config(config.seed);
        train.validate().map_err(|e| field("training", e))?;
        let mut ensemble = config.ensemble.clone();
        ensemble.seed = config.seed;
        ensemble.validate(&spec).map_err(|e| field("ensemble", e))?;
        if ensemble.strategy == Strategy::Checkpoints {
            if let Some(e) = ensemble
                .checkpoint_epochs
                .iter()
                .find(|e| !train.checkpoint_epochs.contains(e))
            {
                return Err(Failure::Config(format!(
                    "ensemble.checkpoint_epochs: epoch {e} is not stored by training.checkpoint_epochs"
                )));
            }
        }
        validate_evaluation(&config)?;
        if let Some(s) = &config.sweep {
            if s.values.is_empty() || s.values.contains(&0) {
                return Err(Failure::Config("sweep.values: need a non-empty list of counts ≥ 1".into()));
            }
            let fits = match s.axis {
                SweepAxis::Members => true,
                SweepAxis::Masks => matches!(
                    ensemble.strategy,
                    Strategy::Dropout | Strategy::DropoutForwardOnly | Strategy::Checkpoints
                ),
                SweepAxis::Adapters => ensemble.strategy == Strategy::Lora,
            };
            if !fits {
                return Err(Failure::Config(format!(
                    "sweep.axis: {:?} does not apply to the {:?} strategy",
                    s.axis, ensemble.strategy
                )));
            }
            let mut probe = ensemble.clone();
            for &v in &s.values {
                set_axis(&mut probe, s.axis, v);
                probe.validate(&spec).map_err(|e| field("sweep.values", e))?;
            }
        }
        if let Some(c) = &config.costs {
            let probe = attrib_ens::cost::predict_costs(&ensemble, c);
            probe.map_err(|e| field("costs", e))?;
        }
        check_inputs_exist(&config.dataset, &base_dir)?;
        Ok(Self {
            config,
            base_dir,
            spec,
            train,
            ensemble,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.output_dir
    }

    pub fn evaluation_seed(&self) -> u64 {
        self.config.evaluation.seed.unwrap_or(self.config.seed)
    }

    /// Recipe for ground-truth and oracle retraining. The subset is chosen
    /// by the caller, so the whole of it is used.
    pub fn retrain_config(&self) -> TrainConfig {
        let section = self.config.evaluation.retrain.as_ref().unwrap_or(&self.config.training);
        let mut c = section.to_train_config(self.evaluation_seed());
        c.subset_fraction = 1.0;
        c.checkpoint_epochs.clear();
        c
    }

    pub fn output_fn(&self) -> OutputFnKind {
        self.config
            .evaluation
            .output_fn
            .unwrap_or_else(|| method_output_fn(&self.ensemble))
    }

    /// Train and test sets, loaded or generated.
    pub fn datasets(&self) -> Result<(Dataset, Dataset), Failure> {
        load_datasets(&self.config.dataset, &self.base_dir, self.config.seed)
    }
}

pub fn set_axis(config: &mut EnsembleConfig, axis: SweepAxis, value: usize) {
    match axis {
        SweepAxis::Members => config.members = value,
        SweepAxis::Masks => config.masks = value,
        SweepAxis::Adapters => config.adapters = value,
    }
}

pub fn method_output_fn(config: &EnsembleConfig) -> OutputFnKind {
    match config.method {
        Method::Trak => config.trak.output_fn,
        Method::InfluenceCg => config.influence.output_fn,
        Method::GradDot | Method::GradCos | Method::Loo => config.grad.output_fn,
    }
}

fn field(path: &str, e: attrib_ens::Error) -> Failure {
    Failure::Config(format!("{path}: {e}"))
}

fn validate_evaluation(config: &RunConfig) -> Result<(), Failure> {
    let ev = &config.evaluation;
    if ev.m < 2 {
        return Err(Failure::Config(format!("evaluation.m: need at least 2 subsets, got {}", ev.m)));
    }
    if !(ev.alpha > 0.0 && ev.alpha < 1.0) {
        return Err(Failure::Config(format!("evaluation.alpha: {} outside (0, 1)", ev.alpha)));
    }
    if let Some(r) = &ev.retrain {
        r.to_train_config(0).validate().map_err(|e| field("evaluation.retrain", e))?;
    }
    Ok(())
}

fn dims(dataset: &DatasetSection) -> (usize, usize) {
    match dataset {
        DatasetSection::SyntheticClassification { dim, classes, .. } => (*dim, *classes),
        DatasetSection::Mnist { .. } => (784, 10),
        DatasetSection::SyntheticSequences { vocab, context_len, .. } => (*context_len, *vocab),
    }
}

fn build_model(model: &ModelSection, dataset: &DatasetSection) -> attrib_ens::Result<ModelSpec> {
    let (input, output) = dims(dataset);
    let sequences = matches!(dataset, DatasetSection::SyntheticSequences { .. });
    match model {
        ModelSection::TinyTransformer { .. } if !sequences => Err(attrib_ens::Error::Config(
            "the tiny transformer needs a sequence dataset".into(),
        )),
        ModelSection::Linear | ModelSection::Mlp { .. } if sequences => Err(attrib_ens::Error::Config(
            "sequence datasets need the tiny transformer".into(),
        )),
        ModelSection::Linear => build_linear(input, output),
        ModelSection::Mlp { hidden, dropout } => build_mlp(input, hidden, output, *dropout),
        ModelSection::TinyTransformer {
            d_model,
            n_heads,
            n_layers,
            d_ff,
            dropout,
        } => build_tiny_transformer(output, input, *d_model, *n_heads, *n_layers, *d_ff, *dropout),
    }
}

fn check_inputs_exist(dataset: &DatasetSection, base: &Path) -> Result<(), Failure> {
    match dataset {
        DatasetSection::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } => {
            for (name, p) in [
                ("train_images", train_images),
                ("train_labels", train_labels),
                ("test_images", test_images),
                ("test_labels", test_labels),
            ] {
                let full = base.join(p);
                if !full.is_file() {
                    return Err(Failure::Config(format!("dataset.{name}: {} does not exist", full.display())));
                }
            }
            Ok(())
        }
        DatasetSection::SyntheticClassification { n_train, n_test, .. }
        | DatasetSection::SyntheticSequences { n_train, n_test, .. } => {
            if *n_train == 0 || *n_test == 0 {
                return Err(Failure::Config("dataset: n_train and n_test must be positive".into()));
            }
            Ok(())
        }
    }
}

fn split(all: Dataset, n_train: usize) -> attrib_ens::Result<(Dataset, Dataset)> {
    let test: Vec<usize> = (n_train..all.len()).collect();
    Ok((all.prefix(n_train)?, all.subset(&test)?))
}

fn load_datasets(section: &DatasetSection, base: &Path, run_seed: u64) -> Result<(Dataset, Dataset), Failure> {
    let loaded = match section {
        DatasetSection::SyntheticClassification {
            n_train,
            n_test,
            dim,
            classes,
            separation,
            label_noise,
            seed,
        } => gen_synthetic_classification(
            n_train + n_test,
            *dim,
            *classes,
            *separation,
            *label_noise,
            seed.unwrap_or(run_seed),
        )
        .and_then(|all| split(all, *n_train)),
        DatasetSection::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
            n_train,
            n_test,
        } => load_mnist_idx(&base.join(train_images), &base.join(train_labels), *n_train).and_then(|train| {
            load_mnist_idx(&base.join(test_images), &base.join(test_labels), *n_test).map(|test| (train, test))
        }),
        DatasetSection::SyntheticSequences {
            n_train,
            n_test,
            vocab,
            context_len,
            generator,
            seed,
        } => {
            let seed = seed.unwrap_or(run_seed);
            let generator = generator.unwrap_or(SequenceGenerator::Markov { order: 1, seed });
            gen_synthetic_sequences(n_train + n_test, *vocab, *context_len, generator, seed)
                .and_then(|all| split(all, *n_train))
        }
    };
    loaded.map_err(|e| Failure::Config(format!("dataset: {e}")))
}

/// Pass-count unit costs: every per-sample forward or backward pass costs 1.
pub fn pass_unit_costs(run: &Run, n_train: usize, n_test: usize) -> UnitCosts {
    let (n, m) = (n_train as f64, n_test as f64);
    let t = &run.train;
    let subset = (t.subset_fraction * n).floor();
    let ft = &run.ensemble.lora.fine_tune;
    let ft_subset = (ft.subset_fraction * n).floor();
    let cfg = &run.ensemble;
    let serving = match cfg.method {
        Method::Trak => 2.0 * (n + m) + n,
        Method::GradDot | Method::GradCos | Method::Loo => 2.0 * (n + m),
        // CG cost is data dependent; the iteration cap bounds it.
        Method::InfluenceCg => 2.0 * (n + m) + n + 2.0 * n * (cfg.influence.max_iters as f64) * m,
    };
    UnitCosts {
        train: 2.0 * t.epochs as f64 * subset,
        train_base: 2.0 * t.epochs as f64 * subset,
        train_lora: 2.0 * ft.epochs as f64 * ft_subset,
        serving,
        serving_fwd_only: n,
        serving_lora: serving,
    }
}
