//! Optimizers, subset sampling, member training and LoRA fine-tuning.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::artifact::{Artifact, ArtifactKind};
use crate::cost::{CostLedger, Phase};
use crate::data::{Dataset, DatasetKind};
use crate::error::{argument, shape, Error, Result};
use crate::lora::{self, LoraAdapter};
use crate::model::{Arch, ModelSpec, ParamVector};
use crate::nn::{backward, forward_tape, GradTarget, Mode, Network};
use crate::output::mean_cross_entropy;
use crate::rng::{self, tag};
use crate::tensor::axpy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    /// Heavy-ball momentum: `buf = μ·buf + g`, `θ -= lr·buf`.
    SgdMomentum { lr: f64, momentum: f64 },
    /// Adam with bias correction.
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    pub subset_fraction: f64,
    /// Epochs after which parameters are stored; 0 stores the initialization.
    #[serde(default)]
    pub checkpoint_epochs: Vec<usize>,
    /// L2 penalty coefficient added to the mean cross-entropy.
    #[serde(default)]
    pub weight_decay: f64,
}

impl TrainConfig {
    /// SGD(0.01, 0.9), batch 64, on half-size subsets.
    pub fn sgd_default(epochs: usize, seed: u64) -> Self {
        Self {
            optimizer: Optimizer::SgdMomentum {
                lr: 0.01,
                momentum: 0.9,
            },
            batch_size: 64,
            epochs,
            seed,
            subset_fraction: 0.5,
            checkpoint_epochs: Vec::new(),
            weight_decay: 0.0,
        }
    }

    /// Adam(1e-4, 0.9, 0.98) for 10 epochs on half-size subsets.
    pub fn lora_default(seed: u64) -> Self {
        Self {
            optimizer: Optimizer::Adam {
                lr: 1e-4,
                beta1: 0.9,
                beta2: 0.98,
                eps: 1e-8,
            },
            batch_size: 64,
            epochs: 10,
            seed,
            subset_fraction: 0.5,
            checkpoint_epochs: Vec::new(),
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self.optimizer {
            Optimizer::SgdMomentum { lr, momentum } => {
                if !(lr > 0.0 && lr.is_finite()) {
                    return bad(format!("learning rate {lr} must be positive"));
                }
                if !(0.0..1.0).contains(&momentum) {
                    return bad(format!("momentum {momentum} outside [0, 1)"));
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                if !(lr > 0.0 && lr.is_finite()) {
                    return bad(format!("learning rate {lr} must be positive"));
                }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return bad("Adam betas must lie in [0, 1)".into());
                }
                if !(eps > 0.0) {
                    return bad("Adam epsilon must be positive".into());
                }
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return bad(format!("subset_fraction {} outside (0, 1]", self.subset_fraction));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and ≥ 0".into());
        }
        if let Some(e) = self.checkpoint_epochs.iter().find(|&&e| e > self.epochs) {
            return bad(format!("checkpoint epoch {e} exceeds {} epochs", self.epochs));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedMember {
    pub member_index: usize,
    pub params: ParamVector,
    pub subset_indices: Vec<usize>,
    pub seed: u64,
    pub checkpoints: BTreeMap<usize, ParamVector>,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuned {
    pub adapters: Vec<LoraAdapter>,
    pub subset_indices: Vec<usize>,
    pub loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MemberHeader {
    member_index: usize,
    seed: u64,
    param_count: usize,
    subset_indices: Vec<usize>,
    checkpoint_epochs: Vec<usize>,
    loss_history: Vec<f64>,
}

impl TrainedMember {
    /// Final parameters followed by each checkpoint in epoch order.
    pub fn to_artifact(&self, config_digest: &str) -> Result<Artifact> {
        let mut payload = self.params.data.clone();
        for p in self.checkpoints.values() {
            payload.extend_from_slice(&p.data);
        }
        let header = MemberHeader {
            member_index: self.member_index,
            seed: self.seed,
            param_count: self.params.len(),
            subset_indices: self.subset_indices.clone(),
            checkpoint_epochs: self.checkpoints.keys().copied().collect(),
            loss_history: self.loss_history.clone(),
        };
        Artifact::new(ArtifactKind::Params, config_digest, header, payload)
    }

    pub fn from_artifact(a: &Artifact, spec: &ModelSpec) -> Result<Self> {
        a.expect_kind(ArtifactKind::Params)?;
        let h: MemberHeader = a.meta()?;
        let p = spec.param_count();
        if h.param_count != p {
            return Err(shape(format!("checkpoint holds {} parameters, model has {p}", h.param_count)));
        }
        if a.payload.len() != p * (1 + h.checkpoint_epochs.len()) {
            return Err(shape("checkpoint payload does not match its header"));
        }
        let mut blocks = a.payload.chunks(p.max(1)).map(|c| ParamVector::new(spec.layout(), c.to_vec()));
        let params = match blocks.next() {
            Some(b) => b?,
            None => ParamVector::zeros(spec),
        };
        let checkpoints = h
            .checkpoint_epochs
            .iter()
            .map(|&e| Ok((e, blocks.next().ok_or_else(|| shape("missing checkpoint block"))??)))
            .collect::<Result<_>>()?;
        Ok(Self {
            member_index: h.member_index,
            params,
            subset_indices: h.subset_indices,
            seed: h.seed,
            checkpoints,
            loss_history: h.loss_history,
        })
    }
}

/// `⌊fraction·n⌋` distinct indices drawn uniformly, returned sorted.
pub fn sample_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(argument(format!("subset fraction {fraction} outside (0, 1]")));
    }
    let k = (fraction * n as f64).floor() as usize;
    if k == n {
        return Ok((0..n).collect());
    }
    let mut rng = rng::stream(seed, &[tag::SUBSET]);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Seed of member `i` under run seed `seed`.
pub fn member_seed(seed: u64, member_index: usize) -> u64 {
    rng::derive(seed, &[tag::MEMBER, member_index as u64])
}

/// Checks that a dataset can feed a model.
pub fn check_compatible(spec: &ModelSpec, data: &Dataset) -> Result<()> {
    let ok = match (spec.arch, data.kind) {
        (Arch::Mlp, DatasetKind::Classification { classes }) => {
            data.inputs.cols() == spec.input_dim && classes == spec.output_dim
        }
        (Arch::TinyTransformer(d), DatasetKind::Sequence { vocab }) => {
            vocab == d.vocab_size && data.inputs.cols() <= d.context_len
        }
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(shape(format!(
            "dataset ({:?}, {} columns) does not fit the model",
            data.kind,
            data.inputs.cols()
        )))
    }
}

struct OptState {
    opt: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptState {
    fn new(opt: Optimizer, len: usize) -> Self {
        let v = match opt {
            Optimizer::Adam { .. } => vec![0.0; len],
            Optimizer::SgdMomentum { .. } => Vec::new(),
        };
        Self {
            opt,
            m: vec![0.0; len],
            v,
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        match self.opt {
            Optimizer::SgdMomentum { lr, momentum } => {
                for ((p, b), g) in theta.iter_mut().zip(&mut self.m).zip(grad) {
                    *b = momentum * *b + g;
                    *p -= lr * *b;
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (((p, m), v), g) in theta.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(grad) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// What the shared loop optimizes: base weights or adapter weights.
trait Trainable {
    fn theta(&mut self) -> &mut Vec<f64>;
    fn target(&self) -> GradTarget;
    fn network(&self) -> Result<Network<'_>>;
    /// Called after each parameter update.
    fn sync(&mut self) -> Result<()> {
        Ok(())
    }
}

struct BaseModel<'a> {
    spec: &'a ModelSpec,
    params: ParamVector,
}

impl Trainable for BaseModel<'_> {
    fn theta(&mut self) -> &mut Vec<f64> {
        &mut self.params.data
    }
    fn target(&self) -> GradTarget {
        GradTarget::Base
    }
    fn network(&self) -> Result<Network<'_>> {
        Network::new(self.spec, &self.params, &[])
    }
}

struct AdaptedModel<'a> {
    spec: &'a ModelSpec,
    base: &'a ParamVector,
    adapters: Vec<LoraAdapter>,
    flat: Vec<f64>,
}

impl Trainable for AdaptedModel<'_> {
    fn theta(&mut self) -> &mut Vec<f64> {
        &mut self.flat
    }
    fn target(&self) -> GradTarget {
        GradTarget::Adapters
    }
    fn network(&self) -> Result<Network<'_>> {
        Network::new(self.spec, self.base, &self.adapters)
    }
    fn sync(&mut self) -> Result<()> {
        lora::unflatten(&mut self.adapters, &self.flat)
    }
}

/// Mini-batch training over `subset`. `seed` keys shuffling and dropout;
/// `on_epoch` sees the parameters after every epoch (and before the first).
fn run_training(
    model: &mut dyn Trainable,
    dataset: &Dataset,
    subset: &[usize],
    config: &TrainConfig,
    seed: u64,
    ledger: &mut CostLedger,
    on_epoch: &mut dyn FnMut(usize, &mut dyn Trainable),
) -> Result<Vec<f64>> {
    let len = model.theta().len();
    let mut opt = OptState::new(config.optimizer, len);
    let mut grad = vec![0.0; len];
    let mut history = Vec::with_capacity(config.epochs);
    on_epoch(0, model);
    let mut order = subset.to_vec();
    for epoch in 1..=config.epochs {
        let mut shuffle = rng::stream(seed, &[tag::SHUFFLE, epoch as u64]);
        order.copy_from_slice(subset);
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = dataset.subset(chunk)?;
            let diverged = |loss: f64| Error::Divergence {
                epoch,
                batch: b,
                loss,
            };
            let loss = {
                let net = model.network()?;
                let mode = Mode::Train {
                    seed: rng::derive(seed, &[tag::TRAIN_DROPOUT, epoch as u64, b as u64]),
                };
                let (logits, tape) = match forward_tape(&net, &batch.inputs, mode) {
                    Err(e) if e.is_numeric() => return Err(diverged(f64::NAN)),
                    r => r?,
                };
                let (loss, dlogits) = mean_cross_entropy(&logits, &batch.targets);
                if !loss.is_finite() {
                    return Err(diverged(loss));
                }
                grad.fill(0.0);
                backward(&net, &tape, &dlogits, model.target(), &mut grad)?;
                loss
            };
            ledger.record_grad(Phase::Train, chunk.len() as u64);
            if config.weight_decay > 0.0 {
                axpy(config.weight_decay, model.theta(), &mut grad);
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged(loss));
            }
            opt.step(model.theta(), &grad);
            model.sync()?;
            total += loss * chunk.len() as f64;
        }
        let mean = total / subset.len().max(1) as f64;
        log::info!("epoch={epoch} loss={mean:.6}");
        history.push(mean);
        on_epoch(epoch, model);
    }
    Ok(history)
}

/// Train from the initialization keyed by `init_seed` on `subset`.
/// Returns the final parameters, requested checkpoints and loss history.
pub fn train_on_subset(
    spec: &ModelSpec,
    dataset: &Dataset,
    subset: &[usize],
    config: &TrainConfig,
    init_seed: u64,
    ledger: &mut CostLedger,
) -> Result<(ParamVector, BTreeMap<usize, ParamVector>, Vec<f64>)> {
    config.validate()?;
    check_compatible(spec, dataset)?;
    let mut model = BaseModel {
        spec,
        params: spec.init_params(init_seed),
    };
    let mut checkpoints = BTreeMap::new();
    let wanted = &config.checkpoint_epochs;
    let history = run_training(
        &mut model,
        dataset,
        subset,
        config,
        init_seed,
        ledger,
        &mut |epoch, m| {
            if wanted.contains(&epoch) {
                let p = ParamVector {
                    layout: spec.layout(),
                    data: m.theta().clone(),
                };
                checkpoints.insert(epoch, p);
            }
        },
    )?;
    ledger.model_trainings += 1;
    Ok((model.params, checkpoints, history))
}

/// Train member `member_index` on its own seed-drawn subset.
pub fn train_member(
    spec: &ModelSpec,
    dataset: &Dataset,
    config: &TrainConfig,
    member_index: usize,
    ledger: &mut CostLedger,
) -> Result<TrainedMember> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(argument("cannot train on an empty dataset"));
    }
    let seed = member_seed(config.seed, member_index);
    let subset_indices = sample_subset(dataset.len(), config.subset_fraction, seed)?;
    let (params, checkpoints, loss_history) =
        train_on_subset(spec, dataset, &subset_indices, config, seed, ledger)
            .map_err(|e| e.context(format!("training member {member_index}")))?;
    Ok(TrainedMember {
        member_index,
        params,
        subset_indices,
        seed,
        checkpoints,
        loss_history,
    })
}

/// Update only the adapters on a `subset_fraction` subset keyed by
/// `subset_seed`; the base parameters are read-only.
pub fn fine_tune_lora(
    spec: &ModelSpec,
    base: &ParamVector,
    adapters: Vec<LoraAdapter>,
    dataset: &Dataset,
    subset_seed: u64,
    config: &TrainConfig,
    ledger: &mut CostLedger,
) -> Result<FineTuned> {
    config.validate()?;
    check_compatible(spec, dataset)?;
    let seed = rng::derive(subset_seed, &[tag::LORA_SUBSET]);
    let subset_indices = sample_subset(dataset.len(), config.subset_fraction, seed)?;
    let flat = lora::flatten(&adapters);
    let mut model = AdaptedModel {
        spec,
        base,
        adapters,
        flat,
    };
    model.network()?;
    let loss_history = run_training(
        &mut model,
        dataset,
        &subset_indices,
        config,
        seed,
        ledger,
        &mut |_, _| {},
    )?;
    ledger.lora_finetunes += 1;
    Ok(FineTuned {
        adapters: model.adapters,
        subset_indices,
        loss_history,
    })
}
