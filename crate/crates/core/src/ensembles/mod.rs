//! Ensemble strategies over single-model attribution.
//!
//! Every strategy is a list of independent units `(member, pass)`. A unit
//! evaluates the chosen method on one model variant and reports either TRAK
//! parts (Q and/or the solve term) or a score matrix. Aggregation is a
//! deterministic reduction in unit order, so unit results can be cached and
//! any prefix of the pass axis (`d ≤ D'`) re-aggregated without recomputation.

use serde::{Deserialize, Serialize};

use crate::cost::CostLedger;
use crate::data::Dataset;
use crate::error::{argument, Error, Result};
use crate::lora::{self, LoraAdapter};
use crate::mask::{sample_mask, DropoutMask};
use crate::model::{LayerKind, ModelSpec, ParamVector};
use crate::nn::{GradTarget, Mode, Network};
use crate::rng::{self, tag};
use crate::tda::{
    aggregate_average, compute_q, grad_cos, grad_dot, influence_cg, project_grads, trak_from_parts, trak_term,
    AttributionMatrix, FeaturePack, GradConfig, IfConfig, Method, TrakConfig, UnitId,
};
use crate::tensor::Tensor2;
use crate::training::{fine_tune_lora, train_member, TrainConfig, TrainedMember};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Naive,
    Dropout,
    DropoutForwardOnly,
    Lora,
    Checkpoints,
}

/// Parameters that LoRA-ensemble gradients are taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraGradSpace {
    #[default]
    AdapterOnly,
    /// Base parameters of the adapted model. For experiments only.
    FullModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_rank_f")]
    pub alpha: f64,
    /// Layer-name suffixes that receive adapters.
    #[serde(default = "default_targets")]
    pub targets: Vec<String>,
    #[serde(default)]
    pub grad_space: LoraGradSpace,
    #[serde(default = "default_fine_tune")]
    pub fine_tune: TrainConfig,
}

fn default_rank() -> usize {
    8
}

fn default_rank_f() -> f64 {
    8.0
}

fn default_targets() -> Vec<String> {
    vec!["Wq".into(), "Wv".into()]
}

fn default_fine_tune() -> TrainConfig {
    TrainConfig::lora_default(0)
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: default_rank(),
            alpha: default_rank_f(),
            targets: default_targets(),
            grad_space: LoraGradSpace::default(),
            fine_tune: default_fine_tune(),
        }
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub strategy: Strategy,
    pub method: Method,
    /// I
    #[serde(default = "one")]
    pub members: usize,
    /// D
    #[serde(default = "one")]
    pub masks: usize,
    /// L
    #[serde(default = "one")]
    pub adapters: usize,
    #[serde(default)]
    pub checkpoint_epochs: Vec<usize>,
    /// Mask drop rate; defaults to the model's dropout rate. Zero gives the
    /// all-ones mask.
    #[serde(default)]
    pub mask_rate: Option<f64>,
    /// Dropout strategy with masks disabled: only the projection seed varies
    /// across the D passes.
    #[serde(default)]
    pub random_projection_only: bool,
    /// Keys projection seeds.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub trak: TrakConfig,
    #[serde(default)]
    pub influence: IfConfig,
    #[serde(default)]
    pub grad: GradConfig,
    #[serde(default)]
    pub lora: LoraConfig,
}

impl EnsembleConfig {
    pub fn new(strategy: Strategy, method: Method) -> Self {
        Self {
            strategy,
            method,
            members: 1,
            masks: 1,
            adapters: 1,
            checkpoint_epochs: Vec::new(),
            mask_rate: None,
            random_projection_only: false,
            seed: 0,
            trak: TrakConfig::default(),
            influence: IfConfig::default(),
            grad: GradConfig::default(),
            lora: LoraConfig::default(),
        }
    }

    /// Number of aggregation units.
    pub fn unit_count(&self) -> usize {
        match self.strategy {
            Strategy::Naive => self.members,
            Strategy::Dropout | Strategy::DropoutForwardOnly => self.members * self.masks,
            Strategy::Lora => self.members * self.adapters,
            Strategy::Checkpoints => self.members * self.checkpoint_epochs.len() * self.masks,
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.members == 0 || self.masks == 0 || self.adapters == 0 {
            return bad("I, D and L must all be at least 1".into());
        }
        if self.method == Method::Loo {
            return bad("leave-one-out is an oracle, not an ensemble method".into());
        }
        if self.strategy == Strategy::DropoutForwardOnly && self.method != Method::Trak {
            return bad("the forward-only dropout ensemble is defined for TRAK only".into());
        }
        if self.random_projection_only && self.strategy != Strategy::Dropout {
            return bad("random_projection_only applies to the dropout strategy".into());
        }
        let uses_masks = matches!(
            self.strategy,
            Strategy::Dropout | Strategy::DropoutForwardOnly | Strategy::Checkpoints
        ) && !self.random_projection_only;
        if uses_masks && self.masks > 1 && !spec.has_dropout() {
            return bad(format!("D = {} needs a model with dropout layers", self.masks));
        }
        if let Some(r) = self.mask_rate {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("mask_rate {r} outside [0, 1)"));
            }
        }
        if self.strategy == Strategy::Checkpoints && self.checkpoint_epochs.is_empty() {
            return bad("checkpoint strategy needs at least one checkpoint epoch".into());
        }
        if self.strategy == Strategy::Lora {
            if lora_targets(spec, &self.lora.targets).is_empty() {
                return bad(format!(
                    "no linear layers match adapter targets {:?}",
                    self.lora.targets
                ));
            }
            self.lora.fine_tune.validate()?;
        }
        if self.method == Method::Trak && self.trak.proj_dim == 0 {
            return bad("proj_dim must be at least 1".into());
        }
        Ok(())
    }
}

fn lora_targets(spec: &ModelSpec, suffixes: &[String]) -> Vec<String> {
    let s: Vec<&str> = suffixes.iter().map(String::as_str).collect();
    lora::targets_by_suffix(spec, &s)
}

/// What one unit contributes to the aggregate.
#[derive(Debug, Clone, PartialEq)]
pub enum UnitOutput {
    /// TRAK Q only (forward-only masked passes).
    Q(Vec<f64>),
    /// TRAK solve term only (forward-only feature sets).
    Term(Tensor2),
    Trak { q: Vec<f64>, term: Tensor2 },
    Scores(AttributionMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitResult {
    pub unit: UnitId,
    pub output: UnitOutput,
    /// Passes spent on this unit alone.
    pub ledger: CostLedger,
}

/// Seed of the projection used by unit `(i, d)`.
pub fn projection_seed(run_seed: u64, member: usize, pass: usize) -> u64 {
    rng::derive(run_seed, &[tag::PROJECTION, member as u64, pass as u64])
}

/// The common drop rate of the model's dropout layers.
pub fn model_dropout_rate(spec: &ModelSpec) -> Result<f64> {
    let rates: Vec<f64> = spec
        .layers
        .iter()
        .filter(|l| l.kind == LayerKind::Dropout)
        .map(|l| l.dropout_rate)
        .collect();
    match rates.first() {
        None => Ok(0.0),
        Some(&r) if rates.iter().all(|&x| x == r) => Ok(r),
        Some(_) => Err(Error::Config(
            "dropout layers use different rates; set mask_rate explicitly".into(),
        )),
    }
}

/// Mask `d` of a member.
pub fn member_mask(spec: &ModelSpec, config: &EnsembleConfig, member: &TrainedMember, d: usize) -> Result<DropoutMask> {
    let rate = match config.mask_rate {
        Some(r) => r,
        None => model_dropout_rate(spec)?,
    };
    sample_mask(member.seed, d as u64, rate, &spec.dropout_widths())
}

/// Train `I` members. Member `i` depends only on `(config.seed, i)`.
pub fn train_members(
    spec: &ModelSpec,
    train: &Dataset,
    config: &TrainConfig,
    count: usize,
    ledger: &mut CostLedger,
) -> Result<Vec<TrainedMember>> {
    use rayon::prelude::*;
    let results: Vec<(TrainedMember, CostLedger)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut l = CostLedger::new();
            train_member(spec, train, config, i, &mut l).map(|m| (m, l))
        })
        .collect::<Result<_>>()?;
    Ok(results
        .into_iter()
        .map(|(m, l)| {
            ledger.merge(&l);
            m
        })
        .collect())
}

struct Variant<'a> {
    unit: UnitId,
    params: &'a ParamVector,
    adapters: &'a [LoraAdapter],
    mask: Option<DropoutMask>,
    target: GradTarget,
    projection_seed: u64,
}

#[derive(Clone, Copy)]
enum Parts {
    All,
    QOnly,
    TermOnly,
}

fn evaluate(
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    config: &EnsembleConfig,
    v: &Variant,
    parts: Parts,
) -> Result<UnitResult> {
    let net = Network::new(spec, v.params, v.adapters)?;
    let mode = match &v.mask {
        Some(m) => Mode::Masked(m),
        None => Mode::Eval,
    };
    let mut ledger = CostLedger::new();
    let l = &mut ledger;
    let t = v.target;
    let scores = |m: AttributionMatrix| {
        let mut m = m;
        m.meta.units = vec![v.unit];
        UnitOutput::Scores(m)
    };
    let output = match config.method {
        Method::Trak => match parts {
            Parts::QOnly => UnitOutput::Q(compute_q(&net, mode, train, l)?),
            Parts::TermOnly => {
                let proj = config.trak.projector(net.grad_len(t), v.projection_seed)?;
                let phi = project_grads(&net, mode, t, train, config.trak.output_fn, &proj, l)?;
                let phi_test = project_grads(&net, mode, t, test, config.trak.output_fn, &proj, l)?;
                let pack = FeaturePack::new(v.unit, v.projection_seed, phi, phi_test, vec![0.0; train.len()], config.trak.lambda)?;
                UnitOutput::Term(trak_term(&pack.phi, &pack.phi_test, pack.lambda)?)
            }
            Parts::All => {
                let pack = FeaturePack::build(&net, mode, t, train, test, &config.trak, v.unit, v.projection_seed, l)?;
                let term = trak_term(&pack.phi, &pack.phi_test, pack.lambda)?;
                UnitOutput::Trak { q: pack.q, term }
            }
        },
        Method::InfluenceCg => scores(influence_cg(&net, mode, t, train, test, &config.influence, l)?),
        Method::GradDot => scores(grad_dot(&net, mode, t, train, test, &config.grad, l)?),
        Method::GradCos => scores(grad_cos(&net, mode, t, train, test, &config.grad, l)?),
        Method::Loo => return Err(Error::Config("leave-one-out is an oracle, not an ensemble method".into())),
    };
    Ok(UnitResult {
        unit: v.unit,
        output,
        ledger,
    })
}

fn run_variants(
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    config: &EnsembleConfig,
    variants: &[Variant],
    parts: Parts,
) -> Result<Vec<UnitResult>> {
    // Units run one after another; each already saturates the thread pool
    // and running several at once would multiply peak gradient memory.
    variants
        .iter()
        .map(|v| {
            log::debug!("unit {:?}", v.unit);
            evaluate(spec, train, test, config, v, parts).map_err(|e| e.context(format!("ensemble unit {:?}", v.unit)))
        })
        .collect()
}

/// Reduce unit results in unit order.
pub fn aggregate_units(method: Method, results: &[UnitResult]) -> Result<AttributionMatrix> {
    if results.is_empty() {
        return Err(argument("no ensemble units to aggregate"));
    }
    match method {
        Method::Trak => {
            let mut qs = Vec::new();
            let mut terms = Vec::new();
            for r in results {
                match &r.output {
                    UnitOutput::Q(q) => qs.push((r.unit, q.clone())),
                    UnitOutput::Term(t) => terms.push((r.unit, t.clone())),
                    UnitOutput::Trak { q, term } => {
                        qs.push((r.unit, q.clone()));
                        terms.push((r.unit, term.clone()));
                    }
                    UnitOutput::Scores(_) => return Err(argument("score matrix among TRAK units")),
                }
            }
            trak_from_parts(qs, terms)
        }
        _ => {
            let mats = results
                .iter()
                .map(|r| match &r.output {
                    UnitOutput::Scores(m) if m.method == method => Ok(m.clone()),
                    _ => Err(argument(format!("unit {:?} holds no {method:?} scores", r.unit))),
                })
                .collect::<Result<Vec<_>>>()?;
            aggregate_average(mats)
        }
    }
}

/// Units whose pass index is at most `d`. Forward-only feature units
/// (pass 0) are always kept.
pub fn pass_prefix(results: &[UnitResult], d: usize) -> Vec<UnitResult> {
    results.iter().filter(|r| r.unit.1 <= d).cloned().collect()
}

pub fn total_ledger(results: &[UnitResult]) -> CostLedger {
    CostLedger::merged(results.iter().map(|r| &r.ledger))
}

fn finish(method: Method, results: &[UnitResult], ledger: &mut CostLedger) -> Result<AttributionMatrix> {
    ledger.merge(&total_ledger(results));
    aggregate_units(method, results)
}

fn naive_variants<'a>(config: &EnsembleConfig, members: &'a [TrainedMember]) -> Vec<Variant<'a>> {
    members
        .iter()
        .map(|m| Variant {
            unit: (m.member_index, 1),
            params: &m.params,
            adapters: &[],
            mask: None,
            target: GradTarget::Base,
            projection_seed: projection_seed(config.seed, m.member_index, 1),
        })
        .collect()
}

fn check_members(members: &[TrainedMember]) -> Result<()> {
    if members.is_empty() {
        return Err(argument("ensemble needs at least one member"));
    }
    let mut idx: Vec<usize> = members.iter().map(|m| m.member_index).collect();
    idx.sort_unstable();
    if idx.windows(2).any(|w| w[0] == w[1]) {
        return Err(argument("member indices must be distinct"));
    }
    Ok(())
}

/// Per-unit results of the naive ensemble.
pub fn naive_units(
    spec: &ModelSpec,
    members: &[TrainedMember],
    train: &Dataset,
    test: &Dataset,
    config: &EnsembleConfig,
) -> Result<Vec<UnitResult>> {
    check_members(members)?;
    run_variants(spec, train, test, config, &naive_variants(config, members), Parts::All)
}

pub fn run_naive(
    spec: &ModelSpec,
    members: &[TrainedMember],
    train: &Dataset,
    test: &Dataset,
    config: &EnsembleConfig,
    ledger: &mut CostLedger,
) -> Result<AttributionMatrix> {
    finish(config.method, &naive_units(spec, members, train, test, config)?, ledger)
}

fn dropout_variants<'a>(
    spec: &ModelSpec,
    config: &EnsembleConfig,
    members: &'a [TrainedMember],
    masks: usize,
) -> Result<Vec<Variant<'a>>> {
    let mut out = Vec::with_capacity(members.len() * masks);
    for m in members {
        for d in 1..=masks {
            let mask = if config.random_projection_only {
                None
            } else {
                Some(member_mask(spec, config, m, d)?)
            };
            out.push(Variant {
                unit: (m.member_index, d),
                params: &m.params,
                adapters: &[],
                mask,
                target: GradTarget::Base,
                projection_seed: projection_seed(config.seed, m.member_index, d),
            });
        }
    }
    Ok(out)
}

fn check_masks(spec: &ModelSpec, config: &EnsembleConfig, masks: usize) -> Result<()> {
    if masks == 0 {
        return Err(Error::Config("D must be at least 1".into()));
    }
    if masks > 1 && !config.random_projection_only && !spec.has_dropout() {
        return Err(Error::Config(format!("D = {masks} needs a model with dropout layers")));
    }
    Ok(())
}

/// Per-unit results of the dropout ensemble, units `(i, 1..=D)`.
pub fn dropout_units(
    spec: &ModelSpec,
    members: &[TrainedMember],
    masks: usize,
    train: &Dataset,
    test: &Dataset,
    config: &EnsembleConfig,
) -> Result<Vec<UnitResult>> {
    check_members(members)?;
    check_masks(spec, config, masks)?;
    let variants = dropout_variants(spec, config, members, masks)?;
    run_variants(spec, train, test, config, &variants, Parts::All)
}

pub fn run_dropout_ensemble(
    spec: &ModelSpec,
    members: &[TrainedMember],
    masks: usize,
    train: &Dataset,
    test: &Dataset,
    config: &EnsembleConfig,
    ledger: &mut CostLedger,
) -> Result<AttributionMatrix> {
    finish(config.method, &dropout_units(spec, members, masks, train, test, config)?, ledger)
}

/// Forward-only variant: one feature unit `(i, 0)` per member on the
/// unmasked model, plus Q units `(i, 1..=D)` on the masked models.
pub fn forward_only_units(
    spec: &ModelSpec,
    members: &[TrainedMember],
    masks: usize,
    train: &Dataset,
    test: &Dataset,
    config: &EnsembleConfig,
) -> Result<Vec<UnitResult>> {
    if config.method != Method::Trak {
        return Err(Error::Config("the forward-only dropout ensemble is defined for TRAK only".into()));
    }
    check_members(members)?;
    check_masks(spec, config, masks)?;
    let features: Vec<Variant> = naive_variants(config, members)
        .into_iter()
        .map(|mut v| {
            v.unit.1 = 0;
            v
        })
        .collect();
    let mut out = run_variants(spec, train, test, config, &features, Parts::TermOnly)?;
    let qs = dropout_variants(spec, config, members, masks)?;
    out.extend(run_variants(spec, train, test, config, &qs, Parts::QOnly)?);
    out.sort_by_key(|r| r.unit);
    Ok(out)
}

pub fn run_dropout_forward_only(
    spec: &ModelSpec,
    members: &[TrainedMember],
    masks: usize,
    train: &Dataset,
    test: &Dataset,
    config: &EnsembleConfig,
    ledger: &mut CostLedger,
) -> Result<AttributionMatrix> {
    finish(Method::Trak, &forward_only_units(spec, members, masks, train, test, config)?, ledger)
}

/// Adapters fine-tuned for unit `(i, l)`.
pub fn fine_tune_unit(
    spec: &ModelSpec,
    member: &TrainedMember,
    l: usize,
    train: &Dataset,
    config: &EnsembleConfig,
    ledger: &mut CostLedger,
) -> Result<Vec<LoraAdapter>> {
    let targets = lora_targets(spec, &config.lora.targets);
    if targets.is_empty() {
        return Err(Error::Config(format!("no linear layers match adapter targets {:?}", config.lora.targets)));
    }
    let seed = rng::derive(member.seed, &[l as u64]);
    let adapters = lora::attach_lora(spec, &member.params, &targets, config.lora.rank, config.lora.alpha, seed)?;
    let tuned = fine_tune_lora(spec, &member.params, adapters, train, seed, &config.lora.fine_tune, ledger)
        .map_err(|e| e.context(format!("fine-tuning adapters ({}, {l})", member.member_index)))?;
    Ok(tuned.adapters)
}

/// Fine-tunes `L` adapter sets per member (training-phase cost goes to
/// `ledger`), then evaluates units `(i, 1..=L)`.
pub fn lora_units(
    spec: &ModelSpec,
    members: &[TrainedMember],
    adapters_per_member: usize,
    train: &Dataset,
    test: &Dataset,
    config: &EnsembleConfig,
    ledger: &mut CostLedger,
) -> Result<Vec<UnitResult>> {
    check_members(members)?;
    if adapters_per_member == 0 {
        return Err(Error::Config("L must be at least 1".into()));
    }
    let mut tuned = Vec::with_capacity(members.len() * adapters_per_member);
    for m in members {
        for l in 1..=adapters_per_member {
            tuned.push((m, l, fine_tune_unit(spec, m, l, train, config, ledger)?));
        }
    }
    let target = match config.lora.grad_space {
        LoraGradSpace::AdapterOnly => GradTarget::Adapters,
        LoraGradSpace::FullModel => GradTarget::Base,
    };
    let variants: Vec<Variant> = tuned
        .iter()
        .map(|(m, l, a)| Variant {
            unit: (m.member_index, *l),
            params: &m.params,
            adapters: a,
            mask: None,
            target,
            projection_seed: projection_seed(config.seed, m.member_index, *l),
        })
        .collect();
    run_variants(spec, train, test, config, &variants, Parts::All)
}

#[allow(clippy::too_many_arguments)]
pub fn run_lora_ensemble(
    spec: &ModelSpec,
    members: &[TrainedMember],
    adapters_per_member: usize,
    train: &Dataset,
    test: &Dataset,
    config: &EnsembleConfig,
    ledger: &mut CostLedger,
) -> Result<AttributionMatrix> {
    let units = lora_units(spec, members, adapters_per_member, train, test, config, ledger)?;
    finish(config.method, &units, ledger)
}

/// Units `(i·C + c, d)` over checkpoint `c` of member `i` and mask `d`.
/// With `D = 1` and no dropout in use the checkpoint runs unmasked.
pub fn checkpoint_units(
    spec: &ModelSpec,
    members: &[TrainedMember],
    train: &Dataset,
    test: &Dataset,
    config: &EnsembleConfig,
) -> Result<Vec<UnitResult>> {
    check_members(members)?;
    check_masks(spec, config, config.masks)?;
    let epochs = &config.checkpoint_epochs;
    if epochs.is_empty() {
        return Err(Error::Config("no checkpoint epochs requested".into()));
    }
    let masked = config.masks > 1 || config.mask_rate.is_some();
    let mut variants = Vec::new();
    for m in members {
        for (c, e) in epochs.iter().enumerate() {
            let params = m.checkpoints.get(e).ok_or_else(|| {
                Error::Config(format!("member {} has no checkpoint for epoch {e}", m.member_index))
            })?;
            for d in 1..=config.masks {
                variants.push(Variant {
                    unit: (m.member_index * epochs.len() + c, d),
                    params,
                    adapters: &[],
                    mask: if masked { Some(member_mask(spec, config, m, d)?) } else { None },
                    target: GradTarget::Base,
                    projection_seed: projection_seed(config.seed, m.member_index, d),
                });
            }
        }
    }
    run_variants(spec, train, test, config, &variants, Parts::All)
}

pub fn run_checkpoint_ensemble(
    spec: &ModelSpec,
    members: &[TrainedMember],
    train: &Dataset,
    test: &Dataset,
    config: &EnsembleConfig,
    ledger: &mut CostLedger,
) -> Result<AttributionMatrix> {
    finish(config.method, &checkpoint_units(spec, members, train, test, config)?, ledger)
}

/// All units of the configured strategy. LoRA fine-tuning cost is added to
/// `ledger`; attribution cost stays with each unit.
pub fn ensemble_units(
    spec: &ModelSpec,
    members: &[TrainedMember],
    train: &Dataset,
    test: &Dataset,
    config: &EnsembleConfig,
    ledger: &mut CostLedger,
) -> Result<Vec<UnitResult>> {
    config.validate(spec)?;
    if members.len() != config.members {
        return Err(Error::Config(format!(
            "config asks for I = {} members, {} given",
            config.members,
            members.len()
        )));
    }
    match config.strategy {
        Strategy::Naive => naive_units(spec, members, train, test, config),
        Strategy::Dropout => dropout_units(spec, members, config.masks, train, test, config),
        Strategy::DropoutForwardOnly => forward_only_units(spec, members, config.masks, train, test, config),
        Strategy::Lora => lora_units(spec, members, config.adapters, train, test, config, ledger),
        Strategy::Checkpoints => checkpoint_units(spec, members, train, test, config),
    }
}

pub fn run_ensemble(
    spec: &ModelSpec,
    members: &[TrainedMember],
    train: &Dataset,
    test: &Dataset,
    config: &EnsembleConfig,
    ledger: &mut CostLedger,
) -> Result<AttributionMatrix> {
    let units = ensemble_units(spec, members, train, test, config, ledger)?;
    finish(config.method, &units, ledger)
}
