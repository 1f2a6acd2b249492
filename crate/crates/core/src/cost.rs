//! Pass counters and the closed-form cost model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ensembles::{EnsembleConfig, Strategy};
use crate::error::{argument, Error, Result};
use crate::tda::Method;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Serve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassKind {
    Forward,
    Backward,
}

/// Per-sample pass counts for one run.
///
/// A gradient evaluation records one forward and one backward pass; a
/// Jacobian-vector product counts as a forward pass and a vector-Jacobian
/// product as a backward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub train_forward: u64,
    pub train_backward: u64,
    pub serve_forward: u64,
    pub serve_backward: u64,
    /// Models trained from scratch.
    pub model_trainings: u64,
    /// LoRA fine-tuning runs.
    pub lora_finetunes: u64,
    /// Gauss–Newton products applied over the training set by CG.
    pub cg_matvecs: u64,
    /// Optional wall-clock seconds per phase; never read by the counters.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub wall_clock: BTreeMap<String, f64>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_pass(&mut self, phase: Phase, kind: PassKind, n_samples: u64) {
        let c = match (phase, kind) {
            (Phase::Train, PassKind::Forward) => &mut self.train_forward,
            (Phase::Train, PassKind::Backward) => &mut self.train_backward,
            (Phase::Serve, PassKind::Forward) => &mut self.serve_forward,
            (Phase::Serve, PassKind::Backward) => &mut self.serve_backward,
        };
        *c += n_samples;
    }

    /// One forward and one backward pass per sample.
    pub fn record_grad(&mut self, phase: Phase, n_samples: u64) {
        self.record_pass(phase, PassKind::Forward, n_samples);
        self.record_pass(phase, PassKind::Backward, n_samples);
    }

    pub fn add_wall_clock(&mut self, phase: &str, seconds: f64) {
        *self.wall_clock.entry(phase.to_owned()).or_default() += seconds;
    }

    pub fn merge(&mut self, other: &CostLedger) {
        self.train_forward += other.train_forward;
        self.train_backward += other.train_backward;
        self.serve_forward += other.serve_forward;
        self.serve_backward += other.serve_backward;
        self.model_trainings += other.model_trainings;
        self.lora_finetunes += other.lora_finetunes;
        self.cg_matvecs += other.cg_matvecs;
        for (k, v) in &other.wall_clock {
            *self.wall_clock.entry(k.clone()).or_default() += v;
        }
    }

    pub fn merged<'a>(ledgers: impl IntoIterator<Item = &'a CostLedger>) -> CostLedger {
        let mut out = CostLedger::default();
        for l in ledgers {
            out.merge(l);
        }
        out
    }

    /// Counters without timing, for exact comparisons.
    pub fn counters(&self) -> [(&'static str, u64); 7] {
        [
            ("train_forward", self.train_forward),
            ("train_backward", self.train_backward),
            ("serve_forward", self.serve_forward),
            ("serve_backward", self.serve_backward),
            ("model_trainings", self.model_trainings),
            ("lora_finetunes", self.lora_finetunes),
            ("cg_matvecs", self.cg_matvecs),
        ]
    }
}

/// Measured or estimated cost of one unit of work, in any consistent unit
/// (seconds, passes).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitCosts {
    /// Training one model from scratch.
    pub train: f64,
    /// Training a base model that will receive adapters.
    pub train_base: f64,
    /// One LoRA fine-tuning run.
    pub train_lora: f64,
    /// Attribution with one model.
    pub serving: f64,
    /// The forward-only part of attribution with one masked model.
    pub serving_fwd_only: f64,
    /// Attribution with one adapted model.
    pub serving_lora: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedCosts {
    pub training: f64,
    pub serving: f64,
}

impl PredictedCosts {
    pub fn total(&self) -> f64 {
        self.training + self.serving
    }
}

/// Closed-form training and serving cost of an ensemble configuration.
///
/// Checkpoint ensembles cost one training run per member and are served
/// like a naive ensemble over every (checkpoint, mask) unit.
pub fn predict_costs(config: &EnsembleConfig, unit: &UnitCosts) -> Result<PredictedCosts> {
    let all = [
        unit.train,
        unit.train_base,
        unit.train_lora,
        unit.serving,
        unit.serving_fwd_only,
        unit.serving_lora,
    ];
    if all.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
        return Err(argument("unit costs must be finite and non-negative"));
    }
    let (i, d, l) = (config.members as f64, config.masks as f64, config.adapters as f64);
    if config.members == 0 || config.masks == 0 || config.adapters == 0 {
        return Err(Error::Config("I, D and L must all be at least 1".into()));
    }
    let (training, serving) = match config.strategy {
        Strategy::Naive => (i * unit.train, i * unit.serving),
        Strategy::Dropout => (i * unit.train, i * d * unit.serving),
        Strategy::DropoutForwardOnly => {
            if config.method != Method::Trak {
                return Err(Error::Config("the forward-only dropout ensemble is defined for TRAK only".into()));
            }
            (i * unit.train, i * unit.serving + i * (d - 1.0) * unit.serving_fwd_only)
        }
        Strategy::Lora => (i * unit.train_base + i * l * unit.train_lora, i * l * unit.serving_lora),
        Strategy::Checkpoints => {
            if config.checkpoint_epochs.is_empty() {
                return Err(Error::Config("checkpoint strategy needs at least one checkpoint epoch".into()));
            }
            let c = config.checkpoint_epochs.len() as f64;
            (i * unit.train, i * c * d * unit.serving)
        }
    };
    Ok(PredictedCosts { training, serving })
}

/// Dataset sizes a ledger was measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerScope {
    pub n_train: u64,
    pub n_test: u64,
    /// Samples in each LoRA fine-tuning subset.
    #[serde(default)]
    pub finetune_subset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerCheck {
    pub counter: String,
    pub expected: u64,
    pub measured: u64,
}

impl LedgerCheck {
    pub fn passed(&self) -> bool {
        self.expected == self.measured
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub checks: Vec<LedgerCheck>,
}

impl LedgerReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(LedgerCheck::passed)
    }

    pub fn failures(&self) -> Vec<&LedgerCheck> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }
}

impl std::fmt::Display for LedgerReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            let mark = if c.passed() { "ok" } else { "MISMATCH" };
            writeln!(f, "{:<16} expected {:>12} measured {:>12}  {mark}", c.counter, c.expected, c.measured)?;
        }
        Ok(())
    }
}

/// Compare an ensemble run's ledger with the exact pass counts its
/// configuration implies.
///
/// The ledger must cover attribution (and, for LoRA, fine-tuning) but not
/// member training. CG iteration counts depend on the data, so the
/// influence expectation is written in terms of the measured `cg_matvecs`.
pub fn verify_ledger(config: &EnsembleConfig, scope: LedgerScope, ledger: &CostLedger) -> Result<LedgerReport> {
    let (n, m) = (scope.n_train, scope.n_test);
    let i = config.members as u64;
    let units = config.unit_count() as u64;
    let per_unit_fwd = |units: u64| match config.method {
        Method::Trak => units * (n + m) + units * n,
        Method::GradDot | Method::GradCos | Method::Loo => units * (n + m),
        Method::InfluenceCg => units * (n + m) + units * n + ledger.cg_matvecs * n,
    };
    let per_unit_bwd = |units: u64| match config.method {
        Method::InfluenceCg => units * (n + m) + ledger.cg_matvecs * n,
        _ => units * (n + m),
    };
    let (serve_forward, serve_backward) = match config.strategy {
        Strategy::DropoutForwardOnly => (i * (n + m) + units * n, i * (n + m)),
        _ => (per_unit_fwd(units), per_unit_bwd(units)),
    };
    let mut expect = vec![("serve_forward", serve_forward), ("serve_backward", serve_backward)];
    if config.method != Method::InfluenceCg {
        expect.push(("cg_matvecs", 0));
    }
    if config.strategy == Strategy::Lora {
        let passes = units * config.lora.fine_tune.epochs as u64 * scope.finetune_subset;
        expect.extend([("lora_finetunes", units), ("train_forward", passes), ("train_backward", passes)]);
    } else {
        expect.extend([("lora_finetunes", 0), ("train_forward", 0), ("train_backward", 0)]);
    }
    expect.push(("model_trainings", 0));
    let measured: BTreeMap<&str, u64> = ledger.counters().into_iter().collect();
    let checks = expect
        .into_iter()
        .map(|(name, expected)| LedgerCheck {
            counter: name.to_owned(),
            expected,
            measured: measured[name],
        })
        .collect();
    Ok(LedgerReport { checks })
}
