//! Rank correlation, the linear datamodeling score and the leave-one-out
//! oracle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{digest_json, Artifact, ArtifactKind};
use crate::cost::CostLedger;
use crate::data::Dataset;
use crate::error::{argument, shape, Error, Result};
use crate::model::{ModelSpec, ParamVector};
use crate::nn::{forward, Mode, Network};
use crate::output::{sample_outputs, OutputFnKind};
use crate::rng::{self, tag};
use crate::tda::{AttributionMatrix, AttributionMeta, Method};
use crate::tensor::Tensor2;
use crate::training::{sample_subset, train_on_subset, TrainConfig};

/// Average ranks starting at 1; tied values share the mean of their ranks.
pub fn midranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        idx[i..=j].iter().for_each(|&k| ranks[k] = r);
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman correlation with a flag that is set when either input is
/// constant, in which case the value is 0.
pub fn spearman_flagged(x: &[f64], y: &[f64]) -> Result<(f64, bool)> {
    if x.len() != y.len() {
        return Err(shape(format!("spearman: lengths {} and {} differ", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(argument("spearman needs at least two observations"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(argument("spearman inputs must be finite"));
    }
    Ok(match pearson(&midranks(x), &midranks(y)) {
        Some(r) => (r, false),
        None => (0.0, true),
    })
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    spearman_flagged(x, y).map(|(r, _)| r)
}

/// Attribution-based output prediction: the sum of `tau` over `subset`.
pub fn g_tau(tau: &[f64], subset: &[usize]) -> Result<f64> {
    subset.iter().try_fold(0.0, |acc, &i| {
        tau.get(i)
            .map(|v| acc + v)
            .ok_or_else(|| argument(format!("subset index {i} out of range for {} scores", tau.len())))
    })
}

/// Outputs of models retrained on random subsets, for LDS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdsGroundTruth {
    pub subsets: Vec<Vec<usize>>,
    /// `m × n_test`
    pub outputs: Tensor2,
    pub alpha: f64,
    pub m: usize,
    pub seed: u64,
    pub output_fn: OutputFnKind,
    /// Digest of the train and test datasets.
    pub dataset_digest: String,
    /// Digest of the retraining configuration.
    pub config_digest: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthHeader {
    subsets: Vec<Vec<usize>>,
    n_test: usize,
    alpha: f64,
    m: usize,
    seed: u64,
    output_fn: OutputFnKind,
    dataset_digest: String,
}

/// Digest tying artifacts to the exact train/test data.
pub fn dataset_pair_digest(train: &Dataset, test: &Dataset) -> String {
    crate::artifact::digest_bytes(format!("{}:{}", train.digest(), test.digest()).as_bytes())
}

/// Per-sample outputs of a trained model on `data`.
pub fn model_outputs(spec: &ModelSpec, params: &ParamVector, data: &Dataset, kind: OutputFnKind) -> Result<Vec<f64>> {
    let net = Network::new(spec, params, &[])?;
    let logits = forward(&net, &data.inputs, Mode::Eval)?;
    Ok(sample_outputs(kind, &logits, &data.targets, data.rows_per_sample()))
}

impl LdsGroundTruth {
    pub fn n_test(&self) -> usize {
        self.outputs.cols()
    }

    pub fn to_artifact(&self) -> Result<Artifact> {
        let header = GroundTruthHeader {
            subsets: self.subsets.clone(),
            n_test: self.n_test(),
            alpha: self.alpha,
            m: self.m,
            seed: self.seed,
            output_fn: self.output_fn,
            dataset_digest: self.dataset_digest.clone(),
        };
        Artifact::new(
            ArtifactKind::GroundTruth,
            self.config_digest.clone(),
            header,
            self.outputs.data().to_vec(),
        )
    }

    pub fn from_artifact(a: &Artifact) -> Result<Self> {
        a.expect_kind(ArtifactKind::GroundTruth)?;
        let h: GroundTruthHeader = a.meta()?;
        if h.subsets.len() != h.m {
            return Err(shape("ground truth lists a different number of subsets than m"));
        }
        Ok(Self {
            outputs: Tensor2::new(h.m, h.n_test, a.payload.clone())?,
            subsets: h.subsets,
            alpha: h.alpha,
            m: h.m,
            seed: h.seed,
            output_fn: h.output_fn,
            dataset_digest: h.dataset_digest,
            config_digest: a.header.config_digest.clone(),
        })
    }
}

/// Config digest recorded by [`build_lds_ground_truth`] for these settings.
pub fn ground_truth_digest(
    spec: &ModelSpec,
    retrain: &TrainConfig,
    m: usize,
    alpha: f64,
    seed: u64,
    output_fn: OutputFnKind,
) -> Result<String> {
    digest_json(&(spec, retrain, m, alpha, seed, output_fn))
}

/// Retrain one model per random `⌊α·n⌋` subset and record its test outputs.
/// Subset `j` and its initialization are keyed by `(seed, j)`.
#[allow(clippy::too_many_arguments)]
pub fn build_lds_ground_truth(
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    m: usize,
    alpha: f64,
    retrain: &TrainConfig,
    output_fn: OutputFnKind,
    seed: u64,
    ledger: &mut CostLedger,
) -> Result<LdsGroundTruth> {
    if m < 2 {
        return Err(argument(format!("LDS needs m ≥ 2 subsets, got {m}")));
    }
    retrain.validate()?;
    let jobs: Vec<(Vec<usize>, Vec<f64>, CostLedger)> = (0..m)
        .into_par_iter()
        .map(|j| {
            let key = rng::derive(seed, &[tag::GROUND_TRUTH, j as u64]);
            let subset = sample_subset(train.len(), alpha, key)?;
            let mut l = CostLedger::new();
            let (params, _, _) = train_on_subset(spec, train, &subset, retrain, key, &mut l)
                .map_err(|e| e.context(format!("retraining on ground-truth subset {j}")))?;
            let out = model_outputs(spec, &params, test, output_fn)?;
            Ok((subset, out, l))
        })
        .collect::<Result<_>>()?;
    let mut outputs = Tensor2::zeros(m, test.len());
    let mut subsets = Vec::with_capacity(m);
    for (j, (s, out, l)) in jobs.into_iter().enumerate() {
        outputs.row_mut(j).copy_from_slice(&out);
        subsets.push(s);
        ledger.merge(&l);
    }
    outputs.ensure_finite("ground-truth outputs")?;
    let config_digest = ground_truth_digest(spec, retrain, m, alpha, seed, output_fn)?;
    Ok(LdsGroundTruth {
        subsets,
        outputs,
        alpha,
        m,
        seed,
        output_fn,
        dataset_digest: dataset_pair_digest(train, test),
        config_digest,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdsReport {
    pub per_test_lds: Vec<f64>,
    pub mean_lds: f64,
    /// Test points whose prediction or truth series was constant.
    pub constant_tests: Vec<usize>,
    pub m: usize,
    pub alpha: f64,
    pub seed: u64,
}

/// Per test point, Spearman between retrained outputs and `g_tau` over the
/// ground-truth subsets.
pub fn lds(tau: &AttributionMatrix, gt: &LdsGroundTruth) -> Result<LdsReport> {
    if tau.n_test() != gt.n_test() {
        return Err(shape(format!(
            "attribution has {} test points, ground truth {}",
            tau.n_test(),
            gt.n_test()
        )));
    }
    if gt.subsets.iter().flatten().any(|&i| i >= tau.n_train()) {
        return Err(shape("ground-truth subsets index past the attribution's training set"));
    }
    let per_test: Vec<(f64, bool)> = (0..tau.n_test())
        .into_par_iter()
        .map(|t| {
            let col = tau.scores.column(t);
            let preds = gt.subsets.iter().map(|s| g_tau(&col, s)).collect::<Result<Vec<_>>>()?;
            spearman_flagged(&gt.outputs.column(t), &preds)
        })
        .collect::<Result<_>>()?;
    let per_test_lds: Vec<f64> = per_test.iter().map(|p| p.0).collect();
    let constant_tests = per_test.iter().enumerate().filter(|(_, p)| p.1).map(|(t, _)| t).collect();
    let mean_lds = per_test_lds.iter().sum::<f64>() / per_test_lds.len().max(1) as f64;
    Ok(LdsReport {
        per_test_lds,
        mean_lds,
        constant_tests,
        m: gt.m,
        alpha: gt.alpha,
        seed: gt.seed,
    })
}

/// Largest training set the leave-one-out oracle accepts.
pub const LOO_MAX_TRAIN: usize = 200;

/// `scores[j, t] = f_S(x_t) − f_{S∖{j}}(x_t)`, every model trained from the
/// initialization keyed by `init_seed`. Meant for small convex models
/// trained full-batch to convergence.
pub fn loo_oracle(
    spec: &ModelSpec,
    train: &Dataset,
    test: &Dataset,
    retrain: &TrainConfig,
    output_fn: OutputFnKind,
    init_seed: u64,
    ledger: &mut CostLedger,
) -> Result<AttributionMatrix> {
    let n = train.len();
    if n > LOO_MAX_TRAIN {
        return Err(argument(format!(
            "leave-one-out oracle is capped at {LOO_MAX_TRAIN} training points, got {n}"
        )));
    }
    if n == 0 {
        return Err(argument("leave-one-out oracle needs training data"));
    }
    retrain.validate()?;
    let fit = |subset: &[usize]| -> Result<(Vec<f64>, CostLedger)> {
        let mut l = CostLedger::new();
        let (params, _, _) = train_on_subset(spec, train, subset, retrain, init_seed, &mut l)?;
        Ok((model_outputs(spec, &params, test, output_fn)?, l))
    };
    let all: Vec<usize> = (0..n).collect();
    let (full, l0) = fit(&all)?;
    let rows: Vec<(Vec<f64>, CostLedger)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let rest: Vec<usize> = all.iter().copied().filter(|&i| i != j).collect();
            fit(&rest).map_err(|e| e.context(format!("retraining without training point {j}")))
        })
        .collect::<Result<_>>()?;
    ledger.merge(&l0);
    let mut scores = Tensor2::zeros(n, test.len());
    for (j, (out, l)) in rows.iter().enumerate() {
        ledger.merge(l);
        for (t, v) in out.iter().enumerate() {
            scores.set(j, t, full[t] - v);
        }
    }
    let meta = AttributionMeta {
        config_digest: digest_json(&(spec, retrain, output_fn, init_seed))?,
        units: vec![(0, 0)],
        ..Default::default()
    };
    AttributionMatrix::new(scores, Method::Loo, meta).map_err(|e: Error| e.context("leave-one-out scores"))
}
