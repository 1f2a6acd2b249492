//! Scalar model-output functions on logits, plus the training loss.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor2;

/// Target value for output rows that carry no label (e.g. the first
/// position of a copy-task sequence).
pub const NO_TARGET: usize = usize::MAX;

/// Scalar function of a sample's logits that attribution differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFnKind {
    /// Cross-entropy of the correct class.
    Loss,
    /// Log-probability of the correct class.
    LogLikelihood,
    /// `log p − log(1 − p)` of the correct class.
    #[default]
    Margin,
}

fn max_of(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(f64::NEG_INFINITY, f64::max)
}

fn logsumexp(z: &[f64]) -> f64 {
    let m = max_of(z.iter().copied());
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn logsumexp_except(z: &[f64], y: usize) -> f64 {
    let m = max_of(z.iter().enumerate().filter(|&(c, _)| c != y).map(|(_, &v)| v));
    let s: f64 = z
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != y)
        .map(|(_, v)| (v - m).exp())
        .sum();
    m + s.ln()
}

/// Softmax probabilities of one logit row.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = logsumexp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

impl OutputFnKind {
    /// Output value for one logit row with correct class `y`.
    pub fn value(self, z: &[f64], y: usize) -> f64 {
        match self {
            OutputFnKind::Loss => logsumexp(z) - z[y],
            OutputFnKind::LogLikelihood => z[y] - logsumexp(z),
            OutputFnKind::Margin => z[y] - logsumexp_except(z, y),
        }
    }

    /// Derivative of [`value`](Self::value) with respect to the logits.
    pub fn grad(self, z: &[f64], y: usize, out: &mut [f64]) {
        match self {
            OutputFnKind::Loss | OutputFnKind::LogLikelihood => {
                let sign = if self == OutputFnKind::Loss { 1.0 } else { -1.0 };
                let lse = logsumexp(z);
                for (o, v) in out.iter_mut().zip(z) {
                    *o = sign * (v - lse).exp();
                }
                out[y] -= sign;
            }
            OutputFnKind::Margin => {
                let lse = logsumexp_except(z, y);
                for (o, v) in out.iter_mut().zip(z) {
                    *o = -(v - lse).exp();
                }
                out[y] = 1.0;
            }
        }
    }
}

/// Per-sample outputs: row values summed over each sample's labelled rows.
pub fn sample_outputs(
    kind: OutputFnKind,
    logits: &Tensor2,
    targets: &[usize],
    rows_per_sample: usize,
) -> Vec<f64> {
    debug_assert_eq!(logits.rows(), targets.len());
    let mut out = vec![0.0; logits.rows() / rows_per_sample];
    for (r, &y) in targets.iter().enumerate() {
        if y != NO_TARGET {
            out[r / rows_per_sample] += kind.value(logits.row(r), y);
        }
    }
    out
}

/// Cotangent on the logits whose VJP yields the output gradient.
pub fn output_cotangent(kind: OutputFnKind, logits: &Tensor2, targets: &[usize]) -> Tensor2 {
    let mut d = Tensor2::zeros(logits.rows(), logits.cols());
    for (r, &y) in targets.iter().enumerate() {
        if y != NO_TARGET {
            kind.grad(logits.row(r), y, d.row_mut(r));
        }
    }
    d
}

/// `1 − p(correct)` averaged over each sample's labelled rows.
pub fn q_values(logits: &Tensor2, targets: &[usize], rows_per_sample: usize) -> Vec<f64> {
    let n = logits.rows() / rows_per_sample;
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for (r, &y) in targets.iter().enumerate() {
        if y != NO_TARGET {
            let z = logits.row(r);
            let p = (z[y] - logsumexp(z)).exp();
            sum[r / rows_per_sample] += 1.0 - p;
            count[r / rows_per_sample] += 1;
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { 0.0 } else { (s / c as f64).clamp(0.0, 1.0) })
        .collect()
}

/// Mean cross-entropy over labelled rows and its gradient on the logits.
pub fn mean_cross_entropy(logits: &Tensor2, targets: &[usize]) -> (f64, Tensor2) {
    let labelled = targets.iter().filter(|&&y| y != NO_TARGET).count().max(1) as f64;
    let mut d = output_cotangent(OutputFnKind::Loss, logits, targets);
    d.scale(1.0 / labelled);
    let loss = targets
        .iter()
        .enumerate()
        .filter(|&(_, &y)| y != NO_TARGET)
        .map(|(r, &y)| OutputFnKind::Loss.value(logits.row(r), y))
        .sum::<f64>()
        / labelled;
    (loss, d)
}

/// Cross-entropy Hessian with respect to the logits applied row-wise to
/// `u`: `p ⊙ u − p (pᵀu)`. Rows without a target contribute nothing.
pub fn ce_hessian_apply(logits: &Tensor2, targets: &[usize], u: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(u.rows(), u.cols());
    for (r, &y) in targets.iter().enumerate() {
        if y == NO_TARGET {
            continue;
        }
        let p = softmax(logits.row(r));
        let ur = u.row(r);
        let pu: f64 = p.iter().zip(ur).map(|(a, b)| a * b).sum();
        for ((o, pc), uc) in out.row_mut(r).iter_mut().zip(&p).zip(ur) {
            *o = pc * (uc - pu);
        }
    }
    out
}
