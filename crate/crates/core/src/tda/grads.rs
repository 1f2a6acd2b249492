use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AttributionMatrix, AttributionMeta, Method};
use crate::cost::{CostLedger, Phase};
use crate::data::Dataset;
use crate::error::Result;
use crate::nn::{per_sample_grad, GradTarget, Mode, Network};
use crate::output::OutputFnKind;
use crate::tensor::{gemm, norm, Tensor2};

/// Bytes of per-sample gradients held at once.
const CHUNK_BYTES: usize = 384 << 20;

pub(crate) fn chunk_rows(p: usize) -> usize {
    (CHUNK_BYTES / (8 * p.max(1))).max(1)
}

/// Yields `0..n` in chunks sized to the gradient memory budget.
pub(crate) fn chunks(n: usize, p: usize) -> impl Iterator<Item = Range<usize>> {
    let step = chunk_rows(p);
    (0..n).step_by(step).map(move |s| s..(s + step).min(n))
}

/// Per-sample output gradients of samples `range`, one row each.
/// Samples are processed in parallel; the result does not depend on the
/// thread count.
pub fn gradient_matrix(
    net: &Network,
    mode: Mode,
    target: GradTarget,
    data: &Dataset,
    range: Range<usize>,
    kind: OutputFnKind,
    ledger: &mut CostLedger,
) -> Result<Tensor2> {
    let r = data.rows_per_sample();
    let rows: Vec<Vec<f64>> = range
        .clone()
        .into_par_iter()
        .map(|s| {
            let x = data.inputs.select_rows(&[s]);
            per_sample_grad(net, &x, &data.targets[s * r..(s + 1) * r], kind, mode, target)
        })
        .collect::<Result<_>>()?;
    ledger.record_grad(Phase::Serve, range.len() as u64);
    let p = net.grad_len(target);
    let mut out = Tensor2::zeros(rows.len(), p);
    for (i, g) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(g);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradConfig {
    #[serde(default)]
    pub output_fn: OutputFnKind,
}

fn similarity(
    net: &Network,
    mode: Mode,
    target: GradTarget,
    train: &Dataset,
    test: &Dataset,
    kind: OutputFnKind,
    cosine: bool,
    ledger: &mut CostLedger,
) -> Result<AttributionMatrix> {
    let p = net.grad_len(target);
    let g_test = gradient_matrix(net, mode, target, test, 0..test.len(), kind, ledger)?;
    let test_norms: Vec<f64> = (0..test.len()).map(|t| norm(g_test.row(t))).collect();
    let n_test = test.len();
    let mut scores = Tensor2::zeros(train.len(), n_test);
    let mut zero_norm = 0;
    for range in chunks(train.len(), p) {
        let g = gradient_matrix(net, mode, target, train, range.clone(), kind, ledger)?;
        let mut block = vec![0.0; range.len() * n_test];
        gemm(range.len(), p, n_test, 1.0, g.data(), false, g_test.data(), true, 0.0, &mut block);
        for (i, j) in range.enumerate() {
            let row = &mut block[i * n_test..(i + 1) * n_test];
            if cosine {
                let nj = norm(g.row(i));
                for (v, &nt) in row.iter_mut().zip(&test_norms) {
                    if nj == 0.0 || nt == 0.0 {
                        *v = 0.0;
                        zero_norm += 1;
                    } else {
                        *v = (*v / (nj * nt)).clamp(-1.0, 1.0);
                    }
                }
            }
            scores.row_mut(j).copy_from_slice(row);
        }
    }
    let method = if cosine { Method::GradCos } else { Method::GradDot };
    let meta = AttributionMeta {
        zero_norm_entries: zero_norm,
        ..Default::default()
    };
    AttributionMatrix::new(scores, method, meta)
}

/// `scores[j, t] = g(x_j)ᵀ g(x_t)`.
pub fn grad_dot(
    net: &Network,
    mode: Mode,
    target: GradTarget,
    train: &Dataset,
    test: &Dataset,
    config: &GradConfig,
    ledger: &mut CostLedger,
) -> Result<AttributionMatrix> {
    similarity(net, mode, target, train, test, config.output_fn, false, ledger)
}

/// Cosine similarity of gradients; zero-norm pairs score 0 and are counted.
pub fn grad_cos(
    net: &Network,
    mode: Mode,
    target: GradTarget,
    train: &Dataset,
    test: &Dataset,
    config: &GradConfig,
    ledger: &mut CostLedger,
) -> Result<AttributionMatrix> {
    similarity(net, mode, target, train, test, config.output_fn, true, ledger)
}
