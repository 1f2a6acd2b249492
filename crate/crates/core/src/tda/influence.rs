use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grads::{chunks, gradient_matrix};
use super::{AttributionMatrix, AttributionMeta, Method};
use crate::cost::{CostLedger, PassKind, Phase};
use crate::data::Dataset;
use crate::error::{argument, Result};
use crate::linalg::conjugate_gradient;
use crate::nn::{backward, forward_tape, jvp, GradTarget, Mode, Network, Tape};
use crate::output::{ce_hessian_apply, OutputFnKind, NO_TARGET};
use crate::tensor::{gemm, Tensor2};

fn default_damping() -> f64 {
    1e-3
}
fn default_max_iters() -> usize {
    100
}
fn default_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IfConfig {
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub output_fn: OutputFnKind,
}

impl Default for IfConfig {
    fn default() -> Self {
        Self {
            damping: default_damping(),
            max_iters: default_max_iters(),
            tol: default_tol(),
            output_fn: OutputFnKind::Margin,
        }
    }
}

/// Samples evaluated together when applying the Gauss–Newton matrix.
const GN_CHUNK: usize = 256;

struct GnChunk {
    tape: Tape,
    logits: Tensor2,
    targets: Vec<usize>,
}

/// Gauss–Newton matrix of the mean training cross-entropy, applied without
/// forming it: `v ↦ (1/R) Σ_r J_rᵀ H_r J_r v`, with `H_r` the softmax
/// cross-entropy Hessian of output row `r` and `R` the labelled rows.
struct GaussNewton<'n, 'a> {
    net: &'n Network<'a>,
    target: GradTarget,
    chunks: Vec<GnChunk>,
    labelled: f64,
}

impl<'n, 'a> GaussNewton<'n, 'a> {
    fn new(net: &'n Network<'a>, mode: Mode, target: GradTarget, train: &Dataset, ledger: &mut CostLedger) -> Result<Self> {
        let r = train.rows_per_sample();
        let chunks = (0..train.len())
            .step_by(GN_CHUNK)
            .map(|s| {
                let e = (s + GN_CHUNK).min(train.len());
                let idx: Vec<usize> = (s..e).collect();
                let (logits, tape) = forward_tape(net, &train.inputs.select_rows(&idx), mode)?;
                Ok(GnChunk {
                    tape,
                    logits,
                    targets: train.targets[s * r..e * r].to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ledger.record_pass(Phase::Serve, PassKind::Forward, train.len() as u64);
        let labelled = train.targets.iter().filter(|&&y| y != NO_TARGET).count().max(1) as f64;
        Ok(Self {
            net,
            target,
            chunks,
            labelled,
        })
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let parts: Vec<Vec<f64>> = self
            .chunks
            .par_iter()
            .map(|c| {
                let u = jvp(self.net, &c.tape, self.target, v)?;
                let w = ce_hessian_apply(&c.logits, &c.targets, &u);
                let mut g = vec![0.0; v.len()];
                backward(self.net, &c.tape, &w, self.target, &mut g)?;
                Ok(g)
            })
            .collect::<Result<_>>()?;
        let mut out = vec![0.0; v.len()];
        for p in &parts {
            out.iter_mut().zip(p).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= self.labelled);
        Ok(out)
    }
}

/// Solve `A v_t = g_t` for every row of `g_test` by CG. Returns the
/// solutions as rows and the number of solves that hit `max_iters`.
pub fn ihvp_solve(
    mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    g_test: &Tensor2,
    max_iters: usize,
    tol: f64,
) -> Result<(Tensor2, usize)> {
    let mut v = Tensor2::zeros(g_test.rows(), g_test.cols());
    let mut unconverged = 0;
    for t in 0..g_test.rows() {
        let out = conjugate_gradient(&mut apply, g_test.row(t), max_iters, tol)?;
        if !out.converged {
            log::warn!(
                "CG for test point {t} stopped after {} iterations (residual {:e})",
                out.iterations,
                out.residual_norm
            );
            unconverged += 1;
        }
        v.row_mut(t).copy_from_slice(&out.x);
    }
    Ok((v, unconverged))
}

/// Influence scores `g(x_j)ᵀ (H + damping·I)⁻¹ g(x_t)` with the Gauss–Newton
/// approximation of the training-loss Hessian.
#[allow(clippy::too_many_arguments)]
pub fn influence_cg(
    net: &Network,
    mode: Mode,
    target: GradTarget,
    train: &Dataset,
    test: &Dataset,
    config: &IfConfig,
    ledger: &mut CostLedger,
) -> Result<AttributionMatrix> {
    if !(config.damping >= 0.0 && config.damping.is_finite()) {
        return Err(argument(format!("damping {} must be finite and ≥ 0", config.damping)));
    }
    let kind = config.output_fn;
    let gn = GaussNewton::new(net, mode, target, train, ledger)?;
    let g_test = gradient_matrix(net, mode, target, test, 0..test.len(), kind, ledger)?;
    let mut matvecs = 0u64;
    let (v, unconverged) = ihvp_solve(
        |x| {
            matvecs += 1;
            let mut y = gn.apply(x)?;
            y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += config.damping * xi);
            Ok(y)
        },
        &g_test,
        config.max_iters,
        config.tol,
    )?;
    let n = train.len() as u64;
    ledger.record_pass(Phase::Serve, PassKind::Forward, matvecs * n);
    ledger.record_pass(Phase::Serve, PassKind::Backward, matvecs * n);
    ledger.cg_matvecs += matvecs;

    let p = net.grad_len(target);
    let n_test = test.len();
    let mut scores = Tensor2::zeros(train.len(), n_test);
    for range in chunks(train.len(), p) {
        let g = gradient_matrix(net, mode, target, train, range.clone(), kind, ledger)?;
        let mut block = vec![0.0; range.len() * n_test];
        gemm(range.len(), p, n_test, 1.0, g.data(), false, v.data(), true, 0.0, &mut block);
        for (i, j) in range.enumerate() {
            scores.row_mut(j).copy_from_slice(&block[i * n_test..(i + 1) * n_test]);
        }
    }
    let meta = AttributionMeta {
        cg_unconverged: unconverged,
        ..Default::default()
    };
    AttributionMatrix::new(scores, Method::InfluenceCg, meta)
}
