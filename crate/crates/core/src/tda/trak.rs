use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::grads::{chunks, gradient_matrix};
use super::{AttributionMatrix, AttributionMeta, Method, ProjectionKind, Projector, UnitId};
use crate::artifact::{Artifact, ArtifactKind};
use crate::cost::{CostLedger, PassKind, Phase};
use crate::data::Dataset;
use crate::error::{argument, shape, Error, Result};
use crate::linalg::{psd_pinv_solve, Cholesky, PINV_RTOL};
use crate::nn::{forward, GradTarget, Mode, Network};
use crate::output::{q_values, OutputFnKind};
use crate::tensor::{gemm, Tensor2};

fn default_proj_dim() -> usize {
    2048
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrakConfig {
    /// Ignored by the identity projection, which keeps all `p` coordinates.
    #[serde(default = "default_proj_dim")]
    pub proj_dim: usize,
    #[serde(default)]
    pub projection: ProjectionKind,
    /// Gram regularizer; `None` selects [`default_lambda`].
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub output_fn: OutputFnKind,
}

impl Default for TrakConfig {
    fn default() -> Self {
        Self {
            proj_dim: default_proj_dim(),
            projection: ProjectionKind::Gaussian,
            lambda: None,
            output_fn: OutputFnKind::Margin,
        }
    }
}

impl TrakConfig {
    pub fn projector(&self, p: usize, seed: u64) -> Result<Projector> {
        let k = match self.projection {
            ProjectionKind::Identity => p,
            ProjectionKind::Gaussian => self.proj_dim,
        };
        Projector::new(self.projection, p, k, seed)
    }
}

/// Projected per-sample gradients, `n × k`.
pub fn project_grads(
    net: &Network,
    mode: Mode,
    target: GradTarget,
    data: &Dataset,
    kind: OutputFnKind,
    projector: &Projector,
    ledger: &mut CostLedger,
) -> Result<Tensor2> {
    let mut out = Tensor2::zeros(data.len(), projector.k);
    for range in chunks(data.len(), projector.p) {
        let g = gradient_matrix(net, mode, target, data, range.clone(), kind, ledger)?;
        let proj = projector.project(&g)?;
        for (i, s) in range.enumerate() {
            out.row_mut(s).copy_from_slice(proj.row(i));
        }
    }
    out.ensure_finite("projected gradients")?;
    Ok(out)
}

/// `1 − p(correct)` per sample from forward passes only.
pub fn compute_q(net: &Network, mode: Mode, data: &Dataset, ledger: &mut CostLedger) -> Result<Vec<f64>> {
    let r = data.rows_per_sample();
    let mut q = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(256) {
        let end = (start + 256).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let logits = forward(net, &data.inputs.select_rows(&idx), mode)?;
        q.extend(q_values(&logits, &data.targets[start * r..end * r], r));
    }
    ledger.record_pass(Phase::Serve, PassKind::Forward, data.len() as u64);
    Ok(q)
}

/// `1e-6 · trace(ΦᵀΦ) / k`.
pub fn default_lambda(phi: &Tensor2) -> f64 {
    1e-6 * phi.frobenius_sq() / phi.cols().max(1) as f64
}

/// TRAK intermediates of one ensemble unit.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePack {
    pub unit: UnitId,
    pub projection_seed: u64,
    pub proj_dim: usize,
    pub phi: Tensor2,
    pub phi_test: Tensor2,
    pub q: Vec<f64>,
    pub lambda: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PackHeader {
    unit: UnitId,
    projection_seed: u64,
    proj_dim: usize,
    n_train: usize,
    n_test: usize,
    lambda: f64,
}

impl FeaturePack {
    pub fn new(
        unit: UnitId,
        projection_seed: u64,
        phi: Tensor2,
        phi_test: Tensor2,
        q: Vec<f64>,
        lambda: Option<f64>,
    ) -> Result<Self> {
        if phi.cols() != phi_test.cols() {
            return Err(shape("train and test features differ in dimension"));
        }
        if q.len() != phi.rows() {
            return Err(shape(format!("{} Q entries for {} training points", q.len(), phi.rows())));
        }
        if q.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(argument("Q entries must lie in [0, 1]"));
        }
        phi.ensure_finite("Φ")?;
        phi_test.ensure_finite("φ")?;
        let lambda = lambda.unwrap_or_else(|| default_lambda(&phi));
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(argument(format!("λ = {lambda} must be finite and ≥ 0")));
        }
        Ok(Self {
            unit,
            projection_seed,
            proj_dim: phi.cols(),
            phi,
            phi_test,
            q,
            lambda,
        })
    }

    /// Features and Q from one model.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        net: &Network,
        mode: Mode,
        target: GradTarget,
        train: &Dataset,
        test: &Dataset,
        config: &TrakConfig,
        unit: UnitId,
        projection_seed: u64,
        ledger: &mut CostLedger,
    ) -> Result<Self> {
        let projector = config.projector(net.grad_len(target), projection_seed)?;
        let phi = project_grads(net, mode, target, train, config.output_fn, &projector, ledger)?;
        let phi_test = project_grads(net, mode, target, test, config.output_fn, &projector, ledger)?;
        let q = compute_q(net, mode, train, ledger)?;
        Self::new(unit, projection_seed, phi, phi_test, q, config.lambda)
    }

    pub fn to_artifact(&self, config_digest: &str) -> Result<Artifact> {
        let header = PackHeader {
            unit: self.unit,
            projection_seed: self.projection_seed,
            proj_dim: self.proj_dim,
            n_train: self.phi.rows(),
            n_test: self.phi_test.rows(),
            lambda: self.lambda,
        };
        let mut payload = self.phi.data().to_vec();
        payload.extend_from_slice(self.phi_test.data());
        payload.extend_from_slice(&self.q);
        Artifact::new(ArtifactKind::FeaturePack, config_digest, header, payload)
    }

    pub fn from_artifact(a: &Artifact) -> Result<Self> {
        a.expect_kind(ArtifactKind::FeaturePack)?;
        let h: PackHeader = a.meta()?;
        let (k, n, m) = (h.proj_dim, h.n_train, h.n_test);
        if a.payload.len() != n * k + m * k + n {
            return Err(shape("feature pack payload does not match its header"));
        }
        let (phi, rest) = a.payload.split_at(n * k);
        let (phi_test, q) = rest.split_at(m * k);
        Self::new(
            h.unit,
            h.projection_seed,
            Tensor2::new(n, k, phi.to_vec())?,
            Tensor2::new(m, k, phi_test.to_vec())?,
            q.to_vec(),
            Some(h.lambda),
        )
    }
}

fn spd_solve(a: &Tensor2, b: &Tensor2, lambda: f64) -> Result<Tensor2> {
    if lambda == 0.0 {
        psd_pinv_solve(a, b, PINV_RTOL)
    } else {
        Cholesky::new(a).map_err(not_spd)?.solve(b)
    }
}

fn not_spd(e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("TRAK Gram matrix: {m}; try a larger lambda")),
        e => e,
    }
}

/// `Φ (ΦᵀΦ + λI)⁻¹ φᵀ`, arranged `n_train × n_test`. When `k > n_train`
/// the equivalent `(ΦΦᵀ + λI)⁻¹ Φ φᵀ` is solved instead. At `λ = 0` the
/// inverse is the pseudo-inverse: softmax outputs are invariant to shifting
/// all logits, so model gradients never span the full parameter space.
pub fn trak_term(phi: &Tensor2, phi_test: &Tensor2, lambda: f64) -> Result<Tensor2> {
    let (n, k) = phi.shape();
    let m = phi_test.rows();
    if phi_test.cols() != k {
        return Err(shape("train and test features differ in dimension"));
    }
    if k <= n {
        let mut gram = vec![0.0; k * k];
        gemm(k, n, k, 1.0, phi.data(), true, phi.data(), false, 0.0, &mut gram);
        let mut gram = Tensor2::new(k, k, gram)?;
        (0..k).for_each(|i| gram.set(i, i, gram.get(i, i) + lambda));
        let x = spd_solve(&gram, &phi_test.transpose(), lambda)?;
        let mut s = vec![0.0; n * m];
        gemm(n, k, m, 1.0, phi.data(), false, x.data(), false, 0.0, &mut s);
        Tensor2::new(n, m, s)
    } else {
        let mut kern = vec![0.0; n * n];
        gemm(n, k, n, 1.0, phi.data(), false, phi.data(), true, 0.0, &mut kern);
        let mut kern = Tensor2::new(n, n, kern)?;
        (0..n).for_each(|i| kern.set(i, i, kern.get(i, i) + lambda));
        let mut b = vec![0.0; n * m];
        gemm(n, k, m, 1.0, phi.data(), false, phi_test.data(), true, 0.0, &mut b);
        spd_solve(&kern, &Tensor2::new(n, m, b)?, lambda)
    }
}

fn mean_in_unit_order<T>(mut items: Vec<(UnitId, T)>, add: impl Fn(&mut T, &T), scale: impl Fn(&mut T, f64)) -> Result<T>
where
    T: Clone,
{
    items.sort_by_key(|(u, _)| *u);
    let mut it = items.iter();
    let (_, first) = it.next().ok_or_else(|| shape("nothing to aggregate"))?;
    let mut acc = first.clone();
    for (_, v) in it {
        add(&mut acc, v);
    }
    scale(&mut acc, 1.0 / items.len() as f64);
    Ok(acc)
}

/// Averaged Q times averaged solve terms. Q and terms may come from
/// different unit sets (forward-only variant).
pub fn trak_from_parts(qs: Vec<(UnitId, Vec<f64>)>, terms: Vec<(UnitId, Tensor2)>) -> Result<AttributionMatrix> {
    let mut all: BTreeSet<UnitId> = qs.iter().map(|(u, _)| *u).collect();
    all.extend(terms.iter().map(|(u, _)| *u));
    let q = mean_in_unit_order(
        qs,
        |a, b| a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
        |a, s| a.iter_mut().for_each(|x| *x *= s),
    )?;
    let mut term = mean_in_unit_order(
        terms,
        |a, b| a.add_assign(b).expect("terms share a shape"),
        |a, s| a.scale(s),
    )?;
    if q.len() != term.rows() {
        return Err(shape("Q length differs from the number of training points"));
    }
    for (j, qj) in q.iter().enumerate() {
        term.row_mut(j).iter_mut().for_each(|v| *v *= qj);
    }
    let meta = AttributionMeta {
        units: all.into_iter().collect(),
        ..Default::default()
    };
    AttributionMatrix::new(term, Method::Trak, meta)
}

/// Ensemble TRAK over feature packs.
pub fn trak_aggregate(packs: &[FeaturePack]) -> Result<AttributionMatrix> {
    let first = packs.first().ok_or_else(|| shape("no feature packs"))?;
    let dims = (first.phi.rows(), first.phi_test.rows());
    if packs.iter().any(|p| (p.phi.rows(), p.phi_test.rows()) != dims) {
        return Err(shape("feature packs disagree on dataset sizes"));
    }
    let qs = packs.iter().map(|p| (p.unit, p.q.clone())).collect();
    let terms = packs
        .iter()
        .map(|p| Ok((p.unit, trak_term(&p.phi, &p.phi_test, p.lambda)?)))
        .collect::<Result<_>>()?;
    trak_from_parts(qs, terms)
}

pub fn trak_single(pack: &FeaturePack) -> Result<AttributionMatrix> {
    trak_aggregate(std::slice::from_ref(pack))
}
