//! Single-model attribution: TRAK features and solve, influence functions
//! by conjugate gradients, Grad-Dot and Grad-Cos.

mod grads;
mod influence;
mod projection;
mod trak;

use serde::{Deserialize, Serialize};

use crate::artifact::{Artifact, ArtifactKind};
use crate::error::{shape, Result};
use crate::tensor::Tensor2;

pub use grads::{grad_cos, grad_dot, gradient_matrix, GradConfig};
pub use influence::{ihvp_solve, influence_cg, IfConfig};
pub use projection::{ProjectionKind, Projector};
pub use trak::{
    compute_q, default_lambda, project_grads, trak_aggregate, trak_from_parts, trak_single, trak_term,
    FeaturePack, TrakConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Trak,
    InfluenceCg,
    GradDot,
    GradCos,
    /// Brute-force leave-one-out retraining; an oracle, not an ensemble method.
    Loo,
}

/// Ensemble unit: member index and pass index (mask, adapter or
/// checkpoint). Aggregation sums units in this order.
pub type UnitId = (usize, usize);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributionMeta {
    pub config_digest: String,
    /// Units aggregated into the matrix, sorted.
    pub units: Vec<UnitId>,
    /// Test points whose CG solve stopped at the iteration cap.
    #[serde(default)]
    pub cg_unconverged: usize,
    /// Grad-Cos entries set to 0 because a gradient had zero norm.
    #[serde(default)]
    pub zero_norm_entries: usize,
}

/// Scores arranged `n_train × n_test`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMatrix {
    pub scores: Tensor2,
    pub method: Method,
    pub meta: AttributionMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixHeader {
    method: Method,
    n_train: usize,
    n_test: usize,
    meta: AttributionMeta,
}

impl AttributionMatrix {
    pub fn new(scores: Tensor2, method: Method, meta: AttributionMeta) -> Result<Self> {
        scores.ensure_finite("attribution scores")?;
        Ok(Self { scores, method, meta })
    }

    pub fn n_train(&self) -> usize {
        self.scores.rows()
    }

    pub fn n_test(&self) -> usize {
        self.scores.cols()
    }

    pub fn to_artifact(&self) -> Result<Artifact> {
        let header = MatrixHeader {
            method: self.method,
            n_train: self.n_train(),
            n_test: self.n_test(),
            meta: self.meta.clone(),
        };
        Artifact::new(
            ArtifactKind::Attribution,
            self.meta.config_digest.clone(),
            header,
            self.scores.data().to_vec(),
        )
    }

    pub fn from_artifact(a: &Artifact) -> Result<Self> {
        a.expect_kind(ArtifactKind::Attribution)?;
        let h: MatrixHeader = a.meta()?;
        let scores = Tensor2::new(h.n_train, h.n_test, a.payload.clone())?;
        Self::new(scores, h.method, h.meta)
    }

    /// Indices of the `k` highest-scoring training points for test `t`,
    /// ties broken by index.
    pub fn top_k(&self, t: usize, k: usize) -> Vec<usize> {
        let col = self.scores.column(t);
        let mut idx: Vec<usize> = (0..col.len()).collect();
        idx.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }
}

/// Ensemble averaging: elementwise mean, summed in unit order.
pub fn aggregate_average(mut matrices: Vec<AttributionMatrix>) -> Result<AttributionMatrix> {
    let first = matrices.first().ok_or_else(|| shape("nothing to aggregate"))?;
    let (shape0, method) = (first.scores.shape(), first.method);
    let config_digest = first.meta.config_digest.clone();
    if matrices.iter().any(|m| m.scores.shape() != shape0 || m.method != method) {
        return Err(shape("aggregated matrices differ in shape or method"));
    }
    matrices.sort_by(|a, b| a.meta.units.cmp(&b.meta.units));
    let count = matrices.len() as f64;
    let mut sum = Tensor2::zeros(shape0.0, shape0.1);
    let mut meta = AttributionMeta {
        config_digest,
        ..Default::default()
    };
    for m in &matrices {
        sum.add_assign(&m.scores)?;
        meta.units.extend(&m.meta.units);
        meta.cg_unconverged += m.meta.cg_unconverged;
        meta.zero_norm_entries += m.meta.zero_norm_entries;
    }
    meta.units.sort_unstable();
    sum.scale(1.0 / count);
    AttributionMatrix::new(sum, method, meta)
}
