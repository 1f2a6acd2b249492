use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{argument, shape, Result};
use crate::rng::{self, tag};
use crate::tensor::{gemm, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    /// Entries drawn from N(0, 1/k), one keyed stream per column.
    #[default]
    Gaussian,
    /// `P = I`; requires `k = p`. A test hook.
    Identity,
}

/// Bytes of `P` held at once.
const BLOCK_BYTES: usize = 32 << 20;

/// A `p × k` random projection that is regenerated block by block.
#[derive(Debug, Clone, Copy)]
pub struct Projector {
    pub kind: ProjectionKind,
    pub p: usize,
    pub k: usize,
    pub seed: u64,
}

impl Projector {
    pub fn new(kind: ProjectionKind, p: usize, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(argument("projection dimension must be at least 1"));
        }
        if kind == ProjectionKind::Identity && k != p {
            return Err(argument(format!("identity projection needs k = p = {p}, got {k}")));
        }
        Ok(Self { kind, p, k, seed })
    }

    /// Columns `c0..c1` of `P`, row-major `p × (c1 − c0)`.
    pub fn block(&self, c0: usize, c1: usize) -> Vec<f64> {
        let w = c1 - c0;
        let mut out = vec![0.0; self.p * w];
        let scale = 1.0 / (self.k as f64).sqrt();
        for (c, j) in (c0..c1).enumerate() {
            match self.kind {
                ProjectionKind::Identity => out[j * w + c] = 1.0,
                ProjectionKind::Gaussian => {
                    let mut s = rng::stream(self.seed, &[tag::PROJECTION, j as u64]);
                    for r in 0..self.p {
                        let z: f64 = StandardNormal.sample(&mut s);
                        out[r * w + c] = z * scale;
                    }
                }
            }
        }
        out
    }

    /// `g · P` for a `rows × p` gradient block.
    pub fn project(&self, g: &Tensor2) -> Result<Tensor2> {
        if g.cols() != self.p {
            return Err(shape(format!("gradients have {} columns, projection expects {}", g.cols(), self.p)));
        }
        if self.kind == ProjectionKind::Identity {
            return Ok(g.clone());
        }
        let rows = g.rows();
        let width = (BLOCK_BYTES / (8 * self.p.max(1))).clamp(1, self.k);
        let mut out = Tensor2::zeros(rows, self.k);
        let mut tmp = Vec::new();
        for c0 in (0..self.k).step_by(width) {
            let c1 = (c0 + width).min(self.k);
            let w = c1 - c0;
            let block = self.block(c0, c1);
            tmp.clear();
            tmp.resize(rows * w, 0.0);
            gemm(rows, self.p, w, 1.0, g.data(), false, &block, false, 0.0, &mut tmp);
            for r in 0..rows {
                out.row_mut(r)[c0..c1].copy_from_slice(&tmp[r * w..(r + 1) * w]);
            }
        }
        Ok(out)
    }
}
