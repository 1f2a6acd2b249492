//! Primitive layer operations with their reverse (VJP) and forward-mode
//! (JVP) derivatives. All activations are row-major `rows × width`.

use crate::lora::LoraAdapter;
use crate::model::LAYER_NORM_EPS;
use crate::tensor::{gemm, Tensor2};

pub(crate) struct LinearParams<'a> {
    pub w: &'a [f64],
    pub b: &'a [f64],
    pub in_dim: usize,
    pub out_dim: usize,
}

pub(crate) struct LinearCache {
    pub x: Tensor2,
    /// `x Aᵀ` when an adapter is attached.
    pub u: Option<Tensor2>,
}

fn add_row_vector(z: &mut Tensor2, v: &[f64]) {
    let cols = z.cols();
    for row in z.data_mut().chunks_exact_mut(cols) {
        row.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
}

fn add_column_sums(dst: &mut [f64], m: &Tensor2) {
    for row in m.data().chunks_exact(m.cols()) {
        dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
}

/// Split a flattened adapter segment into (A, B, bias delta).
fn lora_parts<T>(seg: T, lora: &LoraAdapter) -> (T, T, T)
where
    T: SplitAt,
{
    let na = lora.a.data().len();
    let nb = lora.b.data().len();
    let (a, rest) = seg.split(na);
    let (b, bd) = rest.split(nb);
    (a, b, bd)
}

pub(crate) trait SplitAt: Sized {
    fn split(self, at: usize) -> (Self, Self);
}

impl SplitAt for &[f64] {
    fn split(self, at: usize) -> (Self, Self) {
        self.split_at(at)
    }
}

impl SplitAt for &mut [f64] {
    fn split(self, at: usize) -> (Self, Self) {
        self.split_at_mut(at)
    }
}

pub(crate) fn linear_forward(
    x: Tensor2,
    p: &LinearParams,
    lora: Option<&LoraAdapter>,
) -> (Tensor2, LinearCache) {
    let rows = x.rows();
    let mut z = Tensor2::zeros(rows, p.out_dim);
    gemm(rows, p.in_dim, p.out_dim, 1.0, x.data(), false, p.w, true, 0.0, z.data_mut());
    add_row_vector(&mut z, p.b);
    let u = lora.map(|l| {
        let r = l.rank;
        let mut u = Tensor2::zeros(rows, r);
        gemm(rows, p.in_dim, r, 1.0, x.data(), false, l.a.data(), true, 0.0, u.data_mut());
        gemm(rows, r, p.out_dim, l.scaling(), u.data(), false, l.b.data(), true, 1.0, z.data_mut());
        if let Some(bd) = &l.bias_delta {
            add_row_vector(&mut z, bd);
        }
        u
    });
    (z, LinearCache { x, u })
}

/// Accumulates parameter gradients into `base` (`[dW, db]`) and/or `lora`
/// (`[dA, dB, dbias]`) and returns `dx` when requested.
pub(crate) fn linear_backward(
    cache: &LinearCache,
    dz: &Tensor2,
    p: &LinearParams,
    lora: Option<&LoraAdapter>,
    base: Option<&mut [f64]>,
    lora_grad: Option<&mut [f64]>,
    need_dx: bool,
) -> Option<Tensor2> {
    let rows = dz.rows();
    let (inp, out) = (p.in_dim, p.out_dim);
    if let Some(g) = base {
        let (dw, db) = g.split_at_mut(out * inp);
        gemm(out, rows, inp, 1.0, dz.data(), true, cache.x.data(), false, 1.0, dw);
        add_column_sums(db, dz);
    }
    let mut dx = need_dx.then(|| {
        let mut dx = Tensor2::zeros(rows, inp);
        gemm(rows, out, inp, 1.0, dz.data(), false, p.w, false, 0.0, dx.data_mut());
        dx
    });
    if let Some(l) = lora {
        let r = l.rank;
        let s = l.scaling();
        let mut g = Tensor2::zeros(rows, r);
        gemm(rows, out, r, 1.0, dz.data(), false, l.b.data(), false, 0.0, g.data_mut());
        if let Some(dx) = dx.as_mut() {
            gemm(rows, r, inp, s, g.data(), false, l.a.data(), false, 1.0, dx.data_mut());
        }
        if let Some(seg) = lora_grad {
            let u = cache.u.as_ref().expect("adapter cache present");
            let (da, dbm, dbd) = lora_parts(seg, l);
            gemm(r, rows, inp, s, g.data(), true, cache.x.data(), false, 1.0, da);
            gemm(out, rows, r, s, dz.data(), true, u.data(), false, 1.0, dbm);
            if l.bias_delta.is_some() {
                add_column_sums(dbd, dz);
            }
        }
    }
    dx
}

pub(crate) fn linear_jvp(
    cache: &LinearCache,
    dx: Option<&Tensor2>,
    p: &LinearParams,
    lora: Option<&LoraAdapter>,
    base_tangent: Option<&[f64]>,
    lora_tangent: Option<&[f64]>,
) -> Tensor2 {
    let rows = cache.x.rows();
    let (inp, out) = (p.in_dim, p.out_dim);
    let mut dz = Tensor2::zeros(rows, out);
    if let Some(dx) = dx {
        gemm(rows, inp, out, 1.0, dx.data(), false, p.w, true, 1.0, dz.data_mut());
    }
    if let Some(t) = base_tangent {
        let (tw, tb) = t.split_at(out * inp);
        gemm(rows, inp, out, 1.0, cache.x.data(), false, tw, true, 1.0, dz.data_mut());
        add_row_vector(&mut dz, tb);
    }
    if let Some(l) = lora {
        let r = l.rank;
        let s = l.scaling();
        let mut du = Tensor2::zeros(rows, r);
        if let Some(dx) = dx {
            gemm(rows, inp, r, 1.0, dx.data(), false, l.a.data(), true, 1.0, du.data_mut());
        }
        let parts = lora_tangent.map(|t| lora_parts(t, l));
        if let Some((ta, _, _)) = parts {
            gemm(rows, inp, r, 1.0, cache.x.data(), false, ta, true, 1.0, du.data_mut());
        }
        gemm(rows, r, out, s, du.data(), false, l.b.data(), true, 1.0, dz.data_mut());
        if let Some((_, tbm, tbd)) = parts {
            let u = cache.u.as_ref().expect("adapter cache present");
            gemm(rows, r, out, s, u.data(), false, tbm, true, 1.0, dz.data_mut());
            if l.bias_delta.is_some() {
                add_row_vector(&mut dz, tbd);
            }
        }
    }
    dz
}

/// Returns the activation and the 0/1 derivative pattern.
pub(crate) fn relu_forward(mut z: Tensor2) -> (Tensor2, Vec<f64>) {
    let active: Vec<f64> = z
        .data()
        .iter()
        .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
        .collect();
    z.data_mut().iter_mut().for_each(|v| {
        if *v <= 0.0 {
            *v = 0.0
        }
    });
    (z, active)
}

/// Elementwise product, used for ReLU patterns and dropout multipliers.
pub(crate) fn hadamard(mut t: Tensor2, m: &[f64]) -> Tensor2 {
    t.data_mut().iter_mut().zip(m).for_each(|(a, b)| *a *= b);
    t
}

pub(crate) fn softmax_rows(mut z: Tensor2) -> Tensor2 {
    let cols = z.cols();
    for row in z.data_mut().chunks_exact_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    z
}

/// VJP and JVP of a row-wise softmax share the form `y ⊙ (d − ⟨y, d⟩)`.
pub(crate) fn softmax_derivative(y: &Tensor2, mut d: Tensor2) -> Tensor2 {
    let cols = y.cols();
    for (yr, dr) in y
        .data()
        .chunks_exact(cols)
        .zip(d.data_mut().chunks_exact_mut(cols))
    {
        let inner: f64 = yr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
        dr.iter_mut().zip(yr).for_each(|(dv, yv)| *dv = yv * (*dv - inner));
    }
    d
}

pub(crate) struct LnCache {
    pub xhat: Tensor2,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_forward(x: &Tensor2, gamma: &[f64], beta: &[f64]) -> (Tensor2, LnCache) {
    let (rows, cols) = x.shape();
    let mut xhat = Tensor2::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    let mut y = Tensor2::zeros(rows, cols);
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(inv);
        let xh = xhat.row_mut(r);
        for c in 0..cols {
            xh[c] = (xr[c] - mean) * inv;
        }
        let yr = y.row_mut(r);
        for c in 0..cols {
            yr[c] = gamma[c] * xhat.get(r, c) + beta[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// `(1/σ)(g − mean(g) − x̂ · mean(g ⊙ x̂))`, the normalization derivative
/// in both directions.
fn normalize_derivative(cache: &LnCache, r: usize, g: &[f64], out: &mut [f64]) {
    let xh = cache.xhat.row(r);
    let n = g.len() as f64;
    let mean_g = g.iter().sum::<f64>() / n;
    let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
    let inv = cache.inv_std[r];
    for c in 0..g.len() {
        out[c] = inv * (g[c] - mean_g - xh[c] * mean_gx);
    }
}

pub(crate) fn layer_norm_backward(
    cache: &LnCache,
    dy: &Tensor2,
    gamma: &[f64],
    grad: Option<&mut [f64]>,
) -> Tensor2 {
    let (rows, cols) = dy.shape();
    if let Some(g) = grad {
        let (dgamma, dbeta) = g.split_at_mut(cols);
        for r in 0..rows {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            for c in 0..cols {
                dgamma[c] += dyr[c] * xh[c];
                dbeta[c] += dyr[c];
            }
        }
    }
    let mut dx = Tensor2::zeros(rows, cols);
    let mut g = vec![0.0; cols];
    for r in 0..rows {
        let dyr = dy.row(r);
        for c in 0..cols {
            g[c] = dyr[c] * gamma[c];
        }
        normalize_derivative(cache, r, &g, dx.row_mut(r));
    }
    dx
}

pub(crate) fn layer_norm_jvp(
    cache: &LnCache,
    dx: Option<&Tensor2>,
    gamma: &[f64],
    tangent: Option<&[f64]>,
) -> Tensor2 {
    let (rows, cols) = cache.xhat.shape();
    let mut dy = Tensor2::zeros(rows, cols);
    let mut dxh = vec![0.0; cols];
    for r in 0..rows {
        let yr = dy.row_mut(r);
        if let Some(dx) = dx {
            normalize_derivative(cache, r, dx.row(r), &mut dxh);
            for c in 0..cols {
                yr[c] = gamma[c] * dxh[c];
            }
        }
        if let Some(t) = tangent {
            let (tg, tb) = t.split_at(cols);
            let xh = cache.xhat.row(r);
            for c in 0..cols {
                yr[c] += tg[c] * xh[c] + tb[c];
            }
        }
    }
    dy
}

/// Geometry of a batch of equal-length sequences split into heads.
#[derive(Clone, Copy)]
pub(crate) struct AttnShape {
    pub n_seq: usize,
    pub seq_len: usize,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl AttnShape {
    fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }

    #[inline]
    fn prob_index(&self, b: usize, h: usize, t: usize, s: usize) -> usize {
        ((b * self.n_heads + h) * self.seq_len + t) * self.seq_len + s
    }
}

/// Causal multi-head attention over already-projected q, k, v.
/// Returns the mixed values and the attention probabilities.
pub(crate) fn attention_forward(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    sh: AttnShape,
) -> (Tensor2, Vec<f64>) {
    let d = sh.n_heads * sh.head_dim;
    let t_len = sh.seq_len;
    let c = sh.scale();
    let mut probs = vec![0.0; sh.n_seq * sh.n_heads * t_len * t_len];
    let mut out = Tensor2::zeros(sh.n_seq * t_len, d);
    let mut scores = vec![0.0; t_len];
    for b in 0..sh.n_seq {
        for h in 0..sh.n_heads {
            let cols = h * sh.head_dim..(h + 1) * sh.head_dim;
            for t in 0..t_len {
                let qt = &q.row(b * t_len + t)[cols.clone()];
                let mut max = f64::NEG_INFINITY;
                for s in 0..=t {
                    let ks = &k.row(b * t_len + s)[cols.clone()];
                    let sc = c * qt.iter().zip(ks).map(|(x, y)| x * y).sum::<f64>();
                    scores[s] = sc;
                    max = max.max(sc);
                }
                let mut sum = 0.0;
                for sc in &mut scores[..=t] {
                    *sc = (*sc - max).exp();
                    sum += *sc;
                }
                let orow = &mut out.row_mut(b * t_len + t)[cols.clone()];
                for s in 0..=t {
                    let a = scores[s] / sum;
                    probs[sh.prob_index(b, h, t, s)] = a;
                    let vs = &v.row(b * t_len + s)[cols.clone()];
                    orow.iter_mut().zip(vs).for_each(|(o, x)| *o += a * x);
                }
            }
        }
    }
    (out, probs)
}

pub(crate) fn attention_backward(
    dout: &Tensor2,
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    probs: &[f64],
    sh: AttnShape,
) -> (Tensor2, Tensor2, Tensor2) {
    let t_len = sh.seq_len;
    let c = sh.scale();
    let (rows, d) = q.shape();
    let mut dq = Tensor2::zeros(rows, d);
    let mut dk = Tensor2::zeros(rows, d);
    let mut dv = Tensor2::zeros(rows, d);
    let mut da = vec![0.0; t_len];
    for b in 0..sh.n_seq {
        for h in 0..sh.n_heads {
            let cols = h * sh.head_dim..(h + 1) * sh.head_dim;
            for t in 0..t_len {
                let row_t = b * t_len + t;
                let dot_t = &dout.row(row_t)[cols.clone()];
                let mut weighted = 0.0;
                for s in 0..=t {
                    let row_s = b * t_len + s;
                    let a = probs[sh.prob_index(b, h, t, s)];
                    let vs = &v.row(row_s)[cols.clone()];
                    da[s] = dot_t.iter().zip(vs).map(|(x, y)| x * y).sum();
                    weighted += a * da[s];
                    let dvs = &mut dv.row_mut(row_s)[cols.clone()];
                    dvs.iter_mut().zip(dot_t).for_each(|(g, x)| *g += a * x);
                }
                for s in 0..=t {
                    let row_s = b * t_len + s;
                    let a = probs[sh.prob_index(b, h, t, s)];
                    let ds = c * a * (da[s] - weighted);
                    if ds == 0.0 {
                        continue;
                    }
                    let ks = &k.row(row_s)[cols.clone()];
                    let dqt = &mut dq.row_mut(row_t)[cols.clone()];
                    dqt.iter_mut().zip(ks).for_each(|(g, x)| *g += ds * x);
                    let qt = &q.row(row_t)[cols.clone()];
                    let dks = &mut dk.row_mut(row_s)[cols.clone()];
                    dks.iter_mut().zip(qt).for_each(|(g, x)| *g += ds * x);
                }
            }
        }
    }
    (dq, dk, dv)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_jvp(
    dq: Option<&Tensor2>,
    dk: Option<&Tensor2>,
    dv: Option<&Tensor2>,
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    probs: &[f64],
    sh: AttnShape,
) -> Tensor2 {
    let t_len = sh.seq_len;
    let c = sh.scale();
    let (rows, d) = q.shape();
    let mut dout = Tensor2::zeros(rows, d);
    let mut ds = vec![0.0; t_len];
    for b in 0..sh.n_seq {
        for h in 0..sh.n_heads {
            let cols = h * sh.head_dim..(h + 1) * sh.head_dim;
            for t in 0..t_len {
                let row_t = b * t_len + t;
                let mut weighted = 0.0;
                for s in 0..=t {
                    let row_s = b * t_len + s;
                    let mut acc = 0.0;
                    if let Some(dq) = dq {
                        let ks = &k.row(row_s)[cols.clone()];
                        acc += dq.row(row_t)[cols.clone()]
                            .iter()
                            .zip(ks)
                            .map(|(x, y)| x * y)
                            .sum::<f64>();
                    }
                    if let Some(dk) = dk {
                        let qt = &q.row(row_t)[cols.clone()];
                        acc += dk.row(row_s)[cols.clone()]
                            .iter()
                            .zip(qt)
                            .map(|(x, y)| x * y)
                            .sum::<f64>();
                    }
                    ds[s] = c * acc;
                    weighted += probs[sh.prob_index(b, h, t, s)] * ds[s];
                }
                for s in 0..=t {
                    let row_s = b * t_len + s;
                    let a = probs[sh.prob_index(b, h, t, s)];
                    let dap = a * (ds[s] - weighted);
                    let vs = &v.row(row_s)[cols.clone()];
                    let orow = &mut dout.row_mut(row_t)[cols.clone()];
                    orow.iter_mut().zip(vs).for_each(|(o, x)| *o += dap * x);
                    if let Some(dv) = dv {
                        let dvs = &dv.row(row_s)[cols.clone()];
                        orow.iter_mut().zip(dvs).for_each(|(o, x)| *o += a * x);
                    }
                }
            }
        }
    }
    dout
}
