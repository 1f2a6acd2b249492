//! Forward evaluation and exact derivatives for the fixed layer vocabulary.
//!
//! A [`Network`] borrows a spec, its parameters, and any attached adapters.
//! Evaluation records a [`Tape`] of intermediate values; from it the engine
//! computes vector-Jacobian products (reverse mode) and Jacobian-vector
//! products (forward mode) with respect to either the base parameters or the
//! adapter parameters.

mod ops;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::lora::{self, LoraAdapter};
use crate::mask::DropoutMask;
use crate::model::{Arch, LayerKind, LayerSpec, ModelSpec, ParamVector, TransformerDims};
use crate::rng::{self, tag};
use crate::output::{output_cotangent, OutputFnKind, NO_TARGET};
use crate::tensor::Tensor2;

use ops::*;

/// How dropout layers behave during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    /// Dropout is the identity.
    Eval,
    /// Fresh inverted dropout per row, keyed by `seed`.
    Train { seed: u64 },
    /// One fixed mask shared by every row, with inverted scaling.
    Masked(&'a DropoutMask),
}

/// Which parameters a gradient or tangent is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradTarget {
    Base,
    Adapters,
}

struct BlockIdx {
    ln1: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    drop_attn: usize,
    ln2: usize,
    ff1: usize,
    ff2: usize,
    drop_ff: usize,
}

struct TfIndex {
    dims: TransformerDims,
    tok: usize,
    pos: usize,
    blocks: Vec<BlockIdx>,
    ln_f: usize,
    head: usize,
}

impl TfIndex {
    fn new(spec: &ModelSpec, dims: TransformerDims) -> Result<Self> {
        let ix = |n: &str| spec.layer_index(n);
        let blocks = (0..dims.n_layers)
            .map(|i| {
                let p = |s: &str| ix(&format!("layer{i}.{s}"));
                Ok(BlockIdx {
                    ln1: p("ln1")?,
                    wq: p("Wq")?,
                    wk: p("Wk")?,
                    wv: p("Wv")?,
                    wo: p("Wo")?,
                    drop_attn: p("drop_attn")?,
                    ln2: p("ln2")?,
                    ff1: p("ff1")?,
                    ff2: p("ff2")?,
                    drop_ff: p("drop_ff")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            dims,
            tok: ix("tok_emb")?,
            pos: ix("pos_emb")?,
            blocks,
            ln_f: ix("ln_f")?,
            head: ix("head")?,
        })
    }
}

/// A model ready to evaluate: spec, parameters, and optional adapters.
pub struct Network<'a> {
    pub spec: &'a ModelSpec,
    pub params: &'a ParamVector,
    pub adapters: &'a [LoraAdapter],
    /// Per layer: index and offset of its adapter in the flattened vector.
    adapter_slot: Vec<Option<(usize, usize)>>,
    adapter_len: usize,
    tf: Option<TfIndex>,
}

impl<'a> Network<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        params: &'a ParamVector,
        adapters: &'a [LoraAdapter],
    ) -> Result<Self> {
        if params.len() != spec.param_count() {
            return Err(shape(format!(
                "model has {} parameters but the vector holds {}",
                spec.param_count(),
                params.len()
            )));
        }
        let mut adapter_slot = vec![None; spec.layers.len()];
        let offsets = lora::offsets(adapters);
        for (ai, a) in adapters.iter().enumerate() {
            let li = spec.layer_index(&a.target_layer)?;
            let layer = &spec.layers[li];
            if layer.kind != LayerKind::Linear {
                return Err(Error::Name(format!(
                    "adapter target {:?} is not a Linear layer",
                    a.target_layer
                )));
            }
            if a.in_dim() != layer.in_dim || a.out_dim() != layer.out_dim {
                return Err(shape(format!(
                    "adapter for {:?} has shape {}→{}, layer is {}→{}",
                    a.target_layer,
                    a.in_dim(),
                    a.out_dim(),
                    layer.in_dim,
                    layer.out_dim
                )));
            }
            if adapter_slot[li].replace((ai, offsets[ai])).is_some() {
                return Err(shape(format!("two adapters target {:?}", a.target_layer)));
            }
        }
        let tf = match spec.arch {
            Arch::TinyTransformer(dims) => Some(TfIndex::new(spec, dims)?),
            Arch::Mlp => None,
        };
        Ok(Self {
            spec,
            params,
            adapters,
            adapter_slot,
            adapter_len: lora::total_param_count(adapters),
            tf,
        })
    }

    /// Length of a gradient with respect to `target`.
    pub fn grad_len(&self, target: GradTarget) -> usize {
        match target {
            GradTarget::Base => self.params.len(),
            GradTarget::Adapters => self.adapter_len,
        }
    }

    /// Rows of model output produced per input row.
    pub fn positions(&self, batch_cols: usize) -> usize {
        match self.tf {
            Some(_) => batch_cols,
            None => 1,
        }
    }

    fn layer(&self, li: usize) -> &LayerSpec {
        &self.spec.layers[li]
    }

    fn base_block(&self, li: usize) -> Range<usize> {
        let off = self.params.layout.layer_offset(li);
        off..off + self.layer(li).param_count()
    }

    fn lora_block(&self, li: usize) -> Option<Range<usize>> {
        self.adapter_slot[li].map(|(ai, off)| off..off + self.adapters[ai].param_count())
    }

    fn block(&self, li: usize) -> &[f64] {
        &self.params.data[self.base_block(li)]
    }

    fn linear(&self, li: usize) -> LinearParams<'_> {
        let l = self.layer(li);
        let (w, b) = self.block(li).split_at(l.in_dim * l.out_dim);
        LinearParams {
            w,
            b,
            in_dim: l.in_dim,
            out_dim: l.out_dim,
        }
    }

    fn lora(&self, li: usize) -> Option<&LoraAdapter> {
        self.adapter_slot[li].map(|(ai, _)| &self.adapters[ai])
    }

    fn norm_params(&self, li: usize) -> (&[f64], &[f64]) {
        self.block(li).split_at(self.layer(li).out_dim)
    }

    fn grads<'g>(
        &self,
        li: usize,
        target: GradTarget,
        grad: &'g mut [f64],
    ) -> (Option<&'g mut [f64]>, Option<&'g mut [f64]>) {
        match target {
            GradTarget::Base => {
                let r = self.base_block(li);
                (Some(&mut grad[r]).filter(|s| !s.is_empty()), None)
            }
            GradTarget::Adapters => (None, self.lora_block(li).map(|r| &mut grad[r])),
        }
    }

    fn tangents<'t>(
        &self,
        li: usize,
        target: GradTarget,
        tangent: &'t [f64],
    ) -> (Option<&'t [f64]>, Option<&'t [f64]>) {
        match target {
            GradTarget::Base => {
                let r = self.base_block(li);
                (Some(&tangent[r]).filter(|s| !s.is_empty()), None)
            }
            GradTarget::Adapters => (None, self.lora_block(li).map(|r| &tangent[r])),
        }
    }

    fn check_batch(&self, batch: &Tensor2) -> Result<()> {
        match &self.tf {
            None => {
                if batch.cols() != self.spec.input_dim {
                    return Err(shape(format!(
                        "batch has {} columns, model input is {}",
                        batch.cols(),
                        self.spec.input_dim
                    )));
                }
            }
            Some(tf) => {
                if batch.cols() == 0 || batch.cols() > tf.dims.context_len {
                    return Err(shape(format!(
                        "sequence length {} outside 1..={}",
                        batch.cols(),
                        tf.dims.context_len
                    )));
                }
                let vocab = tf.dims.vocab_size as f64;
                if let Some(bad) = batch
                    .data()
                    .iter()
                    .find(|&&t| t < 0.0 || t >= vocab || t.fract() != 0.0)
                {
                    return Err(shape(format!("token id {bad} outside vocabulary")));
                }
            }
        }
        batch.ensure_finite("model input")
    }
}

/// Output rows (one per sample, or one per position for sequences).
pub fn forward(net: &Network, batch: &Tensor2, mode: Mode) -> Result<Tensor2> {
    Ok(forward_tape(net, batch, mode)?.0)
}

/// Inverted-dropout multipliers for a `rows × width` activation, or `None`
/// when the layer is the identity in this mode.
fn dropout_mult(
    layer: &LayerSpec,
    rows: usize,
    width: usize,
    positions: usize,
    mask_len: usize,
    mode: Mode,
) -> Result<Option<Vec<f64>>> {
    match mode {
        Mode::Eval => Ok(None),
        Mode::Train { seed } => {
            let rate = layer.dropout_rate;
            if rate == 0.0 {
                return Ok(None);
            }
            let scale = 1.0 / (1.0 - rate);
            let key = rng::name_key(&layer.name);
            let mut m = Vec::with_capacity(rows * width);
            for r in 0..rows as u64 {
                for c in 0..width as u64 {
                    let keep = rng::uniform(seed, &[tag::TRAIN_DROPOUT, key, r, c]) >= rate;
                    m.push(if keep { scale } else { 0.0 });
                }
            }
            Ok(Some(m))
        }
        Mode::Masked(mask) => {
            let bits = mask.layer_bits(&layer.name)?;
            if bits.len() != mask_len || positions * width > mask_len {
                return Err(Error::Mask(format!(
                    "mask for {:?} has {} bits, layer needs {}",
                    layer.name,
                    bits.len(),
                    mask_len
                )));
            }
            let scale = mask.keep_scale();
            let mut m = Vec::with_capacity(rows * width);
            for r in 0..rows {
                let base = (r % positions) * width;
                m.extend(
                    bits[base..base + width]
                        .iter()
                        .map(|&b| if b { scale } else { 0.0 }),
                );
            }
            Ok(Some(m))
        }
    }
}

fn apply_mult(t: Tensor2, m: &Option<Vec<f64>>) -> Tensor2 {
    match m {
        Some(m) => hadamard(t, m),
        None => t,
    }
}

fn add(mut a: Tensor2, b: &Tensor2) -> Tensor2 {
    a.data_mut()
        .iter_mut()
        .zip(b.data())
        .for_each(|(x, y)| *x += y);
    a
}

enum Cache {
    Linear(LinearCache),
    Relu(Vec<f64>),
    Dropout(Option<Vec<f64>>),
    Softmax(Tensor2),
    Norm(LnCache),
}

struct BlockTape {
    ln1: LnCache,
    cq: LinearCache,
    ck: LinearCache,
    cv: LinearCache,
    q: Tensor2,
    k: Tensor2,
    v: Tensor2,
    probs: Vec<f64>,
    co: LinearCache,
    m_attn: Option<Vec<f64>>,
    ln2: LnCache,
    c1: LinearCache,
    act: Vec<f64>,
    c2: LinearCache,
    m_ff: Option<Vec<f64>>,
}

struct TfTape {
    tokens: Vec<usize>,
    shape: AttnShape,
    blocks: Vec<BlockTape>,
    ln_f: LnCache,
    head: LinearCache,
}

/// Intermediate values of one forward pass.
pub struct Tape {
    inner: TapeInner,
    out_shape: (usize, usize),
}

enum TapeInner {
    Seq(Vec<Cache>),
    Tf(TfTape),
}

pub fn forward_tape(net: &Network, batch: &Tensor2, mode: Mode) -> Result<(Tensor2, Tape)> {
    net.check_batch(batch)?;
    let (out, inner) = match &net.tf {
        None => {
            let (o, c) = seq_forward(net, batch, mode)?;
            (o, TapeInner::Seq(c))
        }
        Some(tf) => {
            let (o, t) = tf_forward(net, tf, batch, mode)?;
            (o, TapeInner::Tf(t))
        }
    };
    out.ensure_finite("forward activations")?;
    let out_shape = out.shape();
    Ok((out, Tape { inner, out_shape }))
}

/// Accumulate `doutᵀ · ∂output/∂θ` into `grad`.
pub fn backward(
    net: &Network,
    tape: &Tape,
    dout: &Tensor2,
    target: GradTarget,
    grad: &mut [f64],
) -> Result<()> {
    if dout.shape() != tape.out_shape {
        return Err(shape("output cotangent does not match the forward output"));
    }
    if grad.len() != net.grad_len(target) {
        return Err(shape("gradient buffer has the wrong length"));
    }
    match &tape.inner {
        TapeInner::Seq(c) => seq_backward(net, c, dout, target, grad),
        TapeInner::Tf(t) => tf_backward(net, net.tf.as_ref().expect("transformer"), t, dout, target, grad),
    }
    Ok(())
}

/// `∂output/∂θ · tangent`, reusing the primal values on the tape.
pub fn jvp(net: &Network, tape: &Tape, target: GradTarget, tangent: &[f64]) -> Result<Tensor2> {
    if tangent.len() != net.grad_len(target) {
        return Err(shape("tangent has the wrong length"));
    }
    let out = match &tape.inner {
        TapeInner::Seq(c) => seq_jvp(net, c, target, tangent),
        TapeInner::Tf(t) => tf_jvp(net, net.tf.as_ref().expect("transformer"), t, target, tangent),
    };
    Ok(out.unwrap_or_else(|| Tensor2::zeros(tape.out_shape.0, tape.out_shape.1)))
}

fn seq_forward(net: &Network, batch: &Tensor2, mode: Mode) -> Result<(Tensor2, Vec<Cache>)> {
    let mut h = batch.clone();
    let mut caches = Vec::with_capacity(net.spec.layers.len());
    for (li, layer) in net.spec.layers.iter().enumerate() {
        match layer.kind {
            LayerKind::Linear => {
                let (z, c) = linear_forward(h, &net.linear(li), net.lora(li));
                caches.push(Cache::Linear(c));
                h = z;
            }
            LayerKind::ReLU => {
                let (y, active) = relu_forward(h);
                caches.push(Cache::Relu(active));
                h = y;
            }
            LayerKind::Dropout => {
                let m = dropout_mult(layer, h.rows(), h.cols(), 1, h.cols(), mode)?;
                h = apply_mult(h, &m);
                caches.push(Cache::Dropout(m));
            }
            LayerKind::Softmax => {
                h = softmax_rows(h);
                caches.push(Cache::Softmax(h.clone()));
            }
            LayerKind::LayerNorm => {
                let (g, b) = net.norm_params(li);
                let (y, c) = layer_norm_forward(&h, g, b);
                caches.push(Cache::Norm(c));
                h = y;
            }
            LayerKind::Attention | LayerKind::Embedding => {
                return Err(shape(format!("{:?} is not a sequential layer", layer.kind)))
            }
        }
    }
    Ok((h, caches))
}

fn seq_backward(net: &Network, caches: &[Cache], dout: &Tensor2, target: GradTarget, grad: &mut [f64]) {
    let mut d = dout.clone();
    for (li, cache) in caches.iter().enumerate().rev() {
        match cache {
            Cache::Linear(c) => {
                let (bg, lg) = net.grads(li, target, grad);
                match linear_backward(c, &d, &net.linear(li), net.lora(li), bg, lg, li > 0) {
                    Some(dx) => d = dx,
                    None => break,
                }
            }
            Cache::Relu(a) => d = hadamard(d, a),
            Cache::Dropout(m) => d = apply_mult(d, m),
            Cache::Softmax(y) => d = softmax_derivative(y, d),
            Cache::Norm(c) => {
                let gamma = net.norm_params(li).0;
                let (bg, _) = net.grads(li, target, grad);
                d = layer_norm_backward(c, &d, gamma, bg);
            }
        }
    }
}

fn seq_jvp(net: &Network, caches: &[Cache], target: GradTarget, tangent: &[f64]) -> Option<Tensor2> {
    let mut d: Option<Tensor2> = None;
    for (li, cache) in caches.iter().enumerate() {
        match cache {
            Cache::Linear(c) => {
                let (bt, lt) = net.tangents(li, target, tangent);
                d = Some(linear_jvp(c, d.as_ref(), &net.linear(li), net.lora(li), bt, lt));
            }
            Cache::Relu(a) => d = d.map(|t| hadamard(t, a)),
            Cache::Dropout(m) => d = d.map(|t| apply_mult(t, m)),
            Cache::Softmax(y) => d = d.map(|t| softmax_derivative(y, t)),
            Cache::Norm(c) => {
                let (bt, _) = net.tangents(li, target, tangent);
                if d.is_some() || bt.is_some() {
                    d = Some(layer_norm_jvp(c, d.as_ref(), net.norm_params(li).0, bt));
                }
            }
        }
    }
    d
}

fn tf_forward(net: &Network, tf: &TfIndex, batch: &Tensor2, mode: Mode) -> Result<(Tensor2, TfTape)> {
    let (n_seq, t_len) = batch.shape();
    let d = tf.dims.d_model;
    let rows = n_seq * t_len;
    let mask_len = tf.dims.context_len * d;
    let tokens: Vec<usize> = batch.data().iter().map(|&t| t as usize).collect();
    let tok_table = net.block(tf.tok);
    let pos_table = net.block(tf.pos);
    let mut h = Tensor2::zeros(rows, d);
    for r in 0..rows {
        let e = &tok_table[tokens[r] * d..(tokens[r] + 1) * d];
        let p = &pos_table[(r % t_len) * d..(r % t_len + 1) * d];
        h.row_mut(r)
            .iter_mut()
            .zip(e.iter().zip(p))
            .for_each(|(x, (a, b))| *x = a + b);
    }
    let shape = AttnShape {
        n_seq,
        seq_len: t_len,
        n_heads: tf.dims.n_heads,
        head_dim: d / tf.dims.n_heads,
    };
    let mut blocks = Vec::with_capacity(tf.blocks.len());
    for b in &tf.blocks {
        let (g, be) = net.norm_params(b.ln1);
        let (a, ln1) = layer_norm_forward(&h, g, be);
        let (q, cq) = linear_forward(a.clone(), &net.linear(b.wq), net.lora(b.wq));
        let (k, ck) = linear_forward(a.clone(), &net.linear(b.wk), net.lora(b.wk));
        let (v, cv) = linear_forward(a, &net.linear(b.wv), net.lora(b.wv));
        let (att, probs) = attention_forward(&q, &k, &v, shape);
        let (o, co) = linear_forward(att, &net.linear(b.wo), net.lora(b.wo));
        let m_attn = dropout_mult(net.layer(b.drop_attn), rows, d, t_len, mask_len, mode)?;
        h = add(h, &apply_mult(o, &m_attn));

        let (g, be) = net.norm_params(b.ln2);
        let (c, ln2) = layer_norm_forward(&h, g, be);
        let (f1, c1) = linear_forward(c, &net.linear(b.ff1), net.lora(b.ff1));
        let (r, act) = relu_forward(f1);
        let (f2, c2) = linear_forward(r, &net.linear(b.ff2), net.lora(b.ff2));
        let m_ff = dropout_mult(net.layer(b.drop_ff), rows, d, t_len, mask_len, mode)?;
        h = add(h, &apply_mult(f2, &m_ff));
        blocks.push(BlockTape {
            ln1,
            cq,
            ck,
            cv,
            q,
            k,
            v,
            probs,
            co,
            m_attn,
            ln2,
            c1,
            act,
            c2,
            m_ff,
        });
    }
    let (g, be) = net.norm_params(tf.ln_f);
    let (hf, ln_f) = layer_norm_forward(&h, g, be);
    let (logits, head) = linear_forward(hf, &net.linear(tf.head), net.lora(tf.head));
    Ok((
        logits,
        TfTape {
            tokens,
            shape,
            blocks,
            ln_f,
            head,
        },
    ))
}

fn tf_linear_back(
    net: &Network,
    li: usize,
    cache: &LinearCache,
    d: &Tensor2,
    target: GradTarget,
    grad: &mut [f64],
) -> Tensor2 {
    let (bg, lg) = net.grads(li, target, grad);
    linear_backward(cache, d, &net.linear(li), net.lora(li), bg, lg, true).expect("dx requested")
}

fn tf_norm_back(net: &Network, li: usize, cache: &LnCache, d: &Tensor2, target: GradTarget, grad: &mut [f64]) -> Tensor2 {
    let gamma = net.norm_params(li).0;
    let (bg, _) = net.grads(li, target, grad);
    layer_norm_backward(cache, d, gamma, bg)
}

fn tf_backward(net: &Network, tf: &TfIndex, tape: &TfTape, dout: &Tensor2, target: GradTarget, grad: &mut [f64]) {
    let dh_f = tf_linear_back(net, tf.head, &tape.head, dout, target, grad);
    let mut dh = tf_norm_back(net, tf.ln_f, &tape.ln_f, &dh_f, target, grad);
    for (b, bt) in tf.blocks.iter().zip(&tape.blocks).rev() {
        let d_f2 = apply_mult(dh.clone(), &bt.m_ff);
        let d_r = tf_linear_back(net, b.ff2, &bt.c2, &d_f2, target, grad);
        let d_f1 = hadamard(d_r, &bt.act);
        let d_c = tf_linear_back(net, b.ff1, &bt.c1, &d_f1, target, grad);
        let d_mid = add(dh, &tf_norm_back(net, b.ln2, &bt.ln2, &d_c, target, grad));

        let d_o = apply_mult(d_mid.clone(), &bt.m_attn);
        let d_att = tf_linear_back(net, b.wo, &bt.co, &d_o, target, grad);
        let (dq, dk, dv) = attention_backward(&d_att, &bt.q, &bt.k, &bt.v, &bt.probs, tape.shape);
        let mut d_a = tf_linear_back(net, b.wq, &bt.cq, &dq, target, grad);
        d_a = add(d_a, &tf_linear_back(net, b.wk, &bt.ck, &dk, target, grad));
        d_a = add(d_a, &tf_linear_back(net, b.wv, &bt.cv, &dv, target, grad));
        dh = add(d_mid, &tf_norm_back(net, b.ln1, &bt.ln1, &d_a, target, grad));
    }
    if target == GradTarget::Base {
        let d = tf.dims.d_model;
        let t_len = tape.shape.seq_len;
        let tok_off = net.base_block(tf.tok).start;
        let pos_off = net.base_block(tf.pos).start;
        for (r, &tok) in tape.tokens.iter().enumerate() {
            let src = dh.row(r);
            let te = tok_off + tok * d;
            grad[te..te + d].iter_mut().zip(src).for_each(|(g, x)| *g += x);
            let pe = pos_off + (r % t_len) * d;
            grad[pe..pe + d].iter_mut().zip(src).for_each(|(g, x)| *g += x);
        }
    }
}

fn tf_jvp(net: &Network, tf: &TfIndex, tape: &TfTape, target: GradTarget, tangent: &[f64]) -> Option<Tensor2> {
    let d = tf.dims.d_model;
    let t_len = tape.shape.seq_len;
    let rows = tape.tokens.len();
    let mut dh = Tensor2::zeros(rows, d);
    if target == GradTarget::Base {
        let tok_off = net.base_block(tf.tok).start;
        let pos_off = net.base_block(tf.pos).start;
        for (r, &tok) in tape.tokens.iter().enumerate() {
            let te = &tangent[tok_off + tok * d..tok_off + (tok + 1) * d];
            let pe = &tangent[pos_off + (r % t_len) * d..pos_off + (r % t_len + 1) * d];
            dh.row_mut(r)
                .iter_mut()
                .zip(te.iter().zip(pe))
                .for_each(|(x, (a, b))| *x = a + b);
        }
    }
    let lin = |li: usize, c: &LinearCache, dx: &Tensor2| {
        let (bt, lt) = net.tangents(li, target, tangent);
        linear_jvp(c, Some(dx), &net.linear(li), net.lora(li), bt, lt)
    };
    let norm = |li: usize, c: &LnCache, dx: &Tensor2| {
        let (bt, _) = net.tangents(li, target, tangent);
        layer_norm_jvp(c, Some(dx), net.norm_params(li).0, bt)
    };
    for (b, bt) in tf.blocks.iter().zip(&tape.blocks) {
        let d_a = norm(b.ln1, &bt.ln1, &dh);
        let dq = lin(b.wq, &bt.cq, &d_a);
        let dk = lin(b.wk, &bt.ck, &d_a);
        let dv = lin(b.wv, &bt.cv, &d_a);
        let d_att = attention_jvp(Some(&dq), Some(&dk), Some(&dv), &bt.q, &bt.k, &bt.v, &bt.probs, tape.shape);
        let d_o = apply_mult(lin(b.wo, &bt.co, &d_att), &bt.m_attn);
        let d_mid = add(dh, &d_o);
        let d_c = norm(b.ln2, &bt.ln2, &d_mid);
        let d_f1 = hadamard(lin(b.ff1, &bt.c1, &d_c), &bt.act);
        let d_f2 = apply_mult(lin(b.ff2, &bt.c2, &d_f1), &bt.m_ff);
        dh = add(d_mid, &d_f2);
    }
    let d_f = norm(tf.ln_f, &tape.ln_f, &dh);
    Some(lin(tf.head, &tape.head, &d_f))
}

/// Gradients of a scalar output function, one row per sample.
///
/// `targets` holds one entry per output row (so `positions` entries per
/// sequence sample). Each sample is evaluated on its own, so the result does
/// not depend on how samples are grouped into batches.
pub fn per_sample_grads(
    net: &Network,
    batch: &Tensor2,
    targets: &[usize],
    kind: OutputFnKind,
    mode: Mode,
    target: GradTarget,
) -> Result<Tensor2> {
    let positions = net.positions(batch.cols());
    if targets.len() != batch.rows() * positions {
        return Err(shape(format!(
            "{} targets for {} output rows",
            targets.len(),
            batch.rows() * positions
        )));
    }
    let p = net.grad_len(target);
    let mut out = Tensor2::zeros(batch.rows(), p);
    for s in 0..batch.rows() {
        let rows = &targets[s * positions..(s + 1) * positions];
        let g = per_sample_grad(net, &batch.select_rows(&[s]), rows, kind, mode, target)?;
        out.row_mut(s).copy_from_slice(&g);
    }
    Ok(out)
}

/// Gradient of `kind` at a single sample (a one-row batch).
pub fn per_sample_grad(
    net: &Network,
    sample: &Tensor2,
    targets: &[usize],
    kind: OutputFnKind,
    mode: Mode,
    target: GradTarget,
) -> Result<Vec<f64>> {
    if sample.rows() != 1 {
        return Err(shape("per-sample gradient takes a single input row"));
    }
    let (logits, tape) = forward_tape(net, sample, mode)?;
    check_targets(&logits, targets)?;
    let dout = output_cotangent(kind, &logits, targets);
    let mut g = vec![0.0; net.grad_len(target)];
    backward(net, &tape, &dout, target, &mut g)?;
    crate::tensor::ensure_finite(&g, "per-sample gradient")?;
    Ok(g)
}

pub(crate) fn check_targets(logits: &Tensor2, targets: &[usize]) -> Result<()> {
    if targets.len() != logits.rows() {
        return Err(shape(format!(
            "{} targets for {} output rows",
            targets.len(),
            logits.rows()
        )));
    }
    if let Some(&bad) = targets
        .iter()
        .find(|&&y| y != NO_TARGET && y >= logits.cols())
    {
        return Err(shape(format!("target {bad} outside {} classes", logits.cols())));
    }
    Ok(())
}
