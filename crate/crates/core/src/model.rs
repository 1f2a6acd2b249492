//! Model specifications, the flat parameter layout, and parameter counting.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{argument, shape, Error, Result};
use crate::rng::{self, tag};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Linear,
    ReLU,
    Dropout,
    Softmax,
    Attention,
    LayerNorm,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Only meaningful for `Dropout`.
    pub dropout_rate: f64,
    pub name: String,
}

impl LayerSpec {
    pub fn linear(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self::new(LayerKind::Linear, name, in_dim, out_dim)
    }

    pub fn relu(name: impl Into<String>, width: usize) -> Self {
        Self::new(LayerKind::ReLU, name, width, width)
    }

    pub fn softmax(name: impl Into<String>, width: usize) -> Self {
        Self::new(LayerKind::Softmax, name, width, width)
    }

    pub fn layer_norm(name: impl Into<String>, width: usize) -> Self {
        Self::new(LayerKind::LayerNorm, name, width, width)
    }

    pub fn dropout(name: impl Into<String>, width: usize, rate: f64) -> Self {
        Self {
            dropout_rate: rate,
            ..Self::new(LayerKind::Dropout, name, width, width)
        }
    }

    fn new(kind: LayerKind, name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            kind,
            in_dim,
            out_dim,
            dropout_rate: 0.0,
            name: name.into(),
        }
    }

    /// Trainable parameters owned by this layer, as (name, shape) pairs.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self.kind {
            LayerKind::Linear => vec![
                ("weight", vec![self.out_dim, self.in_dim]),
                ("bias", vec![self.out_dim]),
            ],
            LayerKind::LayerNorm => vec![("gamma", vec![self.out_dim]), ("beta", vec![self.out_dim])],
            LayerKind::Embedding => vec![("table", vec![self.in_dim, self.out_dim])],
            LayerKind::ReLU | LayerKind::Dropout | LayerKind::Softmax | LayerKind::Attention => {
                vec![]
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerDims {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    /// Layers applied in sequence.
    Mlp,
    /// Pre-norm causal transformer; the layer list names its parts.
    TinyTransformer(TransformerDims),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub layers: Vec<LayerSpec>,
    /// Feature count (MLP) or sequence length (transformer).
    pub input_dim: usize,
    /// Class count (MLP) or vocabulary size (transformer).
    pub output_dim: usize,
}

/// Hidden layers are Linear → ReLU → Dropout; a final Linear maps to the
/// output. With `dropout_rate > 0` every hidden block gets a dropout layer,
/// so a two-hidden-layer MLP has dropout after its first two linear layers.
pub fn build_mlp(
    input_dim: usize,
    hidden: &[usize],
    output_dim: usize,
    dropout_rate: f64,
) -> Result<ModelSpec> {
    if hidden.is_empty() {
        return Err(argument("an MLP needs at least one hidden layer"));
    }
    check_rate(dropout_rate)?;
    if input_dim == 0 || output_dim == 0 || hidden.contains(&0) {
        return Err(argument("layer dimensions must be positive"));
    }
    let mut layers = Vec::new();
    let mut width = input_dim;
    for (i, &h) in hidden.iter().enumerate() {
        let k = i + 1;
        layers.push(LayerSpec::linear(format!("fc{k}"), width, h));
        layers.push(LayerSpec::relu(format!("relu{k}"), h));
        if dropout_rate > 0.0 {
            layers.push(LayerSpec::dropout(format!("drop{k}"), h, dropout_rate));
        }
        width = h;
    }
    layers.push(LayerSpec::linear(
        format!("fc{}", hidden.len() + 1),
        width,
        output_dim,
    ));
    ModelSpec::sequential(layers)
}

/// Multinomial logistic regression: a single Linear layer.
pub fn build_linear(input_dim: usize, output_dim: usize) -> Result<ModelSpec> {
    if input_dim == 0 || output_dim == 0 {
        return Err(argument("layer dimensions must be positive"));
    }
    ModelSpec::sequential(vec![LayerSpec::linear("fc1", input_dim, output_dim)])
}

pub fn build_tiny_transformer(
    vocab_size: usize,
    context_len: usize,
    d_model: usize,
    n_heads: usize,
    n_layers: usize,
    d_ff: usize,
    dropout_rate: f64,
) -> Result<ModelSpec> {
    if vocab_size < 2 || context_len == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 {
        return Err(argument("transformer dimensions must be positive (vocab ≥ 2)"));
    }
    if !d_model.is_multiple_of(n_heads) {
        return Err(argument(format!(
            "d_model = {d_model} is not divisible by n_heads = {n_heads}"
        )));
    }
    check_rate(dropout_rate)?;
    let d = d_model;
    let emb = |name: &str, rows: usize| LayerSpec {
        kind: LayerKind::Embedding,
        in_dim: rows,
        out_dim: d,
        dropout_rate: 0.0,
        name: name.to_string(),
    };
    let mut layers = vec![emb("tok_emb", vocab_size), emb("pos_emb", context_len)];
    for i in 0..n_layers {
        let p = |s: &str| format!("layer{i}.{s}");
        layers.push(LayerSpec::layer_norm(p("ln1"), d));
        for w in ["Wq", "Wk", "Wv"] {
            layers.push(LayerSpec::linear(p(w), d, d));
        }
        layers.push(LayerSpec {
            kind: LayerKind::Attention,
            in_dim: d,
            out_dim: d,
            dropout_rate: 0.0,
            name: p("attn"),
        });
        layers.push(LayerSpec::linear(p("Wo"), d, d));
        layers.push(LayerSpec::dropout(p("drop_attn"), d, dropout_rate));
        layers.push(LayerSpec::layer_norm(p("ln2"), d));
        layers.push(LayerSpec::linear(p("ff1"), d, d_ff));
        layers.push(LayerSpec::relu(p("relu"), d_ff));
        layers.push(LayerSpec::linear(p("ff2"), d_ff, d));
        layers.push(LayerSpec::dropout(p("drop_ff"), d, dropout_rate));
    }
    layers.push(LayerSpec::layer_norm("ln_f", d));
    layers.push(LayerSpec::linear("head", d, vocab_size));
    let spec = ModelSpec {
        arch: Arch::TinyTransformer(TransformerDims {
            vocab_size,
            context_len,
            d_model,
            n_heads,
            n_layers,
            d_ff,
        }),
        layers,
        input_dim: context_len,
        output_dim: vocab_size,
    };
    spec.validate()?;
    Ok(spec)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(argument(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

impl ModelSpec {
    /// A sequential (MLP-style) model from an explicit layer list.
    pub fn sequential(layers: Vec<LayerSpec>) -> Result<Self> {
        let input_dim = layers.first().map_or(0, |l| l.in_dim);
        let output_dim = layers.last().map_or(0, |l| l.out_dim);
        let spec = Self {
            arch: Arch::Mlp,
            layers,
            input_dim,
            output_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(argument("model has no layers"));
        }
        let mut seen = HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.name.as_str()) {
                return Err(argument(format!("duplicate layer name {:?}", l.name)));
            }
            if l.kind == LayerKind::Dropout {
                check_rate(l.dropout_rate)?;
            }
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(argument(format!("layer {:?} has a zero dimension", l.name)));
            }
        }
        if self.arch == Arch::Mlp {
            let mut width = self.input_dim;
            for l in &self.layers {
                match l.kind {
                    LayerKind::Attention | LayerKind::Embedding => {
                        return Err(argument(format!(
                            "{:?} layers are only available in the transformer",
                            l.kind
                        )))
                    }
                    LayerKind::Linear => {}
                    _ if l.in_dim != l.out_dim => {
                        return Err(shape(format!(
                            "width-preserving layer {:?} has {} → {}",
                            l.name, l.in_dim, l.out_dim
                        )))
                    }
                    _ => {}
                }
                if l.in_dim != width {
                    return Err(shape(format!(
                        "layer {:?} expects width {} but receives {width}",
                        l.name, l.in_dim
                    )));
                }
                width = l.out_dim;
            }
            if width != self.output_dim {
                return Err(shape("last layer does not produce output_dim"));
            }
        }
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::Name(format!("no layer named {name:?}")))
    }

    pub fn dims(&self) -> Option<&TransformerDims> {
        match &self.arch {
            Arch::TinyTransformer(d) => Some(d),
            Arch::Mlp => None,
        }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::for_spec(self)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| l.kind == LayerKind::Dropout)
    }

    /// Number of mask bits per dropout layer: the unit width for the MLP,
    /// and one bit per (position, channel) for the transformer.
    pub fn dropout_widths(&self) -> BTreeMap<String, usize> {
        let positions = self.dims().map_or(1, |d| d.context_len);
        self.layers
            .iter()
            .filter(|l| l.kind == LayerKind::Dropout)
            .map(|l| (l.name.clone(), l.out_dim * positions))
            .collect()
    }

    /// Deterministic initial parameters.
    ///
    /// Linear layers use Kaiming-uniform weights and biases with bound
    /// `1/sqrt(fan_in)`; embeddings are standard normal; LayerNorm starts at
    /// the identity.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let layout = self.layout();
        let mut data = vec![0.0; layout.len()];
        for (li, layer) in self.layers.iter().enumerate() {
            let mut stream = rng::stream(seed, &[tag::INIT, rng::name_key(&layer.name)]);
            let off = layout.layer_offset(li);
            match layer.kind {
                LayerKind::Linear => {
                    let bound = 1.0 / (layer.in_dim as f64).sqrt();
                    let n = layer.param_count();
                    for v in &mut data[off..off + n] {
                        *v = stream.random_range(-bound..bound);
                    }
                }
                LayerKind::Embedding => {
                    let n = layer.param_count();
                    for v in &mut data[off..off + n] {
                        *v = StandardNormal.sample(&mut stream);
                    }
                }
                LayerKind::LayerNorm => {
                    data[off..off + layer.out_dim].fill(1.0);
                }
                _ => {}
            }
        }
        ParamVector { layout, data }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub layer: String,
    pub param: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    /// Start offset of each layer's block, indexed like `ModelSpec::layers`.
    layer_offsets: Vec<usize>,
    len: usize,
}

impl ParamLayout {
    fn for_spec(spec: &ModelSpec) -> Self {
        let mut entries = Vec::new();
        let mut layer_offsets = Vec::with_capacity(spec.layers.len());
        let mut offset = 0;
        for layer in &spec.layers {
            layer_offsets.push(offset);
            for (param, shape) in layer.param_shapes() {
                let n: usize = shape.iter().product();
                entries.push(ParamEntry {
                    layer: layer.name.clone(),
                    param: param.to_string(),
                    shape,
                    offset,
                });
                offset += n;
            }
        }
        Self {
            entries,
            layer_offsets,
            len: offset,
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn layer_offset(&self, layer_index: usize) -> usize {
        self.layer_offsets[layer_index]
    }

    pub fn entry(&self, layer: &str, param: &str) -> Option<&ParamEntry> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.param == param)
    }

    /// Offsets are contiguous, non-overlapping, and cover `len`.
    pub fn is_contiguous(&self) -> bool {
        let mut next = 0;
        for e in &self.entries {
            if e.offset != next {
                return false;
            }
            next += e.len();
        }
        next == self.len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub layout: ParamLayout,
    pub data: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: ParamLayout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(shape(format!(
                "layout expects {} parameters, got {}",
                layout.len(),
                data.len()
            )));
        }
        Ok(Self { layout, data })
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        let layout = spec.layout();
        let data = vec![0.0; layout.len()];
        Self { layout, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, layer: &str, param: &str) -> Option<&[f64]> {
        let e = self.layout.entry(layer, param)?;
        Some(&self.data[e.offset..e.offset + e.len()])
    }

    pub fn get_mut(&mut self, layer: &str, param: &str) -> Option<&mut [f64]> {
        let e = self.layout.entry(layer, param)?.clone();
        Some(&mut self.data[e.offset..e.offset + e.len()])
    }
}

/// Ensemble dimensions for space-cost accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleShape {
    pub members: usize,
    pub masks: usize,
    pub adapters_per_member: usize,
    pub rank: usize,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCountReport {
    pub base_per_model: usize,
    pub base_total: usize,
    pub adapter_per_unit: usize,
    pub adapter_total: usize,
    pub total: usize,
}

/// Stored parameters for an ensemble. Dropout masks are regenerated from
/// seeds, so the mask count never enters the total.
pub fn param_count(spec: &ModelSpec, shape: &EnsembleShape) -> Result<ParamCountReport> {
    if shape.members == 0 || shape.masks == 0 {
        return Err(argument("need at least one member and one mask"));
    }
    let base = spec.param_count();
    let adapter_per_unit = if shape.adapters_per_member > 0 {
        shape
            .targets
            .iter()
            .map(|t| crate::lora::adapter_param_count(spec, t, shape.rank, true))
            .sum::<Result<usize>>()?
    } else {
        0
    };
    let base_total = base * shape.members;
    let adapter_total = shape.members * shape.adapters_per_member * adapter_per_unit;
    Ok(ParamCountReport {
        base_per_model: base,
        base_total,
        adapter_per_unit,
        adapter_total,
        total: base_total + adapter_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_mlp_parameter_count() {
        let spec = build_mlp(784, &[128, 64], 10, 0.1).unwrap();
        assert_eq!(spec.param_count(), 784 * 128 + 128 + 128 * 64 + 64 + 64 * 10 + 10);
        assert_eq!(spec.param_count(), 109_386);
        let drops = spec
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::Dropout)
            .count();
        assert_eq!(drops, 2);
    }

    #[test]
    fn tiny_mlp_count() {
        assert_eq!(build_mlp(2, &[2], 2, 0.0).unwrap().param_count(), 12);
    }

    #[test]
    fn mlp_rejects_bad_arguments() {
        assert!(build_mlp(4, &[], 2, 0.1).is_err());
        assert!(build_mlp(4, &[3], 2, 1.0).is_err());
        assert!(build_mlp(0, &[3], 2, 0.0).is_err());
    }

    #[test]
    fn transformer_naming_and_divisibility() {
        let spec = build_tiny_transformer(32, 16, 32, 2, 2, 64, 0.1).unwrap();
        for i in 0..2 {
            for w in ["Wq", "Wk", "Wv", "Wo"] {
                assert!(spec.layer(&format!("layer{i}.{w}")).is_some());
            }
        }
        let projections = spec
            .layers
            .iter()
            .filter(|l| l.name.ends_with(".Wq") || l.name.ends_with(".Wk") || l.name.ends_with(".Wv") || l.name.ends_with(".Wo"))
            .count();
        assert_eq!(projections, 8);
        assert!(matches!(
            build_tiny_transformer(32, 16, 32, 3, 2, 64, 0.1),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn layout_is_contiguous() {
        let spec = build_tiny_transformer(8, 4, 8, 2, 1, 16, 0.0).unwrap();
        let layout = spec.layout();
        assert!(layout.is_contiguous());
        assert_eq!(layout.len(), spec.param_count());
    }

    #[test]
    fn param_count_scaling() {
        let spec = build_mlp(784, &[128, 64], 10, 0.1).unwrap();
        let shape = |members, masks| EnsembleShape {
            members,
            masks,
            adapters_per_member: 0,
            rank: 8,
            targets: vec![],
        };
        assert_eq!(param_count(&spec, &shape(1, 1)).unwrap().total, 109_386);
        assert_eq!(param_count(&spec, &shape(3, 1)).unwrap().total, 328_158);
        assert_eq!(
            param_count(&spec, &shape(2, 1)).unwrap(),
            param_count(&spec, &shape(2, 25)).unwrap()
        );
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let spec = build_mlp(5, &[4], 3, 0.0).unwrap();
        assert_eq!(spec.init_params(3), spec.init_params(3));
        assert_ne!(spec.init_params(3), spec.init_params(4));
        let p = spec.init_params(3);
        let w = p.get("fc1", "weight").unwrap();
        let bound = 1.0 / 5f64.sqrt();
        assert!(w.iter().all(|v| v.abs() <= bound));
    }
}
