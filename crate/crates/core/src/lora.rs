//! Low-rank adapters on named linear layers.
//!
//! An adapted layer computes `W x + (alpha / r) · B A x + (b + bias_delta)`.
//! `B` starts at zero, so a freshly attached adapter leaves the model
//! unchanged.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::artifact::{Artifact, ArtifactKind};
use crate::error::{argument, shape, Error, Result};
use crate::model::{LayerKind, ModelSpec, ParamVector};
use crate::rng::{self, tag};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target_layer: String,
    pub rank: usize,
    pub alpha: f64,
    /// `rank × in_dim`
    pub a: Tensor2,
    /// `out_dim × rank`
    pub b: Tensor2,
    pub bias_delta: Option<Vec<f64>>,
}

impl LoraAdapter {
    #[inline]
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn param_count(&self) -> usize {
        self.a.data().len() + self.b.data().len() + self.bias_delta.as_ref().map_or(0, Vec::len)
    }

    fn write_to(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.a.data());
        out.extend_from_slice(self.b.data());
        if let Some(bd) = &self.bias_delta {
            out.extend_from_slice(bd);
        }
    }

    fn read_from(&mut self, src: &[f64]) -> usize {
        let na = self.a.data().len();
        let nb = self.b.data().len();
        self.a.data_mut().copy_from_slice(&src[..na]);
        self.b.data_mut().copy_from_slice(&src[na..na + nb]);
        let mut used = na + nb;
        if let Some(bd) = &mut self.bias_delta {
            let n = bd.len();
            bd.copy_from_slice(&src[used..used + n]);
            used += n;
        }
        used
    }
}

/// Parameters of one adapter of the given rank on `target`.
pub fn adapter_param_count(
    spec: &ModelSpec,
    target: &str,
    rank: usize,
    with_bias: bool,
) -> Result<usize> {
    let layer = linear_target(spec, target)?;
    Ok(rank * (layer.in_dim + layer.out_dim) + if with_bias { layer.out_dim } else { 0 })
}

fn linear_target<'s>(spec: &'s ModelSpec, target: &str) -> Result<&'s crate::model::LayerSpec> {
    let layer = spec
        .layer(target)
        .ok_or_else(|| Error::Name(format!("no layer named {target:?}")))?;
    if layer.kind != LayerKind::Linear {
        return Err(Error::Name(format!(
            "{target:?} is a {:?} layer, adapters attach to Linear layers",
            layer.kind
        )));
    }
    Ok(layer)
}

/// All layers whose name ends in `.{suffix}` for any of the suffixes, in
/// model order. `["Wq", "Wv"]` selects the query and value projections.
pub fn targets_by_suffix(spec: &ModelSpec, suffixes: &[&str]) -> Vec<String> {
    spec.layers
        .iter()
        .filter(|l| {
            l.kind == LayerKind::Linear
                && suffixes
                    .iter()
                    .any(|s| l.name.rsplit('.').next() == Some(*s))
        })
        .map(|l| l.name.clone())
        .collect()
}

/// One adapter per target: `A ~ N(0, 1/r)`, `B = 0`, zero bias delta.
pub fn attach_lora(
    spec: &ModelSpec,
    base: &ParamVector,
    targets: &[String],
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<LoraAdapter>> {
    if base.len() != spec.param_count() {
        return Err(shape("base parameters do not match the model spec"));
    }
    if targets.is_empty() {
        return Err(argument("no adapter targets given"));
    }
    let std = (1.0 / rank.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| argument(e.to_string()))?;
    targets
        .iter()
        .map(|t| {
            let layer = linear_target(spec, t)?;
            if rank == 0 || rank > layer.in_dim.min(layer.out_dim) {
                return Err(argument(format!(
                    "rank {rank} invalid for {t:?} ({} → {})",
                    layer.in_dim, layer.out_dim
                )));
            }
            let mut stream = rng::stream(seed, &[tag::LORA_INIT, rng::name_key(t)]);
            let a = Tensor2::from_fn(rank, layer.in_dim, |_, _| normal.sample(&mut stream));
            Ok(LoraAdapter {
                target_layer: t.clone(),
                rank,
                alpha,
                a,
                b: Tensor2::zeros(layer.out_dim, rank),
                bias_delta: Some(vec![0.0; layer.out_dim]),
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterShape {
    target_layer: String,
    rank: usize,
    alpha: f64,
    in_dim: usize,
    out_dim: usize,
    bias: bool,
}

/// Adapter shapes in the header, flattened values as payload.
pub fn adapters_to_artifact(adapters: &[LoraAdapter], config_digest: &str) -> Result<Artifact> {
    let shapes: Vec<AdapterShape> = adapters
        .iter()
        .map(|a| AdapterShape {
            target_layer: a.target_layer.clone(),
            rank: a.rank,
            alpha: a.alpha,
            in_dim: a.in_dim(),
            out_dim: a.out_dim(),
            bias: a.bias_delta.is_some(),
        })
        .collect();
    Artifact::new(ArtifactKind::Adapters, config_digest, shapes, flatten(adapters))
}

pub fn adapters_from_artifact(a: &Artifact) -> Result<Vec<LoraAdapter>> {
    a.expect_kind(ArtifactKind::Adapters)?;
    let shapes: Vec<AdapterShape> = a.meta()?;
    let mut adapters: Vec<LoraAdapter> = shapes
        .into_iter()
        .map(|s| LoraAdapter {
            a: Tensor2::zeros(s.rank, s.in_dim),
            b: Tensor2::zeros(s.out_dim, s.rank),
            bias_delta: s.bias.then(|| vec![0.0; s.out_dim]),
            target_layer: s.target_layer,
            rank: s.rank,
            alpha: s.alpha,
        })
        .collect();
    unflatten(&mut adapters, &a.payload)?;
    Ok(adapters)
}

pub fn total_param_count(adapters: &[LoraAdapter]) -> usize {
    adapters.iter().map(LoraAdapter::param_count).sum()
}

/// Start offset of each adapter in the flattened adapter vector.
pub fn offsets(adapters: &[LoraAdapter]) -> Vec<usize> {
    let mut off = 0;
    adapters
        .iter()
        .map(|a| {
            let o = off;
            off += a.param_count();
            o
        })
        .collect()
}

/// Concatenate `A`, `B`, and bias delta of each adapter in order.
pub fn flatten(adapters: &[LoraAdapter]) -> Vec<f64> {
    let mut out = Vec::with_capacity(total_param_count(adapters));
    for a in adapters {
        a.write_to(&mut out);
    }
    out
}

pub fn unflatten(adapters: &mut [LoraAdapter], values: &[f64]) -> Result<()> {
    if values.len() != total_param_count(adapters) {
        return Err(shape("adapter vector length mismatch"));
    }
    let mut off = 0;
    for a in adapters {
        off += a.read_from(&values[off..]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_tiny_transformer;

    #[test]
    fn wq_wv_targets_in_two_layer_transformer() {
        let spec = build_tiny_transformer(32, 16, 32, 2, 2, 64, 0.1).unwrap();
        let targets = targets_by_suffix(&spec, &["Wq", "Wv"]);
        assert_eq!(
            targets,
            ["layer0.Wq", "layer0.Wv", "layer1.Wq", "layer1.Wv"]
        );
        let base = spec.init_params(0);
        let adapters = attach_lora(&spec, &base, &targets, 8, 8.0, 1).unwrap();
        assert_eq!(adapters.len(), 4);
        for a in &adapters {
            assert_eq!(a.param_count(), 8 * (32 + 32) + 32);
            assert!(a.b.data().iter().all(|v| *v == 0.0));
        }
        assert_eq!(total_param_count(&adapters), 4 * 544);
    }

    #[test]
    fn unknown_and_non_linear_targets() {
        let spec = build_tiny_transformer(8, 4, 8, 2, 1, 8, 0.0).unwrap();
        let base = spec.init_params(0);
        let err = attach_lora(&spec, &base, &["nope".into()], 2, 2.0, 0).unwrap_err();
        assert!(matches!(err, Error::Name(_)));
        let err = attach_lora(&spec, &base, &["ln_f".into()], 2, 2.0, 0).unwrap_err();
        assert!(matches!(err, Error::Name(_)));
        let err = attach_lora(&spec, &base, &["layer0.Wq".into()], 9, 2.0, 0).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn flatten_round_trip() {
        let spec = build_tiny_transformer(8, 4, 8, 2, 1, 8, 0.0).unwrap();
        let base = spec.init_params(0);
        let targets = targets_by_suffix(&spec, &["Wq", "Wv"]);
        let mut adapters = attach_lora(&spec, &base, &targets, 2, 2.0, 5).unwrap();
        let mut flat = flatten(&adapters);
        flat.iter_mut().enumerate().for_each(|(i, v)| *v += i as f64);
        unflatten(&mut adapters, &flat).unwrap();
        assert_eq!(flatten(&adapters), flat);
        assert_eq!(offsets(&adapters)[1], adapters[0].param_count());
        let back = adapters_from_artifact(&adapters_to_artifact(&adapters, "x").unwrap()).unwrap();
        assert_eq!(back, adapters);
    }
}
