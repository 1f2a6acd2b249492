//! Seed-addressed dropout masks for attribution-time model variants.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{argument, Error, Result};
use crate::rng::{self, tag};

/// A fixed keep/drop pattern over every dropout layer of a model.
///
/// Bits are a pure function of `(member_seed, mask_index, rate, layer, unit)`,
/// so a mask never has to be stored: regenerating it is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutMask {
    pub member_seed: u64,
    pub mask_index: u64,
    pub rate: f64,
    bits: BTreeMap<String, Vec<bool>>,
}

pub fn sample_mask(
    member_seed: u64,
    mask_index: u64,
    rate: f64,
    layer_widths: &BTreeMap<String, usize>,
) -> Result<DropoutMask> {
    if !(0.0..1.0).contains(&rate) {
        return Err(argument(format!("dropout rate {rate} outside [0, 1)")));
    }
    let bits = layer_widths
        .iter()
        .map(|(name, &width)| {
            let key = rng::name_key(name);
            let layer_bits = (0..width as u64)
                .map(|unit| rng::uniform(member_seed, &[tag::MASK, mask_index, key, unit]) >= rate)
                .collect();
            (name.clone(), layer_bits)
        })
        .collect();
    Ok(DropoutMask {
        member_seed,
        mask_index,
        rate,
        bits,
    })
}

impl DropoutMask {
    /// Keeps every unit with no rescaling; applying it is exactly a no-op.
    pub fn identity(layer_widths: &BTreeMap<String, usize>) -> Self {
        sample_mask(0, 0, 0.0, layer_widths).expect("rate 0 is valid")
    }

    pub fn layer_bits(&self, layer: &str) -> Result<&[bool]> {
        self.bits
            .get(layer)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Mask(format!("mask has no bits for layer {layer:?}")))
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &[bool])> {
        self.bits.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Inverted-dropout multiplier for kept units.
    pub fn keep_scale(&self) -> f64 {
        1.0 / (1.0 - self.rate)
    }

    pub fn kept_fraction(&self) -> f64 {
        let (kept, total) = self.bits.values().fold((0usize, 0usize), |(k, t), v| {
            (k + v.iter().filter(|b| **b).count(), t + v.len())
        });
        if total == 0 {
            1.0
        } else {
            kept as f64 / total as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn widths(w: usize) -> BTreeMap<String, usize> {
        BTreeMap::from([("drop1".to_string(), w), ("drop2".to_string(), 7)])
    }

    #[test]
    fn zero_rate_keeps_everything() {
        for seed in [0, 1, 99] {
            let m = sample_mask(seed, 3, 0.0, &widths(50)).unwrap();
            assert!(m.layers().all(|(_, b)| b.iter().all(|x| *x)));
            assert_eq!(m.keep_scale(), 1.0);
        }
    }

    #[test]
    fn regeneration_is_identical() {
        let a = sample_mask(5, 2, 0.3, &widths(100)).unwrap();
        let b = sample_mask(5, 2, 0.3, &widths(100)).unwrap();
        assert_eq!(a, b);
        let c = sample_mask(5, 3, 0.3, &widths(100)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn kept_fraction_concentrates() {
        // Binomial(10 000, 0.9): sd = 30, so 4 sd = ±0.012 in fraction.
        let w = BTreeMap::from([("d".to_string(), 10_000)]);
        for seed in 0..5 {
            let m = sample_mask(seed, 1, 0.1, &w).unwrap();
            let f = m.kept_fraction();
            assert!((0.88..=0.92).contains(&f), "seed {seed}: {f}");
        }
    }

    #[test]
    fn bad_rate_rejected() {
        assert!(matches!(
            sample_mask(0, 0, 1.0, &widths(3)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn width_prefix_is_order_independent() {
        // Bits depend only on the unit's own key, not on the layer width.
        let a = sample_mask(9, 1, 0.5, &BTreeMap::from([("d".to_string(), 10)])).unwrap();
        let b = sample_mask(9, 1, 0.5, &BTreeMap::from([("d".to_string(), 20)])).unwrap();
        assert_eq!(a.layer_bits("d").unwrap(), &b.layer_bits("d").unwrap()[..10]);
    }
}
