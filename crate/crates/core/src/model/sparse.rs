use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

/// Fixed binary keep-mask over every weight tensor of a model. Exactly
/// `round(keep·len)` coordinates of each tensor are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticSparseMask {
    pub keep: f64,
    masks: BTreeMap<String, Vec<bool>>,
}

impl StaticSparseMask {
    pub fn new(tensors: &[(String, usize)], keep: f64, seed: u64) -> Result<Self> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::InvalidArgument(format!("keep fraction must be in (0,1], got {keep}")));
        }
        let masks = tensors
            .iter()
            .enumerate()
            .map(|(i, (name, len))| {
                let kept = ((keep * *len as f64).round() as usize).clamp(1, *len);
                let mut order: Vec<usize> = (0..*len).collect();
                order.shuffle(&mut rng_for(seed, &[stream::SPARSE, i as u64]));
                let mut m = vec![false; *len];
                for &j in &order[..kept] {
                    m[j] = true;
                }
                (name.clone(), m)
            })
            .collect();
        Ok(Self { keep, masks })
    }

    pub fn mask(&self, name: &str) -> Option<&[bool]> {
        self.masks.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.masks.keys()
    }

    pub fn kept_fraction(&self, name: &str) -> Option<f64> {
        self.masks.get(name).map(|m| m.iter().filter(|&&b| b).count() as f64 / m.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_fraction_is_exact_up_to_rounding() {
        let m = StaticSparseMask::new(&[("a".into(), 1000), ("b".into(), 7)], 0.4, 1).unwrap();
        assert_eq!(m.kept_fraction("a").unwrap(), 0.4);
        assert!((m.kept_fraction("b").unwrap() - 0.4).abs() <= 1.0 / 7.0);
        assert!(StaticSparseMask::new(&[("a".into(), 3)], 0.0, 1).is_err());
    }
}
