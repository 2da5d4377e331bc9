use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A unit is a dense output neuron or a conv output channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitId {
    pub layer: usize,
    pub unit: usize,
}

/// Per-unit multiplicative gates, one vector per layer, applied to the unit's
/// activation before it propagates.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSet<T> {
    layers: Vec<Vec<T>>,
}

impl<T: Scalar> GateSet<T> {
    pub fn ones(units_per_layer: &[usize]) -> Self {
        Self { layers: units_per_layer.iter().map(|&u| vec![T::one(); u]).collect() }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &[T] {
        &self.layers[l]
    }

    pub fn total_units(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn get(&self, unit: UnitId) -> Option<T> {
        self.layers.get(unit.layer)?.get(unit.unit).copied()
    }

    pub fn is_all_ones(&self, l: usize) -> bool {
        self.layers[l].iter().all(|&g| g == T::one())
    }

    pub fn is_active(&self, unit: UnitId) -> bool {
        self.get(unit).is_some_and(|g| g != T::zero())
    }

    /// Copy of this gate set with `unit` zeroed. Idempotent.
    pub fn zero_unit(&self, unit: UnitId) -> Result<Self> {
        let mut out = self.clone();
        out.zero_in_place(unit)?;
        Ok(out)
    }

    pub fn zero_in_place(&mut self, unit: UnitId) -> Result<()> {
        self.set(unit, T::zero())
    }

    pub fn set(&mut self, unit: UnitId, value: T) -> Result<()> {
        let slot = self
            .layers
            .get_mut(unit.layer)
            .and_then(|l| l.get_mut(unit.unit))
            .ok_or_else(|| Error::InvalidArgument(format!("no unit {unit:?}")))?;
        *slot = value;
        Ok(())
    }

    pub fn active_units(&self) -> Vec<UnitId> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(layer, g)| {
                g.iter()
                    .enumerate()
                    .filter(|(_, &v)| v != T::zero())
                    .map(move |(unit, _)| UnitId { layer, unit })
            })
            .collect()
    }
}
