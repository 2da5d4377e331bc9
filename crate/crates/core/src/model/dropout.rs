use rand::seq::{index, SliceRandom};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

/// Per-layer partition of units for example-tied dropout.
#[derive(Debug, Clone, PartialEq)]
struct TiedLayer {
    units: usize,
    is_gen: Vec<bool>,
    /// Non-generalization units, in a fixed order.
    pool: Vec<usize>,
    mem_count: usize,
}

/// Example-tied dropout: a fixed fraction `p_gen` of each layer's units is
/// always active; each example additionally activates its own
/// `floor(p_mem·U)` memorization units drawn from the remaining pool.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleTiedDropout {
    pub p_gen: f64,
    pub p_mem: f64,
    pub seed: u64,
    pub example_count: usize,
    layers: Vec<Option<TiedLayer>>,
}

impl ExampleTiedDropout {
    /// `units_per_layer[l] = None` leaves layer `l` untouched (the output head).
    pub fn new(
        units_per_layer: &[Option<usize>],
        p_gen: f64,
        p_mem: f64,
        seed: u64,
        example_count: usize,
    ) -> Result<Self> {
        if !(p_gen > 0.0 && p_gen < 1.0) || !(p_mem > 0.0 && p_mem < 1.0) || p_gen + p_mem > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "example-tied dropout needs p_gen, p_mem in (0,1) with p_gen + p_mem <= 1; got {p_gen}, {p_mem}"
            )));
        }
        let layers = units_per_layer
            .iter()
            .enumerate()
            .map(|(l, u)| {
                u.map(|units| {
                    let gen_count = (p_gen * units as f64).floor() as usize;
                    let mem_count = (p_mem * units as f64).floor() as usize;
                    let mut order: Vec<usize> = (0..units).collect();
                    order.shuffle(&mut rng_for(seed, &[stream::TIED_GEN, l as u64]));
                    let mut is_gen = vec![false; units];
                    for &u in &order[..gen_count] {
                        is_gen[u] = true;
                    }
                    let pool: Vec<usize> = (0..units).filter(|&u| !is_gen[u]).collect();
                    TiedLayer { units, is_gen, mem_count: mem_count.min(pool.len()), pool }
                })
            })
            .collect();
        Ok(Self { p_gen, p_mem, seed, example_count, layers })
    }

    pub fn applies_to(&self, layer: usize) -> bool {
        matches!(self.layers.get(layer), Some(Some(_)))
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn layer(&self, l: usize) -> Result<&TiedLayer> {
        self.layers
            .get(l)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::InvalidArgument(format!("example-tied dropout has no layer {l}")))
    }

    pub fn gen_units(&self, l: usize) -> Result<Vec<usize>> {
        let t = self.layer(l)?;
        Ok((0..t.units).filter(|&u| t.is_gen[u]).collect())
    }

    pub fn mem_count(&self, l: usize) -> Result<usize> {
        Ok(self.layer(l)?.mem_count)
    }

    /// Memorization units of `example` in layer `l`: a pure function of
    /// `(seed, l, example)`. Returned sorted.
    pub fn mem_units(&self, l: usize, example: usize) -> Result<Vec<usize>> {
        let t = self.layer(l)?;
        if example >= self.example_count {
            return Err(Error::InvalidArgument(format!(
                "example id {example} outside the {} tied examples",
                self.example_count
            )));
        }
        let mut rng = rng_for(self.seed, &[stream::TIED_MEM, l as u64, example as u64]);
        let mut picked: Vec<usize> = index::sample(&mut rng, t.pool.len(), t.mem_count)
            .into_iter()
            .map(|i| t.pool[i])
            .collect();
        picked.sort_unstable();
        Ok(picked)
    }

    /// Active-unit mask of `example` during training: gen ∪ mem(example).
    pub fn tied_mask(&self, l: usize, example: usize) -> Result<Vec<bool>> {
        let mut mask = self.layer(l)?.is_gen.clone();
        for u in self.mem_units(l, example)? {
            mask[u] = true;
        }
        Ok(mask)
    }

    /// Active-unit mask with every memorization unit dropped: the gen set.
    pub fn drop_mem_mask(&self, l: usize) -> Result<Vec<bool>> {
        Ok(self.layer(l)?.is_gen.clone())
    }
}
