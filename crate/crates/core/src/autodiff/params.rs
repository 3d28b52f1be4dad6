use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AutodiffError, Gradients, Tape, Tensor};

/// Index of a parameter in its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamData {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named trainable parameters in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    data: Vec<ParamData>,
}

/// Parameters recorded as leaves on one tape, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct BoundParams(Vec<Tensor>);

impl BoundParams {
    /// Wraps tensors already on a tape, one per parameter in store order.
    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        BoundParams(tensors)
    }

    pub fn get(&self, id: ParamId) -> Tensor {
        self.0[id.0]
    }

    /// Gradient per parameter in store order; zeros where none reached.
    pub fn grads(&self, g: &Gradients, store: &ParamStore) -> Vec<Vec<f64>> {
        self.0
            .iter()
            .zip(&store.data)
            .map(|(&t, p)| g.get(t).map_or_else(|| vec![0.0; p.values.len()], <[f64]>::to_vec))
            .collect()
    }
}

/// Stream-specific seed: splitmix64 over `seed` and an FNV-1a hash of `stream`.
pub fn init_seed(seed: u64, stream: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "{name}: shape/value mismatch");
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.data.push(ParamData { shape: shape.to_vec(), values });
        ParamId(self.names.len() - 1)
    }

    /// Weight of a `[fan_in, fan_out]` layer, uniform in `±1/sqrt(fan_in)`.
    pub fn add_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let values = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, &[fan_in, fan_out], values)
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add(name, shape, vec![value; shape.iter().product()])
    }

    /// Normal entries with standard deviation `std` (Box-Muller).
    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                let u1: f64 = 1.0 - rng.gen::<f64>();
                let u2: f64 = rng.gen();
                std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        self.add(name, shape, values)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.data.iter().map(|p| p.values.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ParamData {
        &self.data[id.0]
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0].values
    }

    /// Records every parameter as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams(
            self.data.iter().map(|p| tape.param(p.values.clone(), &p.shape).expect("stored shapes are valid")).collect(),
        )
    }

    /// Records every parameter as a constant leaf.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        BoundParams(
            self.data.iter().map(|p| tape.constant(p.values.clone(), &p.shape).expect("stored shapes are valid")).collect(),
        )
    }

    pub fn to_map(&self) -> BTreeMap<String, ParamData> {
        self.names.iter().cloned().zip(self.data.iter().cloned()).collect()
    }

    /// Overwrites values from a name map; names and shapes must match exactly.
    pub fn load_map(&mut self, map: &BTreeMap<String, ParamData>) -> Result<(), AutodiffError> {
        if map.len() != self.names.len() {
            return Err(AutodiffError::Invalid(format!(
                "checkpoint has {} parameters, model has {}",
                map.len(),
                self.names.len()
            )));
        }
        for (name, slot) in self.names.iter().zip(self.data.iter_mut()) {
            let p = map.get(name).ok_or_else(|| AutodiffError::Invalid(format!("checkpoint lacks parameter {name}")))?;
            if p.shape != slot.shape || p.values.len() != slot.values.len() {
                return Err(AutodiffError::ShapeMismatch { op: "load", left: slot.shape.clone(), right: p.shape.clone() });
            }
            slot.values.clone_from(&p.values);
        }
        Ok(())
    }
}
