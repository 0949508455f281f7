//! Named parameter storage and the few layer helpers the networks need.

use std::collections::BTreeMap;

use kplift_tensor::Tensor;
use rand::Rng;

use crate::{Error, Result};

/// Every learnable tensor of a model, addressed by a dotted name.
///
/// Iteration order is the lexicographic name order, which fixes the order
/// of optimizer updates and checkpoint payloads.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) {
        let t = Tensor::param(data, shape).expect("parameter data matches its shape");
        self.params.insert(name.to_string(), t);
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.params.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Names starting with any of `prefixes`, in store order.
    pub fn names_with_prefix(&self, prefixes: &[&str]) -> Vec<String> {
        self.params
            .keys()
            .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
            .cloned()
            .collect()
    }

    /// A copy whose tensors carry no gradient tracking (inference).
    pub fn frozen(&self) -> ParamStore {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.detach())).collect(),
        }
    }

    /// A copy where every tensor is a fresh trainable leaf.
    pub fn trainable(&self) -> ParamStore {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.to_param())).collect(),
        }
    }

    /// Only the named tensors are trainable leaves; the rest are constants.
    pub fn trainable_subset(&self, names: &[String]) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| {
                    let t = if names.contains(k) { v.to_param() } else { v.detach() };
                    (k.clone(), t)
                })
                .collect(),
        }
    }

    /// Round every value through `f32`.
    pub fn quantized(&self) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| {
                    let data = v.data().iter().map(|&x| x as f32 as f64).collect();
                    (k.clone(), v.with_data(data).expect("same length"))
                })
                .collect(),
        }
    }
}

/// Uniform fan-in initialisation `U(−gain/√fan_in, gain/√fan_in)` for a
/// `[fan_in, fan_out]` weight and a zero bias.
pub fn init_linear(params: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) {
    let bound = gain / (fan_in as f64).sqrt();
    let w: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })
        .collect();
    params.insert_param(&format!("{prefix}.weight"), w, &[fan_in, fan_out]);
    params.insert_param(&format!("{prefix}.bias"), vec![0.0; fan_out], &[fan_out]);
}

/// `x·W + b` with `W = {prefix}.weight`, `b = {prefix}.bias`.
pub fn linear(params: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let b = params.get(&format!("{prefix}.bias"))?;
    Ok(x.matmul(w)?.add(b)?)
}
