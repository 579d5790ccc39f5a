use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::Mat;
use crate::error::{Error, Result};

/// Named parameter (or buffer) arrays in a deterministic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    arrays: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.arrays.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Mat> {
        self.get(name)
            .ok_or_else(|| Error::Incompatible(format!("missing array '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.arrays.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.arrays.values().map(|m| m.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, m) in &self.arrays {
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!("non-finite values in '{name}'")));
            }
        }
        Ok(())
    }

    /// Copy restricted to names starting with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            arrays: self
                .arrays
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        for (name, m) in &self.arrays {
            match other.get(name) {
                None => return Err(Error::Incompatible(format!("missing array '{name}'"))),
                Some(o) if o.dim() != m.dim() => {
                    return Err(Error::Incompatible(format!(
                        "array '{name}' has shape {:?}, expected {:?}",
                        o.dim(),
                        m.dim()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.names().find(|n| !self.contains(n)) {
            return Err(Error::Incompatible(format!("unexpected array '{extra}'")));
        }
        Ok(())
    }
}

/// Uniform Glorot initialization for a `fan_in × fan_out` matrix.
pub fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Mat {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Mat::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..limit))
}

pub fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, limit: f64) -> Mat {
    Mat::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
}

pub fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Mat {
    use rand_distr::{Distribution, Normal};
    let d = Normal::new(0.0, std).expect("positive std");
    Mat::from_shape_simple_fn((rows, cols), || d.sample(rng))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

/// Adam with bias correction. Moments live alongside the parameter names so
/// the state can be checkpointed.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    /// Applies one update to every parameter with a gradient for which
    /// `trainable` holds. Returns the pre-clip global gradient norm.
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Mat>,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<f64> {
        let selected: Vec<(&String, &Mat)> = grads.iter().filter(|(k, _)| trainable(k)).collect();
        let norm = selected
            .iter()
            .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in selected {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Incompatible(format!("gradient for unknown parameter '{name}'")))?;
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Mat::zeros(p.raw_dim()));
                self.v.insert(name.clone(), Mat::zeros(p.raw_dim()));
            }
            let m = self.m.get_mut(name).expect("inserted");
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g * clip);
            let v = self.v.get_mut(name).expect("inserted");
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                let g = g * clip;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g
            });
            let (m, v) = (self.m.get(name).expect("m"), self.v.get(name).expect("v"));
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= c.lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
            });
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = ParamStore::new();
        params.insert("x", Mat::from_elem((1, 2), 3.0));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..300 {
            let grads = {
                let mut g = Graph::new(&params);
                let x = g.param("x").unwrap();
                let sq = g.square(x);
                let loss = g.sum_all(sq);
                g.backward(loss).into_params(&params)
            };
            opt.update(&mut params, &grads, |_| true).unwrap();
        }
        assert!(params.get("x").unwrap().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut params = ParamStore::new();
        params.insert("a.w", Mat::ones((2, 2)));
        params.insert("b.w", Mat::ones((2, 2)));
        let grads: BTreeMap<String, Mat> = params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let before = params.clone();
        Adam::new(AdamConfig::default())
            .update(&mut params, &grads, |n| !n.starts_with("a."))
            .unwrap();
        assert_eq!(params.get("a.w"), before.get("a.w"));
        assert_ne!(params.get("b.w"), before.get("b.w"));
    }
}
