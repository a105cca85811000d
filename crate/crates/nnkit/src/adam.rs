use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for a fixed subset of a store's parameters.
#[derive(Clone, Debug)]
pub struct AdamState<T: Element = f32> {
    pub config: AdamConfig,
    t: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Element> AdamState<T> {
    /// Optimizer over every parameter in `store`.
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let names: Vec<&str> = store.names().collect();
        Self::for_params(store, &names, config).expect("names come from the store")
    }

    /// Optimizer over the named parameters only.
    pub fn for_params(store: &ParamStore<T>, names: &[&str], config: AdamConfig) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for &n in names {
            let len = store.get(n)?.len();
            moments.insert(n.to_string(), (vec![T::zero(); len], vec![T::zero(); len]));
        }
        Ok(Self {
            config,
            t: 0,
            moments,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Restores moments and step count (checkpoint resume).
    pub fn restore(&mut self, t: u64, moments: BTreeMap<String, (Vec<T>, Vec<T>)>) -> Result<()> {
        for (name, (m, v)) in &moments {
            let Some((cm, _)) = self.moments.get(name) else {
                return Err(NnError::UnknownParam(name.clone()));
            };
            if cm.len() != m.len() || m.len() != v.len() {
                return Err(shape_err("adam restore", &[cm.len()], &[m.len()]));
            }
        }
        if moments.len() != self.moments.len() {
            return Err(NnError::Checkpoint("adam moment set differs".into()));
        }
        self.t = t;
        self.moments = moments;
        Ok(())
    }

    /// One bias-corrected Adam step over the owned parameters, then zeroes
    /// their gradients. Every owned parameter must carry a gradient.
    pub fn update(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for name in self.moments.keys() {
            if store.get(name)?.grad().is_none() {
                return Err(NnError::MissingGradient(name.clone()));
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step = T::from_f64(c.lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);
        for (name, (m, v)) in self.moments.iter_mut() {
            let p = store.get_mut(name)?;
            let g = p.grad().expect("checked above").to_vec();
            let vals = p.values_mut();
            for i in 0..vals.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                vals[i] = vals[i] - step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}
