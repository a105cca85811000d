use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::{Element, Tensor};

/// How a parameter was initialized. Kept alongside the tensor so a store can
/// be re-initialized from a seed and so checkpoints document their origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanInUniform { fan_in: usize },
    /// Orthogonal columns (or rows, when wider than tall) scaled by `gain`.
    Orthogonal { gain: f64 },
}

#[derive(Clone, Debug)]
pub struct Param<T: Element = f32> {
    pub tensor: Tensor<T>,
    pub init: Init,
}

/// Named parameters, iterated in lexicographic name order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element = f32> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    /// Registers and initializes a parameter.
    pub fn register<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let values = init_values::<T, R>(shape, &init, rng);
        let tensor = Tensor::new(shape, values)?;
        self.params.insert(name.to_string(), Param { tensor, init });
        Ok(())
    }

    /// Inserts a tensor with explicit values.
    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, init: Init) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        self.params.insert(name.to_string(), Param { tensor, init });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.clear_grad();
        }
    }

    /// Adds a gradient map (for example from [`crate::graph::Gradients::params`]).
    pub fn accumulate_grads(&mut self, grads: &BTreeMap<String, Vec<T>>) -> Result<()> {
        for (name, g) in grads {
            self.get_mut(name)?.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            init: p.init.clone(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Copies values (not gradients) from `other` for every shared name.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, p) in other.iter() {
            let dst = self.get_mut(name)?;
            if dst.shape() != p.tensor.shape() {
                return Err(crate::error::shape_err(
                    "copy_values_from",
                    dst.shape(),
                    p.tensor.shape(),
                ));
            }
            dst.values_mut().copy_from_slice(p.tensor.values());
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.tensor.all_finite())
    }
}

fn init_values<T: Element, R: Rng + ?Sized>(shape: &[usize], init: &Init, rng: &mut R) -> Vec<T> {
    let n: usize = shape.iter().product();
    match *init {
        Init::Zeros => vec![T::zero(); n],
        Init::Constant(c) => vec![T::from_f64(c); n],
        Init::FanInUniform { fan_in } => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            (0..n)
                .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                .collect()
        }
        Init::Orthogonal { gain } => {
            let cols = *shape.last().unwrap_or(&1);
            let rows = n / cols.max(1);
            orthogonal(rows, cols, gain, rng)
                .into_iter()
                .map(T::from_f64)
                .collect()
        }
    }
}

/// Row-major `rows x cols` matrix with orthonormal columns (rows >= cols) or
/// orthonormal rows (rows < cols), from the QR factor of a Gaussian matrix.
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let (tall_r, tall_c) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let a = nalgebra::DMatrix::<f64>::from_fn(tall_r, tall_c, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Sign correction makes the distribution uniform over orthogonal matrices.
    for j in 0..tall_c {
        if r[(j, j)] < 0.0 {
            for i in 0..tall_r {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            out[i * cols + j] = gain * v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let mut s = ParamStore::<f32>::new();
        s.register("w", &[2, 2], Init::Zeros, &mut rng).unwrap();
        assert!(matches!(
            s.register("w", &[2, 2], Init::Zeros, &mut rng),
            Err(NnError::DuplicateParam(_))
        ));
    }

    #[test]
    fn orthogonal_columns_are_orthonormal() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for &(r, c) in &[(100usize, 400usize), (400, 100), (5, 5)] {
            let m = orthogonal(r, c, 1.0, &mut rng);
            let (outer, inner) = if r >= c { (c, r) } else { (r, c) };
            for p in 0..outer {
                for q in 0..outer {
                    let dot: f64 = (0..inner)
                        .map(|k| {
                            if r >= c {
                                m[k * c + p] * m[k * c + q]
                            } else {
                                m[p * c + k] * m[q * c + k]
                            }
                        })
                        .sum();
                    let want = if p == q { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-9, "({r},{c}) [{p},{q}] = {dot}");
                }
            }
        }
    }

    #[test]
    fn fan_in_bound_holds() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let mut s = ParamStore::<f32>::new();
        s.register("w", &[64, 8], Init::FanInUniform { fan_in: 64 }, &mut rng)
            .unwrap();
        assert!(s.get("w").unwrap().values().iter().all(|v| v.abs() <= 0.125));
    }
}
