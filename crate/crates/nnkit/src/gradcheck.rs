//! Central finite-difference checks of analytic gradients in `f64`.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Result for one parameter tensor.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)` over the
    /// checked coordinates.
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

/// Norm floor so that tensors with a vanishing gradient compare absolute
/// rather than relative error.
const NORM_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(NORM_FLOOR)
}

/// Compares the backward pass of `loss` against central differences with
/// step `h`. At most `max_coords` coordinates per tensor are checked, chosen
/// with `rng`; smaller tensors are checked exhaustively.
pub fn check<F, R>(
    store: &ParamStore<f64>,
    h: f64,
    max_coords: usize,
    rng: &mut R,
    loss: F,
) -> Result<GradCheck>
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut g = Graph::new();
    let l = loss(store, &mut g)?;
    let analytic = g.backward(l)?.params(&g);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(s, &mut g)?;
        Ok(g.scalar(l))
    };

    let mut probe = store.clone();
    let mut tensors = Vec::new();
    for (name, p) in store.iter() {
        let n = p.tensor.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(rng, n, max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let zero = vec![0.0; n];
        let grad = analytic.get(name).unwrap_or(&zero);
        let mut an = Vec::with_capacity(coords.len());
        let mut num = Vec::with_capacity(coords.len());
        for &i in &coords {
            let orig = p.tensor.values()[i];
            probe.get_mut(name)?.values_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(name)?.values_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(name)?.values_mut()[i] = orig;
            num.push((up - down) / (2.0 * h));
            an.push(grad[i]);
        }
        tensors.push(TensorCheck {
            name: name.to_string(),
            coords: coords.len(),
            rel_err: relative_error(&an, &num),
        });
    }
    Ok(GradCheck { tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0], &[1.1]) - 0.1 / 1.1).abs() < 1e-12);
        assert!(relative_error(&[0.0], &[1e-12]) < 1e-5);
    }
}
