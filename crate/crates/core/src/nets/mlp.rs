//! State-based value function and object-centric discriminator.

use rand::Rng;
use rial_nnkit::layers::{dense, dense_tanh, register_dense};
use rial_nnkit::{Element, Graph, ParamStore, Var};

use crate::error::{Error, Result};

pub const VALUE_HIDDEN: (usize, usize) = (100, 100);
pub const DISC_HIDDEN: (usize, usize) = (100, 64);

/// Two tanh hidden layers and a linear scalar output, under `prefix`.
fn register_mlp<T: Element, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    input: usize,
    hidden: (usize, usize),
    rng: &mut R,
) -> Result<()> {
    register_dense(store, &format!("{prefix}.l1"), input, hidden.0, rng)?;
    register_dense(store, &format!("{prefix}.l2"), hidden.0, hidden.1, rng)?;
    register_dense(store, &format!("{prefix}.out"), hidden.1, 1, rng)?;
    Ok(())
}

fn mlp<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let a = dense_tanh(g, store, &format!("{prefix}.l1"), x)?;
    let a = dense_tanh(g, store, &format!("{prefix}.l2"), a)?;
    Ok(dense(g, store, &format!("{prefix}.out"), a)?)
}

fn check_width(what: &str, values: usize, width: usize) -> Result<usize> {
    if width == 0 || values % width != 0 || values == 0 {
        return Err(Error::Shape(format!(
            "{what} expects rows of {width} features, got {values} values"
        )));
    }
    Ok(values / width)
}

#[derive(Clone, Debug)]
pub struct ValueNet {
    pub input_dim: usize,
    pub store: ParamStore<f32>,
}

impl ValueNet {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        Self::register(&mut store, input_dim, rng)?;
        Ok(Self { input_dim, store })
    }

    pub fn register<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, input_dim: usize, rng: &mut R) -> Result<()> {
        register_mlp(store, "value", input_dim, VALUE_HIDDEN, rng)
    }

    pub fn arch(&self) -> String {
        format!("value-v1 in={} hidden={}x{}", self.input_dim, VALUE_HIDDEN.0, VALUE_HIDDEN.1)
    }

    /// `[N, 1]` values for `N` rows of privileged features.
    pub fn forward<T: Element>(input_dim: usize, g: &mut Graph<T>, store: &ParamStore<T>, feats: &[T]) -> Result<Var> {
        let n = check_width("value net", feats.len(), input_dim)?;
        let x = g.input(&[n, input_dim], feats.to_vec())?;
        mlp(g, store, "value", x)
    }

    pub fn predict(&self, feats: &[f64]) -> Result<Vec<f64>> {
        let x: Vec<f32> = feats.iter().map(|&v| v as f32).collect();
        let mut g = Graph::new();
        let v = Self::forward(self.input_dim, &mut g, &self.store, &x)?;
        let out: Vec<f64> = g.value(v).iter().map(|&v| v as f64).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("value estimate".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct DiscriminatorNet {
    pub feat_dim: usize,
    /// Zero when actions are not part of the input.
    pub action_dim: usize,
    pub store: ParamStore<f32>,
}

impl DiscriminatorNet {
    pub fn new<R: Rng + ?Sized>(feat_dim: usize, action_dim: usize, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        Self::register(&mut store, feat_dim + action_dim, rng)?;
        Ok(Self {
            feat_dim,
            action_dim,
            store,
        })
    }

    pub fn register<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, input_dim: usize, rng: &mut R) -> Result<()> {
        register_mlp(store, "disc", input_dim, DISC_HIDDEN, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.feat_dim + self.action_dim
    }

    pub fn arch(&self) -> String {
        format!(
            "disc-v1 feat={} act={} hidden={}x{}",
            self.feat_dim, self.action_dim, DISC_HIDDEN.0, DISC_HIDDEN.1
        )
    }

    /// `[N, 1]` logits for `N` rows of discriminator inputs.
    pub fn forward<T: Element>(input_dim: usize, g: &mut Graph<T>, store: &ParamStore<T>, rows: &[T]) -> Result<Var> {
        let n = check_width("discriminator", rows.len(), input_dim)?;
        let x = g.input(&[n, input_dim], rows.to_vec())?;
        mlp(g, store, "disc", x)
    }

    /// Builds one input row; `action` must be given exactly when the
    /// network was built with actions.
    pub fn input_row(&self, feat: &[f64], action: Option<&[f64]>) -> Result<Vec<f64>> {
        if feat.len() != self.feat_dim {
            return Err(Error::Shape(format!(
                "discriminator features: expected {}, got {}",
                self.feat_dim,
                feat.len()
            )));
        }
        let mut row = feat.to_vec();
        match (self.action_dim, action) {
            (0, _) => {}
            (n, Some(a)) if a.len() == n => row.extend_from_slice(a),
            (n, _) => {
                return Err(Error::Shape(format!(
                    "discriminator expects a {n}-dimensional action"
                )))
            }
        }
        Ok(row)
    }

    /// `(logit, probability)` per row of already-normalized inputs.
    pub fn predict(&self, rows: &[f64]) -> Result<Vec<(f64, f64)>> {
        let x: Vec<f32> = rows.iter().map(|&v| v as f32).collect();
        let mut g = Graph::new();
        let z = Self::forward(self.input_dim(), &mut g, &self.store, &x)?;
        Ok(g.value(z)
            .iter()
            .map(|&z| {
                let z = z as f64;
                (z, 1.0 / (1.0 + (-z).exp()))
            })
            .collect())
    }
}
