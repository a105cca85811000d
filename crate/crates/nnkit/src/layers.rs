//! Layer helpers over [`Graph`] that read their weights from a [`ParamStore`]
//! by naming convention (`<prefix>.w`, `<prefix>.b`).

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamStore};
use crate::tensor::Element;

pub fn register_dense<T: Element, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    store.register(
        &format!("{prefix}.w"),
        &[fan_in, fan_out],
        Init::FanInUniform { fan_in },
        rng,
    )?;
    store.register(&format!("{prefix}.b"), &[fan_out], Init::Zeros, rng)
}

/// `y = x W + b`.
pub fn dense<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

pub fn dense_tanh<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let y = dense(g, store, prefix, x)?;
    Ok(g.tanh(y))
}

pub fn register_conv<T: Element, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    kernel: usize,
    in_c: usize,
    out_c: usize,
    rng: &mut R,
) -> Result<()> {
    let fan_in = kernel * kernel * in_c;
    store.register(
        &format!("{prefix}.w"),
        &[kernel, kernel, in_c, out_c],
        Init::FanInUniform { fan_in },
        rng,
    )?;
    store.register(&format!("{prefix}.b"), &[out_c], Init::Zeros, rng)
}

pub fn conv2d<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    g.conv2d(x, w, b, stride)
}

/// Output side length of a valid convolution, floor rule.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if stride == 0 || kernel > input {
        None
    } else {
        Some((input - kernel) / stride + 1)
    }
}

/// LSTM weights: `wx [in, 4H]` (fan-in uniform), `wh [H, 4H]` (orthogonal)
/// and `b [4H]` (zeros), gate order input, forget, candidate, output.
pub fn register_lstm<T: Element, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    store.register(
        &format!("{prefix}.wx"),
        &[input, 4 * hidden],
        Init::FanInUniform { fan_in: input },
        rng,
    )?;
    store.register(
        &format!("{prefix}.wh"),
        &[hidden, 4 * hidden],
        Init::Orthogonal { gain: 1.0 },
        rng,
    )?;
    store.register(&format!("{prefix}.b"), &[4 * hidden], Init::Zeros, rng)
}

/// Projects a whole sequence through the input weights at once:
/// `x [N, in] -> [N, 4H]` including the bias.
pub fn lstm_input_projection<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let wx = g.param(store, &format!("{prefix}.wx"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let xw = g.matmul(x, wx)?;
    g.add_bias(xw, b)
}

/// One recurrent step given projected inputs `xproj [B, 4H]`.
pub fn lstm_recurrent<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    xproj: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let wh = g.param(store, &format!("{prefix}.wh"))?;
    let hid = g.shape(c)[1];
    let hw = g.matmul(h, wh)?;
    let gates = g.add(xproj, hw)?;
    let hc = g.lstm_cell(gates, c)?;
    let h_new = g.slice_cols(hc, 0, hid)?;
    let c_new = g.slice_cols(hc, hid, 2 * hid)?;
    Ok((h_new, c_new))
}

/// Standard LSTM cell step: `(x, h, c) -> (h', c')`.
pub fn lstm_step<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let xproj = lstm_input_projection(g, store, prefix, x)?;
    lstm_recurrent(g, store, prefix, xproj, h, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv_sizes_for_policy_trunk() {
        let a = conv_out_size(64, 8, 4).unwrap();
        assert_eq!(a, 15);
        assert_eq!(conv_out_size(a, 4, 2), Some(6));
        assert_eq!(conv_out_size(3, 4, 1), None);
    }

    #[test]
    fn dense_identity_passthrough() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        register_dense(&mut store, "d", 3, 3, &mut rng).unwrap();
        let w = store.get_mut("d.w").unwrap();
        w.values_mut().iter_mut().for_each(|v| *v = 0.0);
        for i in 0..3 {
            w.values_mut()[i * 3 + i] = 1.0;
        }
        let mut g = Graph::new();
        let x = g.input(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.5]).unwrap();
        let y = dense(&mut g, &store, "d", x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn dense_scalar_product_rule() {
        let mut store = ParamStore::<f64>::new();
        store
            .insert("d.w", crate::Tensor::new(&[1, 1], vec![3.0]).unwrap(), Init::Zeros)
            .unwrap();
        store
            .insert("d.b", crate::Tensor::new(&[1], vec![1.0]).unwrap(), Init::Zeros)
            .unwrap();
        let mut g = Graph::new();
        let x = g.tracked_input(&[1, 1], vec![2.0]).unwrap();
        let y = dense(&mut g, &store, "d", x).unwrap();
        assert_eq!(g.value(y), &[7.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0]);
        let pg = grads.params(&g);
        assert_eq!(pg["d.w"], vec![2.0]);
        assert_eq!(pg["d.b"], vec![1.0]);
    }

    #[test]
    fn unit_conv_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut w = vec![0.0; 3 * 3];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        store
            .insert("c.w", crate::Tensor::new(&[1, 1, 3, 3], w).unwrap(), Init::Zeros)
            .unwrap();
        store
            .insert("c.b", crate::Tensor::zeros(&[3]), Init::Zeros)
            .unwrap();
        let xs: Vec<f64> = (0..2 * 4 * 5 * 3).map(|i| i as f64 * 0.1).collect();
        let mut g = Graph::new();
        let x = g.input(&[2, 4, 5, 3], xs.clone()).unwrap();
        let y = conv2d(&mut g, &store, "c", x, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 5, 3]);
        assert_eq!(g.value(y), &xs[..]);
    }

    #[test]
    fn zero_lstm_gives_zero_hidden() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        register_lstm(&mut store, "l", 3, 4, &mut rng).unwrap();
        for (_, p) in store.iter_mut() {
            p.tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let x = g.input(&[2, 3], vec![0.3, -1.0, 2.0, 1.0, 1.0, 1.0]).unwrap();
        let h = g.input(&[2, 4], vec![0.2; 8]).unwrap();
        let c = g.input(&[2, 4], vec![0.0; 8]).unwrap();
        let (h1, c1) = lstm_step(&mut g, &store, "l", x, h, c).unwrap();
        assert!(g.value(h1).iter().all(|&v| v == 0.0));
        assert!(g.value(c1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_set_single_unit() {
        // one unit, one input: gates = x * wx + b, wh = 0
        let mut store = ParamStore::<f64>::new();
        store
            .insert(
                "l.wx",
                crate::Tensor::new(&[1, 4], vec![1.0, 2.0, -1.0, 0.5]).unwrap(),
                Init::Zeros,
            )
            .unwrap();
        store
            .insert("l.wh", crate::Tensor::zeros(&[1, 4]), Init::Zeros)
            .unwrap();
        store
            .insert(
                "l.b",
                crate::Tensor::new(&[4], vec![0.0, 0.0, 0.5, 0.0]).unwrap(),
                Init::Zeros,
            )
            .unwrap();
        let (x, c0) = (0.7f64, 0.3f64);
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let i = sig(x * 1.0);
        let f = sig(x * 2.0);
        let cand = (x * -1.0 + 0.5).tanh();
        let o = sig(x * 0.5);
        let c1 = f * c0 + i * cand;
        let h1 = o * c1.tanh();

        let mut g = Graph::new();
        let xv = g.input(&[1, 1], vec![x]).unwrap();
        let h = g.input(&[1, 1], vec![0.9]).unwrap();
        let c = g.input(&[1, 1], vec![c0]).unwrap();
        let (hv, cv) = lstm_step(&mut g, &store, "l", xv, h, c).unwrap();
        assert!((g.value(hv)[0] - h1).abs() < 1e-14);
        assert!((g.value(cv)[0] - c1).abs() < 1e-14);
    }
}
