//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar loss with respect to every node that depends on a
//! parameter or a gradient-tracked input.

use std::collections::BTreeMap;

use crate::error::{shape_err, NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Element;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
struct ConvGeom {
    batch: usize,
    in_h: usize,
    in_w: usize,
    in_c: usize,
    k: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    out_c: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.k * self.k * self.in_c
    }
    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    MulConst(Var, Vec<T>),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<T>,
        geom: ConvGeom,
    },
    LstmCell {
        gates: Var,
        c: Var,
        // post-activation gates [B, 4H] and tanh(c') [B, H]
        act: Vec<T>,
        tanh_c: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    GaussianLogProb {
        mean: Var,
        log_std: Var,
        actions: Vec<T>,
    },
    GaussianKl {
        mean: Var,
        log_std: Var,
        old_mean: Vec<T>,
        old_log_std: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    tracked: bool,
}

/// Gradient of a scalar with respect to the tape.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(String, Var)>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every parameter referenced by the graph. Parameters that
    /// were read but did not influence the loss receive zeros.
    pub fn params(&self, graph: &Graph<T>) -> BTreeMap<String, Vec<T>> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = self
                    .get(*v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); graph.nodes[v.0].value.len()]);
                (name.clone(), g)
            })
            .collect()
    }
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, shape: &[usize], values: Vec<T>) -> Result<Var> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(shape_err("input", shape, &[values.len()]));
        }
        Ok(self.push(shape.to_vec(), values, Op::Input, false))
    }

    /// Input whose gradient is tracked (used for input-gradient checks).
    pub fn tracked_input(&mut self, shape: &[usize], values: Vec<T>) -> Result<Var> {
        let v = self.input(shape, values)?;
        self.nodes[v.0].tracked = true;
        Ok(v)
    }

    /// Reads a parameter from the store. Repeated reads of the same name return
    /// the same node, so gradients over unrolled loops accumulate.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some((_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let t = store.get(name)?;
        let v = self.push(t.shape().to_vec(), t.values().to_vec(), Op::Param, true);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            2 => Ok((s[0], s[1])),
            1 => Ok((1, s[0])),
            _ => Err(shape_err(op, s, &[])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a),
            (k, 1),
            self.value(b),
            (n, 1),
            T::zero(),
            &mut out,
            (n, 1),
        );
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), tracked))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_bias")?;
        if self.value(b).len() != n {
            return Err(shape_err("add_bias", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b);
        let out: Vec<T> = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(&a, &c)| a + c))
            .collect();
        debug_assert_eq!(out.len(), m * n);
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(x) || self.tracked(b);
        Ok(self.push(shape, out, Op::AddBias(x, b), tracked))
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "add", |x, y| x + y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "sub", |x, y| x - y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_op(a, b, "mul", |x, y| x * y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let tracked = self.tracked(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), tracked)
    }

    pub fn add_const(&mut self, a: Var, c: &[T]) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(shape_err("add_const", self.shape(a), &[c.len()]));
        }
        let out = self.value(a).iter().zip(c).map(|(&x, &y)| x + y).collect();
        let tracked = self.tracked(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddConst(a), tracked))
    }

    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(shape_err("mul_const", self.shape(a), &[c.len()]));
        }
        let out = self.value(a).iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let tracked = self.tracked(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulConst(a, c), tracked))
    }

    fn map_op(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let tracked = self.tracked(a);
        self.push(self.shape(a).to_vec(), out, op, tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Exp(a), |x| x.exp())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map_op(a, Op::Square(a), |x| x * x)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), tracked))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_cols")?;
        if start >= end || end > cols {
            return Err(shape_err("slice_cols", self.shape(x), &[start, end]));
        }
        let w = end - start;
        let v = self.value(x);
        let out: Vec<T> = (0..rows)
            .flat_map(|r| v[r * cols + start..r * cols + end].iter().copied())
            .collect();
        let tracked = self.tracked(x);
        Ok(self.push(vec![rows, w], out, Op::SliceCols(x, start, end), tracked))
    }

    /// Selects rows of a 2-d (or batched n-d) tensor. Rows may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = shape[0];
        let width: usize = shape[1..].iter().product();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err("gather_rows", &shape, &[bad]));
        }
        let v = self.value(x);
        let out: Vec<T> = rows
            .iter()
            .flat_map(|&r| v[r * width..(r + 1) * width].iter().copied())
            .collect();
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let tracked = self.tracked(x);
        Ok(self.push(out_shape, out, Op::GatherRows(x, rows.to_vec()), tracked))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(shape_err("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += self.shape(p)[0];
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(shape, out, Op::ConcatRows(parts.to_vec()), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let v = self.value(x).to_vec();
        let tracked = self.tracked(x);
        Ok(self.push(shape.to_vec(), v, Op::Reshape(x), tracked))
    }

    /// Valid cross-correlation of NHWC `x` with a `[k, k, in_c, out_c]` kernel.
    /// Output spatial size is `(H - k) / stride + 1` with floor division.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != ws[1] || ws[2] != xs[3] {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if self.value(b).len() != ws[3] {
            return Err(shape_err("conv2d bias", &ws, self.shape(b)));
        }
        let (batch, in_h, in_w, in_c) = (xs[0], xs[1], xs[2], xs[3]);
        let k = ws[0];
        if stride == 0 || k > in_h || k > in_w {
            return Err(NnError::Geometry(format!(
                "kernel {k} stride {stride} does not fit input {in_h}x{in_w}"
            )));
        }
        let geom = ConvGeom {
            batch,
            in_h,
            in_w,
            in_c,
            k,
            stride,
            out_h: (in_h - k) / stride + 1,
            out_w: (in_w - k) / stride + 1,
            out_c: ws[3],
        };
        let cols = im2col(self.value(x), &geom);
        let (rows, patch) = (geom.rows(), geom.patch());
        let mut out = vec![T::zero(); rows * geom.out_c];
        // seed with bias then accumulate
        let bv = self.value(b);
        for row in out.chunks_mut(geom.out_c) {
            row.copy_from_slice(bv);
        }
        T::gemm(
            rows,
            patch,
            geom.out_c,
            &cols,
            (patch, 1),
            self.value(w),
            (geom.out_c, 1),
            T::one(),
            &mut out,
            (geom.out_c, 1),
        );
        let shape = vec![batch, geom.out_h, geom.out_w, geom.out_c];
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        Ok(self.push(shape, out, Op::Conv2d { x, w, b, cols, geom }, tracked))
    }

    /// Fused LSTM nonlinearity. `gates` holds pre-activations `[B, 4H]` in
    /// input, forget, candidate, output order; `c` is the previous cell state.
    /// Returns `[B, 2H]` with the new hidden state in the first `H` columns
    /// and the new cell state in the last `H`.
    pub fn lstm_cell(&mut self, gates: Var, c: Var) -> Result<Var> {
        let (b, four_h) = self.dims2(gates, "lstm_cell")?;
        let (b2, h) = self.dims2(c, "lstm_cell")?;
        if b != b2 || four_h != 4 * h {
            return Err(shape_err("lstm_cell", self.shape(gates), self.shape(c)));
        }
        let gv = self.value(gates);
        let cv = self.value(c);
        let mut act = vec![T::zero(); b * four_h];
        let mut tanh_c = vec![T::zero(); b * h];
        let mut out = vec![T::zero(); b * 2 * h];
        for r in 0..b {
            let g = &gv[r * four_h..(r + 1) * four_h];
            let a = &mut act[r * four_h..(r + 1) * four_h];
            for j in 0..h {
                let i_g = sigmoid(g[j]);
                let f_g = sigmoid(g[h + j]);
                let c_g = g[2 * h + j].tanh();
                let o_g = sigmoid(g[3 * h + j]);
                a[j] = i_g;
                a[h + j] = f_g;
                a[2 * h + j] = c_g;
                a[3 * h + j] = o_g;
                let c_new = f_g * cv[r * h + j] + i_g * c_g;
                let tc = c_new.tanh();
                tanh_c[r * h + j] = tc;
                out[r * 2 * h + j] = o_g * tc;
                out[r * 2 * h + h + j] = c_new;
            }
        }
        let tracked = self.tracked(gates) || self.tracked(c);
        Ok(self.push(
            vec![b, 2 * h],
            out,
            Op::LstmCell {
                gates,
                c,
                act,
                tanh_c,
            },
            tracked,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let tracked = self.tracked(x);
        self.push(vec![1], vec![s], Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_f64(self.value(x).len() as f64);
        let s: T = self.value(x).iter().copied().sum();
        let tracked = self.tracked(x);
        self.push(vec![1], vec![s / n], Op::Mean(x), tracked)
    }

    fn check_gaussian(&self, mean: Var, log_std: Var, op: &'static str) -> Result<(usize, usize)> {
        let (b, a) = self.dims2(mean, op)?;
        if self.value(log_std).len() != a {
            return Err(shape_err(op, self.shape(mean), self.shape(log_std)));
        }
        Ok((b, a))
    }

    /// Per-row log density of a diagonal Gaussian with state-independent
    /// `log_std`, evaluated at constant `actions`.
    pub fn gaussian_log_prob(&mut self, mean: Var, log_std: Var, actions: &[T]) -> Result<Var> {
        let (b, a) = self.check_gaussian(mean, log_std, "gaussian_log_prob")?;
        if actions.len() != b * a {
            return Err(shape_err("gaussian_log_prob", self.shape(mean), &[actions.len()]));
        }
        let mv = self.value(mean);
        let ls = self.value(log_std);
        let half = T::from_f64(0.5);
        let c = T::from_f64(0.5 * LN_2PI);
        let out = (0..b)
            .map(|r| {
                (0..a)
                    .map(|j| {
                        let z = (actions[r * a + j] - mv[r * a + j]) / ls[j].exp();
                        -half * z * z - ls[j] - c
                    })
                    .sum()
            })
            .collect();
        let tracked = self.tracked(mean) || self.tracked(log_std);
        Ok(self.push(
            vec![b],
            out,
            Op::GaussianLogProb {
                mean,
                log_std,
                actions: actions.to_vec(),
            },
            tracked,
        ))
    }

    /// Per-row `KL(old || new)` between diagonal Gaussians where the old
    /// distribution is constant.
    pub fn gaussian_kl(
        &mut self,
        old_mean: &[T],
        old_log_std: &[T],
        mean: Var,
        log_std: Var,
    ) -> Result<Var> {
        let (b, a) = self.check_gaussian(mean, log_std, "gaussian_kl")?;
        if old_mean.len() != b * a || old_log_std.len() != a {
            return Err(shape_err("gaussian_kl", self.shape(mean), &[old_mean.len()]));
        }
        let mv = self.value(mean);
        let ls = self.value(log_std);
        let half = T::from_f64(0.5);
        let out = (0..b)
            .map(|r| {
                (0..a)
                    .map(|j| {
                        let var_new = (ls[j] + ls[j]).exp();
                        let var_old = (old_log_std[j] + old_log_std[j]).exp();
                        let d = old_mean[r * a + j] - mv[r * a + j];
                        ls[j] - old_log_std[j] + (var_old + d * d) / (var_new + var_new) - half
                    })
                    .sum()
            })
            .collect();
        let tracked = self.tracked(mean) || self.tracked(log_std);
        Ok(self.push(
            vec![b],
            out,
            Op::GaussianKl {
                mean,
                log_std,
                old_mean: old_mean.to_vec(),
                old_log_std: old_log_std.to_vec(),
            },
            tracked,
        ))
    }

    /// Numerically stable binary cross-entropy on logits, one value per element.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let n = self.value(logits).len();
        if targets.len() != n {
            return Err(shape_err("bce_with_logits", self.shape(logits), &[targets.len()]));
        }
        let out = self
            .value(logits)
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .collect();
        let tracked = self.tracked(logits);
        Ok(self.push(
            vec![n],
            out,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            tracked,
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].tracked {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(buf);
        };
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a, "").unwrap();
                let n = self.dims2(*b, "").unwrap().1;
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                acc(*a, &mut |da| {
                    // da += g * b^T
                    T::gemm(m, n, k, g, (n, 1), bv, (1, n), T::one(), da, (k, 1));
                });
                acc(*b, &mut |db| {
                    // db += a^T * g
                    T::gemm(k, m, n, av, (1, k), g, (n, 1), T::one(), db, (n, 1));
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |dx| add_into(dx, g));
                let n = self.nodes[b.0].value.len();
                acc(*b, &mut |db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g));
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s)),
            Op::AddConst(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::MulConst(a, c) => {
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * c[i];
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (T::one() - y[i] * y[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i];
                    }
                });
            }
            Op::Square(a) => {
                let x = &self.nodes[a.0].value;
                let two = T::from_f64(2.0);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += two * x[i] * g[i];
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let ps = &self.nodes[p.0].shape;
                    let w = if ps.len() == 1 { ps[0] } else { ps[1] };
                    acc(p, &mut |d| {
                        for r in 0..rows {
                            for j in 0..w {
                                d[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(x, start, end) => {
                let cols = *self.nodes[x.0].shape.last().unwrap();
                let w = end - start;
                acc(*x, &mut |d| {
                    for (r, row) in g.chunks(w).enumerate() {
                        for j in 0..w {
                            d[r * cols + start + j] += row[j];
                        }
                    }
                });
            }
            Op::GatherRows(x, rows) => {
                let width: usize = self.nodes[x.0].shape[1..].iter().product();
                acc(*x, &mut |d| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut d[r * width..(r + 1) * width], &g[i * width..(i + 1) * width]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc(p, &mut |d| add_into(d, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Conv2d { x, w, b, cols, geom } => {
                let (rows, patch, oc) = (geom.rows(), geom.patch(), geom.out_c);
                acc(*b, &mut |db| {
                    for row in g.chunks(oc) {
                        add_into(db, row);
                    }
                });
                acc(*w, &mut |dw| {
                    // dw += cols^T * g
                    T::gemm(patch, rows, oc, cols, (1, patch), g, (oc, 1), T::one(), dw, (oc, 1));
                });
                let wv = &self.nodes[w.0].value;
                acc(*x, &mut |dx| {
                    let mut dcols = vec![T::zero(); rows * patch];
                    T::gemm(rows, oc, patch, g, (oc, 1), wv, (1, oc), T::zero(), &mut dcols, (patch, 1));
                    col2im_add(&dcols, geom, dx);
                });
            }
            Op::LstmCell {
                gates,
                c,
                act,
                tanh_c,
            } => {
                let bsz = node.shape[0];
                let h = node.shape[1] / 2;
                let cv = &self.nodes[c.0].value;
                let mut dgates = vec![T::zero(); bsz * 4 * h];
                let mut dc_prev = vec![T::zero(); bsz * h];
                for r in 0..bsz {
                    let a = &act[r * 4 * h..(r + 1) * 4 * h];
                    let dg = &mut dgates[r * 4 * h..(r + 1) * 4 * h];
                    for j in 0..h {
                        let (i_g, f_g, c_g, o_g) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j]);
                        let tc = tanh_c[r * h + j];
                        let dh = g[r * 2 * h + j];
                        let dc = g[r * 2 * h + h + j] + dh * o_g * (T::one() - tc * tc);
                        let d_o = dh * tc;
                        let d_i = dc * c_g;
                        let d_c = dc * i_g;
                        let d_f = dc * cv[r * h + j];
                        dc_prev[r * h + j] = dc * f_g;
                        dg[j] = d_i * i_g * (T::one() - i_g);
                        dg[h + j] = d_f * f_g * (T::one() - f_g);
                        dg[2 * h + j] = d_c * (T::one() - c_g * c_g);
                        dg[3 * h + j] = d_o * o_g * (T::one() - o_g);
                    }
                }
                acc(*gates, &mut |d| add_into(d, &dgates));
                acc(*c, &mut |d| add_into(d, &dc_prev));
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = T::from_f64(self.nodes[x.0].value.len() as f64);
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::GaussianLogProb {
                mean,
                log_std,
                actions,
            } => {
                let a = self.nodes[log_std.0].value.len();
                let mv = &self.nodes[mean.0].value;
                let ls = &self.nodes[log_std.0].value;
                acc(*mean, &mut |d| {
                    for (i, dv) in d.iter_mut().enumerate() {
                        let j = i % a;
                        let var = (ls[j] + ls[j]).exp();
                        *dv += g[i / a] * (actions[i] - mv[i]) / var;
                    }
                });
                acc(*log_std, &mut |d| {
                    for i in 0..mv.len() {
                        let j = i % a;
                        let z = (actions[i] - mv[i]) / ls[j].exp();
                        d[j] += g[i / a] * (z * z - T::one());
                    }
                });
            }
            Op::GaussianKl {
                mean,
                log_std,
                old_mean,
                old_log_std,
            } => {
                let a = self.nodes[log_std.0].value.len();
                let mv = &self.nodes[mean.0].value;
                let ls = &self.nodes[log_std.0].value;
                acc(*mean, &mut |d| {
                    for (i, dv) in d.iter_mut().enumerate() {
                        let j = i % a;
                        let var = (ls[j] + ls[j]).exp();
                        *dv += g[i / a] * (mv[i] - old_mean[i]) / var;
                    }
                });
                acc(*log_std, &mut |d| {
                    for i in 0..mv.len() {
                        let j = i % a;
                        let var_new = (ls[j] + ls[j]).exp();
                        let var_old = (old_log_std[j] + old_log_std[j]).exp();
                        let diff = old_mean[i] - mv[i];
                        d[j] += g[i / a] * (T::one() - (var_old + diff * diff) / var_new);
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let z = &self.nodes[logits.0].value;
                acc(*logits, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (sigmoid(z[i]) - targets[i]);
                    }
                });
            }
        }
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    let row_len = g.k * g.in_c;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let r = (b * g.out_h + oy) * g.out_w + ox;
                let dst = &mut cols[r * patch..(r + 1) * patch];
                for ky in 0..g.k {
                    let iy = oy * g.stride + ky;
                    let src = ((b * g.in_h + iy) * g.in_w + ox * g.stride) * g.in_c;
                    dst[ky * row_len..(ky + 1) * row_len].copy_from_slice(&x[src..src + row_len]);
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Element>(dcols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let patch = g.patch();
    let row_len = g.k * g.in_c;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let r = (b * g.out_h + oy) * g.out_w + ox;
                let src = &dcols[r * patch..(r + 1) * patch];
                for ky in 0..g.k {
                    let iy = oy * g.stride + ky;
                    let dst = ((b * g.in_h + iy) * g.in_w + ox * g.stride) * g.in_c;
                    add_into(&mut dx[dst..dst + row_len], &src[ky * row_len..(ky + 1) * row_len]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shape_error_names_both() {
        let mut g = Graph::<f64>::new();
        let a = g.input(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.input(&[2, 3], vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn untracked_inputs_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.input(&[1], vec![2.0]).unwrap();
        let b = g.tracked_input(&[1], vec![3.0]).unwrap();
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap(), &[2.0]);
    }

    #[test]
    fn param_reads_are_shared() {
        let mut rng = <rand::rngs::StdRng as rand::SeedableRng>::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        store
            .register("w", &[1], crate::params::Init::Constant(2.0), &mut rng)
            .unwrap();
        let mut g = Graph::new();
        let w1 = g.param(&store, "w").unwrap();
        let w2 = g.param(&store, "w").unwrap();
        assert_eq!(w1, w2);
        let y = g.mul(w1, w2).unwrap();
        let grads = g.backward(y).unwrap().params(&g);
        assert_eq!(grads["w"], vec![4.0]);
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let mut g = Graph::<f64>::new();
        let z = g.input(&[3], vec![0.0; 3]).unwrap();
        let l = g.bce_with_logits(z, &[1.0, 0.0, 1.0]).unwrap();
        for &v in g.value(l) {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }
}
