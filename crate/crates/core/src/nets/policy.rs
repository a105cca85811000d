//! Visuomotor policy: conv trunk over pixels, dense encoder over
//! proprioception, an LSTM over their concatenation, a Gaussian action head
//! and an auxiliary object-position head on the trunk features.

use rand::Rng;
use rial_nnkit::layers::{
    conv2d, conv_out_size, dense, dense_tanh, lstm_input_projection, lstm_recurrent, register_conv, register_dense,
    register_lstm,
};
use rial_nnkit::{Element, Graph, Init, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim2d::env::{proprio_dim, Observation};
use crate::sim2d::render::{IMAGE_LEN, IMAGE_SIDE};
use crate::sim2d::task::TaskSpec;

pub const CONV1: (usize, usize, usize) = (16, 8, 4);
pub const CONV2: (usize, usize, usize) = (32, 4, 2);
pub const TRUNK_UNITS: usize = 128;
pub const PROPRIO_UNITS: usize = 128;
pub const LSTM_UNITS: usize = 100;
pub const AUX_HIDDEN: (usize, usize) = (200, 100);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub action_dim: usize,
    pub proprio_dim: usize,
    pub aux_dim: usize,
    /// Recurrent core; a dense layer of the same width when off.
    pub lstm: bool,
    pub aux_head: bool,
    /// Scalar value head on the core output (value-from-pixels ablation).
    pub value_head: bool,
    pub init_log_std: f64,
}

impl PolicyConfig {
    pub fn for_task(task: &TaskSpec) -> Self {
        Self {
            action_dim: task.arm.action_dim(),
            proprio_dim: proprio_dim(&task.arm),
            aux_dim: task.aux_dim(),
            lstm: true,
            aux_head: true,
            value_head: false,
            init_log_std: task.init_log_std(),
        }
    }

    /// Architecture fingerprint stored in checkpoints.
    pub fn arch(&self) -> String {
        format!(
            "policy-v1 a={} p={} aux={} lstm={} aux_head={} value_head={} img={IMAGE_SIDE}",
            self.action_dim, self.proprio_dim, self.aux_dim, self.lstm as u8, self.aux_head as u8, self.value_head as u8
        )
    }

    pub fn state_width(&self) -> usize {
        if self.lstm {
            LSTM_UNITS
        } else {
            0
        }
    }

    fn conv2_side() -> usize {
        let s1 = conv_out_size(IMAGE_SIDE, CONV1.1, CONV1.2).expect("trunk geometry");
        conv_out_size(s1, CONV2.1, CONV2.2).expect("trunk geometry")
    }

    pub fn flat_trunk_dim() -> usize {
        let s = Self::conv2_side();
        s * s * CONV2.0
    }

    /// Registers every parameter of the policy into `store`.
    pub fn register<T: Element, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        register_conv(store, "conv1", CONV1.1, 3, CONV1.0, rng)?;
        register_conv(store, "conv2", CONV2.1, CONV1.0, CONV2.0, rng)?;
        register_dense(store, "fc", Self::flat_trunk_dim(), TRUNK_UNITS, rng)?;
        register_dense(store, "proprio", self.proprio_dim, PROPRIO_UNITS, rng)?;
        let core_in = TRUNK_UNITS + PROPRIO_UNITS;
        if self.lstm {
            register_lstm(store, "lstm", core_in, LSTM_UNITS, rng)?;
        } else {
            register_dense(store, "core", core_in, LSTM_UNITS, rng)?;
        }
        register_dense(store, "mean", LSTM_UNITS, self.action_dim, rng)?;
        store.register("log_std", &[self.action_dim], Init::Constant(self.init_log_std), rng)?;
        if self.aux_head {
            register_dense(store, "aux1", TRUNK_UNITS, AUX_HIDDEN.0, rng)?;
            register_dense(store, "aux2", AUX_HIDDEN.0, AUX_HIDDEN.1, rng)?;
            register_dense(store, "aux_out", AUX_HIDDEN.1, self.aux_dim, rng)?;
        }
        if self.value_head {
            register_dense(store, "vhead", LSTM_UNITS, 1, rng)?;
        }
        Ok(())
    }

    /// Parameter names updated by the auxiliary loss: the trunk plus the head.
    pub fn aux_param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["conv1", "conv2", "fc"]
            .iter()
            .flat_map(|p| [format!("{p}.w"), format!("{p}.b")])
            .collect();
        if self.aux_head {
            for p in ["aux1", "aux2", "aux_out"] {
                v.push(format!("{p}.w"));
                v.push(format!("{p}.b"));
            }
        }
        v
    }

    /// Parameter names updated by the policy loss (everything but the aux head).
    pub fn policy_param_names<T: Element>(&self, store: &ParamStore<T>) -> Vec<String> {
        store
            .names()
            .filter(|n| !n.starts_with("aux"))
            .map(str::to_string)
            .collect()
    }
}

/// Batched inputs for a set of sequence segments laid out back to back.
pub struct SeqInput<'a, T> {
    /// `N * IMAGE_LEN` values in `[0, 1]`.
    pub pixels: &'a [T],
    pub proprio: &'a [T],
    /// Segment lengths, summing to `N`.
    pub seg_lens: &'a [usize],
    /// Initial recurrent state per segment, `S * H` each.
    pub h0: &'a [T],
    pub c0: &'a [T],
}

pub struct SeqOutput<T> {
    /// `[N, A]`, rows in input order.
    pub mean: Var,
    pub log_std: Var,
    /// `[N, 128]` trunk features.
    pub trunk: Var,
    pub aux: Option<Var>,
    pub value: Option<Var>,
    /// Recurrent state after each segment's last step.
    pub h_last: Vec<T>,
    pub c_last: Vec<T>,
}

pub fn check_pixels<T: Element>(px: &[T]) -> Result<()> {
    if let Some(i) = px.iter().position(|v| !(Element::to_f64(*v) >= 0.0 && Element::to_f64(*v) <= 1.0)) {
        return Err(Error::Invalid(format!(
            "pixel input {i} is {} and not scaled into [0, 1]",
            Element::to_f64(px[i])
        )));
    }
    Ok(())
}

pub fn scale_pixels<T: Element>(px: &[u8]) -> Vec<T> {
    px.iter().map(|&v| T::from_f64(v as f64 / 255.0)).collect()
}

/// Trunk features `[N, 128]` from scaled pixels.
pub fn trunk<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, pixels: &[T]) -> Result<Var> {
    if pixels.len() % IMAGE_LEN != 0 || pixels.is_empty() {
        return Err(Error::Invalid(format!("pixel buffer of {} values", pixels.len())));
    }
    check_pixels(pixels)?;
    let n = pixels.len() / IMAGE_LEN;
    let x = g.input(&[n, IMAGE_SIDE, IMAGE_SIDE, 3], pixels.to_vec())?;
    let c1 = conv2d(g, store, "conv1", x, CONV1.2)?;
    let c1 = g.tanh(c1);
    let c2 = conv2d(g, store, "conv2", c1, CONV2.2)?;
    let c2 = g.tanh(c2);
    let flat = g.reshape(c2, &[n, PolicyConfig::flat_trunk_dim()])?;
    Ok(dense_tanh(g, store, "fc", flat)?)
}

/// Auxiliary object-coordinate predictions from trunk features.
pub fn aux_head<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, trunk: Var) -> Result<Var> {
    let a = dense_tanh(g, store, "aux1", trunk)?;
    let a = dense_tanh(g, store, "aux2", a)?;
    Ok(dense(g, store, "aux_out", a)?)
}

pub fn forward<T: Element>(
    cfg: &PolicyConfig,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    inp: &SeqInput<'_, T>,
) -> Result<SeqOutput<T>> {
    let n: usize = inp.seg_lens.iter().sum();
    let s = inp.seg_lens.len();
    if n == 0 || inp.seg_lens.contains(&0) {
        return Err(Error::Invalid("empty sequence segment".into()));
    }
    if inp.pixels.len() != n * IMAGE_LEN || inp.proprio.len() != n * cfg.proprio_dim {
        return Err(Error::Shape(format!(
            "policy input: {n} frames but {} pixel and {} proprio values",
            inp.pixels.len(),
            inp.proprio.len()
        )));
    }
    let hw = cfg.state_width();
    if inp.h0.len() != s * hw || inp.c0.len() != s * hw {
        return Err(Error::Shape(format!(
            "recurrent state for {s} segments needs {} values, got {}",
            s * hw,
            inp.h0.len()
        )));
    }
    let tr = trunk(g, store, inp.pixels)?;
    let p = g.input(&[n, cfg.proprio_dim], inp.proprio.to_vec())?;
    let pe = dense_tanh(g, store, "proprio", p)?;
    let feat = g.concat_cols(&[tr, pe])?;

    let (core, h_last, c_last) = if cfg.lstm {
        lstm_segments(g, store, feat, inp, hw)?
    } else {
        (dense_tanh(g, store, "core", feat)?, Vec::new(), Vec::new())
    };

    let m = dense(g, store, "mean", core)?;
    let mean = g.tanh(m);
    let log_std = g.param(store, "log_std")?;
    let aux = if cfg.aux_head {
        Some(aux_head(g, store, tr)?)
    } else {
        None
    };
    let value = if cfg.value_head {
        Some(dense(g, store, "vhead", core)?)
    } else {
        None
    };
    Ok(SeqOutput {
        mean,
        log_std,
        trunk: tr,
        aux,
        value,
        h_last,
        c_last,
    })
}

/// Runs all segments in lock step, longest first, so step `j` is one
/// batched cell evaluation over the segments still active.
fn lstm_segments<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    feat: Var,
    inp: &SeqInput<'_, T>,
    hw: usize,
) -> Result<(Var, Vec<T>, Vec<T>)> {
    let lens = inp.seg_lens;
    let s = lens.len();
    let mut start = vec![0usize; s];
    for i in 1..s {
        start[i] = start[i - 1] + lens[i - 1];
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| lens[b].cmp(&lens[a]).then(a.cmp(&b)));
    let reorder = |v: &[T]| -> Vec<T> { order.iter().flat_map(|&k| v[k * hw..(k + 1) * hw].iter().copied()).collect() };

    let xproj = lstm_input_projection(g, store, "lstm", feat)?;
    let mut h = g.input(&[s, hw], reorder(inp.h0))?;
    let mut c = g.input(&[s, hw], reorder(inp.c0))?;
    let mut h_last = vec![T::zero(); s * hw];
    let mut c_last = vec![T::zero(); s * hw];
    let mut outs = Vec::with_capacity(lens[order[0]]);
    let mut out_rows = Vec::new();
    let mut active = s;
    for j in 0..lens[order[0]] {
        let now = order.iter().take_while(|&&k| lens[k] > j).count();
        if now < active {
            let keep: Vec<usize> = (0..now).collect();
            h = g.gather_rows(h, &keep)?;
            c = g.gather_rows(c, &keep)?;
            active = now;
        }
        let rows: Vec<usize> = order[..active].iter().map(|&k| start[k] + j).collect();
        let xj = g.gather_rows(xproj, &rows)?;
        let (h2, c2) = lstm_recurrent(g, store, "lstm", xj, h, c)?;
        h = h2;
        c = c2;
        for (i, &k) in order[..active].iter().enumerate() {
            if lens[k] == j + 1 {
                h_last[k * hw..(k + 1) * hw].copy_from_slice(&g.value(h)[i * hw..(i + 1) * hw]);
                c_last[k * hw..(k + 1) * hw].copy_from_slice(&g.value(c)[i * hw..(i + 1) * hw]);
            }
        }
        outs.push(h);
        out_rows.extend(rows);
    }
    let all = g.concat_rows(&outs)?;
    let mut perm = vec![0usize; out_rows.len()];
    for (r, &flat) in out_rows.iter().enumerate() {
        perm[flat] = r;
    }
    Ok((g.gather_rows(all, &perm)?, h_last, c_last))
}

/// Recurrent state carried across an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f32>,
    pub c: Vec<f32>,
}

/// One policy evaluation on a single observation.
#[derive(Clone, Debug)]
pub struct PolicyStep {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub state: LstmState,
    pub aux: Option<Vec<f64>>,
    pub value: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct VisuomotorPolicy {
    pub cfg: PolicyConfig,
    pub store: ParamStore<f32>,
}

impl VisuomotorPolicy {
    pub fn new<R: Rng + ?Sized>(cfg: PolicyConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        cfg.register(&mut store, rng)?;
        Ok(Self { cfg, store })
    }

    /// Zero state used at every episode start.
    pub fn initial_state(&self) -> LstmState {
        let w = self.cfg.state_width();
        LstmState {
            h: vec![0.0; w],
            c: vec![0.0; w],
        }
    }

    pub fn act(&self, obs: &Observation, state: &LstmState) -> Result<PolicyStep> {
        if obs.pixels.len() != IMAGE_LEN {
            return Err(Error::Invalid(format!("observation has {} pixel bytes", obs.pixels.len())));
        }
        let px: Vec<f32> = scale_pixels(&obs.pixels);
        let pr: Vec<f32> = obs.proprio.iter().map(|&v| v as f32).collect();
        let mut g = Graph::new();
        let out = forward(
            &self.cfg,
            &mut g,
            &self.store,
            &SeqInput {
                pixels: &px,
                proprio: &pr,
                seg_lens: &[1],
                h0: &state.h,
                c0: &state.c,
            },
        )?;
        let to64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        let mean = to64(g.value(out.mean));
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("policy mean".into()));
        }
        Ok(PolicyStep {
            mean,
            log_std: to64(g.value(out.log_std)),
            state: LstmState {
                h: out.h_last,
                c: out.c_last,
            },
            aux: out.aux.map(|a| to64(g.value(a))),
            value: out.value.map(|v| g.value(v)[0] as f64),
        })
    }
}
