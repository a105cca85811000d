//! Finite-difference gradient audit of every layer and every assembled
//! network, run in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rial_nnkit::gradcheck::check;
use rial_nnkit::layers::{
    conv2d, dense_tanh, lstm_input_projection, lstm_recurrent, lstm_step, register_conv, register_dense,
    register_lstm,
};
use rial_nnkit::{Graph, Init, ParamStore, Tensor, Var};
use serde::Serialize;

use crate::error::Result;
use crate::nets::policy::{forward, SeqInput};
use crate::nets::{DiscriminatorNet, PolicyConfig, ValueNet};
use crate::sim2d::render::IMAGE_LEN;
use crate::sim2d::task::{TaskKind, TaskSpec};

pub const STEP: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
/// Long unrolls accumulate more rounding in the differences.
pub const TOL_LONG_UNROLL: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckRow {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn insert(store: &mut ParamStore<f64>, name: &str, shape: &[usize], v: Vec<f64>) -> Result<()> {
    store.insert(name, Tensor::new(shape, v)?, Init::Zeros)?;
    Ok(())
}

fn project(g: &mut Graph<f64>, y: Var, w: &[f64]) -> rial_nnkit::Result<Var> {
    let wy = g.mul_const(y, w.to_vec())?;
    Ok(g.sum(wy))
}

struct Case {
    store: ParamStore<f64>,
    coords: usize,
    loss: Box<dyn Fn(&ParamStore<f64>, &mut Graph<f64>) -> rial_nnkit::Result<Var>>,
}

fn run(name: &str, tol: f64, seed: u64, cases: usize, build: impl Fn(&mut ChaCha8Rng) -> Result<Case>) -> Result<GradcheckRow> {
    let mut worst = 0.0f64;
    for c in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::derive(seed, &[c as u64]));
        let case = build(&mut rng)?;
        let r = check(&case.store, STEP, case.coords, &mut rng, &*case.loss)?;
        worst = worst.max(r.max_rel_err());
    }
    Ok(GradcheckRow {
        name: name.into(),
        cases,
        max_rel_err: worst,
        tol,
    })
}

fn nn<T>(r: Result<T>) -> rial_nnkit::Result<T> {
    r.map_err(|e| rial_nnkit::NnError::Geometry(e.to_string()))
}

fn dense_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, i, o) = (rng.random_range(1..5), rng.random_range(1..8), rng.random_range(1..6));
    let mut s = ParamStore::new();
    register_dense(&mut s, "d", i, o, rng)?;
    insert(&mut s, "x", &[b, i], uniform(rng, b * i, -1.0, 1.0))?;
    let w = uniform(rng, b * o, -1.0, 1.0);
    Ok(Case {
        store: s,
        coords: 64,
        loss: Box::new(move |s, g| {
            let x = g.param(s, "x")?;
            let y = dense_tanh(g, s, "d", x)?;
            project(g, y, &w)
        }),
    })
}

fn conv_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let k = rng.random_range(1..5);
    let stride = rng.random_range(1..3);
    let side = k + rng.random_range(0..6);
    let (b, ic, oc) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
    let out = rial_nnkit::layers::conv_out_size(side, k, stride).expect("kernel fits");
    let mut s = ParamStore::new();
    register_conv(&mut s, "c", k, ic, oc, rng)?;
    insert(&mut s, "x", &[b, side, side, ic], uniform(rng, b * side * side * ic, -1.0, 1.0))?;
    let w = uniform(rng, b * out * out * oc, -1.0, 1.0);
    Ok(Case {
        store: s,
        coords: 64,
        loss: Box::new(move |s, g| {
            let x = g.param(s, "x")?;
            let y = conv2d(g, s, "c", x, stride)?;
            let y = g.tanh(y);
            project(g, y, &w)
        }),
    })
}

fn lstm_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, i, h) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
    let mut s = ParamStore::new();
    register_lstm(&mut s, "l", i, h, rng)?;
    insert(&mut s, "x", &[b, i], uniform(rng, b * i, -1.0, 1.0))?;
    insert(&mut s, "h0", &[b, h], uniform(rng, b * h, -1.0, 1.0))?;
    insert(&mut s, "c0", &[b, h], uniform(rng, b * h, -1.0, 1.0))?;
    let wh = uniform(rng, b * h, -1.0, 1.0);
    let wc = uniform(rng, b * h, -1.0, 1.0);
    Ok(Case {
        store: s,
        coords: 64,
        loss: Box::new(move |s, g| {
            let (x, h0, c0) = (g.param(s, "x")?, g.param(s, "h0")?, g.param(s, "c0")?);
            let (h1, c1) = lstm_step(g, s, "l", x, h0, c0)?;
            let a = project(g, h1, &wh)?;
            let c = project(g, c1, &wc)?;
            g.add(a, c)
        }),
    })
}

const UNROLL: usize = 50;

fn unroll_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, i, h) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(2..5));
    let mut s = ParamStore::new();
    register_lstm(&mut s, "l", i, h, rng)?;
    insert(&mut s, "xs", &[UNROLL * b, i], uniform(rng, UNROLL * b * i, -1.0, 1.0))?;
    let w = uniform(rng, UNROLL * b * h, -1.0, 1.0);
    Ok(Case {
        store: s,
        coords: 24,
        loss: Box::new(move |s, g| {
            let xs = g.param(s, "xs")?;
            let xp = lstm_input_projection(g, s, "l", xs)?;
            let mut hs = g.input(&[b, h], vec![0.0; b * h])?;
            let mut cs = g.input(&[b, h], vec![0.0; b * h])?;
            let mut outs = Vec::with_capacity(UNROLL);
            for t in 0..UNROLL {
                let rows: Vec<usize> = (t * b..(t + 1) * b).collect();
                let xt = g.gather_rows(xp, &rows)?;
                (hs, cs) = lstm_recurrent(g, s, "l", xt, hs, cs)?;
                outs.push(hs);
            }
            let all = g.concat_rows(&outs)?;
            project(g, all, &w)
        }),
    })
}

fn gaussian_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (b, a) = (rng.random_range(1..6), rng.random_range(1..5));
    let mut s = ParamStore::new();
    insert(&mut s, "mu", &[b, a], uniform(rng, b * a, -1.0, 1.0))?;
    insert(&mut s, "ls", &[a], uniform(rng, a, -1.0, 1.0))?;
    let actions = uniform(rng, b * a, -1.5, 1.5);
    let old_mu = uniform(rng, b * a, -1.0, 1.0);
    let old_ls = uniform(rng, a, -1.0, 1.0);
    Ok(Case {
        store: s,
        coords: 64,
        loss: Box::new(move |s, g| {
            let (mu, ls) = (g.param(s, "mu")?, g.param(s, "ls")?);
            let lp = g.gaussian_log_prob(mu, ls, &actions)?;
            let kl = g.gaussian_kl(&old_mu, &old_ls, mu, ls)?;
            let (lp, kl) = (g.mean(lp), g.mean(kl));
            g.sub(kl, lp)
        }),
    })
}

fn bce_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let n = rng.random_range(1..12);
    let mut s = ParamStore::new();
    insert(&mut s, "z", &[n, 1], uniform(rng, n, -4.0, 4.0))?;
    let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..2u8))).collect();
    Ok(Case {
        store: s,
        coords: 64,
        loss: Box::new(move |s, g| {
            let z = g.param(s, "z")?;
            let l = g.bce_with_logits(z, &y)?;
            Ok(g.mean(l))
        }),
    })
}

/// Assembled policy on two back-to-back segments, with a loss touching
/// every head it has.
fn policy_case(cfg: PolicyConfig, rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut s = ParamStore::new();
    cfg.register(&mut s, rng)?;
    let seg_lens = vec![3usize, 2];
    let n: usize = seg_lens.iter().sum();
    let hw = cfg.state_width();
    let pixels = uniform(rng, n * IMAGE_LEN, 0.0, 1.0);
    let proprio = uniform(rng, n * cfg.proprio_dim, -1.0, 1.0);
    let h0 = uniform(rng, seg_lens.len() * hw, -0.5, 0.5);
    let c0 = uniform(rng, seg_lens.len() * hw, -0.5, 0.5);
    let actions = uniform(rng, n * cfg.action_dim, -1.0, 1.0);
    let aux_w = uniform(rng, n * cfg.aux_dim, -1.0, 1.0);
    let v_w = uniform(rng, n, -1.0, 1.0);
    Ok(Case {
        store: s,
        coords: 6,
        loss: Box::new(move |s, g| {
            let out = nn(forward(
                &cfg,
                g,
                s,
                &SeqInput {
                    pixels: &pixels,
                    proprio: &proprio,
                    seg_lens: &seg_lens,
                    h0: &h0,
                    c0: &c0,
                },
            ))?;
            let lp = g.gaussian_log_prob(out.mean, out.log_std, &actions)?;
            let mut l = g.mean(lp);
            if let Some(a) = out.aux {
                let sq = g.square(a);
                let p = project(g, sq, &aux_w)?;
                l = g.add(l, p)?;
            }
            if let Some(v) = out.value {
                let p = project(g, v, &v_w)?;
                l = g.add(l, p)?;
            }
            Ok(l)
        }),
    })
}

fn value_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let task = TaskSpec::new(TaskKind::Stacking);
    let d = task.privileged_dim();
    let n = rng.random_range(1..8);
    let mut s = ParamStore::new();
    ValueNet::register(&mut s, d, rng)?;
    let x = uniform(rng, n * d, -1.0, 1.0);
    let targets = uniform(rng, n, -2.0, 2.0);
    Ok(Case {
        store: s,
        coords: 32,
        loss: Box::new(move |s, g| {
            let v = nn(ValueNet::forward(d, g, s, &x))?;
            let t = g.input(&[n, 1], targets.clone())?;
            let e = g.sub(v, t)?;
            let e = g.square(e);
            Ok(g.mean(e))
        }),
    })
}

fn disc_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let task = TaskSpec::new(TaskKind::ClearingBlocks);
    let with_actions = rng.random_bool(0.5);
    let d = task.object_centric_dim() + if with_actions { task.arm.action_dim() } else { 0 };
    let n = rng.random_range(2..10);
    let mut s = ParamStore::new();
    DiscriminatorNet::register(&mut s, d, rng)?;
    let x = uniform(rng, n * d, -2.0, 2.0);
    let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    Ok(Case {
        store: s,
        coords: 32,
        loss: Box::new(move |s, g| {
            let z = nn(DiscriminatorNet::forward(d, g, s, &x))?;
            let l = g.bce_with_logits(z, &y)?;
            Ok(g.mean(l))
        }),
    })
}

/// Runs the whole audit; `cases` random configurations per layer check.
pub fn gradcheck_suite(seed: u64, cases: usize) -> Result<Vec<GradcheckRow>> {
    let task = TaskSpec::new(TaskKind::Stacking);
    let full = PolicyConfig::for_task(&task);
    let flat = PolicyConfig {
        lstm: false,
        aux_head: false,
        value_head: true,
        ..full.clone()
    };
    let mut rows = vec![
        run("layer: dense", TOL, seed ^ 1, cases, dense_case)?,
        run("layer: conv2d", TOL, seed ^ 2, cases, conv_case)?,
        run("layer: lstm step", TOL, seed ^ 3, cases, lstm_case)?,
        run("layer: lstm 50-step unroll", TOL_LONG_UNROLL, seed ^ 4, cases, unroll_case)?,
        run("head: gaussian log-prob and kl", TOL, seed ^ 5, cases, gaussian_case)?,
        run("loss: bce with logits", TOL, seed ^ 6, cases, bce_case)?,
    ];
    rows.push(run("net: value mlp", TOL, seed ^ 7, 3, value_case)?);
    rows.push(run("net: discriminator", TOL, seed ^ 8, 3, disc_case)?);
    let f = full.clone();
    rows.push(run("net: policy (lstm, aux head)", TOL, seed ^ 9, 1, move |r| policy_case(f.clone(), r))?);
    rows.push(run("net: policy (dense core, value head)", TOL, seed ^ 10, 1, move |r| {
        policy_case(flat.clone(), r)
    })?);
    Ok(rows)
}

pub fn table(rows: &[GradcheckRow]) -> String {
    let mut s = format!("{:<40} {:>6} {:>12} {:>8}  result\n", "check", "cases", "max rel err", "tol");
    for r in rows {
        s.push_str(&format!(
            "{:<40} {:>6} {:>12.3e} {:>8.0e}  {}\n",
            r.name,
            r.cases,
            r.max_rel_err,
            r.tol,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    s
}
