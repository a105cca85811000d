use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rial_core::eval::{run_eval_episode, EvalConfig};
use rial_core::imitation::{DiscInput, RunningNorm};
use rial_core::nets::policy::{forward, SeqInput};
use rial_core::nets::{DiscriminatorNet, PolicyConfig, VisuomotorPolicy};
use rial_core::ppo::{
    average_gradients, collect_rollouts, old_policy, policy_loss, run_episode, DiscSnapshot, RolloutSpec, WorkerBatch,
};
use rial_core::sim2d::kinematics::{gripper_pose, joint_rates_for};
use rial_core::sim2d::{RealityGapConfig, TaskKind, TaskSpec};
use rial_nnkit::{Graph, ParamStore};

fn policy(task: &TaskSpec, seed: u64) -> VisuomotorPolicy {
    VisuomotorPolicy::new(PolicyConfig::for_task(task), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn discriminator_ignores_arm_state_behind_equal_features() {
    let task = TaskSpec::new(TaskKind::Stacking);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let disc = DiscriminatorNet::new(task.object_centric_dim(), 0, &mut rng).unwrap();
    let a = task.reset(10, None).unwrap();

    // same pose, different joint velocities and aperture: features are bit-identical
    let mut b = a.clone();
    b.joint_velocities = vec![0.7, -1.1, 0.4];
    b.finger_aperture *= 0.5;
    let fa = DiscInput::ObjectCentric.features(&task, &a);
    assert_eq!(fa, DiscInput::ObjectCentric.features(&task, &b));
    assert_eq!(disc.predict(&fa).unwrap(), disc.predict(&DiscInput::ObjectCentric.features(&task, &b)).unwrap());

    // a different joint configuration reaching the same gripper position
    let g0 = gripper_pose(&task.arm, &a.joint_angles);
    let mut c = a.clone();
    let target = (g0.x, g0.y, g0.angle + 0.4);
    for _ in 0..200 {
        let g = gripper_pose(&task.arm, &c.joint_angles);
        let v = [target.0 - g.x, target.1 - g.y, target.2 - g.angle];
        let rates = joint_rates_for(&task.arm, &c.joint_angles, v, 1e-4);
        for (q, r) in c.joint_angles.iter_mut().zip(rates) {
            *q += r;
        }
    }
    let moved: f64 = c.joint_angles.iter().zip(&a.joint_angles).map(|(x, y)| (x - y).abs()).sum();
    assert!(moved > 0.1, "configuration barely changed");
    let fc = DiscInput::ObjectCentric.features(&task, &c);
    for (x, y) in fa.iter().zip(&fc) {
        assert!((x - y).abs() < 1e-12);
    }
    let (pa, pc) = (disc.predict(&fa).unwrap()[0].1, disc.predict(&fc).unwrap()[0].1);
    assert!((pa - pc).abs() < 1e-6);

    // privileged input does see the arm
    let pa = DiscInput::Privileged.features(&task, &a);
    assert_ne!(pa, DiscInput::Privileged.features(&task, &c));
}

#[test]
fn actions_only_enter_when_enabled() {
    let task = TaskSpec::new(TaskKind::Lifting);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let disc = DiscriminatorNet::new(2, 0, &mut rng).unwrap();
    let f = [0.1, -0.05];
    let r1 = disc.input_row(&f, Some(&[1.0, 0.0, 0.0, 0.0])).unwrap();
    let r2 = disc.input_row(&f, Some(&[-1.0, 0.5, 0.2, 0.0])).unwrap();
    assert_eq!(r1, r2);
    let with = DiscriminatorNet::new(2, task.arm.action_dim(), &mut rng).unwrap();
    assert!(with.input_row(&f, None).is_err());
    assert_eq!(with.input_row(&f, Some(&[1.0, 0.0, 0.0, 0.0])).unwrap().len(), 6);
}

#[test]
fn deployable_policy_runs_a_full_episode_without_state_access() {
    for kind in [TaskKind::Lifting, TaskKind::Stacking] {
        let task = TaskSpec::new(kind);
        let p = policy(&task, 1);
        let cfg = EvalConfig {
            gap: RealityGapConfig::default(),
            stochastic: true,
            ..Default::default()
        };
        let out = run_eval_episode(&task, &p, &cfg, 42).unwrap();
        assert!(out.task_return.is_finite());
    }
}

fn spec<'a>(task: &'a TaskSpec, gap: &'a RealityGapConfig, p: &'a VisuomotorPolicy, disc: Option<DiscSnapshot<'a>>) -> RolloutSpec<'a> {
    RolloutSpec {
        task,
        gap,
        policy: p,
        disc,
        disc_input: DiscInput::ObjectCentric,
        disc_actions: false,
        curriculum: None,
        k: 50,
    }
}

#[test]
fn parallel_rollouts_equal_sequential_episodes() {
    let task = TaskSpec::new(TaskKind::Lifting);
    let gap = RealityGapConfig::off();
    let p = policy(&task, 3);
    let net = DiscriminatorNet::new(2, 0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let norm = RunningNorm::new(2);
    let d = DiscSnapshot {
        net: &net,
        norm: &norm,
        clip: 10.0,
    };
    let s = spec(&task, &gap, &p, Some(d));
    let seeds: Vec<u64> = (100..108).collect();
    let par = collect_rollouts(&s, &seeds).unwrap();
    assert_eq!(par.len(), 8);
    for (tr, &seed) in par.iter().zip(&seeds) {
        let solo = run_episode(&s, seed).unwrap();
        assert_eq!(tr, &solo);
        assert_eq!(tr.len, 100);
        assert!(tr.r_gail.iter().all(|r| (0.0..=10.0).contains(r)));
    }
    assert_eq!(run_episode(&s, 100).unwrap(), par[0]);
}

fn concat(batches: &[WorkerBatch]) -> WorkerBatch {
    let cat = |f: fn(&WorkerBatch) -> &Vec<f32>| batches.iter().flat_map(|b| f(b).iter().copied()).collect::<Vec<f32>>();
    WorkerBatch {
        pixels: cat(|b| &b.pixels),
        proprio: cat(|b| &b.proprio),
        actions: cat(|b| &b.actions),
        seg_lens: batches.iter().flat_map(|b| b.seg_lens.iter().copied()).collect(),
        h0: cat(|b| &b.h0),
        c0: cat(|b| &b.c0),
        adv: cat(|b| &b.adv),
        value_targets: cat(|b| &b.value_targets),
        aux_targets: cat(|b| &b.aux_targets),
    }
}

fn moved_store(p: &VisuomotorPolicy) -> ParamStore<f32> {
    let mut moved = p.store.clone();
    for (_, prm) in moved.iter_mut() {
        for v in prm.tensor.values_mut() {
            *v *= 1.01;
        }
    }
    moved
}

/// The trainer's f32 loss, scored under a slightly moved policy so the KL
/// term is live.
fn grad32(p: &VisuomotorPolicy, b: &WorkerBatch, beta: f64) -> BTreeMap<String, Vec<f64>> {
    let old = old_policy(&p.cfg, &p.store, b).unwrap();
    let mut g = Graph::new();
    let (loss, _) = policy_loss(&p.cfg, &mut g, &moved_store(p), b, &old, beta).unwrap();
    g.backward(loss)
        .unwrap()
        .params(&g)
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(f64::from).collect()))
        .collect()
}

/// The same objective evaluated in f64.
fn grad64(p: &VisuomotorPolicy, b: &WorkerBatch, beta: f64) -> BTreeMap<String, Vec<f64>> {
    let f = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let (px, pr, acts, h0, c0, adv) = (f(&b.pixels), f(&b.proprio), f(&b.actions), f(&b.h0), f(&b.c0), f(&b.adv));
    let inp = SeqInput {
        pixels: &px,
        proprio: &pr,
        seg_lens: &b.seg_lens,
        h0: &h0,
        c0: &c0,
    };
    let old_store: ParamStore<f64> = p.store.cast();
    let mut g = Graph::new();
    let out = forward(&p.cfg, &mut g, &old_store, &inp).unwrap();
    let lp = g.gaussian_log_prob(out.mean, out.log_std, &acts).unwrap();
    let (old_mean, old_ls, old_lp) = (g.value(out.mean).to_vec(), g.value(out.log_std).to_vec(), g.value(lp).to_vec());

    let store: ParamStore<f64> = moved_store(p).cast();
    let mut g = Graph::new();
    let out = forward(&p.cfg, &mut g, &store, &inp).unwrap();
    let lp = g.gaussian_log_prob(out.mean, out.log_std, &acts).unwrap();
    let neg: Vec<f64> = old_lp.iter().map(|v| -v).collect();
    let d = g.add_const(lp, &neg).unwrap();
    let ratio = g.exp(d);
    let w = g.mul_const(ratio, adv).unwrap();
    let surr = g.mean(w);
    let kl = g.gaussian_kl(&old_mean, &old_ls, out.mean, out.log_std).unwrap();
    let kl = g.mean(kl);
    let neg = g.scale(surr, -1.0);
    let pen = g.scale(kl, beta);
    let loss = g.add(neg, pen).unwrap();
    g.backward(loss).unwrap().params(&g)
}

fn average64(grads: &[BTreeMap<String, Vec<f64>>]) -> BTreeMap<String, Vec<f64>> {
    let n = grads.len() as f64;
    let mut out = grads[0].clone();
    for v in out.values_mut() {
        v.fill(0.0);
    }
    for g in grads {
        for (k, v) in g {
            for (a, b) in out.get_mut(k).unwrap().iter_mut().zip(v) {
                *a += b / n;
            }
        }
    }
    out
}

fn max_rel_diff(a: &BTreeMap<String, Vec<f64>>, b: &BTreeMap<String, Vec<f64>>) -> (String, f64) {
    let mut worst = (String::new(), 0.0);
    for (name, x) in a {
        let y = &b[name];
        let diff: f64 = x.iter().zip(y).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = y.iter().map(|y| y * y).sum::<f64>().sqrt();
        let r = diff / norm.max(1e-9);
        if r > worst.1 {
            worst = (name.clone(), r);
        }
    }
    worst
}

#[test]
fn averaged_worker_gradients_equal_the_pooled_batch() {
    let task = TaskSpec::new(TaskKind::Lifting);
    let gap = RealityGapConfig::off();
    let p = policy(&task, 5);
    let s = spec(&task, &gap, &p, None);
    let seeds: Vec<u64> = (0..8).collect();
    let trajs = collect_rollouts(&s, &seeds).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let batches: Vec<WorkerBatch> = trajs
        .iter()
        .map(|tr| {
            let adv: Vec<f64> = (0..tr.len).map(|_| rng.random_range(-1.0..1.0)).collect();
            WorkerBatch::new(tr, 50, &adv, &vec![0.0; tr.len])
        })
        .collect();
    let pooled = concat(&batches);

    let per: Vec<_> = batches.iter().map(|b| grad64(&p, b, 0.5)).collect();
    let (name, r) = max_rel_diff(&average64(&per), &grad64(&p, &pooled, 0.5));
    assert!(r < 1e-6, "f64 {name}: {r:e}");

    // the trainer's f32 path, through its own averaging
    let per: Vec<BTreeMap<String, Vec<f32>>> = batches
        .iter()
        .map(|b| grad32(&p, b, 0.5).into_iter().map(|(k, v)| (k, v.into_iter().map(|x| x as f32).collect())).collect())
        .collect();
    let avg: BTreeMap<String, Vec<f64>> = average_gradients(&per)
        .unwrap()
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(f64::from).collect()))
        .collect();
    let (name, r) = max_rel_diff(&avg, &grad32(&p, &pooled, 0.5));
    assert!(r < 1e-4, "f32 {name}: {r:e}");
}
