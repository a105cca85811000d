use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rial_core::demos::{
    build_dataset, cluster_by_stage, replay, scripted_expert, CurriculumClusters, DatasetSource, DemoDataset, DemoMeta,
    DemoSource, EpisodeRecorder, StartChoice,
};
use rial_core::imitation::{
    behavior_clone, behavior_clone_loss, discriminator_accuracy, discriminator_loss, discriminator_update,
    DiscriminatorBatch, RunningNorm,
};
use rial_core::nets::{DiscriminatorNet, PolicyConfig, VisuomotorPolicy};
use rial_core::sim2d::{step, Env, SimEnv, TaskKind, TaskSpec, VisualParams, DT};
use rial_nnkit::{AdamConfig, AdamState};

#[test]
fn expert_lifts_from_sampled_starts() {
    let task = TaskSpec::new(TaskKind::Lifting);
    let mut ok = 0;
    for seed in 0..1000 {
        let mut s = task.reset(seed, None).unwrap();
        for _ in 0..task.episode_length {
            let a = scripted_expert(&task, &s);
            assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
            s = step(&s, &a, &task.arm, DT).unwrap();
            if task.stage_of(&s) == task.final_stage() {
                ok += 1;
                break;
            }
        }
    }
    assert!(ok >= 950, "{ok}/1000");
}

fn scripted(task: &TaskSpec, n: usize) -> DemoDataset {
    build_dataset(
        task,
        n,
        DatasetSource::Scripted {
            first_seed: 500,
            max_attempts: 4 * n + 10,
        },
        1_700_000_000,
    )
    .unwrap()
}

#[test]
fn scripted_lifting_dataset_round_trips_and_replays() {
    let task = TaskSpec::new(TaskKind::Lifting);
    let ds = scripted(&task, 30);
    assert_eq!(ds.episodes.len(), 30);
    for ep in &ds.episodes {
        assert!(ep.n_actions() <= 100);
        assert!(ep.reached_final(&task));
        assert_eq!(ep.source, DemoSource::Scripted);
        for s in &ep.steps {
            assert_eq!(s.stage, task.stage_of(&s.state));
        }
    }
    ds.check_labels(&task).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lift.dm1");
    ds.save(&path).unwrap();
    let back = DemoDataset::load(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.encode(), ds.encode());
    assert_eq!(replay(&task, &back).unwrap(), None);
}

#[test]
fn tampered_action_is_reported_as_divergence() {
    let task = TaskSpec::new(TaskKind::Lifting);
    let mut ds = scripted(&task, 1);
    let a = ds.episodes[0].steps[5].action.as_mut().unwrap();
    a[0] = if a[0] > 0.0 { -1.0 } else { 1.0 };
    let d = replay(&task, &ds).unwrap().expect("divergence");
    assert_eq!((d.episode, d.step), (0, 6));
}

#[test]
fn stacking_clusters_partition_nonterminal_states() {
    let task = TaskSpec::new(TaskKind::Stacking);
    let ds = scripted(&task, 4);
    let c = cluster_by_stage(&task, &ds, 0.3).unwrap();
    assert_eq!(c.clusters.len(), 3);
    let mut total = 0;
    for (k, cl) in c.clusters.iter().enumerate() {
        for r in cl {
            let s = c.resolve(&ds, *r).unwrap();
            assert!((task.stages[k].predicate)(&task.arm, s));
            assert!(!(task.stages[k + 1].predicate)(&task.arm, s));
        }
        total += cl.len();
    }
    let nonterminal = ds
        .episodes
        .iter()
        .flat_map(|e| &e.steps)
        .filter(|s| s.stage != task.final_stage())
        .count();
    assert_eq!(total, nonterminal);
}

/// Stand-in clusters of the given sizes; sampling never looks at states.
fn clusters(sizes: &[usize], epsilon: f64) -> CurriculumClusters {
    CurriculumClusters {
        clusters: sizes
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|i| rial_core::demos::StateRef {
                        episode: 0,
                        step: i as u32,
                    })
                    .collect()
            })
            .collect(),
        epsilon,
    }
}

#[test]
fn epsilon_mix_frequency() {
    let c = clusters(&[40, 7, 300], 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let random = (0..10_000)
        .filter(|_| c.sample_start(&mut rng) == StartChoice::Random)
        .count();
    let f = random as f64 / 10_000.0;
    assert!((f - 0.30).abs() < 0.015, "{f}");
    let always = clusters(&[3, 3, 3], 1.0);
    assert!((0..1000).all(|_| always.sample_start(&mut rng) == StartChoice::Random));
}

#[test]
fn clusters_chosen_uniformly_regardless_of_size() {
    let c = clusters(&[40, 7, 300], 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut counts = [0usize; 3];
    for _ in 0..30_000 {
        counts[c.sample_start(&mut rng).cluster().expect("epsilon is 0")] += 1;
    }
    for n in counts {
        let f = n as f64 / 30_000.0;
        assert!((f - 1.0 / 3.0).abs() < 0.01, "{counts:?}");
    }
}

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize, shift: f64) -> Vec<f64> {
    let g = Normal::new(0.0, 1.0).unwrap();
    (0..n * dim).map(|i| g.sample(rng) + if i % dim == 0 { shift } else { 0.0 }).collect()
}

fn trained_disc(shift: f64, updates: usize) -> (DiscriminatorNet, RunningNorm, DiscriminatorBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dim = 4;
    let mut net = DiscriminatorNet::new(dim, 0, &mut rng).unwrap();
    let mut adam = AdamState::new(&net.store, AdamConfig::with_lr(1e-3));
    let train = DiscriminatorBatch {
        dim,
        expert: gaussian_rows(&mut rng, 500, dim, shift),
        policy: gaussian_rows(&mut rng, 500, dim, -shift),
    };
    let mut norm = RunningNorm::new(dim);
    norm.update(&train.expert);
    norm.update(&train.policy);
    discriminator_update(&mut net, &mut adam, &train, &norm, updates).unwrap();
    let held = DiscriminatorBatch {
        dim,
        expert: gaussian_rows(&mut rng, 2000, dim, shift),
        policy: gaussian_rows(&mut rng, 2000, dim, -shift),
    };
    (net, norm, held)
}

#[test]
fn discriminator_cannot_separate_identical_distributions() {
    let (net, norm, held) = trained_disc(0.0, 200);
    let acc = discriminator_accuracy(&net, &held, &norm).unwrap();
    assert!((acc - 0.5).abs() < 0.05, "{acc}");
}

#[test]
fn discriminator_separates_separable_features() {
    let (net, norm, held) = trained_disc(3.0, 200);
    let acc = discriminator_accuracy(&net, &held, &norm).unwrap();
    assert!(acc > 0.95, "{acc}");
}

#[test]
fn zero_weight_discriminator_is_undecided() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = DiscriminatorNet::new(3, 0, &mut rng).unwrap();
    for (_, p) in net.store.iter_mut() {
        p.tensor.values_mut().fill(0.0);
    }
    let batch = DiscriminatorBatch {
        dim: 3,
        expert: gaussian_rows(&mut rng, 10, 3, 1.0),
        policy: gaussian_rows(&mut rng, 10, 3, -1.0),
    };
    let l = discriminator_loss(&net, &batch, &RunningNorm::new(3)).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-6);
    assert!(net.predict(&batch.expert).unwrap().iter().all(|&(_, p)| p == 0.5));
}

/// A one-episode dataset holding the same action on every step.
fn constant_action_dataset(task: &TaskSpec, a: &[f64], steps: usize, seed: u64) -> DemoDataset {
    let meta = DemoMeta {
        recorded_at: 0,
        operator: None,
        script_version: None,
        seed: Some(seed),
        forced: false,
        visual: VisualParams::default(),
    };
    let mut rec = EpisodeRecorder::new(task, task.reset(seed, None).unwrap(), DemoSource::Teleop, meta).unwrap();
    for _ in 0..steps {
        rec.push(a).unwrap();
    }
    let mut ds = DemoDataset::new(task);
    ds.episodes.push(rec.finish());
    ds
}

fn bc_policy(task: &TaskSpec) -> (VisuomotorPolicy, AdamState<f32>) {
    let cfg = PolicyConfig {
        aux_head: false,
        ..PolicyConfig::for_task(task)
    };
    let p = VisuomotorPolicy::new(cfg, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    let adam = AdamState::new(&p.store, AdamConfig::with_lr(1e-3));
    (p, adam)
}

#[test]
fn cloning_a_single_pair_recovers_the_action() {
    let task = TaskSpec::new(TaskKind::Lifting);
    let target = [0.3, -0.2, 0.5, -0.4];
    let ds = constant_action_dataset(&task, &target, 1, 4);
    let (mut policy, mut adam) = bc_policy(&task);
    behavior_clone(&mut policy, &mut adam, &ds, 400).unwrap();
    let first = &ds.episodes[0].steps[0];
    let out = policy.act(&first.obs, &policy.initial_state()).unwrap();
    for (m, t) in out.mean.iter().zip(target) {
        assert!((m - t).abs() < 1e-2, "{:?}", out.mean);
    }
}

#[test]
fn cloning_loss_is_gaussian_nll_at_init() {
    let task = TaskSpec::new(TaskKind::Lifting);
    let target = [0.9, -0.7, 0.1, 1.0];
    let ds = constant_action_dataset(&task, &target, 1, 2);
    let (policy, _) = bc_policy(&task);
    let (g, loss) = behavior_clone_loss(&policy, &ds).unwrap();
    let out = policy.act(&ds.episodes[0].steps[0].obs, &policy.initial_state()).unwrap();
    let nll: f64 = out
        .mean
        .iter()
        .zip(&out.log_std)
        .zip(target)
        .map(|((m, ls), a)| 0.5 * ((a - m) / ls.exp()).powi(2) + ls + 0.5 * (2.0 * std::f64::consts::PI).ln())
        .sum();
    assert!((g.scalar(loss) as f64 - nll).abs() < 1e-4, "{} vs {nll}", g.scalar(loss));
}

fn grads(policy: &VisuomotorPolicy, ds: &DemoDataset) -> BTreeMap<String, Vec<f32>> {
    let (g, loss) = behavior_clone_loss(policy, ds).unwrap();
    g.backward(loss).unwrap().params(&g)
}

#[test]
fn episode_order_does_not_change_the_gradient() {
    let task = TaskSpec::new(TaskKind::Lifting);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ds = DemoDataset::new(&task);
    for seed in 0..3 {
        let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        ds.episodes.extend(constant_action_dataset(&task, &a, 2 + seed as usize, seed).episodes);
    }
    let (policy, _) = bc_policy(&task);
    let a = grads(&policy, &ds);
    ds.episodes.reverse();
    let b = grads(&policy, &ds);
    for (name, ga) in &a {
        let gb = &b[name];
        let diff: f64 = ga.iter().zip(gb).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = ga.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!(diff <= 1e-4 * norm.max(1e-6), "{name}: {diff} vs {norm}");
    }
}

#[test]
fn recorded_episode_observations_match_a_fresh_environment() {
    let task = TaskSpec::new(TaskKind::Lifting);
    let ds = scripted(&task, 1);
    let ep = &ds.episodes[0];
    let mut env = SimEnv::new(task.clone()).with_visual(ep.meta.visual.clone());
    let obs = env.reset(ep.meta.seed.unwrap(), None).unwrap();
    assert_eq!(obs, ep.steps[0].obs);
    for s in &ep.steps[..ep.steps.len() - 1] {
        let r = env.step(s.action.as_ref().unwrap()).unwrap();
        assert_eq!(r.obs.proprio.len(), s.obs.proprio.len());
    }
    assert!(env.state().unwrap().bit_eq(&ep.steps.last().unwrap().state));
}
