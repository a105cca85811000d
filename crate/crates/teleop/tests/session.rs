use std::path::Path;

use rial_core::config::KvMap;
use rial_core::demos::{build_dataset, replay, scripted_expert, DatasetSource, DemoDataset, DemoSource};
use rial_core::sim2d::kinematics::gripper_pose;
use rial_core::sim2d::{TaskKind, TaskSpec};
use rial_core::train::{RunConfig, Trainer};
use rial_teleop::protocol::{Cmd, CmdMode, CtlAction, EpisodeCtl, Lifecycle};
use rial_teleop::{Mailbox, Session, SessionConfig, TeleopError};

fn session(dir: &Path, task: TaskKind) -> Session {
    let cfg = SessionConfig {
        demo_dir: dir.to_path_buf(),
        seed: 4,
    };
    Session::new(1, TaskSpec::new(task), cfg).unwrap()
}

fn ctl(action: CtlAction) -> EpisodeCtl {
    EpisodeCtl {
        action,
        force: false,
        seed: None,
    }
}

fn start(s: &mut Session, seed: u64) {
    let ack = s
        .control(
            0,
            &EpisodeCtl {
                seed: Some(seed),
                ..ctl(CtlAction::Start)
            },
        )
        .unwrap();
    assert_eq!(ack.lifecycle, Lifecycle::Running);
}

fn joint(axes: &[f64], grip: f64) -> Cmd {
    Cmd {
        mode: CmdMode::Joint,
        axes: axes.to_vec(),
        grip,
    }
}

fn recorded_actions(s: &Session) -> Vec<Vec<f64>> {
    s.recorder()
        .unwrap()
        .episode()
        .steps
        .iter()
        .filter_map(|st| st.action.clone())
        .collect()
}

/// Drives a running episode with the scripted expert, sent as joint-mode
/// operator commands, until the final stage is reached.
fn demonstrate(s: &mut Session, task: &TaskSpec) -> usize {
    let n = task.arm.n_joints();
    for t in 0..task.episode_length {
        let a = scripted_expert(task, s.recorder().unwrap().state());
        s.tick(Some((t as u64, joint(&a[..n], a[n])))).unwrap();
        if s.recorder().unwrap().stage() == task.final_stage() {
            return t + 1;
        }
    }
    panic!("expert commands never reached the final stage");
}

#[test]
fn no_input_records_zero_actions_and_the_arm_holds() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = session(dir.path(), TaskKind::Lifting);
    start(&mut s, 3);
    let q0 = s.scene().joint_angles;
    for _ in 0..40 {
        let a = s.tick(None).unwrap().unwrap();
        assert!(a.iter().all(|&v| v == 0.0));
    }
    let acts = recorded_actions(&s);
    assert_eq!(acts.len(), 40);
    assert!(acts.iter().flatten().all(|&v| v == 0.0));
    let q1 = s.scene().joint_angles;
    for (a, b) in q0.iter().zip(&q1) {
        assert!((a - b).abs() < 1e-3, "{q0:?} -> {q1:?}");
    }
}

#[test]
fn recorded_actions_are_the_held_command_not_arrivals() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = session(dir.path(), TaskKind::Lifting);
    start(&mut s, 3);
    let mb = Mailbox::new();
    // two arrivals in one tick interval: only the later one is ever applied
    mb.post((1, joint(&[0.9, 0.0, 0.0], 0.0)));
    mb.post((2, joint(&[-0.2, 2.5, 0.1], -1.0)));
    let first = s.tick(mb.take()).unwrap().unwrap();
    assert_eq!(first, vec![-0.2, 1.0, 0.1, -1.0]);
    for _ in 0..5 {
        assert_eq!(s.tick(mb.take()).unwrap().unwrap(), first);
        assert_eq!(s.scene().held_cmd_seq, Some(2));
    }
    assert_eq!(recorded_actions(&s), vec![first; 6]);
}

#[test]
fn commands_between_ticks_apply_once_at_the_next_tick() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = session(dir.path(), TaskKind::Lifting);
    start(&mut s, 3);
    // synthetic arrival times in seconds; ticks fall on multiples of 1/20
    let arrivals = [0.012, 0.031, 0.049, 0.101, 0.102, 0.103, 0.260, 0.4499];
    let mb = Mailbox::new();
    let mut next = 0;
    let mut consumed = Vec::new();
    for k in 1..=12u64 {
        let tick_time = k as f64 / 20.0;
        while next < arrivals.len() && arrivals[next] < tick_time {
            let v = (next as f64 + 1.0) / 10.0;
            mb.post((next as u64, joint(&[v, 0.0, 0.0], 0.0)));
            next += 1;
        }
        let incoming = mb.take();
        if let Some((seq, _)) = &incoming {
            consumed.push((k, *seq));
        }
        let a = s.tick(incoming).unwrap().unwrap();
        let held = arrivals.iter().rposition(|&t| t < tick_time);
        let want = held.map_or(0.0, |i| (i as f64 + 1.0) / 10.0);
        assert_eq!(a[0], want, "tick {k}");
    }
    // one application per tick that saw arrivals, always the latest of them
    assert_eq!(consumed, vec![(1, 2), (3, 5), (6, 6), (9, 7)]);
    assert!(mb.take().is_none());
}

#[test]
fn lifecycle_transitions() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = session(dir.path(), TaskKind::Lifting);
    assert_eq!(s.lifecycle(), Lifecycle::Idle);
    assert!(s.tick(None).unwrap().is_none());
    for a in [CtlAction::Pause, CtlAction::Resume, CtlAction::Save, CtlAction::Discard] {
        assert!(matches!(s.control(1, &ctl(a)), Err(TeleopError::Lifecycle { .. })));
    }
    start(&mut s, 3);
    assert!(matches!(s.control(2, &ctl(CtlAction::Start)), Err(TeleopError::Lifecycle { .. })));
    s.tick(None).unwrap();
    assert_eq!(s.control(3, &ctl(CtlAction::Pause)).unwrap().lifecycle, Lifecycle::Paused);
    assert!(s.tick(None).unwrap().is_none());
    assert_eq!(s.recorder().unwrap().n_actions(), 1);
    assert_eq!(s.control(4, &ctl(CtlAction::Resume)).unwrap().lifecycle, Lifecycle::Running);
    s.tick(None).unwrap();
    assert!(matches!(s.control(5, &ctl(CtlAction::Save)), Err(TeleopError::NotFinished)));
    assert_eq!(s.lifecycle(), Lifecycle::Running);
    let ack = s.control(6, &ctl(CtlAction::Discard)).unwrap();
    assert_eq!((ack.lifecycle, ack.ref_seq), (Lifecycle::Discarded, 6));
    assert_eq!(s.lifecycle(), Lifecycle::Idle);
    assert!(s.recorder().is_none());

    start(&mut s, 5);
    s.tick(None).unwrap();
    s.disconnect();
    assert!(s.recorder().is_none());
    assert!(std::fs::read_dir(dir.path()).map_or(true, |mut d| d.next().is_none()));
}

#[test]
fn bad_commands_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s = session(dir.path(), TaskKind::Lifting);
    assert!(s.check_cmd(&joint(&[0.0, 0.0], 0.0)).is_err());
    assert!(s.check_cmd(&joint(&[0.0, f64::NAN, 0.0], 0.0)).is_err());
    let ee = Cmd {
        mode: CmdMode::Ee,
        axes: vec![0.0; 3],
        grip: 0.0,
    };
    assert!(s.check_cmd(&ee).is_ok());
}

#[test]
fn end_effector_commands_move_the_gripper_along_the_intent() {
    let dir = tempfile::tempdir().unwrap();
    let task = TaskSpec::new(TaskKind::Lifting);
    let mut s = session(dir.path(), TaskKind::Lifting);
    start(&mut s, 3);
    let g0 = gripper_pose(&task.arm, &s.scene().joint_angles);
    let right = Cmd {
        mode: CmdMode::Ee,
        axes: vec![1.0, 0.0, 0.0],
        grip: 0.0,
    };
    s.tick(Some((0, right))).unwrap();
    for _ in 0..3 {
        s.tick(None).unwrap();
    }
    let g1 = gripper_pose(&task.arm, &s.scene().joint_angles);
    assert!(g1.x - g0.x > 0.01, "dx {}", g1.x - g0.x);
    assert!((g1.y - g0.y).abs() < 0.5 * (g1.x - g0.x), "dy {}", g1.y - g0.y);
}

#[test]
fn saved_episode_loads_and_replays_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let task = TaskSpec::new(TaskKind::Lifting);
    let mut s = session(dir.path(), TaskKind::Lifting);
    s.set_operator(Some("op".into()));
    start(&mut s, 21);
    let n = demonstrate(&mut s, &task);
    let live = s.recorder().unwrap().episode().clone();
    let ack = s.control(9, &ctl(CtlAction::Save)).unwrap();
    assert_eq!(ack.lifecycle, Lifecycle::Saved);
    assert_eq!(s.lifecycle(), Lifecycle::Idle);

    let ds = DemoDataset::load(Path::new(&ack.path.unwrap())).unwrap();
    assert_eq!(ds.episodes.len(), 1);
    let ep = &ds.episodes[0];
    assert_eq!(ep, &live);
    assert_eq!(ep.n_actions(), n);
    assert_eq!(ep.source, DemoSource::Teleop);
    assert_eq!(ep.meta.operator.as_deref(), Some("op"));
    assert!(!ep.meta.forced);
    assert_eq!(replay(&task, &ds).unwrap(), None);
    let via_dir = build_dataset(&task, 1, DatasetSource::Directory(dir.path()), 0).unwrap();
    assert_eq!(via_dir.episodes[0], live);
}

#[test]
fn forced_saves_are_flagged_and_not_used_for_training() {
    let dir = tempfile::tempdir().unwrap();
    let task = TaskSpec::new(TaskKind::Lifting);
    let mut s = session(dir.path(), TaskKind::Lifting);
    start(&mut s, 3);
    s.tick(None).unwrap();
    let ack = s
        .control(
            1,
            &EpisodeCtl {
                force: true,
                ..ctl(CtlAction::Save)
            },
        )
        .unwrap();
    let ds = DemoDataset::load(Path::new(&ack.path.unwrap())).unwrap();
    assert!(ds.episodes[0].meta.forced);
    assert!(build_dataset(&task, 1, DatasetSource::Directory(dir.path()), 0).is_err());
}

#[test]
fn mixed_scripted_and_teleop_dataset_trains() {
    let dir = tempfile::tempdir().unwrap();
    let task = TaskSpec::new(TaskKind::Lifting);
    let scripted = build_dataset(
        &task,
        2,
        DatasetSource::Scripted {
            first_seed: 100,
            max_attempts: 10,
        },
        0,
    )
    .unwrap();
    scripted.save(&dir.path().join("a-scripted.dm1")).unwrap();
    let mut s = session(dir.path(), TaskKind::Lifting);
    start(&mut s, 22);
    demonstrate(&mut s, &task);
    s.control(1, &ctl(CtlAction::Save)).unwrap();

    let kv = KvMap::parse_str(&format!(
        "task = lifting\ndemos = {}\ndemos.n = 3\nppo.n_workers = 2\nppo.n_policy_updates = 1\nppo.n_value_updates = 1\nppo.n_disc_updates = 1\nppo.n_aux_updates = 1",
        dir.path().display()
    ))
    .unwrap();
    let mut t = Trainer::new(RunConfig::from_kv(&kv).unwrap()).unwrap();
    let sources: Vec<_> = t.demos.as_ref().unwrap().episodes.iter().map(|e| e.source).collect();
    assert!(sources.contains(&DemoSource::Teleop) && sources.contains(&DemoSource::Scripted));
    let m = t.iterate().unwrap();
    assert!(!m.aborted && m.policy_loss.is_finite() && m.disc_loss.is_finite());
}
