//! Scripted demonstrator: a stateless waypoint controller over Cartesian
//! gripper targets, mapped to joint velocities through the damped
//! Jacobian pseudo-inverse.

use std::f64::consts::FRAC_PI_2;

use crate::sim2d::kinematics::{ee_velocity_to_action, gripper_pose, GripperPose};
use crate::sim2d::state::{ObjectBody, PhysState};
use crate::sim2d::task::{resting_on, TaskKind, TaskSpec};

pub const EXPERT_VERSION: &str = "waypoint-1";

const KP: f64 = 5.0;
const VMAX: f64 = 0.35;
const K_ANGLE: f64 = 3.0;
const HOVER: f64 = 0.08;
const LIFT_TO: f64 = 0.15;
const ALIGN_TOL: f64 = 0.006;
const DESCEND_TOL: f64 = 0.004;
const OPEN_MARGIN: f64 = 0.012;
const PLACE_CLEARANCE: f64 = 0.002;

struct Cmd {
    target: (f64, f64),
    grip: f64,
}

fn track(task: &TaskSpec, s: &PhysState, g: GripperPose, c: Cmd) -> Vec<f64> {
    let (ex, ey) = (c.target.0 - g.x, c.target.1 - g.y);
    let (mut vx, mut vy) = (KP * ex, KP * ey);
    let n = vx.hypot(vy);
    if n > VMAX {
        vx *= VMAX / n;
        vy *= VMAX / n;
    }
    let w = K_ANGLE * (-FRAC_PI_2 - g.angle);
    ee_velocity_to_action(&task.arm, &s.joint_angles, [vx, vy, w], c.grip)
}

/// Approach from above, descend with open fingers, close. Retries by
/// reopening when the fingers shut without a grasp.
fn grasp(s: &PhysState, g: GripperPose, o: &ObjectBody) -> Cmd {
    let w = o.width();
    let open = if s.finger_aperture < w + OPEN_MARGIN { 1.0 } else { 0.0 };
    let dx = (o.x() - g.x).abs();
    let hover_y = o.y() + HOVER;
    let low = g.y < o.y() + HOVER / 2.0;
    if dx > 3.0 * ALIGN_TOL {
        let target = if low { (g.x, hover_y) } else { (o.x(), g.y.max(hover_y)) };
        return Cmd { target, grip: open };
    }
    if dx > ALIGN_TOL && !low {
        return Cmd {
            target: (o.x(), g.y),
            grip: open,
        };
    }
    if dx > ALIGN_TOL || g.y - o.y() > DESCEND_TOL {
        return Cmd {
            target: (o.x(), o.y()),
            grip: open,
        };
    }
    let grip = if s.finger_aperture < w - 0.002 { 1.0 } else { -1.0 };
    Cmd {
        target: (o.x(), o.y()),
        grip,
    }
}

fn hold_above(g: GripperPose, y: f64) -> Cmd {
    Cmd {
        target: (g.x, y),
        grip: 1.0,
    }
}

/// Carries the attached `top` box over `base`, lowers it and lets go.
fn place(g: GripperPose, top: &ObjectBody, base: &ObjectBody) -> Cmd {
    let off = (top.x() - g.x, top.y() - g.y);
    let rest_y = base.top() + top.half_extents.1;
    let carry_y = rest_y + HOVER;
    let to_pad = |p: (f64, f64)| (p.0 - off.0, p.1 - off.1);
    if (top.x() - base.x()).abs() > ALIGN_TOL / 2.0 {
        let target = if top.y() < carry_y - 0.02 && (top.x() - base.x()).abs() > 3.0 * ALIGN_TOL {
            to_pad((top.x(), carry_y))
        } else {
            to_pad((base.x(), carry_y))
        };
        return Cmd { target, grip: -1.0 };
    }
    if top.bottom() - base.top() > PLACE_CLEARANCE + 0.001 {
        return Cmd {
            target: to_pad((base.x(), rest_y + PLACE_CLEARANCE)),
            grip: -1.0,
        };
    }
    Cmd {
        target: (g.x, g.y),
        grip: 1.0,
    }
}

/// Deterministic expert action for `s`, each component in `[-1, 1]`.
pub fn scripted_expert(task: &TaskSpec, s: &PhysState) -> Vec<f64> {
    let g = gripper_pose(&task.arm, &s.joint_angles);
    let cmd = match task.kind {
        TaskKind::Lifting => {
            let b = &s.objects[0];
            if b.attached {
                Cmd {
                    target: (g.x, LIFT_TO + (g.y - b.y())),
                    grip: -1.0,
                }
            } else {
                grasp(s, g, b)
            }
        }
        TaskKind::Stacking | TaskKind::ClearingBlocks => {
            let (orange, pink) = (&s.objects[0], &s.objects[1]);
            let clearing = task.kind == TaskKind::ClearingBlocks;
            if orange.attached {
                place(g, orange, pink)
            } else if resting_on(s, 0, 1) {
                if !clearing {
                    hold_above(g, orange.top() + HOVER)
                } else if pink.attached {
                    Cmd {
                        target: (g.x, LIFT_TO + (g.y - pink.y())),
                        grip: -1.0,
                    }
                } else {
                    grasp(s, g, pink)
                }
            } else if pink.attached {
                // holding the wrong box: put it down
                Cmd {
                    target: (g.x, g.y),
                    grip: 1.0,
                }
            } else {
                grasp(s, g, orange)
            }
        }
    };
    track(task, s, g, cmd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim2d::physics::{step, DT};

    fn run(kind: TaskKind, seed: u64) -> (bool, usize) {
        let task = TaskSpec::new(kind);
        let mut s = task.reset(seed, None).unwrap();
        for t in 0..task.episode_length {
            let a = scripted_expert(&task, &s);
            assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
            s = step(&s, &a, &task.arm, DT).unwrap();
            if task.stage_of(&s) == task.final_stage() {
                return (true, t + 1);
            }
        }
        (false, task.episode_length)
    }

    #[test]
    fn deterministic() {
        let task = TaskSpec::new(TaskKind::Stacking);
        let s = task.reset(11, None).unwrap();
        assert_eq!(scripted_expert(&task, &s), scripted_expert(&task, &s));
    }

    #[test]
    fn solves_each_task_on_a_few_seeds() {
        for kind in [TaskKind::Lifting, TaskKind::Stacking, TaskKind::ClearingBlocks] {
            let ok = (0..10).filter(|&s| run(kind, s).0).count();
            assert!(ok >= 9, "{kind:?}: {ok}/10");
        }
    }
}
