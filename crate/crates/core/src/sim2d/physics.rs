//! Velocity-commanded joints, kinematic fingers, a grasp latch and gravity
//! settling for free boxes.

use super::arm::ArmModel;
use super::kinematics::gripper_pose;
use super::state::PhysState;
use crate::error::{Error, Result};

pub const CONTROL_HZ: u32 = 20;
pub const DT: f64 = 1.0 / CONTROL_HZ as f64;
pub const GRAVITY: f64 = 9.81;
/// Latch engages when the aperture closes below object width plus this.
pub const ENGAGE_MARGIN: f64 = 0.005;
/// Pad to object-center distance for the latch to engage.
pub const ENGAGE_RADIUS: f64 = 0.015;
/// Latch releases when the aperture opens past object width plus this.
pub const RELEASE_MARGIN: f64 = 0.010;

/// Checks dimension and finiteness, then clamps into `[-1, 1]`.
pub fn sanitize_action(action: &[f64], dim: usize) -> Result<Vec<f64>> {
    if action.len() != dim {
        return Err(Error::Action(format!("expected {dim} components, got {}", action.len())));
    }
    if let Some(i) = action.iter().position(|a| !a.is_finite()) {
        return Err(Error::Action(format!("component {i} is not finite")));
    }
    Ok(action.iter().map(|a| a.clamp(-1.0, 1.0)).collect())
}

/// One joint velocity update under the configured damping law, Coulomb
/// friction applied afterwards.
pub fn joint_velocity_update(v: f64, u: f64, arm: &ArmModel, dt: f64) -> f64 {
    let d = &arm.dynamics;
    let target = u * arm.max_joint_speed;
    let v = (1.0 - d.damping * dt) * v + d.gain * (target - v) * dt / (1.0 + d.armature);
    let f = d.friction_coeff * dt;
    if v.abs() <= f {
        0.0
    } else {
        v - f * v.signum()
    }
}

pub fn step(state: &PhysState, action: &[f64], arm: &ArmModel, dt: f64) -> Result<PhysState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Invalid(format!("time step {dt}")));
    }
    let u = sanitize_action(action, arm.action_dim())?;
    let n = arm.n_joints();
    if state.joint_angles.len() != n {
        return Err(Error::State(format!(
            "state has {} joints, arm has {n}",
            state.joint_angles.len()
        )));
    }
    let mut s = state.clone();

    for i in 0..n {
        let mut v = joint_velocity_update(s.joint_velocities[i], u[i], arm, dt);
        let mut q = s.joint_angles[i] + v * dt;
        let (lo, hi) = arm.joint_limits[i];
        if q <= lo {
            q = lo;
            v = v.max(0.0);
        } else if q >= hi {
            q = hi;
            v = v.min(0.0);
        }
        s.joint_angles[i] = q;
        s.joint_velocities[i] = v;
    }

    let old_ap = s.finger_aperture;
    let mut ap = (old_ap + u[n] * arm.finger_speed * dt).clamp(0.0, arm.finger_max_aperture);
    let pad = gripper_pose(arm, &s.joint_angles);

    match s.attached() {
        Some(k) => {
            let o = &mut s.objects[k];
            if ap > o.width() + RELEASE_MARGIN {
                o.attached = false;
                o.velocity = (0.0, 0.0, 0.0);
                o.grip_offset = (0.0, 0.0);
            } else {
                ap = ap.max(o.width());
                o.pose.0 = pad.x + o.grip_offset.0;
                o.pose.1 = pad.y + o.grip_offset.1;
                o.velocity = (0.0, 0.0, 0.0);
            }
        }
        None => {
            let mut best: Option<(usize, f64)> = None;
            for (k, o) in s.objects.iter().enumerate() {
                let d = (o.x() - pad.x).hypot(o.y() - pad.y);
                let closing = old_ap >= o.width() && ap < o.width() + ENGAGE_MARGIN;
                if d <= ENGAGE_RADIUS && closing && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((k, d));
                }
            }
            if let Some((k, _)) = best {
                let o = &mut s.objects[k];
                o.attached = true;
                o.grip_offset = (o.x() - pad.x, o.y() - pad.y);
                o.velocity = (0.0, 0.0, 0.0);
                ap = ap.max(o.width());
            }
        }
    }
    s.finger_aperture = ap;

    settle(&mut s, state, dt);
    s.time_step_index += 1;
    s.rng_counter += 1;
    Ok(s)
}

/// Index of the box `k` rested on in `s`, if any.
fn resting_support(s: &PhysState, k: usize) -> Option<usize> {
    let me = &s.objects[k];
    (0..s.objects.len()).find(|&j| {
        let o = &s.objects[j];
        j != k
            && o.y() < me.y()
            && (o.x() - me.x()).abs() < o.half_extents.0 + me.half_extents.0
            && (me.bottom() - o.top()).abs() < 1e-9
    })
}

/// Gravity for free objects, lowest first, each resting on the table or on
/// the highest overlapping box beneath its center. A box that rested on
/// another box before the step is carried along horizontally with it.
fn settle(s: &mut PhysState, prev: &PhysState, dt: f64) {
    let mut order: Vec<usize> = (0..s.objects.len()).filter(|&k| !s.objects[k].attached).collect();
    order.sort_by(|&a, &b| s.objects[a].y().total_cmp(&s.objects[b].y()).then(a.cmp(&b)));
    for &k in &order {
        if !prev.objects[k].attached {
            if let Some(j) = resting_support(prev, k) {
                s.objects[k].pose.0 += s.objects[j].x() - prev.objects[j].x();
            }
        }
        let me = &s.objects[k];
        let mut rest = 0.0f64;
        for (j, o) in s.objects.iter().enumerate() {
            if j == k || o.y() >= me.y() {
                continue;
            }
            if (o.x() - me.x()).abs() < o.half_extents.0 + me.half_extents.0 {
                rest = rest.max(o.top());
            }
        }
        let o = &mut s.objects[k];
        let vy = o.velocity.1 - GRAVITY * dt;
        let y = o.pose.1 + vy * dt;
        if y - o.half_extents.1 <= rest {
            o.pose.1 = rest + o.half_extents.1;
            o.velocity = (0.0, 0.0, 0.0);
        } else {
            o.pose.1 = y;
            o.velocity = (0.0, vy, 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim2d::kinematics::gripper_pose;
    use crate::sim2d::state::ObjectBody;

    fn rest_state() -> PhysState {
        PhysState::at_rest(vec![1.2, -0.9, -1.3], 0.08, vec![])
    }

    #[test]
    fn zero_action_fixed_point() {
        let arm = ArmModel::default();
        let s = rest_state();
        let t = step(&s, &[0.0; 4], &arm, DT).unwrap();
        assert_eq!(t.joint_angles, s.joint_angles);
        assert_eq!(t.time_step_index, 1);
    }

    #[test]
    fn single_step_hand_integration() {
        let arm = ArmModel::default();
        let s = rest_state();
        let t = step(&s, &[1.0, 0.0, 0.0, 0.0], &arm, 0.05).unwrap();
        // v = gain * max_speed * dt / (1 + armature) = 20 * 2 * 0.05 / 1.5, minus friction 0.1 * 0.05
        let v = 20.0 * 2.0 * 0.05 / 1.5 - 0.005;
        assert!((t.joint_velocities[0] - v).abs() < 1e-12, "{}", t.joint_velocities[0]);
        assert!((t.joint_angles[0] - (1.2 + v * 0.05)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_rejected_and_out_of_range_clamped() {
        let arm = ArmModel::default();
        let s = rest_state();
        assert!(step(&s, &[f64::NAN, 0.0, 0.0, 0.0], &arm, DT).is_err());
        assert!(step(&s, &[0.0; 3], &arm, DT).is_err());
        let a = step(&s, &[5.0, 0.0, 0.0, 0.0], &arm, DT).unwrap();
        let b = step(&s, &[1.0, 0.0, 0.0, 0.0], &arm, DT).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn joints_clamped_at_limits() {
        let arm = ArmModel::default();
        let mut s = rest_state();
        for _ in 0..200 {
            s = step(&s, &[1.0, 1.0, 1.0, 0.0], &arm, DT).unwrap();
        }
        s.validate(&arm).unwrap();
        assert_eq!(s.joint_angles[0], arm.joint_limits[0].1);
    }

    #[test]
    fn dropped_block_lands_on_table() {
        let arm = ArmModel::default();
        let mut o = ObjectBody::new(0, (0.02, 0.02), 0.4, [255, 0, 0]);
        o.pose.1 = 0.3;
        let mut s = PhysState::at_rest(vec![1.2, -0.9, -1.3], 0.08, vec![o]);
        for _ in 0..40 {
            s = step(&s, &[0.0; 4], &arm, DT).unwrap();
        }
        assert_eq!(s.objects[0].y(), 0.02);
        assert_eq!(s.objects[0].velocity.1, 0.0);
    }

    #[test]
    fn latch_engages_holds_and_releases() {
        let arm = ArmModel::default();
        let q = vec![1.2, -0.9, -1.3];
        let pad = gripper_pose(&arm, &q);
        let mut o = ObjectBody::new(0, (0.02, 0.02), pad.x + 0.005, [255, 0, 0]);
        o.pose.1 = pad.y;
        let mut s = PhysState::at_rest(q, 0.05, vec![o]);
        s.objects[0].velocity = (0.0, 0.0, 0.0);
        // closing through width + 5 mm engages
        s = step(&s, &[0.0, 0.0, 0.0, -1.0], &arm, DT).unwrap();
        assert!(s.objects[0].attached);
        for _ in 0..10 {
            s = step(&s, &[0.0, 0.0, 0.0, -1.0], &arm, DT).unwrap();
        }
        assert!(s.finger_aperture >= s.objects[0].width());
        // raise the arm, object follows
        for _ in 0..5 {
            s = step(&s, &[0.5, 0.0, 0.0, 0.0], &arm, DT).unwrap();
        }
        let pad = gripper_pose(&arm, &s.joint_angles);
        assert!((s.objects[0].x() - pad.x - 0.005).abs() < 1e-12);
        // 8 mm of opening does not reach the release margin, 16 mm does
        s = step(&s, &[0.0, 0.0, 0.0, 1.0], &arm, DT).unwrap();
        assert!(s.objects[0].attached);
        s = step(&s, &[0.0, 0.0, 0.0, 1.0], &arm, DT).unwrap();
        assert!(!s.objects[0].attached);
    }

    #[test]
    fn closed_fingers_do_not_grasp() {
        let arm = ArmModel::default();
        let q = vec![1.2, -0.9, -1.3];
        let pad = gripper_pose(&arm, &q);
        let mut o = ObjectBody::new(0, (0.02, 0.02), pad.x, [255, 0, 0]);
        o.pose.1 = pad.y;
        let s = PhysState::at_rest(q, 0.01, vec![o]);
        let t = step(&s, &[0.0, 0.0, 0.0, -1.0], &arm, DT).unwrap();
        assert!(!t.objects[0].attached);
    }

    #[test]
    fn stacked_box_rides_on_lifted_support() {
        let arm = ArmModel::default();
        let q = vec![1.2, -0.9, -1.3];
        let pad = gripper_pose(&arm, &q);
        let mut pink = ObjectBody::new(0, (0.03, 0.02), pad.x, [240, 120, 200]);
        pink.pose.1 = pad.y;
        pink.attached = true;
        let mut orange = ObjectBody::new(1, (0.02, 0.02), pad.x, [255, 140, 0]);
        orange.pose.1 = pink.top() + 0.02;
        let mut s = PhysState::at_rest(q, 0.06, vec![pink, orange]);
        for _ in 0..10 {
            s = step(&s, &[0.6, 0.0, 0.0, 0.0], &arm, DT).unwrap();
        }
        let (p, o) = (&s.objects[0], &s.objects[1]);
        assert!((o.bottom() - p.top()).abs() < 1e-9, "{} {}", o.bottom(), p.top());
    }
}
