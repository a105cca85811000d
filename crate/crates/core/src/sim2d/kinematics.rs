use nalgebra::{DMatrix, DVector};

use super::arm::ArmModel;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GripperPose {
    pub x: f64,
    pub y: f64,
    /// Tool direction: sum of joint angles.
    pub angle: f64,
}

/// Joint positions from the base through the tool tip, `n_joints + 1` points.
pub fn joint_points(arm: &ArmModel, q: &[f64]) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(q.len() + 1);
    let (mut x, mut y, mut a) = (0.0, 0.0, 0.0);
    pts.push((x, y));
    for (l, th) in arm.link_lengths.iter().zip(q) {
        a += th;
        x += l * a.cos();
        y += l * a.sin();
        pts.push((x, y));
    }
    pts
}

/// The gripper pad sits at the tool tip.
pub fn gripper_pose(arm: &ArmModel, q: &[f64]) -> GripperPose {
    let (x, y) = *joint_points(arm, q).last().expect("base point");
    GripperPose {
        x,
        y,
        angle: q.iter().sum(),
    }
}

/// `3 x n` Jacobian of `(x, y, angle)` with respect to the joint angles.
pub fn jacobian(arm: &ArmModel, q: &[f64]) -> DMatrix<f64> {
    let n = q.len();
    let pts = joint_points(arm, q);
    let tip = pts[n];
    let mut j = DMatrix::zeros(3, n);
    for i in 0..n {
        let (px, py) = pts[i];
        j[(0, i)] = -(tip.1 - py);
        j[(1, i)] = tip.0 - px;
        j[(2, i)] = 1.0;
    }
    j
}

/// Damped least-squares inverse `J^T (J J^T + d^2 I)^-1` applied to `v`.
pub fn joint_rates_for(arm: &ArmModel, q: &[f64], v: [f64; 3], damping: f64) -> Vec<f64> {
    let j = jacobian(arm, q);
    let jjt = &j * j.transpose() + DMatrix::identity(3, 3) * (damping * damping);
    let rhs = DVector::from_column_slice(&v);
    let y = jjt
        .lu()
        .solve(&rhs)
        .unwrap_or_else(|| DVector::zeros(3));
    (j.transpose() * y).iter().copied().collect()
}

/// Maps a Cartesian gripper velocity intent `(vx, vy, w)` in m/s and rad/s
/// plus an aperture command to a normalized joint-velocity action.
pub fn ee_velocity_to_action(arm: &ArmModel, q: &[f64], v: [f64; 3], grip: f64) -> Vec<f64> {
    let rates = joint_rates_for(arm, q, v, 0.05);
    let mut a: Vec<f64> = rates
        .iter()
        .map(|r| (r / arm.max_joint_speed).clamp(-1.0, 1.0))
        .collect();
    a.push(grip.clamp(-1.0, 1.0));
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_pose_is_fully_extended() {
        let arm = ArmModel::default();
        let g = gripper_pose(&arm, &[0.0, 0.0, 0.0]);
        assert!((g.x - 0.7).abs() < 1e-12 && g.y.abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let arm = ArmModel::default();
        let q = [1.1, -0.8, -1.2];
        let j = jacobian(&arm, &q);
        let h = 1e-6;
        for i in 0..3 {
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let (a, b) = (gripper_pose(&arm, &qp), gripper_pose(&arm, &qm));
            assert!((j[(0, i)] - (a.x - b.x) / (2.0 * h)).abs() < 1e-6);
            assert!((j[(1, i)] - (a.y - b.y) / (2.0 * h)).abs() < 1e-6);
        }
    }

    #[test]
    fn rates_realize_requested_velocity() {
        let arm = ArmModel::default();
        let q = [1.3, -1.2, -1.6];
        let v = [0.1, -0.05, 0.0];
        let r = joint_rates_for(&arm, &q, v, 1e-4);
        let j = jacobian(&arm, &q);
        let got = &j * DVector::from_vec(r);
        for k in 0..3 {
            assert!((got[k] - v[k]).abs() < 1e-4, "{got}");
        }
    }
}
