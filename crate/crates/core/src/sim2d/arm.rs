use byteorder::{LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    /// Coulomb friction, rad/s^2.
    pub friction_coeff: f64,
    /// Viscous damping, 1/s.
    pub damping: f64,
    pub armature: f64,
    /// Velocity tracking gain, 1/s.
    pub gain: f64,
}

impl Default for Dynamics {
    fn default() -> Self {
        Self {
            friction_coeff: 0.1,
            damping: 1.0,
            armature: 0.5,
            gain: 20.0,
        }
    }
}

impl Dynamics {
    pub fn scaled(&self, f: [f64; 4]) -> Self {
        Self {
            friction_coeff: self.friction_coeff * f[0],
            damping: self.damping * f[1],
            armature: self.armature * f[2],
            gain: self.gain * f[3],
        }
    }
}

/// Planar serial arm attached at the world origin, which sits on the table
/// surface (`y = 0`). Joint angles are relative, the first measured from +x.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub link_lengths: Vec<f64>,
    pub joint_limits: Vec<(f64, f64)>,
    pub max_joint_speed: f64,
    pub finger_max_aperture: f64,
    /// Aperture rate at full command, m/s.
    pub finger_speed: f64,
    pub dynamics: Dynamics,
}

impl Default for ArmModel {
    fn default() -> Self {
        Self {
            link_lengths: vec![0.3, 0.25, 0.15],
            joint_limits: vec![(0.0, std::f64::consts::PI), (-2.6, 2.6), (-2.6, 2.6)],
            max_joint_speed: 2.0,
            finger_max_aperture: 0.08,
            finger_speed: 0.16,
            dynamics: Dynamics::default(),
        }
    }
}

impl ArmModel {
    pub fn n_joints(&self) -> usize {
        self.link_lengths.len()
    }

    /// Action dimension: one velocity per joint plus the aperture.
    pub fn action_dim(&self) -> usize {
        self.n_joints() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("arm: {m}")));
        if self.link_lengths.is_empty() || self.link_lengths.iter().any(|&l| !(l > 0.0)) {
            return bad("link lengths must be positive");
        }
        if self.joint_limits.len() != self.link_lengths.len() {
            return bad("one joint limit per link");
        }
        if self.joint_limits.iter().any(|&(lo, hi)| !(lo < hi)) {
            return bad("joint limit min must be below max");
        }
        let d = &self.dynamics;
        if [d.friction_coeff, d.damping, d.armature, d.gain]
            .iter()
            .any(|&v| !(v > 0.0 && v.is_finite()))
        {
            return bad("dynamics scalars must be positive");
        }
        if !(self.max_joint_speed > 0.0 && self.finger_max_aperture > 0.0 && self.finger_speed > 0.0) {
            return bad("speeds and aperture must be positive");
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.write_u32::<LittleEndian>(self.n_joints() as u32).unwrap();
        for (l, (lo, hi)) in self.link_lengths.iter().zip(&self.joint_limits) {
            for v in [*l, *lo, *hi] {
                b.write_f64::<LittleEndian>(v).unwrap();
            }
        }
        let d = &self.dynamics;
        for v in [
            self.max_joint_speed,
            self.finger_max_aperture,
            self.finger_speed,
            d.friction_coeff,
            d.damping,
            d.armature,
            d.gain,
        ] {
            b.write_f64::<LittleEndian>(v).unwrap();
        }
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        use byteorder::ReadBytesExt;
        let mut r = bytes;
        let err = |_| Error::Decode("truncated arm model".into());
        let n = r.read_u32::<LittleEndian>().map_err(err)? as usize;
        if n > 64 {
            return Err(Error::Decode(format!("implausible joint count {n}")));
        }
        let mut arm = ArmModel {
            link_lengths: Vec::with_capacity(n),
            joint_limits: Vec::with_capacity(n),
            ..ArmModel::default()
        };
        for _ in 0..n {
            arm.link_lengths.push(r.read_f64::<LittleEndian>().map_err(err)?);
            let lo = r.read_f64::<LittleEndian>().map_err(err)?;
            let hi = r.read_f64::<LittleEndian>().map_err(err)?;
            arm.joint_limits.push((lo, hi));
        }
        let mut f = [0.0; 7];
        for v in &mut f {
            *v = r.read_f64::<LittleEndian>().map_err(err)?;
        }
        arm.max_joint_speed = f[0];
        arm.finger_max_aperture = f[1];
        arm.finger_speed = f[2];
        arm.dynamics = Dynamics {
            friction_coeff: f[3],
            damping: f[4],
            armature: f[5],
            gain: f[6],
        };
        Ok(arm)
    }

    /// SHA-256 of the binary encoding.
    pub fn config_hash(&self) -> [u8; 32] {
        Sha256::digest(self.encode()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let arm = ArmModel::default();
        arm.validate().unwrap();
        assert_eq!(arm.action_dim(), 4);
        assert_eq!(ArmModel::decode(&arm.encode()).unwrap(), arm);
    }

    #[test]
    fn rejects_bad_models() {
        let mut arm = ArmModel::default();
        arm.link_lengths[1] = 0.0;
        assert!(arm.validate().is_err());
        let mut arm = ArmModel::default();
        arm.joint_limits[0] = (1.0, 1.0);
        assert!(arm.validate().is_err());
        let mut arm = ArmModel::default();
        arm.dynamics.damping = -1.0;
        assert!(arm.validate().is_err());
    }

    #[test]
    fn hash_tracks_dynamics() {
        let a = ArmModel::default();
        let mut b = a.clone();
        b.dynamics.gain *= 1.1;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
