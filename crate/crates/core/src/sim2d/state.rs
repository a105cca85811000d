//! Simulator state and its `RIAL-PS1` binary record.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::arm::ArmModel;
use crate::error::{Error, Result};

pub const STATE_MAGIC: &[u8; 8] = b"RIAL-PS1";
pub const STATE_VERSION: u32 = 1;

/// Axis-aligned box resting on the table or on another box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectBody {
    pub id: u32,
    pub half_extents: (f64, f64),
    /// Center `(x, y)` and orientation.
    pub pose: (f64, f64, f64),
    pub velocity: (f64, f64, f64),
    pub color: [u8; 3],
    pub mass: f64,
    pub attached: bool,
    /// Object center minus gripper pad while attached.
    pub grip_offset: (f64, f64),
}

impl ObjectBody {
    pub fn new(id: u32, half_extents: (f64, f64), x: f64, color: [u8; 3]) -> Self {
        Self {
            id,
            half_extents,
            pose: (x, half_extents.1, 0.0),
            velocity: (0.0, 0.0, 0.0),
            color,
            mass: 0.1,
            attached: false,
            grip_offset: (0.0, 0.0),
        }
    }

    pub fn x(&self) -> f64 {
        self.pose.0
    }

    pub fn y(&self) -> f64 {
        self.pose.1
    }

    pub fn width(&self) -> f64 {
        2.0 * self.half_extents.0
    }

    pub fn bottom(&self) -> f64 {
        self.pose.1 - self.half_extents.1
    }

    pub fn top(&self) -> f64 {
        self.pose.1 + self.half_extents.1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysState {
    pub time_step_index: u64,
    pub joint_angles: Vec<f64>,
    pub joint_velocities: Vec<f64>,
    pub finger_aperture: f64,
    pub objects: Vec<ObjectBody>,
    pub rng_counter: u64,
}

impl PhysState {
    pub fn at_rest(joint_angles: Vec<f64>, finger_aperture: f64, objects: Vec<ObjectBody>) -> Self {
        let n = joint_angles.len();
        Self {
            time_step_index: 0,
            joint_angles,
            joint_velocities: vec![0.0; n],
            finger_aperture,
            objects,
            rng_counter: 0,
        }
    }

    pub fn attached(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.attached)
    }

    pub fn validate(&self, arm: &ArmModel) -> Result<()> {
        let n = arm.n_joints();
        if self.joint_angles.len() != n || self.joint_velocities.len() != n {
            return Err(Error::State(format!(
                "state has {} joints, arm has {n}",
                self.joint_angles.len()
            )));
        }
        for (i, (&q, &(lo, hi))) in self.joint_angles.iter().zip(&arm.joint_limits).enumerate() {
            if !(lo..=hi).contains(&q) {
                return Err(Error::State(format!("joint {i} angle {q} outside [{lo}, {hi}]")));
            }
        }
        if !(0.0..=arm.finger_max_aperture).contains(&self.finger_aperture) {
            return Err(Error::State(format!("aperture {} out of range", self.finger_aperture)));
        }
        if self.objects.iter().filter(|o| o.attached).count() > 1 {
            return Err(Error::State("more than one attached object".into()));
        }
        if self
            .objects
            .iter()
            .any(|o| !(o.half_extents.0 > 0.0 && o.half_extents.1 > 0.0))
        {
            return Err(Error::State("object half extents must be positive".into()));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(64 + 128 * self.objects.len());
        b.extend_from_slice(STATE_MAGIC);
        let w = &mut b;
        w.write_u32::<LittleEndian>(STATE_VERSION).unwrap();
        w.write_u64::<LittleEndian>(self.time_step_index).unwrap();
        w.write_u32::<LittleEndian>(self.joint_angles.len() as u32).unwrap();
        for v in self.joint_angles.iter().chain(&self.joint_velocities) {
            w.write_f64::<LittleEndian>(*v).unwrap();
        }
        w.write_f64::<LittleEndian>(self.finger_aperture).unwrap();
        w.write_u32::<LittleEndian>(self.objects.len() as u32).unwrap();
        for o in &self.objects {
            w.write_u32::<LittleEndian>(o.id).unwrap();
            for v in [
                o.half_extents.0,
                o.half_extents.1,
                o.pose.0,
                o.pose.1,
                o.pose.2,
                o.velocity.0,
                o.velocity.1,
                o.velocity.2,
            ] {
                w.write_f64::<LittleEndian>(v).unwrap();
            }
            w.extend_from_slice(&o.color);
            w.write_f64::<LittleEndian>(o.mass).unwrap();
            w.write_u8(o.attached as u8).unwrap();
            w.write_f64::<LittleEndian>(o.grip_offset.0).unwrap();
            w.write_f64::<LittleEndian>(o.grip_offset.1).unwrap();
        }
        w.write_u64::<LittleEndian>(self.rng_counter).unwrap();
        b
    }

    /// Decodes one record and returns it with the number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let total = bytes.len();
        let mut r = bytes;
        let err = |_| Error::Decode("truncated state record".into());
        let mut magic = [0u8; 8];
        std::io::Read::read_exact(&mut r, &mut magic).map_err(err)?;
        if &magic != STATE_MAGIC {
            return Err(Error::Decode("bad state magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(err)?;
        if version != STATE_VERSION {
            return Err(Error::Decode(format!("unsupported state version {version}")));
        }
        let time_step_index = r.read_u64::<LittleEndian>().map_err(err)?;
        let n = r.read_u32::<LittleEndian>().map_err(err)? as usize;
        if n > 64 {
            return Err(Error::Decode(format!("implausible joint count {n}")));
        }
        let f = |r: &mut &[u8]| r.read_f64::<LittleEndian>().map_err(err);
        let joint_angles = (0..n).map(|_| f(&mut r)).collect::<Result<Vec<_>>>()?;
        let joint_velocities = (0..n).map(|_| f(&mut r)).collect::<Result<Vec<_>>>()?;
        let finger_aperture = f(&mut r)?;
        let m = r.read_u32::<LittleEndian>().map_err(err)? as usize;
        if m > 1024 {
            return Err(Error::Decode(format!("implausible object count {m}")));
        }
        let mut objects = Vec::with_capacity(m);
        for _ in 0..m {
            let id = r.read_u32::<LittleEndian>().map_err(err)?;
            let mut v = [0.0; 8];
            for x in &mut v {
                *x = f(&mut r)?;
            }
            let mut color = [0u8; 3];
            std::io::Read::read_exact(&mut r, &mut color).map_err(err)?;
            let mass = f(&mut r)?;
            let attached = match r.read_u8().map_err(err)? {
                0 => false,
                1 => true,
                b => return Err(Error::Decode(format!("bad attached flag {b}"))),
            };
            let grip_offset = (f(&mut r)?, f(&mut r)?);
            objects.push(ObjectBody {
                id,
                half_extents: (v[0], v[1]),
                pose: (v[2], v[3], v[4]),
                velocity: (v[5], v[6], v[7]),
                color,
                mass,
                attached,
                grip_offset,
            });
        }
        let rng_counter = r.read_u64::<LittleEndian>().map_err(err)?;
        let used = total - r.len();
        Ok((
            Self {
                time_step_index,
                joint_angles,
                joint_velocities,
                finger_aperture,
                objects,
                rng_counter,
            },
            used,
        ))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (s, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Decode(format!("{} trailing bytes", bytes.len() - used)));
        }
        Ok(s)
    }

    /// Field-wise bit equality; `NaN` payloads compare by bits too.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.encode() == other.encode()
    }

    /// Name of the first field that differs bit-wise, if any.
    pub fn first_difference(&self, other: &Self) -> Option<String> {
        let bits = |a: &[f64], b: &[f64]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        if self.time_step_index != other.time_step_index {
            return Some("time_step_index".into());
        }
        if !bits(&self.joint_angles, &other.joint_angles) {
            return Some("joint_angles".into());
        }
        if !bits(&self.joint_velocities, &other.joint_velocities) {
            return Some("joint_velocities".into());
        }
        if self.finger_aperture.to_bits() != other.finger_aperture.to_bits() {
            return Some("finger_aperture".into());
        }
        if self.objects.len() != other.objects.len() {
            return Some("objects".into());
        }
        for (i, (a, b)) in self.objects.iter().zip(&other.objects).enumerate() {
            let mut sa = PhysState::at_rest(vec![], 0.0, vec![a.clone()]);
            let mut sb = PhysState::at_rest(vec![], 0.0, vec![b.clone()]);
            sa.rng_counter = 0;
            sb.rng_counter = 0;
            if sa.encode() != sb.encode() {
                return Some(format!("objects[{i}]"));
            }
        }
        if self.rng_counter != other.rng_counter {
            return Some("rng_counter".into());
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_state() -> PhysState {
        let mut o = ObjectBody::new(3, (0.02, 0.02), 0.31, [230, 120, 30]);
        o.velocity = (0.0, -0.25, 0.0);
        let mut s = PhysState::at_rest(vec![1.2, -0.7, -1.1], 0.05, vec![o]);
        s.joint_velocities = vec![0.1, -0.2, 0.3];
        s.rng_counter = 17;
        s.time_step_index = 17;
        s
    }

    #[test]
    fn round_trip_exact() {
        let s = sample_state();
        let bytes = s.encode();
        assert_eq!(&bytes[..8], STATE_MAGIC);
        let back = PhysState::decode(&bytes).unwrap();
        assert_eq!(back, s);
        assert!(back.bit_eq(&s));
        assert_eq!(back.first_difference(&s), None);
    }

    #[test]
    fn corrupt_records_rejected() {
        let mut bytes = sample_state().encode();
        assert!(PhysState::decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(PhysState::decode(&bytes).is_err());
    }

    #[test]
    fn difference_names_field() {
        let a = sample_state();
        let mut b = a.clone();
        b.objects[0].pose.1 += 1e-12;
        assert_eq!(a.first_difference(&b).as_deref(), Some("objects[0]"));
    }

    proptest! {
        #[test]
        fn arbitrary_floats_round_trip(q in proptest::collection::vec(any::<f64>(), 3), ap in any::<f64>(), x in any::<f64>()) {
            let mut s = sample_state();
            s.joint_angles = q;
            s.finger_aperture = ap;
            s.objects[0].pose.0 = x;
            let back = PhysState::decode(&s.encode()).unwrap();
            prop_assert!(back.bit_eq(&s));
        }
    }
}
