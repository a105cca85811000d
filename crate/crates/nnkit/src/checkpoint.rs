//! Checkpoint container: `RIAL-CK1` magic, little-endian u64 manifest length,
//! a JSON manifest (version, dtype, metadata, tensor names and shapes), then
//! the raw little-endian `f32` arrays in manifest order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::error::{shape_err, NnError, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RIAL-CK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dtype: String,
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| NnError::Checkpoint(format!("missing metadata `{key}`")))
    }

    pub fn put(&mut self, name: &str, t: Tensor<f32>) {
        let mut t = t;
        t.clear_grad();
        self.tensors.insert(name.to_string(), t);
    }

    /// Stores every parameter of `store` under `prefix/`.
    pub fn put_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, p) in store.iter() {
            self.put(&format!("{prefix}/{name}"), p.tensor.clone());
        }
    }

    /// Loads `prefix/` tensors into `store`; names and shapes must match exactly.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let pre = format!("{prefix}/");
        let stored: Vec<&String> = self.tensors.keys().filter(|k| k.starts_with(&pre)).collect();
        if stored.len() != store.len() {
            return Err(NnError::Checkpoint(format!(
                "`{prefix}` holds {} tensors, network expects {}",
                stored.len(),
                store.len()
            )));
        }
        let mut loaded = ParamStore::new();
        for (name, p) in store.iter() {
            let key = format!("{pre}{name}");
            let t = self
                .tensors
                .get(&key)
                .ok_or_else(|| NnError::Checkpoint(format!("missing tensor `{key}`")))?;
            if t.shape() != p.tensor.shape() {
                return Err(shape_err("checkpoint", t.shape(), p.tensor.shape()));
            }
            loaded.insert(name, t.clone(), p.init.clone())?;
        }
        *store = loaded;
        Ok(())
    }

    pub fn put_adam(&mut self, prefix: &str, adam: &AdamState<f32>) {
        self.set_meta(&format!("{prefix}.t"), adam.step_count());
        for name in adam.param_names() {
            let (m, v) = adam.moments(name).expect("own name");
            self.put(
                &format!("{prefix}.m/{name}"),
                Tensor::new(&[m.len()], m.to_vec()).expect("1-d"),
            );
            self.put(
                &format!("{prefix}.v/{name}"),
                Tensor::new(&[v.len()], v.to_vec()).expect("1-d"),
            );
        }
    }

    pub fn load_adam(&self, prefix: &str, adam: &mut AdamState<f32>) -> Result<()> {
        let t: u64 = self
            .meta(&format!("{prefix}.t"))?
            .parse()
            .map_err(|_| NnError::Checkpoint(format!("bad `{prefix}.t`")))?;
        let mut moments = BTreeMap::new();
        let names: Vec<String> = adam.param_names().map(str::to_string).collect();
        for name in names {
            let get = |kind: &str| {
                self.tensors
                    .get(&format!("{prefix}.{kind}/{name}"))
                    .map(|t| t.values().to_vec())
                    .ok_or_else(|| NnError::Checkpoint(format!("missing {kind} for `{name}`")))
            };
            moments.insert(name.clone(), (get("m")?, get("v")?));
        }
        adam.restore(t, moments)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            dtype: "f32".into(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for t in self.tensors.values() {
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let manifest: Manifest =
            serde_json::from_slice(&json).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported version {}",
                manifest.version
            )));
        }
        if manifest.dtype != "f32" {
            return Err(NnError::Checkpoint(format!("unsupported dtype {}", manifest.dtype)));
        }
        let mut tensors = BTreeMap::new();
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let vals = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.insert(e.name, Tensor::new(&e.shape, vals)?);
        }
        Ok(Self {
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let f = std::fs::File::create(&tmp)?;
            let mut w = std::io::BufWriter::new(f);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Builds an empty store of the given shapes, used as a loading template.
pub fn template(shapes: &[(&str, &[usize])]) -> Result<ParamStore<f32>> {
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.insert(name, Tensor::zeros(shape), Init::Zeros)?;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in proptest::collection::vec(proptest::num::f32::ANY, 1..64)) {
            let mut ck = Checkpoint::new();
            ck.set_meta("arch", "test");
            ck.put("x", Tensor::new(&[vals.len()], vals.clone()).unwrap());
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(&buf[..]).unwrap();
            let got = back.tensors["x"].values();
            prop_assert_eq!(got.len(), vals.len());
            for (a, b) in got.iter().zip(&vals) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(back.meta("arch").unwrap(), "test");
        }
    }

    #[test]
    fn store_and_adam_round_trip() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(4);
        let mut s = ParamStore::<f32>::new();
        s.register("a.w", &[3, 2], Init::FanInUniform { fan_in: 3 }, &mut rng)
            .unwrap();
        s.register("a.b", &[2], Init::Zeros, &mut rng).unwrap();
        let mut adam = AdamState::new(&s, crate::AdamConfig::default());
        s.get_mut("a.w").unwrap().set_grad(vec![0.5; 6]).unwrap();
        s.get_mut("a.b").unwrap().set_grad(vec![-0.5; 2]).unwrap();
        adam.update(&mut s).unwrap();

        let mut ck = Checkpoint::new();
        ck.put_store("policy", &s);
        ck.put_adam("adam.policy", &adam);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();

        let mut s2 = template(&[("a.w", &[3, 2]), ("a.b", &[2])]).unwrap();
        back.load_store("policy", &mut s2).unwrap();
        assert_eq!(s2.get("a.w").unwrap().values(), s.get("a.w").unwrap().values());
        let mut adam2 = AdamState::new(&s2, crate::AdamConfig::default());
        back.load_adam("adam.policy", &mut adam2).unwrap();
        assert_eq!(adam2.step_count(), 1);
        assert_eq!(adam2.moments("a.b"), adam.moments("a.b"));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut ck = Checkpoint::new();
        ck.put("p/w", Tensor::zeros(&[2, 2]));
        let mut s = template(&[("w", &[2, 3])]).unwrap();
        assert!(ck.load_store("p", &mut s).is_err());
    }
}
