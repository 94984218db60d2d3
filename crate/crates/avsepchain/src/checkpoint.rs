//! Binary checkpoint container: named parameter groups with their optimizer
//! moments, schedule state, and a config hash for compatibility checks.
//! Values are little-endian f64, so a save/load round trip is bitwise.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"AVCK";
const VERSION: u32 = 1;

/// Optimizer and schedule state carried alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub lr: f64,
    pub adam_step: u64,
    pub best_val: f64,
    pub since_improve: u32,
    pub since_halve: u32,
    pub epoch: u32,
}

impl Default for TrainerState {
    fn default() -> Self {
        TrainerState {
            lr: 0.0,
            adam_step: 0,
            best_val: f64::INFINITY,
            since_improve: 0,
            since_halve: 0,
            epoch: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub state: TrainerState,
    /// (name, value, adam_m, adam_v) per parameter.
    pub params: Vec<(String, ArrayD<f64>, ArrayD<f64>, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_u32::<LittleEndian>(VERSION)?;
            w.write_u64::<LittleEndian>(self.config_hash)?;
            w.write_f64::<LittleEndian>(self.state.lr)?;
            w.write_u64::<LittleEndian>(self.state.adam_step)?;
            w.write_f64::<LittleEndian>(self.state.best_val)?;
            w.write_u32::<LittleEndian>(self.state.since_improve)?;
            w.write_u32::<LittleEndian>(self.state.since_halve)?;
            w.write_u32::<LittleEndian>(self.state.epoch)?;
            w.write_u32::<LittleEndian>(self.params.len() as u32)?;
            for (name, value, m, v) in &self.params {
                let bytes = name.as_bytes();
                w.write_u16::<LittleEndian>(bytes.len() as u16)?;
                w.write_all(bytes)?;
                w.write_u8(value.ndim() as u8)?;
                for d in value.shape() {
                    w.write_u32::<LittleEndian>(*d as u32)?;
                }
                for arr in [value, m, v] {
                    for x in arr.iter() {
                        w.write_f64::<LittleEndian>(*x)?;
                    }
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = r.read_u64::<LittleEndian>().map_err(trunc)?;
        let state = TrainerState {
            lr: r.read_f64::<LittleEndian>().map_err(trunc)?,
            adam_step: r.read_u64::<LittleEndian>().map_err(trunc)?,
            best_val: r.read_f64::<LittleEndian>().map_err(trunc)?,
            since_improve: r.read_u32::<LittleEndian>().map_err(trunc)?,
            since_halve: r.read_u32::<LittleEndian>().map_err(trunc)?,
            epoch: r.read_u32::<LittleEndian>().map_err(trunc)?,
        };
        let n = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.read_u16::<LittleEndian>().map_err(trunc)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(trunc)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Format("non-utf8 parameter name".into()))?;
            let ndim = r.read_u8().map_err(trunc)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u32::<LittleEndian>().map_err(trunc)? as usize);
            }
            let len: usize = shape.iter().product();
            let read_arr = |r: &mut BufReader<std::fs::File>| -> Result<ArrayD<f64>> {
                let mut data = Vec::with_capacity(len);
                for _ in 0..len {
                    data.push(r.read_f64::<LittleEndian>().map_err(trunc)?);
                }
                ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
                    .map_err(|e| Error::Format(format!("checkpoint shape: {e}")))
            };
            let value = read_arr(&mut r)?;
            let m = read_arr(&mut r)?;
            let v = read_arr(&mut r)?;
            params.push((name, value, m, v));
        }
        Ok(Checkpoint { config_hash, state, params })
    }

    /// Install the stored parameter values into a freshly built store. The
    /// name sets must match exactly.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value, _, _) in &self.params {
            store.set_by_name(name, value.clone())?;
        }
        Ok(())
    }
}

fn trunc<E>(_: E) -> Error {
    Error::Format("truncated checkpoint".into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use tempfile::tempdir;

    #[test]
    fn save_load_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mk = |s: u64| {
            ArrayD::from_shape_fn(IxDyn(&[3, 4]), |ix| {
                ((ix[0] * 7 + ix[1]) as f64 * 0.1234 + s as f64).sin()
            })
        };
        let ck = Checkpoint {
            config_hash: 0xdead_beef,
            state: TrainerState {
                lr: 1.5e-4,
                adam_step: 42,
                best_val: 3.25,
                since_improve: 1,
                since_halve: 2,
                epoch: 9,
            },
            params: vec![
                ("a.w".into(), mk(1), mk(2), mk(3)),
                ("b.w".into(), mk(4), mk(5), mk(6)),
            ],
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.config_hash, ck.config_hash);
        assert_eq!(back.state, ck.state);
        for (a, b) in ck.params.iter().zip(&back.params) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
            assert_eq!(a.2, b.2);
            assert_eq!(a.3, b.3);
        }
        // twice-saved file is identical byte for byte
        let path2 = dir.path().join("model2.ckpt");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint {
            config_hash: 1,
            state: TrainerState::default(),
            params: vec![(
                "x".into(),
                ArrayD::zeros(IxDyn(&[2])),
                ArrayD::zeros(IxDyn(&[2])),
                ArrayD::zeros(IxDyn(&[2])),
            )],
        };
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));
    }
}
