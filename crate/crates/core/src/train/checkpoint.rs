//! `.smfw` weight files: a named tensor table, an optional optimizer table
//! and a trailing CRC32. All integers and floats are little-endian.

use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, CONFIG_TENSOR};
use crate::tensor::{Adam, AdamConfig, Tensor};

pub const MAGIC: &[u8; 4] = b"SMFW";
pub const VERSION: u8 = 1;
/// `[lambda, lambda_index, phase, epoch]`.
pub const TRAIN_TENSOR: &str = "meta.train";
const STEP_TENSOR: &str = "adam.step";

/// Where a run stopped: phase 1..=3 and the epochs completed in it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainCursor {
    pub phase: u8,
    pub epoch: u32,
}

/// A model plus the training state needed to report or continue it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Option<Adam<f32>>,
    pub lambda: f64,
    pub lambda_index: u8,
    pub cursor: TrainCursor,
}

impl Checkpoint {
    /// Wraps an untrained (or externally trained) model.
    pub fn from_model(model: Model<f32>) -> Self {
        Self {
            model,
            optimizer: None,
            lambda: 0.0,
            lambda_index: 0,
            cursor: TrainCursor::default(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.push(VERSION);
        b.extend_from_slice(&m.hash());
        let train = [
            self.lambda as f32,
            self.lambda_index as f32,
            self.cursor.phase as f32,
            self.cursor.epoch as f32,
        ];
        let mut table: Vec<(&str, Tensor)> = vec![
            (CONFIG_TENSOR, m.config.to_tensor()),
            (TRAIN_TENSOR, Tensor::new(&[4], train.to_vec()).expect("1-d")),
        ];
        for (_, p) in m.store.iter() {
            table.push((&p.name, p.value.clone()));
        }
        write_table(&mut b, &table);
        let mut opt: Vec<(String, Tensor)> = Vec::new();
        if let Some(adam) = &self.optimizer {
            // steps past 2^24 would lose precision as f32; checked on load
            opt.push((STEP_TENSOR.into(), Tensor::scalar(adam.steps_taken() as f32)));
            for (name, mm, vv) in adam.moments() {
                opt.push((format!("adam.m.{name}"), mm.clone()));
                opt.push((format!("adam.v.{name}"), vv.clone()));
            }
        }
        let opt_refs: Vec<(&str, Tensor)> = opt.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
        write_table(&mut b, &opt_refs);
        let crc = crc32fast::hash(&b[4..]);
        b.write_u32::<LittleEndian>(crc).expect("vec write");
        b
    }

    /// Parses and verifies a weight file: magic, checksum (or truncation),
    /// version, architecture match, then the stored model hash.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Corruption("missing SMFW magic".into()));
        }
        let min = 4 + 1 + 16 + 4 + 4 + 4;
        if bytes.len() < min {
            return Err(Error::Truncation(format!("weight file of {} bytes", bytes.len())));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(&body[4..]) != stored {
            // a structurally short file is reported as truncated
            let mut r = &bytes[4 + 1 + 16..];
            let complete = read_table(&mut r).and_then(|_| read_table(&mut r)).is_ok();
            return Err(if complete {
                Error::Corruption("weight file checksum mismatch".into())
            } else {
                Error::Truncation("weight file ends inside its tensor tables".into())
            });
        }
        if body[4] != VERSION {
            return Err(Error::Versioning(format!(
                "weight file version {}, this build reads {VERSION}",
                body[4]
            )));
        }
        let stored_hash: [u8; 16] = body[5..21].try_into().expect("16 bytes");
        let mut r = &body[21..];
        let params = read_table(&mut r).map_err(|_| Error::Corruption("bad tensor table".into()))?;
        let opt = read_table(&mut r).map_err(|_| Error::Corruption("bad optimizer table".into()))?;
        if !r.is_empty() {
            return Err(Error::Corruption(format!(
                "{} stray bytes before the checksum",
                r.len()
            )));
        }

        let mut it = params.into_iter();
        let config = match it.next() {
            Some((n, t)) if n == CONFIG_TENSOR => ModelConfig::from_values(t.data())?,
            _ => return Err(Error::Corruption(format!("first tensor must be {CONFIG_TENSOR}"))),
        };
        let train = match it.next() {
            Some((n, t)) if n == TRAIN_TENSOR && t.len() == 4 => t.into_data(),
            _ => return Err(Error::Corruption(format!("second tensor must be {TRAIN_TENSOR}"))),
        };
        let mut model = Model::<f32>::new(config, 0)?;
        let rest: Vec<(String, Tensor)> = it.collect();
        assign_params(&mut model, rest)?;
        if model.hash() != stored_hash {
            return Err(Error::Corruption("stored model hash does not match the weights".into()));
        }
        let optimizer = if opt.is_empty() {
            None
        } else {
            Some(rebuild_adam(&model, opt)?)
        };
        Ok(Self {
            model,
            optimizer,
            lambda: train[0] as f64,
            lambda_index: train[1] as u8,
            cursor: TrainCursor {
                phase: train[2] as u8,
                epoch: train[3] as u32,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads a file that must match an expected architecture.
    pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let c = Self::load(path)?;
        if c.config() != expected {
            return Err(Error::Versioning(format!(
                "{} was trained with a different model configuration",
                path.display()
            )));
        }
        Ok(c)
    }
}

fn assign_params(model: &mut Model<f32>, tensors: Vec<(String, Tensor)>) -> Result<()> {
    if tensors.len() != model.store.len() {
        return Err(Error::Versioning(format!(
            "file holds {} parameters, the configured model has {}",
            tensors.len(),
            model.store.len()
        )));
    }
    for (name, t) in tensors {
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| Error::Versioning(format!("unexpected parameter {name:?}")))?;
        let p = model.store.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(Error::Versioning(format!(
                "parameter {name:?} has shape {:?}, expected {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    Ok(())
}

fn rebuild_adam(model: &Model<f32>, opt: Vec<(String, Tensor)>) -> Result<Adam<f32>> {
    let mut it = opt.into_iter();
    let step = match it.next() {
        Some((n, t)) if n == STEP_TENSOR && t.len() == 1 => t.data()[0],
        _ => {
            return Err(Error::Corruption(format!(
                "optimizer table must start with {STEP_TENSOR}"
            )))
        }
    };
    if !(step >= 0.0 && step.fract() == 0.0 && step < 16_777_216.0) {
        return Err(Error::Corruption(format!(
            "optimizer step {step} is not an exact count"
        )));
    }
    let rest: Vec<(String, Tensor)> = it.collect();
    if rest.len() != 2 * model.store.len() {
        return Err(Error::Versioning("optimizer state does not cover the model".into()));
    }
    let mut names = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for ((_, p), pair) in model.store.iter().zip(rest.chunks(2)) {
        let (mn, mt) = &pair[0];
        let (vn, vt) = &pair[1];
        if *mn != format!("adam.m.{}", p.name)
            || *vn != format!("adam.v.{}", p.name)
            || mt.shape() != p.value.shape()
            || vt.shape() != p.value.shape()
        {
            return Err(Error::Versioning(format!("optimizer state mismatch at {:?}", p.name)));
        }
        names.push(p.name.clone());
        m.push(mt.clone());
        v.push(vt.clone());
    }
    Ok(Adam::from_parts(AdamConfig::default(), step as u64, names, m, v))
}

fn write_table(b: &mut Vec<u8>, table: &[(&str, Tensor)]) {
    b.write_u32::<LittleEndian>(table.len() as u32).expect("vec write");
    for (name, t) in table {
        b.write_u16::<LittleEndian>(name.len() as u16).expect("vec write");
        b.extend_from_slice(name.as_bytes());
        b.push(t.rank() as u8);
        for &d in t.shape() {
            b.write_u32::<LittleEndian>(d as u32).expect("vec write");
        }
        for &v in t.data() {
            b.write_f32::<LittleEndian>(v).expect("vec write");
        }
    }
}

fn read_table(r: &mut &[u8]) -> Result<Vec<(String, Tensor)>> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::new();
    for _ in 0..n {
        let len = r.read_u16::<LittleEndian>()? as usize;
        if r.len() < len {
            return Err(Error::Truncation("tensor name".into()));
        }
        let name = std::str::from_utf8(&r[..len])
            .map_err(|_| Error::Corruption("tensor name is not UTF-8".into()))?
            .to_string();
        *r = &r[len..];
        let rank = r.read_u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&c| c <= r.len() / 4)
            .ok_or_else(|| Error::Truncation(format!("tensor {name:?} data")))?;
        let mut data = vec![0f32; count];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        out.push((name, Tensor::new(&dims, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smfc::StereoPair;

    fn sample() -> Checkpoint {
        let model = Model::<f32>::new(ModelConfig::desk(), 7).unwrap();
        let mut adam = Adam::new(&model.store, AdamConfig::default());
        let mut store = model.store.clone();
        for p in store.iter_mut() {
            p.grad
                .data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, g)| *g = (i as f32).sin());
        }
        adam.step(&mut store, 1e-3).unwrap();
        Checkpoint {
            model,
            optimizer: Some(adam),
            lambda: 4.0,
            lambda_index: 2,
            cursor: TrainCursor { phase: 3, epoch: 8 },
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes();
        let d = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(d.model.hash(), c.model.hash());
        assert_eq!(d.to_bytes(), bytes);
        assert_eq!(d.cursor, c.cursor);
        assert_eq!((d.lambda, d.lambda_index), (4.0, 2));
        let (a, b) = (c.optimizer.unwrap(), d.optimizer.unwrap());
        assert_eq!(a.steps_taken(), b.steps_taken());
        for (x, y) in a.moments().zip(b.moments()) {
            assert_eq!(x.0, y.0);
            assert_eq!(x.1, y.1);
            assert_eq!(x.2, y.2);
        }
        let img = |k: f32| Tensor::from_fn(&[1, 3, 64, 256], |i| ((i as f32 * k).sin() + 1.0) / 2.0);
        let pair = StereoPair::new(img(0.1), img(0.17)).unwrap();
        let p0 = c
            .model
            .predict(&c.model.decode_latents(&c.model.encode_pair(&pair).unwrap().0).unwrap());
        let p1 = d
            .model
            .predict(&d.model.decode_latents(&d.model.encode_pair(&pair).unwrap().0).unwrap());
        assert_eq!(p0.unwrap(), p1.unwrap());
    }

    #[test]
    fn damage_is_reported() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Corruption(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 100]),
            Err(Error::Truncation(_))
        ));
        let mut ver = bytes.clone();
        ver[4] = 9;
        let n = ver.len();
        let crc = crc32fast::hash(&ver[4..n - 4]);
        ver[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&ver), Err(Error::Versioning(_))));
        assert!(matches!(Checkpoint::from_bytes(b"NOPE...."), Err(Error::Corruption(_))));
    }

    #[test]
    fn tampered_weights_fail_the_hash() {
        let c = sample();
        let mut bytes = c.to_bytes();
        // flip a stored hash bit and re-seal the checksum
        bytes[5] ^= 1;
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[4..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Corruption(ref m)) if m.contains("hash")));
    }

    #[test]
    fn mismatched_architecture_refuses_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.smfw");
        sample().save(&path).unwrap();
        assert!(Checkpoint::load_for(&path, &ModelConfig::desk()).is_ok());
        let mut other = ModelConfig::desk();
        other.smfc.channels = [8, 16, 32];
        assert!(matches!(Checkpoint::load_for(&path, &other), Err(Error::Versioning(_))));
    }
}
