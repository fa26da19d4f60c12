//! Binary model checkpoints.
//!
//! Layout (little-endian integers, `f64` little-endian):
//!
//! | field           | size              | value                          |
//! |-----------------|-------------------|--------------------------------|
//! | magic           | 4 bytes           | `CATM`                         |
//! | version         | u8                | 1                              |
//! | arch descriptor | u32 len + UTF-8   | architecture token             |
//! | tensor count    | u32               | weight/bias tensors            |
//! | per tensor      |                   | name (u32 len + UTF-8),        |
//! |                 |                   | ndim u8, dims u32 each,        |
//! |                 |                   | data f64 LE                    |
//! | site count      | u8                | quantization sites             |
//! | per site        | f64 + u8          | clip alpha, bit width          |
//! | config echo     | u32 len + UTF-8   | `key=value` lines              |
//!
//! A loaded model reproduces forward outputs bit-exactly: weights and clips
//! round-trip as raw `f64` bits.

use crate::model::{Arch, Model, TrainError, NUM_SITES};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"CATM";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic {0:?}, expected \"CATM\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u8),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint field {field} has invalid value: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("checkpoint tensor `{0}` does not match the architecture")]
    UnknownTensor(String),
    #[error("architecture error: {0}")]
    Arch(#[from] TrainError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub fn save(model: &Model, config_echo: &str, path: &Path) -> Result<(), CheckpointError> {
    let bytes = to_bytes(model, config_echo);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, String), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

pub fn to_bytes(model: &Model, config_echo: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    write_string(&mut out, &model.arch.token);

    let tensors: Vec<_> = model
        .params
        .iter()
        .filter(|p| !p.name.ends_with(".alpha"))
        .collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for p in tensors {
        write_string(&mut out, &p.name);
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    out.push(NUM_SITES as u8);
    for site in 0..NUM_SITES {
        out.extend_from_slice(&model.alpha(site).to_le_bytes());
        out.push(model.bits);
    }
    write_string(&mut out, config_echo);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, String), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r
        .take(4, "magic")?
        .try_into()
        .expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let token = r.read_string("arch descriptor")?;
    let arch = Arch::from_token(&token)?;

    let tensor_count = r.read_u32("tensor count")? as usize;
    let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let name = r.read_string("tensor name")?;
        let ndim = r.take(1, "tensor rank")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32("tensor dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8, "tensor data")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape.clone(), data).map_err(|e| CheckpointError::Invalid {
            field: "tensor data",
            reason: e.to_string(),
        })?;
        loaded.push((name, tensor));
    }

    let site_count = r.take(1, "site count")?[0] as usize;
    if site_count != NUM_SITES {
        return Err(CheckpointError::Invalid {
            field: "site count",
            reason: format!("expected {NUM_SITES}, got {site_count}"),
        });
    }
    let mut alphas = Vec::with_capacity(site_count);
    let mut bits = None;
    for _ in 0..site_count {
        let raw = r.take(8, "site alpha")?;
        alphas.push(f64::from_le_bytes(raw.try_into().unwrap()));
        let b = r.take(1, "site bits")?[0];
        if !(1..=8).contains(&b) {
            return Err(CheckpointError::Invalid {
                field: "site bits",
                reason: format!("bit width {b} outside [1, 8]"),
            });
        }
        if *bits.get_or_insert(b) != b {
            return Err(CheckpointError::Invalid {
                field: "site bits",
                reason: "sites disagree on bit width".to_string(),
            });
        }
    }
    let config_echo = r.read_string("config echo")?;

    let mut model = Model::new(arch, bits.expect("site count checked > 0"), 0);
    let expected: Vec<String> = model
        .params
        .iter()
        .filter(|p| !p.name.ends_with(".alpha"))
        .map(|p| p.name.clone())
        .collect();
    if loaded.len() != expected.len() {
        return Err(CheckpointError::Invalid {
            field: "tensor count",
            reason: format!("expected {}, got {}", expected.len(), loaded.len()),
        });
    }
    for (name, tensor) in loaded {
        let param = model
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| CheckpointError::UnknownTensor(name.clone()))?;
        if param.value.shape() != tensor.shape() {
            return Err(CheckpointError::Invalid {
                field: "tensor data",
                reason: format!(
                    "{name}: shape {:?} does not match architecture {:?}",
                    tensor.shape(),
                    param.value.shape()
                ),
            });
        }
        param.value = tensor;
    }
    for (site, alpha) in alphas.into_iter().enumerate() {
        model.set_alpha(site, alpha);
    }
    Ok((model, config_echo))
}

fn write_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn read_u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn read_string(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let len = self.read_u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CheckpointError::Invalid {
            field: what,
            reason: "not valid UTF-8".to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::model::{QuantMode, ARCH_TOY_CNN_V1};
    use crate::tape::Tape;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_model(seed: u64) -> Model {
        let mut m = Model::new(Arch::from_token(ARCH_TOY_CNN_V1).unwrap(), 4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
        for site in 0..NUM_SITES {
            m.set_alpha(site, rng.random_range(0.01..3.0));
        }
        m
    }

    #[test]
    fn roundtrip_reproduces_forward_bit_exactly() {
        let m = random_model(21);
        let bytes = to_bytes(&m, "seed=21\n");
        let (loaded, echo) = from_bytes(&bytes).unwrap();
        assert_eq!(echo, "seed=21\n");

        let data = Dataset::synthetic(8, 21);
        let batch = data.batch(&(0..8).collect::<Vec<_>>());
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = m.forward(&mut t1, &batch, QuantMode::Quantized).unwrap();
        let b = loaded.forward(&mut t2, &batch, QuantMode::Quantized).unwrap();
        assert_eq!(t1.value(a.logits), t2.value(b.logits));
    }

    #[test]
    fn corrupted_magic_rejected() {
        let m = random_model(3);
        let mut bytes = to_bytes(&m, "");
        bytes[0] = b'Z';
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::BadMagic(_))
        ));
    }

    #[test]
    fn version_mismatch_rejected() {
        let m = random_model(3);
        let mut bytes = to_bytes(&m, "");
        bytes[4] = 9;
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn truncation_rejected() {
        let m = random_model(3);
        let bytes = to_bytes(&m, "config");
        for cut in [3, 5, 12, bytes.len() / 2, bytes.len() - 3] {
            assert!(
                matches!(from_bytes(&bytes[..cut]), Err(CheckpointError::Truncated(_))),
                "cut at {cut} not detected"
            );
        }
    }

    #[test]
    fn fuzzed_roundtrips() {
        for seed in 0..100 {
            let m = random_model(seed);
            let echo = format!("seed={seed}\n");
            let bytes = to_bytes(&m, &echo);
            let (loaded, echo_back) = from_bytes(&bytes).unwrap();
            assert_eq!(echo, echo_back);
            for (a, b) in m.params.iter().zip(&loaded.params) {
                assert_eq!(a.name, b.name);
                assert_eq!(a.value, b.value, "{} differs", a.name);
            }
            assert_eq!(to_bytes(&loaded, &echo_back), bytes);
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.catm");
        let m = random_model(9);
        save(&m, "k=v\n", &path).unwrap();
        let (loaded, echo) = load(&path).unwrap();
        assert_eq!(echo, "k=v\n");
        assert_eq!(loaded.params[0].value, m.params[0].value);
    }
}
