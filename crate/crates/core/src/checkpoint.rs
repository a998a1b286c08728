//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "L2SM"
//! version u32      currently 1
//! count   u64      number of parameter records
//! record  repeated:
//!     name_len u16, name UTF-8 bytes,
//!     rank u8, extents rank x u64,
//!     values product(extents) x f64
//! trailer:
//!     iteration u64, rng_state u64, alpha_mode u8
//! ```
//!
//! Momentum buffers ride along as records named `momentum.<param>` so a
//! resumed run is bit-exact; alpha itself is an ordinary record
//! (`head.alpha`), the trailer byte only records its mode (0 none, 1 fixed,
//! 2 trainable).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;
use crate::trainer::{ResumeState, SgdState};

pub const MAGIC: [u8; 4] = *b"L2SM";
pub const VERSION: u32 = 1;

const MOMENTUM_PREFIX: &str = "momentum.";

/// Decoded checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    /// Parameter records in file order, momentum records included.
    pub params: Vec<(String, Tensor)>,
    pub iteration: u64,
    pub rng_state: u64,
    pub alpha_mode: u8,
}

fn push_record(out: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(tensor.rank() as u8);
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize the network parameters plus optimizer state.
pub fn save(
    path: impl AsRef<Path>,
    net: &Network,
    sgd: &SgdState,
    iteration: u64,
    rng_state: u64,
) -> Result<()> {
    let path = path.as_ref();
    let params = net.parameters();
    let count = params.len() + sgd.velocity.len();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for p in &params {
        push_record(&mut out, &p.name, &p.value);
    }
    for (name, v) in &sgd.velocity {
        push_record(&mut out, &format!("{MOMENTUM_PREFIX}{name}"), v);
    }
    out.extend_from_slice(&iteration.to_le_bytes());
    out.extend_from_slice(&rng_state.to_le_bytes());
    out.push(net.config().alpha_mode_byte());
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let slice = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::CheckpointFormat {
                detail: format!("truncated while reading {what} at offset {}", self.pos),
            })?;
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Decode a checkpoint file.
pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::CheckpointFormat {
            detail: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointFormat {
            detail: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let count = r.u64("record count")? as usize;
    let mut params = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::CheckpointFormat {
                detail: format!("record {i}: name is not UTF-8"),
            })?
            .to_string();
        let rank = r.u8("rank")? as usize;
        if rank == 0 {
            return Err(Error::CheckpointFormat {
                detail: format!("record {name}: rank must be >= 1"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let total: usize = shape.iter().product();
        let raw = r.take(total * 8, "values")?;
        let mut data = Vec::with_capacity(total);
        for chunk in raw.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        params.push((name, Tensor::new(&shape, data)?));
    }
    let iteration = r.u64("iteration")?;
    let rng_state = r.u64("rng state")?;
    let alpha_mode = r.u8("alpha mode")?;
    if r.pos != bytes.len() {
        return Err(Error::CheckpointFormat {
            detail: format!("{} trailing bytes after trailer", bytes.len() - r.pos),
        });
    }
    Ok(Checkpoint {
        version,
        params,
        iteration,
        rng_state,
        alpha_mode,
    })
}

/// Install checkpoint values into a freshly built network and return the
/// trainer resume state. Every network parameter must be present with a
/// matching shape; momentum records are optional per parameter.
pub fn apply(checkpoint: &Checkpoint, net: &mut Network) -> Result<ResumeState> {
    let mut by_name: BTreeMap<&str, &Tensor> = BTreeMap::new();
    for (name, tensor) in &checkpoint.params {
        if by_name.insert(name.as_str(), tensor).is_some() {
            return Err(Error::CheckpointFormat {
                detail: format!("duplicate record {name}"),
            });
        }
    }
    if checkpoint.alpha_mode != net.config().alpha_mode_byte() {
        return Err(Error::CheckpointFormat {
            detail: format!(
                "alpha mode {} in checkpoint does not match configured mode {}",
                checkpoint.alpha_mode,
                net.config().alpha_mode_byte()
            ),
        });
    }
    let mut velocity = BTreeMap::new();
    for p in net.parameters_mut() {
        let stored = by_name
            .get(p.name.as_str())
            .ok_or_else(|| Error::CheckpointFormat {
                detail: format!("missing parameter {}", p.name),
            })?;
        if stored.shape() != p.value.shape() {
            return Err(Error::CheckpointFormat {
                detail: format!(
                    "parameter {} has shape {:?} in checkpoint, network wants {:?}",
                    p.name,
                    stored.shape(),
                    p.value.shape()
                ),
            });
        }
        p.value = (*stored).clone();
        p.zero_grad();
        let momentum_name = format!("{MOMENTUM_PREFIX}{}", p.name);
        if let Some(v) = by_name.get(momentum_name.as_str()) {
            if v.shape() != p.value.shape() {
                return Err(Error::CheckpointFormat {
                    detail: format!("momentum record {momentum_name} has mismatched shape"),
                });
            }
            velocity.insert(p.name.clone(), (*v).clone());
        }
    }
    Ok(ResumeState {
        iteration: checkpoint.iteration,
        sgd: SgdState { velocity },
        rng_state: checkpoint.rng_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{AlphaMode, HeadSpec, LayerSpec, NetworkConfig};
    use crate::rng::Rng;
    use tempfile::tempdir;

    fn config() -> NetworkConfig {
        NetworkConfig {
            input_shape: [1, 1, 4],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 3 },
                LayerSpec::PRelu,
                LayerSpec::Dense { out: 2 },
            ],
            feature_dim: 2,
            num_classes: 3,
            classifier_bias: true,
            head: HeadSpec::L2Softmax(AlphaMode::Fixed(8.0)),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.l2sm");
        let mut net = Network::build(&config(), &mut Rng::new(3)).unwrap();
        let mut sgd = SgdState::default();
        sgd.velocity.insert(
            "l1.weight".into(),
            Tensor::new(&[4, 3], (0..12).map(|i| i as f64 * 0.25).collect()).unwrap(),
        );
        save(&path, &net, &sgd, 42, 0xDEAD_BEEF, ).unwrap();

        let ckpt = load(&path).unwrap();
        assert_eq!(ckpt.version, VERSION);
        assert_eq!(ckpt.iteration, 42);
        assert_eq!(ckpt.rng_state, 0xDEAD_BEEF);
        assert_eq!(ckpt.alpha_mode, 1);

        let before: Vec<Vec<u64>> = net
            .parameters()
            .iter()
            .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        // Perturb, then restore.
        for p in net.parameters_mut() {
            p.value.scale_in_place(3.0);
        }
        let resume = apply(&ckpt, &mut net).unwrap();
        let after: Vec<Vec<u64>> = net
            .parameters()
            .iter()
            .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
        assert_eq!(resume.iteration, 42);
        assert_eq!(
            resume.sgd.velocity.get("l1.weight").unwrap().data()[3],
            0.75
        );

        // A second save of the restored state is byte-identical.
        let path2 = dir.path().join("model2.l2sm");
        save(&path2, &net, &resume.sgd, 42, 0xDEAD_BEEF).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn magic_and_version_guarded() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad");
        fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(load(&path), Err(Error::CheckpointFormat { .. })));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&99u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        match load(&path) {
            Err(Error::CheckpointFormat { detail }) => assert!(detail.contains("version")),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.l2sm");
        let net = Network::build(&config(), &mut Rng::new(3)).unwrap();
        save(&path, &net, &SgdState::default(), 7, 1).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load(&path), Err(Error::CheckpointFormat { .. })));
    }

    #[test]
    fn alpha_mode_mismatch_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.l2sm");
        let net = Network::build(&config(), &mut Rng::new(3)).unwrap();
        save(&path, &net, &SgdState::default(), 7, 1).unwrap();
        let ckpt = load(&path).unwrap();

        let mut plain_cfg = config();
        plain_cfg.head = HeadSpec::Softmax;
        let mut plain_net = Network::build(&plain_cfg, &mut Rng::new(3)).unwrap();
        assert!(matches!(
            apply(&ckpt, &mut plain_net),
            Err(Error::CheckpointFormat { .. })
        ));
    }
}
