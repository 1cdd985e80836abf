//! `AQCK` checkpoint files.
//!
//! ```text
//! magic "AQCK", version u32,
//! levels, base_channels, in_channels, out_channels, px, py, pz  (u32 each)
//! final activation u8, parameter count u64, parameters f32 × count,
//! SHA-256 of all preceding bytes (32 bytes)
//! ```

use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{count_params, FinalActivation, UNet, UNetConfig, UnetError};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"AQCK";
const ECHO_FIELDS: [&str; 7] = ["levels", "base_channels", "in_channels", "out_channels", "patch_x", "patch_y", "patch_z"];

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {found:?} at byte offset 0")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    BadVersion { found: u32 },
    #[error("checkpoint truncated: {len} bytes, need {needed}")]
    Truncated { len: usize, needed: usize },
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("unknown final activation code {0}")]
    BadActivation(u8),
    #[error("checkpoint {field} is {found}, configuration expects {expected}")]
    ConfigMismatch { field: &'static str, expected: u64, found: u64 },
    #[error(transparent)]
    Network(#[from] UnetError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn echo(cfg: &UNetConfig) -> [u32; 7] {
    let [px, py, pz] = cfg.patch_dims;
    [cfg.levels, cfg.base_channels, cfg.in_channels, cfg.out_channels, px, py, pz].map(|v| v as u32)
}

pub fn save_checkpoint(model: &UNet<f32>, path: &Path) -> Result<(), CheckpointError> {
    let cfg = model.config();
    let mut buf = Vec::with_capacity(64 + 4 * model.num_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in echo(cfg) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(cfg.final_activation.code());
    buf.extend_from_slice(&(model.num_params() as u64).to_le_bytes());
    for p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf)?;
    Ok(())
}

/// Load a checkpoint; the network shape comes from the file. The init seed
/// and zero-init flag are not stored and take their defaults.
pub fn load_checkpoint(path: &Path) -> Result<UNet<f32>, CheckpointError> {
    let bytes = std::fs::read(path)?;
    let header = 4 + 4 + 7 * 4 + 1 + 8;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic { found: bytes[..bytes.len().min(4)].to_vec() });
    }
    if bytes.len() < header + 32 {
        return Err(CheckpointError::Truncated { len: bytes.len(), needed: header + 32 });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion { found: version });
    }
    let e: Vec<usize> = (0..7).map(|i| u32_at(8 + 4 * i) as usize).collect();
    let act = bytes[36];
    let count = u64::from_le_bytes(bytes[37..45].try_into().expect("8 bytes")) as usize;
    let needed = header + 4 * count + 32;
    if bytes.len() != needed {
        return Err(CheckpointError::Truncated { len: bytes.len(), needed });
    }
    let body = &bytes[..needed - 32];
    if Sha256::digest(body).as_slice() != &bytes[needed - 32..] {
        return Err(CheckpointError::Checksum);
    }
    let final_activation = FinalActivation::from_code(act).ok_or(CheckpointError::BadActivation(act))?;
    let cfg = UNetConfig {
        levels: e[0],
        base_channels: e[1],
        in_channels: e[2],
        out_channels: e[3],
        patch_dims: [e[4], e[5], e[6]],
        final_activation,
        ..Default::default()
    };
    let expected = count_params(&cfg)?;
    if expected != count {
        return Err(CheckpointError::ConfigMismatch { field: "parameter count", expected: expected as u64, found: count as u64 });
    }
    let params = body[header..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(UNet::with_params(&cfg, params)?)
}

/// Load a checkpoint and require it to match `cfg`, naming the first field
/// that differs.
pub fn load_checkpoint_expecting(path: &Path, cfg: &UNetConfig) -> Result<UNet<f32>, CheckpointError> {
    let mut model = load_checkpoint(path)?;
    for ((field, want), got) in ECHO_FIELDS.iter().zip(echo(cfg)).zip(echo(model.config())) {
        if want != got {
            return Err(CheckpointError::ConfigMismatch { field, expected: want as u64, found: got as u64 });
        }
    }
    if model.config().final_activation != cfg.final_activation {
        return Err(CheckpointError::ConfigMismatch {
            field: "final_activation",
            expected: cfg.final_activation.code() as u64,
            found: model.config().final_activation.code() as u64,
        });
    }
    model.cfg = cfg.clone();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> UNetConfig {
        UNetConfig {
            levels: 2,
            base_channels: 2,
            in_channels: 3,
            patch_dims: [4, 4, 2],
            zero_init_final: false,
            final_activation: FinalActivation::Tanh,
            ..Default::default()
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = UNet::<f32>::build(&cfg()).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint_expecting(&path, &cfg()).unwrap();
        assert!(model.params().iter().zip(back.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let x: Vec<f32> = (0..cfg().input_len()).map(|i| (i % 7) as f32 / 7.0).collect();
        assert_eq!(model.forward(&x, 1).unwrap(), back.forward(&x, 1).unwrap());
    }

    #[test]
    fn corruption_and_mismatch_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&UNet::<f32>::build(&cfg()).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut flipped = bytes.clone();
        flipped[60] ^= 1;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Checksum)));

        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Truncated { .. })));

        let mut v2 = bytes.clone();
        v2[4] = 2;
        std::fs::write(&path, &v2).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadVersion { found: 2 })));

        std::fs::write(&path, &bytes).unwrap();
        let other = UNetConfig { patch_dims: [4, 8, 2], ..cfg() };
        match load_checkpoint_expecting(&path, &other).unwrap_err() {
            CheckpointError::ConfigMismatch { field, expected, found } => {
                assert_eq!((field, expected, found), ("patch_y", 8, 4));
            }
            e => panic!("unexpected {e}"),
        }
    }
}
