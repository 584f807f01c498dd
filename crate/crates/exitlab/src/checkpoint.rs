//! Binary checkpoints: training step, model config, every parameter
//! tensor, and the prototype bank, written so that a save/load round trip
//! reproduces the exact bits.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "EXITCKPT"
//! version    u32      currently 1
//! step       u64
//! cfg_len    u64      length of the config JSON
//! cfg_json   cfg_len bytes
//! tensors    f64 values, tensors in declared parameter order
//! gamma      f64      bank momentum
//! init       (layers-1)*classes bytes, 0 or 1
//! vecs       (layers-1)*classes*proto_dim f64 values
//! ```
//!
//! Every shape is derived from the config, so no per-tensor headers are
//! needed; a file with bytes left over after the bank is rejected.

use crate::model::{Model, ModelConfig, ModelError, ParameterSet};
use crate::prototypes::{ProtoError, PrototypeBank};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"EXITCKPT";
const VERSION: u32 = 1;
const MAX_CONFIG_BYTES: u64 = 1 << 20;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
}

/// A resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub model: Model,
    pub bank: PrototypeBank,
}

fn write_f64s(w: &mut impl Write, vals: &[f64]) -> io::Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let model = &ckpt.model;
    if !model.accepts_bank(&ckpt.bank) {
        return Err(CheckpointError::Corrupt("bank does not fit the model".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&ckpt.step.to_le_bytes())?;
    let cfg = serde_json::to_vec(&model.config)
        .map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(&cfg)?;
    for (tensor, _) in model.params.tensors() {
        write_f64s(&mut w, tensor)?;
    }
    w.write_all(&ckpt.bank.gamma().to_le_bytes())?;
    let (vecs, init) = ckpt.bank.raw_parts();
    for &flag in init {
        w.write_all(&[u8::from(flag)])?;
    }
    write_f64s(&mut w, vecs)?;
    w.flush()?;
    Ok(())
}

fn fill(r: &mut impl Read, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CheckpointError::Corrupt("file ends early".into()),
        _ => CheckpointError::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    fill(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    fill(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, CheckpointError> {
    let mut buf = vec![0u8; n * 8];
    fill(r, &mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    fill(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let step = read_u64(&mut r)?;
    let cfg_len = read_u64(&mut r)?;
    if cfg_len > MAX_CONFIG_BYTES {
        return Err(CheckpointError::Corrupt("config block too large".into()));
    }
    let mut cfg_buf = vec![0u8; cfg_len as usize];
    fill(&mut r, &mut cfg_buf)?;
    let config: ModelConfig = serde_json::from_slice(&cfg_buf)
        .map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
    config.validate()?;

    let mut params = ParameterSet::zeros(&config);
    for (tensor, _) in params.tensors_mut() {
        let vals = read_f64s(&mut r, tensor.len())?;
        tensor.copy_from_slice(&vals);
    }
    let model = Model::from_parts(config.clone(), params)?;

    let mut gamma_b = [0u8; 8];
    fill(&mut r, &mut gamma_b)?;
    let gamma = f64::from_le_bytes(gamma_b);
    let slots = (config.layers - 1) * config.classes;
    let mut flag_buf = vec![0u8; slots];
    fill(&mut r, &mut flag_buf)?;
    let init: Vec<bool> = flag_buf
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(CheckpointError::Corrupt(format!("init flag byte {b}"))),
        })
        .collect::<Result<_, _>>()?;
    let vecs = read_f64s(&mut r, slots * config.proto_dim())?;
    let bank =
        PrototypeBank::from_raw(config.layers - 1, config.classes, config.proto_dim(), gamma, vecs, init)?;

    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(Checkpoint { step, model, bank }),
        _ => Err(CheckpointError::Corrupt("trailing bytes".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelConfig, ProtoSpace};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::fs;

    fn sample_checkpoint(proto_space: ProtoSpace) -> Checkpoint {
        let config = ModelConfig {
            layers: 3,
            classes: 3,
            d_in: 4,
            d_hidden: 5,
            d_proto: 2,
            activation: Activation::Tanh,
            proto_space,
            seed: 7,
        };
        let mut model = Model::new(config.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (tensor, _) in model.params.tensors_mut() {
            for v in tensor.iter_mut() {
                *v = rng.gen_range(-2.0..2.0);
            }
        }
        let mut bank = config.new_bank(0.5).unwrap();
        let dim = config.proto_dim();
        let reps: Vec<Vec<f64>> =
            (0..4).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        // class 2 never appears, leaving one init flag false
        bank.update(1, &reps, &[0, 1, 0, 1]).unwrap();
        bank.update(1, &reps, &[1, 1, 0, 0]).unwrap();
        bank.update(2, &reps[..2].to_vec(), &[2, 0]).unwrap();
        Checkpoint { step: 1234, model, bank }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for space in [ProtoSpace::Projected, ProtoSpace::Hidden] {
            let path = dir.path().join("model.ckpt");
            let ckpt = sample_checkpoint(space);
            save_checkpoint(&path, &ckpt).unwrap();
            let loaded = load_checkpoint(&path).unwrap();
            assert_eq!(ckpt, loaded);
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        fs::write(&path, b"NOTACKPTxxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample_checkpoint(ProtoSpace::Projected)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Version(2))));
    }

    #[test]
    fn rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample_checkpoint(ProtoSpace::Projected)).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn rejects_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample_checkpoint(ProtoSpace::Projected)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.push(0);
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(&err, CheckpointError::Corrupt(msg) if msg.contains("trailing")));
    }

    #[test]
    fn rejects_corrupt_init_flag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint(ProtoSpace::Projected);
        save_checkpoint(&path, &ckpt).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let tail = (ckpt.bank.layers() * ckpt.bank.classes()) * (1 + 8 * ckpt.bank.dim());
        let flag_pos = bytes.len() - tail;
        bytes[flag_pos] = 7;
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(&err, CheckpointError::Corrupt(msg) if msg.contains("init flag")));
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_checkpoint(&dir.path().join("nope.ckpt")).unwrap_err();
        assert!(matches!(err, CheckpointError::Io(_)));
    }
}
