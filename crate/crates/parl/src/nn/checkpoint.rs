//! Checkpoint container: magic `PARL`, format version, a 32-byte digest of
//! the spec the tensors belong to, then each tensor as
//! `(rank: u32, dims: u32..., little-endian f64 data)` until end of file.
//!
//! The same container carries model parameters, exported adversarial
//! batches, and synthetic datasets; only the digest's meaning differs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

use super::{LayerParams, LayerSpec, ModelParams, ModelSpec};

pub const MAGIC: [u8; 4] = *b"PARL";
pub const FORMAT_VERSION: u32 = 1;

/// SHA-256 over the canonical JSON encoding of a model spec.
pub fn spec_digest(spec: &ModelSpec) -> [u8; 32] {
    let json = serde_json::to_string(spec).expect("model spec serializes");
    digest_bytes(json.as_bytes())
}

pub fn digest_bytes(bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}

/// Write tensors into the container format.
pub fn save_tensors(path: &Path, digest: &[u8; 32], tensors: &[&Tensor]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(digest)?;
    for t in tensors {
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v as f64).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    reader: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.reader
            .read_exact(buf)
            .map_err(|_| Error::parse(at, format!("truncated while reading {what}")))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.exact(&mut buf, what)?;
        Ok(u32::from_le_bytes(buf))
    }

    /// Ok(None) on clean EOF, Ok(Some) otherwise.
    fn u32_or_eof(&mut self, what: &str) -> Result<Option<u32>> {
        let mut buf = [0u8; 4];
        let mut filled = 0;
        while filled < 4 {
            let n = self.reader.read(&mut buf[filled..])?;
            if n == 0 {
                if filled == 0 {
                    return Ok(None);
                }
                return Err(Error::parse(self.offset, format!("truncated while reading {what}")));
            }
            filled += n;
            self.offset += n as u64;
        }
        Ok(Some(u32::from_le_bytes(buf)))
    }
}

/// Read the whole container back: (digest, tensors).
pub fn load_tensors(path: &Path) -> Result<([u8; 32], Vec<Tensor>)> {
    let mut cur = Cursor { reader: BufReader::new(File::open(path)?), offset: 0 };
    let mut magic = [0u8; 4];
    cur.exact(&mut magic, "magic bytes")?;
    if magic != MAGIC {
        return Err(Error::parse(0, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = cur.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let mut digest = [0u8; 32];
    cur.exact(&mut digest, "spec digest")?;

    let mut tensors = Vec::new();
    while let Some(rank) = cur.u32_or_eof("tensor rank")? {
        if rank > 8 {
            return Err(Error::parse(cur.offset - 4, format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for d in 0..rank {
            shape.push(cur.u32(&format!("dimension {d}"))? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let mut buf = [0u8; 8];
            cur.exact(&mut buf, &format!("tensor element {i}"))?;
            data.push(f64::from_le_bytes(buf) as Scalar);
        }
        tensors.push(Tensor::from_vec(shape, data));
    }
    Ok((digest, tensors))
}

/// Save model parameters keyed to their spec.
pub fn save_params(path: &Path, spec: &ModelSpec, params: &ModelParams) -> Result<()> {
    params.validate_for(spec)?;
    save_tensors(path, &spec_digest(spec), &params.tensors())
}

/// Load model parameters, verifying the stored digest and every tensor
/// shape against `spec`. The initialization seed is not persisted.
pub fn load_params(path: &Path, spec: &ModelSpec) -> Result<ModelParams> {
    let (digest, tensors) = load_tensors(path)?;
    if digest != spec_digest(spec) {
        return Err(Error::contract(format!(
            "checkpoint {} was written for a different model spec",
            path.display()
        )));
    }
    let mut it = tensors.into_iter();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        match layer {
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                let weight = it
                    .next()
                    .ok_or_else(|| Error::contract("checkpoint has too few tensors"))?;
                let bias = it
                    .next()
                    .ok_or_else(|| Error::contract("checkpoint has too few tensors"))?;
                layers.push(match layer {
                    LayerSpec::Dense { .. } => LayerParams::Dense { weight, bias },
                    _ => LayerParams::Conv2d { weight, bias },
                });
            }
            LayerSpec::Flatten | LayerSpec::AvgPool => layers.push(LayerParams::None),
        }
    }
    if it.next().is_some() {
        return Err(Error::contract("checkpoint has more tensors than the spec calls for"));
    }
    let params = ModelParams { layers, init_seed: 0 };
    params.validate_for(spec)?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    #[test]
    fn params_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.parl");
        let spec = ModelSpec::mlp(&[3, 5, 2], Activation::Tanh);
        let params = ModelParams::init(&spec, 77);
        save_params(&path, &spec, &params).unwrap();
        let loaded = load_params(&path, &spec).unwrap();
        assert_eq!(loaded.tensors(), params.tensors());
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.parl");
        let spec = ModelSpec::mlp(&[2, 3, 2], Activation::Relu);
        let params = ModelParams::init(&spec, 1);
        save_params(&path, &spec, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_params(&path, &spec).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert!(offset > 0),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.parl");
        let spec = ModelSpec::mlp(&[2, 3, 2], Activation::Relu);
        let params = ModelParams::init(&spec, 1);
        save_params(&path, &spec, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_params(&path, &spec).unwrap_err();
        assert!(matches!(err, Error::Version { found: 99, expected: 1 }));
    }

    #[test]
    fn digest_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.parl");
        let spec = ModelSpec::mlp(&[2, 3, 2], Activation::Relu);
        let other = ModelSpec::mlp(&[2, 4, 2], Activation::Relu);
        save_params(&path, &spec, &ModelParams::init(&spec, 1)).unwrap();
        let err = load_params(&path, &other).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn bad_magic_is_a_parse_error_at_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.parl");
        std::fs::write(&path, b"NOPEnope").unwrap();
        let err = load_tensors(&path).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn generic_tensor_container_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.parl");
        let a = Tensor::from_vec(vec![2, 2], vec![0.25, -1.5, 3.0, 0.0]);
        let b = Tensor::scalar(42.0);
        let digest = digest_bytes(b"attack spec");
        save_tensors(&path, &digest, &[&a, &b]).unwrap();
        let (d, ts) = load_tensors(&path).unwrap();
        assert_eq!(d, digest);
        assert_eq!(ts, vec![a, b]);
    }
}
