//! Binary checkpoint format.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! magic        4 bytes   "PGAT"
//! version      u32       FORMAT_VERSION
//! E, L, h      3 × u64
//! tensors      u64       number of tensors that follow
//! per tensor   rows u64, cols u64, rows·cols × f64   (canonical order)
//! checksum     32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! The canonical tensor order is documented in [`super::params`]; the
//! norm epsilon is not stored and is restored as [`NORM_EPSILON`]. A text
//! manifest written next to the checkpoint lists tensor names and shapes.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::params::{Model, ModelDims, ModelParams};
use crate::error::{PgatError, Result};
use crate::numerics::{Matrix, NORM_EPSILON};

pub const MAGIC: &[u8; 4] = b"PGAT";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

pub fn encode(model: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + model.parameter_count() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in [model.dims.descriptor_dim, model.dims.layers, model.dims.heads] {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let mut tensors = Vec::new();
    model.visit(|_, m| tensors.push(m));
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for m in tensors {
        buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(PgatError::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| PgatError::Checkpoint("size overflow".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
        return Err(PgatError::Checkpoint("file too short".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(PgatError::Checkpoint("bad magic".into()));
    }
    let (body, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored {
        return Err(PgatError::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(PgatError::Checkpoint(format!("unsupported format version {version}")));
    }
    let dims = ModelDims {
        descriptor_dim: r.usize()?,
        layers: r.usize()?,
        heads: r.usize()?,
    };
    dims.validate()
        .map_err(|e| PgatError::Checkpoint(format!("invalid dims: {e}")))?;
    let count = r.usize()?;
    let expected = super::params::expected_shapes(dims);
    if count != expected.len() {
        return Err(PgatError::Checkpoint(format!(
            "{count} tensors stored, {} expected",
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let rows = r.usize()?;
        let cols = r.usize()?;
        if (rows, cols) != *shape {
            return Err(PgatError::Checkpoint(format!(
                "{name} stored as {rows}x{cols}, expected {}x{}",
                shape.0, shape.1
            )));
        }
        let raw = r.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Matrix::from_vec(rows, cols, data)?);
    }
    if r.pos != body.len() {
        return Err(PgatError::Checkpoint("trailing bytes after tensors".into()));
    }
    let mut model = skeleton(dims);
    let mut it = tensors.into_iter();
    model.visit_mut(|_, m| *m = it.next().expect("count checked"));
    model.validate_shapes()?;
    Ok(model)
}

fn skeleton(dims: ModelDims) -> ModelParams {
    use super::params::{AttentionBlock, Layer};
    use crate::numerics::{Linear, MaskedNorm};
    let empty = || Linear {
        weight: Matrix::zeros(0, 0),
        bias: Matrix::zeros(0, 0),
    };
    let block = || AttentionBlock {
        query: empty(),
        key: empty(),
        value: empty(),
        merge: empty(),
        mlp_hidden: empty(),
        mlp_norm: MaskedNorm {
            gamma: Matrix::zeros(0, 0),
            beta: Matrix::zeros(0, 0),
            epsilon: NORM_EPSILON,
        },
        mlp_out: empty(),
    };
    Model {
        dims,
        pos_encoder: (0..4).map(|_| empty()).collect(),
        layers: (0..dims.layers)
            .map(|_| Layer {
                intra: block(),
                inter: block(),
            })
            .collect(),
    }
}

/// Text listing of tensor names and shapes in storage order.
pub fn manifest(model: &ModelParams) -> String {
    let mut out = format!(
        "# PGAT checkpoint v{FORMAT_VERSION}\n# E={} L={} h={} parameters={}\n",
        model.dims.descriptor_dim,
        model.dims.layers,
        model.dims.heads,
        model.parameter_count()
    );
    for (name, (rows, cols)) in model.shapes() {
        out.push_str(&format!("{name} {rows} {cols}\n"));
    }
    out
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Writes the checkpoint and its manifest.
pub fn save(model: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| PgatError::io(path, e))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest(model)).map_err(|e| PgatError::io(&mpath, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| PgatError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        Model::init(
            ModelDims {
                descriptor_dim: 8,
                layers: 2,
                heads: 2,
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = small();
        let bytes = encode(&m);
        assert_eq!(&bytes[..4], b"PGAT");
        assert_eq!(decode(&bytes).unwrap(), m);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&small());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(decode(&bytes), Err(PgatError::Checkpoint(_))));
        assert!(matches!(decode(&bytes[..20]), Err(PgatError::Checkpoint(_))));
        let mut wrong_magic = encode(&small());
        wrong_magic[0] = b'X';
        assert!(matches!(decode(&wrong_magic), Err(PgatError::Checkpoint(_))));
    }

    #[test]
    fn manifest_lists_every_tensor() {
        let m = small();
        let text = manifest(&m);
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), m.names().len());
        assert!(text.contains("pos_encoder.3.weight 8 128"));
    }
}
