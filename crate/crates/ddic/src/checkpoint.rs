//! Binary model checkpoints: a magic tag, a format version, the
//! architecture, and every parameter matrix with exact bit fidelity.

use std::fs;
use std::path::Path;

use ddic_core::dec::{ArchitectureSpec, ModelParams};
use ddic_core::Matrix;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DDCK";
const VERSION: u32 = 1;

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    push_u64(buf, m.rows() as u64);
    push_u64(buf, m.cols() as u64);
    for &v in m.as_slice() {
        buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        match end {
            Some(end) => {
                let slice = &self.data[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(Error::Format(format!(
                "checkpoint truncated at byte {} (needed {n} more)",
                self.pos
            ))),
        }
    }

    fn u32_le(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64_le(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(b);
        Ok(u64::from_le_bytes(bytes))
    }

    fn usize_le(&mut self) -> Result<usize> {
        let v = self.u64_le()?;
        usize::try_from(v)
            .map_err(|_| Error::Format(format!("dimension {v} exceeds the platform's usize")))
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.usize_le()?;
        let cols = self.usize_le()?;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format(format!("matrix shape {rows}x{cols} overflows")))?;
        let bytes = self.take(count * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| {
                let mut b = [0u8; 8];
                b.copy_from_slice(c);
                f64::from_bits(u64::from_le_bytes(b))
            })
            .collect();
        Matrix::from_vec(rows, cols, data).map_err(Error::Core)
    }
}

/// Serializes `params` to `path`, overwriting any existing file.
pub fn save_model(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let arch = &params.arch;
    push_u64(&mut buf, arch.input_dim as u64);
    push_u64(&mut buf, arch.hidden_dims.len() as u64);
    for &h in &arch.hidden_dims {
        push_u64(&mut buf, h as u64);
    }
    push_u64(&mut buf, arch.embedding_dim as u64);
    push_u64(&mut buf, arch.cluster_count as u64);

    for m in params.param_mats() {
        push_matrix(&mut buf, m);
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_model`], restoring every parameter
/// bit-for-bit and validating shapes against the recorded architecture.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    let data = fs::read(&path)?;
    let mut cur = Cursor {
        data: &data,
        pos: 0,
    };

    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:02x?}, expected {MAGIC:02x?}"
        )));
    }
    let version = cur.u32_le()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }

    let input_dim = cur.usize_le()?;
    let hidden_count = cur.usize_le()?;
    let mut hidden_dims = Vec::with_capacity(hidden_count);
    for _ in 0..hidden_count {
        hidden_dims.push(cur.usize_le()?);
    }
    let embedding_dim = cur.usize_le()?;
    let cluster_count = cur.usize_le()?;
    let arch = ArchitectureSpec::new(input_dim, hidden_dims, embedding_dim, cluster_count)
        .map_err(Error::Core)?;

    let mut params = ModelParams::zeros(&arch);
    for slot in params.param_mats_mut() {
        let loaded = cur.matrix()?;
        if loaded.shape() != slot.shape() {
            return Err(Error::Consistency(format!(
                "checkpoint matrix is {:?} but the architecture requires {:?}",
                loaded.shape(),
                slot.shape()
            )));
        }
        *slot = loaded;
    }
    if cur.pos != data.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last parameter matrix",
            data.len() - cur.pos
        )));
    }
    Ok(params)
}
