//! Weight blob format:
//!
//! ```text
//! "FSW1" | version: u32 LE | count: u32 LE | count x (rank: u32 LE | dims: u32 LE x rank | payload: f64 LE x prod(dims))
//! ```

use crate::error::{FedError, Result};
use crate::nn::stack::LayerStack;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FSW1";
pub const FORMAT_VERSION: u32 = 1;

/// Serializes the stack's weights followed by its batch-norm running buffers.
pub fn serialize_weights(stack: &LayerStack) -> Vec<u8> {
    encode_tensors(&stack.state_tensors())
}

pub fn deserialize_weights(blob: &[u8]) -> Result<Vec<Tensor>> {
    decode_tensors(blob)
}

pub fn encode_tensors(tensors: &[Tensor]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|t| 4 + 4 * t.rank() + 8 * t.len()).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| {
            FedError::Format(format!(
                "truncated: need {n} bytes at offset {}, blob has {}",
                self.pos,
                self.buf.len()
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(blob: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { buf: blob, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(FedError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FedError::Format(format!(
            "unsupported version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(
            n.checked_mul(8)
                .ok_or_else(|| FedError::Format("tensor size overflows".into()))?,
        )?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(Tensor::new(shape, data).map_err(|e| FedError::Format(e.to_string()))?);
    }
    if r.pos != blob.len() {
        return Err(FedError::Format(format!(
            "{} trailing bytes",
            blob.len() - r.pos
        )));
    }
    Ok(out)
}
