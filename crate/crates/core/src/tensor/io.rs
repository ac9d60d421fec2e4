//! Little-endian binary helpers and the `TNSR` tensor blob.
//!
//! Layout: magic `TNSR`, `u32` rank, `rank` x `u32` dims, then the `f32`
//! payload in row-major order.

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";

/// Cursor over a byte slice that reports absolute offsets on failure.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self::with_base(buf, 0)
    }

    /// A reader whose reported offsets are shifted by `base`.
    pub fn with_base(buf: &'a [u8], base: usize) -> Self {
        Self { buf, pos: 0, base }
    }

    pub fn offset(&self) -> usize {
        self.base + self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.offset(),
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.remaining()
                ),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn expect_magic(&mut self, magic: &[u8], what: &str) -> Result<()> {
        let at = self.offset();
        let got = self.take(magic.len(), what)?;
        if got != magic {
            return Err(Error::format(at, format!("bad {what} magic {got:?}")));
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes(b.try_into().unwrap()))
    }

    /// Reads one `TNSR` blob.
    pub fn tensor(&mut self) -> Result<Tensor<f32>> {
        self.expect_magic(TENSOR_MAGIC, "tensor")?;
        let rank_at = self.offset();
        let rank = self.u32("tensor rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(rank_at, format!("unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let at = self.offset();
            let d = self.u32("tensor dim")? as usize;
            if d == 0 {
                return Err(Error::format(at, "zero-sized dimension"));
            }
            numel = numel
                .checked_mul(d)
                .filter(|n| *n <= self.remaining())
                .ok_or_else(|| Error::format(at, "tensor larger than remaining input"))?;
            shape.push(d);
        }
        let payload = self.take(numel * 4, "tensor payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn finish(&self, what: &str) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(
                self.offset(),
                format!("{} trailing bytes after {what}", self.remaining()),
            ));
        }
        Ok(())
    }
}

pub fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

impl Tensor<f32> {
    /// Appends the `TNSR` encoding of this tensor to `out`.
    pub fn write_tnsr(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(TENSOR_MAGIC);
        put_u32(out, self.shape().len() as u32);
        for &d in self.shape() {
            put_u32(out, d as u32);
        }
        out.reserve(self.len() * 4);
        for &v in self.data() {
            put_f32(out, v);
        }
    }

    pub fn to_tnsr_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_tnsr(&mut out);
        out
    }

    /// Decodes a buffer holding exactly one `TNSR` blob.
    pub fn from_tnsr_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let t = r.tensor()?;
        r.finish("tensor")?;
        Ok(t)
    }
}
