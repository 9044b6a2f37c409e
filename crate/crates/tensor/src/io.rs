//! Little-endian tensor serialization.
//!
//! Layout: `u8` dtype tag (0 = f32, 1 = f64), `u32` rank, `u32` per dim, then
//! the values in row-major order.

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

const MAX_RANK: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn write_values<W: Write>(w: &mut W, values: &[f64], dtype: DType) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * dtype.size());
    match dtype {
        DType::F32 => values
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => values
            .iter()
            .for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> Result<()> {
    w.write_all(&[dtype.tag()])?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| TensorError::InvalidArgument {
            op: "write_tensor",
            msg: format!("dimension {d} exceeds u32"),
        })?;
        w.write_all(&d.to_le_bytes())?;
    }
    write_values(w, t.data(), dtype)
}

/// Reader that tracks the byte offset for error messages.
pub struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn format_error(&self, msg: impl Into<String>) -> TensorError {
        TensorError::Format {
            offset: self.offset,
            msg: msg.into(),
        }
    }

    pub fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                self.format_error(format!("truncated: wanted {} more bytes", buf.len()))
            } else {
                TensorError::Io(e)
            }
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn read_u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b)?;
        Ok(b[0])
    }

    pub fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn read_u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn read_values(&mut self, count: usize, dtype: DType) -> Result<Vec<f64>> {
        let bytes = count
            .checked_mul(dtype.size())
            .ok_or_else(|| self.format_error("payload size overflows"))?;
        let mut buf = vec![0u8; bytes];
        self.read_exact(&mut buf)?;
        Ok(match dtype {
            DType::F32 => buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        })
    }

    pub fn read_tensor(&mut self) -> Result<(Tensor, DType)> {
        let tag = self.read_u8()?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| self.format_error(format!("bad dtype tag {tag}")))?;
        let rank = self.read_u32()?;
        if rank > MAX_RANK {
            return Err(self.format_error(format!("rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = self.read_u32()? as usize;
            if d == 0 {
                return Err(self.format_error("zero-sized dimension"));
            }
            count = count
                .checked_mul(d)
                .ok_or_else(|| self.format_error("dimension product overflows"))?;
            shape.push(d);
        }
        let data = self.read_values(count, dtype)?;
        Ok((Tensor::new(shape, data)?, dtype))
    }
}

pub fn read_tensor<R: Read>(r: R) -> Result<(Tensor, DType)> {
    CountingReader::new(r).read_tensor()
}
