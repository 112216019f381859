//! TNSR binary tensor records.
//!
//! Layout (all integers little-endian):
//! - magic `TRAC`
//! - version byte `0x01`
//! - dtype byte: 1 = f32, 2 = f64, 3 = u8
//! - rank byte
//! - `rank` u64 extents
//! - row-major element data

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"TRAC";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;
pub const DTYPE_U8: u8 = 3;

/// A decoded record in whatever precision it was stored.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8 { shape: Shape, data: Vec<u8> },
}

impl Record {
    pub fn shape(&self) -> &Shape {
        match self {
            Record::F32(t) => t.shape(),
            Record::F64(t) => t.shape(),
            Record::U8 { shape, .. } => shape,
        }
    }

    /// Converts to the requested precision. Conversion to the stored
    /// precision is lossless.
    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        match self {
            Record::F32(t) => t.cast(),
            Record::F64(t) => t.cast(),
            Record::U8 { shape, data } => {
                let vals = data.iter().map(|&b| T::from_f64(b as f64)).collect();
                Tensor::new(shape, vals).expect("record length checked on read")
            }
        }
    }
}

fn write_header(w: &mut impl Write, dtype: u8, shape: &Shape) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, dtype, shape.rank() as u8])?;
    for &d in shape.dims() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> io::Result<()> {
    write_header(w, T::DTYPE, t.shape())?;
    let mut buf = Vec::with_capacity(t.len() * T::BYTES);
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)
}

pub fn write_u8(w: &mut impl Write, shape: &Shape, data: &[u8]) -> io::Result<()> {
    assert_eq!(shape.numel(), data.len());
    write_header(w, DTYPE_U8, shape)?;
    w.write_all(data)
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::format(format!("truncated TNSR record ({what})")),
        _ => Error::Io(e),
    })
}

pub fn read_record(r: &mut impl Read) -> Result<Record> {
    let mut head = [0u8; 7];
    read_exact(r, &mut head, "header")?;
    if &head[..4] != MAGIC {
        return Err(Error::format(format!("bad magic {:?}", &head[..4])));
    }
    if head[4] != VERSION {
        return Err(Error::format(format!("unsupported version {}", head[4])));
    }
    let dtype = head[5];
    let elem = match dtype {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        DTYPE_U8 => 1,
        other => return Err(Error::format(format!("unknown dtype {other}"))),
    };
    let rank = head[6] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        read_exact(r, &mut b, "extents")?;
        let d = u64::from_le_bytes(b);
        dims.push(usize::try_from(d).map_err(|_| Error::format("extent too large"))?);
    }
    let shape = Shape::new(dims).map_err(|e| Error::format(e.to_string()))?;
    let n_bytes = shape
        .numel()
        .checked_mul(elem)
        .ok_or_else(|| Error::format("record too large"))?;
    let mut raw = vec![0u8; n_bytes];
    read_exact(r, &mut raw, "data")?;
    Ok(match dtype {
        DTYPE_F32 => Record::F32(Tensor::new(shape, decode_vals::<f32>(&raw))?),
        DTYPE_F64 => Record::F64(Tensor::new(shape, decode_vals::<f64>(&raw))?),
        _ => Record::U8 { shape, data: raw },
    })
}

fn decode_vals<T: Scalar>(raw: &[u8]) -> Vec<T> {
    raw.chunks_exact(T::BYTES).map(T::read_le).collect()
}

pub fn read_tensor<T: Scalar>(r: &mut impl Read) -> Result<Tensor<T>> {
    Ok(read_record(r)?.into_tensor())
}
