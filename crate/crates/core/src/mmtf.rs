//! MMTF binary tensor files.
//!
//! Layout: `b"MMTF"`, `u8` version (1), `u8` dtype (0 = f32, 1 = f64,
//! 2 = u16), `u8` rank, `rank` little-endian `u32` extents, then the
//! row-major little-endian payload.

use std::fs;
use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::tensor::{DType, LabelTensor, Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"MMTF";
pub const VERSION: u8 = 1;
const HEADER: usize = 7;

/// A tensor of any MMTF dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U16(LabelTensor),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
            AnyTensor::U16(_) => DType::U16,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::U16(t) => &t.shape,
        }
    }
}

fn write_header(out: &mut Vec<u8>, dtype: DType, shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidArgument("cannot encode a rank-0 tensor".into()));
    }
    let rank = u8::try_from(shape.len())
        .map_err(|_| Error::Overflow(format!("rank {} exceeds 255", shape.len())))?;
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.push(rank);
    for &n in shape {
        let n = u32::try_from(n).map_err(|_| Error::Overflow(format!("extent {n} exceeds u32")))?;
        out.extend_from_slice(&n.to_le_bytes());
    }
    Ok(())
}

pub fn encode<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    write_header(out, T::DTYPE, t.shape())?;
    out.reserve(t.len() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

pub fn encode_labels(t: &LabelTensor, out: &mut Vec<u8>) -> Result<()> {
    write_header(out, DType::U16, &t.shape)?;
    for &v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_any(t: &AnyTensor, out: &mut Vec<u8>) -> Result<()> {
    match t {
        AnyTensor::F32(t) => encode(t, out),
        AnyTensor::F64(t) => encode(t, out),
        AnyTensor::U16(t) => encode_labels(t, out),
    }
}

struct Header {
    dtype: DType,
    shape: Vec<usize>,
    payload_len: usize,
    header_len: usize,
}

fn need(bytes: &[u8], n: usize) -> Result<()> {
    if bytes.len() < n {
        return Err(Error::Truncated {
            needed: n,
            available: bytes.len(),
        });
    }
    Ok(())
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    need(bytes, 4)?;
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != MAGIC {
        return Err(Error::BadMagic {
            kind: "MMTF",
            expected: MAGIC,
            found,
        });
    }
    need(bytes, HEADER)?;
    if bytes[4] != VERSION {
        return Err(Error::Version {
            kind: "MMTF",
            expected: VERSION,
            found: bytes[4],
        });
    }
    let dtype = DType::from_code(bytes[5])?;
    let rank = bytes[6] as usize;
    if rank == 0 {
        return Err(Error::InvalidArgument("MMTF tensor has rank 0".into()));
    }
    let header_len = HEADER + 4 * rank;
    need(bytes, header_len)?;
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for i in 0..rank {
        let off = HEADER + 4 * i;
        let n = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if n == 0 {
            return Err(Error::InvalidArgument(format!("MMTF extent {i} is zero")));
        }
        count = count
            .checked_mul(n)
            .ok_or_else(|| Error::Overflow(format!("element count of shape {shape:?}x{n}")))?;
        shape.push(n);
    }
    let payload_len = count
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::Overflow(format!("payload size of shape {shape:?}")))?;
    Ok(Header {
        dtype,
        shape,
        payload_len,
        header_len,
    })
}

/// Decodes one tensor from the front of `bytes`; returns it and the bytes consumed.
pub fn decode_any(bytes: &[u8]) -> Result<(AnyTensor, usize)> {
    let h = parse_header(bytes)?;
    let end = h
        .header_len
        .checked_add(h.payload_len)
        .ok_or_else(|| Error::Overflow("payload end".into()))?;
    need(bytes, end)?;
    let payload = &bytes[h.header_len..end];
    let t = match h.dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(
            h.shape,
            payload.chunks_exact(4).map(f32::read_le).collect(),
        )?),
        DType::F64 => AnyTensor::F64(Tensor::new(
            h.shape,
            payload.chunks_exact(8).map(f64::read_le).collect(),
        )?),
        DType::U16 => AnyTensor::U16(LabelTensor::new(
            h.shape,
            payload
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]))
                .collect(),
        )?),
    };
    Ok((t, end))
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    let (any, used) = decode_any(bytes)?;
    let t = match any {
        AnyTensor::F32(t) if T::DTYPE == DType::F32 => t.cast(),
        AnyTensor::F64(t) if T::DTYPE == DType::F64 => t.cast(),
        other => {
            return Err(Error::InvalidArgument(format!(
                "expected {:?} tensor, found {:?}",
                T::DTYPE,
                other.dtype()
            )))
        }
    };
    Ok((t, used))
}

pub fn tensor_write<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode(t, &mut buf)?;
    fs::write(path.as_ref(), buf).map_err(io_err(path.as_ref()))
}

pub fn tensor_read<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let bytes = fs::read(path.as_ref()).map_err(io_err(path.as_ref()))?;
    Ok(decode(&bytes)?.0)
}

pub fn labels_write(path: impl AsRef<Path>, t: &LabelTensor) -> Result<()> {
    let mut buf = Vec::new();
    encode_labels(t, &mut buf)?;
    fs::write(path.as_ref(), buf).map_err(io_err(path.as_ref()))
}

pub fn labels_read(path: impl AsRef<Path>) -> Result<LabelTensor> {
    let bytes = fs::read(path.as_ref()).map_err(io_err(path.as_ref()))?;
    match decode_any(&bytes)?.0 {
        AnyTensor::U16(t) => Ok(t),
        other => Err(Error::InvalidArgument(format!(
            "expected u16 label tensor, found {:?}",
            other.dtype()
        ))),
    }
}

pub fn any_read(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let bytes = fs::read(path.as_ref()).map_err(io_err(path.as_ref()))?;
    Ok(decode_any(&bytes)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor<f32> {
        Tensor::from_fn(&[2, 3, 4], |i| (i as f32).sin() * 1e3)
    }

    #[test]
    fn round_trip_both_float_dtypes() {
        let t = sample();
        let mut buf = Vec::new();
        encode(&t, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"MMTF");
        assert_eq!(buf[5], 0);
        let (back, used) = decode::<f32>(&buf).unwrap();
        assert_eq!(used, buf.len());
        assert_eq!(back, t);

        let t64: Tensor<f64> = Tensor::from_fn(&[5], |i| 1.0 / (i as f64 + 3.0));
        buf.clear();
        encode(&t64, &mut buf).unwrap();
        assert_eq!(decode::<f64>(&buf).unwrap().0, t64);
    }

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        encode(&t, &mut buf).unwrap();
        let mut expected = b"MMTF".to_vec();
        expected.extend_from_slice(&[1, 0, 2, 2, 0, 0, 0, 1, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn distinct_diagnostics() {
        let mut buf = Vec::new();
        encode(&sample(), &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(decode::<f32>(&bad), Err(Error::BadMagic { .. })));
        assert!(decode::<f32>(&bad).unwrap_err().to_string().contains("bad magic"));

        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(decode::<f32>(truncated), Err(Error::Truncated { .. })));

        let mut overflow = b"MMTF".to_vec();
        overflow.extend_from_slice(&[1, 1, 8]);
        for _ in 0..8 {
            overflow.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode::<f64>(&overflow), Err(Error::Overflow(_))));

        let mut rank0 = b"MMTF".to_vec();
        rank0.extend_from_slice(&[1, 0, 0]);
        assert!(decode::<f32>(&rank0).is_err());

        let mut bad_version = buf.clone();
        bad_version[4] = 9;
        assert!(matches!(decode::<f32>(&bad_version), Err(Error::Version { .. })));
    }

    #[test]
    fn labels_round_trip() {
        let t = LabelTensor::new(vec![2, 2], vec![0, 1, 65535, 7]).unwrap();
        let mut buf = Vec::new();
        encode_labels(&t, &mut buf).unwrap();
        assert_eq!(buf[5], 2);
        match decode_any(&buf).unwrap().0 {
            AnyTensor::U16(back) => assert_eq!(back, t),
            other => panic!("unexpected {other:?}"),
        }
    }
}
