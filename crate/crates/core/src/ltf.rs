//! `LTF1` binary tensor files.
//!
//! Layout: magic `LTF1`, a u32 little-endian header word, the dims as u32 LE,
//! then the payload with the last index varying fastest. The header word's low
//! 24 bits hold the tensor order; the high byte is a payload flag: 0 for f64
//! values, 1 for i32 values (label volumes).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const MAGIC: &[u8; 4] = b"LTF1";

const FLAG_F64: u8 = 0;
const FLAG_I32: u8 = 1;

/// Integer-valued tensor (region label volumes).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub dims: Vec<usize>,
    pub labels: Vec<i32>,
}

fn header(order: usize, flag: u8, dims: &[usize], out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    let word = (order as u32) | ((flag as u32) << 24);
    out.extend_from_slice(&word.to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

pub fn encode(t: &DenseTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.order() + 8 * t.len());
    header(t.order(), FLAG_F64, t.dims(), &mut out);
    for v in t.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_labels(v: &LabelVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * v.dims.len() + 4 * v.labels.len());
    header(v.dims.len(), FLAG_I32, &v.dims, &mut out);
    for l in &v.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

fn parse_header(c: &mut Cursor<'_>) -> std::result::Result<(u8, Vec<usize>), String> {
    match c.take(4) {
        Some(m) if m == MAGIC => {}
        Some(_) => return Err("wrong magic bytes (expected LTF1)".into()),
        None => return Err("file too short for magic bytes".into()),
    }
    let word = c.u32().ok_or("truncated header")?;
    let order = (word & 0x00ff_ffff) as usize;
    let flag = (word >> 24) as u8;
    if order == 0 {
        return Err("tensor order is zero".into());
    }
    if order > 64 {
        return Err(format!("implausible tensor order {order}"));
    }
    let mut dims = Vec::with_capacity(order);
    for j in 0..order {
        let d = c.u32().ok_or("truncated dimension list")? as usize;
        if d == 0 {
            return Err(format!("dimension {j} is zero"));
        }
        dims.push(d);
    }
    Ok((flag, dims))
}

fn payload_len(dims: &[usize], width: usize) -> std::result::Result<usize, String> {
    dims.iter()
        .try_fold(width, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| "payload size overflows".to_string())
}

pub fn decode(bytes: &[u8]) -> std::result::Result<DenseTensor, String> {
    let mut c = Cursor { bytes, pos: 0 };
    let (flag, dims) = parse_header(&mut c)?;
    if flag != FLAG_F64 {
        return Err(format!("payload flag {flag} is not a real-valued tensor"));
    }
    let n = payload_len(&dims, 8)?;
    let body = c.take(n).ok_or_else(|| {
        format!("truncated payload: expected {} bytes, found {}", n, bytes.len() - c.pos)
    })?;
    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes after payload", bytes.len() - c.pos));
    }
    let values = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    DenseTensor::new(dims, values).map_err(|e| e.to_string())
}

pub fn decode_labels(bytes: &[u8]) -> std::result::Result<LabelVolume, String> {
    let mut c = Cursor { bytes, pos: 0 };
    let (flag, dims) = parse_header(&mut c)?;
    if flag != FLAG_I32 {
        return Err(format!("payload flag {flag} is not an integer label volume"));
    }
    let n = payload_len(&dims, 4)?;
    let body = c.take(n).ok_or("truncated payload")?;
    if c.pos != bytes.len() {
        return Err(format!("{} trailing bytes after payload", bytes.len() - c.pos));
    }
    let labels = body.chunks_exact(4).map(|b| i32::from_le_bytes(b.try_into().unwrap())).collect();
    Ok(LabelVolume { dims, labels })
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<DenseTensor> {
    let path = path.as_ref();
    decode(&read_all(path)?).map_err(|msg| Error::Format { path: path.to_path_buf(), msg })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &DenseTensor) -> Result<()> {
    write_all(path.as_ref(), &encode(t))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    decode_labels(&read_all(path)?).map_err(|msg| Error::Format { path: path.to_path_buf(), msg })
}

pub fn write_labels(path: impl AsRef<Path>, v: &LabelVolume) -> Result<()> {
    write_all(path.as_ref(), &encode_labels(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let t = DenseTensor::from_fn(&[2, 3, 4], |i| (i[0] as f64).sin() + i[1] as f64 * 1e-17 - i[2] as f64);
        let back = decode(&encode(&t)).unwrap();
        assert_eq!(back.dims(), t.dims());
        for (a, b) in back.values().iter().zip(t.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_layout() {
        let t = DenseTensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"LTF1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(b.len(), 12 + 16);
    }

    #[test]
    fn rejects_bad_inputs() {
        let t = DenseTensor::zeros(&[3, 3]);
        let mut b = encode(&t);
        b[0] = b'X';
        assert!(decode(&b).unwrap_err().contains("magic"));
        let b = encode(&t);
        assert!(decode(&b[..b.len() - 3]).unwrap_err().contains("truncated"));
        assert!(decode(&b[..6]).is_err());
        let v = LabelVolume { dims: vec![2, 2], labels: vec![0, 1, 2, 3] };
        assert!(decode(&encode_labels(&v)).is_err());
        assert_eq!(decode_labels(&encode_labels(&v)).unwrap(), v);
    }
}
