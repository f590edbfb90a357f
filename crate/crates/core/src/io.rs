//! Tensor files.
//!
//! Binary layout: the magic bytes `QBT1`, a little-endian `u32` rank, `rank`
//! little-endian `u64` dimensions, then the elements as little-endian `f64` in
//! row-major order. Small fixtures can also use the JSON form
//! `{"shape": [...], "data": [...]}`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"QBT1";

pub fn write_qbt<W: Write>(mut w: W, tensor: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn encode_qbt(tensor: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 8 * tensor.rank() + 8 * tensor.len());
    write_qbt(&mut buf, tensor).expect("writing to a Vec cannot fail");
    buf
}

pub fn decode_qbt(bytes: &[u8]) -> Result<Tensor> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    read_exact(&mut r, &mut word, "rank")?;
    let rank = u32::from_le_bytes(word) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut buf = [0u8; 8];
    for _ in 0..rank {
        read_exact(&mut r, &mut buf, "dimension")?;
        let d = u64::from_le_bytes(buf);
        shape.push(usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    if r.len() != len * 8 {
        return Err(Error::Format(format!(
            "expected {} payload bytes for shape {shape:?}, found {}",
            len * 8,
            r.len()
        )));
    }
    let data = r
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated while reading {what}")))
}

pub fn save_qbt(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_qbt(tensor)).map_err(|e| Error::io(path, e))
}

pub fn load_qbt(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_qbt(&bytes)
}

pub fn save_json(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(tensor)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_json(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
