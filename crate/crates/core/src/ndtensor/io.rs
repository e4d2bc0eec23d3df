//! `NDT1` container: `b"NDT1"`, rank (u32 LE), one u32 LE extent per axis,
//! then the row-major payload as little-endian f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"NDT1";

pub fn write_ndt1<T: Scalar, W: Write>(t: &Tensor<T>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &n in t.shape() {
        let n = u32::try_from(n).map_err(|_| Error::Format(format!("extent {n} exceeds u32")))?;
        w.write_all(&n.to_le_bytes())?;
    }
    for v in t.values().iter() {
        w.write_all(&v.to_f64_lossy().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_ndt1<T: Scalar, R: Read>(mut r: R) -> Result<Tensor<T>> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    if &word != MAGIC {
        return Err(Error::Format(format!("bad magic {word:?}")));
    }
    r.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut word)?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 8];
    r.read_exact(&mut payload)
        .map_err(|e| Error::Format(format!("truncated payload: {e}")))?;
    let data = payload
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Tensor::new(&shape, data)
}

pub fn write_ndt1_file<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ndt1(t, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_ndt1_file<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read_ndt1(BufReader::new(File::open(path)?))
}
