//! GTEN tensor container: magic "GTEN", version u32, rank u32,
//! dims u32 x rank, then a little-endian f64 payload. Round-trips are
//! bit-exact; payload bytes are the raw IEEE-754 representation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Tensor, TensorError, TensorResult};

pub const GTEN_MAGIC: &[u8; 4] = b"GTEN";
pub const GTEN_VERSION: u32 = 1;

pub fn write_gten<W: Write>(w: &mut W, t: &Tensor) -> TensorResult<()> {
    w.write_all(GTEN_MAGIC)?;
    w.write_all(&GTEN_VERSION.to_le_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_gten<R: Read>(r: &mut R) -> TensorResult<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GTEN_MAGIC {
        return Err(TensorError::Format(format!(
            "bad magic {:?} at offset 0, expected \"GTEN\"",
            magic
        )));
    }
    let version = read_u32(r)?;
    if version != GTEN_VERSION {
        return Err(TensorError::Format(format!(
            "unsupported GTEN version {version}"
        )));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(TensorError::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::new(&shape, data)
}

fn read_u32<R: Read>(r: &mut R) -> TensorResult<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> TensorResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_gten(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> TensorResult<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_gten(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = Rng::new(13);
        let t = Tensor::rand_normal(&[3, 4, 2], 0.0, 1.0, &mut rng);
        let mut buf = Vec::new();
        write_gten(&mut buf, &t).unwrap();
        let back = read_gten(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);
        // including negative zero and subnormals
        let odd = Tensor::new(&[3], vec![-0.0, f64::MIN_POSITIVE / 8.0, 1.0]).unwrap();
        let mut buf = Vec::new();
        write_gten(&mut buf, &odd).unwrap();
        let back = read_gten(&mut buf.as_slice()).unwrap();
        assert_eq!(odd.data()[0].to_bits(), back.data()[0].to_bits());
        assert_eq!(odd.data()[1].to_bits(), back.data()[1].to_bits());
    }

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::scalar(std::f64::consts::PI);
        let mut buf = Vec::new();
        write_gten(&mut buf, &t).unwrap();
        let back = read_gten(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);
        assert!(back.is_scalar());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let buf = b"NOPE\x01\x00\x00\x00".to_vec();
        let err = read_gten(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, TensorError::Format(_)));
    }
}
