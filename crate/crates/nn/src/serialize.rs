//! Versioned binary container for named tensors.
//!
//! Layout (all integers 64-bit little-endian unsigned, floats IEEE-754
//! 64-bit little-endian):
//!
//! ```text
//! magic            8 bytes  "SPIOPT1\0"
//! repeated until EOF:
//!   name_len       u64
//!   name           name_len bytes, UTF-8
//!   rank           u64
//!   dims           rank × u64, all positive
//!   values         prod(dims) × f64, row-major
//! ```

use std::io::{Read, Write};

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SPIOPT1\0";

pub fn write_container<W: Write>(mut w: W, entries: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.rank() as u64).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_container<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| NnError::CorruptContainer("file shorter than magic".into()))?;
    if &magic != MAGIC {
        return Err(NnError::CorruptContainer(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut entries = Vec::new();
    loop {
        let name_len = match read_u64_opt(&mut r)? {
            Some(v) => v as usize,
            None => break,
        };
        if name_len > 1 << 20 {
            return Err(NnError::CorruptContainer(format!(
                "implausible name length {}",
                name_len
            )));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| NnError::CorruptContainer("truncated name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| NnError::CorruptContainer("name is not UTF-8".into()))?;
        let rank = read_u64(&mut r, "rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(NnError::CorruptContainer(format!(
                "tensor {} has implausible rank {}",
                name, rank
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = read_u64(&mut r, "dim")? as usize;
            if d == 0 {
                return Err(NnError::CorruptContainer(format!(
                    "tensor {} has zero dimension",
                    name
                )));
            }
            count = count.checked_mul(d).ok_or_else(|| {
                NnError::CorruptContainer(format!("tensor {} dimension overflow", name))
            })?;
            shape.push(d);
        }
        if count > 1 << 32 {
            return Err(NnError::CorruptContainer(format!(
                "tensor {} implausibly large ({} values)",
                name, count
            )));
        }
        let mut values = vec![0.0f64; count];
        let mut buf = [0u8; 8];
        for v in values.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| NnError::CorruptContainer(format!("truncated values for {}", name)))?;
            *v = f64::from_le_bytes(buf);
            if !v.is_finite() {
                return Err(NnError::CorruptContainer(format!(
                    "non-finite value in tensor {}",
                    name
                )));
            }
        }
        entries.push((name, Tensor::new(shape, values)?));
    }
    Ok(entries)
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| NnError::CorruptContainer(format!("truncated {}", what)))?;
    Ok(u64::from_le_bytes(buf))
}

/// None on clean EOF at a record boundary.
fn read_u64_opt<R: Read>(r: &mut R) -> Result<Option<u64>> {
    let mut buf = [0u8; 8];
    let mut filled = 0;
    while filled < 8 {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(NnError::CorruptContainer("truncated record header".into()));
        }
        filled += n;
    }
    Ok(Some(u64::from_le_bytes(buf)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_preserves_bits() {
        let mut rng = Rng::new(17);
        let entries: Vec<(String, Tensor)> = (0..5)
            .map(|i| {
                let shape = vec![i + 1, 3];
                let values = (0..(i + 1) * 3).map(|_| rng.uniform(-10.0, 10.0)).collect();
                (format!("layer{}.weight", i), Tensor::new(shape, values).unwrap())
            })
            .collect();
        let mut buf = Vec::new();
        write_container(&mut buf, &entries).unwrap();
        let back = read_container(buf.as_slice()).unwrap();
        assert_eq!(back.len(), entries.len());
        for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.values(), t2.values());
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let err = read_container(&b"NOTMAGIC"[..]).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn truncated_values_rejected() {
        let entries = vec![("w".to_string(), Tensor::filled(vec![4], 1.0))];
        let mut buf = Vec::new();
        write_container(&mut buf, &entries).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_container(buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{}", err);
    }

    #[test]
    fn non_finite_values_rejected() {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&1u64.to_le_bytes());
        buf.push(b'w');
        buf.extend_from_slice(&1u64.to_le_bytes());
        buf.extend_from_slice(&1u64.to_le_bytes());
        buf.extend_from_slice(&f64::NAN.to_le_bytes());
        let err = read_container(buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{}", err);
    }
}
