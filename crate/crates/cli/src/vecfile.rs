//! `SNVC` vector files: one or more equal-length `f64` vectors.
//!
//! Layout, all little-endian:
//!
//! | bytes | field                          |
//! |-------|--------------------------------|
//! | 4     | magic `SNVC`                   |
//! | 2     | version, currently 1           |
//! | 2     | reserved, zero                 |
//! | 4     | vector count                   |
//! | 8     | length of each vector          |
//! | 8·n   | values, vector after vector    |

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use nalgebra::DVector;

pub const MAGIC: &[u8; 4] = b"SNVC";
pub const VERSION: u16 = 1;
const HEADER: usize = 20;

pub fn encode(vectors: &[DVector<f64>]) -> Result<Vec<u8>> {
    let len = vectors.first().map_or(0, |v| v.len());
    ensure!(
        vectors.iter().all(|v| v.len() == len),
        "all vectors in one file must have the same length"
    );
    let mut out = Vec::with_capacity(HEADER + 8 * len * vectors.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(vectors.len() as u32).to_le_bytes());
    out.extend_from_slice(&(len as u64).to_le_bytes());
    for v in vectors {
        for x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<DVector<f64>>> {
    ensure!(bytes.len() >= HEADER, "vector file is shorter than its {HEADER}-byte header");
    if &bytes[..4] != MAGIC {
        bail!("not a vector file (bad magic {:?})", &bytes[..4]);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    ensure!(version == VERSION, "unsupported vector file version {version}");
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let expected = count
        .checked_mul(len)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER));
    ensure!(
        expected == Some(bytes.len()),
        "vector file holds {} bytes, header promises {count} x {len} values",
        bytes.len()
    );
    let values = &bytes[HEADER..];
    Ok((0..count)
        .map(|k| {
            DVector::from_iterator(
                len,
                values[8 * k * len..8 * (k + 1) * len]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
            )
        })
        .collect())
}

pub fn write(path: &Path, vectors: &[DVector<f64>]) -> Result<()> {
    let bytes = encode(vectors)?;
    let mut f = std::fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    f.write_all(&bytes)
        .with_context(|| format!("cannot write {}", path.display()))
}

pub fn read(path: &Path) -> Result<Vec<DVector<f64>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .with_context(|| format!("cannot read {}", path.display()))?;
    decode(&bytes).with_context(|| format!("invalid vector file {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&[DVector::from_vec(vec![1.0, -2.5])]).unwrap();
        assert_eq!(&bytes[..4], b"SNVC");
        assert_eq!(bytes.len(), 20 + 16);
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &2u64.to_le_bytes());
        assert_eq!(&bytes[20..28], &1.0f64.to_le_bytes());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let good = encode(&[DVector::from_vec(vec![1.0, 2.0, 3.0])]).unwrap();
        assert!(decode(&good[..good.len() - 1]).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = good;
        bad[4] = 9;
        assert!(decode(&bad).is_err());
        assert!(encode(&[DVector::zeros(2), DVector::zeros(3)]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            count in 1usize..4,
            values in prop::collection::vec(any::<f64>(), 0..40),
        ) {
            let len = values.len() / count;
            let vectors: Vec<DVector<f64>> = (0..count)
                .map(|k| DVector::from_row_slice(&values[k * len..(k + 1) * len]))
                .collect();
            let back = decode(&encode(&vectors).unwrap()).unwrap();
            prop_assert_eq!(back.len(), count);
            for (a, b) in back.iter().zip(&vectors) {
                prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
