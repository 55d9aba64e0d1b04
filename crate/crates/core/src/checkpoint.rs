//! Flat parameter checkpoints (`.obs`, `.pol`).
//!
//! Layout, all little-endian: `u32` count `n`, then `n` `u32` layer widths,
//! then the parameters as `f64` until end of file.

use std::io;
use std::path::Path;

use crate::autodiff::ParamVector;

pub fn encode(header: &[u32], params: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * header.len() + 8 * params.len());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    for h in header {
        out.extend_from_slice(&h.to_le_bytes());
    }
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> io::Result<(Vec<u32>, ParamVector)> {
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    if bytes.len() < 4 {
        return Err(bad("checkpoint too short"));
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let body = 4 + 4 * n;
    if bytes.len() < body || (bytes.len() - body) % 8 != 0 {
        return Err(bad("truncated checkpoint"));
    }
    let header = (0..n)
        .map(|i| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()))
        .collect();
    let values = bytes[body..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = ParamVector::new(values).map_err(|_| bad("non-finite parameter"))?;
    Ok((header, params))
}

pub fn save(path: &Path, header: &[u32], params: &ParamVector) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode(header, params))
}

pub fn load(path: &Path) -> io::Result<(Vec<u32>, ParamVector)> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let p = ParamVector::new(vec![1.5]).unwrap();
        let b = encode(&[6, 64], &p);
        assert_eq!(&b[0..4], &2u32.to_le_bytes());
        assert_eq!(&b[4..8], &6u32.to_le_bytes());
        assert_eq!(&b[12..20], &1.5f64.to_le_bytes());
        assert!(decode(&b[..10]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(h in prop::collection::vec(any::<u32>(), 0..5),
                      v in prop::collection::vec(-1e6f64..1e6, 0..50)) {
            let p = ParamVector::new(v).unwrap();
            let (h2, p2) = decode(&encode(&h, &p)).unwrap();
            prop_assert_eq!(h2, h);
            prop_assert_eq!(p2, p);
        }
    }
}
