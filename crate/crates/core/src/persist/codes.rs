use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::quantizer::CodeGrid;

use super::checkpoint::write_atomic;

const MAGIC: &[u8; 4] = b"CGRD";

/// `"CGRD" | T u32 | N u32 | K u32 | T·N × u16`, little-endian, row-major
/// (frame by frame).
pub fn code_grid_to_bytes(c: &CodeGrid) -> Result<Vec<u8>> {
    if c.codebook_size() > u16::MAX as usize + 1 {
        return Err(Error::Format(format!("K = {} does not fit 16-bit codes", c.codebook_size())));
    }
    let mut out = Vec::with_capacity(16 + 2 * c.codes().len());
    out.extend_from_slice(MAGIC);
    for v in [c.frames(), c.groups(), c.codebook_size()] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &code in c.codes() {
        out.extend_from_slice(&(code as u16).to_le_bytes());
    }
    Ok(out)
}

pub fn code_grid_from_bytes(b: &[u8]) -> Result<CodeGrid> {
    if b.len() < 16 || &b[..4] != MAGIC {
        return Err(Error::Format("not a code grid file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(b[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (t, n, k) = (word(0), word(1), word(2));
    let expect = t.checked_mul(n).and_then(|c| c.checked_mul(2)).and_then(|c| c.checked_add(16));
    if expect != Some(b.len()) {
        return Err(Error::Format(format!("code grid of {t}×{n} does not match {} bytes", b.len())));
    }
    let codes = b[16..].chunks_exact(2).map(|p| u16::from_le_bytes([p[0], p[1]]) as usize).collect();
    CodeGrid::new(t, n, k, codes).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_code_grid(c: &CodeGrid, path: &Path) -> Result<()> {
    write_atomic(path, &code_grid_to_bytes(c)?)
}

pub fn load_code_grid(path: &Path) -> Result<CodeGrid> {
    code_grid_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn layout() {
        let c = CodeGrid::new(2, 2, 300, vec![1, 299, 0, 256]).unwrap();
        let b = code_grid_to_bytes(&c).unwrap();
        assert_eq!(&b[..4], b"CGRD");
        assert_eq!(&b[4..16], &[2, 0, 0, 0, 2, 0, 0, 0, 44, 1, 0, 0]);
        assert_eq!(&b[16..], &[1, 0, 43, 1, 0, 0, 0, 1]);
        assert!(code_grid_from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[16] = 0x2c;
        bad[17] = 0x01; // code 300 ≥ K
        assert!(matches!(code_grid_from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.codes");
        let c = CodeGrid::new(3, 1, 65536, vec![65535, 0, 7]).unwrap();
        save_code_grid(&c, &p).unwrap();
        assert_eq!(load_code_grid(&p).unwrap(), c);
    }

    proptest! {
        #[test]
        fn bytes_round_trip(t in 1usize..20, n in 1usize..5, k in 1usize..2000, seed in any::<u64>()) {
            let codes = (0..t * n).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as usize % k).collect();
            let c = CodeGrid::new(t, n, k, codes).unwrap();
            prop_assert_eq!(code_grid_from_bytes(&code_grid_to_bytes(&c).unwrap()).unwrap(), c);
        }
    }
}
