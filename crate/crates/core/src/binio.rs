//! Little-endian helpers for the fixed binary formats.

use std::io::Read;

use crate::error::{Error, Result};

pub(crate) fn read_exact<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub(crate) fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    read_exact::<4>(r, what).map(u32::from_le_bytes)
}

pub(crate) fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    read_exact::<8>(r, what).map(u64::from_le_bytes)
}

pub(crate) fn expect_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let found = read_exact::<4>(r, "header")?;
    if &found != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&found),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
