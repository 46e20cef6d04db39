//! Little-endian binary readers/writers shared by all file formats.
//!
//! Every artifact starts with a four-byte magic and a u32 format version;
//! readers refuse files whose magic or version does not match.

use std::io::{self, Read, Write};

#[derive(Debug, thiserror::Error)]
pub enum FileError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    BadVersion { expected: u32, found: u32 },
    #[error("corrupt file: {0}")]
    Corrupt(String),
}

pub fn write_magic<W: Write>(w: &mut W, magic: &[u8; 4], version: u32) -> Result<(), FileError> {
    w.write_all(magic)?;
    write_u32(w, version)
}

pub fn check_magic<R: Read>(r: &mut R, magic: &[u8; 4], version: u32) -> Result<(), FileError> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found)?;
    if &found != magic {
        return Err(FileError::BadMagic {
            expected: *magic,
            found,
        });
    }
    let v = read_u32(r)?;
    if v != version {
        return Err(FileError::BadVersion {
            expected: version,
            found: v,
        });
    }
    Ok(())
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<(), FileError> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<(), FileError> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f32<W: Write>(w: &mut W, v: f32) -> Result<(), FileError> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<(), FileError> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32, FileError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64, FileError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_f32<R: Read>(r: &mut R) -> Result<f32, FileError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

pub fn read_f64<R: Read>(r: &mut R) -> Result<f64, FileError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn write_u32_slice<W: Write>(w: &mut W, vs: &[u32]) -> Result<(), FileError> {
    for &v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_u32_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<u32>, FileError> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(read_u32(r)?);
    }
    Ok(out)
}

pub fn write_f32_slice<W: Write>(w: &mut W, vs: &[f32]) -> Result<(), FileError> {
    for &v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f32_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>, FileError> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(read_f32(r)?);
    }
    Ok(out)
}

pub fn write_string<W: Write>(w: &mut W, s: &str) -> Result<(), FileError> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_string<R: Read>(r: &mut R) -> Result<String, FileError> {
    let n = read_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(FileError::Corrupt(format!("string length {n} out of range")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| FileError::Corrupt(format!("non-utf8 string: {e}")))
}
