//! Minimal NPY v1.0 reader/writer for the two array payloads the corpus
//! uses: 2D `<f4` images and 2D `|u1` label maps. C-order only.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{HgdError, Result};

const MAGIC: &[u8] = b"\x93NUMPY\x01\x00";

fn header_for(descr: &str, shape: (usize, usize)) -> Vec<u8> {
    let dict = format!(
        "{{'descr': '{descr}', 'fortran_order': False, 'shape': ({}, {}), }}",
        shape.0, shape.1
    );
    let mut header = dict.into_bytes();
    // total length (magic + 2-byte len + header) padded to 64, newline-terminated
    let unpadded = MAGIC.len() + 2 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.extend(std::iter::repeat(b' ').take(pad));
    header.push(b'\n');
    header
}

pub fn write_f32(path: &Path, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    assert_eq!(data.len(), rows * cols);
    let mut f = File::create(path)?;
    let header = header_for("<f4", (rows, cols));
    f.write_all(MAGIC)?;
    f.write_all(&(header.len() as u16).to_le_bytes())?;
    f.write_all(&header)?;
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn write_u8(path: &Path, rows: usize, cols: usize, data: &[u8]) -> Result<()> {
    assert_eq!(data.len(), rows * cols);
    let mut f = File::create(path)?;
    let header = header_for("|u1", (rows, cols));
    f.write_all(MAGIC)?;
    f.write_all(&(header.len() as u16).to_le_bytes())?;
    f.write_all(&header)?;
    f.write_all(data)?;
    Ok(())
}

struct Parsed {
    descr: String,
    shape: (usize, usize),
    payload: Vec<u8>,
}

fn read_raw(path: &Path) -> Result<Parsed> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| HgdError::Load(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 10 || &bytes[..8] != MAGIC {
        return Err(HgdError::Load(format!("{}: not an NPY v1.0 file", path.display())));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(&bytes[10..10 + hlen])
        .map_err(|_| HgdError::Load(format!("{}: bad header", path.display())))?;
    let descr = header
        .split("'descr':")
        .nth(1)
        .and_then(|s| s.split('\'').nth(1))
        .ok_or_else(|| HgdError::Load(format!("{}: missing descr", path.display())))?
        .to_string();
    if header.contains("'fortran_order': True") {
        return Err(HgdError::Load(format!("{}: fortran order unsupported", path.display())));
    }
    let shape_str = header
        .split("'shape':")
        .nth(1)
        .and_then(|s| s.split('(').nth(1))
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| HgdError::Load(format!("{}: missing shape", path.display())))?;
    let dims: Vec<usize> = shape_str
        .split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| HgdError::Load(format!("{}: bad shape", path.display())))
        })
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(HgdError::Load(format!(
            "{}: expected a 2D array, got {} dims",
            path.display(),
            dims.len()
        )));
    }
    Ok(Parsed {
        descr,
        shape: (dims[0], dims[1]),
        payload: bytes[10 + hlen..].to_vec(),
    })
}

pub fn read_f32(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let p = read_raw(path)?;
    if p.descr != "<f4" {
        return Err(HgdError::Load(format!(
            "{}: expected <f4 image data, got {}",
            path.display(),
            p.descr
        )));
    }
    let n = p.shape.0 * p.shape.1;
    if p.payload.len() != n * 4 {
        return Err(HgdError::Load(format!("{}: truncated payload", path.display())));
    }
    let data = p
        .payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((p.shape.0, p.shape.1, data))
}

pub fn read_u8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let p = read_raw(path)?;
    if p.descr != "|u1" {
        return Err(HgdError::Load(format!(
            "{}: expected |u1 label data, got {}",
            path.display(),
            p.descr
        )));
    }
    let n = p.shape.0 * p.shape.1;
    if p.payload.len() != n {
        return Err(HgdError::Load(format!("{}: truncated payload", path.display())));
    }
    Ok((p.shape.0, p.shape.1, p.payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.npy");
        let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.5 - 2.0).collect();
        write_f32(&p, 3, 4, &data).unwrap();
        let (r, c, d) = read_f32(&p).unwrap();
        assert_eq!((r, c), (3, 4));
        assert_eq!(d, data);
    }

    #[test]
    fn u8_roundtrip_and_type_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.npy");
        write_u8(&p, 2, 2, &[0, 1, 2, 3]).unwrap();
        let (r, c, d) = read_u8(&p).unwrap();
        assert_eq!((r, c, d), (2, 2, vec![0, 1, 2, 3]));
        assert!(read_f32(&p).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_f32(Path::new("/nonexistent/x.npy")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.npy"));
    }
}
