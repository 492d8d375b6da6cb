//! Reading and writing of little-endian `.npy` arrays (format version 1.0).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8] = b"\x93NUMPY";

#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Encodes `data` as a C-ordered `<f8` array.
pub fn encode(shape: &[usize], data: &[f64]) -> Result<Vec<u8>> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::Contract(format!("npy: shape {shape:?} does not hold {} values", data.len())));
    }
    let dims = match shape {
        [n] => format!("({n},)"),
        _ => format!("({})", shape.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")),
    };
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {dims}, }}");
    let unpadded = MAGIC.len() + 4 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + data.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn header_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}':");
    let start = header
        .find(&pat)
        .ok_or_else(|| Error::Parse(format!("npy header lacks {key}")))?
        + pat.len();
    Ok(header[start..].trim_start())
}

/// Decodes `<f8` or `<f4` C-ordered arrays into `f64`.
pub fn decode(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::Parse("not an npy file".into()));
    }
    let (hlen, hstart) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => {
            (u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize, 12)
        }
        v => return Err(Error::Parse(format!("unsupported npy version {v}"))),
    };
    let header = bytes
        .get(hstart..hstart + hlen)
        .ok_or_else(|| Error::Parse("truncated npy header".into()))?;
    let header = std::str::from_utf8(header).map_err(|e| Error::Parse(e.to_string()))?;
    let descr = header_value(header, "descr")?;
    let width = if descr.starts_with("'<f8'") {
        8
    } else if descr.starts_with("'<f4'") {
        4
    } else {
        return Err(Error::Parse(format!("unsupported dtype in {header:?}")));
    };
    if header_value(header, "fortran_order")?.starts_with("True") {
        return Err(Error::Parse("fortran-ordered arrays are not supported".into()));
    }
    let shape_text = header_value(header, "shape")?;
    let close = shape_text.find(')').ok_or_else(|| Error::Parse("bad npy shape".into()))?;
    let shape = shape_text[1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|e| Error::Parse(format!("npy shape: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let body = &bytes[hstart + hlen..];
    if body.len() != n * width {
        return Err(Error::Parse(format!("npy body holds {} bytes, expected {}", body.len(), n * width)));
    }
    let data = if width == 8 {
        body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
    } else {
        body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
    };
    Ok(NpyArray { shape, data })
}

pub fn write(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    fs::write(path, encode(shape, data)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<NpyArray> {
    decode(&fs::read(path)?)
}
