//! NPY version 1.0 reader and writer.
//!
//! Supports the subset used by the scene layout: little-endian float32 and
//! uint8, C-contiguous, rank 0 through 3. Round-trips are bitwise exact.
//! Fortran-ordered files and v2/v3 headers are rejected.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Element buffer of a loaded or to-be-saved array, kept in the on-disk dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum NpyData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl NpyData {
    pub fn len(&self) -> usize {
        match self {
            NpyData::F32(v) => v.len(),
            NpyData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense C-order array as stored in an npy file.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

impl NpyArray {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        NpyArray { shape, data: NpyData::F32(data) }
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        NpyArray { shape, data: NpyData::U8(data) }
    }
}

/// Loads an npy v1.0 file. The dtype is preserved bit-exactly.
pub fn load_npy(path: &Path) -> Result<NpyArray> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    read_npy(&mut reader, path)
}

fn read_npy<R: Read>(reader: &mut R, path: &Path) -> Result<NpyArray> {
    let fmt = |reason: &str| Error::NpyFormat { path: path.to_path_buf(), reason: reason.to_string() };

    let mut magic = [0u8; 6];
    reader.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(fmt("bad magic"));
    }
    let mut version = [0u8; 2];
    reader.read_exact(&mut version).map_err(|e| Error::io(path, e))?;
    if version != [1, 0] {
        return Err(fmt(&format!("unsupported version {}.{}", version[0], version[1])));
    }
    let mut len_bytes = [0u8; 2];
    reader.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
    let header_len = u16::from_le_bytes(len_bytes) as usize;

    let mut header = vec![0u8; header_len];
    reader.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    let header = std::str::from_utf8(&header).map_err(|_| fmt("header is not ASCII"))?;

    let descr = dict_str_value(header, "descr").ok_or_else(|| fmt("missing 'descr'"))?;
    let fortran = dict_bool_value(header, "fortran_order").ok_or_else(|| fmt("missing 'fortran_order'"))?;
    let shape = dict_shape_value(header, "shape").ok_or_else(|| fmt("missing or malformed 'shape'"))?;

    if fortran {
        return Err(Error::NpyFortranOrder { path: path.to_path_buf() });
    }
    if shape.len() > 3 {
        return Err(fmt(&format!("rank {} exceeds supported rank 3", shape.len())));
    }
    let count: usize = shape.iter().product();

    let data = match descr.as_str() {
        "<f4" => {
            let mut raw = vec![0u8; count * 4];
            reader.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            NpyData::F32(values)
        }
        "|u1" | "<u1" => {
            let mut raw = vec![0u8; count];
            reader.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
            NpyData::U8(raw)
        }
        other => {
            return Err(Error::NpyUnsupportedDtype { path: path.to_path_buf(), descr: other.to_string() })
        }
    };

    // Trailing garbage means the shape in the header lied.
    let mut probe = [0u8; 1];
    match reader.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(fmt("file longer than header shape implies")),
        Err(e) => return Err(Error::io(path, e)),
    }

    Ok(NpyArray { shape, data })
}

/// Saves an array as npy v1.0, little-endian, C-order.
pub fn save_npy(path: &Path, array: &NpyArray) -> Result<()> {
    let count: usize = array.shape.iter().product();
    if count != array.data.len() {
        return Err(Error::ShapeMismatch(format!(
            "npy shape {:?} implies {} elements, buffer holds {}",
            array.shape,
            count,
            array.data.len()
        )));
    }
    if let NpyData::F32(values) = &array.data {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("array written to {}", path.display())));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    write_npy(&mut writer, array).map_err(|e| Error::io(path, e))?;
    writer.flush().map_err(|e| Error::io(path, e))
}

fn write_npy<W: Write>(writer: &mut W, array: &NpyArray) -> std::io::Result<()> {
    let descr = match array.data {
        NpyData::F32(_) => "<f4",
        NpyData::U8(_) => "|u1",
    };
    let shape = match array.shape.len() {
        0 => "()".to_string(),
        1 => format!("({},)", array.shape[0]),
        _ => format!("({})", array.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
    };
    let mut dict = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape}, }}");
    // Total header (magic + version + len + dict + '\n') padded to a multiple of 64.
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');

    writer.write_all(MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&(dict.len() as u16).to_le_bytes())?;
    writer.write_all(dict.as_bytes())?;
    match &array.data {
        NpyData::F32(values) => {
            for v in values {
                writer.write_all(&v.to_le_bytes())?;
            }
        }
        NpyData::U8(values) => writer.write_all(values)?,
    }
    Ok(())
}

fn dict_str_value(header: &str, key: &str) -> Option<String> {
    let rest = seek_key(header, key)?;
    let rest = rest.trim_start();
    let quote = rest.chars().next()?;
    if quote != '\'' && quote != '"' {
        return None;
    }
    let rest = &rest[1..];
    let end = rest.find(quote)?;
    Some(rest[..end].to_string())
}

fn dict_bool_value(header: &str, key: &str) -> Option<bool> {
    let rest = seek_key(header, key)?;
    let rest = rest.trim_start();
    if rest.starts_with("True") {
        Some(true)
    } else if rest.starts_with("False") {
        Some(false)
    } else {
        None
    }
}

fn dict_shape_value(header: &str, key: &str) -> Option<Vec<usize>> {
    let rest = seek_key(header, key)?;
    let rest = rest.trim_start();
    if !rest.starts_with('(') {
        return None;
    }
    let end = rest.find(')')?;
    let inner = &rest[1..end];
    let mut dims = Vec::new();
    for part in inner.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        dims.push(part.parse().ok()?);
    }
    Some(dims)
}

/// Positions after `'key':` in the header dict.
fn seek_key<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let needle = format!("'{key}'");
    let at = header.find(&needle)?;
    let rest = &header[at + needle.len()..];
    let rest = rest.trim_start();
    rest.strip_prefix(':')
}
