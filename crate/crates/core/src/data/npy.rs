//! Minimal `.npy` codec: little-endian `u1`, `i8`, `f8` (plus `i4`/`f4` on
//! read), C order only, format versions 1.0 and 2.0.

use crate::error::{Error, Result};

const MAGIC: &[u8] = b"\x93NUMPY";

/// A decoded array. Element order is C (row-major).
#[derive(Clone, Debug, PartialEq)]
pub enum NpyArray {
    U8 { shape: Vec<usize>, data: Vec<u8> },
    I64 { shape: Vec<usize>, data: Vec<i64> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
}

impl NpyArray {
    pub fn shape(&self) -> &[usize] {
        match self {
            Self::U8 { shape, .. } | Self::I64 { shape, .. } | Self::F64 { shape, .. } => shape,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::U8 { data, .. } => data.len(),
            Self::I64 { data, .. } => data.len(),
            Self::F64 { data, .. } => data.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn descr(&self) -> &'static str {
        match self {
            Self::U8 { .. } => "|u1",
            Self::I64 { .. } => "<i8",
            Self::F64 { .. } => "<f8",
        }
    }

    /// Values as signed integers; floats must be integral.
    pub fn to_i64(&self, entry: &str) -> Result<Vec<i64>> {
        match self {
            Self::U8 { data, .. } => Ok(data.iter().map(|&v| v as i64).collect()),
            Self::I64 { data, .. } => Ok(data.clone()),
            Self::F64 { data, .. } => data
                .iter()
                .map(|&v| {
                    if v.fract() == 0.0 && v.is_finite() {
                        Ok(v as i64)
                    } else {
                        Err(Error::format(entry, format!("non-integral value {v}")))
                    }
                })
                .collect(),
        }
    }
}

/// Serializes with a header padded so the data starts on a 64-byte boundary.
pub fn encode(array: &NpyArray) -> Vec<u8> {
    let shape = match array.shape() {
        [] => "()".to_string(),
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {shape}, }}",
        array.descr()
    );
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + array.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match array {
        NpyArray::U8 { data, .. } => out.extend_from_slice(data),
        NpyArray::I64 { data, .. } => data
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        NpyArray::F64 { data, .. } => data
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

/// Parses an `.npy` payload; `entry` names the source in error messages.
pub fn decode(bytes: &[u8], entry: &str) -> Result<NpyArray> {
    let err = |detail: String| Error::format(entry, detail);
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(err("missing NPY magic".into()));
    }
    let (header_len, start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (
            u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
            12,
        ),
        v => return Err(err(format!("unsupported NPY version {v}"))),
    };
    let body_start = start + header_len;
    let header = bytes
        .get(start..body_start)
        .and_then(|h| std::str::from_utf8(h).ok())
        .ok_or_else(|| err("truncated or non-UTF-8 header".into()))?;

    let descr = dict_value(header, "descr").ok_or_else(|| err("header has no descr".into()))?;
    let descr = descr.trim_matches(|c| c == '\'' || c == '"');
    let fortran = dict_value(header, "fortran_order")
        .ok_or_else(|| err("header has no fortran_order".into()))?;
    if fortran != "False" {
        return Err(err("fortran_order arrays are not supported".into()));
    }
    let shape =
        parse_shape(dict_value(header, "shape").ok_or_else(|| err("header has no shape".into()))?)
            .ok_or_else(|| err("malformed shape".into()))?;
    let count: usize = shape.iter().product();
    let body = &bytes[body_start..];

    let take = |width: usize| -> Result<std::slice::ChunksExact<'_, u8>> {
        if body.len() != count * width {
            return Err(err(format!(
                "expected {} data bytes, found {}",
                count * width,
                body.len()
            )));
        }
        Ok(body.chunks_exact(width))
    };
    Ok(match descr {
        "|u1" | "<u1" | "u1" | "|b1" => NpyArray::U8 {
            shape,
            data: take(1)?.map(|c| c[0]).collect(),
        },
        "<i8" => NpyArray::I64 {
            shape,
            data: take(8)?
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        },
        "<i4" => NpyArray::I64 {
            shape,
            data: take(4)?
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as i64)
                .collect(),
        },
        "<f8" => NpyArray::F64 {
            shape,
            data: take(8)?
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        },
        "<f4" => NpyArray::F64 {
            shape,
            data: take(4)?
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        },
        other => return Err(err(format!("unsupported dtype `{other}`"))),
    })
}

/// Raw text of `key`'s value in a Python dict literal.
fn dict_value<'h>(header: &'h str, key: &str) -> Option<&'h str> {
    let quoted = [format!("'{key}'"), format!("\"{key}\"")];
    let pos = quoted
        .iter()
        .find_map(|q| header.find(q.as_str()).map(|p| p + q.len()))?;
    let rest = header[pos..].trim_start().strip_prefix(':')?.trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')')? + 1
    } else {
        rest.find([',', '}']).unwrap_or(rest.len())
    };
    Some(rest[..end].trim())
}

fn parse_shape(text: &str) -> Option<Vec<usize>> {
    let inner = text.strip_prefix('(')?.strip_suffix(')')?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.trim_end_matches('L').parse().ok())
        .collect()
}
