//! Dense float32 tensors and NPY (format 1.0/2.0) reading and writing.
//!
//! Only rank-1 and rank-2 little-endian `<f4` / `<f8` arrays in C order are
//! accepted. `<f8` payloads are narrowed to `f32` with round-to-nearest-even.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

/// Row-major dense tensor of rank 1 or 2 with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorF32 {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl TensorF32 {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::shape(format!("rank {} not in {{1, 2}}", shape.len())));
        }
        if shape.contains(&0) {
            return Err(Error::shape(format!("empty dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteData(i));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Element `(r, c)` of a matrix. Panics when out of bounds.
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.shape[1] + c]
    }

    /// Copy of column `c` of a matrix.
    pub fn column(&self, c: usize) -> Vec<f32> {
        let cols = self.shape[1];
        self.data.iter().skip(c).step_by(cols).copied().collect()
    }
}

pub fn load_npy(path: impl AsRef<Path>) -> Result<TensorF32> {
    let mut reader = BufReader::new(File::open(path)?);
    read_npy(&mut reader)
}

pub fn save_npy(tensor: &TensorF32, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_npy(&mut writer, tensor)?;
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Dtype {
    F4,
    F8,
}

struct Header {
    dtype: Dtype,
    fortran_order: bool,
    shape: Vec<usize>,
}

pub fn read_npy<R: Read>(reader: &mut R) -> Result<TensorF32> {
    let mut magic = [0u8; 8];
    read_exact_or_format(reader, &mut magic, "file shorter than npy preamble")?;
    if &magic[..6] != MAGIC {
        return Err(Error::Format("bad npy magic".into()));
    }
    let header_len = match magic[6] {
        1 => {
            let mut b = [0u8; 2];
            read_exact_or_format(reader, &mut b, "truncated header length")?;
            u16::from_le_bytes(b) as usize
        }
        2 => {
            let mut b = [0u8; 4];
            read_exact_or_format(reader, &mut b, "truncated header length")?;
            u32::from_le_bytes(b) as usize
        }
        v => return Err(Error::Format(format!("unsupported npy version {v}.{}", magic[7]))),
    };
    let mut raw = vec![0u8; header_len];
    read_exact_or_format(reader, &mut raw, "truncated header")?;
    let text = std::str::from_utf8(&raw).map_err(|_| Error::Format("header is not ascii".into()))?;
    let header = parse_header(text)?;
    if header.fortran_order {
        return Err(Error::UnsupportedLayout);
    }
    if header.shape.is_empty() || header.shape.len() > 2 {
        return Err(Error::Format(format!(
            "rank {} arrays are not supported",
            header.shape.len()
        )));
    }
    let count: usize = header.shape.iter().product();
    let data = match header.dtype {
        Dtype::F4 => {
            let mut bytes = vec![0u8; count * 4];
            read_exact_or_format(reader, &mut bytes, "truncated payload")?;
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect::<Vec<_>>()
        }
        Dtype::F8 => {
            let mut bytes = vec![0u8; count * 8];
            read_exact_or_format(reader, &mut bytes, "truncated payload")?;
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
                .collect::<Vec<_>>()
        }
    };
    if header.shape.contains(&0) {
        return Err(Error::Format("empty dimension".into()));
    }
    TensorF32::new(header.shape, data)
}

pub fn write_npy<W: Write>(writer: &mut W, tensor: &TensorF32) -> Result<()> {
    let shape = match tensor.shape() {
        [n] => format!("({n},)"),
        dims => format!(
            "({})",
            dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut dict = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {shape}, }}");
    // preamble (10 bytes) + dict + newline must be a multiple of 64
    let unpadded = 10 + dict.len() + 1;
    dict.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    dict.push('\n');
    writer.write_all(MAGIC)?;
    writer.write_all(&[1, 0])?;
    writer.write_all(&(dict.len() as u16).to_le_bytes())?;
    writer.write_all(dict.as_bytes())?;
    for x in tensor.data() {
        writer.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or_format<R: Read>(reader: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    reader.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Format(what.into()),
        _ => Error::Io(e),
    })
}

fn parse_header(text: &str) -> Result<Header> {
    let text = text.trim();
    let inner = text
        .strip_prefix('{')
        .and_then(|t| t.trim_end_matches(',').trim_end().strip_suffix('}'))
        .ok_or_else(|| Error::Format(format!("header is not a dict: {text}")))?;

    let descr = dict_value(inner, "descr")?;
    let dtype = match descr.trim_matches(|c| c == '\'' || c == '"') {
        "<f4" => Dtype::F4,
        "<f8" => Dtype::F8,
        other => return Err(Error::Format(format!("unsupported dtype {other}"))),
    };
    let fortran_order = match dict_value(inner, "fortran_order")? {
        "False" => false,
        "True" => true,
        other => return Err(Error::Format(format!("bad fortran_order {other}"))),
    };
    let shape_text = dict_value(inner, "shape")?;
    let shape_inner = shape_text
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| Error::Format(format!("bad shape {shape_text}")))?;
    let shape = shape_inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad shape entry {s}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Header {
        dtype,
        fortran_order,
        shape,
    })
}

/// Raw text of the value for `key` in a python dict literal body.
fn dict_value<'a>(inner: &'a str, key: &str) -> Result<&'a str> {
    let missing = || Error::Format(format!("header missing '{key}'"));
    let start = ["'", "\""]
        .iter()
        .find_map(|q| inner.find(&format!("{q}{key}{q}")).map(|i| i + key.len() + 2))
        .ok_or_else(missing)?;
    let rest = inner[start..].trim_start();
    let rest = rest.strip_prefix(':').ok_or_else(missing)?.trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|i| i + 1)
    } else {
        Some(rest.find(',').unwrap_or(rest.len()))
    }
    .ok_or_else(|| Error::Format(format!("unterminated value for '{key}'")))?;
    Ok(rest[..end].trim())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn npy_bytes(descr: &str, fortran: bool, shape: &str, payload: &[u8]) -> Vec<u8> {
        let fo = if fortran { "True" } else { "False" };
        let mut dict = format!("{{'descr': '{descr}', 'fortran_order': {fo}, 'shape': {shape}, }}");
        let unpadded = 10 + dict.len() + 1;
        dict.push_str(&" ".repeat((64 - unpadded % 64) % 64));
        dict.push('\n');
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&[1, 0]);
        out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
        out.extend_from_slice(dict.as_bytes());
        out.extend_from_slice(payload);
        out
    }

    fn f32_payload(xs: &[f32]) -> Vec<u8> {
        xs.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    #[test]
    fn reads_hand_written_2x2() {
        let bytes = npy_bytes("<f4", false, "(2, 2)", &f32_payload(&[1.0, 2.0, 3.0, 4.0]));
        let t = read_npy(&mut bytes.as_slice()).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn rejects_rank_0_and_rank_3() {
        let b0 = npy_bytes("<f4", false, "()", &f32_payload(&[1.0]));
        assert!(matches!(read_npy(&mut b0.as_slice()), Err(Error::Format(_))));
        let b3 = npy_bytes("<f4", false, "(1, 1, 2)", &f32_payload(&[1.0, 2.0]));
        assert!(matches!(read_npy(&mut b3.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn narrows_f64_with_nearest_even() {
        let payload: Vec<u8> = 0.1f64.to_le_bytes().to_vec();
        let bytes = npy_bytes("<f8", false, "(1,)", &payload);
        let t = read_npy(&mut bytes.as_slice()).unwrap();
        // nearest binary32 to 0.1 is 13421773 * 2^-27
        assert_eq!(t.data()[0].to_bits(), 0x3dcc_cccd);
        assert_eq!(t.data()[0] as f64, 13_421_773.0 * 2f64.powi(-27));
    }

    #[test]
    fn rejects_fortran_order() {
        let bytes = npy_bytes("<f4", true, "(1, 2)", &f32_payload(&[1.0, 2.0]));
        assert!(matches!(read_npy(&mut bytes.as_slice()), Err(Error::UnsupportedLayout)));
    }

    #[test]
    fn rejects_non_finite_with_index() {
        let bytes = npy_bytes("<f4", false, "(3,)", &f32_payload(&[1.0, f32::NAN, 2.0]));
        assert!(matches!(read_npy(&mut bytes.as_slice()), Err(Error::NonFiniteData(1))));
        let bytes = npy_bytes("<f4", false, "(2,)", &f32_payload(&[1.0, f32::INFINITY]));
        assert!(matches!(read_npy(&mut bytes.as_slice()), Err(Error::NonFiniteData(1))));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = npy_bytes("<f4", false, "(2,)", &f32_payload(&[1.0, 2.0]));
        let truncated = bytes[..bytes.len() - 1].to_vec();
        assert!(matches!(read_npy(&mut truncated.as_slice()), Err(Error::Format(_))));
        bytes[1] = b'X';
        assert!(matches!(read_npy(&mut bytes.as_slice()), Err(Error::Format(_))));
        assert!(matches!(read_npy(&mut &b"\x93NU"[..]), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_unsupported_dtype() {
        let bytes = npy_bytes("<i4", false, "(1,)", &[0, 0, 0, 0]);
        assert!(matches!(read_npy(&mut bytes.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn accepts_version_2_header() {
        let mut dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (2,), }".to_string();
        let unpadded = 12 + dict.len() + 1;
        dict.push_str(&" ".repeat((64 - unpadded % 64) % 64));
        dict.push('\n');
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&[2, 0]);
        bytes.extend_from_slice(&(dict.len() as u32).to_le_bytes());
        bytes.extend_from_slice(dict.as_bytes());
        bytes.extend_from_slice(&f32_payload(&[5.0, 6.0]));
        let t = read_npy(&mut bytes.as_slice()).unwrap();
        assert_eq!(t.data(), &[5.0, 6.0]);
    }

    #[test]
    fn vector_header_uses_trailing_comma() {
        let t = TensorF32::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let mut out = Vec::new();
        write_npy(&mut out, &t).unwrap();
        let header = std::str::from_utf8(&out[10..out.len() - 12]).unwrap();
        assert!(header.contains("'shape': (3,)"));
        assert_eq!(out.len() % 64, 12);
        assert_eq!((out.len() - 12) % 64, 0);
    }

    #[test]
    fn construction_rejects_empty_dimension() {
        assert!(matches!(TensorF32::matrix(0, 3, vec![]), Err(Error::Shape(_))));
        assert!(matches!(TensorF32::new(vec![], vec![]), Err(Error::Shape(_))));
        assert!(matches!(TensorF32::matrix(2, 2, vec![1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn column_extraction() {
        let t = TensorF32::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.column(1), vec![2.0, 5.0]);
        assert_eq!(t.at(1, 2), 6.0);
    }
}
