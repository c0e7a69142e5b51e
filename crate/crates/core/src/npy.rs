//! Minimal NPY v1.0 support for little-endian `float32` C-order arrays.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use crate::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NpyHeader {
    pub shape: Vec<usize>,
    /// Byte offset of the first array element.
    pub data_offset: u64,
}

impl NpyHeader {
    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn read_header<R: Read>(reader: &mut R) -> Result<NpyHeader> {
    let mut preamble = [0u8; 10];
    reader
        .read_exact(&mut preamble)
        .map_err(|e| Error::Npy(format!("truncated preamble: {e}")))?;
    if &preamble[..6] != MAGIC {
        return Err(Error::Npy("bad magic string".into()));
    }
    if (preamble[6], preamble[7]) != (1, 0) {
        return Err(Error::Npy(format!(
            "unsupported format version {}.{} (only 1.0)",
            preamble[6], preamble[7]
        )));
    }
    let header_len = u16::from_le_bytes([preamble[8], preamble[9]]) as usize;
    let mut header = vec![0u8; header_len];
    reader
        .read_exact(&mut header)
        .map_err(|e| Error::Npy(format!("truncated header: {e}")))?;
    let header =
        std::str::from_utf8(&header).map_err(|_| Error::Npy("header is not ASCII".into()))?;

    let descr = dict_value(header, "descr")?;
    let descr = descr.trim_matches(|c| c == '\'' || c == '"');
    if descr != "<f4" {
        return Err(Error::Npy(format!("unsupported descr `{descr}` (only '<f4')")));
    }
    match dict_value(header, "fortran_order")? {
        "False" => {}
        "True" => return Err(Error::Npy("fortran_order arrays are not supported".into())),
        other => return Err(Error::Npy(format!("bad fortran_order `{other}`"))),
    }
    let shape_text = dict_value(header, "shape")?;
    let inner = shape_text
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| Error::Npy(format!("bad shape `{shape_text}`")))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Npy(format!("bad shape entry `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(NpyHeader {
        shape,
        data_offset: (10 + header_len) as u64,
    })
}

/// Extracts the raw text of one value from the header's dict literal.
fn dict_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let quoted = [format!("'{key}'"), format!("\"{key}\"")];
    let start = quoted
        .iter()
        .find_map(|k| header.find(k.as_str()).map(|p| p + k.len()))
        .ok_or_else(|| Error::Npy(format!("header lacks `{key}`")))?;
    let rest = header[start..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| Error::Npy(format!("malformed entry for `{key}`")))?
        .trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|p| p + 1)
    } else {
        rest.find([',', '}'])
    }
    .ok_or_else(|| Error::Npy(format!("unterminated value for `{key}`")))?;
    Ok(rest[..end].trim())
}

pub fn read_f32(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let header = read_header(&mut reader)?;
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let expected = header.num_elements() * 4;
    if bytes.len() != expected {
        return Err(Error::Npy(format!(
            "{}: data has {} bytes, shape needs {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header.shape, data))
}

pub fn encode_f32(shape: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::LengthMismatch {
            expected,
            actual: data.len(),
        });
    }
    let dims = match shape {
        [single] => format!("{single},"),
        _ => shape
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(", "),
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({dims}), }}");
    // Pad so the data starts on a 64-byte boundary; the header ends in '\n'.
    let unpadded = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');

    let mut out = Vec::with_capacity(10 + header.len() + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_f32(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let bytes = encode_f32(shape, data)?;
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_aligned_and_parses_back() {
        let bytes = encode_f32(&[2, 3, 1, 1], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let header = read_header(&mut &bytes[..]).unwrap();
        assert_eq!(header.shape, vec![2, 3, 1, 1]);
        assert_eq!(header.data_offset % 64, 0);
        assert_eq!(bytes.len() as u64, header.data_offset + 24);
    }

    #[test]
    fn accepts_numpy_style_header() {
        // Header exactly as numpy 1.x writes it for np.zeros((3,), '<f4').
        let dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (3,), }";
        let mut header = dict.to_string();
        header.push_str(&" ".repeat(128 - 10 - dict.len() - 1));
        header.push('\n');
        let mut bytes = b"\x93NUMPY\x01\x00".to_vec();
        bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        let parsed = read_header(&mut &bytes[..]).unwrap();
        assert_eq!(parsed.shape, vec![3]);
        assert_eq!(parsed.data_offset, 128);
    }

    #[test]
    fn rejects_unsupported_layouts() {
        let good = encode_f32(&[2], &[1.0, 2.0]).unwrap();
        let swap = |from: &str, to: &str| {
            let mut bytes = good.clone();
            let pos = bytes
                .windows(from.len())
                .position(|w| w == from.as_bytes())
                .unwrap();
            bytes[pos..pos + to.len()].copy_from_slice(to.as_bytes());
            bytes
        };
        let be = swap("<f4", ">f4");
        assert!(matches!(read_header(&mut &be[..]), Err(Error::Npy(m)) if m.contains(">f4")));
        let fortran = swap("False", "True ");
        assert!(read_header(&mut &fortran[..]).is_err());
        let mut v2 = good.clone();
        v2[6] = 2;
        assert!(read_header(&mut &v2[..]).is_err());
        let mut bad_magic = good;
        bad_magic[1] = b'X';
        assert!(read_header(&mut &bad_magic[..]).is_err());
    }
}
