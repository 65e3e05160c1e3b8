//! The MMIMG container: an ASCII header line `MMIMG 1 <width> <height>`
//! followed by `width × height` little-endian `f64` values in row-major
//! order.

use std::path::Path;

use fusenet_core::data::Grid;

use crate::error::{read, write, Error, Result};

pub const MAGIC: &str = "MMIMG";
pub const VERSION: u32 = 1;
const MAX_HEADER: usize = 64;

/// A decoding failure at a byte offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeError {
    pub offset: usize,
    pub msg: String,
}

impl DecodeError {
    fn at(offset: usize, msg: impl Into<String>) -> Self {
        DecodeError {
            offset,
            msg: msg.into(),
        }
    }

    pub fn with_path(self, path: &Path) -> Error {
        Error::Parse {
            path: path.to_path_buf(),
            offset: self.offset,
            msg: self.msg,
        }
    }
}

pub fn header(width: usize, height: usize) -> String {
    format!("{MAGIC} {VERSION} {width} {height}\n")
}

pub fn encode(image: &Grid<f64>) -> Vec<u8> {
    let mut out = header(image.width(), image.height()).into_bytes();
    out.reserve(8 * image.data().len());
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_dim(field: &[u8], offset: usize, what: &str) -> Result<usize, DecodeError> {
    let ok = !field.is_empty() && field.iter().all(u8::is_ascii_digit) && (field.len() == 1 || field[0] != b'0');
    let n = std::str::from_utf8(field)
        .ok()
        .filter(|_| ok)
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| DecodeError::at(offset, format!("{what} is not a positive decimal integer")))?;
    if n == 0 {
        return Err(DecodeError::at(offset, format!("{what} must be positive")));
    }
    Ok(n)
}

pub fn decode(bytes: &[u8]) -> Result<Grid<f64>, DecodeError> {
    if !bytes.starts_with(MAGIC.as_bytes()) {
        return Err(DecodeError::at(0, "missing MMIMG magic"));
    }
    let end = bytes
        .iter()
        .take(MAX_HEADER)
        .position(|&b| b == b'\n')
        .ok_or_else(|| DecodeError::at(bytes.len().min(MAX_HEADER), "header line not terminated"))?;
    let line = &bytes[..end];
    let mut fields = Vec::new();
    let mut start = 0;
    for part in line.split(|&b| b == b' ') {
        fields.push((start, part));
        start += part.len() + 1;
    }
    if fields.len() != 4 {
        return Err(DecodeError::at(0, format!("header has {} fields, expected 4", fields.len())));
    }
    if fields[0].1 != MAGIC.as_bytes() {
        return Err(DecodeError::at(0, "missing MMIMG magic"));
    }
    if fields[1].1 != VERSION.to_string().as_bytes() {
        return Err(DecodeError::at(
            fields[1].0,
            format!("unsupported version `{}`", String::from_utf8_lossy(fields[1].1)),
        ));
    }
    let width = parse_dim(fields[2].1, fields[2].0, "width")?;
    let height = parse_dim(fields[3].1, fields[3].0, "height")?;
    let body = end + 1;
    let n = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| DecodeError::at(fields[2].0, "image dimensions overflow"))?;
    let have = bytes.len() - body;
    if have < n {
        return Err(DecodeError::at(
            bytes.len(),
            format!("truncated payload: expected {n} bytes, found {have}"),
        ));
    }
    if have > n {
        return Err(DecodeError::at(body + n, format!("{} trailing bytes after payload", have - n)));
    }
    let data = bytes[body..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(Grid::new(height, width, data).expect("length checked"))
}

/// Byte offset of pixel `index` in an encoded image of the given size.
pub fn payload_offset(width: usize, height: usize, index: usize) -> usize {
    header(width, height).len() + 8 * index
}

pub fn decode_mask(bytes: &[u8]) -> Result<Grid<u8>, DecodeError> {
    let img = decode(bytes)?;
    let (w, h) = (img.width(), img.height());
    for (i, &v) in img.data().iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(DecodeError::at(
                payload_offset(w, h, i),
                format!("mask value {v} is not 0 or 1"),
            ));
        }
    }
    Ok(img.map(|&v| u8::from(v == 1.0)))
}

pub fn read_image(path: &Path) -> Result<Grid<f64>> {
    decode(&read(path)?).map_err(|e| e.with_path(path))
}

pub fn write_image(path: &Path, image: &Grid<f64>) -> Result<()> {
    write(path, &encode(image))
}

pub fn read_mask(path: &Path) -> Result<Grid<u8>> {
    decode_mask(&read(path)?).map_err(|e| e.with_path(path))
}

pub fn write_mask(path: &Path, mask: &Grid<u8>) -> Result<()> {
    write(path, &encode(&mask.map(|&v| f64::from(v))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let g = Grid::filled(135, 145, 0.25);
        let bytes = encode(&g);
        assert!(bytes.starts_with(b"MMIMG 1 145 135\n"));
        assert_eq!(bytes.len() - "MMIMG 1 145 135\n".len(), 8 * 145 * 135);
        assert_eq!(decode(&bytes).unwrap(), g);
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(h in 1usize..6, w in 1usize..6, bits in prop::collection::vec(any::<u64>(), 36)) {
            let data: Vec<f64> = bits[..h * w].iter().map(|&b| f64::from_bits(b)).collect();
            let g = Grid::new(h, w, data).unwrap();
            let back = decode(&encode(&g)).unwrap();
            let same = back.data().iter().zip(g.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
            prop_assert_eq!(back.dims(), (h, w));
        }
    }

    #[test]
    fn errors_carry_offsets() {
        let good = encode(&Grid::filled(2, 3, 1.0));
        assert_eq!(decode(b"PNG").unwrap_err().offset, 0);
        let bad_version = b"MMIMG 2 3 2\n".to_vec();
        assert_eq!(decode(&bad_version).unwrap_err().offset, 6);
        let bad_width = b"MMIMG 1 x 2\n".to_vec();
        assert_eq!(decode(&bad_width).unwrap_err().offset, 8);
        let zero = b"MMIMG 1 3 0\n".to_vec();
        assert_eq!(decode(&zero).unwrap_err().offset, 10);
        let truncated = &good[..good.len() - 5];
        let e = decode(truncated).unwrap_err();
        assert_eq!(e.offset, truncated.len());
        assert!(e.msg.contains("truncated"));
        let mut long = good.clone();
        long.push(0);
        assert_eq!(decode(&long).unwrap_err().offset, good.len());
        assert!(decode(b"MMIMG 1 3 2").is_err());
    }

    #[test]
    fn mask_values_are_checked() {
        let m = Grid::new(1, 3, vec![0u8, 1, 1]).unwrap();
        let bytes = encode(&m.map(|&v| f64::from(v)));
        assert_eq!(decode_mask(&bytes).unwrap(), m);
        let bad = encode(&Grid::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap());
        assert_eq!(decode_mask(&bad).unwrap_err().offset, payload_offset(3, 1, 1));
    }
}
