//! Binary (P5) portable graymaps with maxval 255.

use std::path::Path;

use fusenet_core::data::Grid;
use fusenet_core::eval::{Heatmap, Labelmap};

use crate::error::{read, write, Error, Result};

pub fn header(width: usize, height: usize) -> String {
    format!("P5\n{width} {height}\n255\n")
}

pub fn encode(pixels: &Grid<u8>) -> Vec<u8> {
    let mut out = header(pixels.width(), pixels.height()).into_bytes();
    out.extend_from_slice(pixels.data());
    out
}

/// Labels as 0 (negative) and 255 (positive).
pub fn encode_labelmap(map: &Labelmap) -> Vec<u8> {
    encode(&map.values.map(|&v| if v == 1 { 255 } else { 0 }))
}

/// Probabilities scaled by 255 and rounded.
pub fn encode_heatmap(map: &Heatmap) -> Vec<u8> {
    encode(&map.values.map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8))
}

pub fn write_labelmap(path: &Path, map: &Labelmap) -> Result<()> {
    write(path, &encode_labelmap(map))
}

pub fn write_heatmap(path: &Path, map: &Heatmap) -> Result<()> {
    write(path, &encode_heatmap(map))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, (usize, String)> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or((start, format!("expected {what}")))
    }
}

/// Reads an 8-bit P5 graymap, returning the raw pixel values.
pub fn decode(bytes: &[u8]) -> std::result::Result<Grid<u8>, (usize, String)> {
    decode_at(bytes).map(|(g, _)| g)
}

/// [`decode`] plus the byte offset of the first pixel.
fn decode_at(bytes: &[u8]) -> std::result::Result<(Grid<u8>, usize), (usize, String)> {
    if !bytes.starts_with(b"P5") {
        return Err((0, "missing P5 magic".into()));
    }
    let mut c = Cursor { bytes, pos: 2 };
    let width = c.number("width")?;
    let height = c.number("height")?;
    let at = c.pos;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return Err((at, format!("maxval {maxval} unsupported, expected 255")));
    }
    if !bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err((c.pos, "expected whitespace after maxval".into()));
    }
    let body = c.pos + 1;
    let n = width * height;
    if bytes.len() != body + n {
        return Err((bytes.len().min(body + n), format!("expected {n} pixel bytes, found {}", bytes.len() - body)));
    }
    let grid = Grid::new(height, width, bytes[body..].to_vec()).map_err(|e| (0, e.to_string()))?;
    Ok((grid, body))
}

fn parse_error(path: &Path, (offset, msg): (usize, String)) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg,
    }
}

pub fn read_graymap(path: &Path) -> Result<Grid<u8>> {
    decode(&read(path)?).map_err(|e| parse_error(path, e))
}

/// Reads a labelmap written by [`write_labelmap`].
pub fn read_labelmap(path: &Path, subject_id: &str) -> Result<Labelmap> {
    let (pixels, body) = decode_at(&read(path)?).map_err(|e| parse_error(path, e))?;
    if let Some(i) = pixels.data().iter().position(|&v| v != 0 && v != 255) {
        let msg = format!("label pixel {} is not 0 or 255", pixels.data()[i]);
        return Err(parse_error(path, (body + i, msg)));
    }
    Ok(Labelmap {
        subject_id: subject_id.to_string(),
        values: pixels.map(|&v| u8::from(v == 255)),
    })
}
