//! Binary 8-bit PGM (`P5`) label maps. A file may hold several images back
//! to back; they become the batch dimension.

use std::io::Write;

use super::LabelBatch;
use crate::error::{Error, Result};

fn err(reason: impl Into<String>) -> Error {
    Error::Format { format: "PGM", reason: reason.into() }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(format!("expected a number at byte {start}")))
    }
}

pub fn read_pgm_stack(bytes: &[u8]) -> Result<LabelBatch> {
    let mut cur = Cursor { bytes, pos: 0 };
    let mut data = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut count = 0;
    loop {
        cur.skip_space_and_comments();
        if cur.pos >= bytes.len() {
            break;
        }
        if bytes.get(cur.pos..cur.pos + 2) != Some(b"P5") {
            return Err(err(format!("expected P5 magic at byte {}", cur.pos)));
        }
        cur.pos += 2;
        let width = cur.number()?;
        let height = cur.number()?;
        let maxval = cur.number()?;
        if maxval == 0 || maxval > 255 {
            return Err(err(format!("maxval {maxval} is not an 8-bit value")));
        }
        // exactly one whitespace byte separates the header from the raster
        cur.pos += 1;
        let n = width * height;
        let raster = bytes.get(cur.pos..cur.pos + n).ok_or_else(|| err("truncated raster"))?;
        cur.pos += n;
        match dims {
            None => dims = Some((height, width)),
            Some(d) if d != (height, width) => {
                return Err(Error::shape(&[d.0, d.1], &[height, width]));
            }
            Some(_) => {}
        }
        data.extend(raster.iter().map(|&v| u32::from(v)));
        count += 1;
    }
    let (height, width) = dims.ok_or_else(|| err("no images"))?;
    LabelBatch::new(count, height, width, data)
}

pub fn write_pgm_stack<W: Write>(mut w: W, labels: &LabelBatch) -> Result<()> {
    for b in 0..labels.batch {
        write!(w, "P5\n{} {}\n255\n", labels.width, labels.height)?;
        let raster = labels
            .image(b)
            .iter()
            .map(|&v| u8::try_from(v).map_err(|_| err(format!("label {v} does not fit in 8 bits"))))
            .collect::<Result<Vec<u8>>>()?;
        w.write_all(&raster)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_header_with_comment() {
        let mut bytes = b"P5\n# a comment\n3 2\n255\n".to_vec();
        bytes.extend([0, 1, 2, 255, 1, 0]);
        let l = read_pgm_stack(&bytes).unwrap();
        assert_eq!(l.shape(), [1, 2, 3]);
        assert_eq!(l.data, vec![0, 1, 2, 255, 1, 0]);
    }

    #[test]
    fn stack_round_trip() {
        let labels = LabelBatch::new(2, 2, 3, vec![0, 1, 2, 3, 4, 5, 5, 4, 3, 2, 1, 0]).unwrap();
        let mut buf = Vec::new();
        write_pgm_stack(&mut buf, &labels).unwrap();
        assert_eq!(read_pgm_stack(&buf).unwrap(), labels);
    }

    #[test]
    fn mismatched_stack_sizes() {
        let mut bytes = b"P5 2 1 255\n".to_vec();
        bytes.extend([0, 0]);
        bytes.extend(b"P5 1 1 255\n");
        bytes.push(0);
        assert!(matches!(read_pgm_stack(&bytes), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn rejects_truncated_and_wrong_magic() {
        assert!(read_pgm_stack(b"P5 2 2 255\n\0").is_err());
        assert!(read_pgm_stack(b"P2 1 1 255\n0").is_err());
    }
}
