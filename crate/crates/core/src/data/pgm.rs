//! Binary greymap (`P5`) reading and writing, 8-bit only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

impl Pgm {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::dim("pgm", format!("{width}x{height} image needs {} pixels, got {}", width * height, pixels.len())));
        }
        Ok(Self {
            width,
            height,
            maxval: 255,
            pixels,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if bytes.get(..2) != Some(b"P5") {
            return Err(cur.error("expected magic 'P5'"));
        }
        cur.pos = 2;
        let width = cur.number("width")?;
        let height = cur.number("height")?;
        let maxval = cur.number("maxval")?;
        if width == 0 || height == 0 {
            return Err(cur.error("image dimensions must be positive"));
        }
        if maxval == 0 || maxval > 255 {
            return Err(cur.error(&format!("unsupported maxval {maxval} (need 1..=255)")));
        }
        match bytes.get(cur.pos) {
            Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(cur.error("expected one whitespace byte before the raster")),
        }
        let need = width * height;
        let raster = &bytes[cur.pos..];
        if raster.len() < need {
            return Err(Error::Parse {
                offset: bytes.len(),
                message: format!("raster truncated: {} of {need} bytes", raster.len()),
            });
        }
        if let Some(i) = raster[..need].iter().position(|&p| p as usize > maxval) {
            return Err(Error::Parse {
                offset: cur.pos + i,
                message: format!("pixel value {} exceeds maxval {maxval}", raster[i]),
            });
        }
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            pixels: raster[..need].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn error(&self, message: &str) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    /// Skips whitespace and `#` comments, then reads a decimal field.
    fn number(&mut self, what: &str) -> Result<usize> {
        loop {
            match self.bytes.get(self.pos) {
                Some(c) if c.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while !matches!(self.bytes.get(self.pos), None | Some(b'\n')) {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = self.pos;
        while matches!(self.bytes.get(self.pos), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return Err(self.error(&format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Parse {
                offset: start,
                message: format!("{what} out of range"),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_comment() {
        let p = Pgm::new(3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
        assert_eq!(Pgm::decode(&p.encode()).unwrap(), p);
        let mut with_comment = b"P5\n# made by hand\n3 2\n255\n".to_vec();
        with_comment.extend_from_slice(&p.pixels);
        assert_eq!(Pgm::decode(&with_comment).unwrap(), p);
    }

    #[test]
    fn header_errors_carry_offsets() {
        let e = Pgm::decode(b"P6\n1 1\n255\n\0").unwrap_err();
        assert!(matches!(e, Error::Parse { offset: 0, .. }));
        let e = Pgm::decode(b"P5\n4 x\n255\n").unwrap_err();
        assert!(matches!(e, Error::Parse { offset: 5, .. }), "{e}");
        let e = Pgm::decode(b"P5\n2 2\n255\n\0\0").unwrap_err();
        assert!(matches!(e, Error::Parse { offset: 13, .. }), "{e}");
    }
}
