//! 8-bit RGB images and the binary PPM (P6) format.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major `height x width x 3`.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::ParseAt {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skip whitespace and `#` comments, then read one decimal token.
    fn number(&mut self, what: &str) -> Result<usize> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(self.err(format!("truncated header before {what}"))),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::ParseAt {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

/// Parse a binary P6 PPM with maxval 255. Header comments are accepted.
pub fn parse_ppm(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::ParseAt {
            offset: 0,
            msg: "bad magic, expected P6".into(),
        });
    }
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(r.err(format!("unsupported maxval {maxval}")));
    }
    match bytes.get(r.pos) {
        Some(b) if b.is_ascii_whitespace() => r.pos += 1,
        _ => return Err(r.err("expected single whitespace after maxval")),
    }
    let n = width * height * 3;
    let body = &bytes[r.pos..];
    if body.len() < n {
        return Err(Error::ParseAt {
            offset: bytes.len(),
            msg: format!("truncated pixel data: need {n} bytes, have {}", body.len()),
        });
    }
    Ok(RgbImage {
        width,
        height,
        data: body[..n].to_vec(),
    })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::file(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    parse_ppm(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_white_pixel() {
        let img = parse_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!((img.width, img.height), (1, 1));
        assert_eq!(img.pixel(0, 0), [255, 255, 255]);
    }

    #[test]
    fn comments_in_header() {
        let img = parse_ppm(b"P6 # made by hand\n# another\n2 1 # dims\n255\n\x01\x02\x03\x04\x05\x06").unwrap();
        assert_eq!(img.pixel(1, 0), [4, 5, 6]);
    }

    #[test]
    fn errors_carry_offsets() {
        match parse_ppm(b"P3\n1 1\n255\n") {
            Err(Error::ParseAt { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_ppm(b"P6\n2 2\n255\n\x00\x00") {
            Err(Error::ParseAt { offset, .. }) => assert_eq!(offset, 13),
            other => panic!("{other:?}"),
        }
        assert!(parse_ppm(b"P6\n2 2\n65535\n").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::rng::seeded(seed);
            let img = RgbImage { width: w, height: h, data: (0..w * h * 3).map(|_| rng.random()).collect() };
            prop_assert_eq!(parse_ppm(&encode_ppm(&img)).unwrap(), img);
        }
    }
}
