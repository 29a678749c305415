//! Binary 8-bit PPM (P6) and PGM (P5) codecs.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
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

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let (width, height, data) = decode(bytes, b"P6", 3)?;
        Ok(RgbImage { width, height, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes).map_err(|message| Error::Decode {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.encode())?)
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let (width, height, data) = decode(bytes, b"P5", 1)?;
        Ok(GrayImage { width, height, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes).map_err(|message| Error::Decode {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.encode())?)
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("missing or invalid {what}"))
    }
}

fn decode(bytes: &[u8], magic: &[u8; 2], channels: usize) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format!("not a binary {} file", String::from_utf8_lossy(magic)));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} is not 8-bit"));
    }
    if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
        return Err("missing separator after header".into());
    }
    let start = h.pos + 1;
    let len = width * height * channels;
    let raster = bytes
        .get(start..start + len)
        .ok_or_else(|| format!("raster truncated: expected {len} bytes, found {}", bytes.len() - start))?;
    let data = if maxval == 255 {
        raster.to_vec()
    } else {
        raster
            .iter()
            .map(|&v| ((v.min(maxval as u8) as u32 * 255 + maxval as u32 / 2) / maxval as u32) as u8)
            .collect()
    };
    Ok((width, height, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let mut bytes = b"P5 # a comment\n 2\t1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 200]);
        let g = GrayImage::decode(&bytes).unwrap();
        assert_eq!((g.width, g.height, g.data.clone()), (2, 1, vec![7, 200]));
    }

    #[test]
    fn rescales_small_maxval() {
        let mut bytes = b"P5\n2 1\n1\n".to_vec();
        bytes.extend_from_slice(&[0, 1]);
        assert_eq!(GrayImage::decode(&bytes).unwrap().data, vec![0, 255]);
    }

    #[test]
    fn rejects_malformed_files() {
        assert!(GrayImage::decode(b"P6\n1 1\n255\n\x00\x00\x00").is_err());
        assert!(RgbImage::decode(b"P6\n2 2\n255\n\x00").is_err());
        assert!(RgbImage::decode(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
        assert!(RgbImage::decode(b"P6\nx 1\n255\n").is_err());
        assert!(RgbImage::decode(b"").is_err());
    }

    proptest! {
        #[test]
        fn rgb_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let mut img = RgbImage::new(w, h);
            for (i, v) in img.data.iter_mut().enumerate() {
                *v = (seed.wrapping_mul(i as u64 + 1) >> 13) as u8;
            }
            prop_assert_eq!(RgbImage::decode(&img.encode()).unwrap(), img);
        }

        #[test]
        fn gray_round_trip(data in proptest::collection::vec(any::<u8>(), 1..64)) {
            let img = GrayImage { width: data.len(), height: 1, data };
            prop_assert_eq!(GrayImage::decode(&img.encode()).unwrap(), img);
        }
    }
}
