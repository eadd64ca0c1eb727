//! Grayscale images (binary PGM) and dense multi-channel maps (SLFM).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> u8 {
        self.data[v * self.width + u]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PGM header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" {
            return Err(format!("unsupported PGM magic {:?}", fields[0]));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PGM header field {s:?}"));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(format!("unsupported PGM maxval {maxval}"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let n = width * height;
        if bytes.len() < pos + n {
            return Err(format!(
                "truncated PGM raster: {} of {} bytes",
                bytes.len().saturating_sub(pos),
                n
            ));
        }
        Ok(Self {
            width,
            height,
            data: bytes[pos..pos + n].to_vec(),
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::corrupt(path, e.to_string()))?;
        Self::decode_pgm(&bytes).map_err(|r| Error::corrupt(path, r))
    }
}

const SLFM_MAGIC: &[u8; 4] = b"SLFM";
const SLFM_VERSION: u16 = 1;

/// Dense `H×W×C` map as stored in SLFM files (row-major, channel-last).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl DenseGrid {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + self.data.len() * 4);
        out.extend_from_slice(SLFM_MAGIC);
        out.extend_from_slice(&SLFM_VERSION.to_le_bytes());
        for dim in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 18 {
            return Err("truncated SLFM header".into());
        }
        if &bytes[..4] != SLFM_MAGIC {
            return Err("bad SLFM magic".into());
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != SLFM_VERSION {
            return Err(format!("unsupported SLFM version {version}"));
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (height, width, channels) = (word(6), word(10), word(14));
        let n = height
            .checked_mul(width)
            .and_then(|x| x.checked_mul(channels))
            .ok_or("SLFM dimensions overflow")?;
        let body = &bytes[18..];
        if body.len() != n * 4 {
            return Err(format!("SLFM body has {} bytes, expected {}", body.len(), n * 4));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::corrupt(path, e.to_string()))?;
        Self::decode(&bytes).map_err(|r| Error::corrupt(path, r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pgm_header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4]);
        let img = GrayImage::decode_pgm(&bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.get(1, 1), 4);
    }

    #[test]
    fn truncated_pgm_is_rejected() {
        let img = GrayImage::from_fn(8, 4, |u, v| (u * v) as u8);
        let bytes = img.encode_pgm();
        assert!(GrayImage::decode_pgm(&bytes[..bytes.len() - 3]).is_err());
        assert!(GrayImage::decode_pgm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn slfm_rejects_bad_input() {
        let g = DenseGrid {
            height: 2,
            width: 3,
            channels: 2,
            data: (0..12).map(|x| x as f32).collect(),
        };
        let bytes = g.encode();
        assert_eq!(&bytes[..4], b"SLFM");
        assert_eq!(bytes.len(), 18 + 48);
        assert!(DenseGrid::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(DenseGrid::decode(&bad).is_err());
    }

    proptest! {
        #[test]
        fn pgm_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
            let img = GrayImage::from_fn(w, h, |u, v| (seed.wrapping_mul(31).wrapping_add((u * 7 + v * 13) as u64) % 256) as u8);
            let bytes = img.encode_pgm();
            let back = GrayImage::decode_pgm(&bytes).unwrap();
            prop_assert_eq!(&back, &img);
            prop_assert_eq!(back.encode_pgm(), bytes);
        }

        #[test]
        fn slfm_round_trip(h in 1usize..6, w in 1usize..6, c in 1usize..5, vals in prop::collection::vec(-1e6f32..1e6, 150)) {
            let data = vals[..h * w * c].to_vec();
            let g = DenseGrid { height: h, width: w, channels: c, data };
            let bytes = g.encode();
            let back = DenseGrid::decode(&bytes).unwrap();
            prop_assert_eq!(&back, &g);
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
