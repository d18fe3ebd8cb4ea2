//! Binary PGM (P5) and PPM (P6) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{FanError, Result};

/// Grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Round every value to the nearest of the 256 levels a PGM can hold.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// RGB image, 8 bits per channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn from_gray(img: &GrayImage) -> Self {
        RgbImage {
            width: img.width,
            height: img.height,
            data: img.to_bytes().into_iter().map(|v| [v, v, v]).collect(),
        }
    }

    pub fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.data[y as usize * self.width + x as usize] = rgb;
        }
    }
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    out
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().flatten());
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(FanError::Image("file too short".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(FanError::Image("malformed header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| FanError::Image("header value out of range".into()))?;
    }
    // exactly one whitespace byte before the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(FanError::Image("missing separator after header".into()));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(FanError::Image(format!("bad dimensions {width}x{height} maxval {maxval}")));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        offset: pos + 1,
    })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err(FanError::Image("not a binary PGM (P5)".into()));
    }
    let n = h.width * h.height;
    let raster = &bytes[h.offset..];
    let max = h.maxval as f64;
    let data: Vec<f64> = if h.maxval < 256 {
        if raster.len() < n {
            return Err(FanError::Image("truncated raster".into()));
        }
        raster[..n].iter().map(|&v| (v as f64 / max).min(1.0)).collect()
    } else {
        if raster.len() < 2 * n {
            return Err(FanError::Image("truncated raster".into()));
        }
        raster[..2 * n]
            .chunks(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / max).min(1.0))
            .collect()
    };
    Ok(GrayImage {
        width: h.width,
        height: h.height,
        data,
    })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" || h.maxval != 255 {
        return Err(FanError::Image("only 8-bit binary PPM (P6) is supported".into()));
    }
    let n = h.width * h.height;
    let raster = &bytes[h.offset..];
    if raster.len() < 3 * n {
        return Err(FanError::Image("truncated raster".into()));
    }
    Ok(RgbImage {
        width: h.width,
        height: h.height,
        data: raster[..3 * n].chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
    })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| FanError::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| FanError::Image(format!("{}: {e}", path.display())))
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(|e| FanError::io(path, e))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| FanError::io(path, e))
}
