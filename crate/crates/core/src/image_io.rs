//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{io_err, shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "PNM header",
        offset,
        detail: detail.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(start, format!("{what} out of range")))
    }
}

/// Decodes a P5 or P6 byte stream into `[1, H, W]` or `[3, H, W]` in `[0, 1]`.
pub fn decode_pnm<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(format_err(0, "missing P5/P6 magic"));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        _ => return Err(format_err(1, "only binary P5 and P6 are supported")),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_space_and_comments();
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(format_err(maxval_at, format!("maxval {maxval} unsupported (need 255)")));
    }
    if width == 0 || height == 0 {
        return Err(format_err(2, "zero image extent"));
    }
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(format_err(cur.pos, "expected a single whitespace byte before pixel data"));
    }
    let start = cur.pos + 1;
    let n = width * height * channels;
    let pixels = bytes
        .get(start..start + n)
        .ok_or_else(|| format_err(bytes.len(), format!("truncated pixel data: need {n} bytes after offset {start}")))?;
    let plane = width * height;
    let scale = S::lit(1.0 / 255.0);
    let data = (0..n)
        .map(|i| {
            let c = i / plane;
            let p = i % plane;
            S::lit(pixels[p * channels + c] as f64) * scale
        })
        .collect();
    Tensor::new([channels, height, width], data)
}

fn quantize<S: Scalar>(v: S) -> u8 {
    let v = v.as_f64();
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes `[3, H, W]` as P6 or `[1, H, W]` as P5, clamping to `[0, 1]`.
pub fn encode_pnm<S: Scalar>(image: &Tensor<S>) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(shape_err("encode_pnm", format!("expected 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    let plane = h * w;
    out.reserve(c * plane);
    for p in 0..plane {
        for ch in 0..c {
            out.push(quantize(d[ch * plane + p]));
        }
    }
    Ok(out)
}

pub fn read_image<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_pnm(&bytes)
}

pub fn write_image<S: Scalar>(path: impl AsRef<Path>, image: &Tensor<S>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(image)?).map_err(io_err(path))
}

/// Writes a `[H, W]` map as P5 after min-max normalization.
pub fn write_normalized_pgm<S: Scalar>(path: impl AsRef<Path>, map: &Tensor<S>) -> Result<()> {
    let (h, w) = map.dims2()?;
    let lo = map.data().iter().fold(f64::INFINITY, |m, v| m.min(v.as_f64()));
    let hi = map.data().iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let norm = Tensor::<f64>::new([1, h, w], map.data().iter().map(|v| (v.as_f64() - lo) / span).collect())?;
    write_image(path, &norm)
}
