//! Binary PGM (P5, maxval 255) decoding and encoding, and corner-aligned
//! bilinear resizing.

use std::io::Write;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major 8-bit samples.
    pub pixels: Vec<u8>,
}

fn malformed(path: &str, reason: impl Into<String>) -> Error {
    Error::MalformedPgm {
        path: path.to_string(),
        reason: reason.into(),
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
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()?
            .parse()
            .ok()
    }
}

/// Decodes a P5 file. `path` only labels errors.
pub fn decode_pgm(bytes: &[u8], path: &str) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(malformed(path, "bad magic, expected P5"));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number().ok_or_else(|| malformed(path, "missing width"))?;
    let height = h.number().ok_or_else(|| malformed(path, "missing height"))?;
    let maxval = h.number().ok_or_else(|| malformed(path, "missing maxval"))?;
    if width == 0 || height == 0 {
        return Err(malformed(path, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(malformed(path, format!("depth {maxval}, only 255 is supported")));
    }
    if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
        return Err(malformed(path, "missing separator before raster"));
    }
    let raster = &bytes[h.pos + 1..];
    let n = width * height;
    if raster.len() < n {
        return Err(malformed(
            path,
            format!("raster truncated: {} of {n} bytes", raster.len()),
        ));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: raster[..n].to_vec(),
    })
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.pixels.len() + 20);
    write!(out, "P5\n{} {}\n255\n", img.width, img.height).expect("write to vec");
    out.extend_from_slice(&img.pixels);
    out
}

/// Source coordinate of output sample `i` under corner alignment: the first
/// and last output samples sit exactly on the first and last input samples.
/// A single output sample sits at the input centre.
fn source_coord(i: usize, out_len: usize, in_len: usize) -> f64 {
    if out_len == 1 {
        (in_len - 1) as f64 / 2.0
    } else {
        i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
    }
}

fn taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|i| {
            let s = source_coord(i, out_len, in_len);
            let i0 = (s.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Separable bilinear resize of a row-major plane, rows first then columns:
/// `out = (1-ty)·((1-tx)·p00 + tx·p01) + ty·((1-tx)·p10 + tx·p11)`.
pub fn resize_bilinear(
    src: &[f64],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let ys = taps(out_h, in_h);
    let xs = taps(out_w, in_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let top = (1.0 - tx) * src[y0 * in_w + x0] + tx * src[y0 * in_w + x1];
            let bottom = (1.0 - tx) * src[y1 * in_w + x0] + tx * src[y1 * in_w + x1];
            out.push((1.0 - ty) * top + ty * bottom);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_with_comments() {
        let mut bytes = b"P5\n# made by hand\n2 2\n255\n".to_vec();
        bytes.extend([0, 255, 255, 0]);
        let img = decode_pgm(&bytes, "x.pgm").unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.pixels, vec![0, 255, 255, 0]);
        assert_eq!(decode_pgm(&encode_pgm(&img), "y").unwrap(), img);
    }

    #[test]
    fn rejects_bad_files() {
        let err = decode_pgm(b"P2\n2 2\n255\n0 0 0 0", "a.pgm").unwrap_err();
        assert!(err.to_string().contains("magic"));
        let mut deep = b"P5 1 1 65535\n".to_vec();
        deep.extend([0, 0]);
        assert!(decode_pgm(&deep, "b.pgm").unwrap_err().to_string().contains("depth"));
        assert!(decode_pgm(b"P5 2 2 255\n\x00", "c.pgm").is_err());
    }

    #[test]
    fn resize_preserves_constants_and_corners() {
        let flat = vec![7.0; 16];
        assert_eq!(resize_bilinear(&flat, 4, 4, 2, 2), vec![7.0; 4]);
        let ramp: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let out = resize_bilinear(&ramp, 4, 4, 2, 2);
        assert_eq!(out, vec![0.0, 3.0, 12.0, 15.0]);
        let up = resize_bilinear(&[0.0, 1.0], 1, 2, 1, 3);
        assert_eq!(up, vec![0.0, 0.5, 1.0]);
    }
}
