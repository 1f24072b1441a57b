//! Binary PPM (P6, maxval 255) and 16-bit PGM (P5, maxval 65535) with a
//! `# scale <s>` comment mapping raw values to real ones.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gradcore::{Shape, Tensor};

pub const PPM_MAXVAL: u16 = 255;
pub const PGM_MAXVAL: u16 = 65535;

fn malformed(path: &Path, detail: impl Into<String>) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

struct Header {
    magic: String,
    width: usize,
    height: usize,
    maxval: usize,
    scale: Option<f64>,
    payload_start: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let mut pos = 0;
    let mut tokens: Vec<String> = Vec::with_capacity(4);
    let mut scale = None;
    while tokens.len() < 4 {
        let Some(&b) = bytes.get(pos) else {
            return Err(malformed(path, format!("header ends after {} fields", tokens.len())));
        };
        if b == b'#' {
            let end = bytes[pos..]
                .iter()
                .position(|&c| c == b'\n')
                .map_or(bytes.len(), |i| pos + i);
            let comment = String::from_utf8_lossy(&bytes[pos + 1..end]);
            let mut words = comment.split_whitespace();
            if words.next() == Some("scale") {
                let s = words
                    .next()
                    .and_then(|w| w.parse::<f64>().ok())
                    .filter(|s| s.is_finite() && *s > 0.0)
                    .ok_or_else(|| malformed(path, format!("bad scale comment `#{comment}`")))?;
                scale = Some(s);
            }
            pos = end;
        } else if b.is_ascii_whitespace() {
            pos += 1;
        } else {
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                pos += 1;
            }
            tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(malformed(path, "missing whitespace after maxval")),
    }
    let num = |i: usize, what: &str| -> Result<usize> {
        tokens[i]
            .parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| malformed(path, format!("bad {what} `{}`", tokens[i])))
    };
    Ok(Header {
        magic: tokens[0].clone(),
        width: num(1, "width")?,
        height: num(2, "height")?,
        maxval: num(3, "maxval")?,
        scale,
        payload_start: pos,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, per_pixel: usize, path: &Path) -> Result<&'a [u8]> {
    let expected = h.width * h.height * per_pixel;
    let found = bytes.len() - h.payload_start;
    if found < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(&bytes[h.payload_start..h.payload_start + expected])
}

/// Encodes a (1,3,H,W) image with values in [0,1].
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.batch() != 1 || s.channels() != 3 {
        return Err(crate::error::shape_err(
            "encode_ppm",
            format!("expected 1x3xHxW, got {s}"),
        ));
    }
    let mut out = format!("P6\n{} {}\n{}\n", s.width(), s.height(), PPM_MAXVAL).into_bytes();
    out.reserve(s.numel());
    for y in 0..s.height() {
        for x in 0..s.width() {
            for c in 0..3 {
                let v = image.get(0, c, y, x);
                out.push((v.clamp(0.0, 1.0) * f64::from(PPM_MAXVAL)).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let h = parse_header(bytes, path)?;
    if h.magic != "P6" {
        return Err(malformed(path, format!("expected P6, found `{}`", h.magic)));
    }
    if h.maxval != usize::from(PPM_MAXVAL) {
        return Err(malformed(
            path,
            format!("maxval must be {PPM_MAXVAL}, found {}", h.maxval),
        ));
    }
    let data = payload(bytes, &h, 3, path)?;
    let (w, hh) = (h.width, h.height);
    Ok(Tensor::from_fn(Shape::new(1, 3, hh, w), |[_, c, y, x]| {
        f64::from(data[(y * w + x) * 3 + c]) / f64::from(PPM_MAXVAL)
    }))
}

/// Encodes a (1,1,H,W) map as raw = round(value / scale), big-endian.
pub fn encode_pgm16(values: &Tensor, scale: f64) -> Result<Vec<u8>> {
    let s = values.shape();
    if s.batch() != 1 || s.channels() != 1 {
        return Err(crate::error::shape_err(
            "encode_pgm16",
            format!("expected 1x1xHxW, got {s}"),
        ));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidArgument(format!("PGM scale {scale} must be positive")));
    }
    let mut out = format!("P5\n# scale {scale}\n{} {}\n{}\n", s.width(), s.height(), PGM_MAXVAL).into_bytes();
    out.reserve(2 * s.numel());
    for &v in values.data() {
        let raw = (v / scale).round().clamp(0.0, f64::from(PGM_MAXVAL)) as u16;
        out.extend_from_slice(&raw.to_be_bytes());
    }
    Ok(out)
}

/// Decodes a scaled 16-bit PGM into values and the declared scale.
pub fn decode_pgm16(bytes: &[u8], path: &Path) -> Result<(Tensor, f64)> {
    let h = parse_header(bytes, path)?;
    if h.magic != "P5" {
        return Err(malformed(path, format!("expected P5, found `{}`", h.magic)));
    }
    if h.maxval != usize::from(PGM_MAXVAL) {
        return Err(malformed(
            path,
            format!("maxval must be {PGM_MAXVAL}, found {}", h.maxval),
        ));
    }
    let scale = h.scale.ok_or_else(|| Error::MissingScale(path.to_path_buf()))?;
    let data = payload(bytes, &h, 2, path)?;
    let values = data
        .chunks_exact(2)
        .map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])) * scale)
        .collect();
    Ok((Tensor::new(Shape::new(1, 1, h.height, h.width), values)?, scale))
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?, path)
}

pub fn write_pgm16(path: &Path, values: &Tensor, scale: f64) -> Result<()> {
    fs::write(path, encode_pgm16(values, scale)?)?;
    Ok(())
}

pub fn read_pgm16(path: &Path) -> Result<(Tensor, f64)> {
    decode_pgm16(&fs::read(path)?, path)
}
