//! PGM (P5) and raw-float (`NLBF1`) image files.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};
use crate::scalar::Real;

const NLBF_MAGIC: &[u8] = b"NLBF1\n";

/// Loads a P5 PGM (8/16-bit) or an `NLBF1` raw-float image, detected by magic bytes.
///
/// PGM intensities are divided by the header's maxval; raw floats are loaded verbatim.
pub fn load_image<F: Real>(path: impl AsRef<Path>) -> Result<Image<F>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub(crate) fn decode_image<F: Real>(bytes: &[u8]) -> Result<Image<F>> {
    if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else if bytes.starts_with(NLBF_MAGIC) {
        decode_nlbf(bytes)
    } else {
        let head: String = bytes.iter().take(6).map(|&b| b as char).collect();
        Err(Error::UnsupportedFormat(format!("unknown magic {head:?}")))
    }
}

/// Writes by file extension: `.pgm` → 8-bit P5, `.nlbf` → raw 32-bit float.
pub fn save_image<F: Real>(img: &Image<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("pgm") => save_pgm(img, path),
        Some("nlbf") => save_nlbf(img, path),
        other => Err(Error::UnsupportedFormat(format!(
            "cannot infer output format from extension {other:?} (use .pgm or .nlbf)"
        ))),
    }
}

/// 8-bit P5 output: clamp to [0,1], round half up to 0..=255.
pub fn save_pgm<F: Real>(img: &Image<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if img.channels() != 1 {
        return Err(Error::InvalidArgument(format!(
            "PGM holds one channel, image has {}",
            img.channels()
        )));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize_u8(v.as_f64())));
    write_file(path, &out)
}

pub(crate) fn quantize_u8(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

/// Raw float output, values written verbatim as little-endian `f32`.
pub fn save_nlbf<F: Real>(img: &Image<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = NLBF_MAGIC.to_vec();
    out.extend_from_slice(
        format!("{} {} {}\n", img.width(), img.height(), img.channels()).as_bytes(),
    );
    out.reserve(img.data().len() * 4);
    for &v in img.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    write_file(path, &out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Reads whitespace-separated ASCII header tokens, skipping `#` comments.
struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_space(&mut self) {
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

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedHeader(format!("missing or invalid {what}")))
    }

    /// Consumes exactly one whitespace byte ending the header.
    fn end_header(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(Error::MalformedHeader(
                "header not terminated by whitespace".into(),
            )),
        }
    }
}

fn decode_pgm<F: Real>(bytes: &[u8]) -> Result<Image<F>> {
    let mut hdr = HeaderReader { bytes, pos: 2 };
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::MalformedHeader(format!(
            "maxval {maxval} out of range"
        )));
    }
    let start = hdr.end_header()?;
    let payload = &bytes[start..];
    let bpp = if maxval < 256 { 1 } else { 2 };
    let expected = width * height * bpp;
    if payload.len() != expected {
        return Err(Error::PayloadMismatch {
            expected,
            found: payload.len(),
        });
    }
    let scale = 1.0 / maxval as f64;
    let data: Vec<F> = if bpp == 1 {
        payload.iter().map(|&b| F::lit(b as f64 * scale)).collect()
    } else {
        payload
            .chunks_exact(2)
            .map(|c| F::lit(u16::from_be_bytes([c[0], c[1]]) as f64 * scale))
            .collect()
    };
    Image::new(width, height, 1, data)
}

fn decode_nlbf<F: Real>(bytes: &[u8]) -> Result<Image<F>> {
    let mut hdr = HeaderReader {
        bytes,
        pos: NLBF_MAGIC.len(),
    };
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    let channels = hdr.number("channels")?;
    if bytes.get(hdr.pos) != Some(&b'\n') {
        return Err(Error::MalformedHeader(
            "NLBF dimension line must end with newline".into(),
        ));
    }
    let payload = &bytes[hdr.pos + 1..];
    let expected = width * height * channels * 4;
    if payload.len() != expected {
        return Err(Error::PayloadMismatch {
            expected,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| F::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Image::new(width, height, channels, data)
}
