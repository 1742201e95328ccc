//! Binary PPM (P6) and PGM (P5) codecs, 8-bit only.
//!
//! Encoders always emit the minimal header `P6\n<w> <h>\n255\n`. Decoders
//! accept comments and arbitrary whitespace in the header, any maxval in
//! `1..=255`, and reject truncated or oversized payloads.

use crate::error::{Error, Result};
use crate::grid::{LabelMap, PlanarGrid};

/// `round(v * 255)` after clamping to `[0, 1]`.
#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &PlanarGrid) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::invalid(format!(
            "PPM needs 3 channels, image has {}",
            image.channels()
        )));
    }
    let (h, w) = (image.height(), image.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for row in 0..h {
        for col in 0..w {
            for c in 0..3 {
                out.push(quantize(image.get(c, row, col)));
            }
        }
    }
    Ok(out)
}

pub fn encode_pgm(map: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend_from_slice(map.values());
    out
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_offset: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
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
            return Err(Error::format(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start, format!("{what} out of range")))
    }
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(cur.pos, format!("unsupported maxval {maxval}")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(Error::format(cur.pos, "expected whitespace after maxval")),
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_offset: cur.pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], header: &Header, samples: usize) -> Result<&'a [u8]> {
    let needed = header
        .width
        .checked_mul(header.height)
        .and_then(|n| n.checked_mul(samples))
        .ok_or_else(|| Error::format(header.data_offset, "image dimensions overflow"))?;
    let available = bytes.len() - header.data_offset;
    if available < needed {
        return Err(Error::format(
            bytes.len(),
            format!("truncated payload: {available} of {needed} bytes"),
        ));
    }
    if available > needed {
        return Err(Error::format(
            header.data_offset + needed,
            format!("{} trailing bytes after payload", available - needed),
        ));
    }
    Ok(&bytes[header.data_offset..])
}

/// Decodes a P6 file into a 3-channel grid with values `byte / maxval`.
pub fn decode_ppm(bytes: &[u8]) -> Result<PlanarGrid> {
    let header = parse_header(bytes, b"P6")?;
    let data = payload(bytes, &header, 3)?;
    let (h, w) = (header.height, header.width);
    let scale = header.maxval as f64;
    let mut grid = PlanarGrid::zeros(3, h, w);
    for (i, px) in data.chunks_exact(3).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            if b as usize > header.maxval {
                return Err(Error::format(
                    header.data_offset + 3 * i + c,
                    format!("sample {b} exceeds maxval {}", header.maxval),
                ));
            }
            grid.set(c, i / w, i % w, b as f64 / scale);
        }
    }
    Ok(grid)
}

/// Decodes a P5 label file; every gray value must be `< classes`.
pub fn decode_pgm_labels(bytes: &[u8], classes: usize) -> Result<LabelMap> {
    let header = parse_header(bytes, b"P5")?;
    let data = payload(bytes, &header, 1)?;
    if let Some(i) = data.iter().position(|&v| v as usize >= classes) {
        return Err(Error::format(
            header.data_offset + i,
            format!("label {} out of range for {classes} classes", data[i]),
        ));
    }
    LabelMap::from_vec(header.height, header.width, data.to_vec())
}
