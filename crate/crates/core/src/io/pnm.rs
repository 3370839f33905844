//! NetPBM (P1/P2/P4/P5/P6) and PFM codecs.
//!
//! P6 pixels are gamma-encoded unless the caller asks for linear decoding;
//! PFM pixels are linear 32-bit floats stored bottom row first.

use std::path::Path;

use crate::color::{gamma_decode_value, gamma_encode_value};
use crate::error::{Error, Result};
use crate::image::LinearImage;

struct Header {
    magic: [u8; 2],
    fields: Vec<String>,
    /// Offset of the first payload byte.
    data_start: usize,
}

/// Reads the magic and `count` whitespace-separated header tokens, skipping
/// `#` comments. Exactly one whitespace byte separates the header from the payload.
fn parse_header(bytes: &[u8], count: usize, fmt: &'static str) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::format(fmt, "file too short for a magic number"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = Vec::with_capacity(count);
    while fields.len() < count {
        match bytes.get(pos) {
            None => return Err(Error::format(fmt, "truncated header")),
            Some(b'#') => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => pos += 1,
            Some(_) => {
                let start = pos;
                while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
            }
        }
    }
    if pos >= bytes.len() && count > 0 {
        return Err(Error::format(fmt, "missing payload"));
    }
    Ok(Header {
        magic,
        fields,
        data_start: pos + 1,
    })
}

fn parse_dim(s: &str, what: &str, fmt: &'static str) -> Result<usize> {
    s.parse::<usize>()
        .ok()
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::format(fmt, format!("bad {what} {s:?}")))
}

fn payload<'a>(bytes: &'a [u8], h: &Header, need: usize, fmt: &'static str) -> Result<&'a [u8]> {
    let data = bytes.get(h.data_start..).unwrap_or(&[]);
    if data.len() < need {
        return Err(Error::format(
            fmt,
            format!("truncated payload: need {need} bytes, have {}", data.len()),
        ));
    }
    Ok(&data[..need])
}

/// Decodes P6. Samples are divided by maxval, then gamma-decoded unless `linear`.
pub fn decode_p6(bytes: &[u8], linear: bool) -> Result<LinearImage> {
    let h = parse_header(bytes, 3, "P6")?;
    if &h.magic != b"P6" {
        return Err(Error::format("P6", "bad magic"));
    }
    let w = parse_dim(&h.fields[0], "width", "P6")?;
    let ht = parse_dim(&h.fields[1], "height", "P6")?;
    let maxval = parse_dim(&h.fields[2], "maxval", "P6")?;
    if maxval > 65535 {
        return Err(Error::format("P6", format!("maxval {maxval} exceeds 65535")));
    }
    let bps = if maxval < 256 { 1 } else { 2 };
    let n = w * ht;
    let data = payload(bytes, &h, n * 3 * bps, "P6")?;
    let scale = 1.0 / maxval as f64;
    let sample = |i: usize| -> f64 {
        let raw = if bps == 1 {
            data[i] as f64
        } else {
            u16::from_be_bytes([data[2 * i], data[2 * i + 1]]) as f64
        };
        let v = (raw * scale).min(1.0);
        if linear {
            v
        } else {
            gamma_decode_value(v)
        }
    };
    let pixels = (0..n)
        .map(|p| [sample(3 * p), sample(3 * p + 1), sample(3 * p + 2)])
        .collect();
    LinearImage::new(w, ht, pixels)
}

/// Encodes an 8-bit P6 from values already in display space, clipped to [0, 1].
pub fn encode_p6_display(image: &LinearImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    for p in image.pixels() {
        for &v in p {
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Encodes a linear image as a gamma-encoded 8-bit P6.
pub fn encode_p6_gamma(image: &LinearImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    for p in image.pixels() {
        for &v in p {
            out.push((gamma_encode_value(v) * 255.0).round() as u8);
        }
    }
    out
}

/// Decodes color (`PF`) or grayscale (`Pf`) PFM. Grayscale is replicated to RGB.
pub fn decode_pfm(bytes: &[u8]) -> Result<LinearImage> {
    let h = parse_header(bytes, 3, "PFM")?;
    let channels = match &h.magic {
        b"PF" => 3,
        b"Pf" => 1,
        _ => return Err(Error::format("PFM", "bad magic")),
    };
    let w = parse_dim(&h.fields[0], "width", "PFM")?;
    let ht = parse_dim(&h.fields[1], "height", "PFM")?;
    let scale: f64 = h.fields[2]
        .parse()
        .ok()
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| Error::format("PFM", format!("bad scale {:?}", h.fields[2])))?;
    let little = scale < 0.0;
    let data = payload(bytes, &h, w * ht * channels * 4, "PFM")?;
    let mut pixels = vec![[0.0; 3]; w * ht];
    for (row, chunk) in data.chunks_exact(w * channels * 4).enumerate() {
        let y = ht - 1 - row;
        for x in 0..w {
            let mut px = [0.0; 3];
            for c in 0..3 {
                let k = (x * channels + c.min(channels - 1)) * 4;
                let b = [chunk[k], chunk[k + 1], chunk[k + 2], chunk[k + 3]];
                px[c] = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) } as f64;
            }
            pixels[y * w + x] = px;
        }
    }
    LinearImage::new(w, ht, pixels)
}

/// Color PFM, little-endian (scale -1). Values are rounded to f32.
pub fn encode_pfm(image: &LinearImage) -> Vec<u8> {
    let (w, h) = (image.width(), image.height());
    let mut out = format!("PF\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 12);
    for y in (0..h).rev() {
        for x in 0..w {
            for v in image.get(x, y) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

/// Decodes a PBM/PGM exclusion mask; nonzero samples are excluded.
pub fn decode_mask(bytes: &[u8]) -> Result<(usize, usize, Vec<bool>)> {
    let magic = bytes.get(..2).unwrap_or(&[]);
    let ascii_fields = |count: usize| parse_header(bytes, count, "mask");
    match magic {
        b"P4" => {
            let h = ascii_fields(2)?;
            let w = parse_dim(&h.fields[0], "width", "mask")?;
            let ht = parse_dim(&h.fields[1], "height", "mask")?;
            let stride = w.div_ceil(8);
            let data = payload(bytes, &h, stride * ht, "mask")?;
            let m = (0..w * ht)
                .map(|i| {
                    let (y, x) = (i / w, i % w);
                    data[y * stride + x / 8] & (0x80 >> (x % 8)) != 0
                })
                .collect();
            Ok((w, ht, m))
        }
        b"P5" => {
            let h = ascii_fields(3)?;
            let w = parse_dim(&h.fields[0], "width", "mask")?;
            let ht = parse_dim(&h.fields[1], "height", "mask")?;
            let maxval = parse_dim(&h.fields[2], "maxval", "mask")?;
            let bps = if maxval < 256 { 1 } else { 2 };
            let data = payload(bytes, &h, w * ht * bps, "mask")?;
            let m = data.chunks_exact(bps).map(|c| c.iter().any(|&b| b != 0)).collect();
            Ok((w, ht, m))
        }
        b"P1" | b"P2" => {
            let plain = magic == b"P1";
            let h = ascii_fields(if plain { 2 } else { 3 })?;
            let w = parse_dim(&h.fields[0], "width", "mask")?;
            let ht = parse_dim(&h.fields[1], "height", "mask")?;
            let text = String::from_utf8_lossy(bytes.get(h.data_start.saturating_sub(1)..).unwrap_or(&[]))
                .into_owned();
            let text: String = text
                .lines()
                .map(|l| l.split('#').next().unwrap_or(""))
                .collect::<Vec<_>>()
                .join(" ");
            let vals: Vec<u32> = if plain {
                text.chars()
                    .filter(|c| !c.is_whitespace())
                    .map(|c| c.to_digit(2).ok_or_else(|| Error::format("mask", format!("bad PBM digit {c:?}"))))
                    .collect::<Result<_>>()?
            } else {
                text.split_whitespace()
                    .map(|t| t.parse().map_err(|_| Error::format("mask", format!("bad PGM sample {t:?}"))))
                    .collect::<Result<_>>()?
            };
            if vals.len() < w * ht {
                return Err(Error::format("mask", format!("truncated: {} of {} samples", vals.len(), w * ht)));
            }
            Ok((w, ht, vals[..w * ht].iter().map(|&v| v != 0).collect()))
        }
        _ => Err(Error::format("mask", "unknown magic (want P1, P2, P4 or P5)")),
    }
}

/// Binary PGM mask with 255 for excluded pixels.
pub fn encode_mask(width: usize, height: usize, mask: &[bool]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Decodes P6 or PFM by magic number.
pub fn decode_image(path: &Path, linear: bool) -> Result<LinearImage> {
    let bytes = read(path)?;
    match bytes.get(..2) {
        Some(b"P6") => decode_p6(&bytes, linear),
        Some(b"PF") | Some(b"Pf") => decode_pfm(&bytes),
        _ => Err(Error::format("image", format!("{}: unknown magic", path.display()))),
    }
}

pub fn load_mask(path: &Path, width: usize, height: usize) -> Result<Vec<bool>> {
    let (w, h, m) = decode_mask(&read(path)?)?;
    if (w, h) != (width, height) {
        return Err(Error::Data(format!(
            "{}: mask is {w}×{h}, image is {width}×{height}",
            path.display()
        )));
    }
    Ok(m)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
