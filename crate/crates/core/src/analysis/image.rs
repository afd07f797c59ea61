//! Binary PGM (P5) and PPM (P6) images with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps `[0, 1]` to `0..=255`, clamping outside values.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(magic: &str, w: usize, h: usize, body: Vec<u8>) -> Vec<u8> {
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(body);
    out
}

/// Grayscale `[H, W]` grid with values in `[0, 1]`.
pub fn encode_pgm(grid: &Tensor<f64>) -> Result<Vec<u8>> {
    let s = grid.shape();
    if s.len() != 2 {
        return Err(Error::dim("pgm", &[0, 0], s));
    }
    Ok(encode(
        "P5",
        s[1],
        s[0],
        grid.data().iter().map(|&v| to_byte(v)).collect(),
    ))
}

/// Colour `[3, H, W]` image with values in `[0, 1]`.
pub fn encode_ppm(img: &Tensor<f64>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("ppm", &[3, 0, 0], s));
    }
    let plane = s[1] * s[2];
    let d = img.data();
    let body = (0..plane)
        .flat_map(|i| (0..3).map(move |c| to_byte(d[c * plane + i])))
        .collect();
    Ok(encode("P6", s[2], s[1], body))
}

pub fn write_pgm(path: impl AsRef<Path>, grid: &Tensor<f64>) -> Result<()> {
    fs::write(path, encode_pgm(grid)?)?;
    Ok(())
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor<f64>) -> Result<()> {
    fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

/// Reads the whitespace-separated header fields, skipping `#` comments.
fn header(bytes: &[u8]) -> Result<(Vec<String>, usize)> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format("netpbm", "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the samples
    Ok((fields, i + 1))
}

/// Decodes a P5 or P6 file into `[C, H, W]` with values in `[0, 1]`.
pub fn decode_netpbm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let (f, start) = header(bytes)?;
    let channels = match f[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::format(
                "netpbm",
                format!("unsupported magic {other:?}"),
            ))
        }
    };
    let num = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::format("netpbm", format!("bad header field {s:?}")))
    };
    let (w, h, max) = (num(&f[1])?, num(&f[2])?, num(&f[3])?);
    if max != 255 {
        return Err(Error::format(
            "netpbm",
            format!("only 8-bit samples are supported, maxval {max}"),
        ));
    }
    let expected = w * h * channels;
    let body = bytes.get(start..).unwrap_or_default();
    if body.len() != expected {
        return Err(Error::format(
            "netpbm",
            format!("expected {expected} sample bytes, got {}", body.len()),
        ));
    }
    let plane = w * h;
    Ok(Tensor::from_fn(&[channels, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        body[p * channels + c] as f64 / 255.0
    }))
}

pub fn read_netpbm(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    decode_netpbm(&fs::read(path)?)
}
