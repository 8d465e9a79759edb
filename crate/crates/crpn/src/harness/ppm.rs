//! Binary PPM (P6) image I/O. Pixels map between `Tensor[3, H, W]` floats in
//! [0, 1] and 8-bit RGB.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    if image.rank() != 3 || image.dims()[0] != 3 {
        return Err(Error::shape(
            "write_ppm",
            format!("expected [3, H, W] image, got {:?}", image.dims()),
        ));
    }
    let (h, w) = (image.dims()[1], image.dims()[2]);
    let mut buf = Vec::with_capacity(20 + 3 * h * w);
    buf.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = image.at3(ch, y, x).clamp(0.0, 1.0);
                buf.push((v * 255.0).round() as u8);
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line: 1,
        msg: msg.into(),
    }
}

/// Read one whitespace-delimited header token, skipping `#` comments.
fn token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos > start {
        Some(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    } else {
        None
    }
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let magic = token(&bytes, &mut pos).ok_or_else(|| parse_err(path, "empty file"))?;
    if magic != "P6" {
        return Err(parse_err(path, format!("not a P6 ppm (magic {magic:?})")));
    }
    let mut dim = |what: &str| -> Result<usize> {
        token(&bytes, &mut pos)
            .ok_or_else(|| parse_err(path, format!("missing {what}")))?
            .parse::<usize>()
            .map_err(|_| parse_err(path, format!("bad {what}")))
    };
    let w = dim("width")?;
    let h = dim("height")?;
    let maxval = dim("maxval")?;
    if maxval != 255 {
        return Err(parse_err(path, format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace byte after maxval
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(parse_err(
            path,
            format!("pixel data truncated: {} of {need} bytes", bytes.len().saturating_sub(pos)),
        ));
    }
    let mut data = vec![0.0f32; need];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let b = bytes[pos + (y * w + x) * 3 + ch];
                data[(ch * h + y) * w + x] = b as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}
