//! On-disk sequence layout: `<dir>/img/NNNN.ppm` frames plus a
//! `groundtruth.txt` with one corner-form `x,y,w,h` line per frame.

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::harness::ppm::write_ppm;
use crate::tensor::Tensor;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<PathBuf>,
    /// Center-form boxes, converted from the corner-form file.
    pub gt: Vec<BBox>,
}

fn parse_box_line(path: &Path, lineno: usize, line: &str) -> Result<BBox> {
    let err = |msg: String| Error::Parse {
        path: path.display().to_string(),
        line: lineno,
        msg,
    };
    let fields: Vec<&str> = line
        .split(|c: char| c == ',' || c == '\t' || c == ' ')
        .filter(|s| !s.is_empty())
        .collect();
    if fields.len() != 4 {
        return Err(err(format!("expected 4 fields, got {}", fields.len())));
    }
    let mut v = [0.0f64; 4];
    for (i, f) in fields.iter().enumerate() {
        v[i] = f
            .parse()
            .map_err(|_| err(format!("bad number {f:?} in field {}", i + 1)))?;
    }
    if v[2] <= 0.0 || v[3] <= 0.0 {
        return Err(err(format!("non-positive box size {}x{}", v[2], v[3])));
    }
    Ok(BBox::from_corner(v[0], v[1], v[2], v[3]))
}

/// Parse a corner-form box file: groundtruth.txt or a tracker results file.
pub fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_box_line(path, i + 1, line)?);
    }
    Ok(out)
}

pub fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    let mut text = String::new();
    for b in boxes {
        text.push_str(&format!(
            "{:.4},{:.4},{:.4},{:.4}\n",
            b.x1(),
            b.y1(),
            b.w,
            b.h
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    let img_dir = dir.join("img");
    let mut frames: Vec<PathBuf> = std::fs::read_dir(&img_dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().map_or(false, |e| e == "ppm"))
        .collect();
    frames.sort();
    let gt = read_boxes(&dir.join("groundtruth.txt"))?;
    if frames.len() != gt.len() {
        return Err(Error::Config(format!(
            "{}: {} frames but {} groundtruth lines",
            dir.display(),
            frames.len(),
            gt.len()
        )));
    }
    if frames.len() < 2 {
        return Err(Error::Config(format!(
            "{}: a sequence needs at least 2 frames, found {}",
            dir.display(),
            frames.len()
        )));
    }
    Ok(Sequence { name, frames, gt })
}

/// Write frames and groundtruth in the layout `load_sequence` reads.
pub fn save_sequence(dir: &Path, frames: &[Tensor<f32>], gt: &[BBox]) -> Result<()> {
    if frames.len() != gt.len() {
        return Err(Error::Config(format!(
            "{} frames but {} boxes",
            frames.len(),
            gt.len()
        )));
    }
    let img_dir = dir.join("img");
    std::fs::create_dir_all(&img_dir)?;
    for (i, f) in frames.iter().enumerate() {
        write_ppm(&img_dir.join(format!("{:04}.ppm", i + 1)), f)?;
    }
    write_boxes(&dir.join("groundtruth.txt"), gt)
}
