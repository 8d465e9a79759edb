//! Synthetic scenes for training and evaluation: a colored convex shape on a
//! textured background, accompanied by same-family distractor shapes. Pair
//! generation yields (template, search, ground truth); sequence generation
//! yields frames whose distractors deliberately cross the target's path.

use crate::geometry::{iou, BBox};
use crate::tensor::{resize_bilinear, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub template_size: usize,
    pub search_size: usize,
    pub frame_size: usize,
    /// Target scale (geometric mean of sides) in the template, pixels.
    pub scale_range: (f64, f64),
    /// Search-to-template scale ratio.
    pub ratio_range: (f64, f64),
    /// Target center range inside the search crop, pixels.
    pub center_range: (f64, f64),
    /// Clamp for target sides in the search crop, pixels.
    pub side_range: (f64, f64),
    /// Aspect ratio h/w of the target.
    pub aspect_range: (f64, f64),
    /// Min and max distractor count in a search crop.
    pub distractors: (usize, usize),
    /// Per-pixel additive noise amplitude.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            template_size: 64,
            search_size: 128,
            frame_size: 256,
            scale_range: (16.0, 48.0),
            ratio_range: (0.7, 1.4),
            center_range: (34.0, 94.0),
            side_range: (12.0, 67.0),
            aspect_range: (0.6, 1.6),
            distractors: (1, 3),
            noise: 0.03,
        }
    }
}

impl SynthConfig {
    /// Matches the miniature architecture used by gradient checks.
    pub fn tiny() -> Self {
        SynthConfig {
            template_size: 16,
            search_size: 32,
            frame_size: 64,
            scale_range: (5.0, 9.0),
            ratio_range: (0.8, 1.25),
            center_range: (10.0, 22.0),
            side_range: (4.0, 14.0),
            aspect_range: (0.8, 1.25),
            distractors: (1, 1),
            noise: 0.02,
        }
    }
}

/// A convex shape in canonical coordinates: either an axis-aligned ellipse
/// inscribed in its box, or a convex polygon with vertices normalized to the
/// unit box [-0.5, 0.5]^2. Scaling the box never changes the silhouette
/// family, so the tight bounding box of the rendered shape is the box itself.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Ellipse,
    Poly(Vec<(f64, f64)>),
}

impl Shape {
    /// Containment test in normalized box coordinates (u, v in [-0.5, 0.5]).
    fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            Shape::Ellipse => 4.0 * (u * u + v * v) <= 1.0,
            Shape::Poly(pts) => {
                for i in 0..pts.len() {
                    let (x1, y1) = pts[i];
                    let (x2, y2) = pts[(i + 1) % pts.len()];
                    if (x2 - x1) * (v - y1) - (y2 - y1) * (u - x1) < 0.0 {
                        return false;
                    }
                }
                true
            }
        }
    }
}

/// Sample a shape family: ellipse or a convex polygon with 3..=7 vertices
/// placed on a circle and normalized so the tight bbox is the unit box.
fn sample_shape(rng: &mut ChaCha8Rng) -> Shape {
    let family = rng.gen_range(0..4);
    if family == 0 {
        return Shape::Ellipse;
    }
    let n = match family {
        1 => 3,
        2 => 4,
        _ => rng.gen_range(5..=7),
    };
    // sorted angles with a minimum gap keep the polygon non-degenerate
    let mut angles: Vec<f64> = loop {
        let mut a: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let ok = (0..n).all(|i| {
            let next = if i + 1 == n {
                a[0] + std::f64::consts::TAU
            } else {
                a[i + 1]
            };
            next - a[i] > 0.35
        });
        if ok {
            break a;
        }
    };
    if n == 4 {
        // squares read as rotated rectangles once the box applies an aspect
        let base = angles[0];
        angles = (0..4)
            .map(|i| base + i as f64 * std::f64::consts::FRAC_PI_2)
            .collect();
    }
    let pts: Vec<(f64, f64)> = angles.iter().map(|a| (0.5 * a.cos(), 0.5 * a.sin())).collect();
    // normalize each axis to [-0.5, 0.5] so the bbox is exactly the unit box
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    Shape::Poly(
        pts.iter()
            .map(|&(x, y)| {
                (
                    (x - x0) / (x1 - x0) - 0.5,
                    (y - y0) / (y1 - y0) - 0.5,
                )
            })
            .collect(),
    )
}

fn jitter_color(base: [f32; 3], rng: &mut ChaCha8Rng) -> [f32; 3] {
    let mut c = base;
    for v in &mut c {
        *v = (*v + rng.gen_range(-0.15..0.15f32)).clamp(0.35, 1.0);
    }
    c
}

/// Coarse random color grid upsampled bilinearly, plus per-pixel noise.
/// Background cells stay darker than the shape color range for contrast.
fn paint_background(side: usize, rng: &mut ChaCha8Rng, noise: f64) -> Tensor<f32> {
    let cells = rng.gen_range(4..=6);
    let mut grid = Tensor::<f32>::zeros(&[3, cells, cells]);
    for v in grid.data_mut() {
        *v = rng.gen_range(0.0..0.55);
    }
    let mut img = resize_bilinear(&grid, side, side).expect("grid resize");
    for v in img.data_mut() {
        *v = (*v + rng.gen_range(-noise..noise) as f32).clamp(0.0, 1.0);
    }
    img
}

/// Alpha-blend a shape into the image, 2x2 supersampled per pixel. Pixel
/// (ix, iy) covers the unit square [ix, ix+1) x [iy, iy+1).
fn paint_shape(img: &mut Tensor<f32>, shape: &Shape, bbox: &BBox, color: [f32; 3]) {
    let side = img.dims()[1] as i64;
    let x0 = bbox.x1().floor().max(0.0) as i64;
    let x1 = (bbox.x2().ceil() as i64).min(side);
    let y0 = bbox.y1().floor().max(0.0) as i64;
    let y1 = (bbox.y2().ceil() as i64).min(side);
    let plane = (side * side) as usize;
    let data = img.data_mut();
    for iy in y0..y1 {
        for ix in x0..x1 {
            let mut hits = 0;
            for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let u = (ix as f64 + sx - bbox.cx) / bbox.w;
                let v = (iy as f64 + sy - bbox.cy) / bbox.h;
                if u.abs() <= 0.5 && v.abs() <= 0.5 && shape.contains(u, v) {
                    hits += 1;
                }
            }
            if hits == 0 {
                continue;
            }
            let alpha = hits as f32 / 4.0;
            let at = (iy * side + ix) as usize;
            for ch in 0..3 {
                let idx = ch * plane + at;
                data[idx] = data[idx] * (1.0 - alpha) + color[ch] * alpha;
            }
        }
    }
}

/// One training example: the target centered in the template, the same target
/// somewhere in the search crop among distractors, and its true box.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub z: Tensor<f32>,
    pub x: Tensor<f32>,
    /// Target box in search-crop coordinates.
    pub gt: BBox,
    /// Distractor boxes in search-crop coordinates.
    pub distractors: Vec<BBox>,
    pub target_color: [f32; 3],
}

fn sample_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        rng.gen_range(0.5..1.0),
        rng.gen_range(0.5..1.0),
        rng.gen_range(0.5..1.0),
    ]
}

pub fn synth_pair(cfg: &SynthConfig, seed: u64) -> TrainingPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = sample_shape(&mut rng);
    let color = sample_color(&mut rng);

    let s = rng.gen_range(cfg.scale_range.0..cfg.scale_range.1);
    let tpl = cfg.template_size as f64;
    let max_side = tpl - 4.0;
    let q = loop {
        let q = (rng.gen_range(cfg.aspect_range.0.ln()..cfg.aspect_range.1.ln())).exp();
        if s / q.sqrt() <= max_side && s * q.sqrt() <= max_side {
            break q;
        }
    };
    let (wz, hz) = (s / q.sqrt(), s * q.sqrt());

    let mut z = paint_background(cfg.template_size, &mut rng, cfg.noise);
    paint_shape(&mut z, &shape, &BBox::new(tpl / 2.0, tpl / 2.0, wz, hz), color);

    // the search view of the same target: rescaled, off-center
    let (mut wx, mut hx) = (0.0, 0.0);
    for attempt in 0..20 {
        let r = rng.gen_range(cfg.ratio_range.0..cfg.ratio_range.1);
        wx = wz * r;
        hx = hz * r;
        let fits = |v: f64| v >= cfg.side_range.0 && v <= cfg.side_range.1;
        if (fits(wx) && fits(hx)) || attempt == 19 {
            wx = wx.clamp(cfg.side_range.0, cfg.side_range.1);
            hx = hx.clamp(cfg.side_range.0, cfg.side_range.1);
            break;
        }
    }
    let cx = rng.gen_range(cfg.center_range.0..cfg.center_range.1);
    let cy = rng.gen_range(cfg.center_range.0..cfg.center_range.1);
    let gt = BBox::new(cx, cy, wx, hx);

    let mut x = paint_background(cfg.search_size, &mut rng, cfg.noise);
    let n_distractors = rng.gen_range(cfg.distractors.0..=cfg.distractors.1);
    let search = cfg.search_size as f64;
    let mut distractors = Vec::with_capacity(n_distractors);
    for d in 0..n_distractors {
        let dw = (wx * rng.gen_range(0.7..1.3)).clamp(cfg.side_range.0, cfg.side_range.1);
        let dh = (hx * rng.gen_range(0.7..1.3)).clamp(cfg.side_range.0, cfg.side_range.1);
        let margin = 0.125 * search;
        let mut dbox = BBox::new(0.0, 0.0, dw, dh);
        for attempt in 0..50 {
            dbox.cx = rng.gen_range(margin..search - margin);
            dbox.cy = rng.gen_range(margin..search - margin);
            // the first distractor is guaranteed clear of the target
            if d != 0 || iou(&dbox, &gt) < 0.3 || attempt == 49 {
                break;
            }
        }
        if d == 0 && iou(&dbox, &gt) >= 0.3 {
            // deterministic escape hatch: mirror across the crop center
            dbox.cx = search - gt.cx;
            dbox.cy = search - gt.cy;
        }
        let dcolor = jitter_color(color, &mut rng);
        paint_shape(&mut x, &shape, &dbox, dcolor);
        distractors.push(dbox);
    }
    paint_shape(&mut x, &shape, &gt, color);

    TrainingPair {
        z,
        x,
        gt,
        distractors,
        target_color: color,
    }
}

/// A rendered sequence with per-frame ground truth and the distractor tracks
/// that were painted beneath the target.
#[derive(Debug, Clone)]
pub struct SynthSequence {
    pub frames: Vec<Tensor<f32>>,
    pub gt: Vec<BBox>,
    pub distractor_tracks: Vec<Vec<BBox>>,
}

/// Smooth sinusoidal target motion with oscillating scale, plus distractors
/// on straight relative paths that coincide with the target partway through.
pub fn synth_sequence(cfg: &SynthConfig, seed: u64, n_frames: usize) -> SynthSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = sample_shape(&mut rng);
    let color = sample_color(&mut rng);
    let side = cfg.frame_size as f64;
    let mid = side / 2.0;

    let s0 = rng.gen_range(24.0..40.0);
    let q = (rng.gen_range(cfg.aspect_range.0.ln()..cfg.aspect_range.1.ln())).exp();
    let amp_x: f64 = rng.gen_range(30.0..60.0);
    let amp_y: f64 = rng.gen_range(30.0..60.0);
    let w_x = rng.gen_range(0.02..(4.5 / amp_x).min(0.12));
    let w_y = rng.gen_range(0.02..(4.5 / amp_y).min(0.12));
    let (ph_x, ph_y) = (rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28));
    let w_s = rng.gen_range(0.03..0.08);
    let ph_s = rng.gen_range(0.0..6.28);

    let target_at = |t: f64| {
        let s = s0 * (0.22 * (w_s * t + ph_s).sin()).exp();
        BBox::new(
            mid + amp_x * (w_x * t + ph_x).sin(),
            mid + amp_y * (w_y * t + ph_y).sin(),
            s / q.sqrt(),
            s * q.sqrt(),
        )
    };

    let n_distractors = rng.gen_range(cfg.distractors.0.max(1)..=cfg.distractors.1.max(1));
    let mut tracks: Vec<Vec<BBox>> = Vec::new();
    let mut track_colors = Vec::new();
    for _ in 0..n_distractors {
        let t_cross = rng.gen_range(0.3..0.7) * n_frames as f64;
        let speed = rng.gen_range(1.5..3.5);
        let dir = rng.gen_range(0.0..std::f64::consts::TAU);
        let (vx, vy) = (speed * dir.cos(), speed * dir.sin());
        let scale = rng.gen_range(0.8..1.2);
        let track = (0..n_frames)
            .map(|t| {
                let base = target_at(t_cross);
                let dt = t as f64 - t_cross;
                BBox::new(
                    base.cx + vx * dt,
                    base.cy + vy * dt,
                    base.w * scale,
                    base.h * scale,
                )
            })
            .collect();
        tracks.push(track);
        track_colors.push(jitter_color(color, &mut rng));
    }

    let cells = rng.gen_range(4..=6);
    let mut grid = Tensor::<f32>::zeros(&[3, cells, cells]);
    for v in grid.data_mut() {
        *v = rng.gen_range(0.0..0.55);
    }
    let backdrop = resize_bilinear(&grid, cfg.frame_size, cfg.frame_size).expect("grid resize");

    let mut frames = Vec::with_capacity(n_frames);
    let mut gt = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let mut frame = backdrop.clone();
        for v in frame.data_mut() {
            *v = (*v + rng.gen_range(-cfg.noise..cfg.noise) as f32).clamp(0.0, 1.0);
        }
        for (track, dcolor) in tracks.iter().zip(&track_colors) {
            paint_shape(&mut frame, &shape, &track[t], *dcolor);
        }
        let tb = target_at(t as f64);
        paint_shape(&mut frame, &shape, &tb, color);
        frames.push(frame);
        gt.push(tb);
    }

    SynthSequence {
        frames,
        gt,
        distractor_tracks: tracks,
    }
}
