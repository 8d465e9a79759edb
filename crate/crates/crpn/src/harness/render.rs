//! Debug overlays burned into frame copies: prediction and groundtruth
//! outlines plus an optional banner listing how many anchors survived each
//! filtering stage.

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::FilterMeta;
use crate::tensor::Tensor;

pub const PRED_COLOR: [f32; 3] = [1.0, 0.1, 0.1];
pub const GT_COLOR: [f32; 3] = [0.1, 1.0, 0.2];
const BANNER_COLOR: [f32; 3] = [1.0, 1.0, 0.3];

/// 3x5 glyphs for '0'..'9' and '/', one bit per pixel, rows top to bottom.
const GLYPHS: [(char, [u8; 5]); 11] = [
    ('0', [0b111, 0b101, 0b101, 0b101, 0b111]),
    ('1', [0b010, 0b110, 0b010, 0b010, 0b111]),
    ('2', [0b111, 0b001, 0b111, 0b100, 0b111]),
    ('3', [0b111, 0b001, 0b111, 0b001, 0b111]),
    ('4', [0b101, 0b101, 0b111, 0b001, 0b001]),
    ('5', [0b111, 0b100, 0b111, 0b001, 0b111]),
    ('6', [0b111, 0b100, 0b111, 0b101, 0b111]),
    ('7', [0b111, 0b001, 0b010, 0b010, 0b010]),
    ('8', [0b111, 0b101, 0b111, 0b101, 0b111]),
    ('9', [0b111, 0b101, 0b111, 0b001, 0b111]),
    ('/', [0b001, 0b001, 0b010, 0b100, 0b100]),
];

fn put_pixel(img: &mut Tensor<f32>, y: i64, x: i64, color: [f32; 3]) {
    let (h, w) = (img.dims()[1] as i64, img.dims()[2] as i64);
    if y < 0 || x < 0 || y >= h || x >= w {
        return;
    }
    for (ch, &v) in color.iter().enumerate() {
        img.set3(ch, y as usize, x as usize, v);
    }
}

fn draw_rect(img: &mut Tensor<f32>, b: &BBox, thickness: i64, color: [f32; 3]) {
    let (x1, y1) = (b.x1().round() as i64, b.y1().round() as i64);
    let (x2, y2) = (b.x2().round() as i64, b.y2().round() as i64);
    for t in 0..thickness {
        for x in (x1 - t)..=(x2 + t) {
            put_pixel(img, y1 - t, x, color);
            put_pixel(img, y2 + t, x, color);
        }
        for y in (y1 - t)..=(y2 + t) {
            put_pixel(img, y, x1 - t, color);
            put_pixel(img, y, x2 + t, color);
        }
    }
}

fn draw_text(img: &mut Tensor<f32>, y0: i64, x0: i64, text: &str, color: [f32; 3]) {
    let mut x = x0;
    for c in text.chars() {
        if let Some((_, rows)) = GLYPHS.iter().find(|(g, _)| *g == c) {
            for (dy, bits) in rows.iter().enumerate() {
                for dx in 0..3 {
                    if bits >> (2 - dx) & 1 == 1 {
                        put_pixel(img, y0 + dy as i64, x + dx, color);
                    }
                }
            }
        }
        x += 4;
    }
}

/// Copies the frame and burns in a 2-px prediction outline, a 1-px
/// groundtruth outline in a different color, and (when `filters` is given)
/// a survivor-count banner like `405/97/31` in the top-left corner.
pub fn render_overlay(
    frame: &Tensor<f32>,
    pred: &BBox,
    gt: Option<&BBox>,
    filters: Option<&[FilterMeta]>,
) -> Result<Tensor<f32>> {
    if frame.rank() != 3 || frame.dims()[0] != 3 {
        return Err(Error::shape(
            "render_overlay",
            format!("expected a [3,H,W] frame, got {:?}", frame.dims()),
        ));
    }
    let mut img = frame.clone();
    if let Some(g) = gt {
        draw_rect(&mut img, g, 1, GT_COLOR);
    }
    draw_rect(&mut img, pred, 2, PRED_COLOR);
    if let Some(meta) = filters {
        let mut text = String::new();
        for (i, m) in meta.iter().enumerate() {
            if i == 0 {
                text.push_str(&m.input.to_string());
            }
            text.push('/');
            text.push_str(&m.kept.to_string());
        }
        draw_text(&mut img, 2, 2, &text, BANNER_COLOR);
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_vec(&[3, h, w], vec![0.5; 3 * h * w]).unwrap()
    }

    #[test]
    fn prediction_outline_is_two_pixels_thick() {
        let frame = gray(40, 40);
        let b = BBox::from_corner(10.0, 10.0, 12.0, 12.0);
        let img = render_overlay(&frame, &b, None, None).unwrap();
        // rows 9 and 10 across the top edge carry the prediction color
        for x in 10..=22 {
            assert_eq!(img.at3(0, 9, x), PRED_COLOR[0]);
            assert_eq!(img.at3(0, 10, x), PRED_COLOR[0]);
        }
        // interior untouched
        assert_eq!(img.at3(0, 16, 16), 0.5);
    }

    #[test]
    fn gt_outline_uses_a_different_color() {
        let frame = gray(40, 40);
        let pred = BBox::from_corner(4.0, 4.0, 8.0, 8.0);
        let gt = BBox::from_corner(24.0, 24.0, 8.0, 8.0);
        let img = render_overlay(&frame, &pred, Some(&gt), None).unwrap();
        assert_eq!(img.at3(1, 24, 28), GT_COLOR[1]);
        assert_ne!(PRED_COLOR, GT_COLOR);
    }

    #[test]
    fn boxes_partly_outside_the_frame_are_clipped() {
        let frame = gray(20, 20);
        let b = BBox::new(0.0, 0.0, 16.0, 16.0); // centered on the corner
        let img = render_overlay(&frame, &b, None, None).unwrap();
        assert_eq!(img.dims(), &[3, 20, 20]);
    }

    #[test]
    fn banner_appears_only_with_diagnostics() {
        let frame = gray(60, 60);
        let b = BBox::from_corner(30.0, 30.0, 16.0, 16.0);
        let meta = vec![
            FilterMeta { stage: 1, input: 405, kept: 97, fallback_fired: false, clamped: 0 },
            FilterMeta { stage: 2, input: 97, kept: 31, fallback_fired: false, clamped: 0 },
        ];
        let with = render_overlay(&frame, &b, None, Some(&meta)).unwrap();
        let without = render_overlay(&frame, &b, None, None).unwrap();
        let differs = with
            .data()
            .iter()
            .zip(without.data())
            .any(|(a, b)| a != b);
        assert!(differs, "banner should change pixels in the corner");
        // deterministic: same inputs, same bytes
        let again = render_overlay(&frame, &b, None, Some(&meta)).unwrap();
        assert_eq!(with.data(), again.data());
    }

    #[test]
    fn non_rgb_input_is_rejected() {
        let frame = Tensor::<f32>::zeros(&[1, 10, 10]);
        let b = BBox::from_corner(1.0, 1.0, 4.0, 4.0);
        assert!(render_overlay(&frame, &b, None, None).is_err());
    }
}
