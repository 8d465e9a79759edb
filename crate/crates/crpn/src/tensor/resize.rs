//! Bilinear resampling with align-corners semantics: corner pixels of the
//! input map exactly onto corner pixels of the output, and resizing to the
//! same extent is the identity.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[inline]
fn src_pos(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    if dst_len <= 1 || src_len <= 1 {
        return (0, 0, 0.0);
    }
    let pos = dst as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
    let lo = pos.floor() as usize;
    let lo = lo.min(src_len - 2);
    let frac = pos - lo as f64;
    (lo, lo + 1, frac)
}

/// Resize a [C,H,W] tensor to [C,oh,ow].
pub fn resize_bilinear<E: Scalar>(input: &Tensor<E>, oh: usize, ow: usize) -> Result<Tensor<E>> {
    if input.rank() != 3 {
        return Err(Error::shape(
            "resize_bilinear",
            format!("input must be [C,H,W], got {:?}", input.dims()),
        ));
    }
    if oh == 0 || ow == 0 {
        return Err(Error::shape(
            "resize_bilinear",
            format!("target {}x{} must be positive", oh, ow),
        ));
    }
    let (c, h, w) = (input.c(), input.h(), input.w());
    if oh == h && ow == w {
        return Ok(input.clone());
    }
    let mut out = Tensor::zeros(&[c, oh, ow]);
    // precompute the horizontal taps once
    let xs: Vec<(usize, usize, f64)> = (0..ow).map(|x| src_pos(x, w, ow)).collect();
    for ci in 0..c {
        for oy in 0..oh {
            let (y0, y1, fy) = src_pos(oy, h, oh);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v00 = input.at3(ci, y0, x0).to_f64();
                let v01 = input.at3(ci, y0, x1).to_f64();
                let v10 = input.at3(ci, y1, x0).to_f64();
                let v11 = input.at3(ci, y1, x1).to_f64();
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out.set3(ci, oy, ox, E::from_f64(top + (bot - top) * fy));
            }
        }
    }
    Ok(out)
}

/// Backward of `resize_bilinear`: scatters each output gradient onto the four
/// source taps with the same interpolation weights.
pub fn resize_bilinear_backward<E: Scalar>(
    in_dims: &[usize],
    grad_out: &Tensor<E>,
) -> Result<Tensor<E>> {
    if in_dims.len() != 3 || grad_out.rank() != 3 || in_dims[0] != grad_out.c() {
        return Err(Error::shape(
            "resize_bilinear_backward",
            format!("input {:?} vs grad_out {:?}", in_dims, grad_out.dims()),
        ));
    }
    let (c, h, w) = (in_dims[0], in_dims[1], in_dims[2]);
    let (oh, ow) = (grad_out.h(), grad_out.w());
    if oh == h && ow == w {
        return Ok(grad_out.clone());
    }
    let mut grad_in = Tensor::zeros(in_dims);
    let xs: Vec<(usize, usize, f64)> = (0..ow).map(|x| src_pos(x, w, ow)).collect();
    for ci in 0..c {
        for oy in 0..oh {
            let (y0, y1, fy) = src_pos(oy, h, oh);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = grad_out.at3(ci, oy, ox).to_f64();
                let w00 = (1.0 - fy) * (1.0 - fx);
                let w01 = (1.0 - fy) * fx;
                let w10 = fy * (1.0 - fx);
                let w11 = fy * fx;
                let d = grad_in.data_mut();
                let base = (ci * h + y0) * w;
                d[base + x0] += E::from_f64(g * w00);
                d[base + x1] += E::from_f64(g * w01);
                let base1 = (ci * h + y1) * w;
                d[base1 + x0] += E::from_f64(g * w10);
                d[base1 + x1] += E::from_f64(g * w11);
            }
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_0_2_upsamples_to_0_1_2() {
        let input = Tensor::from_vec(&[1, 1, 2], vec![0.0f64, 2.0]).unwrap();
        let out = resize_bilinear(&input, 1, 3).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn identity_when_same_size() {
        let input = Tensor::from_vec(&[1, 2, 2], vec![0.5f32, -1.0, 3.0, 7.0]).unwrap();
        let out = resize_bilinear(&input, 2, 2).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn corners_map_exactly_and_constant_is_preserved() {
        let mut input = Tensor::zeros(&[1, 3, 3]);
        for (i, v) in input.data_mut().iter_mut().enumerate() {
            *v = i as f64;
        }
        let out = resize_bilinear(&input, 7, 5).unwrap();
        assert_eq!(out.at3(0, 0, 0), input.at3(0, 0, 0));
        assert_eq!(out.at3(0, 6, 0), input.at3(0, 2, 0));
        assert_eq!(out.at3(0, 0, 4), input.at3(0, 0, 2));
        assert_eq!(out.at3(0, 6, 4), input.at3(0, 2, 2));

        let c = Tensor::filled(&[2, 4, 4], 3.25f64);
        let up = resize_bilinear(&c, 9, 6).unwrap();
        assert!(up.data().iter().all(|&v| (v - 3.25).abs() < 1e-12));
        let down = resize_bilinear(&c, 2, 3).unwrap();
        assert!(down.data().iter().all(|&v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn rejects_zero_target() {
        let input = Tensor::<f32>::zeros(&[1, 3, 3]);
        assert!(resize_bilinear(&input, 0, 3).is_err());
    }
}
