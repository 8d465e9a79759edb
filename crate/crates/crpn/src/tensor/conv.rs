//! Convolution-family kernels: plain conv, transposed conv, and the
//! correlation used to match template features against search features.
//! All of them lower to im2col/col2im plus one GEMM, which keeps the inner
//! loops in `matrixmultiply`. Convolution here is correlation-style: kernels
//! are applied unflipped.

use super::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Gathers conv patches: cols[(ci*kh+dy)*kw+dx][oy*wo+ox] = x[ci][oy*s+dy-p][ox*s+dx-p].
fn im2col<E: Scalar>(
    x: &Tensor<E>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<E> {
    let (c, h, w) = (x.c(), x.h(), x.w());
    let sites = ho * wo;
    let mut cols = vec![E::ZERO; c * kh * kw * sites];
    let data = x.data();
    for ci in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = ((ci * kh + dy) * kw + dx) * sites;
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = (ci * h + iy as usize) * w;
                    let dst = row + oy * wo;
                    if stride == 1 {
                        // unit stride reads a contiguous span of the input
                        // row; clip it against the padding border and copy
                        let ix0 = dx as isize - pad as isize;
                        let lo = (-ix0).max(0) as usize;
                        let hi = (w as isize - ix0).clamp(0, wo as isize) as usize;
                        if lo < hi {
                            let s0 = (src as isize + ix0 + lo as isize) as usize;
                            cols[dst + lo..dst + hi]
                                .copy_from_slice(&data[s0..s0 + hi - lo]);
                        }
                    } else {
                        for ox in 0..wo {
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[dst + ox] = data[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add inverse of `im2col`.
fn col2im<E: Scalar>(
    cols: &[E],
    c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    out: &mut Tensor<E>,
) {
    let sites = ho * wo;
    let data = out.data_mut();
    for ci in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = ((ci * kh + dy) * kw + dx) * sites;
                for oy in 0..ho {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (ci * h + iy as usize) * w;
                    let src = row + oy * wo;
                    if stride == 1 {
                        let ix0 = dx as isize - pad as isize;
                        let lo = (-ix0).max(0) as usize;
                        let hi = (w as isize - ix0).clamp(0, wo as isize) as usize;
                        if lo < hi {
                            let d0 = (dst as isize + ix0 + lo as isize) as usize;
                            let run = hi - lo;
                            let (a, b) =
                                (&mut data[d0..d0 + run], &cols[src + lo..src + hi]);
                            for i in 0..run {
                                a[i] += b[i];
                            }
                        }
                    } else {
                        for ox in 0..wo {
                            let ix = (ox * stride + dx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            data[dst + ix as usize] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_args<E: Scalar>(
    op: &'static str,
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    in_ch_axis: usize,
    out_ch_axis: usize,
    stride: usize,
) -> Result<()> {
    if input.rank() != 3 {
        return Err(Error::shape(
            op,
            format!("input must be [C,H,W], got {:?}", input.dims()),
        ));
    }
    if weight.rank() != 4 {
        return Err(Error::shape(
            op,
            format!("weight must be rank 4, got {:?}", weight.dims()),
        ));
    }
    if stride == 0 {
        return Err(Error::shape(op, "stride must be >= 1".to_string()));
    }
    let cin = weight.dims()[in_ch_axis];
    if input.c() != cin {
        return Err(Error::shape(
            op,
            format!(
                "input has {} channels but weight expects {}",
                input.c(),
                cin
            ),
        ));
    }
    if let Some(b) = bias {
        let cout = weight.dims()[out_ch_axis];
        if b.rank() != 1 || b.dims()[0] != cout {
            return Err(Error::shape(
                op,
                format!(
                    "bias shape {:?} does not match {} output channels",
                    b.dims(),
                    cout
                ),
            ));
        }
    }
    Ok(())
}

/// 2-D convolution (correlation-style, unflipped kernels).
/// input [Cin,H,W], weight [Cout,Cin,kh,kw], bias [Cout].
pub fn conv2d<E: Scalar>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    check_conv_args("conv2d", input, weight, bias, 1, 0, stride)?;
    let (h, w) = (input.h(), input.w());
    let (cout, cin, kh, kw) = (
        weight.dims()[0],
        weight.dims()[1],
        weight.dims()[2],
        weight.dims()[3],
    );
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel {}x{} larger than padded input {}x{}",
                kh,
                kw,
                h + 2 * pad,
                w + 2 * pad
            ),
        ));
    }
    let ho = out_extent(h, kh, stride, pad);
    let wo = out_extent(w, kw, stride, pad);
    let sites = ho * wo;
    let cols = im2col(input, kh, kw, stride, pad, ho, wo);
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    gemm_nn(
        cout,
        cin * kh * kw,
        sites,
        weight.data(),
        &cols,
        E::ZERO,
        out.data_mut(),
    );
    if let Some(b) = bias {
        let od = out.data_mut();
        for co in 0..cout {
            let bv = b.data()[co];
            for v in &mut od[co * sites..(co + 1) * sites] {
                *v += bv;
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<E: Scalar> {
    pub input: Tensor<E>,
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

/// Analytic backward of `conv2d` for input, weight and bias.
pub fn conv2d_backward<E: Scalar>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    grad_out: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<E>> {
    check_conv_args("conv2d_backward", input, weight, None, 1, 0, stride)?;
    let (h, w) = (input.h(), input.w());
    let (cout, cin, kh, kw) = (
        weight.dims()[0],
        weight.dims()[1],
        weight.dims()[2],
        weight.dims()[3],
    );
    let ho = out_extent(h, kh, stride, pad);
    let wo = out_extent(w, kw, stride, pad);
    if grad_out.dims() != [cout, ho, wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out {:?} does not match output [{},{},{}]",
                grad_out.dims(),
                cout,
                ho,
                wo
            ),
        ));
    }
    let sites = ho * wo;
    let ckk = cin * kh * kw;

    let mut grad_bias = Tensor::zeros(&[cout]);
    for co in 0..cout {
        let mut s = E::ZERO;
        for &g in &grad_out.data()[co * sites..(co + 1) * sites] {
            s += g;
        }
        grad_bias.data_mut()[co] = s;
    }

    let cols = im2col(input, kh, kw, stride, pad, ho, wo);
    let mut grad_weight = Tensor::zeros(weight.dims());
    gemm_nt(
        cout,
        sites,
        ckk,
        grad_out.data(),
        &cols,
        E::ZERO,
        grad_weight.data_mut(),
    );

    let mut grad_cols = vec![E::ZERO; ckk * sites];
    gemm_tn(
        ckk,
        cout,
        sites,
        weight.data(),
        grad_out.data(),
        E::ZERO,
        &mut grad_cols,
    );
    let mut grad_input = Tensor::zeros(input.dims());
    col2im(
        &grad_cols, cin, kh, kw, stride, pad, h, w, ho, wo, &mut grad_input,
    );

    Ok(ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

/// Transposed convolution. input [Cin,H,W], weight [Cin,Cout,kh,kw],
/// bias [Cout]; output [Cout,(H-1)*stride+kh,(W-1)*stride+kw].
pub fn transposed_conv2d<E: Scalar>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
) -> Result<Tensor<E>> {
    check_conv_args("transposed_conv2d", input, weight, bias, 0, 1, stride)?;
    let (h, w) = (input.h(), input.w());
    let (cin, cout, kh, kw) = (
        weight.dims()[0],
        weight.dims()[1],
        weight.dims()[2],
        weight.dims()[3],
    );
    let ho = (h - 1) * stride + kh;
    let wo = (w - 1) * stride + kw;
    let sites = h * w;
    let ckk = cout * kh * kw;

    // cols[Cout*kh*kw, H*W] = weight^T[Cout*kh*kw, Cin] * input[Cin, H*W]
    let mut cols = vec![E::ZERO; ckk * sites];
    gemm_tn(ckk, cin, sites, weight.data(), input.data(), E::ZERO, &mut cols);

    let mut out = Tensor::zeros(&[cout, ho, wo]);
    col2im(&cols, cout, kh, kw, stride, 0, ho, wo, h, w, &mut out);
    if let Some(b) = bias {
        let hw = ho * wo;
        let od = out.data_mut();
        for co in 0..cout {
            let bv = b.data()[co];
            for v in &mut od[co * hw..(co + 1) * hw] {
                *v += bv;
            }
        }
    }
    Ok(out)
}

pub struct DeconvGrads<E: Scalar> {
    pub input: Tensor<E>,
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

pub fn transposed_conv2d_backward<E: Scalar>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    grad_out: &Tensor<E>,
    stride: usize,
) -> Result<DeconvGrads<E>> {
    check_conv_args(
        "transposed_conv2d_backward",
        input,
        weight,
        None,
        0,
        1,
        stride,
    )?;
    let (h, w) = (input.h(), input.w());
    let (cin, cout, kh, kw) = (
        weight.dims()[0],
        weight.dims()[1],
        weight.dims()[2],
        weight.dims()[3],
    );
    let ho = (h - 1) * stride + kh;
    let wo = (w - 1) * stride + kw;
    if grad_out.dims() != [cout, ho, wo] {
        return Err(Error::shape(
            "transposed_conv2d_backward",
            format!(
                "grad_out {:?} does not match output [{},{},{}]",
                grad_out.dims(),
                cout,
                ho,
                wo
            ),
        ));
    }
    let sites = h * w;
    let ckk = cout * kh * kw;

    let mut grad_bias = Tensor::zeros(&[cout]);
    let hw = ho * wo;
    for co in 0..cout {
        let mut s = E::ZERO;
        for &g in &grad_out.data()[co * hw..(co + 1) * hw] {
            s += g;
        }
        grad_bias.data_mut()[co] = s;
    }

    // Patches of grad_out seen from each input site.
    let gcols = im2col(grad_out, kh, kw, stride, 0, h, w);

    // grad_input[Cin, H*W] = weight[Cin, Cout*kh*kw] * gcols
    let mut grad_input = Tensor::zeros(input.dims());
    gemm_nn(
        cin,
        ckk,
        sites,
        weight.data(),
        &gcols,
        E::ZERO,
        grad_input.data_mut(),
    );

    // grad_weight[Cin, Cout*kh*kw] = input[Cin, H*W] * gcols^T
    let mut grad_weight = Tensor::zeros(weight.dims());
    gemm_nt(
        cin,
        sites,
        ckk,
        input.data(),
        &gcols,
        E::ZERO,
        grad_weight.data_mut(),
    );

    Ok(DeconvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    })
}

/// Valid-mode correlation of a stack of kernels against one search map.
/// kernels [K,C,kh,kw] (or [C,kh,kw] for a single kernel), search [C,H,W];
/// output [K,H-kh+1,W-kw+1].
pub fn cross_correlate<E: Scalar>(kernels: &Tensor<E>, search: &Tensor<E>) -> Result<Tensor<E>> {
    let k4 = promote_kernels("cross_correlate", kernels)?;
    let view = Tensor::from_vec(&k4, kernels.data().to_vec())?;
    let out = conv2d(search, &view, None, 1, 0);
    match out {
        Err(Error::Shape { msg, .. }) => Err(Error::shape("cross_correlate", msg)),
        other => other,
    }
}

pub struct CorrGrads<E: Scalar> {
    pub kernels: Tensor<E>,
    pub search: Tensor<E>,
}

pub fn cross_correlate_backward<E: Scalar>(
    kernels: &Tensor<E>,
    search: &Tensor<E>,
    grad_out: &Tensor<E>,
) -> Result<CorrGrads<E>> {
    let k4 = promote_kernels("cross_correlate_backward", kernels)?;
    let view = Tensor::from_vec(&k4, kernels.data().to_vec())?;
    let g = conv2d_backward(search, &view, grad_out, 1, 0)?;
    let mut grad_kernels = g.weight;
    if kernels.rank() == 3 {
        grad_kernels = Tensor::from_vec(kernels.dims(), grad_kernels.into_data())?;
    }
    Ok(CorrGrads {
        kernels: grad_kernels,
        search: g.input,
    })
}

fn promote_kernels<E: Scalar>(op: &'static str, kernels: &Tensor<E>) -> Result<Vec<usize>> {
    match kernels.rank() {
        3 => Ok(vec![1, kernels.c(), kernels.h(), kernels.w()]),
        4 => Ok(kernels.dims().to_vec()),
        r => Err(Error::shape(
            op,
            format!("kernels must be rank 3 or 4, got rank {r}"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as the oracle in tests.
    fn conv2d_naive(
        input: &Tensor<f64>,
        weight: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (cin, h, w) = (input.c(), input.h(), input.w());
        let (cout, _, kh, kw) = (
            weight.dims()[0],
            weight.dims()[1],
            weight.dims()[2],
            weight.dims()[3],
        );
        let ho = out_extent(h, kh, stride, pad);
        let wo = out_extent(w, kw, stride, pad);
        let mut out = Tensor::zeros(&[cout, ho, wo]);
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (oy * stride + dy) as isize - pad as isize;
                                let ix = (ox * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += input.at3(ci, iy as usize, ix as usize)
                                    * weight.data()
                                        [((co * cin + ci) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out.set3(co, oy, ox, acc);
                }
            }
        }
        out
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(dims, data).unwrap()
    }

    #[test]
    fn all_ones_3x3_valid_gives_nine() {
        let input = Tensor::filled(&[1, 3, 3], 1.0f64);
        let weight = Tensor::filled(&[1, 1, 3, 3], 1.0f64);
        let out = conv2d(&input, &weight, None, 1, 0).unwrap();
        assert_eq!(out.dims(), &[1, 1, 1]);
        assert_eq!(out.data()[0], 9.0);
    }

    #[test]
    fn identity_1x1_kernel_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = rand_tensor(&mut rng, &[1, 5, 4]);
        let weight = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0f64]).unwrap();
        let out = conv2d(&input, &weight, None, 1, 0).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn matches_naive_oracle_over_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cases = [
            (3usize, 5usize, 7usize, 2usize, 3usize, 1usize, 1usize),
            (2, 8, 8, 4, 3, 2, 1),
            (1, 6, 5, 3, 2, 1, 0),
            (4, 9, 9, 2, 5, 2, 2),
        ];
        for &(cin, h, w, cout, k, stride, pad) in &cases {
            let input = rand_tensor(&mut rng, &[cin, h, w]);
            let weight = rand_tensor(&mut rng, &[cout, cin, k, k]);
            let bias = rand_tensor(&mut rng, &[cout]);
            let fast = conv2d(&input, &weight, Some(&bias), stride, pad).unwrap();
            let slow = conv2d_naive(&input, &weight, Some(&bias), stride, pad);
            assert_eq!(fast.dims(), slow.dims());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn channel_mismatch_names_both_extents() {
        let input = Tensor::<f32>::zeros(&[3, 8, 8]);
        let weight = Tensor::<f32>::zeros(&[4, 5, 3, 3]);
        let err = conv2d(&input, &weight, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains('3') && err.contains('5'), "{err}");
    }

    #[test]
    fn correlation_equals_unflipped_valid_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let search = rand_tensor(&mut rng, &[3, 9, 9]);
        let kernels = rand_tensor(&mut rng, &[4, 3, 4, 4]);
        let corr = cross_correlate(&kernels, &search).unwrap();
        let conv = conv2d(&search, &kernels, None, 1, 0).unwrap();
        assert_eq!(corr.dims(), &[4, 6, 6]);
        for (a, b) in corr.data().iter().zip(conv.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn correlation_peak_on_embedded_patch() {
        // embed a copy of the kernel in a zero search map; response peaks there
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let kernel = rand_tensor(&mut rng, &[2, 3, 3]);
        let mut search = Tensor::zeros(&[2, 8, 8]);
        for c in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    search.set3(c, y + 4, x + 2, kernel.at3(c, y, x));
                }
            }
        }
        let out = cross_correlate(&kernel, &search).unwrap();
        let (mut best, mut best_i) = (f64::MIN, 0);
        for (i, &v) in out.data().iter().enumerate() {
            if v > best {
                best = v;
                best_i = i;
            }
        }
        let wo = out.w();
        assert_eq!((best_i / wo, best_i % wo), (4, 2));
    }

    #[test]
    fn transposed_conv_shapes_and_sum() {
        // stride-2 2x2 deconv of a 2x2 input gives 4x4; with all-ones weight
        // and input, every output cell receives exactly one contribution
        let input = Tensor::filled(&[1, 2, 2], 1.0f64);
        let weight = Tensor::filled(&[1, 1, 2, 2], 1.0f64);
        let out = transposed_conv2d(&input, &weight, None, 2).unwrap();
        assert_eq!(out.dims(), &[1, 4, 4]);
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, deconv(y)> for matching geometries
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[3, 7, 7]);
        let w = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        let conv = conv2d(&x, &w, None, 2, 0).unwrap();
        let y = rand_tensor(&mut rng, &[2, conv.h(), conv.w()]);
        // conv weight [Cout,Cin,kh,kw] reads as deconv weight [Cin,Cout,kh,kw]
        // on the same buffer, which is exactly the adjoint pairing
        let back = transposed_conv2d(&y, &w, None, 2).unwrap();
        let lhs: f64 = conv.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
