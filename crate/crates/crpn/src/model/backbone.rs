//! Shared convolutional backbone. Both crops (template and search) run
//! through the same weights; the emit layers' activations form a small
//! feature pyramid ordered deepest level first.

use super::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_backward, relu, relu_backward, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct FeaturePyramid<E: Scalar> {
    /// levels[0] is the deepest emit layer's output.
    pub levels: Vec<Tensor<E>>,
}

/// Per-layer activations recorded during the forward pass, needed to replay
/// the chain rule without recomputing the whole network.
#[derive(Debug, Clone)]
pub struct BackboneTrace<E: Scalar> {
    /// Pre-activation output of each layer.
    pre: Vec<Tensor<E>>,
    /// Post-activation output of each layer (equal to pre when no relu).
    post: Vec<Tensor<E>>,
}

pub fn extract_features<E: Scalar>(
    params: &ModelParams<E>,
    image: &Tensor<E>,
) -> Result<(FeaturePyramid<E>, BackboneTrace<E>)> {
    if image.rank() != 3 || image.dims()[0] != params.arch.backbone[0].in_ch {
        return Err(Error::shape(
            "extract_features",
            format!(
                "expected [{}, H, W] image, got {:?}",
                params.arch.backbone[0].in_ch,
                image.dims()
            ),
        ));
    }
    let mut pre = Vec::with_capacity(params.backbone.len());
    let mut post = Vec::with_capacity(params.backbone.len());
    let mut x = image.clone();
    for (layer, spec) in params.backbone.iter().zip(&params.arch.backbone) {
        let p = conv2d(
            &x,
            &layer.weight.value,
            Some(&layer.bias.value),
            layer.stride,
            layer.pad,
        )?;
        let q = if spec.relu { relu(&p) } else { p.clone() };
        pre.push(p);
        x = q.clone();
        post.push(q);
    }
    let levels = params
        .arch
        .emit
        .iter()
        .map(|&l| post[l].clone())
        .collect();
    Ok((FeaturePyramid { levels }, BackboneTrace { pre, post }))
}

/// Accumulates parameter gradients for one image given gradients flowing into
/// any subset of pyramid levels (`d_levels[i]` pairs with `levels[i]`).
pub fn backbone_backward<E: Scalar>(
    params: &mut ModelParams<E>,
    image: &Tensor<E>,
    trace: &BackboneTrace<E>,
    d_levels: &[Option<Tensor<E>>],
) -> Result<()> {
    let n = params.backbone.len();
    if trace.pre.len() != n || d_levels.len() != params.arch.emit.len() {
        return Err(Error::shape(
            "backbone_backward",
            format!(
                "trace covers {} layers, model has {n}; {} level grads for {} emits",
                trace.pre.len(),
                d_levels.len(),
                params.arch.emit.len()
            ),
        ));
    }
    // gradient w.r.t. each layer's post-activation output
    let mut g: Option<Tensor<E>> = None;
    for layer in (0..n).rev() {
        if let Some(pos) = params.arch.emit.iter().position(|&l| l == layer) {
            if let Some(dl) = &d_levels[pos] {
                g = Some(match g {
                    Some(acc) => crate::tensor::add(&acc, dl)?,
                    None => dl.clone(),
                });
            }
        }
        let Some(g_post) = g.take() else { continue };
        let g_pre = if params.arch.backbone[layer].relu {
            relu_backward(&trace.pre[layer], &g_post)?
        } else {
            g_post
        };
        let input = if layer == 0 {
            image
        } else {
            &trace.post[layer - 1]
        };
        let conv = &mut params.backbone[layer];
        let grads = conv2d_backward(input, &conv.weight.value, &g_pre, conv.stride, conv.pad)?;
        conv.weight.accumulate(&grads.weight)?;
        conv.bias.accumulate(&grads.bias)?;
        if layer > 0 {
            g = Some(grads.input);
        }
    }
    Ok(())
}
