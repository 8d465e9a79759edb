//! The Siamese cascade model: a shared convolutional backbone emitting a
//! small feature pyramid (deepest level first), per-stage proposal heads, and
//! the transfer blocks that fuse one stage's features into the next.

mod backbone;
mod cascade;

pub use backbone::{backbone_backward, extract_features, BackboneTrace, FeaturePyramid};
pub use cascade::{
    backward_pair, build_template_cache, filter_anchors, forward_pair, ftb_fuse, rpn_stage,
    run_cascade, run_cascade_cached, AnchorScore, CascadeRun, FilterMeta, PairTrace, StageGrads,
    StageOutput, TemplateCache,
};

use crate::error::{Error, Result};
use crate::tensor::{ParamTensor, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
}

/// Static architecture description. The cascade runs deepest-first: pyramid
/// level 0 comes from the deepest emit layer and feeds stage 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub backbone: Vec<ConvSpec>,
    /// Backbone layer indices that emit pyramid levels, deepest level first.
    pub emit: Vec<usize>,
    pub template_size: usize,
    pub search_size: usize,
    /// Anchor aspect ratios (h/w); one anchor per ratio per grid site.
    pub ratios: Vec<f64>,
    pub anchor_base: f64,
    /// Number of cascade stages (1..=emit.len()).
    pub stages: usize,
    /// When false, each stage consumes its raw pyramid level directly and no
    /// transfer blocks exist.
    pub ftb: bool,
    pub freeze_first: bool,
}

impl ArchConfig {
    /// Desk-scale reference geometry: 64px templates, 128px search crops,
    /// three pyramid levels, three cascade stages.
    pub fn reference() -> Self {
        let c = |i, o, s, relu| ConvSpec {
            in_ch: i,
            out_ch: o,
            kernel: 3,
            stride: s,
            pad: 1,
            relu,
        };
        ArchConfig {
            backbone: vec![
                c(3, 16, 2, true),
                c(16, 32, 2, true),
                c(32, 32, 1, true),
                c(32, 48, 2, true),
                c(48, 48, 1, false),
            ],
            emit: vec![4, 2, 1],
            template_size: 64,
            search_size: 128,
            ratios: vec![0.33, 0.5, 1.0, 2.0, 3.0],
            anchor_base: 56.0,
            stages: 3,
            ftb: true,
            freeze_first: true,
        }
    }

    /// Miniature geometry for finite-difference checks: same topology, a few
    /// channels, nothing frozen.
    pub fn tiny() -> Self {
        let c = |i, o, s, relu| ConvSpec {
            in_ch: i,
            out_ch: o,
            kernel: 3,
            stride: s,
            pad: 1,
            relu,
        };
        ArchConfig {
            backbone: vec![
                c(3, 2, 2, true),
                c(2, 3, 2, true),
                c(3, 3, 1, true),
                c(3, 4, 2, true),
                c(4, 4, 1, false),
            ],
            emit: vec![4, 2, 1],
            template_size: 16,
            search_size: 32,
            ratios: vec![0.5, 1.0, 2.0],
            anchor_base: 12.0,
            stages: 3,
            ftb: true,
            freeze_first: false,
        }
    }

    pub fn with_stages(mut self, stages: usize) -> Self {
        self.stages = stages;
        self
    }

    pub fn without_ftb(mut self) -> Self {
        self.ftb = false;
        self
    }

    pub fn anchors_per_site(&self) -> usize {
        self.ratios.len()
    }

    /// Spatial extent after running `input` through layers 0..=layer.
    fn extent_at(&self, input: usize, layer: usize) -> usize {
        let mut e = input;
        for spec in &self.backbone[..=layer] {
            e = (e + 2 * spec.pad - spec.kernel) / spec.stride + 1;
        }
        e
    }

    /// Cumulative stride at a backbone layer.
    fn stride_at(&self, layer: usize) -> usize {
        self.backbone[..=layer].iter().map(|s| s.stride).product()
    }

    /// Channel count of each pyramid level, deepest first.
    pub fn level_channels(&self) -> Vec<usize> {
        self.emit.iter().map(|&l| self.backbone[l].out_ch).collect()
    }

    /// Spatial extents of the pyramid levels for a given input size.
    pub fn level_extents(&self, input: usize) -> Vec<usize> {
        self.emit.iter().map(|&l| self.extent_at(input, l)).collect()
    }

    pub fn level_strides(&self) -> Vec<usize> {
        self.emit.iter().map(|&l| self.stride_at(l)).collect()
    }

    /// Side length of the common score map: the stage-1 correlation output.
    pub fn map_size(&self) -> usize {
        let z = self.extent_at(self.template_size, self.emit[0]);
        let x = self.extent_at(self.search_size, self.emit[0]);
        x - z + 1
    }

    /// Anchor grid spacing in search-crop pixels.
    pub fn anchor_stride(&self) -> f64 {
        self.stride_at(self.emit[0]) as f64
    }

    /// Offset of the first grid site, centering the grid in the crop.
    pub fn anchor_origin(&self) -> f64 {
        let m = self.map_size();
        (self.search_size as f64 - (m - 1) as f64 * self.anchor_stride()) / 2.0
    }

    /// Initial anchor grid over the score map.
    pub fn anchor_grid(&self) -> Result<crate::geometry::AnchorSet> {
        let m = self.map_size();
        crate::geometry::generate_anchors(
            m,
            m,
            self.anchor_stride(),
            self.anchor_base,
            &self.ratios,
            self.anchor_origin(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone.is_empty() || self.emit.is_empty() {
            return Err(Error::Config("empty backbone or emit list".into()));
        }
        if self.stages == 0 || self.stages > self.emit.len() {
            return Err(Error::Config(format!(
                "stage count {} outside 1..={}",
                self.stages,
                self.emit.len()
            )));
        }
        for (a, b) in self.backbone.iter().zip(self.backbone.iter().skip(1)) {
            if a.out_ch != b.in_ch {
                return Err(Error::Config(format!(
                    "backbone channel chain breaks: {} -> {}",
                    a.out_ch, b.in_ch
                )));
            }
        }
        for &l in &self.emit {
            if l >= self.backbone.len() {
                return Err(Error::Config(format!("emit layer {l} out of range")));
            }
        }
        if self.ratios.is_empty() {
            return Err(Error::Config("need at least one anchor ratio".into()));
        }
        // deeper levels must not be larger than shallower ones, and transfer
        // factors must be integral so the deconv can match extents exactly
        let strides = self.level_strides();
        for i in 1..strides.len() {
            if strides[i - 1] % strides[i] != 0 {
                return Err(Error::Config(format!(
                    "level stride {} does not divide previous {}",
                    strides[i],
                    strides[i - 1]
                )));
            }
        }
        if self.map_size() < 1 {
            return Err(Error::Config("template deeper than search".into()));
        }
        Ok(())
    }
}

/// Per-stage head convolutions. The z-branch adjustments expand channels into
/// correlation kernel groups; the x-branch adjustments keep channels. Each
/// branch ends in a learnable per-channel affine on the correlation response:
/// the gain adapts the response scale and the shift gives the classifier a
/// direct per-anchor-shape prior that does not have to be expressed through
/// the kernels.
#[derive(Debug, Clone)]
pub struct StageHeads<E: Scalar> {
    pub cls_z: ConvParam<E>,
    pub reg_z: ConvParam<E>,
    pub cls_x: ConvParam<E>,
    pub reg_x: ConvParam<E>,
    pub cls_gain: ParamTensor<E>,
    pub cls_shift: ParamTensor<E>,
    pub reg_gain: ParamTensor<E>,
    pub reg_shift: ParamTensor<E>,
}

#[derive(Debug, Clone)]
pub struct ConvParam<E: Scalar> {
    pub weight: ParamTensor<E>,
    pub bias: ParamTensor<E>,
    pub stride: usize,
    pub pad: usize,
}

/// Transfer block: a deconvolution lifting the previous stage's fused
/// features onto the next level's geometry. kernel == stride == the extent
/// ratio between the two levels.
#[derive(Debug, Clone)]
pub struct FtbBlock<E: Scalar> {
    pub weight: ParamTensor<E>,
    pub bias: ParamTensor<E>,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct ModelParams<E: Scalar> {
    pub arch: ArchConfig,
    pub backbone: Vec<ConvParam<E>>,
    pub heads: Vec<StageHeads<E>>,
    pub ftb: Vec<FtbBlock<E>>,
}

fn kaiming<E: Scalar>(rng: &mut ChaCha8Rng, dims: &[usize], fan_in: usize) -> Tensor<E> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| E::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(dims, data).unwrap()
}

impl<E: Scalar> ModelParams<E> {
    /// Kaiming fan-in initialization with zero biases, deterministic in the
    /// seed.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = arch.anchors_per_site();

        let mut backbone = Vec::new();
        for (i, spec) in arch.backbone.iter().enumerate() {
            let fan = spec.in_ch * spec.kernel * spec.kernel;
            let mut weight = ParamTensor::new(
                format!("backbone.conv{i}.weight"),
                kaiming(&mut rng, &[spec.out_ch, spec.in_ch, spec.kernel, spec.kernel], fan),
            );
            let mut bias = ParamTensor::new(
                format!("backbone.conv{i}.bias"),
                Tensor::zeros(&[spec.out_ch]),
            );
            if i == 0 && arch.freeze_first {
                weight.frozen = true;
                bias.frozen = true;
            }
            backbone.push(ConvParam {
                weight,
                bias,
                stride: spec.stride,
                pad: spec.pad,
            });
        }

        let channels = arch.level_channels();
        let mut heads = Vec::new();
        for l in 0..arch.stages {
            let c = channels[l];
            let fan = c * 9;
            let head = |rng: &mut ChaCha8Rng, name: &str, out_ch: usize| ConvParam {
                weight: ParamTensor::new(
                    format!("stage{}.{name}.weight", l + 1),
                    kaiming(rng, &[out_ch, c, 3, 3], fan),
                ),
                bias: ParamTensor::new(
                    format!("stage{}.{name}.bias", l + 1),
                    Tensor::zeros(&[out_ch]),
                ),
                stride: 1,
                pad: 1,
            };
            // small initial gains keep the first logits near the softmax
            // max-entropy point for any weight draw; the gains grow with
            // training as the responses become informative
            let gain0 = |n: usize| {
                Tensor::from_vec(&[n], vec![E::from_f64(0.1); n]).unwrap()
            };
            heads.push(StageHeads {
                cls_z: head(&mut rng, "cls_z", 2 * k * c),
                reg_z: head(&mut rng, "reg_z", 4 * k * c),
                cls_x: head(&mut rng, "cls_x", c),
                reg_x: head(&mut rng, "reg_x", c),
                cls_gain: ParamTensor::new(format!("stage{}.cls_gain", l + 1), gain0(2 * k)),
                cls_shift: ParamTensor::new(
                    format!("stage{}.cls_shift", l + 1),
                    Tensor::zeros(&[2 * k]),
                ),
                reg_gain: ParamTensor::new(format!("stage{}.reg_gain", l + 1), gain0(4 * k)),
                reg_shift: ParamTensor::new(
                    format!("stage{}.reg_shift", l + 1),
                    Tensor::zeros(&[4 * k]),
                ),
            });
        }

        let mut ftb = Vec::new();
        if arch.ftb {
            let strides = arch.level_strides();
            for l in 1..arch.stages {
                let cin = channels[l - 1];
                let cout = channels[l];
                let factor = strides[l - 1] / strides[l];
                let fan = cin * factor * factor;
                ftb.push(FtbBlock {
                    weight: ParamTensor::new(
                        format!("ftb{}.weight", l + 1),
                        kaiming(&mut rng, &[cin, cout, factor, factor], fan),
                    ),
                    bias: ParamTensor::new(
                        format!("ftb{}.bias", l + 1),
                        Tensor::zeros(&[cout]),
                    ),
                    stride: factor,
                });
            }
        }

        Ok(ModelParams {
            arch,
            backbone,
            heads,
            ftb,
        })
    }

    pub fn tensors(&self) -> Vec<&ParamTensor<E>> {
        let mut out = Vec::new();
        for c in &self.backbone {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        for h in &self.heads {
            for c in [&h.cls_z, &h.reg_z, &h.cls_x, &h.reg_x] {
                out.push(&c.weight);
                out.push(&c.bias);
            }
            for t in [&h.cls_gain, &h.cls_shift, &h.reg_gain, &h.reg_shift] {
                out.push(t);
            }
        }
        for f in &self.ftb {
            out.push(&f.weight);
            out.push(&f.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut ParamTensor<E>> {
        let mut out: Vec<&mut ParamTensor<E>> = Vec::new();
        for c in &mut self.backbone {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for h in &mut self.heads {
            out.push(&mut h.cls_z.weight);
            out.push(&mut h.cls_z.bias);
            out.push(&mut h.reg_z.weight);
            out.push(&mut h.reg_z.bias);
            out.push(&mut h.cls_x.weight);
            out.push(&mut h.cls_x.bias);
            out.push(&mut h.reg_x.weight);
            out.push(&mut h.reg_x.bias);
            out.push(&mut h.cls_gain);
            out.push(&mut h.cls_shift);
            out.push(&mut h.reg_gain);
            out.push(&mut h.reg_shift);
        }
        for f in &mut self.ftb {
            out.push(&mut f.weight);
            out.push(&mut f.bias);
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.value.len()).sum()
    }

    pub fn to_f64(&self) -> ModelParams<f64> {
        self.convert(|t| t.to_f64())
    }

    pub fn to_f32(&self) -> ModelParams<f32> {
        self.convert(|t| t.to_f32())
    }

    fn convert<F: Scalar>(&self, f: impl Fn(&Tensor<E>) -> Tensor<F>) -> ModelParams<F> {
        let plain = |t: &ParamTensor<E>| ParamTensor {
            name: t.name.clone(),
            value: f(&t.value),
            grad: Tensor::zeros(t.value.dims()),
            frozen: t.frozen,
        };
        let conv = |c: &ConvParam<E>| ConvParam {
            weight: plain(&c.weight),
            bias: plain(&c.bias),
            stride: c.stride,
            pad: c.pad,
        };
        ModelParams {
            arch: self.arch.clone(),
            backbone: self.backbone.iter().map(conv).collect(),
            heads: self
                .heads
                .iter()
                .map(|h| StageHeads {
                    cls_z: conv(&h.cls_z),
                    reg_z: conv(&h.reg_z),
                    cls_x: conv(&h.cls_x),
                    reg_x: conv(&h.reg_x),
                    cls_gain: plain(&h.cls_gain),
                    cls_shift: plain(&h.cls_shift),
                    reg_gain: plain(&h.reg_gain),
                    reg_shift: plain(&h.reg_shift),
                })
                .collect(),
            ftb: self
                .ftb
                .iter()
                .map(|b| FtbBlock {
                    weight: plain(&b.weight),
                    bias: plain(&b.bias),
                    stride: b.stride,
                })
                .collect(),
        }
    }
}

/// Runtime cascade behaviour: how many stages run, the negative-confidence
/// filtering threshold, and the minimum survivor count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CascadeConfig {
    pub stages: usize,
    pub theta: f32,
    pub fallback_k: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            stages: 3,
            theta: 0.95,
            fallback_k: 16,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("cascade needs at least one stage".into()));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!(
                "theta {} outside [0, 1]",
                self.theta
            )));
        }
        if self.fallback_k == 0 {
            return Err(Error::Config("fallback_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_geometry() {
        let arch = ArchConfig::reference();
        arch.validate().unwrap();
        assert_eq!(arch.level_extents(64), vec![8, 16, 16]);
        assert_eq!(arch.level_extents(128), vec![16, 32, 32]);
        assert_eq!(arch.level_channels(), vec![48, 32, 32]);
        assert_eq!(arch.map_size(), 9);
        assert_eq!(arch.anchor_stride(), 8.0);
        assert_eq!(arch.anchor_origin(), 32.0);
        assert_eq!(arch.anchor_grid().unwrap().len(), 5 * 81);
    }

    #[test]
    fn tiny_geometry() {
        let arch = ArchConfig::tiny();
        arch.validate().unwrap();
        assert_eq!(arch.level_extents(16), vec![2, 4, 4]);
        assert_eq!(arch.level_extents(32), vec![4, 8, 8]);
        assert_eq!(arch.map_size(), 3);
    }

    #[test]
    fn init_is_deterministic_and_freezes_first_conv() {
        let a = ModelParams::<f32>::init(ArchConfig::reference(), 9).unwrap();
        let b = ModelParams::<f32>::init(ArchConfig::reference(), 9).unwrap();
        for (x, y) in a.tensors().iter().zip(b.tensors().iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value.data(), y.value.data());
        }
        assert!(a.backbone[0].weight.frozen);
        assert!(!a.backbone[1].weight.frozen);
        let c = ModelParams::<f32>::init(ArchConfig::reference(), 10).unwrap();
        assert_ne!(
            a.backbone[1].weight.value.data(),
            c.backbone[1].weight.value.data()
        );
    }

    #[test]
    fn head_shapes_follow_anchor_count() {
        let p = ModelParams::<f32>::init(ArchConfig::reference(), 0).unwrap();
        // k = 5 ratios: cls_z expands to 2*5*C, reg_z to 4*5*C
        assert_eq!(p.heads[0].cls_z.weight.value.dims(), &[480, 48, 3, 3]);
        assert_eq!(p.heads[0].reg_z.weight.value.dims(), &[960, 48, 3, 3]);
        assert_eq!(p.heads[1].cls_z.weight.value.dims(), &[320, 32, 3, 3]);
        assert_eq!(p.heads[0].cls_x.weight.value.dims(), &[48, 48, 3, 3]);
        // transfer blocks: 48->32 upsampling by 2, then 32->32 at same size
        assert_eq!(p.ftb[0].weight.value.dims(), &[48, 32, 2, 2]);
        assert_eq!(p.ftb[0].stride, 2);
        assert_eq!(p.ftb[1].weight.value.dims(), &[32, 32, 1, 1]);
        assert_eq!(p.ftb[1].stride, 1);
    }

    #[test]
    fn stage_count_out_of_range_is_rejected() {
        let arch = ArchConfig::reference().with_stages(4);
        assert!(arch.validate().is_err());
    }
}
