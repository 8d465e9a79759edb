//! Cascaded proposal stages. Stage 1 reads the deepest pyramid level; each
//! later stage fuses the previous stage's features with the next level, scores
//! the anchors that survived so far, and refines their boxes. Anchors whose
//! negative confidence exceeds the threshold are dropped between stages.

use super::backbone::{backbone_backward, extract_features, BackboneTrace, FeaturePyramid};
use super::{CascadeConfig, FtbBlock, ModelParams, StageHeads};
use crate::error::{Error, Result};
use crate::geometry::{decode_refine, AnchorSet, Offsets};
use crate::tensor::{
    add, conv2d, conv2d_backward, cross_correlate, cross_correlate_backward, relu, relu_backward,
    resize_bilinear, resize_bilinear_backward, softmax_pair, transposed_conv2d,
    transposed_conv2d_backward, Scalar, Tensor,
};

/// Per-anchor readout of one stage: raw logits, softmax confidences, and the
/// predicted box offsets, all at the anchor's fixed grid site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorScore {
    pub id: crate::geometry::AnchorId,
    pub logit_neg: f64,
    pub logit_pos: f64,
    pub neg: f64,
    pub pos: f64,
    pub offsets: Offsets,
}

/// One stage's scores for its live anchor set. Entries are in the same order
/// as the anchor set that produced them.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub stage: usize,
    /// Anchors per grid site.
    pub k: usize,
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<AnchorScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterMeta {
    pub stage: usize,
    pub input: usize,
    pub kept: usize,
    pub fallback_fired: bool,
    /// Refined boxes whose sides hit the minimum-extent floor.
    pub clamped: usize,
}

/// Activations one stage needs replayed during the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct StageTrace<E: Scalar> {
    phi_z: Tensor<E>,
    phi_x: Tensor<E>,
    /// Pre-relu fusion sums, present when this stage fused via a transfer
    /// block.
    sum_pre_z: Option<Tensor<E>>,
    sum_pre_x: Option<Tensor<E>>,
    kz_cls: Tensor<E>,
    kz_reg: Tensor<E>,
    sx_cls: Tensor<E>,
    sx_reg: Tensor<E>,
    /// Normalized correlation responses before the per-channel affine.
    resp_cls: Tensor<E>,
    resp_reg: Tensor<E>,
}

/// Everything a cascade forward produces: per-stage scores, the anchor set
/// fed to each stage, the final proposals, and filtering statistics.
#[derive(Debug, Clone)]
pub struct CascadeRun<E: Scalar> {
    pub stage_outputs: Vec<StageOutput>,
    /// live_sets[l] is the anchor set scored by stage l+1.
    pub live_sets: Vec<AnchorSet>,
    pub proposals: AnchorSet,
    pub filter_meta: Vec<FilterMeta>,
    pub(crate) traces: Vec<StageTrace<E>>,
}

/// Gradients flowing into one stage's score maps, laid out like the maps
/// themselves: cls `[2k, rows, cols]` against the logits, reg
/// `[4k, rows, cols]` against the offsets.
#[derive(Debug, Clone)]
pub struct StageGrads<E: Scalar> {
    pub cls: Tensor<E>,
    pub reg: Tensor<E>,
}

/// Full forward record for one (template, search) pair, enough to run the
/// backward pass without recomputation.
#[derive(Debug)]
pub struct PairTrace<E: Scalar> {
    pub z_img: Tensor<E>,
    pub x_img: Tensor<E>,
    z_bb: BackboneTrace<E>,
    x_bb: BackboneTrace<E>,
    pub run: CascadeRun<E>,
}

/// Lift the previous stage's fused features onto this level's geometry and
/// merge: relu(deconv(prev) + level).
pub fn ftb_fuse<E: Scalar>(
    prev: &Tensor<E>,
    level: &Tensor<E>,
    block: &FtbBlock<E>,
) -> Result<Tensor<E>> {
    fuse_traced(prev, level, block).map(|(out, _)| out)
}

fn fuse_traced<E: Scalar>(
    prev: &Tensor<E>,
    level: &Tensor<E>,
    block: &FtbBlock<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let lifted = transposed_conv2d(prev, &block.weight.value, Some(&block.bias.value), block.stride)?;
    if lifted.dims() != level.dims() {
        return Err(Error::shape(
            "ftb_fuse",
            format!(
                "transfer output {:?} does not match level {:?}",
                lifted.dims(),
                level.dims()
            ),
        ));
    }
    let sum_pre = add(&lifted, level)?;
    Ok((relu(&sum_pre), sum_pre))
}

/// y[ch] = gain[ch] * x[ch] + shift[ch], broadcast over the spatial plane.
fn channel_affine<E: Scalar>(
    x: &Tensor<E>,
    gain: &Tensor<E>,
    shift: &Tensor<E>,
) -> Result<Tensor<E>> {
    let c = x.dims()[0];
    if gain.dims() != [c] || shift.dims() != [c] {
        return Err(Error::shape(
            "channel_affine",
            format!(
                "gain {:?} / shift {:?} against {c} response channels",
                gain.dims(),
                shift.dims()
            ),
        ));
    }
    let plane = x.len() / c;
    let mut out = x.clone();
    for ch in 0..c {
        let g = gain.data()[ch];
        let s = shift.data()[ch];
        for v in &mut out.data_mut()[ch * plane..(ch + 1) * plane] {
            *v = *v * g + s;
        }
    }
    Ok(out)
}

struct AffineGrads<E: Scalar> {
    input: Tensor<E>,
    gain: Tensor<E>,
    shift: Tensor<E>,
}

fn channel_affine_backward<E: Scalar>(
    x: &Tensor<E>,
    gain: &Tensor<E>,
    d_out: &Tensor<E>,
) -> AffineGrads<E> {
    let c = x.dims()[0];
    let plane = x.len() / c;
    let mut input = d_out.clone();
    let mut d_gain = Tensor::zeros(&[c]);
    let mut d_shift = Tensor::zeros(&[c]);
    for ch in 0..c {
        let g = gain.data()[ch];
        let (mut sg, mut ss) = (E::ZERO, E::ZERO);
        for i in ch * plane..(ch + 1) * plane {
            let d = d_out.data()[i];
            sg = sg + d * x.data()[i];
            ss = ss + d;
            input.data_mut()[i] = d * g;
        }
        d_gain.data_mut()[ch] = sg;
        d_shift.data_mut()[ch] = ss;
    }
    AffineGrads {
        input,
        gain: d_gain,
        shift: d_shift,
    }
}

/// Score a live anchor set from one pair of feature maps: adjust both
/// branches, correlate the template kernels over the search features in k*2
/// classification groups and k*4 regression groups, resize the response onto
/// the anchor grid, and read each anchor at its site.
pub fn rpn_stage<E: Scalar>(
    phi_z: &Tensor<E>,
    phi_x: &Tensor<E>,
    heads: &StageHeads<E>,
    anchors: &AnchorSet,
    stage: usize,
) -> Result<StageOutput> {
    stage_traced(phi_z, phi_x, heads, anchors, stage).map(|(out, _)| out)
}

fn conv_p<E: Scalar>(x: &Tensor<E>, p: &super::ConvParam<E>) -> Result<Tensor<E>> {
    conv2d(x, &p.weight.value, Some(&p.bias.value), p.stride, p.pad)
}

fn check_head_dims<E: Scalar>(heads: &StageHeads<E>, k: usize, c: usize) -> Result<()> {
    if heads.cls_z.weight.value.dims()[0] != 2 * k * c
        || heads.reg_z.weight.value.dims()[0] != 4 * k * c
    {
        return Err(Error::shape(
            "rpn_stage",
            format!(
                "heads emit {} cls / {} reg channels; {k} anchors per site over {c} feature channels need {} / {}",
                heads.cls_z.weight.value.dims()[0],
                heads.reg_z.weight.value.dims()[0],
                2 * k * c,
                4 * k * c
            ),
        ));
    }
    Ok(())
}

/// Template-branch head outputs reshaped into correlation kernels.
fn head_kernels<E: Scalar>(
    phi_z: &Tensor<E>,
    heads: &StageHeads<E>,
    k: usize,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let c = phi_z.dims()[0];
    check_head_dims(heads, k, c)?;
    let kz_cls = conv_p(phi_z, &heads.cls_z)?;
    let kz_reg = conv_p(phi_z, &heads.reg_z)?;
    let (zh, zw) = (kz_cls.h(), kz_cls.w());
    Ok((
        Tensor::from_vec(&[2 * k, c, zh, zw], kz_cls.into_data())?,
        Tensor::from_vec(&[4 * k, c, zh, zw], kz_reg.into_data())?,
    ))
}

/// The stage tail shared by training and cached inference: correlate the
/// template kernels over the adjusted search features, rescale, resize onto
/// the anchor grid, and read every anchor at its site.
fn correlate_and_score<E: Scalar>(
    cls_kernels: &Tensor<E>,
    reg_kernels: &Tensor<E>,
    sx_cls: &Tensor<E>,
    sx_reg: &Tensor<E>,
    heads: &StageHeads<E>,
    anchors: &AnchorSet,
    stage: usize,
) -> Result<(StageOutput, Tensor<E>, Tensor<E>)> {
    let (k, rows, cols) = anchors.grid;
    let (c, zh, zw) = (cls_kernels.dims()[1], cls_kernels.h(), cls_kernels.w());
    // normalize by the root of the kernel volume: a raw sum over thousands of
    // positive-mean elements would start the logits far into softmax
    // saturation, while a full mean would starve the kernels of gradient;
    // the per-channel affine then adapts scale and prior per anchor shape
    let norm = E::from_f64(1.0 / ((c * zh * zw) as f64).sqrt());
    let resp_cls = cross_correlate(cls_kernels, sx_cls)?.scale(norm);
    let resp_reg = cross_correlate(reg_kernels, sx_reg)?.scale(norm);
    let raw_cls = channel_affine(&resp_cls, &heads.cls_gain.value, &heads.cls_shift.value)?;
    let raw_reg = channel_affine(&resp_reg, &heads.reg_gain.value, &heads.reg_shift.value)?;
    let map_cls = resize_bilinear(&raw_cls, rows, cols)?;
    let map_reg = resize_bilinear(&raw_reg, rows, cols)?;
    let probs = softmax_pair(&map_cls)?;

    let mut entries = Vec::with_capacity(anchors.len());
    for (id, _) in &anchors.entries {
        let (slot, r, cc) = anchors.site(*id);
        entries.push(AnchorScore {
            id: *id,
            logit_neg: map_cls.at3(2 * slot, r, cc).to_f64(),
            logit_pos: map_cls.at3(2 * slot + 1, r, cc).to_f64(),
            neg: probs.at3(2 * slot, r, cc).to_f64(),
            pos: probs.at3(2 * slot + 1, r, cc).to_f64(),
            offsets: Offsets::new(
                map_reg.at3(4 * slot, r, cc).to_f64(),
                map_reg.at3(4 * slot + 1, r, cc).to_f64(),
                map_reg.at3(4 * slot + 2, r, cc).to_f64(),
                map_reg.at3(4 * slot + 3, r, cc).to_f64(),
            ),
        });
    }

    Ok((
        StageOutput {
            stage,
            k,
            rows,
            cols,
            entries,
        },
        resp_cls,
        resp_reg,
    ))
}

fn stage_traced<E: Scalar>(
    phi_z: &Tensor<E>,
    phi_x: &Tensor<E>,
    heads: &StageHeads<E>,
    anchors: &AnchorSet,
    stage: usize,
) -> Result<(StageOutput, StageTrace<E>)> {
    let k = anchors.grid.0;
    let c = phi_z.dims()[0];
    check_head_dims(heads, k, c)?;
    let kz_cls = conv_p(phi_z, &heads.cls_z)?;
    let kz_reg = conv_p(phi_z, &heads.reg_z)?;
    let sx_cls = conv_p(phi_x, &heads.cls_x)?;
    let sx_reg = conv_p(phi_x, &heads.reg_x)?;

    let (zh, zw) = (kz_cls.h(), kz_cls.w());
    let cls_kernels = Tensor::from_vec(&[2 * k, c, zh, zw], kz_cls.data().to_vec())?;
    let reg_kernels = Tensor::from_vec(&[4 * k, c, zh, zw], kz_reg.data().to_vec())?;
    let (out, resp_cls, resp_reg) =
        correlate_and_score(&cls_kernels, &reg_kernels, &sx_cls, &sx_reg, heads, anchors, stage)?;

    Ok((
        out,
        StageTrace {
            phi_z: phi_z.clone(),
            phi_x: phi_x.clone(),
            sum_pre_z: None,
            sum_pre_x: None,
            kz_cls,
            kz_reg,
            sx_cls,
            sx_reg,
            resp_cls,
            resp_reg,
        },
    ))
}

/// Drop anchors whose negative confidence strictly exceeds `theta`, falling
/// back to the top `fallback_k` by positive confidence when too few survive,
/// then refine every survivor's box by its predicted offsets.
pub fn filter_anchors(
    anchors: &AnchorSet,
    out: &StageOutput,
    theta: f32,
    fallback_k: usize,
) -> Result<(AnchorSet, FilterMeta)> {
    if anchors.len() != out.entries.len() {
        return Err(Error::shape(
            "filter_anchors",
            format!(
                "stage scored {} anchors but the live set has {}",
                out.entries.len(),
                anchors.len()
            ),
        ));
    }
    let theta = theta as f64;
    let mut keep: Vec<usize> = (0..anchors.len())
        .filter(|&i| {
            debug_assert_eq!(anchors.entries[i].0, out.entries[i].id);
            !(out.entries[i].neg > theta)
        })
        .collect();
    let want = fallback_k.min(anchors.len());
    let fallback_fired = keep.len() < want;
    if fallback_fired {
        let mut ranked: Vec<usize> = (0..anchors.len()).collect();
        ranked.sort_by(|&a, &b| {
            out.entries[b]
                .pos
                .partial_cmp(&out.entries[a].pos)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(out.entries[a].id.cmp(&out.entries[b].id))
        });
        keep = ranked[..want].to_vec();
        keep.sort_unstable();
    }

    let mut clamped = 0;
    let entries = keep
        .iter()
        .map(|&i| {
            let refined = decode_refine(&anchors.entries[i].1, &out.entries[i].offsets);
            if refined.clamped {
                clamped += 1;
            }
            (anchors.entries[i].0, refined.bbox)
        })
        .collect();

    let kept = keep.len();
    Ok((
        AnchorSet {
            stage: anchors.stage + 1,
            grid: anchors.grid,
            entries,
            fallback_fired,
        },
        FilterMeta {
            stage: out.stage,
            input: anchors.len(),
            kept,
            fallback_fired,
            clamped,
        },
    ))
}

/// Run all cascade stages over a pair of feature pyramids.
pub fn run_cascade<E: Scalar>(
    params: &ModelParams<E>,
    cfg: &CascadeConfig,
    z_pyr: &FeaturePyramid<E>,
    x_pyr: &FeaturePyramid<E>,
    initial: &AnchorSet,
) -> Result<CascadeRun<E>> {
    cfg.validate()?;
    if cfg.stages > params.heads.len() {
        return Err(Error::Config(format!(
            "cascade wants {} stages but the model has {} heads",
            cfg.stages,
            params.heads.len()
        )));
    }
    if cfg.stages > z_pyr.levels.len() || cfg.stages > x_pyr.levels.len() {
        return Err(Error::Config(format!(
            "cascade wants {} stages but the pyramid has {} levels",
            cfg.stages,
            z_pyr.levels.len().min(x_pyr.levels.len())
        )));
    }
    let m = params.arch.map_size();
    let k = params.arch.anchors_per_site();
    if initial.grid != (k, m, m) {
        return Err(Error::shape(
            "run_cascade",
            format!(
                "anchor grid {:?} does not match model geometry ({k}, {m}, {m})",
                initial.grid
            ),
        ));
    }

    let mut stage_outputs = Vec::with_capacity(cfg.stages);
    let mut live_sets = Vec::with_capacity(cfg.stages);
    let mut filter_meta = Vec::with_capacity(cfg.stages);
    let mut traces = Vec::with_capacity(cfg.stages);
    let mut live = initial.clone();

    let mut prev_z: Option<Tensor<E>> = None;
    let mut prev_x: Option<Tensor<E>> = None;
    for l in 0..cfg.stages {
        let (phi_z, phi_x, sum_z, sum_x) = if l == 0 || !params.arch.ftb {
            (z_pyr.levels[l].clone(), x_pyr.levels[l].clone(), None, None)
        } else {
            let block = &params.ftb[l - 1];
            let (fz, sz) = fuse_traced(prev_z.as_ref().unwrap(), &z_pyr.levels[l], block)?;
            let (fx, sx) = fuse_traced(prev_x.as_ref().unwrap(), &x_pyr.levels[l], block)?;
            (fz, fx, Some(sz), Some(sx))
        };

        let (out, mut trace) = stage_traced(&phi_z, &phi_x, &params.heads[l], &live, l + 1)?;
        trace.sum_pre_z = sum_z;
        trace.sum_pre_x = sum_x;
        let (next, meta) = filter_anchors(&live, &out, cfg.theta, cfg.fallback_k)?;

        prev_z = Some(phi_z);
        prev_x = Some(phi_x);
        stage_outputs.push(out);
        live_sets.push(live);
        filter_meta.push(meta);
        traces.push(trace);
        live = next;
    }

    Ok(CascadeRun {
        stage_outputs,
        live_sets,
        proposals: live,
        filter_meta,
        traces,
    })
}

/// Everything the template branch contributes to a cascade run, computed
/// once per tracked sequence: the per-stage correlation kernels, with the
/// fusion ladder already applied.
#[derive(Debug, Clone)]
pub struct TemplateCache<E: Scalar> {
    pub stages: Vec<(Tensor<E>, Tensor<E>)>,
}

pub fn build_template_cache<E: Scalar>(
    params: &ModelParams<E>,
    cfg: &CascadeConfig,
    z_pyr: &FeaturePyramid<E>,
) -> Result<TemplateCache<E>> {
    let k = params.arch.anchors_per_site();
    let mut stages = Vec::with_capacity(cfg.stages);
    let mut prev: Option<Tensor<E>> = None;
    for l in 0..cfg.stages {
        let phi_z = if l == 0 || !params.arch.ftb {
            z_pyr.levels[l].clone()
        } else {
            ftb_fuse(prev.as_ref().unwrap(), &z_pyr.levels[l], &params.ftb[l - 1])?
        };
        stages.push(head_kernels(&phi_z, &params.heads[l], k)?);
        prev = Some(phi_z);
    }
    Ok(TemplateCache { stages })
}

/// `run_cascade` with the template branch replayed from a cache. Produces
/// bit-identical scores and proposals; only the backward-pass traces are
/// omitted, so the result cannot feed `backward_pair`.
pub fn run_cascade_cached<E: Scalar>(
    params: &ModelParams<E>,
    cfg: &CascadeConfig,
    cache: &TemplateCache<E>,
    x_pyr: &FeaturePyramid<E>,
    initial: &AnchorSet,
) -> Result<CascadeRun<E>> {
    cfg.validate()?;
    if cache.stages.len() < cfg.stages {
        return Err(Error::Config(format!(
            "cascade wants {} stages but the template cache has {}",
            cfg.stages,
            cache.stages.len()
        )));
    }
    let m = params.arch.map_size();
    let k = params.arch.anchors_per_site();
    if initial.grid != (k, m, m) {
        return Err(Error::shape(
            "run_cascade",
            format!(
                "anchor grid {:?} does not match model geometry ({k}, {m}, {m})",
                initial.grid
            ),
        ));
    }

    let mut stage_outputs = Vec::with_capacity(cfg.stages);
    let mut live_sets = Vec::with_capacity(cfg.stages);
    let mut filter_meta = Vec::with_capacity(cfg.stages);
    let mut live = initial.clone();
    let mut prev_x: Option<Tensor<E>> = None;
    for l in 0..cfg.stages {
        let phi_x = if l == 0 || !params.arch.ftb {
            x_pyr.levels[l].clone()
        } else {
            ftb_fuse(prev_x.as_ref().unwrap(), &x_pyr.levels[l], &params.ftb[l - 1])?
        };
        let heads = &params.heads[l];
        let sx_cls = conv_p(&phi_x, &heads.cls_x)?;
        let sx_reg = conv_p(&phi_x, &heads.reg_x)?;
        let (kc, kr) = &cache.stages[l];
        let (out, _, _) = correlate_and_score(kc, kr, &sx_cls, &sx_reg, heads, &live, l + 1)?;
        let (next, meta) = filter_anchors(&live, &out, cfg.theta, cfg.fallback_k)?;
        prev_x = Some(phi_x);
        stage_outputs.push(out);
        live_sets.push(live);
        filter_meta.push(meta);
        live = next;
    }

    Ok(CascadeRun {
        stage_outputs,
        live_sets,
        proposals: live,
        filter_meta,
        traces: Vec::new(),
    })
}

/// Backbone + cascade forward for one training pair, keeping every activation
/// needed by `backward_pair`.
pub fn forward_pair<E: Scalar>(
    params: &ModelParams<E>,
    cfg: &CascadeConfig,
    z_img: &Tensor<E>,
    x_img: &Tensor<E>,
    initial: &AnchorSet,
) -> Result<PairTrace<E>> {
    let (z_pyr, z_bb) = extract_features(params, z_img)?;
    let (x_pyr, x_bb) = extract_features(params, x_img)?;
    let run = run_cascade(params, cfg, &z_pyr, &x_pyr, initial)?;
    Ok(PairTrace {
        z_img: z_img.clone(),
        x_img: x_img.clone(),
        z_bb,
        x_bb,
        run,
    })
}

/// Accumulate parameter gradients for one pair given per-stage score-map
/// gradients (None for stages that contribute no loss). Walks the cascade in
/// reverse, routing feature gradients through the transfer blocks into both
/// backbone passes.
pub fn backward_pair<E: Scalar>(
    params: &mut ModelParams<E>,
    tr: &PairTrace<E>,
    grads: &[Option<StageGrads<E>>],
) -> Result<()> {
    let stages = tr.run.traces.len();
    if grads.len() != stages {
        return Err(Error::shape(
            "backward_pair",
            format!("{} stage grads for {stages} stages", grads.len()),
        ));
    }
    let levels = params.arch.emit.len();
    let mut d_level_z: Vec<Option<Tensor<E>>> = vec![None; levels];
    let mut d_level_x: Vec<Option<Tensor<E>>> = vec![None; levels];
    let mut d_phi_z: Vec<Option<Tensor<E>>> = vec![None; stages];
    let mut d_phi_x: Vec<Option<Tensor<E>>> = vec![None; stages];

    let merge = |slot: &mut Option<Tensor<E>>, g: Tensor<E>| -> Result<()> {
        *slot = Some(match slot.take() {
            Some(acc) => add(&acc, &g)?,
            None => g,
        });
        Ok(())
    };

    for l in (0..stages).rev() {
        let trace = &tr.run.traces[l];
        if let Some(sg) = &grads[l] {
            let out = &tr.run.stage_outputs[l];
            let k = out.k;
            let c = trace.phi_z.dims()[0];
            if sg.cls.dims() != [2 * k, out.rows, out.cols]
                || sg.reg.dims() != [4 * k, out.rows, out.cols]
            {
                return Err(Error::shape(
                    "backward_pair",
                    format!(
                        "stage {} grads {:?}/{:?} do not match maps [{}, {}, {}]/[{}, ..]",
                        l + 1,
                        sg.cls.dims(),
                        sg.reg.dims(),
                        2 * k,
                        out.rows,
                        out.cols,
                        4 * k
                    ),
                ));
            }

            let (zh, zw) = (trace.kz_cls.h(), trace.kz_cls.w());
            let norm = E::from_f64(1.0 / ((c * zh * zw) as f64).sqrt());
            let d_raw_cls = if trace.resp_cls.dims() == sg.cls.dims() {
                sg.cls.clone()
            } else {
                resize_bilinear_backward(trace.resp_cls.dims(), &sg.cls)?
            };
            let d_raw_reg = if trace.resp_reg.dims() == sg.reg.dims() {
                sg.reg.clone()
            } else {
                resize_bilinear_backward(trace.resp_reg.dims(), &sg.reg)?
            };

            let heads = &mut params.heads[l];
            let ac = channel_affine_backward(&trace.resp_cls, &heads.cls_gain.value, &d_raw_cls);
            let ar = channel_affine_backward(&trace.resp_reg, &heads.reg_gain.value, &d_raw_reg);
            heads.cls_gain.accumulate(&ac.gain)?;
            heads.cls_shift.accumulate(&ac.shift)?;
            heads.reg_gain.accumulate(&ar.gain)?;
            heads.reg_shift.accumulate(&ar.shift)?;
            let d_resp_cls = ac.input.scale(norm);
            let d_resp_reg = ar.input.scale(norm);

            let cls_kernels = Tensor::from_vec(&[2 * k, c, zh, zw], trace.kz_cls.data().to_vec())?;
            let reg_kernels = Tensor::from_vec(&[4 * k, c, zh, zw], trace.kz_reg.data().to_vec())?;
            let cg = cross_correlate_backward(&cls_kernels, &trace.sx_cls, &d_resp_cls)?;
            let rg = cross_correlate_backward(&reg_kernels, &trace.sx_reg, &d_resp_reg)?;
            let d_kz_cls = Tensor::from_vec(&[2 * k * c, zh, zw], cg.kernels.into_data())?;
            let d_kz_reg = Tensor::from_vec(&[4 * k * c, zh, zw], rg.kernels.into_data())?;

            let head_back = |input: &Tensor<E>,
                                 p: &mut super::ConvParam<E>,
                                 g_out: &Tensor<E>|
             -> Result<Tensor<E>> {
                let cgrads = conv2d_backward(input, &p.weight.value, g_out, p.stride, p.pad)?;
                p.weight.accumulate(&cgrads.weight)?;
                p.bias.accumulate(&cgrads.bias)?;
                Ok(cgrads.input)
            };
            let gz1 = head_back(&trace.phi_z, &mut heads.cls_z, &d_kz_cls)?;
            let gz2 = head_back(&trace.phi_z, &mut heads.reg_z, &d_kz_reg)?;
            let gx1 = head_back(&trace.phi_x, &mut heads.cls_x, &cg.search)?;
            let gx2 = head_back(&trace.phi_x, &mut heads.reg_x, &rg.search)?;
            merge(&mut d_phi_z[l], add(&gz1, &gz2)?)?;
            merge(&mut d_phi_x[l], add(&gx1, &gx2)?)?;
        }

        // route this stage's feature gradient down: through the transfer
        // block into the previous stage and this pyramid level, or straight
        // into the level when unfused
        for branch in 0..2 {
            let (d_phi, d_level, sum_pre) = if branch == 0 {
                (&mut d_phi_z, &mut d_level_z, &trace.sum_pre_z)
            } else {
                (&mut d_phi_x, &mut d_level_x, &trace.sum_pre_x)
            };
            let Some(g) = d_phi[l].take() else { continue };
            match sum_pre {
                Some(sum) => {
                    let d_sum = relu_backward(sum, &g)?;
                    let prev = if branch == 0 {
                        &tr.run.traces[l - 1].phi_z
                    } else {
                        &tr.run.traces[l - 1].phi_x
                    };
                    let block = &mut params.ftb[l - 1];
                    let dg = transposed_conv2d_backward(prev, &block.weight.value, &d_sum, block.stride)?;
                    block.weight.accumulate(&dg.weight)?;
                    block.bias.accumulate(&dg.bias)?;
                    merge(&mut d_phi[l - 1], dg.input)?;
                    merge(&mut d_level[l], d_sum)?;
                }
                None => merge(&mut d_level[l], g)?,
            }
        }
    }

    backbone_backward(params, &tr.z_img, &tr.z_bb, &d_level_z)?;
    backbone_backward(params, &tr.x_img, &tr.x_bb, &d_level_x)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_anchors, AnchorId, BBox};
    use crate::model::{ArchConfig, ConvParam, ModelParams};
    use crate::tensor::ParamTensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(side: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[3, side, side], data).unwrap()
    }

    fn reference_run(seed: u64) -> (ModelParams<f32>, CascadeRun<f32>) {
        let params = ModelParams::<f32>::init(ArchConfig::reference(), seed).unwrap();
        let cfg = CascadeConfig::default();
        let anchors = params.arch.anchor_grid().unwrap();
        let (zp, _) = extract_features(&params, &image(64, seed + 100)).unwrap();
        let (xp, _) = extract_features(&params, &image(128, seed + 200)).unwrap();
        let run = run_cascade(&params, &cfg, &zp, &xp, &anchors).unwrap();
        (params, run)
    }

    #[test]
    fn cached_template_run_is_bit_identical() {
        let params = ModelParams::<f32>::init(ArchConfig::reference(), 11).unwrap();
        let cfg = CascadeConfig::default();
        let anchors = params.arch.anchor_grid().unwrap();
        let (zp, _) = extract_features(&params, &image(64, 111)).unwrap();
        let (xp, _) = extract_features(&params, &image(128, 211)).unwrap();
        let full = run_cascade(&params, &cfg, &zp, &xp, &anchors).unwrap();
        let cache = build_template_cache(&params, &cfg, &zp).unwrap();
        let fast = run_cascade_cached(&params, &cfg, &cache, &xp, &anchors).unwrap();
        assert_eq!(full.stage_outputs.len(), fast.stage_outputs.len());
        for (a, b) in full.stage_outputs.iter().zip(&fast.stage_outputs) {
            for (ea, eb) in a.entries.iter().zip(&b.entries) {
                assert_eq!(ea, eb);
            }
        }
        assert_eq!(full.proposals.entries, fast.proposals.entries);
        assert_eq!(full.filter_meta, fast.filter_meta);
    }

    #[test]
    fn zeroed_heads_give_even_confidence_and_zero_offsets() {
        let mut params = ModelParams::<f32>::init(ArchConfig::reference(), 1).unwrap();
        for h in &mut params.heads {
            for c in [&mut h.cls_z, &mut h.reg_z, &mut h.cls_x, &mut h.reg_x] {
                c.weight.value = Tensor::zeros(c.weight.value.dims());
                c.bias.value = Tensor::zeros(c.bias.value.dims());
            }
        }
        let anchors = params.arch.anchor_grid().unwrap();
        let (zp, _) = extract_features(&params, &image(64, 3)).unwrap();
        let (xp, _) = extract_features(&params, &image(128, 4)).unwrap();
        let run = run_cascade(&params, &CascadeConfig::default(), &zp, &xp, &anchors).unwrap();
        for e in &run.stage_outputs[0].entries {
            assert_eq!(e.neg, 0.5);
            assert_eq!(e.pos, 0.5);
            assert_eq!(e.offsets, Offsets::new(0.0, 0.0, 0.0, 0.0));
        }
        // neg = 0.5 never exceeds theta, so everything survives every stage
        assert_eq!(run.proposals.len(), anchors.len());
        assert!(!run.proposals.fallback_fired);
    }

    // independent nested-loop correlation for the grouped-head check
    fn naive_corr(kern: &Tensor<f32>, search: &Tensor<f32>) -> Vec<f32> {
        let (c, zh, zw) = (kern.dims()[0], kern.dims()[1], kern.dims()[2]);
        let (xh, xw) = (search.dims()[1], search.dims()[2]);
        let (oh, ow) = (xh - zh + 1, xw - zw + 1);
        let mut out = vec![0.0; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ch in 0..c {
                    for ky in 0..zh {
                        for kx in 0..zw {
                            acc += kern.at3(ch, ky, kx) * search.at3(ch, oy + ky, ox + kx);
                        }
                    }
                }
                out[oy * ow + ox] = acc;
            }
        }
        out
    }

    #[test]
    fn identity_heads_reduce_to_plain_correlation() {
        // one ratio (k=1), identity 3x3 adjustments: logits become the raw
        // channel-summed correlation of phi_z over phi_x
        let c = 2;
        let ident = |out_ch: usize, groups: usize| {
            let mut w = Tensor::<f32>::zeros(&[out_ch, c, 3, 3]);
            for g in 0..groups {
                for ch in 0..c {
                    let v = vec![g * c + ch, ch, 1, 1];
                    let idx = ((v[0] * c + v[1]) * 3 + v[2]) * 3 + v[3];
                    w.data_mut()[idx] = 1.0;
                }
            }
            w
        };
        let head_param = |name: &str, out_ch: usize, groups: usize| ConvParam {
            weight: ParamTensor::new(format!("{name}.weight"), ident(out_ch, groups)),
            bias: ParamTensor::new(format!("{name}.bias"), Tensor::zeros(&[out_ch])),
            stride: 1,
            pad: 1,
        };
        let unit_affine = |name: &str, n: usize| {
            (
                ParamTensor::new(
                    format!("{name}_gain"),
                    Tensor::from_vec(&[n], vec![1.0f32; n]).unwrap(),
                ),
                ParamTensor::new(format!("{name}_shift"), Tensor::zeros(&[n])),
            )
        };
        let (cls_gain, cls_shift) = unit_affine("cls", 2);
        let (reg_gain, reg_shift) = unit_affine("reg", 4);
        let heads = StageHeads {
            cls_z: head_param("cls_z", 2 * c, 2),
            reg_z: head_param("reg_z", 4 * c, 4),
            cls_x: head_param("cls_x", c, 1),
            reg_x: head_param("reg_x", c, 1),
            cls_gain,
            cls_shift,
            reg_gain,
            reg_shift,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let phi_z = Tensor::from_vec(
            &[c, 2, 2],
            (0..c * 4).map(|_| rng.gen_range(-1.0..1.0f32)).collect::<Vec<_>>(),
        )
        .unwrap();
        let phi_x = Tensor::from_vec(
            &[c, 4, 4],
            (0..c * 16).map(|_| rng.gen_range(-1.0..1.0f32)).collect::<Vec<_>>(),
        )
        .unwrap();
        let anchors = generate_anchors(3, 3, 8.0, 16.0, &[1.0], 8.0).unwrap();
        let out = rpn_stage(&phi_z, &phi_x, &heads, &anchors, 1).unwrap();

        // responses are correlations scaled by the root of the kernel volume
        let norm = 1.0 / ((c * 2 * 2) as f64).sqrt();
        let expected = naive_corr(&phi_z, &phi_x);
        for (i, e) in out.entries.iter().enumerate() {
            let want = expected[i] as f64 * norm;
            assert!((e.logit_neg - want).abs() < 1e-5, "neg {i}: {} vs {want}", e.logit_neg);
            assert!((e.logit_pos - want).abs() < 1e-5, "pos {i}: {} vs {want}", e.logit_pos);
            assert!((e.neg - 0.5).abs() < 1e-9);
            let s = e.offsets;
            for v in [s.dx, s.dy, s.dw, s.dh] {
                assert!((v - want).abs() < 1e-5);
            }
        }
    }

    fn toy_set(n: usize) -> AnchorSet {
        AnchorSet {
            stage: 1,
            grid: (1, 1, n),
            entries: (0..n)
                .map(|i| (AnchorId(i as u32), BBox::new(10.0 + i as f64, 10.0, 8.0, 8.0)))
                .collect(),
            fallback_fired: false,
        }
    }

    fn toy_out(scores: &[(f64, f64)]) -> StageOutput {
        StageOutput {
            stage: 1,
            k: 1,
            rows: 1,
            cols: scores.len(),
            entries: scores
                .iter()
                .enumerate()
                .map(|(i, &(neg, pos))| AnchorScore {
                    id: AnchorId(i as u32),
                    logit_neg: 0.0,
                    logit_pos: 0.0,
                    neg,
                    pos,
                    offsets: Offsets::new(0.0, 0.0, 0.0, 0.0),
                })
                .collect(),
        }
    }

    #[test]
    fn filter_drops_strictly_above_threshold() {
        // exact binary fractions so the f32 threshold converts losslessly
        let set = toy_set(4);
        let out = toy_out(&[(0.8125, 0.1875), (0.75, 0.25), (0.2, 0.8), (0.76, 0.24)]);
        let (next, meta) = filter_anchors(&set, &out, 0.75, 2).unwrap();
        let ids: Vec<u32> = next.entries.iter().map(|e| e.0 .0).collect();
        // 0.75 itself survives (removal is strictly greater-than)
        assert_eq!(ids, vec![1, 2]);
        assert!(!meta.fallback_fired);
        assert_eq!(meta.input, 4);
        assert_eq!(meta.kept, 2);
        assert_eq!(next.stage, 2);
    }

    #[test]
    fn filter_at_threshold_one_keeps_everything() {
        let set = toy_set(3);
        let out = toy_out(&[(1.0, 0.0), (0.999, 0.001), (0.5, 0.5)]);
        let (next, meta) = filter_anchors(&set, &out, 1.0, 2).unwrap();
        assert_eq!(next.len(), 3);
        assert!(!meta.fallback_fired);
    }

    #[test]
    fn fallback_keeps_top_k_by_positive_score() {
        let set = toy_set(5);
        let out = toy_out(&[
            (0.99, 0.01),
            (0.98, 0.02),
            (0.97, 0.03),
            (0.999, 0.001),
            (0.96, 0.04),
        ]);
        let (next, meta) = filter_anchors(&set, &out, 0.95, 3).unwrap();
        assert!(meta.fallback_fired);
        assert!(next.fallback_fired);
        let ids: Vec<u32> = next.entries.iter().map(|e| e.0 .0).collect();
        // top-3 positive scores are anchors 4, 2, 1
        assert_eq!(ids, vec![1, 2, 4]);
    }

    #[test]
    fn fallback_ties_break_toward_lower_ids() {
        let set = toy_set(4);
        let out = toy_out(&[(0.99, 0.01); 4]);
        let (next, _) = filter_anchors(&set, &out, 0.5, 2).unwrap();
        let ids: Vec<u32> = next.entries.iter().map(|e| e.0 .0).collect();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn filter_refines_survivor_boxes() {
        let set = toy_set(1);
        let mut out = toy_out(&[(0.1, 0.9)]);
        out.entries[0].offsets = Offsets::new(0.25, -0.5, 2.0f64.ln(), 0.0);
        let (next, _) = filter_anchors(&set, &out, 0.95, 1).unwrap();
        let b = &next.entries[0].1;
        assert!((b.cx - 12.0).abs() < 1e-12); // 10 + 8 * 0.25
        assert!((b.cy - 6.0).abs() < 1e-12); // 10 + 8 * -0.5
        assert!((b.w - 16.0).abs() < 1e-12);
        assert!((b.h - 8.0).abs() < 1e-12);
    }

    #[test]
    fn cascade_invariants_hold_on_reference_model() {
        let (_, run) = reference_run(21);
        assert_eq!(run.stage_outputs.len(), 3);
        assert_eq!(run.live_sets.len(), 3);
        assert_eq!(run.live_sets[0].len(), 405);
        assert_eq!(run.proposals.stage, 4);
        for l in 0..3 {
            assert_eq!(run.stage_outputs[l].entries.len(), run.live_sets[l].len());
            assert_eq!(run.live_sets[l].stage, l + 1);
        }
        // live sets shrink monotonically and ids stay a subset
        for l in 1..3 {
            assert!(run.live_sets[l].len() <= run.live_sets[l - 1].len());
            let prev: std::collections::HashSet<u32> =
                run.live_sets[l - 1].entries.iter().map(|e| e.0 .0).collect();
            for (id, _) in &run.live_sets[l].entries {
                assert!(prev.contains(&id.0), "anchor {} appeared from nowhere", id.0);
            }
        }
        assert!(run.proposals.len() <= run.live_sets[2].len());
        for m in &run.filter_meta {
            assert!(m.kept <= m.input);
            assert!(m.kept >= 16.min(m.input));
        }
    }

    #[test]
    fn cascade_is_deterministic() {
        let (_, a) = reference_run(33);
        let (_, b) = reference_run(33);
        for (sa, sb) in a.stage_outputs.iter().zip(b.stage_outputs.iter()) {
            for (ea, eb) in sa.entries.iter().zip(sb.entries.iter()) {
                assert_eq!(ea.logit_neg.to_bits(), eb.logit_neg.to_bits());
                assert_eq!(ea.pos.to_bits(), eb.pos.to_bits());
            }
        }
        assert_eq!(a.proposals.len(), b.proposals.len());
    }

    #[test]
    fn single_stage_cascade_degenerates_cleanly() {
        let params = ModelParams::<f32>::init(ArchConfig::reference().with_stages(1), 5).unwrap();
        let cfg = CascadeConfig {
            stages: 1,
            ..Default::default()
        };
        let anchors = params.arch.anchor_grid().unwrap();
        let (zp, _) = extract_features(&params, &image(64, 8)).unwrap();
        let (xp, _) = extract_features(&params, &image(128, 9)).unwrap();
        let run = run_cascade(&params, &cfg, &zp, &xp, &anchors).unwrap();
        assert_eq!(run.stage_outputs.len(), 1);
        assert_eq!(run.proposals.stage, 2);
        assert!(params.ftb.is_empty() || run.traces[0].sum_pre_z.is_none());
    }

    #[test]
    fn zero_transfer_block_passes_level_through_relu() {
        let mut params = ModelParams::<f32>::init(ArchConfig::reference(), 6).unwrap();
        for f in &mut params.ftb {
            f.weight.value = Tensor::zeros(f.weight.value.dims());
            f.bias.value = Tensor::zeros(f.bias.value.dims());
        }
        let anchors = params.arch.anchor_grid().unwrap();
        let (zp, _) = extract_features(&params, &image(64, 10)).unwrap();
        let (xp, _) = extract_features(&params, &image(128, 11)).unwrap();
        let run = run_cascade(&params, &CascadeConfig::default(), &zp, &xp, &anchors).unwrap();
        let want = relu(&zp.levels[1]);
        assert_eq!(run.traces[1].phi_z.data(), want.data());
    }

    #[test]
    fn ftb_off_uses_raw_levels() {
        let params = ModelParams::<f32>::init(ArchConfig::reference().without_ftb(), 7).unwrap();
        assert!(params.ftb.is_empty());
        let anchors = params.arch.anchor_grid().unwrap();
        let (zp, _) = extract_features(&params, &image(64, 12)).unwrap();
        let (xp, _) = extract_features(&params, &image(128, 13)).unwrap();
        let run = run_cascade(&params, &CascadeConfig::default(), &zp, &xp, &anchors).unwrap();
        assert_eq!(run.traces[1].phi_z.data(), zp.levels[1].data());
        assert_eq!(run.traces[2].phi_x.data(), xp.levels[2].data());
    }

    #[test]
    fn mismatched_anchor_grid_is_rejected() {
        let params = ModelParams::<f32>::init(ArchConfig::reference(), 2).unwrap();
        let bad = generate_anchors(7, 7, 8.0, 56.0, &[1.0], 32.0).unwrap();
        let (zp, _) = extract_features(&params, &image(64, 1)).unwrap();
        let (xp, _) = extract_features(&params, &image(128, 2)).unwrap();
        let err = run_cascade(&params, &CascadeConfig::default(), &zp, &xp, &bad)
            .unwrap_err()
            .to_string();
        assert!(err.contains("anchor grid"), "{err}");
    }
}
