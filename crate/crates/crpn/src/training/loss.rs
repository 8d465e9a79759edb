//! Multi-task loss over the cascade: per-stage mean cross-entropy on sampled
//! anchors plus a weighted mean smooth-L1 on positive-anchor offsets, summed
//! across stages. Losses are computed straight from logits; gradients are
//! scattered back onto the score maps at each anchor's grid site.

use crate::error::{Error, Result};
use crate::geometry::{assign_labels, AnchorId, AnchorSet, BBox, Label, Offsets};
use crate::model::{StageGrads, StageOutput};
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Cross-entropy of a two-way softmax over (logit_neg, logit_pos) against the
/// given class, computed without materializing the softmax. Returns
/// (loss, d_logit_neg, d_logit_pos).
pub fn cross_entropy_pair(logit_neg: f64, logit_pos: f64, positive: bool) -> (f64, f64, f64) {
    let z = logit_pos - logit_neg;
    let p_pos = 1.0 / (1.0 + (-z).exp());
    let loss = if positive { softplus(-z) } else { softplus(z) };
    let d_pos = p_pos - if positive { 1.0 } else { 0.0 };
    (loss, -d_pos, d_pos)
}

/// Smooth L1: quadratic inside |x| < 1, linear outside. Returns (value, slope).
pub fn smooth_l1(x: f64) -> (f64, f64) {
    let a = x.abs();
    if a < 1.0 {
        (0.5 * x * x, x)
    } else {
        (a - 0.5, x.signum())
    }
}

/// How each stage picks its training anchors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConfig {
    /// Upper bound on anchors sampled per stage.
    pub samples_per_stage: usize,
    /// Upper bound on positives within a sample.
    pub pos_cap: usize,
    pub tau_pos: f32,
    pub tau_neg: f32,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            samples_per_stage: 64,
            pos_cap: 16,
            tau_pos: 0.6,
            tau_neg: 0.3,
        }
    }
}

/// One supervised anchor: its identity, class, and (for positives) the offset
/// target encoding its live box against the ground truth.
#[derive(Debug, Clone, Copy)]
pub struct PlanSample {
    pub id: AnchorId,
    pub positive: bool,
    pub target: Option<Offsets>,
}

/// Frozen supervision for one forward pass: which anchors are trained at each
/// stage and with what targets. Built once per pair; never re-derived from
/// perturbed activations, so the loss is a fixed function of the score maps.
#[derive(Debug, Clone)]
pub struct SupervisionPlan {
    /// One entry per stage; None when every live anchor fell in the ignore
    /// band and the stage contributes no loss.
    pub stages: Vec<Option<Vec<PlanSample>>>,
}

impl SupervisionPlan {
    pub fn supervised_stages(&self) -> usize {
        self.stages.iter().filter(|s| s.is_some()).count()
    }
}

/// Label each stage's live anchors against the ground truth and draw a
/// bounded random sample: up to `pos_cap` positives, topped up with negatives
/// to `samples_per_stage`. Stages whose anchors are all ignored get None.
pub fn build_plan(
    live_sets: &[AnchorSet],
    gt: &BBox,
    cfg: &SampleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SupervisionPlan> {
    let mut stages = Vec::with_capacity(live_sets.len());
    for live in live_sets {
        let asg = assign_labels(live, gt, cfg.tau_pos as f64, cfg.tau_neg as f64)?;
        if asg.positives == 0 && asg.negatives == 0 {
            stages.push(None);
            continue;
        }
        let pos_idx: Vec<usize> = (0..asg.labels.len())
            .filter(|&i| asg.labels[i].label == Label::Positive)
            .collect();
        let neg_idx: Vec<usize> = (0..asg.labels.len())
            .filter(|&i| asg.labels[i].label == Label::Negative)
            .collect();
        let n_pos = pos_idx.len().min(cfg.pos_cap);
        let n_neg = neg_idx
            .len()
            .min(cfg.samples_per_stage.saturating_sub(n_pos));
        let mut chosen: Vec<usize> = rand::seq::index::sample(rng, pos_idx.len(), n_pos)
            .iter()
            .map(|i| pos_idx[i])
            .collect();
        chosen.extend(
            rand::seq::index::sample(rng, neg_idx.len(), n_neg)
                .iter()
                .map(|i| neg_idx[i]),
        );
        chosen.sort_unstable();
        let samples = chosen
            .into_iter()
            .map(|i| PlanSample {
                id: asg.labels[i].id,
                positive: asg.labels[i].label == Label::Positive,
                target: asg.labels[i].target,
            })
            .collect();
        stages.push(Some(samples));
    }
    Ok(SupervisionPlan { stages })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageLossTerms {
    pub stage: usize,
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub pos: usize,
    pub neg: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub stages: Vec<StageLossTerms>,
}

impl LossBreakdown {
    pub fn pos_count(&self) -> usize {
        self.stages.iter().map(|s| s.pos).sum()
    }
    pub fn neg_count(&self) -> usize {
        self.stages.iter().map(|s| s.neg).sum()
    }
}

/// Evaluate the planned loss against stage outputs without building gradients.
pub fn plan_loss(outputs: &[StageOutput], plan: &SupervisionPlan, lambda: f64) -> Result<LossBreakdown> {
    accumulate::<f32>(outputs, plan, lambda, false).map(|(terms, _)| terms)
}

/// Evaluate the planned loss and produce per-stage score-map gradients, laid
/// out exactly like the maps rpn_stage reads anchors from.
pub fn plan_loss_grads<E: Scalar>(
    outputs: &[StageOutput],
    plan: &SupervisionPlan,
    lambda: f64,
) -> Result<(LossBreakdown, Vec<Option<StageGrads<E>>>)> {
    accumulate::<E>(outputs, plan, lambda, true)
}

fn accumulate<E: Scalar>(
    outputs: &[StageOutput],
    plan: &SupervisionPlan,
    lambda: f64,
    want_grads: bool,
) -> Result<(LossBreakdown, Vec<Option<StageGrads<E>>>)> {
    if outputs.len() != plan.stages.len() {
        return Err(Error::shape(
            "plan_loss",
            format!(
                "plan covers {} stages, outputs cover {}",
                plan.stages.len(),
                outputs.len()
            ),
        ));
    }
    let mut total = 0.0;
    let mut stages = Vec::with_capacity(outputs.len());
    let mut grads = Vec::with_capacity(outputs.len());
    for (out, planned) in outputs.iter().zip(&plan.stages) {
        let Some(samples) = planned else {
            grads.push(None);
            continue;
        };
        if samples.is_empty() {
            return Err(Error::Config(format!(
                "stage {} plan has zero samples",
                out.stage
            )));
        }
        let by_id: HashMap<u32, usize> = out
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.0, i))
            .collect();
        let n = samples.len() as f64;
        let n_pos = samples.iter().filter(|s| s.positive).count();
        let mut cls_sum = 0.0;
        let mut reg_sum = 0.0;
        let (mut d_cls, mut d_reg) = if want_grads {
            (
                Tensor::<E>::zeros(&[2 * out.k, out.rows, out.cols]),
                Tensor::<E>::zeros(&[4 * out.k, out.rows, out.cols]),
            )
        } else {
            (Tensor::zeros(&[1]), Tensor::zeros(&[1]))
        };
        for s in samples {
            let &idx = by_id.get(&s.id.0).ok_or_else(|| {
                Error::Config(format!(
                    "plan references anchor {} absent from stage {} output",
                    s.id.0, out.stage
                ))
            })?;
            let e = &out.entries[idx];
            let (loss, d_neg, d_pos) = cross_entropy_pair(e.logit_neg, e.logit_pos, s.positive);
            cls_sum += loss;
            let site = site_of(s.id, out.rows, out.cols);
            if want_grads {
                let (slot, r, c) = site;
                bump(&mut d_cls, 2 * slot, r, c, d_neg / n);
                bump(&mut d_cls, 2 * slot + 1, r, c, d_pos / n);
            }
            if s.positive {
                let t = s.target.ok_or_else(|| {
                    Error::Config(format!("positive anchor {} lacks a target", s.id.0))
                })?;
                let pred = e.offsets;
                let diffs = [
                    pred.dx - t.dx,
                    pred.dy - t.dy,
                    pred.dw - t.dw,
                    pred.dh - t.dh,
                ];
                for (ci, d) in diffs.iter().enumerate() {
                    let (v, slope) = smooth_l1(*d);
                    reg_sum += v;
                    if want_grads {
                        let (slot, r, c) = site;
                        bump(
                            &mut d_reg,
                            4 * slot + ci,
                            r,
                            c,
                            lambda * slope / n_pos as f64,
                        );
                    }
                }
            }
        }
        let cls = cls_sum / n;
        let reg = if n_pos > 0 {
            reg_sum / n_pos as f64
        } else {
            0.0
        };
        let stage_total = cls + lambda * reg;
        total += stage_total;
        stages.push(StageLossTerms {
            stage: out.stage,
            total: stage_total,
            cls,
            reg,
            pos: n_pos,
            neg: samples.len() - n_pos,
        });
        grads.push(if want_grads {
            Some(StageGrads {
                cls: d_cls,
                reg: d_reg,
            })
        } else {
            None
        });
    }
    Ok((LossBreakdown { total, stages }, grads))
}

fn site_of(id: AnchorId, rows: usize, cols: usize) -> (usize, usize, usize) {
    let hw = (rows * cols) as u32;
    let slot = (id.0 / hw) as usize;
    let rem = id.0 % hw;
    (slot, (rem / cols as u32) as usize, (rem % cols as u32) as usize)
}

fn bump<E: Scalar>(t: &mut Tensor<E>, c: usize, r: usize, col: usize, v: f64) {
    let (h, w) = (t.dims()[1], t.dims()[2]);
    let idx = (c * h + r) * w + col;
    let cur = t.data()[idx].to_f64();
    t.data_mut()[idx] = E::from_f64(cur + v);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AnchorScore;
    use rand::SeedableRng;

    fn out_with(logits: &[(f64, f64)], offsets: &[Offsets]) -> StageOutput {
        StageOutput {
            stage: 1,
            k: 1,
            rows: 1,
            cols: logits.len(),
            entries: logits
                .iter()
                .zip(offsets)
                .enumerate()
                .map(|(i, (&(ln, lp), off))| {
                    let p = 1.0 / (1.0 + (ln - lp).exp());
                    AnchorScore {
                        id: AnchorId(i as u32),
                        logit_neg: ln,
                        logit_pos: lp,
                        neg: 1.0 - p,
                        pos: p,
                        offsets: *off,
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn cross_entropy_matches_direct_softmax() {
        for &(ln, lp, positive) in &[
            (0.0, 0.0, true),
            (1.5, -0.5, false),
            (-3.0, 2.0, true),
            (30.0, -30.0, false),
        ] {
            let (loss, d_neg, d_pos) = cross_entropy_pair(ln, lp, positive);
            let m = ln.max(lp);
            let z = (ln - m).exp() + (lp - m).exp();
            let p_pos = (lp - m).exp() / z;
            let p_y = if positive { p_pos } else { 1.0 - p_pos };
            assert!((loss - (-p_y.ln())).abs() < 1e-12, "{loss} vs {}", -p_y.ln());
            let y_pos = if positive { 1.0 } else { 0.0 };
            assert!((d_pos - (p_pos - y_pos)).abs() < 1e-12);
            assert!((d_neg + d_pos).abs() < 1e-15);
        }
    }

    #[test]
    fn smooth_l1_value_and_slope() {
        assert_eq!(smooth_l1(0.0), (0.0, 0.0));
        assert_eq!(smooth_l1(0.5), (0.125, 0.5));
        assert_eq!(smooth_l1(-0.5), (0.125, -0.5));
        assert_eq!(smooth_l1(2.0), (1.5, 1.0));
        assert_eq!(smooth_l1(-3.0), (2.5, -1.0));
        // continuous at the knee
        let (a, _) = smooth_l1(1.0 - 1e-12);
        let (b, _) = smooth_l1(1.0);
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn stage_loss_frozen_example() {
        // two anchors at even confidence, one at 75% toward its true class,
        // regression residuals zero: loss = (ln 2 + ln 2 + ln(4/3)) / 3
        let z = Offsets::new(0.0, 0.0, 0.0, 0.0);
        let out = out_with(&[(0.0, 0.0), (0.0, 0.0), (0.0, 3.0f64.ln())], &[z, z, z]);
        let plan = SupervisionPlan {
            stages: vec![Some(vec![
                PlanSample { id: AnchorId(0), positive: false, target: None },
                PlanSample { id: AnchorId(1), positive: false, target: None },
                PlanSample { id: AnchorId(2), positive: true, target: Some(z) },
            ])],
        };
        let bd = plan_loss(&[out], &plan, 1.0).unwrap();
        let want = (2.0 * 2.0f64.ln() + (4.0f64 / 3.0).ln()) / 3.0;
        assert!((bd.total - want).abs() < 1e-12, "{} vs {want}", bd.total);
        assert!((bd.total - 0.5580).abs() < 1e-4);
        assert_eq!(bd.stages[0].pos, 1);
        assert_eq!(bd.stages[0].neg, 2);
        assert_eq!(bd.stages[0].reg, 0.0);
    }

    #[test]
    fn regression_term_uses_mean_over_positives_times_lambda() {
        let t = Offsets::new(0.0, 0.0, 0.0, 0.0);
        let p1 = Offsets::new(0.5, 0.0, 0.0, 0.0); // smooth l1 = 0.125
        let p2 = Offsets::new(2.0, 0.0, 0.0, 0.0); // smooth l1 = 1.5
        let out = out_with(&[(0.0, 0.0), (0.0, 0.0)], &[p1, p2]);
        let plan = SupervisionPlan {
            stages: vec![Some(vec![
                PlanSample { id: AnchorId(0), positive: true, target: Some(t) },
                PlanSample { id: AnchorId(1), positive: true, target: Some(t) },
            ])],
        };
        let bd = plan_loss(&[out], &plan, 2.0).unwrap();
        let want_reg = (0.125 + 1.5) / 2.0;
        assert!((bd.stages[0].reg - want_reg).abs() < 1e-12);
        let want_total = 2.0f64.ln() + 2.0 * want_reg;
        assert!((bd.total - want_total).abs() < 1e-12);
    }

    #[test]
    fn map_gradients_match_finite_differences() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let k = 2usize;
        let (rows, cols) = (3usize, 3usize);
        let mut logits = Vec::new();
        let mut offs = Vec::new();
        for _ in 0..k * rows * cols {
            logits.push((rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            offs.push(Offsets::new(
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
            ));
        }
        let build = |logits: &[(f64, f64)], offs: &[Offsets]| {
            let mut out = out_with(logits, offs);
            out.k = k;
            out.rows = rows;
            out.cols = cols;
            out
        };
        let t = Offsets::new(0.1, -0.2, 0.3, 0.05);
        let plan = SupervisionPlan {
            stages: vec![Some(vec![
                PlanSample { id: AnchorId(0), positive: true, target: Some(t) },
                PlanSample { id: AnchorId(5), positive: false, target: None },
                PlanSample { id: AnchorId(12), positive: true, target: Some(t) },
                PlanSample { id: AnchorId(17), positive: false, target: None },
            ])],
        };
        let lambda = 1.3;
        let (_, grads) =
            plan_loss_grads::<f64>(&[build(&logits, &offs)], &plan, lambda).unwrap();
        let g = grads[0].as_ref().unwrap();
        let eps = 1e-6;
        // classification map coordinates
        for id in [0u32, 5, 12, 17, 3] {
            let (slot, r, c) = site_of(AnchorId(id), rows, cols);
            for ch in 0..2 {
                let mut lo = logits.clone();
                let mut hi = logits.clone();
                let idx = id as usize;
                if ch == 0 {
                    lo[idx].0 -= eps;
                    hi[idx].0 += eps;
                } else {
                    lo[idx].1 -= eps;
                    hi[idx].1 += eps;
                }
                let f_lo = plan_loss(&[build(&lo, &offs)], &plan, lambda).unwrap().total;
                let f_hi = plan_loss(&[build(&hi, &offs)], &plan, lambda).unwrap().total;
                let num = (f_hi - f_lo) / (2.0 * eps);
                let ana = g.cls.at3(2 * slot + ch, r, c);
                assert!(
                    (num - ana).abs() < 1e-7,
                    "cls id {id} ch {ch}: {num} vs {ana}"
                );
            }
        }
        // regression map coordinates
        for id in [0u32, 12, 5] {
            let (slot, r, c) = site_of(AnchorId(id), rows, cols);
            for ch in 0..4 {
                let mut lo = offs.clone();
                let mut hi = offs.clone();
                let idx = id as usize;
                let nudge = |o: &mut Offsets, d: f64| match ch {
                    0 => o.dx += d,
                    1 => o.dy += d,
                    2 => o.dw += d,
                    _ => o.dh += d,
                };
                nudge(&mut lo[idx], -eps);
                nudge(&mut hi[idx], eps);
                let f_lo = plan_loss(&[build(&logits, &lo)], &plan, lambda).unwrap().total;
                let f_hi = plan_loss(&[build(&logits, &hi)], &plan, lambda).unwrap().total;
                let num = (f_hi - f_lo) / (2.0 * eps);
                let ana = g.reg.at3(4 * slot + ch, r, c);
                assert!(
                    (num - ana).abs() < 1e-7,
                    "reg id {id} ch {ch}: {num} vs {ana}"
                );
            }
        }
    }

    #[test]
    fn plan_sampling_respects_caps_and_is_seeded() {
        use crate::geometry::generate_anchors;
        let anchors = generate_anchors(9, 9, 8.0, 56.0, &[0.33, 0.5, 1.0, 2.0, 3.0], 32.0).unwrap();
        let gt = BBox::new(64.0, 64.0, 50.0, 50.0);
        let cfg = SampleConfig::default();
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let p1 = build_plan(std::slice::from_ref(&anchors), &gt, &cfg, &mut r1).unwrap();
        let s = p1.stages[0].as_ref().unwrap();
        let pos = s.iter().filter(|x| x.positive).count();
        assert!(pos <= cfg.pos_cap);
        assert!(s.len() <= cfg.samples_per_stage);
        assert!(s.len() > pos, "negatives should top the sample up");
        // positives carry targets, negatives never do
        for x in s {
            assert_eq!(x.positive, x.target.is_some());
        }
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let p2 = build_plan(std::slice::from_ref(&anchors), &gt, &cfg, &mut r2).unwrap();
        let t = p2.stages[0].as_ref().unwrap();
        assert_eq!(s.len(), t.len());
        assert!(s.iter().zip(t.iter()).all(|(a, b)| a.id == b.id));
    }

    #[test]
    fn all_ignored_stage_is_skipped() {
        use crate::geometry::AnchorSet;
        // one anchor at IoU exactly between the thresholds
        let set = AnchorSet {
            stage: 1,
            grid: (1, 1, 1),
            entries: vec![(AnchorId(0), BBox::new(10.0, 10.0, 10.0, 10.0))],
            fallback_fired: false,
        };
        // shifted box with IoU ~0.45: between 0.3 and 0.6
        let gt = BBox::new(13.0, 10.0, 10.0, 10.0);
        let cfg = SampleConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let plan = build_plan(std::slice::from_ref(&set), &gt, &cfg, &mut rng).unwrap();
        assert!(plan.stages[0].is_none());
        assert_eq!(plan.supervised_stages(), 0);
    }
}
