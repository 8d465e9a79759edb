//! Ablation runner: load one trained checkpoint per (variant, seed), track
//! the shared synthetic evaluation suite, and tabulate mean IoU, precision,
//! and fps per variant. Variants cover the cascade depth, switching anchor
//! filtering off (threshold forced to 1.0), and dropping the feature
//! transfer blocks.

use crate::error::{Error, Result};
use crate::harness::checkpoint::load_checkpoint;
use crate::harness::config::RunConfig;
use crate::harness::metrics::{aggregate, evaluate_ope, SeqEval};
use crate::model::{ArchConfig, CascadeConfig, ModelParams};
use crate::tracker::{track_frames, SelectConfig};
use crate::training::{mix_seed, synth_sequence, SynthConfig};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub stages: usize,
    pub naf: bool,
    pub ftb: bool,
}

impl Variant {
    pub fn label(&self) -> String {
        let mut s = format!("s{}", self.stages);
        if !self.naf {
            s.push_str("-nonaf");
        }
        if !self.ftb {
            s.push_str("-noftb");
        }
        s
    }

    pub fn arch(&self) -> ArchConfig {
        let a = ArchConfig::reference().with_stages(self.stages);
        if self.ftb {
            a
        } else {
            a.without_ftb()
        }
    }

    /// Filtering threshold 1.0 keeps every anchor alive, which is exactly
    /// what switching the filter off means.
    pub fn cascade(&self, base: &CascadeConfig) -> CascadeConfig {
        let mut c = base.clone();
        c.stages = self.stages;
        if !self.naf {
            c.theta = 1.0;
        }
        c
    }

    pub fn checkpoint_file(&self, seed: u64) -> String {
        format!("{}-seed{}.ckpt", self.label(), seed)
    }
}

/// Depth sweep plus the two feature switches on the full-depth model.
pub fn standard_variants() -> Vec<Variant> {
    vec![
        Variant { stages: 1, naf: true, ftb: true },
        Variant { stages: 2, naf: true, ftb: true },
        Variant { stages: 3, naf: true, ftb: true },
        Variant { stages: 3, naf: false, ftb: true },
        Variant { stages: 3, naf: true, ftb: false },
    ]
}

/// Track every suite sequence and aggregate. Sequence seeds derive from the
/// suite seed alone, so every variant sees identical footage. fps counts
/// tracked frames (the seeded first frame is free) over tracker wall time.
pub fn eval_on_suite(
    params: &ModelParams<f32>,
    ccfg: &CascadeConfig,
    select: SelectConfig,
    synth: &SynthConfig,
    sequences: usize,
    frames: usize,
    suite_seed: u64,
) -> Result<SeqEval> {
    let mut evals = Vec::with_capacity(sequences);
    let mut tracked = 0usize;
    let mut secs = 0.0;
    for i in 0..sequences {
        let seq = synth_sequence(synth, mix_seed(suite_seed, i as u64), frames);
        let (pred, dt) = track_frames(&seq.frames, &seq.gt[0], params, ccfg, select)?;
        tracked += frames - 1;
        secs += dt;
        evals.push(evaluate_ope(&format!("synth{i:03}"), &pred, &seq.gt, 0.0)?);
    }
    let mut mean = aggregate(evals)?.mean;
    mean.fps = if secs > 0.0 { tracked as f64 / secs } else { 0.0 };
    Ok(mean)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub stages: usize,
    pub seeds: usize,
    pub mean_iou: f64,
    pub precision: f64,
    pub auc: f64,
    pub fps: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,stages,seeds,mean_iou,precision,auc,fps\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.4},{:.4},{:.4},{:.2}\n",
                r.label, r.stages, r.seeds, r.mean_iou, r.precision, r.auc, r.fps
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<12} {:>6} {:>5} {:>9} {:>10} {:>7} {:>8}\n",
            "variant", "stages", "seeds", "mean_iou", "precision", "auc", "fps"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:>6} {:>5} {:>9.4} {:>10.4} {:>7.4} {:>8.2}\n",
                r.label, r.stages, r.seeds, r.mean_iou, r.precision, r.auc, r.fps
            ));
        }
        out
    }
}

/// Evaluate one variant from its per-seed checkpoints and average.
pub fn eval_variant(ckpt_dir: &Path, v: &Variant, cfg: &RunConfig) -> Result<AblationRow> {
    if cfg.ablate_seeds == 0 {
        return Err(Error::Config("ablate.seeds must be at least 1".into()));
    }
    let (mut iou, mut prec, mut auc, mut fps) = (0.0, 0.0, 0.0, 0.0);
    for seed in 0..cfg.ablate_seeds as u64 {
        let path = ckpt_dir.join(v.checkpoint_file(seed));
        if !path.is_file() {
            return Err(Error::Config(format!(
                "missing variant checkpoint {}",
                path.display()
            )));
        }
        let ckpt = load_checkpoint(&path)?;
        if ckpt.params.arch.stages != v.stages || ckpt.params.arch.ftb != v.ftb {
            return Err(Error::Config(format!(
                "{}: checkpoint geometry (stages {}, ftb {}) does not match variant {}",
                path.display(),
                ckpt.params.arch.stages,
                ckpt.params.arch.ftb,
                v.label()
            )));
        }
        let ccfg = v.cascade(&ckpt.cascade);
        let mean = eval_on_suite(
            &ckpt.params,
            &ccfg,
            cfg.select,
            &cfg.synth,
            cfg.eval_sequences,
            cfg.eval_frames,
            cfg.eval_seed,
        )?;
        iou += mean.mean_iou;
        prec += mean.precision;
        auc += mean.auc;
        fps += mean.fps;
    }
    let n = cfg.ablate_seeds as f64;
    Ok(AblationRow {
        label: v.label(),
        stages: v.stages,
        seeds: cfg.ablate_seeds,
        mean_iou: iou / n,
        precision: prec / n,
        auc: auc / n,
        fps: fps / n,
    })
}

pub fn ablate(ckpt_dir: &Path, cfg: &RunConfig) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for v in standard_variants() {
        rows.push(eval_variant(ckpt_dir, &v, cfg)?);
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_unique_and_depths_covered() {
        let vs = standard_variants();
        assert_eq!(vs.len(), 5);
        let mut labels: Vec<String> = vs.iter().map(|v| v.label()).collect();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), 5);
        for s in 1..=3 {
            assert!(vs.iter().any(|v| v.stages == s && v.naf && v.ftb));
        }
    }

    #[test]
    fn naf_off_forces_the_threshold_to_one() {
        let base = CascadeConfig::default();
        let v = Variant { stages: 3, naf: false, ftb: true };
        let c = v.cascade(&base);
        assert_eq!(c.theta, 1.0);
        let on = Variant { stages: 3, naf: true, ftb: true };
        assert_eq!(on.cascade(&base).theta, base.theta);
    }

    #[test]
    fn variant_arch_matches_the_switches() {
        let v = Variant { stages: 2, naf: true, ftb: false };
        let a = v.arch();
        assert_eq!(a.stages, 2);
        assert!(!a.ftb);
        assert_eq!(v.checkpoint_file(1), "s2-noftb-seed1.ckpt");
    }

    #[test]
    fn missing_checkpoint_is_a_named_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let v = Variant { stages: 1, naf: true, ftb: true };
        let err = eval_variant(dir.path(), &v, &cfg).unwrap_err();
        assert!(err.to_string().contains("s1-seed0.ckpt"), "{err}");
    }

    #[test]
    fn table_emits_one_csv_line_per_row() {
        let t = AblationTable {
            rows: vec![AblationRow {
                label: "s3".into(),
                stages: 3,
                seeds: 3,
                mean_iou: 0.61,
                precision: 0.9,
                auc: 0.58,
                fps: 12.5,
            }],
        };
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("s3,3,3,0.6100"));
        assert!(t.to_text().contains("12.50"));
    }

    #[test]
    fn suite_eval_runs_a_tiny_model_end_to_end() {
        let arch = ArchConfig::tiny();
        let params = ModelParams::<f32>::init(arch, 7).unwrap();
        let ccfg = CascadeConfig::default();
        let synth = SynthConfig::tiny();
        let mean = eval_on_suite(
            &params,
            &ccfg,
            SelectConfig::default(),
            &synth,
            2,
            4,
            99,
        )
        .unwrap();
        assert!(mean.fps > 0.0);
        assert!(mean.mean_iou >= 0.0 && mean.mean_iou <= 1.0);
        assert!(mean.auc >= 0.0 && mean.auc <= 1.0);
    }
}
