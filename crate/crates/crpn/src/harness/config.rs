//! Plain-text run configuration: `key = value` lines layered over the
//! defaults. Unknown keys and unparseable values are errors that carry the
//! file name and line number.

use crate::error::{Error, Result};
use crate::model::{ArchConfig, CascadeConfig};
use crate::tracker::SelectConfig;
use crate::training::{SynthConfig, TrainConfig};
use std::path::Path;

/// Everything a run can tune, grouped by subsystem. `arch()` derives the
/// network layout from the cascade stage count and the transfer-block flag.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub cascade: CascadeConfig,
    pub select: SelectConfig,
    pub synth: SynthConfig,
    /// Feature transfer blocks between stages; off means raw per-level maps.
    pub ftb: bool,
    /// Evaluation suite shape: sequence count, frames per sequence, base seed.
    pub eval_sequences: usize,
    pub eval_frames: usize,
    pub eval_seed: u64,
    /// Training seeds averaged by the ablation runner.
    pub ablate_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            cascade: CascadeConfig::default(),
            select: SelectConfig::default(),
            synth: SynthConfig::default(),
            ftb: true,
            eval_sequences: 200,
            eval_frames: 100,
            eval_seed: 9001,
            ablate_seeds: 3,
        }
    }
}

impl RunConfig {
    pub fn arch(&self) -> ArchConfig {
        let a = ArchConfig::reference().with_stages(self.cascade.stages);
        if self.ftb {
            a
        } else {
            a.without_ftb()
        }
    }

    /// Applies one override; the caller supplies position info for errors.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}`"))
        }
        match key {
            "train.epochs" => self.train.epochs = num(value)?,
            "train.pairs_per_epoch" => self.train.pairs_per_epoch = num(value)?,
            "train.lr_start" => self.train.lr_start = num(value)?,
            "train.lr_end" => self.train.lr_end = num(value)?,
            "train.lambda" => self.train.lambda = num(value)?,
            "train.seed" => self.train.seed = num(value)?,
            "train.samples_per_stage" => self.train.samples.samples_per_stage = num(value)?,
            "train.pos_cap" => self.train.samples.pos_cap = num(value)?,
            "train.tau_pos" => self.train.samples.tau_pos = num(value)?,
            "train.tau_neg" => self.train.samples.tau_neg = num(value)?,
            "cascade.stages" => self.cascade.stages = num(value)?,
            "cascade.theta" => self.cascade.theta = num(value)?,
            "cascade.fallback_k" => self.cascade.fallback_k = num(value)?,
            "arch.ftb" => self.ftb = num(value)?,
            "select.w_win" => self.select.w_win = num(value)?,
            "select.w_sc" => self.select.w_sc = num(value)?,
            "select.gamma" => self.select.gamma = num(value)?,
            "synth.noise" => self.synth.noise = num(value)?,
            "synth.frame_size" => self.synth.frame_size = num(value)?,
            "eval.sequences" => self.eval_sequences = num(value)?,
            "eval.frames" => self.eval_frames = num(value)?,
            "eval.seed" => self.eval_seed = num(value)?,
            "ablate.seeds" => self.ablate_seeds = num(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.into(),
                line: i + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|msg| Error::Parse {
                path: origin.into(),
                line: i + 1,
                msg,
            })?;
        }
        self.cascade.validate()?;
        self.arch().validate()?;
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_land_in_the_right_fields() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "train.epochs = 3\ncascade.theta = 0.9 # inline comment\narch.ftb = false\nselect.gamma = 1.0\n",
            "test",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.cascade.theta, 0.9);
        assert!(!cfg.ftb);
        assert_eq!(cfg.select.gamma, 1.0);
        assert!(!cfg.arch().ftb);
    }

    #[test]
    fn unknown_key_reports_the_line() {
        let mut cfg = RunConfig::default();
        let err = cfg
            .apply_text("train.epochs = 2\nbogus.key = 1\n", "run.cfg")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("run.cfg"), "{msg}");
        assert!(msg.contains('2'), "{msg}");
        assert!(msg.contains("bogus.key"), "{msg}");
    }

    #[test]
    fn bad_value_and_missing_equals_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_text("train.epochs = soon\n", "t").is_err());
        assert!(cfg.apply_text("train.epochs 5\n", "t").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# full-line comment\n\n  \ntrain.seed = 17\n", "t")
            .unwrap();
        assert_eq!(cfg.train.seed, 17);
    }

    #[test]
    fn invalid_resulting_config_is_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_text("cascade.theta = 1.5\n", "t").is_err());
    }

    #[test]
    fn stage_count_flows_into_the_arch() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("cascade.stages = 1\n", "t").unwrap();
        assert_eq!(cfg.arch().stages, 1);
    }
}
