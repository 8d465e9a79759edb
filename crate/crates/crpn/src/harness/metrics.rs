//! One-pass evaluation: precision (center error within 20 px) and the
//! success curve over 51 IoU thresholds with its AUC. The first frame seeds
//! the tracker with ground truth and is excluded from scoring.

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub const N_THRESHOLDS: usize = 51;
pub const PRECISION_RADIUS: f64 = 20.0;

#[derive(Debug, Clone)]
pub struct SeqEval {
    pub name: String,
    pub precision: f64,
    /// success[i] = fraction of frames with IoU strictly above i * 0.02.
    pub success: Vec<f64>,
    pub auc: f64,
    pub mean_iou: f64,
    pub fps: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub sequences: Vec<SeqEval>,
    pub mean: SeqEval,
}

pub fn evaluate_ope(name: &str, pred: &[BBox], gt: &[BBox], fps: f64) -> Result<SeqEval> {
    if pred.len() != gt.len() {
        return Err(Error::Config(format!(
            "{name}: {} predictions for {} groundtruth frames",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::Config(format!(
            "{name}: need at least 2 frames to score, got {}",
            pred.len()
        )));
    }
    let scored = &pred[1..];
    let truth = &gt[1..];
    let n = scored.len() as f64;

    let mut within = 0usize;
    let mut iou_sum = 0.0;
    let mut ious = Vec::with_capacity(scored.len());
    for (p, g) in scored.iter().zip(truth) {
        let d = ((p.cx - g.cx).powi(2) + (p.cy - g.cy).powi(2)).sqrt();
        if d <= PRECISION_RADIUS {
            within += 1;
        }
        let v = iou(p, g);
        iou_sum += v;
        ious.push(v);
    }
    let success: Vec<f64> = (0..N_THRESHOLDS)
        .map(|i| {
            let t = i as f64 * 0.02;
            ious.iter().filter(|&&v| v > t).count() as f64 / n
        })
        .collect();
    let auc = success.iter().sum::<f64>() / N_THRESHOLDS as f64;
    Ok(SeqEval {
        name: name.into(),
        precision: within as f64 / n,
        success,
        auc,
        mean_iou: iou_sum / n,
        fps,
    })
}

/// Unweighted mean over sequences, order-independent.
pub fn aggregate(sequences: Vec<SeqEval>) -> Result<EvalReport> {
    if sequences.is_empty() {
        return Err(Error::Config("nothing to aggregate".into()));
    }
    let n = sequences.len() as f64;
    let mut success = vec![0.0; N_THRESHOLDS];
    let (mut precision, mut auc, mut mean_iou, mut fps) = (0.0, 0.0, 0.0, 0.0);
    for s in &sequences {
        precision += s.precision;
        auc += s.auc;
        mean_iou += s.mean_iou;
        fps += s.fps;
        for (acc, v) in success.iter_mut().zip(&s.success) {
            *acc += v;
        }
    }
    for v in &mut success {
        *v /= n;
    }
    Ok(EvalReport {
        mean: SeqEval {
            name: "mean".into(),
            precision: precision / n,
            success,
            auc: auc / n,
            mean_iou: mean_iou / n,
            fps: fps / n,
        },
        sequences,
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,precision,auc,mean_iou,fps\n");
        for s in self.sequences.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.2}\n",
                s.name, s.precision, s.auc, s.mean_iou, s.fps
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<20} {:>10} {:>8} {:>9} {:>8}\n",
            "sequence", "precision", "auc", "mean_iou", "fps"
        );
        for s in self.sequences.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&format!(
                "{:<20} {:>10.4} {:>8.4} {:>9.4} {:>8.2}\n",
                s.name, s.precision, s.auc, s.mean_iou, s.fps
            ));
        }
        out
    }
}
