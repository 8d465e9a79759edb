//! Run plumbing around the model: image and sequence I/O, checkpointing,
//! OPE metrics, overlay rendering, text configuration, and the ablation
//! runner.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod ppm;
pub mod render;
pub mod sequence;

pub use ablate::{ablate, eval_on_suite, standard_variants, AblationTable, Variant};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::RunConfig;
pub use metrics::{aggregate, evaluate_ope, EvalReport, SeqEval};
pub use ppm::{read_ppm, write_ppm};
pub use render::render_overlay;
pub use sequence::{load_sequence, read_boxes, save_sequence, write_boxes, Sequence};
