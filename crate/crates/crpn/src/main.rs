//! Command-line front end: synthetic data generation, training, tracking,
//! evaluation, gradient verification, and the ablation table.

use clap::{Parser, Subcommand};
use crpn::error::{Error, Result};
use crpn::harness::checkpoint::{save_checkpoint, Checkpoint};
use crpn::harness::{
    ablate, aggregate, evaluate_ope, load_checkpoint, load_sequence, read_boxes, read_ppm,
    render_overlay, save_sequence, write_boxes, write_ppm, RunConfig,
};
use crpn::model::ModelParams;
use crpn::tensor::gradcheck_suite;
use crpn::tracker::{self, track_frame};
use crpn::training::{composite_check, mix_seed, synth_sequence, train, StepRecord};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "crpn", about = "Siamese cascaded region-proposal tracker")]
struct Cli {
    /// Base seed; overrides `train.seed` and `eval.seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` overrides layered on the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for everything written.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic evaluation sequences to disk.
    GenData,
    /// Train from scratch, then write a checkpoint and the full step log.
    Train {
        /// Checkpoint file name inside --out.
        #[arg(long, default_value = "model.ckpt")]
        name: String,
        /// Echo every Nth step record to stdout.
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Track one sequence with a trained checkpoint; writes `<name>.txt`
    /// with one `x,y,w,h` corner-form line per frame.
    Track {
        ckpt: PathBuf,
        seq_dir: PathBuf,
        /// Also write overlay frames under --out/overlays/<name>.
        #[arg(long)]
        render: bool,
    },
    /// Score a results file against a sequence's groundtruth.
    Eval { results: PathBuf, seq_dir: PathBuf },
    /// Finite-difference verification of every op and the composite loss.
    GradCheck,
    /// Evaluate the per-variant checkpoints in --out on the synthetic suite.
    Ablate,
}

fn record_line(rec: &StepRecord, stages: usize) -> String {
    let mut line = format!(
        "{},{},{:e},{:.6}",
        rec.step, rec.epoch, rec.lr, rec.loss
    );
    for l in 0..stages {
        let v = rec.stage_losses.get(l).copied().unwrap_or(0.0);
        line.push_str(&format!(",{v:.6}"));
    }
    line.push_str(&format!(",{},{}", rec.pos, rec.neg));
    line
}

fn cmd_gen_data(cfg: &RunConfig, out: &PathBuf) -> Result<()> {
    for i in 0..cfg.eval_sequences {
        let seq = synth_sequence(&cfg.synth, mix_seed(cfg.eval_seed, i as u64), cfg.eval_frames);
        save_sequence(&out.join(format!("seq{i:03}")), &seq.frames, &seq.gt)?;
    }
    println!(
        "wrote {} sequences x {} frames under {}",
        cfg.eval_sequences,
        cfg.eval_frames,
        out.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &PathBuf, name: &str, log_every: usize) -> Result<()> {
    let stages = cfg.cascade.stages;
    let mut params = ModelParams::<f32>::init(cfg.arch(), cfg.train.seed)?;
    let mut header = String::from("step,epoch,lr,loss_total");
    for l in 1..=stages {
        header.push_str(&format!(",loss_stage{l}"));
    }
    header.push_str(",pos_count,neg_count");
    println!("{header}");
    let mut log = header;
    log.push('\n');
    let last = cfg.train.epochs * cfg.train.pairs_per_epoch - 1;
    train(&mut params, &cfg.cascade, &cfg.train, &cfg.synth, |rec| {
        let line = record_line(rec, stages);
        if log_every > 0 && (rec.step % log_every == 0 || rec.step == last) {
            println!("{line}");
        }
        log.push_str(&line);
        log.push('\n');
    })?;
    std::fs::write(out.join("train_log.csv"), log)?;
    let ckpt = Checkpoint {
        version: 1,
        params,
        cascade: cfg.cascade.clone(),
        train: cfg.train.clone(),
    };
    let path = out.join(name);
    save_checkpoint(&ckpt, &path)?;
    println!("saved {}", path.display());
    Ok(())
}

fn cmd_track(
    cfg: &RunConfig,
    cascade_overridden: bool,
    out: &PathBuf,
    ckpt_path: &PathBuf,
    seq_dir: &PathBuf,
    render: bool,
) -> Result<()> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let seq = load_sequence(seq_dir)?;
    let ccfg = if cascade_overridden { cfg.cascade.clone() } else { ckpt.cascade.clone() };
    let frames: Vec<_> = seq
        .frames
        .iter()
        .map(|p| read_ppm(p))
        .collect::<Result<_>>()?;
    let mut state = tracker::init(&frames[0], &seq.gt[0], &ckpt.params, cfg.select)?;
    let mut boxes = vec![seq.gt[0]];
    let mut filters = Vec::new();
    let started = std::time::Instant::now();
    for frame in &frames[1..] {
        let (b, diag) = track_frame(&mut state, frame, &ckpt.params, &ccfg)?;
        boxes.push(b);
        if render {
            filters.push(diag.filters);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let results = out.join(format!("{}.txt", seq.name));
    write_boxes(&results, &boxes)?;
    println!(
        "tracked {} frames in {:.1}s ({:.1} fps) -> {}",
        frames.len() - 1,
        secs,
        (frames.len() - 1) as f64 / secs.max(1e-9),
        results.display()
    );
    if render {
        let dir = out.join("overlays").join(&seq.name);
        std::fs::create_dir_all(&dir)?;
        for (i, frame) in frames.iter().enumerate() {
            let meta = if i == 0 { None } else { Some(&filters[i - 1][..]) };
            let img = render_overlay(frame, &boxes[i], Some(&seq.gt[i]), meta)?;
            write_ppm(&dir.join(format!("{:04}.ppm", i + 1)), &img)?;
        }
        println!("wrote {} overlays under {}", frames.len(), dir.display());
    }
    Ok(())
}

fn cmd_eval(out: &PathBuf, results: &PathBuf, seq_dir: &PathBuf) -> Result<()> {
    let seq = load_sequence(seq_dir)?;
    let pred = read_boxes(results)?;
    let ev = evaluate_ope(&seq.name, &pred, &seq.gt, 0.0)?;
    let report = aggregate(vec![ev])?;
    print!("{}", report.to_text());
    let csv = out.join("eval.csv");
    std::fs::write(&csv, report.to_csv())?;
    println!("wrote {}", csv.display());
    Ok(())
}

fn cmd_grad_check(base_seed: u64) -> Result<()> {
    let mut failures = 0;
    for seed in base_seed..base_seed + 5 {
        for rep in gradcheck_suite(seed)? {
            let ok = rep.passed();
            if !ok {
                failures += 1;
            }
            println!(
                "[{}] {:<34} seed {:>3}  max rel err {:.3e}  (tol {:.0e})",
                if ok { "pass" } else { "FAIL" },
                rep.name,
                seed,
                rep.max_rel_err,
                rep.threshold
            );
        }
        let comp = composite_check(seed)?;
        let ok = comp.passed(1e-4);
        if !ok {
            failures += 1;
        }
        println!(
            "[{}] {:<34} seed {:>3}  max rel err {:.3e}  (tol 1e-4, {} coords, worst {})",
            if ok { "pass" } else { "FAIL" },
            "composite stage loss",
            seed,
            comp.max_rel_err,
            comp.coords,
            comp.worst
        );
    }
    if failures > 0 {
        return Err(Error::Config(format!("{failures} gradient checks failed")));
    }
    println!("all gradient checks passed");
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, out: &PathBuf) -> Result<()> {
    let table = ablate(out, cfg)?;
    print!("{}", table.to_text());
    let csv = out.join("ablation.csv");
    std::fs::write(&csv, table.to_csv())?;
    println!("wrote {}", csv.display());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.eval_seed = seed;
    }
    std::fs::create_dir_all(&cli.out)?;
    match &cli.cmd {
        Cmd::GenData => cmd_gen_data(&cfg, &cli.out),
        Cmd::Train { name, log_every } => cmd_train(&cfg, &cli.out, name, *log_every),
        Cmd::Track { ckpt, seq_dir, render } => cmd_track(
            &cfg,
            cli.config.is_some(),
            &cli.out,
            ckpt,
            seq_dir,
            *render,
        ),
        Cmd::Eval { results, seq_dir } => cmd_eval(&cli.out, results, seq_dir),
        Cmd::GradCheck => cmd_grad_check(cli.seed.unwrap_or(0)),
        Cmd::Ablate => cmd_ablate(&cfg, &cli.out),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
