//! Command-line front end for the multispectral pedestrian detector.

use clap::{Args, Parser, Subcommand};
use specdet_core::checkpoint;
use specdet_core::config::Config;
use specdet_core::data;
use specdet_core::error::{Error, Result};
use specdet_core::model::{Ablation, Model};
use specdet_core::tensor::{assert_reports, run_all_checks, Tape};
use specdet_core::train::{evaluate_detector, StepStats, Trainer};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "specdet", version, about = "RGB + thermal pedestrian detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigOpts {
    /// Flat key=value config file ('#' starts a comment)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigOpts {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone, Copy)]
struct AblationOpts {
    /// Replace the learned spectral gate with a fixed 0.5/0.5 blend
    #[arg(long)]
    no_msfpm: bool,
    /// Drop the feature decoupling branch and both embedding losses
    #[arg(long)]
    no_irfdm: bool,
    /// Drop the contrastive (triplet) loss term
    #[arg(long)]
    no_cl: bool,
}

impl From<AblationOpts> for Ablation {
    fn from(a: AblationOpts) -> Ablation {
        Ablation { no_msfpm: a.no_msfpm, no_irfdm: a.no_irfdm, no_cl: a.no_cl }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired RGB/thermal dataset
    Synth {
        #[command(flatten)]
        cfg: ConfigOpts,
        /// Output directory for images, labels, and the manifest
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a detector on a dataset directory
    Train {
        /// Dataset directory produced by `synth` (or matching its layout)
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigOpts,
        #[command(flatten)]
        ablation: AblationOpts,
        /// Directory for model.ckpt and train_log.csv
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against a labeled dataset directory
    Eval {
        /// Checkpoint written by `train`
        ckpt: PathBuf,
        /// Dataset directory
        data: PathBuf,
        #[command(flatten)]
        ablation: AblationOpts,
        /// Optional key=value metrics file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run detection and print one line per box
    Detect {
        /// Checkpoint written by `train`
        ckpt: PathBuf,
        /// Dataset directory or a sample stem like dir/scene_00003
        input: PathBuf,
        #[command(flatten)]
        ablation: AblationOpts,
        /// Optional output file (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify every differentiable op against finite differences
    GradCheck {
        #[command(flatten)]
        cfg: ConfigOpts,
        /// Optional report file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump per-sample gate weights and embedding alignments as CSV
    ExportFeatures {
        /// Checkpoint written by `train`
        ckpt: PathBuf,
        /// Dataset directory
        data: PathBuf,
        #[command(flatten)]
        ablation: AblationOpts,
        /// CSV output path
        #[arg(long)]
        out: PathBuf,
    },
}

fn threads_from_env() -> Result<usize> {
    match std::env::var("SPECDET_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(Error::Usage("SPECDET_THREADS is not valid UTF-8".into()))
        }
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "SPECDET_THREADS must be a positive integer, got {s:?}"
                ))
            }),
    }
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_image_sizes(samples: &[data::Sample], cfg_size: usize) -> Result<()> {
    for s in samples {
        let size = s.visible.shape[1];
        if size != cfg_size {
            return Err(Error::Data(format!(
                "{}: image is {size}px but the config expects {cfg_size}px",
                s.id
            )));
        }
    }
    Ok(())
}

fn cmd_synth(cfg: &ConfigOpts, out: &Path) -> Result<()> {
    let cfg = cfg.resolve()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ids = data::synth::generate(out, &cfg)?;
    log::info!("wrote {} scenes to {}", ids.len(), out.display());
    Ok(())
}

fn cmd_train(
    data_dir: &Path,
    cfg: &ConfigOpts,
    ablation: Ablation,
    out: &Path,
) -> Result<()> {
    let cfg = cfg.resolve()?;
    let all = data::load_dir(data_dir)?;
    check_image_sizes(&all, cfg.image_size)?;
    let (train_set, val_set) = data::split(all);
    if train_set.is_empty() {
        return Err(Error::Data(format!(
            "{} has no training samples after the validation split",
            data_dir.display()
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    log::info!(
        "training on {} samples ({} held out) for {} epochs",
        train_set.len(),
        val_set.len(),
        cfg.epochs
    );

    let mut trainer = Trainer::new(&cfg, ablation, train_set.len())?;
    let mut log_lines = vec![StepStats::CSV_HEADER.to_string()];
    for epoch in 0..cfg.epochs {
        let stats = trainer.run_epoch(&train_set)?;
        let last = stats.last().expect("epoch always has steps");
        let joint = last.values.joint;
        for s in &stats {
            log_lines.push(s.csv_line());
        }
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && !val_set.is_empty() {
            let ev = evaluate_detector(
                &trainer.model,
                &trainer.store,
                &val_set,
                ablation,
                cfg.eval_conf_threshold,
                1,
            )?;
            log_lines.push(format!("# eval epoch={epoch} map50={}", ev.map50));
            log::info!("epoch {epoch}: joint {joint} val mAP@50 {:.4}", ev.map50);
        } else if (epoch + 1) % 25 == 0 || epoch + 1 == cfg.epochs {
            log::info!("epoch {epoch}: joint {joint}");
        }
    }

    checkpoint::save(&out.join("model.ckpt"), &cfg, cfg.epochs as u64, &trainer.store)?;
    write_out(&out.join("train_log.csv"), &(log_lines.join("\n") + "\n"))?;
    log::info!("saved {}", out.join("model.ckpt").display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, data_dir: &Path, ablation: Ablation, out: Option<&Path>) -> Result<()> {
    let ck = checkpoint::load(ckpt)?;
    let samples = data::load_dir(data_dir)?;
    check_image_sizes(&samples, ck.cfg.image_size)?;
    let threads = threads_from_env()?;
    let ev = evaluate_detector(
        &ck.model,
        &ck.store,
        &samples,
        ablation,
        ck.cfg.eval_conf_threshold,
        threads,
    )?;
    let mut report = String::new();
    report.push_str(&format!("map50={}\n", ev.map50));
    report.push_str(&format!("map_coco={}\n", ev.map_coco));
    for (class, ap) in &ev.ap50_per_class {
        report.push_str(&format!("ap50.class{class}={ap}\n"));
    }
    print!("{report}");
    if let Some(path) = out {
        write_out(path, &report)?;
    }
    Ok(())
}

fn detect_one(
    model: &Model,
    store: &specdet_core::ParamStore,
    sample: &data::Sample,
    ablation: Ablation,
    out: &mut String,
) -> Result<()> {
    let mut tape = Tape::new();
    let dets = model.detect(&mut tape, store, sample, ablation, model.cfg.conf_threshold)?;
    for d in dets {
        out.push_str(&format!(
            "{} {} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            sample.id, d.class, d.score, d.cx, d.cy, d.w, d.h
        ));
    }
    Ok(())
}

fn cmd_detect(ckpt: &Path, input: &Path, ablation: Ablation, out: Option<&Path>) -> Result<()> {
    let ck = checkpoint::load(ckpt)?;
    let samples = if input.is_dir() {
        data::load_dir(input)?
    } else {
        // either root/visible/scene_00003.ppm or a bare stem root/scene_00003
        let name = input
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Usage(format!("bad input path {}", input.display())))?;
        let parent = input.parent().unwrap_or(Path::new("."));
        let (root, stem) = match name.strip_suffix(".ppm") {
            Some(stem) => (parent.parent().unwrap_or(Path::new(".")), stem),
            None => (parent, name),
        };
        vec![data::load_unlabeled(root, stem)?]
    };
    check_image_sizes(&samples, ck.cfg.image_size)?;
    let mut text = String::new();
    for s in &samples {
        detect_one(&ck.model, &ck.store, s, ablation, &mut text)?;
    }
    print!("{text}");
    if let Some(path) = out {
        write_out(path, &text)?;
    }
    Ok(())
}

fn cmd_grad_check(cfg: &ConfigOpts, out: Option<&Path>) -> Result<()> {
    let cfg = cfg.resolve()?;
    let reports = run_all_checks(100, cfg.seed)?;
    let mut text = String::new();
    for r in &reports {
        text.push_str(&format!(
            "{:<22} trials={} entries={} max_rel_err={:.3e} {}\n",
            r.op,
            r.trials,
            r.entries,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    print!("{text}");
    if let Some(path) = out {
        write_out(path, &text)?;
    }
    assert_reports(&reports)
}

fn cmd_export_features(
    ckpt: &Path,
    data_dir: &Path,
    ablation: Ablation,
    out: &Path,
) -> Result<()> {
    if ablation.no_irfdm {
        return Err(Error::Usage(
            "export-features needs the decoupling branch; drop --no-irfdm".into(),
        ));
    }
    let ck = checkpoint::load(ckpt)?;
    let samples = data::load_dir(data_dir)?;
    check_image_sizes(&samples, ck.cfg.image_size)?;
    let mut csv =
        String::from("id,illumination,w_ir_l0,w_ir_l1,w_ir_l2,w_ir_mean,cos_vis,cos_ir\n");
    for s in &samples {
        let mut tape = Tape::new();
        let fwd = ck.model.forward_sample(&mut tape, &ck.store, s, ablation)?;
        let w: Vec<f32> = fwd.gates.iter().map(|&g| tape.data(g)[1]).collect();
        let emb = fwd.embeddings.expect("decoupling branch is enabled");
        let dot = |a: &[f32], b: &[f32]| -> f32 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
        let cos_vis = dot(tape.data(emb.hv), tape.data(emb.bv));
        let cos_ir = dot(tape.data(emb.hi), tape.data(emb.bi));
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.id,
            s.illumination,
            w[0],
            w[1],
            w[2],
            (w[0] + w[1] + w[2]) / 3.0,
            cos_vis,
            cos_ir
        ));
    }
    write_out(out, &csv)?;
    log::info!("wrote {} rows to {}", samples.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { cfg, out } => cmd_synth(cfg, out),
        Command::Train { data, cfg, ablation, out } => {
            cmd_train(data, cfg, (*ablation).into(), out)
        }
        Command::Eval { ckpt, data, ablation, out } => {
            cmd_eval(ckpt, data, (*ablation).into(), out.as_deref())
        }
        Command::Detect { ckpt, input, ablation, out } => {
            cmd_detect(ckpt, input, (*ablation).into(), out.as_deref())
        }
        Command::GradCheck { cfg, out } => cmd_grad_check(cfg, out.as_deref()),
        Command::ExportFeatures { ckpt, data, ablation, out } => {
            cmd_export_features(ckpt, data, (*ablation).into(), out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| writeln!(buf, "[{}] {}", record.level(), record.args()))
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // clap renders help to stdout and errors to stderr on its own
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
