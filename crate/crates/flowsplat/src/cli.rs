//! `flowsplat` command line.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::bail;
use clap::{Args, Parser, Subcommand};

use flowsplat_core::synthlab::{Disk, SynthConfig};

use crate::config::RunConfig;
use crate::pipeline::{self, EvalInputs};
use crate::report;

#[derive(Debug, Parser)]
#[command(name = "flowsplat", version, about = "Physics-constrained fluid animation from a single image")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic river bundle.
    Synth(SynthArgs),
    /// Fit the velocity field (and optionally the decoder) to a bundle.
    Train(TrainArgs),
    /// Render a looping video from a bundle and a checkpoint.
    Animate(AnimateArgs),
    /// Score frames and a velocity field; writes CSV or JSON lines.
    Eval(EvalArgs),
    /// Add a disk obstacle on the water plane of a bundle.
    Edit(EditArgs),
    /// Finite-difference checks of the training losses.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output bundle directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Generator settings (TOML); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Place a rock in the channel.
    #[arg(long)]
    pub rock: bool,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub fps: Option<f64>,
    /// Downstream acceleration of a drifting flow.
    #[arg(long)]
    pub drift: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (TOML); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Zero all timing fields so repeated runs give identical files.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Output directory for model.ckpt, train_log.csv and run.toml.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Train with the motion loss only.
    #[arg(long)]
    pub no_physics: bool,
    /// Disable the external-force head.
    #[arg(long)]
    pub no_external_force: bool,
    /// Print a loss line every N iterations (0 = silent).
    #[arg(long, default_value_t = 500)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct AnimateArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub decoder: Option<PathBuf>,
    /// Output directory for frame_%05d.png and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Velocity field to score; the analytic flow when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Frames to score; the reference itself when omitted.
    #[arg(long)]
    pub frames: Option<PathBuf>,
    /// Reference frames; the analytic video of a synthetic bundle when
    /// omitted.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Report path: `.jsonl` appends a JSON line, anything else writes CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Disk center on the water plane, `x,y`.
    #[arg(long, value_parser = parse_point, default_value = "0,0")]
    pub center: [f64; 2],
    #[arg(long, default_value_t = 1.0)]
    pub radius: f64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

fn parse_point(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [x, y] = parts.as_slice() else {
        return Err(format!("expected `x,y`, got `{s}`"));
    };
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok([num(x)?, num(y)?])
}

fn run_config(args: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut run = RunConfig::load_or_default(args.config.as_deref())?;
    if let Some(s) = args.seed {
        run.train.seed = s;
        run.train.model.seed = s;
        run.dataset.seed = s;
        run.eval.seed = s;
    }
    run.deterministic |= args.deterministic;
    Ok(run)
}

fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => crate::read_toml(p)?,
        None => SynthConfig::default(),
    };
    cfg.rock |= a.rock;
    cfg.width = a.width.unwrap_or(cfg.width);
    cfg.height = a.height.unwrap_or(cfg.height);
    cfg.frames = a.frames.unwrap_or(cfg.frames);
    cfg.fps = a.fps.unwrap_or(cfg.fps);
    cfg.drift = a.drift.unwrap_or(cfg.drift);
    let b = pipeline::synth(&cfg, &a.out)?;
    println!(
        "wrote {} ({}×{}, {} fluid pixels{})",
        a.out.display(),
        b.image.width(),
        b.image.height(),
        b.mask.count(),
        if b.obstacle.is_some() { ", obstacle" } else { "" }
    );
    Ok(())
}

fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let mut run = run_config(&a.run)?;
    run.train.iterations = a.iterations.unwrap_or(run.train.iterations);
    run.train.adam.lr = a.lr.unwrap_or(run.train.adam.lr);
    run.train.ablation.physics &= !a.no_physics;
    run.train.ablation.external_force &= !a.no_external_force;
    let every = a.log_every;
    let mut progress = |r: &flowsplat_core::training::LossReport| {
        if every > 0 && r.iteration.is_multiple_of(every) {
            eprintln!(
                "iter {:>6}  motion {:.5}  ns {:.5}  div {:.5}  boundary {:.5}  total {:.5}",
                r.iteration, r.motion, r.ns, r.div, r.boundary, r.total
            );
        }
    };
    let out = pipeline::train(&a.bundle, &a.out, &run, Some(&mut progress))?;
    let last = out.log.rows.last().map_or(f64::NAN, |r| r.total);
    println!("trained {} iterations, final loss {last:.6}; wrote {}", out.log.rows.len(), a.out.display());
    Ok(())
}

fn animate(a: &AnimateArgs) -> anyhow::Result<()> {
    let frames = pipeline::animate(&a.bundle, &a.checkpoint, a.decoder.as_deref(), &a.out)?;
    println!("wrote {} frames to {}", frames.len(), a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let run = run_config(&a.run)?;
    let r = pipeline::eval(
        &EvalInputs {
            bundle: &a.bundle,
            model: a.checkpoint.as_deref(),
            frames: a.frames.as_deref(),
            reference: a.reference.as_deref(),
        },
        &run,
    )?;
    if let Some(p) = &a.out {
        report::write_eval(p, &r)?;
    }
    println!(
        "psnr {:.3}  ssim {:.4}  epe {:.5}  l1 {:.5}  div {:.5}  violations {:.4}",
        r.mean_psnr(),
        r.mean_ssim(),
        r.epe,
        r.l1_component,
        r.mean_abs_divergence,
        r.boundary_violation_rate
    );
    Ok(())
}

fn edit(a: &EditArgs) -> anyhow::Result<()> {
    let disk = Disk {
        center: a.center,
        radius: a.radius,
    };
    let b = pipeline::edit(&a.bundle, &a.out, disk)?;
    println!("wrote {} ({} fluid pixels)", a.out.display(), b.mask.count());
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> anyhow::Result<()> {
    let checks = pipeline::gradcheck(a.seed)?;
    let mut failed = Vec::new();
    for c in &checks {
        let ok = c.check.max_rel_error < a.tolerance;
        println!(
            "{:<9} loss {:.6e}  params {:>4}  max rel err {:.3e}  {}",
            c.loss,
            c.value,
            c.check.checked,
            c.check.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(c.loss);
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

pub fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Animate(a) => animate(a),
        Command::Eval(a) => eval(a),
        Command::Edit(a) => edit(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

/// Parses `args` and runs the command. Returns the process exit status:
/// 0 on success, 1 on failure, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args_os())
}
