//! The stages behind the command line: synth, train, animate, eval, edit
//! and gradcheck. Each reads and writes the on-disk formats of this crate.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use flowsplat_core::animation::{Animator, PointVelocity};
use flowsplat_core::gradcheck::{check_losses, LossCheck};
use flowsplat_core::grid::{Grid, RgbImage};
use flowsplat_core::metrics::{
    boundary_violation_rate, mean_abs_divergence, psnr, replace_outside, ssim, velocity_l1, EvalReport, JacobianField, SsimParams,
};
use flowsplat_core::neuralfield::{ConditioningInput, ModelConfig, VelocityFieldModel};
use flowsplat_core::physics::{FluidRegion, Query};
use flowsplat_core::renderer::{feature_payload, rasterize, Decoder};
use flowsplat_core::synthlab::{sample_scene_flow, Disk, SynthConfig, SyntheticScene};
use flowsplat_core::training::{train_decoder, train_dynamics, DynamicsDataset, LossReport, TrainHooks, TrainLog};
use flowsplat_core::Error as CoreError;

use crate::bundle::{Bundle, CameraFile};
use crate::checkpoint;
use crate::config::{EvalConfig, RunConfig};
use crate::io;
use crate::report;
use crate::{write_toml, FormatError, Result};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "FLOWSPLAT_THREADS";

pub const MODEL_FILE: &str = "model.ckpt";
pub const DECODER_FILE: &str = "decoder.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:05}.png")
}

/// Runs `f` on a pool sized by [`THREADS_ENV`] (rayon's default if unset).
pub fn with_threads<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CoreError::Argument(format!("{THREADS_ENV} must be a thread count, got `{v}`")))?,
        Err(_) => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CoreError::Argument(e.to_string()))?;
    Ok(pool.install(f))
}

fn elapsed_ms(start: Instant, deterministic: bool) -> f64 {
    if deterministic {
        0.0
    } else {
        start.elapsed().as_secs_f64() * 1e3
    }
}

pub fn synth(config: &SynthConfig, out: &Path) -> Result<Bundle> {
    let scene = SyntheticScene::generate(config)?;
    let bundle = Bundle::from_synthetic(&scene, config, None)?;
    bundle.save(out)?;
    Ok(bundle)
}

pub fn edit(bundle_dir: &Path, out: &Path, disk: Disk) -> Result<Bundle> {
    let edited = Bundle::load(bundle_dir)?.add_obstacle(disk)?;
    edited.save(out)?;
    Ok(edited)
}

/// Encoder input for `config`, filling hint channels with zeros.
pub fn conditioning_for(bundle: &Bundle, config: &ModelConfig) -> ConditioningInput {
    let mut c = bundle.conditioning();
    if config.use_hints {
        c.hints = Some(Grid::filled(c.image.width(), c.image.height(), [0.0; 3]));
    }
    c
}

/// Dataset for a synthetic bundle: supervision from the analytic flow,
/// encoder inputs from the bundle files (as animate and eval see them).
pub fn dataset(bundle: &Bundle, run: &RunConfig) -> Result<DynamicsDataset> {
    let scene = bundle
        .synthetic_scene()?
        .ok_or_else(|| CoreError::Argument("training needs scene-flow supervision; this bundle has no synthetic source".into()))?;
    let mut ds = DynamicsDataset::from_synthetic(&scene, &run.dataset)?;
    ds.conditioning = bundle.conditioning();
    Ok(ds)
}

struct Hooks<'a, 'p> {
    start: Instant,
    deterministic: bool,
    out: &'a Path,
    progress: Option<&'p mut dyn FnMut(&LossReport)>,
}

impl TrainHooks for Hooks<'_, '_> {
    fn elapsed_ms(&mut self) -> f64 {
        elapsed_ms(self.start, self.deterministic)
    }

    fn on_report(&mut self, r: &LossReport) {
        if let Some(p) = self.progress.as_mut() {
            p(r);
        }
    }

    fn on_checkpoint(&mut self, iteration: usize, model: &VelocityFieldModel) -> flowsplat_core::Result<()> {
        checkpoint::save(&self.out.join(MODEL_FILE), model, iteration).map_err(|e| CoreError::Argument(e.to_string()))
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: VelocityFieldModel,
    pub log: TrainLog,
    pub decoder: Option<Decoder>,
}

/// Trains the dynamics stage (and the decoder when configured) and writes
/// `model.ckpt`, `train_log.csv`, `run.toml` and possibly `decoder.ckpt`
/// into `out`. On divergence the last good checkpoint is left in place.
pub fn train(bundle_dir: &Path, out: &Path, run: &RunConfig, progress: Option<&mut dyn FnMut(&LossReport)>) -> Result<TrainOutcome> {
    if run.train.ablation.hints {
        return Err(CoreError::Argument("flow hints are not stored in bundles; disable the hints ablation".into()).into());
    }
    let bundle = Bundle::load(bundle_dir)?;
    let ds = dataset(&bundle, run)?;
    fs::create_dir_all(out).map_err(|e| FormatError::io(out, e))?;
    write_toml(&out.join("run.toml"), run)?;
    let mut hooks = Hooks {
        start: Instant::now(),
        deterministic: run.deterministic,
        out,
        progress,
    };
    let (model, mut log) = train_dynamics(&ds, &run.train, &mut hooks)?;
    if run.deterministic {
        log.wall_clock_ms = 0.0;
    }
    report::write_train_log(&out.join(TRAIN_LOG_FILE), &log)?;
    let arch = &run.decoder.architecture;
    let decoder = if run.decoder.fit.iterations > 0 && arch.layers > 0 {
        let mut dec = Decoder::new(arch.clone())?;
        let feat = feature_payload(&bundle.gaussians()?, arch.channels, arch.seed)?;
        let fb = rasterize(&feat, &bundle.camera, &vec![0.0; arch.channels])?;
        train_decoder(&mut dec, &[(fb, bundle.image.clone())], &run.decoder.fit)?;
        checkpoint::save_decoder(&out.join(DECODER_FILE), &dec)?;
        Some(dec)
    } else {
        None
    };
    Ok(TrainOutcome { model, log, decoder })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub frames: usize,
    pub fps: f64,
    pub symmetric_splatting: bool,
    pub loop_period: usize,
    pub files: Vec<String>,
    pub cameras: CameraFile,
}

/// Renders the bundle's trajectory with the checkpointed field and writes
/// numbered PNG frames plus `manifest.json`. Frames render in parallel.
pub fn animate(bundle_dir: &Path, model_path: &Path, decoder_path: Option<&Path>, out: &Path) -> Result<Vec<RgbImage>> {
    let bundle = Bundle::load(bundle_dir)?;
    let (model, _) = checkpoint::load(model_path)?;
    let decoder = match decoder_path {
        Some(p) => checkpoint::load_decoder(p)?,
        None => Decoder::pass_through(),
    };
    let field = model.bind(&conditioning_for(&bundle, model.config()))?;
    let mut gaussians = bundle.gaussians()?;
    if !decoder.is_pass_through() {
        gaussians = feature_payload(&gaussians, decoder.config.channels, decoder.config.seed)?;
    }
    let config = bundle.animation_config()?;
    let animator = Animator::new(&gaussians, &field, &config)?;
    let background = vec![0.0; gaussians.channels];
    let frames = with_threads(|| {
        (0..config.frames)
            .into_par_iter()
            .map(|f| animator.render_frame(f, &bundle.trajectory, &decoder, &background))
            .collect::<flowsplat_core::Result<Vec<_>>>()
    })??;
    fs::create_dir_all(out).map_err(|e| FormatError::io(out, e))?;
    let files: Vec<String> = (0..frames.len()).map(frame_name).collect();
    for (img, name) in frames.iter().zip(&files) {
        io::write_png(&out.join(name), img)?;
    }
    let manifest = Manifest {
        frames: config.frames,
        fps: config.fps,
        symmetric_splatting: config.symmetric_splatting,
        loop_period: config.loop_period,
        files,
        cameras: CameraFile::from_cameras(&bundle.camera, &bundle.trajectory),
    };
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| FormatError::io(&path, e))?;
    Ok(frames)
}

pub fn read_frames(dir: &Path, count: usize) -> Result<Vec<RgbImage>> {
    (0..count).map(|i| io::read_png(&dir.join(frame_name(i)))).collect()
}

/// Reference video of a synthetic bundle (analytic flow), rendered along
/// the bundle trajectory.
pub fn ground_truth_frames(bundle: &Bundle) -> Result<Vec<RgbImage>> {
    let scene = bundle
        .synthetic_scene()?
        .ok_or_else(|| CoreError::Argument("no reference frames given and the bundle has no synthetic source".into()))?;
    let g = scene.gaussians()?;
    let config = bundle.animation_config()?;
    let animator = Animator::new(&g, &scene.field, &config)?;
    let pass = Decoder::pass_through();
    let frames = with_threads(|| {
        (0..config.frames)
            .into_par_iter()
            .map(|f| animator.render_frame(f, &bundle.trajectory, &pass, &[0.0; 3]))
            .collect::<flowsplat_core::Result<Vec<_>>>()
    })??;
    Ok(frames)
}

pub struct EvalInputs<'a> {
    pub bundle: &'a Path,
    pub model: Option<&'a Path>,
    /// Frames to score; defaults to the reference itself.
    pub frames: Option<&'a Path>,
    /// Reference frames; defaults to the analytic video of a synthetic
    /// bundle.
    pub reference: Option<&'a Path>,
}

struct VelocityScores {
    epe: f64,
    l1_component: f64,
    l1_vector: f64,
    divergence: f64,
    violation: f64,
}

fn velocity_scores<F: PointVelocity + JacobianField + ?Sized>(
    field: &F,
    scene: Option<&SyntheticScene>,
    bundle: &Bundle,
    cfg: &EvalConfig,
) -> Result<VelocityScores> {
    let anim = bundle.animation_config()?;
    let region = bundle.region()?;
    let (errs, probes, points) = match scene {
        Some(s) => {
            let flows = sample_scene_flow(s, cfg.flow_probes.max(1), None, cfg.seed)?;
            let errs = velocity_l1(field, &flows)?;
            let probes = s.sample_probes(cfg.divergence_probes.max(1), cfg.seed.wrapping_add(1))?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
            let points = s.sample_surface(cfg.violation_points, &mut rng)?;
            (Some(errs), probes, points)
        }
        None => {
            let points = mask_points(bundle, cfg.violation_points)?;
            let step = anim.horizon() / points.len().max(1) as f64;
            let probes = points.iter().enumerate().map(|(i, &p)| Query::new(p, i as f64 * step)).collect();
            (None, probes, points)
        }
    };
    let divergence = if probes.is_empty() { 0.0 } else { mean_abs_divergence(field, &probes)? };
    let violation = boundary_violation_rate(&points, field, &region, 0.0, anim.horizon(), anim.dt())?;
    Ok(VelocityScores {
        epe: errs.map_or(f64::NAN, |e| e.epe),
        l1_component: errs.map_or(f64::NAN, |e| e.l1_component),
        l1_vector: errs.map_or(f64::NAN, |e| e.l1_vector),
        divergence,
        violation,
    })
}

/// Up to `n` lifted fluid pixels, evenly strided over the mask.
fn mask_points(bundle: &Bundle, n: usize) -> Result<Vec<[f64; 3]>> {
    let mut px = Vec::new();
    for y in 0..bundle.mask.height() {
        for x in 0..bundle.mask.width() {
            let d = *bundle.depth.get(x, y);
            if *bundle.mask.get(x, y) && d.is_finite() && d > 0.0 {
                px.push((x, y, d));
            }
        }
    }
    let stride = (px.len() / n.max(1)).max(1);
    let region = bundle.region()?;
    let mut out = Vec::new();
    for &(x, y, d) in px.iter().step_by(stride).take(n) {
        let p = bundle.camera.lift(x as f64, y as f64, d)?;
        if region.contains(p) {
            out.push(p);
        }
    }
    Ok(out)
}

/// Scores frames against a reference (PSNR/SSIM, full and fluid-only) and
/// the velocity field (the checkpoint, or the analytic flow when no
/// checkpoint is given) against the analytic flow. Velocity errors are NaN
/// for bundles without a synthetic source.
pub fn eval(inputs: &EvalInputs, run: &RunConfig) -> Result<EvalReport> {
    let start = Instant::now();
    let bundle = Bundle::load(inputs.bundle)?;
    let scene = bundle.synthetic_scene()?;
    let reference = match inputs.reference {
        Some(dir) => read_frames(dir, bundle.frames)?,
        None => ground_truth_frames(&bundle)?,
    };
    let frames = match inputs.frames {
        Some(dir) => read_frames(dir, bundle.frames)?,
        None => reference.clone(),
    };
    let params = SsimParams::default();
    let mask = &bundle.mask;
    let per_frame = with_threads(|| {
        frames
            .par_iter()
            .zip(reference.par_iter())
            .map(|(f, r)| -> flowsplat_core::Result<[f64; 4]> {
                let fluid = replace_outside(f, r, mask)?;
                Ok([psnr(f, r, 1.0)?, ssim(f, r, &params)?, psnr(&fluid, r, 1.0)?, ssim(&fluid, r, &params)?])
            })
            .collect::<flowsplat_core::Result<Vec<_>>>()
    })??;
    let scores = match inputs.model {
        Some(p) => {
            let (model, _) = checkpoint::load(p)?;
            let field = model.bind(&conditioning_for(&bundle, model.config()))?;
            velocity_scores(&field, scene.as_ref(), &bundle, &run.eval)?
        }
        None => {
            let s = scene
                .as_ref()
                .ok_or_else(|| CoreError::Argument("without a checkpoint the bundle must be synthetic".into()))?;
            velocity_scores(&s.field, Some(s), &bundle, &run.eval)?
        }
    };
    Ok(EvalReport {
        psnr: per_frame.iter().map(|m| m[0]).collect(),
        ssim: per_frame.iter().map(|m| m[1]).collect(),
        psnr_fluid: per_frame.iter().map(|m| m[2]).collect(),
        ssim_fluid: per_frame.iter().map(|m| m[3]).collect(),
        epe: scores.epe,
        l1_component: scores.l1_component,
        l1_vector: scores.l1_vector,
        mean_abs_divergence: scores.divergence,
        boundary_violation_rate: scores.violation,
        runtime_ms: elapsed_ms(start, run.deterministic),
    })
}

pub fn gradcheck(seed: u64) -> Result<Vec<LossCheck>> {
    Ok(check_losses(seed)?)
}

/// Paths produced by one `synth → train → animate → eval` run.
#[derive(Clone, Debug)]
pub struct RunDirs {
    pub bundle: PathBuf,
    pub train: PathBuf,
    pub frames: PathBuf,
    pub report: PathBuf,
}

impl RunDirs {
    pub fn under(root: &Path) -> Self {
        RunDirs {
            bundle: root.join("bundle"),
            train: root.join("train"),
            frames: root.join("frames"),
            report: root.join("report.jsonl"),
        }
    }
}

/// The whole pipeline with one configuration.
pub fn end_to_end(synth_cfg: &SynthConfig, run: &RunConfig, dirs: &RunDirs) -> Result<EvalReport> {
    synth(synth_cfg, &dirs.bundle)?;
    let trained = train(&dirs.bundle, &dirs.train, run, None)?;
    let decoder = trained.decoder.is_some().then(|| dirs.train.join(DECODER_FILE));
    animate(&dirs.bundle, &dirs.train.join(MODEL_FILE), decoder.as_deref(), &dirs.frames)?;
    let report = eval(
        &EvalInputs {
            bundle: &dirs.bundle,
            model: Some(&dirs.train.join(MODEL_FILE)),
            frames: Some(&dirs.frames),
            reference: None,
        },
        run,
    )?;
    report::append_eval_jsonl(&dirs.report, &report)?;
    Ok(report)
}
