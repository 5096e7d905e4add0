//! Optimization: Adam, the dynamics stage (motion + physics losses) and the
//! feature decoder stage.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffengine::{backprop, DiffError, ParameterSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::grid::{Mask, RgbImage};
use crate::math::{add3, Vec3};
use crate::neuralfield::{Conditioning, ConditioningInput, ModelConfig, Normalization, VelocityFieldModel};
use crate::physics::{
    loss_boundary, loss_motion, loss_physics, physics_interior, BoundaryProbe, FluidRegion, LossWeights, Query, RasterRegion,
    SceneFlowSample,
};
use crate::renderer::{Decoder, Framebuffer};
use crate::scene::Camera;
use crate::synthlab::{sample_scene_flow, ChannelGeometry, SyntheticScene};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let n = params.numel();
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` from their gradient buffers,
/// with learning rate `lr`.
pub fn adam_step(params: &mut ParameterSet, state: &mut AdamState, hyper: &AdamConfig, lr: f64) -> Result<()> {
    if state.m.len() != params.numel() || state.v.len() != params.numel() {
        return Err(Error::Shape(alloc::format!(
            "optimizer state holds {} entries, parameters {}",
            state.m.len(),
            params.numel()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(hyper.beta1, t as f64);
    let c2 = 1.0 - libm::pow(hyper.beta2, t as f64);
    let mut off = 0;
    for i in 0..params.len() {
        let id = crate::diffengine::ParamId(i);
        let g = params.grad(id).to_vec();
        let vals = params.value_mut(id);
        for (k, (x, g)) in vals.iter_mut().zip(&g).enumerate() {
            let j = off + k;
            state.m[j] = hyper.beta1 * state.m[j] + (1.0 - hyper.beta1) * g;
            state.v[j] = hyper.beta2 * state.v[j] + (1.0 - hyper.beta2) * g * g;
            let mh = state.m[j] / c1;
            let vh = state.v[j] / c2;
            *x -= lr * mh / (libm::sqrt(vh) + hyper.eps);
        }
        off += g.len();
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub physics: bool,
    pub external_force: bool,
    pub hints: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            physics: true,
            external_force: true,
            hints: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub iterations: usize,
    pub batch_flow: usize,
    pub batch_physics: usize,
    pub batch_boundary: usize,
    /// Learning-rate factor applied at each milestone.
    pub lr_decay: f64,
    /// Milestones as fractions of `iterations`.
    pub decay_at: Vec<f64>,
    pub seed: u64,
    pub weights: LossWeights,
    pub ablation: Ablation,
    /// Checkpoint period in iterations; 0 checkpoints only at the end.
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            iterations: 5000,
            batch_flow: 128,
            batch_physics: 64,
            batch_boundary: 64,
            lr_decay: 0.5,
            decay_at: vec![0.4, 0.8],
            seed: 0,
            weights: LossWeights::default(),
            ablation: Ablation::default(),
            checkpoint_every: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Argument(alloc::format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Argument("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_flow == 0 {
            return Err(Error::Argument("flow batch must be nonempty".into()));
        }
        if self.ablation.physics && self.batch_physics == 0 {
            return Err(Error::Argument("physics batch must be nonempty when physics is on".into()));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        let passed = self
            .decay_at
            .iter()
            .filter(|f| iteration as f64 >= **f * self.iterations as f64)
            .count();
        self.adam.lr * libm::pow(self.lr_decay, passed as f64)
    }

    /// Model configuration with the hint switch applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            use_hints: self.ablation.hints,
            ..self.model.clone()
        }
    }

    /// FNV-1a over the debug rendering of the configuration.
    pub fn hash(&self) -> u64 {
        let text = alloc::format!("{self:?}");
        text.bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
    }
}

/// Where fluid may be, for the boundary loss.
#[derive(Clone, Debug, PartialEq)]
pub enum Region {
    Raster { mask: Mask, camera: Camera },
    Channel(ChannelGeometry),
}

impl FluidRegion for Region {
    fn contains(&self, p: Vec3) -> bool {
        match self {
            Region::Raster { mask, camera } => RasterRegion { mask, camera }.contains(p),
            Region::Channel(g) => g.contains(p),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Size of the fixed scene-flow pool.
    pub flow_samples: usize,
    /// Standard deviation of Gaussian noise added to each velocity
    /// component of the pool.
    pub flow_noise: f64,
    pub fluid_points: usize,
    pub boundary_probes: usize,
    /// Boundary band width in pixels.
    pub band_px: usize,
    /// Displacement horizon of the boundary indicator, in frames.
    pub boundary_frames: f64,
    /// Number of sparse flow hints (used when the model reads hints).
    pub hints: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            flow_samples: 20_000,
            flow_noise: 0.0,
            fluid_points: 20_000,
            boundary_probes: 4_000,
            band_px: 2,
            boundary_frames: 1.0,
            hints: 64,
            seed: 0,
        }
    }
}

/// Everything the dynamics stage reads for one scene.
#[derive(Clone, Debug)]
pub struct DynamicsDataset {
    pub conditioning: ConditioningInput,
    pub camera: Camera,
    /// Loop length in seconds; probe times are drawn from `[0, horizon]`.
    pub horizon: f64,
    /// Displacement horizon of the boundary indicator.
    pub boundary_step: f64,
    pub flows: Vec<SceneFlowSample>,
    pub fluid_points: Vec<Vec3>,
    pub boundary: Vec<BoundaryProbe>,
    pub region: Region,
}

impl DynamicsDataset {
    pub fn from_synthetic(scene: &SyntheticScene, config: &DatasetConfig) -> Result<Self> {
        if !(config.boundary_frames > 0.0 && config.boundary_frames.is_finite()) {
            return Err(Error::Argument("boundary_frames must be positive".into()));
        }
        let mut flows = sample_scene_flow(scene, config.flow_samples.max(1), None, config.seed)?;
        if config.flow_noise > 0.0 {
            let normal = Normal::new(0.0, config.flow_noise).map_err(|e| Error::Argument(alloc::format!("{e}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
            for f in &mut flows {
                let n = [normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)];
                f.velocity = add3(f.velocity, n);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        let fluid_points = scene.sample_surface(config.fluid_points.max(1), &mut rng)?;
        let boundary_step = config.boundary_frames * scene.dt();
        let boundary = scene.boundary_probes(config.boundary_probes, config.band_px, boundary_step, config.seed.wrapping_add(2))?;
        let hints = if config.hints > 0 {
            Some(scene.hint_map(config.hints, config.seed.wrapping_add(3))?)
        } else {
            None
        };
        Ok(DynamicsDataset {
            conditioning: scene.conditioning(hints),
            camera: scene.camera.clone(),
            horizon: scene.horizon(),
            boundary_step,
            flows,
            fluid_points,
            boundary,
            region: Region::Channel(scene.geometry),
        })
    }

    pub fn normalization(&self) -> Result<Normalization> {
        Normalization::new(self.camera.clone(), self.horizon)
    }

    pub fn validate(&self) -> Result<()> {
        if self.flows.is_empty() {
            return Err(Error::Argument("dataset has no flow samples".into()));
        }
        if self.fluid_points.is_empty() {
            return Err(Error::Argument("dataset has no fluid points".into()));
        }
        Ok(())
    }

    /// Conditioning for a model that does (or does not) read hints.
    pub fn conditioning_for(&self, config: &ModelConfig) -> ConditioningInput {
        let mut c = self.conditioning.clone();
        if !config.use_hints {
            c.hints = None;
        } else if c.hints.is_none() {
            c.hints = Some(crate::grid::Grid::filled(c.image.width(), c.image.height(), [0.0; 3]));
        }
        c
    }
}

/// Loss terms of one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    pub motion: f64,
    pub ns: f64,
    pub div: f64,
    pub boundary: f64,
    pub physics: f64,
    pub total: f64,
    pub lr: f64,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LossReport>,
    pub seed: u64,
    pub config_hash: u64,
    pub wall_clock_ms: f64,
}

impl TrainLog {
    /// Median total loss over the first and the last tenth of the run.
    pub fn head_tail_medians(&self) -> Option<(f64, f64)> {
        let n = self.rows.len();
        if n < 10 {
            return None;
        }
        let k = n / 10;
        let totals: Vec<f64> = self.rows.iter().map(|r| r.total).collect();
        Some((crate::math::median(&totals[..k]), crate::math::median(&totals[n - k..])))
    }
}

/// Callbacks from the training loop. Timing is supplied by the caller so
/// that deterministic runs can leave it at zero.
pub trait TrainHooks {
    fn elapsed_ms(&mut self) -> f64 {
        0.0
    }
    fn on_report(&mut self, _report: &LossReport) {}
    fn on_checkpoint(&mut self, _iteration: usize, _model: &VelocityFieldModel) -> Result<()> {
        Ok(())
    }
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

fn pick<T: Copy>(pool: &[T], n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

fn diverged(e: Error, iteration: usize) -> Error {
    match e {
        Error::Diff(DiffError::NonFinite { .. }) => Error::Diverged { iteration },
        other => other,
    }
}

/// Trains a freshly initialized model.
pub fn train_dynamics<H: TrainHooks>(dataset: &DynamicsDataset, config: &TrainConfig, hooks: &mut H) -> Result<(VelocityFieldModel, TrainLog)> {
    config.validate()?;
    let model = VelocityFieldModel::new(config.model_config(), dataset.normalization()?)?;
    fine_tune(model, dataset, config, hooks)
}

/// Continues training `model` (its architecture is kept; the model part of
/// `config` is ignored).
pub fn fine_tune<H: TrainHooks>(
    mut model: VelocityFieldModel,
    dataset: &DynamicsDataset,
    config: &TrainConfig,
    hooks: &mut H,
) -> Result<(VelocityFieldModel, TrainLog)> {
    config.validate()?;
    dataset.validate()?;
    let cond = dataset.conditioning_for(model.config()).tensor(model.config())?;
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog {
        rows: Vec::with_capacity(config.iterations),
        seed: config.seed,
        config_hash: config.hash(),
        wall_clock_ms: 0.0,
    };
    let physics_on = config.ablation.physics;
    for it in 0..config.iterations {
        let flows = pick(&dataset.flows, config.batch_flow, &mut rng);
        let (probes, bprobes) = if physics_on {
            let pts = pick(&dataset.fluid_points, config.batch_physics, &mut rng);
            let probes: Vec<Query> = pts.into_iter().map(|p| Query::new(p, rng.random_range(0.0..=dataset.horizon))).collect();
            let b = if dataset.boundary.is_empty() || config.batch_boundary == 0 {
                Vec::new()
            } else {
                pick(&dataset.boundary, config.batch_boundary, &mut rng)
            };
            (probes, b)
        } else {
            (Vec::new(), Vec::new())
        };

        let step = |model: &mut VelocityFieldModel| -> Result<LossReport> {
            let mut tape = Tape::new();
            let mut tm = model.bind_tape(&mut tape, Conditioning::Input(&cond))?;
            if !config.ablation.external_force {
                tm = tm.without_force();
            }
            let motion = loss_motion(&mut tm, &mut tape, &flows)?;
            let mut report = LossReport {
                iteration: it,
                motion: tape.value(motion).item(),
                ns: 0.0,
                div: 0.0,
                boundary: 0.0,
                physics: 0.0,
                total: 0.0,
                lr: config.lr_at(it),
                elapsed_ms: 0.0,
            };
            let total = if physics_on {
                let (ns, div) = physics_interior(&mut tm, &mut tape, &probes)?;
                let b = loss_boundary(&mut tm, &mut tape, &bprobes, &dataset.region, dataset.boundary_step)?;
                let phys = loss_physics(&mut tape, ns, div, b, &config.weights)?;
                report.ns = tape.value(ns).item();
                report.div = tape.value(div).item();
                report.boundary = tape.value(b).item();
                report.physics = tape.value(phys).item();
                let scaled = tape.scale(phys, config.weights.physics)?;
                tape.add(motion, scaled)?
            } else {
                motion
            };
            drop(tm);
            report.total = backprop(&tape, total, &mut model.params)?;
            Ok(report)
        };
        let mut report = match step(&mut model) {
            Ok(r) if r.total.is_finite() && model.params.flat_grads().iter().all(|g| g.is_finite()) => r,
            Ok(_) => {
                hooks.on_checkpoint(it, &model)?;
                return Err(Error::Diverged { iteration: it });
            }
            Err(e) => {
                let e = diverged(e, it);
                if matches!(e, Error::Diverged { .. }) {
                    hooks.on_checkpoint(it, &model)?;
                }
                return Err(e);
            }
        };
        adam_step(&mut model.params, &mut state, &config.adam, report.lr)?;
        report.elapsed_ms = hooks.elapsed_ms();
        hooks.on_report(&report);
        log.rows.push(report);
        if config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0 && it + 1 < config.iterations {
            hooks.on_checkpoint(it + 1, &model)?;
        }
    }
    log.wall_clock_ms = hooks.elapsed_ms();
    hooks.on_checkpoint(config.iterations, &model)?;
    Ok((model, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderTrainConfig {
    pub iterations: usize,
    pub adam: AdamConfig,
    pub crop: usize,
    pub seed: u64,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        DecoderTrainConfig {
            iterations: 2000,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            crop: 32,
            seed: 0,
        }
    }
}

fn crop_planes(t: &Tensor, x0: usize, y0: usize, size: usize) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut d = Vec::with_capacity(c * size * size);
    for k in 0..c {
        for y in y0..y0 + size {
            let row = (k * h + y) * w;
            d.extend_from_slice(&t.data()[row + x0..row + x0 + size]);
        }
    }
    Tensor::new(&[c, size, size], d).expect("crop inside image")
}

fn rgb_planes(img: &RgbImage) -> Tensor {
    let (w, h) = img.dims();
    let mut d = vec![0.0; 3 * w * h];
    for (i, p) in img.data().iter().enumerate() {
        for k in 0..3 {
            d[k * w * h + i] = p[k];
        }
    }
    Tensor::new(&[3, h, w], d).expect("consistent image")
}

/// Fits the decoder to map rendered feature frames to target frames with
/// an L1 loss on random crops. Returns the loss per iteration; a
/// pass-through decoder is left unchanged.
pub fn train_decoder(decoder: &mut Decoder, frames: &[(Framebuffer, RgbImage)], config: &DecoderTrainConfig) -> Result<Vec<f64>> {
    if decoder.is_pass_through() || config.iterations == 0 {
        return Ok(Vec::new());
    }
    if frames.is_empty() {
        return Err(Error::Argument("decoder training needs frames".into()));
    }
    let mut data = Vec::with_capacity(frames.len());
    for (fb, img) in frames {
        if fb.channels != decoder.config.channels || (fb.width, fb.height) != img.dims() {
            return Err(Error::Shape("feature frame and target disagree".into()));
        }
        if fb.width < config.crop || fb.height < config.crop || config.crop == 0 {
            return Err(Error::Argument("crop larger than frame".into()));
        }
        data.push((Decoder::planes(fb), rgb_planes(img)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::new(&decoder.params);
    let mut losses = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let (x, y) = &data[rng.random_range(0..data.len())];
        let (w, h) = (x.shape()[2], x.shape()[1]);
        let x0 = rng.random_range(0..=w - config.crop);
        let y0 = rng.random_range(0..=h - config.crop);
        let xc = crop_planes(x, x0, y0, config.crop);
        let yc = crop_planes(y, x0, y0, config.crop);
        let mut tape = Tape::new();
        let xi = tape.constant(xc)?;
        let out = decoder.forward(&mut tape, xi)?;
        let target = tape.constant(yc)?;
        let d = tape.sub(out, target)?;
        let a = tape.abs(d)?;
        let loss = tape.mean(a)?;
        let v = backprop(&tape, loss, &mut decoder.params).map_err(|e| diverged(e.into(), it))?;
        adam_step(&mut decoder.params, &mut state, &config.adam, config.adam.lr)?;
        losses.push(v);
    }
    Ok(losses)
}

/// Names of parameters that differ between two sets (for diagnostics).
pub fn changed_parameters(a: &ParameterSet, b: &ParameterSet) -> Vec<String> {
    a.entries()
        .iter()
        .zip(b.entries())
        .filter(|(x, y)| x.value != y.value)
        .map(|(x, _)| x.name.clone())
        .collect()
}
