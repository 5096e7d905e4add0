//! Conditional velocity field `u(x, t; Z(x))` with its image encoder and
//! external-force head.
//!
//! A query point is projected into the conditioning view, its pixel
//! coordinates, depth and time are rescaled into roughly `[-1, 1]`, expanded
//! by a sinusoidal embedding and concatenated with the encoder feature
//! bilinearly sampled at the projected pixel. The MLP maps that vector to a
//! world-space velocity.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::{Activation, Dual, DualStack, ParamId, ParameterSet, SparseMap, Tape, Tensor, Var, DIRS};
use crate::error::{arg, Error, Result};
use crate::grid::{check_dims, DepthMap, Grid, Mask, RgbImage};
use crate::math::{Real, Vec3};
use crate::physics::{Query, VelocityField};
use crate::scene::Camera;

/// Where the conditioning feature of a moving point is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSampling {
    /// At the point's current (advected) position.
    #[default]
    Current,
    /// At the point's initial position.
    Initial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Widths of the hidden MLP layers.
    pub hidden: Vec<usize>,
    /// Embedding frequencies per coordinate.
    pub frequencies: usize,
    /// Output channels of the four encoder stages.
    pub encoder_channels: Vec<usize>,
    /// Box-pooling factor applied to the conditioning inputs before encoding.
    pub input_pool: usize,
    pub force_hidden: usize,
    pub use_hints: bool,
    pub feature_sampling: FeatureSampling,
    pub activation: Activation,
    pub encoder_activation: Activation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![256, 128, 64, 32],
            frequencies: 6,
            encoder_channels: vec![8, 16, 16, 16],
            input_pool: 2,
            force_hidden: 32,
            use_hints: false,
            feature_sampling: FeatureSampling::Current,
            activation: Activation::Relu,
            encoder_activation: Activation::LeakyRelu(0.2),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn embed_dim(&self) -> usize {
        embed_dim(self.frequencies)
    }

    pub fn feature_channels(&self) -> usize {
        self.encoder_channels.last().copied().unwrap_or(0)
    }

    pub fn input_channels(&self) -> usize {
        if self.use_hints {
            8
        } else {
            5
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frequencies == 0 {
            return arg("at least one embedding frequency is required");
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return arg("encoder needs at least one stage with nonzero width");
        }
        if self.hidden.contains(&0) || self.input_pool == 0 || self.force_hidden == 0 {
            return arg("layer widths and pooling factor must be nonzero");
        }
        Ok(())
    }
}

/// Constants mapping world queries into normalized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub camera: Camera,
    /// Total duration in seconds.
    pub horizon: f64,
}

impl Normalization {
    pub fn new(camera: Camera, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) {
            return arg("time horizon must be positive");
        }
        Ok(Normalization { camera, horizon })
    }

    pub fn apply<R: Real>(&self, p: [R; 3], t: R) -> Result<[R; 4]> {
        normalize_coords(p, t, &self.camera, self.camera.width, self.camera.height, self.horizon)
    }
}

/// `(x', y', z', t')` with `x' = 2xᵖ/(W−1) − 1`, `y' = 2yᵖ/(H−1) − 1`,
/// `z' = 2/max(d, 1) − 1` and `t' = t/T`, where `(xᵖ, yᵖ, d)` is the
/// projection of `p` through `camera`.
pub fn normalize_coords<R: Real>(p: [R; 3], t: R, camera: &Camera, w: usize, h: usize, horizon: f64) -> Result<[R; 4]> {
    if !(horizon > 0.0) {
        return arg("time horizon must be positive");
    }
    let (u, v, d) = camera.project_real(p)?;
    let sx = 2.0 / (w.max(2) as f64 - 1.0);
    let sy = 2.0 / (h.max(2) as f64 - 1.0);
    let z = if d.value() >= 1.0 {
        R::cst(2.0) / d - R::cst(1.0)
    } else {
        R::cst(1.0)
    };
    Ok([u.scale(sx) - R::cst(1.0), v.scale(sy) - R::cst(1.0), z, t.scale(1.0 / horizon)])
}

pub fn embed_dim(frequencies: usize) -> usize {
    4 + 8 * frequencies
}

/// Raw coordinates followed by, for each frequency `ℓ`, the four values
/// `sin(2^ℓ π cᵢ)` and then the four values `cos(2^ℓ π cᵢ)`.
pub fn positional_embedding<R: Real>(c: [R; 4], frequencies: usize) -> Vec<R> {
    let mut out = Vec::with_capacity(embed_dim(frequencies));
    out.extend_from_slice(&c);
    let mut f = core::f64::consts::PI;
    for _ in 0..frequencies {
        for ci in c {
            out.push(ci.scale(f).sin());
        }
        for ci in c {
            out.push(ci.scale(f).cos());
        }
        f *= 2.0;
    }
    out
}

/// Per-pixel flow hints `(du, dv, valid)`; zero away from hinted pixels.
pub type HintMap = Grid<[f64; 3]>;

/// Paints sparse hints `(x, y, du, dv)` as disks of `radius` pixels.
pub fn densify_hints(width: usize, height: usize, hints: &[(f64, f64, f64, f64)], radius: f64) -> HintMap {
    let mut map = HintMap::filled(width, height, [0.0; 3]);
    let r = radius.max(0.0);
    for &(hx, hy, du, dv) in hints {
        let (x0, x1) = (libm::floor(hx - r).max(0.0) as usize, libm::ceil(hx + r).max(0.0) as usize);
        let (y0, y1) = (libm::floor(hy - r).max(0.0) as usize, libm::ceil(hy + r).max(0.0) as usize);
        for y in y0..=y1.min(height.saturating_sub(1)) {
            for x in x0..=x1.min(width.saturating_sub(1)) {
                let (dx, dy) = (x as f64 - hx, y as f64 - hy);
                if dx * dx + dy * dy <= r * r + 1e-12 {
                    map.set(x, y, [du, dv, 1.0]);
                }
            }
        }
    }
    map
}

/// Inputs of the encoder for one conditioning image.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningInput {
    pub image: RgbImage,
    pub depth: DepthMap,
    pub mask: Mask,
    pub hints: Option<HintMap>,
}

impl ConditioningInput {
    /// Encoder input tensor `[C, H/pool, W/pool]`: RGB centered on zero,
    /// normalized depth `2/max(d,1) − 1`, mask, and hint channels when the
    /// configuration asks for them (zeros if no hints are given).
    pub fn tensor(&self, config: &ModelConfig) -> Result<Tensor> {
        check_dims(&self.image, &self.depth, "image vs depth")?;
        check_dims(&self.image, &self.mask, "image vs mask")?;
        if let Some(h) = &self.hints {
            check_dims(&self.image, h, "image vs hints")?;
        }
        let pool = config.input_pool;
        let (w, h) = (self.image.width() / pool, self.image.height() / pool);
        if w == 0 || h == 0 {
            return Err(Error::Shape("conditioning image smaller than the pooling window".into()));
        }
        let c = config.input_channels();
        let mut data = vec![0.0; c * w * h];
        let inv = 1.0 / (pool * pool) as f64;
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 8];
                for dy in 0..pool {
                    for dx in 0..pool {
                        let (px, py) = (x * pool + dx, y * pool + dy);
                        let rgb = self.image.get(px, py);
                        let d = *self.depth.get(px, py);
                        let dn = if d.is_finite() && d > 0.0 { 2.0 / d.max(1.0) - 1.0 } else { 0.0 };
                        acc[0] += rgb[0] - 0.5;
                        acc[1] += rgb[1] - 0.5;
                        acc[2] += rgb[2] - 0.5;
                        acc[3] += dn;
                        acc[4] += if *self.mask.get(px, py) { 1.0 } else { 0.0 };
                        if let (true, Some(hm)) = (config.use_hints, &self.hints) {
                            let v = hm.get(px, py);
                            acc[5] += v[0];
                            acc[6] += v[1];
                            acc[7] += v[2];
                        }
                    }
                }
                for ch in 0..c {
                    data[(ch * h + y) * w + x] = acc[ch] * inv;
                }
            }
        }
        Ok(Tensor::new(&[c, h, w], data)?)
    }
}

/// Encoder output `Z`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::Shape("feature grid must be rank 3".into()));
        }
        Ok(FeatureGrid {
            channels: s[0],
            height: s[1],
            width: s[2],
            data: t.data().to_vec(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.channels, self.height, self.width], self.data.clone()).expect("consistent grid")
    }

    /// Bilinear sample at grid coordinates, clamped to the grid.
    pub fn sample_grid(&self, gx: f64, gy: f64) -> Vec<f64> {
        let taps = bilinear_taps::<f64>(gx, gy, self.width, self.height);
        let plane = self.width * self.height;
        (0..self.channels)
            .map(|c| taps.iter().map(|(i, w)| w * self.data[c * plane + i]).sum())
            .collect()
    }
}

/// Bilinear sample of `z` at the pixel where `p` projects in `camera`.
/// Pixel `u` maps to grid coordinate `u (w−1)/(W−1)`; samples outside the
/// grid are clamped to the border.
pub fn sample_feature(z: &FeatureGrid, p: Vec3, camera: &Camera) -> Result<Vec<f64>> {
    let (u, v, _) = camera.project_real(p)?;
    let (gx, gy) = pixel_to_grid(u, v, camera, z.width, z.height);
    Ok(z.sample_grid(gx, gy))
}

fn pixel_to_grid<R: Real>(u: R, v: R, camera: &Camera, w: usize, h: usize) -> (R, R) {
    let sx = (w as f64 - 1.0) / (camera.width.max(2) as f64 - 1.0);
    let sy = (h as f64 - 1.0) / (camera.height.max(2) as f64 - 1.0);
    (u.scale(sx), v.scale(sy))
}

/// Four `(flat index, weight)` taps; weights carry derivatives when `R`
/// is a dual number. Clamped coordinates have zero derivative.
fn bilinear_taps<R: Real>(gx: R, gy: R, w: usize, h: usize) -> [(usize, R); 4] {
    let axis = |g: R, n: usize| -> (usize, usize, R) {
        let hi = (n - 1) as f64;
        if n == 1 || g.value() <= 0.0 {
            return (0, if n > 1 { 1 } else { 0 }, R::cst(0.0));
        }
        if g.value() >= hi {
            return (n - 2, n - 1, R::cst(1.0));
        }
        let i0 = (libm::floor(g.value()) as usize).min(n - 2);
        (i0, i0 + 1, g - R::cst(i0 as f64))
    };
    let (x0, x1, fx) = axis(gx, w);
    let (y0, y1, fy) = axis(gy, h);
    let one = R::cst(1.0);
    [
        (y0 * w + x0, (one - fx) * (one - fy)),
        (y0 * w + x1, fx * (one - fy)),
        (y1 * w + x0, (one - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

#[derive(Clone, Debug, PartialEq)]
struct StageIds {
    down_w: ParamId,
    down_b: ParamId,
    res1_w: ParamId,
    res1_b: ParamId,
    res2_w: ParamId,
    res2_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct ForceIds {
    conv_w: ParamId,
    conv_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

/// Encoder, velocity MLP and force head with their normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityFieldModel {
    config: ModelConfig,
    normalization: Normalization,
    pub params: ParameterSet,
    encoder: Vec<StageIds>,
    mlp: Vec<(ParamId, ParamId)>,
    force: ForceIds,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / libm::sqrt(fan_in as f64);
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

impl VelocityFieldModel {
    /// Randomly initialized model (uniform `±1/√fan_in`, seeded).
    pub fn new(config: ModelConfig, normalization: Normalization) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParameterSet::new();
        let mut add = |params: &mut ParameterSet, name: String, shape: &[usize], fan_in: usize| -> Result<ParamId> {
            let n = shape.iter().product();
            Ok(params.add(&name, shape, uniform(&mut rng, n, fan_in))?)
        };
        let mut encoder = Vec::new();
        let mut cin = config.input_channels();
        for (s, &c) in config.encoder_channels.iter().enumerate() {
            let p = |n: &str| alloc::format!("encoder.{s}.{n}");
            encoder.push(StageIds {
                down_w: add(&mut params, p("down.w"), &[c, cin, 4, 4], cin * 16)?,
                down_b: add(&mut params, p("down.b"), &[c], cin * 16)?,
                res1_w: add(&mut params, p("res1.w"), &[c, c, 3, 3], c * 9)?,
                res1_b: add(&mut params, p("res1.b"), &[c], c * 9)?,
                res2_w: add(&mut params, p("res2.w"), &[c, c, 3, 3], c * 9)?,
                res2_b: add(&mut params, p("res2.b"), &[c], c * 9)?,
            });
            cin = c;
        }
        let zc = config.feature_channels();
        let mut mlp = Vec::new();
        let mut fan = config.embed_dim() + zc;
        for (i, &hdim) in config.hidden.iter().chain(core::iter::once(&3)).enumerate() {
            let w = add(&mut params, alloc::format!("mlp.{i}.w"), &[hdim, fan], fan)?;
            let b = add(&mut params, alloc::format!("mlp.{i}.b"), &[hdim], fan)?;
            mlp.push((w, b));
            fan = hdim;
        }
        let fh = config.force_hidden;
        let force = ForceIds {
            conv_w: add(&mut params, "force.conv.w".into(), &[zc, zc, 3, 3], zc * 9)?,
            conv_b: add(&mut params, "force.conv.b".into(), &[zc], zc * 9)?,
            fc1_w: add(&mut params, "force.fc1.w".into(), &[fh, zc], zc)?,
            fc1_b: add(&mut params, "force.fc1.b".into(), &[fh], zc)?,
            fc2_w: add(&mut params, "force.fc2.w".into(), &[3, fh], fh)?,
            fc2_b: add(&mut params, "force.fc2.b".into(), &[3], fh)?,
        };
        Ok(VelocityFieldModel {
            config,
            normalization,
            params,
            encoder,
            mlp,
            force,
        })
    }

    /// Rebuilds a model with the given parameter values (checkpoint load).
    pub fn with_values(config: ModelConfig, normalization: Normalization, values: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self> {
        let mut m = VelocityFieldModel::new(config, normalization)?;
        if values.len() != m.params.len() {
            return Err(Error::Shape(alloc::format!(
                "expected {} parameter arrays, found {}",
                m.params.len(),
                values.len()
            )));
        }
        for (name, shape, data) in values {
            let id = m
                .params
                .find(name)
                .ok_or_else(|| Error::Shape(alloc::format!("unknown parameter `{name}`")))?;
            if &m.params.entry(id).shape != shape {
                return Err(Error::Shape(alloc::format!("shape mismatch for `{name}`")));
            }
            m.params.value_mut(id).copy_from_slice(data);
        }
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    /// Parameter ids of the final MLP layer.
    pub fn output_layer(&self) -> (ParamId, ParamId) {
        *self.mlp.last().expect("mlp has an output layer")
    }

    /// Parameter ids of the external-force head.
    pub fn force_params(&self) -> Vec<ParamId> {
        let f = &self.force;
        vec![f.conv_w, f.conv_b, f.fc1_w, f.fc1_b, f.fc2_w, f.fc2_b]
    }

    /// Parameter ids of the encoder.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.encoder
            .iter()
            .flat_map(|s| [s.down_w, s.down_b, s.res1_w, s.res1_b, s.res2_w, s.res2_b])
            .collect()
    }

    /// Sets every parameter of the given ids to zero.
    pub fn zero_params(&mut self, ids: &[ParamId]) {
        for &id in ids {
            self.params.value_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn encode_on_tape(&self, tape: &mut Tape, input: &Tensor) -> Result<Var> {
        let expected = self.config.input_channels();
        if input.shape().len() != 3 || input.shape()[0] != expected {
            return Err(Error::Shape(alloc::format!(
                "encoder expects {expected} input channels, got shape {:?}",
                input.shape()
            )));
        }
        let act = self.config.encoder_activation;
        let mut h = tape.constant(input.clone())?;
        for s in &self.encoder {
            let p = |tape: &mut Tape, id| tape.param(&self.params, id);
            let (dw, db) = (p(tape, s.down_w)?, p(tape, s.down_b)?);
            let x = tape.conv2d(h, dw, 2, 1)?;
            let x = tape.add_channel(x, db)?;
            let x = tape.act(x, act)?;
            let (r1w, r1b, r2w, r2b) = (p(tape, s.res1_w)?, p(tape, s.res1_b)?, p(tape, s.res2_w)?, p(tape, s.res2_b)?);
            let r = tape.conv2d(x, r1w, 1, 1)?;
            let r = tape.add_channel(r, r1b)?;
            let r = tape.act(r, act)?;
            let r = tape.conv2d(r, r2w, 1, 1)?;
            let r = tape.add_channel(r, r2b)?;
            let y = tape.add(x, r)?;
            h = tape.act(y, act)?;
        }
        Ok(h)
    }

    /// Feature grid `Z` of a conditioning input.
    pub fn encode_features(&self, input: &ConditioningInput) -> Result<FeatureGrid> {
        let t = input.tensor(&self.config)?;
        self.encode_tensor(&t)
    }

    pub fn encode_tensor(&self, input: &Tensor) -> Result<FeatureGrid> {
        let mut tape = Tape::new();
        let z = self.encode_on_tape(&mut tape, input)?;
        FeatureGrid::from_tensor(tape.value(z))
    }

    fn force_on_tape(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let f = &self.force;
        let p = |tape: &mut Tape, id| tape.param(&self.params, id);
        let (cw, cb) = (p(tape, f.conv_w)?, p(tape, f.conv_b)?);
        let h = tape.conv2d(z, cw, 2, 1)?;
        let h = tape.add_channel(h, cb)?;
        let h = tape.act(h, Activation::Relu)?;
        let g = tape.global_avg_pool(h)?;
        let (w1, b1, w2, b2) = (p(tape, f.fc1_w)?, p(tape, f.fc1_b)?, p(tape, f.fc2_w)?, p(tape, f.fc2_b)?);
        let g = tape.matmul_t(g, w1)?;
        let g = tape.add_row(g, b1)?;
        let g = tape.act(g, Activation::Relu)?;
        let g = tape.matmul_t(g, w2)?;
        Ok(tape.add_row(g, b2)?)
    }

    /// External force `f_g` predicted from a feature grid.
    pub fn external_force(&self, z: &FeatureGrid) -> Result<Vec3> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.to_tensor())?;
        let f = self.force_on_tape(&mut tape, zv)?;
        let d = tape.value(f).data();
        Ok([d[0], d[1], d[2]])
    }

    /// Binds the model to a tape for one conditioning image. With
    /// [`Conditioning::Input`] the encoder is recorded (and trained); with
    /// [`Conditioning::Features`] `Z` enters as a constant.
    pub fn bind_tape<'a>(&'a self, tape: &mut Tape, conditioning: Conditioning<'_>) -> Result<TapeModel<'a>> {
        let z = match conditioning {
            Conditioning::Input(t) => self.encode_on_tape(tape, t)?,
            Conditioning::Features(g) => tape.constant(g.to_tensor())?,
        };
        let zs = tape.value(z).shape().to_vec();
        Ok(TapeModel {
            model: self,
            z,
            grid: (zs[1], zs[2]),
            force: None,
            force_enabled: true,
        })
    }

    /// Inference handle with `Z` and `f_g` precomputed.
    pub fn bind(&self, input: &ConditioningInput) -> Result<BoundField<'_>> {
        let z = self.encode_features(input)?;
        self.bind_features(z)
    }

    pub fn bind_features(&self, z: FeatureGrid) -> Result<BoundField<'_>> {
        let force = self.external_force(&z)?;
        Ok(BoundField { model: self, z, force })
    }

    /// Builds the `[rows × (E + C)]` first-layer input for the queries; with
    /// `dual` the four tangent blocks follow the primal rows.
    fn input_stack(&self, tape: &mut Tape, z: Var, grid: (usize, usize), queries: &[Query], dual: bool) -> Result<DualStack> {
        let n = queries.len();
        if n == 0 {
            return arg("velocity queried with no points");
        }
        let blocks = if dual { DIRS + 1 } else { 1 };
        let e = self.config.embed_dim();
        let (gh, gw) = grid;
        let cam = &self.normalization.camera;
        let mut emb = vec![0.0; blocks * n * e];
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); blocks * n];
        for (i, q) in queries.iter().enumerate() {
            let seed = Dual::seed([q.position[0], q.position[1], q.position[2], q.time]);
            let c = self.normalization.apply([seed[0], seed[1], seed[2]], seed[3])?;
            let pe = positional_embedding(c, self.config.frequencies);
            for (j, v) in pe.iter().enumerate() {
                emb[i * e + j] = v.value;
                if dual {
                    for d in 0..DIRS {
                        emb[((d + 1) * n + i) * e + j] = v.tangent[d];
                    }
                }
            }
            let taps = match (self.config.feature_sampling, q.anchor) {
                (FeatureSampling::Initial, Some(a)) => {
                    let (u, v, _) = cam.project_real(a)?;
                    let (gx, gy) = pixel_to_grid(u, v, cam, gw, gh);
                    bilinear_taps(Dual::constant(gx), Dual::constant(gy), gw, gh)
                }
                _ => {
                    let (u, v, _) = cam.project_real([seed[0], seed[1], seed[2]])?;
                    let (gx, gy) = pixel_to_grid(u, v, cam, gw, gh);
                    bilinear_taps(gx, gy, gw, gh)
                }
            };
            for (idx, w) in taps {
                rows[i].push((idx, w.value));
                if dual {
                    for d in 0..DIRS {
                        if w.tangent[d] != 0.0 {
                            rows[(d + 1) * n + i].push((idx, w.tangent[d]));
                        }
                    }
                }
            }
        }
        let mut map = SparseMap::new();
        for r in &rows {
            map.push_row(r);
        }
        let feat = tape.gather(z, map)?;
        let emb = tape.constant(Tensor::new(&[blocks * n, e], emb)?)?;
        let stack = tape.concat_cols(emb, feat)?;
        Ok(DualStack { stack, n })
    }

    fn mlp_on_tape(&self, tape: &mut Tape, mut s: DualStack) -> Result<DualStack> {
        let last = self.mlp.len() - 1;
        for (i, &(w, b)) in self.mlp.iter().enumerate() {
            let wv = tape.param(&self.params, w)?;
            let bv = tape.param(&self.params, b)?;
            s = s.linear(tape, wv, bv)?;
            if i < last {
                s = s.act(tape, self.config.activation)?;
            }
        }
        Ok(s)
    }
}

/// Source of the feature grid when binding a model to a tape.
pub enum Conditioning<'a> {
    Input(&'a Tensor),
    Features(&'a FeatureGrid),
}

/// A model recorded on a tape; implements [`VelocityField`] for losses.
pub struct TapeModel<'a> {
    model: &'a VelocityFieldModel,
    z: Var,
    grid: (usize, usize),
    force: Option<Var>,
    force_enabled: bool,
}

impl TapeModel<'_> {
    /// Disables the external-force head: `f_g` becomes the zero vector.
    pub fn without_force(mut self) -> Self {
        self.force_enabled = false;
        self
    }

    pub fn features(&self) -> Var {
        self.z
    }
}

impl VelocityField for TapeModel<'_> {
    fn velocity(&mut self, tape: &mut Tape, queries: &[Query]) -> Result<Var> {
        let s = self.model.input_stack(tape, self.z, self.grid, queries, false)?;
        Ok(self.model.mlp_on_tape(tape, s)?.stack)
    }

    fn velocity_dual(&mut self, tape: &mut Tape, queries: &[Query]) -> Result<DualStack> {
        let s = self.model.input_stack(tape, self.z, self.grid, queries, true)?;
        self.model.mlp_on_tape(tape, s)
    }

    fn external_force(&mut self, tape: &mut Tape) -> Result<Var> {
        if !self.force_enabled {
            return Ok(tape.constant(Tensor::zeros(&[1, 3]))?);
        }
        if let Some(f) = self.force {
            return Ok(f);
        }
        let f = self.model.force_on_tape(tape, self.z)?;
        self.force = Some(f);
        Ok(f)
    }
}

/// Inference-only field with a fixed feature grid.
#[derive(Clone, Debug)]
pub struct BoundField<'a> {
    model: &'a VelocityFieldModel,
    z: FeatureGrid,
    force: Vec3,
}

/// Queries evaluated per tape in batch inference.
const CHUNK: usize = 2048;

impl BoundField<'_> {
    pub fn features(&self) -> &FeatureGrid {
        &self.z
    }

    pub fn model(&self) -> &VelocityFieldModel {
        self.model
    }

    pub fn force(&self) -> Vec3 {
        self.force
    }

    pub fn velocity_at(&self, p: Vec3, t: f64) -> Result<Vec3> {
        Ok(self.velocities(&[Query::new(p, t)])?[0])
    }

    pub fn velocities(&self, queries: &[Query]) -> Result<Vec<Vec3>> {
        let mut out = Vec::with_capacity(queries.len());
        let zt = self.z.to_tensor();
        for chunk in queries.chunks(CHUNK) {
            let mut tape = Tape::new();
            let z = tape.constant(zt.clone())?;
            let s = self.model.input_stack(&mut tape, z, (self.z.height, self.z.width), chunk, false)?;
            let u = self.model.mlp_on_tape(&mut tape, s)?.stack;
            for r in tape.value(u).data().chunks(3) {
                out.push([r[0], r[1], r[2]]);
            }
        }
        Ok(out)
    }

    /// Batched values and 3×4 Jacobians with respect to `(x, y, z, t)`.
    pub fn jacobians(&self, queries: &[Query]) -> Result<Vec<(Vec3, [[f64; 4]; 3])>> {
        let mut out = Vec::with_capacity(queries.len());
        let zt = self.z.to_tensor();
        for chunk in queries.chunks(CHUNK / 4) {
            let mut tape = Tape::new();
            let z = tape.constant(zt.clone())?;
            let s = self.model.input_stack(&mut tape, z, (self.z.height, self.z.width), chunk, true)?;
            let s = self.model.mlp_on_tape(&mut tape, s)?;
            let d = tape.value(s.stack).data();
            let n = chunk.len();
            for i in 0..n {
                let mut j = [[0.0; 4]; 3];
                for dir in 0..DIRS {
                    for r in 0..3 {
                        j[r][dir] = d[((dir + 1) * n + i) * 3 + r];
                    }
                }
                out.push(([d[i * 3], d[i * 3 + 1], d[i * 3 + 2]], j));
            }
        }
        Ok(out)
    }

    /// Value and 3×4 Jacobian with respect to `(x, y, z, t)`.
    pub fn jacobian_at(&self, p: Vec3, t: f64) -> Result<(Vec3, [[f64; 4]; 3])> {
        let mut tape = Tape::new();
        let z = tape.constant(self.z.to_tensor())?;
        let s = self
            .model
            .input_stack(&mut tape, z, (self.z.height, self.z.width), &[Query::new(p, t)], true)?;
        let s = self.model.mlp_on_tape(&mut tape, s)?;
        let d = tape.value(s.stack).data();
        let mut j = [[0.0; 4]; 3];
        for (dir, col) in (0..DIRS).zip(1..) {
            for r in 0..3 {
                j[r][dir] = d[col * 3 + r];
            }
        }
        Ok(([d[0], d[1], d[2]], j))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::fdcheck::{jacobian_fd, relative_error};
    use crate::diffengine::value_and_grad;
    use nalgebra::{Matrix3, Vector3};

    fn camera(w: usize, h: usize) -> Camera {
        Camera::look_at([0.0, -9.0, 7.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], 0.5 * w as f64, w, h).unwrap()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            hidden: vec![16, 12],
            frequencies: 2,
            encoder_channels: vec![4, 4],
            input_pool: 1,
            force_hidden: 8,
            activation: Activation::Tanh,
            encoder_activation: Activation::Tanh,
            seed: 7,
            ..ModelConfig::default()
        }
    }

    fn conditioning(w: usize, h: usize) -> ConditioningInput {
        ConditioningInput {
            image: RgbImage::from_fn(w, h, |x, y| [x as f64 / w as f64, y as f64 / h as f64, 0.3]),
            depth: DepthMap::from_fn(w, h, |x, _| 6.0 + x as f64 * 0.1),
            mask: Mask::from_fn(w, h, |_, y| y > h / 3),
            hints: None,
        }
    }

    #[test]
    fn corner_pixels_map_to_square_corners() {
        let cam = Camera::new(100.0, 100.0, 255.5, 255.5, Matrix3::identity(), Vector3::zeros(), 512, 512).unwrap();
        for (u, v, ex, ey) in [(0.0, 0.0, -1.0, -1.0), (511.0, 511.0, 1.0, 1.0), (0.0, 511.0, -1.0, 1.0)] {
            let p = cam.lift(u, v, 2.0).unwrap();
            let c = normalize_coords(p, 0.0, &cam, 512, 512, 3.0).unwrap();
            assert!((c[0] - ex).abs() < 1e-12 && (c[1] - ey).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_and_time_normalization() {
        let cam = Camera::new(100.0, 100.0, 5.0, 5.0, Matrix3::identity(), Vector3::zeros(), 11, 11).unwrap();
        let c1 = normalize_coords([0.0, 0.0, 1.0], 0.0, &cam, 11, 11, 2.0).unwrap();
        let c2 = normalize_coords([0.0, 0.0, 2.0], 2.0, &cam, 11, 11, 2.0).unwrap();
        assert_eq!(c1[2], 1.0);
        assert_eq!(c2[2], 0.0);
        assert_eq!(c1[3], 0.0);
        assert_eq!(c2[3], 1.0);
        assert!(normalize_coords([0.0, 0.0, -1.0], 0.0, &cam, 11, 11, 2.0).is_err());
    }

    #[test]
    fn embedding_layout() {
        let e = positional_embedding([0.0f64; 4], 3);
        assert_eq!(e.len(), embed_dim(3));
        for l in 0..3 {
            let base = 4 + 8 * l;
            assert!(e[base..base + 4].iter().all(|v| *v == 0.0));
            assert!(e[base + 4..base + 8].iter().all(|v| *v == 1.0));
        }
        let e = positional_embedding([0.5, 0.0, 0.0, 0.0], 1);
        assert!((e[4] - 1.0).abs() < 1e-15);
        let a = positional_embedding([0.3, -0.2, 0.7, 0.1], 4);
        let b = positional_embedding([2.3, -0.2, 0.7, 0.1], 4);
        for i in 4..a.len() {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_sampling_is_bilinear() {
        let g = FeatureGrid {
            channels: 2,
            height: 2,
            width: 3,
            data: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
        };
        assert_eq!(g.sample_grid(1.0, 1.0), vec![4.0, 1.0]);
        assert_eq!(g.sample_grid(0.5, 0.0), vec![0.5, 1.0]);
        assert_eq!(g.sample_grid(-4.0, 9.0), vec![3.0, 1.0]);
        let cam = Camera::new(50.0, 50.0, 1.0, 0.5, Matrix3::identity(), Vector3::zeros(), 3, 2).unwrap();
        let p = cam.lift(2.0, 1.0, 3.0).unwrap();
        assert_eq!(sample_feature(&g, p, &cam).unwrap(), vec![5.0, 1.0]);
    }

    #[test]
    fn zero_encoder_gives_zero_features_and_force() {
        let cam = camera(16, 16);
        let mut m = VelocityFieldModel::new(small_config(), Normalization::new(cam, 2.0).unwrap()).unwrap();
        let enc = m.encoder_params();
        m.zero_params(&enc);
        let z = m.encode_features(&conditioning(16, 16)).unwrap();
        assert!(z.data.iter().all(|v| *v == 0.0));
        let f = m.force_params();
        m.zero_params(&f);
        assert_eq!(m.external_force(&z).unwrap(), [0.0; 3]);
    }

    #[test]
    fn encoder_resolution_follows_stride_and_is_deterministic() {
        let cfg = small_config();
        for s in [16usize, 32] {
            let m = VelocityFieldModel::new(cfg.clone(), Normalization::new(camera(s, s), 2.0).unwrap()).unwrap();
            let z = m.encode_features(&conditioning(s, s)).unwrap();
            assert_eq!((z.width, z.height), (s / 4, s / 4));
            let z2 = m.encode_features(&conditioning(s, s)).unwrap();
            assert_eq!(z, z2);
        }
        let m = VelocityFieldModel::new(cfg, Normalization::new(camera(16, 16), 2.0).unwrap()).unwrap();
        let mut bad = conditioning(16, 16);
        bad.mask = Mask::filled(8, 16, true);
        assert!(m.encode_features(&bad).is_err());
    }

    #[test]
    fn zero_output_layer_gives_zero_velocity() {
        let cam = camera(16, 16);
        let mut m = VelocityFieldModel::new(small_config(), Normalization::new(cam.clone(), 2.0).unwrap()).unwrap();
        let (w, b) = m.output_layer();
        m.zero_params(&[w, b]);
        let f = m.bind(&conditioning(16, 16)).unwrap();
        let p = cam.lift(5.0, 9.0, 7.0).unwrap();
        assert_eq!(f.velocity_at(p, 0.4).unwrap(), [0.0; 3]);
    }

    #[test]
    fn input_jacobian_matches_fd() {
        let cam = camera(16, 16);
        let m = VelocityFieldModel::new(small_config(), Normalization::new(cam.clone(), 2.0).unwrap()).unwrap();
        let f = m.bind(&conditioning(16, 16)).unwrap();
        let mut worst: f64 = 0.0;
        for (u, v) in [(3.3, 4.6), (10.2, 7.7), (6.5, 12.1)] {
            let p = cam.lift(u, v, 8.0).unwrap();
            let (_, j) = f.jacobian_at(p, 0.7).unwrap();
            let fd = jacobian_fd(|x| f.velocity_at([x[0], x[1], x[2]], x[3]).unwrap(), [p[0], p[1], p[2], 0.7], 1e-6);
            for r in 0..3 {
                for c in 0..4 {
                    worst = worst.max(relative_error(j[r][c], fd[r][c]));
                }
            }
        }
        assert!(worst < 1e-4, "{worst}");
        let q: Vec<Query> = [(1.0, 2.0), (8.5, 3.0), (14.0, 15.0)]
            .iter()
            .map(|&(u, v)| Query::new(cam.lift(u, v, 9.0).unwrap(), 0.3))
            .collect();
        let batch = f.jacobians(&q).unwrap();
        for (qi, b) in q.iter().zip(&batch) {
            assert_eq!(*b, f.jacobian_at(qi.position, qi.time).unwrap());
        }
    }

    #[test]
    fn identical_inputs_identical_velocity() {
        let cam = camera(16, 16);
        let m = VelocityFieldModel::new(small_config(), Normalization::new(cam.clone(), 2.0).unwrap()).unwrap();
        let f = m.bind(&conditioning(16, 16)).unwrap();
        let p = cam.lift(7.0, 7.0, 8.0).unwrap();
        let q = [Query::new(p, 0.5), Query::new(p, 0.5)];
        let u = f.velocities(&q).unwrap();
        assert_eq!(u[0], u[1]);
    }

    #[test]
    fn dense_grid_sweep_is_finite() {
        let cam = camera(16, 16);
        let m = VelocityFieldModel::new(ModelConfig::default(), Normalization::new(cam.clone(), 2.0).unwrap()).unwrap();
        let cond = ConditioningInput {
            image: RgbImage::filled(16, 16, [0.5; 3]),
            depth: DepthMap::filled(16, 16, 8.0),
            mask: Mask::filled(16, 16, true),
            hints: None,
        };
        let mut cfg = ModelConfig::default();
        cfg.input_pool = 1;
        let m2 = VelocityFieldModel::new(cfg, Normalization::new(cam.clone(), 2.0).unwrap()).unwrap();
        drop(m);
        let f = m2.bind(&cond).unwrap();
        let mut q = Vec::new();
        for y in 0..16 {
            for x in 0..16 {
                for d in [1.5, 8.0, 40.0] {
                    q.push(Query::new(cam.lift(x as f64, y as f64, d).unwrap(), 0.25 * (x % 5) as f64));
                }
            }
        }
        let u = f.velocities(&q).unwrap();
        assert!(u.iter().all(|v| v.iter().all(|c| c.is_finite() && c.abs() < 1e3)));
    }

    #[test]
    fn force_head_gradient_matches_fd() {
        use crate::diffengine::fdcheck::check_gradient;
        use crate::physics::loss_ns;
        let cam = camera(16, 16);
        let mut m = VelocityFieldModel::new(small_config(), Normalization::new(cam.clone(), 2.0).unwrap()).unwrap();
        let input = conditioning(16, 16).tensor(m.config()).unwrap();
        let probes: Vec<Query> = [(4.0, 5.0), (11.0, 9.0)]
            .iter()
            .map(|(u, v)| Query::new(cam.lift(*u, *v, 8.0).unwrap(), 0.3))
            .collect();
        let build = |m: &VelocityFieldModel, tape: &mut Tape| -> Result<Var> {
            let mut tm = m.bind_tape(tape, Conditioning::Input(&input))?;
            loss_ns(&mut tm, tape, &probes)
        };
        let mut params = m.params.clone();
        value_and_grad(&mut params, |tape, _| build(&m, tape).map_err(|e| match e {
            Error::Diff(d) => d,
            other => crate::diffengine::DiffError::Structural(alloc::format!("{other}")),
        }))
        .unwrap();
        let analytic = params.flat_grads();
        // flat indices of the force head
        let mut offsets = Vec::new();
        let mut off = 0;
        for (i, e) in m.params.entries().iter().enumerate() {
            if m.force_params().contains(&ParamId(i)) {
                offsets.extend((off..off + e.value.len()).step_by(3));
            }
            off += e.value.len();
        }
        let snapshot = m.params.clone();
        let mut p = snapshot.clone();
        let report = check_gradient(&mut p, &analytic, Some(&offsets), |p| {
            m.params = p.clone();
            let mut tape = Tape::new();
            let l = build(&m, &mut tape).map_err(|_| crate::diffengine::DiffError::NonFinite { op: "fd" })?;
            Ok(tape.value(l).item())
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn hints_are_zero_outside_disks() {
        let h = densify_hints(10, 10, &[(2.0, 2.0, 0.5, -0.5)], 1.0);
        assert_eq!(*h.get(2, 2), [0.5, -0.5, 1.0]);
        assert_eq!(*h.get(3, 2), [0.5, -0.5, 1.0]);
        assert_eq!(*h.get(3, 3), [0.0; 3]);
        assert_eq!(*h.get(9, 9), [0.0; 3]);
    }
}
