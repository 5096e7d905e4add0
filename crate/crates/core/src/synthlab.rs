//! Synthetic river scenes with closed-form surface flows.
//!
//! The water surface is the plane `z = 0`; `x` points downstream and `y`
//! across the channel. Three analytic fields are provided: a parabolic
//! channel profile, potential flow around a circular rock, and a channel
//! profile with a uniform downstream acceleration (a stand-in for gravity
//! driven drift, which satisfies the momentum equation with a constant body
//! force).

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::animation::{AnimationConfig, Animator};
use crate::error::{Error, Result};
use crate::grid::{DepthMap, Grid, Mask, RgbImage};
use crate::math::{add3, scale3, sub3, Real, Vec3};
use crate::neuralfield::{densify_hints, ConditioningInput, HintMap};
use crate::physics::{AnalyticField, BoundaryProbe, FluidRegion, Query, SceneFlowSample};
use crate::renderer::Decoder;
use crate::scene::{gaussians_from_image, Camera, CameraTrajectory, GaussianInit, GaussianScene};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disk {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Disk {
    pub fn contains(&self, p: Vec3) -> bool {
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

/// Potential flow past a disk of radius `radius` centered at the origin,
/// free stream `u_inf` along `x`. Errors for points inside the disk.
pub fn potential_flow_cylinder(u_inf: f64, radius: f64, p: Vec3) -> Result<Vec3> {
    let r2 = p[0] * p[0] + p[1] * p[1];
    if r2 < radius * radius * (1.0 - 1e-12) {
        return Err(Error::Domain(alloc::format!("point at distance {} inside obstacle of radius {radius}", libm::sqrt(r2))));
    }
    Ok(cylinder(u_inf, radius, [p[0], p[1]]))
}

fn cylinder<R: Real>(u_inf: f64, radius: f64, p: [R; 2]) -> [R; 3] {
    let (x, y) = (p[0], p[1]);
    let r2 = x * x + y * y;
    let r4 = r2 * r2;
    let k = radius * radius;
    let ux = (R::cst(1.0) - (x * x - y * y).scale(k) / r4).scale(u_inf);
    let uy = -(x * y).scale(2.0 * u_inf * k) / r4;
    [ux, uy, R::cst(0.0)]
}

/// `u_inf·(1 − (y/h)²)` inside the channel, zero outside.
pub fn uniform_channel_flow(u_inf: f64, half_width: f64, p: Vec3) -> Vec3 {
    channel([p[0], p[1]], u_inf, half_width)
}

fn channel<R: Real>(p: [R; 2], u_inf: f64, half_width: f64) -> [R; 3] {
    let y = p[1].value();
    if y.abs() >= half_width {
        return [R::cst(0.0); 3];
    }
    let s = p[1].scale(1.0 / half_width);
    [(R::cst(1.0) - s * s).scale(u_inf), R::cst(0.0), R::cst(0.0)]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowField {
    Channel { u_inf: f64, half_width: f64 },
    /// Zero inside the disk.
    Cylinder { u_inf: f64, disk: Disk },
    /// Channel profile plus `accel·t` downstream.
    Drift { u_inf: f64, half_width: f64, accel: f64 },
}

impl FlowField {
    /// Body force under which the field satisfies the inviscid momentum
    /// equation (for the cylinder, only up to its convective term).
    pub fn body_force(&self) -> Vec3 {
        match *self {
            FlowField::Drift { accel, .. } => [accel, 0.0, 0.0],
            _ => [0.0; 3],
        }
    }

    pub fn free_stream(&self) -> f64 {
        match *self {
            FlowField::Channel { u_inf, .. } | FlowField::Cylinder { u_inf, .. } | FlowField::Drift { u_inf, .. } => u_inf,
        }
    }
}

impl AnalyticField for FlowField {
    fn eval<R: Real>(&self, p: [R; 3], t: R) -> [R; 3] {
        match *self {
            FlowField::Channel { u_inf, half_width } => channel([p[0], p[1]], u_inf, half_width),
            FlowField::Cylinder { u_inf, disk } => {
                let q = [p[0] - R::cst(disk.center[0]), p[1] - R::cst(disk.center[1])];
                let (a, b) = (q[0].value(), q[1].value());
                if a * a + b * b < disk.radius * disk.radius {
                    return [R::cst(0.0); 3];
                }
                cylinder(u_inf, disk.radius, q)
            }
            FlowField::Drift { u_inf, half_width, accel } => {
                let mut u = channel([p[0], p[1]], u_inf, half_width);
                if p[1].value().abs() < half_width {
                    u[0] = u[0] + t.scale(accel);
                }
                u
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Banks {
    /// `|y| < half_width`.
    Straight,
    /// The two potential-flow streamlines through `y = ±half_width` far
    /// from the obstacle.
    Streamlines,
}

/// Exact fluid region of a channel scene; `z` is ignored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelGeometry {
    pub half_width: f64,
    pub half_length: f64,
    pub banks: Banks,
    pub obstacle: Option<Disk>,
}

impl ChannelGeometry {
    fn in_banks(&self, p: Vec3) -> bool {
        match (self.banks, self.obstacle) {
            (Banks::Streamlines, Some(d)) => {
                let (x, y) = (p[0] - d.center[0], p[1] - d.center[1]);
                let r2 = x * x + y * y;
                if r2 <= d.radius * d.radius {
                    return false;
                }
                let psi = y * (1.0 - d.radius * d.radius / r2);
                psi.abs() < self.half_width
            }
            _ => p[1].abs() < self.half_width,
        }
    }

    /// Distance-like clearance of a disk from the banks (positive when the
    /// whole disk lies between them).
    fn disk_inside(&self, disk: &Disk) -> bool {
        let c = disk.center;
        (0..64).all(|k| {
            let a = k as f64 * core::f64::consts::TAU / 64.0;
            let p = [c[0] + disk.radius * libm::cos(a), c[1] + disk.radius * libm::sin(a), 0.0];
            self.in_banks(p) && p[0].abs() < self.half_length
        }) && self.in_banks([c[0], c[1], 0.0])
    }
}

impl FluidRegion for ChannelGeometry {
    fn contains(&self, p: Vec3) -> bool {
        if p[0].abs() >= self.half_length || !self.in_banks(p) {
            return false;
        }
        !self.obstacle.is_some_and(|d| d.contains(p))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub rock: bool,
    pub u_inf: f64,
    pub half_width: f64,
    pub half_length: f64,
    pub rock_center: [f64; 2],
    pub rock_radius: f64,
    /// Downstream acceleration; nonzero selects the drift field.
    pub drift: f64,
    pub fps: f64,
    pub frames: usize,
    pub novel_views: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 256,
            height: 256,
            rock: false,
            u_inf: 1.0,
            half_width: 5.0,
            half_length: 20.0,
            rock_center: [0.0, 0.0],
            rock_radius: 1.0,
            drift: 0.0,
            fps: 10.0,
            frames: 20,
            novel_views: 2,
        }
    }
}

/// A rendered synthetic river with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub field: FlowField,
    pub geometry: ChannelGeometry,
    pub camera: Camera,
    pub novel_cameras: Vec<Camera>,
    pub image: RgbImage,
    pub depth: DepthMap,
    pub fluid: Mask,
    pub obstacle: Mask,
    pub fps: f64,
    pub frames: usize,
}

fn input_camera(width: usize, height: usize, offset: Vec3) -> Result<Camera> {
    let focal = 180.0 * width as f64 / 256.0;
    Camera::look_at(add3([0.0, -4.0, 10.0], offset), add3([0.0, -1.0, 0.0], offset), [0.0, 0.0, 1.0], focal, width, height)
}

/// Intersection of the ray through pixel `(u, v)` with the water plane and
/// its camera depth.
pub fn surface_point(camera: &Camera, u: f64, v: f64) -> Option<(Vec3, f64)> {
    let o = camera.center();
    let dir = sub3(camera.lift(u, v, 1.0).ok()?, o);
    if !(dir[2] < -1e-12) {
        return None;
    }
    let s = -o[2] / dir[2];
    Some((add3(o, scale3(dir, s)), s))
}

fn water(p: Vec3) -> [f64; 3] {
    let (x, y) = (p[0], p[1]);
    let a = 0.5 + 0.5 * libm::sin(1.3 * x + 0.4 * y);
    let b = 0.5 + 0.5 * libm::sin(3.1 * x - 1.1 * y + 1.0);
    let c = 0.5 + 0.5 * libm::cos(0.6 * x + 2.3 * y);
    [0.10 + 0.15 * a + 0.10 * b, 0.30 + 0.15 * b + 0.10 * c, 0.50 + 0.20 * a + 0.10 * c]
}

fn bank(p: Vec3) -> [f64; 3] {
    let s = 0.5 + 0.5 * libm::sin(0.9 * p[0]) * libm::cos(0.8 * p[1]);
    [0.35 + 0.15 * s, 0.45 + 0.10 * s, 0.20 + 0.05 * s]
}

fn rock(p: Vec3) -> [f64; 3] {
    let s = 0.5 + 0.5 * libm::sin(3.0 * p[0] + 2.0 * p[1]);
    [0.45 + 0.10 * s, 0.43 + 0.10 * s, 0.40 + 0.10 * s]
}

impl SyntheticScene {
    pub fn generate(config: &SynthConfig) -> Result<Self> {
        if config.width < 2 || config.height < 2 || config.frames == 0 || !(config.fps > 0.0) {
            return Err(Error::Argument("invalid synthetic scene configuration".into()));
        }
        if !(config.u_inf.is_finite() && config.half_width > 0.0 && config.half_length > 0.0) {
            return Err(Error::Argument("invalid channel dimensions".into()));
        }
        let disk = Disk {
            center: config.rock_center,
            radius: config.rock_radius,
        };
        let (field, geometry) = if config.rock {
            if config.drift != 0.0 {
                return Err(Error::Argument("drift and rock scenes are exclusive".into()));
            }
            (
                FlowField::Cylinder { u_inf: config.u_inf, disk },
                ChannelGeometry {
                    half_width: config.half_width,
                    half_length: config.half_length,
                    banks: Banks::Streamlines,
                    obstacle: Some(disk),
                },
            )
        } else {
            let field = if config.drift != 0.0 {
                FlowField::Drift {
                    u_inf: config.u_inf,
                    half_width: config.half_width,
                    accel: config.drift,
                }
            } else {
                FlowField::Channel {
                    u_inf: config.u_inf,
                    half_width: config.half_width,
                }
            };
            (
                field,
                ChannelGeometry {
                    half_width: config.half_width,
                    half_length: config.half_length,
                    banks: Banks::Straight,
                    obstacle: None,
                },
            )
        };
        let camera = input_camera(config.width, config.height, [0.0; 3])?;
        let novel_cameras = (0..config.novel_views)
            .map(|i| {
                let side = if i % 2 == 0 { 1.0 } else { -1.0 };
                let mag = 0.4 * (i / 2 + 1) as f64;
                input_camera(config.width, config.height, [side * mag, 0.0, 0.3 * mag])
            })
            .collect::<Result<Vec<_>>>()?;
        let (w, h) = (config.width, config.height);
        let mut image = RgbImage::filled(w, h, [0.0; 3]);
        let mut depth = DepthMap::filled(w, h, 0.0);
        let mut fluid = Mask::filled(w, h, false);
        let mut obstacle = Mask::filled(w, h, false);
        for y in 0..h {
            for x in 0..w {
                let (p, d) = surface_point(&camera, x as f64, y as f64)
                    .ok_or_else(|| Error::Domain(alloc::format!("pixel ({x}, {y}) does not see the water plane")))?;
                depth.set(x, y, d);
                let in_rock = geometry.obstacle.is_some_and(|o| o.contains(p));
                let is_fluid = geometry.contains(p);
                fluid.set(x, y, is_fluid);
                obstacle.set(x, y, in_rock);
                image.set(x, y, if in_rock { rock(p) } else if is_fluid { water(p) } else { bank(p) });
            }
        }
        Ok(SyntheticScene {
            field,
            geometry,
            camera,
            novel_cameras,
            image,
            depth,
            fluid,
            obstacle,
            fps: config.fps,
            frames: config.frames,
        })
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.fps
    }

    /// Loop length in seconds.
    pub fn horizon(&self) -> f64 {
        self.frames as f64 / self.fps
    }

    pub fn animation_config(&self) -> AnimationConfig {
        AnimationConfig {
            frames: self.frames,
            fps: self.fps,
            symmetric_splatting: true,
            loop_period: self.frames,
        }
    }

    /// Fluid pixel coordinates in row-major order.
    pub fn fluid_pixels(&self) -> Vec<(usize, usize)> {
        let w = self.width();
        (0..self.fluid.data().len())
            .filter(|&i| self.fluid.data()[i])
            .map(|i| (i % w, i / w))
            .collect()
    }

    /// Uniform random surface points over fluid pixels (jittered within the
    /// pixel footprint).
    pub fn sample_surface(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec3>> {
        let pixels = self.fluid_pixels();
        if pixels.is_empty() {
            return Err(Error::Domain("scene has no fluid pixels".into()));
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let (x, y) = pixels[rng.random_range(0..pixels.len())];
            let u = x as f64 + rng.random_range(-0.5..0.5);
            let v = y as f64 + rng.random_range(-0.5..0.5);
            // a jittered point may fall just outside the fluid region
            if let Some((p, _)) = surface_point(&self.camera, u, v) {
                if self.geometry.contains(p) {
                    out.push(p);
                }
            }
        }
        Ok(out)
    }

    /// Space-time probes over the fluid surface, times uniform in `[0, T]`.
    pub fn sample_probes(&self, n: usize, seed: u64) -> Result<Vec<Query>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = self.sample_surface(n, &mut rng)?;
        let horizon = self.horizon();
        Ok(pts.into_iter().map(|p| Query::new(p, rng.random_range(0.0..=horizon))).collect())
    }

    /// Pixel distance to the nearest non-fluid pixel, searched up to
    /// `limit` pixels.
    fn near_boundary(&self, x: usize, y: usize, limit: usize) -> bool {
        let (w, h) = (self.width() as isize, self.height() as isize);
        let l = limit as isize;
        for dy in -l..=l {
            for dx in -l..=l {
                if dx * dx + dy * dy > l * l {
                    continue;
                }
                let (a, b) = (x as isize + dx, y as isize + dy);
                if a >= 0 && b >= 0 && a < w && b < h && !*self.fluid.get(a as usize, b as usize) {
                    return true;
                }
            }
        }
        false
    }

    /// Probes within `band_px` pixels of the fluid boundary. A probe stays
    /// inside when its ground-truth displacement over `horizon` ends in the
    /// fluid region.
    pub fn boundary_probes(&self, n: usize, band_px: usize, horizon: f64, seed: u64) -> Result<Vec<BoundaryProbe>> {
        let band: Vec<(usize, usize)> = self
            .fluid_pixels()
            .into_iter()
            .filter(|&(x, y)| self.near_boundary(x, y, band_px))
            .collect();
        if band.is_empty() {
            return Ok(Vec::new());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        let t_max = self.horizon();
        while out.len() < n {
            let (x, y) = band[rng.random_range(0..band.len())];
            let u = x as f64 + rng.random_range(-0.5..0.5);
            let v = y as f64 + rng.random_range(-0.5..0.5);
            let Some((p, _)) = surface_point(&self.camera, u, v) else { continue };
            if !self.geometry.contains(p) {
                continue;
            }
            let t = rng.random_range(0.0..=t_max);
            let moved = add3(p, scale3(self.field.velocity(p, t), horizon));
            out.push(BoundaryProbe {
                position: p,
                time: t,
                stays_inside_gt: self.geometry.contains(moved),
            });
        }
        Ok(out)
    }

    /// Sparse pixel flow hints `(x, y, du, dv)` in pixels per frame.
    pub fn flow_hints(&self, n: usize, seed: u64) -> Result<Vec<(f64, f64, f64, f64)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = self.sample_surface(n, &mut rng)?;
        pts.into_iter()
            .map(|p| {
                let a = self.camera.project(p)?;
                let b = self.camera.project(add3(p, scale3(self.field.velocity(p, 0.0), self.dt())))?;
                Ok((a.u, a.v, b.u - a.u, b.v - a.v))
            })
            .collect()
    }

    pub fn hint_map(&self, n: usize, seed: u64) -> Result<HintMap> {
        Ok(densify_hints(self.width(), self.height(), &self.flow_hints(n, seed)?, 6.0))
    }

    pub fn conditioning(&self, hints: Option<HintMap>) -> ConditioningInput {
        ConditioningInput {
            image: self.image.clone(),
            depth: self.depth.clone(),
            mask: self.fluid.clone(),
            hints,
        }
    }

    /// Gaussian representation of the input view.
    pub fn gaussians(&self) -> Result<GaussianScene> {
        gaussians_from_image(&self.image, &self.depth, &self.fluid, &self.camera, GaussianInit::default())
    }
}

/// Ground-truth scene flow at uniformly sampled fluid points; times are
/// drawn from `times` when given, else uniformly over the loop.
pub fn sample_scene_flow(scene: &SyntheticScene, n: usize, times: Option<&[f64]>, seed: u64) -> Result<Vec<SceneFlowSample>> {
    if n == 0 {
        return Err(Error::Argument("at least one flow sample is required".into()));
    }
    if times.is_some_and(|t| t.is_empty()) {
        return Err(Error::Argument("empty time list".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = scene.sample_surface(n, &mut rng)?;
    let horizon = scene.horizon();
    Ok(pts
        .into_iter()
        .map(|p| {
            let t = match times {
                Some(ts) => ts[rng.random_range(0..ts.len())],
                None => rng.random_range(0.0..=horizon),
            };
            SceneFlowSample {
                position: p,
                time: t,
                velocity: scene.field.velocity(p, t),
            }
        })
        .collect())
}

/// Reference video: the input-view Gaussians advected by the analytic
/// field with the same animation pipeline used for learned fields.
pub fn render_ground_truth(scene: &SyntheticScene, trajectory: &CameraTrajectory, config: &AnimationConfig) -> Result<Vec<RgbImage>> {
    let g = scene.gaussians()?;
    crate::animation::render_video(&g, &scene.field, trajectory, config, &Decoder::pass_through(), &[0.0; 3])
}

/// Animator for the ground-truth video (lets callers parallelize frames).
pub fn ground_truth_animator<'a>(gaussians: &'a GaussianScene, scene: &SyntheticScene, config: &AnimationConfig) -> Result<Animator<'a>> {
    Animator::new(gaussians, &scene.field, config)
}

/// Places a rock in a scene without one: the disk leaves the fluid mask,
/// joins the obstacle mask, is painted as rock, and the analytic field
/// becomes potential flow around it. The banks are kept.
pub fn edit_scene_add_obstacle(scene: &SyntheticScene, disk: Disk) -> Result<SyntheticScene> {
    if scene.geometry.obstacle.is_some() {
        return Err(Error::Argument("scene already has an obstacle".into()));
    }
    if !(disk.radius > 0.0) || !scene.geometry.disk_inside(&disk) {
        return Err(Error::Domain("obstacle disk must lie inside the channel".into()));
    }
    let mut out = scene.clone();
    out.geometry.obstacle = Some(disk);
    out.field = FlowField::Cylinder {
        u_inf: scene.field.free_stream(),
        disk,
    };
    let (w, h) = (scene.width(), scene.height());
    for y in 0..h {
        for x in 0..w {
            let Some((p, _)) = surface_point(&scene.camera, x as f64, y as f64) else { continue };
            if disk.contains(p) {
                out.fluid.set(x, y, false);
                out.obstacle.set(x, y, true);
                out.image.set(x, y, rock(p));
            }
        }
    }
    Ok(out)
}

/// Pixel mask of a world-space disk seen from `camera`.
pub fn disk_mask(camera: &Camera, disk: &Disk) -> Mask {
    Grid::from_fn(camera.width, camera.height, |x, y| {
        surface_point(camera, x as f64, y as f64).is_some_and(|(p, _)| disk.contains(p))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::Tape;
    use crate::physics::{divergence, ns_residual, AnalyticModel};

    fn small(rock: bool) -> SyntheticScene {
        SyntheticScene::generate(&SynthConfig {
            width: 64,
            height: 64,
            rock,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn cylinder_limits_and_surface() {
        let far = potential_flow_cylinder(1.5, 1.0, [-1e4, 3.0, 0.0]).unwrap();
        assert!((far[0] - 1.5).abs() < 1e-6 && far[1].abs() < 1e-6);
        for k in 0..100 {
            let a = k as f64 * 0.0628;
            let n = [libm::cos(a), libm::sin(a), 0.0];
            let u = potential_flow_cylinder(1.0, 0.8, scale3(n, 0.8)).unwrap();
            assert!(crate::math::dot3(u, n).abs() < 1e-12);
        }
        assert!(potential_flow_cylinder(1.0, 1.0, [0.5, 0.2, 0.0]).is_err());
    }

    #[test]
    fn analytic_fields_are_divergence_free() {
        let disk = Disk {
            center: [0.3, -0.2],
            radius: 1.0,
        };
        let fields = [
            FlowField::Cylinder { u_inf: 1.0, disk },
            FlowField::Channel { u_inf: 1.0, half_width: 5.0 },
            FlowField::Drift {
                u_inf: 1.0,
                half_width: 5.0,
                accel: 0.2,
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut q = Vec::new();
        while q.len() < 10_000 {
            let p = [rng.random_range(-8.0..8.0), rng.random_range(-4.9..4.9), 0.0];
            if !disk.contains(p) {
                q.push(Query::new(p, rng.random_range(0.0..2.0)));
            }
        }
        for f in fields {
            let mut m = AnalyticModel::new(f);
            let mut tape = Tape::new();
            let d = divergence(&mut m, &mut tape, &q).unwrap();
            let worst = tape.value(d).data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(worst < 1e-10, "{f:?}: {worst}");
        }
    }

    #[test]
    fn drift_satisfies_momentum_with_body_force() {
        let f = FlowField::Drift {
            u_inf: 1.0,
            half_width: 5.0,
            accel: 0.3,
        };
        let mut m = AnalyticModel::with_force(f, f.body_force());
        let q: Vec<Query> = (0..50).map(|i| Query::new([i as f64 * 0.1 - 2.0, i as f64 * 0.07 - 1.5, 0.0], 0.05 * i as f64)).collect();
        let mut tape = Tape::new();
        let r = ns_residual(&mut m, &mut tape, &q).unwrap();
        assert!(tape.value(r).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cylinder_momentum_residual_is_convective_term() {
        let disk = Disk {
            center: [0.0, 0.0],
            radius: 1.0,
        };
        let mut m = AnalyticModel::new(FlowField::Cylinder { u_inf: 1.0, disk });
        let p = [2.0, 1.0, 0.0];
        let mut tape = Tape::new();
        let r = ns_residual(&mut m, &mut tape, &[Query::new(p, 0.0)]).unwrap();
        let r = tape.value(r).data().to_vec();
        // (u·∇)u by central differences
        let u = potential_flow_cylinder(1.0, 1.0, p).unwrap();
        let h = 1e-5;
        let du = |d: usize| {
            let mut a = p;
            let mut b = p;
            a[d] += h;
            b[d] -= h;
            sub3(potential_flow_cylinder(1.0, 1.0, a).unwrap(), potential_flow_cylinder(1.0, 1.0, b).unwrap())
        };
        let (dx, dy) = (du(0), du(1));
        for c in 0..3 {
            let conv = (u[0] * dx[c] + u[1] * dy[c]) / (2.0 * h);
            assert!((r[c] - conv).abs() < 1e-8);
        }
    }

    #[test]
    fn channel_profile() {
        assert_eq!(uniform_channel_flow(2.0, 5.0, [3.0, 0.0, 0.0]), [2.0, 0.0, 0.0]);
        assert_eq!(uniform_channel_flow(2.0, 5.0, [3.0, 5.0, 0.0]), [0.0; 3]);
        assert_eq!(uniform_channel_flow(2.0, 5.0, [3.0, -6.0, 0.0]), [0.0; 3]);
    }

    #[test]
    fn scene_layout() {
        let s = SyntheticScene::generate(&SynthConfig::default()).unwrap();
        assert!(s.depth.data().iter().all(|d| (5.0..=15.0).contains(d)));
        assert!(s.fluid.count() > 20_000);
        let r = small(true);
        assert!(r.obstacle.count() > 0);
        for (f, o) in r.fluid.data().iter().zip(r.obstacle.data()) {
            assert!(!(*f && *o));
        }
        // banks visible on both sides
        assert!(!*r.fluid.get(32, 0) && !*r.fluid.get(32, 63));
        assert_eq!(r.novel_cameras.len(), 2);
    }

    #[test]
    fn flow_samples_follow_field() {
        let s = small(true);
        let samples = sample_scene_flow(&s, 500, None, 3).unwrap();
        for smp in &samples {
            assert_eq!(smp.velocity, s.field.velocity(smp.position, smp.time));
            assert!(s.geometry.contains(smp.position));
            assert!((0.0..=s.horizon()).contains(&smp.time));
        }
        assert_eq!(samples, sample_scene_flow(&s, 500, None, 3).unwrap());
        let fixed = sample_scene_flow(&s, 20, Some(&[0.5]), 3).unwrap();
        assert!(fixed.iter().all(|s| s.time == 0.5));
        assert!(sample_scene_flow(&s, 0, None, 3).is_err());
    }

    #[test]
    fn mean_speed_matches_quadrature() {
        let s = small(false);
        let n = 40_000;
        let samples = sample_scene_flow(&s, n, None, 9).unwrap();
        let speeds: Vec<f64> = samples.iter().map(|s| crate::math::norm3(s.velocity)).collect();
        let mean = crate::math::mean(&speeds);
        let var = speeds.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        // quadrature: 8×8 sub-pixel grid over each fluid pixel, keeping
        // points inside the fluid region (the sampler rejects the rest)
        let (mut sum, mut cnt) = (0.0, 0usize);
        for (x, y) in s.fluid_pixels() {
            for a in 0..8 {
                for b in 0..8 {
                    let u = x as f64 - 0.5 + (a as f64 + 0.5) / 8.0;
                    let v = y as f64 - 0.5 + (b as f64 + 0.5) / 8.0;
                    let (p, _) = surface_point(&s.camera, u, v).unwrap();
                    if s.geometry.contains(p) {
                        sum += crate::math::norm3(s.field.velocity(p, 0.0));
                        cnt += 1;
                    }
                }
            }
        }
        let quad = sum / cnt as f64;
        let se = libm::sqrt(var / n as f64);
        assert!((mean - quad).abs() < 4.0 * se + 1e-3, "mc {mean} quad {quad} se {se}");
    }

    #[test]
    fn streamlines_avoid_rock() {
        let disk = Disk {
            center: [0.0, 0.0],
            radius: 1.0,
        };
        let f = FlowField::Cylinder { u_inf: 1.0, disk };
        for i in 0..1000 {
            let y0 = -3.0 + 6.0 * (i as f64 + 0.5) / 1000.0;
            let mut p = [-6.0, y0, 0.0];
            // RK4 with small steps; the integrator is not under test here
            let h = 0.01;
            for _ in 0..1200 {
                let k1 = f.velocity(p, 0.0);
                let k2 = f.velocity(add3(p, scale3(k1, h / 2.0)), 0.0);
                let k3 = f.velocity(add3(p, scale3(k2, h / 2.0)), 0.0);
                let k4 = f.velocity(add3(p, scale3(k3, h)), 0.0);
                let k = add3(add3(k1, scale3(k2, 2.0)), add3(scale3(k3, 2.0), k4));
                p = add3(p, scale3(k, h / 6.0));
                assert!(!disk.contains(p), "streamline {i} entered the rock at {p:?}");
            }
        }
    }

    #[test]
    fn edit_adds_rock() {
        let s = small(false);
        let disk = Disk {
            center: [1.0, 0.5],
            radius: 1.2,
        };
        let e = edit_scene_add_obstacle(&s, disk).unwrap();
        let dm = disk_mask(&s.camera, &disk);
        assert_eq!(s.fluid.count() - e.fluid.count(), dm.count());
        assert!(dm.count() > 0);
        assert!(e.fluid.data().iter().zip(e.obstacle.data()).all(|(f, o)| !(*f && *o)));
        // no-through on the new disk
        for k in 0..360 {
            let a = (k as f64).to_radians();
            let n = [libm::cos(a), libm::sin(a), 0.0];
            let p = add3([1.0, 0.5, 0.0], scale3(n, 1.2));
            assert!(crate::math::dot3(e.field.velocity(p, 0.0), n).abs() < 1e-12);
        }
        assert!(edit_scene_add_obstacle(&e, disk).is_err());
        let outside = Disk {
            center: [0.0, 4.5],
            radius: 1.0,
        };
        assert!(edit_scene_add_obstacle(&s, outside).is_err());
    }

    #[test]
    fn boundary_probe_flags() {
        let s = small(true);
        let probes = s.boundary_probes(300, 2, s.dt(), 4).unwrap();
        assert_eq!(probes.len(), 300);
        for p in &probes {
            let moved = add3(p.position, scale3(s.field.velocity(p.position, p.time), s.dt()));
            assert_eq!(p.stays_inside_gt, s.geometry.contains(moved));
        }
        assert!(probes.iter().any(|p| p.stays_inside_gt));
    }

    #[test]
    fn ground_truth_video() {
        let s = SyntheticScene::generate(&SynthConfig {
            width: 32,
            height: 32,
            frames: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut cfg = s.animation_config();
        cfg.frames = 5;
        let traj = CameraTrajectory::fixed(s.camera.clone(), 5).unwrap();
        let frames = render_ground_truth(&s, &traj, &cfg).unwrap();
        let direct = crate::renderer::rasterize(&s.gaussians().unwrap(), &s.camera, &[0.0; 3]).unwrap().to_rgb().unwrap();
        assert_eq!(frames[0], direct);
        // one full loop returns to the first frame
        assert_eq!(frames[4], frames[0]);
        assert_ne!(frames[2], frames[0]);

        let mut still = s.clone();
        still.field = FlowField::Channel { u_inf: 0.0, half_width: 5.0 };
        let frames = render_ground_truth(&still, &traj, &cfg).unwrap();
        assert!(frames.windows(2).all(|w| w[0] == w[1]));
    }
}
