//! Kernel advection and looping video synthesis.
//!
//! Fluid kernels move by explicit Euler steps `x ← x + dt·u(x, t)`. With
//! symmetric splatting, frame `t` of a loop of length `T` mixes the render
//! of a forward copy of the scene advected from `0` to `t` (weight
//! `(T−t)/T`) with the render of a backward copy advected under the
//! reversed field `−u(x, T−s)` for `T−t` (weight `t/T`).

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::RgbImage;
use crate::math::{add3, scale3, Vec3};
use crate::neuralfield::BoundField;
use crate::physics::{AnalyticField, Query};
use crate::renderer::{rasterize, Decoder, Framebuffer};
use crate::scene::{Camera, CameraTrajectory, GaussianScene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnimationConfig {
    pub frames: usize,
    pub fps: f64,
    pub symmetric_splatting: bool,
    /// Loop length in frames.
    pub loop_period: usize,
}

impl Default for AnimationConfig {
    fn default() -> Self {
        AnimationConfig {
            frames: 20,
            fps: 10.0,
            symmetric_splatting: true,
            loop_period: 20,
        }
    }
}

impl AnimationConfig {
    pub fn new(frames: usize, fps: f64) -> Result<Self> {
        let c = AnimationConfig {
            frames,
            fps,
            symmetric_splatting: true,
            loop_period: frames,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.fps
    }

    /// Loop length in seconds.
    pub fn horizon(&self) -> f64 {
        self.loop_period as f64 * self.dt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.loop_period == 0 {
            return Err(Error::Argument("frame count and loop period must be at least 1".into()));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Argument(alloc::format!("fps must be positive, got {}", self.fps)));
        }
        Ok(())
    }
}

/// Batched point velocities for advection.
pub trait PointVelocity {
    fn velocities(&self, queries: &[Query]) -> Result<Vec<Vec3>>;
}

impl<F: AnalyticField> PointVelocity for F {
    fn velocities(&self, queries: &[Query]) -> Result<Vec<Vec3>> {
        Ok(queries.iter().map(|q| self.velocity(q.position, q.time)).collect())
    }
}

impl PointVelocity for BoundField<'_> {
    fn velocities(&self, queries: &[Query]) -> Result<Vec<Vec3>> {
        BoundField::velocities(self, queries)
    }
}

/// `−u(x, horizon − s)`.
pub struct Reversed<'a, F: ?Sized> {
    pub field: &'a F,
    pub horizon: f64,
}

impl<F: PointVelocity + ?Sized> PointVelocity for Reversed<'_, F> {
    fn velocities(&self, queries: &[Query]) -> Result<Vec<Vec3>> {
        let q: Vec<Query> = queries
            .iter()
            .map(|q| Query {
                time: self.horizon - q.time,
                ..*q
            })
            .collect();
        Ok(self.field.velocities(&q)?.into_iter().map(|u| scale3(u, -1.0)).collect())
    }
}

/// One Euler step on a set of points; `anchors` are their initial
/// positions.
pub fn euler_points<F: PointVelocity + ?Sized>(points: &mut [Vec3], anchors: &[Vec3], field: &F, t: f64, dt: f64) -> Result<()> {
    let queries: Vec<Query> = points
        .iter()
        .zip(anchors)
        .map(|(p, a)| Query::new(*p, t).with_anchor(*a))
        .collect();
    let u = field.velocities(&queries)?;
    for (p, v) in points.iter_mut().zip(u) {
        *p = add3(*p, scale3(v, dt));
        if !crate::math::is_finite3(*p) {
            return Err(Error::Domain("advection produced a non-finite position".into()));
        }
    }
    Ok(())
}

/// Advects points from `t0` to `t1` in steps of at most `dt`.
pub fn advect_points<F: PointVelocity + ?Sized>(points: &mut [Vec3], field: &F, t0: f64, t1: f64, dt: f64) -> Result<()> {
    if !(dt > 0.0) || t1 < t0 {
        return Err(Error::Argument("advection needs dt > 0 and t1 ≥ t0".into()));
    }
    let anchors = points.to_vec();
    let steps = libm::ceil((t1 - t0) / dt - 1e-9).max(0.0) as usize;
    let mut t = t0;
    for _ in 0..steps {
        let h = dt.min(t1 - t);
        euler_points(points, &anchors, field, t, h)?;
        t += h;
    }
    Ok(())
}

fn fluid_centers(scene: &GaussianScene) -> Vec<Vec3> {
    scene.kernels.iter().zip(&scene.fluid).filter(|(_, f)| **f).map(|(k, _)| k.center).collect()
}

fn with_fluid_centers(scene: &GaussianScene, centers: &[Vec3]) -> GaussianScene {
    let mut out = scene.clone();
    let mut it = centers.iter();
    for (k, f) in out.kernels.iter_mut().zip(&scene.fluid) {
        if *f {
            k.center = *it.next().expect("one center per fluid kernel");
        }
    }
    out
}

/// Moves fluid kernels by `dt·u(x, t)`; everything else is untouched.
pub fn advect_step<F: PointVelocity + ?Sized>(scene: &GaussianScene, field: &F, t: f64, dt: f64) -> Result<GaussianScene> {
    let mut c = fluid_centers(scene);
    let anchors = c.clone();
    euler_points(&mut c, &anchors, field, t, dt)?;
    Ok(with_fluid_centers(scene, &c))
}

/// Forward and backward weights at time `t` of a loop of length `horizon`.
pub fn splat_weights(t: f64, horizon: f64) -> (f64, f64) {
    let b = (t / horizon).clamp(0.0, 1.0);
    (1.0 - b, b)
}

/// The two advected copies shown in one frame. Each copy is rendered on
/// its own and the framebuffers are mixed with the weights, so coincident
/// copies reproduce a single render exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatPair {
    pub forward: GaussianScene,
    pub backward: GaussianScene,
    pub forward_weight: f64,
    pub backward_weight: f64,
}

impl SplatPair {
    pub fn single(scene: GaussianScene) -> Self {
        SplatPair {
            backward: GaussianScene::new(scene.channels),
            forward: scene,
            forward_weight: 1.0,
            backward_weight: 0.0,
        }
    }

    pub fn render(&self, camera: &Camera, background: &[f64]) -> Result<Framebuffer> {
        if self.backward_weight == 0.0 {
            return rasterize(&self.forward, camera, background);
        }
        if self.forward_weight == 0.0 {
            return rasterize(&self.backward, camera, background);
        }
        let mut f = rasterize(&self.forward, camera, background)?;
        let b = rasterize(&self.backward, camera, background)?;
        // written as x + w(y − x) so identical renders mix to themselves
        let wb = self.backward_weight;
        for (x, y) in f.data.iter_mut().zip(&b.data).chain(f.alpha.iter_mut().zip(&b.alpha)) {
            *x += wb * (y - *x);
        }
        Ok(f)
    }
}

/// Symmetric splatting of `g0` at time `t ∈ [0, horizon]`.
pub fn symmetric_splat<F: PointVelocity + ?Sized>(g0: &GaussianScene, field: &F, t: f64, horizon: f64, dt: f64) -> Result<SplatPair> {
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::Argument(alloc::format!("time {t} outside [0, {horizon}]")));
    }
    let (wf, wb) = splat_weights(t, horizon);
    let mut f = fluid_centers(g0);
    let mut b = f.clone();
    if wf > 0.0 {
        advect_points(&mut f, field, 0.0, t, dt)?;
    }
    if wb > 0.0 {
        advect_points(&mut b, &Reversed { field, horizon }, 0.0, horizon - t, dt)?;
    }
    Ok(pair(g0, &f, &b, wf, wb))
}

fn pair(g0: &GaussianScene, forward: &[Vec3], backward: &[Vec3], wf: f64, wb: f64) -> SplatPair {
    let copy = |c: &[Vec3], w: f64| {
        if w > 0.0 {
            with_fluid_centers(g0, c)
        } else {
            GaussianScene::new(g0.channels)
        }
    };
    SplatPair {
        forward: copy(forward, wf),
        backward: copy(backward, wb),
        forward_weight: wf,
        backward_weight: wb,
    }
}

/// Precomputed kernel tracks for every frame of a video. Advection is
/// sequential; [`Animator::scene_at`] is independent per frame.
pub struct Animator<'a> {
    scene: &'a GaussianScene,
    config: AnimationConfig,
    forward: Vec<Vec<Vec3>>,
    backward: Vec<Vec<Vec3>>,
}

impl<'a> Animator<'a> {
    pub fn new<F: PointVelocity + ?Sized>(scene: &'a GaussianScene, field: &F, config: &AnimationConfig) -> Result<Self> {
        config.validate()?;
        let dt = config.dt();
        let start = fluid_centers(scene);
        let anchors = start.clone();
        let steps = if config.symmetric_splatting {
            config.loop_period
        } else {
            config.frames - 1
        };
        let mut forward = Vec::with_capacity(steps + 1);
        forward.push(start.clone());
        let mut cur = start.clone();
        for k in 0..steps {
            euler_points(&mut cur, &anchors, field, k as f64 * dt, dt)?;
            forward.push(cur.clone());
        }
        let mut backward = Vec::new();
        if config.symmetric_splatting {
            let rev = Reversed {
                field,
                horizon: config.horizon(),
            };
            backward.push(start);
            let mut cur = backward[0].clone();
            for k in 0..config.loop_period {
                euler_points(&mut cur, &anchors, &rev, k as f64 * dt, dt)?;
                backward.push(cur.clone());
            }
        }
        Ok(Animator {
            scene,
            config: config.clone(),
            forward,
            backward,
        })
    }

    pub fn len(&self) -> usize {
        self.config.frames
    }

    pub fn is_empty(&self) -> bool {
        self.config.frames == 0
    }

    /// Kernel sets shown in `frame`.
    pub fn scene_at(&self, frame: usize) -> Result<SplatPair> {
        if frame >= self.config.frames {
            return Err(Error::Argument(alloc::format!("frame {frame} out of range")));
        }
        if !self.config.symmetric_splatting {
            return Ok(SplatPair::single(with_fluid_centers(self.scene, &self.forward[frame])));
        }
        let p = self.config.loop_period;
        let k = frame % p;
        let (wf, wb) = splat_weights(k as f64, p as f64);
        Ok(pair(self.scene, &self.forward[k], &self.backward[p - k], wf, wb))
    }

    pub fn render_frame(&self, frame: usize, trajectory: &CameraTrajectory, decoder: &Decoder, background: &[f64]) -> Result<RgbImage> {
        let run = || -> Result<RgbImage> {
            let s = self.scene_at(frame)?;
            let fb = s.render(trajectory.camera(frame), background)?;
            decoder.decode(&fb)
        };
        run().map_err(|e| Error::Frame {
            frame,
            source: alloc::boxed::Box::new(e),
        })
    }
}

/// Renders every frame sequentially.
pub fn render_video<F: PointVelocity + ?Sized>(
    scene: &GaussianScene,
    field: &F,
    trajectory: &CameraTrajectory,
    config: &AnimationConfig,
    decoder: &Decoder,
    background: &[f64],
) -> Result<Vec<RgbImage>> {
    if trajectory.len() != config.frames {
        return Err(Error::Argument(alloc::format!(
            "trajectory has {} cameras for {} frames",
            trajectory.len(),
            config.frames
        )));
    }
    let anim = Animator::new(scene, field, config)?;
    (0..config.frames).map(|f| anim.render_frame(f, trajectory, decoder, background)).collect()
}
