//! Physics-informed and supervision losses over a velocity field.
//!
//! The momentum residual is the inviscid, pressure-free form
//! `∂u/∂t + (u·∇)u − f_g`, and incompressibility is `∇·u = 0`. Both are
//! evaluated from exact input derivatives carried on the tape, so the losses
//! can be differentiated with respect to the model parameters.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffengine::{forward_jacobian, Dual, DualStack, Tape, Tensor, Var, DIRS};
use crate::error::{arg, Result};
use crate::grid::Mask;
use crate::math::{add3, scale3, Real, Vec3};
use crate::scene::Camera;

/// A space-time query. `anchor` is the initial position of a moving point,
/// used by models that read their conditioning features there.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Query {
    pub position: Vec3,
    pub time: f64,
    pub anchor: Option<Vec3>,
}

impl Query {
    pub fn new(position: Vec3, time: f64) -> Self {
        Query {
            position,
            time,
            anchor: None,
        }
    }

    pub fn with_anchor(mut self, anchor: Vec3) -> Self {
        self.anchor = Some(anchor);
        self
    }
}

/// A velocity field recorded on a tape.
pub trait VelocityField {
    /// Velocities `[N × 3]`.
    fn velocity(&mut self, tape: &mut Tape, queries: &[Query]) -> Result<Var>;
    /// Velocities with their derivatives along `(x, y, z, t)`.
    fn velocity_dual(&mut self, tape: &mut Tape, queries: &[Query]) -> Result<DualStack>;
    /// External force `[1 × 3]`.
    fn external_force(&mut self, tape: &mut Tape) -> Result<Var>;
}

/// Closed-form velocity field, generic so it can be evaluated on dual
/// numbers.
pub trait AnalyticField {
    fn eval<R: Real>(&self, p: [R; 3], t: R) -> [R; 3];

    fn velocity(&self, p: Vec3, t: f64) -> Vec3 {
        self.eval(p, t)
    }
}

/// Wraps an [`AnalyticField`] (plus a constant force) as a
/// [`VelocityField`] whose outputs are tape constants.
pub struct AnalyticModel<F> {
    pub field: F,
    pub force: Vec3,
}

impl<F: AnalyticField> AnalyticModel<F> {
    pub fn new(field: F) -> Self {
        AnalyticModel { field, force: [0.0; 3] }
    }

    pub fn with_force(field: F, force: Vec3) -> Self {
        AnalyticModel { field, force }
    }
}

impl<F: AnalyticField> VelocityField for AnalyticModel<F> {
    fn velocity(&mut self, tape: &mut Tape, queries: &[Query]) -> Result<Var> {
        let mut data = Vec::with_capacity(queries.len() * 3);
        for q in queries {
            data.extend_from_slice(&self.field.velocity(q.position, q.time));
        }
        Ok(tape.constant(Tensor::new(&[queries.len(), 3], data)?)?)
    }

    fn velocity_dual(&mut self, tape: &mut Tape, queries: &[Query]) -> Result<DualStack> {
        let n = queries.len();
        let mut data = alloc::vec![0.0; (DIRS + 1) * n * 3];
        for (i, q) in queries.iter().enumerate() {
            let x = [q.position[0], q.position[1], q.position[2], q.time];
            let (v, j) = forward_jacobian(|d: &[Dual; 4]| self.field.eval([d[0], d[1], d[2]], d[3]), x)?;
            data[i * 3..i * 3 + 3].copy_from_slice(&v);
            for d in 0..DIRS {
                for r in 0..3 {
                    data[((d + 1) * n + i) * 3 + r] = j[r][d];
                }
            }
        }
        let stack = tape.constant(Tensor::new(&[(DIRS + 1) * n, 3], data)?)?;
        Ok(DualStack { stack, n })
    }

    fn external_force(&mut self, tape: &mut Tape) -> Result<Var> {
        Ok(tape.constant(Tensor::new(&[1, 3], self.force.to_vec())?)?)
    }
}

/// `u = A·(x, y, z, t) + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearField {
    pub a: [[f64; 4]; 3],
    pub b: Vec3,
}

impl AnalyticField for LinearField {
    fn eval<R: Real>(&self, p: [R; 3], t: R) -> [R; 3] {
        let x = [p[0], p[1], p[2], t];
        let mut out = [R::cst(0.0); 3];
        for (r, o) in out.iter_mut().enumerate() {
            let mut s = R::cst(self.b[r]);
            for (c, xc) in x.iter().enumerate() {
                if self.a[r][c] != 0.0 {
                    s = s + xc.scale(self.a[r][c]);
                }
            }
            *o = s;
        }
        out
    }
}

impl LinearField {
    /// Rigid rotation about the z axis, `u = ω(−y, x, 0)`.
    pub fn rotation(omega: f64) -> Self {
        LinearField {
            a: [[0.0, -omega, 0.0, 0.0], [omega, 0.0, 0.0, 0.0], [0.0; 4]],
            b: [0.0; 3],
        }
    }

    /// `u = a·t`, which satisfies the momentum equation with `f_g = a`.
    pub fn uniform_acceleration(a: Vec3) -> Self {
        LinearField {
            a: [[0.0, 0.0, 0.0, a[0]], [0.0, 0.0, 0.0, a[1]], [0.0, 0.0, 0.0, a[2]]],
            b: [0.0; 3],
        }
    }

    pub fn constant(u: Vec3) -> Self {
        LinearField { a: [[0.0; 4]; 3], b: u }
    }
}

/// Momentum residual `∂u/∂t + (u·∇)u − f_g` per query, `[N × 3]`.
pub fn ns_residual<M: VelocityField + ?Sized>(model: &mut M, tape: &mut Tape, queries: &[Query]) -> Result<Var> {
    let s = model.velocity_dual(tape, queries)?;
    let f = model.external_force(tape)?;
    residual_from_stack(tape, s, f)
}

fn residual_from_stack(tape: &mut Tape, s: DualStack, force: Var) -> Result<Var> {
    let u = s.primal(tape)?;
    let mut r = s.tangent(tape, 3)?;
    for k in 0..3 {
        let uk = tape.column(u, k)?;
        let jk = s.tangent(tape, k)?;
        let term = tape.mul_col(uk, jk)?;
        r = tape.add(r, term)?;
    }
    Ok(tape.sub_row(r, force)?)
}

fn divergence_from_stack(tape: &mut Tape, s: DualStack) -> Result<Var> {
    let mut div: Option<Var> = None;
    for k in 0..3 {
        let jk = s.tangent(tape, k)?;
        let c = tape.column(jk, k)?;
        div = Some(match div {
            None => c,
            Some(d) => tape.add(d, c)?,
        });
    }
    Ok(div.expect("three spatial directions"))
}

/// Trace of the spatial Jacobian per query, `[N × 1]`.
pub fn divergence<M: VelocityField + ?Sized>(model: &mut M, tape: &mut Tape, queries: &[Query]) -> Result<Var> {
    let s = model.velocity_dual(tape, queries)?;
    divergence_from_stack(tape, s)
}

fn require_nonempty<T>(items: &[T], what: &str) -> Result<()> {
    if items.is_empty() {
        return arg(alloc::format!("{what} needs at least one point"));
    }
    Ok(())
}

/// Mean squared norm of the momentum residual.
pub fn loss_ns<M: VelocityField + ?Sized>(model: &mut M, tape: &mut Tape, probes: &[Query]) -> Result<Var> {
    require_nonempty(probes, "momentum loss")?;
    let r = ns_residual(model, tape, probes)?;
    let sq = tape.row_sum_sq(r)?;
    Ok(tape.mean(sq)?)
}

/// Mean squared divergence.
pub fn loss_div<M: VelocityField + ?Sized>(model: &mut M, tape: &mut Tape, probes: &[Query]) -> Result<Var> {
    require_nonempty(probes, "divergence loss")?;
    let d = divergence(model, tape, probes)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq)?)
}

/// Both physics interior terms from a single derivative pass.
pub fn physics_interior<M: VelocityField + ?Sized>(model: &mut M, tape: &mut Tape, probes: &[Query]) -> Result<(Var, Var)> {
    require_nonempty(probes, "physics loss")?;
    let s = model.velocity_dual(tape, probes)?;
    let f = model.external_force(tape)?;
    let r = residual_from_stack(tape, s, f)?;
    let rs = tape.row_sum_sq(r)?;
    let ns = tape.mean(rs)?;
    let d = divergence_from_stack(tape, s)?;
    let dsq = tape.mul(d, d)?;
    let div = tape.mean(dsq)?;
    Ok((ns, div))
}

/// Region where fluid may be; everything else (obstacles, banks, the
/// outside of the image) is not.
pub trait FluidRegion {
    fn contains(&self, p: Vec3) -> bool;
}

/// Fluid region given by a mask raster seen through a camera; a point is
/// inside iff its nearest pixel is a fluid pixel.
#[derive(Clone, Debug)]
pub struct RasterRegion<'a> {
    pub mask: &'a Mask,
    pub camera: &'a Camera,
}

impl FluidRegion for RasterRegion<'_> {
    fn contains(&self, p: Vec3) -> bool {
        match self.camera.pixel_of(p) {
            Some((x, y)) if x < self.mask.width() && y < self.mask.height() => *self.mask.get(x, y),
            _ => false,
        }
    }
}

/// 1 when `p` lies outside the fluid region, else 0.
pub fn w_indicator<G: FluidRegion + ?Sized>(p: Vec3, region: &G) -> f64 {
    if region.contains(p) {
        0.0
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryProbe {
    pub position: Vec3,
    pub time: f64,
    pub stays_inside_gt: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneFlowSample {
    pub position: Vec3,
    pub time: f64,
    pub velocity: Vec3,
}

/// Mean over probes of `w(p + h·u)·‖u‖²`, where `h` is the displacement
/// horizon and `w` flags displaced points outside the fluid region. The
/// indicator is evaluated on the current values and acts as a constant
/// weight. Probes whose ground-truth motion leaves the region are ignored;
/// with no eligible probe the loss is zero.
pub fn loss_boundary<M, G>(model: &mut M, tape: &mut Tape, probes: &[BoundaryProbe], region: &G, horizon: f64) -> Result<Var>
where
    M: VelocityField + ?Sized,
    G: FluidRegion + ?Sized,
{
    let kept: Vec<Query> = probes
        .iter()
        .filter(|p| p.stays_inside_gt)
        .map(|p| Query::new(p.position, p.time))
        .collect();
    if kept.is_empty() {
        return Ok(tape.scalar(0.0)?);
    }
    let u = model.velocity(tape, &kept)?;
    let w: Vec<f64> = {
        let uv = tape.value(u).data();
        kept.iter()
            .enumerate()
            .map(|(i, q)| {
                let d = [uv[i * 3], uv[i * 3 + 1], uv[i * 3 + 2]];
                w_indicator(add3(q.position, scale3(d, horizon)), region)
            })
            .collect()
    };
    let sq = tape.row_sum_sq(u)?;
    let wq = tape.mul_const(sq, Tensor::new(&[kept.len(), 1], w)?)?;
    Ok(tape.mean(wq)?)
}

/// Mean end-point error `‖u − u_gt‖` (not squared).
pub fn loss_motion<M: VelocityField + ?Sized>(model: &mut M, tape: &mut Tape, samples: &[SceneFlowSample]) -> Result<Var> {
    require_nonempty(samples, "motion loss")?;
    let q: Vec<Query> = samples.iter().map(|s| Query::new(s.position, s.time)).collect();
    let u = model.velocity(tape, &q)?;
    let gt: Vec<f64> = samples.iter().flat_map(|s| s.velocity).collect();
    let gt = tape.constant(Tensor::new(&[samples.len(), 3], gt)?)?;
    let d = tape.sub(u, gt)?;
    let sq = tape.row_sum_sq(d)?;
    let n = tape.sqrt(sq)?;
    Ok(tape.mean(n)?)
}

/// Loss weights. `physics` scales the whole physics term in the total
/// objective; `novel_view` is carried for completeness and unused.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ns: f64,
    pub div: f64,
    pub physics: f64,
    pub novel_view: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ns: 1e-2,
            div: 1e-2,
            physics: 1e-1,
            novel_view: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.ns, self.div, self.physics, self.novel_view]
            .iter()
            .any(|v| !(*v >= 0.0) || !v.is_finite())
        {
            return arg("loss weights must be finite and nonnegative");
        }
        Ok(())
    }
}

/// `λ_NS·L_NS + λ_div·L_div + L_b`.
pub fn loss_physics(tape: &mut Tape, ns: Var, div: Var, boundary: Var, weights: &LossWeights) -> Result<Var> {
    let a = tape.scale(ns, weights.ns)?;
    let b = tape.scale(div, weights.div)?;
    let s = tape.add(a, b)?;
    Ok(tape.add(s, boundary)?)
}
