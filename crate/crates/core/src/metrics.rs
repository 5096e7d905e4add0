//! Image and flow metrics.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::animation::PointVelocity;
use crate::diffengine::forward_jacobian;
use crate::error::{Error, Result};
use crate::grid::{check_dims, Mask, RgbImage};
use crate::math::{add3, norm3, scale3, sub3, Vec3};
use crate::neuralfield::BoundField;
use crate::physics::{AnalyticField, FluidRegion, Query, SceneFlowSample};
use crate::synthlab::Disk;

pub const PSNR_CAP: f64 = 99.0;

/// PSNR of two equally long sample sequences, capped at [`PSNR_CAP`].
pub fn psnr_slices(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(alloc::format!("psnr over {} vs {} samples", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * libm::log10(peak * peak / mse)).min(PSNR_CAP))
}

fn flat(img: &RgbImage) -> Vec<f64> {
    img.data().iter().flat_map(|p| *p).collect()
}

pub fn psnr(a: &RgbImage, b: &RgbImage, peak: f64) -> Result<f64> {
    check_dims(a, b, "psnr")?;
    psnr_slices(&flat(a), &flat(b), peak)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| libm::exp(-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma))).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the valid region.
fn filter(x: &[f64], w: usize, h: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x0 in 0..ow {
            tmp[y * ow + x0] = (0..k).map(|i| g[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..k).map(|i| g[i] * tmp[(y0 + i) * ow + x0]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM of one channel.
pub fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize, p: &SsimParams) -> Result<f64> {
    if a.len() != w * h || b.len() != w * h {
        return Err(Error::Shape("ssim channel size".into()));
    }
    if p.window.is_multiple_of(2) || p.window == 0 {
        return Err(Error::Argument("ssim window must be odd".into()));
    }
    if w < p.window || h < p.window {
        return Err(Error::Shape(alloc::format!("image {w}×{h} smaller than the {} px window", p.window)));
    }
    let g = gaussian_window(p.window, p.sigma);
    let c1 = (p.k1 * p.peak).powi(2);
    let c2 = (p.k2 * p.peak).powi(2);
    let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(x, y)| x * y).collect() };
    let (ma, ow, oh) = filter(a, w, h, &g);
    let (mb, _, _) = filter(b, w, h, &g);
    let (saa, _, _) = filter(&prod(a, a), w, h, &g);
    let (sbb, _, _) = filter(&prod(b, b), w, h, &g);
    let (sab, _, _) = filter(&prod(a, b), w, h, &g);
    let mut total = 0.0;
    for i in 0..ow * oh {
        let (mx, my) = (ma[i], mb[i]);
        let vx = saa[i] - mx * mx;
        let vy = sbb[i] - my * my;
        let cxy = sab[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / (ow * oh) as f64)
}

/// Mean SSIM over the three channels.
pub fn ssim(a: &RgbImage, b: &RgbImage, params: &SsimParams) -> Result<f64> {
    check_dims(a, b, "ssim")?;
    let (w, h) = a.dims();
    let mut sum = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.data().iter().map(|p| p[c]).collect();
        let y: Vec<f64> = b.data().iter().map(|p| p[c]).collect();
        sum += ssim_channel(&x, &y, w, h, params)?;
    }
    Ok(sum / 3.0)
}

/// `pred` with every pixel outside `keep` replaced by `truth`, for
/// region-restricted scores.
pub fn replace_outside(pred: &RgbImage, truth: &RgbImage, keep: &Mask) -> Result<RgbImage> {
    check_dims(pred, truth, "region replacement")?;
    check_dims(pred, keep, "region replacement mask")?;
    let mut out = pred.clone();
    for ((o, t), k) in out.data_mut().iter_mut().zip(truth.data()).zip(keep.data()) {
        if !*k {
            *o = *t;
        }
    }
    Ok(out)
}

/// Velocity error aggregates. `l1_component` averages `|Δ|` over samples
/// and components; `l1_vector` averages the per-sample sum of `|Δ|`
/// (three times the former); `epe` averages `‖Δ‖`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityErrors {
    pub l1_component: f64,
    pub l1_vector: f64,
    pub epe: f64,
}

pub fn velocity_errors(pred: &[Vec3], truth: &[Vec3]) -> Result<VelocityErrors> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::Argument(alloc::format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    let n = pred.len() as f64;
    let (mut l1, mut epe) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let d = sub3(*p, *t);
        l1 += d[0].abs() + d[1].abs() + d[2].abs();
        epe += norm3(d);
    }
    Ok(VelocityErrors {
        l1_component: l1 / (3.0 * n),
        l1_vector: l1 / n,
        epe: epe / n,
    })
}

/// Errors of `field` against ground-truth samples.
pub fn velocity_l1<F: PointVelocity + ?Sized>(field: &F, probes: &[SceneFlowSample]) -> Result<VelocityErrors> {
    if probes.is_empty() {
        return Err(Error::Argument("no velocity probes".into()));
    }
    let q: Vec<Query> = probes.iter().map(|s| Query::new(s.position, s.time)).collect();
    let pred = field.velocities(&q)?;
    let truth: Vec<Vec3> = probes.iter().map(|s| s.velocity).collect();
    velocity_errors(&pred, &truth)
}

/// Fraction of points whose Euler trajectory over `[t0, t0 + horizon]`
/// (steps of at most `dt`) visits a point outside the fluid region. Zero
/// for an empty set.
pub fn boundary_violation_rate<F, G>(points: &[Vec3], field: &F, region: &G, t0: f64, horizon: f64, dt: f64) -> Result<f64>
where
    F: PointVelocity + ?Sized,
    G: FluidRegion + ?Sized,
{
    if points.is_empty() {
        return Ok(0.0);
    }
    if !(dt > 0.0) || horizon < 0.0 {
        return Err(Error::Argument("violation rate needs dt > 0 and horizon ≥ 0".into()));
    }
    let mut cur = points.to_vec();
    let mut bad: Vec<bool> = cur.iter().map(|p| !region.contains(*p)).collect();
    let steps = libm::ceil(horizon / dt - 1e-9).max(0.0) as usize;
    let mut t = t0;
    for _ in 0..steps {
        let h = dt.min(t0 + horizon - t);
        let live: Vec<usize> = (0..cur.len()).filter(|&i| !bad[i]).collect();
        if live.is_empty() {
            break;
        }
        let q: Vec<Query> = live.iter().map(|&i| Query::new(cur[i], t).with_anchor(points[i])).collect();
        let u = field.velocities(&q)?;
        for (&i, v) in live.iter().zip(u) {
            cur[i] = add3(cur[i], scale3(v, h));
            if !region.contains(cur[i]) {
                bad[i] = true;
            }
        }
        t += h;
    }
    Ok(bad.iter().filter(|b| **b).count() as f64 / points.len() as f64)
}

/// Fields with input Jacobians.
pub trait JacobianField {
    /// Velocity Jacobians `∂u_i/∂(x, y, z, t)_j`.
    fn jacobians(&self, queries: &[Query]) -> Result<Vec<[[f64; 4]; 3]>>;
}

impl<F: AnalyticField> JacobianField for F {
    fn jacobians(&self, queries: &[Query]) -> Result<Vec<[[f64; 4]; 3]>> {
        queries
            .iter()
            .map(|q| {
                let x = [q.position[0], q.position[1], q.position[2], q.time];
                let (_, j) = forward_jacobian(|d| self.eval([d[0], d[1], d[2]], d[3]), x)?;
                Ok(j)
            })
            .collect()
    }
}

impl JacobianField for BoundField<'_> {
    fn jacobians(&self, queries: &[Query]) -> Result<Vec<[[f64; 4]; 3]>> {
        Ok(BoundField::jacobians(self, queries)?.into_iter().map(|(_, j)| j).collect())
    }
}

/// Monte-Carlo estimate of the mean `|∇·u|` over the probes.
pub fn mean_abs_divergence<F: JacobianField + ?Sized>(field: &F, probes: &[Query]) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Argument("no divergence probes".into()));
    }
    let j = field.jacobians(probes)?;
    Ok(j.iter().map(|j| (j[0][0] + j[1][1] + j[2][2]).abs()).sum::<f64>() / probes.len() as f64)
}

/// `n` seeds spread evenly across the band `|y − c_y| ≤ 1.5R`, placed
/// `upstream` world units before the disk center.
pub fn band_seeds(disk: &Disk, n: usize, upstream: f64) -> Vec<Vec3> {
    let half = 1.5 * disk.radius;
    (0..n)
        .map(|i| {
            let s = (i as f64 + 0.5) / n as f64;
            [disk.center[0] - upstream, disk.center[1] - half + 2.0 * half * s, 0.0]
        })
        .collect()
}

/// Fraction of streamlines that enter the disk while integrated for
/// `duration` with Euler steps of `dt`.
pub fn streamline_crossings<F: PointVelocity + ?Sized>(field: &F, disk: &Disk, seeds: &[Vec3], t0: f64, duration: f64, dt: f64) -> Result<f64> {
    if seeds.is_empty() {
        return Ok(0.0);
    }
    let region = NotInDisk(*disk);
    boundary_violation_rate(seeds, field, &region, t0, duration, dt)
}

struct NotInDisk(Disk);

impl FluidRegion for NotInDisk {
    fn contains(&self, p: Vec3) -> bool {
        !self.0.contains(p)
    }
}

/// Evaluation summary of one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    /// Scores with non-fluid pixels replaced by the reference.
    pub psnr_fluid: Vec<f64>,
    pub ssim_fluid: Vec<f64>,
    pub epe: f64,
    pub l1_component: f64,
    pub l1_vector: f64,
    pub mean_abs_divergence: f64,
    pub boundary_violation_rate: f64,
    pub runtime_ms: f64,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        crate::math::mean(&self.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        crate::math::mean(&self.ssim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::physics::LinearField;
    use crate::synthlab::FlowField;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn psnr_cases() {
        let a = noise(16, 16, 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let x: Vec<f64> = (0..100).map(|i| (i % 200) as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 16.0).collect();
        let p = psnr_slices(&x, &y, 255.0).unwrap();
        assert!((p - 20.0 * libm::log10(255.0 / 16.0)).abs() < 1e-12);
        // halving the MSE adds 10·log10(2)
        let z: Vec<f64> = x.iter().map(|v| v + 16.0 / libm::sqrt(2.0)).collect();
        let q = psnr_slices(&x, &z, 255.0).unwrap();
        assert!((q - p - 10.0 * libm::log10(2.0)).abs() < 1e-9);
        assert!(psnr(&a, &noise(8, 16, 1), 1.0).is_err());
    }

    #[test]
    fn ssim_cases() {
        let p = SsimParams::default();
        let a = noise(24, 20, 2);
        assert!((ssim(&a, &a, &p).unwrap() - 1.0).abs() < 1e-12);
        let neg = a.map(|v| [1.0 - v[0], 1.0 - v[1], 1.0 - v[2]]);
        assert!(ssim(&a, &neg, &p).unwrap() < 0.0);
        let c = Grid::filled(16, 16, [0.3; 3]);
        assert!((ssim(&c, &c, &p).unwrap() - 1.0).abs() < 1e-12);
        let b = noise(24, 20, 3);
        assert_eq!(ssim(&a, &b, &p).unwrap(), ssim(&b, &a, &p).unwrap());
        assert!(ssim(&a, &noise(24, 21, 3), &p).is_err());
        assert!(ssim(&noise(8, 8, 1), &noise(8, 8, 1), &p).is_err());
        let even = SsimParams { window: 10, ..p };
        assert!(ssim(&a, &a, &even).is_err());
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        // brute-force evaluation at one window position
        let p = SsimParams::default();
        let a = noise(11, 11, 4);
        let b = noise(11, 11, 5);
        let g = gaussian_window(11, 1.5);
        let x: Vec<f64> = a.data().iter().map(|v| v[0]).collect();
        let y: Vec<f64> = b.data().iter().map(|v| v[0]).collect();
        let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for j in 0..11 {
            for i in 0..11 {
                let w = g[i] * g[j];
                let (u, v) = (x[j * 11 + i], y[j * 11 + i]);
                mx += w * u;
                my += w * v;
                sxx += w * u * u;
                syy += w * v * v;
                sxy += w * u * v;
            }
        }
        let (c1, c2) = (1e-4, 9e-4);
        let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
        let direct = ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        assert!((ssim_channel(&x, &y, 11, 11, &p).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn region_replacement() {
        let a = noise(8, 8, 1);
        let b = noise(8, 8, 2);
        let keep = Grid::from_fn(8, 8, |x, _| x < 4);
        let r = replace_outside(&a, &b, &keep).unwrap();
        assert_eq!(r.get(1, 1), a.get(1, 1));
        assert_eq!(r.get(6, 1), b.get(6, 1));
    }

    #[test]
    fn velocity_conventions() {
        let truth = vec![[1.0, 2.0, 3.0]; 4];
        let pred: Vec<Vec3> = truth.iter().map(|t| add3(*t, [0.01; 3])).collect();
        let e = velocity_errors(&pred, &truth).unwrap();
        assert!((e.l1_component - 0.01).abs() < 1e-12);
        assert!((e.l1_vector - 0.03).abs() < 1e-12);
        assert!((e.epe - 0.01 * libm::sqrt(3.0)).abs() < 1e-12);
        let f = LinearField::rotation(0.5);
        let probes: Vec<SceneFlowSample> = (0..10)
            .map(|i| {
                let p = [i as f64 * 0.3, 1.0, 0.0];
                SceneFlowSample {
                    position: p,
                    time: 0.0,
                    velocity: f.velocity(p, 0.0),
                }
            })
            .collect();
        assert_eq!(velocity_l1(&f, &probes).unwrap().epe, 0.0);
        assert!(velocity_l1(&f, &[]).is_err());
    }

    #[test]
    fn violation_rates() {
        let disk = Disk {
            center: [0.0, 0.0],
            radius: 1.0,
        };
        let region = NotInDisk(disk);
        let seeds = band_seeds(&disk, 300, 3.0);
        let oracle = FlowField::Cylinder { u_inf: 1.0, disk };
        assert_eq!(boundary_violation_rate(&seeds, &oracle, &region, 0.0, 6.0, 0.01).unwrap(), 0.0);
        // uniform flow ignores the rock: seeds with |y| < R hit it
        let uniform = LinearField::constant([1.0, 0.0, 0.0]);
        let rate = streamline_crossings(&uniform, &disk, &seeds, 0.0, 6.0, 0.01).unwrap();
        let expect = seeds.iter().filter(|s| s[1].abs() <= 1.0).count() as f64 / 300.0;
        assert!((rate - expect).abs() < 1e-12 && rate > 0.6);
        assert_eq!(boundary_violation_rate(&[], &uniform, &region, 0.0, 1.0, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn divergence_estimates() {
        let disk = Disk {
            center: [0.0, 0.0],
            radius: 1.0,
        };
        let f = FlowField::Cylinder { u_inf: 1.0, disk };
        let q: Vec<Query> = (0..100).map(|i| Query::new([2.0 + 0.01 * i as f64, -1.0, 0.0], 0.0)).collect();
        assert!(mean_abs_divergence(&f, &q).unwrap() < 1e-12);
        let src = LinearField {
            a: [[1.0, 0.0, 0.0, 0.0], [0.0, 0.5, 0.0, 0.0], [0.0; 4]],
            b: [0.0; 3],
        };
        assert!((mean_abs_divergence(&src, &q).unwrap() - 1.5).abs() < 1e-12);
    }
}
