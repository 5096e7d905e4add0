//! Tile-based front-to-back alpha compositing of 3-D Gaussians, a
//! brute-force reference with identical compositing rules, and a small
//! convolutional decoder for feature payloads.
//!
//! Per kernel, `α = min(o·exp(−m/2), 0.99)` where `m` is the squared
//! Mahalanobis distance of the pixel center under the projected covariance;
//! kernels contribute nothing where `m > 9`. Compositing stops once the
//! transmittance falls below [`EARLY_OUT`].

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix2, Matrix2x3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::{Activation, ParamId, ParameterSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::RgbImage;
use crate::scene::{Camera, GaussianKernel, GaussianScene, MIN_DEPTH};

pub const TILE: usize = 16;
/// Added to every projected covariance, in pixels².
pub const DILATION: f64 = 0.3;
pub const EARLY_OUT: f64 = 1e-4;
pub const ALPHA_MAX: f64 = 0.99;
/// Squared Mahalanobis radius beyond which a kernel is ignored.
pub const CUTOFF: f64 = 9.0;

/// A kernel projected to the image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected2DGaussian {
    pub mean: [f64; 2],
    pub cov: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
}

/// `None` when the kernel center is behind the camera (culled).
pub fn project_gaussian(kernel: &GaussianKernel, camera: &Camera) -> Option<Projected2DGaussian> {
    let pc = camera.to_camera(kernel.center);
    let z = pc[2];
    if !(z > MIN_DEPTH) {
        return None;
    }
    let (x, y) = (pc[0], pc[1]);
    let j = Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * y / (z * z),
    );
    let w = camera.rotation();
    let t = j * w;
    let cov = t * kernel.covariance() * t.transpose() + Matrix2::identity() * DILATION;
    let cov = (cov + cov.transpose()) * 0.5;
    Some(Projected2DGaussian {
        mean: [camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy],
        cov,
        depth: z,
        opacity: kernel.opacity,
    })
}

#[derive(Clone, Copy, Debug)]
struct Splat {
    index: usize,
    mean: [f64; 2],
    conic: [f64; 3],
    depth: f64,
    opacity: f64,
    radius: f64,
}

impl Splat {
    fn from_projection(index: usize, p: &Projected2DGaussian) -> Option<Splat> {
        let (a, b, c) = (p.cov[(0, 0)], p.cov[(0, 1)], p.cov[(1, 1)]);
        let det = a * c - b * b;
        if !(det > 0.0) {
            return None;
        }
        let mid = 0.5 * (a + c);
        let lmax = mid + libm::sqrt((mid * mid - det).max(0.0));
        Some(Splat {
            index,
            mean: p.mean,
            conic: [c / det, -b / det, a / det],
            depth: p.depth,
            opacity: p.opacity,
            radius: 3.0 * libm::sqrt(lmax),
        })
    }

    #[inline]
    fn alpha(&self, px: f64, py: f64) -> f64 {
        let (dx, dy) = (px - self.mean[0], py - self.mean[1]);
        let m = self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy;
        if m > CUTOFF {
            return 0.0;
        }
        (self.opacity * libm::exp(-0.5 * m)).min(ALPHA_MAX)
    }
}

fn splats(scene: &GaussianScene, camera: &Camera) -> Vec<Splat> {
    let mut out: Vec<Splat> = scene
        .kernels
        .iter()
        .enumerate()
        .filter_map(|(i, k)| project_gaussian(k, camera).and_then(|p| Splat::from_projection(i, &p)))
        .collect();
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    out
}

/// Rendered payload channels and accumulated alpha.
#[derive(Clone, Debug, PartialEq)]
pub struct Framebuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl Framebuffer {
    fn new(width: usize, height: usize, channels: usize) -> Self {
        Framebuffer {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
            alpha: vec![0.0; width * height],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// First three channels as an image.
    pub fn to_rgb(&self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(Error::Shape(alloc::format!("{} payload channels, expected 3", self.channels)));
        }
        let px = self.data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        RgbImage::from_vec(self.width, self.height, px)
    }
}

/// Front-to-back compositing of `order` at pixel `(px, py)`; writes the
/// payload into `out` and returns the accumulated alpha.
fn composite(splats: &[Splat], order: impl Iterator<Item = usize>, scene: &GaussianScene, px: f64, py: f64, background: &[f64], out: &mut [f64]) -> f64 {
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut t = 1.0;
    for i in order {
        let s = &splats[i];
        let a = s.alpha(px, py);
        if a <= 0.0 {
            continue;
        }
        let w = a * t;
        for (o, c) in out.iter_mut().zip(scene.payload(s.index)) {
            *o += w * c;
        }
        t *= 1.0 - a;
        if t < EARLY_OUT {
            break;
        }
    }
    for (o, b) in out.iter_mut().zip(background) {
        *o += t * b;
    }
    1.0 - t
}

/// Composites one pixel given kernels already projected and sorted
/// front-to-back, with their payloads.
pub fn composite_pixel(kernels: &[(Projected2DGaussian, Vec<f64>)], pixel: (f64, f64), background: &[f64]) -> Vec<f64> {
    let mut out = background.to_vec();
    let mut scene = GaussianScene::new(background.len());
    let mut sp = Vec::new();
    for (i, (p, c)) in kernels.iter().enumerate() {
        if let Some(s) = Splat::from_projection(i, p) {
            sp.push(s);
        }
        scene.kernels.push(GaussianKernel::isotropic([0.0; 3], 1.0, p.opacity));
        scene.payload.extend_from_slice(c);
        scene.fluid.push(false);
    }
    composite(&sp, 0..sp.len(), &scene, pixel.0, pixel.1, background, &mut out);
    out
}

fn check_background(scene: &GaussianScene, background: &[f64]) -> Result<()> {
    if background.len() != scene.channels {
        return Err(Error::Shape(alloc::format!(
            "background has {} channels, payload has {}",
            background.len(),
            scene.channels
        )));
    }
    Ok(())
}

/// Per-tile kernel lists in front-to-back order.
fn bin(splats: &[Splat], tiles_x: usize, tiles_y: usize) -> Vec<Vec<usize>> {
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    let ts = TILE as f64;
    for (i, s) in splats.iter().enumerate() {
        let x0 = libm::floor((s.mean[0] - s.radius) / ts);
        let x1 = libm::floor((s.mean[0] + s.radius) / ts);
        let y0 = libm::floor((s.mean[1] - s.radius) / ts);
        let y1 = libm::floor((s.mean[1] + s.radius) / ts);
        if x1 < 0.0 || y1 < 0.0 || x0 >= tiles_x as f64 || y0 >= tiles_y as f64 {
            continue;
        }
        let (x0, y0) = (x0.max(0.0) as usize, y0.max(0.0) as usize);
        let (x1, y1) = ((x1 as usize).min(tiles_x - 1), (y1 as usize).min(tiles_y - 1));
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                // splats are globally sorted, so each bin stays sorted
                bins[ty * tiles_x + tx].push(i);
            }
        }
    }
    bins
}

/// Tiled renderer; tiles are processed in row-major order.
pub fn rasterize(scene: &GaussianScene, camera: &Camera, background: &[f64]) -> Result<Framebuffer> {
    let tiles = tiles_of(camera);
    rasterize_tiles(scene, camera, background, &(0..tiles).collect::<Vec<_>>())
}

pub fn tiles_of(camera: &Camera) -> usize {
    camera.width.div_ceil(TILE) * camera.height.div_ceil(TILE)
}

/// Tiled renderer processing tiles in the given order (each tile once).
pub fn rasterize_tiles(scene: &GaussianScene, camera: &Camera, background: &[f64], tile_order: &[usize]) -> Result<Framebuffer> {
    check_background(scene, background)?;
    let (w, h) = (camera.width, camera.height);
    let (tx, ty) = (w.div_ceil(TILE), h.div_ceil(TILE));
    let sp = splats(scene, camera);
    let bins = bin(&sp, tx, ty);
    let mut fb = Framebuffer::new(w, h, scene.channels);
    let mut seen = vec![false; tx * ty];
    let mut px = vec![0.0; scene.channels];
    for &tile in tile_order {
        if tile >= tx * ty || seen[tile] {
            return Err(Error::Argument(alloc::format!("invalid tile order entry {tile}")));
        }
        seen[tile] = true;
        let (bx, by) = ((tile % tx) * TILE, (tile / tx) * TILE);
        for y in by..(by + TILE).min(h) {
            for x in bx..(bx + TILE).min(w) {
                let a = composite(&sp, bins[tile].iter().copied(), scene, x as f64, y as f64, background, &mut px);
                let i = y * w + x;
                fb.alpha[i] = a;
                fb.data[i * scene.channels..(i + 1) * scene.channels].copy_from_slice(&px);
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Argument("tile order does not cover the image".into()));
    }
    Ok(fb)
}

/// Brute-force renderer: every pixel composites every kernel in global
/// depth order.
pub fn rasterize_reference(scene: &GaussianScene, camera: &Camera, background: &[f64]) -> Result<Framebuffer> {
    check_background(scene, background)?;
    let (w, h) = (camera.width, camera.height);
    let sp = splats(scene, camera);
    let mut fb = Framebuffer::new(w, h, scene.channels);
    let mut px = vec![0.0; scene.channels];
    for y in 0..h {
        for x in 0..w {
            let a = composite(&sp, 0..sp.len(), scene, x as f64, y as f64, background, &mut px);
            let i = y * w + x;
            fb.alpha[i] = a;
            fb.data[i * scene.channels..(i + 1) * scene.channels].copy_from_slice(&px);
        }
    }
    Ok(fb)
}

/// Replaces RGB payloads by a fixed random affine lift to `channels`
/// features.
pub fn feature_payload(scene: &GaussianScene, channels: usize, seed: u64) -> Result<GaussianScene> {
    if scene.channels != 3 {
        return Err(Error::Shape("feature lift expects RGB payloads".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj: Vec<f64> = (0..channels * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = scene.clone();
    out.channels = channels;
    out.payload = Vec::with_capacity(scene.len() * channels);
    for i in 0..scene.len() {
        let c = scene.payload(i);
        for k in 0..channels {
            let r = &proj[k * 4..k * 4 + 4];
            out.payload.push(r[0] * c[0] + r[1] * c[1] + r[2] * c[2] + r[3]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub channels: usize,
    pub hidden: usize,
    pub layers: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            channels: 3,
            hidden: 16,
            layers: 3,
            seed: 0,
        }
    }
}

/// 3×3 convolution stack mapping rendered features to RGB. With three
/// input channels and no layers it passes the input through.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub params: ParameterSet,
    layers: Vec<(ParamId, ParamId)>,
}

impl Decoder {
    pub fn pass_through() -> Self {
        Decoder {
            config: DecoderConfig {
                layers: 0,
                ..DecoderConfig::default()
            },
            params: ParameterSet::new(),
            layers: Vec::new(),
        }
    }

    pub fn new(config: DecoderConfig) -> Result<Self> {
        if config.layers == 0 {
            if config.channels != 3 {
                return Err(Error::Shape("pass-through decoding needs three channels".into()));
            }
            return Ok(Decoder {
                config,
                ..Decoder::pass_through()
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParameterSet::new();
        let mut layers = Vec::new();
        let mut cin = config.channels;
        for l in 0..config.layers {
            let cout = if l + 1 == config.layers { 3 } else { config.hidden };
            let fan = cin * 9;
            let bound = 1.0 / libm::sqrt(fan as f64);
            let w: Vec<f64> = (0..cout * fan).map(|_| rng.random_range(-bound..bound)).collect();
            let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-bound..bound)).collect();
            let wi = params.add(&alloc::format!("decoder.{l}.w"), &[cout, cin, 3, 3], w)?;
            let bi = params.add(&alloc::format!("decoder.{l}.b"), &[cout], b)?;
            layers.push((wi, bi));
            cin = cout;
        }
        Ok(Decoder { config, params, layers })
    }

    pub fn is_pass_through(&self) -> bool {
        self.layers.is_empty()
    }

    /// Feature planes `[C, H, W]` of a framebuffer.
    pub fn planes(fb: &Framebuffer) -> Tensor {
        let (w, h, c) = (fb.width, fb.height, fb.channels);
        let mut d = vec![0.0; c * w * h];
        for (i, px) in fb.data.chunks(c).enumerate() {
            for (k, v) in px.iter().enumerate() {
                d[k * w * h + i] = *v;
            }
        }
        Tensor::new(&[c, h, w], d).expect("consistent framebuffer")
    }

    /// Records the decoder on a tape; output is `[3, H, W]`.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let mut h = input;
        let last = self.layers.len().saturating_sub(1);
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(&self.params, w)?;
            let bv = tape.param(&self.params, b)?;
            h = tape.conv2d(h, wv, 1, 1)?;
            h = tape.add_channel(h, bv)?;
            if i < last {
                h = tape.act(h, Activation::Relu)?;
            }
        }
        Ok(h)
    }

    pub fn decode(&self, fb: &Framebuffer) -> Result<RgbImage> {
        if fb.channels != self.config.channels {
            return Err(Error::Shape(alloc::format!(
                "decoder expects {} channels, framebuffer has {}",
                self.config.channels,
                fb.channels
            )));
        }
        if self.is_pass_through() {
            return fb.to_rgb();
        }
        let mut tape = Tape::new();
        let x = tape.constant(Decoder::planes(fb))?;
        let y = self.forward(&mut tape, x)?;
        let d = tape.value(y).data();
        let n = fb.width * fb.height;
        let px = (0..n).map(|i| [d[i], d[n + i], d[2 * n + i]]).collect();
        RgbImage::from_vec(fb.width, fb.height, px)
    }
}
