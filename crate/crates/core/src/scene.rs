//! Pinhole cameras, depth lifting, layered depth clustering and the
//! Gaussian scene built from an image with depth.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::error::{arg, Error, Result};
use crate::grid::{check_dims, DepthMap, Mask, RgbImage};
use crate::math::{Real, Vec3};

/// Smallest camera-space depth treated as in front of the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Pinhole camera. Pixel `(u, v)` has its center at integer coordinates;
/// the camera frame has x right, y down, z forward. The pose maps world
/// points into the camera frame: `p_c = R p_w + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return arg("focal lengths must be positive and finite");
        }
        if width == 0 || height == 0 {
            return arg("image dimensions must be nonzero");
        }
        let err = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if !(err < 1e-9) || rotation.determinant() < 0.0 {
            return arg(alloc::format!("rotation is not orthonormal (‖RᵀR − I‖ = {err:e})"));
        }
        if !translation.iter().all(|v| v.is_finite()) || !cx.is_finite() || !cy.is_finite() {
            return arg("camera parameters must be finite");
        }
        Ok(Camera {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Pose given as a unit quaternion `(w, x, y, z)` and translation.
    pub fn from_quaternion(
        intrinsics: [f64; 4],
        quaternion: [f64; 4],
        translation: Vec3,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let [w, x, y, z] = quaternion;
        let n = libm::sqrt(w * w + x * x + y * y + z * z);
        if !(n > 0.0) || (n - 1.0).abs() > 1e-6 {
            return arg("pose quaternion must have unit norm");
        }
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        let [fx, fy, cx, cy] = intrinsics;
        Camera::new(
            fx,
            fy,
            cx,
            cy,
            q.to_rotation_matrix().into_inner(),
            Vector3::from(translation),
            width,
            height,
        )
    }

    /// Camera at `eye` looking at `target`, principal point at the image
    /// center and square pixels.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let eye = Vector3::from(eye);
        let forward = Vector3::from(target) - eye;
        if forward.norm() < 1e-12 {
            return arg("eye and target coincide");
        }
        let f = forward.normalize();
        let right = f.cross(&Vector3::from(up));
        if right.norm() < 1e-9 {
            return arg("up vector is parallel to the viewing direction");
        }
        let r = right.normalize();
        let down = f.cross(&r);
        let rot = Matrix3::from_rows(&[r.transpose(), down.transpose(), f.transpose()]);
        let t = -(rot * eye);
        Camera::new(
            focal,
            focal,
            (width as f64 - 1.0) * 0.5,
            (height as f64 - 1.0) * 0.5,
            rot,
            t,
            width,
            height,
        )
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn intrinsics(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }

    /// Pose rotation as `(w, x, y, z)` with `w ≥ 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation));
        let c = q.coords; // (x, y, z, w)
        let s = if c[3] < 0.0 { -1.0 } else { 1.0 };
        [s * c[3], s * c[0], s * c[1], s * c[2]]
    }

    /// Camera position in world coordinates.
    pub fn center(&self) -> Vec3 {
        let c = -(self.rotation.transpose() * self.translation);
        [c[0], c[1], c[2]]
    }

    /// Same camera after shifting the whole world by `offset`.
    pub fn translated(&self, offset: Vec3) -> Camera {
        let mut c = self.clone();
        c.translation -= self.rotation * Vector3::from(offset);
        c
    }

    pub fn to_camera<R: Real>(&self, p: [R; 3]) -> [R; 3] {
        let m = &self.rotation;
        let t = &self.translation;
        let mut out = [R::cst(0.0); 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = p[0].scale(m[(r, 0)]) + p[1].scale(m[(r, 1)]) + p[2].scale(m[(r, 2)]) + R::cst(t[r]);
        }
        out
    }

    /// Pixel coordinates and depth, generic so that query derivatives can be
    /// carried through the projection.
    pub fn project_real<R: Real>(&self, p: [R; 3]) -> Result<(R, R, R)> {
        let c = self.to_camera(p);
        let z = c[2];
        if !(z.value() > MIN_DEPTH) {
            return Err(Error::BehindCamera { depth: z.value() });
        }
        let u = (c[0] / z).scale(self.fx) + R::cst(self.cx);
        let v = (c[1] / z).scale(self.fy) + R::cst(self.cy);
        Ok((u, v, z))
    }

    pub fn project(&self, p: Vec3) -> Result<Projection> {
        let (u, v, depth) = self.project_real(p)?;
        Ok(Projection { u, v, depth })
    }

    /// World point seen at pixel `(u, v)` with camera-space depth `depth`.
    pub fn lift(&self, u: f64, v: f64, depth: f64) -> Result<Vec3> {
        if !(depth > 0.0) || !depth.is_finite() {
            return arg(alloc::format!("depth must be positive, got {depth}"));
        }
        let pc = Vector3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth);
        let w = self.rotation.transpose() * (pc - self.translation);
        Ok([w[0], w[1], w[2]])
    }

    /// Pixel containing the projection of `p` (nearest pixel center).
    pub fn pixel_of(&self, p: Vec3) -> Option<(usize, usize)> {
        let pr = self.project(p).ok()?;
        let (x, y) = (libm::round(pr.u), libm::round(pr.v));
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some((x as usize, y as usize))
    }
}

/// Lifts pixel `(u, v)` with depth `d`.
pub fn lift_pixel(camera: &Camera, pixel: (f64, f64), depth: f64) -> Result<Vec3> {
    camera.lift(pixel.0, pixel.1, depth)
}

/// Cameras indexed by strictly increasing frame numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraTrajectory {
    frames: Vec<(usize, Camera)>,
}

impl CameraTrajectory {
    pub fn new(frames: Vec<(usize, Camera)>) -> Result<Self> {
        if frames.is_empty() {
            return arg("trajectory needs at least one camera");
        }
        if frames.windows(2).any(|w| w[1].0 <= w[0].0) {
            return arg("trajectory frame indices must be strictly increasing");
        }
        Ok(CameraTrajectory { frames })
    }

    /// The same camera for frames `0..count`.
    pub fn fixed(camera: Camera, count: usize) -> Result<Self> {
        CameraTrajectory::new((0..count).map(|i| (i, camera.clone())).collect())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[(usize, Camera)] {
        &self.frames
    }

    pub fn camera(&self, i: usize) -> &Camera {
        &self.frames[i].1
    }
}

/// One depth layer of an image.
#[derive(Clone, Debug, PartialEq)]
pub struct LdiLayer {
    pub depth: DepthMap,
    pub valid: Mask,
    pub range: (f64, f64),
}

impl LdiLayer {
    /// Colors of the layer's pixels, black elsewhere.
    pub fn color(&self, image: &RgbImage) -> Result<RgbImage> {
        check_dims(image, &self.valid, "layer color")?;
        Ok(RgbImage::from_fn(image.width(), image.height(), |x, y| {
            if *self.valid.get(x, y) {
                *image.get(x, y)
            } else {
                [0.0; 3]
            }
        }))
    }
}

/// Single-linkage clustering of depth values: sorted depths are split
/// wherever consecutive values differ by at least `threshold`. Layers are
/// returned near to far. Non-finite or nonpositive depths are excluded.
pub fn cluster_ldi(depth: &DepthMap, threshold: f64) -> Result<Vec<LdiLayer>> {
    if !(threshold > 0.0) {
        return arg("clustering threshold must be positive");
    }
    let mut order: Vec<(f64, usize)> = depth
        .data()
        .iter()
        .enumerate()
        .filter(|(_, d)| d.is_finite() && **d > 0.0)
        .map(|(i, d)| (*d, i))
        .collect();
    if order.is_empty() {
        return arg("depth map has no valid pixels");
    }
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (w, h) = depth.dims();
    let mut layers = Vec::new();
    let mut start = 0;
    for i in 1..=order.len() {
        if i == order.len() || order[i].0 - order[i - 1].0 >= threshold {
            let mut d = vec![0.0; w * h];
            let mut m = vec![false; w * h];
            for &(v, idx) in &order[start..i] {
                d[idx] = v;
                m[idx] = true;
            }
            layers.push(LdiLayer {
                depth: DepthMap::from_vec(w, h, d)?,
                valid: Mask::from_vec(w, h, m)?,
                range: (order[start].0, order[i - 1].0),
            });
            start = i;
        }
    }
    Ok(layers)
}

/// One 3-D Gaussian. Rotation is a unit quaternion `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianKernel {
    pub center: Vec3,
    pub rotation: [f64; 4],
    pub scale: Vec3,
    pub opacity: f64,
}

impl GaussianKernel {
    pub fn isotropic(center: Vec3, sigma: f64, opacity: f64) -> Self {
        GaussianKernel {
            center,
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: [sigma; 3],
            opacity,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.rotation;
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z))
            .to_rotation_matrix()
            .into_inner()
    }

    /// `Σ = R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s = Matrix3::from_diagonal(&Vector3::from(self.scale));
        r * s * s.transpose() * r.transpose()
    }

    pub fn validate(&self) -> Result<()> {
        let [w, x, y, z] = self.rotation;
        let n = libm::sqrt(w * w + x * x + y * y + z * z);
        if (n - 1.0).abs() > 1e-9 {
            return arg("kernel rotation must be a unit quaternion");
        }
        if !self.scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return arg("kernel scales must be positive");
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return arg("kernel opacity must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Kernels with per-kernel payloads (`channels` values each) and a fluid
/// tag; static kernels never move.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianScene {
    pub kernels: Vec<GaussianKernel>,
    pub channels: usize,
    pub payload: Vec<f64>,
    pub fluid: Vec<bool>,
}

impl GaussianScene {
    pub fn new(channels: usize) -> Self {
        GaussianScene {
            kernels: Vec::new(),
            channels,
            payload: Vec::new(),
            fluid: Vec::new(),
        }
    }

    pub fn push(&mut self, kernel: GaussianKernel, payload: &[f64], fluid: bool) -> Result<()> {
        if payload.len() != self.channels {
            return Err(Error::Shape(alloc::format!(
                "payload has {} channels, scene expects {}",
                payload.len(),
                self.channels
            )));
        }
        self.kernels.push(kernel);
        self.payload.extend_from_slice(payload);
        self.fluid.push(fluid);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn payload(&self, i: usize) -> &[f64] {
        &self.payload[i * self.channels..(i + 1) * self.channels]
    }

    pub fn fluid_count(&self) -> usize {
        self.fluid.iter().filter(|f| **f).count()
    }

    /// Appends all kernels of `other`.
    pub fn extend(&mut self, other: &GaussianScene) -> Result<()> {
        if other.channels != self.channels {
            return Err(Error::Shape("cannot merge scenes with different payload widths".into()));
        }
        self.kernels.extend_from_slice(&other.kernels);
        self.payload.extend_from_slice(&other.payload);
        self.fluid.extend_from_slice(&other.fluid);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianInit {
    /// Kernel standard deviation in pixel footprints at the input view.
    pub scale_factor: f64,
    pub opacity: f64,
}

impl Default for GaussianInit {
    fn default() -> Self {
        GaussianInit {
            scale_factor: 0.7,
            opacity: 1.0,
        }
    }
}

/// One isotropic kernel per pixel with valid depth, centered at the lifted
/// pixel, with standard deviation `scale_factor · d / fx`. Payload is the
/// pixel color; pixels inside `fluid` are tagged as fluid.
pub fn gaussians_from_image(
    image: &RgbImage,
    depth: &DepthMap,
    fluid: &Mask,
    camera: &Camera,
    init: GaussianInit,
) -> Result<GaussianScene> {
    check_dims(image, depth, "image vs depth")?;
    check_dims(image, fluid, "image vs mask")?;
    if image.width() != camera.width || image.height() != camera.height {
        return Err(Error::Shape("image and camera dimensions differ".into()));
    }
    let mut scene = GaussianScene::new(3);
    for y in 0..image.height() {
        for x in 0..image.width() {
            let d = *depth.get(x, y);
            if !(d.is_finite() && d > 0.0) {
                continue;
            }
            let center = camera.lift(x as f64, y as f64, d)?;
            let sigma = init.scale_factor * d / camera.fx;
            scene.push(
                GaussianKernel::isotropic(center, sigma, init.opacity),
                image.get(x, y),
                *fluid.get(x, y),
            )?;
        }
    }
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_camera(f: f64, w: usize, h: usize) -> Camera {
        Camera::new(
            f,
            f,
            (w as f64 - 1.0) / 2.0,
            (h as f64 - 1.0) / 2.0,
            Matrix3::identity(),
            Vector3::zeros(),
            w,
            h,
        )
        .unwrap()
    }

    #[test]
    fn principal_point_lifts_onto_axis() {
        let cam = identity_camera(300.0, 64, 48);
        let p = lift_pixel(&cam, (cam.cx, cam.cy), 7.5).unwrap();
        assert_eq!(p, [0.0, 0.0, 7.5]);
    }

    #[test]
    fn pinhole_lateral_offset() {
        let cam = Camera::new(500.0, 500.0, 100.0, 100.0, Matrix3::identity(), Vector3::zeros(), 200, 200).unwrap();
        let p = cam.lift(150.0, 100.0, 10.0).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_depth_rejected() {
        let cam = identity_camera(100.0, 10, 10);
        assert!(cam.lift(1.0, 1.0, 0.0).is_err());
        assert!(cam.lift(1.0, 1.0, -2.0).is_err());
        assert!(matches!(cam.project([0.0, 0.0, -1.0]), Err(Error::BehindCamera { .. })));
    }

    #[test]
    fn lift_project_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cam = Camera::look_at([0.0, -9.0, 7.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], 128.0, 256, 256).unwrap();
        for _ in 0..1000 {
            let (u, v, d) = (
                rng.random_range(0.0..256.0),
                rng.random_range(0.0..256.0),
                rng.random_range(1.0..50.0),
            );
            let p = cam.lift(u, v, d).unwrap();
            let pr = cam.project(p).unwrap();
            assert!((pr.u - u).abs() < 1e-9 && (pr.v - v).abs() < 1e-9 && (pr.depth - d).abs() < 1e-9);
        }
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let m = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(1.0, 1.0, 0.0, 0.0, m, Vector3::zeros(), 4, 4).is_err());
    }

    #[test]
    fn quaternion_round_trip() {
        let cam = Camera::look_at([1.0, -6.0, 4.0], [0.5, 1.0, 0.0], [0.0, 0.0, 1.0], 90.0, 32, 32).unwrap();
        let t = *cam.translation();
        let back = Camera::from_quaternion(cam.intrinsics(), cam.quaternion(), [t[0], t[1], t[2]], 32, 32).unwrap();
        assert!((back.rotation() - cam.rotation()).norm() < 1e-12);
    }

    #[test]
    fn trajectory_must_increase() {
        let cam = identity_camera(10.0, 4, 4);
        assert!(CameraTrajectory::new(vec![(0, cam.clone()), (0, cam.clone())]).is_err());
        assert_eq!(CameraTrajectory::fixed(cam, 5).unwrap().len(), 5);
    }

    #[test]
    fn uniform_plane_is_one_layer() {
        let d = DepthMap::filled(8, 8, 3.0);
        assert_eq!(cluster_ldi(&d, 0.5).unwrap().len(), 1);
    }

    #[test]
    fn two_planes_are_two_layers_near_first() {
        let d = DepthMap::from_fn(8, 8, |x, _| if x < 4 { 50.0 } else { 5.0 });
        let layers = cluster_ldi(&d, 10.0).unwrap();
        assert_eq!(layers.len(), 2);
        assert_eq!(layers[0].range, (5.0, 5.0));
        assert_eq!(layers[1].range, (50.0, 50.0));
        assert_eq!(layers[0].valid.count() + layers[1].valid.count(), 64);
    }

    #[test]
    fn staircase_chains_into_one_layer() {
        let d = DepthMap::from_fn(10, 1, |x, _| (x + 1) as f64);
        assert_eq!(cluster_ldi(&d, 1.5).unwrap().len(), 1);
        // brute-force single linkage: components of the graph |di − dj| < thr
        let d = DepthMap::from_fn(6, 1, |x, _| [1.0, 1.4, 3.0, 3.2, 9.0, 1.1][x]);
        let layers = cluster_ldi(&d, 1.0).unwrap();
        let vals = d.data();
        let mut comp = [0usize, 1, 2, 3, 4, 5];
        for _ in 0..6 {
            for i in 0..6 {
                for j in 0..6 {
                    if (vals[i] - vals[j]).abs() < 1.0 {
                        let m = comp[i].min(comp[j]);
                        comp[i] = m;
                        comp[j] = m;
                    }
                }
            }
        }
        let mut distinct = comp.to_vec();
        distinct.sort();
        distinct.dedup();
        assert_eq!(layers.len(), distinct.len());
    }

    #[test]
    fn empty_depth_rejected() {
        let d = DepthMap::filled(4, 4, f64::NAN);
        assert!(cluster_ldi(&d, 1.0).is_err());
    }

    #[test]
    fn kernel_per_valid_pixel_and_scale_proportional_to_depth() {
        let cam = identity_camera(50.0, 6, 5);
        let img = RgbImage::filled(6, 5, [0.2, 0.4, 0.6]);
        let depth = DepthMap::from_fn(6, 5, |x, y| if x == 0 && y == 0 { f64::NAN } else { 2.0 + x as f64 });
        let fluid = Mask::from_fn(6, 5, |x, _| x > 2);
        let scene = gaussians_from_image(&img, &depth, &fluid, &cam, GaussianInit::default()).unwrap();
        assert_eq!(scene.len(), 29);
        assert!(scene.kernels.iter().all(|k| k.opacity == 1.0));
        // pixel (1,0) has depth 3, pixel (4,0) depth 6 -> scale doubles
        let s1 = scene.kernels[0].scale[0];
        let s4 = scene.kernels[3].scale[0];
        assert!((s4 / s1 - 2.0).abs() < 1e-12);
        for (k, f) in scene.kernels.iter().zip(&scene.fluid) {
            let (x, y) = cam.pixel_of(k.center).unwrap();
            assert_eq!(*fluid.get(x, y), *f);
            assert!(k.covariance().cholesky().is_some());
        }
    }

    #[test]
    fn rotated_covariance_is_spd() {
        let s = libm::sqrt(0.5);
        let k = GaussianKernel {
            center: [0.0; 3],
            rotation: [s, 0.0, 0.0, s],
            scale: [1.0, 0.1, 0.5],
            opacity: 0.5,
        };
        k.validate().unwrap();
        let c = k.covariance();
        assert!((c - c.transpose()).norm() < 1e-15);
        assert!(c.cholesky().is_some());
        assert!((c[(1, 1)] - 1.0).abs() < 1e-12);
    }
}
