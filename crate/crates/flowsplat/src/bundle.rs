//! Scene bundle directories.
//!
//! ```text
//! bundle/
//!   image.png      8-bit RGB input view
//!   depth.bin      FSDP depth grid (see `io`)
//!   mask.png       nonzero = fluid
//!   obstacle.png   nonzero = obstacle (optional)
//!   camera.toml    intrinsics, input pose, per-frame trajectory poses
//!   scene.toml     fps, frame count, optional synthetic source and edit
//! ```
//!
//! Poses are world-to-camera: a unit quaternion `(w, x, y, z)` and a
//! translation. Synthetic bundles record their generator settings so the
//! analytic flow can be rebuilt for supervision and evaluation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use flowsplat_core::animation::AnimationConfig;
use flowsplat_core::grid::{DepthMap, Mask, RgbImage};
use flowsplat_core::neuralfield::ConditioningInput;
use flowsplat_core::scene::{gaussians_from_image, Camera, CameraTrajectory, GaussianInit, GaussianScene};
use flowsplat_core::synthlab::{disk_mask, edit_scene_add_obstacle, Disk, SynthConfig, SyntheticScene};
use flowsplat_core::training::Region;

use crate::io;
use crate::{read_toml, write_toml, FormatError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePose {
    pub frame: usize,
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub pose: Pose,
    #[serde(default)]
    pub trajectory: Vec<FramePose>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub fps: f64,
    pub frames: usize,
    pub synthetic: Option<SynthConfig>,
    pub edit: Option<Disk>,
}

impl CameraFile {
    pub fn from_cameras(camera: &Camera, trajectory: &CameraTrajectory) -> Self {
        let [fx, fy, cx, cy] = camera.intrinsics();
        let pose = |c: &Camera| {
            let t = c.translation();
            (c.quaternion(), [t[0], t[1], t[2]])
        };
        let (q, t) = pose(camera);
        CameraFile {
            width: camera.width,
            height: camera.height,
            fx,
            fy,
            cx,
            cy,
            pose: Pose {
                quaternion: q,
                translation: t,
            },
            trajectory: trajectory
                .frames()
                .iter()
                .map(|(frame, c)| {
                    let (quaternion, translation) = pose(c);
                    FramePose {
                        frame: *frame,
                        quaternion,
                        translation,
                    }
                })
                .collect(),
        }
    }

    fn camera(&self, quaternion: [f64; 4], translation: [f64; 3]) -> Result<Camera> {
        Ok(Camera::from_quaternion(
            [self.fx, self.fy, self.cx, self.cy],
            quaternion,
            translation,
            self.width,
            self.height,
        )?)
    }

    /// Input camera and trajectory; an empty trajectory means the input
    /// camera held for `frames` frames.
    pub fn cameras(&self, frames: usize) -> Result<(Camera, CameraTrajectory)> {
        let input = self.camera(self.pose.quaternion, self.pose.translation)?;
        let traj = if self.trajectory.is_empty() {
            CameraTrajectory::fixed(input.clone(), frames)?
        } else {
            let frames = self
                .trajectory
                .iter()
                .map(|f| Ok((f.frame, self.camera(f.quaternion, f.translation)?)))
                .collect::<Result<Vec<_>>>()?;
            CameraTrajectory::new(frames)?
        };
        Ok((input, traj))
    }
}

/// One input view with everything needed to train, animate and evaluate.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub image: RgbImage,
    pub depth: DepthMap,
    pub mask: Mask,
    pub obstacle: Option<Mask>,
    pub camera: Camera,
    pub trajectory: CameraTrajectory,
    pub fps: f64,
    pub frames: usize,
    pub synthetic: Option<SynthConfig>,
    pub edit: Option<Disk>,
}

impl Bundle {
    pub fn from_synthetic(scene: &SyntheticScene, config: &SynthConfig, edit: Option<Disk>) -> Result<Self> {
        Ok(Bundle {
            image: scene.image.clone(),
            depth: scene.depth.clone(),
            mask: scene.fluid.clone(),
            obstacle: (scene.obstacle.count() > 0).then(|| scene.obstacle.clone()),
            camera: scene.camera.clone(),
            trajectory: CameraTrajectory::fixed(scene.camera.clone(), scene.frames)?,
            fps: scene.fps,
            frames: scene.frames,
            synthetic: Some(config.clone()),
            edit,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
        io::write_png(&dir.join("image.png"), &self.image)?;
        io::write_depth(&dir.join("depth.bin"), &self.depth)?;
        io::write_mask(&dir.join("mask.png"), &self.mask)?;
        let obstacle = dir.join("obstacle.png");
        match &self.obstacle {
            Some(o) => io::write_mask(&obstacle, o)?,
            None if obstacle.exists() => fs::remove_file(&obstacle).map_err(|e| FormatError::io(&obstacle, e))?,
            None => {}
        }
        write_toml(&dir.join("camera.toml"), &CameraFile::from_cameras(&self.camera, &self.trajectory))?;
        write_toml(
            &dir.join("scene.toml"),
            &SceneFile {
                fps: self.fps,
                frames: self.frames,
                synthetic: self.synthetic.clone(),
                edit: self.edit,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let image = io::read_png(&dir.join("image.png"))?;
        let depth = io::read_depth(&dir.join("depth.bin"))?;
        let mask = io::read_mask(&dir.join("mask.png"))?;
        let obstacle_path = dir.join("obstacle.png");
        let obstacle = if obstacle_path.exists() {
            Some(io::read_mask(&obstacle_path)?)
        } else {
            None
        };
        let cams: CameraFile = read_toml(&dir.join("camera.toml"))?;
        let scene: SceneFile = read_toml(&dir.join("scene.toml"))?;
        let (camera, trajectory) = cams.cameras(scene.frames)?;
        let dims = (camera.width, camera.height);
        if image.dims() != dims || depth.dims() != dims || mask.dims() != dims || obstacle.as_ref().is_some_and(|o| o.dims() != dims) {
            return Err(FormatError::Corrupt(format!("bundle rasters do not match the {}×{} camera", dims.0, dims.1)));
        }
        AnimationConfig::new(scene.frames, scene.fps)?;
        Ok(Bundle {
            image,
            depth,
            mask,
            obstacle,
            camera,
            trajectory,
            fps: scene.fps,
            frames: scene.frames,
            synthetic: scene.synthetic,
            edit: scene.edit,
        })
    }

    /// The analytic scene behind a synthetic bundle, with any recorded edit
    /// applied.
    pub fn synthetic_scene(&self) -> Result<Option<SyntheticScene>> {
        let Some(cfg) = &self.synthetic else { return Ok(None) };
        let mut scene = SyntheticScene::generate(cfg)?;
        if let Some(disk) = self.edit {
            scene = edit_scene_add_obstacle(&scene, disk)?;
        }
        Ok(Some(scene))
    }

    pub fn animation_config(&self) -> Result<AnimationConfig> {
        Ok(AnimationConfig::new(self.frames, self.fps)?)
    }

    pub fn conditioning(&self) -> ConditioningInput {
        ConditioningInput {
            image: self.image.clone(),
            depth: self.depth.clone(),
            mask: self.mask.clone(),
            hints: None,
        }
    }

    pub fn gaussians(&self) -> Result<GaussianScene> {
        Ok(gaussians_from_image(&self.image, &self.depth, &self.mask, &self.camera, GaussianInit::default())?)
    }

    /// Fluid region: the exact geometry for synthetic bundles, else the
    /// mask seen through the input camera.
    pub fn region(&self) -> Result<Region> {
        Ok(match self.synthetic_scene()? {
            Some(s) => Region::Channel(s.geometry),
            None => Region::Raster {
                mask: self.mask.clone(),
                camera: self.camera.clone(),
            },
        })
    }

    /// Adds a disk obstacle on the water plane. Synthetic bundles are
    /// regenerated (image, masks and analytic flow); other bundles only
    /// have the disk removed from the fluid mask and added to the obstacle
    /// mask.
    pub fn add_obstacle(&self, disk: Disk) -> Result<Bundle> {
        if self.edit.is_some() {
            return Err(FormatError::Core(flowsplat_core::Error::Argument("bundle already carries an edit".into())));
        }
        if let Some(cfg) = &self.synthetic {
            let base = SyntheticScene::generate(cfg)?;
            let edited = edit_scene_add_obstacle(&base, disk)?;
            let mut out = Bundle::from_synthetic(&edited, cfg, Some(disk))?;
            out.trajectory = self.trajectory.clone();
            return Ok(out);
        }
        let hole = disk_mask(&self.camera, &disk);
        if hole.count() == 0 {
            return Err(FormatError::Core(flowsplat_core::Error::Domain("obstacle disk is not visible".into())));
        }
        let mut out = self.clone();
        let mut obstacle = self.obstacle.clone().unwrap_or_else(|| Mask::filled(self.mask.width(), self.mask.height(), false));
        for y in 0..hole.height() {
            for x in 0..hole.width() {
                if *hole.get(x, y) {
                    out.mask.set(x, y, false);
                    obstacle.set(x, y, true);
                }
            }
        }
        out.obstacle = Some(obstacle);
        out.edit = Some(disk);
        Ok(out)
    }
}
