//! Generated datasets: cameras, ground truth and scaffold priors, in memory
//! and on disk.
//!
//! Directory layout:
//!
//! ```text
//! spec.json
//! scaffold.obj
//! cameras_{train,interp,extrap}.json
//! gt/<split>/<idx>.ppm          8-bit ground-truth image
//! gt/<split>/dist_<idx>.pfm     ground-truth distance (clean mesh)
//! priors/dist_<idx>.pfm         scaffold distance, training views
//! priors/cov_<idx>.pfm          scaffold coverage, training views
//! priors/<split>/cov_<idx>.pfm  scaffold coverage, test views
//! ```

use crate::geometry::{CameraModel, MeshAccel, TriangleMesh};
use crate::io::{self, Image};
use crate::scaffold::{bake_coverage_map, bake_training_priors, CoverageMap, DistanceMap, DEFAULT_EPS};
use crate::synth::{build_scene, make_trajectory, render_gt, SceneSpec, TrajectorySpec};
use crate::train::{TrainView, TrainingSet};
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    /// Visibility tolerance for coverage baking.
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

impl DatasetSpec {
    pub fn desk_room(size: u32) -> Self {
        Self {
            scene: SceneSpec::desk_room(),
            trajectory: TrajectorySpec::desk_room(size, size),
            eps: DEFAULT_EPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Interp,
    Extrap,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Interp, Split::Extrap];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Interp => "interp",
            Split::Extrap => "extrap",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "interp" => Ok(Split::Interp),
            "extrap" => Ok(Split::Extrap),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Cameras, ground truth and scaffold coverage for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub cameras: Vec<CameraModel>,
    pub images: Vec<Image>,
    /// Clean-mesh distance, used as depth ground truth.
    pub gt_distance: Vec<DistanceMap>,
    pub coverage: Vec<CoverageMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub scaffold: TriangleMesh,
    pub train: SplitData,
    pub interp: SplitData,
    pub extrap: SplitData,
    /// Scaffold distance for each training view.
    pub prior_distance: Vec<DistanceMap>,
}

fn coverage_to_f64(c: &CoverageMap) -> Vec<f64> {
    c.values.iter().map(|&v| v as f64).collect()
}

impl Dataset {
    /// Renders ground truth from the clean scene and bakes priors from it,
    /// so the scaffold starts out exact. Fails if no extrapolation pixel has
    /// coverage 1 or 2.
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        let mut ds = Self::render(spec)?;
        ds.rebake(ds.scaffold.clone())?;
        ds.check_few_shot()?;
        Ok(ds)
    }

    /// Cameras, ground truth and the clean scaffold, without priors.
    pub fn render(spec: &DatasetSpec) -> Result<Self> {
        let scene = build_scene(&spec.scene)?;
        let traj = make_trajectory(&spec.scene, &spec.trajectory)?;
        let render = |cams: &[CameraModel]| -> (Vec<Image>, Vec<DistanceMap>) {
            cams.par_iter()
                .map(|c| {
                    let gt = render_gt(&scene, c);
                    (gt.image.quantized(), gt.distance.quantized())
                })
                .unzip()
        };
        let split = |cams: Vec<CameraModel>| {
            let (images, gt_distance) = render(&cams);
            SplitData {
                cameras: cams,
                images,
                gt_distance,
                coverage: Vec::new(),
            }
        };
        Ok(Self {
            spec: spec.clone(),
            scaffold: scene.mesh().clone(),
            train: split(traj.train),
            interp: split(traj.interp),
            extrap: split(traj.extrap),
            prior_distance: Vec::new(),
        })
    }

    /// Errors unless some extrapolation pixel has coverage 1 or 2.
    pub fn check_few_shot(&self) -> Result<()> {
        let few_shot = self
            .extrap
            .coverage
            .iter()
            .flat_map(|c| &c.values)
            .filter(|&&v| (1..=2).contains(&v))
            .count();
        if few_shot == 0 {
            return Err(Error::Data(
                "trajectory leaves no extrapolation pixel with coverage 1 or 2".into(),
            ));
        }
        Ok(())
    }

    /// Replaces the scaffold and re-bakes every prior raster from it.
    pub fn rebake(&mut self, scaffold: TriangleMesh) -> Result<()> {
        let accel = MeshAccel::new(scaffold)?;
        let train_cams = &self.train.cameras;
        let priors = bake_training_priors(&accel, train_cams, self.spec.eps)?;
        for split in [&mut self.interp, &mut self.extrap] {
            split.coverage = split
                .cameras
                .par_iter()
                .map(|c| bake_coverage_map(&accel, c, train_cams, &priors.distance, self.spec.eps))
                .collect::<Result<Vec<_>>>()?;
        }
        self.train.coverage = priors.coverage;
        self.prior_distance = priors.distance.into_iter().map(DistanceMap::quantized).collect();
        self.scaffold = accel.mesh;
        Ok(())
    }

    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Interp => &self.interp,
            Split::Extrap => &self.extrap,
        }
    }

    pub fn training_set(&self, near: f64) -> Result<TrainingSet> {
        let views = (0..self.train.cameras.len())
            .map(|i| TrainView {
                camera: self.train.cameras[i].clone(),
                image: self.train.images[i].clone(),
                distance: self.prior_distance[i].clone(),
                coverage: self.train.coverage[i].clone(),
            })
            .collect();
        TrainingSet::new(views, near)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.save_views(dir)?;
        self.save_priors(dir)
    }

    /// Writes everything except `priors/`.
    pub fn save_views(&self, dir: &Path) -> Result<()> {
        io::save_json(&dir.join("spec.json"), &self.spec)?;
        io::save_mesh(&dir.join("scaffold.obj"), &self.scaffold)?;
        for split in Split::ALL {
            let data = self.split(split);
            io::save_cameras(&dir.join(format!("cameras_{split}.json")), &data.cameras)?;
            let gt = dir.join("gt").join(split.name());
            for (i, (img, dist)) in data.images.iter().zip(&data.gt_distance).enumerate() {
                io::save_image(&gt.join(format!("{i}.ppm")), img)?;
                io::write_bytes(&gt.join(format!("dist_{i}.pfm")), &io::write_pfm(dist.width, dist.height, &dist.values))?;
            }
        }
        Ok(())
    }

    /// Writes the scaffold-derived files only: `scaffold.obj` and `priors/`.
    pub fn save_priors(&self, dir: &Path) -> Result<()> {
        io::save_mesh(&dir.join("scaffold.obj"), &self.scaffold)?;
        let priors = dir.join("priors");
        for (i, (d, c)) in self.prior_distance.iter().zip(&self.train.coverage).enumerate() {
            io::write_bytes(&priors.join(format!("dist_{i}.pfm")), &io::write_pfm(d.width, d.height, &d.values))?;
            io::write_bytes(&priors.join(format!("cov_{i}.pfm")), &io::write_pfm(c.width, c.height, &coverage_to_f64(c)))?;
        }
        for split in [Split::Interp, Split::Extrap] {
            for (i, cov) in self.split(split).coverage.iter().enumerate() {
                let path = priors.join(split.name()).join(format!("cov_{i}.pfm"));
                io::write_bytes(&path, &io::write_pfm(cov.width, cov.height, &coverage_to_f64(cov)))?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut ds = Self::load_views(dir)?;
        ds.load_priors(dir)?;
        Ok(ds)
    }

    /// Loads everything except `priors/`; coverage and prior distances are
    /// left empty.
    pub fn load_views(dir: &Path) -> Result<Self> {
        let spec: DatasetSpec = io::load_json(&dir.join("spec.json"))?;
        let scaffold = io::load_mesh(&dir.join("scaffold.obj"))?;
        let mut splits = Vec::new();
        for split in Split::ALL {
            let cameras = io::load_cameras(&dir.join(format!("cameras_{split}.json")))?;
            let gt = dir.join("gt").join(split.name());
            let mut images = Vec::with_capacity(cameras.len());
            let mut gt_distance = Vec::with_capacity(cameras.len());
            for (i, cam) in cameras.iter().enumerate() {
                let img = io::load_image(&gt.join(format!("{i}.ppm")))?;
                check_size(cam, img.width, img.height, "image")?;
                images.push(img);
                gt_distance.push(load_distance(&gt.join(format!("dist_{i}.pfm")), cam)?);
            }
            splits.push(SplitData {
                cameras,
                images,
                gt_distance,
                coverage: Vec::new(),
            });
        }
        let mut it = splits.into_iter();
        Ok(Self {
            spec,
            scaffold,
            train: it.next().unwrap(),
            interp: it.next().unwrap(),
            extrap: it.next().unwrap(),
            prior_distance: Vec::new(),
        })
    }

    /// Loads `priors/` written by `save_priors`.
    pub fn load_priors(&mut self, dir: &Path) -> Result<()> {
        let priors = dir.join("priors");
        for split in Split::ALL {
            let sub = match split {
                Split::Train => priors.clone(),
                _ => priors.join(split.name()),
            };
            let data = match split {
                Split::Train => &mut self.train,
                Split::Interp => &mut self.interp,
                Split::Extrap => &mut self.extrap,
            };
            data.coverage = data
                .cameras
                .iter()
                .enumerate()
                .map(|(i, cam)| load_coverage(&sub.join(format!("cov_{i}.pfm")), cam))
                .collect::<Result<Vec<_>>>()?;
        }
        self.prior_distance = self
            .train
            .cameras
            .iter()
            .enumerate()
            .map(|(i, cam)| load_distance(&priors.join(format!("dist_{i}.pfm")), cam))
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }
}

fn check_size(cam: &CameraModel, w: u32, h: u32, what: &str) -> Result<()> {
    if cam.width() != w || cam.height() != h {
        return Err(Error::Data(format!(
            "{what} is {w}x{h} but its camera is {}x{}",
            cam.width(),
            cam.height()
        )));
    }
    Ok(())
}

fn load_distance(path: &Path, cam: &CameraModel) -> Result<DistanceMap> {
    let (width, height, values) = io::read_pfm(&io::read_bytes(path)?)?;
    check_size(cam, width, height, &path.display().to_string())?;
    Ok(DistanceMap { width, height, values })
}

fn load_coverage(path: &Path, cam: &CameraModel) -> Result<CoverageMap> {
    let (width, height, values) = io::read_pfm(&io::read_bytes(path)?)?;
    check_size(cam, width, height, &path.display().to_string())?;
    let values = values
        .into_iter()
        .map(|v| {
            if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(Error::Data(format!("{}: coverage value {v} is not a count", path.display())))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CoverageMap { width, height, values })
}
