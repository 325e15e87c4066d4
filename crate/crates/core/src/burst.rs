//! Noisy linear bursts and their on-disk layouts.
//!
//! A scene directory holds `scene.json` (the [`PlanarScene`]), a clean
//! `preview.png` and `preview_depth.pfm` of the base view.
//!
//! A burst directory holds `burst.json` (noise, colour and camera metadata),
//! `noisy/{i}.pfm` (linear noisy frames), `clean/{i}.pfm` (linear clean
//! frames), `depth/{i}.pfm` (camera-z depth, 0 where nothing was hit), and
//! display-referred `noisy_target.png` / `clean_target.png`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, CameraPose};
use crate::error::{Error, Result};
use crate::geometry::DepthBounds;
use crate::image::{DepthMap, LinearImage};
use crate::noise_model::{self, ColorTransform, NoiseMeta, NoiseParams};
use crate::rng;
use crate::scene_sim::{self, BurstScene, PlanarScene};

/// A burst in linear sensor space, ready for the renderer.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyBurst {
    pub noisy: Vec<LinearImage>,
    /// Clean linear frames; empty when ground truth is unknown.
    pub clean: Vec<LinearImage>,
    /// Ground-truth depth; empty when unknown.
    pub depths: Vec<DepthMap>,
    pub intrinsics: Vec<CameraIntrinsics>,
    pub poses: Vec<CameraPose>,
    pub target_index: usize,
    pub bounds: DepthBounds,
    pub meta: NoiseMeta,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ViewMeta {
    intrinsics: CameraIntrinsics,
    pose: CameraPose,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BurstFile {
    #[serde(flatten)]
    noise: NoiseMeta,
    target_index: usize,
    near: f64,
    far: f64,
    has_clean: bool,
    has_depth: bool,
    views: Vec<ViewMeta>,
}

impl NoisyBurst {
    /// Linearizes the clean display-referred views of `scene` with `transform`
    /// and adds independent sensor noise to every frame.
    pub fn synthesize(scene: &BurstScene, noise: &NoiseParams, transform: &ColorTransform, seed: u64) -> Result<Self> {
        let clean: Vec<LinearImage> = scene
            .views
            .iter()
            .map(|v| noise_model::linearize(&v.image, transform))
            .collect::<Result<_>>()?;
        let noisy = clean
            .iter()
            .enumerate()
            .map(|(i, c)| noise_model::add_noise_with(c, noise, &mut rng::stream(seed, &[0x401_5e, i as u64])))
            .collect();
        Ok(Self {
            noisy,
            clean,
            depths: scene.depths.clone(),
            intrinsics: scene.views.iter().map(|v| v.intrinsics).collect(),
            poses: scene.views.iter().map(|v| v.pose).collect(),
            target_index: scene.target_index,
            bounds: scene.bounds,
            meta: NoiseMeta::new(noise, transform),
        })
    }

    pub fn len(&self) -> usize {
        self.noisy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy.is_empty()
    }

    pub fn width(&self) -> usize {
        self.noisy[0].width()
    }

    pub fn height(&self) -> usize {
        self.noisy[0].height()
    }

    pub fn noise(&self) -> Result<NoiseParams> {
        self.meta.params()
    }

    pub fn transform(&self) -> Result<ColorTransform> {
        self.meta.transform()
    }

    pub fn clean_target(&self) -> Option<&LinearImage> {
        self.clean.get(self.target_index)
    }

    pub fn noisy_target(&self) -> &LinearImage {
        &self.noisy[self.target_index]
    }

    /// Ground-truth geometry as a [`BurstScene`] with display-referred clean
    /// views, for displacement analysis.
    pub fn geometry(&self) -> Result<BurstScene> {
        if self.clean.len() != self.len() || self.depths.len() != self.len() {
            return Err(Error::invalid("burst has no ground truth"));
        }
        let t = self.transform()?;
        let views = self
            .clean
            .iter()
            .zip(&self.intrinsics)
            .zip(&self.poses)
            .map(|((c, &intrinsics), &pose)| scene_sim::PosedView {
                image: noise_model::delinearize(c, &t),
                intrinsics,
                pose,
            })
            .collect();
        BurstScene::new(views, self.depths.clone(), self.target_index, 0)
    }

    /// Reorders frames so that new frame `i` is old frame `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::invalid(format!("{order:?} is not a permutation of {n} frames")));
        }
        let pick = |v: &Vec<LinearImage>| if v.is_empty() { vec![] } else { order.iter().map(|&i| v[i].clone()).collect() };
        Ok(Self {
            noisy: pick(&self.noisy),
            clean: pick(&self.clean),
            depths: if self.depths.is_empty() { vec![] } else { order.iter().map(|&i| self.depths[i].clone()).collect() },
            intrinsics: order.iter().map(|&i| self.intrinsics[i]).collect(),
            poses: order.iter().map(|&i| self.poses[i]).collect(),
            target_index: order.iter().position(|&i| i == self.target_index).expect("permutation"),
            bounds: self.bounds,
            meta: self.meta,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["noisy", "clean", "depth"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        for (i, img) in self.noisy.iter().enumerate() {
            img.write_pfm(dir.join("noisy").join(format!("{i}.pfm")))?;
        }
        for (i, img) in self.clean.iter().enumerate() {
            img.write_pfm(dir.join("clean").join(format!("{i}.pfm")))?;
        }
        for (i, d) in self.depths.iter().enumerate() {
            d.write_pfm(dir.join("depth").join(format!("{i}.pfm")))?;
        }
        let t = self.transform()?;
        noise_model::delinearize(self.noisy_target(), &t).write_png(dir.join("noisy_target.png"))?;
        if let Some(c) = self.clean_target() {
            noise_model::delinearize(c, &t).write_png(dir.join("clean_target.png"))?;
        }
        let file = BurstFile {
            noise: self.meta,
            target_index: self.target_index,
            near: self.bounds.near,
            far: self.bounds.far,
            has_clean: !self.clean.is_empty(),
            has_depth: !self.depths.is_empty(),
            views: self
                .intrinsics
                .iter()
                .zip(&self.poses)
                .map(|(&intrinsics, &pose)| ViewMeta { intrinsics, pose })
                .collect(),
        };
        write_json(&dir.join("burst.json"), &file)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let file: BurstFile = read_json(&dir.join("burst.json"))?;
        let n = file.views.len();
        if n < 2 || file.target_index >= n {
            return Err(Error::format(dir.join("burst.json"), "needs >= 2 views and a valid target index"));
        }
        let noisy = (0..n)
            .map(|i| LinearImage::read_pfm(dir.join("noisy").join(format!("{i}.pfm"))))
            .collect::<Result<Vec<_>>>()?;
        let clean = if file.has_clean {
            (0..n)
                .map(|i| LinearImage::read_pfm(dir.join("clean").join(format!("{i}.pfm"))))
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![]
        };
        let depths = if file.has_depth {
            (0..n)
                .map(|i| DepthMap::read_pfm(dir.join("depth").join(format!("{i}.pfm"))))
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![]
        };
        let (w, h) = (noisy[0].width(), noisy[0].height());
        for (img, v) in noisy.iter().zip(&file.views) {
            if img.width() != w || img.height() != h || v.intrinsics.width != w || v.intrinsics.height != h {
                return Err(Error::format(dir, "frames and intrinsics disagree in size"));
            }
        }
        file.noise.params()?;
        file.noise.transform()?;
        Ok(Self {
            noisy,
            clean,
            depths,
            intrinsics: file.views.iter().map(|v| v.intrinsics).collect(),
            poses: file.views.iter().map(|v| v.pose).collect(),
            target_index: file.target_index,
            bounds: DepthBounds::new(file.near, file.far)?,
            meta: file.noise,
        })
    }
}

pub fn save_scene(scene: &PlanarScene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("scene.json"), scene)?;
    let (img, depth) = scene_sim::render_clean_view(scene, &scene.intrinsics, &CameraPose::identity());
    img.write_png(dir.join("preview.png"))?;
    depth.write_pfm(dir.join("preview_depth.pfm"))
}

pub fn load_scene(dir: &Path) -> Result<PlanarScene> {
    let scene: PlanarScene = read_json(&dir.join("scene.json"))?;
    scene.intrinsics.validate()?;
    if scene.planes.is_empty() {
        return Err(Error::format(dir.join("scene.json"), "scene has no planes"));
    }
    Ok(scene)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })
}
