//! Synthetic multi-view scenes: textured planes rendered by a one-sample-per-pixel
//! raytracer, with exact depth and ground-truth inter-view displacement.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{self, CameraIntrinsics, CameraPose, Vec3};
use crate::error::{Error, Result};
use crate::geometry::DepthBounds;
use crate::image::{DepthMap, LinearImage};
use crate::rng::{self, Rng};

/// Upper bound on per-frame camera rotation in a burst.
pub const MAX_ROTATION_DEG: f64 = 5.0;
/// Rotation bound grows with the translation scale at this rate until capped.
const ROTATION_DEG_PER_UNIT: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 2],
    pub radius: f64,
    pub color: [f64; 3],
}

/// Procedural, band-limited plane textures. Coordinates are world units in the
/// plane's own frame; output is display-referred RGB in [0,1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    /// Checkerboard with tanh-softened edges.
    Checker {
        period: f64,
        color_a: [f64; 3],
        color_b: [f64; 3],
        sharpness: f64,
    },
    /// Cosine ramp between two colours along `direction`.
    Gradient {
        direction: [f64; 2],
        period: f64,
        color_a: [f64; 3],
        color_b: [f64; 3],
    },
    /// Gaussian blobs alpha-composited over a base colour.
    Blobs { base: [f64; 3], blobs: Vec<Blob> },
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn random_color(rng: &mut Rng) -> [f64; 3] {
    [rng.gen_range(0.15..0.95), rng.gen_range(0.15..0.95), rng.gen_range(0.15..0.95)]
}

impl Texture {
    pub fn eval(&self, s: f64, t: f64) -> [f64; 3] {
        match self {
            Texture::Checker {
                period,
                color_a,
                color_b,
                sharpness,
            } => {
                let k = std::f64::consts::TAU / period;
                let x = (k * s).sin() * (k * t).sin();
                let m = 0.5 + 0.5 * (sharpness * x).tanh();
                lerp3(*color_a, *color_b, m)
            }
            Texture::Gradient {
                direction,
                period,
                color_a,
                color_b,
            } => {
                let p = direction[0] * s + direction[1] * t;
                let m = 0.5 - 0.5 * (std::f64::consts::TAU * p / period).cos();
                lerp3(*color_a, *color_b, m)
            }
            Texture::Blobs { base, blobs } => {
                let mut c = *base;
                for b in blobs {
                    let d2 = (s - b.center[0]).powi(2) + (t - b.center[1]).powi(2);
                    let a = (-d2 / (2.0 * b.radius * b.radius)).exp();
                    c = lerp3(c, b.color, a);
                }
                c
            }
        }
    }

    pub fn random_blobs(rng: &mut Rng, extent: f64, count: usize, radius: (f64, f64)) -> Self {
        let base = random_color(rng);
        let blobs = (0..count)
            .map(|_| Blob {
                center: [rng.gen_range(-extent..extent), rng.gen_range(-extent..extent)],
                radius: rng.gen_range(radius.0..radius.1),
                color: random_color(rng),
            })
            .collect();
        Texture::Blobs { base, blobs }
    }

    pub fn random_checker(rng: &mut Rng, period: (f64, f64)) -> Self {
        Texture::Checker {
            period: rng.gen_range(period.0..period.1),
            color_a: random_color(rng),
            color_b: random_color(rng),
            sharpness: rng.gen_range(2.0..4.0),
        }
    }

    pub fn random_gradient(rng: &mut Rng, period: (f64, f64)) -> Self {
        let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        Texture::Gradient {
            direction: [a.cos(), a.sin()],
            period: rng.gen_range(period.0..period.1),
            color_a: random_color(rng),
            color_b: random_color(rng),
        }
    }
}

/// Textured rectangle lying in the plane `normal . x = normal . center`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub center: Vec3,
    pub normal: Vec3,
    pub axis_u: Vec3,
    pub axis_v: Vec3,
    pub half_u: f64,
    pub half_v: f64,
    pub texture: Texture,
}

impl Plane {
    /// Rectangle with unit `normal`; `up` fixes the in-plane v axis.
    pub fn new(center: Vec3, normal: Vec3, up: Vec3, half_u: f64, half_v: f64, texture: Texture) -> Result<Self> {
        let n = camera::norm(normal);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::invalid("plane normal must be non-zero"));
        }
        let normal = camera::scale(normal, 1.0 / n);
        let u = camera::cross(up, normal);
        if camera::norm(u) < 1e-9 {
            return Err(Error::invalid("up vector parallel to plane normal"));
        }
        let axis_u = camera::normalize(u);
        let axis_v = camera::cross(normal, axis_u);
        Ok(Self {
            center,
            normal,
            axis_u,
            axis_v,
            half_u,
            half_v,
            texture,
        })
    }

    /// Plane facing the base camera at depth `z`.
    pub fn fronto(z: f64, cx: f64, cy: f64, half_u: f64, half_v: f64, texture: Texture) -> Self {
        Self::new([cx, cy, z], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0], half_u, half_v, texture)
            .expect("fronto-parallel plane is well formed")
    }

    /// Ray parameter of the hit, if the ray meets the rectangle in front of its origin.
    #[inline]
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, [f64; 2])> {
        let denom = camera::dot(self.normal, dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = camera::dot(self.normal, camera::sub(self.center, origin)) / denom;
        if t <= 0.0 {
            return None;
        }
        let rel = camera::sub(camera::add(origin, camera::scale(dir, t)), self.center);
        let s = camera::dot(rel, self.axis_u);
        let q = camera::dot(rel, self.axis_v);
        (s.abs() <= self.half_u && q.abs() <= self.half_v).then_some((t, [s, q]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    TwoPlane,
    CheckerStack,
    Random,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-plane" => Ok(Preset::TwoPlane),
            "checker-stack" => Ok(Preset::CheckerStack),
            "random" => Ok(Preset::Random),
            other => Err(Error::invalid(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarScene {
    pub planes: Vec<Plane>,
    pub background: [f64; 3],
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    /// Depth of the point the burst is framed around.
    pub focus_depth: f64,
}

/// Default desk-scale resolution.
pub const DEFAULT_SIZE: usize = 64;
/// Default focal length in pixels for [`DEFAULT_SIZE`].
pub const DEFAULT_FOCAL: f64 = 64.0;

impl PlanarScene {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let intr = CameraIntrinsics::centered(DEFAULT_FOCAL, DEFAULT_SIZE, DEFAULT_SIZE)
            .expect("default intrinsics are valid");
        Self::preset_with(preset, seed, intr)
    }

    pub fn preset_with(preset: Preset, seed: u64, intrinsics: CameraIntrinsics) -> Self {
        let mut rng = rng::stream(seed, &[0x5ce4e]);
        let (planes, focus_depth) = match preset {
            Preset::TwoPlane => {
                let far_z = rng.gen_range(5.5..6.5);
                let near_z = rng.gen_range(2.4..2.8);
                let far = Plane::fronto(far_z, 0.0, 0.0, 6.0, 6.0, Texture::random_blobs(&mut rng, 6.0, 40, (0.3, 0.7)));
                let ox = rng.gen_range(-0.3..0.3);
                let oy = rng.gen_range(-0.3..0.3);
                let near = Plane::fronto(
                    near_z,
                    ox,
                    oy,
                    rng.gen_range(0.5..0.7),
                    rng.gen_range(0.5..0.7),
                    Texture::random_checker(&mut rng, (0.35, 0.5)),
                );
                (vec![near, far], near_z)
            }
            Preset::CheckerStack => {
                let mut planes = Vec::new();
                let depths = [2.5, 3.8, 5.2, 7.0];
                for (i, &z) in depths.iter().enumerate() {
                    let half = if i == depths.len() - 1 { 8.0 } else { rng.gen_range(0.5..0.9) * z / 3.0 };
                    let cx = if i == depths.len() - 1 { 0.0 } else { rng.gen_range(-0.35..0.35) * z };
                    let cy = if i == depths.len() - 1 { 0.0 } else { rng.gen_range(-0.35..0.35) * z };
                    let tex = if i % 2 == 0 {
                        Texture::random_checker(&mut rng, (0.15 * z, 0.2 * z))
                    } else {
                        Texture::random_gradient(&mut rng, (0.2 * z, 0.35 * z))
                    };
                    planes.push(Plane::fronto(z, cx, cy, half, half, tex));
                }
                (planes, 3.8)
            }
            Preset::Random => {
                let n = rng.gen_range(2..=4);
                let mut planes = Vec::new();
                let back_z = rng.gen_range(6.0..8.0);
                planes.push(Plane::fronto(back_z, 0.0, 0.0, 9.0, 9.0, Texture::random_blobs(&mut rng, 9.0, 60, (0.35, 0.9))));
                for _ in 1..n {
                    let z = rng.gen_range(2.2..5.5);
                    let tilt = rng.gen_range(-0.5..0.5f64);
                    let yaw = rng.gen_range(-0.5..0.5f64);
                    let normal = [yaw.sin(), tilt.sin(), -1.0];
                    let tex = match rng.gen_range(0..3) {
                        0 => Texture::random_checker(&mut rng, (0.12 * z, 0.2 * z)),
                        1 => Texture::random_gradient(&mut rng, (0.2 * z, 0.4 * z)),
                        _ => Texture::random_blobs(&mut rng, z / 3.0, 12, (0.04 * z, 0.1 * z)),
                    };
                    let center = [rng.gen_range(-0.3..0.3) * z, rng.gen_range(-0.3..0.3) * z, z];
                    let half = rng.gen_range(0.12..0.3) * z;
                    planes.push(Plane::new(center, normal, [0.0, 1.0, 0.0], half, half, tex).expect("valid plane"));
                }
                (planes, 4.0)
            }
        };
        Self {
            planes,
            background: [0.5, 0.5, 0.5],
            seed,
            intrinsics,
            focus_depth,
        }
    }

    /// Nearest hit along a ray: (ray parameter, colour).
    fn trace(&self, origin: Vec3, dir: Vec3) -> Option<(f64, [f64; 3])> {
        let mut best: Option<(f64, usize, [f64; 2])> = None;
        for (i, p) in self.planes.iter().enumerate() {
            if let Some((t, st)) = p.intersect(origin, dir) {
                if best.is_none_or(|(bt, _, _)| t < bt) {
                    best = Some((t, i, st));
                }
            }
        }
        best.map(|(t, i, st)| (t, self.planes[i].texture.eval(st[0], st[1])))
    }
}

/// Clean render and camera-z depth map of `scene` seen from `(cam, pose)`.
pub fn render_clean_view(scene: &PlanarScene, cam: &CameraIntrinsics, pose: &CameraPose) -> (LinearImage, DepthMap) {
    let (w, h) = (cam.width, cam.height);
    let origin = pose.center();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rgb = vec![0.0; w * 3];
            let mut depth = vec![0.0; w];
            for x in 0..w {
                // Unnormalised direction with camera-z 1, so the ray parameter is depth.
                let dc = cam.unproject(x as f64 + 0.5, y as f64 + 0.5, 1.0);
                let dir = camera::mat_t_vec(pose.rotation(), dc);
                let (color, z) = match scene.trace(origin, dir) {
                    Some((t, c)) => (c, t),
                    None => (scene.background, 0.0),
                };
                rgb[x * 3..x * 3 + 3].copy_from_slice(&color);
                depth[x] = z;
            }
            (rgb, depth)
        })
        .collect();
    let mut img = Vec::with_capacity(w * h * 3);
    let mut dep = Vec::with_capacity(w * h);
    for (r, d) in rows {
        img.extend(r);
        dep.extend(d);
    }
    (
        LinearImage::from_vec(w, h, img).expect("render size"),
        DepthMap::from_vec(w, h, dep).expect("render size"),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosedView {
    pub image: LinearImage,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

/// A burst of clean posed views with ground-truth depth.
#[derive(Clone, Debug, PartialEq)]
pub struct BurstScene {
    pub views: Vec<PosedView>,
    pub depths: Vec<DepthMap>,
    pub target_index: usize,
    pub seed: u64,
    pub bounds: DepthBounds,
}

impl BurstScene {
    pub fn new(views: Vec<PosedView>, depths: Vec<DepthMap>, target_index: usize, seed: u64) -> Result<Self> {
        if views.len() < 2 {
            return Err(Error::invalid("a burst needs at least two views"));
        }
        if target_index >= views.len() {
            return Err(Error::invalid("target index out of range"));
        }
        if depths.len() != views.len() {
            return Err(Error::invalid("one depth map per view required"));
        }
        let (w, h) = (views[0].image.width(), views[0].image.height());
        for (v, d) in views.iter().zip(&depths) {
            if v.image.width() != w || v.image.height() != h || d.width() != w || d.height() != h {
                return Err(Error::invalid("all views must share one resolution"));
            }
            if v.intrinsics.width != w || v.intrinsics.height != h {
                return Err(Error::invalid("intrinsics disagree with image size"));
            }
        }
        let range = depths
            .iter()
            .filter_map(DepthMap::range)
            .reduce(|a, b| (a.0.min(b.0), a.1.max(b.1)))
            .ok_or_else(|| Error::invalid("burst has no surface hits"))?;
        let bounds = DepthBounds::padded(range.0, range.1)?;
        Ok(Self {
            views,
            depths,
            target_index,
            seed,
            bounds,
        })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn width(&self) -> usize {
        self.views[0].image.width()
    }

    pub fn height(&self) -> usize {
        self.views[0].image.height()
    }

    pub fn target(&self) -> &PosedView {
        &self.views[self.target_index]
    }
}

fn random_unit(rng: &mut Rng) -> Vec3 {
    loop {
        let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n = camera::norm(v);
        if n > 1e-3 && n <= 1.0 {
            return camera::scale(v, 1.0 / n);
        }
    }
}

/// Camera poses jittered around the identity base pose: translation within a
/// disc of radius `motion_scale` (plus a fifth of that along z) and a random
/// rotation bounded by [`MAX_ROTATION_DEG`].
pub fn burst_poses(n_frames: usize, motion_scale: f64, seed: u64) -> Vec<CameraPose> {
    let mut rng = rng::stream(seed, &[0xb0b5]);
    let max_rot = (ROTATION_DEG_PER_UNIT * motion_scale).min(MAX_ROTATION_DEG).to_radians();
    (0..n_frames)
        .map(|_| {
            let r = motion_scale * rng.gen::<f64>().sqrt();
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            let z = 0.2 * motion_scale * rng.gen_range(-1.0..1.0);
            let center = [r * a.cos(), r * a.sin(), z];
            let axis = random_unit(&mut rng);
            let angle = max_rot * rng.gen::<f64>();
            let rot = camera::axis_angle(axis, angle);
            CameraPose::from_center(rot, center).expect("rotation from axis-angle is orthonormal")
        })
        .collect()
}

/// Renders an `n_frames` burst of `scene` with a random target frame.
pub fn make_burst(scene: &PlanarScene, n_frames: usize, motion_scale: f64, seed: u64) -> Result<BurstScene> {
    if n_frames < 2 {
        return Err(Error::invalid(format!("a burst needs at least 2 frames, got {n_frames}")));
    }
    if !(motion_scale >= 0.0 && motion_scale.is_finite()) {
        return Err(Error::invalid("motion scale must be non-negative"));
    }
    let poses = burst_poses(n_frames, motion_scale, seed);
    let target_index = rng::stream(seed, &[0x7a6e7]).gen_range(0..n_frames);
    let cam = scene.intrinsics;
    let (views, depths): (Vec<_>, Vec<_>) = poses
        .into_iter()
        .map(|pose| {
            let (image, depth) = render_clean_view(scene, &cam, &pose);
            (
                PosedView {
                    image,
                    intrinsics: cam,
                    pose,
                },
                depth,
            )
        })
        .unzip();
    BurstScene::new(views, depths, target_index, seed)
}

/// Per-pixel displacement from one view into another.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub width: usize,
    pub height: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DisplacementField {
    pub fn magnitude(&self, i: usize) -> f64 {
        self.dx[i].hypot(self.dy[i])
    }

    pub fn max_magnitude(&self) -> f64 {
        (0..self.dx.len())
            .filter(|&i| self.valid[i])
            .map(|i| self.magnitude(i))
            .fold(0.0, f64::max)
    }
}

/// Relative depth disagreement beyond which a reprojected point counts as occluded.
pub const OCCLUSION_TOLERANCE: f64 = 0.01;

/// Ground-truth displacement of every surface pixel of `view_a` when reprojected
/// into `view_b`. Pixels that leave `view_b` or are occluded there are invalid.
pub fn gt_displacement(burst: &BurstScene, view_a: usize, view_b: usize) -> Result<DisplacementField> {
    let n = burst.len();
    if view_a >= n || view_b >= n {
        return Err(Error::invalid(format!("view index out of range for {n}-view burst")));
    }
    let depth_a = burst
        .depths
        .get(view_a)
        .ok_or_else(|| Error::invalid("missing depth map for source view"))?;
    let depth_b = &burst.depths[view_b];
    let (a, b) = (&burst.views[view_a], &burst.views[view_b]);
    let (w, h) = (a.intrinsics.width, a.intrinsics.height);
    if b.intrinsics.width != w || b.intrinsics.height != h {
        return Err(Error::invalid("views differ in resolution"));
    }
    let mut field = DisplacementField {
        width: w,
        height: h,
        dx: vec![0.0; w * h],
        dy: vec![0.0; w * h],
        valid: vec![false; w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let z = depth_a.get(x, y);
            if z <= 0.0 {
                continue;
            }
            let (u0, v0) = (x as f64 + 0.5, y as f64 + 0.5);
            let pw = a.pose.to_world(a.intrinsics.unproject(u0, v0, z));
            let pc = b.pose.to_camera(pw);
            if pc[2] <= 0.0 {
                continue;
            }
            let (u, v) = b.intrinsics.project(pc);
            if !(u >= 0.0 && u < w as f64 && v >= 0.0 && v < h as f64) {
                continue;
            }
            let zb = depth_b.get(u as usize, v as usize);
            if zb <= 0.0 || (pc[2] - zb).abs() > OCCLUSION_TOLERANCE * zb {
                continue;
            }
            let i = y * w + x;
            field.dx[i] = u - u0;
            field.dy[i] = v - v0;
            field.valid[i] = true;
        }
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{bilinear_sample, MapView};

    fn flat_scene(z: f64, texture: Texture) -> PlanarScene {
        PlanarScene {
            planes: vec![Plane::fronto(z, 0.0, 0.0, 50.0, 50.0, texture)],
            background: [0.0; 3],
            seed: 0,
            intrinsics: CameraIntrinsics::centered(40.0, 48, 40).unwrap(),
            focus_depth: z,
        }
    }

    fn smooth() -> Texture {
        Texture::Gradient {
            direction: [0.6, 0.8],
            period: 3.0,
            color_a: [0.2, 0.3, 0.8],
            color_b: [0.9, 0.6, 0.1],
        }
    }

    #[test]
    fn fronto_plane_has_constant_depth() {
        let s = flat_scene(2.0, smooth());
        let (_, d) = render_clean_view(&s, &s.intrinsics, &CameraPose::identity());
        assert!(d.data().iter().all(|&z| (z - 2.0).abs() < 1e-12));
    }

    #[test]
    fn parallel_translation_shifts_image() {
        let s = flat_scene(2.0, Texture::random_blobs(&mut rng::stream(1, &[]), 4.0, 30, (0.1, 0.3)));
        let cam = s.intrinsics;
        let (base, _) = render_clean_view(&s, &cam, &CameraPose::identity());
        // Shift by exactly 5 px: dx = 5 * z / fx.
        let dx = 5.0 * 2.0 / cam.fx;
        let pose = CameraPose::from_center(camera::IDENTITY, [dx, 0.0, 0.0]).unwrap();
        let (moved, _) = render_clean_view(&s, &cam, &pose);
        for y in 0..cam.height {
            for x in 0..cam.width - 5 {
                for c in 0..3 {
                    assert!((moved.get(x, y, c) - base.get(x + 5, y, c)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = PlanarScene::preset(Preset::Random, 3);
        let pose = burst_poses(1, 0.4, 9)[0];
        let a = render_clean_view(&s, &s.intrinsics, &pose);
        let b = render_clean_view(&s, &s.intrinsics, &pose);
        assert_eq!(a, b);
    }

    #[test]
    fn rendering_is_resolution_covariant() {
        let s = flat_scene(3.0, smooth());
        let lo_cam = s.intrinsics;
        let hi_cam = lo_cam.scaled(2);
        let pose = CameraPose::new(camera::axis_angle([0.1, 1.0, 0.0], 0.05), [0.1, 0.0, 0.0]).unwrap();
        let (lo, _) = render_clean_view(&s, &lo_cam, &pose);
        let (hi, _) = render_clean_view(&s, &hi_cam, &pose);
        for y in 0..lo_cam.height {
            for x in 0..lo_cam.width {
                for c in 0..3 {
                    let avg = (hi.get(2 * x, 2 * y, c)
                        + hi.get(2 * x + 1, 2 * y, c)
                        + hi.get(2 * x, 2 * y + 1, c)
                        + hi.get(2 * x + 1, 2 * y + 1, c))
                        / 4.0;
                    assert!((avg - lo.get(x, y, c)).abs() < 2.0 / 255.0);
                }
            }
        }
    }

    #[test]
    fn zero_motion_burst_repeats_target() {
        let s = PlanarScene::preset(Preset::TwoPlane, 1);
        let b = make_burst(&s, 4, 0.0, 5).unwrap();
        for v in &b.views {
            assert_eq!(v.image, b.target().image);
            assert_eq!(v.pose, CameraPose::identity());
        }
        for i in 0..4 {
            let d = gt_displacement(&b, b.target_index, i).unwrap();
            assert!(d.dx.iter().chain(&d.dy).all(|&v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn burst_pose_set_is_seeded_and_bounded() {
        let a = burst_poses(8, 0.5, 17);
        assert_eq!(a, burst_poses(8, 0.5, 17));
        assert_ne!(a, burst_poses(8, 0.5, 18));
        for p in &a {
            assert!(camera::rotation_angle(p.rotation()).to_degrees() <= MAX_ROTATION_DEG + 1e-9);
            let c = p.center();
            assert!(c[0].hypot(c[1]) <= 0.5 + 1e-12);
        }
        assert!(make_burst(&PlanarScene::preset(Preset::TwoPlane, 0), 1, 0.1, 0).is_err());
    }

    #[test]
    fn displacement_of_translated_fronto_plane() {
        let s = flat_scene(2.0, smooth());
        let cam = s.intrinsics;
        let t = 0.1;
        let poses = [CameraPose::identity(), CameraPose::from_center(camera::IDENTITY, [t, 0.0, 0.0]).unwrap()];
        let (views, depths): (Vec<_>, Vec<_>) = poses
            .iter()
            .map(|p| {
                let (image, d) = render_clean_view(&s, &cam, p);
                (
                    PosedView {
                        image,
                        intrinsics: cam,
                        pose: *p,
                    },
                    d,
                )
            })
            .unzip();
        let burst = BurstScene::new(views, depths, 0, 0).unwrap();
        let f = gt_displacement(&burst, 0, 1).unwrap();
        // Camera moves +x, so scene points move -x by fx * t / z.
        let want = -cam.fx * t / 2.0;
        let mut n = 0;
        for i in 0..f.dx.len() {
            if f.valid[i] {
                n += 1;
                assert!((f.dx[i] - want).abs() < 1e-9 && f.dy[i].abs() < 1e-9);
            }
        }
        assert!(n > f.dx.len() / 2);
    }

    #[test]
    fn occluded_points_are_invalid() {
        // Near plane covers the right half of the image; moving the camera to the
        // right hides far-plane pixels just left of its edge.
        let far = Plane::fronto(6.0, 0.0, 0.0, 20.0, 20.0, smooth());
        let near = Plane::fronto(2.0, 1.0, 0.0, 1.0, 5.0, smooth());
        let s = PlanarScene {
            planes: vec![far, near],
            background: [0.0; 3],
            seed: 0,
            intrinsics: CameraIntrinsics::centered(40.0, 48, 40).unwrap(),
            focus_depth: 2.0,
        };
        let cam = s.intrinsics;
        let poses = [CameraPose::identity(), CameraPose::from_center(camera::IDENTITY, [0.3, 0.0, 0.0]).unwrap()];
        let (views, depths): (Vec<_>, Vec<_>) = poses
            .iter()
            .map(|p| {
                let (image, d) = render_clean_view(&s, &cam, p);
                (PosedView { image, intrinsics: cam, pose: *p }, d)
            })
            .unzip();
        let burst = BurstScene::new(views, depths, 0, 0).unwrap();
        let f = gt_displacement(&burst, 0, 1).unwrap();
        // Pixel just left of the near plane's edge (x = cx, row centre) is far plane.
        let y = 20;
        let x = (cam.cx - 2.0) as usize;
        assert!((burst.depths[0].get(x, y) - 6.0).abs() < 1e-9);
        assert!(!f.valid[y * cam.width + x]);
        // A far pixel well to the left stays visible.
        assert!(f.valid[y * cam.width + 2]);
    }

    #[test]
    fn reprojection_reproduces_colours() {
        let s = PlanarScene::preset_with(
            Preset::TwoPlane,
            4,
            CameraIntrinsics::centered(DEFAULT_FOCAL, DEFAULT_SIZE, DEFAULT_SIZE).unwrap(),
        );
        // Replace textures with smooth ones for the interpolation tolerance.
        let mut s = s;
        for p in &mut s.planes {
            p.texture = Texture::Gradient {
                direction: [0.8, 0.6],
                period: 4.0,
                color_a: [0.2, 0.4, 0.6],
                color_b: [0.8, 0.5, 0.3],
            };
        }
        let b = make_burst(&s, 3, 0.4, 2).unwrap();
        let (ia, ib) = (0, 1);
        let f = gt_displacement(&b, ia, ib).unwrap();
        let map = MapView::of(&b.views[ib].image);
        let w = b.width();
        let mut checked = 0;
        for y in 0..b.height() {
            for x in 0..w {
                let i = y * w + x;
                if !f.valid[i] {
                    continue;
                }
                let (u, v) = (x as f64 + 0.5 + f.dx[i], y as f64 + 0.5 + f.dy[i]);
                let Ok(got) = bilinear_sample(&map, u, v) else { continue };
                // Skip pixels whose bilinear footprint straddles a depth edge.
                let zb = &b.depths[ib];
                let (x0, y0) = ((u - 0.5).floor() as usize, (v - 0.5).floor() as usize);
                let zs = [
                    zb.get(x0, y0),
                    zb.get((x0 + 1).min(w - 1), y0),
                    zb.get(x0, (y0 + 1).min(b.height() - 1)),
                    zb.get((x0 + 1).min(w - 1), (y0 + 1).min(b.height() - 1)),
                ];
                let lo = zs.iter().cloned().fold(f64::MAX, f64::min);
                let hi = zs.iter().cloned().fold(0.0, f64::max);
                if lo <= 0.0 || hi / lo > 1.05 {
                    continue;
                }
                let want = b.views[ia].image.pixel(x, y);
                for c in 0..3 {
                    assert!((got[c] - want[c]).abs() < 2.0 / 255.0, "pixel ({x},{y}) ch {c}");
                }
                checked += 1;
            }
        }
        assert!(checked > w * b.height() / 2);
    }

    #[test]
    fn depths_positive_at_hits() {
        for preset in [Preset::TwoPlane, Preset::CheckerStack, Preset::Random] {
            let s = PlanarScene::preset(preset, 11);
            let b = make_burst(&s, 3, 0.3, 1).unwrap();
            for d in &b.depths {
                assert!(d.data().iter().all(|z| z.is_finite() && *z >= 0.0));
                assert!(d.range().is_some());
            }
            assert!(b.bounds.near > 0.0 && b.bounds.far > b.bounds.near);
        }
    }

    #[test]
    fn preset_names_parse() {
        assert_eq!("two-plane".parse::<Preset>().unwrap(), Preset::TwoPlane);
        assert!("cube".parse::<Preset>().is_err());
    }
}
