//! Target-pixel rays, inverse-depth sampling, coarse-to-fine resampling and
//! projection into source views.

use rand::Rng as _;

use crate::camera::{self, CameraIntrinsics, CameraPose, Vec3};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Additive floor on coarse weights before building the resampling PDF.
pub const RESAMPLE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction in world space.
    pub direction: Vec3,
    /// Distances along `direction`.
    pub near: f64,
    pub far: f64,
    /// Cosine between `direction` and the camera's optical axis; converts a
    /// distance along the ray to camera-frame depth.
    pub axis_cos: f64,
}

impl Ray {
    pub fn point_at(&self, t: f64) -> Vec3 {
        camera::add(self.origin, camera::scale(self.direction, t))
    }

    pub fn z_depth(&self, t: f64) -> f64 {
        t * self.axis_cos
    }
}

/// Camera-frame depth range a ray is sampled over.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DepthBounds {
    pub near: f64,
    pub far: f64,
}

impl DepthBounds {
    pub fn new(near: f64, far: f64) -> Result<Self> {
        if !(near > 0.0 && far > near && far.is_finite()) {
            return Err(Error::invalid(format!("need 0 < near < far, got {near}, {far}")));
        }
        Ok(Self { near, far })
    }

    /// `[0.9 * min, 1.1 * max]` of an observed depth range.
    pub fn padded(min_depth: f64, max_depth: f64) -> Result<Self> {
        Self::new(0.9 * min_depth, 1.1 * max_depth)
    }
}

/// Ray through the centre of pixel `(px, py)`, i.e. continuous coordinate
/// `(px + 0.5, py + 0.5)`.
pub fn pixel_ray(
    cam: &CameraIntrinsics,
    pose: &CameraPose,
    px: f64,
    py: f64,
    bounds: DepthBounds,
) -> Result<Ray> {
    if !(px >= 0.0 && px <= (cam.width - 1) as f64 && py >= 0.0 && py <= (cam.height - 1) as f64) {
        return Err(Error::invalid(format!(
            "pixel ({px}, {py}) outside {}x{} image",
            cam.width, cam.height
        )));
    }
    let dc = cam.unproject(px + 0.5, py + 0.5, 1.0);
    let len = camera::norm(dc);
    let axis_cos = 1.0 / len;
    let direction = camera::normalize(camera::mat_t_vec(pose.rotation(), dc));
    Ok(Ray {
        origin: pose.center(),
        direction,
        near: bounds.near / axis_cos,
        far: bounds.far / axis_cos,
        axis_cos,
    })
}

/// `m` depths uniform in disparity between `1/far` and `1/near`, returned in
/// increasing depth order. Deterministic mode takes bin centres; stratified mode
/// jitters uniformly inside each bin.
pub fn sample_inverse_depth(ray: &Ray, m: usize, stratified: bool, rng: &mut Rng) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::invalid(format!("need at least 2 samples per ray, got {m}")));
    }
    let lo = 1.0 / ray.far;
    let hi = 1.0 / ray.near;
    let step = (hi - lo) / m as f64;
    // Bin 0 is the highest disparity (nearest depth) so the output is already ascending.
    let depths = (0..m)
        .map(|i| {
            let offset = if stratified { rng.gen::<f64>() } else { 0.5 };
            1.0 / (hi - (i as f64 + offset) * step)
        })
        .collect();
    Ok(depths)
}

/// Disparity bin edges implied by a sorted depth list: midpoints between
/// neighbours, outer edges mirrored by half a gap. Returned ascending in disparity.
fn disparity_edges(depths: &[f64]) -> Vec<f64> {
    let disp: Vec<f64> = depths.iter().rev().map(|d| 1.0 / d).collect();
    let m = disp.len();
    let mut edges = Vec::with_capacity(m + 1);
    edges.push(disp[0] - 0.5 * (disp[1] - disp[0]));
    for w in disp.windows(2) {
        edges.push(0.5 * (w[0] + w[1]));
    }
    edges.push(disp[m - 1] + 0.5 * (disp[m - 1] - disp[m - 2]));
    edges
}

/// Draws `m_fine` new depths by inverse-CDF sampling of the piecewise-constant
/// disparity PDF proportional to `weights + RESAMPLE_EPS`. Only the new samples
/// are returned, sorted ascending.
pub fn resample_fine(coarse_depths: &[f64], coarse_weights: &[f64], m_fine: usize, rng: &mut Rng) -> Vec<f64> {
    let m = coarse_depths.len();
    assert_eq!(m, coarse_weights.len(), "depth/weight length mismatch");
    assert!(m >= 2, "need at least two coarse samples");
    let edges = disparity_edges(coarse_depths);
    // Weights follow depth order; bins follow disparity order.
    let w: Vec<f64> = coarse_weights
        .iter()
        .rev()
        .map(|&w| if w.is_finite() { w.max(0.0) } else { 0.0 })
        .collect();
    let total: f64 = w.iter().sum();
    let pdf: Vec<f64> = if total > 0.0 {
        let z = total + RESAMPLE_EPS * m as f64;
        w.iter().map(|v| (v + RESAMPLE_EPS) / z).collect()
    } else {
        vec![1.0 / m as f64; m]
    };
    let mut cdf = Vec::with_capacity(m + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for p in &pdf {
        acc += p;
        cdf.push(acc);
    }
    let mut out: Vec<f64> = (0..m_fine)
        .map(|_| {
            let u = rng.gen::<f64>() * acc;
            let j = match cdf[1..].iter().position(|&c| u < c) {
                Some(j) => j,
                None => m - 1,
            };
            let t = ((u - cdf[j]) / pdf[j]).clamp(0.0, 1.0);
            let disp = edges[j] + t * (edges[j + 1] - edges[j]);
            1.0 / disp
        })
        .collect();
    out.sort_by(|a, b| a.total_cmp(b));
    out
}

/// Fine depths merged with the coarse ones, sorted ascending.
pub fn hierarchical_resample(
    coarse_depths: &[f64],
    coarse_weights: &[f64],
    m_fine: usize,
    rng: &mut Rng,
) -> Vec<f64> {
    let mut all = resample_fine(coarse_depths, coarse_weights, m_fine, rng);
    all.extend_from_slice(coarse_depths);
    all.sort_by(|a, b| a.total_cmp(b));
    all
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Camera-frame depth.
    pub depth: f64,
    pub valid: bool,
}

/// Slack on the lattice bounds in pixels. Border pixels of the reference view
/// project exactly onto the bound, and roundoff must not decide their validity.
pub const LATTICE_TOL: f64 = 1e-7;

/// Pinhole projection. Valid iff in front of the camera and inside the pixel
/// centre lattice `[0.5 + inset, size - 0.5 - inset]`, up to [`LATTICE_TOL`].
pub fn project_point(point: Vec3, cam: &CameraIntrinsics, pose: &CameraPose, inset: f64) -> Projection {
    let pc = pose.to_camera(point);
    let depth = pc[2];
    if depth <= 0.0 {
        return Projection {
            u: f64::NAN,
            v: f64::NAN,
            depth,
            valid: false,
        };
    }
    let (u, v) = cam.project(pc);
    let lo = 0.5 + inset - LATTICE_TOL;
    let valid = u >= lo && u <= cam.width as f64 - lo && v >= lo && v <= cam.height as f64 - lo;
    Projection { u, v, depth, valid }
}

/// Read-only view of an interleaved H×W×C float map.
#[derive(Clone, Copy, Debug)]
pub struct MapView<'a> {
    pub data: &'a [f64],
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl<'a> MapView<'a> {
    pub fn new(data: &'a [f64], width: usize, height: usize, channels: usize) -> Self {
        assert_eq!(data.len(), width * height * channels, "map size mismatch");
        Self {
            data,
            width,
            height,
            channels,
        }
    }

    pub fn of(img: &'a crate::image::LinearImage) -> Self {
        Self::new(img.data(), img.width(), img.height(), 3)
    }
}

/// Four bilinear taps `(flat pixel index, weight)` at continuous coordinate
/// `(u, v)`. Coordinates are clamped to the pixel-centre lattice, which amounts
/// to edge replication outside it.
#[inline]
pub fn bilinear_taps(u: f64, v: f64, width: usize, height: usize) -> [(usize, f64); 4] {
    let x = (u - 0.5).clamp(0.0, (width - 1) as f64);
    let y = (v - 0.5).clamp(0.0, (height - 1) as f64);
    let x0 = (x.floor() as usize).min(width - 1);
    let y0 = (y.floor() as usize).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    [
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ]
}

/// Bilinear interpolation with edge replication; never fails.
pub fn bilinear_sample_clamped(map: &MapView<'_>, u: f64, v: f64, out: &mut [f64]) {
    let c = map.channels;
    out[..c].iter_mut().for_each(|o| *o = 0.0);
    for (idx, w) in bilinear_taps(u, v, map.width, map.height) {
        if w == 0.0 {
            continue;
        }
        let px = &map.data[idx * c..(idx + 1) * c];
        for (o, p) in out.iter_mut().zip(px) {
            *o += w * p;
        }
    }
}

/// Bilinear interpolation at continuous pixel coordinate `(u, v)`, which must
/// lie on the pixel-centre lattice `[0.5, size - 0.5]`.
pub fn bilinear_sample(map: &MapView<'_>, u: f64, v: f64) -> Result<Vec<f64>> {
    if !(u >= 0.5 && u <= map.width as f64 - 0.5 && v >= 0.5 && v <= map.height as f64 - 0.5) {
        return Err(Error::invalid(format!(
            "sample point ({u}, {v}) outside {}x{} map",
            map.width, map.height
        )));
    }
    let mut out = vec![0.0; map.channels];
    bilinear_sample_clamped(map, u, v, &mut out);
    Ok(out)
}
