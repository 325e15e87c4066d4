//! Image quality metrics, the bilateral post-filter and displacement analysis.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{DepthMap, LinearImage};
use crate::scene_sim::{self, BurstScene};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Width of a displacement histogram bin, in pixels.
pub const BIN_WIDTH_PX: f64 = 10.0;

fn check_same(a: &LinearImage, b: &LinearImage) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::invalid(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` for images with unit dynamic range, capped at [`PSNR_CAP`].
pub fn psnr(pred: &LinearImage, reference: &LinearImage) -> Result<f64> {
    check_same(pred, reference)?;
    let n = pred.data().len() as f64;
    let mse = pred.data().iter().zip(reference.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_1d(radius: usize, sigma: f64) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over
/// every window position fully inside the image and over channels.
pub fn ssim(pred: &LinearImage, reference: &LinearImage) -> Result<f64> {
    check_same(pred, reference)?;
    let (w, h) = (pred.width(), pred.height());
    let size = 2 * SSIM_RADIUS + 1;
    if w < size || h < size {
        return Err(Error::invalid(format!("SSIM needs at least {size}x{size} pixels")));
    }
    let k = gaussian_1d(SSIM_RADIUS, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let (ow, oh) = (w - size + 1, h - size + 1);
    let mut total = 0.0;
    for c in 0..3 {
        // Separable weighted sums of x, y, x², y², xy over each valid window.
        let fields: [Box<dyn Fn(usize, usize) -> f64>; 5] = [
            Box::new(|x, y| pred.get(x, y, c)),
            Box::new(|x, y| reference.get(x, y, c)),
            Box::new(|x, y| pred.get(x, y, c).powi(2)),
            Box::new(|x, y| reference.get(x, y, c).powi(2)),
            Box::new(|x, y| pred.get(x, y, c) * reference.get(x, y, c)),
        ];
        let mut sums = Vec::with_capacity(5);
        for f in &fields {
            let mut rows = vec![0.0; ow * h];
            for y in 0..h {
                for x in 0..ow {
                    rows[y * ow + x] = (0..size).map(|i| k[i] * f(x + i, y)).sum();
                }
            }
            let mut out = vec![0.0; ow * oh];
            for y in 0..oh {
                for x in 0..ow {
                    out[y * ow + x] = (0..size).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
                }
            }
            sums.push(out);
        }
        for i in 0..ow * oh {
            let (mx, my) = (sums[0][i], sums[1][i]);
            let vx = sums[2][i] - mx * mx;
            let vy = sums[3][i] - my * my;
            let cxy = sums[4][i] - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (3 * ow * oh) as f64)
}

/// Edge-clamped bilateral filter with a joint RGB range kernel and window
/// radius `ceil(3 sigma_spatial)`. `sigma_spatial <= 0` returns the input.
pub fn bilateral_filter(image: &LinearImage, sigma_spatial: f64, sigma_range: f64) -> Result<LinearImage> {
    if sigma_spatial.is_nan() || sigma_range.is_nan() || sigma_range <= 0.0 {
        return Err(Error::invalid(format!(
            "bilateral sigmas must be positive, got {sigma_spatial} / {sigma_range}"
        )));
    }
    if sigma_spatial <= 0.0 {
        return Ok(image.clone());
    }
    let r = (3.0 * sigma_spatial).ceil() as i64;
    let (w, h) = (image.width() as i64, image.height() as i64);
    let inv_s = 1.0 / (2.0 * sigma_spatial * sigma_spatial);
    let inv_r = if sigma_range.is_infinite() { 0.0 } else { 1.0 / (2.0 * sigma_range * sigma_range) };
    let mut out = LinearImage::new(image.width(), image.height());
    for y in 0..h {
        for x in 0..w {
            let p = image.pixel(x as usize, y as usize);
            let mut acc = [0.0; 3];
            let mut norm = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let qx = (x + dx).clamp(0, w - 1) as usize;
                    let qy = (y + dy).clamp(0, h - 1) as usize;
                    let q = image.pixel(qx, qy);
                    let d2: f64 = (0..3).map(|c| (q[c] - p[c]).powi(2)).sum();
                    let wgt = (-((dx * dx + dy * dy) as f64) * inv_s - d2 * inv_r).exp();
                    norm += wgt;
                    // Offsets from the centre keep flat regions exactly flat.
                    for c in 0..3 {
                        acc[c] += wgt * (q[c] - p[c]);
                    }
                }
            }
            out.set_pixel(x as usize, y as usize, [p[0] + acc[0] / norm, p[1] + acc[1] / norm, p[2] + acc[2] / norm]);
        }
    }
    Ok(out)
}

/// Edge-clamped Gaussian blur with the same window as [`bilateral_filter`].
pub fn gaussian_blur(image: &LinearImage, sigma: f64) -> Result<LinearImage> {
    bilateral_filter(image, sigma, f64::INFINITY)
}

/// Mean squared depth error over pixels with ground-truth depth.
pub fn depth_mse(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::invalid("depth maps differ in size"));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, g) in pred.data().iter().zip(gt.data()) {
        if *g > 0.0 {
            sum += (p - g).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("ground-truth depth map is empty"));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// NaN for empty bins.
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementReport {
    /// Per target pixel, mean displacement to the other frames (NaN where
    /// the pixel is not visible in any other frame).
    pub displacement: Vec<f64>,
    pub bins: Vec<DisplacementBin>,
}

impl DisplacementReport {
    /// True when counts never increase after the most populated bin.
    pub fn tail_non_increasing(&self) -> bool {
        let Some(mode) = (0..self.bins.len()).max_by_key(|&i| (self.bins[i].count, std::cmp::Reverse(i))) else {
            return true;
        };
        self.bins[mode..].windows(2).all(|w| w[1].count <= w[0].count)
    }
}

/// Bins target pixels by their mean ground-truth displacement to the other
/// frames (10 px bins) and reports the reconstruction MSE per bin.
pub fn eval_displacement_bins(pred: &LinearImage, reference: &LinearImage, burst: &BurstScene) -> Result<DisplacementReport> {
    check_same(pred, reference)?;
    if pred.width() != burst.width() || pred.height() != burst.height() {
        return Err(Error::invalid("prediction and burst differ in size"));
    }
    let t = burst.target_index;
    let n_px = pred.width() * pred.height();
    let mut sum = vec![0.0; n_px];
    let mut cnt = vec![0usize; n_px];
    for other in (0..burst.len()).filter(|&o| o != t) {
        let f = scene_sim::gt_displacement(burst, t, other)?;
        for i in 0..n_px {
            if f.valid[i] {
                sum[i] += f.magnitude(i);
                cnt[i] += 1;
            }
        }
    }
    let displacement: Vec<f64> = sum.iter().zip(&cnt).map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN }).collect();
    let max_bin = displacement
        .iter()
        .filter(|d| d.is_finite())
        .map(|d| (d / BIN_WIDTH_PX).floor() as usize)
        .max()
        .ok_or_else(|| Error::invalid("no target pixel is visible in another frame"))?;
    let mut counts = vec![0usize; max_bin + 1];
    let mut sq = vec![0.0; max_bin + 1];
    let (p, r) = (pred.data(), reference.data());
    for (i, d) in displacement.iter().enumerate() {
        if !d.is_finite() {
            continue;
        }
        let b = (d / BIN_WIDTH_PX).floor() as usize;
        counts[b] += 1;
        sq[b] += (0..3).map(|c| (p[i * 3 + c] - r[i * 3 + c]).powi(2)).sum::<f64>() / 3.0;
    }
    let bins = (0..=max_bin)
        .map(|b| DisplacementBin {
            lo: b as f64 * BIN_WIDTH_PX,
            hi: (b + 1) as f64 * BIN_WIDTH_PX,
            count: counts[b],
            mse: if counts[b] > 0 { sq[b] / counts[b] as f64 } else { f64::NAN },
        })
        .collect();
    Ok(DisplacementReport { displacement, bins })
}

/// `bin_lo,bin_hi,count,mse` rows.
pub fn write_displacement_csv(path: &Path, bins: &[DisplacementBin]) -> Result<()> {
    let mut s = String::from("bin_lo,bin_hi,count,mse\n");
    for b in bins {
        s.push_str(&format!("{},{},{},{}\n", b.lo, b.hi, b.count, b.mse));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
