//! Heteroscedastic Gaussian sensor noise and the pseudo-linear colour space it
//! lives in.
//!
//! A clean linear intensity `I` becomes `N(I, sigma_r^2 + sigma_s^2 * I)`.
//! Camera gain maps to `(sigma_r, sigma_s)` through [`GainCalibration`].

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::LinearImage;
use crate::rng::{self, Rng};

/// Gain range covered during training (log-uniform).
pub const TRAIN_GAIN_RANGE: (f64, f64) = (1.0, 20.0);

/// Range of the random red/blue white-balance gains.
pub const WB_RANGE: (f64, f64) = (1.5, 2.5);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams {
    sigma_r: f64,
    sigma_s: f64,
    gain: f64,
}

impl NoiseParams {
    pub fn new(sigma_r: f64, sigma_s: f64, gain: f64) -> Result<Self> {
        if !(sigma_r >= 0.0 && sigma_r.is_finite()) || !(sigma_s >= 0.0 && sigma_s.is_finite()) {
            return Err(Error::invalid(format!(
                "noise std-devs must be finite and non-negative, got sigma_r={sigma_r}, sigma_s={sigma_s}"
            )));
        }
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::invalid(format!("gain must be positive, got {gain}")));
        }
        Ok(Self {
            sigma_r,
            sigma_s,
            gain,
        })
    }

    /// Noise-free parameters (gain 1 by convention).
    pub fn noiseless() -> Self {
        Self {
            sigma_r: 0.0,
            sigma_s: 0.0,
            gain: 1.0,
        }
    }

    pub fn sigma_r(&self) -> f64 {
        self.sigma_r
    }

    pub fn sigma_s(&self) -> f64 {
        self.sigma_s
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    /// Variance at clean intensity `intensity`; negative intensities count as zero.
    #[inline]
    pub fn variance(&self, intensity: f64) -> f64 {
        self.sigma_r * self.sigma_r + self.sigma_s * self.sigma_s * intensity.max(0.0)
    }

    /// Std-dev at full-scale intensity 1.
    pub fn sigma_max(&self) -> f64 {
        self.variance(1.0).sqrt()
    }
}

/// Linear-in-gain read noise and sqrt-in-gain shot noise.
///
/// `sigma_r = read_scale * g`, `sigma_s = shot_scale * sqrt(g)`. The defaults put
/// the full-scale noise std near 0.4 at gain 20.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainCalibration {
    pub read_scale: f64,
    pub shot_scale: f64,
}

impl Default for GainCalibration {
    fn default() -> Self {
        Self {
            read_scale: 0.01,
            shot_scale: 0.08,
        }
    }
}

impl GainCalibration {
    pub fn params(&self, gain: f64) -> Result<NoiseParams> {
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::invalid(format!("gain must be positive, got {gain}")));
        }
        NoiseParams::new(self.read_scale * gain, self.shot_scale * gain.sqrt(), gain)
    }
}

/// Noise parameters for `gain` under the default calibration.
pub fn gain_to_params(gain: f64) -> Result<NoiseParams> {
    GainCalibration::default().params(gain)
}

/// Draws a training gain log-uniformly from [`TRAIN_GAIN_RANGE`].
pub fn sample_training_gain(rng: &mut Rng) -> f64 {
    let (lo, hi) = TRAIN_GAIN_RANGE;
    (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp()
}

/// Inverse-gamma and inverse-white-balance pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorTransform {
    pub gamma: f64,
    pub wb_gains: [f64; 3],
}

impl Default for ColorTransform {
    fn default() -> Self {
        Self {
            gamma: 2.2,
            wb_gains: [1.0, 1.0, 1.0],
        }
    }
}

impl ColorTransform {
    pub fn new(gamma: f64, wb_gains: [f64; 3]) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
        }
        if wb_gains.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::invalid(format!(
                "white-balance gains must be positive, got {wb_gains:?}"
            )));
        }
        Ok(Self { gamma, wb_gains })
    }

    /// Gamma 2.2 with red/blue gains uniform in [`WB_RANGE`] and green fixed to 1.
    pub fn random(rng: &mut Rng) -> Self {
        let (lo, hi) = WB_RANGE;
        let r = rng.gen_range(lo..hi);
        let b = rng.gen_range(lo..hi);
        Self {
            gamma: 2.2,
            wb_gains: [r, 1.0, b],
        }
    }
}

/// Display-referred image to pseudo-linear sensor space: `in^gamma / wb`.
pub fn linearize(image: &LinearImage, t: &ColorTransform) -> Result<LinearImage> {
    if !image.in_unit_range() {
        return Err(Error::invalid("linearize expects values in [0,1]"));
    }
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        for (v, wb) in px.iter_mut().zip(t.wb_gains) {
            *v = v.powf(t.gamma) / wb;
        }
    }
    Ok(out)
}

/// Inverse of [`linearize`]; negative values are clamped to zero first.
pub fn delinearize(image: &LinearImage, t: &ColorTransform) -> LinearImage {
    let inv_gamma = 1.0 / t.gamma;
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        for (v, wb) in px.iter_mut().zip(t.wb_gains) {
            *v = (v.max(0.0) * wb).powf(inv_gamma);
        }
    }
    out
}

/// Draws one noisy realisation of `clean`. The output is not clamped.
pub fn add_noise(clean: &LinearImage, p: &NoiseParams, seed: u64) -> LinearImage {
    add_noise_with(clean, p, &mut rng::stream(seed, &[]))
}

pub fn add_noise_with(clean: &LinearImage, p: &NoiseParams, rng: &mut Rng) -> LinearImage {
    let mut out = clean.clone();
    if p.sigma_r == 0.0 && p.sigma_s == 0.0 {
        return out;
    }
    for v in out.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += p.variance(*v).sqrt() * z;
    }
    out
}

/// Per-pixel, per-channel noise variance estimated from an observed image.
pub fn variance_map(image: &LinearImage, p: &NoiseParams) -> LinearImage {
    image.map(|v| p.variance(v))
}

/// Noise and colour metadata stored alongside a burst.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseMeta {
    pub gain: f64,
    pub sigma_r: f64,
    pub sigma_s: f64,
    pub wb: [f64; 3],
    pub gamma: f64,
}

impl NoiseMeta {
    pub fn new(p: &NoiseParams, t: &ColorTransform) -> Self {
        Self {
            gain: p.gain,
            sigma_r: p.sigma_r,
            sigma_s: p.sigma_s,
            wb: t.wb_gains,
            gamma: t.gamma,
        }
    }

    pub fn params(&self) -> Result<NoiseParams> {
        NoiseParams::new(self.sigma_r, self.sigma_s, self.gain)
    }

    pub fn transform(&self) -> Result<ColorTransform> {
        ColorTransform::new(self.gamma, self.wb)
    }
}
