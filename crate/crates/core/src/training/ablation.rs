//! Evaluation of trained models and the five-variant ablation.

use std::path::Path;
use std::time::Instant;

use crate::autodiff::ParamStore;
use crate::burst::NoisyBurst;
use crate::error::{Error, Result};
use crate::image::LinearImage;
use crate::model::{self, ModelConfig, RenderOptions};
use crate::noise_model;

use super::metrics::{bilateral_filter, depth_mse, psnr, ssim};
use super::{train, TrainConfig, TrainIo, TrainSource};

/// Spatial sigma of the inference-time bilateral filter, in pixels.
pub const BILATERAL_SIGMA_SPATIAL: f64 = 1.5;

/// Quality of one denoised burst, measured after delinearization and clamping.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub gain: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// NaN when the burst has no ground-truth depth.
    pub depth_mse: f64,
    /// The noisy target frame against the clean one.
    pub psnr_noisy: f64,
    /// Plain per-pixel average of all frames, without alignment.
    pub psnr_average: f64,
    /// Denoised output in display space.
    pub output: LinearImage,
}

fn display(img: &LinearImage, burst: &NoisyBurst) -> Result<LinearImage> {
    Ok(noise_model::delinearize(img, &burst.transform()?).clamp01())
}

/// Bilateral filter with the default sigmas for `burst`'s noise level.
pub fn default_bilateral(img: &LinearImage, burst: &NoisyBurst) -> Result<LinearImage> {
    bilateral_filter(img, BILATERAL_SIGMA_SPATIAL, 2.0 * burst.noise()?.sigma_max())
}

/// Renders the target view and scores it against the clean target.
pub fn evaluate_burst(store: &ParamStore, cfg: &ModelConfig, burst: &NoisyBurst, bilateral: bool) -> Result<EvalRow> {
    let clean = burst
        .clean_target()
        .ok_or_else(|| Error::invalid("evaluation burst has no clean target"))?;
    let out = model::render_image(store, cfg, burst, &RenderOptions::default())?;
    let mut pred = out.image;
    if bilateral {
        pred = default_bilateral(&pred, burst)?;
    }
    let reference = display(clean, burst)?;
    let output = display(&pred, burst)?;
    let depth = match burst.depths.get(burst.target_index) {
        Some(gt) => depth_mse(&out.depth, gt)?,
        None => f64::NAN,
    };
    let avg = LinearImage::average(&burst.noisy)?;
    Ok(EvalRow {
        gain: burst.meta.gain,
        psnr: psnr(&output, &reference)?,
        ssim: ssim(&output, &reference)?,
        depth_mse: depth,
        psnr_noisy: psnr(&display(burst.noisy_target(), burst)?, &reference)?,
        psnr_average: psnr(&display(&avg, burst)?, &reference)?,
        output,
    })
}

/// Baseline, then pre-filtering, view attention, blending kernels and noise
/// features switched on one at a time, in that order.
pub fn ablation_variants(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let mut cfg = ModelConfig {
        prenet: false,
        transformer: false,
        kernel_blend: false,
        noise_feat: false,
        ..*base
    };
    let mut out = vec![("baseline".to_string(), cfg)];
    cfg.prenet = true;
    out.push(("+I".to_string(), cfg));
    cfg.transformer = true;
    out.push(("+I,II".to_string(), cfg));
    cfg.kernel_blend = true;
    out.push(("+I,II,III".to_string(), cfg));
    cfg.noise_feat = true;
    out.push(("full".to_string(), cfg));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub psnr: f64,
    pub ssim: f64,
    pub depth_mse: f64,
}

/// One trained ablation variant.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub row: AblationRow,
    pub config: ModelConfig,
    pub store: ParamStore,
    pub train_seconds: f64,
}

/// Trains every variant from the same seed and averages its scores over the
/// test bursts.
pub fn run_ablation(
    sources: &[TrainSource],
    tests: &[NoisyBurst],
    base: &ModelConfig,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&str, usize, f64),
) -> Result<Vec<AblationRun>> {
    if tests.is_empty() {
        return Err(Error::invalid("no test bursts"));
    }
    let mut runs = Vec::new();
    for (name, mcfg) in ablation_variants(base) {
        let start = Instant::now();
        let store = model::init_params(&mcfg, cfg.seed)?;
        let trained = train(sources, &mcfg, cfg, store, &TrainIo::default(), |i, l| progress(&name, i, l))?;
        let train_seconds = start.elapsed().as_secs_f64();
        let (mut p, mut s, mut d) = (0.0, 0.0, 0.0);
        for b in tests {
            let r = evaluate_burst(&trained.store, &mcfg, b, false)?;
            p += r.psnr;
            s += r.ssim;
            d += r.depth_mse;
        }
        let n = tests.len() as f64;
        runs.push(AblationRun {
            row: AblationRow {
                variant: name,
                psnr: p / n,
                ssim: s / n,
                depth_mse: d / n,
            },
            config: mcfg,
            store: trained.store,
            train_seconds,
        });
    }
    Ok(runs)
}

/// `variant,psnr,ssim,depth_mse` rows.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut s = String::from("variant,psnr,ssim,depth_mse\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.variant, r.psnr, r.ssim, r.depth_mse));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// `gain,psnr,ssim,depth_mse` rows.
pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut s = String::from("gain,psnr,ssim,depth_mse\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.gain, r.psnr, r.ssim, r.depth_mse));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
