//! Ray-batch training, evaluation metrics and the ablation harness.

mod ablation;
mod metrics;

use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, ParamStore, Tape, Tensor, Var};
use crate::burst::NoisyBurst;
use crate::error::{Error, Result};
use crate::image::LinearImage;
use crate::model::{self, ForwardOptions, ModelConfig, RayBatchOutput, RayQuery};
use crate::noise_model::{self, ColorTransform};
use crate::rng;
use crate::scene_sim::{self, BurstScene, PlanarScene};

pub use ablation::{
    ablation_variants, default_bilateral, evaluate_burst, run_ablation, write_ablation_csv, write_eval_csv, AblationRow, AblationRun, EvalRow,
    BILATERAL_SIGMA_SPATIAL,
};
pub use metrics::{
    bilateral_filter, depth_mse, eval_displacement_bins, gaussian_blur, psnr, ssim, write_displacement_csv, DisplacementBin,
    DisplacementReport, BIN_WIDTH_PX, PSNR_CAP,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_rays: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub gain_range: (f64, f64),
    pub burst_frames: usize,
    /// Camera translation radius used when bursts are generated from scenes.
    pub motion_scale: f64,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            batch_rays: 512,
            lr_start: 5e-4,
            lr_end: 5e-5,
            gain_range: noise_model::TRAIN_GAIN_RANGE,
            burst_frames: 8,
            motion_scale: 0.3,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_rays == 0 {
            return Err(Error::invalid("batch_rays must be at least 1"));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        let (lo, hi) = self.gain_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::invalid(format!("bad gain range {lo}..{hi}")));
        }
        if self.burst_frames < 2 {
            return Err(Error::invalid("bursts need at least 2 frames"));
        }
        Ok(())
    }

    /// Cosine decay from `lr_start` to `lr_end` over the run.
    pub fn learning_rate(&self, iter: usize) -> f64 {
        let t = if self.iterations <= 1 {
            0.0
        } else {
            (iter as f64 / (self.iterations - 1) as f64).min(1.0)
        };
        self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Where training bursts come from.
#[derive(Clone, Debug)]
pub enum TrainSource {
    /// Fresh camera motion every iteration.
    Scene(PlanarScene),
    /// Fixed clean burst; only the target, noise and colour vary.
    Burst(BurstScene),
}

/// Options outside the learning problem itself.
#[derive(Clone, Debug, Default)]
pub struct TrainIo {
    /// Checkpoint path; also where the last good state goes on divergence.
    pub checkpoint: Option<PathBuf>,
    /// Pause after this iteration count; the schedule still spans `iterations`.
    pub stop_at: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub store: ParamStore,
    /// `(iteration, loss)` for the iterations run in this call.
    pub losses: Vec<(usize, f64)>,
}

/// Sum of the mean absolute errors of the coarse and fine predictions.
pub fn loss_l1(tape: &mut Tape, out: &RayBatchOutput, target: Var) -> Result<Var> {
    let coarse = tape.l1_loss(out.coarse.color, target)?;
    match &out.fine {
        Some(f) => {
            let fine = tape.l1_loss(f.color, target)?;
            tape.add(coarse, fine)
        }
        None => Ok(coarse),
    }
}

/// One training example: a noisy burst with a random target, and ray pixels.
pub fn sample_example(sources: &[TrainSource], cfg: &TrainConfig, iter: usize) -> Result<(NoisyBurst, Vec<RayQuery>, u64)> {
    if sources.is_empty() {
        return Err(Error::invalid("no training scenes"));
    }
    let mut rng = rng::stream(cfg.seed, &[0x7a1, iter as u64]);
    let src = &sources[rng.gen_range(0..sources.len())];
    let mut scene = match src {
        TrainSource::Scene(s) => scene_sim::make_burst(s, cfg.burst_frames, cfg.motion_scale, rng.gen())?,
        TrainSource::Burst(b) => b.clone(),
    };
    scene.target_index = rng.gen_range(0..scene.len());
    let (lo, hi) = cfg.gain_range;
    let gain = (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp();
    let noise = noise_model::gain_to_params(gain)?;
    let transform = ColorTransform::random(&mut rng);
    let burst = NoisyBurst::synthesize(&scene, &noise, &transform, rng.gen())?;
    let (w, h) = (burst.width(), burst.height());
    let rays = (0..cfg.batch_rays)
        .map(|_| RayQuery {
            x: rng.gen_range(0..w),
            y: rng.gen_range(0..h),
        })
        .collect();
    Ok((burst, rays, rng.gen()))
}

/// Builds the full graph from noisy frames to the training loss.
pub fn build_loss(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    burst: &NoisyBurst,
    rays: &[RayQuery],
    opts: &ForwardOptions<'_>,
) -> Result<(Var, RayBatchOutput)> {
    let clean = burst
        .clean_target()
        .ok_or_else(|| Error::invalid("training burst has no clean target"))?;
    let sources = model::source_indices(cfg, burst);
    let images: Vec<&LinearImage> = sources.iter().map(|&i| &burst.noisy[i]).collect();
    let map = model::view_map(tape, store, cfg, &images, &burst.noise()?)?;
    let out = model::forward_rays(tape, store, cfg, burst, map, rays, opts)?;
    let mut t = Vec::with_capacity(rays.len() * 3);
    for q in rays {
        t.extend_from_slice(&clean.pixel(q.x, q.y));
    }
    let target = tape.constant(Tensor::new(vec![rays.len(), 3], t)?);
    let loss = loss_l1(tape, &out, target)?;
    Ok((loss, out))
}

/// Runs `cfg.iterations - store.step` iterations of Adam on random ray batches,
/// starting from `store` (fresh or resumed).
pub fn train(
    sources: &[TrainSource],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut store: ParamStore,
    io: &TrainIo,
    mut on_iter: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let opt = Adam::default();
    let mut losses = Vec::new();
    let start = store.step as usize;
    let end = io.stop_at.map_or(cfg.iterations, |s| s.min(cfg.iterations));
    for iter in start..end {
        let (burst, rays, seed) = sample_example(sources, cfg, iter)?;
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            stratified: true,
            seed,
            ..Default::default()
        };
        let (loss, _) = build_loss(&mut tape, &store, model_cfg, &burst, &rays, &opts)?;
        let value = tape.value(loss).item().expect("scalar loss");
        let grads = tape.backward(loss)?;
        store.zero_grad();
        store.accumulate(&tape, &grads);
        if !value.is_finite() || !store.grads_finite() {
            if let Some(p) = &io.checkpoint {
                model::save_model(p, model_cfg, &store, true)?;
            }
            return Err(Error::Diverged { iteration: iter });
        }
        store.adam_step(&opt, cfg.learning_rate(iter));
        losses.push((iter, value));
        on_iter(iter, value);
        if let Some(p) = &io.checkpoint {
            if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
                model::save_model(p, model_cfg, &store, true)?;
            }
        }
    }
    if let Some(p) = &io.checkpoint {
        model::save_model(p, model_cfg, &store, true)?;
    }
    Ok(TrainOutcome { store, losses })
}

/// Writes `iter,loss` rows, appending when `append` and the file exists.
pub fn write_loss_csv(path: &Path, losses: &[(usize, f64)], append: bool) -> Result<()> {
    use std::io::Write;
    let exists = path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut s = String::new();
    if !(append && exists) {
        s.push_str("iter,loss\n");
    }
    for (i, l) in losses {
        s.push_str(&format!("{i},{l}\n"));
    }
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}
