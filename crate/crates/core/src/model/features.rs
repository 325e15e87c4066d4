//! Pre-Net filtering and the convolutional feature encoder.

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::LinearImage;
use crate::noise_model::{self, NoiseParams};

use super::ModelConfig;

/// Normalized 3×3 Gaussian taps, row-major.
pub fn gaussian_stencil(sigma: f64) -> [f64; 9] {
    let mut g = [0.0; 9];
    for (i, v) in g.iter_mut().enumerate() {
        let (dy, dx) = ((i / 3) as f64 - 1.0, (i % 3) as f64 - 1.0);
        *v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Stacks images as `[B, 3, H + 2·pad, W + 2·pad]`, replicating edge pixels into the border.
fn to_chw(images: &[&LinearImage], pad: usize) -> Tensor {
    let (w, h) = (images[0].width(), images[0].height());
    let (pw, ph) = (w + 2 * pad, h + 2 * pad);
    let mut data = vec![0.0; images.len() * 3 * ph * pw];
    for (b, img) in images.iter().enumerate() {
        let src = img.data();
        for c in 0..3 {
            for y in 0..ph {
                let sy = y.saturating_sub(pad).min(h - 1);
                for x in 0..pw {
                    let sx = x.saturating_sub(pad).min(w - 1);
                    data[((b * 3 + c) * ph + y) * pw + x] = src[(sy * w + sx) * 3 + c];
                }
            }
        }
    }
    Tensor::new(vec![images.len(), 3, ph, pw], data).expect("sized")
}

fn conv(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    let y = tape.conv2d(x, w, stride, pad)?;
    let c = tape.shape(b)[0];
    let b = tape.reshape(b, &[1, c, 1, 1])?;
    tape.add(y, b)
}

/// Pre-Net output `[B, 3, H, W]` (or the input itself when disabled).
pub(crate) fn prenet(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, images: &[&LinearImage]) -> Result<Var> {
    if cfg.prenet {
        let x = tape.constant(to_chw(images, 1));
        conv(tape, store, "prenet", x, 1, 0)
    } else {
        Ok(tape.constant(to_chw(images, 0)))
    }
}

/// Feature encoder over `[B, 3, H, W]`, returning `[B, F, H, W]`.
pub(crate) fn encoder(tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (h, w) = (s[2], s[3]);
    let y = conv(tape, store, "enc.0", x, 1, 1)?;
    let y = tape.elu(y)?;
    let y = conv(tape, store, "enc.1", y, 2, 1)?;
    let y = tape.elu(y)?;
    let y = conv(tape, store, "enc.2", y, 1, 1)?;
    let y = tape.elu(y)?;
    let mut y = tape.upsample2x(y)?;
    // Odd sizes come back one larger after the stride-2 round trip.
    if tape.shape(y)[2] != h {
        y = tape.slice(y, 2, 0, h)?;
    }
    if tape.shape(y)[3] != w {
        y = tape.slice(y, 3, 0, w)?;
    }
    conv(tape, store, "enc.3", y, 1, 1)
}

/// Builds the per-view lookup map `[B, H, W, D0]`: encoder features,
/// filtered RGB and (optionally) the per-pixel noise variance of the raw frame.
pub fn view_map(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    images: &[&LinearImage],
    noise: &NoiseParams,
) -> Result<Var> {
    if images.is_empty() {
        return Err(Error::invalid("no source views"));
    }
    let filtered = prenet(tape, store, cfg, images)?;
    let feats = encoder(tape, store, filtered)?;
    let feats = tape.permute(feats, &[0, 2, 3, 1])?;
    let rgb = tape.permute(filtered, &[0, 2, 3, 1])?;
    let mut parts = vec![feats, rgb];
    if cfg.noise_feat {
        let (w, h) = (images[0].width(), images[0].height());
        let mut data = Vec::with_capacity(images.len() * h * w * 3);
        for img in images {
            data.extend_from_slice(noise_model::variance_map(img, noise).data());
        }
        parts.push(tape.constant(Tensor::new(vec![images.len(), h, w, 3], data)?));
    }
    tape.concat(&parts, 3)
}

/// Precomputed per-view lookup maps for inference.
#[derive(Clone, Debug)]
pub struct FeatureMaps {
    /// `[B, H, W, D0]`.
    pub map: Tensor,
}

impl FeatureMaps {
    pub fn compute(store: &ParamStore, cfg: &ModelConfig, images: &[&LinearImage], noise: &NoiseParams) -> Result<Self> {
        let mut tape = Tape::new();
        let v = view_map(&mut tape, store, cfg, images, noise)?;
        Ok(Self {
            map: tape.value(v).clone(),
        })
    }
}

/// Filtered image and `H×W×F` feature map of one frame.
pub fn extract_features(image: &LinearImage, store: &ParamStore, cfg: &ModelConfig) -> Result<(LinearImage, Vec<f64>)> {
    if !image.is_finite() {
        return Err(Error::NonFinite("extract_features input"));
    }
    let mut tape = Tape::new();
    let filtered = prenet(&mut tape, store, cfg, &[image])?;
    let feats = encoder(&mut tape, store, filtered)?;
    let rgb = tape.permute(filtered, &[0, 2, 3, 1])?;
    let feats = tape.permute(feats, &[0, 2, 3, 1])?;
    let img = LinearImage::from_vec(image.width(), image.height(), tape.value(rgb).data().to_vec())?;
    Ok((img, tape.value(feats).data().to_vec()))
}
