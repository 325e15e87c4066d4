//! Whole-image inference.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::autodiff::{ParamStore, Tape};
use crate::burst::NoisyBurst;
use crate::error::{Error, Result};
use crate::image::{DepthMap, LinearImage};

use super::compose::expected_depth;
use super::features::FeatureMaps;
use super::net::{forward_rays, source_indices, ForwardOptions, RayQuery};
use super::ModelConfig;

#[derive(Clone, Debug)]
pub struct RenderOptions {
    /// Rays per tape.
    pub chunk: usize,
    pub seed: u64,
    pub zero_stats: bool,
    pub zero_feats: bool,
    /// Pixels whose per-sample fine-stage values are recorded.
    pub diag_pixels: Vec<(usize, usize)>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            chunk: 128,
            seed: 0,
            zero_stats: false,
            zero_feats: false,
            diag_pixels: vec![],
        }
    }
}

/// Per-sample values along one rendered ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RayDiagnostics {
    pub x: usize,
    pub y: usize,
    /// Camera-z depth of each sample.
    pub depths: Vec<f64>,
    pub rho: Vec<f64>,
    pub weights: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    /// Fine-stage colours (coarse when there is no fine stage), linear.
    pub image: LinearImage,
    pub coarse: LinearImage,
    /// Expected camera-z depth; 0 where the weights vanish.
    pub depth: DepthMap,
    /// Pixels with no valid sample in any source view.
    pub unrenderable: Vec<bool>,
    pub diagnostics: Vec<RayDiagnostics>,
}

struct ChunkResult {
    rays: Vec<RayQuery>,
    fine: Vec<f64>,
    coarse: Vec<f64>,
    depth: Vec<f64>,
    renderable: Vec<bool>,
    diags: Vec<RayDiagnostics>,
}

/// Renders every pixel of the burst's target view.
pub fn render_image(store: &ParamStore, cfg: &ModelConfig, burst: &NoisyBurst, opts: &RenderOptions) -> Result<RenderOutput> {
    let (w, h) = (burst.width(), burst.height());
    for &(x, y) in &opts.diag_pixels {
        if x >= w || y >= h {
            return Err(Error::invalid(format!("diagnostic pixel ({x}, {y}) outside {w}x{h} image")));
        }
    }
    let sources = source_indices(cfg, burst);
    let images: Vec<&LinearImage> = sources.iter().map(|&i| &burst.noisy[i]).collect();
    let maps = FeatureMaps::compute(store, cfg, &images, &burst.noise()?)?;
    let all: Vec<RayQuery> = (0..h).flat_map(|y| (0..w).map(move |x| RayQuery { x, y })).collect();
    let chunk = opts.chunk.max(1);

    let results: Vec<ChunkResult> = all
        .par_chunks(chunk)
        .map(|rays| -> Result<ChunkResult> {
            let mut tape = Tape::new();
            let map = tape.constant(maps.map.clone());
            let fo = ForwardOptions {
                stratified: false,
                seed: opts.seed,
                fixed_fine: None,
                zero_stats: opts.zero_stats,
                zero_feats: opts.zero_feats,
            };
            let out = forward_rays(&mut tape, store, cfg, burst, map, rays, &fo)?;
            let last = out.final_stage();
            let m = last.depths[0].len();
            let weights = tape.value(last.weights).data();
            let rho = tape.value(last.rho).data();
            let colors = tape.value(last.sample_colors).data();
            let mut depth = Vec::with_capacity(rays.len());
            let mut diags = Vec::new();
            for (i, q) in rays.iter().enumerate() {
                let z: Vec<f64> = last.depths[i].iter().map(|t| t * last.axis_cos[i]).collect();
                let wi = &weights[i * m..(i + 1) * m];
                depth.push(expected_depth(&z, wi).unwrap_or(0.0));
                if opts.diag_pixels.contains(&(q.x, q.y)) {
                    diags.push(RayDiagnostics {
                        x: q.x,
                        y: q.y,
                        depths: z,
                        rho: rho[i * m..(i + 1) * m].to_vec(),
                        weights: wi.to_vec(),
                        colors: (0..m)
                            .map(|j| {
                                let c = &colors[(i * m + j) * 3..(i * m + j + 1) * 3];
                                [c[0], c[1], c[2]]
                            })
                            .collect(),
                    });
                }
            }
            Ok(ChunkResult {
                rays: rays.to_vec(),
                fine: tape.value(last.color).data().to_vec(),
                coarse: tape.value(out.coarse.color).data().to_vec(),
                depth,
                renderable: last.renderable(),
                diags,
            })
        })
        .collect::<Result<_>>()?;

    let mut image = LinearImage::new(w, h);
    let mut coarse = LinearImage::new(w, h);
    let mut depth = DepthMap::new(w, h);
    let mut unrenderable = vec![false; w * h];
    let mut diagnostics = Vec::new();
    let target = burst.noisy_target();
    for r in results {
        for (i, q) in r.rays.iter().enumerate() {
            let c = [r.fine[i * 3], r.fine[i * 3 + 1], r.fine[i * 3 + 2]];
            let cc = [r.coarse[i * 3], r.coarse[i * 3 + 1], r.coarse[i * 3 + 2]];
            if r.renderable[i] {
                image.set_pixel(q.x, q.y, c);
                coarse.set_pixel(q.x, q.y, cc);
                depth.set(q.x, q.y, r.depth[i]);
            } else {
                unrenderable[q.y * w + q.x] = true;
                // Denoising mode falls back to the noisy observation; novel views stay black.
                let fill = if cfg.include_target { target.pixel(q.x, q.y) } else { [0.0; 3] };
                image.set_pixel(q.x, q.y, fill);
                coarse.set_pixel(q.x, q.y, fill);
            }
        }
        diagnostics.extend(r.diags);
    }
    Ok(RenderOutput {
        image,
        coarse,
        depth,
        unrenderable,
        diagnostics,
    })
}

/// CSV with one row per sample: `x,y,m,depth,rho,w,c_r,c_g,c_b`.
pub fn write_diagnostics_csv(path: &Path, diags: &[RayDiagnostics]) -> Result<()> {
    let mut out = String::from("x,y,m,depth,rho,w,c_r,c_g,c_b\n");
    for d in diags {
        for m in 0..d.depths.len() {
            let c = d.colors[m];
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                d.x, d.y, m, d.depths[m], d.rho[m], d.weights[m], c[0], c[1], c[2]
            ));
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
