//! Differentiable rendering of a batch of target-view rays.

use crate::autodiff::{multi_head_self_attention, GatherPoint, ParamStore, Tape, Tensor, Var};
use crate::burst::NoisyBurst;
use crate::error::{Error, Result};
use crate::geometry::{self, MapView, Ray};
use crate::rng;

use super::{ModelConfig, HEAD_LAYERS};

/// A target-view pixel to render.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RayQuery {
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Jitter coarse samples inside their disparity bins.
    pub stratified: bool,
    /// Seeds coarse jitter and fine resampling, per pixel.
    pub seed: u64,
    /// Use these merged fine-stage ray distances instead of resampling.
    pub fixed_fine: Option<&'a [Vec<f64>]>,
    /// Zero the cross-view mean/variance part of every token.
    pub zero_stats: bool,
    /// Zero the per-view part of every token.
    pub zero_feats: bool,
}

/// One coarse or fine pass over a batch of `R` rays with `M` samples each.
#[derive(Clone, Debug)]
pub struct StageOutput {
    /// `[R, M]` densities.
    pub rho: Var,
    /// `[R, M]` compositing weights.
    pub weights: Var,
    /// `[R*M, 3]` blended sample colours.
    pub sample_colors: Var,
    /// `[R, 3]` composited colours.
    pub color: Var,
    /// Per ray, ascending distances along the ray.
    pub depths: Vec<Vec<f64>>,
    /// Per ray, cosine between the ray and the optical axis (distance to z).
    pub axis_cos: Vec<f64>,
    /// `[R*M]`: sample projects validly into at least one source view.
    pub sample_valid: Vec<bool>,
}

impl StageOutput {
    /// True for rays where at least one sample had a valid source view.
    pub fn renderable(&self) -> Vec<bool> {
        let m = self.depths.first().map_or(0, Vec::len);
        self.sample_valid.chunks(m.max(1)).map(|c| c.iter().any(|&v| v)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct RayBatchOutput {
    pub coarse: StageOutput,
    pub fine: Option<StageOutput>,
}

impl RayBatchOutput {
    /// The last stage that ran.
    pub fn final_stage(&self) -> &StageOutput {
        self.fine.as_ref().unwrap_or(&self.coarse)
    }
}

/// Indices of the frames that act as source views.
pub fn source_indices(cfg: &ModelConfig, burst: &NoisyBurst) -> Vec<usize> {
    (0..burst.len()).filter(|&i| cfg.include_target || i != burst.target_index).collect()
}

fn linear(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    tape.linear(x, w, b)
}

/// `[token ⊕ group] @ w + b` for `token [G, N, Dt]` and per-group inputs
/// `[G, Dk]` that are shared by all N entries, without materialising the
/// broadcast concatenation.
fn split_linear(tape: &mut Tape, store: &ParamStore, name: &str, token: Var, group: &[Var]) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    let s = tape.shape(token).to_vec();
    let (g, dt) = (s[0], s[2]);
    let rows = tape.shape(w)[0];
    let wt = tape.slice(w, 0, 0, dt)?;
    let y = tape.matmul(token, wt)?;
    let gin = tape.concat(group, 1)?;
    let wg = tape.slice(w, 0, dt, rows - dt)?;
    let z = tape.linear(gin, wg, b)?;
    let out = tape.shape(z)[1];
    let z = tape.reshape(z, &[g, 1, out])?;
    tape.add(y, z)
}

fn mlp_tail(tape: &mut Tape, store: &ParamStore, prefix: &str, mut x: Var) -> Result<Var> {
    for l in 1..=HEAD_LAYERS {
        x = tape.elu(x)?;
        x = linear(tape, store, &format!("{prefix}.{l}"), x)?;
    }
    Ok(x)
}

fn mlp(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let x = linear(tape, store, &format!("{prefix}.0"), x)?;
    mlp_tail(tape, store, prefix, x)
}

/// Normalized disparity-bin widths: 1 everywhere for uniform disparity sampling.
fn spacing_factors(depths: &[f64], near: f64, far: f64) -> Vec<f64> {
    let m = depths.len();
    let disp: Vec<f64> = depths.iter().map(|t| 1.0 / t).collect();
    let mean = (1.0 / near - 1.0 / far) / m as f64;
    (0..m)
        .map(|i| {
            let lo = if i + 1 < m { 0.5 * (disp[i] + disp[i + 1]) } else { disp[i] - 0.5 * (disp[i - 1] - disp[i]) };
            let hi = if i > 0 { 0.5 * (disp[i - 1] + disp[i]) } else { disp[0] + 0.5 * (disp[0] - disp[1]) };
            (hi - lo) / mean
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    stage: &str,
    burst: &NoisyBurst,
    sources: &[usize],
    map: Var,
    rays: &[Ray],
    depths: Vec<Vec<f64>>,
    opts: &ForwardOptions<'_>,
) -> Result<StageOutput> {
    let r = rays.len();
    let m = depths[0].len();
    if depths.iter().any(|d| d.len() != m) {
        return Err(Error::invalid("rays in one batch must share a sample count"));
    }
    let n = sources.len();
    let g = r * m;
    let k = cfg.effective_k();
    let taps = k * k;
    let half = (k / 2) as f64;

    // Project every sample into every source view.
    let mut points = Vec::with_capacity(g * n);
    for (ray, ds) in rays.iter().zip(&depths) {
        for &t in ds {
            let p = ray.point_at(t);
            for &s in sources {
                let pr = geometry::project_point(p, &burst.intrinsics[s], &burst.poses[s], 0.0);
                points.push(GatherPoint {
                    batch: points.len() % n,
                    u: pr.u,
                    v: pr.v,
                    valid: pr.valid,
                });
            }
        }
    }
    let mask: Vec<bool> = points.iter().map(|p| p.valid).collect();
    let sample_valid: Vec<bool> = mask.chunks(n).map(|c| c.iter().any(|&v| v)).collect();

    // Raw noisy k×k patches, laid out [G, 3, N·k²] to match the kernel softmax.
    let mut patches = vec![0.0; g * 3 * n * taps];
    let mut kmask = vec![false; g * 3 * n * taps];
    let maps: Vec<MapView<'_>> = sources.iter().map(|&s| MapView::of(&burst.noisy[s])).collect();
    let mut px = [0.0; 3];
    for gi in 0..g {
        for (vi, view) in maps.iter().enumerate() {
            let p = &points[gi * n + vi];
            if !p.valid {
                continue;
            }
            for t in 0..taps {
                let (dy, dx) = ((t / k) as f64 - half, (t % k) as f64 - half);
                geometry::bilinear_sample_clamped(view, p.u + dx, p.v + dy, &mut px);
                for c in 0..3 {
                    let i = ((gi * 3 + c) * n + vi) * taps + t;
                    patches[i] = px[c];
                    kmask[i] = true;
                }
            }
        }
    }

    // Per-view tokens with cross-view statistics.
    let d0 = cfg.view_dim();
    let gathered = tape.gather_bilinear(map, &points)?;
    let view_part = tape.reshape(gathered, &[g, n, d0])?;
    let (mean, var) = if opts.zero_stats {
        let z = tape.constant(Tensor::zeros(&[g, d0]));
        (z, z)
    } else {
        let mean = tape.masked_mean(view_part, &mask)?;
        let var = tape.masked_variance(view_part, mean, &mask)?;
        (mean, var)
    };
    let view_part = if opts.zero_feats {
        tape.constant(Tensor::zeros(&[g, n, d0]))
    } else {
        view_part
    };
    // Embedding of [view ⊕ mean ⊕ var]; the statistics are shared across views.
    let x = split_linear(tape, store, &format!("{stage}.embed"), view_part, &[mean, var])?;
    let mut x = tape.elu(x)?;
    if cfg.transformer {
        let p = |tape: &mut Tape, s: &str| tape.param(store, &format!("{stage}.attn.{s}"));
        let (wq, wk, wv, wo) = (p(tape, "q")?, p(tape, "k")?, p(tape, "v")?, p(tape, "o")?);
        let att = multi_head_self_attention(tape, x, &mask, cfg.heads, wq, wk, wv, wo)?;
        x = tape.add(x, att)?;
    }
    let pooled = tape.masked_mean(x, &mask)?;

    // Density head.
    let logit = mlp(tape, store, &format!("{stage}.density"), pooled)?;
    let rho = tape.softplus(logit)?;
    let rho = tape.reshape(rho, &[r, m])?;
    let mut gate: Vec<f64> = sample_valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    if cfg.density_spacing {
        for (ri, (ray, ds)) in rays.iter().zip(&depths).enumerate() {
            for (j, f) in spacing_factors(ds, ray.near, ray.far).into_iter().enumerate() {
                gate[ri * m + j] *= f;
            }
        }
    }
    let gate = tape.constant(Tensor::new(vec![r, m], gate)?);
    let rho = tape.mul(rho, gate)?;

    // Blend-kernel head, applied per view on [token, pooled].
    let prefix = format!("{stage}.kernel");
    let h0 = split_linear(tape, store, &format!("{prefix}.0"), x, &[pooled])?;
    let logits = mlp_tail(tape, store, &prefix, h0)?;
    let logits = if cfg.kernel_blend {
        let l = tape.reshape(logits, &[g, n, taps, 3])?;
        let l = tape.permute(l, &[0, 3, 1, 2])?;
        tape.reshape(l, &[g, 3, n * taps])?
    } else {
        let l = tape.reshape(logits, &[g, 1, n])?;
        tape.broadcast_to(l, &[g, 3, n])?
    };
    let kw = tape.masked_softmax(logits, &kmask)?;
    let patches = tape.constant(Tensor::new(vec![g, 3, n * taps], patches)?);
    let blended = tape.mul(kw, patches)?;
    let sample_colors = tape.sum_axis(blended, 2)?;

    // w_m = (1 - e^{-rho_m}) e^{-sum_{j<m} rho_j}
    let neg = tape.scale(rho, -1.0)?;
    let e = tape.exp(neg)?;
    let alpha = tape.affine(e, -1.0, 1.0)?;
    let acc = tape.cumsum_exclusive(rho)?;
    let acc = tape.scale(acc, -1.0)?;
    let trans = tape.exp(acc)?;
    let weights = tape.mul(alpha, trans)?;

    let w3 = tape.reshape(weights, &[r, m, 1])?;
    let c3 = tape.reshape(sample_colors, &[r, m, 3])?;
    let wc = tape.mul(w3, c3)?;
    let color = tape.sum_axis(wc, 1)?;

    Ok(StageOutput {
        rho,
        weights,
        sample_colors,
        color,
        depths,
        axis_cos: rays.iter().map(|r| r.axis_cos).collect(),
        sample_valid,
    })
}

/// Renders `rays` of the burst's target view. `map` is the `[N, H, W, D0]`
/// lookup map of the frames listed by [`source_indices`], in that order.
pub fn forward_rays(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    burst: &NoisyBurst,
    map: Var,
    rays: &[RayQuery],
    opts: &ForwardOptions<'_>,
) -> Result<RayBatchOutput> {
    if rays.is_empty() {
        return Err(Error::invalid("empty ray batch"));
    }
    let sources = source_indices(cfg, burst);
    if sources.is_empty() {
        return Err(Error::invalid("no source views"));
    }
    if tape.shape(map)[0] != sources.len() {
        return Err(Error::ShapeMismatch {
            op: "forward_rays",
            lhs: tape.shape(map).to_vec(),
            rhs: vec![sources.len()],
        });
    }
    let t = burst.target_index;
    let (cam, pose) = (&burst.intrinsics[t], &burst.poses[t]);
    let mut geo = Vec::with_capacity(rays.len());
    let mut coarse_depths = Vec::with_capacity(rays.len());
    for q in rays {
        let ray = geometry::pixel_ray(cam, pose, q.x as f64, q.y as f64, burst.bounds)?;
        let mut rng = rng::stream(opts.seed, &[q.x as u64, q.y as u64, 0]);
        coarse_depths.push(geometry::sample_inverse_depth(&ray, cfg.m_coarse, opts.stratified, &mut rng)?);
        geo.push(ray);
    }
    let coarse = run_stage(tape, store, cfg, "coarse", burst, &sources, map, &geo, coarse_depths, opts)?;
    if cfg.m_fine == 0 {
        return Ok(RayBatchOutput { coarse, fine: None });
    }
    let fine_depths: Vec<Vec<f64>> = match opts.fixed_fine {
        Some(d) => {
            if d.len() != rays.len() {
                return Err(Error::invalid("fixed fine depths must cover every ray"));
            }
            d.to_vec()
        }
        None => {
            // Coarse weights are treated as constants when placing fine samples.
            let w = tape.value(coarse.weights).data();
            let m = cfg.m_coarse;
            rays.iter()
                .enumerate()
                .map(|(i, q)| {
                    let mut rng = rng::stream(opts.seed, &[q.x as u64, q.y as u64, 1]);
                    geometry::hierarchical_resample(&coarse.depths[i], &w[i * m..(i + 1) * m], cfg.m_fine, &mut rng)
                })
                .collect()
        }
    };
    let fine = run_stage(tape, store, cfg, "fine", burst, &sources, map, &geo, fine_depths, opts)?;
    Ok(RayBatchOutput {
        coarse,
        fine: Some(fine),
    })
}
