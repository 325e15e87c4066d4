//! The burst renderer: per-view feature extraction, cross-view aggregation
//! along target rays, density and blend-kernel heads, and compositing.

mod compose;
mod features;
mod net;
mod render;

use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng;

pub use compose::{blend_color, composite, density_to_weights, expected_depth, kernel_weights};
pub use features::{extract_features, gaussian_stencil, view_map, FeatureMaps};
pub use net::{forward_rays, source_indices, ForwardOptions, RayBatchOutput, RayQuery, StageOutput};
pub use render::{render_image, write_diagnostics_csv, RayDiagnostics, RenderOptions, RenderOutput};

/// Architecture and ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub m_coarse: usize,
    pub m_fine: usize,
    /// Blend kernel size; forced to 1 when `kernel_blend` is off.
    pub kernel_size: usize,
    pub heads: usize,
    pub feat_dim: usize,
    /// Width of the per-view token after embedding; divisible by `heads`.
    pub attn_dim: usize,
    /// Hidden width of the density and kernel heads.
    pub hidden_dim: usize,
    pub prenet: bool,
    pub transformer: bool,
    pub kernel_blend: bool,
    pub noise_feat: bool,
    /// Denoising mode: the noisy target frame is one of the sources.
    pub include_target: bool,
    /// Multiply densities by normalized disparity spacing.
    pub density_spacing: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            m_coarse: 32,
            m_fine: 32,
            kernel_size: 3,
            heads: 5,
            feat_dim: 16,
            attn_dim: 40,
            hidden_dim: 64,
            prenet: true,
            transformer: true,
            kernel_blend: true,
            noise_feat: true,
            include_target: true,
            density_spacing: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {}", self.kernel_size)));
        }
        if self.heads == 0 || self.attn_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "{} attention heads do not divide attention width {}",
                self.heads, self.attn_dim
            )));
        }
        if self.m_coarse < 2 {
            return Err(Error::invalid("need at least 2 coarse samples"));
        }
        if self.feat_dim == 0 || self.attn_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }

    /// Kernel size actually used by the blend head.
    pub fn effective_k(&self) -> usize {
        if self.kernel_blend {
            self.kernel_size
        } else {
            1
        }
    }

    /// Per-view entry width: features, filtered RGB and optional noise variance.
    pub fn view_dim(&self) -> usize {
        self.feat_dim + 3 + if self.noise_feat { 3 } else { 0 }
    }

    /// Kernel head outputs per view.
    pub fn kernel_outputs(&self) -> usize {
        if self.kernel_blend {
            self.kernel_size * self.kernel_size * 3
        } else {
            1
        }
    }

    fn to_vec(self) -> Vec<f64> {
        let b = |x: bool| if x { 1.0 } else { 0.0 };
        vec![
            self.m_coarse as f64,
            self.m_fine as f64,
            self.kernel_size as f64,
            self.heads as f64,
            self.feat_dim as f64,
            self.attn_dim as f64,
            self.hidden_dim as f64,
            b(self.prenet),
            b(self.transformer),
            b(self.kernel_blend),
            b(self.noise_feat),
            b(self.include_target),
            b(self.density_spacing),
        ]
    }

    fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 13 || v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::invalid("malformed model configuration entry"));
        }
        let u = |i: usize| v[i] as usize;
        let b = |i: usize| v[i] != 0.0;
        let cfg = Self {
            m_coarse: u(0),
            m_fine: u(1),
            kernel_size: u(2),
            heads: u(3),
            feat_dim: u(4),
            attn_dim: u(5),
            hidden_dim: u(6),
            prenet: b(7),
            transformer: b(8),
            kernel_blend: b(9),
            noise_feat: b(10),
            include_target: b(11),
            density_spacing: b(12),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const CONFIG_ENTRY: &str = "meta.config";

/// Stage names; coarse and fine heads have separate parameters.
pub const STAGES: [&str; 2] = ["coarse", "fine"];

/// Number of hidden layers in each head.
const HEAD_LAYERS: usize = 2;

/// Initial density bias: softplus of it is about 0.1.
const DENSITY_BIAS: f64 = -2.25;

fn normal_tensor(rng: &mut rng::Rng, shape: &[usize], std: f64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

fn add_linear(store: &mut ParamStore, rng: &mut rng::Rng, name: &str, fan_in: usize, fan_out: usize, std: f64) -> Result<()> {
    store.insert(&format!("{name}.w"), normal_tensor(rng, &[fan_in, fan_out], std))?;
    store.insert(&format!("{name}.b"), Tensor::zeros(&[fan_out]))
}

fn add_conv(store: &mut ParamStore, rng: &mut rng::Rng, name: &str, cin: usize, cout: usize) -> Result<()> {
    let std = (2.0 / (cin * 9) as f64).sqrt();
    store.insert(&format!("{name}.w"), normal_tensor(rng, &[cout, cin, 3, 3], std))?;
    store.insert(&format!("{name}.b"), Tensor::zeros(&[cout]))
}

/// Freshly initialized parameters for `cfg`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, &[0x1417]);
    let mut s = ParamStore::new();
    if cfg.prenet {
        let g = gaussian_stencil(1.0);
        let w = Tensor::from_fn(&[3, 3, 3, 3], |i| {
            let (o, c, tap) = (i / 27, (i / 9) % 3, i % 9);
            if o == c {
                g[tap]
            } else {
                0.0
            }
        });
        s.insert("prenet.w", w)?;
        s.insert("prenet.b", Tensor::zeros(&[3]))?;
    }
    let f = cfg.feat_dim;
    add_conv(&mut s, &mut rng, "enc.0", 3, f)?;
    for i in 1..4 {
        add_conv(&mut s, &mut rng, &format!("enc.{i}"), f, f)?;
    }
    let d0 = cfg.view_dim();
    let (a, h) = (cfg.attn_dim, cfg.hidden_dim);
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    for stage in STAGES {
        add_linear(&mut s, &mut rng, &format!("{stage}.embed"), 3 * d0, a, he(3 * d0))?;
        if cfg.transformer {
            let std = (1.0 / a as f64).sqrt();
            for p in ["q", "k", "v"] {
                s.insert(&format!("{stage}.attn.{p}"), normal_tensor(&mut rng, &[a, a], std))?;
            }
            // Small output projection so the residual starts near identity.
            s.insert(&format!("{stage}.attn.o"), normal_tensor(&mut rng, &[a, a], 0.1 * std))?;
        }
        add_linear(&mut s, &mut rng, &format!("{stage}.density.0"), a, h, he(a))?;
        for l in 1..HEAD_LAYERS {
            add_linear(&mut s, &mut rng, &format!("{stage}.density.{l}"), h, h, he(h))?;
        }
        add_linear(&mut s, &mut rng, &format!("{stage}.density.{HEAD_LAYERS}"), h, 1, 0.1 * he(h))?;
        s.get_param_mut(&format!("{stage}.density.{HEAD_LAYERS}.b"))
            .expect("just inserted")
            .value
            .data_mut()[0] = DENSITY_BIAS;
        add_linear(&mut s, &mut rng, &format!("{stage}.kernel.0"), 2 * a, h, he(2 * a))?;
        for l in 1..HEAD_LAYERS {
            add_linear(&mut s, &mut rng, &format!("{stage}.kernel.{l}"), h, h, he(h))?;
        }
        // Zero logits: blending starts uniform over every valid view and tap.
        add_linear(&mut s, &mut rng, &format!("{stage}.kernel.{HEAD_LAYERS}"), h, cfg.kernel_outputs(), 0.0)?;
    }
    Ok(s)
}

/// Checkpoint entries for a model: parameters, optional Adam state, config.
pub fn checkpoint_entries(cfg: &ModelConfig, store: &ParamStore, with_optimizer: bool) -> Vec<checkpoint::Entry> {
    let mut e = store.to_entries(with_optimizer);
    let v = cfg.to_vec();
    e.push(checkpoint::Entry::f64(CONFIG_ENTRY, Tensor::new(vec![v.len()], v).expect("sized")));
    e
}

pub fn save_model(path: &std::path::Path, cfg: &ModelConfig, store: &ParamStore, with_optimizer: bool) -> Result<()> {
    checkpoint::write(path, &checkpoint_entries(cfg, store, with_optimizer))
}

/// Loads a checkpoint written by [`save_model`], restoring optimizer state if present.
pub fn load_model(path: &std::path::Path) -> Result<(ModelConfig, ParamStore)> {
    let entries = checkpoint::read(path)?;
    let cfg_entry = entries
        .iter()
        .find(|e| e.name == CONFIG_ENTRY)
        .ok_or_else(|| Error::format(path, "no model configuration entry"))?;
    let cfg = ModelConfig::from_slice(cfg_entry.tensor.data())?;
    let mut store = init_params(&cfg, 0)?;
    store.load_entries(&entries)?;
    Ok((cfg, store))
}
