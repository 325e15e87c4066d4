use nan_core::autodiff::{Adam, ParamStore, Tape};
use nan_core::burst::NoisyBurst;
use nan_core::camera::CameraIntrinsics;
use nan_core::image::LinearImage;
use nan_core::model::{self, init_params, render_image, ForwardOptions, ModelConfig, RayQuery, RenderOptions};
use nan_core::noise_model::{gain_to_params, ColorTransform, NoiseParams};
use nan_core::rng;
use nan_core::scene_sim::{make_burst, PlanarScene, Preset};
use nan_core::training::{build_loss, train, TrainConfig, TrainIo, TrainSource};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

fn small_cfg() -> ModelConfig {
    ModelConfig {
        m_coarse: 8,
        m_fine: 8,
        feat_dim: 4,
        attn_dim: 10,
        hidden_dim: 8,
        ..ModelConfig::default()
    }
}

fn small_burst(size: usize, frames: usize, motion: f64, gain: Option<f64>, seed: u64) -> NoisyBurst {
    let cam = CameraIntrinsics::centered(size as f64, size, size).unwrap();
    let scene = PlanarScene::preset_with(Preset::TwoPlane, seed, cam);
    let b = make_burst(&scene, frames, motion, seed + 1).unwrap();
    let noise = match gain {
        Some(g) => gain_to_params(g).unwrap(),
        None => NoiseParams::noiseless(),
    };
    NoisyBurst::synthesize(&b, &noise, &ColorTransform::default(), seed + 2).unwrap()
}

/// Moves every parameter off its initial value, including the zero-initialized
/// kernel output layer, so no path is trivially uniform.
fn jitter(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut r = rng::stream(seed, &[]);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            let z: f64 = StandardNormal.sample(&mut r);
            *v += scale * z;
        }
    }
}

fn max_diff(a: &LinearImage, b: &LinearImage) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn rendering_is_invariant_to_view_order() {
    let cfg = small_cfg();
    let mut store = init_params(&cfg, 3).unwrap();
    jitter(&mut store, 0.2, 4);
    let mut r = rng::stream(9, &[]);
    for n in [4, 8, 12] {
        let burst = small_burst(12, n, 0.3, Some(8.0), n as u64);
        let base = render_image(&store, &cfg, &burst, &RenderOptions::default()).unwrap();
        for _ in 0..10 {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut r);
            let p = burst.permuted(&order).unwrap();
            let out = render_image(&store, &cfg, &p, &RenderOptions::default()).unwrap();
            let d = max_diff(&out.image, &base.image);
            assert!(d < 1e-6, "N={n}: colour moved by {d:e} under {order:?}");
        }
    }
}

#[test]
fn any_view_count_from_two_to_twelve_renders() {
    let cfg = small_cfg();
    let store = init_params(&cfg, 0).unwrap();
    for n in 2..=12 {
        let burst = small_burst(8, n, 0.2, Some(4.0), 20 + n as u64);
        let out = render_image(&store, &cfg, &burst, &RenderOptions::default()).unwrap();
        assert!(out.image.is_finite(), "N={n}");
    }
}

#[test]
fn sample_colours_are_convex_and_weights_sum_below_one() {
    let cfg = small_cfg();
    let mut store = init_params(&cfg, 1).unwrap();
    jitter(&mut store, 0.3, 2);
    let mut burst = small_burst(10, 5, 0.3, Some(8.0), 40);
    let v = [0.2, 0.45, 0.7];
    let pixels: Vec<(usize, usize)> = (0..10).flat_map(|y| (0..10).map(move |x| (x, y))).collect();
    let opts = RenderOptions {
        diag_pixels: pixels,
        ..RenderOptions::default()
    };

    // General case: every sample colour is within the range of the raw source intensities.
    let (lo, hi) = burst
        .noisy
        .iter()
        .flat_map(|im| im.data().iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let out = render_image(&store, &cfg, &burst, &opts).unwrap();
    for d in &out.diagnostics {
        let sw: f64 = d.weights.iter().sum();
        assert!(sw <= 1.0 + 1e-12);
        for c in &d.colors {
            for &ch in c {
                assert!(ch == 0.0 || (ch >= lo - 1e-12 && ch <= hi + 1e-12));
            }
        }
        let px = out.image.pixel(d.x, d.y);
        for ch in 0..3 {
            assert!(px[ch] <= hi + 1e-12);
        }
    }

    // Constant sources: every valid sample reproduces the constant exactly.
    for im in burst.noisy.iter_mut() {
        *im = LinearImage::filled(10, 10, v);
    }
    let out = render_image(&store, &cfg, &burst, &opts).unwrap();
    for d in &out.diagnostics {
        let sw: f64 = d.weights.iter().sum();
        for (c, w) in d.colors.iter().zip(&d.weights) {
            let valid = c.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-12);
            assert!(valid || (*c == [0.0; 3] && *w == 0.0), "{c:?} with weight {w}");
        }
        let px = out.image.pixel(d.x, d.y);
        for ch in 0..3 {
            assert!((px[ch] - v[ch] * sw).abs() < 1e-12);
        }
    }
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let cfg = ModelConfig {
        m_coarse: 6,
        m_fine: 6,
        ..small_cfg()
    };
    let mut store = init_params(&cfg, 5).unwrap();
    jitter(&mut store, 0.2, 6);
    let burst = small_burst(8, 3, 0.2, Some(4.0), 60);
    let rays = [RayQuery { x: 2, y: 3 }, RayQuery { x: 5, y: 5 }, RayQuery { x: 7, y: 1 }];

    let mut tape = Tape::new();
    let opts = ForwardOptions::default();
    let (loss, out) = build_loss(&mut tape, &store, &cfg, &burst, &rays, &opts).unwrap();
    let fine = out.fine.as_ref().unwrap().depths.clone();
    let fixed = ForwardOptions {
        fixed_fine: Some(&fine),
        ..ForwardOptions::default()
    };
    let grads = tape.backward(loss).unwrap();
    store.zero_grad();
    store.accumulate(&tape, &grads);

    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let (l, _) = build_loss(&mut t, s, &cfg, &burst, &rays, &fixed).unwrap();
        t.value(l).item().unwrap()
    };
    let h = 1e-5;
    let mut probe = store.clone();
    let mut checked = 0;
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for name in &names {
        let n = store.get(name).unwrap().numel();
        let analytic = store.get_param(name).unwrap().grad.clone();
        // Every scalar of small tensors, a spread of indices for large ones.
        let idx: Vec<usize> = if n <= 12 { (0..n).collect() } else { (0..12).map(|k| k * n / 12).collect() };
        for i in idx {
            let orig = probe.get(name).unwrap().data()[i];
            probe.get_param_mut(name).unwrap().value.data_mut()[i] = orig + h;
            let up = eval(&probe);
            probe.get_param_mut(name).unwrap().value.data_mut()[i] = orig - h;
            let down = eval(&probe);
            probe.get_param_mut(name).unwrap().value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            // Central differences carry ~1e-11 of roundoff, so tiny gradients get an absolute floor.
            let err = (analytic[i] - numeric).abs() / numeric.abs().max(1e-6);
            assert!(err < 1e-4, "{name}[{i}]: analytic {} numeric {numeric} rel err {err:e}", analytic[i]);
            checked += 1;
        }
    }
    assert!(checked > 100, "only {checked} parameters probed");
}

#[test]
fn disabled_components_have_no_parameters() {
    let cfg = ModelConfig {
        prenet: false,
        transformer: false,
        ..small_cfg()
    };
    let store = init_params(&cfg, 0).unwrap();
    assert!(store.iter().all(|p| !p.name.starts_with("prenet") && !p.name.contains(".attn.")));
    let no_noise = ModelConfig {
        noise_feat: false,
        ..small_cfg()
    };
    let d0 = no_noise.view_dim();
    assert_eq!(d0, no_noise.feat_dim + 3);
    let s = init_params(&no_noise, 0).unwrap();
    assert_eq!(s.get("fine.embed.w").unwrap().shape(), &[3 * d0, no_noise.attn_dim]);
}

#[test]
fn zeroed_diagnostics_change_the_render() {
    let cfg = small_cfg();
    let mut store = init_params(&cfg, 2).unwrap();
    jitter(&mut store, 0.2, 3);
    let burst = small_burst(8, 4, 0.2, Some(4.0), 70);
    let base = render_image(&store, &cfg, &burst, &RenderOptions::default()).unwrap();
    for (zs, zf) in [(true, false), (false, true)] {
        let o = RenderOptions {
            zero_stats: zs,
            zero_feats: zf,
            ..RenderOptions::default()
        };
        let out = render_image(&store, &cfg, &burst, &o).unwrap();
        assert!(out.image.is_finite());
        assert!(max_diff(&out.image, &base.image) > 1e-9);
    }
}

#[test]
fn static_noiseless_pixel_is_reproduced_after_overfitting() {
    let cfg = small_cfg();
    let mut store = init_params(&cfg, 0).unwrap();
    let burst = small_burst(12, 4, 0.0, None, 80);
    let rays = [RayQuery { x: 6, y: 5 }];
    let opt = Adam::default();
    let mut last = f64::INFINITY;
    for it in 0..500u64 {
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            stratified: true,
            seed: it,
            ..ForwardOptions::default()
        };
        let (loss, _) = build_loss(&mut tape, &store, &cfg, &burst, &rays, &opts).unwrap();
        last = tape.value(loss).item().unwrap();
        let g = tape.backward(loss).unwrap();
        store.zero_grad();
        store.accumulate(&tape, &g);
        store.adam_step(&opt, 1e-2);
    }
    assert!(last < 1e-3, "loss after 500 steps: {last}");
    let out = model::render_image(&store, &cfg, &burst, &RenderOptions::default()).unwrap();
    let want = burst.clean_target().unwrap().pixel(6, 5);
    let got = out.image.pixel(6, 5);
    for ch in 0..3 {
        assert!((got[ch] - want[ch]).abs() < 1e-3, "{got:?} vs {want:?}");
    }
}

fn tiny_training() -> (Vec<TrainSource>, ModelConfig, TrainConfig) {
    let cam = CameraIntrinsics::centered(10.0, 10, 10).unwrap();
    let sources = vec![TrainSource::Scene(PlanarScene::preset_with(Preset::TwoPlane, 1, cam))];
    let tcfg = TrainConfig {
        iterations: 10,
        batch_rays: 8,
        burst_frames: 3,
        seed: 17,
        ..TrainConfig::default()
    };
    (sources, small_cfg(), tcfg)
}

#[test]
fn training_is_deterministic() {
    let (sources, cfg, tcfg) = tiny_training();
    let run = || {
        let store = init_params(&cfg, tcfg.seed).unwrap();
        train(&sources, &cfg, &tcfg, store, &TrainIo::default(), |_, _| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.store, b.store);
    assert_eq!(a.losses, b.losses);
}

#[test]
fn resuming_from_a_checkpoint_matches_a_straight_run() {
    let (sources, cfg, tcfg) = tiny_training();
    let straight = train(&sources, &cfg, &tcfg, init_params(&cfg, 0).unwrap(), &TrainIo::default(), |_, _| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.json");
    let io = TrainIo {
        checkpoint: Some(ckpt.clone()),
        stop_at: Some(5),
    };
    let first = train(&sources, &cfg, &tcfg, init_params(&cfg, 0).unwrap(), &io, |_, _| {}).unwrap();
    assert_eq!(first.losses.len(), 5);
    let (loaded_cfg, store) = model::load_model(&ckpt).unwrap();
    assert_eq!(loaded_cfg, cfg);
    assert_eq!(store.step, 5);
    let second = train(&sources, &cfg, &tcfg, store, &TrainIo::default(), |_, _| {}).unwrap();
    assert_eq!(second.losses, straight.losses[5..]);
    assert_eq!(second.store, straight.store);
}
