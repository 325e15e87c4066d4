use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mimalloc::MiMalloc;
use nan_core::burst::{self, NoisyBurst};
use nan_core::camera::CameraIntrinsics;
use nan_core::image::{DepthMap, LinearImage};
use nan_core::model::{self, ModelConfig, RenderOptions};
use nan_core::noise_model::{self, ColorTransform};
use nan_core::scene_sim::{self, PlanarScene, Preset};
use nan_core::training::{self, EvalRow, TrainConfig, TrainIo, TrainSource};
use nan_core::Error;

mod plot;

// Training allocates and frees large tape buffers every iteration; the system
// allocator returns them to the OS and pays for the page faults again.
#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

#[derive(Parser)]
#[command(name = "nan", version, about = "Burst denoising with an image-based radiance field")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random planar scene.
    GenScene(GenScene),
    /// Render a noisy burst of a scene.
    GenBurst(GenBurst),
    /// Train a model on scenes or bursts.
    Train(Train),
    /// Denoise the target frame of a burst.
    Denoise(Denoise),
    /// Score a denoised image against ground truth.
    Eval(Eval),
    /// Plot two CSV columns as an SVG line.
    Plot(Plot),
}

#[derive(Args)]
struct GenScene {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "two-plane")]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square image size in pixels; the focal length scales with it.
    #[arg(long, default_value_t = scene_sim::DEFAULT_SIZE)]
    size: usize,
}

#[derive(Args)]
struct GenBurst {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long)]
    gain: f64,
    #[arg(long, default_value_t = 0.3)]
    motion: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frame to denoise; random when omitted.
    #[arg(long)]
    target_index: Option<usize>,
    /// Draw gamma and white balance at random instead of the fixed defaults.
    #[arg(long)]
    random_color: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    /// Comma-separated scene or burst directories.
    #[arg(long, value_delimiter = ',', required = true)]
    data: Vec<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    iters: usize,
    #[arg(long, default_value_t = 512)]
    batch_rays: usize,
    /// Blending kernel size.
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long)]
    no_prenet: bool,
    #[arg(long)]
    no_transformer: bool,
    #[arg(long)]
    no_kernel_blend: bool,
    #[arg(long)]
    no_noise_feat: bool,
    /// Withhold the target frame (novel-view mode).
    #[arg(long)]
    no_target: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Continue from the checkpoint at --out; its model configuration wins.
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Pause after this many iterations; the learning-rate schedule still spans --iters.
    #[arg(long)]
    stop_at: Option<usize>,
    #[command(flatten)]
    size: ModelSize,
    /// Frames per generated training burst.
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Camera motion of generated training bursts.
    #[arg(long, default_value_t = 0.3)]
    motion: f64,
}

#[derive(Args)]
struct ModelSize {
    /// Coarse and fine samples per ray.
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, default_value_t = 16)]
    feat_dim: usize,
    #[arg(long, default_value_t = 40)]
    attn_dim: usize,
    #[arg(long, default_value_t = 5)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    hidden_dim: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct Denoise {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    burst: PathBuf,
    #[arg(long)]
    target_index: Option<usize>,
    #[arg(long, value_enum, default_value = "on")]
    bilateral: OnOff,
    /// Display-space PNG; the expected depth goes next to it as `.depth.pfm`.
    #[arg(long)]
    out: PathBuf,
    /// Pixel `X,Y` whose per-sample weights, densities and colours are dumped.
    #[arg(long, value_parser = parse_pixel)]
    diag_ray: Vec<(usize, usize)>,
    #[arg(long)]
    diag_csv: Option<PathBuf>,
    /// Replace the noise features by zeros.
    #[arg(long)]
    zero_stats: bool,
    /// Replace the image features by zeros.
    #[arg(long)]
    zero_feats: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    Psnr,
    Ssim,
    Depth,
    Displacement,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    pred: PathBuf,
    /// Defaults to the burst's clean target.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    burst: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "psnr,ssim,depth,displacement")]
    metrics: Vec<Metric>,
    /// Defaults to the `.depth.pfm` written by `denoise` next to --pred.
    #[arg(long)]
    pred_depth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `<out>.displacement.csv`.
    #[arg(long)]
    displacement_csv: Option<PathBuf>,
}

#[derive(Args)]
struct Plot {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    x: String,
    #[arg(long)]
    y: String,
    #[arg(long)]
    out: PathBuf,
}

/// Error with the short code printed on the one-line failure message.
struct Failure {
    code: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let message = match &e {
            Error::InvalidArgument(m) => m.clone(),
            other => other.to_string(),
        };
        Self { code: e.code(), message }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Error::InvalidArgument(message.into()).into()
}

type CliResult<T = ()> = Result<T, Failure>;

fn parse_pixel(s: &str) -> Result<(usize, usize), String> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("expected X,Y, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(x)?, p(y)?))
}

fn depth_path(png: &Path) -> PathBuf {
    png.with_extension("depth.pfm")
}

fn gen_scene(a: GenScene) -> CliResult {
    let cam = CameraIntrinsics::centered(
        scene_sim::DEFAULT_FOCAL * a.size as f64 / scene_sim::DEFAULT_SIZE as f64,
        a.size,
        a.size,
    )?;
    let scene = PlanarScene::preset_with(a.preset, a.seed, cam);
    burst::save_scene(&scene, &a.out)?;
    Ok(())
}

fn gen_burst(a: GenBurst) -> CliResult {
    let noise = noise_model::gain_to_params(a.gain)?;
    let scene = burst::load_scene(&a.scene)?;
    let mut clean = scene_sim::make_burst(&scene, a.frames, a.motion, a.seed)?;
    if let Some(t) = a.target_index {
        if t >= clean.len() {
            return Err(invalid(format!("target index {t} out of range for {} frames", clean.len())));
        }
        clean.target_index = t;
    }
    let transform = if a.random_color {
        ColorTransform::random(&mut nan_core::rng::stream(a.seed, &[0xc0]))
    } else {
        ColorTransform::default()
    };
    let noisy = NoisyBurst::synthesize(&clean, &noise, &transform, a.seed)?;
    noisy.save(&a.out)?;
    Ok(())
}

fn load_sources(dirs: &[PathBuf]) -> CliResult<Vec<TrainSource>> {
    dirs.iter()
        .map(|d| {
            if d.join("scene.json").exists() {
                Ok(TrainSource::Scene(burst::load_scene(d)?))
            } else if d.join("burst.json").exists() {
                Ok(TrainSource::Burst(NoisyBurst::load(d)?.geometry()?))
            } else {
                Err(invalid(format!("{} holds neither scene.json nor burst.json", d.display())))
            }
        })
        .collect()
}

fn train(a: Train) -> CliResult {
    let sources = load_sources(&a.data)?;
    let (model_cfg, store) = if a.resume {
        model::load_model(&a.out)?
    } else {
        let cfg = ModelConfig {
            m_coarse: a.size.samples,
            m_fine: a.size.samples,
            kernel_size: a.k,
            heads: a.size.heads,
            feat_dim: a.size.feat_dim,
            attn_dim: a.size.attn_dim,
            hidden_dim: a.size.hidden_dim,
            prenet: !a.no_prenet,
            transformer: !a.no_transformer,
            kernel_blend: !a.no_kernel_blend,
            noise_feat: !a.no_noise_feat,
            include_target: !a.no_target,
            ..ModelConfig::default()
        };
        let store = model::init_params(&cfg, a.seed)?;
        (cfg, store)
    };
    let cfg = TrainConfig {
        iterations: a.iters,
        batch_rays: a.batch_rays,
        burst_frames: a.frames,
        motion_scale: a.motion,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        ..TrainConfig::default()
    };
    let io = TrainIo {
        checkpoint: Some(a.out.clone()),
        stop_at: a.stop_at,
    };
    let report_every = (a.iters / 20).max(1);
    let outcome = training::train(&sources, &model_cfg, &cfg, store, &io, |i, loss| {
        if (i + 1) % report_every == 0 {
            eprintln!("iter {} loss {loss:.5}", i + 1);
        }
    });
    match outcome {
        Ok(o) => {
            if let Some(p) = &a.loss_csv {
                training::write_loss_csv(p, &o.losses, a.resume)?;
            }
            Ok(())
        }
        Err(e) => Err(e.into()),
    }
}

fn denoise(a: Denoise) -> CliResult {
    let (cfg, store) = model::load_model(&a.ckpt)?;
    let mut burst = NoisyBurst::load(&a.burst)?;
    if let Some(t) = a.target_index {
        if t >= burst.len() {
            return Err(invalid(format!("target index {t} out of range for {} frames", burst.len())));
        }
        burst.target_index = t;
    }
    if !a.diag_ray.is_empty() && a.diag_csv.is_none() {
        return Err(invalid("--diag-ray needs --diag-csv"));
    }
    let opts = RenderOptions {
        seed: a.seed,
        zero_stats: a.zero_stats,
        zero_feats: a.zero_feats,
        diag_pixels: a.diag_ray.clone(),
        ..RenderOptions::default()
    };
    let out = model::render_image(&store, &cfg, &burst, &opts)?;
    let mut image = out.image;
    if a.bilateral == OnOff::On {
        image = training::default_bilateral(&image, &burst)?;
    }
    noise_model::delinearize(&image, &burst.transform()?).clamp01().write_png(&a.out)?;
    out.depth.write_pfm(depth_path(&a.out))?;
    if let Some(p) = &a.diag_csv {
        model::write_diagnostics_csv(p, &out.diagnostics)?;
    }
    let holes = out.unrenderable.iter().filter(|&&u| u).count();
    if holes > 0 {
        eprintln!("{holes} pixels had no valid source view");
    }
    Ok(())
}

fn eval(a: Eval) -> CliResult {
    let burst = NoisyBurst::load(&a.burst)?;
    let pred = LinearImage::read_png(&a.pred)?;
    let gt = match &a.gt {
        Some(p) => LinearImage::read_png(p)?,
        None => {
            let clean = burst.clean_target().ok_or_else(|| invalid("burst has no clean target; pass --gt"))?;
            noise_model::delinearize(clean, &burst.transform()?).clamp01()
        }
    };
    let want = |m: Metric| a.metrics.contains(&m);
    let mut row = EvalRow {
        gain: burst.meta.gain,
        psnr: f64::NAN,
        ssim: f64::NAN,
        depth_mse: f64::NAN,
        psnr_noisy: f64::NAN,
        psnr_average: f64::NAN,
        output: LinearImage::new(0, 0),
    };
    if want(Metric::Psnr) {
        row.psnr = training::psnr(&pred, &gt)?;
    }
    if want(Metric::Ssim) {
        row.ssim = training::ssim(&pred, &gt)?;
    }
    if want(Metric::Depth) {
        let gt_depth = burst
            .depths
            .get(burst.target_index)
            .ok_or_else(|| invalid("burst has no ground-truth depth"))?;
        let p = a.pred_depth.clone().unwrap_or_else(|| depth_path(&a.pred));
        row.depth_mse = training::depth_mse(&DepthMap::read_pfm(&p)?, gt_depth)?;
    }
    training::write_eval_csv(&a.out, std::slice::from_ref(&row))?;
    if want(Metric::Displacement) {
        let report = training::eval_displacement_bins(&pred, &gt, &burst.geometry()?)?;
        let p = a.displacement_csv.clone().unwrap_or_else(|| a.out.with_extension("displacement.csv"));
        training::write_displacement_csv(&p, &report.bins)?;
    }
    Ok(())
}

fn plot(a: Plot) -> CliResult {
    let csv_err = |e: csv::Error| Failure {
        code: "format",
        message: format!("{}: {e}", a.csv.display()),
    };
    let mut reader = csv::Reader::from_path(&a.csv).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| invalid(format!("no column {name:?} in {}", a.csv.display())))
    };
    let (xi, yi) = (column(&a.x)?, column(&a.y)?);
    let mut points = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let num = |i: usize| rec.get(i).and_then(|v| v.trim().parse::<f64>().ok());
        if let (Some(x), Some(y)) = (num(xi), num(yi)) {
            if x.is_finite() && y.is_finite() {
                points.push((x, y));
            }
        }
    }
    if points.is_empty() {
        return Err(invalid(format!("no numeric rows for {} / {}", a.x, a.y)));
    }
    std::fs::write(&a.out, plot::line_svg(&points, &a.x, &a.y)).map_err(|e| Failure::from(Error::Io {
        path: a.out.clone(),
        source: e,
    }))
}

/// `NAN_THREADS=1` is the reference mode; any other count sizes the pool.
fn configure_threads() -> CliResult {
    let Ok(v) = std::env::var("NAN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid(format!("NAN_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| invalid(format!("thread pool: {e}")))
}

/// Creates missing parent directories up front, so a long run cannot fail at the final write.
fn create_parents<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> CliResult {
    for p in paths {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Failure::from(Error::Io {
                path: dir.to_path_buf(),
                source: e,
            }))?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    configure_threads()?;
    match &cli.command {
        Command::GenScene(a) => create_parents([&a.out])?,
        Command::GenBurst(a) => create_parents([&a.out])?,
        Command::Train(a) => create_parents(std::iter::once(&a.out).chain(&a.loss_csv))?,
        Command::Denoise(a) => create_parents(std::iter::once(&a.out).chain(&a.diag_csv))?,
        Command::Eval(a) => create_parents(std::iter::once(&a.out).chain(&a.displacement_csv))?,
        Command::Plot(a) => create_parents([&a.out])?,
    }
    match cli.command {
        Command::GenScene(a) => gen_scene(a),
        Command::GenBurst(a) => gen_burst(a),
        Command::Train(a) => train(a),
        Command::Denoise(a) => denoise(a),
        Command::Eval(a) => eval(a),
        Command::Plot(a) => plot(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error {}: {}", f.code, f.message.replace('\n', " "));
            ExitCode::from(if f.code == "invalid-argument" { 2 } else { 1 })
        }
    }
}
