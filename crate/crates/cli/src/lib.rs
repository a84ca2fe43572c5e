//! The `vicregl` command line.

pub mod viz;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{s, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vicregl::data::{load_dataset, write_shapes, Dataset, ShapesConfig};
use vicregl::eval::{linear_probe_classify, linear_probe_segment, ProbeConfig, ProbeResult};
use vicregl::geometry::{apply_view, position_grid, sample_view_spec, AugmentConfig};
use vicregl::losses::{select_matches, ViewBatch};
use vicregl::model::Model;
use vicregl::nn::Mode;
use vicregl::trainer::{load_model, pretrain, TrainConfig, CONFIG_FILE};
use vicregl::verify::{run_suite, Fault, Group, SuiteConfig};

use viz::{render_svg, Scene};

#[derive(Debug, Parser)]
#[command(
    name = "vicregl",
    version,
    about = "Global and local VICReg pretraining at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic shapes dataset with labels and masks.
    GenData(GenDataArgs),
    /// Pretrain an encoder and write checkpoints plus a metrics log.
    Pretrain(PretrainArgs),
    /// Linear classification probe on a frozen checkpoint.
    EvalCls(EvalArgs),
    /// Linear segmentation probe on a frozen checkpoint.
    EvalSeg(EvalArgs),
    /// Plot location-based and feature-based matches between two views.
    VisualizeMatches(VisualizeArgs),
    /// Run the verification suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Dataset file written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// TOML run configuration; flags below take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config field by dotted path, e.g. `--set loss.use_feature=false`.
    #[arg(long = "set", value_parser = key_value)]
    pub overrides: Vec<(String, String)>,
    /// Weight of the global criterion; 1 trains plain VICReg.
    #[arg(long, value_parser = unit_interval)]
    pub alpha: Option<f64>,
    /// Matches kept per direction between large views.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub gamma1: Option<u64>,
    /// Matches kept per direction when a small view is involved.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub gamma2: Option<u64>,
    #[arg(long)]
    pub multicrop: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Where the result record goes; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Learning rates to sweep.
    #[arg(long, value_delimiter = ',')]
    pub lrs: Option<Vec<f64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = unit_interval)]
    pub holdout: Option<f64>,
    /// Probe every encoder stage instead of the last one.
    #[arg(long)]
    pub concat_stages: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Pretrained weights; without it a freshly initialized model is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Run configuration for the fresh model when no checkpoint is given.
    #[arg(long, conflicts_with = "checkpoint")]
    pub config: Option<PathBuf>,
    /// Sample to plot.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Most match lines drawn per panel.
    #[arg(long, default_value_t = 10)]
    pub max_lines: usize,
    /// Use one crop for both views.
    #[arg(long)]
    pub same_view: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Only run these groups: geometry, match, loss, grad.
    #[arg(long)]
    pub filter: Vec<Group>,
    /// Deliberately break the code under test to confirm the suite notices.
    #[arg(long)]
    pub inject_fault: Option<Fault>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    Usage(String),
    /// Anything that went wrong while running; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<vicregl::Error> for CliError {
    fn from(e: vicregl::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::EvalCls(a) => cmd_eval(&a, true),
        Command::EvalSeg(a) => cmd_eval(&a, false),
        Command::VisualizeMatches(a) => visualize(&a),
        Command::Verify(a) => verify(&a),
    }
}

fn write_file(path: &Path, body: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, body).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let cfg = ShapesConfig::for_canvas(a.size, a.seed);
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    let ds = write_shapes(&cfg, a.n as usize, &a.out)?;
    println!(
        "wrote {} samples of {}x{} with {} classes to {}",
        ds.len(),
        a.size,
        a.size,
        ds.num_classes,
        a.out.display()
    );
    Ok(())
}

/// Config file, then `--set` overrides, then dedicated flags.
pub fn resolve_train_config(a: &PretrainArgs) -> CliResult<TrainConfig> {
    let usage = |e: vicregl::Error| CliError::Usage(e.to_string());
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::load(path).map_err(usage)?,
        None => TrainConfig::default(),
    };
    for (k, v) in &a.overrides {
        cfg.set(k, v).map_err(usage)?;
    }
    if let Some(alpha) = a.alpha {
        cfg.loss.alpha = alpha;
    }
    if let Some(g) = a.gamma1 {
        cfg.loss.gamma_large = g as usize;
    }
    if let Some(g) = a.gamma2 {
        cfg.loss.gamma_small = g as usize;
    }
    if a.multicrop {
        cfg.views.multicrop = true;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        cfg.epochs = epochs;
        cfg.warmup_epochs = cfg.warmup_epochs.min(epochs);
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn load_data(path: &Path) -> CliResult<Dataset> {
    load_dataset(path).map_err(|e| CliError::Runtime(format!("cannot load dataset: {e}")))
}

fn cmd_pretrain(a: &PretrainArgs) -> CliResult<()> {
    let cfg = resolve_train_config(a)?;
    let data = load_data(&a.data)?;
    let out = pretrain(&cfg, &data, &a.out_dir, a.resume)?;
    if let Some(last) = out.records.last() {
        println!(
            "step {} total {:.4} global {:.4} location {:.4} feature {:.4} std_min {:.4}",
            last.step, last.total, last.global_vicreg, last.local_location, last.local_feature, last.std_min
        );
    }
    println!("{} updates, final checkpoint {}", out.steps, out.checkpoint.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs, classify: bool) -> CliResult<()> {
    if !a.checkpoint.is_file() {
        return Err(CliError::Runtime(format!(
            "checkpoint not found: {}",
            a.checkpoint.display()
        )));
    }
    let mut cfg = ProbeConfig {
        concat_stages: a.concat_stages,
        seed: a.seed,
        ..ProbeConfig::default()
    };
    if let Some(lrs) = &a.lrs {
        cfg.lrs = lrs.clone();
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(h) = a.holdout {
        cfg.holdout = h;
    }
    if cfg.lrs.is_empty() || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(CliError::Usage(
            "need at least one learning rate, epoch and sample per batch".into(),
        ));
    }
    let (mut model, _, step) = load_model(&a.checkpoint)
        .map_err(|e| CliError::Runtime(format!("cannot load checkpoint {}: {e}", a.checkpoint.display())))?;
    let data = load_data(&a.data)?;
    let result: ProbeResult = if classify {
        linear_probe_classify(&mut model, &data, &cfg)?
    } else {
        linear_probe_segment(&mut model, &data, &cfg)?
    };
    let (before, after) = result.backbone_checksum;
    if before != after {
        return Err(CliError::Runtime(format!(
            "backbone changed during probing: checksum {before:016x} -> {after:016x}"
        )));
    }
    let dir = match &a.out_dir {
        Some(d) => d.clone(),
        None => a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let name = if classify { "eval_cls.json" } else { "eval_seg.json" };
    let path = dir.join(name);
    let mut body = serde_json::to_string_pretty(&result).expect("results serialize");
    body.push('\n');
    write_file(&path, body.as_bytes())?;
    for (lr, v) in &result.sweep {
        println!("lr {lr:<8} {} {v:.4}", result.metric);
    }
    println!(
        "checkpoint step {step}: best lr {} {} {:.4}; backbone frozen (checksum {before:016x})",
        result.best_lr, result.metric, result.value
    );
    println!("wrote {}", path.display());
    Ok(())
}

/// Samples the two views, runs the model and selects matches for [`visualize`].
pub fn build_scene(
    model: &mut Model,
    cfg: &TrainConfig,
    data: &Dataset,
    index: usize,
    same_view: bool,
    max_lines: usize,
    seed: u64,
) -> CliResult<Scene> {
    let sample = data
        .samples
        .get(index)
        .ok_or_else(|| CliError::Usage(format!("index {index} is out of range for {} samples", data.len())))?;
    let spec = &cfg.views.large;
    let enc = &model.config().encoder;
    let map = (enc.map_size(spec.out_size.0)?, enc.map_size(spec.out_size.1)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut crops = Vec::new();
    for _ in 0..2 {
        crops.push(sample_view_spec(
            &mut rng,
            (sample.height(), sample.width()),
            spec.area_range,
            spec.aspect_range,
            spec.out_size,
            spec.flip_prob,
        )?);
    }
    if same_view {
        crops[1] = crops[0];
    }
    let mut images = Array4::zeros((2, 3, spec.out_size.0, spec.out_size.1));
    let mut grids = Vec::new();
    for (v, crop) in crops.iter().enumerate() {
        let img = apply_view(sample, crop, &AugmentConfig::off(), &mut rng)?;
        images.slice_mut(s![v, .., .., ..]).assign(&img);
        grids.push(position_grid(crop, map)?.with_view_id(v));
    }
    let fwd = model.forward_view(images.view(), Mode::Eval)?;
    let batch = |v: usize| ViewBatch {
        maps: fwd.maps.slice(s![v..v + 1, .., .., ..]),
        global: fwd.global.slice(s![v..v + 1, ..]),
        grids: &grids[v..v + 1],
        is_large: true,
    };
    let (a, b) = (batch(0), batch(1));
    let location = select_matches(&a, &b, true, &cfg.loss)?.remove(0);
    let feature = select_matches(&a, &b, false, &cfg.loss)?.remove(0);
    Ok(Scene {
        image: sample.pixels.clone(),
        crops: [crops[0], crops[1]],
        grids: [grids[0].clone(), grids[1].clone()],
        location,
        feature,
        max_lines,
    })
}

fn visualize(a: &VisualizeArgs) -> CliResult<()> {
    let (mut model, cfg) = match &a.checkpoint {
        Some(path) => {
            let (model, cfg, _) = load_model(path)
                .map_err(|e| CliError::Runtime(format!("cannot load checkpoint {}: {e}", path.display())))?;
            (model, cfg)
        }
        None => {
            let cfg = match &a.config {
                Some(p) => TrainConfig::load(p).map_err(|e| CliError::Usage(e.to_string()))?,
                None => TrainConfig::default(),
            };
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            (Model::new(&cfg.model_config())?, cfg)
        }
    };
    let data = load_data(&a.data)?;
    let scene = build_scene(&mut model, &cfg, &data, a.index, a.same_view, a.max_lines, a.seed)?;
    let path = a.out_dir.join(format!("matches_{:05}.svg", a.index));
    write_file(&path, render_svg(&scene).as_bytes())?;
    write_file(&a.out_dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    let [nl, nf] = scene.lines_per_panel();
    println!("{nl} location and {nf} feature match lines, wrote {}", path.display());
    Ok(())
}

fn verify(a: &VerifyArgs) -> CliResult<()> {
    let cfg = SuiteConfig {
        seed: a.seed,
        groups: a.filter.clone(),
        fault: a.inject_fault,
        ..SuiteConfig::default()
    };
    let report = run_suite(&cfg);
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        Err(CliError::Runtime(format!("{failed} verification checks failed")))
    }
}
