//! Command-line surface: merge, train, eval, profile, bench.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime failures.
//! Diagnostics go to stderr; results go to stdout or files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cenhdr::image_io;
use cenhdr::metrics;
use cenhdr::model::{self, AttentionVariant, ModelConfig};
use cenhdr::pipeline::{self, ExposureBracket};
use cenhdr::profiler;
use cenhdr::training::{self, LoadOptions, TrainConfig, TrainControl};
use cenhdr::weights_io;

#[derive(Parser)]
#[command(name = "cenhdr", version, about = "Computationally efficient multi-exposure HDR merging")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge three LDR exposures into one HDR image
    Merge(MergeArgs),
    /// Train the network on a scene dataset
    Train(TrainArgs),
    /// Evaluate weights on a dataset with ground truth
    Eval(EvalArgs),
    /// Closed-form parameter and MAC accounting
    Profile(ProfileArgs),
    /// Wall-clock benchmark of the full pipeline
    Bench(BenchArgs),
}

#[derive(Args)]
struct MergeArgs {
    /// The three LDR frames, under- to over-exposed
    #[arg(long, num_args = 3, required = true, value_names = ["UNDER", "REF", "OVER"])]
    inputs: Vec<PathBuf>,
    /// Text file with three EV lines
    #[arg(long)]
    exposures: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Output PFM path
    #[arg(long)]
    out: PathBuf,
    /// Optional tone-mapped 8-bit PNG preview
    #[arg(long)]
    tonemapped: Option<PathBuf>,
    /// Overrides the gamma stored in the weights file
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 5000.0)]
    mu: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root: one directory per scene
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Directory of `<scene>.pfm` teacher predictions
    #[arg(long)]
    teacher_dir: Option<PathBuf>,
    /// Train on ground truth only; teacher files are never opened
    #[arg(long)]
    no_kd: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Flat key = value configuration file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write a checkpoint every N epochs (0 disables)
    #[arg(long, default_value_t = 100)]
    checkpoint_every: usize,
    /// Loss log CSV path (default: <out>.loss.csv)
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Data-loading parallelism
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Also write the report as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 5000.0)]
    mu: f64,
    /// Data-loading parallelism
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    #[arg(long, default_value_t = 500)]
    runs: usize,
    #[arg(long, default_value_t = 50)]
    warmup: usize,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

/// Reports a post-parse usage error the same way clap does: exit code 2.
fn usage_error(msg: &str) -> ! {
    eprintln!("error: {msg}");
    eprintln!("\nFor more information, try '--help'.");
    std::process::exit(2);
}

pub fn main() {
    if let Ok(threads) = std::env::var("CENHDR_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                // a failure here means the pool already exists, which is fine
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => usage_error(&format!("CENHDR_THREADS must be a positive integer, got {threads:?}")),
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Merge(args) => cmd_merge(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Profile(args) => cmd_profile(args),
        Command::Bench(args) => cmd_bench(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Flat key = value configuration files
// ---------------------------------------------------------------------------

fn parse_pair<T: std::str::FromStr>(value: &str, key: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| anyhow!("config key `{key}`: cannot parse {value:?}"))
}

fn parse_tuple2(value: &str, key: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        bail!("config key `{key}`: expected two comma-separated integers, got {value:?}");
    }
    Ok((parse_pair(parts[0], key)?, parse_pair(parts[1], key)?))
}

fn parse_tuple3(value: &str, key: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        bail!("config key `{key}`: expected three comma-separated integers, got {value:?}");
    }
    Ok((parse_pair(parts[0], key)?, parse_pair(parts[1], key)?, parse_pair(parts[2], key)?))
}

/// Applies a flat `key = value` file over the default model and training
/// configurations. Unknown keys are rejected.
fn load_config_file(path: &Path) -> Result<(ModelConfig, TrainConfig)> {
    let mut mc = ModelConfig::default();
    let mut tc = TrainConfig::default();
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected `key = value`, got {raw:?}", path.display(), lineno + 1);
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "encoder_channels" => mc.encoder_channels = parse_tuple2(value, key)?,
            "merge_channels" => mc.merge_channels = parse_pair(value, key)?,
            "scram_spatial_channels" => mc.scram_spatial_channels = parse_pair(value, key)?,
            "scram_hidden" => mc.scram_hidden = parse_tuple3(value, key)?,
            "scram_shared_across_frames" => {
                mc.scram_shared_across_frames = parse_pair(value, key)?
            }
            "conv_m1_shared" => mc.conv_m1_shared = parse_pair(value, key)?,
            "upscale_factor" => mc.upscale_factor = parse_pair(value, key)?,
            "gamma" => mc.gamma = parse_pair(value, key)?,
            "attention" => {
                mc.attention = AttentionVariant::parse(value)
                    .ok_or_else(|| anyhow!("config key `attention`: unknown variant {value:?}"))?
            }
            "patch_size" => tc.patch_size = parse_pair(value, key)?,
            "stride" => tc.stride = parse_pair(value, key)?,
            "batch_size" => tc.batch_size = parse_pair(value, key)?,
            "epochs" => tc.epochs = parse_pair(value, key)?,
            "lr0" => tc.lr0 = parse_pair(value, key)?,
            "lr_fixed_epochs" => tc.lr_fixed_epochs = parse_pair(value, key)?,
            "lr_decay" => tc.lr_decay = parse_pair(value, key)?,
            "lr_decay_every" => tc.lr_decay_every = parse_pair(value, key)?,
            "alpha" => tc.alpha = parse_pair(value, key)?,
            "kd" => tc.kd_enabled = parse_pair(value, key)?,
            "mu" => tc.mu = parse_pair(value, key)?,
            "seed" => tc.seed = parse_pair(value, key)?,
            _ => bail!("{}:{}: unknown config key `{key}`", path.display(), lineno + 1),
        }
    }
    Ok((mc, tc))
}

fn load_configs(path: Option<&Path>) -> Result<(ModelConfig, TrainConfig)> {
    match path {
        Some(p) => load_config_file(p),
        None => Ok((ModelConfig::default(), TrainConfig::default())),
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_merge(args: MergeArgs) -> Result<()> {
    let t0 = Instant::now();
    let (weights, mut config) =
        weights_io::load_weights(&args.weights).context("loading weights")?;
    if let Some(gamma) = args.gamma {
        config.gamma = gamma;
    }
    let evs = image_io::read_exposures(&args.exposures)?;
    let frames: Vec<_> = args
        .inputs
        .iter()
        .map(image_io::read_ldr)
        .collect::<Result<_, _>>()
        .context("reading LDR inputs")?;
    let frames: [_; 3] = frames.try_into().expect("clap enforces three inputs");
    let bracket = ExposureBracket::from_evs(frames, evs)?;
    let t_load = t0.elapsed();

    let t1 = Instant::now();
    let ([l1, l2, l3], pad) = pipeline::assemble_inputs(&bracket, config.gamma)?;
    let t_assemble = t1.elapsed();

    let t2 = Instant::now();
    let hdr = model::forward(&config, &weights, &l1, &l2, &l3)?;
    let t_forward = t2.elapsed();

    let t3 = Instant::now();
    let out = pipeline::crop_output(&hdr, &pad)?;
    image_io::write_pfm(&out, &args.out).context("writing HDR output")?;
    if let Some(path) = &args.tonemapped {
        image_io::write_tonemapped(&out, path, args.mu).context("writing tonemapped preview")?;
    }
    let t_write = t3.elapsed();

    eprintln!(
        "merged {}x{} in {:.3}s (load {:.3}s, assemble {:.3}s, forward {:.3}s, write {:.3}s)",
        out.width(),
        out.height(),
        t0.elapsed().as_secs_f64(),
        t_load.as_secs_f64(),
        t_assemble.as_secs_f64(),
        t_forward.as_secs_f64(),
        t_write.as_secs_f64(),
    );
    Ok(())
}

fn load_scenes_with_workers(
    data: &Path,
    opts: &LoadOptions,
    workers: usize,
) -> Result<(Vec<training::SceneSample>, training::LoadReport)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .context("building data-loading pool")?;
    let loaded = pool.install(|| training::load_dataset(data, opts))?;
    Ok(loaded)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (config, mut tc) = load_configs(args.config.as_deref())?;
    if let Some(epochs) = args.epochs {
        tc.epochs = epochs;
    }
    if let Some(alpha) = args.alpha {
        tc.alpha = alpha;
    }
    if let Some(seed) = args.seed {
        tc.seed = seed;
    }
    if args.no_kd {
        tc.kd_enabled = false;
    }

    let opts = LoadOptions {
        load_teacher: tc.kd_enabled,
        teacher_dir: args.teacher_dir.clone(),
    };
    let (scenes, report) = load_scenes_with_workers(&args.data, &opts, args.workers)?;
    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }
    eprintln!(
        "training on {} scene(s), {} epoch(s), kd={}, seed={}",
        scenes.len(),
        tc.epochs,
        tc.kd_enabled,
        tc.seed
    );

    let mut weights = model::build_model(&config, tc.seed)?;
    let checkpoint_every = args.checkpoint_every;
    let out = args.out.clone();
    let log = training::train(&scenes, &config, &mut weights, &tc, |stats, snapshot| {
        eprintln!("epoch {:>4}  lr {:.3e}  loss {:.6}", stats.epoch, stats.lr, stats.loss);
        if checkpoint_every > 0 && (stats.epoch + 1) % checkpoint_every == 0 {
            let path = checkpoint_path(&out, stats.epoch);
            if let Err(err) = weights_io::save_weights(snapshot, &config, &path) {
                eprintln!("warning: failed to write checkpoint {}: {err}", path.display());
            }
        }
        TrainControl::Continue
    })?;

    weights_io::save_weights(&weights, &config, &args.out).context("writing final weights")?;
    let log_path = args
        .loss_log
        .unwrap_or_else(|| args.out.with_extension("loss.csv"));
    std::fs::write(&log_path, training::loss_log_csv(&log))
        .with_context(|| format!("writing loss log {}", log_path.display()))?;
    eprintln!("wrote {} and {}", args.out.display(), log_path.display());
    Ok(())
}

fn checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("weights");
    out.with_file_name(format!("{stem}.epoch{:04}.cenh", epoch + 1))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (weights, config) = weights_io::load_weights(&args.weights).context("loading weights")?;
    let opts = LoadOptions { load_teacher: false, teacher_dir: None };
    let (scenes, report) = load_scenes_with_workers(&args.data, &opts, args.workers)?;
    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }
    let metrics_report = metrics::evaluate(&scenes, &config, &weights, args.mu)?;
    print!("{}", metrics_report.to_text());
    if let Some(path) = &args.csv {
        std::fs::write(path, metrics_report.to_csv())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_profile(args: ProfileArgs) -> Result<()> {
    if args.height % 2 != 0 || args.width % 2 != 0 {
        usage_error(&format!(
            "--height and --width must be even, got {}x{}",
            args.width, args.height
        ));
    }
    let (config, _) = load_configs(args.config.as_deref())?;
    config.validate()?;
    let report = profiler::count_macs(&config, args.height, args.width)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report.to_json())?);
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    if args.height % 2 != 0 || args.width % 2 != 0 {
        usage_error(&format!(
            "--height and --width must be even, got {}x{}",
            args.width, args.height
        ));
    }
    if args.runs == 0 {
        usage_error("--runs must be at least 1");
    }
    let (weights, config) = weights_io::load_weights(&args.weights).context("loading weights")?;
    let stats = profiler::bench_runtime(
        &config,
        &weights,
        args.height,
        args.width,
        args.runs,
        args.warmup,
        args.seed,
    )?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&stats)?);
    } else {
        let mut report = profiler::count_macs(&config, args.height, args.width)?;
        report.runtime = Some(stats);
        print!("{}", report.to_text());
    }
    Ok(())
}
