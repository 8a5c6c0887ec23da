//! The `mobivit` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mobivit_core::config::PRESET_NAMES;
use mobivit_core::flops::{self, FlopsReport};
use mobivit_core::merge::weight_grids;
use mobivit_core::{build_model, ModelConfig};

use crate::data::{preprocess, SyntheticKind};
use crate::error::{CliError, ExitStatus, Result};
use crate::gradsuite;
use crate::pgm;
use crate::run::{load_checkpoint, DataSource, RunConfig, RunManifest};
use crate::train::{self, LoopOptions};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "MOBIVIT_OUT";

#[derive(Debug, Parser)]
#[command(name = "mobivit", version, about = "Mobile-level vision transformer toolkit")]
pub struct Cli {
    /// Seed for every random decision (default 0, or the config's train.seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the architecture summary of a preset or config.
    Describe(ModelArgs),
    /// Count multiply-accumulates and parameters per layer.
    Flops(FlopsArgs),
    /// Run central-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Train a model and write manifest, history and checkpoint.
    Train(TrainArgs),
    /// Print top-1 accuracy of a checkpoint on a validation set.
    Eval(EvalArgs),
    /// Write adaptive merge weights of each image as PGM grids.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// One of 880M, 610M, 310M, desk-64, desk-32.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// TOML run file.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Structured,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
    /// Compression curve over the three full presets instead of one report.
    #[arg(long, conflicts_with_all = ["preset", "config"])]
    pub curve: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "desk-32")]
    pub preset: String,
    /// `all` or a comma-separated list of check names.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    pub ops: Vec<String>,
    /// Corrupt every backward pass (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Synthetic training data of this kind.
    #[arg(long, value_enum, conflicts_with = "cifar10")]
    pub synthetic: Option<SyntheticArg>,
    #[arg(long, default_value_t = 200)]
    pub n_train: usize,
    #[arg(long, default_value_t = 100)]
    pub n_val: usize,
    /// Classes of the synthetic set (default: 2 for two_gaussians, else the model's).
    #[arg(long)]
    pub classes: Option<usize>,
    /// Synthetic image side (default: the model's input size).
    #[arg(long)]
    pub size: Option<usize>,
    /// Directory with the CIFAR-10 binary batches.
    #[arg(long)]
    pub cifar10: Option<PathBuf>,
    #[arg(long)]
    pub train_limit: Option<usize>,
    #[arg(long)]
    pub val_limit: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SyntheticArg {
    TwoGaussians,
    GridPatterns,
    CenteredPatterns,
}

impl From<SyntheticArg> for SyntheticKind {
    fn from(a: SyntheticArg) -> Self {
        match a {
            SyntheticArg::TwoGaussians => SyntheticKind::TwoGaussians,
            SyntheticArg::GridPatterns => SyntheticKind::GridPatterns,
            SyntheticArg::CenteredPatterns => SyntheticKind::CenteredPatterns,
        }
    }
}

impl DataArgs {
    fn source(&self, model: &ModelConfig) -> Option<DataSource> {
        if let Some(kind) = self.synthetic {
            let kind = SyntheticKind::from(kind);
            let default_k = if kind == SyntheticKind::TwoGaussians { 2 } else { model.num_classes };
            return Some(DataSource::Synthetic {
                kind,
                n_train: self.n_train,
                n_val: self.n_val,
                classes: self.classes.unwrap_or(default_k),
                size: self.size.unwrap_or(model.input_size),
                sigma: crate::data::DEFAULT_SIGMA,
            });
        }
        self.cifar10.as_ref().map(|dir| DataSource::Cifar10 {
            dir: dir.clone(),
            train_limit: self.train_limit,
            val_limit: self.val_limit,
        })
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Replay a manifest written by an earlier run.
    #[arg(long, conflicts_with_all = ["preset", "config", "synthetic", "cifar10", "epochs", "batch", "lr", "threads"])]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory (default: $MOBIVIT_OUT, else ./mobivit-out).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Take the data section from this run file.
    #[arg(long, conflicts_with_all = ["synthetic", "cifar10"])]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of binary PGM/PPM images (`.pgm`, `.ppm`).
    #[arg(long)]
    pub images: PathBuf,
    /// Output directory (default: $MOBIVIT_OUT, else ./mobivit-out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Draw each grid cell as a `scale×scale` block.
    #[arg(long, default_value_t = 1)]
    pub scale: usize,
}

fn default_out(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("mobivit-out"))
}

fn run_config(args: &ModelArgs) -> Result<(RunConfig, Option<PathBuf>)> {
    match (&args.preset, &args.config) {
        (Some(p), None) => {
            ModelConfig::preset(p)?;
            Ok((RunConfig::from_preset(p), None))
        }
        (None, Some(path)) => Ok((RunConfig::read(path)?, Some(path.clone()))),
        _ => Err(CliError::Config(format!(
            "give --preset (one of {}) or --config",
            PRESET_NAMES.join(", ")
        ))),
    }
}

/// Parses `args` and runs the subcommand, writing reports to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> ExitStatus
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let status = if e.use_stderr() { ExitStatus::Config } else { ExitStatus::Success };
            let _ = e.print();
            return status;
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => ExitStatus::Success,
        Err(e) => {
            eprintln!("error: {e}");
            e.status()
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Describe(a) => describe(a, out),
        Command::Flops(a) => cmd_flops(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Train(a) => cmd_train(a, cli.seed, out),
        Command::Eval(a) => eval(a, cli.seed.unwrap_or(0), out),
        Command::Visualize(a) => visualize(a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .and_then(|()| out.flush())
        .map_err(|e| CliError::io("<stdout>", e))
}

pub fn describe_text(cfg: &ModelConfig) -> Result<String> {
    let report = flops::count(cfg)?;
    Ok(format!(
        "preset={} input={}\nchannel={} depth={} heads={} mlp_ratio={}\ntokens={} layout={} seq_len={}\nembed={} merge={} positional={} droppath_max={} classes={}\nparams={} macs={}\n",
        cfg.preset_name,
        cfg.input_size,
        cfg.channel,
        cfg.depth,
        cfg.heads,
        cfg.mlp_ratio,
        cfg.num_patches(),
        cfg.token_layout(),
        cfg.seq_len(),
        cfg.embed.short_name(),
        cfg.merge.as_str(),
        cfg.positional,
        cfg.droppath_max,
        cfg.num_classes,
        report.total_params,
        report.total_macs,
    ))
}

fn describe(a: &ModelArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = run_config(a)?.0.model_config()?;
    emit(out, &describe_text(&cfg)?)
}

fn cmd_flops(a: &FlopsArgs, out: &mut dyn Write) -> Result<()> {
    if a.curve {
        let cfgs = ["880M", "610M", "310M"]
            .iter()
            .map(|p| ModelConfig::preset(p))
            .collect::<mobivit_core::Result<Vec<_>>>()?;
        let rows = flops::compression_curve(&cfgs)?;
        let text = match a.format {
            Format::Table => flops::render_curve(&rows),
            Format::Structured => serde_json::to_string_pretty(&rows).expect("curve serializes") + "\n",
        };
        return emit(out, &text);
    }
    let cfg = run_config(&a.model)?.0.model_config()?;
    let report = flops::count(&cfg)?;
    let text = match a.format {
        Format::Table => report.render_table(),
        Format::Structured => serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    };
    emit(out, &text)
}

/// Parses the structured `flops` output back.
pub fn parse_flops_report(text: &str) -> Result<FlopsReport> {
    serde_json::from_str(text).map_err(|e| CliError::Config(format!("bad flops report: {e}")))
}

fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = ModelConfig::preset(&a.preset)?;
    if !a.preset.starts_with("desk-") {
        return Err(CliError::Config(format!(
            "gradcheck runs on desk presets only (finite differences on {} parameters would take hours)",
            cfg.preset_name
        )));
    }
    let known = gradsuite::names();
    let only: Vec<String> = if a.ops.iter().any(|o| o == "all") {
        Vec::new()
    } else {
        for o in &a.ops {
            if !known.contains(&o.as_str()) {
                return Err(CliError::Config(format!("unknown check {o}; known: all, {}", known.join(", "))));
            }
        }
        a.ops.clone()
    };
    let started = Instant::now();
    let results = gradsuite::run(&only, &cfg, a.inject_fault)?;
    let mut text = String::new();
    for r in &results {
        text.push_str(&format!(
            "{:<20} max_rel_err={:.3e} {}\n",
            r.name,
            r.max_rel_error,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    emit(out, &text)?;
    eprintln!("gradcheck finished in {:.1?}", started.elapsed());
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "{} check(s) above {:e}: {}",
            failed.len(),
            gradsuite::THRESHOLD,
            failed.join(", ")
        )))
    }
}

fn manifest_for(a: &TrainArgs, seed: Option<u64>) -> Result<RunManifest> {
    if let Some(path) = &a.manifest {
        let mut m = RunManifest::read(path)?;
        if let Some(dir) = &a.out {
            m.output_dir = dir.clone();
        }
        if let Some(s) = seed {
            if s != m.seed {
                return Err(CliError::Config(format!("--seed {s} differs from the manifest's seed {}", m.seed)));
            }
        }
        return Ok(m);
    }
    let (mut rc, config_path) = run_config(&a.model)?;
    let model = rc.model_config()?;
    if let Some(src) = a.data.source(&model) {
        rc.data = Some(src);
    }
    if let Some(e) = a.epochs {
        rc.train.epochs = e;
    }
    if let Some(b) = a.batch {
        rc.train.batch = b;
    }
    if let Some(lr) = a.lr {
        rc.train.lr = lr;
    }
    if let Some(t) = a.threads {
        rc.threads = t;
    }
    if let Some(s) = seed {
        rc.train.seed = s;
    }
    rc.validate()?;
    if rc.train.seed > i64::MAX as u64 {
        return Err(CliError::Config(format!("seed {} exceeds 2^63-1", rc.train.seed)));
    }
    let data = rc
        .data
        .clone()
        .ok_or_else(|| CliError::Config("no training data: give --synthetic, --cifar10 or a [data] table".into()))?;
    Ok(RunManifest {
        subcommand: "train".into(),
        config_path,
        seed: rc.train.seed,
        output_dir: default_out(a.out.as_deref()),
        threads: rc.threads,
        model,
        train: rc.train,
        data: Some(data),
        preprocess: rc.preprocess,
    })
}

fn cmd_train(a: &TrainArgs, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let m = manifest_for(a, seed)?;
    let path = m.write()?;
    eprintln!("manifest written to {}", path.display());
    let data = m.data.as_ref().ok_or_else(|| CliError::Config("manifest has no data section".into()))?;
    let (train_set, val_set) = data.load(m.seed)?;
    let model = build_model(&m.model, m.seed)?;
    let opts = LoopOptions {
        preprocess: m.preprocess.clone(),
        out_dir: Some(m.output_dir.clone()),
        threads: m.threads,
    };
    let mut train_cfg = m.train.clone();
    train_cfg.seed = m.seed;
    let started = Instant::now();
    let mut status = Ok(());
    let outcome = train::train(model, train_set.as_dataset(), val_set.as_dataset(), &train_cfg, &opts, |r| {
        let line = format!(
            "epoch {} train_loss={:.6} val_accuracy={:.4} lr={:.3e}\n",
            r.epoch, r.train_loss, r.val_accuracy, r.lr
        );
        if status.is_ok() {
            status = emit(out, &line);
        }
    })?;
    status?;
    emit(
        out,
        &match outcome.best_val_accuracy {
            Some(acc) => format!("best_val_accuracy={acc:.4}\n"),
            None => "no epochs run; initial checkpoint written\n".to_string(),
        },
    )?;
    eprintln!("trained in {:.1?}; outputs in {}", started.elapsed(), m.output_dir.display());
    Ok(())
}

fn eval(a: &EvalArgs, seed: u64, out: &mut dyn Write) -> Result<()> {
    let (model, meta) = load_checkpoint(&a.checkpoint)?;
    let source = match &a.config {
        Some(p) => RunConfig::read(p)?.data,
        None => a.data.source(&model.cfg),
    }
    .ok_or_else(|| CliError::Config("no evaluation data: give --synthetic, --cifar10 or --config".into()))?;
    let val = source.load_val(seed)?;
    let ds = val.as_dataset();
    let acc = train::evaluate(&model, ds, &meta.preprocess, a.batch.max(1))?;
    emit(out, &format!("top1={acc:.4} n={}\n", ds.len()))
}

fn visualize(a: &VisualizeArgs, out: &mut dyn Write) -> Result<()> {
    let (model, meta) = load_checkpoint(&a.checkpoint)?;
    if !model.is_apm() {
        return Err(CliError::Config(format!(
            "checkpoint uses merge mode {}; weight grids exist only for adaptive patch merging (apm)",
            model.cfg.merge.as_str()
        )));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&a.images)
        .map_err(|e| CliError::io(&a.images, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::io(
            &a.images,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no .pgm or .ppm images"),
        ));
    }
    let dir = default_out(a.out.as_deref());
    crate::run::create_dir(&dir)?;
    let grids = model.cfg.embed.grids(model.cfg.input_size);
    let mut text = String::new();
    for path in &files {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        let img = pgm::decode_pnm(&bytes).map_err(|e| CliError::data(path, e))?;
        let x = preprocess::<rand_chacha::ChaCha8Rng>(&img.to_tensor(), model.cfg.input_size, None, &meta.preprocess)?;
        let s = model.cfg.input_size;
        let (_, weights) = model.predict(&x.reshape(&[1, 3, s, s])?)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        for grid in weight_grids(&weights[0].weights, &model.provenance, &grids)? {
            let target = dir.join(format!("{stem}.branch{}.pgm", grid.branch));
            crate::run::write_file(&target, &pgm::encode_grid(&grid, a.scale))?;
            text.push_str(&format!("{}\n", target.display()));
        }
    }
    emit(out, &text)
}
