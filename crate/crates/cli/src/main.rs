//! `conmh`: generate data, train, encode, evaluate and sweep.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use conmh::dataset::{generate_synthetic, load_dataset_as, save_dataset, shift_class_centers, FeatureDataset};
use conmh::experiment::{sweep, sweep_csv_header, sweep_csv_row, SweepAxis};
use conmh::masking::SamplingStrategy;
use conmh::model::Model;
use conmh::retrieval::{encode_dataset, evaluate, CodeDatabase, EvalConfig};
use conmh::trainer::{fit, Ablation, FitOptions, TrainConfig};

use conmh_cli::config::{resolved, FileConfig};
use conmh_cli::exit::CliError;
use conmh_cli::manifest::ManifestBuilder;
use conmh_cli::write_file;

#[derive(Parser, Debug)]
#[command(name = "conmh", version, about = "Self-supervised video hashing with masked temporal autoencoders")]
struct Cli {
    /// Seed for data generation, initialization, shuffling and masking.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config file; flags override its values.
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,
    /// Output directory (for gen-data: the container path).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a clustered synthetic feature container.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint and loss log.
    Train(TrainCmd),
    /// Encode a dataset into a code file.
    Encode(EncodeArgs),
    /// Evaluate query codes against database codes.
    Eval(EvalArgs),
    /// Train, encode and evaluate over masking ratios or ablations.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    center_scale: Option<f64>,
    #[arg(long)]
    video_noise: Option<f64>,
    #[arg(long)]
    frame_noise: Option<f64>,
    /// Move every class center by this distance (a shifted target domain).
    #[arg(long)]
    shift_scale: Option<f64>,
    #[arg(long, default_value_t = 1)]
    shift_seed: u64,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    /// Feature container to train on.
    #[arg(long)]
    data: PathBuf,
    /// Model preset: desk, mini, small, base or large.
    #[arg(long)]
    preset: Option<String>,
    /// Code length k.
    #[arg(long)]
    bits: Option<usize>,
    /// Expected frames per video; must match the data.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long, value_enum)]
    strategy: Option<Strategy>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Videos per batch.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    decay_every: Option<usize>,
    #[arg(long)]
    min_lr: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Strategy {
    NonOverlapped,
    Overlapped,
}

impl From<Strategy> for SamplingStrategy {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::NonOverlapped => SamplingStrategy::NonOverlapped,
            Strategy::Overlapped => SamplingStrategy::Overlapped,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    All,
    Query,
    Database,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which videos to encode. The database split is every video.
    #[arg(long, value_enum, default_value_t = Split::All)]
    split: Split,
    #[arg(long)]
    query_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    database: PathBuf,
    /// Comma-separated cutoffs, default 5,10,20,...,100.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long)]
    train_tag: Option<String>,
    #[arg(long)]
    test_tag: Option<String>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Masking ratios to sweep, comma-separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "ablations", required_unless_present = "ablations")]
    ratios: Option<Vec<f64>>,
    /// Ablations to sweep: full, no_contrastive, no_recon, no_mask.
    #[arg(long, value_delimiter = ',', value_parser = parse_ablation)]
    ablations: Option<Vec<Ablation>>,
    /// Seeds per setting, comma-separated (default: --seed).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long)]
    query_fraction: Option<f64>,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: conmh::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            e.code()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let Some(out) = cli.out.clone() else {
        Cli::command()
            .error(ErrorKind::MissingRequiredArgument, "the following required argument was not provided: --out <PATH>")
            .exit();
    };
    let file = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(&cli, file, a, &out),
        Command::Train(a) => cmd_train(&cli, file, a, &out),
        Command::Encode(a) => cmd_encode(&cli, file, a, &out),
        Command::Eval(a) => cmd_eval(&cli, file, a, &out),
        Command::Sweep(a) => cmd_sweep(&cli, file, a, &out),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn load_data(path: &Path, split: &str) -> Result<FeatureDataset, CliError> {
    Ok(load_dataset_as(path, split)?)
}

fn say(cli: &Cli, msg: impl AsRef<str>) {
    if !cli.quiet {
        println!("{}", msg.as_ref());
    }
}

fn cmd_gen_data(cli: &Cli, mut file: FileConfig, a: &GenDataArgs, out: &Path) -> Result<(), CliError> {
    let mut p = file.data();
    let set = |dst: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut p.num_classes, a.classes);
    set(&mut p.per_class, a.per_class);
    set(&mut p.num_frames, a.frames);
    set(&mut p.dim, a.dim);
    p.center_scale = a.center_scale.unwrap_or(p.center_scale);
    p.video_noise = a.video_noise.unwrap_or(p.video_noise);
    p.frame_noise = a.frame_noise.unwrap_or(p.frame_noise);
    p.seed = cli.seed.unwrap_or(p.seed);

    let mut ds = generate_synthetic(&p)?;
    if let Some(scale) = a.shift_scale {
        ds = shift_class_centers(&ds, scale, a.shift_seed)?;
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_dataset(&ds, out)?;
    say(
        cli,
        format!(
            "wrote {}: N={} M={} d={} classes={}",
            out.display(),
            ds.len(),
            ds.num_frames,
            ds.dim,
            p.num_classes
        ),
    );
    let mut m = ManifestBuilder::new("gen-data", p.seed);
    m.output("data", out);
    file.data = Some(p);
    m.finish(file, &sibling(out, "manifest.json"))?;
    Ok(())
}

/// `<path>.<suffix>` beside `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn train_config(cli: &Cli, file: &FileConfig, a: &TrainArgs, ablation: Option<Ablation>) -> TrainConfig {
    let mut t = file.train();
    t.mask_ratio = a.mask_ratio.unwrap_or(t.mask_ratio);
    if let Some(s) = a.strategy {
        t.sampling_strategy = s.into();
    }
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.batch_videos = a.batch.unwrap_or(t.batch_videos);
    t.base_lr = a.lr.unwrap_or(t.base_lr);
    t.lr_decay = a.lr_decay.unwrap_or(t.lr_decay);
    t.decay_every = a.decay_every.unwrap_or(t.decay_every);
    t.min_lr = a.min_lr.unwrap_or(t.min_lr.min(t.base_lr));
    t.contrastive.tau = a.tau.unwrap_or(t.contrastive.tau);
    t.contrastive.rho = a.rho.unwrap_or(t.contrastive.rho);
    t.contrastive.alpha = a.alpha.unwrap_or(t.contrastive.alpha);
    t.ablation = ablation.unwrap_or(t.ablation);
    t.checkpoint_every = a.checkpoint_every.or(t.checkpoint_every);
    t.seed = cli.seed.unwrap_or(t.seed);
    t
}

/// Validates the training setup before any data is read.
fn check_train(t: &TrainConfig, frames: Option<usize>) -> Result<(), CliError> {
    t.validate()?;
    if let Some(m) = frames {
        t.validate_for_frames(m)?;
    }
    Ok(())
}

fn check_frames(ds: &FeatureDataset, frames: Option<usize>) -> Result<(), CliError> {
    match frames {
        Some(m) if m != ds.num_frames => Err(CliError::Usage(format!(
            "--frames {m} but the data has {} frames per video",
            ds.num_frames
        ))),
        _ => Ok(()),
    }
}

fn cmd_train(cli: &Cli, file: FileConfig, a: &TrainCmd, out: &Path) -> Result<(), CliError> {
    let t = train_config(cli, &file, &a.train, a.ablation);
    check_train(&t, a.train.frames)?;
    let ds = load_data(&a.train.data, "train")?;
    check_frames(&ds, a.train.frames)?;
    t.validate_for_frames(ds.num_frames)?;
    let model_cfg = file.model(a.train.preset.as_deref(), a.train.bits, ds.dim, ds.num_frames)?;
    create_dir(out)?;
    let opts = FitOptions {
        checkpoint_dir: Some(out.to_path_buf()),
        verbose: !cli.quiet,
    };
    let (model, log) = fit(&ds, &model_cfg, &t, &opts)?;

    let ckpt = out.join("model.cmhm");
    let log_path = out.join("train_log.csv");
    model.save(&ckpt)?;
    write_file(&log_path, log.to_csv().as_bytes())?;
    say(cli, format!("wrote {} and {}", ckpt.display(), log_path.display()));

    let mut m = ManifestBuilder::new("train", t.seed);
    m.input("data", &a.train.data);
    m.output("checkpoint", &ckpt);
    m.output("train_log", &log_path);
    let mut cfg = resolved(file, Some(&model_cfg));
    cfg.train = Some(t);
    m.finish(cfg, &out.join("manifest.json"))?;
    Ok(())
}

fn eval_config(file: &FileConfig, query_fraction: Option<f64>, split_seed: Option<u64>, ks: Option<&[usize]>) -> Result<EvalConfig, CliError> {
    let mut e = file.eval();
    e.query_fraction = query_fraction.unwrap_or(e.query_fraction);
    e.split_seed = split_seed.unwrap_or(e.split_seed);
    if let Some(ks) = ks {
        e.ks = ks.to_vec();
    }
    e.validate()?;
    Ok(e)
}

fn cmd_encode(cli: &Cli, mut file: FileConfig, a: &EncodeArgs, out: &Path) -> Result<(), CliError> {
    let e = eval_config(&file, a.query_fraction, a.split_seed, None)?;
    let model = Model::load(&a.checkpoint)?;
    let tag = match a.split {
        Split::All => "all",
        Split::Query => "query",
        Split::Database => "database",
    };
    let ds = load_data(&a.data, tag)?;
    let all = encode_dataset(&model, &ds)?;
    let codes = match a.split {
        Split::Query => all.subset(&e.query_indices(all.len())),
        Split::All | Split::Database => all,
    };
    create_dir(out)?;
    let path = out.join("codes.cmhc");
    codes.save(&path)?;
    say(
        cli,
        format!("wrote {}: n={} k={}", path.display(), codes.len(), codes.code_length()),
    );
    let mut m = ManifestBuilder::new("encode", cli.seed.unwrap_or(0));
    m.input("checkpoint", &a.checkpoint);
    m.input("data", &a.data);
    m.output("codes", &path);
    file.eval = Some(e);
    m.finish(file, &out.join("manifest.json"))?;
    Ok(())
}

fn cmd_eval(cli: &Cli, mut file: FileConfig, a: &EvalArgs, out: &Path) -> Result<(), CliError> {
    let e = eval_config(&file, None, None, a.ks.as_deref())?;
    let queries = CodeDatabase::load(&a.queries)?;
    let db = CodeDatabase::load(&a.database)?;
    let mut report = evaluate(&queries, &db, &e.ks)?;
    report.metadata.train_tag = a.train_tag.clone();
    report.metadata.test_tag = a.test_tag.clone();

    create_dir(out)?;
    let json = out.join("report.json");
    let pr = out.join("pr_curve.csv");
    let map = out.join("map_vs_k.csv");
    write_file(&json, report.to_json().as_bytes())?;
    write_file(&pr, report.pr_csv().as_bytes())?;
    write_file(&map, report.map_csv().as_bytes())?;
    for (k, v) in &report.map_at_k {
        say(cli, format!("mAP@{k} {v:.4}"));
    }
    let mut m = ManifestBuilder::new("eval", cli.seed.unwrap_or(0));
    m.input("queries", &a.queries);
    m.input("database", &a.database);
    m.output("report", &json);
    m.output("pr_curve", &pr);
    m.output("map_vs_k", &map);
    file.eval = Some(e);
    m.finish(file, &out.join("manifest.json"))?;
    Ok(())
}

fn cmd_sweep(cli: &Cli, file: FileConfig, a: &SweepArgs, out: &Path) -> Result<(), CliError> {
    let axis = match (&a.ratios, &a.ablations) {
        (Some(r), _) => SweepAxis::MaskRatio(r.clone()),
        (None, Some(ab)) => SweepAxis::Ablation(ab.clone()),
        (None, None) => unreachable!("clap requires one axis"),
    };
    if axis.is_empty() {
        return Err(CliError::Usage("sweep list is empty".into()));
    }
    let base = train_config(cli, &file, &a.train, None);
    check_train(&base, a.train.frames)?;
    let e = eval_config(&file, a.query_fraction, None, a.ks.as_deref())?;
    let seeds = a.seeds.clone().unwrap_or_else(|| vec![base.seed]);
    let ds = load_data(&a.train.data, "train")?;
    check_frames(&ds, a.train.frames)?;
    let model_cfg = file.model(a.train.preset.as_deref(), a.train.bits, ds.dim, ds.num_frames)?;

    create_dir(out)?;
    let csv_path = out.join("sweep.csv");
    let mut csv = File::create(&csv_path).map_err(|err| CliError::Io(format!("{}: {err}", csv_path.display())))?;
    let io = |err: std::io::Error| conmh::Error::io(&csv_path, err);
    writeln!(csv, "{}", sweep_csv_header(axis.name(), &e.ks)).map_err(io)?;
    sweep(&ds, &model_cfg, &base, &e, &axis, &seeds, |row| {
        writeln!(csv, "{}", sweep_csv_row(row, &e.ks)).and_then(|_| csv.flush()).map_err(io)?;
        if !cli.quiet {
            println!("{row}");
        }
        Ok(())
    })?;

    let mut m = ManifestBuilder::new("sweep", base.seed);
    m.input("data", &a.train.data);
    m.output("sweep", &csv_path);
    let mut cfg = resolved(file, Some(&model_cfg));
    cfg.train = Some(base);
    cfg.eval = Some(e);
    m.finish(cfg, &out.join("manifest.json"))?;
    Ok(())
}
