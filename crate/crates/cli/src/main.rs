//! Command-line front end: dataset generation, training, evaluation,
//! ablations and mask export.
//!
//! Exit codes: 0 success, 1 invalid input, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use cprn::synth::{generate_range, load_dataset, save_dataset, GeneratorConfig, Split};
use cprn::train::{
    ablate, reports_to_json, reports_to_kv, run_evaluate, run_train, Arm, TrainConfig,
};
use cprn::Error;

/// Relative output paths are resolved against this directory when set.
const OUTPUT_ROOT_ENV: &str = "CPRN_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "cprn", version, about = "Train and evaluate row/column + holistic referring segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with `train/` and `val/` splits.
    Generate(GenerateArgs),
    /// Train one configuration and keep the best checkpoint.
    Train(TrainArgs),
    /// Score a trained run on a dataset split directory.
    Evaluate(EvalArgs),
    /// Train several variants under several seeds and compare them.
    Ablate(AblateArgs),
    /// Write predicted masks of a trained run as PGM files.
    ExportMasks(ExportArgs),
}

#[derive(Args)]
#[command(rename_all = "snake_case")]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    train: usize,
    #[arg(long, default_value_t = 200)]
    val: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long)]
    small_fraction: Option<f64>,
    #[arg(long)]
    complex_fraction: Option<f64>,
}

/// Configuration sources, applied in order: defaults, `--config` file,
/// `--set` pairs, then the dedicated flags.
#[derive(Args, Clone)]
#[command(rename_all = "snake_case")]
struct ConfigArgs {
    /// `key=value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    ffn: Option<bool>,
    #[arg(long)]
    ape: Option<bool>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    text_layers: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    wiring: Option<String>,
    #[arg(long)]
    renormalize_roho: Option<bool>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    augment: Option<bool>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding `config.txt` and `best.ckpt`.
    #[arg(long)]
    run: PathBuf,
    /// Dataset split directory (with `meta.json`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "all,small_scale,complex_language")]
    splits: Vec<String>,
    /// Also write predicted masks here.
    #[arg(long)]
    masks: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Variant names or fusion kinds; the first is the reference row.
    #[arg(long, value_delimiter = ',', default_value = "holi_star,roco_only,serial,parallel_star,parallel_guided")]
    arms: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn build_config(args: &ConfigArgs) -> cprn::Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_kv(&text)?;
    }
    for pair in &args.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`{pair}` is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let flags: [(&str, Option<String>); 18] = [
        ("variant", args.variant.clone()),
        ("fusion", args.fusion.clone()),
        ("ffn", args.ffn.map(|v| v.to_string())),
        ("ape", args.ape.map(|v| v.to_string())),
        ("stages", args.stages.map(|v| v.to_string())),
        ("channels", args.channels.map(|v| v.to_string())),
        ("text_layers", args.text_layers.map(|v| v.to_string())),
        ("lr", args.lr.map(|v| v.to_string())),
        ("weight_decay", args.weight_decay.map(|v| v.to_string())),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("epochs", args.epochs.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("wiring", args.wiring.clone()),
        ("renormalize_roho", args.renormalize_roho.map(|v| v.to_string())),
        ("dropout", args.dropout.map(|v| v.to_string())),
        ("augment", args.augment.map(|v| v.to_string())),
        ("dataset", args.dataset.as_ref().map(|p| p.display().to_string())),
        ("output", args.output.as_ref().map(|p| p.display().to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    cfg.output = resolve_output(&cfg.output);
    cfg.validate()?;
    Ok(cfg)
}

fn generate(args: &GenerateArgs) -> cprn::Result<()> {
    let mut gen = GeneratorConfig {
        height: args.height,
        width: args.width,
        ..GeneratorConfig::default()
    };
    if let Some(f) = args.small_fraction {
        gen.small_fraction = f;
    }
    if let Some(f) = args.complex_fraction {
        gen.complex_fraction = f;
    }
    gen.validate()?;
    let out = resolve_output(&args.out);
    let train = generate_range(args.seed, 0..args.train, &gen)?;
    let val = generate_range(args.seed, args.train..args.train + args.val, &gen)?;
    save_dataset(&out.join("train"), &train)?;
    save_dataset(&out.join("val"), &val)?;
    println!("wrote {} train and {} val samples to {}", train.len(), val.len(), out.display());
    Ok(())
}

fn train(args: &TrainArgs) -> cprn::Result<()> {
    let cfg = build_config(&args.config)?;
    let start = Instant::now();
    let summary = run_train(&cfg, |e| {
        let val = e.val.as_ref().map_or(String::new(), |v| {
            format!(" val_overall_iou={:.4} val_mean_iou={:.4}", v.overall_iou, v.mean_iou)
        });
        eprintln!(
            "epoch {} train_loss={:.5} lr={:.2e}{val} ({:.0}s)",
            e.epoch,
            e.train_loss,
            e.lr,
            start.elapsed().as_secs_f64()
        );
    })?;
    println!("best_epoch={}", summary.fit.best_epoch);
    print!("{}", reports_to_kv(&summary.val));
    println!("output={}", cfg.output.display());
    Ok(())
}

fn parse_splits(names: &[String]) -> cprn::Result<Vec<Split>> {
    names.iter().map(|s| s.parse()).collect()
}

fn evaluate(args: &EvalArgs) -> cprn::Result<()> {
    let splits = parse_splits(&args.splits)?;
    let masks = args.masks.as_deref().map(resolve_output);
    let reports = run_evaluate(&args.run, &args.data, &splits, masks.as_deref())?;
    fs::write(args.run.join("evaluation.txt"), reports_to_kv(&reports))?;
    fs::write(args.run.join("evaluation.json"), reports_to_json(&reports)?)?;
    print!("{}", reports_to_kv(&reports));
    Ok(())
}

fn export_masks(args: &ExportArgs) -> cprn::Result<()> {
    let out = resolve_output(&args.out);
    run_evaluate(&args.run, &args.data, &[Split::All], Some(&out))?;
    println!("masks written to {}", out.display());
    Ok(())
}

fn run_ablation(args: &AblateArgs) -> cprn::Result<()> {
    let cfg = build_config(&args.config)?;
    let arms = args.arms.iter().map(|a| a.parse()).collect::<cprn::Result<Vec<Arm>>>()?;
    let train = load_dataset(&cfg.dataset.join("train"))?;
    let val = load_dataset(&cfg.dataset.join("val"))?;
    let report = ablate(&cfg, &arms, &args.seeds, &train, &val, |r| {
        let iou = r.reports.get(&Split::All).map_or(f64::NAN, |m| m.overall_iou);
        eprintln!("{} seed {}: overall_iou={iou:.4}{}", r.label, r.seed, if r.diverged { " (diverged)" } else { "" });
    })?;
    fs::create_dir_all(&cfg.output)?;
    fs::write(cfg.output.join("ablation.md"), report.to_string())?;
    fs::write(cfg.output.join("ablation.json"), report.to_json()?)?;
    print!("{report}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => run_ablation(a),
        Command::ExportMasks(a) => export_masks(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
