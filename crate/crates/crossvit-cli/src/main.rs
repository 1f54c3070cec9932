//! `crossvit` — train, evaluate, gradient-check, and cost-analyze
//! dual-branch cross-attention vision transformers.
//!
//! Model and training settings come from a TOML config file (`--config`) or
//! a named preset (`--preset`); every flag below overrides its config key.
//! Worker concurrency is capped by the `CRVT_THREADS` environment variable.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crossvit::analysis;
use crossvit::config::{
    load_file_config, preset, DatasetConfig, ModelConfig, OptimizerKind, OutputConfig, TrainConfig,
    PRESET_NAMES,
};
use crossvit::data::{synth_dataset, write_cifar_binary};
use crossvit::gradcheck::{gradcheck_with, DEFAULT_EPSILON, DEFAULT_THRESHOLD};
use crossvit::model::{adapt_resolution, load_checkpoint, save_checkpoint};
use crossvit::train::{evaluate, load_dataset, train, write_outputs};

#[derive(Parser)]
#[command(name = "crossvit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a metrics CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint: per-branch and ensemble top-1 accuracy.
    Eval(EvalArgs),
    /// Compare every parameter gradient against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Emit the closed-form parameter/FLOP/attention-cost report as CSV.
    Analyze(AnalyzeArgs),
    /// Rescale a checkpoint to a new input resolution.
    AdaptRes(AdaptResArgs),
    /// Generate a synthetic dataset file in the CIFAR-10 binary layout.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct ModelSource {
    /// TOML config file with a [model] table (and optionally [train]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset instead of a config file.
    #[arg(long, value_parser = PRESET_NAMES.to_vec())]
    preset: Option<String>,
    /// Number of classes when using a preset.
    #[arg(long, default_value_t = 10)]
    classes: usize,
}

impl ModelSource {
    fn load(&self) -> Result<(ModelConfig, Option<TrainConfig>)> {
        match (&self.config, &self.preset) {
            (Some(path), None) => {
                let file = load_file_config(path)?;
                Ok((file.model, file.train))
            }
            (None, Some(name)) => {
                let model =
                    preset(name, self.classes).ok_or_else(|| anyhow!("unknown preset {name}"))?;
                Ok((model, None))
            }
            (Some(_), Some(_)) => bail!("give either --config or --preset, not both"),
            (None, None) => bail!("one of --config or --preset is required"),
        }
    }
}

#[derive(Args)]
struct DatasetArgs {
    /// Directory of CIFAR-10 binary batch files.
    #[arg(long, value_name = "DIR")]
    cifar: Option<PathBuf>,
    /// Synthetic dataset as n,classes,side,seed.
    #[arg(long, value_name = "N,CLASSES,SIDE,SEED")]
    synth: Option<String>,
    /// Cap the number of records read from CIFAR files.
    #[arg(long)]
    limit: Option<usize>,
}

impl DatasetArgs {
    fn to_config(&self) -> Result<Option<DatasetConfig>> {
        match (&self.cifar, &self.synth) {
            (Some(_), Some(_)) => bail!("give either --cifar or --synth, not both"),
            (Some(dir), None) => Ok(Some(DatasetConfig::Cifar10 {
                dir: dir.clone(),
                limit: self.limit,
                mean: None,
                std: None,
            })),
            (None, Some(spec)) => {
                let parts: Vec<usize> = spec
                    .split(',')
                    .map(|p| p.trim().parse().context("synth spec"))
                    .collect::<Result<_>>()?;
                if parts.len() != 4 {
                    bail!("--synth expects n,classes,side,seed");
                }
                Ok(Some(DatasetConfig::Synth {
                    n: parts[0],
                    classes: parts[1],
                    side: parts[2],
                    seed: parts[3] as u64,
                }))
            }
            (None, None) => Ok(None),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelSource,
    #[command(flatten)]
    dataset: DatasetArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// sgd or adam.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    drop_path: Option<f64>,
    /// Directory for checkpoints and metrics (out/last.crvt, out/best.crvt,
    /// out/metrics.csv).
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

/// Desk-scale defaults used when the config file has no [train] table.
fn default_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 60,
        warmup_epochs: 5,
        batch_size: 8,
        base_lr: 1e-3,
        weight_decay: 0.0,
        momentum: 0.9,
        optimizer: OptimizerKind::Adam,
        seed: 42,
        drop_path: None,
        dataset: DatasetConfig::Synth {
            n: 64,
            classes: 10,
            side: 32,
            seed: 7,
        },
        output: OutputConfig::default(),
    }
}

fn run_train(args: TrainArgs) -> Result<()> {
    let (model, train_cfg) = args.model.load()?;
    let mut tc = train_cfg.unwrap_or_else(default_train_config);
    if let Some(ds) = args.dataset.to_config()? {
        tc.dataset = ds;
    }
    if let Some(v) = args.epochs {
        tc.epochs = v;
    }
    if let Some(v) = args.warmup_epochs {
        tc.warmup_epochs = v;
    }
    if let Some(v) = args.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = args.lr {
        tc.base_lr = v;
    }
    if let Some(v) = args.weight_decay {
        tc.weight_decay = v;
    }
    if let Some(v) = args.momentum {
        tc.momentum = v;
    }
    if let Some(v) = &args.optimizer {
        tc.optimizer = match v.as_str() {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::Adam,
            other => bail!("unknown optimizer {other}"),
        };
    }
    if let Some(v) = args.seed {
        tc.seed = v;
    }
    if let Some(v) = args.drop_path {
        tc.drop_path = Some(v);
    }
    if let Some(dir) = args.out_dir {
        tc.output = OutputConfig {
            checkpoint: dir.join("last.crvt"),
            best_checkpoint: dir.join("best.crvt"),
            metrics: dir.join("metrics.csv"),
        };
    }

    let outcome = train(&model, &tc)?;
    write_outputs(&outcome, &model, &tc)?;
    for m in &outcome.metrics {
        println!(
            "epoch {:4}  lr {:.6}  loss {:.4}  train_acc {:.4}  acc_l {:.4}  acc_s {:.4}  acc_ens {:.4}",
            m.epoch, m.lr, m.train_loss, m.train_acc, m.acc_l, m.acc_s, m.acc_ensemble
        );
    }
    println!(
        "best ensemble accuracy {:.4}; wrote {}, {}, {}",
        outcome.best_acc,
        tc.output.checkpoint.display(),
        tc.output.best_checkpoint.display(),
        tc.output.metrics.display()
    );
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    dataset: DatasetArgs,
    /// Write per-sample logits (large, small, ensemble) as CSV.
    #[arg(long)]
    dump_logits: Option<PathBuf>,
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let (params, config) = load_checkpoint(&args.checkpoint)?;
    let ds_config = args
        .dataset
        .to_config()?
        .ok_or_else(|| anyhow!("eval needs --cifar or --synth"))?;
    let dataset = load_dataset(&ds_config, config.base_input_side)?;
    let report = evaluate(&params, &config, &dataset)?;
    println!(
        "samples {}  acc_l {:.4}  acc_s {:.4}  acc_ensemble {:.4}",
        dataset.len(),
        report.acc_large,
        report.acc_small,
        report.acc_ensemble
    );
    if let Some(path) = args.dump_logits {
        report.write_logits_csv(&path)?;
        println!("wrote logits to {}", path.display());
    }
    Ok(())
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    let source = if args.model.config.is_none() && args.model.preset.is_none() {
        ModelSource {
            config: None,
            preset: Some("micro-gradcheck".to_string()),
            classes: args.model.classes,
        }
    } else {
        args.model
    };
    let (model, _) = source.load()?;
    let report = gradcheck_with(&model, args.seed, args.epsilon, args.threshold)?;
    print!("{}", report.render());
    if !report.passed() {
        std::process::exit(1);
    }
    Ok(())
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    model: ModelSource,
    /// Input side to analyze at; defaults to the model's own.
    #[arg(long)]
    input_side: Option<usize>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_analyze(args: AnalyzeArgs) -> Result<()> {
    let (model, _) = args.model.load()?;
    let side = args.input_side.unwrap_or(model.base_input_side);
    let report = analysis::count_flops(&model, side)?;
    let attn = analysis::attn_cost(&model)?;
    let mut csv = report.to_csv();
    csv.push_str(&format!(
        "# fusion attention entries per pass: cross-attention={} all-attention={} ratio={:.2}\n",
        attn.cross_entries, attn.all_entries, attn.ratio
    ));
    match args.out {
        Some(path) => {
            std::fs::write(&path, csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Args)]
struct AdaptResArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    new_side: usize,
}

fn run_adapt_res(args: AdaptResArgs) -> Result<()> {
    let (params, config) = load_checkpoint(&args.input)?;
    let (adapted, new_config) = adapt_resolution(&params, &config, args.new_side)?;
    save_checkpoint(&adapted, &new_config, &args.output)?;
    println!(
        "adapted {} ({}px) -> {} ({}px)",
        args.input.display(),
        config.base_input_side,
        args.output.display(),
        new_config.base_input_side
    );
    Ok(())
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    side: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let ds = synth_dataset(args.n, args.classes, args.side, args.seed);
    write_cifar_binary(&ds, &args.out)?;
    println!(
        "wrote {} records ({}x{}, {} classes) to {}",
        ds.len(),
        args.side,
        args.side,
        args.classes,
        args.out.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Gradcheck(args) => run_gradcheck(args),
        Command::Analyze(args) => run_analyze(args),
        Command::AdaptRes(args) => run_adapt_res(args),
        Command::Synth(args) => run_synth(args),
    }
}
