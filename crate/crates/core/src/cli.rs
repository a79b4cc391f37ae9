//! Command-line surface. Exit codes: 0 success, 1 usage error, 2 data
//! error, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::data::{generate_synthetic, read_manifest, split_by_cluster, Split, SyntheticSpec};
use crate::error::{Error, ErrorClass, Result};
use crate::features::Modality;
use crate::pipeline::{
    ablation_table, all_ablations, evaluate_checkpoint, train_to_dir, write_ablation_csv, write_embeddings_csv,
    Dataset,
};
use crate::selfcheck::gradcheck_suite;
use crate::train::{export_pr_curve, pr_area, Ablation, Checkpoint, Evaluation, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "abfuse", version, about = "Multimodal antibody classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted-structure dataset: manifest.jsonl plus CAMT features.
    GenerateData(GenerateArgs),
    /// Assign clusters to train/val/test.
    Split(SplitArgs),
    /// Train a model and write checkpoint.camc, epochs.csv and summary.json.
    Train(TrainArgs),
    /// Report metrics of a checkpoint on one split as JSON.
    Eval(EvalArgs),
    /// Write the micro-averaged precision-recall curve as CSV.
    ExportPr(ExportArgs),
    /// Write pooled per-sample embeddings as CSV.
    ExportEmbeddings(ExportArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the full model and every single-component ablation, then write
    /// a table of test metrics.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 20)]
    pub min_len: usize,
    #[arg(long, default_value_t = 40)]
    pub max_len: usize,
    #[arg(long, default_value_t = 5.0)]
    pub sigma_sep: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Modalities carrying the class signal (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "onehot,blosum,esm,struct,gcn")]
    pub planted: Vec<Modality>,
    #[arg(long, default_value_t = 5)]
    pub cluster_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.1,0.1")]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Split assignment written by `split`.
    #[arg(long)]
    pub splits: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Component to remove; repeatable.
    #[arg(long)]
    pub ablate: Vec<Ablation>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Restrict the table to these removals; the full model is always included.
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<Ablation>,
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn evaluation_for_export(args: &ExportArgs) -> Result<(Checkpoint, Evaluation, Vec<String>)> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let data = Dataset::open(&args.data.manifest, &args.data.splits)?;
    let examples = data.examples(&ckpt.config, args.split)?;
    let refs: Vec<_> = examples.iter().collect();
    let eval = crate::train::evaluate(&ckpt.model()?, &refs)?;
    let ids = examples.iter().map(|e| e.bundle.id.clone()).collect();
    Ok((ckpt, eval, ids))
}

/// Executes one parsed command, printing results to stdout.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(a) => {
            let spec = SyntheticSpec {
                classes: a.classes,
                per_class: a.per_class,
                min_len: a.min_len,
                max_len: a.max_len,
                sigma_sep: a.sigma_sep,
                noise: a.noise,
                width: a.width,
                planted: a.planted,
                cluster_size: a.cluster_size,
                seed: a.seed,
                ..Default::default()
            };
            let records = generate_synthetic(&spec, &a.out)?;
            println!("wrote {} samples to {}", records.len(), a.out.join("manifest.jsonl").display());
        }
        Command::Split(a) => {
            let records = read_manifest(&a.manifest)?;
            let clusters: Vec<u64> = records.iter().map(|r| r.cluster).collect();
            let ratios: [f64; 3] = a.ratios.try_into().map_err(|_| Error::invalid("--ratios takes three values"))?;
            let assignment = split_by_cluster(&clusters, ratios, a.seed)?;
            std::fs::write(&a.out, serde_json::to_string_pretty(&assignment)?)?;
            for s in Split::ALL {
                let n = records.iter().filter(|r| assignment.split_of(r.cluster) == Some(s)).count();
                println!("{s}: {n} samples");
            }
        }
        Command::Train(a) => {
            let mut cfg = load_config(&a.config)?;
            for x in a.ablate {
                if !cfg.ablate.contains(&x) {
                    cfg.ablate.push(x);
                }
            }
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            let data = Dataset::open(&a.data.manifest, &a.data.splits)?;
            let (_, summary) = train_to_dir(&data, &cfg, &a.out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Eval(a) => {
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let data = Dataset::open(&a.data.manifest, &a.data.splits)?;
            let report = evaluate_checkpoint(&ckpt, &data, a.split)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::ExportPr(a) => {
            let (_, eval, _) = evaluation_for_export(&a)?;
            let points = export_pr_curve(&eval.scores(), &eval.labels, &a.out)?;
            println!("wrote {} points, area {:.4}", points.len(), pr_area(&points));
        }
        Command::ExportEmbeddings(a) => {
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let data = Dataset::open(&a.data.manifest, &a.data.splits)?;
            let n = write_embeddings_csv(&ckpt, &data, a.split, &a.out)?;
            println!("wrote {n} embeddings to {}", a.out.display());
        }
        Command::Gradcheck { seed } => {
            let mut failed = Vec::new();
            for (name, report) in gradcheck_suite(seed)? {
                println!("{name:<24} {report}");
                if !report.passed {
                    failed.push(name);
                }
            }
            if !failed.is_empty() {
                return Err(Error::GradCheck(format!("failed: {}", failed.join(", "))));
            }
        }
        Command::Ablate(a) => {
            let cfg = load_config(&a.config)?;
            let data = Dataset::open(&a.data.manifest, &a.data.splits)?;
            let removed: Vec<Option<Ablation>> = if a.only.is_empty() {
                all_ablations()
            } else {
                std::iter::once(None).chain(a.only.into_iter().map(Some)).collect()
            };
            let rows = ablation_table(&data, &cfg, &removed, &a.seeds)?;
            write_ablation_csv(&rows, &a.out)?;
            print!("{}", std::fs::read_to_string(&a.out)?);
        }
    }
    Ok(())
}

pub fn exit_code(err: &Error) -> u8 {
    match err.class() {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
