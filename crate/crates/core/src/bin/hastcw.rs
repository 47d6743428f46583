use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hastcw::analysis::{
    activation_tree, concept_pair_projection, projection_csv, records_csv, top_k_activations,
};
use hastcw::data::{Dataset, DatasetSpec, SplitRatios, SplitTag, DEFAULT_CONCEPT_PER_CLASS};
use hastcw::trainer::{check_compatible, evaluate, train_to_dir, HcwModel, TrainConfig, TrainMode};
use hastcw::tree::ConceptTree;
use hastcw::{HcwError, Result};

#[derive(Parser)]
#[command(
    name = "hastcw",
    version,
    about = "Hierarchical concept whitening: data, training and analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic hierarchical dataset and its split.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        per_leaf: usize,
        #[arg(long)]
        image_size: usize,
        #[arg(long)]
        noise: f64,
        /// Concept tree file; the built-in tree when omitted.
        #[arg(long)]
        tree: Option<PathBuf>,
    },
    /// Train a model and write its checkpoint, report and rotation trace.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<TrainMode>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Accuracy, loss and brother/cousin distances on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: SplitTag,
    },
    /// Test images that activate a concept axis most strongly (CSV on stdout).
    TopActivations {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        concept: String,
        #[arg(long)]
        k: usize,
    },
    /// Test images projected onto two concept axes, written as CSV.
    Project {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cx: String,
        #[arg(long)]
        cy: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalized activations of one sample laid out along the concept tree.
    ActivationTree {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: usize,
    },
}

/// The default concept share, reduced when a class has too few training images.
fn concept_per_class(per_leaf: usize) -> usize {
    let ratios = SplitRatios::default();
    let held = |r: f64| (r * per_leaf as f64 + 1e-9).floor() as usize;
    let n_train = per_leaf.saturating_sub(held(ratios.val) + held(ratios.test));
    DEFAULT_CONCEPT_PER_CLASS.min(n_train / 2).max(1)
}

fn load_pair(model: &Path, data: &Path) -> Result<(HcwModel, Dataset)> {
    let (model, _) = HcwModel::load(model)?;
    let ds = Dataset::load(data)?;
    check_compatible(&model, &ds)?;
    Ok((model, ds))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            seed,
            per_leaf,
            image_size,
            noise,
            tree,
        } => {
            let tree = match tree {
                Some(path) => {
                    let text =
                        std::fs::read_to_string(&path).map_err(|e| HcwError::io(&path, e))?;
                    ConceptTree::parse(&text)?
                }
                None => ConceptTree::default_tree(),
            };
            let spec = DatasetSpec {
                tree,
                per_leaf,
                image_size,
                noise_sigma: noise,
                seed,
            };
            spec.validate()?;
            let ds = Dataset::synthesize(&spec, concept_per_class(per_leaf))?;
            ds.save(&out)?;
            println!(
                "wrote {} images ({} train, {} concept, {} val, {} test) to {}",
                ds.len(),
                ds.indices(SplitTag::Train).len(),
                ds.indices(SplitTag::Concept).len(),
                ds.indices(SplitTag::Val).len(),
                ds.indices(SplitTag::Test).len(),
                out.display()
            );
        }
        Command::Train {
            data,
            config,
            out,
            mode,
            seed,
        } => {
            let text = std::fs::read_to_string(&config).map_err(|e| HcwError::io(&config, e))?;
            let mut cfg = TrainConfig::parse(&text)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = train_to_dir(&cfg, &data, &out)?;
            println!("best_epoch = {}", report.best_epoch);
            if let (Some(acc), Some(loss)) = (report.test_accuracy, report.test_loss) {
                println!("test_accuracy = {acc:.6}");
                println!("test_loss = {loss:.6}");
            }
            println!(
                "q_updates = {} ({} accepted)",
                report.q_updates.len(),
                report.accepted_updates()
            );
        }
        Command::Eval { model, data, split } => {
            let (model, ds) = load_pair(&model, &data)?;
            print!("{}", evaluate(&model, &ds, split)?.to_text());
        }
        Command::TopActivations {
            model,
            data,
            concept,
            k,
        } => {
            let (model, ds) = load_pair(&model, &data)?;
            print!(
                "{}",
                records_csv(&top_k_activations(&model, &ds, &concept, k)?)
            );
        }
        Command::Project {
            model,
            data,
            cx,
            cy,
            out,
        } => {
            let (model, ds) = load_pair(&model, &data)?;
            let rows = concept_pair_projection(&model, &ds, &cx, &cy)?;
            std::fs::write(&out, projection_csv(&rows)).map_err(|e| HcwError::io(&out, e))?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::ActivationTree { model, data, index } => {
            let (model, ds) = load_pair(&model, &data)?;
            print!("{}", activation_tree(&model, &ds, index)?.to_text(&ds.tree));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
