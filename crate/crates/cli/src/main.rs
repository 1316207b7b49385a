use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mmvb::cdsprites::{generate_dataset, Level, LevelSpec};
use mmvb::evaluator::{
    train_shape_classifier, Evaluator, ShapeClassifier, DEFAULT_TRAINING_SAMPLES, DEFAULT_TRAINING_SEED,
};
use mmvb::runner::{
    evaluate_model, export_visualizations, grid_search, load_model, load_test_set, resolve_level_dir, train, Cell,
    EpochRow, EvaluationOptions, ExperimentConfig, ExportOptions, OUTPUT_ROOT_VAR,
};

const CLASSIFIER_FILE: &str = "shape_classifier.json";

#[derive(Parser)]
#[command(name = "mmvb", version, about = "Multimodal VAE benchmark on captioned shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render one level of the dataset.
    Generate {
        #[arg(long)]
        level: u8,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training samples; defaults to the full-size count.
        #[arg(long)]
        train_count: Option<usize>,
        /// Validation samples; defaults to a ninth of the training count.
        #[arg(long)]
        val_count: Option<usize>,
        #[arg(long, default_value_t = LevelSpec::DEFAULT_TEST_COUNT)]
        test_count: usize,
        /// Reduced profile with 2000 training samples.
        #[arg(long, conflicts_with = "train_count")]
        desk: bool,
    },
    /// Train one cell of a config (the first latent width and seed unless given).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        latent: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and score every latent width and seed of a config.
    Gridsearch {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        level: u8,
        /// Report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Classifier weights; defaults to the dataset's copy, then the shipped file.
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        test_limit: Option<usize>,
        /// Importance samples for log-likelihoods (0 skips them).
        #[arg(long, default_value_t = 0)]
        importance_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write traversal grids, latent projections and loss curves.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to `export/` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        columns: usize,
        #[arg(long, default_value_t = 2000)]
        pca_limit: usize,
    },
    /// Refit the shape classifier of the evaluator.
    TrainClassifier {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TRAINING_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = DEFAULT_TRAINING_SEED)]
        seed: u64,
    },
}

fn level(n: u8) -> Result<Level> {
    Ok(Level::new(n)?)
}

fn print_epoch(prefix: &str, row: &EpochRow) {
    eprintln!("{prefix}epoch {:>4}  loss {:>12.3}  kl {:>9.3}  {:.1}s", row.epoch, row.loss, row.kl, row.seconds);
}

fn write_json(path: &Path, json: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, json).with_context(|| format!("writing {}", path.display()))
}

fn evaluator_for(dataset: &Path, level: Level, explicit: Option<&Path>) -> Result<Evaluator> {
    let candidates =
        [dataset.join(CLASSIFIER_FILE), resolve_level_dir(dataset, level).join("..").join(CLASSIFIER_FILE)];
    let path = explicit.map(Path::to_path_buf).or_else(|| candidates.into_iter().find(|p| p.exists()));
    match path {
        Some(p) => {
            let classifier =
                ShapeClassifier::load(&p).with_context(|| format!("loading classifier {}", p.display()))?;
            Ok(Evaluator::new(classifier))
        }
        None => Ok(Evaluator::frozen()?),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { level: n, out, seed, train_count, val_count, test_count, desk } => {
            let l = level(n)?;
            let mut spec = match train_count {
                Some(t) => LevelSpec::with_train_count(l, t),
                None if desk => LevelSpec::desk(l),
                None => LevelSpec::paper(l),
            };
            if let Some(v) = val_count {
                spec.val_count = v;
            }
            spec.test_count = test_count;
            let info = generate_dataset(&spec, &out, seed)?;
            ShapeClassifier::shipped()?.save(&out.join(CLASSIFIER_FILE))?;
            println!("{}", serde_json::to_string_pretty(&info)?);
        }
        Command::Train { config, latent, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let first = cfg.cells()[0];
            let cell = Cell { latent: latent.unwrap_or(first.latent), seed: seed.unwrap_or(first.seed) };
            let (log, _) = train(&cfg, cell, &mut |row| print_epoch("", row))?;
            println!("{}", serde_json::to_string_pretty(&log)?);
            if !log.completed() {
                bail!("training did not complete; see {}", cfg.cell_dir(cell).join("run_log.json").display());
            }
        }
        Command::Gridsearch { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            eprintln!(
                "writing under {} (override with {OUTPUT_ROOT_VAR})",
                cfg.output_root().join(cfg.run_name()).display()
            );
            let summary = grid_search(&cfg, &|cell, row| {
                print_epoch(&format!("[dim {} seed {}] ", cell.latent, cell.seed), row)
            })?;
            println!("{}", summary.table());
        }
        Command::Eval { checkpoint, dataset, level: n, out, classifier, test_limit, importance_samples, seed } => {
            let l = level(n)?;
            let (model, meta) = load_model(&checkpoint)?;
            if meta.level != l {
                bail!("checkpoint was trained on level {}, asked for level {l}", meta.level);
            }
            let evaluator = evaluator_for(&dataset, l, classifier.as_deref())?;
            let opts = EvaluationOptions { test_limit, importance_samples, seed, ..EvaluationOptions::default() };
            let test = load_test_set(&dataset, l, test_limit)?;
            let mut report = evaluate_model(&model, &test, &opts, &evaluator)?;
            report.checkpoint = Some(checkpoint);
            let json = report.to_json()?;
            match out {
                Some(path) => write_json(&path, &json)?,
                None => print!("{json}"),
            }
        }
        Command::Export { checkpoint, dataset, out, columns, pca_limit } => {
            let out = match out {
                Some(o) => o,
                None => checkpoint.parent().unwrap_or(Path::new(".")).join("export"),
            };
            let opts = ExportOptions { columns, pca_limit: Some(pca_limit), ..ExportOptions::default() };
            let files = export_visualizations(&checkpoint, &dataset, &out, &opts)?;
            println!("{}", serde_json::to_string_pretty(&files)?);
        }
        Command::TrainClassifier { out, samples, seed } => {
            let classifier = train_shape_classifier(samples, seed)?;
            let evaluator = Evaluator::new(classifier);
            for l in Level::all() {
                eprintln!("level {l}: oracle agreement {:.4}", evaluator.oracle_agreement(l, 1000, seed ^ 1));
            }
            evaluator.classifier().save(&out)?;
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    run(Cli::parse())
}
