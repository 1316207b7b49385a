use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::cdsprites::Level;
use crate::error::{Error, Result};
use crate::evaluator::{Evaluator, SampleSet};
use crate::model::Strategy;
use crate::parallel::map_slice;

use super::config::{Cell, ExperimentConfig};
use super::evaluate::{evaluate_model, load_test_set, EvaluationOptions, EvaluationReport, TABLE_COLUMNS};
use super::train::{train, EpochRow, RunStatus};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, sd: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub dir: PathBuf,
    pub evaluation: Option<EvaluationReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// Swept width (shared width for the disentangled model).
    pub latent: usize,
    /// Total latent width, private blocks included.
    pub dims: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub columns: Vec<MeanSd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub model: Strategy,
    pub level: Level,
    pub rows: Vec<SummaryRow>,
    pub cells: Vec<CellResult>,
}

impl GridSummary {
    /// Markdown table: percentages as `mean (sd)`, feature counts as
    /// `mean (sd)/total`.
    pub fn table(&self) -> String {
        let total = self.level.features().len();
        let mut out = format!("| Model | Dims | {} |\n", TABLE_COLUMNS.join(" | "));
        out.push_str(&format!("|{}\n", "---|".repeat(TABLE_COLUMNS.len() + 2)));
        for row in &self.rows {
            let cells: Vec<String> = row
                .columns
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    if row.succeeded == 0 {
                        "failed".to_string()
                    } else if matches!(i, 1 | 3 | 6) {
                        format!("{:.2} ({:.2})/{total}", c.mean, c.sd)
                    } else {
                        format!("{:.1} ({:.1})", c.mean, c.sd)
                    }
                })
                .collect();
            out.push_str(&format!("| {} | {} | {} |\n", self.model, row.dims, cells.join(" | ")));
        }
        out
    }
}

fn summarize(cfg: &ExperimentConfig, cells: Vec<CellResult>) -> Result<GridSummary> {
    let mut rows = Vec::new();
    for latent in cfg.latent_axis() {
        let evals: Vec<&EvaluationReport> =
            cells.iter().filter(|c| c.cell.latent == latent).filter_map(|c| c.evaluation.as_ref()).collect();
        let runs = cells.iter().filter(|c| c.cell.latent == latent).count();
        let columns = (0..TABLE_COLUMNS.len())
            .map(|i| MeanSd::of(&evals.iter().map(|e| e.columns()[i]).collect::<Vec<_>>()))
            .collect();
        rows.push(SummaryRow {
            latent,
            dims: cfg.model_spec(latent)?.total_latent_dim(),
            succeeded: evals.len(),
            failed: runs - evals.len(),
            columns,
        });
    }
    Ok(GridSummary { model: cfg.model, level: cfg.level, rows, cells })
}

fn run_cell(
    cfg: &ExperimentConfig,
    cell: Cell,
    test: &SampleSet,
    evaluator: &Evaluator,
    progress: &(dyn Fn(Cell, &EpochRow) + Sync),
) -> Result<EvaluationReport> {
    let (mut log, model) = train(cfg, cell, &mut |row| progress(cell, row))?;
    if let RunStatus::Failed { message } = &log.status {
        return Err(Error::Contract(format!("run failed: {message}")));
    }
    let opts = EvaluationOptions {
        test_limit: cfg.eval_test_limit,
        traversal: cfg.traversal,
        importance_samples: cfg.eval_importance_samples,
        seed: cell.seed,
        ..EvaluationOptions::default()
    };
    let mut report = evaluate_model(&model, test, &opts, evaluator)?;
    report.checkpoint = log.final_checkpoint.clone();
    let dir = cfg.cell_dir(cell);
    let path = dir.join("report.json");
    fs::write(&path, report.to_json()?).map_err(|e| Error::io(&path, e))?;
    log.evaluation = Some(report.clone());
    log.save(&dir)?;
    Ok(report)
}

/// Train and score every cell (axis values × seeds). Cells run in parallel
/// and in separate directories; a failing cell is recorded and the rest
/// continue. Writes `summary.json` and `summary.md` next to the cells.
pub fn grid_search(cfg: &ExperimentConfig, progress: &(dyn Fn(Cell, &EpochRow) + Sync)) -> Result<GridSummary> {
    cfg.validate()?;
    let test = load_test_set(&cfg.dataset_dir, cfg.level, cfg.eval_test_limit)?;
    let evaluator = Evaluator::frozen()?;
    let cells = cfg.cells();
    let results = map_slice(&cells, |&cell| {
        let outcome = run_cell(cfg, cell, &test, &evaluator, progress);
        CellResult {
            cell,
            dir: cfg.cell_dir(cell),
            error: outcome.as_ref().err().map(ToString::to_string),
            evaluation: outcome.ok(),
        }
    });
    let summary = summarize(cfg, results)?;
    let root = cfg.output_root().join(cfg.run_name());
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let json = root.join("summary.json");
    fs::write(&json, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&json, e))?;
    let md = root.join("summary.md");
    fs::write(&md, summary.table()).map_err(|e| Error::io(&md, e))?;
    Ok(summary)
}
