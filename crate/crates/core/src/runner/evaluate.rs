use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cdsprites::{batch_from_records, DatasetReader, Level, RgbImage, Split};
use crate::error::{Error, Result};
use crate::evaluator::{
    score_img2txt, score_joint, score_txt2img, CoherenceReport, Evaluator, ModelGenerator, SampleSet,
};
use crate::likelihood::{estimate_log_likelihoods, LogLikelihoods};
use crate::model::{MultimodalVae, Strategy};

use super::config::TraversalConfig;
use super::train::load_model;

/// Rows per log-likelihood batch.
const LIKELIHOOD_CHUNK: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOptions {
    /// Score cross-generation on the first N test samples only.
    pub test_limit: Option<usize>,
    pub traversal: TraversalConfig,
    /// Importance samples for log-likelihoods; 0 skips them.
    pub importance_samples: usize,
    /// Log-likelihoods use at most this many test samples.
    pub likelihood_limit: usize,
    pub seed: u64,
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        Self {
            test_limit: None,
            traversal: TraversalConfig::default(),
            importance_samples: 0,
            likelihood_limit: 1000,
            seed: 0,
        }
    }
}

/// Everything reported for one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub strategy: Strategy,
    pub level: Level,
    /// Width of the traversed latent.
    pub latent_dim: usize,
    pub checkpoint: Option<PathBuf>,
    pub txt2img: CoherenceReport,
    pub img2txt: CoherenceReport,
    pub joint: CoherenceReport,
    pub log_likelihoods: Option<LogLikelihoods>,
}

/// Column titles of [`EvaluationReport::columns`].
pub const TABLE_COLUMNS: [&str; 7] = [
    "Txt→Img Strict [%]",
    "Txt→Img Features [ratio]",
    "Img→Txt Strict [%]",
    "Img→Txt Features [ratio]",
    "Img→Txt Letters [%]",
    "Joint Strict [%]",
    "Joint Features [ratio]",
];

impl EvaluationReport {
    /// The seven table values: Strict and Letters in percent, Features as
    /// the mean count.
    pub fn columns(&self) -> [f64; 7] {
        [
            self.txt2img.strict_pct,
            self.txt2img.features_mean,
            self.img2txt.strict_pct,
            self.img2txt.features_mean,
            self.img2txt.letters_pct.unwrap_or(0.0),
            self.joint.strict_pct,
            self.joint.features_mean,
        ]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn mean_log_likelihoods(model: &MultimodalVae, test: &SampleSet, opts: &EvaluationOptions) -> Result<LogLikelihoods> {
    let n = test.len().min(opts.likelihood_limit.max(1));
    let (mut x1, mut joint, mut cond) = (0.0, 0.0, 0.0);
    let mut start = 0;
    while start < n {
        let end = (start + LIKELIHOOD_CHUNK).min(n);
        let images: Vec<&RgbImage> = test.images[start..end].iter().collect();
        let captions: Vec<&str> = test.captions[start..end].iter().map(String::as_str).collect();
        let ll = estimate_log_likelihoods(
            model,
            &batch_from_records(&images, &captions)?,
            opts.importance_samples,
            opts.seed,
        )?;
        let w = (end - start) as f64;
        x1 += w * ll.logp_x1;
        joint += w * ll.logp_joint;
        cond += w * ll.logp_x1_given_x2;
        start = end;
    }
    let n = n as f64;
    Ok(LogLikelihoods {
        logp_x1: x1 / n,
        logp_joint: joint / n,
        logp_x1_given_x2: cond / n,
        importance_samples: opts.importance_samples,
    })
}

/// Score a model on `test` in all three directions.
pub fn evaluate_model(
    model: &MultimodalVae,
    test: &SampleSet,
    opts: &EvaluationOptions,
    evaluator: &Evaluator,
) -> Result<EvaluationReport> {
    let mut test = test.clone();
    if let Some(n) = opts.test_limit {
        test.truncate(n);
    }
    let t = &opts.traversal;
    let generator = ModelGenerator::with_traversal(model, t.per_dim, t.lo, t.hi)?;
    Ok(EvaluationReport {
        strategy: model.strategy(),
        level: test.level,
        latent_dim: model.spec().total_latent_dim(),
        checkpoint: None,
        txt2img: score_txt2img(&generator, &test, evaluator)?,
        img2txt: score_img2txt(&generator, &test)?,
        joint: score_joint(&generator, test.level, evaluator)?,
        log_likelihoods: if opts.importance_samples > 0 {
            Some(mean_log_likelihoods(model, &test, opts)?)
        } else {
            None
        },
    })
}

/// Accept either a dataset root holding `level_N` or the level directory.
pub fn resolve_level_dir(dataset: &Path, level: Level) -> PathBuf {
    if dataset.join("dataset.json").exists() {
        dataset.to_path_buf()
    } else {
        dataset.join(format!("level_{level}"))
    }
}

/// Load the test split of `level` from `dataset`.
pub fn load_test_set(dataset: &Path, level: Level, limit: Option<usize>) -> Result<SampleSet> {
    let mut reader = DatasetReader::open(&resolve_level_dir(dataset, level), Split::Test)?;
    if reader.level() != level {
        return Err(Error::Mismatch(format!("dataset holds level {}, asked for level {level}", reader.level())));
    }
    if let Some(n) = limit {
        reader.truncate(n);
    }
    reader.preload()?;
    SampleSet::from_reader(&reader)
}

/// Load a checkpoint and score it on the test split of `dataset`. Refuses
/// when the checkpoint was trained on another level.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    dataset: &Path,
    level: Level,
    opts: &EvaluationOptions,
) -> Result<EvaluationReport> {
    let (model, meta) = load_model(checkpoint)?;
    if meta.level != level {
        return Err(Error::Mismatch(format!(
            "checkpoint was trained on level {}, asked for level {level}",
            meta.level
        )));
    }
    let test = load_test_set(dataset, level, opts.test_limit)?;
    let mut report = evaluate_model(&model, &test, opts, &Evaluator::frozen()?)?;
    report.checkpoint = Some(checkpoint.to_path_buf());
    Ok(report)
}
