use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::cdsprites::{batch_from_records, batch_order, DatasetReader, Level, RgbImage, Split};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::evaluator::SampleSet;
use crate::model::{ModelSpec, MultimodalVae};
use crate::objectives::objective;
use crate::optim::AdamState;
use crate::seed::{derive_seed, label_hash, rng_for};

use super::config::{Cell, ExperimentConfig};
use super::evaluate::EvaluationReport;

pub const CHECKPOINT_EXTENSION: &str = "mmvb";
pub const LOSS_CSV_HEADER: &str = "epoch,steps,loss,recon_image,recon_text,kl,seconds";

/// Sidecar of every checkpoint, `<name>.meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub level: Level,
    pub epoch: usize,
    pub step: u64,
    pub cell: Cell,
    pub config: ExperimentConfig,
}

impl CheckpointMeta {
    pub fn path_for(checkpoint: &Path) -> PathBuf {
        checkpoint.with_extension("meta.json")
    }

    pub fn load(checkpoint: &Path) -> Result<Self> {
        let path = Self::path_for(checkpoint);
        let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&raw)?)
    }
}

/// Rebuild a model from a checkpoint and its sidecar.
pub fn load_model(checkpoint: &Path) -> Result<(MultimodalVae, CheckpointMeta)> {
    let meta = CheckpointMeta::load(checkpoint)?;
    let params = checkpoint::load(checkpoint)?;
    Ok((MultimodalVae::from_params(meta.spec.clone(), params)?, meta))
}

/// Epoch means of the loss and its parts. Reconstruction and KL columns
/// are their signed contributions to the loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub recon: Vec<f64>,
    pub kl: f64,
    pub seconds: f64,
}

impl EpochRow {
    pub fn csv(&self) -> String {
        let recon: Vec<String> = self.recon.iter().map(|v| v.to_string()).collect();
        format!("{},{},{},{},{},{:.3}", self.epoch, self.steps, self.loss, recon.join(","), self.kl, self.seconds)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed { message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: ExperimentConfig,
    pub cell: Cell,
    pub status: RunStatus,
    pub epochs: Vec<EpochRow>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
    pub evaluation: Option<EvaluationReport>,
}

impl RunLog {
    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("run_log.json");
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

/// Load the training split named by `cfg`, honouring `train_limit`.
pub fn load_training_set(cfg: &ExperimentConfig) -> Result<SampleSet> {
    let mut reader = DatasetReader::open(&cfg.level_dir(), Split::Train)?;
    if reader.level() != cfg.level {
        return Err(Error::Config(format!("dataset holds level {}, config asks for {}", reader.level(), cfg.level)));
    }
    if let Some(n) = cfg.train_limit {
        reader.truncate(n);
    }
    reader.preload()?;
    SampleSet::from_reader(&reader)
}

fn write_checkpoint(model: &MultimodalVae, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    checkpoint::save(&model.params, path)?;
    let meta_path = CheckpointMeta::path_for(path);
    fs::write(&meta_path, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&meta_path, e))
}

/// Train one cell on `data`, writing checkpoints, `loss.csv` and
/// `run_log.json` into `out_dir`. Divergence ends the run early with a
/// failed status; the last good checkpoint is kept.
pub fn train_on(
    cfg: &ExperimentConfig,
    cell: Cell,
    data: &SampleSet,
    out_dir: &Path,
    progress: &mut dyn FnMut(&EpochRow),
) -> Result<(RunLog, MultimodalVae)> {
    let model = MultimodalVae::new(cfg.model_spec(cell.latent)?, &mut rng_for(cell.seed, &[label_hash("init")]))?;
    train_model(cfg, cell, model, data, out_dir, progress)
}

/// [`train_on`] from a given initial model.
pub fn train_model(
    cfg: &ExperimentConfig,
    cell: Cell,
    mut model: MultimodalVae,
    data: &SampleSet,
    out_dir: &Path,
    progress: &mut dyn FnMut(&EpochRow),
) -> Result<(RunLog, MultimodalVae)> {
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} training samples",
            cfg.batch_size,
            data.len()
        )));
    }
    let ckpt_dir = out_dir.join("checkpoints");
    let spec = model.spec().clone();
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let mut adam = AdamState::new(&model.params, cfg.learning_rate);
    let ocfg = cfg.objective_config();

    let csv_path = out_dir.join("loss.csv");
    let mut csv = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    writeln!(csv, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(&csv_path, e))?;

    let mut log = RunLog {
        config: cfg.clone(),
        cell,
        status: RunStatus::Completed,
        epochs: Vec::new(),
        checkpoints: Vec::new(),
        final_checkpoint: None,
        evaluation: None,
    };
    let meta = |epoch: usize, step: u64| CheckpointMeta {
        spec: spec.clone(),
        level: cfg.level,
        epoch,
        step,
        cell,
        config: cfg.clone(),
    };
    let mut step: u64 = 0;
    'epochs: for epoch in 1..=cfg.epochs() {
        let start = Instant::now();
        let order = batch_order(
            data.len(),
            cfg.batch_size,
            Some(derive_seed(cell.seed, &[label_hash("shuffle"), epoch as u64])),
        );
        let (mut loss, mut recon, mut kl) = (0.0, vec![0.0; 2], 0.0);
        for indices in &order {
            let images: Vec<&RgbImage> = indices.iter().map(|&i| &data.images[i]).collect();
            let captions: Vec<&str> = indices.iter().map(|&i| data.captions[i].as_str()).collect();
            let batch = batch_from_records(&images, &captions)?;
            let mut tape = Tape::new();
            let diverged = |message: String| RunStatus::Failed { message };
            let obj =
                match objective(&mut tape, &model, &batch, &ocfg, derive_seed(cell.seed, &[label_hash("noise"), step]))
                {
                    Ok(obj) => obj,
                    Err(e @ Error::NonFiniteValue { .. }) => {
                        let loss = Error::Diverged { epoch, step: step as usize, loss: f64::NAN };
                        log.status = diverged(format!("{loss} ({e})"));
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                };
            if !obj.report.total.is_finite() {
                log.status =
                    diverged(Error::Diverged { epoch, step: step as usize, loss: obj.report.total }.to_string());
                break 'epochs;
            }
            tape.backward(obj.loss)?;
            model.params.zero_grads();
            tape.write_param_grads(&mut model.params);
            match adam.step(&mut model.params) {
                Ok(()) => {}
                Err(e @ Error::NonFiniteGradient { .. }) => {
                    log.status = diverged(format!("epoch {epoch}, step {step}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            step += 1;
            loss += obj.report.total;
            recon.iter_mut().zip(obj.report.recon_per_modality(2)).for_each(|(a, v)| *a += v);
            kl += obj.report.kl();
        }
        let n = order.len() as f64;
        let row = EpochRow {
            epoch,
            steps: order.len(),
            loss: loss / n,
            recon: recon.iter().map(|v| v / n).collect(),
            kl: kl / n,
            seconds: start.elapsed().as_secs_f64(),
        };
        writeln!(csv, "{}", row.csv()).map_err(|e| Error::io(&csv_path, e))?;
        progress(&row);
        log.epochs.push(row);
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs() {
            let path = ckpt_dir.join(format!("epoch_{epoch:04}.{CHECKPOINT_EXTENSION}"));
            write_checkpoint(&model, &meta(epoch, step), &path)?;
            log.checkpoints.push(path);
        }
    }
    if log.completed() {
        let path = out_dir.join(format!("final.{CHECKPOINT_EXTENSION}"));
        write_checkpoint(&model, &meta(cfg.epochs(), step), &path)?;
        log.final_checkpoint = Some(path);
    }
    log.save(out_dir)?;
    Ok((log, model))
}

/// Train one cell of `cfg` on its dataset into `cfg.cell_dir(cell)`.
pub fn train(
    cfg: &ExperimentConfig,
    cell: Cell,
    progress: &mut dyn FnMut(&EpochRow),
) -> Result<(RunLog, MultimodalVae)> {
    let data = load_training_set(cfg)?;
    let dir = cfg.cell_dir(cell);
    let (log, model) = train_on(cfg, cell, &data, &dir, progress)?;
    let snapshot = dir.join("config.toml");
    fs::write(&snapshot, cfg.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;
    Ok((log, model))
}
