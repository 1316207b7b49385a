//! Experiment configs, training loops, grid search, evaluation and exports.

mod config;
mod evaluate;
mod export;
mod grid;
mod train;

pub use config::{Axis, Cell, ExperimentConfig, TraversalConfig, OUTPUT_ROOT_VAR};
pub use evaluate::{
    evaluate_checkpoint, evaluate_model, load_test_set, resolve_level_dir, EvaluationOptions, EvaluationReport,
    TABLE_COLUMNS,
};
pub use export::{
    export_visualizations, latent_pca_csv, tile_images, traversal_grid, ExportOptions, ExportedFiles, Pca,
};
pub use grid::{grid_search, CellResult, GridSummary, MeanSd, SummaryRow};
pub use train::{
    load_model, load_training_set, train, train_model, train_on, CheckpointMeta, EpochRow, RunLog, RunStatus,
    CHECKPOINT_EXTENSION, LOSS_CSV_HEADER,
};
