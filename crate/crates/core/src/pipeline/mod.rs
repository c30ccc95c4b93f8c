//! End-to-end commands: dataset and template construction, training,
//! evaluation, reconstruction, the marching-cubes baseline and ablations.

pub mod commands;
pub mod config;
pub mod eval;
pub mod model;
pub mod train;

pub use commands::{
    cmd_ablate, cmd_make_template, cmd_reconstruct, median, ablation_cells, AblationCell, AblationReport, AblationRow,
    TemplateSource,
};
pub use config::{Dtype, ModelConfig, RunConfig};
pub use eval::{cmd_baseline_mc, cmd_eval, predict_distances, structure_pairs};
pub use model::{CheckpointInfo, Model, Prediction};
pub use train::{build_model, load_split, prepare_split, train, EpochLog, GradNorms, TrainLog, TrainOutcome};
