//! The training curriculum: input formatting, per-stage freezing and
//! optimization, checkpoints, and parameter accounting.

mod checkpoint;
mod desk;
mod format;
mod report;
mod stage;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use desk::{
    desk_backbone, desk_choice_warmup_config, desk_model_config, desk_schedule, desk_stage_config,
};
pub use format::{
    condition_for, prepare, prepare_example, text_prefix, InputFormat, Prepared, SEMANTIC_STRIDE,
};
pub use report::{
    component_of, param_report, report_from_descriptors, ComponentCount, ParamReport, COMPONENTS,
};
pub use stage::{run_stage, with_reinjection, StageConfig, StepMetrics, LAST_STAGE};
