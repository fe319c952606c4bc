//! Settings sized for a single CPU core. The stage schedules keep the
//! curriculum structure but use small batches and larger rates so that
//! each stage converges in minutes.

use crate::audiofront::AudioConfig;
use crate::backbone::BackboneConfig;
use crate::datagen::lexicon;
use crate::error::Result;
use crate::state::ModelConfig;

use super::stage::StageConfig;

pub fn desk_backbone() -> BackboneConfig {
    BackboneConfig {
        layers: 3,
        model_dim: 48,
        heads: 4,
        ffn_dim: 192,
        max_positions: 128,
    }
}

pub fn desk_model_config() -> ModelConfig {
    ModelConfig::new(lexicon(), desk_backbone(), AudioConfig::default())
}

/// Per-stage `(peak_lr, batch, warmup, epochs)` for desk runs.
pub fn desk_schedule(stage: u8) -> (f64, usize, u64, usize) {
    match stage {
        0 => (1e-3, 8, 100, 3),
        1 => (3e-3, 16, 50, 1),
        2 => (2e-3, 16, 50, 2),
        3 => (1e-3, 16, 50, 2),
        _ => (1e-4, 4, 20, 1),
    }
}

pub fn desk_stage_config(stage: u8) -> Result<StageConfig> {
    let mut c = StageConfig::published(stage)?;
    let (lr, batch, warmup, epochs) = desk_schedule(stage);
    c.schedule.peak_lr = lr;
    c.schedule.batch_size = batch;
    c.schedule.warmup_steps = warmup;
    c.schedule.epochs = epochs;
    c.clip_norm = Some(1.0);
    Ok(c)
}

/// Stage-0 settings for a multiple-choice-only warm-up pass run before the
/// mixed stage-0 corpus. Option selection is a two-hop lookup that small
/// backbones pick up far more reliably without transcription data competing
/// for the same steps.
pub fn desk_choice_warmup_config() -> Result<StageConfig> {
    let mut c = desk_stage_config(0)?;
    c.schedule.epochs = 8;
    Ok(c)
}
