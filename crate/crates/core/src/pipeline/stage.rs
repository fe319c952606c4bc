//! Stage configuration and the training driver.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::format::{prepare, text_prefix, InputFormat, Prepared};
use crate::audiofront::AcousticMode;
use crate::backbone::attach_low_rank;
use crate::datagen::{Corpus, RecordKind};
use crate::error::{Error, Result};
use crate::losses::{audio_sft_loss_node, masked_loss_with_prefix, LossSample};
use crate::masking::MaskPattern;
use crate::state::ModelState;
use crate::substrate::{evaluate_and_grad, Adam, Grads, TrainSchedule};
use crate::vrpo::{
    vrpo_loss_and_grad, PreferencePair, ResponseContext, DEFAULT_BETA, DEFAULT_SAMPLES,
};

/// Highest stage index. Stage 0 pretrains the backbone on text-form inputs;
/// stages 1–4 are the audio curriculum.
pub const LAST_STAGE: u8 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: u8,
    pub schedule: TrainSchedule,
    /// Epochs and warmup are divided by this (rounded up, at least 1 epoch).
    pub divisor: u64,
    /// Fraction of a transcription corpus mixed into stages 2 and 3.
    pub reinject_fraction: f64,
    pub beta: f64,
    pub elbo_samples: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Hard cap on optimizer steps, for smoke runs.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub format: InputFormat,
}

impl StageConfig {
    /// Stage-wise defaults: peak rates 1e-4 / 5e-5 / 5e-5 / 5e-6, batches
    /// 1280 / 196 / 196 / 4, warmups 1000 / 1000 / 1000 / 200, epochs
    /// 12 / 10 / 10 / 1.
    pub fn published(stage: u8) -> Result<Self> {
        let (peak_lr, batch_size, warmup_steps, epochs) = match stage {
            0 => (1e-3, 32, 200, 1),
            1 => (1e-4, 1280, 1000, 12),
            2 => (5e-5, 196, 1000, 10),
            3 => (5e-5, 196, 1000, 10),
            4 => (5e-6, 4, 200, 1),
            _ => return Err(Error::Config(format!("no stage {stage}"))),
        };
        Ok(Self {
            stage,
            schedule: TrainSchedule {
                peak_lr,
                warmup_steps,
                batch_size,
                epochs,
            },
            divisor: 1,
            reinject_fraction: 0.05,
            beta: DEFAULT_BETA,
            elbo_samples: DEFAULT_SAMPLES,
            lora_rank: 8,
            lora_alpha: 16.0,
            clip_norm: None,
            max_steps: None,
            seed: 0,
            format: InputFormat::default(),
        })
    }

    /// Schedule with the desk-scale divisor applied.
    pub fn effective_schedule(&self) -> TrainSchedule {
        let d = self.divisor.max(1);
        TrainSchedule {
            warmup_steps: self.schedule.warmup_steps.div_ceil(d),
            epochs: (self.schedule.epochs as u64).div_ceil(d).max(1) as usize,
            ..self.schedule
        }
    }

    /// `key = value` lines; `#` starts a comment. Defaults come from
    /// [`StageConfig::published`] for the `stage` key, or `default_stage`.
    pub fn parse(text: &str, default_stage: Option<u8>) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let stage = match pairs.iter().find(|(k, _)| k == "stage") {
            Some((_, v)) => parse_num::<u8>("stage", v)?,
            None => default_stage.ok_or_else(|| Error::Config("missing `stage`".into()))?,
        };
        let mut c = Self::published(stage)?;
        for (k, v) in &pairs {
            c.set(k, v)?;
        }
        Ok(c)
    }

    /// Applies `key = value` overrides on top of `self`.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "stage" => {
                let s = parse_num::<u8>(key, v)?;
                if s != self.stage {
                    return Err(Error::Config(
                        "stage cannot change after defaults are chosen".into(),
                    ));
                }
            }
            "lr" | "peak_lr" => self.schedule.peak_lr = parse_num(key, v)?,
            "warmup" | "warmup_steps" => self.schedule.warmup_steps = parse_num(key, v)?,
            "batch" | "batch_size" => self.schedule.batch_size = parse_num(key, v)?,
            "epochs" => self.schedule.epochs = parse_num(key, v)?,
            "divisor" => self.divisor = parse_num(key, v)?,
            "reinject_fraction" => self.reinject_fraction = parse_num(key, v)?,
            "beta" => self.beta = parse_num(key, v)?,
            "elbo_samples" => self.elbo_samples = parse_num(key, v)?,
            "lora_rank" => self.lora_rank = parse_num(key, v)?,
            "lora_alpha" => self.lora_alpha = parse_num(key, v)?,
            "clip_norm" => {
                self.clip_norm = if v == "none" {
                    None
                } else {
                    Some(parse_num(key, v)?)
                }
            }
            "max_steps" => {
                self.max_steps = if v == "none" {
                    None
                } else {
                    Some(parse_num(key, v)?)
                }
            }
            "seed" => self.seed = parse_num(key, v)?,
            "prompt_budget" => self.format.prompt_budget = parse_num(key, v)?,
            "response_len" => self.format.response_len = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Whether tensor `name` is updated in this stage.
    pub fn trainable(&self, name: &str) -> bool {
        let lora = name.ends_with(".lora_a") || name.ends_with(".lora_b");
        let semantic = name.starts_with("semantic.");
        let acoustic = name.starts_with("acoustic.");
        match self.stage {
            0 => name.starts_with("backbone.") && !lora,
            1 => semantic,
            2 => semantic || acoustic,
            _ => semantic || acoustic || lora,
        }
    }

    /// How the acoustic stream is fed during this stage.
    pub fn acoustic_mode(&self) -> AcousticMode {
        if self.stage == 1 {
            AcousticMode::Absent
        } else {
            AcousticMode::Present
        }
    }

    fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.batch_size == 0
            || s.peak_lr.is_nan()
            || s.peak_lr <= 0.0
            || self.elbo_samples == 0
            || self.beta.is_nan()
            || self.beta <= 0.0
        {
            return Err(Error::Config(
                "batch, lr, beta and elbo_samples must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.reinject_fraction) {
            return Err(Error::Config("reinject_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub stage: u8,
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
}

/// Adds a random `fraction` of `asr` to `sft`.
pub fn with_reinjection<R: Rng + ?Sized>(
    sft: &Corpus,
    asr: &Corpus,
    fraction: f64,
    rng: &mut R,
) -> Corpus {
    let n = (asr.len() as f64 * fraction).round() as usize;
    let mut idx: Vec<usize> = (0..asr.len()).collect();
    idx.shuffle(rng);
    let mut examples = sft.examples.clone();
    examples.extend(idx[..n].iter().map(|&i| asr.examples[i].clone()));
    Corpus { examples }
}

fn check_corpus(stage: u8, corpus: &Corpus) -> Result<()> {
    let mismatch = |reason: String| Err(Error::CorpusMismatch { stage, reason });
    if corpus.is_empty() {
        return mismatch("corpus is empty".into());
    }
    let kinds = corpus.kinds();
    let only = |allowed: &[RecordKind]| kinds.iter().all(|k| allowed.contains(k));
    use RecordKind::*;
    match stage {
        0 if !only(&[Asr, Aqa, Mcq]) => {
            mismatch("pretraining takes asr, aqa and mcq records".into())
        }
        1 if !only(&[Asr]) => mismatch("stage 1 trains on transcription records only".into()),
        2 | 3 if !only(&[Asr, Aqa, Mcq]) || !(kinds.contains(&Aqa) || kinds.contains(&Mcq)) => {
            mismatch("stages 2 and 3 need question-answer records".into())
        }
        4 if !only(&[Pref]) => mismatch("stage 4 trains on preference pairs only".into()),
        _ => Ok(()),
    }
}

fn check_order(stage: u8, state: &ModelState) -> Result<()> {
    if stage > LAST_STAGE {
        return Err(Error::Config(format!("no stage {stage}")));
    }
    if stage == 0 && state.stage != 0 {
        return Err(Error::StageOrder {
            stage,
            needed: 0,
            found: state.stage,
        });
    }
    if stage > 0 && state.stage < stage - 1 {
        return Err(Error::StageOrder {
            stage,
            needed: stage - 1,
            found: state.stage,
        });
    }
    Ok(())
}

/// Loss node for one supervised sample at stage `stage`.
fn supervised_grad(
    state: &ModelState,
    p: &Prepared,
    stage: u8,
    mode: AcousticMode,
    seed: u64,
) -> Result<(f64, Grads)> {
    let mask = state.config.vocab.mask();
    let pattern = MaskPattern::sample(p.response.len(), seed);
    let mut clean = p.prompt.clone();
    clean.extend_from_slice(&p.response);
    let start = p.prompt.len();
    if stage == 0 {
        let sample = LossSample::new(clean, start, pattern, mask, None)?;
        evaluate_and_grad(&state.params, |t| {
            let prefix = text_prefix(t, state, p, mode)?;
            masked_loss_with_prefix(t, state, &sample, Some(prefix))
        })
    } else {
        let sample = LossSample::new(clean, start, pattern, mask, Some(p.audio(mode)))?;
        evaluate_and_grad(&state.params, |t| audio_sft_loss_node(t, state, &sample))
    }
}

fn pair_of(p: &Prepared, mode: AcousticMode) -> Result<PreferencePair> {
    let rejected = p
        .rejected
        .clone()
        .ok_or_else(|| Error::Contract(format!("record {} has no rejected response", p.id)))?;
    PreferencePair::new(
        ResponseContext {
            prompt: p.prompt.clone(),
            audio: Some(p.audio(mode)),
        },
        p.response.clone(),
        rejected,
    )
}

/// Trains `state` for one stage and returns the per-step log.
///
/// Only tensors selected by [`StageConfig::trainable`] change. Stage 3
/// attaches low-rank deltas to the attention projections if none exist.
/// Stage 4 uses a frozen copy of the incoming state as the reference.
pub fn run_stage<R: RngCore + ?Sized>(
    state: &mut ModelState,
    cfg: &StageConfig,
    corpus: &Corpus,
    rng: &mut R,
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    check_order(cfg.stage, state)?;
    check_corpus(cfg.stage, corpus)?;
    if cfg.stage >= 3 && state.lora.is_empty() {
        let targets = state.config.backbone.attention_projections();
        attach_low_rank(state, &targets, cfg.lora_rank, cfg.lora_alpha, rng)?;
    }
    state.params.set_trainable_where(|n| cfg.trainable(n));
    let items = prepare(state, corpus, &cfg.format)?;
    let usable: Vec<&Prepared> = items
        .iter()
        .filter(|p| {
            p.kind != RecordKind::Pref || p.rejected.as_ref().is_some_and(|r| *r != p.response)
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::CorpusMismatch {
            stage: cfg.stage,
            reason: "no usable records".into(),
        });
    }
    let reference = (cfg.stage == 4).then(|| state.frozen_copy());
    let sched = cfg.effective_schedule();
    let mode = cfg.acoustic_mode();
    let mut adam = Adam::new();
    let mut log = Vec::new();
    let mut step = 0u64;
    'epochs: for epoch in 0..sched.epochs {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(sched.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let mut grads = Grads::default();
            let mut loss = 0.0;
            let mut margin = 0.0;
            for &i in chunk {
                let p = usable[i];
                let (l, g) = match &reference {
                    Some(r) => {
                        let out = vrpo_loss_and_grad(
                            state,
                            r,
                            &pair_of(p, mode)?,
                            cfg.elbo_samples,
                            rng,
                            cfg.beta,
                        )?;
                        margin += out.margin();
                        (out.loss, out.grads)
                    }
                    None => {
                        // Stage-0 transcription records alternate between layouts.
                        let m = if cfg.stage == 0
                            && p.kind == RecordKind::Asr
                            && rng.random_bool(0.5)
                        {
                            AcousticMode::Absent
                        } else {
                            mode
                        };
                        supervised_grad(state, p, cfg.stage, m, rng.next_u64())?
                    }
                };
                loss += l;
                grads.accumulate(&g);
            }
            let n = chunk.len() as f64;
            grads.scale(1.0 / n);
            let norm = grads.global_norm();
            if let Some(c) = cfg.clip_norm {
                if norm > c {
                    grads.scale(c / norm);
                }
            }
            step += 1;
            adam.step(&mut state.params, &grads, &sched, step)?;
            if let Some(bad) = state.params.first_non_finite() {
                return Err(Error::NumericFailure {
                    tensor: bad.to_string(),
                });
            }
            state.step += 1;
            log.push(StepMetrics {
                stage: cfg.stage,
                step,
                epoch,
                loss: loss / n,
                lr: sched.lr(step),
                grad_norm: norm,
                margin: reference.as_ref().map(|_| margin / n),
            });
        }
    }
    state.stage = cfg.stage;
    Ok(log)
}
