//! Weighted masked-prediction losses: unconditional pretraining, text SFT,
//! and audio-conditioned SFT. All three share
//! `(1/t) · Σ_{masked i} −log p(clean_i | corrupted, condition)`.

use std::sync::Arc;

use crate::audiofront::{condition_prefix, AcousticMode, EncoderStates};
use crate::backbone::{self, TokenId, TokenSeq};
use crate::error::{Error, Result};
use crate::masking::MaskPattern;
use crate::state::ModelState;
use crate::substrate::{evaluate, Tape, Var};

/// Encoder output of one clip plus how the acoustic stream is used.
#[derive(Debug, Clone)]
pub struct AudioCondition {
    pub states: Arc<EncoderStates>,
    pub mode: AcousticMode,
}

/// One corrupted training example over the token region `[prompt][response]`.
#[derive(Debug, Clone)]
pub struct LossSample {
    pub clean: TokenSeq,
    pub corrupted: TokenSeq,
    pub pattern: MaskPattern,
    pub response_start: usize,
    pub audio: Option<AudioCondition>,
}

impl LossSample {
    /// Applies `pattern` to the response region of `clean`.
    pub fn new(
        clean: TokenSeq,
        response_start: usize,
        pattern: MaskPattern,
        mask: TokenId,
        audio: Option<AudioCondition>,
    ) -> Result<Self> {
        if response_start > clean.len() {
            return Err(Error::Contract("response start beyond sequence".into()));
        }
        let maskable: Vec<usize> = (response_start..clean.len()).collect();
        let corrupted = pattern.apply(&clean, &maskable, mask)?;
        Ok(Self {
            clean,
            corrupted,
            pattern,
            response_start,
            audio,
        })
    }

    pub fn response_len(&self) -> usize {
        self.clean.len() - self.response_start
    }

    /// Token indices the pattern masks.
    pub fn masked_positions(&self) -> Vec<usize> {
        self.pattern
            .flags
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(i, _)| self.response_start + i)
            .collect()
    }

    fn validate(&self, mask: TokenId) -> Result<()> {
        if self.corrupted.len() != self.clean.len() {
            return Err(Error::Contract("clean/corrupted length mismatch".into()));
        }
        if self.pattern.len() != self.response_len() {
            return Err(Error::Contract(format!(
                "pattern covers {} positions, response has {}",
                self.pattern.len(),
                self.response_len()
            )));
        }
        if !(self.pattern.t > 0.0 && self.pattern.t <= 1.0) {
            return Err(Error::Contract(format!(
                "noise level {} outside (0,1]",
                self.pattern.t
            )));
        }
        if self.corrupted[..self.response_start] != self.clean[..self.response_start] {
            return Err(Error::Contract(
                "corruption touches the prompt region".into(),
            ));
        }
        for (i, &f) in self.pattern.flags.iter().enumerate() {
            let p = self.response_start + i;
            let expect = if f { mask } else { self.clean[p] };
            if self.corrupted[p] != expect {
                return Err(Error::Contract(format!(
                    "position {p} disagrees with the pattern"
                )));
            }
        }
        Ok(())
    }
}

/// Loss node for `sample` given already-built condition rows.
pub fn masked_loss_with_prefix(
    tape: &mut Tape<'_>,
    state: &ModelState,
    sample: &LossSample,
    prefix: Option<Var>,
) -> Result<Var> {
    sample.validate(state.config.vocab.mask())?;
    let masked = sample.masked_positions();
    if masked.is_empty() {
        return Ok(tape.constant(crate::substrate::Mat::scalar(0.0)));
    }
    let logits = backbone::forward(tape, state, prefix, &sample.corrupted, &masked)?;
    let logp = tape.log_softmax_rows(logits);
    let picks: Vec<(usize, usize)> = masked
        .iter()
        .enumerate()
        .map(|(row, &p)| (row, sample.clean[p] as usize))
        .collect();
    let lp = tape.pick(logp, &picks);
    let total = tape.sum(lp);
    Ok(tape.scale(total, -1.0 / sample.pattern.t))
}

fn audio_prefix(
    tape: &mut Tape<'_>,
    state: &ModelState,
    sample: &LossSample,
) -> Result<Option<Var>> {
    match &sample.audio {
        None => Ok(None),
        Some(a) => Ok(Some(condition_prefix(tape, state, &a.states, a.mode)?)),
    }
}

pub fn pretrain_loss_node(
    tape: &mut Tape<'_>,
    state: &ModelState,
    sample: &LossSample,
) -> Result<Var> {
    if sample.audio.is_some() || sample.response_start != 0 {
        return Err(Error::Contract(
            "pretraining samples carry no condition".into(),
        ));
    }
    masked_loss_with_prefix(tape, state, sample, None)
}

pub fn sft_loss_node(tape: &mut Tape<'_>, state: &ModelState, sample: &LossSample) -> Result<Var> {
    if sample.audio.is_some() {
        return Err(Error::Contract("text SFT samples carry no audio".into()));
    }
    if sample.response_start == 0 {
        return Err(Error::Contract("text SFT needs a prompt".into()));
    }
    masked_loss_with_prefix(tape, state, sample, None)
}

pub fn audio_sft_loss_node(
    tape: &mut Tape<'_>,
    state: &ModelState,
    sample: &LossSample,
) -> Result<Var> {
    if sample.audio.is_none() {
        return Err(Error::Contract("audio SFT needs an audio condition".into()));
    }
    let prefix = audio_prefix(tape, state, sample)?;
    masked_loss_with_prefix(tape, state, sample, prefix)
}

pub fn pretrain_loss(state: &ModelState, sample: &LossSample) -> Result<f64> {
    evaluate(&state.params, |t| pretrain_loss_node(t, state, sample))
}

pub fn sft_loss(state: &ModelState, sample: &LossSample) -> Result<f64> {
    evaluate(&state.params, |t| sft_loss_node(t, state, sample))
}

pub fn audio_sft_loss(state: &ModelState, sample: &LossSample) -> Result<f64> {
    evaluate(&state.params, |t| audio_sft_loss_node(t, state, sample))
}

/// Which of the three losses a sample is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Pretrain,
    Sft,
    AudioSft,
}

pub fn loss_node(
    tape: &mut Tape<'_>,
    state: &ModelState,
    kind: LossKind,
    sample: &LossSample,
) -> Result<Var> {
    match kind {
        LossKind::Pretrain => pretrain_loss_node(tape, state, sample),
        LossKind::Sft => sft_loss_node(tape, state, sample),
        LossKind::AudioSft => audio_sft_loss_node(tape, state, sample),
    }
}
