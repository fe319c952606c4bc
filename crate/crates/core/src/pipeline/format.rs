//! Turns corpus records into model inputs.
//!
//! Every input has the same shape: `[acoustic][semantic][prompt][response]`.
//! The prompt is left-padded so that semantic rows plus prompt tokens always
//! fill a fixed budget, which puts the response at the same absolute
//! position for every record of a given acoustic mode.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::audiofront::{condition_rows, encode_frozen, AcousticMode, EncoderStates};
use crate::backbone::{TokenId, TokenSeq};
use crate::datagen::{pad_id, Corpus, Example, RecordKind};
use crate::error::{Error, Result};
use crate::losses::AudioCondition;
use crate::state::ModelState;
use crate::substrate::{Mat, Tape, Var};
use crate::vrpo::ResponseContext;

/// Frames folded into one semantic row.
pub const SEMANTIC_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFormat {
    /// Semantic rows plus prompt tokens.
    pub prompt_budget: usize,
    pub response_len: usize,
}

impl Default for InputFormat {
    fn default() -> Self {
        Self {
            prompt_budget: 40,
            response_len: 16,
        }
    }
}

/// A record ready for training or decoding.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub kind: RecordKind,
    pub prompt: TokenSeq,
    pub response: TokenSeq,
    pub rejected: Option<TokenSeq>,
    pub transcript: TokenSeq,
    pub attribute: Option<TokenId>,
    pub attribute_question: bool,
    pub states: Arc<EncoderStates>,
}

impl Prepared {
    pub fn audio(&self, mode: AcousticMode) -> AudioCondition {
        AudioCondition {
            states: self.states.clone(),
            mode,
        }
    }

    pub fn context(&self, mode: AcousticMode) -> ResponseContext {
        ResponseContext {
            prompt: self.prompt.clone(),
            audio: Some(self.audio(mode)),
        }
    }

    /// Unpadded reference answer.
    pub fn answer(&self, eot: TokenId) -> &[TokenId] {
        let end = self
            .response
            .iter()
            .position(|&t| t == eot)
            .unwrap_or(self.response.len());
        &self.response[..end]
    }
}

fn pad_response(mut toks: TokenSeq, len: usize, eot: TokenId, id: &str) -> Result<TokenSeq> {
    if toks.len() > len {
        return Err(Error::Contract(format!(
            "record {id}: response of {} tokens exceeds {len}",
            toks.len()
        )));
    }
    toks.resize(len, eot);
    Ok(toks)
}

pub fn prepare_example(state: &ModelState, e: &Example, fmt: &InputFormat) -> Result<Prepared> {
    let vocab = &state.config.vocab;
    let r = &e.record;
    let states = encode_frozen(&state.params, &e.frames)?;
    let semantic = e.frames.rows.div_ceil(SEMANTIC_STRIDE);
    let prompt = vocab.tokenize(&r.prompt)?;
    if semantic + prompt.len() > fmt.prompt_budget {
        return Err(Error::Length {
            len: semantic + prompt.len(),
            max: fmt.prompt_budget,
        });
    }
    let mut padded = vec![pad_id(vocab); fmt.prompt_budget - semantic - prompt.len()];
    padded.extend(prompt);
    let eot = vocab.eot();
    let response = pad_response(vocab.tokenize(&r.response)?, fmt.response_len, eot, &r.id)?;
    let rejected = match (&r.rejected, r.kind) {
        (Some(t), RecordKind::Pref) => Some(pad_response(
            vocab.tokenize(t)?,
            fmt.response_len,
            eot,
            &r.id,
        )?),
        _ => None,
    };
    let attribute = match &r.attribute {
        Some(a) => Some(vocab.id(a).ok_or_else(|| Error::UnknownToken(a.clone()))?),
        None => None,
    };
    Ok(Prepared {
        id: r.id.clone(),
        kind: r.kind,
        prompt: padded,
        response,
        rejected,
        transcript: vocab.tokenize(&r.transcript)?,
        attribute,
        attribute_question: r.attribute_question,
        states: Arc::new(states),
    })
}

/// Prepares every record; frames go through the frozen encoder once here.
pub fn prepare(state: &ModelState, corpus: &Corpus, fmt: &InputFormat) -> Result<Vec<Prepared>> {
    corpus
        .examples
        .iter()
        .map(|e| prepare_example(state, e, fmt))
        .collect()
}

/// Condition rows built from token embeddings instead of adapters: the
/// acoustic slot repeats the attribute word, the semantic slot spells the
/// transcript. Used to pretrain the backbone on the final layout.
pub fn text_prefix(
    tape: &mut Tape<'_>,
    state: &ModelState,
    p: &Prepared,
    mode: AcousticMode,
) -> Result<Var> {
    let emb = tape.param("backbone.tok_emb")?;
    let semantic: Vec<usize> = p.transcript.iter().map(|&t| t as usize).collect();
    let sem = tape.gather(emb, &semantic);
    match mode {
        AcousticMode::Absent => Ok(sem),
        AcousticMode::Present | AcousticMode::Silent => {
            let a = p
                .attribute
                .ok_or_else(|| Error::Contract(format!("record {} has no attribute", p.id)))?;
            let ac = if mode == AcousticMode::Present {
                tape.gather(emb, &vec![a as usize; state.config.audio.queries])
            } else {
                tape.constant(Mat::zeros(
                    state.config.audio.queries,
                    state.config.backbone.model_dim,
                ))
            };
            Ok(tape.concat_rows(&[ac, sem]))
        }
    }
}

/// Condition rows for decoding `p`.
pub fn condition_for(
    state: &ModelState,
    p: &Prepared,
    mode: AcousticMode,
    text_form: bool,
) -> Result<Mat> {
    if text_form {
        let mut tape = Tape::inference(&state.params);
        let v = text_prefix(&mut tape, state, p, mode)?;
        Ok(tape.value(v).to_owned())
    } else {
        condition_rows(state, &p.states, mode)
    }
}
