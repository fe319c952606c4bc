//! Block-wise diffusion decoding.
//!
//! The response starts fully masked and is filled block by block, left to
//! right. Inside a block every step re-predicts all still-masked positions
//! and commits the most confident ones; the rest stay masked. Committed
//! tokens are never reopened.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::audiofront::condition_rows;
use crate::backbone::{forward, TokenId, TokenSeq};
use crate::error::{Error, Result};
use crate::state::ModelState;
use crate::substrate::{Mat, Tape};
use crate::vrpo::ResponseContext;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// A fixed number of steps per block, committing `⌈iB/S⌉` tokens cumulatively.
    FixedSteps,
    /// Commit as many tokens per step as the confidence factor allows.
    Factor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub gen_length: usize,
    pub block_length: usize,
    pub steps: usize,
    pub mode: DecodeMode,
    pub factor: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self::understanding()
    }
}

impl DecodeConfig {
    /// Short-answer setting: gen 16, one block, 16 steps.
    pub fn understanding() -> Self {
        Self {
            gen_length: 16,
            block_length: 16,
            steps: 16,
            mode: DecodeMode::FixedSteps,
            factor: 1.0,
            seed: 0,
        }
    }

    /// Open-ended answers: gen 128, blocks of 32, 128 steps.
    pub fn open_qa() -> Self {
        Self {
            gen_length: 128,
            block_length: 32,
            steps: 128,
            ..Self::understanding()
        }
    }

    pub fn blocks(&self) -> usize {
        self.gen_length / self.block_length
    }

    /// Steps spent on each block in fixed-steps mode.
    pub fn steps_per_block(&self) -> usize {
        self.steps * self.block_length / self.gen_length
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::DecodeConfig(m));
        if self.gen_length == 0 || self.block_length == 0 {
            return bad("gen_length and block_length must be positive".into());
        }
        if !self.gen_length.is_multiple_of(self.block_length) {
            return bad(format!(
                "block_length {} does not divide gen_length {}",
                self.block_length, self.gen_length
            ));
        }
        match self.mode {
            DecodeMode::FixedSteps => {
                if self.steps < self.blocks() {
                    return bad(format!(
                        "steps {} fewer than blocks {}",
                        self.steps,
                        self.blocks()
                    ));
                }
                if self.steps_per_block() > self.block_length {
                    return bad(format!(
                        "{} steps per block exceed block_length {}",
                        self.steps_per_block(),
                        self.block_length
                    ));
                }
            }
            DecodeMode::Factor => {
                if !(self.factor > 0.0 && self.factor.is_finite()) {
                    return bad(format!("factor must be positive, got {}", self.factor));
                }
            }
        }
        Ok(())
    }
}

/// One denoising step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub block: usize,
    pub step: usize,
    pub masked_before: usize,
    /// Response-relative positions committed this step, in commit order.
    pub finalized: Vec<usize>,
    pub tokens: Vec<TokenId>,
    pub confidences: Vec<f64>,
    /// The full response after this step.
    pub response: TokenSeq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub config: DecodeConfig,
    pub steps: Vec<StepRecord>,
    pub forward_passes: usize,
    pub wall_time_secs: f64,
    /// Response before end-of-text truncation.
    pub response: TokenSeq,
}

#[derive(Serialize)]
struct TraceSummary<'a> {
    kind: &'static str,
    config: &'a DecodeConfig,
    forward_passes: usize,
    wall_time_secs: f64,
    response: &'a TokenSeq,
}

impl DecodeTrace {
    /// Line-delimited JSON: one line per step, then a summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{}",
                serde_json::to_string(s).expect("step serializes")
            );
        }
        let summary = TraceSummary {
            kind: "summary",
            config: &self.config,
            forward_passes: self.forward_passes,
            wall_time_secs: self.wall_time_secs,
            response: &self.response,
        };
        let _ = writeln!(
            out,
            "{}",
            serde_json::to_string(&summary).expect("summary serializes")
        );
        out
    }

    /// Steps that committed exactly one token.
    pub fn single_commit_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.finalized.len() == 1).count()
    }
}

/// Argmax and its confidence per requested position.
///
/// MASK is never a legal output, so it is excluded and the remaining
/// probabilities are renormalized. Ties go to the lower token id.
pub fn denoise_predict(
    state: &ModelState,
    prefix: Option<&Mat>,
    tokens: &[TokenId],
    positions: &[usize],
) -> Result<Vec<(TokenId, f64)>> {
    let mask = state.config.vocab.mask();
    if positions.is_empty() {
        return Err(Error::Empty("positions to predict"));
    }
    if let Some(&p) = positions
        .iter()
        .find(|&&p| p >= tokens.len() || tokens[p] != mask)
    {
        return Err(Error::Contract(format!("position {p} is not masked")));
    }
    let mut tape = Tape::inference(&state.params);
    let pre = prefix
        .filter(|m| m.rows > 0)
        .map(|m| tape.constant(m.clone()));
    let logits = forward(&mut tape, state, pre, tokens, positions)?;
    let lv = tape.value(logits);
    Ok((0..positions.len())
        .map(|r| pick_confident(lv.row(r), mask))
        .collect())
}

fn pick_confident(row: &[f64], mask: TokenId) -> (TokenId, f64) {
    let mut best = usize::MAX;
    let mut top = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if i as TokenId != mask && v > top {
            top = v;
            best = i;
        }
    }
    let z: f64 = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i as TokenId != mask)
        .map(|(_, &v)| (v - top).exp())
        .sum();
    (best as TokenId, 1.0 / z)
}

/// Tokens committed at each of `steps` steps over a block of `block` tokens.
pub fn remask_schedule(block: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > block {
        return Err(Error::DecodeConfig(format!(
            "steps per block must lie in 1..={block}, got {steps}"
        )));
    }
    let cum = |i: usize| (i * block).div_ceil(steps);
    Ok((1..=steps).map(|i| cum(i) - cum(i - 1)).collect())
}

/// Largest `n` with `(n+1)(1 − c⁽ⁿ⁾) < f`, at least 1.
pub fn factor_select(sorted_conf: &[f64], f: f64) -> Result<usize> {
    if sorted_conf.is_empty() {
        return Err(Error::Empty("confidence list"));
    }
    let best = (1..=sorted_conf.len())
        .rev()
        .find(|&n| ((n + 1) as f64) * (1.0 - sorted_conf[n - 1]) < f);
    Ok(best.unwrap_or(1))
}

/// Decodes a response for `ctx`. Returns the response truncated at the first
/// end-of-text token, plus the full trace.
pub fn decode(
    state: &ModelState,
    ctx: &ResponseContext,
    config: &DecodeConfig,
) -> Result<(TokenSeq, DecodeTrace)> {
    config.validate()?;
    let start = Instant::now();
    let prefix = match &ctx.audio {
        Some(a) => Some(condition_rows(state, &a.states, a.mode)?),
        None => None,
    };
    decode_with_prefix(state, prefix.as_ref(), &ctx.prompt, config, start)
}

/// As [`decode`] with precomputed condition rows.
pub fn decode_with_prefix(
    state: &ModelState,
    prefix: Option<&Mat>,
    prompt: &[TokenId],
    config: &DecodeConfig,
    start: Instant,
) -> Result<(TokenSeq, DecodeTrace)> {
    config.validate()?;
    let vocab = &state.config.vocab;
    let mask = vocab.mask();
    let n_prefix = prefix.map_or(0, |m| m.rows);
    let total = n_prefix + prompt.len() + config.gen_length;
    let max = state.config.backbone.max_positions;
    if total > max {
        return Err(Error::Length { len: total, max });
    }
    let off = prompt.len();
    let mut seq: TokenSeq = prompt.to_vec();
    seq.resize(off + config.gen_length, mask);
    let bl = config.block_length;
    let schedule = match config.mode {
        DecodeMode::FixedSteps => Some(remask_schedule(bl, config.steps_per_block())?),
        DecodeMode::Factor => None,
    };
    let mut steps = Vec::new();
    let mut passes = 0usize;
    for b in 0..config.blocks() {
        let block: Vec<usize> = (off + b * bl..off + (b + 1) * bl).collect();
        let mut step = 0usize;
        loop {
            let masked: Vec<usize> = block.iter().copied().filter(|&p| seq[p] == mask).collect();
            if masked.is_empty() {
                break;
            }
            let preds = denoise_predict(state, prefix, &seq, &masked)?;
            passes += 1;
            let mut order: Vec<usize> = (0..masked.len()).collect();
            // Descending confidence; ties by position.
            order.sort_by(|&i, &j| {
                preds[j]
                    .1
                    .total_cmp(&preds[i].1)
                    .then(masked[i].cmp(&masked[j]))
            });
            let n = match &schedule {
                Some(s) => s.get(step).copied().unwrap_or(masked.len()),
                None => {
                    let sorted: Vec<f64> = order.iter().map(|&i| preds[i].1).collect();
                    factor_select(&sorted, config.factor)?
                }
            }
            .min(masked.len());
            let mut rec = StepRecord {
                block: b,
                step,
                masked_before: masked.len(),
                finalized: Vec::with_capacity(n),
                tokens: Vec::with_capacity(n),
                confidences: Vec::with_capacity(n),
                response: Vec::new(),
            };
            for &i in &order[..n] {
                seq[masked[i]] = preds[i].0;
                rec.finalized.push(masked[i] - off);
                rec.tokens.push(preds[i].0);
                rec.confidences.push(preds[i].1);
            }
            rec.response = seq[off..].to_vec();
            steps.push(rec);
            step += 1;
        }
    }
    let response: TokenSeq = seq[off..].to_vec();
    let out = vocab.truncate_at_eot(&response).to_vec();
    let trace = DecodeTrace {
        config: *config,
        steps,
        forward_passes: passes,
        wall_time_secs: start.elapsed().as_secs_f64(),
        response,
    };
    Ok((out, trace))
}
