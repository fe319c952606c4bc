//! Variance-reduced preference optimization.
//!
//! Sequence log-likelihoods are replaced by Monte Carlo ELBO estimates; the
//! policy and the frozen reference are evaluated on the *same* mask patterns
//! so that most of the estimator noise cancels in the log-ratio.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::audiofront::condition_prefix;
use crate::backbone::{TokenId, TokenSeq};
use crate::error::{Error, Result};
use crate::losses::{masked_loss_with_prefix, AudioCondition, LossSample};
use crate::masking::{shared_patterns, MaskPattern};
use crate::state::ModelState;
use crate::substrate::{log_sigmoid, Grads, Mat, Tape, Var};

pub const DEFAULT_SAMPLES: usize = 4;
pub const DEFAULT_BETA: f64 = 0.1;

/// Everything a response is conditioned on.
#[derive(Debug, Clone)]
pub struct ResponseContext {
    pub prompt: TokenSeq,
    pub audio: Option<AudioCondition>,
}

#[derive(Debug, Clone)]
pub struct PreferencePair {
    pub context: ResponseContext,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
}

impl PreferencePair {
    pub fn new(context: ResponseContext, chosen: TokenSeq, rejected: TokenSeq) -> Result<Self> {
        if chosen == rejected {
            return Err(Error::Contract(
                "chosen and rejected responses are identical".into(),
            ));
        }
        if chosen.is_empty() || rejected.is_empty() {
            return Err(Error::Empty("preference response"));
        }
        Ok(Self {
            context,
            chosen,
            rejected,
        })
    }
}

/// A Monte Carlo ELBO together with the patterns that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub value: f64,
    pub k: usize,
    pub terms: Vec<f64>,
    pub patterns: Vec<MaskPattern>,
}

fn sample_for(
    ctx: &ResponseContext,
    y: &[TokenId],
    pattern: &MaskPattern,
    mask: TokenId,
) -> Result<LossSample> {
    if pattern.len() != y.len() {
        return Err(Error::Contract(format!(
            "pattern covers {} positions, response has {}",
            pattern.len(),
            y.len()
        )));
    }
    let mut clean = ctx.prompt.clone();
    clean.extend_from_slice(y);
    LossSample::new(clean, ctx.prompt.len(), pattern.clone(), mask, None)
}

fn context_prefix(
    tape: &mut Tape<'_>,
    state: &ModelState,
    ctx: &ResponseContext,
) -> Result<Option<Var>> {
    match &ctx.audio {
        None => Ok(None),
        Some(a) => Ok(Some(condition_prefix(tape, state, &a.states, a.mode)?)),
    }
}

/// Per-pattern ELBO terms `−L_k` as nodes on `tape`, reusing `prefix`.
fn elbo_terms(
    tape: &mut Tape<'_>,
    state: &ModelState,
    prefix: Option<Var>,
    ctx: &ResponseContext,
    y: &[TokenId],
    patterns: &[MaskPattern],
) -> Result<Vec<Var>> {
    if patterns.is_empty() {
        return Err(Error::Empty("mask patterns"));
    }
    let mask = state.config.vocab.mask();
    patterns
        .iter()
        .map(|p| {
            let s = sample_for(ctx, y, p, mask)?;
            let l = masked_loss_with_prefix(tape, state, &s, prefix)?;
            Ok(tape.scale(l, -1.0))
        })
        .collect()
}

fn mean_node(tape: &mut Tape<'_>, terms: &[Var]) -> Var {
    let col = tape.concat_rows(terms);
    tape.mean(col)
}

/// ELBO mean as a differentiable node.
pub fn elbo_node(
    tape: &mut Tape<'_>,
    state: &ModelState,
    prefix: Option<Var>,
    ctx: &ResponseContext,
    y: &[TokenId],
    patterns: &[MaskPattern],
) -> Result<Var> {
    let terms = elbo_terms(tape, state, prefix, ctx, y, patterns)?;
    Ok(mean_node(tape, &terms))
}

pub fn elbo_estimate(
    state: &ModelState,
    y: &[TokenId],
    ctx: &ResponseContext,
    patterns: &[MaskPattern],
) -> Result<ElboEstimate> {
    let mut tape = Tape::inference(&state.params);
    let prefix = context_prefix(&mut tape, state, ctx)?;
    let terms = elbo_terms(&mut tape, state, prefix, ctx, y, patterns)?;
    let terms: Vec<f64> = terms.iter().map(|&v| tape.scalar(v)).collect();
    let value = terms.iter().sum::<f64>() / terms.len() as f64;
    if !value.is_finite() {
        return Err(Error::NumericFailure {
            tensor: "elbo".into(),
        });
    }
    Ok(ElboEstimate {
        value,
        k: terms.len(),
        terms,
        patterns: patterns.to_vec(),
    })
}

/// `ELBO_policy − ELBO_reference` on one shared pattern list.
pub fn log_ratio(
    policy: &ModelState,
    reference: &ModelState,
    y: &[TokenId],
    ctx: &ResponseContext,
    patterns: &[MaskPattern],
) -> Result<f64> {
    let p = elbo_estimate(policy, y, ctx, patterns)?;
    let r = elbo_estimate(reference, y, ctx, patterns)?;
    Ok(p.value - r.value)
}

/// `−log σ(β·margin)`.
pub fn preference_objective(margin: f64, beta: f64) -> f64 {
    -log_sigmoid(beta * margin)
}

/// Result of one preference-loss evaluation.
#[derive(Debug, Clone)]
pub struct VrpoOutcome {
    pub loss: f64,
    pub s_chosen: f64,
    pub s_rejected: f64,
    pub grads: Grads,
}

impl VrpoOutcome {
    pub fn margin(&self) -> f64 {
        self.s_chosen - self.s_rejected
    }
}

fn check_args(n: usize, beta: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::Contract("need at least one ELBO sample".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Contract(format!(
            "beta must be positive, got {beta}"
        )));
    }
    Ok(())
}

/// Loss value and policy gradients. The reference is evaluated as a
/// constant, so it never receives a gradient.
pub fn vrpo_loss_and_grad<R: RngCore + ?Sized>(
    policy: &ModelState,
    reference: &ModelState,
    pair: &PreferencePair,
    n: usize,
    rng: &mut R,
    beta: f64,
) -> Result<VrpoOutcome> {
    check_args(n, beta)?;
    // Separate pattern sets per response; each set is shared across models.
    let pats_c = shared_patterns(pair.chosen.len(), n, rng)?;
    let pats_r = shared_patterns(pair.rejected.len(), n, rng)?;
    let ctx = &pair.context;
    let ref_c = elbo_estimate(reference, &pair.chosen, ctx, &pats_c)?.value;
    let ref_r = elbo_estimate(reference, &pair.rejected, ctx, &pats_r)?.value;

    let mut tape = Tape::new(&policy.params);
    let prefix = context_prefix(&mut tape, policy, ctx)?;
    let ec = elbo_node(&mut tape, policy, prefix, ctx, &pair.chosen, &pats_c)?;
    let er = elbo_node(&mut tape, policy, prefix, ctx, &pair.rejected, &pats_r)?;
    let s_chosen = tape.scalar(ec) - ref_c;
    let s_rejected = tape.scalar(er) - ref_r;
    let diff = tape.sub(ec, er);
    let offset = tape.constant(Mat::scalar(ref_c - ref_r));
    let margin = tape.sub(diff, offset);
    let z = tape.scale(margin, beta);
    let ls = tape.log_sigmoid(z);
    let loss = tape.scale(ls, -1.0);
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    Ok(VrpoOutcome {
        loss: value,
        s_chosen,
        s_rejected,
        grads,
    })
}

pub fn vrpo_loss<R: RngCore + ?Sized>(
    policy: &ModelState,
    reference: &ModelState,
    pair: &PreferencePair,
    n: usize,
    rng: &mut R,
    beta: f64,
) -> Result<f64> {
    check_args(n, beta)?;
    let pats_c = shared_patterns(pair.chosen.len(), n, rng)?;
    let pats_r = shared_patterns(pair.rejected.len(), n, rng)?;
    let sc = log_ratio(policy, reference, &pair.chosen, &pair.context, &pats_c)?;
    let sr = log_ratio(policy, reference, &pair.rejected, &pair.context, &pats_r)?;
    let l = preference_objective(sc - sr, beta);
    if !l.is_finite() {
        return Err(Error::NumericFailure {
            tensor: "vrpo".into(),
        });
    }
    Ok(l)
}

/// Sample variance of the log-ratio under shared versus independent patterns.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VarianceReport {
    pub trials: usize,
    pub k: usize,
    pub shared_var: f64,
    pub independent_var: f64,
}

impl VarianceReport {
    pub fn ratio(&self) -> f64 {
        self.shared_var / self.independent_var
    }
}

fn sample_var(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
}

pub fn log_ratio_variance<R: RngCore + ?Sized>(
    policy: &ModelState,
    reference: &ModelState,
    y: &[TokenId],
    ctx: &ResponseContext,
    k: usize,
    trials: usize,
    rng: &mut R,
) -> Result<VarianceReport> {
    if trials < 2 {
        return Err(Error::Contract("variance needs at least two trials".into()));
    }
    let mut shared = Vec::with_capacity(trials);
    let mut indep = Vec::with_capacity(trials);
    for _ in 0..trials {
        let a = shared_patterns(y.len(), k, rng)?;
        let b = shared_patterns(y.len(), k, rng)?;
        let pa = elbo_estimate(policy, y, ctx, &a)?.value;
        let ra = elbo_estimate(reference, y, ctx, &a)?.value;
        let rb = elbo_estimate(reference, y, ctx, &b)?.value;
        shared.push(pa - ra);
        indep.push(pa - rb);
    }
    Ok(VarianceReport {
        trials,
        k,
        shared_var: sample_var(&shared),
        independent_var: sample_var(&indep),
    })
}
