//! Held-out evaluation: transcription error, multiple-choice accuracy,
//! preference margins, and decoding cost.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audiofront::AcousticMode;
use crate::backbone::TokenId;
use crate::datagen::{Corpus, RecordKind, OPTION_LETTERS};
use crate::decode::{decode_with_prefix, DecodeConfig, DecodeMode};
use crate::error::{Error, Result};
use crate::masking::shared_patterns;
use crate::pipeline::{condition_for, prepare, InputFormat, Prepared};
use crate::state::ModelState;
use crate::vrpo::log_ratio;

/// Edit distance (unit costs) divided by the reference length.
pub fn token_error_rate(hyp: &[TokenId], reference: &[TokenId]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("reference sequence"));
    }
    Ok(
        strsim::generic_levenshtein(&hyp.to_vec(), &reference.to_vec()) as f64
            / reference.len() as f64,
    )
}

/// The option letter an answer starts with, if any.
pub fn extract_choice(text: &str) -> Option<char> {
    let c = text.trim_start().chars().next()?;
    OPTION_LETTERS.iter().any(|l| l.starts_with(c)).then_some(c)
}

#[derive(Debug, Clone)]
pub struct EvalOptions<'a> {
    pub decode: DecodeConfig,
    pub mode: AcousticMode,
    /// Feed token-embedding conditions instead of adapter outputs.
    pub text_form: bool,
    pub format: InputFormat,
    /// Needed for preference margins.
    pub reference: Option<&'a ModelState>,
    pub elbo_samples: usize,
    /// Ids seen during training; any overlap is an error.
    pub train_ids: Option<&'a BTreeSet<String>>,
    pub seed: u64,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self {
            decode: DecodeConfig::understanding(),
            mode: AcousticMode::Present,
            text_form: false,
            format: InputFormat::default(),
            reference: None,
            elbo_samples: 8,
            train_ids: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub token_error_rate: Option<f64>,
    pub choice_accuracy: Option<f64>,
    pub attribute_accuracy: Option<f64>,
    pub answer_exact_match: Option<f64>,
    pub preference_margin: Option<f64>,
    pub asr_records: usize,
    pub mcq_records: usize,
    pub attribute_records: usize,
    pub aqa_records: usize,
    pub pref_records: usize,
    pub forward_passes: usize,
    pub wall_seconds: f64,
    pub decode: DecodeConfig,
    pub mode: AcousticMode,
}

fn ratio(num: f64, den: usize) -> Option<f64> {
    (den > 0).then(|| num / den as f64)
}

pub fn check_contamination(corpus: &Corpus, train_ids: &BTreeSet<String>) -> Result<()> {
    let overlap = corpus
        .examples
        .iter()
        .filter(|e| train_ids.contains(&e.record.id))
        .count();
    if overlap > 0 {
        return Err(Error::Contamination(overlap));
    }
    Ok(())
}

/// Decodes every non-preference record and scores preference pairs by the
/// mean shared-pattern margin against `opts.reference`.
pub fn evaluate_suite(
    state: &ModelState,
    corpus: &Corpus,
    opts: &EvalOptions<'_>,
) -> Result<EvalReport> {
    if let Some(ids) = opts.train_ids {
        check_contamination(corpus, ids)?;
    }
    let start = Instant::now();
    let items = prepare(state, corpus, &opts.format)?;
    evaluate_prepared(state, &items, opts, start)
}

pub fn evaluate_prepared(
    state: &ModelState,
    items: &[Prepared],
    opts: &EvalOptions<'_>,
    start: Instant,
) -> Result<EvalReport> {
    opts.decode.validate()?;
    let vocab = &state.config.vocab;
    let eot = vocab.eot();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (mut edits, mut ref_len, mut asr) = (0.0, 0usize, 0usize);
    let (mut correct, mut mcq, mut attr_correct, mut attr_n) = (0usize, 0usize, 0usize, 0usize);
    let (mut exact, mut aqa) = (0usize, 0usize);
    let (mut margin, mut pref) = (0.0, 0usize);
    let mut passes = 0usize;
    for p in items {
        if p.kind == RecordKind::Pref {
            let reference = opts.reference.ok_or_else(|| {
                Error::Contract("preference scoring needs a reference model".into())
            })?;
            let rejected = p
                .rejected
                .as_ref()
                .expect("prepared pref records carry a rejection");
            let ctx = p.context(opts.mode);
            let pc = shared_patterns(p.response.len(), opts.elbo_samples, &mut rng)?;
            let pr = shared_patterns(rejected.len(), opts.elbo_samples, &mut rng)?;
            margin += log_ratio(state, reference, &p.response, &ctx, &pc)?
                - log_ratio(state, reference, rejected, &ctx, &pr)?;
            pref += 1;
            continue;
        }
        let cond = condition_for(state, p, opts.mode, opts.text_form)?;
        let (out, trace) =
            decode_with_prefix(state, Some(&cond), &p.prompt, &opts.decode, Instant::now())?;
        passes += trace.forward_passes;
        let answer = p.answer(eot);
        match p.kind {
            RecordKind::Asr => {
                edits += token_error_rate(&out, answer)? * answer.len() as f64;
                ref_len += answer.len();
                asr += 1;
            }
            RecordKind::Mcq => {
                let got = extract_choice(&vocab.detokenize(&out));
                let want = extract_choice(&vocab.detokenize(answer));
                let ok = got.is_some() && got == want;
                correct += ok as usize;
                mcq += 1;
                if p.attribute_question {
                    attr_correct += ok as usize;
                    attr_n += 1;
                }
            }
            RecordKind::Aqa => {
                exact += (out == answer) as usize;
                aqa += 1;
            }
            RecordKind::Pref => unreachable!(),
        }
    }
    Ok(EvalReport {
        token_error_rate: ratio(edits, ref_len),
        choice_accuracy: ratio(correct as f64, mcq),
        attribute_accuracy: ratio(attr_correct as f64, attr_n),
        answer_exact_match: ratio(exact as f64, aqa),
        preference_margin: ratio(margin, pref),
        asr_records: asr,
        mcq_records: mcq,
        attribute_records: attr_n,
        aqa_records: aqa,
        pref_records: pref,
        forward_passes: passes,
        wall_seconds: start.elapsed().as_secs_f64(),
        decode: opts.decode,
        mode: opts.mode,
    })
}

/// One row of a decoding speed/accuracy sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub mode: &'static str,
    pub steps: usize,
    pub factor: Option<f64>,
    pub token_error_rate: Option<f64>,
    pub choice_accuracy: Option<f64>,
    pub forward_passes: usize,
    pub wall_seconds: f64,
}

pub const SWEEP_CSV_HEADER: &str =
    "mode,steps,factor,token_error_rate,choice_accuracy,forward_passes,wall_seconds";

impl SweepRow {
    pub fn from_report(r: &EvalReport) -> Self {
        let factor = r.decode.mode == DecodeMode::Factor;
        Self {
            mode: if factor { "factor" } else { "fixed" },
            steps: r.decode.steps,
            factor: factor.then_some(r.decode.factor),
            token_error_rate: r.token_error_rate,
            choice_accuracy: r.choice_accuracy,
            forward_passes: r.forward_passes,
            wall_seconds: r.wall_seconds,
        }
    }

    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        format!(
            "{},{},{},{},{},{},{:.4}",
            self.mode,
            self.steps,
            opt(self.factor),
            opt(self.token_error_rate),
            opt(self.choice_accuracy),
            self.forward_passes,
            self.wall_seconds
        )
    }
}

/// Fixed-step decoding at each of `steps`, then factor decoding at each of
/// `factors`, all sharing `base`'s lengths.
pub fn decode_sweep(
    state: &ModelState,
    items: &[Prepared],
    base: DecodeConfig,
    steps: &[usize],
    factors: &[f64],
    mode: AcousticMode,
) -> Result<Vec<SweepRow>> {
    let fixed = steps.iter().map(|&s| DecodeConfig {
        steps: s,
        mode: DecodeMode::FixedSteps,
        ..base
    });
    let factor = factors.iter().map(|&f| DecodeConfig {
        mode: DecodeMode::Factor,
        factor: f,
        ..base
    });
    fixed
        .chain(factor)
        .map(|decode| {
            let opts = EvalOptions {
                decode,
                mode,
                ..EvalOptions::default()
            };
            Ok(SweepRow::from_report(&evaluate_prepared(
                state,
                items,
                &opts,
                Instant::now(),
            )?))
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}
