//! Shared oracles and fixtures for the integration suites.
#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use maskdiff_core::audiofront::{encode_frozen, AcousticMode};
use maskdiff_core::backbone::attach_low_rank;
use maskdiff_core::decode::{DecodeConfig, DecodeMode, DecodeTrace};
use maskdiff_core::losses::{loss_node, AudioCondition, LossKind, LossSample};
use maskdiff_core::masking::MaskPattern;
use maskdiff_core::substrate::{evaluate_and_grad, Grads, Mat, ParamTensor};
use maskdiff_core::vrpo::{vrpo_loss, vrpo_loss_and_grad, PreferencePair, ResponseContext};
use maskdiff_core::{ModelConfig, ModelState, TokenId, Vocab};

pub const MASK: TokenId = 0;

pub fn tiny(vocab: usize, seed: u64) -> ModelState {
    ModelState::init(ModelConfig::tiny(Vocab::anonymous(vocab).unwrap()), seed).unwrap()
}

/// Tiny model with low-rank deltas attached and every trainable tensor
/// nudged off its initial value, so no gradient is trivially zero.
pub fn tiny_with_lora(vocab: usize, seed: u64) -> ModelState {
    let mut st = tiny(vocab, seed);
    let targets = st.config.backbone.attention_projections();
    attach_low_rank(
        &mut st,
        &targets,
        2,
        4.0,
        &mut ChaCha8Rng::seed_from_u64(seed ^ 1),
    )
    .unwrap();
    perturb(&mut st, 0.05, seed ^ 2);
    st
}

/// Adds N(0, sigma²) noise to every trainable tensor.
pub fn perturb(st: &mut ModelState, sigma: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    for t in st.params.iter_mut().filter(|t| !t.frozen) {
        for v in t.values.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
}

pub fn trainable_numel(st: &ModelState) -> usize {
    st.params
        .iter()
        .filter(|t| !t.frozen)
        .map(|t| t.numel())
        .sum()
}

pub fn total_numel(st: &ModelState) -> usize {
    st.params.iter().map(|t| t.numel()).sum()
}

pub fn random_frames(st: &ModelState, frames: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = st.config.audio.feature_dim;
    Mat::from_vec(
        frames,
        d,
        (0..frames * d)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
}

pub fn audio(st: &ModelState, frames: usize, seed: u64, mode: AcousticMode) -> AudioCondition {
    AudioCondition {
        states: Arc::new(encode_frozen(&st.params, &random_frames(st, frames, seed)).unwrap()),
        mode,
    }
}

pub fn loss_value(st: &ModelState, kind: LossKind, sample: &LossSample) -> f64 {
    maskdiff_core::substrate::evaluate(&st.params, |tape| loss_node(tape, st, kind, sample))
        .unwrap()
}

pub fn loss_and_grad(st: &ModelState, kind: LossKind, sample: &LossSample) -> (f64, Grads) {
    evaluate_and_grad(&st.params, |tape| loss_node(tape, st, kind, sample)).unwrap()
}

/// Result of a central-difference comparison over every trainable scalar.
#[derive(Debug)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
    /// Trainable tensors with no analytic gradient, in which case FD must be ≈ 0.
    pub missing: Vec<String>,
}

/// Relative error with an absolute floor: near-zero gradients are compared
/// against `FD_FLOOR` instead of their own (noise-dominated) magnitude.
pub const FD_FLOOR: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-5;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Central differences of `f` against `grads` over every trainable scalar.
pub fn fd_check(st: &ModelState, grads: &Grads, f: impl Fn(&ModelState) -> f64) -> FdReport {
    let mut probe = st.clone();
    let mut report = FdReport {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
        missing: Vec::new(),
    };
    let names: Vec<String> = st
        .params
        .iter()
        .filter(|t| !t.frozen)
        .map(|t| t.name.clone())
        .collect();
    for name in names {
        let analytic = grads.get(&name).map(|g| g.to_vec());
        if analytic.is_none() {
            report.missing.push(name.clone());
        }
        let n = st.params.get(&name).unwrap().numel();
        for i in 0..n {
            let orig = st.params.get(&name).unwrap().values[i];
            probe.params.get_mut(&name).unwrap().values[i] = orig + FD_STEP;
            let up = f(&probe);
            probe.params.get_mut(&name).unwrap().values[i] = orig - FD_STEP;
            let down = f(&probe);
            probe.params.get_mut(&name).unwrap().values[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel {
                report.max_rel = e;
                report.worst = format!("{name}[{i}] analytic {a:e} numeric {numeric:e}");
            }
        }
    }
    report
}

/// FD reports for the three masked losses and the preference loss.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, FdReport)> {
    let st = tiny_with_lora(7, seed);
    let mut out = Vec::new();

    let pretrain = LossSample::new(
        vec![2, 3, 4, 5, 6],
        0,
        MaskPattern::explicit(0.6, vec![true, false, true, true, false]),
        MASK,
        None,
    )
    .unwrap();
    let sft = LossSample::new(
        vec![3, 4, 2, 5, 6, 1],
        2,
        MaskPattern::explicit(0.4, vec![true, true, false, true]),
        MASK,
        None,
    )
    .unwrap();
    let audio_sample = LossSample::new(
        vec![3, 4, 5, 6, 1],
        2,
        MaskPattern::explicit(0.7, vec![true, false, true]),
        MASK,
        Some(audio(&st, 12, seed ^ 7, AcousticMode::Present)),
    )
    .unwrap();
    for (name, kind, sample) in [
        ("pretrain", LossKind::Pretrain, &pretrain),
        ("sft", LossKind::Sft, &sft),
        ("audio_sft", LossKind::AudioSft, &audio_sample),
    ] {
        let (_, grads) = loss_and_grad(&st, kind, sample);
        out.push((name, fd_check(&st, &grads, |p| loss_value(p, kind, sample))));
    }

    let mut reference = st.frozen_copy();
    perturb_all(&mut reference, 0.05, seed ^ 9);
    let pair = PreferencePair::new(
        ResponseContext {
            prompt: vec![3, 2],
            audio: Some(audio(&st, 8, seed ^ 11, AcousticMode::Present)),
        },
        vec![4, 5, 1],
        vec![5, 6, 4],
    )
    .unwrap();
    // The preference loss is nearly flat at β=0.1; a larger β keeps the
    // gradients well above the difference-quotient noise.
    let beta = 2.0;
    let rng_seed = seed ^ 13;
    let g = vrpo_loss_and_grad(
        &st,
        &reference,
        &pair,
        4,
        &mut ChaCha8Rng::seed_from_u64(rng_seed),
        beta,
    )
    .unwrap();
    let rep = fd_check(&st, &g.grads, |p| {
        vrpo_loss(
            p,
            &reference,
            &pair,
            4,
            &mut ChaCha8Rng::seed_from_u64(rng_seed),
            beta,
        )
        .unwrap()
    });
    out.push(("vrpo", rep));
    out
}

/// Like [`perturb`] but also touches frozen tensors, except the encoder.
pub fn perturb_all(st: &mut ModelState, sigma: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    for t in st
        .params
        .iter_mut()
        .filter(|t| !t.name.starts_with("encoder."))
    {
        for v in t.values.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
}

/// All `2^len` flag vectors.
pub fn all_flags(len: usize) -> impl Iterator<Item = Vec<bool>> {
    (0u32..1 << len).map(move |bits| (0..len).map(|i| bits >> i & 1 == 1).collect())
}

/// Exact expectation over masks drawn i.i.d. with probability `t`, given a
/// per-pattern value.
pub fn exact_expectation(len: usize, t: f64, mut value: impl FnMut(&MaskPattern) -> f64) -> f64 {
    all_flags(len)
        .map(|flags| {
            let k = flags.iter().filter(|&&f| f).count() as i32;
            let w = t.powi(k) * (1.0 - t).powi(len as i32 - k);
            w * value(&MaskPattern::explicit(t, flags))
        })
        .sum()
}

/// Monte Carlo mean and standard error of `value` over `n` patterns drawn at
/// noise level `t`. Values are memoized by flag vector: the loss is a
/// deterministic function of the pattern.
pub fn monte_carlo(
    len: usize,
    t: f64,
    n: usize,
    seed: u64,
    mut value: impl FnMut(&MaskPattern) -> f64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut memo: HashMap<Vec<bool>, f64> = HashMap::new();
    let xs: Vec<f64> = (0..n)
        .map(|_| {
            let p = MaskPattern::with_t(len, t, rng.random());
            *memo.entry(p.flags.clone()).or_insert_with(|| value(&p))
        })
        .collect();
    mean_se(&xs)
}

pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Random short prompt with no audio.
pub fn prompt_ctx(rng: &mut ChaCha8Rng, vocab: usize) -> ResponseContext {
    let n = rng.random_range(0..5);
    ResponseContext {
        prompt: (0..n)
            .map(|_| rng.random_range(1..vocab as TokenId))
            .collect(),
        audio: None,
    }
}

pub fn order(trace: &DecodeTrace) -> Vec<(usize, Vec<usize>, Vec<TokenId>)> {
    trace
        .steps
        .iter()
        .map(|s| (s.block, s.finalized.clone(), s.tokens.clone()))
        .collect()
}

/// Head that puts essentially all mass on one token at every position.
pub fn confident(mut st: ModelState, target: TokenId) -> ModelState {
    let v = st.config.vocab.size();
    st.params
        .get_mut("backbone.head")
        .unwrap()
        .values
        .iter_mut()
        .for_each(|x| *x = 0.0);
    let bias = (0..v)
        .map(|i| if i as TokenId == target { 60.0 } else { 0.0 })
        .collect();
    *st.params.get_mut("backbone.head.bias").unwrap() =
        ParamTensor::new("backbone.head.bias", vec![v], bias).unwrap();
    st
}

pub fn random_config(rng: &mut ChaCha8Rng) -> DecodeConfig {
    let block = [1, 2, 3, 4, 6][rng.random_range(0..5)];
    let blocks = rng.random_range(1..=4);
    let gen = block * blocks;
    let per_block = rng.random_range(1..=block);
    let factor_mode = rng.random_bool(0.5);
    DecodeConfig {
        gen_length: gen,
        block_length: block,
        steps: per_block * blocks,
        mode: if factor_mode {
            DecodeMode::Factor
        } else {
            DecodeMode::FixedSteps
        },
        factor: [1e-3, 0.5, 1.0, 2.0, 8.0][rng.random_range(0..5)],
        seed: rng.random(),
    }
}

pub fn stable_bytes(trace: &DecodeTrace) -> String {
    let mut t = trace.clone();
    t.wall_time_secs = 0.0;
    t.to_jsonl()
}
