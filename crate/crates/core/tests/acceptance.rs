//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Criteria 6–9 share a single desk-scale curriculum run.

mod support;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use maskdiff_core::audiofront::{AcousticMode, AudioConfig};
use maskdiff_core::datagen::{generate, Corpus, RecordKind, CONTENT_SYLLABLES, MAX_TRANSCRIPT};
use maskdiff_core::decode::{decode, DecodeConfig, DecodeMode};
use maskdiff_core::eval::{
    check_contamination, decode_sweep, evaluate_suite, sweep_csv, EvalOptions, EvalReport,
};
use maskdiff_core::losses::{LossKind, LossSample};
use maskdiff_core::masking::{shared_patterns, MaskPattern};
use maskdiff_core::pipeline::*;
use maskdiff_core::vrpo::{elbo_estimate, log_ratio, log_ratio_variance, ResponseContext};
use maskdiff_core::ModelState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::*;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let n = total_numel(&tiny_with_lora(7, 3));
    ensure!(n <= 10_000, "fixture has {n} parameters");
    let mut worst: f64 = 0.0;
    for (name, rep) in gradient_suite(3) {
        ensure!(
            rep.checked > 1_000,
            "{name}: only {} scalars checked",
            rep.checked
        );
        ensure!(
            rep.max_rel <= 1e-4,
            "{name}: max rel err {:e} at {}",
            rep.max_rel,
            rep.worst
        );
        worst = worst.max(rep.max_rel);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 300.0, "took {secs:.0}s");
    Ok(format!(
        "{n} params, 4 losses, max rel err {worst:.1e}, {secs:.0}s"
    ))
}

fn unbiasedness() -> Outcome {
    const LEVELS: [f64; 3] = [0.25, 0.5, 0.75];
    let mut worst_z: f64 = 0.0;
    let mut check = |name: &str,
                     len: usize,
                     value: &mut dyn FnMut(&MaskPattern) -> f64|
     -> Result<(), String> {
        for (i, &t) in LEVELS.iter().enumerate() {
            let exact = exact_expectation(len, t, &mut *value);
            let (mean, se) = monte_carlo(len, t, 10_000, 100 + i as u64, &mut *value);
            ensure!(se > 0.0, "{name} t={t}: degenerate estimator");
            let z = (mean - exact).abs() / se;
            ensure!(z <= 3.0, "{name} t={t}: mc {mean} ± {se} vs exact {exact}");
            worst_z = worst_z.max(z);
        }
        Ok(())
    };
    let st = tiny(4, 1);
    let clean = vec![1, 2, 3, 2, 1, 3];
    check("pretrain", 6, &mut |p| {
        loss_value(
            &st,
            LossKind::Pretrain,
            &LossSample::new(clean.clone(), 0, p.clone(), MASK, None).unwrap(),
        )
    })?;
    let st = tiny(4, 2);
    let clean = vec![3, 2, 2, 3, 1, 2, 1, 1];
    check("sft", 6, &mut |p| {
        loss_value(
            &st,
            LossKind::Sft,
            &LossSample::new(clean.clone(), 2, p.clone(), MASK, None).unwrap(),
        )
    })?;
    let st = tiny(4, 3);
    let a = audio(&st, 10, 4, AcousticMode::Present);
    let clean = vec![2, 3, 1, 2, 3, 1];
    check("audio_sft", 5, &mut |p| {
        let s = LossSample::new(clean.clone(), 1, p.clone(), MASK, Some(a.clone())).unwrap();
        loss_value(&st, LossKind::AudioSft, &s)
    })?;
    let st = tiny(4, 5);
    let ctx = ResponseContext {
        prompt: vec![3],
        audio: Some(audio(&st, 8, 6, AcousticMode::Present)),
    };
    let y = vec![2, 3, 2, 1];
    check("elbo", 4, &mut |p| {
        elbo_estimate(&st, &y, &ctx, std::slice::from_ref(p))
            .unwrap()
            .value
    })?;
    Ok(format!(
        "4 estimators × 3 noise levels, worst |z| {worst_z:.2}"
    ))
}

fn antithetic() -> Outcome {
    let st = tiny(8, 1);
    let reference = st.frozen_copy();
    let ctx = |s: &ModelState| ResponseContext {
        prompt: vec![3, 4, 2],
        audio: Some(audio(s, 12, 21, AcousticMode::Present)),
    };
    let c = ctx(&st);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for len in 1..8 {
        let y: Vec<u32> = (0..len).map(|i| 2 + (i % 6) as u32).collect();
        let p = shared_patterns(len, 4, &mut rng).unwrap();
        let r = log_ratio(&st, &reference, &y, &c, &p).unwrap();
        ensure!(
            r == 0.0,
            "identical models gave log-ratio {r:e} at length {len}"
        );
    }
    let reference = tiny(8, 3).frozen_copy();
    let mut policy = reference.clone();
    perturb_all(&mut policy, 1e-2, 4);
    let y = vec![5, 6, 3, 7, 1, 1];
    let v = log_ratio_variance(
        &policy,
        &reference,
        &y,
        &ctx(&reference),
        4,
        1000,
        &mut ChaCha8Rng::seed_from_u64(5),
    )
    .unwrap();
    ensure!(v.independent_var > 0.0, "independent variance is zero");
    ensure!(v.ratio() <= 0.9, "variance ratio {:.3}", v.ratio());
    Ok(format!(
        "identical → 0 exactly; Var[shared]/Var[indep] = {:.2e}",
        v.ratio()
    ))
}

fn decoding_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for m in 0..100u64 {
        let st = tiny(9, 1000 + m);
        let ctx = prompt_ctx(&mut rng, 9);
        let (gen, block) = [(8, 4), (8, 8), (12, 4), (6, 2)][m as usize % 4];
        let fixed = DecodeConfig {
            gen_length: gen,
            block_length: block,
            steps: gen,
            mode: DecodeMode::FixedSteps,
            factor: 1.0,
            seed: m,
        };
        let factor = DecodeConfig {
            mode: DecodeMode::Factor,
            factor: f64::MIN_POSITIVE,
            ..fixed
        };
        let (a, ta) = decode(&st, &ctx, &fixed).unwrap();
        let (b, tb) = decode(&st, &ctx, &factor).unwrap();
        ensure!(
            a == b && ta.response == tb.response,
            "model {m}: outputs differ"
        );
        ensure!(
            order(&ta) == order(&tb),
            "model {m}: finalization order differs"
        );
    }
    for (seed, (gen, block)) in [(16, 4), (16, 16), (12, 3), (128, 32)]
        .into_iter()
        .enumerate()
    {
        let st = confident(tiny(9, seed as u64), 5);
        let cfg = DecodeConfig {
            gen_length: gen,
            block_length: block,
            steps: gen,
            mode: DecodeMode::Factor,
            factor: 1.0,
            seed: 0,
        };
        let ctx = ResponseContext {
            prompt: if gen < 128 { vec![3] } else { vec![] },
            audio: None,
        };
        let (_, trace) = decode(&st, &ctx, &cfg).unwrap();
        ensure!(
            trace.forward_passes == gen / block,
            "{gen}/{block}: {} passes",
            trace.forward_passes
        );
    }
    Ok("100 models match; confident models use one pass per block".into())
}

fn monotone_commit() -> Outcome {
    let models: Vec<ModelState> = (0..25).map(|s| tiny(7, 500 + s)).collect();
    let mask = models[0].config.vocab.mask();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for i in 0..10_000 {
        let st = &models[i % models.len()];
        let cfg = random_config(&mut rng);
        let ctx = prompt_ctx(&mut rng, 7);
        let (out, trace) = decode(st, &ctx, &cfg).unwrap();
        let mut prev = vec![mask; cfg.gen_length];
        for s in &trace.steps {
            let span = s.block * cfg.block_length..(s.block + 1) * cfg.block_length;
            for (p, (&a, &b)) in prev.iter().zip(&s.response).enumerate() {
                ensure!(
                    a == mask || a == b,
                    "decode {i}: committed position {p} changed"
                );
                ensure!(
                    span.contains(&p) || a == b,
                    "decode {i}: position {p} outside block changed"
                );
            }
            prev = s.response.clone();
        }
        ensure!(!out.contains(&mask), "decode {i}: MASK in output");
        let (again_out, again) = decode(st, &ctx, &cfg).unwrap();
        ensure!(
            again_out == out && stable_bytes(&again) == stable_bytes(&trace),
            "decode {i}: replay differs"
        );
    }
    Ok("10000 decodes, replay byte-identical".into())
}

/// Everything criteria 6–9 measure, gathered from one curriculum run.
struct Curriculum {
    stage1_secs: f64,
    stage1_records: usize,
    stage1_ter: f64,
    s3_present: EvalReport,
    s3_silent: EvalReport,
    s3_asr_present: EvalReport,
    s3_asr_silent: EvalReport,
    s3_margin: f64,
    s4_attr: EvalReport,
    s4_margin: f64,
    sweep: Vec<maskdiff_core::eval::SweepRow>,
    csv_path: PathBuf,
}

fn ids(parts: &[&Corpus]) -> BTreeSet<String> {
    parts
        .iter()
        .flat_map(|c| c.examples.iter().map(|e| e.record.id.clone()))
        .collect()
}

fn train_curriculum() -> Result<Curriculum, String> {
    let a = AudioConfig::default();
    let g = |k, n, s| generate(k, n, s, &a).unwrap();
    let warm = g(RecordKind::Mcq, 2000, 9);
    let s0 = Corpus::concat(&[
        &g(RecordKind::Asr, 2000, 1),
        &g(RecordKind::Mcq, 1000, 2),
        &g(RecordKind::Aqa, 500, 3),
    ]);
    let asr = g(RecordKind::Asr, 5000, 11);
    let sft = |stage: u64| {
        Corpus::concat(&[
            &g(RecordKind::Mcq, 1500, 20 + stage),
            &g(RecordKind::Aqa, 500, 30 + stage),
        ])
    };
    let pref = g(RecordKind::Pref, 400, 41);

    let held_asr = g(RecordKind::Asr, 200, 101);
    let all_mcq = g(RecordKind::Mcq, 500, 102);
    let held_attr = Corpus {
        examples: all_mcq
            .examples
            .into_iter()
            .filter(|e| e.record.attribute_question)
            .collect(),
    };
    let held_pref = g(RecordKind::Pref, 100, 104);
    let seen = ids(&[&warm, &s0, &asr, &sft(2), &sft(3), &pref]);
    for held in [&held_asr, &held_attr, &held_pref] {
        check_contamination(held, &seen).map_err(|e| e.to_string())?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut st = ModelState::init(desk_model_config(), 7).unwrap();
    let stage = |st: &mut ModelState, cfg: StageConfig, corpus: &Corpus, rng: &mut ChaCha8Rng| {
        let t = Instant::now();
        let log = run_stage(st, &cfg, corpus, rng).unwrap();
        let secs = t.elapsed().as_secs_f64();
        let tail = &log[log.len().saturating_sub(20)..];
        let loss = tail.iter().map(|m| m.loss).sum::<f64>() / tail.len() as f64;
        println!(
            "  stage {} ({} records): {} steps, {secs:.0}s, final loss {loss:.3}",
            cfg.stage,
            corpus.len(),
            log.len()
        );
        secs
    };
    let eval = |st: &ModelState, corpus: &Corpus, mode: AcousticMode| {
        let opts = EvalOptions {
            mode,
            ..EvalOptions::default()
        };
        evaluate_suite(st, corpus, &opts).unwrap()
    };
    let margin = |st: &ModelState, reference: &ModelState| {
        let opts = EvalOptions {
            reference: Some(reference),
            ..EvalOptions::default()
        };
        evaluate_suite(st, &held_pref, &opts)
            .unwrap()
            .preference_margin
            .unwrap()
    };

    stage(
        &mut st,
        desk_choice_warmup_config().unwrap(),
        &warm,
        &mut rng,
    );
    stage(&mut st, desk_stage_config(0).unwrap(), &s0, &mut rng);
    let stage1_secs = stage(&mut st, desk_stage_config(1).unwrap(), &asr, &mut rng);
    let stage1_ter = eval(&st, &held_asr, AcousticMode::Absent)
        .token_error_rate
        .unwrap();
    for s in [2u8, 3] {
        let cfg = desk_stage_config(s).unwrap();
        let mixed = with_reinjection(&sft(s as u64), &asr, cfg.reinject_fraction, &mut rng);
        stage(&mut st, cfg, &mixed, &mut rng);
    }
    let s3 = st.clone();
    let s3_present = eval(&s3, &held_attr, AcousticMode::Present);
    let s3_silent = eval(&s3, &held_attr, AcousticMode::Silent);
    let s3_asr_present = eval(&s3, &held_asr, AcousticMode::Present);
    let s3_asr_silent = eval(&s3, &held_asr, AcousticMode::Silent);
    let reference = s3.frozen_copy();
    let s3_margin = margin(&s3, &reference);

    stage(&mut st, desk_stage_config(4).unwrap(), &pref, &mut rng);
    let s4_attr = eval(&st, &held_attr, AcousticMode::Present);
    let s4_margin = margin(&st, &reference);

    let items = prepare(&st, &held_asr, &InputFormat::default()).unwrap();
    let base = DecodeConfig::understanding();
    let sweep = decode_sweep(
        &st,
        &items,
        base,
        &[16, 8, 4],
        &[0.25, 0.5, 1.0, 2.0, 4.0],
        AcousticMode::Present,
    )
    .unwrap();
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    let csv_path = dir.join("decode_sweep.csv");
    std::fs::write(&csv_path, sweep_csv(&sweep)).unwrap();

    Ok(Curriculum {
        stage1_secs,
        stage1_records: asr.len(),
        stage1_ter,
        s3_present,
        s3_silent,
        s3_asr_present,
        s3_asr_silent,
        s3_margin,
        s4_attr,
        s4_margin,
        sweep,
        csv_path,
    })
}

/// 95% Wilson score interval for `k` successes in `n` trials.
fn wilson(p: f64, n: usize) -> (f64, f64) {
    let z: f64 = 1.959_963_984_540_054;
    let n = n as f64;
    let centre = (p + z * z / (2.0 * n)) / (1.0 + z * z / n);
    let half = z / (1.0 + z * z / n) * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt();
    (centre - half, centre + half)
}

fn stage_one(c: &Curriculum) -> Outcome {
    ensure!(
        CONTENT_SYLLABLES.len() == 16 && MAX_TRANSCRIPT <= 12,
        "toy task is not the specified size"
    );
    ensure!(
        c.stage1_records >= 5000,
        "only {} records",
        c.stage1_records
    );
    ensure!(c.stage1_secs <= 600.0, "stage 1 took {:.0}s", c.stage1_secs);
    ensure!(c.stage1_ter <= 0.05, "held-out TER {:.4}", c.stage1_ter);
    Ok(format!(
        "{} records in {:.0}s, held-out TER {:.2}%",
        c.stage1_records,
        c.stage1_secs,
        100.0 * c.stage1_ter
    ))
}

fn dual_adapter(c: &Curriculum) -> Outcome {
    let acc = c.s3_present.attribute_accuracy.unwrap();
    let silent = c.s3_silent.attribute_accuracy.unwrap();
    let n = c.s3_silent.attribute_records;
    let (lo, hi) = wilson(silent, n);
    let ter_a = c.s3_asr_present.token_error_rate.unwrap();
    let ter_b = c.s3_asr_silent.token_error_rate.unwrap();
    let detail = format!(
        "attribute MCQ {:.1}%, silenced {:.1}% (95% CI {:.1}–{:.1}%, n={n}), TER {:.2}% vs {:.2}%",
        100.0 * acc,
        100.0 * silent,
        100.0 * lo,
        100.0 * hi,
        100.0 * ter_a,
        100.0 * ter_b
    );
    ensure!(acc >= 0.9, "{detail}");
    ensure!(lo <= 0.25 && 0.25 <= hi, "{detail}");
    ensure!((ter_a - ter_b).abs() <= 0.01, "{detail}");
    Ok(detail)
}

fn stage_four(c: &Curriculum) -> Outcome {
    let a3 = c.s3_present.attribute_accuracy.unwrap();
    let a4 = c.s4_attr.attribute_accuracy.unwrap();
    let detail = format!(
        "margin {:.4} → {:.4}, attribute MCQ {:.1}% → {:.1}%",
        c.s3_margin,
        c.s4_margin,
        100.0 * a3,
        100.0 * a4
    );
    ensure!(c.s4_margin > c.s3_margin, "{detail}");
    ensure!(a4 >= a3 - 0.02, "{detail}");
    Ok(detail)
}

fn speed_tradeoff(c: &Curriculum) -> Outcome {
    let fixed = c
        .sweep
        .iter()
        .find(|r| r.mode == "fixed" && r.steps == 16)
        .unwrap();
    let factor = c.sweep.iter().find(|r| r.factor == Some(1.0)).unwrap();
    let (ta, tb) = (
        fixed.token_error_rate.unwrap(),
        factor.token_error_rate.unwrap(),
    );
    let detail = format!(
        "fixed {} passes TER {:.2}%, f=1 {} passes TER {:.2}%; {} rows in {}",
        fixed.forward_passes,
        100.0 * ta,
        factor.forward_passes,
        100.0 * tb,
        c.sweep.len(),
        c.csv_path.display()
    );
    ensure!(
        fixed.forward_passes >= 2 * factor.forward_passes,
        "{detail}"
    );
    ensure!(tb - ta <= 0.02, "{detail}");
    ensure!(
        c.sweep.iter().filter(|r| r.mode == "factor").count() == 5,
        "{detail}"
    );
    Ok(detail)
}

fn accounting() -> Outcome {
    let published = [
        ("encoder.whisper", 637_000_000u64, true),
        ("semantic.adapter", 36_400_000, false),
        ("acoustic.adapter", 47_900_000, false),
        ("backbone.llm", 8_030_000_000, true),
        ("backbone.llm.lora_b", 14_700_000, false),
    ];
    let r = report_from_descriptors(published);
    let (t, n, f) = (r.overall.trainable, r.overall.total, r.overall.fraction);
    ensure!(t == 99_000_000, "trainable {t}");
    ensure!((n as f64 / 1e7).round() / 100.0 == 8.77, "total {n}");
    ensure!((f * 100.0 - 1.13).abs() < 0.005, "fraction {f}");
    Ok(format!(
        "{:.1}M / {:.2}B = {:.2}%",
        t as f64 / 1e6,
        n as f64 / 1e9,
        100.0 * f
    ))
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(d) => {
            println!("PASS {id:>2} {name}: {d} [{secs:.0}s]");
            true
        }
        Err(d) => {
            println!("FAIL {id:>2} {name}: {d} [{secs:.0}s]");
            false
        }
    }
}

fn main() -> ExitCode {
    // `cargo test` forwards harness flags such as `--list`; nothing to list here.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut ok = true;
    ok &= run(1, "gradient correctness", gradients);
    ok &= run(2, "estimator unbiasedness", unbiasedness);
    ok &= run(3, "antithetic variance reduction", antithetic);
    ok &= run(4, "decoding equivalence", decoding_equivalence);
    ok &= run(5, "semi-autoregressive isolation", monotone_commit);
    println!("  training desk curriculum…");
    let started = Instant::now();
    let curriculum =
        catch_unwind(train_curriculum).unwrap_or_else(|_| Err("curriculum run panicked".into()));
    println!(
        "  curriculum done in {:.0}s",
        started.elapsed().as_secs_f64()
    );
    let with = |f: fn(&Curriculum) -> Outcome| {
        let c = &curriculum;
        move || c.as_ref().map_err(|e| e.clone()).and_then(f)
    };
    ok &= run(6, "end-to-end stage 1", with(stage_one));
    ok &= run(7, "dual-adapter necessity", with(dual_adapter));
    ok &= run(8, "stage-4 direction", with(stage_four));
    ok &= run(9, "speed/accuracy trade-off", with(speed_tradeoff));
    if let Ok(c) = &curriculum {
        print!("{}", sweep_csv(&c.sweep));
    }
    ok &= run(10, "parameter accounting", accounting);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
