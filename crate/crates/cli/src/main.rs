use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use maskdiff_core::audiofront::{AcousticMode, AudioConfig};
use maskdiff_core::datagen::{gen_corpus, load_corpus, Corpus, RecordKind};
use maskdiff_core::decode::{decode_with_prefix, DecodeConfig, DecodeMode};
use maskdiff_core::eval::{decode_sweep, sweep_csv, EvalOptions};
use maskdiff_core::pipeline::{
    condition_for, desk_model_config, desk_stage_config, load_checkpoint, param_report, prepare,
    run_stage, save_checkpoint, with_reinjection, InputFormat,
};
use maskdiff_core::vrpo::log_ratio_variance;
use maskdiff_core::ModelState;

#[derive(Parser)]
#[command(
    name = "maskdiff",
    version,
    about = "Audio-conditioned masked diffusion toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus.
    Datagen(DatagenArgs),
    /// Run one curriculum stage.
    Train(TrainArgs),
    /// Decode records and print the answers.
    Decode(DecodeArgs),
    /// Score a checkpoint on a held-out corpus.
    Eval(EvalArgs),
    /// Sweep decoding settings and emit accuracy against forward passes.
    BenchDecode(BenchArgs),
    /// Compare shared- and independent-pattern log-ratio variance.
    VrpoVariance(VarianceArgs),
    /// Per-component parameter counts.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Asr,
    Aqa,
    Mcq,
    Pref,
}

impl From<KindArg> for RecordKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Asr => RecordKind::Asr,
            KindArg::Aqa => RecordKind::Aqa,
            KindArg::Mcq => RecordKind::Mcq,
            KindArg::Pref => RecordKind::Pref,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fixed,
    Factor,
}

#[derive(Clone, Copy, ValueEnum)]
enum AcousticArg {
    Present,
    Absent,
    Silent,
}

impl From<AcousticArg> for AcousticMode {
    fn from(a: AcousticArg) -> Self {
        match a {
            AcousticArg::Present => AcousticMode::Present,
            AcousticArg::Absent => AcousticMode::Absent,
            AcousticArg::Silent => AcousticMode::Silent,
        }
    }
}

#[derive(Args)]
struct DatagenArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    stage: u8,
    /// `key = value` overrides applied on top of the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directories; repeat to combine.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Transcription corpus sampled into stages 2 and 3.
    #[arg(long)]
    asr: Option<PathBuf>,
    /// Checkpoint from the previous stage (required after stage 0).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-step metrics as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct DecodeFlags {
    #[arg(long, default_value_t = 16)]
    gen_length: usize,
    #[arg(long, default_value_t = 16)]
    block_length: usize,
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Fixed)]
    mode: ModeArg,
    #[arg(long, default_value_t = 1.0)]
    factor: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = AcousticArg::Present)]
    acoustic: AcousticArg,
}

impl DecodeFlags {
    fn config(&self) -> DecodeConfig {
        DecodeConfig {
            gen_length: self.gen_length,
            block_length: self.block_length,
            steps: self.steps,
            mode: match self.mode {
                ModeArg::Fixed => DecodeMode::FixedSteps,
                ModeArg::Factor => DecodeMode::Factor,
            },
            factor: self.factor,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    flags: DecodeFlags,
    /// Step-level decode traces as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Reference checkpoint for preference margins.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Training corpora; evaluation fails if any id overlaps.
    #[arg(long)]
    train_data: Vec<PathBuf>,
    #[command(flatten)]
    flags: DecodeFlags,
    #[arg(long, default_value_t = 8)]
    elbo_samples: usize,
    #[arg(long)]
    max_ter: Option<f64>,
    #[arg(long)]
    min_accuracy: Option<f64>,
    #[arg(long)]
    min_margin: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1,2,4")]
    factors: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "16,8,4")]
    steps: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    gen_length: usize,
    #[arg(long, default_value_t = 16)]
    block_length: usize,
    #[arg(long, value_enum, default_value_t = AcousticArg::Present)]
    acoustic: AcousticArg,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VarianceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long, default_value_t = 1e-2)]
    sigma: f64,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    records: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = AcousticArg::Present)]
    acoustic: AcousticArg,
    #[arg(long, default_value_t = 0.9)]
    max_ratio: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

/// Line-delimited JSON to stdout and, optionally, a file.
struct Records {
    file: Option<fs::File>,
}

impl Records {
    fn new(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                Some(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)
            }
            None => None,
        };
        Ok(Self { file })
    }

    fn emit<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let line = serde_json::to_string(value)?;
        println!("{line}");
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

fn load_all(dirs: &[PathBuf]) -> Result<Corpus> {
    let mut parts = Vec::new();
    for d in dirs {
        parts.push(load_corpus(d).with_context(|| format!("loading corpus {}", d.display()))?);
    }
    Ok(Corpus::concat(&parts.iter().collect::<Vec<_>>()))
}

fn truncate(mut c: Corpus, limit: Option<usize>) -> Corpus {
    if let Some(n) = limit {
        c.examples.truncate(n);
    }
    c
}

fn load_state(path: &Path) -> Result<ModelState> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn datagen(a: DatagenArgs) -> Result<bool> {
    let records = gen_corpus(
        a.kind.into(),
        a.count,
        a.seed,
        &a.out,
        &AudioConfig::default(),
    )?;
    let mut out = Records::new(None)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        kind: &'a str,
        count: usize,
        seed: u64,
        manifest: String,
    }
    out.emit(&Summary {
        kind: RecordKind::from(a.kind).as_str(),
        count: records.len(),
        seed: a.seed,
        manifest: a
            .out
            .join(maskdiff_core::datagen::MANIFEST_FILE)
            .display()
            .to_string(),
    })?;
    Ok(true)
}

fn train(a: TrainArgs) -> Result<bool> {
    let mut cfg = desk_stage_config(a.stage)?;
    if let Some(p) = &a.config {
        cfg.apply(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?;
    }
    let mut state = match (&a.init, a.stage) {
        (Some(p), _) => load_state(p)?,
        (None, 0) => ModelState::init(desk_model_config(), cfg.seed)?,
        (None, s) => bail!("stage {s} needs --init with the stage {} checkpoint", s - 1),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut corpus = load_all(&a.data)?;
    if let (Some(asr), 2 | 3) = (&a.asr, a.stage) {
        corpus = with_reinjection(&corpus, &load_corpus(asr)?, cfg.reinject_fraction, &mut rng);
    }
    let t = Instant::now();
    let log = run_stage(&mut state, &cfg, &corpus, &mut rng)?;
    let mut out = Records::new(a.log.as_deref())?;
    for m in &log {
        out.emit(m)?;
    }
    save_checkpoint(&state, &a.out)?;
    eprintln!(
        "stage {} finished: {} steps in {:.1}s, checkpoint {}",
        a.stage,
        log.len(),
        t.elapsed().as_secs_f64(),
        a.out.display()
    );
    Ok(true)
}

fn decode(a: DecodeArgs) -> Result<bool> {
    let state = load_state(&a.ckpt)?;
    let corpus = truncate(load_all(&a.data)?, a.limit);
    let cfg = a.flags.config();
    let mode: AcousticMode = a.flags.acoustic.into();
    let items = prepare(&state, &corpus, &InputFormat::default())?;
    let mut out = Records::new(a.out.as_deref())?;
    let mut traces = Records::new(a.trace.as_deref())?;
    let vocab = &state.config.vocab;
    #[derive(Serialize)]
    struct Decoded<'a> {
        id: &'a str,
        output: String,
        reference: String,
        forward_passes: usize,
        wall_time_secs: f64,
    }
    for p in &items {
        let cond = condition_for(&state, p, mode, false)?;
        let (tokens, trace) =
            decode_with_prefix(&state, Some(&cond), &p.prompt, &cfg, Instant::now())?;
        out.emit(&Decoded {
            id: &p.id,
            output: vocab.detokenize(&tokens),
            reference: vocab.detokenize(p.answer(vocab.eot())),
            forward_passes: trace.forward_passes,
            wall_time_secs: trace.wall_time_secs,
        })?;
        if let Some(f) = &mut traces.file {
            f.write_all(trace.to_jsonl().as_bytes())?;
        }
    }
    Ok(true)
}

fn eval(a: EvalArgs) -> Result<bool> {
    let state = load_state(&a.ckpt)?;
    let corpus = load_all(&a.data)?;
    let reference = a.reference.as_deref().map(load_state).transpose()?;
    let train_ids: BTreeSet<String> = if a.train_data.is_empty() {
        BTreeSet::new()
    } else {
        load_all(&a.train_data)?
            .ids()
            .into_iter()
            .map(String::from)
            .collect()
    };
    let opts = EvalOptions {
        decode: a.flags.config(),
        mode: a.flags.acoustic.into(),
        reference: reference.as_ref(),
        elbo_samples: a.elbo_samples,
        train_ids: Some(&train_ids),
        seed: a.flags.seed,
        ..EvalOptions::default()
    };
    let report = maskdiff_core::eval::evaluate_suite(&state, &corpus, &opts)?;
    let mut ok = true;
    let mut check = |name: &str, value: Option<f64>, pass: &dyn Fn(f64) -> bool| {
        if let Some(v) = value {
            if !pass(v) {
                eprintln!("check failed: {name} = {v}");
                ok = false;
            }
        } else {
            eprintln!("check failed: {name} not measured on this corpus");
            ok = false;
        }
    };
    if let Some(m) = a.max_ter {
        check("token_error_rate", report.token_error_rate, &|v| v <= m);
    }
    if let Some(m) = a.min_accuracy {
        check("choice_accuracy", report.choice_accuracy, &|v| v >= m);
    }
    if let Some(m) = a.min_margin {
        check("preference_margin", report.preference_margin, &|v| v >= m);
    }
    Records::new(a.out.as_deref())?.emit(&report)?;
    Ok(ok)
}

fn bench_decode(a: BenchArgs) -> Result<bool> {
    let state = load_state(&a.ckpt)?;
    let corpus = truncate(load_all(&a.data)?, a.limit);
    let items = prepare(&state, &corpus, &InputFormat::default())?;
    let base = DecodeConfig {
        gen_length: a.gen_length,
        block_length: a.block_length,
        steps: a.gen_length,
        mode: DecodeMode::FixedSteps,
        factor: 1.0,
        seed: 0,
    };
    let rows = decode_sweep(
        &state,
        &items,
        base,
        &a.steps,
        &a.factors,
        a.acoustic.into(),
    )?;
    let mut out = Records::new(a.out.as_deref())?;
    for row in &rows {
        out.emit(row)?;
    }
    fs::write(&a.csv, sweep_csv(&rows)).with_context(|| format!("writing {}", a.csv.display()))?;
    Ok(true)
}

fn vrpo_variance(a: VarianceArgs) -> Result<bool> {
    let reference = load_state(&a.ckpt)?.frozen_copy();
    let mut policy = reference.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let noise = Normal::new(0.0, a.sigma)?;
    for t in policy
        .params
        .iter_mut()
        .filter(|t| !t.name.starts_with("encoder."))
    {
        for v in t.values.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let corpus = truncate(load_all(&a.data)?, Some(a.records));
    let items = prepare(&reference, &corpus, &InputFormat::default())?;
    let mut out = Records::new(a.out.as_deref())?;
    #[derive(Serialize)]
    struct Row<'a> {
        id: &'a str,
        trials: usize,
        k: usize,
        shared_var: f64,
        independent_var: f64,
        ratio: f64,
    }
    let mut ok = true;
    for p in &items {
        let ctx = p.context(a.acoustic.into());
        let r = log_ratio_variance(
            &policy,
            &reference,
            &p.response,
            &ctx,
            a.k,
            a.trials,
            &mut rng,
        )?;
        ok &= r.ratio() <= a.max_ratio;
        out.emit(&Row {
            id: &p.id,
            trials: r.trials,
            k: r.k,
            shared_var: r.shared_var,
            independent_var: r.independent_var,
            ratio: r.ratio(),
        })?;
    }
    Ok(ok)
}

fn report(a: ReportArgs) -> Result<bool> {
    let state = load_state(&a.ckpt)?;
    Records::new(None)?.emit(&param_report(&state.params))?;
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Datagen(a) => datagen(a),
        Cmd::Train(a) => train(a),
        Cmd::Decode(a) => decode(a),
        Cmd::Eval(a) => eval(a),
        Cmd::BenchDecode(a) => bench_decode(a),
        Cmd::VrpoVariance(a) => vrpo_variance(a),
        Cmd::Report(a) => report(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
