//! The mask predictor: a bidirectional transformer over a small vocabulary,
//! with optional low-rank deltas on its weight matrices.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::ModelState;
use crate::substrate::{Mat, ParamStore, ParamTensor, Tape, Var};

pub type TokenId = u32;
pub type TokenSeq = Vec<TokenId>;

/// Symbol table with the two sentinels the diffusion process relies on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    symbols: Vec<String>,
    mask: TokenId,
    eot: TokenId,
    #[serde(skip)]
    lookup: HashMap<String, TokenId>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.symbols == other.symbols && self.mask == other.mask && self.eot == other.eot
    }
}

impl Vocab {
    pub fn new(symbols: Vec<String>, mask: TokenId, eot: TokenId) -> Result<Self> {
        let v = symbols.len() as TokenId;
        if mask == eot || mask >= v || eot >= v {
            return Err(Error::Contract(format!(
                "vocab sentinels mask={mask} eot={eot} invalid for size {v}"
            )));
        }
        let mut lookup = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if lookup.insert(s.clone(), i as TokenId).is_some() {
                return Err(Error::Contract(format!("duplicate symbol {s}")));
            }
        }
        Ok(Self {
            symbols,
            mask,
            eot,
            lookup,
        })
    }

    /// Vocabulary of `size` anonymous symbols with MASK = 0 and ENDOFTEXT = 1.
    pub fn anonymous(size: usize) -> Result<Self> {
        let mut symbols = vec!["<mask>".to_string(), "<endoftext>".to_string()];
        symbols.extend((2..size).map(|i| format!("t{i}")));
        Self::new(symbols, 0, 1)
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindexed(self) -> Result<Self> {
        Self::new(self.symbols, self.mask, self.eot)
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn mask(&self) -> TokenId {
        self.mask
    }

    pub fn eot(&self) -> TokenId {
        self.eot
    }

    pub fn symbol(&self, id: TokenId) -> &str {
        &self.symbols[id as usize]
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.lookup.get(symbol).copied()
    }

    /// Whitespace tokenization with surrounding punctuation stripped. A word is
    /// looked up verbatim first, then lowercased.
    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        text.split_whitespace()
            .filter_map(|w| {
                let w = w.trim_matches(|c: char| c.is_ascii_punctuation() && c != '<' && c != '>');
                (!w.is_empty()).then_some(w)
            })
            .map(|w| {
                self.id(w)
                    .or_else(|| self.id(&w.to_lowercase()))
                    .ok_or_else(|| Error::UnknownToken(w.to_string()))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.symbol(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Prefix of `ids` before the first ENDOFTEXT.
    pub fn truncate_at_eot<'a>(&self, ids: &'a [TokenId]) -> &'a [TokenId] {
        let end = ids.iter().position(|&t| t == self.eot).unwrap_or(ids.len());
        &ids[..end]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            model_dim: 128,
            heads: 4,
            ffn_dim: 512,
            max_positions: 512,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.model_dim == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Every attention projection matrix, the default low-rank targets.
    pub fn attention_projections(&self) -> Vec<String> {
        (0..self.layers)
            .flat_map(|l| ["wq", "wk", "wv", "wo"].map(|w| format!("backbone.l{l}.attn.{w}")))
            .collect()
    }
}

/// Trainable low-rank delta on one weight matrix. `A` (`rank×in`) and `B`
/// (`out×rank`) live in the parameter store next to the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankDelta {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
}

impl LowRankDelta {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn a_name(&self) -> String {
        format!("{}.lora_a", self.target)
    }

    pub fn b_name(&self) -> String {
        format!("{}.lora_b", self.target)
    }
}

pub(crate) fn init_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    vocab_size: usize,
    cfg: &BackboneConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.model_dim;
    let emb_std = 0.1;
    store.insert(ParamTensor::normal(
        "backbone.tok_emb",
        vec![vocab_size, d],
        emb_std,
        rng,
    ))?;
    store.insert(ParamTensor::normal(
        "backbone.pos_emb",
        vec![cfg.max_positions, d],
        emb_std,
        rng,
    ))?;
    for l in 0..cfg.layers {
        let p = format!("backbone.l{l}");
        layer_norm_params(store, &format!("{p}.ln1"), d)?;
        for w in ["wq", "wk", "wv", "wo"] {
            linear_params(store, &format!("{p}.attn.{w}"), d, d, rng)?;
        }
        layer_norm_params(store, &format!("{p}.ln2"), d)?;
        linear_params(store, &format!("{p}.ffn.w1"), d, cfg.ffn_dim, rng)?;
        linear_params(store, &format!("{p}.ffn.w2"), cfg.ffn_dim, d, rng)?;
    }
    layer_norm_params(store, "backbone.ln_f", d)?;
    linear_params(store, "backbone.head", d, vocab_size, rng)?;
    Ok(())
}

/// Weight `name` (`in×out`) plus bias `name.bias`.
pub(crate) fn linear_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<()> {
    let std = 1.0 / (fan_in as f64).sqrt();
    store.insert(ParamTensor::normal(name, vec![fan_in, fan_out], std, rng))?;
    store.insert(ParamTensor::zeros(format!("{name}.bias"), vec![fan_out]))
}

pub(crate) fn layer_norm_params(store: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
    store.insert(ParamTensor::filled(format!("{name}.gain"), vec![dim], 1.0))?;
    store.insert(ParamTensor::zeros(format!("{name}.shift"), vec![dim]))
}

pub(crate) fn layer_norm(tape: &mut Tape<'_>, x: Var, name: &str) -> Result<Var> {
    let g = tape.param(&format!("{name}.gain"))?;
    let b = tape.param(&format!("{name}.shift"))?;
    Ok(tape.layer_norm(x, g, b))
}

/// `x · W + b`, plus the scaled low-rank delta when one is attached to `W`.
pub(crate) fn linear(tape: &mut Tape<'_>, state: &ModelState, x: Var, name: &str) -> Result<Var> {
    let w = tape.param(name)?;
    let b = tape.param(&format!("{name}.bias"))?;
    let y = tape.affine(x, w, b);
    match state.lora.get(name) {
        None => Ok(y),
        Some(delta) => {
            let a = tape.param(&delta.a_name())?;
            let bb = tape.param(&delta.b_name())?;
            let xa = tape.matmul_t(x, a);
            let xab = tape.matmul_t(xa, bb);
            let scaled = tape.scale(xab, delta.scale());
            Ok(tape.add(y, scaled))
        }
    }
}

/// Runs the transformer over `[prefix rows][token embeddings]` and returns
/// logits for the token positions listed in `out_rows` (indices into `tokens`).
pub fn forward(
    tape: &mut Tape<'_>,
    state: &ModelState,
    prefix: Option<Var>,
    tokens: &[TokenId],
    out_rows: &[usize],
) -> Result<Var> {
    let cfg = &state.config.backbone;
    let d = cfg.model_dim;
    let n_prefix = prefix.map_or(0, |p| tape.shape(p).0);
    let total = n_prefix + tokens.len();
    if total > cfg.max_positions {
        return Err(Error::Length {
            len: total,
            max: cfg.max_positions,
        });
    }
    if tokens.is_empty() && n_prefix == 0 {
        return Err(Error::Empty("backbone input"));
    }
    let v = state.config.vocab.size();
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= v) {
        return Err(Error::UnknownToken(bad.to_string()));
    }
    let tok_emb = tape.param("backbone.tok_emb")?;
    let pos_emb = tape.param("backbone.pos_emb")?;
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let mut parts = Vec::with_capacity(2);
    if let Some(p) = prefix {
        assert_eq!(tape.shape(p).1, d, "condition width must equal model_dim");
        parts.push(p);
    }
    if !ids.is_empty() {
        parts.push(tape.gather(tok_emb, &ids));
    }
    let x0 = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)
    };
    let pos = tape.slice_rows(pos_emb, 0, total);
    let mut x = tape.add(x0, pos);

    let heads = cfg.heads;
    let dh = d / heads;
    let inv = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.layers {
        let p = format!("backbone.l{l}");
        let h = layer_norm(tape, x, &format!("{p}.ln1"))?;
        let q = linear(tape, state, h, &format!("{p}.attn.wq"))?;
        let k = linear(tape, state, h, &format!("{p}.attn.wk"))?;
        let vv = linear(tape, state, h, &format!("{p}.attn.wv"))?;
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, vv)
            } else {
                (
                    tape.slice_cols(q, hd * dh, dh),
                    tape.slice_cols(k, hd * dh, dh),
                    tape.slice_cols(vv, hd * dh, dh),
                )
            };
            let s = tape.matmul_t(qh, kh);
            let s = tape.scale(s, inv);
            let a = tape.softmax_rows(s);
            outs.push(tape.matmul(a, vh));
        }
        let o = if heads == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        };
        let o = linear(tape, state, o, &format!("{p}.attn.wo"))?;
        x = tape.add(x, o);
        let h2 = layer_norm(tape, x, &format!("{p}.ln2"))?;
        let f = linear(tape, state, h2, &format!("{p}.ffn.w1"))?;
        let f = tape.gelu(f);
        let f = linear(tape, state, f, &format!("{p}.ffn.w2"))?;
        x = tape.add(x, f);
    }
    let rows: Vec<usize> = out_rows
        .iter()
        .map(|&r| {
            assert!(r < tokens.len(), "output row {r} outside token region");
            n_prefix + r
        })
        .collect();
    let sel = tape.select_rows(x, &rows);
    let hf = layer_norm(tape, sel, "backbone.ln_f")?;
    linear(tape, state, hf, "backbone.head")
}

/// Logits at every token position, given optional condition embedding rows.
pub fn predict_logits(
    state: &ModelState,
    tokens: &[TokenId],
    condition: Option<&Mat>,
) -> Result<Mat> {
    let mut tape = Tape::inference(&state.params);
    let prefix = condition
        .filter(|c| c.rows > 0)
        .map(|c| tape.constant(c.clone()));
    let rows: Vec<usize> = (0..tokens.len()).collect();
    let out = forward(&mut tape, state, prefix, tokens, &rows)?;
    Ok(tape.value(out).to_owned())
}

/// Attaches low-rank deltas to `targets` with `B = 0`, freezing the base weights.
pub fn attach_low_rank<R: Rng + ?Sized>(
    state: &mut ModelState,
    targets: &[String],
    rank: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<()> {
    if rank == 0 || alpha <= 0.0 {
        return Err(Error::Contract(
            "low-rank delta needs rank > 0 and alpha > 0".into(),
        ));
    }
    for t in targets {
        let w = state.params.require(t)?;
        if w.dims.len() != 2 {
            return Err(Error::Contract(format!("low-rank target {t} is not 2-D")));
        }
        if state.lora.contains_key(t) {
            return Err(Error::Contract(format!(
                "{t} already carries a low-rank delta"
            )));
        }
    }
    for t in targets {
        let (fan_in, fan_out) = {
            let w = state.params.get_mut(t).expect("checked");
            w.frozen = true;
            (w.dims[0], w.dims[1])
        };
        let delta = LowRankDelta {
            target: t.clone(),
            rank,
            alpha,
        };
        let std = 1.0 / (fan_in as f64).sqrt();
        state.params.insert(ParamTensor::normal(
            delta.a_name(),
            vec![rank, fan_in],
            std,
            rng,
        ))?;
        state
            .params
            .insert(ParamTensor::zeros(delta.b_name(), vec![fan_out, rank]))?;
        state.lora.insert(t.clone(), delta);
    }
    Ok(())
}

/// Removes every low-rank delta; the base weights are left as they were.
pub fn detach_low_rank(state: &mut ModelState) {
    let deltas: Vec<LowRankDelta> = state.lora.values().cloned().collect();
    for d in deltas {
        state.params.remove(&d.a_name());
        state.params.remove(&d.b_name());
    }
    state.lora.clear();
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: u64,
    pub total: u64,
    pub fraction: f64,
}

impl ParamCount {
    pub fn from_counts(trainable: u64, total: u64) -> Self {
        let fraction = if total == 0 {
            0.0
        } else {
            trainable as f64 / total as f64
        };
        Self {
            trainable,
            total,
            fraction,
        }
    }
}

pub fn trainable_count(params: &ParamStore) -> ParamCount {
    let (mut trainable, mut total) = (0u64, 0u64);
    for t in params.iter() {
        total += t.numel() as u64;
        if !t.frozen {
            trainable += t.numel() as u64;
        }
    }
    ParamCount::from_counts(trainable, total)
}
