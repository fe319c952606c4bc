//! Synthetic audio, the frozen stand-in encoder, and the two adapters whose
//! outputs are spliced in front of the text prompt.
//!
//! Frames carry content in the first `content_dims` features (one prototype
//! per content token, repeated `frames_per_token` times) and a per-clip
//! attribute bias in the remaining features. The encoder keeps the two
//! subspaces apart: its intermediate states see both, its final states see
//! only content. The semantic adapter reads the final states, the acoustic
//! adapter the intermediate ones.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{layer_norm, layer_norm_params, linear, linear_params, TokenId, TokenSeq};
use crate::error::{Error, Result};
use crate::state::ModelState;
use crate::substrate::{Mat, ParamStore, ParamTensor, Tape, Var};

pub const FEATURE_MAGIC: &[u8; 4] = b"DFA2";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AudioConfig {
    pub feature_dim: usize,
    pub content_dims: usize,
    pub encoder_dim: usize,
    pub frames_per_token: usize,
    pub noise_sigma: f64,
    pub num_attributes: usize,
    pub queries: usize,
    pub adapter_hidden: usize,
    pub world_seed: u64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            content_dims: 12,
            encoder_dim: 32,
            frames_per_token: 4,
            noise_sigma: 0.1,
            num_attributes: 4,
            queries: 64,
            adapter_hidden: 64,
            world_seed: 0x5eed_a0d1,
        }
    }
}

impl AudioConfig {
    fn encoder_content_cols(&self) -> usize {
        self.encoder_dim * self.content_dims / self.feature_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.content_dims == 0 || self.content_dims >= self.feature_dim {
            return Err(Error::Config(
                "content_dims must be in 1..feature_dim".into(),
            ));
        }
        let ec = self.encoder_content_cols();
        if ec == 0 || ec >= self.encoder_dim {
            return Err(Error::Config("encoder_dim too small to split".into()));
        }
        if self.queries == 0 || self.frames_per_token == 0 || self.num_attributes < 2 {
            return Err(Error::Config("audio sizes must be positive".into()));
        }
        Ok(())
    }
}

/// A synthetic clip: `frames` is `F×D` with `F = frames_per_token · |transcript|`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub frames: Mat,
    pub transcript: TokenSeq,
    pub attribute: u8,
    pub seed: u64,
}

/// Deterministic clip generator over a fixed set of content tokens.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    cfg: AudioConfig,
    content: Vec<TokenId>,
    prototypes: Vec<Vec<f64>>,
    attribute_bias: Vec<Vec<f64>>,
}

impl Synthesizer {
    pub fn new(cfg: AudioConfig, content: Vec<TokenId>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed);
        rng.set_stream(1);
        let n = Normal::new(0.0, 1.0).unwrap();
        let scale = 2.0 / (cfg.content_dims as f64).sqrt();
        let prototypes = content
            .iter()
            .map(|_| {
                (0..cfg.content_dims)
                    .map(|_| n.sample(&mut rng) * scale)
                    .collect()
            })
            .collect();
        let attr_dims = cfg.feature_dim - cfg.content_dims;
        let attribute_bias = (0..cfg.num_attributes)
            .map(|k| {
                if cfg.num_attributes <= attr_dims {
                    (0..attr_dims)
                        .map(|j| if j == k { 1.0 } else { 0.0 })
                        .collect()
                } else {
                    let v: Vec<f64> = (0..attr_dims).map(|_| n.sample(&mut rng)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x / norm).collect()
                }
            })
            .collect();
        Ok(Self {
            cfg,
            content,
            prototypes,
            attribute_bias,
        })
    }

    pub fn config(&self) -> &AudioConfig {
        &self.cfg
    }

    pub fn content_tokens(&self) -> &[TokenId] {
        &self.content
    }

    fn content_index(&self, t: TokenId) -> Result<usize> {
        self.content
            .iter()
            .position(|&c| c == t)
            .ok_or_else(|| Error::UnknownToken(t.to_string()))
    }

    pub fn synth_clip(
        &self,
        transcript: &[TokenId],
        attribute: u8,
        seed: u64,
    ) -> Result<AudioClip> {
        if transcript.is_empty() {
            return Err(Error::Empty("transcript"));
        }
        if attribute as usize >= self.cfg.num_attributes {
            return Err(Error::Contract(format!(
                "attribute {attribute} out of range"
            )));
        }
        let idx: Vec<usize> = transcript
            .iter()
            .map(|&t| self.content_index(t))
            .collect::<Result<_>>()?;
        let fpt = self.cfg.frames_per_token;
        let d = self.cfg.feature_dim;
        let cd = self.cfg.content_dims;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise =
            Normal::new(0.0, self.cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let bias = &self.attribute_bias[attribute as usize];
        let mut frames = Mat::zeros(idx.len() * fpt, d);
        for (ti, &ci) in idx.iter().enumerate() {
            for k in 0..fpt {
                let row = frames.row_mut(ti * fpt + k);
                for j in 0..d {
                    let clean = if j < cd {
                        self.prototypes[ci][j]
                    } else {
                        bias[j - cd]
                    };
                    row[j] = (clean + noise.sample(&mut rng)) as f32 as f64;
                }
            }
        }
        Ok(AudioClip {
            frames,
            transcript: transcript.to_vec(),
            attribute,
            seed,
        })
    }

    /// Decodes frames back to tokens by averaging each token's frames and
    /// matching the nearest prototype in the content subspace.
    pub fn nearest_prototype_decode(&self, frames: &Mat) -> TokenSeq {
        let fpt = self.cfg.frames_per_token;
        let cd = self.cfg.content_dims;
        (0..frames.rows / fpt)
            .map(|ti| {
                let mut mean = vec![0.0; cd];
                for k in 0..fpt {
                    for (m, v) in mean.iter_mut().zip(&frames.row(ti * fpt + k)[..cd]) {
                        *m += v / fpt as f64;
                    }
                }
                let best = self
                    .prototypes
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        (
                            i,
                            p.iter()
                                .zip(&mean)
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum::<f64>(),
                        )
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(i, _)| i)
                    .expect("non-empty prototype table");
                self.content[best]
            })
            .collect()
    }
}

/// Outputs of the frozen encoder; both matrices have one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates {
    pub final_states: Mat,
    pub intermediate: Mat,
}

impl EncoderStates {
    pub fn frames(&self) -> usize {
        self.final_states.rows
    }

    /// Zero states of the same frame count; feeding these to the acoustic
    /// adapter leaves only its query pathway.
    pub fn silent_like(&self) -> Self {
        Self {
            final_states: Mat::zeros(self.final_states.rows, self.final_states.cols),
            intermediate: Mat::zeros(self.intermediate.rows, self.intermediate.cols),
        }
    }
}

pub(crate) fn init_encoder(store: &mut ParamStore, cfg: &AudioConfig) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed);
    rng.set_stream(2);
    let (d, e, cd, ec) = (
        cfg.feature_dim,
        cfg.encoder_dim,
        cfg.content_dims,
        cfg.encoder_content_cols(),
    );
    let n1 = Normal::new(0.0, 1.0 / (d as f64).sqrt() * 2.0).unwrap();
    let mut w_in = vec![0.0; d * e];
    for i in 0..d {
        for j in 0..e {
            // Block structure: content features feed content columns only.
            if (i < cd) == (j < ec) {
                w_in[i * e + j] = n1.sample(&mut rng) as f32 as f64;
            }
        }
    }
    let n2 = Normal::new(0.0, 1.0 / (ec as f64).sqrt()).unwrap();
    let mut w_out = vec![0.0; e * e];
    for i in 0..ec {
        for j in 0..e {
            w_out[i * e + j] = n2.sample(&mut rng) as f32 as f64;
        }
    }
    for (name, dims, vals) in [
        ("encoder.in", vec![d, e], w_in),
        ("encoder.out", vec![e, e], w_out),
    ] {
        let mut t = ParamTensor::new(name, dims, vals)?;
        t.frozen = true;
        store.insert(t)?;
    }
    Ok(())
}

pub(crate) fn init_adapters<R: Rng + ?Sized>(
    store: &mut ParamStore,
    cfg: &AudioConfig,
    model_dim: usize,
    rng: &mut R,
) -> Result<()> {
    let (e, h, d) = (cfg.encoder_dim, cfg.adapter_hidden, model_dim);
    linear_params(store, "semantic.conv1", 2 * e, h, rng)?;
    linear_params(store, "semantic.conv2", 2 * h, h, rng)?;
    linear_params(store, "semantic.proj1", h, d, rng)?;
    linear_params(store, "semantic.proj2", d, d, rng)?;

    store.insert(ParamTensor::normal(
        "acoustic.queries",
        vec![cfg.queries, d],
        1.0,
        rng,
    ))?;
    for l in 0..2 {
        let p = format!("acoustic.l{l}");
        linear_params(store, &format!("{p}.wq"), d, d, rng)?;
        linear_params(store, &format!("{p}.wk"), e, d, rng)?;
        linear_params(store, &format!("{p}.wv"), e, d, rng)?;
        linear_params(store, &format!("{p}.wo"), d, d, rng)?;
        layer_norm_params(store, &format!("{p}.ln1"), d)?;
        linear_params(store, &format!("{p}.ffn.w1"), d, 2 * d, rng)?;
        linear_params(store, &format!("{p}.ffn.w2"), 2 * d, d, rng)?;
        layer_norm_params(store, &format!("{p}.ln2"), d)?;
    }
    Ok(())
}

/// Runs the frozen encoder: `intermediate = tanh(frames · W_in)`,
/// `final = intermediate · W_out`.
pub fn encode_frozen(params: &ParamStore, frames: &Mat) -> Result<EncoderStates> {
    let mut tape = Tape::inference(params);
    let x = tape.constant(frames.clone());
    let w_in = tape.param("encoder.in")?;
    let w_out = tape.param("encoder.out")?;
    if tape.shape(w_in).0 != frames.cols {
        return Err(Error::Contract(format!(
            "frames have {} features, encoder expects {}",
            frames.cols,
            tape.shape(w_in).0
        )));
    }
    let pre = tape.matmul(x, w_in);
    let h = tape.tanh(pre);
    let f = tape.matmul(h, w_out);
    Ok(EncoderStates {
        final_states: tape.value(f).to_owned(),
        intermediate: tape.value(h).to_owned(),
    })
}

/// Two stride-2 convolutions (kernel 2) then two affine maps: `⌈F/4⌉` rows of width `model_dim`.
pub fn semantic_adapt(
    tape: &mut Tape<'_>,
    state: &ModelState,
    states: &EncoderStates,
) -> Result<Var> {
    let f = states.frames();
    if f == 0 {
        return Err(Error::Empty("encoder states"));
    }
    let padded_rows = f.div_ceil(4) * 4;
    let mut x = states.final_states.clone();
    if padded_rows > f {
        x = x.vstack(&Mat::zeros(padded_rows - f, x.cols));
    }
    let x = tape.constant(x);
    let w = tape.windows(x, 2, 2);
    let c1 = linear(tape, state, w, "semantic.conv1")?;
    let c1 = tape.gelu(c1);
    let w2 = tape.windows(c1, 2, 2);
    let c2 = linear(tape, state, w2, "semantic.conv2")?;
    let c2 = tape.gelu(c2);
    let p1 = linear(tape, state, c2, "semantic.proj1")?;
    let p1 = tape.gelu(p1);
    linear(tape, state, p1, "semantic.proj2")
}

fn frame_positions(frames: usize, dim: usize) -> Mat {
    let mut pe = Mat::zeros(frames, dim);
    for f in 0..frames {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = f as f64 * rate;
            pe.set(f, i, 0.5 * if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    pe
}

/// Learned queries cross-attending over positioned intermediate states
/// through two attention + feed-forward layers. Always `queries × model_dim`.
pub fn acoustic_adapt(
    tape: &mut Tape<'_>,
    state: &ModelState,
    states: &EncoderStates,
) -> Result<Var> {
    let f = states.frames();
    if f == 0 {
        return Err(Error::Empty("encoder states"));
    }
    let e = states.intermediate.cols;
    let mut xm = states.intermediate.clone();
    xm.add_assign(&frame_positions(f, e));
    let x = tape.constant(xm);
    let mut q = tape.param("acoustic.queries")?;
    let d = tape.shape(q).1;
    let inv = 1.0 / (d as f64).sqrt();
    for l in 0..2 {
        let p = format!("acoustic.l{l}");
        let qq = linear(tape, state, q, &format!("{p}.wq"))?;
        let k = linear(tape, state, x, &format!("{p}.wk"))?;
        let v = linear(tape, state, x, &format!("{p}.wv"))?;
        let s = tape.matmul_t(qq, k);
        let s = tape.scale(s, inv);
        let a = tape.softmax_rows(s);
        let ctx = tape.matmul(a, v);
        let o = linear(tape, state, ctx, &format!("{p}.wo"))?;
        let r = tape.add(q, o);
        q = layer_norm(tape, r, &format!("{p}.ln1"))?;
        let h = linear(tape, state, q, &format!("{p}.ffn.w1"))?;
        let h = tape.gelu(h);
        let h = linear(tape, state, h, &format!("{p}.ffn.w2"))?;
        let r = tape.add(q, h);
        q = layer_norm(tape, r, &format!("{p}.ln2"))?;
    }
    Ok(q)
}

/// Position counts of a spliced input, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub acoustic: usize,
    pub semantic: usize,
    pub prompt: usize,
    pub response: usize,
}

impl Layout {
    pub fn condition_len(&self) -> usize {
        self.acoustic + self.semantic + self.prompt
    }

    pub fn prefix_rows(&self) -> usize {
        self.acoustic + self.semantic
    }

    pub fn total(&self) -> usize {
        self.condition_len() + self.response
    }

    /// Token-region indices that may be masked (the response only).
    pub fn maskable(&self) -> std::ops::Range<usize> {
        self.prompt..self.prompt + self.response
    }
}

/// `[acoustic][semantic]` embedding rows followed by the token region
/// `[prompt][response]`. Only response tokens are maskable.
#[derive(Debug, Clone, Copy)]
pub struct SplicedInput {
    pub prefix: Option<Var>,
    pub layout: Layout,
}

pub fn splice_prompt(
    tape: &mut Tape<'_>,
    acoustic: Option<Var>,
    semantic: Option<Var>,
    prompt_len: usize,
    response_len: usize,
    max_positions: usize,
) -> Result<SplicedInput> {
    let a = acoustic.map_or(0, |v| tape.shape(v).0);
    let s = semantic.map_or(0, |v| tape.shape(v).0);
    let layout = Layout {
        acoustic: a,
        semantic: s,
        prompt: prompt_len,
        response: response_len,
    };
    if layout.total() > max_positions {
        return Err(Error::Length {
            len: layout.total(),
            max: max_positions,
        });
    }
    let parts: Vec<Var> = acoustic.into_iter().chain(semantic).collect();
    let prefix = match parts.len() {
        0 => None,
        1 => Some(parts[0]),
        _ => Some(tape.concat_rows(&parts)),
    };
    Ok(SplicedInput { prefix, layout })
}

/// How the acoustic stream enters the condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AcousticMode {
    /// Semantic stream only (stage-1 layout).
    Absent,
    /// Both streams.
    #[default]
    Present,
    /// Acoustic slot kept but fed silent states (ablation).
    Silent,
}

/// Builds the prefix rows for one clip on `tape`.
pub fn condition_prefix(
    tape: &mut Tape<'_>,
    state: &ModelState,
    states: &EncoderStates,
    mode: AcousticMode,
) -> Result<Var> {
    let semantic = semantic_adapt(tape, state, states)?;
    let acoustic = match mode {
        AcousticMode::Absent => None,
        AcousticMode::Present => Some(acoustic_adapt(tape, state, states)?),
        AcousticMode::Silent => Some(acoustic_adapt(tape, state, &states.silent_like())?),
    };
    Ok(match acoustic {
        Some(a) => tape.concat_rows(&[a, semantic]),
        None => semantic,
    })
}

/// Evaluates the prefix rows without gradients.
pub fn condition_rows(
    state: &ModelState,
    states: &EncoderStates,
    mode: AcousticMode,
) -> Result<Mat> {
    let mut tape = Tape::inference(&state.params);
    let v = condition_prefix(&mut tape, state, states, mode)?;
    Ok(tape.value(v).to_owned())
}

pub fn write_features(path: &Path, frames: &Mat) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + frames.data.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(frames.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(frames.cols as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for &v in &frames.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Mat> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_features(&bytes, &path.display().to_string())
}

pub fn decode_features(bytes: &[u8], what: &str) -> Result<Mat> {
    if bytes.len() < 16 {
        return Err(Error::Truncated(what.to_string()));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format(format!("{what}: bad feature magic")));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (f, d) = (word(4), word(8));
    let need = 16 + f * d * 4;
    if bytes.len() < need {
        return Err(Error::Truncated(what.to_string()));
    }
    let data = bytes[16..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Mat::from_vec(f, d, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Vocab;
    use crate::state::ModelConfig;

    fn synth() -> Synthesizer {
        Synthesizer::new(AudioConfig::default(), (10..26).collect()).unwrap()
    }

    fn small_state() -> ModelState {
        let mut cfg = ModelConfig::tiny(Vocab::anonymous(30).unwrap());
        cfg.audio = AudioConfig::default();
        ModelState::init(cfg, 3).unwrap()
    }

    #[test]
    fn frame_count_and_determinism() {
        let s = synth();
        let t: Vec<TokenId> = (10..20).collect();
        let a = s.synth_clip(&t, 2, 99).unwrap();
        assert_eq!(a.frames.rows, 40);
        assert_eq!(a.frames.cols, 16);
        let b = s.synth_clip(&t, 2, 99).unwrap();
        assert_eq!(a.frames.data, b.frames.data);
    }

    #[test]
    fn unknown_token_is_rejected() {
        assert!(matches!(
            synth().synth_clip(&[3], 0, 1),
            Err(Error::UnknownToken(_))
        ));
    }

    #[test]
    fn semantic_lengths() {
        let st = small_state();
        for (frames, want) in [(100usize, 25usize), (4, 1), (10, 3), (1, 1)] {
            let states = encode_frozen(&st.params, &Mat::zeros(frames, 16)).unwrap();
            assert_eq!(states.frames(), frames);
            let mut tape = Tape::inference(&st.params);
            let v = semantic_adapt(&mut tape, &st, &states).unwrap();
            assert_eq!(tape.shape(v), (want, st.config.backbone.model_dim));
        }
    }

    #[test]
    fn acoustic_rows_are_constant() {
        let st = small_state();
        let s = synth();
        for f in [7usize, 4000] {
            let frames = Mat::from_vec(
                f,
                16,
                (0..f * 16).map(|i| ((i % 13) as f64 - 6.0) * 0.1).collect(),
            );
            let states = encode_frozen(&st.params, &frames).unwrap();
            let mut tape = Tape::inference(&st.params);
            let v = acoustic_adapt(&mut tape, &st, &states).unwrap();
            assert_eq!(tape.shape(v), (64, st.config.backbone.model_dim));
        }
        let clip = s.synth_clip(&[10, 11, 12], 1, 5).unwrap();
        let states = encode_frozen(&st.params, &clip.frames).unwrap();
        let silent = states.silent_like();
        let mut tape = Tape::inference(&st.params);
        let v = acoustic_adapt(&mut tape, &st, &silent).unwrap();
        assert!(tape.value(v).data.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn permuting_frames_changes_acoustic_output() {
        let st = small_state();
        let clip = synth().synth_clip(&[10, 14, 12, 20], 3, 8).unwrap();
        let mut perm = clip.frames.clone();
        let n = perm.rows;
        for r in 0..n {
            perm.row_mut(r).copy_from_slice(clip.frames.row(n - 1 - r));
        }
        let out = |frames: &Mat| {
            let states = encode_frozen(&st.params, frames).unwrap();
            let mut tape = Tape::inference(&st.params);
            let v = acoustic_adapt(&mut tape, &st, &states).unwrap();
            tape.value(v).to_owned()
        };
        assert_ne!(out(&clip.frames), out(&perm));
    }

    #[test]
    fn final_states_ignore_attribute() {
        let st = small_state();
        let s = synth();
        // Same seed → same noise; only the attribute bias differs.
        let a = encode_frozen(&st.params, &s.synth_clip(&[10, 11], 0, 4).unwrap().frames).unwrap();
        let b = encode_frozen(&st.params, &s.synth_clip(&[10, 11], 3, 4).unwrap().frames).unwrap();
        assert_eq!(a.final_states, b.final_states);
        assert_ne!(a.intermediate, b.intermediate);
    }

    #[test]
    fn splice_layout_arithmetic() {
        let st = small_state();
        let mut tape = Tape::inference(&st.params);
        let ac = tape.constant(Mat::zeros(64, 8));
        let se = tape.constant(Mat::zeros(10, 8));
        let sp = splice_prompt(&mut tape, Some(ac), Some(se), 12, 16, 512).unwrap();
        assert_eq!(sp.layout.condition_len(), 86);
        assert_eq!(sp.layout.maskable(), 12..28);
        let sp1 = splice_prompt(&mut tape, None, Some(se), 12, 16, 512).unwrap();
        assert_eq!(sp1.layout.acoustic, 0);
        assert_eq!(tape.shape(sp1.prefix.unwrap()).0, 10);
        assert!(matches!(
            splice_prompt(&mut tape, Some(ac), Some(se), 12, 16, 80),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn feature_file_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.dfa2");
        let m = Mat::from_vec(2, 3, vec![0.5, 1.0, -2.0, 3.25, 0.0, 8.0]);
        write_features(&p, &m).unwrap();
        assert_eq!(read_features(&p).unwrap(), m);
        let mut bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"DFA2");
        assert_eq!(bytes.len(), 16 + 6 * 4);
        bytes.truncate(20);
        assert!(matches!(
            decode_features(&bytes, "x"),
            Err(Error::Truncated(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(
            decode_features(&bytes, "x"),
            Err(Error::Format(_))
        ));
    }
}
