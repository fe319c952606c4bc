//! Synthetic corpora: transcription instructions, attribute question answering
//! (open and multiple-choice), and preference pairs built from the open
//! answers by swapping the attribute word.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audiofront::{read_features, write_features, AudioConfig, Synthesizer};
use crate::backbone::{TokenId, Vocab};
use crate::error::{Error, Result};
use crate::substrate::Mat;

pub const MASK_SYMBOL: &str = "<mask>";
pub const EOT_SYMBOL: &str = "<endoftext>";
pub const PAD_SYMBOL: &str = "<pad>";

pub const CONTENT_SYLLABLES: [&str; 16] = [
    "ba", "de", "ki", "mo", "nu", "pa", "re", "si", "tu", "vu", "ga", "hi", "ji", "ke", "lo", "zu",
];

pub const ATTRIBUTES: [&str; 4] = ["neutral", "happy", "sad", "angry"];

pub const OPTION_LETTERS: [&str; 4] = ["A", "B", "C", "D"];

pub const ASR_TEMPLATES: [&str; 10] = [
    "Please transcribe the audio to text.",
    "Convert this speech to text.",
    "What is being said in this audio?",
    "Transcribe the following audio clip.",
    "Please write down what you hear in the audio.",
    "Convert the spoken words to written text.",
    "What words are spoken in this recording?",
    "Please provide a transcription of this audio.",
    "Turn this speech into text format.",
    "Write out what is said in the audio file.",
];

pub const MCQ_INSTRUCTION: &str = "Choose the most suitable answer from options A, B, C, and D.";

pub const ATTRIBUTE_QUESTIONS: [&str; 2] = [
    "What emotion does the speaker convey?",
    "How does the speaker sound?",
];

pub const CONTENT_QUESTION: &str = "What is the first word?";

pub const MIN_TRANSCRIPT: usize = 3;
pub const MAX_TRANSCRIPT: usize = 12;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Asr,
    Aqa,
    Mcq,
    Pref,
}

impl RecordKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "asr" => Ok(Self::Asr),
            "aqa" => Ok(Self::Aqa),
            "mcq" => Ok(Self::Mcq),
            "pref" => Ok(Self::Pref),
            _ => Err(Error::Config(format!("unknown record kind {s}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Asr => "asr",
            Self::Aqa => "aqa",
            Self::Mcq => "mcq",
            Self::Pref => "pref",
        }
    }

    fn stream(&self) -> u64 {
        match self {
            Self::Asr => 1,
            Self::Aqa => 2,
            Self::Mcq => 3,
            Self::Pref => 4,
        }
    }
}

/// One corpus line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub kind: RecordKind,
    /// Relative to the corpus directory.
    pub features_path: String,
    pub prompt: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
    pub transcript: String,
    /// True when the question is about the attribute rather than the content.
    #[serde(default)]
    pub attribute_question: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usable: Option<bool>,
    pub seed: u64,
}

impl Record {
    pub fn attribute_index(&self) -> Option<u8> {
        let a = self.attribute.as_deref()?;
        ATTRIBUTES.iter().position(|&x| x == a).map(|i| i as u8)
    }
}

/// A record with its frames loaded.
#[derive(Debug, Clone)]
pub struct Example {
    pub record: Record,
    pub frames: Mat,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn kinds(&self) -> BTreeSet<RecordKind> {
        self.examples.iter().map(|e| e.record.kind).collect()
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.examples.iter().map(|e| e.record.id.as_str()).collect()
    }

    pub fn of_kind(&self, kind: RecordKind) -> Corpus {
        Corpus {
            examples: self
                .examples
                .iter()
                .filter(|e| e.record.kind == kind)
                .cloned()
                .collect(),
        }
    }

    pub fn concat(parts: &[&Corpus]) -> Corpus {
        Corpus {
            examples: parts
                .iter()
                .flat_map(|c| c.examples.iter().cloned())
                .collect(),
        }
    }
}

fn word_key(w: &str) -> Option<String> {
    let w = w.trim_matches(|c: char| c.is_ascii_punctuation());
    // Option letters are kept upper-case in their own slots.
    (!w.is_empty() && !OPTION_LETTERS.contains(&w)).then(|| w.to_lowercase())
}

/// The toy vocabulary: sentinels and padding, content syllables, attribute
/// words, option letters, then every other word the prompt pools use.
pub fn lexicon() -> Vocab {
    let mut symbols: Vec<String> = [MASK_SYMBOL, EOT_SYMBOL, PAD_SYMBOL]
        .iter()
        .map(|s| s.to_string())
        .collect();
    symbols.extend(CONTENT_SYLLABLES.iter().map(|s| s.to_string()));
    symbols.extend(ATTRIBUTES.iter().map(|s| s.to_string()));
    symbols.extend(OPTION_LETTERS.iter().map(|s| s.to_string()));
    let taken: BTreeSet<String> = symbols.iter().cloned().collect();
    let texts = ASR_TEMPLATES
        .iter()
        .chain(ATTRIBUTE_QUESTIONS.iter())
        .chain(
            [
                MCQ_INSTRUCTION,
                CONTENT_QUESTION,
                "question options",
                AQA_ANSWER_WORDS,
            ]
            .iter(),
        );
    let words: BTreeSet<String> = texts
        .flat_map(|t| t.split_whitespace())
        .filter_map(word_key)
        .filter(|w| !taken.contains(w))
        .collect();
    symbols.extend(words);
    Vocab::new(symbols, 0, 1).expect("lexicon is well formed")
}

const AQA_ANSWER_WORDS: &str = "the speaker sounds and the first word is";

pub fn content_ids(vocab: &Vocab) -> Vec<TokenId> {
    CONTENT_SYLLABLES
        .iter()
        .map(|s| vocab.id(s).expect("syllable in lexicon"))
        .collect()
}

pub fn pad_id(vocab: &Vocab) -> TokenId {
    vocab.id(PAD_SYMBOL).expect("pad in lexicon")
}

pub fn attribute_ids(vocab: &Vocab) -> Vec<TokenId> {
    ATTRIBUTES
        .iter()
        .map(|s| vocab.id(s).expect("attribute in lexicon"))
        .collect()
}

pub fn letter_ids(vocab: &Vocab) -> Vec<TokenId> {
    OPTION_LETTERS
        .iter()
        .map(|s| vocab.id(s).expect("letter in lexicon"))
        .collect()
}

pub fn aqa_answer(attribute: &str, first_word: &str) -> String {
    format!("the speaker sounds {attribute} and the first word is {first_word}")
}

fn options_text(options: &[&str]) -> String {
    options
        .iter()
        .zip(OPTION_LETTERS)
        .map(|(o, l)| format!("{l}. {o}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generates records with frames in memory. Record `i` draws from its own
/// ChaCha stream, so any record can be regenerated independently.
pub fn generate(kind: RecordKind, count: usize, seed: u64, audio: &AudioConfig) -> Result<Corpus> {
    if count == 0 {
        return Err(Error::Contract("count must be at least 1".into()));
    }
    if kind == RecordKind::Pref {
        let aqa = generate(RecordKind::Aqa, count, seed, audio)?;
        return make_pref_pairs(&aqa, seed);
    }
    let vocab = lexicon();
    let syn = Synthesizer::new(*audio, content_ids(&vocab))?;
    let mut examples = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((kind.stream() << 40) | i as u64);
        let len = rng.random_range(MIN_TRANSCRIPT..=MAX_TRANSCRIPT);
        let words: Vec<&str> = (0..len)
            .map(|_| CONTENT_SYLLABLES[rng.random_range(0..CONTENT_SYLLABLES.len())])
            .collect();
        let attr = rng.random_range(0..audio.num_attributes.min(ATTRIBUTES.len()));
        let clip_seed = rng.next_u64();
        let transcript = words.join(" ");
        let ids = vocab.tokenize(&transcript)?;
        let clip = syn.synth_clip(&ids, attr as u8, clip_seed)?;
        let id = format!("{}-{seed:016x}-{i:06}", kind.as_str());
        let (prompt, response, attribute_question) = match kind {
            RecordKind::Asr => {
                let t = ASR_TEMPLATES[rng.random_range(0..ASR_TEMPLATES.len())];
                (t.to_string(), transcript.clone(), false)
            }
            RecordKind::Aqa => {
                let q = ATTRIBUTE_QUESTIONS[rng.random_range(0..ATTRIBUTE_QUESTIONS.len())];
                (q.to_string(), aqa_answer(ATTRIBUTES[attr], words[0]), true)
            }
            RecordKind::Mcq => {
                let about_attr = rng.random_bool(0.75);
                let (question, mut options, correct): (&str, Vec<&str>, &str) = if about_attr {
                    let q = ATTRIBUTE_QUESTIONS[rng.random_range(0..ATTRIBUTE_QUESTIONS.len())];
                    (q, ATTRIBUTES.to_vec(), ATTRIBUTES[attr])
                } else {
                    let mut pool: Vec<&str> = CONTENT_SYLLABLES
                        .iter()
                        .copied()
                        .filter(|&s| s != words[0])
                        .collect();
                    pool.shuffle(&mut rng);
                    let mut o = vec![words[0]];
                    o.extend_from_slice(&pool[..3]);
                    (CONTENT_QUESTION, o, words[0])
                };
                options.shuffle(&mut rng);
                let k = options
                    .iter()
                    .position(|&o| o == correct)
                    .expect("correct option present");
                let prompt = format!(
                    "{MCQ_INSTRUCTION} Question: {question} Options: {}",
                    options_text(&options)
                );
                (prompt, OPTION_LETTERS[k].to_string(), about_attr)
            }
            RecordKind::Pref => unreachable!(),
        };
        examples.push(Example {
            record: Record {
                features_path: format!("features/{id}.bin"),
                id,
                kind,
                prompt,
                response,
                chosen: None,
                rejected: None,
                attribute: Some(ATTRIBUTES[attr].to_string()),
                transcript,
                attribute_question,
                usable: None,
                seed: clip_seed,
            },
            frames: clip.frames,
        });
    }
    Ok(Corpus { examples })
}

/// Turns open attribute answers into (chosen, rejected) pairs whose only
/// difference is the attribute word.
pub fn make_pref_pairs(aqa: &Corpus, seed: u64) -> Result<Corpus> {
    let mut examples = Vec::with_capacity(aqa.len());
    for (i, e) in aqa.examples.iter().enumerate() {
        let r = &e.record;
        let attr = r
            .attribute
            .as_deref()
            .ok_or_else(|| Error::Contract(format!("record {} has no attribute", r.id)))?;
        if !ATTRIBUTES.contains(&attr) {
            return Err(Error::Contract(format!(
                "record {} has unknown attribute {attr}",
                r.id
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((RecordKind::Pref.stream() << 40) | i as u64);
        let others: Vec<&str> = ATTRIBUTES.iter().copied().filter(|&a| a != attr).collect();
        let wrong = others[rng.random_range(0..others.len())];
        let chosen = r.response.clone();
        let rejected = chosen
            .split_whitespace()
            .map(|w| if w == attr { wrong } else { w })
            .collect::<Vec<_>>()
            .join(" ");
        let usable = chosen != rejected;
        examples.push(Example {
            record: Record {
                id: format!("pref-{seed:016x}-{i:06}"),
                kind: RecordKind::Pref,
                features_path: r.features_path.clone(),
                prompt: r.prompt.clone(),
                response: chosen.clone(),
                chosen: Some(chosen),
                rejected: Some(rejected),
                attribute: r.attribute.clone(),
                transcript: r.transcript.clone(),
                attribute_question: true,
                usable: Some(usable),
                seed: r.seed,
            },
            frames: e.frames.clone(),
        });
    }
    Ok(Corpus { examples })
}

/// Writes `corpus` under `dir`: a manifest plus one feature file per clip.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("features"))?;
    let mut lines = Vec::new();
    for e in &corpus.examples {
        let path = dir.join(&e.record.features_path);
        if !path.exists() {
            write_features(&path, &e.frames)?;
        }
        serde_json::to_writer(&mut lines, &e.record)?;
        lines.push(b'\n');
    }
    let manifest = dir.join(MANIFEST_FILE);
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&lines)?;
    f.sync_all()?;
    fs::rename(&tmp, &manifest)?;
    Ok(manifest)
}

/// Generates and writes a corpus, returning its records.
pub fn gen_corpus(
    kind: RecordKind,
    count: usize,
    seed: u64,
    out_dir: &Path,
    audio: &AudioConfig,
) -> Result<Vec<Record>> {
    let corpus = generate(kind, count, seed, audio)?;
    write_corpus(&corpus, out_dir)?;
    Ok(corpus.examples.into_iter().map(|e| e.record).collect())
}

/// Reads a manifest and its feature files.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut examples = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let record: Record = serde_json::from_str(line)?;
        let frames = read_features(&dir.join(&record.features_path))?;
        examples.push(Example { record, frames });
    }
    Ok(Corpus { examples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicon_covers_every_prompt() {
        let v = lexicon();
        assert_eq!(v.symbol(v.mask()), MASK_SYMBOL);
        assert_eq!(v.symbol(v.eot()), EOT_SYMBOL);
        for t in ASR_TEMPLATES
            .iter()
            .chain(&ATTRIBUTE_QUESTIONS)
            .chain(&[MCQ_INSTRUCTION, CONTENT_QUESTION])
        {
            v.tokenize(t).unwrap();
        }
        assert!(ASR_TEMPLATES.contains(&"Please transcribe the audio to text."));
        assert!(v.size() < 100);
    }

    #[test]
    fn syllables_never_collide_with_prompt_words() {
        let prompt_words: BTreeSet<String> = ASR_TEMPLATES
            .iter()
            .chain(&ATTRIBUTE_QUESTIONS)
            .chain(&[MCQ_INSTRUCTION, CONTENT_QUESTION, AQA_ANSWER_WORDS])
            .flat_map(|t| t.split_whitespace())
            .filter_map(word_key)
            .collect();
        for s in CONTENT_SYLLABLES.iter().chain(&ATTRIBUTES) {
            assert!(!prompt_words.contains(*s), "{s}");
        }
    }

    #[test]
    fn records_are_well_formed() {
        let audio = AudioConfig::default();
        let v = lexicon();
        for kind in [RecordKind::Asr, RecordKind::Aqa, RecordKind::Mcq] {
            let c = generate(kind, 50, 3, &audio).unwrap();
            for e in &c.examples {
                let r = &e.record;
                let n = v.tokenize(&r.transcript).unwrap().len();
                assert!((MIN_TRANSCRIPT..=MAX_TRANSCRIPT).contains(&n));
                assert_eq!(e.frames.rows, n * audio.frames_per_token);
                let prompt = v.tokenize(&r.prompt).unwrap();
                let attr_hits = attribute_ids(&v)
                    .iter()
                    .map(|a| prompt.iter().filter(|t| *t == a).count())
                    .sum::<usize>();
                match kind {
                    RecordKind::Mcq if r.attribute_question => assert_eq!(attr_hits, 4),
                    _ => assert_eq!(attr_hits, 0),
                }
                if kind == RecordKind::Mcq {
                    assert!(OPTION_LETTERS.contains(&r.response.as_str()));
                    let opts = r.prompt.split("Options:").nth(1).unwrap();
                    for l in OPTION_LETTERS {
                        assert_eq!(opts.matches(&format!("{l}. ")).count(), 1);
                    }
                }
            }
        }
    }

    #[test]
    fn pref_pairs_differ_only_in_attribute() {
        let c = generate(RecordKind::Pref, 200, 8, &AudioConfig::default()).unwrap();
        for e in &c.examples {
            let r = &e.record;
            let a: Vec<&str> = r.chosen.as_deref().unwrap().split(' ').collect();
            let b: Vec<&str> = r.rejected.as_deref().unwrap().split(' ').collect();
            assert_eq!(a.len(), b.len());
            let diffs: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
            assert_eq!(diffs.len(), 1);
            assert_eq!(a[diffs[0]], r.attribute.as_deref().unwrap());
            assert!(ATTRIBUTES.contains(&b[diffs[0]]));
            assert_eq!(r.usable, Some(true));
        }
    }

    #[test]
    fn missing_attribute_is_rejected() {
        let mut c = generate(RecordKind::Aqa, 2, 1, &AudioConfig::default()).unwrap();
        c.examples[1].record.attribute = None;
        assert!(make_pref_pairs(&c, 0).is_err());
    }

    #[test]
    fn zero_count_is_rejected() {
        assert!(generate(RecordKind::Asr, 0, 1, &AudioConfig::default()).is_err());
    }
}
