//! Deterministic synthetic text-classification data.
//!
//! Sentences are sequences of vocabulary words `w0, w1, ...`; each class
//! owns a disjoint group of four *indicator* words, and every sentence
//! contains at least one indicator of its class among background words. The
//! label is therefore recoverable by counting indicators, which gives tests
//! an independent oracle for the generator.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved token ids. Real words start at [`FIRST_WORD_ID`].
pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const FIRST_WORD_ID: usize = 2;

/// Indicator words per class.
pub const INDICATOR_GROUP: usize = 4;

/// Fraction of positions drawn from the label's indicator group; the rest
/// are background words.
const INDICATOR_RATE: f64 = 0.35;

/// One labeled sentence, already tokenized to ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

// ── Vocabulary ───────────────────────────────────────────────────────────

/// Fixed-scheme vocabulary: `[pad]`, `[cls]`, then `w0..w{n_words-1}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    n_words: usize,
}

impl Vocab {
    pub fn new(n_words: usize) -> Result<Self> {
        if n_words == 0 {
            return Err(Error::InvalidArgument("vocabulary needs at least one word".into()));
        }
        Ok(Vocab { n_words })
    }

    /// Rebuilds the vocabulary from a total size that includes the two
    /// reserved ids (as stored in a model config).
    pub fn with_total_size(vocab_size: usize) -> Result<Self> {
        if vocab_size <= FIRST_WORD_ID {
            return Err(Error::InvalidArgument(format!(
                "vocab size {vocab_size} leaves no room for words after the reserved ids"
            )));
        }
        Vocab::new(vocab_size - FIRST_WORD_ID)
    }

    /// Total id count including reserved ids.
    pub fn size(&self) -> usize {
        FIRST_WORD_ID + self.n_words
    }

    pub fn token(&self, id: usize) -> Result<String> {
        match id {
            PAD_ID => Ok("[pad]".into()),
            CLS_ID => Ok("[cls]".into()),
            _ if id < self.size() => Ok(format!("w{}", id - FIRST_WORD_ID)),
            _ => Err(Error::Data(format!("token id {id} outside vocabulary of size {}", self.size()))),
        }
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        match token {
            "[pad]" => Ok(PAD_ID),
            "[cls]" => Ok(CLS_ID),
            _ => {
                let k: usize = token
                    .strip_prefix('w')
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Data(format!("unknown token {token:?}")))?;
                if k >= self.n_words {
                    return Err(Error::Data(format!(
                        "token {token:?} outside vocabulary of {} words",
                        self.n_words
                    )));
                }
                Ok(FIRST_WORD_ID + k)
            }
        }
    }
}

/// Word ids owned by `class` as its indicator group.
pub fn indicator_ids(class: usize) -> std::ops::Range<usize> {
    let start = FIRST_WORD_ID + class * INDICATOR_GROUP;
    start..start + INDICATOR_GROUP
}

// ── Generator ────────────────────────────────────────────────────────────

fn default_min_len() -> usize {
    3
}

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_classes: usize,
    /// Word count excluding the reserved `[pad]`/`[cls]` ids.
    pub vocab_words: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a *training* example's label is replaced with a
    /// uniformly random class; val/test stay clean.
    pub noise_rate: f64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.vocab_words <= self.n_classes * INDICATOR_GROUP {
            return fail(format!(
                "vocab of {} words leaves no background words after {} indicator ids",
                self.vocab_words,
                self.n_classes * INDICATOR_GROUP
            ));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return fail("every split needs at least one example".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!("bad length range [{}, {}]", self.min_len, self.max_len));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return fail(format!("noise rate {} outside [0, 1]", self.noise_rate));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.vocab_words)
    }
}

/// The three generated splits plus their vocabulary.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub vocab: Vocab,
    pub n_classes: usize,
}

/// Generates the corpus. Deterministic in `(spec, seed)`: each split uses a
/// derived sub-seed, labels are assigned round-robin (balanced up to
/// rounding), and sentences are unique across the whole corpus.
pub fn generate(spec: &GeneratorSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let vocab = spec.vocab()?;
    let background: Vec<usize> =
        (FIRST_WORD_ID + spec.n_classes * INDICATOR_GROUP..vocab.size()).collect();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();

    let mut make_split = |split_idx: u64, n: usize, noisy: bool| -> Result<Vec<Example>> {
        let mut rng =
            ChaCha12Rng::seed_from_u64(seed.wrapping_add(split_idx.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % spec.n_classes;
            let tokens = loop {
                let len = rng.random_range(spec.min_len..=spec.max_len);
                let ind: Vec<usize> = indicator_ids(label).collect();
                let mut tokens: Vec<usize> = (0..len)
                    .map(|_| {
                        if rng.random_bool(INDICATOR_RATE) {
                            ind[rng.random_range(0..ind.len())]
                        } else {
                            background[rng.random_range(0..background.len())]
                        }
                    })
                    .collect();
                // Guarantee the label stays decodable from the tokens.
                if !tokens.iter().any(|t| ind.contains(t)) {
                    let at = rng.random_range(0..tokens.len());
                    tokens[at] = ind[rng.random_range(0..ind.len())];
                }
                if seen.insert(tokens.clone()) {
                    break tokens;
                }
            };
            let label = if noisy && spec.noise_rate > 0.0 && rng.random_bool(spec.noise_rate) {
                rng.random_range(0..spec.n_classes)
            } else {
                label
            };
            out.push(Example { tokens, label });
        }
        Ok(out)
    };

    Ok(SyntheticData {
        train: make_split(0, spec.n_train, true)?,
        val: make_split(1, spec.n_val, false)?,
        test: make_split(2, spec.n_test, false)?,
        vocab,
        n_classes: spec.n_classes,
    })
}

/// Indicator counts per class for one sentence; the test oracle decodes
/// labels by taking the argmax of this.
pub fn indicator_counts(tokens: &[usize], n_classes: usize) -> Vec<usize> {
    (0..n_classes)
        .map(|c| tokens.iter().filter(|t| indicator_ids(c).contains(t)).count())
        .collect()
}

// ── File format ──────────────────────────────────────────────────────────

/// Writes one `label<TAB>w3 w17 ...` line per example.
pub fn save_examples(path: &Path, examples: &[Example], vocab: &Vocab) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        let words: Vec<String> = ex.tokens.iter().map(|&t| vocab.token(t)).collect::<Result<_>>()?;
        writeln!(f, "{}\t{}", ex.label, words.join(" "))?;
    }
    Ok(())
}

/// Reads the TSV format back; malformed lines and unknown tokens are
/// rejected with the line number.
pub fn load_examples(path: &Path, vocab: &Vocab) -> Result<Vec<Example>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (no, line) in f.lines().enumerate() {
        let line = line?;
        let at = |msg: String| Error::Data(format!("{}:{}: {msg}", path.display(), no + 1));
        let (label_s, sent) =
            line.split_once('\t').ok_or_else(|| at("missing tab separator".into()))?;
        let label: usize =
            label_s.parse().map_err(|_| at(format!("bad label {label_s:?}")))?;
        let tokens: Vec<usize> = sent
            .split_whitespace()
            .map(|w| vocab.id(w).map_err(|e| at(e.to_string())))
            .collect::<Result<_>>()?;
        if tokens.is_empty() {
            return Err(at("empty sentence".into()));
        }
        out.push(Example { tokens, label });
    }
    Ok(out)
}

const META_FILE: &str = "meta.json";

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    spec: GeneratorSpec,
    seed: u64,
}

/// Writes train/val/test TSVs plus a `meta.json` describing the generator.
pub fn save_dataset(dir: &Path, data: &SyntheticData, spec: &GeneratorSpec, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_examples(&dir.join("train.tsv"), &data.train, &data.vocab)?;
    save_examples(&dir.join("val.tsv"), &data.val, &data.vocab)?;
    save_examples(&dir.join("test.tsv"), &data.test, &data.vocab)?;
    let meta = DatasetMeta { spec: spec.clone(), seed };
    std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Loads a dataset directory produced by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<SyntheticData> {
    let meta_path = dir.join(META_FILE);
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)
        .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
    meta.spec.validate()?;
    let vocab = meta.spec.vocab()?;
    Ok(SyntheticData {
        train: load_examples(&dir.join("train.tsv"), &vocab)?,
        val: load_examples(&dir.join("val.tsv"), &vocab)?,
        test: load_examples(&dir.join("test.tsv"), &vocab)?,
        n_classes: meta.spec.n_classes,
        vocab,
    })
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Data(format!("json: {e}"))
    }
}
