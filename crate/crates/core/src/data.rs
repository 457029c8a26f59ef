//! Text ingestion: TSV loading, vocabulary, encoding, batching and a seeded
//! synthetic sentiment corpus.
//!
//! The TSV format is one example per line, `label<TAB>text`, UTF-8, `\n`
//! line endings, no header. The public 50k IMDb review set converts to it by
//! writing `1` for positive and `0` for negative reviews and replacing tabs
//! and newlines inside the review text with spaces.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
const RESERVED: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub text: String,
    pub label: usize,
}

impl Example {
    pub fn new(text: impl Into<String>, label: usize) -> Self {
        Self {
            text: text.into(),
            label,
        }
    }
}

/// Lowercases and splits on whitespace and punctuation; separators are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || c.is_ascii_punctuation() || is_unicode_punct(c))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn is_unicode_punct(c: char) -> bool {
    matches!(
        c,
        '\u{2010}'..='\u{2027}' | '\u{00a1}' | '\u{00bf}' | '\u{00ab}' | '\u{00bb}'
    )
}

pub fn load_tsv(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path)?;
    parse_tsv(&text)
}

pub fn parse_tsv(text: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.split('\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let line_no = i + 1;
        let (label, body) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: line_no,
            message: "expected label<TAB>text".into(),
        })?;
        let label = match label {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("label {other:?} is not 0 or 1"),
                })
            }
        };
        if body.trim().is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty text".into(),
            });
        }
        out.push(Example::new(body, label));
    }
    Ok(out)
}

pub fn save_tsv(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    file.write_all(format_tsv(examples)?.as_bytes())?;
    file.flush()?;
    Ok(())
}

pub fn format_tsv(examples: &[Example]) -> Result<String> {
    let mut out = String::new();
    for (i, ex) in examples.iter().enumerate() {
        if ex.label > 1 {
            return Err(Error::Data(format!(
                "example {i}: label {} is not binary",
                ex.label
            )));
        }
        if ex.text.contains(['\t', '\n']) || ex.text.trim().is_empty() {
            return Err(Error::Data(format!(
                "example {i}: text must be non-empty and free of tabs/newlines"
            )));
        }
        out.push_str(if ex.label == 1 { "1\t" } else { "0\t" });
        out.push_str(&ex.text);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED {
            return Err(Error::Data(
                "vocabulary must start with [PAD], [UNK], [CLS]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Vocabulary holding only the reserved entries.
    pub fn reserved_only() -> Self {
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).collect())
            .expect("reserved tokens are valid")
    }

    pub fn with_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        Self::from_tokens(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// One token per line; the line number is the index.
    pub fn to_file_string(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file_string(&fs::read_to_string(path)?)
    }
}

/// Frequency-ranked vocabulary (ties broken lexicographically), capped at
/// `max_size` entries including the three reserved ones.
pub fn build_vocab(examples: &[Example], max_size: usize) -> Result<Vocabulary> {
    if max_size < 4 {
        return Err(Error::Config(format!(
            "vocabulary max_size {max_size} is below 4"
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for ex in examples {
        for tok in tokenize(&ex.text) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - RESERVED.len());
    Vocabulary::with_tokens(ranked.into_iter().map(|(t, _)| t))
}

/// `[CLS]` followed by token ids, truncated/right-padded to exactly `n`.
pub fn encode(vocab: &Vocabulary, text: &str, n: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    if n < 2 {
        return Err(Error::Config(format!("encode length {n} is below 2")));
    }
    let mut ids = Vec::with_capacity(n);
    ids.push(CLS_ID);
    ids.extend(
        tokenize(text)
            .iter()
            .take(n - 1)
            .map(|t| vocab.id(t).unwrap_or(UNK_ID)),
    );
    let real = ids.len();
    ids.resize(n, PAD_ID);
    let mask = (0..n).map(|i| i < real).collect();
    Ok((ids, mask))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedBatch {
    pub batch_size: usize,
    pub seq_len: usize,
    /// Row-major `[batch_size × seq_len]`.
    pub token_ids: Vec<usize>,
    pub pad_mask: Vec<bool>,
    pub labels: Vec<usize>,
}

impl EncodedBatch {
    pub fn encode(vocab: &Vocabulary, examples: &[&Example], n: usize) -> Result<Self> {
        let mut token_ids = Vec::with_capacity(examples.len() * n);
        let mut pad_mask = Vec::with_capacity(examples.len() * n);
        let mut labels = Vec::with_capacity(examples.len());
        for ex in examples {
            let (ids, mask) = encode(vocab, &ex.text, n)?;
            token_ids.extend(ids);
            pad_mask.extend(mask);
            labels.push(ex.label);
        }
        Ok(Self {
            batch_size: examples.len(),
            seq_len: n,
            token_ids,
            pad_mask,
            labels,
        })
    }

    pub fn ids_row(&self, b: usize) -> &[usize] {
        &self.token_ids[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn mask_row(&self, b: usize) -> &[bool] {
        &self.pad_mask[b * self.seq_len..(b + 1) * self.seq_len]
    }
}

/// Shuffled (seeded) mini-batches; the final partial batch is kept.
pub struct BatchIter<'a> {
    examples: &'a [Example],
    vocab: &'a Vocabulary,
    order: Vec<usize>,
    n: usize,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Result<EncodedBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let chunk: Vec<&Example> = self.order[self.cursor..end]
            .iter()
            .map(|&i| &self.examples[i])
            .collect();
        self.cursor = end;
        Some(EncodedBatch::encode(self.vocab, &chunk, self.n))
    }
}

pub fn batch_iter<'a>(
    examples: &'a [Example],
    vocab: &'a Vocabulary,
    n: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchIter {
        examples,
        vocab,
        order,
        n,
        batch_size,
        cursor: 0,
    })
}

pub const FILLER_WORDS: &[&str] = &[
    "the",
    "movie",
    "film",
    "plot",
    "actor",
    "actress",
    "scene",
    "story",
    "director",
    "camera",
    "music",
    "score",
    "script",
    "cast",
    "ending",
    "opening",
    "character",
    "dialogue",
    "screen",
    "studio",
    "sequel",
    "theater",
    "audience",
    "minute",
    "hour",
    "night",
    "city",
    "house",
    "road",
    "friend",
    "family",
    "war",
    "love",
    "dog",
    "car",
    "train",
    "summer",
    "winter",
    "was",
    "is",
    "and",
    "a",
    "of",
    "to",
    "in",
    "it",
    "with",
    "this",
    "that",
    "very",
    "quite",
    "rather",
    "some",
    "then",
    "after",
    "before",
    "while",
    "again",
    "also",
    "just",
];
pub const POSITIVE_WORDS: &[&str] = &[
    "great",
    "wonderful",
    "brilliant",
    "superb",
    "moving",
    "delightful",
    "excellent",
    "charming",
    "masterful",
    "gripping",
    "beautiful",
    "hilarious",
];
pub const NEGATIVE_WORDS: &[&str] = &[
    "awful",
    "boring",
    "terrible",
    "dull",
    "clumsy",
    "tedious",
    "dreadful",
    "bland",
    "weak",
    "messy",
    "painful",
    "forgettable",
];

const SYNTH_MIN_LEN: usize = 8;
const SYNTH_MAX_LEN: usize = 32;
// Separate stream for label flips so noisy and clean corpora share texts.
const FLIP_STREAM: u64 = 1;

/// Seeded synthetic sentiment corpus.
///
/// Each text is 8–32 words of filler; label-1 texts carry 2–4 words from
/// [`POSITIVE_WORDS`], label-0 texts 2–4 from [`NEGATIVE_WORDS`]. Exactly
/// `⌊noise·count⌋` labels are then flipped. Texts do not depend on `noise`,
/// so `synth_dataset(c, s, 0.0)` gives the clean labels of
/// `synth_dataset(c, s, noise)`.
pub fn synth_dataset(count: usize, seed: u64, noise: f64) -> Result<Vec<Example>> {
    if count < 2 {
        return Err(Error::Config(format!("synthetic count {count} is below 2")));
    }
    if !(0.0..0.5).contains(&noise) {
        return Err(Error::Config(format!("noise {noise} outside [0, 0.5)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..count).map(|i| usize::from(i < count / 2)).collect();
    labels.shuffle(&mut rng);

    let mut examples: Vec<Example> = labels
        .into_iter()
        .map(|label| {
            let len = rng.gen_range(SYNTH_MIN_LEN..=SYNTH_MAX_LEN);
            let mut words: Vec<&str> = (0..len)
                .map(|_| FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())])
                .collect();
            let lexicon = if label == 1 {
                POSITIVE_WORDS
            } else {
                NEGATIVE_WORDS
            };
            let cues = rng.gen_range(2..=4);
            for slot in rand::seq::index::sample(&mut rng, len, cues) {
                words[slot] = lexicon[rng.gen_range(0..lexicon.len())];
            }
            Example::new(words.join(" "), label)
        })
        .collect();

    let flips = (noise * count as f64).floor() as usize;
    if flips > 0 {
        let mut flip_rng = ChaCha8Rng::seed_from_u64(seed);
        flip_rng.set_stream(FLIP_STREAM);
        for i in rand::seq::index::sample(&mut flip_rng, count, flips) {
            examples[i].label = 1 - examples[i].label;
        }
    }
    Ok(examples)
}
