//! Byte-level corpus handling and a seeded English-like text generator.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};

/// Identity map from bytes to ids `0..=255`.
pub fn tokenize(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| u8::try_from(id).map_err(|_| Error::Index(format!("id {id} is not a byte"))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub fractions: [f64; 3],
    pub source: String,
    /// SHA-256 of the source bytes.
    pub content_hash: String,
    /// Start of the train range in the source; splits follow it
    /// contiguously, wrapping at the end of the file.
    pub rotation: usize,
}

impl CorpusSplit {
    pub fn from_bytes(bytes: &[u8], source: impl Into<String>, fractions: [f64; 3], seed: u64) -> Result<Self> {
        ensure!(!bytes.is_empty(), Contract, "corpus is empty");
        ensure!(
            fractions.iter().all(|&f| f >= 0.0) && (fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9,
            Contract,
            "split fractions {fractions:?} must be nonnegative and sum to 1"
        );
        let n = bytes.len();
        let rotation = (ChaCha8Rng::seed_from_u64(seed).random::<u64>() % n as u64) as usize;
        let rotated: Vec<usize> = bytes[rotation..].iter().chain(&bytes[..rotation]).map(|&b| b as usize).collect();
        let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
        let n_valid = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
        Ok(CorpusSplit {
            train: rotated[..n_train].to_vec(),
            valid: rotated[n_train..n_train + n_valid].to_vec(),
            test: rotated[n_train + n_valid..].to_vec(),
            fractions,
            source: source.into(),
            content_hash: hex::encode(Sha256::digest(bytes)),
            rotation,
        })
    }
}

pub fn load_corpus(path: &Path, fractions: [f64; 3], seed: u64) -> Result<CorpusSplit> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    CorpusSplit::from_bytes(&bytes, path.display().to_string(), fractions, seed)
}

const NAMES: &[&str] = &[
    "Anna", "Tom", "Maria", "John", "Clara", "Peter", "Lucy", "Henry", "Alice", "Oscar", "Rose", "Victor",
];
const DETS: &[&str] = &["the", "a", "this", "that", "every", "one", "her", "his", "our", "some"];
const ADJS: &[&str] = &[
    "old", "small", "quiet", "red", "bright", "heavy", "young", "cold", "green", "strange", "warm", "dark", "long",
    "empty", "happy", "wooden", "little", "broken", "golden", "narrow",
];
const NOUNS: &[&str] = &[
    "house", "river", "garden", "window", "letter", "road", "village", "horse", "table", "door", "king", "child",
    "market", "forest", "ship", "bridge", "teacher", "city", "mountain", "book", "lamp", "field", "dog", "bird",
    "morning", "station", "kitchen", "song", "stone", "tower", "farmer", "boat", "winter", "church", "train",
];
const VERBS: &[&str] = &[
    "saw", "found", "opened", "carried", "painted", "watched", "followed", "remembered", "built", "crossed",
    "visited", "closed", "lost", "wanted", "heard", "cleaned", "sold", "loved", "left", "brought",
];
const INTRANS: &[&str] = &["slept", "waited", "laughed", "smiled", "walked", "listened", "returned", "worked"];
const ADVS: &[&str] = &["slowly", "quietly", "never", "often", "again", "suddenly", "carefully", "always"];
const PREPS: &[&str] = &["near", "behind", "across", "under", "beside", "through", "over", "inside", "along"];
const TIMES: &[&str] = &[
    "In the morning", "At night", "Later", "Every day", "After the storm", "Before dinner", "Once", "In winter",
];

/// Picks from a word list with Zipf-like weights `1/(rank+1)`.
struct Lexicon<'a> {
    words: &'a [&'a str],
    dist: WeightedIndex<f64>,
}

impl<'a> Lexicon<'a> {
    fn new(words: &'a [&'a str]) -> Self {
        let weights: Vec<f64> = (0..words.len()).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        Lexicon {
            words,
            dist: WeightedIndex::new(weights).expect("nonempty word list"),
        }
    }

    fn pick<R: Rng>(&self, rng: &mut R) -> &'a str {
        self.words[self.dist.sample(rng)]
    }
}

struct Grammar<'a> {
    names: Lexicon<'a>,
    dets: Lexicon<'a>,
    adjs: Lexicon<'a>,
    nouns: Lexicon<'a>,
    verbs: Lexicon<'a>,
    intrans: Lexicon<'a>,
    advs: Lexicon<'a>,
    preps: Lexicon<'a>,
    times: Lexicon<'a>,
}

impl Grammar<'_> {
    fn noun_phrase<R: Rng>(&self, rng: &mut R, out: &mut String) {
        if rng.random_bool(0.2) {
            out.push_str(self.names.pick(rng));
            return;
        }
        out.push_str(self.dets.pick(rng));
        out.push(' ');
        if rng.random_bool(0.4) {
            out.push_str(self.adjs.pick(rng));
            out.push(' ');
        }
        out.push_str(self.nouns.pick(rng));
    }

    fn clause<R: Rng>(&self, rng: &mut R, out: &mut String) {
        self.noun_phrase(rng, out);
        out.push(' ');
        if rng.random_bool(0.15) {
            out.push_str(self.advs.pick(rng));
            out.push(' ');
        }
        if rng.random_bool(0.25) {
            out.push_str(self.intrans.pick(rng));
        } else {
            out.push_str(self.verbs.pick(rng));
            out.push(' ');
            self.noun_phrase(rng, out);
        }
        if rng.random_bool(0.35) {
            out.push(' ');
            out.push_str(self.preps.pick(rng));
            out.push(' ');
            self.noun_phrase(rng, out);
        }
    }

    fn sentence<R: Rng>(&self, rng: &mut R, out: &mut String) {
        let start = out.len();
        if rng.random_bool(0.15) {
            out.push_str(self.times.pick(rng));
            out.push_str(", ");
        }
        self.clause(rng, out);
        if rng.random_bool(0.2) {
            out.push_str(if rng.random_bool(0.5) { ", and " } else { ", but " });
            self.clause(rng, out);
        }
        out.push(if rng.random_bool(0.1) { '!' } else { '.' });
        if let Some(c) = out[start..].chars().next() {
            let upper = c.to_ascii_uppercase().to_string();
            out.replace_range(start..start + c.len_utf8(), &upper);
        }
    }
}

/// Deterministic English-like text of exactly `len` bytes (ASCII).
pub fn synthetic_text(len: usize, seed: u64) -> String {
    let g = Grammar {
        names: Lexicon::new(NAMES),
        dets: Lexicon::new(DETS),
        adjs: Lexicon::new(ADJS),
        nouns: Lexicon::new(NOUNS),
        verbs: Lexicon::new(VERBS),
        intrans: Lexicon::new(INTRANS),
        advs: Lexicon::new(ADVS),
        preps: Lexicon::new(PREPS),
        times: Lexicon::new(TIMES),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(len + 256);
    let mut in_paragraph = 0;
    while out.len() < len {
        g.sentence(&mut rng, &mut out);
        in_paragraph += 1;
        if in_paragraph >= 3 && rng.random_bool(0.25) {
            out.push_str("\n\n");
            in_paragraph = 0;
        } else {
            out.push(' ');
        }
    }
    out.truncate(len);
    out
}
