//! Byte-level tokenization, synthetic two-language corpora and batch streams.
//!
//! The two languages are order-2 Markov chains over a shared 256-symbol
//! alphabet. Symbols factor into classes x members: class sequences follow a
//! seeded order-2 class transition table (so each language has learnable
//! sequential structure), while the member choice within a class puts
//! `exclusive_mass` on language-exclusive member slots and the rest on the
//! shared slots. Disjoint exclusive slots keep the unigram TV distance of
//! the pair comfortably above the 0.3 distinguishability bar.

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const MIN_TV_DISTANCE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Language {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic,
    File,
}

/// A token stream with its language tag.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub ids: Vec<u16>,
    pub vocab_size: usize,
    pub language: Language,
    pub provenance: Provenance,
    pub seed: u64,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Unigram distribution over the vocabulary.
    pub fn unigram(&self) -> Vec<f64> {
        let mut counts = vec![0.0f64; self.vocab_size];
        for &id in &self.ids {
            counts[id as usize] += 1.0;
        }
        let n = self.ids.len() as f64;
        for c in counts.iter_mut() {
            *c /= n;
        }
        counts
    }
}

/// Total variation distance between two unigram distributions.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Generator spec for one synthetic language.
///
/// The order-2 token transition table is factored: context classes pick the
/// next class, the language's member weights pick the symbol within it.
/// `row()` materializes any table row; rows sum to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLangSpec {
    pub vocab_size: usize,
    pub num_classes: usize,
    pub members_per_class: usize,
    /// Distinct candidate next classes per (class, class) context.
    pub class_branching: usize,
    /// Member-slot range [lo, hi) reserved for this language.
    pub exclusive_members: (usize, usize),
    /// Member-slot range [lo, hi) shared between languages.
    pub shared_members: (usize, usize),
    /// Probability mass on the exclusive member range.
    pub exclusive_mass: f64,
    pub seed: u64,
}

impl SyntheticLangSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_branching < 2 {
            return Err(Error::DegenerateSpec(
                "class_branching < 2 risks an absorbing state".into(),
            ));
        }
        if self.num_classes < 2 || self.class_branching > self.num_classes {
            return Err(Error::DegenerateSpec(format!(
                "need 2 <= class_branching <= num_classes, got {} / {}",
                self.class_branching, self.num_classes
            )));
        }
        if self.num_classes * self.members_per_class > self.vocab_size {
            return Err(Error::DegenerateSpec(format!(
                "{} classes x {} members exceeds vocab {}",
                self.num_classes, self.members_per_class, self.vocab_size
            )));
        }
        let (elo, ehi) = self.exclusive_members;
        let (slo, shi) = self.shared_members;
        if elo >= ehi || ehi > self.members_per_class || slo >= shi || shi > self.members_per_class
        {
            return Err(Error::DegenerateSpec("empty or out-of-range member slots".into()));
        }
        if ehi.min(shi) > elo.max(slo) {
            return Err(Error::DegenerateSpec(
                "exclusive and shared member ranges overlap".into(),
            ));
        }
        if !(self.exclusive_mass > 0.0 && self.exclusive_mass < 1.0) {
            return Err(Error::DegenerateSpec("exclusive_mass must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Language-exclusive symbol ids of the vocabulary partition.
    pub fn exclusive_symbols(&self) -> Vec<u16> {
        let mut out = Vec::new();
        for c in 0..self.num_classes {
            for m in self.exclusive_members.0..self.exclusive_members.1 {
                out.push((c * self.members_per_class + m) as u16);
            }
        }
        out
    }

    /// Shared symbol ids of the vocabulary partition.
    pub fn shared_symbols(&self) -> Vec<u16> {
        let mut out = Vec::new();
        for c in 0..self.num_classes {
            for m in self.shared_members.0..self.shared_members.1 {
                out.push((c * self.members_per_class + m) as u16);
            }
        }
        out
    }

    fn class_of(&self, id: u16) -> usize {
        (id as usize / self.members_per_class).min(self.num_classes - 1)
    }

    /// Candidate next classes and their weights for a class context.
    fn class_transition(&self, ca: usize, cb: usize) -> ([usize; 16], [f64; 16], usize) {
        let n = self.class_branching.min(16);
        let mut classes = [0usize; 16];
        let mut weights = [0.0f64; 16];
        let mut state = splitmix(self.seed ^ 0x9e37_79b9_7f4a_7c15)
            ^ splitmix((ca as u64) << 32 | cb as u64);
        let mut picked = 0usize;
        while picked < n {
            state = splitmix(state);
            let c = (state % self.num_classes as u64) as usize;
            if classes[..picked].contains(&c) {
                continue;
            }
            classes[picked] = c;
            picked += 1;
        }
        // geometric-ish weights, normalized
        let mut total = 0.0;
        for (i, item) in weights.iter_mut().enumerate().take(n) {
            *item = 0.5f64.powi(i as i32);
            total += *item;
        }
        for item in weights.iter_mut().take(n) {
            *item /= total;
        }
        (classes, weights, n)
    }

    fn member_weight(&self, m: usize) -> f64 {
        let (elo, ehi) = self.exclusive_members;
        let (slo, shi) = self.shared_members;
        if m >= elo && m < ehi {
            self.exclusive_mass / (ehi - elo) as f64
        } else if m >= slo && m < shi {
            (1.0 - self.exclusive_mass) / (shi - slo) as f64
        } else {
            0.0
        }
    }

    /// Materialize one row of the order-2 token transition table.
    pub fn row(&self, a: u16, b: u16) -> Vec<f64> {
        let (classes, weights, n) = self.class_transition(self.class_of(a), self.class_of(b));
        let mut row = vec![0.0f64; self.vocab_size];
        for i in 0..n {
            let c = classes[i];
            for m in 0..self.members_per_class {
                row[c * self.members_per_class + m] = weights[i] * self.member_weight(m);
            }
        }
        row
    }

    fn sample_next(&self, a: u16, b: u16, rng: &mut ChaCha8Rng) -> u16 {
        let (classes, weights, n) = self.class_transition(self.class_of(a), self.class_of(b));
        let mut u: f64 = rng.random();
        let mut class = classes[n - 1];
        for i in 0..n {
            if u < weights[i] {
                class = classes[i];
                break;
            }
            u -= weights[i];
        }
        let (elo, ehi) = self.exclusive_members;
        let (slo, shi) = self.shared_members;
        let m = if rng.random::<f64>() < self.exclusive_mass {
            rng.random_range(elo..ehi)
        } else {
            rng.random_range(slo..shi)
        };
        (class * self.members_per_class + m) as u16
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Walk the chain and emit a corpus; pure function of (spec, sample_seed).
pub fn sample_corpus(
    spec: &SyntheticLangSpec,
    n_tokens: usize,
    sample_seed: u64,
    language: Language,
) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut a = (spec.exclusive_members.0) as u16;
    let mut b = (spec.shared_members.0) as u16;
    for _ in 0..32 {
        let next = spec.sample_next(a, b, &mut rng);
        a = b;
        b = next;
    }
    let mut ids = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let next = spec.sample_next(a, b, &mut rng);
        ids.push(next);
        a = b;
        b = next;
    }
    Ok(Corpus {
        ids,
        vocab_size: spec.vocab_size,
        language,
        provenance: Provenance::Synthetic,
        seed: sample_seed,
    })
}

/// Generate the source/target pair and verify they are distinguishable:
/// measured unigram TV distance must be at least 0.3.
pub fn gen_synthetic_bilingual(
    spec_source: &SyntheticLangSpec,
    spec_target: &SyntheticLangSpec,
    n_tokens: usize,
) -> Result<(Corpus, Corpus)> {
    if spec_source.vocab_size != spec_target.vocab_size {
        return Err(Error::InvalidConfig(
            "source and target specs must share vocab_size".into(),
        ));
    }
    if n_tokens < 10_000 {
        return Err(Error::InvalidConfig(format!(
            "n_tokens {n_tokens} too small to measure distinguishability (need >= 10000)"
        )));
    }
    let source = sample_corpus(spec_source, n_tokens, spec_source.seed, Language::Source)?;
    let target = sample_corpus(spec_target, n_tokens, spec_target.seed, Language::Target)?;
    let tv = tv_distance(&source.unigram(), &target.unigram());
    if tv < MIN_TV_DISTANCE {
        return Err(Error::Indistinguishable {
            tv,
            min: MIN_TV_DISTANCE,
        });
    }
    Ok((source, target))
}

/// Fixed-length windows drawn from the source corpus for importance scoring.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub windows: Vec<Vec<u16>>,
    pub n_samples: usize,
    pub seq_len: usize,
    pub seed: u64,
}

/// Sample `n` windows with distinct start offsets; reproducible from
/// (corpus, seed). Calibration windows come from the source corpus only.
pub fn sample_calibration(
    corpus: &Corpus,
    n: usize,
    seq_len: usize,
    seed: u64,
) -> Result<CalibrationSet> {
    if n == 0 || seq_len == 0 {
        return Err(Error::InvalidConfig("calibration needs n >= 1, seq_len >= 1".into()));
    }
    if corpus.len() < seq_len {
        return Err(Error::CorpusTooSmall(format!(
            "corpus has {} tokens, calibration window needs {seq_len}",
            corpus.len()
        )));
    }
    let starts_avail = corpus.len() - seq_len + 1;
    if n > starts_avail {
        return Err(Error::CorpusTooSmall(format!(
            "cannot draw {n} distinct windows of {seq_len} from {} tokens",
            corpus.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offsets: Vec<usize> = rand::seq::index::sample(&mut rng, starts_avail, n).into_vec();
    offsets.sort_unstable();
    let windows = offsets
        .iter()
        .map(|&o| corpus.ids[o..o + seq_len].to_vec())
        .collect();
    Ok(CalibrationSet {
        windows,
        n_samples: n,
        seq_len,
        seed,
    })
}

/// Endless stream of shuffled non-overlapping [batch x seq_len] windows.
///
/// Each epoch visits every complete window once in a seeded order, then the
/// stream wraps into the next epoch with a fresh shuffle.
pub struct BatchStream<'c> {
    corpus: &'c Corpus,
    batch: usize,
    seq_len: usize,
    seed: u64,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl<'c> BatchStream<'c> {
    pub fn new(corpus: &'c Corpus, batch: usize, seq_len: usize, seed: u64) -> Result<Self> {
        let n_windows = corpus.len() / seq_len;
        if batch == 0 || seq_len == 0 {
            return Err(Error::InvalidConfig("batch and seq_len must be >= 1".into()));
        }
        if n_windows < batch {
            return Err(Error::CorpusTooSmall(format!(
                "corpus of {} tokens yields {n_windows} windows of {seq_len}, batch needs {batch}",
                corpus.len()
            )));
        }
        let mut stream = BatchStream {
            corpus,
            batch,
            seq_len,
            seed,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        };
        stream.reshuffle();
        Ok(stream)
    }

    pub fn windows_per_epoch(&self) -> usize {
        self.corpus.len() / self.seq_len
    }

    fn reshuffle(&mut self) {
        let n = self.windows_per_epoch();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ splitmix(self.epoch));
        self.order = rand::seq::index::sample(&mut rng, n, n).into_vec();
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> TokenBatch {
        let mut tokens = Vec::with_capacity(self.batch * self.seq_len);
        for _ in 0..self.batch {
            if self.cursor >= self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            let w = self.order[self.cursor];
            self.cursor += 1;
            let start = w * self.seq_len;
            tokens.extend_from_slice(&self.corpus.ids[start..start + self.seq_len]);
        }
        TokenBatch::new(tokens, self.batch, self.seq_len).expect("sizes agree")
    }
}

/// Byte-level ingestion: ids 0-255 are raw bytes; ids >= 256 stay reserved.
pub fn load_text_corpus(path: &Path, vocab_size: usize, language: Language) -> Result<Corpus> {
    if vocab_size < 256 {
        return Err(Error::InvalidConfig(format!(
            "byte-level corpus needs vocab_size >= 256, got {vocab_size}"
        )));
    }
    let bytes = fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::CorpusTooSmall(format!("{} is empty", path.display())));
    }
    Ok(Corpus {
        ids: bytes.iter().map(|&b| b as u16).collect(),
        vocab_size,
        language,
        provenance: Provenance::File,
        seed: 0,
    })
}

/// Inverse of byte-level tokenization (ids above 255 are rejected).
pub fn detokenize_bytes(corpus: &Corpus) -> Result<Vec<u8>> {
    corpus
        .ids
        .iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::Format(format!("id {id} is not a byte")))
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusSidecar {
    vocab_size: usize,
    language: Language,
    seed: u64,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".meta.json");
    std::path::PathBuf::from(os)
}

/// Cache a corpus: raw little-endian 16-bit ids plus a one-line JSON sidecar.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = Vec::with_capacity(corpus.ids.len() * 2);
    for &id in &corpus.ids {
        bytes.extend_from_slice(&id.to_le_bytes());
    }
    fs::write(path, bytes)?;
    let sidecar = CorpusSidecar {
        vocab_size: corpus.vocab_size,
        language: corpus.language,
        seed: corpus.seed,
    };
    let json =
        serde_json::to_string(&sidecar).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(sidecar_path(path), format!("{json}\n"))?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let bytes = fs::read(path)?;
    if bytes.len() % 2 != 0 {
        return Err(Error::Format(format!(
            "{}: odd byte count for 16-bit ids",
            path.display()
        )));
    }
    let sidecar: CorpusSidecar = serde_json::from_str(
        fs::read_to_string(sidecar_path(path))?.trim(),
    )
    .map_err(|e| Error::Format(format!("{}: bad sidecar: {e}", path.display())))?;
    let ids: Vec<u16> = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    for &id in &ids {
        if id as usize >= sidecar.vocab_size {
            return Err(Error::Format(format!(
                "{}: id {id} exceeds vocab {}",
                path.display(),
                sidecar.vocab_size
            )));
        }
    }
    Ok(Corpus {
        ids,
        vocab_size: sidecar.vocab_size,
        language: sidecar.language,
        provenance: Provenance::File,
        seed: sidecar.seed,
    })
}

/// Desk-scale default language pair: disjoint exclusive member slots, shared
/// middle slots, language-specific class transition seeds.
pub fn default_lang_pair(
    vocab_size: usize,
    num_classes: usize,
    members_per_class: usize,
    exclusive_members: usize,
    exclusive_mass: f64,
    class_branching: usize,
    source_seed: u64,
    target_seed: u64,
) -> (SyntheticLangSpec, SyntheticLangSpec) {
    let m = members_per_class;
    let e = exclusive_members.min(m / 2);
    let source = SyntheticLangSpec {
        vocab_size,
        num_classes,
        members_per_class: m,
        class_branching,
        exclusive_members: (0, e),
        shared_members: (e, m - e),
        exclusive_mass,
        seed: source_seed,
    };
    let target = SyntheticLangSpec {
        exclusive_members: (m - e, m),
        seed: target_seed,
        ..source.clone()
    };
    (source, target)
}
