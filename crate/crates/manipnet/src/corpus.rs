//! Corpus loading, tokenization, batching, synthetic corpora with controlled
//! noise, and the query-relatedness score.
//!
//! Corpus files are UTF-8 text, one `query<TAB>response` pair per line with
//! whitespace-delimited tokens. Synthetic corpora come with a hidden
//! clean/noisy sidecar used only for reporting and acceptance checks.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{cosine, sif_embed, Embeddings, UnigramModel};
use crate::rng::stream_rng;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SPECIALS: [(&str, u32); 4] = [("<pad>", PAD), ("<unk>", UNK), ("<bos>", BOS), ("<eos>", EOS)];

/// Default cap on stored sequence length; longer sequences are truncated.
pub const DEFAULT_MAX_LEN: usize = 32;

// ---------------------------------------------------------------------------
// vocabulary and tokenization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Vocabulary over the given content tokens, specials at ids 0..3.
    pub fn build<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|(s, _)| s.to_string()).collect();
        let mut token_to_id: HashMap<String, u32> =
            SPECIALS.iter().map(|(s, id)| (s.to_string(), *id)).collect();
        for tok in tokens {
            if !token_to_id.contains_key(&tok) {
                token_to_id.insert(tok.clone(), id_to_token.len() as u32);
                id_to_token.push(tok);
            }
        }
        Vocabulary { token_to_id, id_to_token }
    }

    pub fn from_sentences<'a, I: IntoIterator<Item = &'a [String]>>(sentences: I) -> Self {
        let mut ordered = Vec::new();
        let mut seen = HashSet::new();
        for s in sentences {
            for tok in s {
                if seen.insert(tok.clone()) {
                    ordered.push(tok.clone());
                }
            }
        }
        Self::build(ordered)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id for a token; UNK for anything unseen.
    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < SPECIALS.len() as u32
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Content tokens in id order (excludes the specials).
    pub fn content_tokens(&self) -> &[String] {
        &self.id_to_token[SPECIALS.len()..]
    }

    pub fn all_tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

/// Lowercase whitespace tokenization.
pub fn tokenize(s: &str) -> Vec<String> {
    s.to_lowercase().split_whitespace().map(str::to_string).collect()
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

// ---------------------------------------------------------------------------
// pairs, batches, corpus
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Original,
    WordAug,
    SentAug,
}

impl Origin {
    pub fn as_str(&self) -> &'static str {
        match self {
            Origin::Original => "original",
            Origin::WordAug => "word_aug",
            Origin::SentAug => "sent_aug",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialoguePair {
    pub id: usize,
    pub query: Vec<u32>,
    pub response: Vec<u32>,
    pub origin: Origin,
    pub parent_id: Option<usize>,
}

impl DialoguePair {
    pub fn original(id: usize, query: Vec<u32>, response: Vec<u32>) -> Self {
        assert!(!query.is_empty() && !response.is_empty(), "pair sides must be non-empty");
        DialoguePair { id, query, response, origin: Origin::Original, parent_id: None }
    }

    pub fn derived(id: usize, parent: &DialoguePair, origin: Origin, query: Vec<u32>, response: Vec<u32>) -> Self {
        assert!(origin != Origin::Original);
        DialoguePair { id, query, response, origin, parent_id: Some(parent.id) }
    }
}

/// Padded id grids plus 0/1 masks; grid width is the longest sequence in the
/// batch unless a wider width is forced.
#[derive(Debug, Clone)]
pub struct Batch {
    pub pairs: Vec<DialoguePair>,
    pub query_matrix: Vec<Vec<u32>>,
    pub response_matrix: Vec<Vec<u32>>,
    pub query_mask: Vec<Vec<f64>>,
    pub response_mask: Vec<Vec<f64>>,
}

impl Batch {
    pub fn new(pairs: Vec<DialoguePair>) -> Self {
        Self::with_min_width(pairs, 0, 0)
    }

    pub fn with_min_width(pairs: Vec<DialoguePair>, min_q: usize, min_r: usize) -> Self {
        let qw = pairs.iter().map(|p| p.query.len()).max().unwrap_or(0).max(min_q);
        let rw = pairs.iter().map(|p| p.response.len()).max().unwrap_or(0).max(min_r);
        let pad_to = |seq: &[u32], w: usize| -> (Vec<u32>, Vec<f64>) {
            let mut ids = vec![PAD; w];
            let mut mask = vec![0.0; w];
            for (i, &t) in seq.iter().enumerate() {
                ids[i] = t;
                mask[i] = 1.0;
            }
            (ids, mask)
        };
        let mut query_matrix = Vec::with_capacity(pairs.len());
        let mut response_matrix = Vec::with_capacity(pairs.len());
        let mut query_mask = Vec::with_capacity(pairs.len());
        let mut response_mask = Vec::with_capacity(pairs.len());
        for p in &pairs {
            let (qi, qm) = pad_to(&p.query, qw);
            let (ri, rm) = pad_to(&p.response, rw);
            query_matrix.push(qi);
            query_mask.push(qm);
            response_matrix.push(ri);
            response_mask.push(rm);
        }
        Batch { pairs, query_matrix, response_matrix, query_mask, response_mask }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn query_width(&self) -> usize {
        self.query_matrix.first().map_or(0, |r| r.len())
    }

    pub fn response_width(&self) -> usize {
        self.response_matrix.first().map_or(0, |r| r.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLabel {
    Clean,
    Noisy,
}

#[derive(Debug, Clone, Default)]
pub struct Split {
    pub pairs: Vec<DialoguePair>,
    /// Hidden sidecar: clean/noisy per pair id. Reporting only; the
    /// manipulation network never sees it.
    pub labels: Option<Vec<NoiseLabel>>,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub train: Split,
    pub valid: Split,
    pub test: Split,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Option<&Split> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// loading
// ---------------------------------------------------------------------------

fn parse_pair_line(line: &str, lineno: usize) -> Result<(Vec<String>, Vec<String>)> {
    let mut sides = line.splitn(2, '\t');
    let q = sides.next().unwrap_or("");
    let r = sides.next().ok_or(Error::MalformedLine {
        line: lineno,
        reason: "no TAB separator".into(),
    })?;
    let q = tokenize(q);
    let r = tokenize(r);
    if q.is_empty() || r.is_empty() {
        return Err(Error::MalformedLine { line: lineno, reason: "empty side".into() });
    }
    Ok((q, r))
}

/// Load one split file: dedup exact (query, response) repeats, ids follow
/// post-dedup line order. Sequences are truncated to `max_len`.
pub fn load_split_file(path: &Path, vocab: &Vocabulary, max_len: usize) -> Result<Split> {
    let raw = load_token_pairs(path)?;
    let mut pairs = Vec::with_capacity(raw.len());
    for (q, r) in raw {
        let mut qi = vocab.encode(&q);
        let mut ri = vocab.encode(&r);
        qi.truncate(max_len);
        ri.truncate(max_len);
        pairs.push(DialoguePair::original(pairs.len(), qi, ri));
    }
    Ok(Split { pairs, labels: None })
}

/// Tokenized (query, response) pairs of a corpus file, after dedup.
pub fn load_token_pairs(path: &Path) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let text = fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Err(Error::Corpus(format!("{}: empty corpus file", path.display())));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (q, r) = parse_pair_line(line, i + 1)?;
        if seen.insert((q.clone(), r.clone())) {
            out.push((q, r));
        }
    }
    Ok(out)
}

/// Load train/valid/test splits from a directory. The vocabulary is built
/// from the training split unless one is supplied.
pub fn load_corpus(dir: &Path, vocab: Option<Vocabulary>, max_len: usize) -> Result<(Corpus, Vocabulary)> {
    let train_path = dir.join("train.tsv");
    let train_raw = load_token_pairs(&train_path)?;
    let vocab = vocab.unwrap_or_else(|| {
        let mut ordered = Vec::new();
        let mut seen = HashSet::new();
        for (q, r) in &train_raw {
            for tok in q.iter().chain(r) {
                if seen.insert(tok.clone()) {
                    ordered.push(tok.clone());
                }
            }
        }
        Vocabulary::build(ordered)
    });

    let mut corpus = Corpus::default();
    corpus.train = split_from_tokens(&train_raw, &vocab, max_len);
    for (name, slot) in [("valid", &mut corpus.valid), ("test", &mut corpus.test)] {
        let p = dir.join(format!("{}.tsv", name));
        if p.exists() {
            *slot = load_split_file(&p, &vocab, max_len)?;
        }
    }
    for (name, split) in [("train", &mut corpus.train), ("valid", &mut corpus.valid), ("test", &mut corpus.test)] {
        let sidecar = dir.join(format!("{}.labels.tsv", name));
        if sidecar.exists() {
            split.labels = Some(load_labels(&sidecar, split.pairs.len())?);
        }
    }
    Ok((corpus, vocab))
}

fn split_from_tokens(raw: &[(Vec<String>, Vec<String>)], vocab: &Vocabulary, max_len: usize) -> Split {
    let mut pairs = Vec::with_capacity(raw.len());
    for (q, r) in raw {
        let mut qi = vocab.encode(q);
        let mut ri = vocab.encode(r);
        qi.truncate(max_len);
        ri.truncate(max_len);
        pairs.push(DialoguePair::original(pairs.len(), qi, ri));
    }
    Split { pairs, labels: None }
}

fn load_labels(path: &Path, expect: usize) -> Result<Vec<NoiseLabel>> {
    let text = fs::read_to_string(path)?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        match line.trim() {
            "clean" => labels.push(NoiseLabel::Clean),
            "noisy" => labels.push(NoiseLabel::Noisy),
            other => {
                return Err(Error::Corpus(format!(
                    "{}: line {}: unknown label {:?}",
                    path.display(),
                    i + 1,
                    other
                )))
            }
        }
    }
    if labels.len() != expect {
        return Err(Error::Corpus(format!(
            "{}: {} labels for {} pairs",
            path.display(),
            labels.len(),
            expect
        )));
    }
    Ok(labels)
}

/// Write a split back to the corpus file format.
pub fn write_split(path: &Path, split: &Split, vocab: &Vocabulary) -> Result<()> {
    let mut out = String::new();
    for p in &split.pairs {
        out.push_str(&detokenize(&vocab.decode(&p.query)));
        out.push('\t');
        out.push_str(&detokenize(&vocab.decode(&p.response)));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// synthetic corpora
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanRule {
    Reverse,
    Copy,
    Shift,
}

impl CleanRule {
    pub fn apply(&self, query: &[u32], content_vocab: usize) -> Vec<u32> {
        let base = SPECIALS.len() as u32;
        match self {
            CleanRule::Reverse => query.iter().rev().copied().collect(),
            CleanRule::Copy => query.to_vec(),
            CleanRule::Shift => query
                .iter()
                .map(|&t| base + ((t - base + 1) % content_vocab as u32))
                .collect(),
        }
    }

    pub fn matches(&self, pair: &DialoguePair, content_vocab: usize) -> bool {
        pair.response == self.apply(&pair.query, content_vocab)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CleanRule::Reverse => "reverse",
            CleanRule::Copy => "copy",
            CleanRule::Shift => "shift",
        }
    }
}

impl std::str::FromStr for CleanRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reverse" => Ok(CleanRule::Reverse),
            "copy" => Ok(CleanRule::Copy),
            "shift" => Ok(CleanRule::Shift),
            other => Err(Error::Config(format!("unknown clean rule {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_pairs: usize,
    /// Total vocabulary size including the four specials.
    pub vocab_size: usize,
    pub clean_rule: CleanRule,
    pub noise_rate: f64,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_pairs: 1000,
            vocab_size: 50,
            clean_rule: CleanRule::Reverse,
            noise_rate: 0.3,
            seed: 7,
            min_len: 4,
            max_len: 8,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 {
            return Err(Error::Config("vocab_size must be at least 8 (specials + rule headroom)".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!("noise_rate {} outside [0, 1]", self.noise_rate)));
        }
        if self.n_pairs == 0 {
            return Err(Error::Config("n_pairs must be positive".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("need 0 < min_len <= max_len".into()));
        }
        Ok(())
    }

    pub fn content_vocab(&self) -> usize {
        self.vocab_size - SPECIALS.len()
    }
}

/// Synthetic vocabulary: tokens `w0..w{K-1}` after the specials.
pub fn synthetic_vocabulary(spec: &CorpusSpec) -> Vocabulary {
    Vocabulary::build((0..spec.content_vocab()).map(|i| format!("w{}", i)))
}

/// Deterministic labeled corpus: clean pairs follow the rule, a noise_rate
/// fraction get uniformly random responses of the same length. Queries are
/// unique so file round-trips preserve ids.
pub fn make_synthetic_corpus(spec: &CorpusSpec) -> Result<(Split, Vocabulary)> {
    spec.validate()?;
    let vocab = synthetic_vocabulary(spec);
    let content = spec.content_vocab() as u32;
    let base = SPECIALS.len() as u32;
    let mut rng = stream_rng(spec.seed, "corpus", 0);

    let mut queries: Vec<Vec<u32>> = Vec::with_capacity(spec.n_pairs);
    let mut seen = HashSet::new();
    while queries.len() < spec.n_pairs {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let q: Vec<u32> = (0..len).map(|_| base + rng.gen_range(0..content)).collect();
        if seen.insert(q.clone()) {
            queries.push(q);
        }
    }

    let n_noisy = (spec.noise_rate * spec.n_pairs as f64).round() as usize;
    let mut idx: Vec<usize> = (0..spec.n_pairs).collect();
    idx.shuffle(&mut rng);
    let noisy: HashSet<usize> = idx.into_iter().take(n_noisy).collect();

    let mut pairs = Vec::with_capacity(spec.n_pairs);
    let mut labels = Vec::with_capacity(spec.n_pairs);
    for (i, q) in queries.into_iter().enumerate() {
        let response = if noisy.contains(&i) {
            let clean = spec.clean_rule.apply(&q, content as usize);
            // Redraw until the random response differs from the rule output,
            // so labels stay exact.
            loop {
                let r: Vec<u32> = (0..q.len()).map(|_| base + rng.gen_range(0..content)).collect();
                if r != clean {
                    break r;
                }
            }
        } else {
            spec.clean_rule.apply(&q, content as usize)
        };
        labels.push(if noisy.contains(&i) { NoiseLabel::Noisy } else { NoiseLabel::Clean });
        pairs.push(DialoguePair::original(i, q, response));
    }
    Ok((Split { pairs, labels: Some(labels) }, vocab))
}

/// 8/1/1 partition of a synthetic split, preserving order inside each part.
pub fn split_8_1_1(split: Split) -> (Split, Split, Split) {
    let n = split.pairs.len();
    let n_valid = n / 10;
    let n_test = n / 10;
    let n_train = n - n_valid - n_test;
    let labels = split.labels.unwrap_or_default();
    let lab = |range: std::ops::Range<usize>| -> Option<Vec<NoiseLabel>> {
        if labels.is_empty() {
            None
        } else {
            Some(labels[range].to_vec())
        }
    };
    let reid = |pairs: &[DialoguePair]| -> Vec<DialoguePair> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, p)| DialoguePair::original(i, p.query.clone(), p.response.clone()))
            .collect()
    };
    let train = Split { pairs: reid(&split.pairs[..n_train]), labels: lab(0..n_train) };
    let valid = Split {
        pairs: reid(&split.pairs[n_train..n_train + n_valid]),
        labels: lab(n_train..n_train + n_valid),
    };
    let test = Split { pairs: reid(&split.pairs[n_train + n_valid..]), labels: lab(n_train + n_valid..n) };
    (train, valid, test)
}

/// Seeded random unit-ish word vectors for a synthetic vocabulary, written in
/// the same GloVe text format real embeddings use. Includes an `<unk>` row.
pub fn synthetic_embeddings(vocab: &Vocabulary, dim: usize, seed: u64) -> Embeddings {
    let mut rng = stream_rng(seed, "embeddings", 0);
    let mut emb = Embeddings::new(dim);
    for tok in vocab.content_tokens() {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        for x in &mut v {
            *x /= norm;
        }
        emb.insert(tok, v);
    }
    emb.insert("<unk>", vec![0.0; dim]);
    emb
}

pub fn write_embeddings(path: &Path, emb: &Embeddings, vocab: &Vocabulary) -> Result<()> {
    let mut out = String::new();
    let mut tokens: Vec<&String> = vocab.content_tokens().iter().collect();
    tokens.push(&vocab.all_tokens()[UNK as usize]);
    for tok in tokens {
        let key = if tok.as_str() == "<unk>" { "<unk>" } else { tok.as_str() };
        if let Some(v) = emb.get(key) {
            out.push_str(key);
            for x in v {
                out.push_str(&format!(" {}", x));
            }
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// query relatedness
// ---------------------------------------------------------------------------

/// Cosine similarity of the SIF sentence embeddings of query and response,
/// clamped into [0, 1].
pub fn query_relatedness(
    pair: &DialoguePair,
    vocab: &Vocabulary,
    embeddings: &Embeddings,
    unigram: &UnigramModel,
) -> f64 {
    let q = vocab.decode(&pair.query);
    let r = vocab.decode(&pair.response);
    let qe = sif_embed(&q, embeddings, unigram);
    let re = sif_embed(&r, embeddings, unigram);
    if qe.iter().all(|&x| x == 0.0) || re.iter().all(|&x| x == 0.0) {
        log::warn!("query_relatedness: all-unknown sentence in pair {}", pair.id);
        return 0.0;
    }
    cosine(&qe, &re).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

/// Seeded epoch iterator: each epoch reshuffles deterministically from
/// (seed, epoch); the last short batch is emitted.
pub struct BatchIterator<'a> {
    split: &'a Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(split: &'a Split, batch_size: usize, seed: u64) -> Self {
        assert!(batch_size >= 1, "batch_size must be at least 1");
        let mut it = BatchIterator { split, batch_size, seed, epoch: 0, order: Vec::new(), cursor: 0 };
        it.reshuffle();
        it
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.split.pairs.len()).collect();
        let mut rng = stream_rng(self.seed, "batching", self.epoch);
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl<'a> Iterator for BatchIterator<'a> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.split.pairs.is_empty() {
            return None;
        }
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let pairs: Vec<DialoguePair> =
            self.order[self.cursor..end].iter().map(|&i| self.split.pairs[i].clone()).collect();
        self.cursor = end;
        Some(Batch::new(pairs))
    }
}

/// Batches of one epoch, for bounded iteration in tests and evaluation.
pub fn epoch_batches(split: &Split, batch_size: usize, seed: u64, epoch: u64) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..split.pairs.len()).collect();
    let mut rng = stream_rng(seed, "batching", epoch);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| Batch::new(chunk.iter().map(|&i| split.pairs[i].clone()).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn vocabulary_specials_are_fixed() {
        let v = Vocabulary::build(vec!["hello".into(), "hi".into()]);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<unk>"), UNK);
        assert_eq!(v.id("<bos>"), BOS);
        assert_eq!(v.id("<eos>"), EOS);
        assert_eq!(v.id("hello"), 4);
        assert_eq!(v.id("never-seen"), UNK);
        assert_eq!(v.token(5), "hi");
    }

    #[test]
    fn vocabulary_bijective_over_content() {
        let v = Vocabulary::build((0..20).map(|i| format!("t{}", i)));
        for id in SPECIALS.len() as u32..v.len() as u32 {
            assert_eq!(v.id(v.token(id)), id);
        }
    }

    #[test]
    fn load_single_line() {
        let f = write_tmp("hello\thi\n");
        let pairs = load_token_pairs(f.path()).unwrap();
        assert_eq!(pairs.len(), 1);
        let v = Vocabulary::from_sentences(pairs.iter().flat_map(|(q, r)| [q.as_slice(), r.as_slice()]));
        assert!(v.contains("hello") && v.contains("hi"));
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn load_dedups_repeats() {
        let f = write_tmp("hello\thi\nhello\thi\n");
        assert_eq!(load_token_pairs(f.path()).unwrap().len(), 1);
    }

    #[test]
    fn load_rejects_malformed() {
        let f = write_tmp("hello hi no tab\n");
        match load_token_pairs(f.path()) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected malformed-line error, got {:?}", other.map(|v| v.len())),
        }
        let f2 = write_tmp("hello\t\n");
        assert!(load_token_pairs(f2.path()).is_err());
        let f3 = write_tmp("");
        assert!(load_token_pairs(f3.path()).is_err());
    }

    #[test]
    fn dedup_is_idempotent_under_rewrite() {
        let f = write_tmp("a b\tc\nx\ty z\na b\tc\n");
        let pairs = load_token_pairs(f.path()).unwrap();
        let v = Vocabulary::from_sentences(pairs.iter().flat_map(|(q, r)| [q.as_slice(), r.as_slice()]));
        let split = Split {
            pairs: pairs
                .iter()
                .enumerate()
                .map(|(i, (q, r))| DialoguePair::original(i, v.encode(q), v.encode(r)))
                .collect(),
            labels: None,
        };
        let out = tempfile::NamedTempFile::new().unwrap();
        write_split(out.path(), &split, &v).unwrap();
        let reloaded = load_token_pairs(out.path()).unwrap();
        assert_eq!(reloaded.len(), split.pairs.len());
    }

    #[test]
    fn synthetic_clean_rule_holds_at_zero_noise() {
        let spec = CorpusSpec { noise_rate: 0.0, n_pairs: 200, ..Default::default() };
        let (split, _) = make_synthetic_corpus(&spec).unwrap();
        for p in &split.pairs {
            assert!(spec.clean_rule.matches(p, spec.content_vocab()));
        }
        assert!(split.labels.unwrap().iter().all(|&l| l == NoiseLabel::Clean));
    }

    #[test]
    fn synthetic_full_noise_never_matches_rule() {
        // Accidental rule matches are excluded by construction; the analytic
        // collision bound (1/content_vocab)^len < 1e-6 for len >= 4 says they
        // were already negligible.
        let spec = CorpusSpec { noise_rate: 1.0, n_pairs: 300, ..Default::default() };
        let bound = (1.0 / spec.content_vocab() as f64).powi(spec.min_len as i32);
        assert!(bound < 1e-6);
        let (split, _) = make_synthetic_corpus(&spec).unwrap();
        for p in &split.pairs {
            assert!(!spec.clean_rule.matches(p, spec.content_vocab()));
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = CorpusSpec { n_pairs: 1000, noise_rate: 0.3, seed: 7, ..Default::default() };
        let (a, _) = make_synthetic_corpus(&spec).unwrap();
        let (b, _) = make_synthetic_corpus(&spec).unwrap();
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn synthetic_rejects_tiny_vocab() {
        let spec = CorpusSpec { vocab_size: 7, ..Default::default() };
        assert!(make_synthetic_corpus(&spec).is_err());
    }

    #[test]
    fn synthetic_label_counts_match_noise_rate() {
        let spec = CorpusSpec { n_pairs: 1000, noise_rate: 0.3, ..Default::default() };
        let (split, _) = make_synthetic_corpus(&spec).unwrap();
        let labels = split.labels.unwrap();
        assert_eq!(labels.len(), split.pairs.len());
        let noisy = labels.iter().filter(|&&l| l == NoiseLabel::Noisy).count();
        assert!((noisy as f64 - 300.0).abs() <= 1.0);
    }

    #[test]
    fn relatedness_identity_and_orthogonal() {
        let v = Vocabulary::build(vec!["a".into(), "b".into()]);
        let mut emb = Embeddings::new(2);
        emb.insert("a", vec![1.0, 0.0]);
        emb.insert("b", vec![0.0, 1.0]);
        let uni = UnigramModel::fit(&[vec!["a".into(), "b".into()]]);
        let same = DialoguePair::original(0, vec![4], vec![4]);
        assert!((query_relatedness(&same, &v, &emb, &uni) - 1.0).abs() < 1e-12);
        let orth = DialoguePair::original(1, vec![4], vec![5]);
        assert!(query_relatedness(&orth, &v, &emb, &uni).abs() < 1e-12);
    }

    #[test]
    fn relatedness_separates_clean_from_noisy() {
        let spec = CorpusSpec { n_pairs: 400, noise_rate: 0.5, ..Default::default() };
        let (split, vocab) = make_synthetic_corpus(&spec).unwrap();
        let emb = synthetic_embeddings(&vocab, 16, spec.seed);
        let sentences: Vec<Vec<String>> = split
            .pairs
            .iter()
            .flat_map(|p| [vocab.decode(&p.query), vocab.decode(&p.response)])
            .collect();
        let uni = UnigramModel::fit(&sentences);
        let labels = split.labels.as_ref().unwrap();
        let mut clean = (0.0, 0usize);
        let mut noisy = (0.0, 0usize);
        for (p, l) in split.pairs.iter().zip(labels) {
            let s = query_relatedness(p, &vocab, &emb, &uni);
            match l {
                NoiseLabel::Clean => {
                    clean.0 += s;
                    clean.1 += 1;
                }
                NoiseLabel::Noisy => {
                    noisy.0 += s;
                    noisy.1 += 1;
                }
            }
        }
        let mc = clean.0 / clean.1 as f64;
        let mn = noisy.0 / noisy.1 as f64;
        assert!(mc > mn, "clean mean {} <= noisy mean {}", mc, mn);
    }

    #[test]
    fn batches_cover_split_with_short_tail() {
        let spec = CorpusSpec { n_pairs: 10, noise_rate: 0.0, ..Default::default() };
        let (split, _) = make_synthetic_corpus(&spec).unwrap();
        let batches = epoch_batches(&split, 4, 3, 0);
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn batch_order_is_seeded() {
        let spec = CorpusSpec { n_pairs: 10, noise_rate: 0.0, ..Default::default() };
        let (split, _) = make_synthetic_corpus(&spec).unwrap();
        let ids = |batches: &[Batch]| -> Vec<usize> {
            batches.iter().flat_map(|b| b.pairs.iter().map(|p| p.id)).collect()
        };
        let a = ids(&epoch_batches(&split, 4, 3, 0));
        let b = ids(&epoch_batches(&split, 4, 3, 0));
        assert_eq!(a, b);
        // With n = 10 the chance of two seeds colliding on the same
        // permutation is 1/10!; distinct seeds should differ.
        let c = ids(&epoch_batches(&split, 4, 4, 0));
        assert_ne!(a, c);
        let d = ids(&epoch_batches(&split, 4, 3, 1));
        assert_ne!(a, d);
    }

    #[test]
    fn empty_split_yields_no_batches() {
        let split = Split::default();
        assert!(epoch_batches(&split, 4, 0, 0).is_empty());
        let mut it = BatchIterator::new(&split, 4, 0);
        assert!(it.next().is_none());
    }

    #[test]
    fn batch_masks_count_true_lengths() {
        let pairs = vec![
            DialoguePair::original(0, vec![4, 5, 6], vec![6, 5]),
            DialoguePair::original(1, vec![4], vec![6, 5, 4, 4]),
        ];
        let b = Batch::new(pairs);
        assert_eq!(b.query_width(), 3);
        assert_eq!(b.response_width(), 4);
        let qsum: f64 = b.query_mask.iter().flatten().sum();
        let rsum: f64 = b.response_mask.iter().flatten().sum();
        assert_eq!(qsum, 4.0);
        assert_eq!(rsum, 6.0);
        assert_eq!(b.query_matrix[1][1], PAD);
    }

    proptest! {
        #[test]
        fn tokenize_detokenize_roundtrip(words in proptest::collection::vec("[a-z]{1,6}", 1..8)) {
            let s = words.join(" ");
            let toks = tokenize(&s);
            prop_assert_eq!(detokenize(&toks), s);
        }

        #[test]
        fn relatedness_is_scale_invariant_and_symmetric(scale in 0.1f64..10.0) {
            let v = Vocabulary::build(vec!["a".into(), "b".into(), "c".into()]);
            let uni = UnigramModel::fit(&[vec!["a".into(), "b".into(), "c".into()]]);
            let mut emb = Embeddings::new(3);
            emb.insert("a", vec![1.0, 0.2, -0.3]);
            emb.insert("b", vec![0.4, 1.0, 0.1]);
            emb.insert("c", vec![-0.2, 0.5, 1.0]);
            let mut scaled = Embeddings::new(3);
            for t in ["a", "b", "c"] {
                scaled.insert(t, emb.get(t).unwrap().iter().map(|x| x * scale).collect());
            }
            let p = DialoguePair::original(0, vec![4, 5], vec![6]);
            let swapped = DialoguePair::original(1, vec![6], vec![4, 5]);
            let s1 = query_relatedness(&p, &v, &emb, &uni);
            let s2 = query_relatedness(&p, &v, &scaled, &uni);
            let s3 = query_relatedness(&swapped, &v, &emb, &uni);
            prop_assert!((s1 - s2).abs() < 1e-9);
            prop_assert!((s1 - s3).abs() < 1e-12);
        }
    }
}
