//! Automatic evaluation: Dist-n, Intra-n, Ent-n, smoothed BLEU (orders 1-3)
//! and the three embedding similarities (average with SIF weighting, extrema,
//! greedy). All corpus-level values are reported as percentages.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing pseudo-count added to zero modified-precision numerators.
pub const BLEU_SMOOTH_EPS: f64 = 0.1;
/// SIF constant: weight(token) = SIF_A / (SIF_A + p(token)).
pub const SIF_A: f64 = 0.001;

// ---------------------------------------------------------------------------
// n-gram language statistics
// ---------------------------------------------------------------------------

/// Unsmoothed MLE n-gram probabilities (n = 1, 2, 3) from the training split.
#[derive(Debug, Clone)]
pub struct UnigramModel {
    maps: [HashMap<Vec<String>, f64>; 3],
    min_prob: [f64; 3],
}

/// What Ent-n does with an n-gram never seen in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnseenNgramPolicy {
    /// Assign the smallest observed probability of that order (default).
    Floor,
    /// Drop the n-gram from the average.
    Skip,
}

impl UnigramModel {
    pub fn fit(sentences: &[Vec<String>]) -> Self {
        let mut maps: [HashMap<Vec<String>, f64>; 3] = Default::default();
        let mut min_prob = [1.0f64; 3];
        for n in 1..=3usize {
            let mut counts: HashMap<Vec<String>, usize> = HashMap::new();
            let mut total = 0usize;
            for s in sentences {
                for g in ngrams(s, n) {
                    *counts.entry(g).or_insert(0) += 1;
                    total += 1;
                }
            }
            if total > 0 {
                let map = &mut maps[n - 1];
                for (g, c) in counts {
                    let p = c as f64 / total as f64;
                    min_prob[n - 1] = min_prob[n - 1].min(p);
                    map.insert(g, p);
                }
            }
        }
        UnigramModel { maps, min_prob }
    }

    pub fn prob(&self, gram: &[String], n: usize) -> Option<f64> {
        self.maps[n - 1].get(gram).copied()
    }

    /// Probability of a single token, 0.0 when unseen. Used by SIF weighting.
    pub fn token_prob(&self, token: &str) -> f64 {
        self.maps[0].get(std::slice::from_ref(&token.to_string())).copied().unwrap_or(0.0)
    }

    pub fn floor(&self, n: usize) -> f64 {
        self.min_prob[n - 1]
    }

    /// Observed-probability mass per order; 1.0 for a fitted order.
    pub fn mass(&self, n: usize) -> f64 {
        self.maps[n - 1].values().sum()
    }

    #[cfg(test)]
    pub(crate) fn force_token_prob(&mut self, token: &str, p: f64) {
        self.maps[0].insert(vec![token.to_string()], p);
    }
}

fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].to_vec()).collect()
}

// ---------------------------------------------------------------------------
// word embeddings
// ---------------------------------------------------------------------------

/// Word-vector table in GloVe text format: `token v1 v2 ... vd` per line.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub dim: usize,
    map: HashMap<String, Vec<f64>>,
}

impl Embeddings {
    pub fn new(dim: usize) -> Self {
        Embeddings { dim, map: HashMap::new() }
    }

    pub fn insert(&mut self, token: &str, v: Vec<f64>) {
        assert_eq!(v.len(), self.dim);
        self.map.insert(token.to_string(), v);
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let mut map = HashMap::new();
        let mut dim = 0usize;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts
                .next()
                .ok_or_else(|| Error::Metric(format!("embedding line {} empty", i + 1)))?
                .to_string();
            let vals: Vec<f64> = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Metric(format!("embedding line {}: {}", i + 1, e)))?;
            if dim == 0 {
                dim = vals.len();
            } else if vals.len() != dim {
                return Err(Error::Metric(format!(
                    "embedding line {}: dim {} != {}",
                    i + 1,
                    vals.len(),
                    dim
                )));
            }
            map.insert(token, vals);
        }
        if dim == 0 {
            return Err(Error::Metric("empty embedding file".into()));
        }
        Ok(Embeddings { dim, map })
    }

    /// Vector for a token, falling back to the `<unk>` row when present.
    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.map.get(token).or_else(|| self.map.get("<unk>")).map(|v| v.as_slice())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.map.contains_key(token)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

// ---------------------------------------------------------------------------
// diversity metrics
// ---------------------------------------------------------------------------

/// Unique n-grams across all responses over total n-grams.
pub fn distinct_n(responses: &[Vec<String>], n: usize) -> f64 {
    assert!((1..=3).contains(&n));
    let mut seen: HashMap<Vec<String>, ()> = HashMap::new();
    let mut total = 0usize;
    for r in responses {
        for g in ngrams(r, n) {
            seen.insert(g, ());
            total += 1;
        }
    }
    if total == 0 {
        log::warn!("distinct_{}: no n-grams in {} responses", n, responses.len());
        return 0.0;
    }
    seen.len() as f64 / total as f64
}

/// Mean per-response unique/total n-gram ratio. Responses shorter than `n`
/// are excluded; the second value reports how many.
pub fn intra_distinct_n(responses: &[Vec<String>], n: usize) -> (f64, usize) {
    assert!((1..=3).contains(&n));
    let mut sum = 0.0;
    let mut counted = 0usize;
    let mut excluded = 0usize;
    for r in responses {
        let grams = ngrams(r, n);
        if grams.is_empty() {
            excluded += 1;
            continue;
        }
        let total = grams.len();
        let unique: HashMap<Vec<String>, ()> = grams.into_iter().map(|g| (g, ())).collect();
        sum += unique.len() as f64 / total as f64;
        counted += 1;
    }
    if counted == 0 {
        return (0.0, excluded);
    }
    (sum / counted as f64, excluded)
}

/// Mean over responses of -(1/|grams|) sum log2 p(gram) under the training
/// MLE model.
pub fn entropy_n(
    responses: &[Vec<String>],
    model: &UnigramModel,
    n: usize,
    policy: UnseenNgramPolicy,
) -> f64 {
    assert!((1..=3).contains(&n));
    let mut sum = 0.0;
    let mut counted = 0usize;
    for r in responses {
        let grams = ngrams(r, n);
        if grams.is_empty() {
            continue;
        }
        let mut acc = 0.0;
        let mut used = 0usize;
        for g in &grams {
            let p = match model.prob(g, n) {
                Some(p) => p,
                None => match policy {
                    UnseenNgramPolicy::Floor => model.floor(n),
                    UnseenNgramPolicy::Skip => continue,
                },
            };
            acc += -p.log2();
            used += 1;
        }
        if used > 0 {
            sum += acc / used as f64;
            counted += 1;
        }
    }
    if counted == 0 {
        return 0.0;
    }
    sum / counted as f64
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

/// Smoothed modified precision; None when the hypothesis has no n-grams of
/// this order (the order is then dropped from the geometric mean, so a short
/// hypothesis identical to its reference still scores 1).
fn modified_precision(hyp: &[String], reference: &[String], n: usize) -> Option<f64> {
    let hyp_grams = ngrams(hyp, n);
    let total = hyp_grams.len();
    if total == 0 {
        return None;
    }
    let mut ref_counts: HashMap<Vec<String>, usize> = HashMap::new();
    for g in ngrams(reference, n) {
        *ref_counts.entry(g).or_insert(0) += 1;
    }
    let mut hyp_counts: HashMap<Vec<String>, usize> = HashMap::new();
    for g in hyp_grams {
        *hyp_counts.entry(g).or_insert(0) += 1;
    }
    let mut clipped = 0usize;
    for (g, c) in &hyp_counts {
        clipped += (*c).min(ref_counts.get(g).copied().unwrap_or(0));
    }
    let numer = if clipped == 0 { BLEU_SMOOTH_EPS } else { clipped as f64 };
    Some(numer / total as f64)
}

/// Sentence BLEU with orders 1-3: brevity penalty times the geometric mean of
/// smoothed modified precisions over the orders the hypothesis supports.
pub fn sentence_bleu(hyp: &[String], reference: &[String]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=3usize {
        if let Some(p) = modified_precision(hyp, reference, n) {
            log_sum += p.ln();
            orders += 1;
        }
    }
    let geo = (log_sum / orders as f64).exp();
    let c = hyp.len() as f64;
    let r = reference.len() as f64;
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    bp * geo
}

/// Corpus BLEU: mean of sentence-level scores over aligned pairs.
pub fn bleu(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> f64 {
    assert_eq!(hypotheses.len(), references.len(), "hypothesis/reference lists must align");
    if hypotheses.is_empty() {
        return 0.0;
    }
    let sum: f64 = hypotheses.iter().zip(references).map(|(h, r)| sentence_bleu(h, r)).sum();
    sum / hypotheses.len() as f64
}

// ---------------------------------------------------------------------------
// embedding metrics
// ---------------------------------------------------------------------------

/// Smooth-inverse-frequency sentence embedding:
/// (1/|s|) * sum over tokens of (a / (a + p(token))) * emb(token).
pub fn sif_embed(sentence: &[String], embeddings: &Embeddings, unigram: &UnigramModel) -> Vec<f64> {
    let mut out = vec![0.0; embeddings.dim];
    if sentence.is_empty() {
        log::warn!("sif_embed: empty sentence");
        return out;
    }
    for tok in sentence {
        let Some(v) = embeddings.get(tok) else { continue };
        let w = SIF_A / (SIF_A + unigram.token_prob(tok));
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    let inv = 1.0 / sentence.len() as f64;
    for o in &mut out {
        *o *= inv;
    }
    out
}

fn extrema_vector(sentence: &[String], embeddings: &Embeddings) -> Vec<f64> {
    let mut out: Vec<f64> = vec![0.0; embeddings.dim];
    for tok in sentence {
        let Some(v) = embeddings.get(tok) else { continue };
        for (o, &x) in out.iter_mut().zip(v) {
            // Keep the value of largest magnitude, sign preserved; ties go to
            // the positive value.
            let cur = *o;
            if x.abs() > cur.abs() || (x.abs() == cur.abs() && x > cur) {
                *o = x;
            }
        }
    }
    out
}

fn greedy_directed(from: &[String], to: &[String], embeddings: &Embeddings) -> f64 {
    if from.is_empty() || to.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for a in from {
        let va = embeddings.get(a);
        let mut best = f64::NEG_INFINITY;
        for b in to {
            let c = match (va, embeddings.get(b)) {
                (Some(x), Some(y)) => cosine(x, y),
                _ => 0.0,
            };
            best = best.max(c);
        }
        sum += best;
    }
    sum / from.len() as f64
}

/// (average, extrema, greedy) similarities in [-1, 1].
pub fn embedding_metrics(
    hyp: &[String],
    reference: &[String],
    embeddings: &Embeddings,
    unigram: &UnigramModel,
) -> (f64, f64, f64) {
    let avg = cosine(
        &sif_embed(hyp, embeddings, unigram),
        &sif_embed(reference, embeddings, unigram),
    );
    let ext = cosine(&extrema_vector(hyp, embeddings), &extrema_vector(reference, embeddings));
    let gre = 0.5
        * (greedy_directed(hyp, reference, embeddings) + greedy_directed(reference, hyp, embeddings));
    (avg, ext, gre)
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// All thirteen metric values, as percentages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_pairs: usize,
    pub dist_1: f64,
    pub dist_2: f64,
    pub dist_3: f64,
    pub intra_1: f64,
    pub intra_2: f64,
    pub intra_3: f64,
    pub ent_1: f64,
    pub ent_2: f64,
    pub ent_3: f64,
    pub bleu: f64,
    pub emb_avg: f64,
    pub emb_ext: f64,
    pub emb_gre: f64,
    /// Responses too short for the order, per n in {1,2,3}.
    pub intra_excluded: [usize; 3],
    pub bleu_smoothing: String,
}

impl MetricReport {
    pub fn compute(
        hypotheses: &[Vec<String>],
        references: &[Vec<String>],
        embeddings: &Embeddings,
        unigram: &UnigramModel,
        unseen: UnseenNgramPolicy,
    ) -> Self {
        assert_eq!(hypotheses.len(), references.len());
        let mut intra = [0.0; 3];
        let mut dist = [0.0; 3];
        let mut ent = [0.0; 3];
        let mut intra_excluded = [0usize; 3];
        for n in 1..=3usize {
            dist[n - 1] = distinct_n(hypotheses, n);
            let (v, ex) = intra_distinct_n(hypotheses, n);
            intra[n - 1] = v;
            intra_excluded[n - 1] = ex;
            ent[n - 1] = entropy_n(hypotheses, unigram, n, unseen);
        }
        let bleu_v = bleu(hypotheses, references);
        let mut avg = 0.0;
        let mut ext = 0.0;
        let mut gre = 0.0;
        for (h, r) in hypotheses.iter().zip(references) {
            let (a, e, g) = embedding_metrics(h, r, embeddings, unigram);
            avg += a;
            ext += e;
            gre += g;
        }
        let n = hypotheses.len().max(1) as f64;
        MetricReport {
            n_pairs: hypotheses.len(),
            dist_1: dist[0] * 100.0,
            dist_2: dist[1] * 100.0,
            dist_3: dist[2] * 100.0,
            intra_1: intra[0] * 100.0,
            intra_2: intra[1] * 100.0,
            intra_3: intra[2] * 100.0,
            // Ent-n is already in bits; reported as-is.
            ent_1: ent[0],
            ent_2: ent[1],
            ent_3: ent[2],
            bleu: bleu_v * 100.0,
            emb_avg: avg / n * 100.0,
            emb_ext: ext / n * 100.0,
            emb_gre: gre / n * 100.0,
            intra_excluded,
            bleu_smoothing: format!("add-{} on zero precisions, orders 1-3", BLEU_SMOOTH_EPS),
        }
    }

    pub fn values(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("dist_1", self.dist_1),
            ("dist_2", self.dist_2),
            ("dist_3", self.dist_3),
            ("intra_1", self.intra_1),
            ("intra_2", self.intra_2),
            ("intra_3", self.intra_3),
            ("ent_1", self.ent_1),
            ("ent_2", self.ent_2),
            ("ent_3", self.ent_3),
            ("bleu", self.bleu),
            ("emb_avg", self.emb_avg),
            ("emb_ext", self.emb_ext),
            ("emb_gre", self.emb_gre),
        ]
    }

    /// Aligned-columns text table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<10} {:>10}\n", "metric", "value"));
        for (name, v) in self.values() {
            out.push_str(&format!("{:<10} {:>10.4}\n", name, v));
        }
        out.push_str(&format!("{:<10} {:>10}\n", "pairs", self.n_pairs));
        out
    }
}
