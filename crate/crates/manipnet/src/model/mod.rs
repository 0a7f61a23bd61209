//! Encoder-decoder response generators: a recurrent seq2seq with attention
//! and a small transformer, both exposing per-sample NLL that is
//! differentiable with respect to the parameters and to relaxed (soft) token
//! inputs, plus greedy/sampling decoding and self-describing checkpoints.

pub mod lstm;
pub mod transformer;

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::params::{named_tensors, Pack};
use crate::rng::stream_rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub use lstm::{Seq2SeqNodes, Seq2SeqParams};
pub use transformer::{TransformerNodes, TransformerParams};

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Seq2Seq,
    Transformer,
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq2seq" => Ok(Arch::Seq2Seq),
            "transformer" => Ok(Arch::Transformer),
            other => Err(Error::Config(format!("unknown arch {:?}", other))),
        }
    }
}

impl Arch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::Seq2Seq => "seq2seq",
            Arch::Transformer => "transformer",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDims {
    pub arch: Arch,
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub bidirectional: bool,
    /// Transformer only.
    pub heads: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
    /// Divide per-sample NLL by the number of predicted tokens.
    pub len_normalize: bool,
}

impl ModelDims {
    /// Desk-scale defaults.
    pub fn desk(arch: Arch, vocab: usize) -> Self {
        match arch {
            Arch::Seq2Seq => ModelDims {
                arch,
                vocab,
                embed: 64,
                hidden: 64,
                enc_layers: 2,
                dec_layers: 1,
                bidirectional: true,
                heads: 0,
                blocks: 0,
                ffn_mult: 0,
                len_normalize: false,
            },
            Arch::Transformer => ModelDims {
                arch,
                vocab,
                embed: 128,
                hidden: 128,
                enc_layers: 0,
                dec_layers: 0,
                bidirectional: false,
                heads: 4,
                blocks: 2,
                ffn_mult: 4,
                len_normalize: false,
            },
        }
    }

    /// Full-scale preset.
    pub fn paper(arch: Arch, vocab: usize) -> Self {
        match arch {
            Arch::Seq2Seq => ModelDims {
                embed: 256,
                hidden: 256,
                ..ModelDims::desk(arch, vocab)
            },
            Arch::Transformer => ModelDims {
                embed: 512,
                hidden: 512,
                heads: 8,
                blocks: 6,
                ..ModelDims::desk(arch, vocab)
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embed == 0 {
            return Err(Error::Model("hidden and embed dims must be positive".into()));
        }
        if self.vocab <= 4 {
            return Err(Error::Model("vocabulary has no content tokens".into()));
        }
        match self.arch {
            Arch::Seq2Seq => {
                if self.enc_layers == 0 || self.dec_layers == 0 {
                    return Err(Error::Model("seq2seq needs at least one layer on each side".into()));
                }
                if self.dec_layers > self.enc_layers {
                    return Err(Error::Model("decoder layers cannot exceed encoder layers".into()));
                }
            }
            Arch::Transformer => {
                if self.blocks == 0 || self.heads == 0 || self.ffn_mult == 0 {
                    return Err(Error::Model("transformer needs blocks, heads and ffn_mult".into()));
                }
                if self.hidden % self.heads != 0 {
                    return Err(Error::Model(format!(
                        "hidden {} not divisible by heads {}",
                        self.hidden, self.heads
                    )));
                }
                if self.embed != self.hidden {
                    return Err(Error::Model("transformer ties embed to hidden".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStrategy {
    Greedy,
    Sample,
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub max_len: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { strategy: DecodeStrategy::Greedy, max_len: 32, temperature: 1.0, seed: 0 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// input views
// ---------------------------------------------------------------------------

/// One sequence fed to a model: hard token ids, or a relaxed distribution
/// (len x vocab probability rows) alongside its hard argmax ids.
#[derive(Clone, Copy)]
pub enum SeqView<'a> {
    Hard(&'a [u32]),
    Soft { node: NodeId, ids: &'a [u32] },
}

impl<'a> SeqView<'a> {
    pub fn len(&self) -> usize {
        self.ids().len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids().is_empty()
    }

    pub fn ids(&self) -> &'a [u32] {
        match self {
            SeqView::Hard(ids) => ids,
            SeqView::Soft { ids, .. } => ids,
        }
    }

    pub fn is_hard(&self) -> bool {
        matches!(self, SeqView::Hard(_))
    }
}

/// (query, response) views for one training sample.
#[derive(Clone, Copy)]
pub struct PairView<'a> {
    pub query: SeqView<'a>,
    pub response: SeqView<'a>,
}

impl<'a> PairView<'a> {
    pub fn hard(query: &'a [u32], response: &'a [u32]) -> Self {
        PairView { query: SeqView::Hard(query), response: SeqView::Hard(response) }
    }
}

pub fn batch_views(batch: &Batch) -> Vec<PairView<'_>> {
    batch.pairs.iter().map(|p| PairView::hard(&p.query, &p.response)).collect()
}

/// Per-sample embedded sequence (len x embed): a gather for hard ids, an
/// expected embedding (P . E) for relaxed rows.
pub fn embed_sequence(tape: &mut Tape, embed: NodeId, view: &SeqView) -> NodeId {
    match view {
        SeqView::Hard(ids) => {
            let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
            tape.gather_rows(embed, Rc::new(idx))
        }
        SeqView::Soft { node, .. } => tape.matmul(*node, embed),
    }
}

// ---------------------------------------------------------------------------
// the model pair
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum DialogueModel {
    Seq2Seq(Seq2SeqParams),
    Transformer(TransformerParams),
}

#[derive(Clone)]
pub enum DialogueModelNodes {
    Seq2Seq(Seq2SeqNodes),
    Transformer(TransformerNodes),
}

impl Pack for DialogueModel {
    type Nodes = DialogueModelNodes;

    fn bind(&self, tape: &mut Tape) -> Self::Nodes {
        match self {
            DialogueModel::Seq2Seq(p) => DialogueModelNodes::Seq2Seq(p.bind(tape)),
            DialogueModel::Transformer(p) => DialogueModelNodes::Transformer(p.bind(tape)),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        match self {
            DialogueModel::Seq2Seq(p) => p.visit(f),
            DialogueModel::Transformer(p) => p.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        match self {
            DialogueModel::Seq2Seq(p) => p.visit_mut(f),
            DialogueModel::Transformer(p) => p.visit_mut(f),
        }
    }

    fn visit_names(&self, prefix: &str, f: &mut dyn FnMut(String)) {
        match self {
            DialogueModel::Seq2Seq(p) => p.visit_names(prefix, f),
            DialogueModel::Transformer(p) => p.visit_names(prefix, f),
        }
    }

    fn collect_nodes(nodes: &Self::Nodes, out: &mut Vec<NodeId>) {
        match nodes {
            DialogueModelNodes::Seq2Seq(n) => Seq2SeqParams::collect_nodes(n, out),
            DialogueModelNodes::Transformer(n) => TransformerParams::collect_nodes(n, out),
        }
    }

    fn map_nodes(nodes: &Self::Nodes, f: &mut dyn FnMut(NodeId) -> NodeId) -> Self::Nodes {
        match nodes {
            DialogueModelNodes::Seq2Seq(n) => DialogueModelNodes::Seq2Seq(Seq2SeqParams::map_nodes(n, f)),
            DialogueModelNodes::Transformer(n) => {
                DialogueModelNodes::Transformer(TransformerParams::map_nodes(n, f))
            }
        }
    }
}

/// Deterministic initialization from a seed; same seed, same bits.
pub fn build_model(dims: &ModelDims, seed: u64) -> Result<DialogueModel> {
    dims.validate()?;
    let mut rng = stream_rng(seed, "init", 0);
    Ok(match dims.arch {
        Arch::Seq2Seq => DialogueModel::Seq2Seq(lstm::init_seq2seq(dims, &mut rng)),
        Arch::Transformer => DialogueModel::Transformer(transformer::init_transformer(dims, &mut rng)),
    })
}

/// Per-sample negative log-likelihood nodes (batch x 1): the sum over
/// response tokens (EOS included) of -log p(token), masked over padding.
pub fn batch_nll_nodes(
    tape: &mut Tape,
    nodes: &DialogueModelNodes,
    dims: &ModelDims,
    pairs: &[PairView],
) -> NodeId {
    let nll = match nodes {
        DialogueModelNodes::Seq2Seq(n) => lstm::seq2seq_nll(tape, n, dims, pairs),
        DialogueModelNodes::Transformer(n) => transformer::transformer_nll(tape, n, dims, pairs),
    };
    if dims.len_normalize {
        let inv: Vec<f64> = pairs.iter().map(|p| 1.0 / (p.response.len() + 1) as f64).collect();
        tape.mul_const_tensor(nll, Rc::new(Tensor::col_vec(inv)))
    } else {
        nll
    }
}

/// Evaluation-path convenience: NLL values for a hard batch.
pub fn per_sample_nll(model: &DialogueModel, dims: &ModelDims, batch: &Batch) -> Vec<f64> {
    let mut tape = Tape::new();
    let nodes = bind_frozen(&mut tape, model);
    let views = batch_views(batch);
    let nll = batch_nll_nodes(&mut tape, &nodes, dims, &views);
    tape.value(nll).data.clone()
}

/// Bind parameters for forward-only evaluation. The gradient flags are
/// harmless as long as nobody asks for gradients.
pub fn bind_frozen(tape: &mut Tape, model: &DialogueModel) -> DialogueModelNodes {
    model.bind(tape)
}

/// L_dm = sum_j w_j * nll_j. Fails on negative weights or length mismatch.
pub fn weighted_loss(nll: &[f64], weights: &[f64]) -> Result<f64> {
    if nll.len() != weights.len() {
        return Err(Error::Model(format!("{} nll values vs {} weights", nll.len(), weights.len())));
    }
    if let Some(w) = weights.iter().find(|w| **w < 0.0) {
        return Err(Error::Model(format!("negative weight {}", w)));
    }
    Ok(nll.iter().zip(weights).map(|(n, w)| n * w).sum())
}

/// Node-level weighted loss; gradients flow to theta via nll and to phi via
/// the weight vector.
pub fn weighted_loss_nodes(tape: &mut Tape, nll: NodeId, weights: NodeId) -> NodeId {
    let prod = tape.mul(nll, weights);
    tape.sum(prod)
}

/// Decode a response for a query. Greedy decoding is deterministic; sampling
/// follows the seeded stream in the config.
pub fn generate(
    model: &DialogueModel,
    dims: &ModelDims,
    query: &[u32],
    cfg: &DecodeConfig,
) -> Result<Vec<u32>> {
    cfg.validate()?;
    if query.is_empty() {
        return Err(Error::Model("cannot decode from an empty query".into()));
    }
    let mut tape = Tape::new();
    let nodes = bind_frozen(&mut tape, model);
    let mut rng = stream_rng(cfg.seed, "decode", 0);
    let step = |tape: &mut Tape, logits: NodeId, rng: &mut rand_chacha::ChaCha8Rng| -> u32 {
        match cfg.strategy {
            DecodeStrategy::Greedy => tape.value(logits).argmax_row(0) as u32,
            DecodeStrategy::Sample => {
                let scaled = tape.scale(logits, 1.0 / cfg.temperature);
                let probs = tape.softmax_rows(scaled);
                let p = tape.value(probs).row(0).to_vec();
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (i, pi) in p.iter().enumerate() {
                    acc += pi;
                    if u <= acc {
                        return i as u32;
                    }
                }
                (p.len() - 1) as u32
            }
        }
    };
    let out = match &nodes {
        DialogueModelNodes::Seq2Seq(n) => lstm::seq2seq_decode(&mut tape, n, dims, query, cfg.max_len, step, &mut rng),
        DialogueModelNodes::Transformer(n) => {
            transformer::transformer_decode(&mut tape, n, dims, query, cfg.max_len, step, &mut rng)
        }
    };
    Ok(out)
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Tensor> for TensorData {
    fn from(t: &Tensor) -> Self {
        TensorData { rows: t.rows, cols: t.cols, data: t.data.clone() }
    }
}

/// Self-describing archive: named tensors per section plus enough
/// configuration to rebuild and verify.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub dims: ModelDims,
    pub vocab: Vec<String>,
    pub sections: BTreeMap<String, BTreeMap<String, TensorData>>,
    pub config_echo: serde_json::Value,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(dims: &ModelDims, vocab: &Vocabulary) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            dims: dims.clone(),
            vocab: vocab.all_tokens().to_vec(),
            sections: BTreeMap::new(),
            config_echo: serde_json::Value::Null,
        }
    }

    pub fn put_pack<P: Pack>(&mut self, section: &str, pack: &P) {
        let map: BTreeMap<String, TensorData> = named_tensors(pack, section)
            .iter()
            .map(|(n, t)| (n.clone(), TensorData::from(t)))
            .collect();
        self.sections.insert(section.to_string(), map);
    }

    /// Restore a pack's tensors from a section, by name, with shape checks.
    pub fn fill_pack<P: Pack>(&self, section: &str, pack: &mut P) -> Result<()> {
        let map = self
            .sections
            .get(section)
            .ok_or_else(|| Error::Checkpoint(format!("missing section {:?}", section)))?;
        let mut names = Vec::new();
        pack.visit_names(section, &mut |n| names.push(n));
        let mut i = 0;
        let mut err = None;
        pack.visit_mut(&mut |t| {
            if err.is_some() {
                return;
            }
            match map.get(&names[i]) {
                Some(td) if (td.rows, td.cols) == t.shape() => {
                    t.data.copy_from_slice(&td.data);
                }
                Some(td) => {
                    err = Some(Error::Checkpoint(format!(
                        "{}: shape {}x{} vs expected {}x{}",
                        names[i], td.rows, td.cols, t.rows, t.cols
                    )));
                }
                None => err = Some(Error::Checkpoint(format!("missing tensor {}", names[i]))),
            }
            i += 1;
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        Ok(ckpt)
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::build(self.vocab.iter().skip(4).cloned())
    }
}

// ---------------------------------------------------------------------------
// shared init helpers
// ---------------------------------------------------------------------------

pub(crate) fn init_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::randn(rows, cols, (1.0 / rows as f64).sqrt(), rng)
}

pub(crate) fn init_linear<R: Rng>(input: usize, output: usize, rng: &mut R) -> lstm::Linear {
    lstm::Linear { w: init_matrix(input, output, rng), b: Tensor::zeros(1, output) }
}

/// Targets for one decoder step: (token id, mask) per sample. Position
/// `len` is EOS; beyond that PAD with mask 0.
pub(crate) fn hard_target_at(ids: &[u32], t: usize) -> (u32, f64) {
    use std::cmp::Ordering;
    match t.cmp(&ids.len()) {
        Ordering::Less => (ids[t], 1.0),
        Ordering::Equal => (EOS, 1.0),
        Ordering::Greater => (PAD, 0.0),
    }
}

/// Decoder input token at step t under teacher forcing: BOS then the
/// reference, PAD past the end.
pub(crate) fn input_token_at(ids: &[u32], t: usize) -> u32 {
    if t == 0 {
        BOS
    } else if t - 1 < ids.len() {
        ids[t - 1]
    } else {
        PAD
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_loss_basics() {
        let nll = vec![1.0, 2.0, 3.0];
        assert_eq!(weighted_loss(&nll, &[1.0, 1.0, 1.0]).unwrap(), 6.0);
        assert_eq!(weighted_loss(&nll, &[0.0, 1.0, 0.0]).unwrap(), 2.0);
        let softmaxed = vec![0.2, 0.3, 0.5];
        let v = weighted_loss(&nll, &softmaxed).unwrap();
        assert!(v >= 1.0 && v <= 3.0);
        assert!(weighted_loss(&nll, &[1.0, -0.1, 0.0]).is_err());
        assert!(weighted_loss(&nll, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn weighted_loss_is_bilinear() {
        // Dyadic values keep every product and sum exact in f64.
        let nll = vec![0.5, 1.5, 2.5];
        let w1 = vec![0.125, 0.25, 0.375];
        let w2 = vec![1.0, 0.5, 0.25];
        let (a, b) = (2.0, -0.5);
        let combo: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
        // Negative combined weights are fine for the algebraic check; bypass
        // validation by computing directly.
        let direct: f64 = nll.iter().zip(&combo).map(|(n, w)| n * w).sum();
        let split = a * weighted_loss(&nll, &w1).unwrap() + b * weighted_loss(&nll, &w2).unwrap();
        assert_eq!(direct, split);
    }

    #[test]
    fn dims_validation() {
        let mut d = ModelDims::desk(Arch::Seq2Seq, 50);
        d.validate().unwrap();
        d.hidden = 0;
        assert!(d.validate().is_err());
        let mut t = ModelDims::desk(Arch::Transformer, 50);
        t.validate().unwrap();
        t.heads = 3;
        assert!(t.validate().is_err());
    }

    #[test]
    fn same_seed_same_bits() {
        let dims = ModelDims::desk(Arch::Seq2Seq, 30);
        let a = build_model(&dims, 11).unwrap();
        let b = build_model(&dims, 11).unwrap();
        let (mut ta, mut tb) = (Vec::new(), Vec::new());
        a.visit(&mut |t| ta.push(t.clone()));
        b.visit(&mut |t| tb.push(t.clone()));
        assert_eq!(ta, tb);
        let c = build_model(&dims, 12).unwrap();
        let mut tc = Vec::new();
        c.visit(&mut |t| tc.push(t.clone()));
        assert_ne!(ta, tc);
    }
}
