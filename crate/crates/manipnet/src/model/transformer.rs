//! Small transformer encoder/decoder blocks, processed per sample (desk
//! scale), with sinusoidal positions and post-layer-norm residuals. The
//! encoder stack is shared with the masked LM and the instance encoder.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{BOS, EOS};
use crate::param_pack;
use crate::params::Pack;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

use super::lstm::Linear;
use super::{embed_sequence, hard_target_at, init_matrix, ModelDims, PairView, SeqView};

param_pack! {
    pub struct Mha / MhaN {
        pub q: Linear,
        pub k: Linear,
        pub v: Linear,
        pub o: Linear,
    }
}

param_pack! {
    pub struct LayerNormP / LayerNormPN {
        pub gamma: Tensor,
        pub beta: Tensor,
    }
}

param_pack! {
    pub struct Ffn / FfnN {
        pub w1: Linear,
        pub w2: Linear,
    }
}

param_pack! {
    pub struct EncBlock / EncBlockN {
        pub attn: Mha,
        pub ln1: LayerNormP,
        pub ffn: Ffn,
        pub ln2: LayerNormP,
    }
}

param_pack! {
    pub struct DecBlock / DecBlockN {
        pub self_attn: Mha,
        pub ln1: LayerNormP,
        pub cross: Mha,
        pub ln2: LayerNormP,
        pub ffn: Ffn,
        pub ln3: LayerNormP,
    }
}

param_pack! {
    pub struct TransformerParams / TransformerNodes {
        pub embed: Tensor,
        pub enc: Vec<EncBlock>,
        pub dec: Vec<DecBlock>,
        pub out: Linear,
    }
}

pub fn init_mha<R: Rng>(d: usize, rng: &mut R) -> Mha {
    Mha {
        q: super::init_linear(d, d, rng),
        k: super::init_linear(d, d, rng),
        v: super::init_linear(d, d, rng),
        o: super::init_linear(d, d, rng),
    }
}

pub fn init_layer_norm(d: usize) -> LayerNormP {
    LayerNormP { gamma: Tensor::filled(1, d, 1.0), beta: Tensor::zeros(1, d) }
}

pub fn init_ffn<R: Rng>(d: usize, mult: usize, rng: &mut R) -> Ffn {
    Ffn { w1: super::init_linear(d, d * mult, rng), w2: super::init_linear(d * mult, d, rng) }
}

pub fn init_enc_block<R: Rng>(d: usize, mult: usize, rng: &mut R) -> EncBlock {
    EncBlock { attn: init_mha(d, rng), ln1: init_layer_norm(d), ffn: init_ffn(d, mult, rng), ln2: init_layer_norm(d) }
}

fn init_dec_block<R: Rng>(d: usize, mult: usize, rng: &mut R) -> DecBlock {
    DecBlock {
        self_attn: init_mha(d, rng),
        ln1: init_layer_norm(d),
        cross: init_mha(d, rng),
        ln2: init_layer_norm(d),
        ffn: init_ffn(d, mult, rng),
        ln3: init_layer_norm(d),
    }
}

pub fn init_transformer<R: Rng>(dims: &ModelDims, rng: &mut R) -> TransformerParams {
    let d = dims.hidden;
    TransformerParams {
        embed: init_matrix(dims.vocab, d, rng),
        enc: (0..dims.blocks).map(|_| init_enc_block(d, dims.ffn_mult, rng)).collect(),
        dec: (0..dims.blocks).map(|_| init_dec_block(d, dims.ffn_mult, rng)).collect(),
        out: super::init_linear(d, dims.vocab, rng),
    }
}

/// Sinusoidal position table (len x d), added as a constant.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(len, d);
    for pos in 0..len {
        for i in 0..d {
            let angle = pos as f64 / 10000f64.powf(2.0 * (i / 2) as f64 / d as f64);
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

pub fn add_positions(tape: &mut Tape, x: NodeId, d: usize) -> NodeId {
    let len = tape.value(x).rows;
    tape.add_const_tensor(x, Rc::new(positional_encoding(len, d)))
}

/// Multi-head attention for one sample; optional causal masking.
pub fn mha_forward(
    tape: &mut Tape,
    p: &MhaN,
    x_q: NodeId,
    x_kv: NodeId,
    heads: usize,
    causal: bool,
) -> NodeId {
    let d = tape.value(x_q).cols;
    let dk = d / heads;
    let q = tape.linear(x_q, p.q.w, p.q.b);
    let k = tape.linear(x_kv, p.k.w, p.k.b);
    let v = tape.linear(x_kv, p.v.w, p.v.b);
    let lq = tape.value(q).rows;
    let lk = tape.value(k).rows;
    let causal_mask: Option<Rc<Tensor>> = if causal {
        let mut m = Tensor::zeros(lq, lk);
        for r in 0..lq {
            for c in 0..lk {
                if c > r {
                    m.set(r, c, -1e9);
                }
            }
        }
        Some(Rc::new(m))
    } else {
        None
    };
    let mut head_ctxs: Vec<NodeId> = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, (h + 1) * dk);
        let kh = tape.slice_cols(k, h * dk, (h + 1) * dk);
        let vh = tape.slice_cols(v, h * dk, (h + 1) * dk);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt());
        let masked = match &causal_mask {
            Some(m) => tape.add_const_tensor(scaled, Rc::clone(m)),
            None => scaled,
        };
        let alpha = tape.softmax_rows(masked);
        let ctx = tape.matmul(alpha, vh);
        head_ctxs.push(ctx);
    }
    let cat = tape.concat_cols(&head_ctxs);
    tape.linear(cat, p.o.w, p.o.b)
}

fn ffn_forward(tape: &mut Tape, p: &FfnN, x: NodeId) -> NodeId {
    let h = tape.linear(x, p.w1.w, p.w1.b);
    let a = tape.relu(h);
    tape.linear(a, p.w2.w, p.w2.b)
}

fn residual_norm(tape: &mut Tape, ln: &LayerNormPN, x: NodeId, sub: NodeId) -> NodeId {
    let s = tape.add(x, sub);
    tape.layer_norm_rows(s, ln.gamma, ln.beta, 1e-5)
}

pub fn enc_block_forward(tape: &mut Tape, b: &EncBlockN, x: NodeId, heads: usize) -> NodeId {
    let sa = mha_forward(tape, &b.attn, x, x, heads, false);
    let x = residual_norm(tape, &b.ln1, x, sa);
    let ff = ffn_forward(tape, &b.ffn, x);
    residual_norm(tape, &b.ln2, x, ff)
}

fn dec_block_forward(tape: &mut Tape, b: &DecBlockN, x: NodeId, enc_out: NodeId, heads: usize) -> NodeId {
    let sa = mha_forward(tape, &b.self_attn, x, x, heads, true);
    let x = residual_norm(tape, &b.ln1, x, sa);
    let ca = mha_forward(tape, &b.cross, x, enc_out, heads, false);
    let x = residual_norm(tape, &b.ln2, x, ca);
    let ff = ffn_forward(tape, &b.ffn, x);
    residual_norm(tape, &b.ln3, x, ff)
}

/// Encoder stack over an embedded sequence (len x d).
pub fn encoder_stack(tape: &mut Tape, blocks: &[EncBlockN], x: NodeId, heads: usize) -> NodeId {
    let mut cur = x;
    for b in blocks {
        cur = enc_block_forward(tape, b, cur, heads);
    }
    cur
}

fn encode_query(tape: &mut Tape, n: &TransformerNodes, dims: &ModelDims, q: &SeqView) -> NodeId {
    let x = embed_sequence(tape, n.embed, q);
    let scaled = tape.scale(x, (dims.hidden as f64).sqrt());
    let x = add_positions(tape, scaled, dims.hidden);
    encoder_stack(tape, &n.enc, x, dims.heads)
}

/// Per-sample NLL (batch x 1), teacher-forced, EOS included.
pub fn transformer_nll(tape: &mut Tape, n: &TransformerNodes, dims: &ModelDims, pairs: &[PairView]) -> NodeId {
    assert!(!pairs.is_empty(), "empty batch");
    let d = dims.hidden;
    let mut per_sample: Vec<NodeId> = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let enc_out = encode_query(tape, n, dims, &pair.query);
        let t_dec = pair.response.len() + 1;
        // Decoder input: BOS then the (possibly relaxed) response.
        let bos = tape.gather_rows(n.embed, Rc::new(vec![BOS as usize]));
        let x = if pair.response.is_empty() {
            bos
        } else {
            let resp = embed_sequence(tape, n.embed, &pair.response);
            tape.concat_rows(&[bos, resp])
        };
        let scaled = tape.scale(x, (d as f64).sqrt());
        let x = add_positions(tape, scaled, d);
        let mut cur = x;
        for b in &n.dec {
            cur = dec_block_forward(tape, b, cur, enc_out, dims.heads);
        }
        let logits = tape.linear(cur, n.out.w, n.out.b);
        let logp = tape.log_softmax_rows(logits);
        let ll = match &pair.response {
            SeqView::Hard(ids) => {
                let idx: Vec<usize> = (0..t_dec).map(|t| hard_target_at(ids, t).0 as usize).collect();
                let taken = tape.take_per_row(logp, Rc::new(idx));
                tape.sum(taken)
            }
            SeqView::Soft { node, ids } => {
                // Soft targets for real positions, EOS one-hot for the stop.
                let eos = tape.constant(Tensor::one_hot(dims.vocab, EOS as usize));
                let target = if ids.is_empty() { eos } else { tape.concat_rows(&[*node, eos]) };
                let prod = tape.mul(target, logp);
                tape.sum(prod)
            }
        };
        per_sample.push(tape.scale(ll, -1.0));
    }
    tape.concat_rows(&per_sample)
}

/// Greedy/sampling decode; re-runs the decoder on the growing prefix.
pub fn transformer_decode(
    tape: &mut Tape,
    n: &TransformerNodes,
    dims: &ModelDims,
    query: &[u32],
    max_len: usize,
    pick: impl Fn(&mut Tape, NodeId, &mut ChaCha8Rng) -> u32,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let d = dims.hidden;
    let view = SeqView::Hard(query);
    let enc_out = encode_query(tape, n, dims, &view);
    let mut out: Vec<u32> = Vec::new();
    for _ in 0..max_len {
        let mut prefix = vec![BOS];
        prefix.extend(&out);
        let idx: Vec<usize> = prefix.iter().map(|&i| i as usize).collect();
        let x = tape.gather_rows(n.embed, Rc::new(idx));
        let scaled = tape.scale(x, (d as f64).sqrt());
        let x = add_positions(tape, scaled, d);
        let mut cur = x;
        for b in &n.dec {
            cur = dec_block_forward(tape, b, cur, enc_out, dims.heads);
        }
        let last = tape.value(cur).rows - 1;
        let h_last = tape.slice_rows(cur, last, last + 1);
        let logits = tape.linear(h_last, n.out.w, n.out.b);
        let next = pick(tape, logits, rng);
        if next == EOS {
            break;
        }
        out.push(next);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{batch_nll_nodes, build_model, Arch, DialogueModel};

    fn tiny_dims() -> ModelDims {
        let mut d = ModelDims::desk(Arch::Transformer, 12);
        d.embed = 8;
        d.hidden = 8;
        d.heads = 2;
        d.blocks = 1;
        d.ffn_mult = 2;
        d
    }

    #[test]
    fn nll_shape_and_nonnegativity() {
        let dims = tiny_dims();
        let model = build_model(&dims, 31).unwrap();
        let mut tape = Tape::new();
        let nodes = model.bind(&mut tape);
        let q1 = vec![4u32, 5, 6];
        let r1 = vec![7u32];
        let q2 = vec![8u32];
        let r2 = vec![9u32, 10, 11];
        let pairs = vec![PairView::hard(&q1, &r1), PairView::hard(&q2, &r2)];
        let nll = batch_nll_nodes(&mut tape, &nodes, &dims, &pairs);
        let v = tape.value(nll);
        assert_eq!(v.shape(), (2, 1));
        assert!(v.data.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn uniform_logits_value() {
        let dims = tiny_dims();
        let mut model = build_model(&dims, 33).unwrap();
        if let DialogueModel::Transformer(p) = &mut model {
            p.out.w = Tensor::zeros(dims.hidden, dims.vocab);
            p.out.b = Tensor::zeros(1, dims.vocab);
        }
        let mut tape = Tape::new();
        let nodes = model.bind(&mut tape);
        let q = vec![4u32, 5];
        let r = vec![6u32, 7, 8];
        let pairs = vec![PairView::hard(&q, &r)];
        let nll = batch_nll_nodes(&mut tape, &nodes, &dims, &pairs);
        let lnv = (dims.vocab as f64).ln();
        assert!((tape.value(nll).data[0] - 4.0 * lnv).abs() < 1e-4);
    }

    #[test]
    fn overfit_and_generate() {
        let dims = tiny_dims();
        let mut model = build_model(&dims, 35).unwrap();
        let q = vec![4u32, 5];
        let r = vec![5u32, 4];
        for _ in 0..500 {
            let mut tape = Tape::new();
            let nodes = model.bind(&mut tape);
            let pairs = vec![PairView::hard(&q, &r)];
            let nll = batch_nll_nodes(&mut tape, &nodes, &dims, &pairs);
            let loss = tape.sum(nll);
            let leaves = crate::params::leaf_nodes::<DialogueModel>(&nodes);
            let grads = tape.grad_values(loss, &leaves);
            crate::params::sgd_step(&mut model, &grads, 0.05, Some(5.0));
        }
        let cfg = crate::model::DecodeConfig { max_len: 6, ..Default::default() };
        let out = crate::model::generate(&model, &dims, &q, &cfg).unwrap();
        assert_eq!(out, r);
    }
}
