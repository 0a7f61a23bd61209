//! Recurrent seq2seq: stacked (optionally bidirectional) LSTM encoder, LSTM
//! decoder with Luong-style attention over the encoder states. Batched over
//! samples with padding masks; accepts relaxed token inputs.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{BOS, EOS, PAD};
use crate::param_pack;
use crate::params::Pack;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

use super::{embed_sequence, hard_target_at, init_matrix, input_token_at, ModelDims, PairView, SeqView};

param_pack! {
    pub struct Linear / LinearN {
        pub w: Tensor,
        pub b: Tensor,
    }
}

param_pack! {
    pub struct LstmCell / LstmCellN {
        pub wx: Tensor,
        pub wh: Tensor,
        pub b: Tensor,
    }
}

param_pack! {
    pub struct Seq2SeqParams / Seq2SeqNodes {
        pub embed: Tensor,
        pub enc_fwd: Vec<LstmCell>,
        pub enc_bwd: Vec<LstmCell>,
        pub bridge_h: Vec<Linear>,
        pub bridge_c: Vec<Linear>,
        pub dec: Vec<LstmCell>,
        pub attn: Tensor,
        pub combine: Linear,
        pub out: Linear,
    }
}

fn init_cell<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> LstmCell {
    let mut b = Tensor::zeros(1, 4 * hidden);
    // Forget-gate bias at 1 helps early gradient flow.
    for i in hidden..2 * hidden {
        b.data[i] = 1.0;
    }
    LstmCell {
        wx: init_matrix(input, 4 * hidden, rng),
        wh: init_matrix(hidden, 4 * hidden, rng),
        b,
    }
}

pub fn init_seq2seq<R: Rng>(dims: &ModelDims, rng: &mut R) -> Seq2SeqParams {
    let (v, e, h) = (dims.vocab, dims.embed, dims.hidden);
    let enc_out = if dims.bidirectional { 2 * h } else { h };
    let mut enc_fwd = Vec::new();
    let mut enc_bwd = Vec::new();
    for layer in 0..dims.enc_layers {
        let input = if layer == 0 { e } else { enc_out };
        enc_fwd.push(init_cell(input, h, rng));
        if dims.bidirectional {
            enc_bwd.push(init_cell(input, h, rng));
        }
    }
    let mut bridge_h = Vec::new();
    let mut bridge_c = Vec::new();
    let mut dec = Vec::new();
    for layer in 0..dims.dec_layers {
        bridge_h.push(super::init_linear(enc_out, h, rng));
        bridge_c.push(super::init_linear(enc_out, h, rng));
        let input = if layer == 0 { e } else { h };
        dec.push(init_cell(input, h, rng));
    }
    Seq2SeqParams {
        embed: init_matrix(v, e, rng),
        enc_fwd,
        enc_bwd,
        bridge_h,
        bridge_c,
        dec,
        attn: init_matrix(h, enc_out, rng),
        combine: super::init_linear(h + enc_out, h, rng),
        out: super::init_linear(h, v, rng),
    }
}

/// Closed-form parameter count for the configured dims; kept next to the
/// initializer so the two cannot drift apart silently.
pub fn seq2seq_param_count(dims: &ModelDims) -> usize {
    let (v, e, h) = (dims.vocab, dims.embed, dims.hidden);
    let enc_out = if dims.bidirectional { 2 * h } else { h };
    let cell = |input: usize| input * 4 * h + h * 4 * h + 4 * h;
    let dirs = if dims.bidirectional { 2 } else { 1 };
    let mut n = v * e;
    for layer in 0..dims.enc_layers {
        let input = if layer == 0 { e } else { enc_out };
        n += dirs * cell(input);
    }
    for layer in 0..dims.dec_layers {
        n += 2 * (enc_out * h + h); // bridges
        let input = if layer == 0 { e } else { h };
        n += cell(input);
    }
    n += h * enc_out; // attention
    n += (h + enc_out) * h + h; // combine
    n += h * v + v; // output projection
    n
}

struct StepMasks {
    keep: Rc<Tensor>,
    carry: Rc<Tensor>,
}

fn state_masks(mask_cols: &[Vec<f64>], hidden: usize) -> Vec<StepMasks> {
    mask_cols
        .iter()
        .map(|col| {
            let b = col.len();
            let mut keep = Tensor::zeros(b, hidden);
            let mut carry = Tensor::zeros(b, hidden);
            for (r, &m) in col.iter().enumerate() {
                for c in 0..hidden {
                    keep.data[r * hidden + c] = m;
                    carry.data[r * hidden + c] = 1.0 - m;
                }
            }
            StepMasks { keep: Rc::new(keep), carry: Rc::new(carry) }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn lstm_step(
    tape: &mut Tape,
    cell: &LstmCellN,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    hidden: usize,
    masks: Option<&StepMasks>,
) -> (NodeId, NodeId) {
    let xg = tape.matmul(x, cell.wx);
    let hg = tape.matmul(h, cell.wh);
    let sum = tape.add(xg, hg);
    let rows = tape.value(sum).rows;
    let brep = tape.repeat_rows(cell.b, rows);
    let gates = tape.add(sum, brep);
    let i_g = tape.slice_cols(gates, 0, hidden);
    let f_g = tape.slice_cols(gates, hidden, 2 * hidden);
    let g_g = tape.slice_cols(gates, 2 * hidden, 3 * hidden);
    let o_g = tape.slice_cols(gates, 3 * hidden, 4 * hidden);
    let i_s = tape.sigmoid(i_g);
    let f_s = tape.sigmoid(f_g);
    let g_t = tape.tanh(g_g);
    let o_s = tape.sigmoid(o_g);
    let fc = tape.mul(f_s, c);
    let ig = tape.mul(i_s, g_t);
    let c_new = tape.add(fc, ig);
    let ct = tape.tanh(c_new);
    let h_new = tape.mul(o_s, ct);
    match masks {
        None => (h_new, c_new),
        Some(m) => {
            // Padded steps carry the previous state through unchanged.
            let hk = tape.mul_const_tensor(h_new, Rc::clone(&m.keep));
            let hc = tape.mul_const_tensor(h, Rc::clone(&m.carry));
            let h_out = tape.add(hk, hc);
            let ck = tape.mul_const_tensor(c_new, Rc::clone(&m.keep));
            let cc = tape.mul_const_tensor(c, Rc::clone(&m.carry));
            let c_out = tape.add(ck, cc);
            (h_out, c_out)
        }
    }
}

pub(super) struct EncoderRun {
    /// Per source position, (batch x enc_out) states of the top layer.
    pub outputs: Vec<NodeId>,
    /// Per layer, final (h, c) concatenated over directions.
    pub finals: Vec<(NodeId, NodeId)>,
    /// Additive attention mask (0 for real positions, -1e9 for padding).
    pub attn_mask: Rc<Tensor>,
    pub mask_cols: Vec<Vec<f64>>,
}

/// Per-step (batch x embed) input rows for a list of sequences, padded with
/// the PAD embedding row.
fn batched_inputs(
    tape: &mut Tape,
    embed: NodeId,
    views: &[SeqView],
    width: usize,
    all_hard: bool,
) -> (Vec<NodeId>, Vec<Vec<f64>>) {
    let mut mask_cols = Vec::with_capacity(width);
    for t in 0..width {
        mask_cols.push(views.iter().map(|v| if t < v.len() { 1.0 } else { 0.0 }).collect());
    }
    if all_hard {
        // One gather per step over the whole batch.
        let steps = (0..width)
            .map(|t| {
                let idx: Vec<usize> = views
                    .iter()
                    .map(|v| v.ids().get(t).copied().unwrap_or(PAD) as usize)
                    .collect();
                tape.gather_rows(embed, Rc::new(idx))
            })
            .collect();
        return (steps, mask_cols);
    }
    // Mixed batch: one embedded matrix per sample, sliced per step.
    let mats: Vec<NodeId> = views.iter().map(|v| embed_sequence(tape, embed, v)).collect();
    let pad_row = tape.gather_rows(embed, Rc::new(vec![PAD as usize]));
    let steps = (0..width)
        .map(|t| {
            let rows: Vec<NodeId> = views
                .iter()
                .zip(&mats)
                .map(|(v, &m)| if t < v.len() { tape.slice_rows(m, t, t + 1) } else { pad_row })
                .collect();
            tape.concat_rows(&rows)
        })
        .collect();
    (steps, mask_cols)
}

pub(super) fn run_encoder(
    tape: &mut Tape,
    nodes: &Seq2SeqNodes,
    dims: &ModelDims,
    queries: &[SeqView],
) -> EncoderRun {
    let b = queries.len();
    let h = dims.hidden;
    let width = queries.iter().map(|q| q.len()).max().unwrap_or(1);
    let all_hard = queries.iter().all(|q| q.is_hard());
    let (inputs, mask_cols) = batched_inputs(tape, nodes.embed, queries, width, all_hard);
    let masks = state_masks(&mask_cols, h);

    let mut layer_inputs: Vec<NodeId> = inputs;
    let mut finals = Vec::new();
    for layer in 0..dims.enc_layers {
        let zero = tape.constant(Tensor::zeros(b, h));
        let (mut hf, mut cf) = (zero, zero);
        let mut fwd_states = Vec::with_capacity(width);
        for t in 0..width {
            let (hn, cn) = lstm_step(tape, &nodes.enc_fwd[layer], layer_inputs[t], hf, cf, h, Some(&masks[t]));
            hf = hn;
            cf = cn;
            fwd_states.push(hf);
        }
        if dims.bidirectional {
            let zero = tape.constant(Tensor::zeros(b, h));
            let (mut hb, mut cb) = (zero, zero);
            let mut bwd_states = vec![zero; width];
            for t in (0..width).rev() {
                let (hn, cn) =
                    lstm_step(tape, &nodes.enc_bwd[layer], layer_inputs[t], hb, cb, h, Some(&masks[t]));
                hb = hn;
                cb = cn;
                bwd_states[t] = hb;
            }
            let h_cat = tape.concat_cols(&[hf, hb]);
            let c_cat = tape.concat_cols(&[cf, cb]);
            finals.push((h_cat, c_cat));
            layer_inputs = (0..width).map(|t| tape.concat_cols(&[fwd_states[t], bwd_states[t]])).collect();
        } else {
            finals.push((hf, cf));
            layer_inputs = fwd_states;
        }
    }

    let mut attn_mask = Tensor::zeros(b, width);
    for (r, _) in queries.iter().enumerate() {
        for t in 0..width {
            if mask_cols[t][r] == 0.0 {
                attn_mask.data[r * width + t] = -1e9;
            }
        }
    }
    EncoderRun { outputs: layer_inputs, finals, attn_mask: Rc::new(attn_mask), mask_cols }
}

fn attention(
    tape: &mut Tape,
    attn_w: NodeId,
    h_top: NodeId,
    enc: &EncoderRun,
    enc_dim: usize,
) -> NodeId {
    let ha = tape.matmul(h_top, attn_w);
    let scores: Vec<NodeId> = enc
        .outputs
        .iter()
        .map(|&s| {
            let prod = tape.mul(ha, s);
            tape.sum_cols(prod)
        })
        .collect();
    let score_mat = tape.concat_cols(&scores);
    let masked = tape.add_const_tensor(score_mat, Rc::clone(&enc.attn_mask));
    let alpha = tape.softmax_rows(masked);
    let mut ctx: Option<NodeId> = None;
    for (l, &s) in enc.outputs.iter().enumerate() {
        let a_l = tape.slice_cols(alpha, l, l + 1);
        let a_rep = tape.repeat_cols(a_l, enc_dim);
        let term = tape.mul(a_rep, s);
        ctx = Some(match ctx {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    ctx.expect("attention over empty source")
}

/// Decoder state for incremental stepping.
struct DecState {
    h: Vec<NodeId>,
    c: Vec<NodeId>,
}

fn init_dec_state(tape: &mut Tape, nodes: &Seq2SeqNodes, dims: &ModelDims, enc: &EncoderRun) -> DecState {
    let mut h = Vec::new();
    let mut c = Vec::new();
    for layer in 0..dims.dec_layers {
        let (eh, ec) = enc.finals[layer];
        let bh = tape.linear(eh, nodes.bridge_h[layer].w, nodes.bridge_h[layer].b);
        let bc = tape.linear(ec, nodes.bridge_c[layer].w, nodes.bridge_c[layer].b);
        h.push(tape.tanh(bh));
        c.push(tape.tanh(bc));
    }
    DecState { h, c }
}

fn dec_step(
    tape: &mut Tape,
    nodes: &Seq2SeqNodes,
    dims: &ModelDims,
    state: &mut DecState,
    x: NodeId,
    enc: &EncoderRun,
) -> NodeId {
    let h = dims.hidden;
    let enc_dim = if dims.bidirectional { 2 * h } else { h };
    let mut input = x;
    for layer in 0..dims.dec_layers {
        let (hn, cn) = lstm_step(tape, &nodes.dec[layer], input, state.h[layer], state.c[layer], h, None);
        state.h[layer] = hn;
        state.c[layer] = cn;
        input = hn;
    }
    let ctx = attention(tape, nodes.attn, input, enc, enc_dim);
    let cat = tape.concat_cols(&[input, ctx]);
    let pre = tape.linear(cat, nodes.combine.w, nodes.combine.b);
    let comb = tape.tanh(pre);
    tape.linear(comb, nodes.out.w, nodes.out.b)
}

/// Per-sample NLL (batch x 1), teacher-forced, EOS included, padding masked.
pub fn seq2seq_nll(tape: &mut Tape, nodes: &Seq2SeqNodes, dims: &ModelDims, pairs: &[PairView]) -> NodeId {
    assert!(!pairs.is_empty(), "empty batch");
    let b = pairs.len();
    let queries: Vec<SeqView> = pairs.iter().map(|p| p.query).collect();
    let responses: Vec<SeqView> = pairs.iter().map(|p| p.response).collect();
    let enc = run_encoder(tape, nodes, dims, &queries);
    let mut state = init_dec_state(tape, nodes, dims, &enc);

    let t_dec = responses.iter().map(|r| r.len()).max().unwrap_or(0) + 1;
    let all_hard = responses.iter().all(|r| r.is_hard());
    // Pre-embed soft responses once; inputs are sliced from these.
    let resp_mats: Vec<Option<NodeId>> = responses
        .iter()
        .map(|r| match r {
            SeqView::Hard(_) => None,
            SeqView::Soft { .. } => Some(embed_sequence(tape, nodes.embed, r)),
        })
        .collect();
    let pad_row = tape.gather_rows(nodes.embed, Rc::new(vec![PAD as usize]));
    let bos_row = tape.gather_rows(nodes.embed, Rc::new(vec![BOS as usize]));

    let mut nll_acc: Option<NodeId> = None;
    for t in 0..t_dec {
        // Teacher-forcing input at step t.
        let x = if all_hard {
            let idx: Vec<usize> =
                responses.iter().map(|r| input_token_at(r.ids(), t) as usize).collect();
            tape.gather_rows(nodes.embed, Rc::new(idx))
        } else {
            let rows: Vec<NodeId> = responses
                .iter()
                .zip(&resp_mats)
                .map(|(r, m)| {
                    if t == 0 {
                        bos_row
                    } else if t - 1 < r.len() {
                        match m {
                            Some(mat) => tape.slice_rows(*mat, t - 1, t),
                            None => {
                                let id = r.ids()[t - 1] as usize;
                                tape.gather_rows(nodes.embed, Rc::new(vec![id]))
                            }
                        }
                    } else {
                        pad_row
                    }
                })
                .collect();
            tape.concat_rows(&rows)
        };
        let logits = dec_step(tape, nodes, dims, &mut state, x, &enc);
        let logp = tape.log_softmax_rows(logits);

        let mask: Vec<f64> = responses.iter().map(|r| hard_target_at(r.ids(), t).1).collect();
        let step_ll = if all_hard {
            let idx: Vec<usize> =
                responses.iter().map(|r| hard_target_at(r.ids(), t).0 as usize).collect();
            tape.take_per_row(logp, Rc::new(idx))
        } else {
            // Soft targets: cross-entropy rows against the relaxed
            // distributions; EOS and hard rows are exact one-hots.
            let rows: Vec<NodeId> = responses
                .iter()
                .map(|r| match r {
                    SeqView::Hard(ids) => {
                        let (tok, _) = hard_target_at(ids, t);
                        tape.constant(Tensor::one_hot(dims.vocab, tok as usize))
                    }
                    SeqView::Soft { node, ids } => {
                        if t < ids.len() {
                            tape.slice_rows(*node, t, t + 1)
                        } else {
                            let (tok, _) = hard_target_at(ids, t);
                            tape.constant(Tensor::one_hot(dims.vocab, tok as usize))
                        }
                    }
                })
                .collect();
            let target = tape.concat_rows(&rows);
            let prod = tape.mul(target, logp);
            tape.sum_cols(prod)
        };
        let masked = tape.mul_const_tensor(step_ll, Rc::new(Tensor::col_vec(mask)));
        nll_acc = Some(match nll_acc {
            None => masked,
            Some(acc) => tape.add(acc, masked),
        });
    }
    let ll = nll_acc.expect("decoder ran zero steps");
    debug_assert_eq!(tape.value(ll).shape(), (b, 1));
    tape.scale(ll, -1.0)
}

/// Greedy/sampling decode for one query; `pick` maps logits to a token id.
pub fn seq2seq_decode(
    tape: &mut Tape,
    nodes: &Seq2SeqNodes,
    dims: &ModelDims,
    query: &[u32],
    max_len: usize,
    pick: impl Fn(&mut Tape, NodeId, &mut ChaCha8Rng) -> u32,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let views = [SeqView::Hard(query)];
    let enc = run_encoder(tape, nodes, dims, &views);
    let mut state = init_dec_state(tape, nodes, dims, &enc);
    let mut out = Vec::new();
    let mut token = BOS;
    for _ in 0..max_len {
        let x = tape.gather_rows(nodes.embed, Rc::new(vec![token as usize]));
        let logits = dec_step(tape, nodes, dims, &mut state, x, &enc);
        let next = pick(tape, logits, rng);
        if next == EOS {
            break;
        }
        out.push(next);
        token = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{batch_nll_nodes, build_model, Arch, DialogueModel};
    use crate::params::{parameter_count, Pack};

    fn tiny_dims() -> ModelDims {
        let mut d = ModelDims::desk(Arch::Seq2Seq, 12);
        d.embed = 6;
        d.hidden = 8;
        d.enc_layers = 2;
        d.dec_layers = 1;
        d
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for dims in [tiny_dims(), ModelDims::desk(Arch::Seq2Seq, 50)] {
            let model = build_model(&dims, 3).unwrap();
            let DialogueModel::Seq2Seq(p) = &model else { panic!() };
            assert_eq!(parameter_count(p), seq2seq_param_count(&dims));
        }
        // Unidirectional variant exercises the other branch of the formula.
        let mut uni = tiny_dims();
        uni.bidirectional = false;
        let model = build_model(&uni, 3).unwrap();
        let DialogueModel::Seq2Seq(p) = &model else { panic!() };
        assert_eq!(parameter_count(p), seq2seq_param_count(&uni));
    }

    #[test]
    fn uniform_logits_give_len_times_log_vocab() {
        // Zero the output projection: logits are all equal, so every token
        // carries -log(1/V) and a response of length L costs (L+1) log V
        // including the EOS step.
        let dims = tiny_dims();
        let mut model = build_model(&dims, 5).unwrap();
        if let DialogueModel::Seq2Seq(p) = &mut model {
            p.out.w = Tensor::zeros(dims.hidden, dims.vocab);
            p.out.b = Tensor::zeros(1, dims.vocab);
        }
        let mut tape = Tape::new();
        let nodes = model.bind(&mut tape);
        let q1 = vec![4u32, 5, 6];
        let r1 = vec![7u32, 8];
        let q2 = vec![9u32];
        let r2 = vec![4u32, 5, 6, 7];
        let pairs = vec![PairView::hard(&q1, &r1), PairView::hard(&q2, &r2)];
        let nll = batch_nll_nodes(&mut tape, &nodes, &dims, &pairs);
        let v = tape.value(nll);
        let lnv = (dims.vocab as f64).ln();
        assert!((v.data[0] - 3.0 * lnv).abs() < 1e-4, "{} vs {}", v.data[0], 3.0 * lnv);
        assert!((v.data[1] - 5.0 * lnv).abs() < 1e-4);
    }

    #[test]
    fn nll_is_non_negative() {
        let dims = tiny_dims();
        let model = build_model(&dims, 9).unwrap();
        let mut tape = Tape::new();
        let nodes = model.bind(&mut tape);
        let q = vec![4u32, 5];
        let r = vec![6u32, 7, 8];
        let pairs = vec![PairView::hard(&q, &r)];
        let nll = batch_nll_nodes(&mut tape, &nodes, &dims, &pairs);
        assert!(tape.value(nll).data[0] >= 0.0);
    }

    #[test]
    fn padding_does_not_change_nll() {
        // The same pairs batched alone vs alongside a longer pair (which
        // forces extra PAD columns) must produce identical NLL entries.
        let dims = tiny_dims();
        let model = build_model(&dims, 13).unwrap();
        let q1 = vec![4u32, 5, 6];
        let r1 = vec![7u32, 8];
        let q2 = vec![9u32, 10, 11, 4, 5, 6, 7];
        let r2 = vec![4u32, 5, 6, 7, 8, 9];
        let solo = {
            let mut tape = Tape::new();
            let nodes = model.bind(&mut tape);
            let pairs = vec![PairView::hard(&q1, &r1)];
            let nll = batch_nll_nodes(&mut tape, &nodes, &dims, &pairs);
            tape.value(nll).data[0]
        };
        let padded = {
            let mut tape = Tape::new();
            let nodes = model.bind(&mut tape);
            let pairs = vec![PairView::hard(&q1, &r1), PairView::hard(&q2, &r2)];
            let nll = batch_nll_nodes(&mut tape, &nodes, &dims, &pairs);
            tape.value(nll).data[0]
        };
        assert!((solo - padded).abs() < 1e-6, "{} vs {}", solo, padded);
    }

    #[test]
    fn soft_one_hot_matches_hard() {
        // A relaxed sentence whose rows are exact one-hots must produce the
        // same NLL as the hard ids it encodes.
        let dims = tiny_dims();
        let model = build_model(&dims, 21).unwrap();
        let q = vec![4u32, 5, 6];
        let r = vec![7u32, 8];
        let hard = {
            let mut tape = Tape::new();
            let nodes = model.bind(&mut tape);
            let pairs = vec![PairView::hard(&q, &r)];
            let nll = batch_nll_nodes(&mut tape, &nodes, &dims, &pairs);
            tape.value(nll).data[0]
        };
        let soft = {
            let mut tape = Tape::new();
            let nodes = model.bind(&mut tape);
            let one_hot = |ids: &[u32]| -> Tensor {
                let mut t = Tensor::zeros(ids.len(), dims.vocab);
                for (i, &id) in ids.iter().enumerate() {
                    t.set(i, id as usize, 1.0);
                }
                t
            };
            let qn = tape.constant(one_hot(&q));
            let rn = tape.constant(one_hot(&r));
            let pairs = vec![PairView {
                query: SeqView::Soft { node: qn, ids: &q },
                response: SeqView::Soft { node: rn, ids: &r },
            }];
            let nll = batch_nll_nodes(&mut tape, &nodes, &dims, &pairs);
            tape.value(nll).data[0]
        };
        assert!((hard - soft).abs() < 1e-9, "{} vs {}", hard, soft);
    }

    #[test]
    fn gradcheck_theta_on_tiny_model() {
        // dWeightedLoss/dTheta against central differences on a sample of
        // coordinates, relative error < 1e-3.
        let dims = tiny_dims();
        let model = build_model(&dims, 17).unwrap();
        let q1 = vec![4u32, 5];
        let r1 = vec![6u32];
        let q2 = vec![7u32, 8, 9];
        let r2 = vec![10u32, 11];
        let weights = Tensor::col_vec(vec![0.7, 0.3]);

        let loss_of = |m: &DialogueModel| -> f64 {
            let mut tape = Tape::new();
            let nodes = m.bind(&mut tape);
            let pairs = vec![PairView::hard(&q1, &r1), PairView::hard(&q2, &r2)];
            let nll = batch_nll_nodes(&mut tape, &nodes, &dims, &pairs);
            let w = tape.constant(weights.clone());
            let loss = crate::model::weighted_loss_nodes(&mut tape, nll, w);
            tape.scalar_value(loss)
        };

        let mut tape = Tape::new();
        let nodes = model.bind(&mut tape);
        let pairs = vec![PairView::hard(&q1, &r1), PairView::hard(&q2, &r2)];
        let nll = batch_nll_nodes(&mut tape, &nodes, &dims, &pairs);
        let w = tape.constant(weights.clone());
        let loss = crate::model::weighted_loss_nodes(&mut tape, nll, w);
        let leaves = crate::params::leaf_nodes::<DialogueModel>(&nodes);
        let grads = tape.grad_values(loss, &leaves);

        // Flatten analytic gradients in visit order.
        let mut flat: Vec<f64> = Vec::new();
        let mut shapes: Vec<usize> = Vec::new();
        model.visit(&mut |t| shapes.push(t.len()));
        for (g, n) in grads.iter().zip(&shapes) {
            match g {
                Some(t) => flat.extend_from_slice(&t.data),
                None => flat.extend(std::iter::repeat(0.0).take(*n)),
            }
        }

        let total: usize = shapes.iter().sum();
        let mut rng = crate::rng::stream_rng(99, "gradcheck", 0);
        let eps = 1e-5;
        for _ in 0..25 {
            let coord = rng.gen_range(0..total);
            let mut plus = model.clone();
            perturb(&mut plus, coord, eps);
            let mut minus = model.clone();
            perturb(&mut minus, coord, -eps);
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            let an = flat[coord];
            let denom = an.abs().max(fd.abs()).max(1e-4);
            assert!(
                ((an - fd) / denom).abs() < 1e-3,
                "coord {}: analytic {} vs fd {}",
                coord,
                an,
                fd
            );
        }
    }

    fn perturb(model: &mut DialogueModel, coord: usize, delta: f64) {
        let mut at = 0usize;
        model.visit_mut(&mut |t| {
            if coord >= at && coord < at + t.len() {
                t.data[coord - at] += delta;
            }
            at += t.len();
        });
    }

    #[test]
    fn overfit_single_pair_and_generate_it() {
        let mut dims = tiny_dims();
        dims.enc_layers = 1;
        let mut model = build_model(&dims, 23).unwrap();
        let q = vec![4u32, 5, 6];
        let r = vec![6u32, 5, 4];
        for _ in 0..500 {
            let mut tape = Tape::new();
            let nodes = model.bind(&mut tape);
            let pairs = vec![PairView::hard(&q, &r)];
            let nll = batch_nll_nodes(&mut tape, &nodes, &dims, &pairs);
            let loss = tape.sum(nll);
            let leaves = crate::params::leaf_nodes::<DialogueModel>(&nodes);
            let grads = tape.grad_values(loss, &leaves);
            crate::params::sgd_step(&mut model, &grads, 0.1, Some(5.0));
        }
        let mut tape = Tape::new();
        let nodes = model.bind(&mut tape);
        let pairs = vec![PairView::hard(&q, &r)];
        let nll = batch_nll_nodes(&mut tape, &nodes, &dims, &pairs);
        let final_nll = tape.value(nll).data[0];
        assert!(final_nll < 0.05, "memorized pair still has NLL {}", final_nll);

        let cfg = crate::model::DecodeConfig { max_len: 8, ..Default::default() };
        let out = crate::model::generate(&model, &dims, &q, &cfg).unwrap();
        assert_eq!(out, r);
        let again = crate::model::generate(&model, &dims, &q, &cfg).unwrap();
        assert_eq!(out, again);
        assert!(out.len() <= cfg.max_len);
    }
}
