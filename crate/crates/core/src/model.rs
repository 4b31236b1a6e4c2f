//! Small causal transformer language model.
//!
//! Pre-norm blocks: RMSNorm -> multi-head causal self-attention with rotary
//! position embeddings -> residual, then RMSNorm -> GELU MLP -> residual.
//! No biases. Attention is a single fused tape op with a hand-derived
//! backward pass, verified against finite differences in the tests.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::rope::RopeTable;
use crate::tensor::{NamedTensors, Tensor};

fn default_rope_theta() -> f32 {
    10_000.0
}

fn default_rms_eps() -> f32 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Longest sequence the rotary table covers.
    pub max_seq: usize,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f32,
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f32,
}

impl ModelConfig {
    /// A configuration small enough for tests while still exercising
    /// multi-head attention and multiple blocks.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab: 32,
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            max_seq: 32,
            rope_theta: 10_000.0,
            rms_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config("vocab must be at least 2".into()));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary pairs",
                self.head_dim()
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_seq == 0 {
            return Err(Error::Config("n_layers, d_ff, max_seq must be positive".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes, in checkpoint order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![("embed.weight".to_string(), vec![self.vocab, d])];
        for i in 0..self.n_layers {
            let p = format!("layers.{i}");
            out.push((format!("{p}.attn.norm"), vec![d]));
            out.push((format!("{p}.attn.wq"), vec![d, d]));
            out.push((format!("{p}.attn.wk"), vec![d, d]));
            out.push((format!("{p}.attn.wv"), vec![d, d]));
            out.push((format!("{p}.attn.wo"), vec![d, d]));
            out.push((format!("{p}.mlp.norm"), vec![d]));
            out.push((format!("{p}.mlp.w_in"), vec![d, self.d_ff]));
            out.push((format!("{p}.mlp.w_out"), vec![self.d_ff, d]));
        }
        out.push(("final.norm".to_string(), vec![d]));
        out.push(("lm_head.weight".to_string(), vec![d, self.vocab]));
        out
    }

    pub fn rope_table(&self) -> RopeTable {
        RopeTable::new(self.head_dim(), self.max_seq, self.rope_theta)
    }
}

/// Initializes parameters: N(0, 0.02) for projection weights, ones for norms.
/// Each tensor draws from its own derived stream, so adding or removing a
/// tensor does not shift any other tensor's values.
pub fn init_params(cfg: &ModelConfig, rng: &Rng) -> NamedTensors {
    let init = rng.derive("init", 0);
    let mut params = NamedTensors::new();
    for (name, shape) in cfg.param_shapes() {
        let mut t = Tensor::zeros(&shape);
        if name.ends_with(".norm") {
            t.data_mut().fill(1.0);
        } else {
            init.derive(&name, 0).fill_normal(t.data_mut(), 0.02);
        }
        params.insert(name, t);
    }
    params
}

/// Forward graph handle: the logits node plus the tape node of every
/// parameter, for reading gradients back out by name.
pub struct ForwardGraph {
    pub logits: NodeId,
    pub param_nodes: BTreeMap<String, NodeId>,
}

/// Builds the forward pass for a flat batch of token ids laid out as
/// `batch` sequences of `seq` tokens. Returns logits of shape
/// `[batch*seq, vocab]`. When `trainable` is false, parameters enter the
/// tape as constants and backward will not touch them.
#[allow(clippy::too_many_arguments)]
pub fn build_forward(
    tape: &mut Tape,
    params: &NamedTensors,
    cfg: &ModelConfig,
    rope: &Arc<RopeTable>,
    ids: &[usize],
    batch: usize,
    seq: usize,
    trainable: bool,
) -> ForwardGraph {
    assert_eq!(ids.len(), batch * seq, "ids length");
    assert!(seq <= cfg.max_seq, "sequence longer than rope table");

    let mut param_nodes = BTreeMap::new();
    let mut node_of = |tape: &mut Tape, name: &str| -> NodeId {
        let t = params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .clone();
        let id = if trainable { tape.leaf(t) } else { tape.constant(t) };
        param_nodes.insert(name.to_string(), id);
        id
    };

    let embed = node_of(tape, "embed.weight");
    let mut x = tape.embedding(embed, ids);

    for i in 0..cfg.n_layers {
        let p = format!("layers.{i}");
        let attn_norm = node_of(tape, &format!("{p}.attn.norm"));
        let wq = node_of(tape, &format!("{p}.attn.wq"));
        let wk = node_of(tape, &format!("{p}.attn.wk"));
        let wv = node_of(tape, &format!("{p}.attn.wv"));
        let wo = node_of(tape, &format!("{p}.attn.wo"));
        let xn = tape.rmsnorm(x, attn_norm, cfg.rms_eps);
        let att = tape.attention(xn, wq, wk, wv, wo, batch, seq, cfg.n_heads, rope.clone());
        x = tape.add(x, att);

        let mlp_norm = node_of(tape, &format!("{p}.mlp.norm"));
        let w_in = node_of(tape, &format!("{p}.mlp.w_in"));
        let w_out = node_of(tape, &format!("{p}.mlp.w_out"));
        let xn2 = tape.rmsnorm(x, mlp_norm, cfg.rms_eps);
        let h = tape.matmul(xn2, w_in);
        let h = tape.gelu(h);
        let mlp_out = tape.matmul(h, w_out);
        x = tape.add(x, mlp_out);
    }

    let final_norm = node_of(tape, "final.norm");
    let xf = tape.rmsnorm(x, final_norm, cfg.rms_eps);
    let head = node_of(tape, "lm_head.weight");
    let logits = tape.matmul(xf, head);

    ForwardGraph {
        logits,
        param_nodes,
    }
}

/// Extracts named gradients from a backward result.
pub fn collect_grads(
    grads: &[Option<Tensor>],
    param_nodes: &BTreeMap<String, NodeId>,
    params: &NamedTensors,
) -> NamedTensors {
    let mut out = NamedTensors::new();
    for (name, id) in param_nodes {
        let g = match &grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(params.get(name).unwrap().shape()),
        };
        out.insert(name.clone(), g);
    }
    out
}

// ---- fused attention ---------------------------------------------------

impl Tape {
    /// Multi-head causal self-attention with rotary embeddings, fused into a
    /// single op. `xn` is `[batch*seq, d_model]`; the four projections are
    /// `[d_model, d_model]`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        xn: NodeId,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
        wo: NodeId,
        batch: usize,
        seq: usize,
        n_heads: usize,
        rope: Arc<RopeTable>,
    ) -> NodeId {
        let xv = self.value(xn);
        let d = xv.shape()[1];
        assert_eq!(xv.shape()[0], batch * seq);
        assert_eq!(d % n_heads, 0);
        let head_dim = d / n_heads;
        assert_eq!(rope.head_dim(), head_dim);

        let mut q = xv.matmul(self.value(wq));
        let mut k = xv.matmul(self.value(wk));
        let v = xv.matmul(self.value(wv));

        // rotate q and k per position and head
        for b in 0..batch {
            for t in 0..seq {
                let row = b * seq + t;
                for h in 0..n_heads {
                    let s = row * d + h * head_dim;
                    rope.apply(t, &mut q.data_mut()[s..s + head_dim]);
                    rope.apply(t, &mut k.data_mut()[s..s + head_dim]);
                }
            }
        }

        let scale = 1.0 / (head_dim as f64).sqrt();
        // probs rows indexed by ((b * n_heads + h) * seq + t), cols by source u
        let mut probs = Tensor::zeros(&[batch * n_heads * seq, seq]);
        let mut concat = Tensor::zeros(&[batch * seq, d]);
        let mut scores = vec![0.0f64; seq];
        for b in 0..batch {
            for h in 0..n_heads {
                let hs = h * head_dim;
                for t in 0..seq {
                    let q_row = &q.data()[(b * seq + t) * d + hs..][..head_dim];
                    let mut max = f64::NEG_INFINITY;
                    for (u, slot) in scores.iter_mut().enumerate().take(t + 1) {
                        let k_row = &k.data()[(b * seq + u) * d + hs..][..head_dim];
                        let dot: f64 = q_row
                            .iter()
                            .zip(k_row.iter())
                            .map(|(&a, &b)| a as f64 * b as f64)
                            .sum();
                        *slot = dot * scale;
                        max = max.max(*slot);
                    }
                    let mut denom = 0.0f64;
                    for s in scores.iter_mut().take(t + 1) {
                        *s = (*s - max).exp();
                        denom += *s;
                    }
                    let prow = ((b * n_heads + h) * seq + t) * seq;
                    for (u, &s) in scores.iter().enumerate().take(t + 1) {
                        probs.data_mut()[prow + u] = (s / denom) as f32;
                    }
                    // context vector
                    let mut ctx = vec![0.0f64; head_dim];
                    for u in 0..=t {
                        let p = probs.data()[prow + u] as f64;
                        let v_row = &v.data()[(b * seq + u) * d + hs..][..head_dim];
                        for (c, &vv) in ctx.iter_mut().zip(v_row.iter()) {
                            *c += p * vv as f64;
                        }
                    }
                    let out_row = &mut concat.data_mut()[(b * seq + t) * d + hs..][..head_dim];
                    for (o, &c) in out_row.iter_mut().zip(ctx.iter()) {
                        *o = c as f32;
                    }
                }
            }
        }

        let out = concat.matmul(self.value(wo));
        let op = AttentionOp {
            batch,
            seq,
            n_heads,
            head_dim,
            scale,
            rope,
            q_rot: q,
            k_rot: k,
            v,
            probs,
            concat,
        };
        self.push(out, vec![xn, wq, wk, wv, wo], Some(Box::new(op)), false)
    }
}

struct AttentionOp {
    batch: usize,
    seq: usize,
    n_heads: usize,
    head_dim: usize,
    scale: f64,
    rope: Arc<RopeTable>,
    q_rot: Tensor,
    k_rot: Tensor,
    v: Tensor,
    probs: Tensor,
    concat: Tensor,
}

impl Backward for AttentionOp {
    fn backward(&self, g: &Tensor, _v: &Tensor, p: &[&Tensor]) -> Vec<Option<Tensor>> {
        let (xn, wq, wk, wv, wo) = (p[0], p[1], p[2], p[3], p[4]);
        let (batch, seq, n_heads, head_dim) = (self.batch, self.seq, self.n_heads, self.head_dim);
        let d = n_heads * head_dim;

        let d_wo = self.concat.transpose().matmul(g);
        let d_concat = g.matmul(&wo.transpose());

        let mut dq = Tensor::zeros(&[batch * seq, d]);
        let mut dk = Tensor::zeros(&[batch * seq, d]);
        let mut dv = Tensor::zeros(&[batch * seq, d]);

        let mut d_probs = vec![0.0f64; seq];
        for b in 0..batch {
            for h in 0..n_heads {
                let hs = h * head_dim;
                for t in 0..seq {
                    let prow = ((b * n_heads + h) * seq + t) * seq;
                    let dc = &d_concat.data()[(b * seq + t) * d + hs..][..head_dim];

                    // dP[t,u] = dCtx_t . V_u ; also dV_u += P[t,u] * dCtx_t
                    for (u, slot) in d_probs.iter_mut().enumerate().take(t + 1) {
                        let v_row = &self.v.data()[(b * seq + u) * d + hs..][..head_dim];
                        let mut dot = 0.0f64;
                        for (&a, &vv) in dc.iter().zip(v_row.iter()) {
                            dot += a as f64 * vv as f64;
                        }
                        *slot = dot;
                        let pr = self.probs.data()[prow + u] as f64;
                        let dv_row = &mut dv.data_mut()[(b * seq + u) * d + hs..][..head_dim];
                        for (o, &a) in dv_row.iter_mut().zip(dc.iter()) {
                            *o += (pr * a as f64) as f32;
                        }
                    }

                    // softmax backward: dS = P * (dP - sum(dP * P))
                    let mut inner = 0.0f64;
                    for (u, &dp) in d_probs.iter().enumerate().take(t + 1) {
                        inner += dp * self.probs.data()[prow + u] as f64;
                    }
                    // dQ~_t = scale * sum_u dS[t,u] K~_u ; dK~_u += scale * dS[t,u] Q~_t
                    let q_row_base = (b * seq + t) * d + hs;
                    let mut dq_acc = vec![0.0f64; head_dim];
                    for (u, &dp) in d_probs.iter().enumerate().take(t + 1) {
                        let ds = self.probs.data()[prow + u] as f64 * (dp - inner);
                        if ds == 0.0 {
                            continue;
                        }
                        let k_row = &self.k_rot.data()[(b * seq + u) * d + hs..][..head_dim];
                        for (acc, &kv) in dq_acc.iter_mut().zip(k_row.iter()) {
                            *acc += self.scale * ds * kv as f64;
                        }
                        let q_row = &self.q_rot.data()[q_row_base..q_row_base + head_dim];
                        let dk_row = &mut dk.data_mut()[(b * seq + u) * d + hs..][..head_dim];
                        for (o, &qv) in dk_row.iter_mut().zip(q_row.iter()) {
                            *o += (self.scale * ds * qv as f64) as f32;
                        }
                    }
                    let dq_row = &mut dq.data_mut()[q_row_base..q_row_base + head_dim];
                    for (o, &a) in dq_row.iter_mut().zip(dq_acc.iter()) {
                        *o += a as f32;
                    }
                }
            }
        }

        // undo the rotation on dq, dk (inverse rotation = gradient of rotation)
        for b in 0..batch {
            for t in 0..seq {
                let row = b * seq + t;
                for h in 0..n_heads {
                    let s = row * d + h * head_dim;
                    self.rope.apply_inverse(t, &mut dq.data_mut()[s..s + head_dim]);
                    self.rope.apply_inverse(t, &mut dk.data_mut()[s..s + head_dim]);
                }
            }
        }

        let d_wq = xn.transpose().matmul(&dq);
        let d_wk = xn.transpose().matmul(&dk);
        let d_wv = xn.transpose().matmul(&dv);

        let mut d_xn = dq.matmul(&wq.transpose());
        d_xn.add_scaled(&dk.matmul(&wk.transpose()), 1.0);
        d_xn.add_scaled(&dv.matmul(&wv.transpose()), 1.0);

        vec![
            Some(d_xn),
            Some(d_wq),
            Some(d_wk),
            Some(d_wv),
            Some(d_wo),
        ]
    }
}

// ---- loss heads ----------------------------------------------------------

impl Tape {
    /// Mean next-token negative log-likelihood over all rows.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lv = self.value(logits);
        let (n, vocab) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(n, targets.len());
        let (probs, lp) = softmax_log_probs(lv, targets);
        let loss = -(lp.iter().sum::<f64>() / n as f64);
        let op = CrossEntropyOp {
            probs,
            targets: targets.to_vec(),
        };
        let _ = vocab;
        self.push(
            Tensor::scalar(loss as f32),
            vec![logits],
            Some(Box::new(op)),
            false,
        )
    }

    /// Per-sequence summed log-probability. Rows of `logits` are grouped
    /// into `n_seqs` contiguous blocks of equal length; output is `[n_seqs]`.
    pub fn sequence_log_prob(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        n_seqs: usize,
    ) -> NodeId {
        let lv = self.value(logits);
        let n = lv.shape()[0];
        assert_eq!(n, targets.len());
        assert!(n_seqs > 0 && n.is_multiple_of(n_seqs), "rows {} not divisible into {} sequences", n, n_seqs);
        let per = n / n_seqs;
        let (probs, lp) = softmax_log_probs(lv, targets);
        let mut out = vec![0.0f32; n_seqs];
        for s in 0..n_seqs {
            let total: f64 = lp[s * per..(s + 1) * per].iter().sum();
            out[s] = total as f32;
        }
        let op = SeqLogProbOp {
            probs,
            targets: targets.to_vec(),
            n_seqs,
        };
        self.push(
            Tensor::from_vec(&[n_seqs], out).unwrap(),
            vec![logits],
            Some(Box::new(op)),
            false,
        )
    }
}

/// Row-wise softmax probabilities plus per-row target log-probs.
fn softmax_log_probs(logits: &Tensor, targets: &[usize]) -> (Tensor, Vec<f64>) {
    let (n, vocab) = (logits.shape()[0], logits.shape()[1]);
    let mut probs = Tensor::zeros(&[n, vocab]);
    let mut lp = Vec::with_capacity(n);
    assert_eq!(targets.len(), n, "one target per row");
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits.data()[i * vocab..(i + 1) * vocab];
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let mut denom = 0.0f64;
        for &x in row {
            denom += (x as f64 - max).exp();
        }
        let lse = max + denom.ln();
        assert!(t < vocab, "target {} out of vocab {}", t, vocab);
        lp.push(row[t] as f64 - lse);
        let prow = &mut probs.data_mut()[i * vocab..(i + 1) * vocab];
        for (o, &x) in prow.iter_mut().zip(row.iter()) {
            *o = ((x as f64 - lse).exp()) as f32;
        }
    }
    (probs, lp)
}

struct CrossEntropyOp {
    probs: Tensor,
    targets: Vec<usize>,
}

impl Backward for CrossEntropyOp {
    fn backward(&self, g: &Tensor, _v: &Tensor, _p: &[&Tensor]) -> Vec<Option<Tensor>> {
        let gs = g.item() as f64;
        let (n, vocab) = (self.probs.shape()[0], self.probs.shape()[1]);
        let mut dl = self.probs.map(|p| (gs * p as f64 / n as f64) as f32);
        for (i, &t) in self.targets.iter().enumerate() {
            dl.data_mut()[i * vocab + t] -= (gs / n as f64) as f32;
        }
        vec![Some(dl)]
    }
}

struct SeqLogProbOp {
    probs: Tensor,
    targets: Vec<usize>,
    n_seqs: usize,
}

impl Backward for SeqLogProbOp {
    fn backward(&self, g: &Tensor, _v: &Tensor, _p: &[&Tensor]) -> Vec<Option<Tensor>> {
        let (n, vocab) = (self.probs.shape()[0], self.probs.shape()[1]);
        let per = n / self.n_seqs;
        let mut dl = Tensor::zeros(&[n, vocab]);
        for (i, &tgt) in self.targets.iter().enumerate() {
            let gs = g.data()[i / per] as f64;
            let prow = &self.probs.data()[i * vocab..(i + 1) * vocab];
            let drow = &mut dl.data_mut()[i * vocab..(i + 1) * vocab];
            for (o, &p) in drow.iter_mut().zip(prow.iter()) {
                *o = (-gs * p as f64) as f32;
            }
            drow[tgt] += gs as f32;
        }
        vec![Some(dl)]
    }
}
