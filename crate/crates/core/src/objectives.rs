//! Training and unlearning objectives.
//!
//! All heads share the transformer forward pass and differ only in how the
//! scalar loss is assembled from log-probabilities:
//!
//!   - `GradAscent`: negated mean cross-entropy on the forget set.
//!   - `GradDiff`: grad-ascent plus `retain_lambda` times retain-set
//!     cross-entropy, to anchor everything outside the forget set.
//!   - `Npo`: `(2/beta) * mean_s softplus(beta * (logp_s - logp_ref_s))`,
//!     a preference-style loss against a frozen reference model whose
//!     gradient saturates instead of diverging as the forget set is erased.
//!   - `SimNpo`: reference-free variant with length-normalized sequence
//!     log-probs, `(2/beta) * mean_s softplus(beta/len * logp_s + gamma)`.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::autodiff::{Backward, NodeId, Tape};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{build_forward, collect_grads, ModelConfig};
use crate::rope::RopeTable;
use crate::tensor::{NamedTensors, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    GradAscent,
    GradDiff { retain_lambda: f64 },
    Npo { beta: f64 },
    SimNpo { beta: f64, gamma: f64 },
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::GradAscent => "grad_ascent",
            Objective::GradDiff { .. } => "grad_diff",
            Objective::Npo { .. } => "npo",
            Objective::SimNpo { .. } => "simnpo",
        }
    }

    pub fn needs_reference(&self) -> bool {
        matches!(self, Objective::Npo { .. })
    }

    pub fn needs_retain(&self) -> bool {
        matches!(self, Objective::GradDiff { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Objective::GradDiff { retain_lambda } if retain_lambda < 0.0 => Err(Error::Config(
                "retain_lambda must be non-negative".into(),
            )),
            Objective::Npo { beta } | Objective::SimNpo { beta, .. } if beta <= 0.0 => {
                Err(Error::Config("beta must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Mean cross-entropy loss and parameter gradients for one batch. This is
/// the ordinary training step; unlearning heads build on it.
pub fn ce_loss_and_grads(
    params: &NamedTensors,
    cfg: &ModelConfig,
    rope: &Arc<RopeTable>,
    batch: &Batch,
) -> (f64, NamedTensors) {
    let mut tape = Tape::new();
    let g = build_forward(
        &mut tape,
        params,
        cfg,
        rope,
        &batch.inputs,
        batch.n_seqs,
        batch.seq_len,
        true,
    );
    let loss = tape.cross_entropy_mean(g.logits, &batch.targets);
    let value = tape.value(loss).item() as f64;
    let grads = tape.backward(loss);
    (value, collect_grads(&grads, &g.param_nodes, params))
}

/// Mean cross-entropy without gradients (reference/eval path).
pub fn ce_loss(
    params: &NamedTensors,
    cfg: &ModelConfig,
    rope: &Arc<RopeTable>,
    batch: &Batch,
) -> f64 {
    let mut tape = Tape::new();
    let g = build_forward(
        &mut tape,
        params,
        cfg,
        rope,
        &batch.inputs,
        batch.n_seqs,
        batch.seq_len,
        false,
    );
    let loss = tape.cross_entropy_mean(g.logits, &batch.targets);
    tape.value(loss).item() as f64
}

/// Per-sequence summed log-probabilities without gradients.
pub fn sequence_log_probs(
    params: &NamedTensors,
    cfg: &ModelConfig,
    rope: &Arc<RopeTable>,
    batch: &Batch,
) -> Vec<f64> {
    let mut tape = Tape::new();
    let g = build_forward(
        &mut tape,
        params,
        cfg,
        rope,
        &batch.inputs,
        batch.n_seqs,
        batch.seq_len,
        false,
    );
    let lp = tape.sequence_log_prob(g.logits, &batch.targets, batch.n_seqs);
    tape.value(lp).data().iter().map(|&v| v as f64).collect()
}

/// Loss head that is a fixed linear functional of the per-sequence
/// log-probs: value computed up front, gradient is the weight vector.
struct LinearHead {
    weights: Vec<f32>,
}

impl Backward for LinearHead {
    fn backward(&self, g: &Tensor, _v: &Tensor, _p: &[&Tensor]) -> Vec<Option<Tensor>> {
        let gs = g.item();
        let t = Tensor::from_vec(
            &[self.weights.len()],
            self.weights.iter().map(|&w| w * gs).collect(),
        )
        .unwrap();
        vec![Some(t)]
    }
}

fn attach_linear_head(tape: &mut Tape, lp: NodeId, value: f64, weights: Vec<f32>) -> NodeId {
    tape.push(
        Tensor::scalar(value as f32),
        vec![lp],
        Some(Box::new(LinearHead { weights })),
        false,
    )
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Computes the unlearning loss and its parameter gradients.
///
/// `reference` is required for `Npo` (the pre-unlearning model), `retain`
/// for `GradDiff`. The returned loss is the quantity being minimized.
pub fn unlearn_loss_and_grads(
    objective: &Objective,
    params: &NamedTensors,
    reference: Option<&NamedTensors>,
    cfg: &ModelConfig,
    rope: &Arc<RopeTable>,
    forget: &Batch,
    retain: Option<&Batch>,
) -> Result<(f64, NamedTensors)> {
    objective.validate()?;
    match *objective {
        Objective::GradAscent => {
            let (ce, mut grads) = ce_loss_and_grads(params, cfg, rope, forget);
            for (_, g) in grads.iter_mut() {
                g.scale(-1.0);
            }
            Ok((-ce, grads))
        }
        Objective::GradDiff { retain_lambda } => {
            let retain = retain.ok_or_else(|| {
                Error::Config("grad_diff requires a retain batch".into())
            })?;
            let (ce_f, mut grads) = ce_loss_and_grads(params, cfg, rope, forget);
            for (_, g) in grads.iter_mut() {
                g.scale(-1.0);
            }
            let (ce_r, grads_r) = ce_loss_and_grads(params, cfg, rope, retain);
            grads.add_scaled(&grads_r, retain_lambda as f32)?;
            Ok((-ce_f + retain_lambda * ce_r, grads))
        }
        Objective::Npo { beta } => {
            let reference = reference.ok_or_else(|| {
                Error::Config("npo requires a reference model".into())
            })?;
            let lp_ref = sequence_log_probs(reference, cfg, rope, forget);

            let mut tape = Tape::new();
            let g = build_forward(
                &mut tape,
                params,
                cfg,
                rope,
                &forget.inputs,
                forget.n_seqs,
                forget.seq_len,
                true,
            );
            let lp_node = tape.sequence_log_prob(g.logits, &forget.targets, forget.n_seqs);
            let lp: Vec<f64> = tape.value(lp_node).data().iter().map(|&v| v as f64).collect();

            let n = lp.len() as f64;
            let mut loss = 0.0f64;
            let mut weights = Vec::with_capacity(lp.len());
            for (l, r) in lp.iter().zip(lp_ref.iter()) {
                let z = l - r;
                loss += softplus(beta * z);
                weights.push(((2.0 / n) * sigmoid(beta * z)) as f32);
            }
            loss *= 2.0 / (beta * n);

            let head = attach_linear_head(&mut tape, lp_node, loss, weights);
            let grads = tape.backward(head);
            Ok((loss, collect_grads(&grads, &g.param_nodes, params)))
        }
        Objective::SimNpo { beta, gamma } => {
            let mut tape = Tape::new();
            let g = build_forward(
                &mut tape,
                params,
                cfg,
                rope,
                &forget.inputs,
                forget.n_seqs,
                forget.seq_len,
                true,
            );
            let lp_node = tape.sequence_log_prob(g.logits, &forget.targets, forget.n_seqs);
            let lp: Vec<f64> = tape.value(lp_node).data().iter().map(|&v| v as f64).collect();

            let n = lp.len() as f64;
            let len = forget.seq_len as f64;
            let mut loss = 0.0f64;
            let mut weights = Vec::with_capacity(lp.len());
            for l in &lp {
                let w = beta / len * l + gamma;
                loss += softplus(w);
                weights.push(((2.0 / (n * len)) * sigmoid(w)) as f32);
            }
            loss *= 2.0 / (beta * n);

            let head = attach_linear_head(&mut tape, lp_node, loss, weights);
            let grads = tape.backward(head);
            Ok((loss, collect_grads(&grads, &g.param_nodes, params)))
        }
    }
}
