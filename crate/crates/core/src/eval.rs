//! Model evaluation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{minibatches, Batch, Shard};
use crate::model::ModelConfig;
use crate::objectives::ce_loss;
use crate::rope::RopeTable;
use crate::tensor::NamedTensors;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Token-weighted mean negative log-likelihood, nats per token.
    pub nll: f64,
    pub ppl: f64,
    pub n_tokens: usize,
}

/// Evaluates mean NLL over a set of batches.
pub fn eval_nll(
    params: &NamedTensors,
    cfg: &ModelConfig,
    rope: &Arc<RopeTable>,
    batches: &[Batch],
) -> EvalReport {
    assert!(!batches.is_empty(), "eval over zero batches");
    let mut total = 0.0f64;
    let mut n_tokens = 0usize;
    for b in batches {
        let loss = ce_loss(params, cfg, rope, b);
        total += loss * b.n_tokens() as f64;
        n_tokens += b.n_tokens();
    }
    let nll = total / n_tokens as f64;
    EvalReport {
        nll,
        ppl: nll.exp(),
        n_tokens,
    }
}

/// Evaluates mean NLL over one shard.
pub fn eval_shard(
    params: &NamedTensors,
    cfg: &ModelConfig,
    rope: &Arc<RopeTable>,
    shard: &Shard,
    batch_size: usize,
) -> EvalReport {
    eval_nll(params, cfg, rope, &minibatches(shard, batch_size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_shard, DataConfig};
    use crate::model::init_params;
    use crate::rng::Rng;

    #[test]
    fn fresh_model_sits_near_uniform() {
        // init weights are tiny, so logits are near zero and the NLL is
        // close to ln(vocab)
        let cfg = ModelConfig {
            vocab: 16,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 12,
            max_seq: 8,
            rope_theta: 10_000.0,
            rms_eps: 1e-5,
        };
        let rope = Arc::new(cfg.rope_table());
        let params = init_params(&cfg, &Rng::from_seed(41));
        let dcfg = DataConfig {
            vocab: cfg.vocab,
            seq_len: 8,
            seqs_per_client: 8,
            pref_mass: 0.9,
        };
        let shard = synth_shard(&Rng::from_seed(42), &dcfg, 0);
        let report = eval_shard(&params, &cfg, &rope, &shard, 4);
        assert_eq!(report.n_tokens, 64);
        assert!((report.nll - (16.0f64).ln()).abs() < 0.05, "nll {}", report.nll);
        assert!((report.ppl - report.nll.exp()).abs() < 1e-12);
    }

    #[test]
    fn token_weighting_matches_flat_mean() {
        // two batches of different sizes must weight by token count
        let cfg = ModelConfig {
            vocab: 8,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            max_seq: 8,
            rope_theta: 10_000.0,
            rms_eps: 1e-5,
        };
        let rope = Arc::new(cfg.rope_table());
        let params = init_params(&cfg, &Rng::from_seed(43));
        let dcfg = DataConfig {
            vocab: cfg.vocab,
            seq_len: 4,
            seqs_per_client: 3,
            pref_mass: 0.9,
        };
        let shard = synth_shard(&Rng::from_seed(44), &dcfg, 0);
        // batch_size 2 -> batches of 2 and 1 sequences
        let split = eval_shard(&params, &cfg, &rope, &shard, 2);
        let whole = eval_shard(&params, &cfg, &rope, &shard, 3);
        assert!((split.nll - whole.nll).abs() < 1e-6);
    }
}
