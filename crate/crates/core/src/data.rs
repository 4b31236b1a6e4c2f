//! Synthetic per-client token streams.
//!
//! Each client speaks a "dialect": a first-order Markov chain where every
//! token has one preferred successor. With probability `pref_mass` the
//! preferred successor is emitted, otherwise a uniform draw. Shards are
//! regenerated from (seed, client_id, config) on demand, so no dataset
//! files exist anywhere; a checkpoint's meta block is enough to rebuild
//! the exact training distribution.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;

fn default_pref_mass() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub vocab: usize,
    /// Input tokens per sequence; stored sequences carry one extra token
    /// so every position has a next-token target.
    pub seq_len: usize,
    pub seqs_per_client: usize,
    #[serde(default = "default_pref_mass")]
    pub pref_mass: f64,
}

impl DataConfig {
    pub fn tiny() -> Self {
        DataConfig {
            vocab: 32,
            seq_len: 16,
            seqs_per_client: 64,
            pref_mass: 0.9,
        }
    }
}

/// One client's data: `seqs_per_client` sequences of `seq_len + 1` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub client_id: u64,
    pub seqs: Vec<Vec<usize>>,
}

/// Preferred successor for every token in a client's dialect.
pub fn client_dialect(root: &Rng, cfg: &DataConfig, client_id: u64) -> Vec<usize> {
    let mut rng = root.derive("dialect", client_id);
    (0..cfg.vocab)
        .map(|_| rng.next_below(cfg.vocab as u64) as usize)
        .collect()
}

/// Deterministically synthesizes a client's training shard.
pub fn synth_shard(root: &Rng, cfg: &DataConfig, client_id: u64) -> Shard {
    synth_shard_stream(root, cfg, client_id, "tokens")
}

/// Shard with a caller-chosen token stream label. The dialect depends only
/// on (root, client_id), so different streams (training vs held-out eval)
/// sample fresh sequences from the same distribution.
pub fn synth_shard_stream(root: &Rng, cfg: &DataConfig, client_id: u64, stream: &str) -> Shard {
    let dialect = client_dialect(root, cfg, client_id);
    let mut rng = root.derive(stream, client_id);
    let seqs = (0..cfg.seqs_per_client)
        .map(|_| {
            let mut seq = Vec::with_capacity(cfg.seq_len + 1);
            let mut tok = rng.next_below(cfg.vocab as u64) as usize;
            seq.push(tok);
            for _ in 0..cfg.seq_len {
                tok = if rng.next_f64() < cfg.pref_mass {
                    dialect[tok]
                } else {
                    rng.next_below(cfg.vocab as u64) as usize
                };
                seq.push(tok);
            }
            seq
        })
        .collect();
    Shard { client_id, seqs }
}

/// Flat next-token batch: `inputs[i]` predicts `targets[i]`, grouped as
/// `n_seqs` contiguous blocks of `seq_len` rows.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub n_seqs: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn from_seqs(seqs: &[Vec<usize>]) -> Batch {
        assert!(!seqs.is_empty(), "empty batch");
        let seq_len = seqs[0].len() - 1;
        let mut inputs = Vec::with_capacity(seqs.len() * seq_len);
        let mut targets = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            assert_eq!(s.len(), seq_len + 1, "ragged sequence lengths");
            inputs.extend_from_slice(&s[..seq_len]);
            targets.extend_from_slice(&s[1..]);
        }
        Batch {
            inputs,
            targets,
            n_seqs: seqs.len(),
            seq_len,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.targets.len()
    }
}

/// Splits a shard into batches of at most `batch_size` sequences, in order.
pub fn minibatches(shard: &Shard, batch_size: usize) -> Vec<Batch> {
    assert!(batch_size > 0);
    shard.seqs.chunks(batch_size).map(Batch::from_seqs).collect()
}

/// Entropy in nats of one dialect transition: the preferred successor gets
/// `pref_mass + (1 - pref_mass)/V`, every other token `(1 - pref_mass)/V`.
/// This is the NLL floor for a model that has fully learned a dialect.
pub fn dialect_entropy(vocab: usize, pref_mass: f64) -> f64 {
    let q = (1.0 - pref_mass) / vocab as f64;
    let p = pref_mass + q;
    -(p * p.ln() + (vocab as f64 - 1.0) * q * q.ln())
}

/// NLL of a model that has learned nothing: uniform over the vocabulary.
pub fn uniform_nll(vocab: usize) -> f64 {
    (vocab as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shards_are_deterministic() {
        let cfg = DataConfig::tiny();
        let root = Rng::from_seed(11);
        let a = synth_shard(&root, &cfg, 3);
        let b = synth_shard(&root, &cfg, 3);
        assert_eq!(a, b);
        let c = synth_shard(&root, &cfg, 4);
        assert_ne!(a.seqs, c.seqs);
    }

    #[test]
    fn dialects_differ_between_clients() {
        let cfg = DataConfig::tiny();
        let root = Rng::from_seed(11);
        let d0 = client_dialect(&root, &cfg, 0);
        let d1 = client_dialect(&root, &cfg, 1);
        assert_eq!(d0.len(), cfg.vocab);
        assert!(d0.iter().all(|&t| t < cfg.vocab));
        let agree = d0.iter().zip(d1.iter()).filter(|(a, b)| a == b).count();
        // under independence agreement is Binomial(32, 1/32); 16+ would be
        // astronomically unlikely
        assert!(agree < 16, "dialects nearly identical: {agree}/32 agree");
    }

    #[test]
    fn transitions_follow_preference_rate() {
        let cfg = DataConfig {
            vocab: 32,
            seq_len: 64,
            seqs_per_client: 200,
            pref_mass: 0.9,
        };
        let root = Rng::from_seed(12);
        let dialect = client_dialect(&root, &cfg, 0);
        let shard = synth_shard(&root, &cfg, 0);
        let mut hits = 0usize;
        let mut total = 0usize;
        for seq in &shard.seqs {
            for w in seq.windows(2) {
                total += 1;
                if w[1] == dialect[w[0]] {
                    hits += 1;
                }
            }
        }
        // expected rate = 0.9 + 0.1/32 = 0.903125
        let rate = hits as f64 / total as f64;
        assert!((rate - 0.903125).abs() < 0.01, "preference rate {rate}");
    }

    #[test]
    fn streams_share_dialect_but_not_tokens() {
        let cfg = DataConfig::tiny();
        let root = Rng::from_seed(14);
        let train = synth_shard(&root, &cfg, 2);
        let eval = synth_shard_stream(&root, &cfg, 2, "eval-tokens");
        assert_ne!(train.seqs, eval.seqs);
        // both streams follow the same preference map
        let dialect = client_dialect(&root, &cfg, 2);
        for shard in [&train, &eval] {
            let mut hits = 0usize;
            let mut total = 0usize;
            for seq in &shard.seqs {
                for w in seq.windows(2) {
                    total += 1;
                    hits += (w[1] == dialect[w[0]]) as usize;
                }
            }
            let rate = hits as f64 / total as f64;
            assert!(rate > 0.85, "stream does not follow dialect: {rate}");
        }
    }

    #[test]
    fn batch_aligns_inputs_and_targets() {
        let seqs = vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8]];
        let b = Batch::from_seqs(&seqs);
        assert_eq!(b.n_seqs, 2);
        assert_eq!(b.seq_len, 3);
        assert_eq!(b.inputs, vec![1, 2, 3, 5, 6, 7]);
        assert_eq!(b.targets, vec![2, 3, 4, 6, 7, 8]);
        assert_eq!(b.n_tokens(), 6);
    }

    #[test]
    fn minibatches_cover_shard_in_order() {
        let cfg = DataConfig {
            vocab: 8,
            seq_len: 4,
            seqs_per_client: 10,
            pref_mass: 0.9,
        };
        let shard = synth_shard(&Rng::from_seed(13), &cfg, 0);
        let batches = minibatches(&shard, 4);
        assert_eq!(batches.len(), 3); // 4 + 4 + 2
        assert_eq!(batches[2].n_seqs, 2);
        let mut seen = Vec::new();
        for b in &batches {
            for s in 0..b.n_seqs {
                let start = s * b.seq_len;
                let mut seq: Vec<usize> = b.inputs[start..start + b.seq_len].to_vec();
                seq.push(b.targets[start + b.seq_len - 1]);
                seen.push(seq);
            }
        }
        assert_eq!(seen, shard.seqs);
    }

    #[test]
    fn entropy_helpers_reference_values() {
        // ln 32 = 3.4657...; dialect entropy at 0.9/32 computed separately
        assert!((uniform_nll(32) - 3.4657359027997265).abs() < 1e-12);
        let h = dialect_entropy(32, 0.9);
        assert!((h - 0.6508293930922318).abs() < 1e-12, "entropy {h}");
        // learning the dialect must be worth something
        assert!(h < uniform_nll(32));
    }
}
