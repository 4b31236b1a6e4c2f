//! Weight-space permutation symmetry.
//!
//! Two transformers can compute identical functions while storing their
//! attention heads and MLP hidden units in different orders. Reordering
//! head h means moving its column block in wq/wk/wv together with the
//! matching row block in wo; reordering an MLP unit moves a w_in column
//! with the matching w_out row. Rotary tables are identical across heads,
//! so head order carries no positional meaning. `find_alignment` recovers
//! the permutation greedily from weight similarity, which suffices to undo
//! a permutation of the same underlying model exactly.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::Rng;
use crate::tensor::{NamedTensors, Tensor};

/// One permutation per layer: `heads[i][h]` is the source head moved into
/// slot `h`, `mlps[i][j]` the source hidden unit moved into slot `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Permutation {
    pub heads: Vec<Vec<usize>>,
    pub mlps: Vec<Vec<usize>>,
}

impl Permutation {
    pub fn identity(cfg: &ModelConfig) -> Self {
        Permutation {
            heads: vec![(0..cfg.n_heads).collect(); cfg.n_layers],
            mlps: vec![(0..cfg.d_ff).collect(); cfg.n_layers],
        }
    }

    pub fn random(cfg: &ModelConfig, rng: &Rng) -> Self {
        let mut heads = Vec::with_capacity(cfg.n_layers);
        let mut mlps = Vec::with_capacity(cfg.n_layers);
        for layer in 0..cfg.n_layers as u64 {
            let mut h: Vec<usize> = (0..cfg.n_heads).collect();
            rng.derive("perm-heads", layer).shuffle(&mut h);
            heads.push(h);
            let mut m: Vec<usize> = (0..cfg.d_ff).collect();
            rng.derive("perm-mlp", layer).shuffle(&mut m);
            mlps.push(m);
        }
        Permutation { heads, mlps }
    }

    pub fn is_identity(&self) -> bool {
        let ordered = |p: &[usize]| p.iter().enumerate().all(|(i, &v)| i == v);
        self.heads.iter().all(|p| ordered(p)) && self.mlps.iter().all(|p| ordered(p))
    }

    pub fn inverse(&self) -> Self {
        let inv = |p: &[usize]| {
            let mut out = vec![0usize; p.len()];
            for (slot, &src) in p.iter().enumerate() {
                out[src] = slot;
            }
            out
        };
        Permutation {
            heads: self.heads.iter().map(|p| inv(p)).collect(),
            mlps: self.mlps.iter().map(|p| inv(p)).collect(),
        }
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let check = |p: &[Vec<usize>], n: usize, what: &str| -> Result<()> {
            if p.len() != cfg.n_layers {
                return Err(Error::Config(format!(
                    "{what}: {} layer permutations for {} layers",
                    p.len(),
                    cfg.n_layers
                )));
            }
            for layer in p {
                let mut seen = vec![false; n];
                if layer.len() != n {
                    return Err(Error::Config(format!("{what}: bad length {}", layer.len())));
                }
                for &v in layer {
                    if v >= n || seen[v] {
                        return Err(Error::Config(format!("{what}: not a permutation")));
                    }
                    seen[v] = true;
                }
            }
            Ok(())
        };
        check(&self.heads, cfg.n_heads, "heads")?;
        check(&self.mlps, cfg.d_ff, "mlps")
    }
}

fn permute_cols(t: &Tensor, block: usize, perm: &[usize]) -> Tensor {
    let (rows, cols) = (t.rows(), t.cols());
    assert_eq!(cols, block * perm.len());
    let mut out = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        for (slot, &src) in perm.iter().enumerate() {
            let from = r * cols + src * block;
            let to = r * cols + slot * block;
            out.data_mut()[to..to + block].copy_from_slice(&t.data()[from..from + block]);
        }
    }
    out
}

fn permute_rows(t: &Tensor, block: usize, perm: &[usize]) -> Tensor {
    let (rows, cols) = (t.rows(), t.cols());
    assert_eq!(rows, block * perm.len());
    let mut out = Tensor::zeros(&[rows, cols]);
    for (slot, &src) in perm.iter().enumerate() {
        let from = src * block * cols;
        let to = slot * block * cols;
        out.data_mut()[to..to + block * cols].copy_from_slice(&t.data()[from..from + block * cols]);
    }
    out
}

/// Applies a permutation. Pure data movement; composing with the inverse
/// restores the input bitwise.
pub fn apply(cfg: &ModelConfig, params: &NamedTensors, perm: &Permutation) -> Result<NamedTensors> {
    perm.validate(cfg)?;
    let dh = cfg.head_dim();
    let mut out = params.clone();
    for i in 0..cfg.n_layers {
        let p = format!("layers.{i}");
        let hp = &perm.heads[i];
        let mp = &perm.mlps[i];
        for w in ["wq", "wk", "wv"] {
            let name = format!("{p}.attn.{w}");
            let t = params
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing `{name}`")))?;
            out.insert(name, permute_cols(t, dh, hp));
        }
        let wo = format!("{p}.attn.wo");
        out.insert(
            wo.clone(),
            permute_rows(params.get(&wo).unwrap(), dh, hp),
        );
        let w_in = format!("{p}.mlp.w_in");
        out.insert(
            w_in.clone(),
            permute_cols(params.get(&w_in).unwrap(), 1, mp),
        );
        let w_out = format!("{p}.mlp.w_out");
        out.insert(
            w_out.clone(),
            permute_rows(params.get(&w_out).unwrap(), 1, mp),
        );
    }
    Ok(out)
}

/// Feature vector describing one attention head: its wq/wk/wv column
/// blocks and wo row block, concatenated.
fn head_features(params: &NamedTensors, layer: usize, head: usize, dh: usize) -> Vec<f64> {
    let p = format!("layers.{layer}");
    let mut out = Vec::new();
    for w in ["wq", "wk", "wv"] {
        let t = params.get(&format!("{p}.attn.{w}")).unwrap();
        let cols = t.cols();
        for r in 0..t.rows() {
            for c in head * dh..(head + 1) * dh {
                out.push(t.data()[r * cols + c] as f64);
            }
        }
    }
    let wo = params.get(&format!("{p}.attn.wo")).unwrap();
    let cols = wo.cols();
    for r in head * dh..(head + 1) * dh {
        for c in 0..cols {
            out.push(wo.data()[r * cols + c] as f64);
        }
    }
    out
}

fn mlp_features(params: &NamedTensors, layer: usize, unit: usize) -> Vec<f64> {
    let p = format!("layers.{layer}");
    let w_in = params.get(&format!("{p}.mlp.w_in")).unwrap();
    let mut out = Vec::new();
    let cols = w_in.cols();
    for r in 0..w_in.rows() {
        out.push(w_in.data()[r * cols + unit] as f64);
    }
    let w_out = params.get(&format!("{p}.mlp.w_out")).unwrap();
    let cols = w_out.cols();
    for c in 0..cols {
        out.push(w_out.data()[unit * cols + c] as f64);
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Greedy maximum-similarity matching: repeatedly pair the highest-scoring
/// unmatched (reference, candidate) pair.
fn greedy_match(scores: &[Vec<f64>]) -> Vec<usize> {
    let n = scores.len();
    let mut assigned = vec![usize::MAX; n];
    let mut ref_used = vec![false; n];
    let mut cand_used = vec![false; n];
    for _ in 0..n {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for (i, used_i) in ref_used.iter().enumerate() {
            if *used_i {
                continue;
            }
            for (j, used_j) in cand_used.iter().enumerate() {
                if *used_j {
                    continue;
                }
                if scores[i][j] > best.0 {
                    best = (scores[i][j], i, j);
                }
            }
        }
        assigned[best.1] = best.2;
        ref_used[best.1] = true;
        cand_used[best.2] = true;
    }
    assigned
}

/// Finds the permutation that best aligns `candidate`'s heads and MLP
/// units to `reference`'s, by weight similarity. Applying the returned
/// permutation to `candidate` puts it in `reference`'s ordering.
pub fn find_alignment(
    cfg: &ModelConfig,
    reference: &NamedTensors,
    candidate: &NamedTensors,
) -> Result<Permutation> {
    reference.check_congruent(candidate)?;
    let dh = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.n_layers);
    let mut mlps = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        let ref_h: Vec<Vec<f64>> = (0..cfg.n_heads)
            .map(|h| head_features(reference, layer, h, dh))
            .collect();
        let cand_h: Vec<Vec<f64>> = (0..cfg.n_heads)
            .map(|h| head_features(candidate, layer, h, dh))
            .collect();
        let scores: Vec<Vec<f64>> = ref_h
            .iter()
            .map(|r| cand_h.iter().map(|c| dot(r, c)).collect())
            .collect();
        heads.push(greedy_match(&scores));

        let ref_m: Vec<Vec<f64>> = (0..cfg.d_ff)
            .map(|u| mlp_features(reference, layer, u))
            .collect();
        let cand_m: Vec<Vec<f64>> = (0..cfg.d_ff)
            .map(|u| mlp_features(candidate, layer, u))
            .collect();
        let scores: Vec<Vec<f64>> = ref_m
            .iter()
            .map(|r| cand_m.iter().map(|c| dot(r, c)).collect())
            .collect();
        mlps.push(greedy_match(&scores));
    }
    Ok(Permutation { heads, mlps })
}

/// Re-orders `candidate` into `reference`'s head and unit ordering.
pub fn align(
    cfg: &ModelConfig,
    reference: &NamedTensors,
    candidate: &NamedTensors,
) -> Result<NamedTensors> {
    let perm = find_alignment(cfg, reference, candidate)?;
    apply(cfg, candidate, &perm)
}
