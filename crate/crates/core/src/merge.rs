//! Parameter-space model merging.
//!
//! All strategies operate on congruent `NamedTensors` and accumulate in
//! f64. Task-vector strategies treat `tuned - base` as the unit being
//! combined; TIES trims each task vector to its largest-magnitude entries
//! and resolves sign conflicts per coordinate, DARE randomly sparsifies
//! with an unbiased rescale.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::NamedTensors;

/// Uniform average.
pub fn average(models: &[NamedTensors]) -> Result<NamedTensors> {
    weighted_average(models, &vec![1.0; models.len()])
}

/// Weighted average. Weights are normalized; they must be non-negative
/// with a positive sum.
pub fn weighted_average(models: &[NamedTensors], weights: &[f64]) -> Result<NamedTensors> {
    if models.is_empty() {
        return Err(Error::Config("nothing to merge".into()));
    }
    if models.len() != weights.len() {
        return Err(Error::Config(format!(
            "{} models but {} weights",
            models.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| w.is_nan() || w < 0.0) {
        return Err(Error::Config("weights must be non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config("weights sum to zero".into()));
    }
    for m in &models[1..] {
        models[0].check_congruent(m)?;
    }

    let mut out = NamedTensors::new();
    for (name, first) in models[0].iter() {
        let mut acc = vec![0.0f64; first.numel()];
        for (m, &w) in models.iter().zip(weights.iter()) {
            let data = m.get(name).unwrap().data();
            for (a, &v) in acc.iter_mut().zip(data.iter()) {
                *a += w / total * v as f64;
            }
        }
        let mut t = first.clone();
        for (o, &a) in t.data_mut().iter_mut().zip(acc.iter()) {
            *o = a as f32;
        }
        out.insert(name.clone(), t);
    }
    Ok(out)
}

/// `tuned - base`, the direction a fine-tune moved the parameters.
pub fn task_vector(base: &NamedTensors, tuned: &NamedTensors) -> Result<NamedTensors> {
    tuned.sub(base)
}

/// `base + sum_i scale_i * tv_i`, accumulated in f64.
pub fn apply_task_vectors(
    base: &NamedTensors,
    scaled: &[(f64, &NamedTensors)],
) -> Result<NamedTensors> {
    for (_, tv) in scaled {
        base.check_congruent(tv)?;
    }
    let mut out = NamedTensors::new();
    for (name, b) in base.iter() {
        let mut t = b.clone();
        for i in 0..t.numel() {
            let mut acc = t.data()[i] as f64;
            for (scale, tv) in scaled {
                acc += scale * tv.get(name).unwrap().data()[i] as f64;
            }
            t.data_mut()[i] = acc as f32;
        }
        out.insert(name.clone(), t);
    }
    Ok(out)
}

/// Zeroes everything but the top `density` fraction of entries by
/// magnitude, per tensor. Ties break toward the lower index.
pub fn trim_by_magnitude(tv: &NamedTensors, density: f64) -> Result<NamedTensors> {
    if !(0.0..=1.0).contains(&density) || density == 0.0 {
        return Err(Error::Config(format!("density {density} not in (0, 1]")));
    }
    let mut out = NamedTensors::new();
    for (name, t) in tv.iter() {
        let n = t.numel();
        let keep = ((density * n as f64).ceil() as usize).clamp(1, n);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| {
            let (ma, mb) = (t.data()[a].abs(), t.data()[b].abs());
            mb.partial_cmp(&ma).unwrap().then(a.cmp(&b))
        });
        let mut trimmed = t.map(|_| 0.0);
        for &i in &idx[..keep] {
            trimmed.data_mut()[i] = t.data()[i];
        }
        out.insert(name.clone(), trimmed);
    }
    Ok(out)
}

/// TIES: trim each task vector, elect a per-coordinate sign from the
/// summed trimmed values, then average the values that agree with the
/// elected sign. The merged vector is added to the base at `scale`.
pub fn ties_merge(
    base: &NamedTensors,
    tuned: &[NamedTensors],
    density: f64,
    scale: f64,
) -> Result<NamedTensors> {
    if tuned.is_empty() {
        return Err(Error::Config("nothing to merge".into()));
    }
    let tvs: Vec<NamedTensors> = tuned
        .iter()
        .map(|t| task_vector(base, t).and_then(|tv| trim_by_magnitude(&tv, density)))
        .collect::<Result<_>>()?;

    let mut merged = NamedTensors::new();
    for (name, b) in base.iter() {
        let n = b.numel();
        let mut t = b.map(|_| 0.0);
        for j in 0..n {
            let mut sum = 0.0f64;
            for tv in &tvs {
                sum += tv.get(name).unwrap().data()[j] as f64;
            }
            if sum == 0.0 {
                continue;
            }
            let elected = sum.signum();
            let mut acc = 0.0f64;
            let mut count = 0usize;
            for tv in &tvs {
                let v = tv.get(name).unwrap().data()[j] as f64;
                if v != 0.0 && v.signum() == elected {
                    acc += v;
                    count += 1;
                }
            }
            t.data_mut()[j] = (acc / count as f64) as f32;
        }
        merged.insert(name.clone(), t);
    }
    apply_task_vectors(base, &[(scale, &merged)])
}

/// Drops each task-vector entry independently with probability `drop_rate`
/// and rescales survivors by `1/(1-drop_rate)`, so the result is unbiased.
/// Each tensor draws from its own stream derived from (rng, name), so the
/// mask does not depend on tensor iteration order.
pub fn dare_sparsify(tv: &NamedTensors, drop_rate: f64, rng: &Rng) -> Result<NamedTensors> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::Config(format!("drop_rate {drop_rate} not in [0, 1)")));
    }
    let rescale = 1.0 / (1.0 - drop_rate);
    let mut out = NamedTensors::new();
    for (name, t) in tv.iter() {
        let mut stream = rng.derive(name, 0);
        let mut masked = t.clone();
        for v in masked.data_mut() {
            if stream.next_f64() < drop_rate {
                *v = 0.0;
            } else {
                *v = (*v as f64 * rescale) as f32;
            }
        }
        out.insert(name.clone(), masked);
    }
    Ok(out)
}

/// DARE merge: sparsify each task vector with its own stream, then add
/// the mean of the sparsified vectors to the base.
pub fn dare_merge(
    base: &NamedTensors,
    tuned: &[NamedTensors],
    drop_rate: f64,
    rng: &Rng,
) -> Result<NamedTensors> {
    if tuned.is_empty() {
        return Err(Error::Config("nothing to merge".into()));
    }
    let sparse: Vec<NamedTensors> = tuned
        .iter()
        .enumerate()
        .map(|(i, t)| {
            task_vector(base, t)
                .and_then(|tv| dare_sparsify(&tv, drop_rate, &rng.derive("model", i as u64)))
        })
        .collect::<Result<_>>()?;
    let w = 1.0 / sparse.len() as f64;
    let scaled: Vec<(f64, &NamedTensors)> = sparse.iter().map(|tv| (w, tv)).collect();
    apply_task_vectors(base, &scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn named(vals: &[f32]) -> NamedTensors {
        let mut t = NamedTensors::new();
        t.insert("w", Tensor::from_vec(&[vals.len()], vals.to_vec()).unwrap());
        t
    }

    #[test]
    fn average_of_identical_models_is_identity() {
        let m = named(&[1.5, -0.25, 3.0]);
        let avg = average(&[m.clone(), m.clone(), m.clone()]).unwrap();
        assert!(avg.bitwise_eq(&m));
    }

    #[test]
    fn average_midpoint_hand_case() {
        let avg = average(&[named(&[0.0, 2.0]), named(&[1.0, 4.0])]).unwrap();
        assert_eq!(avg.get("w").unwrap().data(), &[0.5, 3.0]);
    }

    #[test]
    fn weighted_average_degenerate_weight_selects_model() {
        let a = named(&[1.0, 2.0]);
        let b = named(&[5.0, 7.0]);
        let out = weighted_average(&[a.clone(), b], &[1.0, 0.0]).unwrap();
        assert!(out.bitwise_eq(&a));
    }

    #[test]
    fn weighted_average_rejects_bad_weights() {
        let a = named(&[1.0]);
        assert!(weighted_average(std::slice::from_ref(&a), &[-1.0]).is_err());
        assert!(weighted_average(std::slice::from_ref(&a), &[0.0]).is_err());
        assert!(weighted_average(std::slice::from_ref(&a), &[1.0, 1.0]).is_err());
        assert!(average(&[]).is_err());
    }

    #[test]
    fn merge_rejects_incongruent_models() {
        let a = named(&[1.0, 2.0]);
        let b = named(&[1.0, 2.0, 3.0]);
        assert!(average(&[a, b]).is_err());
    }

    #[test]
    fn task_vector_roundtrip_with_exact_values() {
        // binary fractions keep f32 subtraction and addition exact
        let base = named(&[0.5, -1.25, 2.0]);
        let tuned = named(&[0.75, -1.0, 4.0]);
        let tv = task_vector(&base, &tuned).unwrap();
        let back = apply_task_vectors(&base, &[(1.0, &tv)]).unwrap();
        assert!(back.bitwise_eq(&tuned));
    }

    #[test]
    fn task_vector_negation_moves_away() {
        let base = named(&[1.0, 1.0]);
        let tuned = named(&[2.0, 0.5]);
        let tv = task_vector(&base, &tuned).unwrap();
        let anti = apply_task_vectors(&base, &[(-1.0, &tv)]).unwrap();
        assert_eq!(anti.get("w").unwrap().data(), &[0.0, 1.5]);
    }

    #[test]
    fn trim_keeps_largest_magnitudes() {
        let tv = named(&[3.0, -0.1, 0.2, -1.0]);
        let trimmed = trim_by_magnitude(&tv, 0.5).unwrap();
        assert_eq!(trimmed.get("w").unwrap().data(), &[3.0, 0.0, 0.0, -1.0]);
        assert!(trim_by_magnitude(&tv, 0.0).is_err());
        assert!(trim_by_magnitude(&tv, 1.5).is_err());
    }

    #[test]
    fn ties_single_model_full_density_reduces_to_task_arithmetic() {
        let base = named(&[0.5, 1.0, -2.0]);
        let tuned = named(&[1.5, 0.75, -2.5]);
        let merged = ties_merge(&base, std::slice::from_ref(&tuned), 1.0, 1.0).unwrap();
        assert!(merged.bitwise_eq(&tuned));
    }

    #[test]
    fn ties_sign_election_hand_case() {
        // tvs at one coordinate: +2, +1, -1 -> elected +, mean(2, 1) = 1.5
        let base = named(&[0.0]);
        let merged = ties_merge(
            &base,
            &[named(&[2.0]), named(&[1.0]), named(&[-1.0])],
            1.0,
            1.0,
        )
        .unwrap();
        assert_eq!(merged.get("w").unwrap().data(), &[1.5]);
    }

    #[test]
    fn ties_opposing_equal_signs_cancel_to_base() {
        let base = named(&[1.0]);
        let merged = ties_merge(&base, &[named(&[2.0]), named(&[0.0])], 1.0, 1.0).unwrap();
        // tvs are +1 and -1: the sum is zero, nothing is merged
        assert_eq!(merged.get("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn dare_zero_drop_is_exact_task_vector() {
        let tv = named(&[0.5, -1.0, 2.0]);
        let out = dare_sparsify(&tv, 0.0, &Rng::from_seed(1)).unwrap();
        assert!(out.bitwise_eq(&tv));
        assert!(dare_sparsify(&tv, 1.0, &Rng::from_seed(1)).is_err());
    }

    #[test]
    fn dare_is_deterministic_per_seed() {
        let tv = named(&[1.0; 64]);
        let a = dare_sparsify(&tv, 0.5, &Rng::from_seed(9)).unwrap();
        let b = dare_sparsify(&tv, 0.5, &Rng::from_seed(9)).unwrap();
        assert!(a.bitwise_eq(&b));
        let c = dare_sparsify(&tv, 0.5, &Rng::from_seed(10)).unwrap();
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn dare_is_unbiased_in_expectation() {
        let tv = named(&[2.0; 256]);
        let drop = 0.6;
        let mut acc = vec![0.0f64; 256];
        let n_seeds = 400u64;
        for seed in 0..n_seeds {
            let s = dare_sparsify(&tv, drop, &Rng::from_seed(seed)).unwrap();
            for (a, &v) in acc.iter_mut().zip(s.get("w").unwrap().data().iter()) {
                *a += v as f64;
            }
        }
        let mean: f64 = acc.iter().sum::<f64>() / (256.0 * n_seeds as f64);
        // per-entry variance is p/(1-p)*v^2 = 6; SE of grand mean ~ 0.0077
        assert!((mean - 2.0).abs() < 0.04, "grand mean {mean}");
    }

    #[test]
    fn dare_merge_combines_means() {
        let base = named(&[0.0, 0.0]);
        let a = named(&[2.0, 0.0]);
        let b = named(&[0.0, 4.0]);
        let out = dare_merge(&base, &[a, b], 0.0, &Rng::from_seed(3)).unwrap();
        // drop 0: base + mean(tv_a, tv_b)
        assert_eq!(out.get("w").unwrap().data(), &[1.0, 2.0]);
    }
}
