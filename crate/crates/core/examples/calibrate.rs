//! Prints the measurements the acceptance thresholds are pinned from.
//! Run with --release; the numbers are deterministic for a fixed seed.

use federase_core::data::{dialect_entropy, minibatches, uniform_nll, Batch, DataConfig};
use federase_core::eval::eval_nll;
use federase_core::fed::{local_train, run_training, run_unlearning, FedConfig, UnlearnConfig};
use federase_core::merge::{apply_task_vectors, average, dare_merge, task_vector, ties_merge};
use federase_core::model::ModelConfig;
use federase_core::objectives::Objective;
use federase_core::permute::{apply, find_alignment, Permutation};
use federase_core::rope::RopeTable;
use federase_core::NamedTensors;
use std::sync::Arc;
use std::time::Instant;

fn acceptance_config() -> FedConfig {
    FedConfig {
        model: ModelConfig {
            max_seq: 16,
            ..ModelConfig::tiny()
        },
        data: DataConfig {
            vocab: 32,
            seq_len: 16,
            seqs_per_client: 48,
            pref_mass: 0.9,
        },
        n_clients: 3,
        rounds: 6,
        local_steps: 12,
        batch_size: 8,
        lr: 3e-3,
        seed: 11,
    }
}

fn max_abs_diff(a: &NamedTensors, b: &NamedTensors) -> f32 {
    let mut m = 0f32;
    for (name, ta) in a.iter() {
        let tb = b.get(name).expect("congruent models");
        for (x, y) in ta.data().iter().zip(tb.data()) {
            m = m.max((x - y).abs());
        }
    }
    m
}

fn nll(params: &NamedTensors, cfg: &FedConfig, rope: &Arc<RopeTable>, batches: &[Batch]) -> f64 {
    eval_nll(params, &cfg.model, rope, batches).nll
}

fn main() {
    let cfg = acceptance_config();
    cfg.validate().unwrap();
    let rope = Arc::new(cfg.model.rope_table());

    println!(
        "constants: uniform_nll={:.6} dialect_entropy={:.6}",
        uniform_nll(cfg.data.vocab),
        dialect_entropy(cfg.data.vocab, cfg.data.pref_mass)
    );

    let forget_eval = minibatches(&cfg.eval_shard(0), cfg.batch_size);
    let retain_eval: Vec<Batch> = (1..cfg.n_clients)
        .flat_map(|c| minibatches(&cfg.eval_shard(c), cfg.batch_size))
        .collect();
    let global_eval = cfg.eval_batches();

    let init = cfg.init_params();
    println!(
        "init: global={:.4} forget={:.4} retain={:.4}",
        nll(&init, &cfg, &rope, &global_eval),
        nll(&init, &cfg, &rope, &forget_eval),
        nll(&init, &cfg, &rope, &retain_eval)
    );

    let t0 = Instant::now();
    let trained = run_training(&cfg).unwrap();
    println!("train: {:.1}s", t0.elapsed().as_secs_f64());
    for s in &trained.history {
        println!(
            "  round {} local_loss={:.4} eval_nll={:.4}",
            s.round, s.mean_local_loss, s.eval.nll
        );
    }
    let forget_before = nll(&trained.params, &cfg, &rope, &forget_eval);
    let retain_before = nll(&trained.params, &cfg, &rope, &retain_eval);
    println!("trained: forget={forget_before:.4} retain={retain_before:.4}");

    let objectives: Vec<(&str, Objective)> = vec![
        ("grad_ascent", Objective::GradAscent),
        ("grad_diff", Objective::GradDiff { retain_lambda: 1.0 }),
        ("npo", Objective::Npo { beta: 0.1 }),
        (
            "simnpo",
            Objective::SimNpo {
                beta: 2.5,
                gamma: 0.0,
            },
        ),
    ];
    for (name, objective) in objectives {
        let ucfg = UnlearnConfig {
            objective,
            steps: 10,
            lr: 1e-3,
            batch_size: cfg.batch_size,
            forget_client: 0,
        };
        let t = Instant::now();
        let out = run_unlearning(&cfg, &ucfg, &trained.params).unwrap();
        println!(
            "unlearn {name}: forget={:.4} (+{:.4}) retain={:.4} (+{:.4}) last_loss={:.4} {:.1}s",
            nll(&out.params, &cfg, &rope, &forget_eval),
            nll(&out.params, &cfg, &rope, &forget_eval) - forget_before,
            nll(&out.params, &cfg, &rope, &retain_eval),
            nll(&out.params, &cfg, &rope, &retain_eval) - retain_before,
            out.history.last().unwrap().loss,
            t.elapsed().as_secs_f64()
        );
    }

    // Task-vector negation as a fifth unlearning route.
    let mut ft_cfg = cfg.clone();
    ft_cfg.local_steps = 10;
    let tuned0 = local_train(&ft_cfg, &trained.params, &cfg.client_shard(0), 100).params;
    let tv0 = task_vector(&trained.params, &tuned0).unwrap();
    for alpha in [0.5f64, 1.0, 1.5] {
        let neg = apply_task_vectors(&trained.params, &[(-alpha, &tv0)]).unwrap();
        println!(
            "tv_negation alpha={alpha}: forget={:.4} (+{:.4}) retain={:.4} (+{:.4})",
            nll(&neg, &cfg, &rope, &forget_eval),
            nll(&neg, &cfg, &rope, &forget_eval) - forget_before,
            nll(&neg, &cfg, &rope, &retain_eval),
            nll(&neg, &cfg, &rope, &retain_eval) - retain_before,
        );
    }

    // Task-vector roundtrip precision on real trained deltas.
    let rt = apply_task_vectors(&trained.params, &[(1.0, &tv0)]).unwrap();
    println!("tv_roundtrip max_abs_diff={:.3e}", max_abs_diff(&rt, &tuned0));

    // Permutation symmetry on the trained model.
    let perm = Permutation::random(&cfg.model, &cfg.root_rng().derive("calib-perm", 0));
    let permuted = apply(&cfg.model, &trained.params, &perm).unwrap();
    let g_perm = nll(&permuted, &cfg, &rope, &global_eval);
    let g_base = nll(&trained.params, &cfg, &rope, &global_eval);
    println!(
        "permute: |nll diff|={:.3e} identity_perm={}",
        (g_perm - g_base).abs(),
        perm.is_identity()
    );
    let rec = find_alignment(&cfg.model, &trained.params, &permuted).unwrap();
    let restored = apply(&cfg.model, &permuted, &rec).unwrap();
    println!("align: restored_bitwise={}", restored.bitwise_eq(&trained.params));

    // Merging two divergent fine-tunes of the trained model.
    let tuned1 = local_train(&ft_cfg, &trained.params, &cfg.client_shard(1), 200).params;
    println!(
        "tuned0: global={:.4} tuned1: global={:.4}",
        nll(&tuned0, &cfg, &rope, &global_eval),
        nll(&tuned1, &cfg, &rope, &global_eval)
    );
    let avg = average(&[tuned0.clone(), tuned1.clone()]).unwrap();
    let ties = ties_merge(&trained.params, &[tuned0.clone(), tuned1.clone()], 0.5, 1.0).unwrap();
    let dare = dare_merge(
        &trained.params,
        &[tuned0.clone(), tuned1.clone()],
        0.5,
        &cfg.root_rng().derive("calib-dare", 0),
    )
    .unwrap();
    println!(
        "merge: base={:.4} average={:.4} ties={:.4} dare={:.4}",
        g_base,
        nll(&avg, &cfg, &rope, &global_eval),
        nll(&ties, &cfg, &rope, &global_eval),
        nll(&dare, &cfg, &rope, &global_eval)
    );

    println!("total: {:.1}s", t0.elapsed().as_secs_f64());
}
