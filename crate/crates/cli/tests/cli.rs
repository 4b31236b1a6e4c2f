//! Drives the real binary end to end through temp files and pipes.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_federase"))
}

/// Small two-client federation; every test that trains uses this.
const TINY_CONFIG: &str = r#"
n_clients = 2
rounds = 2
local_steps = 3
batch_size = 8
lr = 0.003
seed = 5

[model]
vocab = 16
d_model = 16
n_heads = 2
n_layers = 1
d_ff = 32
max_seq = 8
rope_theta = 10000.0
rms_eps = 1e-5

[data]
vocab = 16
seq_len = 8
seqs_per_client = 16
pref_mass = 0.9
"#;

fn write_config(dir: &Path) -> String {
    let path = dir.join("fed.toml");
    fs::write(&path, TINY_CONFIG).unwrap();
    path.display().to_string()
}

/// Runs the binary, asserting the exit status, and returns stdout.
fn run(args: &[&str], expect_ok: bool) -> String {
    let out = bin().args(args).output().unwrap();
    let stdout = String::from_utf8(out.stdout).unwrap();
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(
        out.status.success(),
        expect_ok,
        "federase {args:?}\nstdout:\n{stdout}\nstderr:\n{stderr}"
    );
    stdout
}

fn train(cfg: &str, out: &Path, extra: &[&str]) -> String {
    let out = out.display().to_string();
    let mut args = vec!["train", "--config", cfg, "--out", &out];
    args.extend_from_slice(extra);
    run(&args, true)
}

#[test]
fn train_eval_inspect_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let model = dir.path().join("m.fdr");

    let stdout = train(&cfg, &model, &[]);
    assert!(stdout.contains("round 0"), "missing round log:\n{stdout}");
    assert!(stdout.contains("round 1"));
    assert!(stdout.contains("saved"));
    assert!(model.exists());

    let stdout = run(&["eval", model.to_str().unwrap()], true);
    assert!(stdout.contains("client 0:"));
    assert!(stdout.contains("global: nll"));

    let stdout = run(&["inspect", model.to_str().unwrap()], true);
    assert!(stdout.contains("embed.weight"));
    assert!(stdout.contains("meta kind: trained"));
    assert!(stdout.contains("meta seed: 5"));
}

#[test]
fn training_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let (a, b, c) = (
        dir.path().join("a.fdr"),
        dir.path().join("b.fdr"),
        dir.path().join("c.fdr"),
    );
    train(&cfg, &a, &[]);
    train(&cfg, &b, &[]);
    train(&cfg, &c, &["--seed", "9"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "same seed, different bytes");
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap(), "seed ignored");
}

#[test]
fn unlearning_raises_forget_nll() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let model = dir.path().join("m.fdr");
    let unlearned = dir.path().join("u.fdr");
    train(&cfg, &model, &[]);

    let stdout = run(
        &[
            "unlearn",
            model.to_str().unwrap(),
            "--objective",
            "npo",
            "--forget-client",
            "0",
            "--out",
            unlearned.to_str().unwrap(),
        ],
        true,
    );
    let line = stdout
        .lines()
        .find(|l| l.starts_with("forget nll:"))
        .expect("forget line");
    let (before, after) = line
        .trim_start_matches("forget nll:")
        .split_once("->")
        .expect("before -> after");
    let before: f64 = before.trim().parse().unwrap();
    let after: f64 = after.trim().parse().unwrap();
    assert!(after > before, "forget NLL did not rise: {before} -> {after}");
    assert!(unlearned.exists());

    let stdout = run(&["inspect", unlearned.to_str().unwrap()], true);
    assert!(stdout.contains("meta kind: unlearned"));
    assert!(stdout.contains("meta objective:"));
}

#[test]
fn served_federation_writes_the_same_bytes_as_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let local = dir.path().join("local.fdr");
    let served = dir.path().join("served.fdr");
    train(&cfg, &local, &[]);

    let mut server = bin()
        .args([
            "serve",
            "--listen",
            "127.0.0.1:0",
            "--config",
            &cfg,
            "--out",
            served.to_str().unwrap(),
        ])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut first = String::new();
    BufReader::new(server.stdout.as_mut().unwrap())
        .read_line(&mut first)
        .unwrap();
    let addr = first
        .trim()
        .strip_prefix("listening on ")
        .unwrap_or_else(|| panic!("unexpected banner: {first:?}"))
        .to_string();

    let clients: Vec<_> = (0..2)
        .map(|id| {
            bin()
                .args(["client", "--connect", &addr, "--id", &id.to_string()])
                .stdout(Stdio::null())
                .spawn()
                .unwrap()
        })
        .collect();
    for mut c in clients {
        assert!(c.wait().unwrap().success(), "client failed");
    }
    assert!(server.wait().unwrap().success(), "server failed");

    assert_eq!(
        fs::read(&local).unwrap(),
        fs::read(&served).unwrap(),
        "TCP federation produced different bytes than the in-process run"
    );
}

#[test]
fn merge_average_and_negation_work_on_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let (a, b) = (dir.path().join("a.fdr"), dir.path().join("b.fdr"));
    train(&cfg, &a, &[]);
    train(&cfg, &b, &["--seed", "9"]);

    let merged = dir.path().join("avg.fdr");
    run(
        &[
            "merge",
            a.to_str().unwrap(),
            b.to_str().unwrap(),
            "--method",
            "average",
            "--out",
            merged.to_str().unwrap(),
        ],
        true,
    );
    let stdout = run(&["eval", merged.to_str().unwrap()], true);
    assert!(stdout.contains("global: nll"));

    let neg = dir.path().join("neg.fdr");
    run(
        &[
            "merge",
            b.to_str().unwrap(),
            "--method",
            "task-arithmetic",
            "--base",
            a.to_str().unwrap(),
            "--scale",
            "-1.0",
            "--out",
            neg.to_str().unwrap(),
        ],
        true,
    );
    assert!(neg.exists());

    // Weighted merge with a mismatched weight count must fail cleanly.
    run(
        &[
            "merge",
            a.to_str().unwrap(),
            b.to_str().unwrap(),
            "--method",
            "weighted",
            "--weight",
            "1.0",
            "--out",
            dir.path().join("w.fdr").to_str().unwrap(),
        ],
        false,
    );
}

#[test]
fn align_command_restores_reference_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let model = dir.path().join("m.fdr");
    train(&cfg, &model, &[]);

    // Aligning a model to itself is the identity and must keep the bytes
    // of the tensor payload intact (metadata may differ).
    let aligned = dir.path().join("aligned.fdr");
    let stdout = run(
        &[
            "align",
            "--reference",
            model.to_str().unwrap(),
            model.to_str().unwrap(),
            "--out",
            aligned.to_str().unwrap(),
        ],
        true,
    );
    assert!(stdout.contains("alignment is identity"));
}

#[test]
fn default_config_roundtrips_through_train() {
    let dir = tempfile::tempdir().unwrap();
    let toml_path = dir.path().join("default.toml");
    run(&["config", "--out", toml_path.to_str().unwrap()], true);
    let text = fs::read_to_string(&toml_path).unwrap();
    assert!(text.contains("n_clients"), "not a config:\n{text}");

    let model = dir.path().join("m.fdr");
    let stdout = run(
        &[
            "train",
            "--config",
            toml_path.to_str().unwrap(),
            "--rounds",
            "1",
            "--out",
            model.to_str().unwrap(),
        ],
        true,
    );
    assert!(stdout.contains("round 0"));
}

#[test]
fn errors_exit_nonzero_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let model = dir.path().join("m.fdr");
    train(&cfg, &model, &[]);

    let out = bin().args(["eval", "missing.fdr"]).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("error:"), "no error banner:\n{stderr}");
    assert!(stderr.contains("missing.fdr"));

    let out = bin()
        .args([
            "unlearn",
            model.to_str().unwrap(),
            "--objective",
            "grad-ascent",
            "--forget-client",
            "99",
            "--out",
            dir.path().join("u.fdr").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("out of range"), "wrong error:\n{stderr}");
}
