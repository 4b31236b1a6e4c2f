//! Command-line front end. Every run is a pure function of its config and
//! seed, so checkpoints written here are byte-for-byte reproducible; the
//! federation config rides along in checkpoint metadata and later commands
//! read it back from there unless overridden with --config.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use federase_core::checkpoint;
use federase_core::data::{minibatches, Batch, DataConfig};
use federase_core::eval::eval_nll;
use federase_core::fed::{run_training, run_unlearning, FedConfig, TrainOutcome, UnlearnConfig};
use federase_core::merge;
use federase_core::model::ModelConfig;
use federase_core::net;
use federase_core::objectives::Objective;
use federase_core::permute;
use federase_core::{NamedTensors, Rng};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Parser)]
#[command(
    name = "federase",
    version,
    about = "Deterministic federated training, unlearning and merging for a small transformer LM"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the default federation config as TOML.
    Config {
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a federation in process and save the aggregated model.
    Train(TrainArgs),
    /// Host a federation over TCP and save the aggregated model.
    Serve(ServeArgs),
    /// Join a TCP federation as one client.
    Client {
        /// Server address, host:port.
        #[arg(long)]
        connect: String,
        /// Client id in 0..n_clients.
        #[arg(long)]
        id: u64,
    },
    /// Evaluate a checkpoint on the held-out streams.
    Eval {
        model: PathBuf,
        /// Override the config stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Remove one client's influence from a trained model.
    Unlearn(UnlearnArgs),
    /// Combine checkpoints into one model.
    Merge(MergeArgs),
    /// Re-order a checkpoint's heads and MLP units to match a reference.
    Align {
        /// Checkpoint whose ordering to match.
        #[arg(long)]
        reference: PathBuf,
        candidate: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Show a checkpoint's tensors and metadata.
    Inspect { model: PathBuf },
}

#[derive(Args)]
struct TrainArgs {
    /// Federation config TOML; defaults to the built-in config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// Address to listen on, host:port (port 0 picks one).
    #[arg(long)]
    listen: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct UnlearnArgs {
    model: PathBuf,
    #[arg(long)]
    objective: ObjectiveKind,
    /// Inverse-temperature for npo / simnpo. Defaults: npo 0.1, simnpo 2.5.
    #[arg(long)]
    beta: Option<f64>,
    /// Reward margin for simnpo.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    gamma: f64,
    /// Retain-loss weight for grad-diff.
    #[arg(long, default_value_t = 1.0)]
    retain_lambda: f64,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long)]
    forget_client: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ObjectiveKind {
    GradAscent,
    GradDiff,
    Npo,
    Simnpo,
}

#[derive(Args)]
struct MergeArgs {
    /// Models to merge, as checkpoint paths.
    #[arg(required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    method: MergeMethod,
    /// Base model for task-arithmetic, ties and dare.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Per-model weight for the weighted method (repeat per model).
    #[arg(long = "weight")]
    weights: Vec<f64>,
    /// Coefficient on each task vector for task-arithmetic
    /// (-1 negates a fine-tune out of the base).
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    scale: f64,
    /// Fraction of task-vector entries ties keeps.
    #[arg(long, default_value_t = 0.5)]
    density: f64,
    /// Fraction of task-vector entries dare drops.
    #[arg(long, default_value_t = 0.5)]
    drop_rate: f64,
    /// Seed for the dare masks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MergeMethod {
    Average,
    Weighted,
    TaskArithmetic,
    Ties,
    Dare,
}

fn main() {
    // Die quietly when stdout is a closed pipe (`federase inspect | head`)
    // instead of panicking in println.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Config { out } => cmd_config(out),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Serve(args) => cmd_serve(args),
        Cmd::Client { connect, id } => {
            net::run_client(connect.as_str(), id)?;
            println!("client {id} done");
            Ok(())
        }
        Cmd::Eval { model, config } => cmd_eval(&model, config.as_deref()),
        Cmd::Unlearn(args) => cmd_unlearn(args),
        Cmd::Merge(args) => cmd_merge(args),
        Cmd::Align {
            reference,
            candidate,
            out,
        } => cmd_align(&reference, &candidate, &out),
        Cmd::Inspect { model } => cmd_inspect(&model),
    }
}

fn default_config() -> FedConfig {
    FedConfig {
        model: ModelConfig::tiny(),
        data: DataConfig::tiny(),
        n_clients: 4,
        rounds: 3,
        local_steps: 8,
        batch_size: 8,
        lr: 3e-3,
        seed: 7,
    }
}

fn load_toml_config(path: &Path) -> Result<FedConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg: FedConfig =
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    Ok(cfg)
}

/// Config for a fresh run: --config file or the built-in default, with
/// seed and rounds overrides applied, validated.
fn resolve_config(
    path: Option<&Path>,
    seed: Option<u64>,
    rounds: Option<usize>,
) -> Result<FedConfig> {
    let mut cfg = match path {
        Some(p) => load_toml_config(p)?,
        None => default_config(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = rounds {
        cfg.rounds = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Config for a command operating on an existing checkpoint: --config wins,
/// otherwise the one stored in the checkpoint's metadata.
fn stored_config(meta: &BTreeMap<String, String>, path: Option<&Path>) -> Result<FedConfig> {
    let cfg = match path {
        Some(p) => load_toml_config(p)?,
        None => {
            let json = meta
                .get("config")
                .context("checkpoint carries no config; pass --config")?;
            serde_json::from_str(json).context("config stored in checkpoint is unreadable")?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn base_meta(kind: &str, cfg: &FedConfig) -> Result<BTreeMap<String, String>> {
    let mut meta = BTreeMap::new();
    meta.insert("kind".to_string(), kind.to_string());
    meta.insert("config".to_string(), serde_json::to_string(cfg)?);
    meta.insert("seed".to_string(), cfg.seed.to_string());
    Ok(meta)
}

fn save_model(
    path: &Path,
    params: &NamedTensors,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    checkpoint::save(path, params, meta)
        .with_context(|| format!("saving {}", path.display()))?;
    println!("saved {}", path.display());
    Ok(())
}

fn print_history(outcome: &TrainOutcome) {
    for s in &outcome.history {
        println!(
            "round {} local_loss {:.4} eval_nll {:.4} eval_ppl {:.3}",
            s.round, s.mean_local_loss, s.eval.nll, s.eval.ppl
        );
    }
}

fn cmd_config(out: Option<PathBuf>) -> Result<()> {
    let table = toml::Table::try_from(default_config())?;
    let text = table.to_string();
    match out {
        Some(p) => {
            std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
            println!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_config(args.config.as_deref(), args.seed, args.rounds)?;
    let outcome = run_training(&cfg)?;
    print_history(&outcome);
    save_model(&args.out, &outcome.params, &base_meta("trained", &cfg)?)
}

fn cmd_serve(args: ServeArgs) -> Result<()> {
    let cfg = resolve_config(args.config.as_deref(), args.seed, args.rounds)?;
    let listener = TcpListener::bind(args.listen.as_str())
        .with_context(|| format!("binding {}", args.listen))?;
    println!("listening on {}", listener.local_addr()?);
    std::io::stdout().flush()?;
    let outcome = net::serve(&listener, &cfg)?;
    print_history(&outcome);
    save_model(&args.out, &outcome.params, &base_meta("trained", &cfg)?)
}

fn load_model(path: &Path) -> Result<(NamedTensors, BTreeMap<String, String>)> {
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_eval(model: &Path, config: Option<&Path>) -> Result<()> {
    let (params, meta) = load_model(model)?;
    let cfg = stored_config(&meta, config)?;
    let rope = Arc::new(cfg.model.rope_table());
    for c in 0..cfg.n_clients {
        let batches = minibatches(&cfg.eval_shard(c), cfg.batch_size);
        let r = eval_nll(&params, &cfg.model, &rope, &batches);
        println!("client {c}: nll {:.4} ppl {:.3} ({} tokens)", r.nll, r.ppl, r.n_tokens);
    }
    let r = eval_nll(&params, &cfg.model, &rope, &cfg.eval_batches());
    println!("global: nll {:.4} ppl {:.3} ({} tokens)", r.nll, r.ppl, r.n_tokens);
    Ok(())
}

fn cmd_unlearn(args: UnlearnArgs) -> Result<()> {
    let (params, meta) = load_model(&args.model)?;
    let cfg = stored_config(&meta, args.config.as_deref())?;
    let objective = match args.objective {
        ObjectiveKind::GradAscent => Objective::GradAscent,
        ObjectiveKind::GradDiff => Objective::GradDiff {
            retain_lambda: args.retain_lambda,
        },
        ObjectiveKind::Npo => Objective::Npo {
            beta: args.beta.unwrap_or(0.1),
        },
        ObjectiveKind::Simnpo => Objective::SimNpo {
            beta: args.beta.unwrap_or(2.5),
            gamma: args.gamma,
        },
    };
    let ucfg = UnlearnConfig {
        objective: objective.clone(),
        steps: args.steps,
        lr: args.lr,
        batch_size: cfg.batch_size,
        forget_client: args.forget_client,
    };

    let rope = Arc::new(cfg.model.rope_table());
    let forget_eval = minibatches(&cfg.eval_shard(args.forget_client), cfg.batch_size);
    let retain_eval: Vec<Batch> = (0..cfg.n_clients)
        .filter(|&c| c != args.forget_client)
        .flat_map(|c| minibatches(&cfg.eval_shard(c), cfg.batch_size))
        .collect();
    let nll = |p: &NamedTensors, b: &[Batch]| eval_nll(p, &cfg.model, &rope, b).nll;
    let (forget_before, retain_before) = (nll(&params, &forget_eval), nll(&params, &retain_eval));

    let outcome = run_unlearning(&cfg, &ucfg, &params)?;
    for s in &outcome.history {
        println!("step {} loss {:.4}", s.step, s.loss);
    }
    println!(
        "forget nll: {forget_before:.4} -> {:.4}",
        nll(&outcome.params, &forget_eval)
    );
    println!(
        "retain nll: {retain_before:.4} -> {:.4}",
        nll(&outcome.params, &retain_eval)
    );

    let mut out_meta = base_meta("unlearned", &cfg)?;
    out_meta.insert("objective".to_string(), serde_json::to_string(&objective)?);
    out_meta.insert("forget_client".to_string(), args.forget_client.to_string());
    save_model(&args.out, &outcome.params, &out_meta)
}

fn cmd_merge(args: MergeArgs) -> Result<()> {
    let mut models = Vec::with_capacity(args.models.len());
    let mut first_meta = None;
    for p in &args.models {
        let (params, meta) = load_model(p)?;
        if first_meta.is_none() {
            first_meta = Some(meta);
        }
        models.push(params);
    }
    let base = match &args.base {
        Some(p) => Some(load_model(p)?.0),
        None => None,
    };
    let need_base = || {
        base.clone()
            .context("this method needs --base <checkpoint>")
    };

    let merged = match args.method {
        MergeMethod::Average => merge::average(&models)?,
        MergeMethod::Weighted => {
            if args.weights.len() != models.len() {
                bail!(
                    "{} models but {} --weight flags",
                    models.len(),
                    args.weights.len()
                );
            }
            merge::weighted_average(&models, &args.weights)?
        }
        MergeMethod::TaskArithmetic => {
            let base = need_base()?;
            let tvs = models
                .iter()
                .map(|m| merge::task_vector(&base, m))
                .collect::<federase_core::Result<Vec<_>>>()?;
            let scaled: Vec<(f64, &NamedTensors)> =
                tvs.iter().map(|tv| (args.scale, tv)).collect();
            merge::apply_task_vectors(&base, &scaled)?
        }
        MergeMethod::Ties => merge::ties_merge(&need_base()?, &models, args.density, args.scale)?,
        MergeMethod::Dare => merge::dare_merge(
            &need_base()?,
            &models,
            args.drop_rate,
            &Rng::from_seed(args.seed).derive("dare", 0),
        )?,
    };

    // The merged model inherits the first source's federation config so
    // eval and unlearn keep working on it.
    let mut meta = BTreeMap::new();
    meta.insert("kind".to_string(), "merged".to_string());
    if let Some(m) = first_meta {
        if let Some(cfg) = m.get("config") {
            meta.insert("config".to_string(), cfg.clone());
        }
    }
    save_model(&args.out, &merged, &meta)
}

fn cmd_align(reference: &Path, candidate: &Path, out: &Path) -> Result<()> {
    let (ref_params, ref_meta) = load_model(reference)?;
    let (cand_params, _) = load_model(candidate)?;
    let cfg = stored_config(&ref_meta, None)?;
    let perm = permute::find_alignment(&cfg.model, &ref_params, &cand_params)?;
    println!(
        "alignment is {}",
        if perm.is_identity() { "identity" } else { "a re-ordering" }
    );
    let aligned = permute::apply(&cfg.model, &cand_params, &perm)?;
    let mut meta = base_meta("aligned", &cfg)?;
    meta.insert("reference".to_string(), reference.display().to_string());
    save_model(out, &aligned, &meta)
}

fn tensor_rms(t: &federase_core::Tensor) -> f64 {
    (t.sq_l2_norm() / t.numel() as f64).sqrt()
}

fn cmd_inspect(model: &Path) -> Result<()> {
    let (params, meta) = load_model(model)?;
    println!("tensors: {} ({} parameters)", params.len(), params.total_params());
    for (name, t) in params.iter() {
        println!("  {name} {:?} rms {:.6}", t.shape(), tensor_rms(t));
    }
    for (k, v) in &meta {
        let shown = if v.len() > 120 { &v[..120] } else { v };
        println!("meta {k}: {shown}");
    }
    Ok(())
}
