//! Operator surface: subcommands wiring dataset synthesis, DP-WGAN
//! training, sample generation, TSTR evaluation, and privacy accounting
//! into reproducible runs.
//!
//! Every run writes a `manifest.json` (command echo, config hash, seed,
//! version, output paths, wall clock) under `--out`. All data artifacts
//! (checkpoints, reports, CSVs) are byte-identical across reruns with the
//! same flags and seed; the manifest carries the only nondeterministic
//! field (wall clock).
//!
//! Exit codes: 0 success, 2 usage, 3 validation, 4 numeric/budget.

mod merge;

use clap::{Args, Parser, Subcommand};
use merge::{FileConfig, TrainOverrides};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;
use stdpgan_core::checkpoint::{Checkpoint, CheckpointMeta};
use stdpgan_core::data::{
    load_dataset_with_scale, load_observations, make_windows, normalize, save_coords,
    save_observations, split, synth_dataset, WindowedSamples,
};
use stdpgan_core::eval::{tstr, RegressorKind, TstrConfigEcho, TstrReport};
use stdpgan_core::generator::sample_noise;
use stdpgan_core::privacy::{
    crossing_steps, default_orders, epsilon_from_rdp, rdp_subsampled_gaussian, LedgerDocument,
};
use stdpgan_core::tensor::Tensor;
use stdpgan_core::training::{train, StopReason};

const EXIT_VALIDATION: i32 = 3;
const EXIT_NUMERIC: i32 = 4;

#[derive(Debug)]
enum CliError {
    /// Bad inputs, files, shapes: exit 3.
    Validation(String),
    /// Non-finite numerics or an exhausted privacy budget: exit 4.
    Numeric(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "{}", m),
            CliError::Numeric(m) => write!(f, "{}", m),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn validation<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Validation(e.to_string())
}

impl From<stdpgan_core::data::DataError> for CliError {
    fn from(e: stdpgan_core::data::DataError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<stdpgan_core::training::TrainError> for CliError {
    fn from(e: stdpgan_core::training::TrainError) -> Self {
        use stdpgan_core::privacy::PrivacyError;
        use stdpgan_core::training::TrainError;
        match &e {
            TrainError::NonFinite(_) | TrainError::Privacy(PrivacyError::BudgetExhausted { .. }) => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<stdpgan_core::checkpoint::CheckpointError> for CliError {
    fn from(e: stdpgan_core::checkpoint::CheckpointError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<stdpgan_core::eval::EvalError> for CliError {
    fn from(e: stdpgan_core::eval::EvalError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "stdpgan", version, about = "Privacy-preserving spatiotemporal data generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the bundled synthetic ring dataset as CSV files.
    Synth(SynthArgs),
    /// Train the DP-WGAN on an observation CSV.
    Train(TrainArgs),
    /// Sample privacy-protected data blocks from a checkpoint.
    Generate(GenerateArgs),
    /// Train-on-synthetic/test-on-real utility evaluation.
    Evaluate(EvaluateArgs),
    /// Query the (epsilon, delta) accountant.
    Account(AccountArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of nodes on the ring (at least 2).
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    nodes: u64,
    /// Series length in timesteps.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    length: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Observation CSV (header row of node ids).
    #[arg(long)]
    data: PathBuf,
    /// Coordinate CSV (node_id,x,y) or distance CSV (node_i,node_j,dist).
    #[arg(long)]
    coords: PathBuf,
    /// TOML or JSON config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of sample blocks to generate.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Real observation CSV; split 70/20/10 chronologically.
    #[arg(long)]
    real: PathBuf,
    /// Generated observation CSV.
    #[arg(long)]
    generated: PathBuf,
    /// Rows per generated block (windows never cross block bounds).
    /// Defaults to the rows_per_block of a manifest.json next to the
    /// generated CSV, else continuous windowing.
    #[arg(long)]
    block_rows: Option<usize>,
    #[arg(long, default_value_t = 6)]
    window: usize,
    #[arg(long, default_value_t = 3)]
    horizon: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AccountArgs {
    /// Ledger JSON written by `train`.
    #[arg(long, conflicts_with_all = ["q", "sigma", "delta", "steps"])]
    ledger: Option<PathBuf>,
    #[arg(long, requires_all = ["sigma", "delta", "steps"])]
    q: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Also report whether this budget is exhausted.
    #[arg(long)]
    budget: Option<f64>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {}", msg);
            EXIT_VALIDATION
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("error: {}", msg);
            EXIT_NUMERIC
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Account(args) => cmd_account(args),
    }
}

// ---------------------------------------------------------------------------
// manifest

#[derive(serde::Serialize)]
struct RunManifest {
    command: Vec<String>,
    config_hash: String,
    seed: u64,
    version: String,
    outputs: Vec<String>,
    wall_clock_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    rows_per_block: Option<usize>,
}

fn write_manifest(
    out_dir: &Path,
    config_hash: String,
    seed: u64,
    outputs: &[&str],
    started: Instant,
    rows_per_block: Option<usize>,
) -> Result<()> {
    let manifest = RunManifest {
        command: std::env::args().collect(),
        config_hash,
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        rows_per_block,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(validation)?;
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}

fn ensure_out_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// synth

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let started = Instant::now();
    ensure_out_dir(&args.out)?;
    let ds = synth_dataset(args.nodes as usize, args.length as usize, args.seed)?;
    save_observations(&args.out.join("obs.csv"), &ds.node_ids, &ds.observations)?;
    save_coords(
        &args.out.join("coords.csv"),
        &ds.node_ids,
        ds.coords.as_ref().expect("synthetic dataset has coordinates"),
    )?;
    let hash = sha256_hex(format!("synth:{}:{}:{}", args.nodes, args.length, args.seed).as_bytes());
    write_manifest(
        &args.out,
        hash,
        args.seed,
        &["obs.csv", "coords.csv"],
        started,
        None,
    )?;
    println!(
        "wrote synthetic dataset: {} nodes, {} rows -> {}",
        args.nodes,
        args.length,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

fn cmd_train(args: TrainArgs) -> Result<()> {
    let started = Instant::now();
    ensure_out_dir(&args.out)?;

    let (file_cfg, config_hash) = match &args.config {
        Some(path) => {
            let bytes = std::fs::read(path)?;
            let cfg = FileConfig::parse(path, &bytes)?;
            (cfg, sha256_hex(&bytes))
        }
        None => (FileConfig::default(), String::new()),
    };
    let settings = merge::resolve(file_cfg, &args.overrides)?;
    let config_hash = if config_hash.is_empty() {
        sha256_hex(serde_json::to_string(&settings.train).map_err(validation)?.as_bytes())
    } else {
        config_hash
    };

    let (mut dataset, alpha_used) =
        load_dataset_with_scale(&args.data, &args.coords, settings.alpha_k, settings.beta_k)?;
    log::info!("adjacency kernel width alpha_k = {}", alpha_used);
    let stats = normalize(&mut dataset)?;
    let (train_ds, _val_ds, _test_ds) = split(&dataset, 0.70, 0.20, 0.10)?;

    // the GAN trains on full (window + horizon)-row samples so generated
    // blocks carry both regression inputs and targets
    let sample_len = settings.window_len + settings.horizon;
    let windows = make_windows(&train_ds.observations, sample_len, 0, 1)?;
    let samples = windows.full_samples();

    let config = settings.train.clone();
    let (state, report) = train(samples, dataset.laplacian.clone(), config)?;

    let meta = CheckpointMeta {
        n_nodes: dataset.n_nodes(),
        sample_len,
        window_len: settings.window_len,
        horizon: settings.horizon,
        m_dim: state.discriminator.shape.m_dim,
        h_dim: state.discriminator.shape.h_dim,
        kd_len: state.discriminator.shape.kd_len,
        attention_enabled: state.discriminator.shape.attention_enabled,
        node_ids: dataset.node_ids.clone(),
        norm: Some(stats),
    };
    Checkpoint::from_models(meta, &state.generator, &state.discriminator)
        .write(&args.out.join("ckpt.bin"))?;

    let report_json = serde_json::to_string_pretty(&report).map_err(validation)?;
    std::fs::write(args.out.join("report.json"), report_json)?;

    let ledger_json = match &state.ledger {
        Some(ledger) => serde_json::json!({
            "dp_enabled": true,
            "epsilon": ledger.epsilon(),
            "ledger": ledger.to_document(),
        }),
        None => serde_json::json!({
            "dp_enabled": false,
            "epsilon": "inf",
        }),
    };
    std::fs::write(
        args.out.join("ledger.json"),
        serde_json::to_string_pretty(&ledger_json).map_err(validation)?,
    )?;

    write_manifest(
        &args.out,
        config_hash,
        settings.train.seed,
        &["ckpt.bin", "report.json", "ledger.json"],
        started,
        Some(sample_len),
    )?;

    let eps_text = if report.final_epsilon.is_finite() {
        format!("{:.6}", report.final_epsilon)
    } else {
        "inf".to_string()
    };
    println!(
        "trained {} epochs ({} critic steps), epsilon = {}, stopped: {:?}",
        report.epochs_run, report.critic_steps, eps_text, report.stopped
    );
    if report.stopped == StopReason::BudgetExhausted {
        println!("privacy budget exhausted at epsilon {}", eps_text);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// generate

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let started = Instant::now();
    ensure_out_dir(&args.out)?;
    let ckpt = Checkpoint::read(&args.ckpt)?;
    let generator = ckpt.generator()?;
    let meta = &ckpt.meta;
    if generator.n_nodes() != meta.n_nodes || generator.t_len() != meta.sample_len {
        return Err(CliError::Validation(format!(
            "checkpoint shape mismatch: generator is {}x{}, metadata says {}x{}",
            generator.t_len(),
            generator.n_nodes(),
            meta.sample_len,
            meta.n_nodes
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let n = meta.n_nodes;
    let rows = meta.sample_len * args.count as usize;
    let mut data = Vec::with_capacity(rows * n);
    for _ in 0..args.count {
        let z = sample_noise(n, &mut rng);
        let sample = stdpgan_core::generator::generate(&generator, &z).map_err(validation)?;
        match &meta.norm {
            Some(stats) => data.extend(sample.data().iter().map(|&v| stats.inverse(v))),
            None => data.extend_from_slice(sample.data()),
        }
    }
    let table = Tensor::new(vec![rows, n], data).map_err(|_| {
        CliError::Numeric("generated samples contain non-finite values".into())
    })?;
    save_observations(&args.out.join("generated.csv"), &meta.node_ids, &table)?;

    let hash = sha256_hex(&std::fs::read(&args.ckpt)?);
    write_manifest(
        &args.out,
        hash,
        args.seed,
        &["generated.csv"],
        started,
        Some(meta.sample_len),
    )?;
    println!(
        "generated {} blocks of {} rows -> {}",
        args.count,
        meta.sample_len,
        args.out.join("generated.csv").display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

fn block_rows_from_manifest(generated: &Path) -> Option<usize> {
    let manifest = generated.parent()?.join("manifest.json");
    let bytes = std::fs::read(manifest).ok()?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).ok()?;
    value.get("rows_per_block")?.as_u64().map(|v| v as usize)
}

fn windows_for_generated(
    obs: &Tensor,
    window: usize,
    horizon: usize,
    block_rows: Option<usize>,
) -> Result<WindowedSamples> {
    match block_rows {
        None => Ok(make_windows(obs, window, horizon, 1)?),
        Some(rows) => {
            if rows < window + horizon {
                return Err(CliError::Validation(format!(
                    "block_rows {} shorter than window {} + horizon {}",
                    rows, window, horizon
                )));
            }
            if obs.rows() % rows != 0 {
                return Err(CliError::Validation(format!(
                    "generated CSV has {} rows, not a multiple of block_rows {}",
                    obs.rows(),
                    rows
                )));
            }
            let n = obs.cols();
            let mut merged: Option<WindowedSamples> = None;
            for b in 0..obs.rows() / rows {
                let block = Tensor::new(
                    vec![rows, n],
                    obs.data()[b * rows * n..(b + 1) * rows * n].to_vec(),
                )
                .map_err(validation)?;
                let w = make_windows(&block, window, horizon, 1)?;
                merged = Some(match merged {
                    None => w,
                    Some(mut acc) => {
                        acc.inputs.extend(w.inputs);
                        acc.targets.extend(w.targets);
                        acc
                    }
                });
            }
            Ok(merged.expect("at least one block"))
        }
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let started = Instant::now();
    ensure_out_dir(&args.out)?;

    let (_real_ids, real_obs) = load_observations(&args.real)?;
    let (_gen_ids, gen_obs) = load_observations(&args.generated)?;

    let t = real_obs.rows();
    let n_train = (0.70 * t as f64).floor() as usize;
    let n_val = (0.20 * t as f64).floor() as usize;
    let n = real_obs.cols();
    if n_train == 0 || t - n_train - n_val == 0 {
        return Err(CliError::Validation(format!(
            "real series too short to split: {} rows",
            t
        )));
    }
    let slice_rows = |a: usize, b: usize| -> Result<Tensor> {
        Tensor::new(vec![b - a, n], real_obs.data()[a * n..b * n].to_vec()).map_err(validation)
    };
    let real_train_obs = slice_rows(0, n_train)?;
    let real_test_obs = slice_rows(n_train + n_val, t)?;
    let real_train = make_windows(&real_train_obs, args.window, args.horizon, 1)?;
    let real_test = make_windows(&real_test_obs, args.window, args.horizon, 1)?;

    let block_rows = args.block_rows.or_else(|| block_rows_from_manifest(&args.generated));
    let generated = windows_for_generated(&gen_obs, args.window, args.horizon, block_rows)?;

    let echo = TstrConfigEcho {
        epsilon: None,
        seed: Some(args.seed),
        epochs: None,
    };
    let report: TstrReport = tstr(
        &real_train,
        &real_test,
        &generated,
        &RegressorKind::all(),
        args.seed,
        echo,
    )?;

    std::fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&report).map_err(validation)?,
    )?;
    std::fs::write(args.out.join("report.csv"), report.to_csv())?;

    let hash = sha256_hex(
        format!(
            "evaluate:{}:{}:{}:{}",
            args.window,
            args.horizon,
            block_rows.map_or(-1i64, |v| v as i64),
            args.seed
        )
        .as_bytes(),
    );
    write_manifest(
        &args.out,
        hash,
        args.seed,
        &["report.json", "report.csv"],
        started,
        None,
    )?;

    for row in report.rows.iter().chain(report.averages.iter()) {
        println!(
            "{:<12} {:<10} mse {:.6e}  mae {:.6e}",
            row.regressor,
            row.source.name(),
            row.mse,
            row.mae
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// account

fn cmd_account(args: AccountArgs) -> Result<()> {
    let (q, sigma, delta, steps) = if let Some(path) = &args.ledger {
        let bytes = std::fs::read(path)?;
        let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(validation)?;
        if value.get("dp_enabled").and_then(|v| v.as_bool()) == Some(false) {
            println!("epsilon = inf (differential privacy was disabled for this run)");
            return Ok(());
        }
        let doc: LedgerDocument = serde_json::from_value(
            value
                .get("ledger")
                .cloned()
                .ok_or_else(|| CliError::Validation("ledger file has no 'ledger' field".into()))?,
        )
        .map_err(validation)?;
        (doc.q, doc.noise_multiplier, doc.delta, doc.steps_taken)
    } else {
        match (args.q, args.sigma, args.delta, args.steps) {
            (Some(q), Some(sigma), Some(delta), Some(steps)) => (q, sigma, delta, steps),
            _ => {
                return Err(CliError::Validation(
                    "provide either --ledger or all of --q --sigma --delta --steps".into(),
                ))
            }
        }
    };

    let orders = default_orders();
    let per_step: Vec<f64> = orders
        .iter()
        .map(|&a| rdp_subsampled_gaussian(q, sigma, a))
        .collect::<std::result::Result<_, _>>()
        .map_err(validation)?;
    let epsilon = epsilon_from_rdp(&orders, &per_step, steps, delta);
    println!(
        "q = {}, sigma = {}, delta = {}, steps = {}",
        q, sigma, delta, steps
    );
    println!("epsilon = {}", epsilon);

    if let Some(budget) = args.budget {
        let next = epsilon_from_rdp(&orders, &per_step, steps + 1, delta);
        let exhausted = next >= budget;
        println!("budget {} exhausted = {}", budget, exhausted);
        if exhausted {
            let crossing = crossing_steps(q, sigma, delta, budget, &orders).map_err(validation)?;
            println!("crossing step = {}", crossing);
        }
    }
    Ok(())
}
