//! `alpaca`: command-line client for the ALPaCA service.
//!
//! With `--server` the commands talk to a running service. Without it an
//! in-process server is started on a loopback port for the duration of the
//! command.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alpaca_client::Client;
use alpaca_core::api::*;
use alpaca_core::config::{parse_gp_config, parse_train_config};
use alpaca_core::eval::{eval_csv, rollout_csv, Method};
use alpaca_core::gp::{timing_csv, TimingOptions};
use alpaca_core::model::ModelFile;
use alpaca_core::tasks::{PendulumState, PendulumTask, TaskKind, PENDULUM_NOISE_VAR};
use alpaca_core::train::{make_ablation_no_meta, MetaTrainConfig};
use alpaca_core::{seeded_rng, Matrix};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tokio::net::TcpListener;
use tokio::sync::oneshot;

#[derive(Parser)]
#[command(name = "alpaca", version, about = "Meta-learned Bayesian regression: data, training, evaluation")]
struct Cli {
    /// Base URL of a running service; an embedded one is started otherwise.
    #[arg(long, global = true)]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a corpus of task datasets.
    Generate(GenerateArgs),
    /// Meta-train a model on a corpus.
    Train(TrainArgs),
    /// NLL/MSE against context size.
    Eval(EvalArgs),
    /// Posterior-sampled dynamics rollouts.
    Rollout(RolloutArgs),
    /// Runtime of online inference against exact GP prediction.
    Timing(TimingArgs),
    /// Empirical coverage of the 95% predictive intervals.
    Calibration(CalibrationArgs),
    /// Run the service in the foreground.
    Serve(ServeArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_parser = parse_task)]
    task: TaskKind,
    /// Number of tasks M.
    #[arg(long)]
    count: usize,
    /// Points per task τ.
    #[arg(long)]
    tau: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Flat key = value training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Train the no-meta ablation (zero context only).
    #[arg(long)]
    no_meta: bool,
    #[arg(long)]
    out: PathBuf,
    /// Loss CSV; defaults to the model path with a `.report.csv` extension.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Model trained with --no-meta, used for the alpaca-no-meta rows.
    #[arg(long)]
    no_meta_model: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 10)]
    max_context: usize,
    /// Comma-separated: alpaca, alpaca-no-meta, alpaca-no-update, gp, or all.
    #[arg(long, default_value = "alpaca")]
    method: String,
    /// GP hyperparameters (gp_lengthscale, gp_signal_var, gp_noise_var).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV of context transitions: a header, then n_x inputs and n_y outputs per row.
    #[arg(long, conflicts_with_all = ["mass", "length"])]
    context: Option<PathBuf>,
    /// Simulate the context from a pendulum with this mass.
    #[arg(long, requires = "length")]
    mass: Option<f64>,
    #[arg(long, requires = "mass")]
    length: Option<f64>,
    /// Simulated context transitions.
    #[arg(long, default_value_t = 50)]
    context_len: usize,
    /// Start state, comma-separated; defaults to the first context state.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    start: Option<Vec<f64>>,
    #[arg(long, default_value_t = 50)]
    horizon: usize,
    #[arg(long, default_value_t = 10)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TimingArgs {
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    queries: usize,
    #[arg(long, default_value_t = 1)]
    input_dim: usize,
    #[arg(long, default_value_t = 1)]
    output_dim: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrationArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Context points before scoring.
    #[arg(long = "context-size", short = 't', default_value_t = 5)]
    context_size: usize,
    /// Multiplier on the predictive covariance.
    #[arg(long, default_value_t = 1.0)]
    cov_scale: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: alpaca_core::Error| e.to_string())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_model(path: &Path) -> Result<ModelFile> {
    ModelFile::load(path).with_context(|| format!("cannot load model {}", path.display()))
}

fn parse_methods(s: &str) -> Result<Vec<Method>> {
    if s == "all" {
        return Ok(Method::ALL.to_vec());
    }
    s.split(',').map(|m| Ok(m.trim().parse::<Method>()?)).collect()
}

/// Reads context transitions; the first `n_x` columns are inputs.
fn read_context(path: &Path, n_x: usize, n_y: usize) -> Result<(Matrix, Matrix)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let (mut xs, mut ys, mut rows) = (Vec::new(), Vec::new(), 0);
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        if rec.len() != n_x + n_y {
            bail!(
                "{}: row {} has {} columns, expected {} inputs and {} outputs",
                path.display(),
                i + 1,
                rec.len(),
                n_x,
                n_y
            );
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .with_context(|| format!("{}: row {}: invalid number '{field}'", path.display(), i + 1))?;
            if j < n_x {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
        rows += 1;
    }
    Ok((Matrix::from_vec(rows, n_x, xs)?, Matrix::from_vec(rows, n_y, ys)?))
}

async fn run(cli: Cli) -> Result<()> {
    if let Command::Serve(args) = &cli.command {
        let listener = TcpListener::bind(&args.addr)
            .await
            .with_context(|| format!("cannot bind {}", args.addr))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        alpaca_service::serve(listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        return Ok(());
    }

    let (client, stop) = match cli.server {
        Some(url) => (Client::new(url), None),
        None => {
            let listener = TcpListener::bind("127.0.0.1:0").await?;
            let addr = listener.local_addr()?;
            let (tx, rx) = oneshot::channel::<()>();
            let handle = tokio::spawn(alpaca_service::serve(listener, async {
                let _ = rx.await;
            }));
            (Client::new(format!("http://{addr}")), Some((tx, handle)))
        }
    };
    let result = dispatch(&client, cli.command).await;
    if let Some((tx, handle)) = stop {
        let _ = tx.send(());
        let _ = handle.await;
    }
    result
}

async fn dispatch(client: &Client, command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => {
            let resp = client
                .generate(&GenerateRequest {
                    task: a.task,
                    count: a.count,
                    tau: a.tau,
                    seed: a.seed,
                })
                .await?;
            write(&a.out, &resp.corpus)
        }
        Command::Train(a) => {
            let corpus = read(&a.corpus)?;
            let mut config = match &a.config {
                Some(p) => parse_train_config(&read(p)?)
                    .with_context(|| format!("invalid config {}", p.display()))?,
                None => MetaTrainConfig::default(),
            };
            if let Some(seed) = a.seed {
                config.seed = seed;
            }
            if a.no_meta {
                config = make_ablation_no_meta(&config);
            }
            let resp = client.train(&TrainRequest { corpus, config }).await?;
            resp.model.save(&a.out)?;
            let mut report = String::from("iteration,loss\n");
            for (i, l) in resp.report.losses.iter().enumerate() {
                report.push_str(&format!("{},{l}\n", i + 1));
            }
            let report_path = a.report.unwrap_or_else(|| a.out.with_extension("report.csv"));
            write(&report_path, &report)
        }
        Command::Eval(a) => {
            let model = load_model(&a.model)?;
            let corpus = read(&a.corpus)?;
            let methods = parse_methods(&a.method)?;
            let gp = match &a.config {
                Some(p) => Some(parse_gp_config(&read(p)?, &model.to_prior()?.noise)?),
                None => None,
            };
            let no_meta_model = match &a.no_meta_model {
                Some(p) => Some(load_model(p)?),
                None if model.metadata.variant == "alpaca-no-meta" => Some(model.clone()),
                None => None,
            };
            let mut rows = Vec::new();
            for method in methods {
                let m = if method == Method::AlpacaNoMeta {
                    no_meta_model.clone().ok_or_else(|| {
                        anyhow!("method alpaca-no-meta needs --no-meta-model (a model trained with --no-meta)")
                    })?
                } else {
                    model.clone()
                };
                let resp = client
                    .eval(&EvalRequest {
                        model: m,
                        corpus: corpus.clone(),
                        max_context: a.max_context,
                        methods: vec![method],
                        gp: gp.clone(),
                    })
                    .await?;
                rows.extend(resp.rows);
            }
            emit(a.out.as_deref(), &eval_csv(&rows))
        }
        Command::Rollout(a) => {
            let model = load_model(&a.model)?;
            let n_x = model.net_config.input_dim;
            let n_y = model.kbar0.cols();
            let (context_xs, context_ys) = match (&a.context, a.mass, a.length) {
                (Some(p), _, _) => read_context(p, n_x, n_y)?,
                (None, Some(mass), Some(length)) => {
                    let task = PendulumTask { mass, length };
                    let mut rng = seeded_rng(a.seed);
                    let start = PendulumTask::sample_initial_state(&mut rng);
                    let d = task.dataset_from(start, &mut rng, a.context_len, PENDULUM_NOISE_VAR);
                    if d.input_dim() != n_x || d.output_dim() != n_y {
                        bail!("model is {n_x}->{n_y}, pendulum data is 3->2");
                    }
                    (d.xs, d.ys)
                }
                _ => (Matrix::zeros(0, n_x), Matrix::zeros(0, n_y)),
            };
            let start = match a.start {
                Some(s) => s,
                None if context_xs.rows() > 0 => context_xs.row(0)[..n_y].to_vec(),
                None => {
                    let s: PendulumState = PendulumTask::sample_initial_state(&mut seeded_rng(a.seed));
                    vec![s.theta, s.theta_dot]
                }
            };
            let resp = client
                .rollout(&RolloutRequest {
                    model,
                    context_xs,
                    context_ys,
                    start,
                    horizon: a.horizon,
                    samples: a.samples,
                    seed: a.seed,
                })
                .await?;
            emit(a.out.as_deref(), &rollout_csv(&resp.trajectories))
        }
        Command::Timing(a) => {
            let resp = client
                .timing(&TimingOptions {
                    context_sizes: a.sizes,
                    queries: a.queries,
                    input_dim: a.input_dim,
                    output_dim: a.output_dim,
                    repeats: a.repeats,
                    seed: a.seed,
                    ..TimingOptions::default()
                })
                .await?;
            emit(a.out.as_deref(), &timing_csv(&resp.rows))
        }
        Command::Calibration(a) => {
            let resp = client
                .calibration(&CalibrationRequest {
                    model: load_model(&a.model)?,
                    corpus: read(&a.corpus)?,
                    context_size: a.context_size,
                    cov_scale: a.cov_scale,
                })
                .await?;
            let c = resp.coverage;
            emit(
                a.out.as_deref(),
                &format!(
                    "context_size,covered,total,coverage\n{},{},{},{}\n",
                    c.context_size, c.covered, c.total, c.fraction
                ),
            )
        }
        Command::Serve(_) => unreachable!("handled before connecting"),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let cli = Cli::parse();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::FAILURE;
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
