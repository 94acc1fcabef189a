//! Command-line front end. Every command is a thin wrapper over library calls.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bounds::{bound_report, size_weights};
use crate::checkpoint;
use crate::client::evaluate;
use crate::config::{Algorithm, RunConfig};
use crate::datasets::{load_labeled_csv, save_labeled_csv, save_public_csv};
use crate::error::{FedError, Result};
use crate::orchestrator::{
    initial_registry, partition, prepare_data, public_from, run_training, synthesize,
};

#[derive(Debug, Parser)]
#[command(
    name = "fedet",
    version,
    about = "Desk-scale federated ensemble transfer simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunFlags {
    /// `key = value` run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for client training; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

impl RunFlags {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic data and write train/public/test CSVs split 7:1:2.
    GenData {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Split a labelled CSV into per-client shard CSVs.
    Partition {
        #[command(flatten)]
        run: RunFlags,
        /// Labelled CSV to partition.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and write metrics plus a final checkpoint.
    Train {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, value_parser = parse_algorithm)]
        algorithm: Option<Algorithm>,
    },
    /// Print accuracy and loss of a checkpointed model on a labelled CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `server` or a small model id.
        #[arg(long, default_value = "server")]
        model: String,
    },
    /// Bound diagnostics for a checkpoint trained with the given config.
    BoundReport {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        /// Constant used for every client's unestimated `nu`.
        #[arg(long, default_value_t = 0.0)]
        nu: f64,
    },
    /// Train once per lambda value and write a comparison CSV.
    SweepLambda {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.05, 0.5])]
        values: Vec<f64>,
    },
}

fn parse_algorithm(s: &str) -> std::result::Result<Algorithm, String> {
    s.parse().map_err(|e: FedError| e.to_string())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FedError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| FedError::io(path, e))
}

pub const SWEEP_HEADER: &str =
    "lambda,final_server_test_acc,final_server_test_loss,comm_params_cumulative,metrics_path";

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let total = cfg.n_train + cfg.n_public + cfg.n_test;
    let train_n = total * 7 / 10;
    let public_n = total / 10;
    let (train, public_raw, test) =
        synthesize(cfg, [train_n, public_n, total - train_n - public_n])?;
    let public = public_from(cfg, &public_raw)?;
    create_dir(&cfg.out_dir)?;
    save_labeled_csv(&train, &cfg.out_dir.join("train.csv"))?;
    save_public_csv(&public, &cfg.out_dir.join("public.csv"))?;
    save_labeled_csv(&test, &cfg.out_dir.join("test.csv"))?;
    println!(
        "wrote {} train, {} public, {} test examples to {}",
        train.len(),
        public.len(),
        test.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

fn partition_cmd(cfg: &RunConfig, data: &Path) -> Result<()> {
    let train = load_labeled_csv(data)?;
    let shards = partition(cfg, &train)?;
    create_dir(&cfg.out_dir)?;
    for s in &shards {
        save_labeled_csv(
            &s.examples,
            &cfg.out_dir.join(format!("client_{}.csv", s.client_id)),
        )?;
    }
    println!("wrote {} shards to {}", shards.len(), cfg.out_dir.display());
    Ok(())
}

fn train_cmd(cfg: RunConfig) -> Result<()> {
    let metrics = cfg.metrics_path();
    let outcome = run_training(cfg)?;
    match outcome.reports.last() {
        Some(r) => println!(
            "{} rounds: server test accuracy {:.4}, loss {:.4}, {} parameters communicated",
            outcome.reports.len(),
            r.server_test.accuracy,
            r.server_test.mean_loss,
            r.comm_params_cumulative
        ),
        None => println!("0 rounds"),
    }
    println!("metrics: {}", metrics.display());
    Ok(())
}

fn eval_cmd(ckpt: &Path, data: &Path, which: &str) -> Result<()> {
    let registry = checkpoint::load(ckpt)?;
    let examples = load_labeled_csv(data)?;
    let model = if which == "server" {
        &registry.server_model
    } else {
        let id: usize = which
            .parse()
            .map_err(|_| FedError::Argument(format!("unknown model `{which}`")))?;
        registry
            .small_models
            .get(&id)
            .ok_or_else(|| FedError::Argument(format!("checkpoint has no model {id}")))?
    };
    let e = evaluate(model, &examples)?;
    println!("accuracy {:.6} loss {:.6}", e.accuracy, e.mean_loss);
    Ok(())
}

fn bound_cmd(cfg: &RunConfig, ckpt: &Path, delta: f64, nu: f64) -> Result<()> {
    let registry = checkpoint::load_matching(ckpt, &initial_registry(cfg)?)?;
    let data = prepare_data(cfg)?;
    let weights = size_weights(&data.shards);
    let nus = vec![nu; data.shards.len()];
    let report = bound_report(&registry, &data.shards, &data.test, &weights, delta, &nus)?;
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("bound_report.csv"), &report.to_csv())?;
    let text = report.to_text();
    write_file(&cfg.out_dir.join("bound_report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn sweep_cmd(cfg: &RunConfig, values: &[f64]) -> Result<()> {
    if values.is_empty() || values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(FedError::Argument(
            "lambda values must be finite and ≥ 0".into(),
        ));
    }
    create_dir(&cfg.out_dir)?;
    let mut table = format!("{SWEEP_HEADER}\n");
    for &lambda in values {
        let mut run = cfg.clone();
        run.lambda = lambda;
        run.algorithm = Algorithm::FedEt;
        run.out_dir = cfg.out_dir.join(format!("lambda_{lambda}"));
        let metrics = run.metrics_path();
        let outcome = run_training(run)?;
        let (acc, loss) = outcome
            .reports
            .last()
            .map(|r| (r.server_test.accuracy, r.server_test.mean_loss))
            .unwrap_or((f64::NAN, f64::NAN));
        table.push_str(&format!(
            "{lambda:?},{acc:?},{loss:?},{},{}\n",
            outcome.federation.cumulative_comm,
            metrics.display()
        ));
        println!("lambda {lambda}: server test accuracy {acc:.4}");
    }
    let path = cfg.out_dir.join("lambda_sweep.csv");
    write_file(&path, &table)?;
    println!("comparison: {}", path.display());
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { run } => gen_data(&run.resolve()?),
        Command::Partition { run, data } => partition_cmd(&run.resolve()?, &data),
        Command::Train { run, algorithm } => {
            let mut cfg = run.resolve()?;
            if let Some(a) = algorithm {
                cfg.algorithm = a;
            }
            train_cmd(cfg)
        }
        Command::Eval {
            checkpoint,
            data,
            model,
        } => eval_cmd(&checkpoint, &data, &model),
        Command::BoundReport {
            run,
            checkpoint,
            delta,
            nu,
        } => bound_cmd(&run.resolve()?, &checkpoint, delta, nu),
        Command::SweepLambda { run, values } => sweep_cmd(&run.resolve()?, &values),
    }
}

/// Parses `argv` (program name first) and runs one command.
/// Returns 0 on success, 1 on usage errors and 2 on runtime errors.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
