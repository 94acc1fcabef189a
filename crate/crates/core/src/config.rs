//! Run configuration and its flat `key = value` file format.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Keys are
//! exactly the [`RunConfig`] field names; unknown or repeated keys are errors.
//! Backbone widths are comma-separated; `small_widths` separates models with
//! `;`, e.g. `small_widths = 8;16;32` and `server_widths = 64,64`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::client::LocalTrainConfig;
use crate::error::{FedError, Result};
use crate::model::BackboneSpec;
use crate::server::{DiversityNormalization, ServerTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    FedEt,
    FedAvg,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedEt => "fed-et",
            Algorithm::FedAvg => "fedavg",
        }
    }
}

impl FromStr for Algorithm {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fed-et" => Ok(Algorithm::FedEt),
            "fedavg" => Ok(Algorithm::FedAvg),
            other => Err(FedError::Config(format!(
                "unknown algorithm `{other}` (expected fed-et or fedavg)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Total number of clients K.
    pub clients: usize,
    /// Clients sampled per round m.
    pub sampled: usize,
    /// Optional cross-check of the number of small models U.
    pub models: Option<usize>,
    pub classes: usize,
    pub input_dim: usize,
    pub feature_dim: usize,
    pub small_widths: Vec<Vec<usize>>,
    pub server_widths: Vec<usize>,
    pub rounds: usize,
    /// Dirichlet concentration for the client partition.
    pub alpha: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub server_steps: usize,
    pub server_batch_size: usize,
    pub server_lr: f64,
    pub lambda: f64,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub diversity_normalization: DiversityNormalization,
    pub n_train: usize,
    pub n_public: usize,
    pub n_test: usize,
    pub spread: f64,
    pub public_noise: f64,
    pub train_path: Option<PathBuf>,
    pub public_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub workers: usize,
    /// When false the `wall_ms` metrics column is written as 0 so reruns are byte-identical.
    pub record_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            clients: 20,
            sampled: 5,
            models: None,
            classes: 4,
            input_dim: 8,
            feature_dim: 16,
            small_widths: vec![vec![8], vec![16], vec![32]],
            server_widths: vec![64, 64],
            rounds: 60,
            alpha: 0.1,
            local_steps: 30,
            batch_size: 32,
            lr: 0.05,
            server_steps: 40,
            server_batch_size: 32,
            server_lr: 0.01,
            lambda: 0.05,
            seed: 0,
            algorithm: Algorithm::FedEt,
            diversity_normalization: DiversityNormalization::Renormalized,
            n_train: 4000,
            n_public: 600,
            n_test: 1200,
            spread: 0.3,
            public_noise: 0.1,
            train_path: None,
            public_path: None,
            test_path: None,
            out_dir: PathBuf::from("run"),
            workers: 1,
            record_wall_time: false,
        }
    }
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| FedError::Config(format!("bad layer width `{w}`")))
        })
        .collect()
}

fn join_widths(w: &[usize]) -> String {
    w.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| FedError::Config(format!("bad value `{value}` for `{key}`")))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "clients" => self.clients = parse_value(key, v)?,
            "sampled" => self.sampled = parse_value(key, v)?,
            "models" => self.models = Some(parse_value(key, v)?),
            "classes" => self.classes = parse_value(key, v)?,
            "input_dim" => self.input_dim = parse_value(key, v)?,
            "feature_dim" => self.feature_dim = parse_value(key, v)?,
            "small_widths" => {
                self.small_widths = v.split(';').map(parse_widths).collect::<Result<_>>()?
            }
            "server_widths" => self.server_widths = parse_widths(v)?,
            "rounds" => self.rounds = parse_value(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "local_steps" => self.local_steps = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "server_steps" => self.server_steps = parse_value(key, v)?,
            "server_batch_size" => self.server_batch_size = parse_value(key, v)?,
            "server_lr" => self.server_lr = parse_value(key, v)?,
            "lambda" => self.lambda = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "algorithm" => self.algorithm = v.parse()?,
            "diversity_normalization" => {
                self.diversity_normalization = DiversityNormalization::from_name(v)
                    .ok_or_else(|| FedError::Config(format!("bad diversity_normalization `{v}`")))?
            }
            "n_train" => self.n_train = parse_value(key, v)?,
            "n_public" => self.n_public = parse_value(key, v)?,
            "n_test" => self.n_test = parse_value(key, v)?,
            "spread" => self.spread = parse_value(key, v)?,
            "public_noise" => self.public_noise = parse_value(key, v)?,
            "train_path" => self.train_path = optional_path(v),
            "public_path" => self.public_path = optional_path(v),
            "test_path" => self.test_path = optional_path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "workers" => self.workers = parse_value(key, v)?,
            "record_wall_time" => self.record_wall_time = parse_value(key, v)?,
            other => return Err(FedError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                FedError::Config(format!("line {}: expected `key = value`", i + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(FedError::Config(format!(
                    "line {}: duplicate key `{key}`",
                    i + 1
                )));
            }
            cfg.set(key, value)
                .map_err(|e| FedError::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FedError::Config(msg));
        let counts = [
            ("clients", self.clients),
            ("sampled", self.sampled),
            ("classes", self.classes),
            ("input_dim", self.input_dim),
            ("feature_dim", self.feature_dim),
            ("local_steps", self.local_steps),
            ("server_steps", self.server_steps),
            ("batch_size", self.batch_size),
            ("server_batch_size", self.server_batch_size),
            ("workers", self.workers),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return bad(format!("`{name}` must be ≥ 1"));
        }
        if self.classes < 2 {
            return bad("`classes` must be ≥ 2".into());
        }
        if self.sampled > self.clients {
            return bad(format!(
                "cannot sample {} of {} clients",
                self.sampled, self.clients
            ));
        }
        if self.small_widths.is_empty() {
            return bad("`small_widths` needs at least one model".into());
        }
        if let Some(u) = self.models {
            if u != self.small_widths.len() {
                return bad(format!(
                    "`models` = {u} but `small_widths` lists {}",
                    self.small_widths.len()
                ));
            }
        }
        for (name, v) in [
            ("lr", self.lr),
            ("server_lr", self.server_lr),
            ("lambda", self.lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("`{name}` must be ≥ 0, got {v}"));
            }
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("`alpha` must be > 0, got {}", self.alpha));
        }
        if self.spread.is_nan()
            || self.spread <= 0.0
            || self.public_noise.is_nan()
            || self.public_noise < 0.0
        {
            return bad("`spread` must be > 0 and `public_noise` ≥ 0".into());
        }
        Ok(())
    }

    pub fn small_specs(&self) -> Vec<BackboneSpec> {
        self.small_widths
            .iter()
            .map(|w| BackboneSpec::new(self.input_dim, w.clone(), self.feature_dim))
            .collect()
    }

    pub fn server_spec(&self) -> BackboneSpec {
        BackboneSpec::new(self.input_dim, self.server_widths.clone(), self.feature_dim)
    }

    pub fn local_config(&self) -> LocalTrainConfig {
        LocalTrainConfig {
            local_steps: self.local_steps,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }

    pub fn server_config(&self) -> ServerTrainConfig {
        ServerTrainConfig {
            steps: self.server_steps,
            batch_size: self.server_batch_size,
            lr: self.server_lr,
            lambda: self.lambda,
        }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join("metrics.csv")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("checkpoint.txt")
    }
}

/// Renders every key, so `RunConfig::parse(&cfg.to_string())` reproduces `cfg`.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        writeln!(f, "clients = {}", self.clients)?;
        writeln!(f, "sampled = {}", self.sampled)?;
        if let Some(u) = self.models {
            writeln!(f, "models = {u}")?;
        }
        writeln!(f, "classes = {}", self.classes)?;
        writeln!(f, "input_dim = {}", self.input_dim)?;
        writeln!(f, "feature_dim = {}", self.feature_dim)?;
        let small: Vec<String> = self.small_widths.iter().map(|w| join_widths(w)).collect();
        writeln!(f, "small_widths = {}", small.join(";"))?;
        writeln!(f, "server_widths = {}", join_widths(&self.server_widths))?;
        writeln!(f, "rounds = {}", self.rounds)?;
        writeln!(f, "alpha = {:?}", self.alpha)?;
        writeln!(f, "local_steps = {}", self.local_steps)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "lr = {:?}", self.lr)?;
        writeln!(f, "server_steps = {}", self.server_steps)?;
        writeln!(f, "server_batch_size = {}", self.server_batch_size)?;
        writeln!(f, "server_lr = {:?}", self.server_lr)?;
        writeln!(f, "lambda = {:?}", self.lambda)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "algorithm = {}", self.algorithm.name())?;
        writeln!(
            f,
            "diversity_normalization = {}",
            self.diversity_normalization.name()
        )?;
        writeln!(f, "n_train = {}", self.n_train)?;
        writeln!(f, "n_public = {}", self.n_public)?;
        writeln!(f, "n_test = {}", self.n_test)?;
        writeln!(f, "spread = {:?}", self.spread)?;
        writeln!(f, "public_noise = {:?}", self.public_noise)?;
        writeln!(f, "train_path = {}", path(&self.train_path))?;
        writeln!(f, "public_path = {}", path(&self.public_path))?;
        writeln!(f, "test_path = {}", path(&self.test_path))?;
        writeln!(f, "out_dir = {}", self.out_dir.display())?;
        writeln!(f, "workers = {}", self.workers)?;
        writeln!(f, "record_wall_time = {}", self.record_wall_time)
    }
}
