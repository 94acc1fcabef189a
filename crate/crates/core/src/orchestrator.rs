//! Round loop, client sampling, the FedAvg baseline, metrics and accounting.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::checkpoint;
use crate::client::{evaluate, local_train, Evaluation};
use crate::config::{Algorithm, RunConfig};
use crate::datasets::{
    derive_public_set, dirichlet_partition, generate_synthetic, load_labeled_csv, load_public_csv,
    split_counts, ClientShard, LabeledExample, PartitionSpec, PublicSet,
};
use crate::error::{FedError, Result};
use crate::model::{assign_models, registry_init, HeterogeneousModel, ModelRegistry};
use crate::numerics::DenseLayer;
use crate::rng::{derive_seed, stream, Purpose, StreamRng};
use crate::server::{
    aggregate_same_arch, average_client_heads, broadcast_server_head, consensus_targets,
    server_update, ClientUpdate,
};

pub const METRICS_HEADER: &str = "round,algorithm,lambda,seed,sampled_clients,server_test_acc,server_test_loss,mean_client_train_loss,comm_params_round,comm_params_cumulative,wall_ms";

/// Draws `m` distinct clients one at a time, each with probability
/// proportional to its size among those not yet drawn. Returned ascending.
pub fn sample_clients<R: Rng + ?Sized>(
    sizes: &[usize],
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if m > sizes.len() {
        return Err(FedError::Config(format!(
            "cannot sample {m} of {} clients",
            sizes.len()
        )));
    }
    if let Some(k) = sizes.iter().position(|&s| s == 0) {
        return Err(FedError::Argument(format!("client {k} has an empty shard")));
    }
    let mut remaining: Vec<usize> = (0..sizes.len()).collect();
    let mut total: u64 = sizes.iter().map(|&s| s as u64).sum();
    let mut picked = Vec::with_capacity(m);
    for _ in 0..m {
        let mut r = rng.random_range(0..total);
        let pos = remaining
            .iter()
            .position(|&k| {
                let s = sizes[k] as u64;
                if r < s {
                    true
                } else {
                    r -= s;
                    false
                }
            })
            .expect("draw falls inside the remaining mass");
        let k = remaining.remove(pos);
        total -= sizes[k] as u64;
        picked.push(k);
    }
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub algorithm: Algorithm,
    pub lambda: f64,
    pub seed: u64,
    pub sampled_clients: Vec<usize>,
    pub server_test: Evaluation,
    pub mean_client_train_loss: f64,
    pub comm_params_round: u64,
    pub comm_params_cumulative: u64,
    pub wall_ms: u64,
}

impl RoundReport {
    /// One metrics line, without the trailing newline.
    pub fn csv_row(&self) -> String {
        let ids: Vec<String> = self.sampled_clients.iter().map(usize::to_string).collect();
        format!(
            "{},{},{:?},{},{},{:?},{:?},{:?},{},{},{}",
            self.round,
            self.algorithm.name(),
            self.lambda,
            self.seed,
            ids.join(";"),
            self.server_test.accuracy,
            self.server_test.mean_loss,
            self.mean_client_train_loss,
            self.comm_params_round,
            self.comm_params_cumulative,
            self.wall_ms
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedData {
    pub shards: Vec<ClientShard>,
    pub public: PublicSet,
    pub test: Vec<LabeledExample>,
}

/// Synthetic `(train, public, test)` with the configured sizes. The public part
/// still carries labels and has not been perturbed.
pub fn synthesize(
    cfg: &RunConfig,
    counts: [usize; 3],
) -> Result<(
    Vec<LabeledExample>,
    Vec<LabeledExample>,
    Vec<LabeledExample>,
)> {
    let total: usize = counts.iter().sum();
    let per_class = total.div_ceil(cfg.classes);
    let all = generate_synthetic(
        cfg.classes,
        cfg.input_dim,
        per_class,
        cfg.spread,
        derive_seed(cfg.seed, Purpose::Data, 0, 0),
    )?;
    split_counts(all, counts, derive_seed(cfg.seed, Purpose::Split, 0, 0))
}

pub fn public_from(cfg: &RunConfig, raw: &[LabeledExample]) -> Result<PublicSet> {
    derive_public_set(
        raw,
        cfg.public_noise,
        derive_seed(cfg.seed, Purpose::PublicNoise, 0, 0),
    )
}

/// Shards never drop below one batch unless the training set is too small for that.
pub fn partition(cfg: &RunConfig, train: &[LabeledExample]) -> Result<Vec<ClientShard>> {
    let min = cfg.batch_size.min(train.len() / cfg.clients).max(1);
    dirichlet_partition(
        train,
        &PartitionSpec::new(
            cfg.clients,
            cfg.alpha,
            derive_seed(cfg.seed, Purpose::Partition, 0, 0),
        )
        .with_min_shard_size(min),
    )
}

fn check_examples(cfg: &RunConfig, what: &str, examples: &[LabeledExample]) -> Result<()> {
    if examples.is_empty() {
        return Err(FedError::Config(format!("{what} set is empty")));
    }
    for (i, e) in examples.iter().enumerate() {
        if e.features.len() != cfg.input_dim || e.label >= cfg.classes {
            return Err(FedError::Config(format!(
                "{what} example {i} has {} features and label {}; expected {} features and label < {}",
                e.features.len(),
                e.label,
                cfg.input_dim,
                cfg.classes
            )));
        }
    }
    Ok(())
}

/// Loads the three CSVs named in the config, or generates data when none are given.
pub fn prepare_data(cfg: &RunConfig) -> Result<FederatedData> {
    let (train, public, test) = match (&cfg.train_path, &cfg.public_path, &cfg.test_path) {
        (Some(tr), Some(p), Some(te)) => (
            load_labeled_csv(tr)?,
            load_public_csv(p)?,
            load_labeled_csv(te)?,
        ),
        (None, None, None) => {
            let (train, public_raw, test) =
                synthesize(cfg, [cfg.n_train, cfg.n_public, cfg.n_test])?;
            let public = public_from(cfg, &public_raw)?;
            (train, public, test)
        }
        _ => {
            return Err(FedError::Config(
                "train_path, public_path and test_path must be given together".into(),
            ))
        }
    };
    check_examples(cfg, "train", &train)?;
    check_examples(cfg, "test", &test)?;
    if public.inputs.iter().any(|x| x.len() != cfg.input_dim) {
        return Err(FedError::Config(
            "public inputs do not match input_dim".into(),
        ));
    }
    Ok(FederatedData {
        shards: partition(cfg, &train)?,
        public,
        test,
    })
}

/// Fresh registry with every client assigned a small model.
pub fn initial_registry(cfg: &RunConfig) -> Result<ModelRegistry> {
    let clients: Vec<usize> = (0..cfg.clients).collect();
    registry_init(
        &cfg.small_specs(),
        &cfg.server_spec(),
        cfg.classes,
        cfg.seed,
    )?
    .with_assignment(assign_models(
        &clients,
        cfg.small_widths.len(),
        derive_seed(cfg.seed, Purpose::Assignment, 0, 0),
    )?)
}

/// Server half of a Fed-ET round. It sees returned models and the public set,
/// never client shards.
pub fn fed_et_server_phase(
    registry: &ModelRegistry,
    updates: &[ClientUpdate],
    public: &PublicSet,
    cfg: &RunConfig,
    rng: &mut StreamRng,
) -> Result<ModelRegistry> {
    let mut server = registry.server_model.clone();
    server.set_head(&average_client_heads(updates)?)?;
    let client_models: BTreeMap<usize, HeterogeneousModel> = updates
        .iter()
        .map(|u| (u.client_id, u.model.clone()))
        .collect();
    let targets = consensus_targets(&client_models, public, cfg.diversity_normalization)?;
    let server = server_update(&server, public, &targets, &cfg.server_config(), rng)?;
    let mut next = ModelRegistry {
        small_models: aggregate_same_arch(&registry.small_models, updates)?,
        server_model: server,
        assignment: registry.assignment.clone(),
    };
    broadcast_server_head(&mut next)?;
    Ok(next)
}

/// Size-weighted parameter average, summed in ascending client order.
pub fn weighted_average(models: &[(&HeterogeneousModel, usize)]) -> Result<HeterogeneousModel> {
    let total: usize = models.iter().map(|(_, n)| n).sum();
    let (first, n0) = models
        .first()
        .ok_or_else(|| FedError::Argument("nothing to average".into()))?;
    if total == 0 {
        return Err(FedError::Argument("averaging weights sum to zero".into()));
    }
    let scale = |layers: &mut [DenseLayer], w: f64| {
        for l in layers {
            l.weights.data_mut().iter_mut().for_each(|x| *x *= w);
            l.bias.data_mut().iter_mut().for_each(|x| *x *= w);
        }
    };
    let mut acc = (*first).clone();
    scale(acc.layers_mut(), *n0 as f64 / total as f64);
    for (m, n) in &models[1..] {
        if !m.same_shape(first) {
            return Err(FedError::Dimension(
                "cannot average differently shaped models".into(),
            ));
        }
        let w = *n as f64 / total as f64;
        for (a, l) in acc.layers_mut().iter_mut().zip(m.layers()) {
            for (x, y) in a.weights.data_mut().iter_mut().zip(l.weights.data()) {
                *x += w * y;
            }
            for (x, y) in a.bias.data_mut().iter_mut().zip(l.bias.data()) {
                *x += w * y;
            }
        }
    }
    Ok(acc)
}

/// Live simulation state. Rounds either commit fully or leave it untouched.
pub struct Federation {
    pub config: RunConfig,
    pub data: FederatedData,
    pub registry: ModelRegistry,
    pub cumulative_comm: u64,
    pool: rayon::ThreadPool,
}

impl Federation {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let data = prepare_data(&config)?;
        Self::with_data(config, data)
    }

    pub fn with_data(config: RunConfig, data: FederatedData) -> Result<Self> {
        config.validate()?;
        if data.shards.len() != config.clients {
            return Err(FedError::Config(format!(
                "{} shards for {} clients",
                data.shards.len(),
                config.clients
            )));
        }
        let registry = initial_registry(&config)?;
        Self::with_registry(config, data, registry)
    }

    pub fn with_registry(
        config: RunConfig,
        data: FederatedData,
        registry: ModelRegistry,
    ) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| FedError::State(format!("cannot start worker pool: {e}")))?;
        Ok(Self {
            config,
            data,
            registry,
            cumulative_comm: 0,
            pool,
        })
    }

    fn model_to_send(&self, client: usize) -> Result<(usize, &HeterogeneousModel)> {
        match self.config.algorithm {
            Algorithm::FedEt => self.registry.model_for(client),
            Algorithm::FedAvg => Ok((0, &self.registry.server_model)),
        }
    }

    /// Trains every sampled client on the worker pool; results come back in client order.
    fn train_clients(&self, t: usize, sampled: &[usize]) -> Result<Vec<(ClientUpdate, f64)>> {
        let local = self.config.local_config();
        let seed = self.config.seed;
        self.pool.install(|| {
            sampled
                .par_iter()
                .map(|&k| {
                    let (model_id, model) = self.model_to_send(k)?;
                    let shard = &self.data.shards[k];
                    let mut rng = stream(seed, Purpose::LocalTraining, t as u64, k as u64);
                    let trained = local_train(model, shard, &local, &mut rng)?;
                    let loss = evaluate(&trained, &shard.examples)?.mean_loss;
                    Ok((
                        ClientUpdate {
                            client_id: k,
                            model_id,
                            model: trained,
                        },
                        loss,
                    ))
                })
                .collect()
        })
    }

    pub fn run_round(&mut self, t: usize) -> Result<RoundReport> {
        let start = Instant::now();
        let cfg = &self.config;
        let sizes: Vec<usize> = self.data.shards.iter().map(ClientShard::len).collect();
        let sampled = sample_clients(
            &sizes,
            cfg.sampled,
            &mut stream(cfg.seed, Purpose::Sampling, t as u64, 0),
        )?;

        let trained = self.train_clients(t, &sampled)?;
        let mean_client_train_loss =
            trained.iter().map(|(_, l)| l).sum::<f64>() / trained.len() as f64;
        let updates: Vec<ClientUpdate> = trained.into_iter().map(|(u, _)| u).collect();

        let (next, comm) = match cfg.algorithm {
            Algorithm::FedEt => {
                let mut rng = stream(cfg.seed, Purpose::ServerTraining, t as u64, 0);
                let next = fed_et_server_phase(
                    &self.registry,
                    &updates,
                    &self.data.public,
                    cfg,
                    &mut rng,
                )?;
                let comm: u64 = updates
                    .iter()
                    .map(|u| 2 * u.model.param_count() as u64)
                    .sum();
                (next, comm)
            }
            Algorithm::FedAvg => {
                let weighted: Vec<(&HeterogeneousModel, usize)> = updates
                    .iter()
                    .map(|u| (&u.model, sizes[u.client_id]))
                    .collect();
                let mut next = self.registry.clone();
                next.server_model = weighted_average(&weighted)?;
                let comm = 2 * updates.len() as u64 * next.server_model.param_count() as u64;
                (next, comm)
            }
        };
        let server_test = evaluate(&next.server_model, &self.data.test)?;

        let report = RoundReport {
            round: t,
            algorithm: cfg.algorithm,
            lambda: cfg.lambda,
            seed: cfg.seed,
            sampled_clients: sampled,
            server_test,
            mean_client_train_loss,
            comm_params_round: comm,
            comm_params_cumulative: self.cumulative_comm + comm,
            wall_ms: if cfg.record_wall_time {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        self.registry = next;
        self.cumulative_comm = report.comm_params_cumulative;
        Ok(report)
    }

    /// Test-set evaluation of every small model.
    pub fn evaluate_small_models(&self) -> Result<BTreeMap<usize, Evaluation>> {
        self.registry
            .small_models
            .iter()
            .map(|(&id, m)| Ok((id, evaluate(m, &self.data.test)?)))
            .collect()
    }
}

pub struct TrainingOutcome {
    pub federation: Federation,
    pub reports: Vec<RoundReport>,
}

fn write_line(out: &mut BufWriter<File>, path: &Path, line: &str) -> Result<()> {
    writeln!(out, "{line}")
        .and_then(|_| out.flush())
        .map_err(|e| FedError::io(path, e))
}

/// Runs `rounds` rounds of `federation`, streaming metrics to `metrics_path`,
/// then checkpoints the final registry.
pub fn drive(
    mut federation: Federation,
    metrics_path: &Path,
    checkpoint_path: &Path,
) -> Result<TrainingOutcome> {
    for p in [metrics_path, checkpoint_path] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| FedError::io(dir, e))?;
        }
    }
    let file = File::create(metrics_path).map_err(|e| FedError::io(metrics_path, e))?;
    let mut out = BufWriter::new(file);
    write_line(&mut out, metrics_path, METRICS_HEADER)?;
    let mut reports = Vec::with_capacity(federation.config.rounds);
    for t in 0..federation.config.rounds {
        let report = federation.run_round(t)?;
        write_line(&mut out, metrics_path, &report.csv_row())?;
        reports.push(report);
    }
    checkpoint::save(&federation.registry, checkpoint_path)?;
    Ok(TrainingOutcome {
        federation,
        reports,
    })
}

/// Full run from a config: data, `rounds` rounds, metrics CSV and final checkpoint
/// in `out_dir`.
pub fn run_training(config: RunConfig) -> Result<TrainingOutcome> {
    let metrics = config.metrics_path();
    let ckpt = config.checkpoint_path();
    drive(Federation::new(config)?, &metrics, &ckpt)
}

/// Homogeneous baseline: the server architecture at every client, size-weighted averaging.
pub fn run_fedavg_baseline(mut config: RunConfig) -> Result<TrainingOutcome> {
    config.algorithm = Algorithm::FedAvg;
    run_training(config)
}
