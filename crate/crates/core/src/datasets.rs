//! Synthetic data, non-IID client partitioning, public-set derivation and CSV I/O.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{FedError, Result};
use crate::numerics::Tensor;
use crate::rng::StreamRng;

/// Distance of every class centre from the origin.
pub const CENTER_RADIUS: f64 = 1.5;

/// One labelled feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: Tensor,
    pub label: usize,
}

/// A client's private training data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub examples: Vec<LabeledExample>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Unlabelled inputs available only to the server.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PublicSet {
    pub inputs: Vec<Tensor>,
}

impl PublicSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Parameters of a Dirichlet label-skew partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub clients: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Every shard ends up with at least this many examples.
    pub min_shard_size: usize,
}

impl PartitionSpec {
    pub fn new(clients: usize, alpha: f64, seed: u64) -> Self {
        Self {
            clients,
            alpha,
            seed,
            min_shard_size: 1,
        }
    }

    pub fn with_min_shard_size(mut self, min_shard_size: usize) -> Self {
        self.min_shard_size = min_shard_size;
        self
    }
}

/// Centre of class `class` among `n_classes` in `dim` dimensions.
///
/// The first `2·dim` classes sit on the scaled cross-polytope `±R·e_j`; any
/// further classes get fixed pseudo-random directions that depend only on
/// `(n_classes, dim, class)`.
pub fn class_center(class: usize, n_classes: usize, dim: usize) -> Vec<f64> {
    let mut center = vec![0.0; dim];
    if class < 2 * dim {
        let axis = class % dim;
        center[axis] = if class < dim {
            CENTER_RADIUS
        } else {
            -CENTER_RADIUS
        };
        return center;
    }
    let mut rng =
        crate::rng::seeded(((n_classes as u64) << 32) ^ ((dim as u64) << 16) ^ class as u64);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for c in center.iter_mut() {
        *c = normal.sample(&mut rng);
    }
    let norm = center.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    center.iter_mut().for_each(|v| *v *= CENTER_RADIUS / norm);
    center
}

/// Gaussian blobs, `n_per_class` examples per class, emitted class by class.
pub fn generate_synthetic(
    n_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    if n_classes < 2 || dim < 2 || n_per_class < 1 {
        return Err(FedError::Argument(format!(
            "need ≥2 classes, ≥2 dims, ≥1 example per class; got {n_classes}, {dim}, {n_per_class}"
        )));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(FedError::Argument(format!(
            "spread must be > 0, got {spread}"
        )));
    }
    let noise = Normal::new(0.0, spread).map_err(|e| FedError::Argument(e.to_string()))?;
    let rng = &mut crate::rng::seeded(seed);
    let mut out = Vec::with_capacity(n_classes * n_per_class);
    for class in 0..n_classes {
        let center = class_center(class, n_classes, dim);
        for _ in 0..n_per_class {
            let features = center.iter().map(|c| c + noise.sample(rng)).collect();
            out.push(LabeledExample {
                features: Tensor::vector(features)?,
                label: class,
            });
        }
    }
    Ok(out)
}

/// Shuffles and cuts the dataset into `(train, public, test)` with the given sizes.
pub fn split_counts(
    mut examples: Vec<LabeledExample>,
    counts: [usize; 3],
    seed: u64,
) -> Result<(
    Vec<LabeledExample>,
    Vec<LabeledExample>,
    Vec<LabeledExample>,
)> {
    let needed: usize = counts.iter().sum();
    if needed > examples.len() {
        return Err(FedError::Argument(format!(
            "split needs {needed} examples, dataset has {}",
            examples.len()
        )));
    }
    examples.shuffle(&mut crate::rng::seeded(seed));
    examples.truncate(needed);
    let test = examples.split_off(counts[0] + counts[1]);
    let public = examples.split_off(counts[0]);
    Ok((examples, public, test))
}

/// Split by integer ratio, e.g. `[7, 1, 2]`; the test part takes the remainder.
pub fn split_ratio(
    examples: Vec<LabeledExample>,
    ratio: [usize; 3],
    seed: u64,
) -> Result<(
    Vec<LabeledExample>,
    Vec<LabeledExample>,
    Vec<LabeledExample>,
)> {
    let total: usize = ratio.iter().sum();
    if total == 0 {
        return Err(FedError::Argument("split ratio sums to zero".into()));
    }
    let n = examples.len();
    let train = n * ratio[0] / total;
    let public = n * ratio[1] / total;
    split_counts(examples, [train, public, n - train - public], seed)
}

pub fn n_classes_of(examples: &[LabeledExample]) -> usize {
    examples.iter().map(|e| e.label + 1).max().unwrap_or(0)
}

/// Per-class fraction of a labelled set.
pub fn label_marginal(examples: &[LabeledExample], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n_classes];
    for e in examples {
        if e.label < n_classes {
            counts[e.label] += 1.0;
        }
    }
    let total = examples.len().max(1) as f64;
    counts.iter_mut().for_each(|c| *c /= total);
    counts
}

fn dirichlet(k: usize, alpha: f64, rng: &mut StreamRng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| FedError::Argument(e.to_string()))?;
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return Ok(draws.into_iter().map(|g| g / sum).collect());
        }
    }
}

/// Label-skewed partition: for every class, proportions over clients are drawn
/// from `Dir_K(alpha)` and that class's examples are assigned multinomially.
///
/// Shards smaller than `min_shard_size` are then topped up one example at a
/// time: the short client draws a fresh class profile from `Dir_N(alpha)` and
/// takes examples of the sampled class from the client holding the most of
/// that class among those with a surplus. Everything is driven by `spec.seed`.
pub fn dirichlet_partition(
    dataset: &[LabeledExample],
    spec: &PartitionSpec,
) -> Result<Vec<ClientShard>> {
    if dataset.is_empty() {
        return Err(FedError::Argument(
            "cannot partition an empty dataset".into(),
        ));
    }
    if spec.clients == 0 {
        return Err(FedError::Argument("need at least one client".into()));
    }
    if !(spec.alpha > 0.0 && spec.alpha.is_finite()) {
        return Err(FedError::Argument(format!(
            "Dirichlet concentration must be > 0, got {}",
            spec.alpha
        )));
    }
    let min = spec.min_shard_size.max(1);
    if dataset.len() < spec.clients * min {
        return Err(FedError::Config(format!(
            "{} examples cannot give {} clients {} examples each",
            dataset.len(),
            spec.clients,
            min
        )));
    }

    let k = spec.clients;
    let n_classes = n_classes_of(dataset);
    let mut rng = crate::rng::seeded(spec.seed);

    let mut owner = vec![0usize; dataset.len()];
    for class in 0..n_classes {
        let members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset[i].label == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        let proportions = dirichlet(k, spec.alpha, &mut rng)?;
        let picker =
            WeightedIndex::new(&proportions).map_err(|e| FedError::State(e.to_string()))?;
        for i in members {
            owner[i] = picker.sample(&mut rng);
        }
    }

    let mut shards: Vec<Vec<LabeledExample>> = vec![Vec::new(); k];
    let mut counts = vec![vec![0usize; n_classes]; k];
    for (example, &client) in dataset.iter().zip(&owner) {
        shards[client].push(example.clone());
        counts[client][example.label] += 1;
    }

    for short in 0..k {
        if shards[short].len() >= min {
            continue;
        }
        let profile = dirichlet(n_classes, spec.alpha, &mut rng)?;
        while shards[short].len() < min {
            let donor_for = |class: usize| {
                (0..k)
                    .filter(|&j| j != short && shards[j].len() > min && counts[j][class] > 0)
                    .max_by(|&a, &b| counts[a][class].cmp(&counts[b][class]).then(b.cmp(&a)))
            };
            let available: Vec<bool> = (0..n_classes).map(|c| donor_for(c).is_some()).collect();
            let mut weights: Vec<f64> = profile
                .iter()
                .zip(&available)
                .map(|(&p, &ok)| if ok { p } else { 0.0 })
                .collect();
            if weights.iter().sum::<f64>() <= 0.0 {
                weights = available
                    .iter()
                    .map(|&ok| if ok { 1.0 } else { 0.0 })
                    .collect();
            }
            let class = WeightedIndex::new(&weights)
                .map_err(|_| FedError::State("no donor shard available for repair".into()))?
                .sample(&mut rng);
            let donor = donor_for(class).expect("class sampled only when a donor exists");
            let pos = shards[donor]
                .iter()
                .rposition(|e| e.label == class)
                .expect("donor holds the class");
            let moved = shards[donor].remove(pos);
            counts[donor][class] -= 1;
            counts[short][class] += 1;
            shards[short].push(moved);
        }
    }

    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(client_id, examples)| ClientShard {
            client_id,
            examples,
        })
        .collect())
}

/// Strips labels and adds isotropic Gaussian noise of stddev `noise_std`.
pub fn derive_public_set(
    dataset: &[LabeledExample],
    noise_std: f64,
    seed: u64,
) -> Result<PublicSet> {
    if dataset.is_empty() {
        return Err(FedError::Argument("public set source is empty".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(FedError::Argument(format!(
            "noise stddev must be ≥ 0, got {noise_std}"
        )));
    }
    let inputs = if noise_std == 0.0 {
        dataset.iter().map(|e| e.features.clone()).collect()
    } else {
        let noise = Normal::new(0.0, noise_std).map_err(|e| FedError::Argument(e.to_string()))?;
        let rng = &mut crate::rng::seeded(seed);
        dataset
            .iter()
            .map(|e| {
                Tensor::vector(
                    e.features
                        .data()
                        .iter()
                        .map(|v| v + noise.sample(rng))
                        .collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok(PublicSet { inputs })
}

/// Draws mini-batch indices from a private stream.
#[derive(Debug, Clone)]
pub struct MinibatchSampler {
    rng: StreamRng,
}

impl MinibatchSampler {
    pub fn new(rng: StreamRng) -> Self {
        Self { rng }
    }

    /// `b` indices into `0..len`: distinct when `b ≤ len`, with replacement otherwise.
    pub fn next_indices(&mut self, len: usize, b: usize) -> Result<Vec<usize>> {
        sample_batch_indices(len, b, &mut self.rng)
    }

    pub fn next_batch<'a, T>(&mut self, items: &'a [T], b: usize) -> Result<Vec<&'a T>> {
        Ok(self
            .next_indices(items.len(), b)?
            .into_iter()
            .map(|i| &items[i])
            .collect())
    }
}

pub fn sample_batch_indices<R: Rng + ?Sized>(
    len: usize,
    b: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(FedError::State(
            "cannot sample a batch from an empty set".into(),
        ));
    }
    if b == 0 {
        return Err(FedError::Argument("batch size must be ≥ 1".into()));
    }
    if b <= len {
        Ok(rand::seq::index::sample(rng, len, b).into_vec())
    } else {
        Ok((0..b).map(|_| rng.random_range(0..len)).collect())
    }
}

/// One parsed CSV row; `label` is −1 for unlabelled public rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRecord {
    pub label: i64,
    pub features: Vec<f64>,
}

fn write_rows<'a, I>(path: &Path, dim: usize, rows: I) -> Result<()>
where
    I: IntoIterator<Item = (i64, &'a [f64])>,
{
    let file = File::create(path).map_err(|e| FedError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut line = String::from("label");
    for j in 0..dim {
        line.push_str(&format!(",f{j}"));
    }
    let io = |e| FedError::io(path, e);
    writeln!(out, "{line}").map_err(io)?;
    for (label, features) in rows {
        if features.len() != dim {
            return Err(FedError::Dimension(format!(
                "row has {} features, header declares {dim}",
                features.len()
            )));
        }
        line.clear();
        line.push_str(&label.to_string());
        for v in features {
            line.push_str(&format!(",{v:.16e}"));
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn save_labeled_csv(examples: &[LabeledExample], path: &Path) -> Result<()> {
    let dim = examples.first().map_or(0, |e| e.features.len());
    write_rows(
        path,
        dim,
        examples.iter().map(|e| (e.label as i64, e.features.data())),
    )
}

pub fn save_public_csv(public: &PublicSet, path: &Path) -> Result<()> {
    let dim = public.inputs.first().map_or(0, Tensor::len);
    write_rows(path, dim, public.inputs.iter().map(|x| (-1, x.data())))
}

/// Reads any file written by the save functions. Labels are not range-checked.
pub fn load_csv(path: &Path) -> Result<Vec<CsvRecord>> {
    let file = File::open(path).map_err(|e| FedError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file);
    let parse_err = |line: u64, message: String| FedError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let csv_err = |e: csv::Error| {
        let line = e.position().map_or(0, |p| p.line());
        match e.into_kind() {
            csv::ErrorKind::Io(source) => FedError::io(path, source),
            kind => parse_err(line, format!("{kind:?}")),
        }
    };

    let header = reader.headers().map_err(csv_err)?.clone();
    let dim = header.len().saturating_sub(1);
    if header.get(0) != Some("label")
        || header
            .iter()
            .skip(1)
            .enumerate()
            .any(|(j, h)| h != format!("f{j}"))
    {
        return Err(parse_err(1, "header must be `label,f0,f1,...`".into()));
    }

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        let label = record[0]
            .trim()
            .parse::<i64>()
            .map_err(|e| parse_err(line, format!("bad label `{}`: {e}", &record[0])))?;
        let features = record
            .iter()
            .skip(1)
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line, format!("bad feature value `{f}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        debug_assert_eq!(features.len(), dim);
        rows.push(CsvRecord { label, features });
    }
    Ok(rows)
}

/// Loads labelled rows; negative labels are rejected.
pub fn load_labeled_csv(path: &Path) -> Result<Vec<LabeledExample>> {
    load_csv(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let label = usize::try_from(r.label).map_err(|_| FedError::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 2,
                message: format!("labelled row has label {}", r.label),
            })?;
            Ok(LabeledExample {
                features: Tensor::vector(r.features)?,
                label,
            })
        })
        .collect()
}

/// Loads rows as public inputs, ignoring the label column.
pub fn load_public_csv(path: &Path) -> Result<PublicSet> {
    let inputs = load_csv(path)?
        .into_iter()
        .map(|r| Tensor::vector(r.features))
        .collect::<Result<Vec<_>>>()?;
    Ok(PublicSet { inputs })
}
