//! Server side of a round: confidence-weighted consensus distillation with
//! diversity regularization, same-architecture aggregation and head transfer.
//!
//! All maps are keyed by client or model id in a `BTreeMap`, so every sum runs
//! in ascending id order and results are bit-reproducible regardless of the
//! order in which client results arrive.

use std::collections::{BTreeMap, BTreeSet};

use crate::client::argmax;
use crate::datasets::{sample_batch_indices, PublicSet};
use crate::error::{FedError, Result};
use crate::model::{Head, HeterogeneousModel, ModelRegistry};
use crate::numerics::{self, DenseLayer, LossSpec, Tensor};
use crate::rng::StreamRng;

/// Below this total variance every client counts as equally (un)confident.
pub const VARIANCE_FLOOR: f64 = 1e-15;
const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Per-client soft decisions on one public input.
pub type LogitBundle = BTreeMap<usize, Tensor>;

/// Population variance of the simplex entries, `(1/N) Σ (s_i − 1/N)²`.
pub fn logit_variance(s: &Tensor) -> f64 {
    let n = s.len() as f64;
    let mean = 1.0 / n;
    s.data()
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n
}

/// `α_k = σ²_k / Σ_l σ²_l`, uniform when the total variance vanishes.
pub fn consensus_weights(bundle: &LogitBundle) -> BTreeMap<usize, f64> {
    let variances: BTreeMap<usize, f64> = bundle
        .iter()
        .map(|(&k, s)| (k, logit_variance(s)))
        .collect();
    weights_from_variances(&variances)
}

fn weights_from_variances(variances: &BTreeMap<usize, f64>) -> BTreeMap<usize, f64> {
    let total: f64 = variances.values().sum();
    if total < VARIANCE_FLOOR {
        let w = 1.0 / variances.len() as f64;
        return variances.keys().map(|&k| (k, w)).collect();
    }
    variances.iter().map(|(&k, &v)| (k, v / total)).collect()
}

fn combine<'a, I>(terms: I, n: usize) -> Vec<f64>
where
    I: IntoIterator<Item = (f64, &'a Tensor)>,
{
    let mut out = vec![0.0; n];
    for (w, s) in terms {
        for (o, v) in out.iter_mut().zip(s.data()) {
            *o += w * v;
        }
    }
    out
}

fn bundle_width(bundle: &LogitBundle) -> Result<usize> {
    let n = bundle
        .values()
        .next()
        .ok_or_else(|| FedError::Argument("empty logit bundle".into()))?
        .len();
    if bundle.values().any(|s| s.len() != n) {
        return Err(FedError::Dimension("bundle logits differ in length".into()));
    }
    Ok(n)
}

/// Convex combination `Σ_k α_k s_k`.
pub fn weighted_consensus(bundle: &LogitBundle, weights: &BTreeMap<usize, f64>) -> Result<Tensor> {
    let n = bundle_width(bundle)?;
    let sum: f64 = weights.values().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL || weights.values().any(|&w| w < 0.0) {
        return Err(FedError::Argument(format!(
            "consensus weights must be nonnegative and sum to 1, got sum {sum}"
        )));
    }
    let mut terms = Vec::with_capacity(bundle.len());
    for (k, s) in bundle {
        let w = *weights
            .get(k)
            .ok_or_else(|| FedError::Argument(format!("no weight for client {k}")))?;
        terms.push((w, s));
    }
    Tensor::vector(combine(terms, n))
}

/// Most probable class of the consensus, ties to the lowest index.
pub fn consensus_label(consensus: &Tensor) -> usize {
    argmax(consensus.data())
}

/// Clients whose own prediction disagrees with the consensus label.
pub fn diversity_set(bundle: &LogitBundle, consensus_label: usize) -> BTreeSet<usize> {
    bundle
        .iter()
        .filter(|(_, s)| argmax(s.data()) != consensus_label)
        .map(|(&k, _)| k)
        .collect()
}

/// How the diversity target is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiversityNormalization {
    /// Rescale the combination to sum to one.
    #[default]
    Renormalized,
    /// Keep weights normalized over the whole bundle; the result may sum to < 1.
    Raw,
}

impl DiversityNormalization {
    pub fn name(self) -> &'static str {
        match self {
            DiversityNormalization::Renormalized => "renormalized",
            DiversityNormalization::Raw => "raw",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "renormalized" => Some(Self::Renormalized),
            "raw" => Some(Self::Raw),
            _ => None,
        }
    }
}

/// `Σ_{k ∈ div} α_k s_k` with `α` normalized over the full bundle, or `None`
/// when the diversity set is empty.
pub fn diversity_target(
    bundle: &LogitBundle,
    diversity: &BTreeSet<usize>,
    weights: &BTreeMap<usize, f64>,
    normalization: DiversityNormalization,
) -> Result<Option<Tensor>> {
    if diversity.is_empty() {
        return Ok(None);
    }
    let n = bundle_width(bundle)?;
    let mut terms = Vec::with_capacity(diversity.len());
    for k in diversity {
        let s = bundle
            .get(k)
            .ok_or_else(|| FedError::Argument(format!("client {k} not in bundle")))?;
        let w = *weights
            .get(k)
            .ok_or_else(|| FedError::Argument(format!("no weight for client {k}")))?;
        terms.push((w, s));
    }
    let mut raw = combine(terms.iter().copied(), n);
    if normalization == DiversityNormalization::Renormalized {
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            raw.iter_mut().for_each(|v| *v /= total);
        } else {
            // All diversity weights vanished: fall back to their plain mean.
            raw = combine(terms.iter().map(|(_, s)| (1.0 / terms.len() as f64, *s)), n);
        }
    }
    Ok(Some(Tensor::vector(raw)?))
}

/// Everything derived from one bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusResult {
    pub weights: BTreeMap<usize, f64>,
    pub consensus: Tensor,
    pub label: usize,
    pub diversity_set: BTreeSet<usize>,
    pub diversity_target: Option<Tensor>,
}

pub fn compute_consensus(
    bundle: &LogitBundle,
    normalization: DiversityNormalization,
) -> Result<ConsensusResult> {
    bundle_width(bundle)?;
    let weights = consensus_weights(bundle);
    let consensus = weighted_consensus(bundle, &weights)?;
    let label = consensus_label(&consensus);
    let diversity = diversity_set(bundle, label);
    let target = diversity_target(bundle, &diversity, &weights, normalization)?;
    Ok(ConsensusResult {
        weights,
        consensus,
        label,
        diversity_set: diversity,
        diversity_target: target,
    })
}

/// Frozen per-sample distillation targets.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillTarget {
    pub label: usize,
    pub diversity_target: Option<Tensor>,
}

/// Consensus targets for every public input from the frozen client models.
pub fn consensus_targets(
    client_models: &BTreeMap<usize, HeterogeneousModel>,
    public: &PublicSet,
    normalization: DiversityNormalization,
) -> Result<Vec<DistillTarget>> {
    if client_models.is_empty() {
        return Err(FedError::Argument(
            "no client models to distill from".into(),
        ));
    }
    public
        .inputs
        .iter()
        .map(|x| {
            let bundle = client_models
                .iter()
                .map(|(&k, m)| Ok((k, m.forward(x)?)))
                .collect::<Result<LogitBundle>>()?;
            let r = compute_consensus(&bundle, normalization)?;
            Ok(DistillTarget {
                label: r.label,
                diversity_target: r.diversity_target,
            })
        })
        .collect()
}

fn distill_spec(target: &DistillTarget, lambda: f64) -> LossSpec<'_> {
    LossSpec::Composite {
        label: target.label,
        lambda,
        target: target.diversity_target.as_ref().map(Tensor::data),
    }
}

/// Mean over the batch of `CE(server(x), y_s) + λ·KL(s_div ‖ server(x))`.
pub fn ensemble_loss(
    server: &HeterogeneousModel,
    inputs: &[&Tensor],
    targets: &[&DistillTarget],
    lambda: f64,
) -> Result<f64> {
    if inputs.len() != targets.len() || inputs.is_empty() {
        return Err(FedError::Argument(format!(
            "{} inputs for {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if lambda.is_nan() || lambda < 0.0 {
        return Err(FedError::Argument(format!(
            "lambda must be ≥ 0, got {lambda}"
        )));
    }
    let mut total = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        total += numerics::loss_value(server.layers(), x, &distill_spec(t, lambda))?;
    }
    Ok(total / inputs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
}

/// `steps` SGD steps on the ensemble loss, each over `batch_size` distinct
/// public inputs. Targets stay fixed throughout.
pub fn server_update(
    server: &HeterogeneousModel,
    public: &PublicSet,
    targets: &[DistillTarget],
    cfg: &ServerTrainConfig,
    rng: &mut StreamRng,
) -> Result<HeterogeneousModel> {
    if cfg.batch_size == 0 || public.len() < cfg.batch_size {
        return Err(FedError::Config(format!(
            "public set of {} cannot supply server batches of {}",
            public.len(),
            cfg.batch_size
        )));
    }
    if targets.len() != public.len() {
        return Err(FedError::Argument(format!(
            "{} targets for {} public inputs",
            targets.len(),
            public.len()
        )));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) || !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
        return Err(FedError::Config(
            "server rate and lambda must be ≥ 0".into(),
        ));
    }
    let mut model = server.clone();
    for _ in 0..cfg.steps {
        let batch = sample_batch_indices(public.len(), cfg.batch_size, rng)?;
        let grads = numerics::batch_backward(
            model.layers(),
            batch.iter().map(|&i| {
                (
                    public.inputs[i].data(),
                    distill_spec(&targets[i], cfg.lambda),
                )
            }),
        )?;
        numerics::sgd_step(model.layers_mut(), &grads, cfg.lr)?;
    }
    Ok(model)
}

/// A trained model returned by a sampled client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub model_id: usize,
    pub model: HeterogeneousModel,
}

fn mean_layers<'a, I>(groups: I) -> Result<Vec<DenseLayer>>
where
    I: IntoIterator<Item = &'a [DenseLayer]>,
{
    let mut iter = groups.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| FedError::Argument("nothing to average".into()))?;
    let mut acc: Vec<DenseLayer> = first.to_vec();
    let mut count = 1usize;
    for layers in iter {
        if layers.len() != acc.len() || layers.iter().zip(&acc).any(|(a, b)| !a.same_shape(b)) {
            return Err(FedError::Dimension(
                "cannot average differently shaped models".into(),
            ));
        }
        for (a, l) in acc.iter_mut().zip(layers) {
            for (x, y) in a.weights.data_mut().iter_mut().zip(l.weights.data()) {
                *x += y;
            }
            for (x, y) in a.bias.data_mut().iter_mut().zip(l.bias.data()) {
                *x += y;
            }
        }
        count += 1;
    }
    let scale = count as f64;
    for a in &mut acc {
        a.weights.data_mut().iter_mut().for_each(|x| *x /= scale);
        a.bias.data_mut().iter_mut().for_each(|x| *x /= scale);
    }
    Ok(acc)
}

fn by_client(updates: &[ClientUpdate]) -> Vec<&ClientUpdate> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    sorted
}

/// Unweighted mean of the returned models within each model id. Ids nobody
/// trained this round keep their previous parameters.
pub fn aggregate_same_arch(
    previous: &BTreeMap<usize, HeterogeneousModel>,
    updates: &[ClientUpdate],
) -> Result<BTreeMap<usize, HeterogeneousModel>> {
    let mut groups: BTreeMap<usize, Vec<&[DenseLayer]>> = BTreeMap::new();
    for u in by_client(updates) {
        if !previous.contains_key(&u.model_id) {
            return Err(FedError::Argument(format!(
                "unknown model id {}",
                u.model_id
            )));
        }
        groups.entry(u.model_id).or_default().push(u.model.layers());
    }
    let mut out = previous.clone();
    for (id, members) in groups {
        let averaged = HeterogeneousModel::from_layers(mean_layers(members)?)?;
        if !averaged.same_shape(&previous[&id]) {
            return Err(FedError::Dimension(format!(
                "returned models do not match registry shape for id {id}"
            )));
        }
        out.insert(id, averaged);
    }
    Ok(out)
}

/// Parameter-wise mean of the returned models' heads.
pub fn average_client_heads(updates: &[ClientUpdate]) -> Result<Head> {
    let heads: Vec<Head> = by_client(updates).iter().map(|u| u.model.head()).collect();
    let stacks: Vec<[DenseLayer; 2]> = heads
        .into_iter()
        .map(|h| [h.hidden, h.classifier])
        .collect();
    let mut mean = mean_layers(stacks.iter().map(|s| &s[..]))?;
    let classifier = mean.pop().expect("two head layers");
    let hidden = mean.pop().expect("two head layers");
    Ok(Head { hidden, classifier })
}

/// Copies the server head into every small model.
pub fn broadcast_server_head(registry: &mut ModelRegistry) -> Result<()> {
    let head = registry.server_model.head();
    for m in registry.small_models.values_mut() {
        m.set_head(&head)?;
    }
    Ok(())
}
