//! Computable terms of the ensemble generalization bound.
//!
//! Losses here are 0–1 (misclassification rate). The divergence between a
//! client's distribution and the global one is replaced by the L1 distance
//! between label marginals, and the per-client `nu` constants are taken as
//! given rather than estimated. The report prints the measured ensemble loss
//! next to the bound; it does not claim one is below the other.

use std::fmt::Write as _;

use crate::client::argmax;
use crate::datasets::{label_marginal, ClientShard, LabeledExample};
use crate::error::{FedError, Result};
use crate::model::{HeterogeneousModel, ModelRegistry};

pub const WEIGHT_SUM_TOL: f64 = 1e-9;

fn check_weights(weights: &[f64], expected_len: usize) -> Result<()> {
    if weights.len() != expected_len {
        return Err(FedError::Dimension(format!(
            "{} weights for {expected_len} clients",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(FedError::Argument("weights must be finite and ≥ 0".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(FedError::Argument(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(FedError::Argument(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    Ok(())
}

/// Fraction of `examples` that `model` misclassifies.
pub fn zero_one_error(model: &HeterogeneousModel, examples: &[LabeledExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(FedError::Argument(
            "cannot score an empty example set".into(),
        ));
    }
    let mut wrong = 0usize;
    for e in examples {
        if argmax(model.forward(&e.features)?.data()) != e.label {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / examples.len() as f64)
}

/// `Σ α_i · err_i` where `err_i` is model `i`'s error rate on shard `i`.
pub fn empirical_loss_term(
    models: &[&HeterogeneousModel],
    shards: &[ClientShard],
    weights: &[f64],
) -> Result<f64> {
    if models.len() != shards.len() {
        return Err(FedError::Dimension(format!(
            "{} models for {} shards",
            models.len(),
            shards.len()
        )));
    }
    check_weights(weights, shards.len())?;
    let mut total = 0.0;
    for ((m, s), w) in models.iter().zip(shards).zip(weights) {
        total += w * zero_one_error(m, &s.examples)?;
    }
    Ok(total)
}

/// `√ln(1/δ) · Σ α_i / √|B_i|`.
pub fn hoeffding_term(sizes: &[usize], weights: &[f64], delta: f64) -> Result<f64> {
    check_delta(delta)?;
    check_weights(weights, sizes.len())?;
    if sizes.contains(&0) {
        return Err(FedError::Argument("shard sizes must be > 0".into()));
    }
    let sum: f64 = sizes
        .iter()
        .zip(weights)
        .map(|(&n, w)| w / (n as f64).sqrt())
        .sum();
    Ok((1.0 / delta).ln().sqrt() * sum)
}

/// Single-client deviation `√(ln(2/δ) / (2|B|))`.
pub fn per_client_deviation(size: usize, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if size == 0 {
        return Err(FedError::Argument("shard size must be > 0".into()));
    }
    Ok(((2.0 / delta).ln() / (2.0 * size as f64)).sqrt())
}

/// L1 distance between two label marginals, in `[0, 2]`.
pub fn discrepancy_proxy(shard_marginal: &[f64], target_marginal: &[f64]) -> Result<f64> {
    if shard_marginal.len() != target_marginal.len() {
        return Err(FedError::Dimension(format!(
            "marginals over {} and {} classes",
            shard_marginal.len(),
            target_marginal.len()
        )));
    }
    Ok(shard_marginal
        .iter()
        .zip(target_marginal)
        .map(|(p, q)| (p - q).abs())
        .sum())
}

/// Error rate of the prediction `argmax Σ α_i p_i(x)`.
pub fn ensemble_error(
    models: &[&HeterogeneousModel],
    weights: &[f64],
    examples: &[LabeledExample],
) -> Result<f64> {
    check_weights(weights, models.len())?;
    if examples.is_empty() {
        return Err(FedError::Argument(
            "cannot score an empty example set".into(),
        ));
    }
    let mut wrong = 0usize;
    for e in examples {
        let mut mix: Vec<f64> = Vec::new();
        for (m, &w) in models.iter().zip(weights) {
            let p = m.forward(&e.features)?;
            if mix.is_empty() {
                mix = vec![0.0; p.len()];
            }
            for (a, v) in mix.iter_mut().zip(p.data()) {
                *a += w * v;
            }
        }
        if argmax(&mix) != e.label {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / examples.len() as f64)
}

/// Weights proportional to shard size.
pub fn size_weights(shards: &[ClientShard]) -> Vec<f64> {
    let total: usize = shards.iter().map(ClientShard::len).sum();
    shards
        .iter()
        .map(|s| s.len() as f64 / total.max(1) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientTerms {
    pub client_id: usize,
    pub weight: f64,
    pub empirical_loss: f64,
    pub shard_size: usize,
    pub discrepancy: f64,
    pub nu: f64,
    pub per_client_deviation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub clients: Vec<ClientTerms>,
    /// `Σ α_i L̂_i`.
    pub empirical_term: f64,
    /// `√ln(1/δ) Σ α_i / √|B_i|`.
    pub sample_term: f64,
    /// `½ Σ α_i d_i`.
    pub discrepancy_term: f64,
    /// `Σ α_i ν_i` from configured constants.
    pub nu_term: f64,
    pub total: f64,
    /// `Σ α_i √(ln(2/δ)/(2|B_i|))`, the unsimplified per-client deviation.
    pub weighted_deviation: f64,
    /// 0–1 loss of the weighted ensemble on the test set.
    pub measured_loss: f64,
    pub delta: f64,
    /// Always false: the `nu` values are inputs, not estimates.
    pub nu_estimated: bool,
}

/// Assembles every term for the clients owning `shards`, each represented by
/// its designated model in `registry`. `nu` holds one constant per client.
pub fn bound_report(
    registry: &ModelRegistry,
    shards: &[ClientShard],
    test: &[LabeledExample],
    weights: &[f64],
    delta: f64,
    nu: &[f64],
) -> Result<BoundReport> {
    check_delta(delta)?;
    check_weights(weights, shards.len())?;
    if nu.len() != shards.len() {
        return Err(FedError::Dimension(format!(
            "{} nu constants for {} clients",
            nu.len(),
            shards.len()
        )));
    }
    if test.is_empty() {
        return Err(FedError::Argument("test set is empty".into()));
    }
    let models = shards
        .iter()
        .map(|s| registry.model_for(s.client_id).map(|(_, m)| m))
        .collect::<Result<Vec<_>>>()?;
    let n_classes = registry.server_model.n_classes();
    let target = label_marginal(test, n_classes);

    let mut clients = Vec::with_capacity(shards.len());
    for (i, s) in shards.iter().enumerate() {
        clients.push(ClientTerms {
            client_id: s.client_id,
            weight: weights[i],
            empirical_loss: zero_one_error(models[i], &s.examples)?,
            shard_size: s.len(),
            discrepancy: discrepancy_proxy(&label_marginal(&s.examples, n_classes), &target)?,
            nu: nu[i],
            per_client_deviation: per_client_deviation(s.len(), delta)?,
        });
    }
    let weighted =
        |f: &dyn Fn(&ClientTerms) -> f64| clients.iter().map(|c| c.weight * f(c)).sum::<f64>();
    let empirical_term = weighted(&|c| c.empirical_loss);
    let sizes: Vec<usize> = shards.iter().map(ClientShard::len).collect();
    let sample_term = hoeffding_term(&sizes, weights, delta)?;
    let discrepancy_term = 0.5 * weighted(&|c| c.discrepancy);
    let nu_term = weighted(&|c| c.nu);
    let weighted_deviation = weighted(&|c| c.per_client_deviation);
    Ok(BoundReport {
        empirical_term,
        sample_term,
        discrepancy_term,
        nu_term,
        total: empirical_term + sample_term + discrepancy_term + nu_term,
        weighted_deviation,
        measured_loss: ensemble_error(&models, weights, test)?,
        delta,
        nu_estimated: false,
        clients,
    })
}

pub const REPORT_CSV_HEADER: &str =
    "item,client_id,weight,empirical_loss,shard_size,discrepancy,nu,per_client_deviation,value";

impl BoundReport {
    /// Client rows first, then one row per aggregate with only `value` filled.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(REPORT_CSV_HEADER);
        s.push('\n');
        for c in &self.clients {
            let _ = writeln!(
                s,
                "client,{},{:?},{:?},{},{:?},{:?},{:?},",
                c.client_id,
                c.weight,
                c.empirical_loss,
                c.shard_size,
                c.discrepancy,
                c.nu,
                c.per_client_deviation
            );
        }
        for (name, v) in self.aggregates() {
            let _ = writeln!(s, "{name},,,,,,,,{v:?}");
        }
        s
    }

    fn aggregates(&self) -> [(&'static str, f64); 8] {
        [
            ("empirical_term", self.empirical_term),
            ("sample_term", self.sample_term),
            ("discrepancy_term", self.discrepancy_term),
            ("nu_term", self.nu_term),
            ("total", self.total),
            ("weighted_deviation", self.weighted_deviation),
            ("measured_loss", self.measured_loss),
            ("delta", self.delta),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "bound diagnostics (delta = {})", self.delta);
        let _ = writeln!(
            s,
            "{:>6} {:>8} {:>8} {:>6} {:>8} {:>6} {:>9}",
            "client", "weight", "error", "size", "L1 gap", "nu", "deviation"
        );
        for c in &self.clients {
            let _ = writeln!(
                s,
                "{:>6} {:>8.4} {:>8.4} {:>6} {:>8.4} {:>6.3} {:>9.4}",
                c.client_id,
                c.weight,
                c.empirical_loss,
                c.shard_size,
                c.discrepancy,
                c.nu,
                c.per_client_deviation
            );
        }
        let _ = writeln!(
            s,
            "weighted empirical error      {:.6}",
            self.empirical_term
        );
        let _ = writeln!(s, "sample-size term              {:.6}", self.sample_term);
        let _ = writeln!(
            s,
            "label-shift term (L1 proxy)   {:.6}",
            self.discrepancy_term
        );
        let _ = writeln!(s, "nu term (not estimated)       {:.6}", self.nu_term);
        let _ = writeln!(s, "total bound                   {:.6}", self.total);
        let _ = writeln!(
            s,
            "per-client deviation, weighted {:.6}",
            self.weighted_deviation
        );
        let _ = writeln!(s, "measured ensemble test error  {:.6}", self.measured_loss);
        s
    }
}
