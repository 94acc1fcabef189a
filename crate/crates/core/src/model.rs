//! Heterogeneous model zoo.
//!
//! Every model is `backbone → head`. Backbones differ per architecture; the
//! head (`u → u` ReLU, then `u → N`) has the same shape everywhere, which is
//! what lets heads be averaged across architectures and copied between the
//! server model and the small models.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{FedError, Result};
use crate::numerics::{self, Activation, DenseLayer, Tensor};
use crate::rng::StreamRng;

/// Number of layers in the shared head.
pub const HEAD_LAYERS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub feature_dim: usize,
}

impl BackboneSpec {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, feature_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_widths,
            feature_dim,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(FedError::Argument(format!(
                "backbone dims must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Layer widths from input to feature output.
    fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 2);
        dims.push(self.input_dim);
        dims.extend(&self.hidden_widths);
        dims.push(self.feature_dim);
        dims
    }

    /// Exact trainable scalar count of backbone plus head.
    pub fn param_count(&self, n_classes: usize) -> usize {
        let dims = self.dims();
        let backbone: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let u = self.feature_dim;
        backbone + u * u + u + u * n_classes + n_classes
    }
}

/// The shared-shape representation head.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub hidden: DenseLayer,
    pub classifier: DenseLayer,
}

impl Head {
    pub fn layers(&self) -> [&DenseLayer; HEAD_LAYERS] {
        [&self.hidden, &self.classifier]
    }

    pub fn same_shape(&self, other: &Head) -> bool {
        self.hidden.same_shape(&other.hidden) && self.classifier.same_shape(&other.classifier)
    }

    pub fn param_count(&self) -> usize {
        self.hidden.param_count() + self.classifier.param_count()
    }
}

/// Backbone layers followed by the two head layers.
#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneousModel {
    layers: Vec<DenseLayer>,
}

impl HeterogeneousModel {
    /// Wraps an existing layer stack, checking that it ends in a valid head.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.len() < HEAD_LAYERS + 1 {
            return Err(FedError::Dimension(format!(
                "model needs at least one backbone layer and a head, got {} layers",
                layers.len()
            )));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(FedError::Dimension("layer widths do not chain".into()));
            }
        }
        let head = &layers[layers.len() - HEAD_LAYERS..];
        if head[0].in_dim() != head[0].out_dim() {
            return Err(FedError::Dimension(
                "head hidden layer must be u → u".into(),
            ));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn backbone(&self) -> &[DenseLayer] {
        &self.layers[..self.layers.len() - HEAD_LAYERS]
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - HEAD_LAYERS].in_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn spec(&self) -> BackboneSpec {
        let backbone = self.backbone();
        BackboneSpec {
            input_dim: self.input_dim(),
            hidden_widths: backbone[..backbone.len() - 1]
                .iter()
                .map(DenseLayer::out_dim)
                .collect(),
            feature_dim: self.feature_dim(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn same_shape(&self, other: &HeterogeneousModel) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.same_shape(b))
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        numerics::forward(&self.layers, input)
    }

    /// Independent copy of the head.
    pub fn head(&self) -> Head {
        let n = self.layers.len();
        Head {
            hidden: self.layers[n - 2].clone(),
            classifier: self.layers[n - 1].clone(),
        }
    }

    pub fn set_head(&mut self, head: &Head) -> Result<()> {
        if !head.same_shape(&self.head()) {
            return Err(FedError::Dimension(format!(
                "head {}→{}→{} does not fit model head {}→{}→{}",
                head.hidden.in_dim(),
                head.hidden.out_dim(),
                head.classifier.out_dim(),
                self.feature_dim(),
                self.feature_dim(),
                self.n_classes()
            )));
        }
        let n = self.layers.len();
        self.layers[n - 2] = head.hidden.clone();
        self.layers[n - 1] = head.classifier.clone();
        Ok(())
    }

    /// Flat parameter view in layer order (weights then bias per layer).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }
}

fn xavier_layer(
    n_in: usize,
    n_out: usize,
    activation: Activation,
    rng: &mut StreamRng,
) -> Result<DenseLayer> {
    let limit = (6.0 / (n_in + n_out) as f64).sqrt();
    let weights = (0..n_in * n_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    DenseLayer::new(
        Tensor::new(vec![n_out, n_in], weights)?,
        Tensor::zeros(vec![n_out])?,
        activation,
    )
}

/// Xavier-uniform weights, zero biases.
pub fn build_model(spec: &BackboneSpec, n_classes: usize, seed: u64) -> Result<HeterogeneousModel> {
    spec.validate()?;
    if n_classes < 2 {
        return Err(FedError::Argument(format!(
            "need ≥ 2 classes, got {n_classes}"
        )));
    }
    let mut rng = crate::rng::seeded(seed);
    let dims = spec.dims();
    let mut layers = Vec::with_capacity(dims.len() + 1);
    for w in dims.windows(2) {
        layers.push(xavier_layer(w[0], w[1], Activation::Relu, &mut rng)?);
    }
    let u = spec.feature_dim;
    layers.push(xavier_layer(u, u, Activation::Relu, &mut rng)?);
    layers.push(xavier_layer(u, n_classes, Activation::Identity, &mut rng)?);
    HeterogeneousModel::from_layers(layers)
}

/// Small models keyed `1..=U`, the large server model, and the client → model-id map.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRegistry {
    pub small_models: BTreeMap<usize, HeterogeneousModel>,
    pub server_model: HeterogeneousModel,
    pub assignment: BTreeMap<usize, usize>,
}

impl ModelRegistry {
    pub fn model_count(&self) -> usize {
        self.small_models.len()
    }

    /// The small model designated to `client`.
    pub fn model_for(&self, client: usize) -> Result<(usize, &HeterogeneousModel)> {
        let id = *self.assignment.get(&client).ok_or_else(|| {
            FedError::Argument(format!("client {client} has no designated model"))
        })?;
        let model = self
            .small_models
            .get(&id)
            .ok_or_else(|| FedError::State(format!("model id {id} missing from registry")))?;
        Ok((id, model))
    }

    pub fn with_assignment(mut self, assignment: BTreeMap<usize, usize>) -> Result<Self> {
        if let Some((client, id)) = assignment
            .iter()
            .find(|(_, id)| !self.small_models.contains_key(id))
        {
            return Err(FedError::Config(format!(
                "client {client} assigned to unknown model id {id}"
            )));
        }
        self.assignment = assignment;
        Ok(self)
    }

    /// Same model ids, same layer shapes, same assignment keys.
    pub fn check_compatible(&self, other: &ModelRegistry) -> Result<()> {
        if !self.server_model.same_shape(&other.server_model) {
            return Err(FedError::Config("server model shapes differ".into()));
        }
        if self.small_models.len() != other.small_models.len() {
            return Err(FedError::Config(format!(
                "registry has {} small models, expected {}",
                other.small_models.len(),
                self.small_models.len()
            )));
        }
        for (id, m) in &self.small_models {
            match other.small_models.get(id) {
                Some(o) if o.same_shape(m) => {}
                _ => {
                    return Err(FedError::Config(format!(
                        "small model {id} differs in shape"
                    )))
                }
            }
        }
        if self.assignment.len() != other.assignment.len() {
            return Err(FedError::Config("client assignments differ".into()));
        }
        Ok(())
    }
}

/// Builds `U` small models and the server model, all from one seed. Every
/// small model starts with a copy of the server's head.
///
/// All specs must share `input_dim` and `feature_dim`, and the server must have
/// strictly more parameters than every small model.
pub fn registry_init(
    specs: &[BackboneSpec],
    server_spec: &BackboneSpec,
    n_classes: usize,
    seed: u64,
) -> Result<ModelRegistry> {
    if specs.is_empty() {
        return Err(FedError::Config("need at least one small model".into()));
    }
    for spec in specs {
        if spec.input_dim != server_spec.input_dim || spec.feature_dim != server_spec.feature_dim {
            return Err(FedError::Config(format!(
                "small model {spec:?} disagrees with server on input or feature dim"
            )));
        }
    }
    let server_size = server_spec.param_count(n_classes);
    if let Some(big) = specs
        .iter()
        .find(|s| s.param_count(n_classes) >= server_size)
    {
        return Err(FedError::Config(format!(
            "server model ({server_size} params) must be larger than every small model; {:?} has {}",
            big.hidden_widths,
            big.param_count(n_classes)
        )));
    }
    let mut small_models = BTreeMap::new();
    for (i, spec) in specs.iter().enumerate() {
        let id = i + 1;
        let model_seed =
            crate::rng::derive_seed(seed, crate::rng::Purpose::ModelInit, id as u64, 0);
        small_models.insert(id, build_model(spec, n_classes, model_seed)?);
    }
    let server_seed = crate::rng::derive_seed(seed, crate::rng::Purpose::ModelInit, 0, 0);
    let server_model = build_model(server_spec, n_classes, server_seed)?;
    // The head is shared, so everyone starts from the server's.
    let head = server_model.head();
    for m in small_models.values_mut() {
        m.set_head(&head)?;
    }
    Ok(ModelRegistry {
        small_models,
        server_model,
        assignment: BTreeMap::new(),
    })
}

/// Each client gets a model id drawn uniformly from `1..=U`.
pub fn assign_models(
    client_ids: &[usize],
    models: usize,
    seed: u64,
) -> Result<BTreeMap<usize, usize>> {
    if models == 0 {
        return Err(FedError::Argument("need at least one model id".into()));
    }
    let mut rng = crate::rng::seeded(seed);
    Ok(client_ids
        .iter()
        .map(|&k| (k, rng.random_range(1..=models)))
        .collect())
}
