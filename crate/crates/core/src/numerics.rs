//! Minimal dense network engine.
//!
//! Models are plain stacks of [`DenseLayer`]s whose final output is passed
//! through a softmax, so every forward pass ends on the probability simplex.
//! Gradients are computed analytically by reverse-mode accumulation over the
//! stack; [`grad_check`] cross-checks them against central differences.

use crate::error::{FedError, Result};

/// Clamp used inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Dense row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(FedError::Dimension(format!(
                "tensor shape must be nonempty with positive dims, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(FedError::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// One-dimensional tensor owning `data`.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Fully connected layer `y = act(W x + b)` with `W` stored `[out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(FedError::Dimension(format!(
                "layer weights must be 2-D, got {:?}",
                weights.shape()
            )));
        }
        if bias.shape() != [weights.shape()[0]] {
            return Err(FedError::Dimension(format!(
                "bias shape {:?} does not match {} outputs",
                bias.shape(),
                weights.shape()[0]
            )));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Result<Self> {
        Self::new(
            Tensor::zeros(vec![out_dim, in_dim])?,
            Tensor::zeros(vec![out_dim])?,
            activation,
        )
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn same_shape(&self, other: &DenseLayer) -> bool {
        self.weights.shape() == other.weights.shape() && self.bias.shape() == other.bias.shape()
    }

    /// Pre-activation `W x + b`.
    fn affine(&self, input: &[f64]) -> Vec<f64> {
        let n_in = self.in_dim();
        let w = self.weights.data();
        self.bias
            .data()
            .iter()
            .enumerate()
            .map(|(o, &b)| {
                let row = &w[o * n_in..(o + 1) * n_in];
                row.iter().zip(input).fold(b, |acc, (wi, xi)| acc + wi * xi)
            })
            .collect()
    }
}

fn check_stack(layers: &[DenseLayer], input_len: usize) -> Result<()> {
    let first = layers
        .first()
        .ok_or_else(|| FedError::Dimension("model has no layers".into()))?;
    if first.in_dim() != input_len {
        return Err(FedError::Dimension(format!(
            "input has {input_len} features, first layer expects {}",
            first.in_dim()
        )));
    }
    for pair in layers.windows(2) {
        if pair[0].out_dim() != pair[1].in_dim() {
            return Err(FedError::Dimension(format!(
                "layer outputs {} but next layer expects {}",
                pair[0].out_dim(),
                pair[1].in_dim()
            )));
        }
    }
    Ok(())
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Runs the stack and applies the final softmax.
pub fn forward(layers: &[DenseLayer], input: &Tensor) -> Result<Tensor> {
    forward_slice(layers, input.data())
}

pub(crate) fn forward_slice(layers: &[DenseLayer], input: &[f64]) -> Result<Tensor> {
    check_stack(layers, input.len())?;
    let mut act = input.to_vec();
    for layer in layers {
        act = layer
            .affine(&act)
            .into_iter()
            .map(|z| layer.activation.apply(z))
            .collect();
    }
    let probs = softmax(&act);
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(FedError::State(
            "forward pass produced non-finite output".into(),
        ));
    }
    Tensor::vector(probs)
}

/// `−ln(p[label] + ε)`.
pub fn cross_entropy(probabilities: &Tensor, label: usize) -> Result<f64> {
    let p = probabilities.data();
    if label >= p.len() {
        return Err(FedError::Argument(format!(
            "label {label} out of range for {} classes",
            p.len()
        )));
    }
    Ok(-(p[label] + LOG_EPS).ln())
}

/// `KL(p ‖ q) = Σ p_i ln(p_i / q_i)` with `0·ln(0/q) = 0` and `q_i` clamped at ε.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.len() != q.len() {
        return Err(FedError::Dimension(format!(
            "KL arguments have lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(kl_slices(p.data(), q.data()))
}

fn kl_slices(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(LOG_EPS)).ln())
        .sum()
}

/// Loss attached to a single input.
#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a> {
    /// Cross-entropy against a hard label.
    CrossEntropy { label: usize },
    /// `CE(label) + λ·KL(target ‖ model)`; the KL term is dropped when `target` is `None`.
    Composite {
        label: usize,
        lambda: f64,
        target: Option<&'a [f64]>,
    },
    /// `KL(target ‖ model)` alone.
    Divergence { target: &'a [f64] },
}

impl LossSpec<'_> {
    fn validate(&self, n_classes: usize) -> Result<()> {
        let label_ok = |label: usize| {
            if label < n_classes {
                Ok(())
            } else {
                Err(FedError::Argument(format!(
                    "label {label} out of range for {n_classes} classes"
                )))
            }
        };
        let target_ok = |t: &[f64]| {
            if t.len() == n_classes {
                Ok(())
            } else {
                Err(FedError::Dimension(format!(
                    "target has {} entries, model outputs {n_classes}",
                    t.len()
                )))
            }
        };
        match *self {
            LossSpec::CrossEntropy { label } => label_ok(label),
            LossSpec::Composite {
                label,
                lambda,
                target,
            } => {
                label_ok(label)?;
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(FedError::Argument(format!(
                        "lambda must be ≥ 0, got {lambda}"
                    )));
                }
                target.map_or(Ok(()), target_ok)
            }
            LossSpec::Divergence { target } => target_ok(target),
        }
    }

    /// Loss value and its gradient with respect to the output probabilities.
    fn value_and_grad(&self, probs: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; probs.len()];
        let mut value = 0.0;
        let add_ce = |label: usize, grad: &mut [f64]| {
            let denom = probs[label] + LOG_EPS;
            grad[label] -= 1.0 / denom;
            -denom.ln()
        };
        let add_kl = |target: &[f64], scale: f64, grad: &mut [f64]| {
            for ((g, &t), &q) in grad.iter_mut().zip(target).zip(probs) {
                if t > 0.0 && q > LOG_EPS {
                    *g -= scale * t / q;
                }
            }
            scale * kl_slices(target, probs)
        };
        match *self {
            LossSpec::CrossEntropy { label } => value += add_ce(label, &mut grad),
            LossSpec::Composite {
                label,
                lambda,
                target,
            } => {
                value += add_ce(label, &mut grad);
                if let Some(t) = target {
                    if lambda != 0.0 {
                        value += add_kl(t, lambda, &mut grad);
                    }
                }
            }
            LossSpec::Divergence { target } => value += add_kl(target, 1.0, &mut grad),
        }
        (value, grad)
    }
}

/// Gradient of one layer's weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Loss value with gradients mirroring the layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grads: Vec<LayerGrad>,
}

impl LossGrad {
    pub fn zeros_like(layers: &[DenseLayer]) -> Self {
        let grads = layers
            .iter()
            .map(|l| LayerGrad {
                weights: l.weights.clone_zeroed(),
                bias: l.bias.clone_zeroed(),
            })
            .collect();
        Self { value: 0.0, grads }
    }

    fn add_assign(&mut self, other: &LossGrad) {
        self.value += other.value;
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
                *x += y;
            }
            for (x, y) in a.bias.data_mut().iter_mut().zip(b.bias.data()) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        self.value *= factor;
        for g in &mut self.grads {
            g.weights.data_mut().iter_mut().for_each(|x| *x *= factor);
            g.bias.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
}

impl Tensor {
    fn clone_zeroed(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
        }
    }
}

/// Loss of one input without computing gradients.
pub fn loss_value(layers: &[DenseLayer], input: &Tensor, spec: &LossSpec<'_>) -> Result<f64> {
    let probs = forward(layers, input)?;
    spec.validate(probs.len())?;
    Ok(spec.value_and_grad(probs.data()).0)
}

/// Exact gradient of `spec`'s loss at `input` with respect to every parameter.
pub fn backward(layers: &[DenseLayer], input: &Tensor, spec: &LossSpec<'_>) -> Result<LossGrad> {
    backward_slice(layers, input.data(), spec)
}

pub(crate) fn backward_slice(
    layers: &[DenseLayer],
    input: &[f64],
    spec: &LossSpec<'_>,
) -> Result<LossGrad> {
    check_stack(layers, input.len())?;
    spec.validate(layers[layers.len() - 1].out_dim())?;

    // activations[l] is the input to layer l; pre[l] its pre-activation.
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(layers.len() + 1);
    let mut pre: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    activations.push(input.to_vec());
    for layer in layers {
        let z = layer.affine(activations.last().unwrap());
        activations.push(z.iter().map(|&v| layer.activation.apply(v)).collect());
        pre.push(z);
    }
    let probs = softmax(activations.last().unwrap());
    let (value, grad_p) = spec.value_and_grad(&probs);

    // Softmax Jacobian-vector product: g_j = p_j (gp_j − Σ p_i gp_i).
    let inner: f64 = probs.iter().zip(&grad_p).map(|(p, g)| p * g).sum();
    let mut upstream: Vec<f64> = probs
        .iter()
        .zip(&grad_p)
        .map(|(p, g)| p * (g - inner))
        .collect();

    let mut grads = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate().rev() {
        let delta: Vec<f64> = upstream
            .iter()
            .zip(&pre[l])
            .map(|(g, &z)| g * layer.activation.derivative(z))
            .collect();
        let a_in = &activations[l];
        let n_in = layer.in_dim();
        let mut gw = Vec::with_capacity(layer.weights.len());
        for &d in &delta {
            gw.extend(a_in.iter().map(|a| d * a));
        }
        let w = layer.weights.data();
        let mut next = vec![0.0; n_in];
        for (o, &d) in delta.iter().enumerate() {
            for (n, wi) in next.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                *n += wi * d;
            }
        }
        grads.push(LayerGrad {
            weights: Tensor::new(layer.weights.shape().to_vec(), gw)?,
            bias: Tensor::vector(delta)?,
        });
        upstream = next;
    }
    grads.reverse();
    Ok(LossGrad { value, grads })
}

/// Mean loss and mean gradient over a batch of `(input, loss)` pairs.
pub fn batch_backward<'a, I>(layers: &[DenseLayer], batch: I) -> Result<LossGrad>
where
    I: IntoIterator<Item = (&'a [f64], LossSpec<'a>)>,
{
    let mut total = LossGrad::zeros_like(layers);
    let mut count = 0usize;
    for (input, spec) in batch {
        total.add_assign(&backward_slice(layers, input, &spec)?);
        count += 1;
    }
    if count == 0 {
        return Err(FedError::Argument("empty batch".into()));
    }
    total.scale(1.0 / count as f64);
    Ok(total)
}

/// In-place `p ← p − η·g`.
pub fn sgd_step(layers: &mut [DenseLayer], grads: &LossGrad, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(FedError::Argument(format!(
            "learning rate must be ≥ 0, got {lr}"
        )));
    }
    if grads.grads.len() != layers.len()
        || layers.iter().zip(&grads.grads).any(|(l, g)| {
            l.weights.shape() != g.weights.shape() || l.bias.shape() != g.bias.shape()
        })
    {
        return Err(FedError::Dimension(
            "gradient shapes do not mirror parameters".into(),
        ));
    }
    for (layer, g) in layers.iter_mut().zip(&grads.grads) {
        for (p, d) in layer.weights.data_mut().iter_mut().zip(g.weights.data()) {
            *p -= lr * d;
        }
        for (p, d) in layer.bias.data_mut().iter_mut().zip(g.bias.data()) {
            *p -= lr * d;
        }
    }
    Ok(())
}

/// Worst-case disagreement between analytic and finite-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
}

const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-8;

/// Max relative error `|a − f| / max(|a|, |f|, 1e-8)` over all parameters.
pub fn grad_check(layers: &[DenseLayer], input: &Tensor, spec: &LossSpec<'_>) -> Result<f64> {
    Ok(grad_check_detailed(layers, input, spec)?.max_relative_error)
}

pub fn grad_check_detailed(
    layers: &[DenseLayer],
    input: &Tensor,
    spec: &LossSpec<'_>,
) -> Result<GradCheck> {
    let analytic = backward(layers, input, spec)?;
    let mut probe = layers.to_vec();
    let mut report = GradCheck {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
    };
    let mut record = |a: f64, f: f64| {
        let abs = (a - f).abs();
        let rel = abs / a.abs().max(f.abs()).max(REL_FLOOR);
        report.max_absolute_error = report.max_absolute_error.max(abs);
        report.max_relative_error = report.max_relative_error.max(rel);
    };

    for l in 0..probe.len() {
        for i in 0..probe[l].weights.len() {
            let fd = central_difference(&mut probe, input, spec, |ls| {
                &mut ls[l].weights.data_mut()[i]
            })?;
            record(analytic.grads[l].weights.data()[i], fd);
        }
        for i in 0..probe[l].bias.len() {
            let fd =
                central_difference(&mut probe, input, spec, |ls| &mut ls[l].bias.data_mut()[i])?;
            record(analytic.grads[l].bias.data()[i], fd);
        }
    }
    Ok(report)
}

fn central_difference<F>(
    layers: &mut [DenseLayer],
    input: &Tensor,
    spec: &LossSpec<'_>,
    mut slot: F,
) -> Result<f64>
where
    F: FnMut(&mut [DenseLayer]) -> &mut f64,
{
    let original = *slot(layers);
    *slot(layers) = original + FD_STEP;
    let plus = loss_value(layers, input, spec)?;
    *slot(layers) = original - FD_STEP;
    let minus = loss_value(layers, input, spec)?;
    *slot(layers) = original;
    Ok((plus - minus) / (2.0 * FD_STEP))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_layer(
        rng: &mut ChaCha8Rng,
        n_in: usize,
        n_out: usize,
        act: Activation,
    ) -> DenseLayer {
        let w = (0..n_in * n_out)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let b = (0..n_out).map(|_| rng.random_range(-0.5..0.5)).collect();
        DenseLayer::new(
            Tensor::new(vec![n_out, n_in], w).unwrap(),
            Tensor::vector(b).unwrap(),
            act,
        )
        .unwrap()
    }

    fn random_net(rng: &mut ChaCha8Rng, dims: &[usize]) -> Vec<DenseLayer> {
        dims.windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 2 == dims.len() {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                random_layer(rng, w[0], w[1], act)
            })
            .collect()
    }

    fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    fn random_input(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::vector((0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn tensor_rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn zero_network_outputs_uniform() {
        let net = vec![DenseLayer::zeros(5, 4, Activation::Identity).unwrap()];
        let out = forward(
            &net,
            &Tensor::vector(vec![1.0, -3.0, 2.0, 0.5, 9.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(out.data(), &[0.25; 4]);

        let net = vec![DenseLayer::zeros(3, 10, Activation::Identity).unwrap()];
        let out = forward(&net, &Tensor::vector(vec![0.0; 3]).unwrap()).unwrap();
        for p in out.data() {
            assert!((p - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let net = vec![DenseLayer::zeros(5, 4, Activation::Identity).unwrap()];
        let err = forward(&net, &Tensor::vector(vec![0.0; 4]).unwrap()).unwrap_err();
        assert!(matches!(err, FedError::Dimension(_)));
    }

    #[test]
    fn random_forward_is_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let net = random_net(&mut rng, &[6, 9, 7, 5]);
            let out = forward(&net, &random_input(&mut rng, 6)).unwrap();
            assert!(out.data().iter().all(|&p| p >= 0.0));
            assert!((out.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax(&[1000.0, 1000.0, -1000.0]);
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert!(p[2] >= 0.0);
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = Tensor::vector(vec![0.25; 4]).unwrap();
        assert!((cross_entropy(&uniform, 2).unwrap() - 4f64.ln()).abs() < 1e-10);
        let onehot = Tensor::vector(vec![0.0, 1.0, 0.0]).unwrap();
        assert!(cross_entropy(&onehot, 1).unwrap().abs() < 1e-11);
        let p = Tensor::vector(vec![0.725, 0.15, 0.125]).unwrap();
        assert!((cross_entropy(&p, 0).unwrap() - 0.321584).abs() < 1e-6);
        assert!(matches!(cross_entropy(&p, 3), Err(FedError::Argument(_))));
    }

    #[test]
    fn kl_values() {
        let p = Tensor::vector(vec![0.3, 0.7]).unwrap();
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-15);
        let a = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let b = Tensor::vector(vec![0.5, 0.5]).unwrap();
        assert!((kl_divergence(&a, &b).unwrap() - 2f64.ln()).abs() < 1e-12);
        let c = Tensor::vector(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(matches!(kl_divergence(&a, &c), Err(FedError::Dimension(_))));
    }

    #[test]
    fn kl_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.random_range(2..12);
            let p = random_simplex(&mut rng, n);
            let q = random_simplex(&mut rng, n);
            let mut oracle = 0.0;
            for i in 0..n {
                oracle += p[i] * p[i].ln() - p[i] * q[i].ln();
            }
            let got = kl_divergence(
                &Tensor::vector(p.clone()).unwrap(),
                &Tensor::vector(q.clone()).unwrap(),
            )
            .unwrap();
            assert!((got - oracle).abs() < 1e-10);
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn ce_bias_gradient_at_zero_input() {
        let net = vec![DenseLayer::zeros(3, 4, Activation::Identity).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = net;
        // Non-zero weights do not matter at a zero input.
        for w in net[0].weights.data_mut() {
            *w = rng.random_range(-1.0..1.0);
        }
        let g = backward(
            &net,
            &Tensor::vector(vec![0.0; 3]).unwrap(),
            &LossSpec::CrossEntropy { label: 2 },
        )
        .unwrap();
        let expected = [0.25, 0.25, -0.75, 0.25];
        for (got, want) in g.grads[0].bias.data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-11, "{got} vs {want}");
        }
        assert!(g.grads[0].weights.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lambda_zero_composite_equals_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = random_net(&mut rng, &[4, 6, 3]);
        let x = random_input(&mut rng, 4);
        let target = random_simplex(&mut rng, 3);
        let ce = backward(&net, &x, &LossSpec::CrossEntropy { label: 1 }).unwrap();
        let composite = backward(
            &net,
            &x,
            &LossSpec::Composite {
                label: 1,
                lambda: 0.0,
                target: Some(&target),
            },
        )
        .unwrap();
        assert_eq!(ce, composite);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..24 {
            let net = random_net(&mut rng, &[5, 7, 4]);
            let x = random_input(&mut rng, 5);
            let target = random_simplex(&mut rng, 4);
            let lambda = [0.0, 0.05, 0.5][trial % 3];
            let spec = LossSpec::Composite {
                label: trial % 4,
                lambda,
                target: Some(&target),
            };
            let err = grad_check(&net, &x, &spec).unwrap();
            assert!(err < 1e-4, "trial {trial}: {err}");
        }
    }

    #[test]
    fn linear_model_grad_check_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = random_net(&mut rng, &[4, 3]);
        let x = random_input(&mut rng, 4);
        let err = grad_check(&net, &x, &LossSpec::CrossEntropy { label: 0 }).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn zero_gradient_point_has_no_error_above_floor() {
        let net = vec![DenseLayer::zeros(3, 4, Activation::Identity).unwrap()];
        let x = Tensor::vector(vec![0.3, -0.1, 0.8]).unwrap();
        let target = [0.25; 4];
        let spec = LossSpec::Divergence { target: &target };
        let g = backward(&net, &x, &spec).unwrap();
        assert!(g.grads[0].bias.data().iter().all(|v| v.abs() < 1e-15));
        let report = grad_check_detailed(&net, &x, &spec).unwrap();
        assert!(report.max_absolute_error < REL_FLOOR, "{report:?}");
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut net = vec![DenseLayer::new(
            Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            Tensor::vector(vec![2.0]).unwrap(),
            Activation::Identity,
        )
        .unwrap()];
        let grads = LossGrad {
            value: 0.0,
            grads: vec![LayerGrad {
                weights: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
                bias: Tensor::vector(vec![1.0]).unwrap(),
            }],
        };
        sgd_step(&mut net, &grads, 0.5).unwrap();
        assert_eq!(net[0].weights.data(), &[0.5]);
        assert_eq!(net[0].bias.data(), &[1.5]);
    }

    #[test]
    fn sgd_zero_gradient_and_zero_rate_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = random_net(&mut rng, &[3, 4, 2]);
        let mut a = net.clone();
        sgd_step(&mut a, &LossGrad::zeros_like(&net), 0.7).unwrap();
        assert_eq!(a, net);
        let x = random_input(&mut rng, 3);
        let g = backward(&net, &x, &LossSpec::CrossEntropy { label: 1 }).unwrap();
        let mut b = net.clone();
        sgd_step(&mut b, &g, 0.0).unwrap();
        assert_eq!(b, net);
    }

    #[test]
    fn two_steps_equal_one_summed_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = random_net(&mut rng, &[3, 4, 2]);
        let x = random_input(&mut rng, 3);
        let g = backward(&net, &x, &LossSpec::CrossEntropy { label: 0 }).unwrap();
        let mut twice = net.clone();
        sgd_step(&mut twice, &g, 0.1).unwrap();
        sgd_step(&mut twice, &g, 0.3).unwrap();
        let mut once = net.clone();
        sgd_step(&mut once, &g, 0.4).unwrap();
        for (a, b) in twice.iter().zip(&once) {
            for (x, y) in a.weights.data().iter().zip(b.weights.data()) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn sgd_rejects_mismatched_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = random_net(&mut rng, &[3, 4, 2]);
        let other = random_net(&mut rng, &[3, 5, 2]);
        let g = LossGrad::zeros_like(&other);
        assert!(matches!(
            sgd_step(&mut net, &g, 0.1),
            Err(FedError::Dimension(_))
        ));
    }

    #[test]
    fn batch_backward_is_mean_of_singles() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = random_net(&mut rng, &[3, 4, 3]);
        let xs: Vec<Tensor> = (0..4).map(|_| random_input(&mut rng, 3)).collect();
        let batch = batch_backward(
            &net,
            xs.iter()
                .enumerate()
                .map(|(i, x)| (x.data(), LossSpec::CrossEntropy { label: i % 3 })),
        )
        .unwrap();
        let singles: Vec<LossGrad> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| backward(&net, x, &LossSpec::CrossEntropy { label: i % 3 }).unwrap())
            .collect();
        let mean_value = singles.iter().map(|g| g.value).sum::<f64>() / 4.0;
        assert!((batch.value - mean_value).abs() < 1e-14);
        for j in 0..batch.grads[0].weights.len() {
            let m = singles
                .iter()
                .map(|g| g.grads[0].weights.data()[j])
                .sum::<f64>()
                / 4.0;
            assert!((batch.grads[0].weights.data()[j] - m).abs() < 1e-14);
        }
    }

    proptest::proptest! {
        #[test]
        fn losses_are_nonnegative(seed in 0u64..10_000, n in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Tensor::vector(random_simplex(&mut rng, n)).unwrap();
            let q = Tensor::vector(random_simplex(&mut rng, n)).unwrap();
            proptest::prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-15);
            proptest::prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-10);
            proptest::prop_assert!(cross_entropy(&p, seed as usize % n).unwrap() >= 0.0);
        }
    }
}
