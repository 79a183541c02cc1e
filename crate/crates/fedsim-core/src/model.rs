//! Small explicit model families: linear regression, softmax (logistic)
//! classification, and a tanh multilayer perceptron. All gradients are
//! analytic; Hessian-vector products use central finite differences of the
//! analytic gradient.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::param::{LayerLayout, ParamVector};

pub const MACHINE_EPS: f64 = f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Linear,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Half-scaled squared error: per example `0.5 * ||y_hat - y||^2`.
    SquaredError,
    /// Softmax cross-entropy over integer class targets.
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
}

/// Architecture description. `hidden_dims` and `activation` apply to the
/// MLP family only; `bias` adds one bias term per output unit of each layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub input_dim: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    pub loss: LossKind,
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn default_true() -> bool {
    true
}

/// Supervised targets for one data split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    /// Regression targets, row-major `n * output_dim`.
    Values(Vec<f64>),
    /// Class indices in `[0, output_dim)`.
    Classes(Vec<usize>),
}

/// One data split: `n` examples with row-major features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSplit {
    pub inputs: Vec<f64>,
    pub targets: Targets,
    pub n: usize,
    pub input_dim: usize,
}

impl DataSplit {
    pub fn new(inputs: Vec<f64>, targets: Targets, input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(FedError::domain("data split: input_dim must be positive"));
        }
        if inputs.len() % input_dim != 0 {
            return Err(FedError::domain("data split: inputs not a multiple of input_dim"));
        }
        let n = inputs.len() / input_dim;
        let ok = match &targets {
            Targets::Values(v) => n > 0 && v.len() % n == 0,
            Targets::Classes(c) => c.len() == n,
        };
        if !ok {
            return Err(FedError::domain("data split: target length mismatch"));
        }
        Ok(DataSplit { inputs, targets, n, input_dim })
    }

    pub fn example(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// All example indices, in order.
    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.n).collect()
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(FedError::config("model: input_dim and output_dim must be positive"));
        }
        match self.family {
            ModelFamily::Linear => {
                if self.loss != LossKind::SquaredError {
                    return Err(FedError::config("model: linear family requires squared_error loss"));
                }
                if !self.hidden_dims.is_empty() {
                    return Err(FedError::config("model: linear family takes no hidden_dims"));
                }
            }
            ModelFamily::Logistic => {
                if self.loss != LossKind::CrossEntropy {
                    return Err(FedError::config("model: logistic family requires cross_entropy loss"));
                }
                if !self.hidden_dims.is_empty() {
                    return Err(FedError::config("model: logistic family takes no hidden_dims"));
                }
                if self.output_dim < 2 {
                    return Err(FedError::config("model: logistic family needs output_dim >= 2 classes"));
                }
            }
            ModelFamily::Mlp => {
                if self.hidden_dims.iter().any(|&h| h == 0) {
                    return Err(FedError::config("model: hidden_dims must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Layer widths from input to output.
    fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        if self.family == ModelFamily::Mlp {
            dims.extend(&self.hidden_dims);
        }
        dims.push(self.output_dim);
        dims
    }

    /// Layers are named `layer0..layerL`; each span holds the row-major
    /// weight matrix followed by the bias vector when biases are enabled.
    pub fn layout(&self) -> Arc<LayerLayout> {
        let dims = self.dims();
        let parts: Vec<(String, usize)> = dims
            .windows(2)
            .enumerate()
            .map(|(l, d)| (format!("layer{l}"), d[1] * d[0] + if self.bias { d[1] } else { 0 }))
            .collect();
        let refs: Vec<(&str, usize)> = parts.iter().map(|(n, l)| (n.as_str(), *l)).collect();
        Arc::new(LayerLayout::new(&refs))
    }

    pub fn param_dim(&self) -> usize {
        self.layout().dim()
    }

    pub fn is_classification(&self) -> bool {
        self.loss == LossKind::CrossEntropy
    }
}

/// Xavier-uniform initialization: weights from `U(-limit, limit)` with
/// `limit = sqrt(6 / (fan_in + fan_out))`, biases zero. Identical rng
/// streams yield identical parameters.
pub fn init_params(spec: &ModelSpec, rng: &mut impl Rng) -> ParamVector {
    let layout = spec.layout();
    let dims = spec.dims();
    let mut values = Vec::with_capacity(layout.dim());
    for d in dims.windows(2) {
        let (fan_in, fan_out) = (d[0], d[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            values.push(rng.random_range(-limit..limit));
        }
        if spec.bias {
            values.extend(std::iter::repeat(0.0).take(fan_out));
        }
    }
    ParamVector::new(values, layout).expect("layout covers generated values")
}

/// Per-layer parameter views into a flat vector.
struct Layers<'a> {
    spec: &'a ModelSpec,
    dims: Vec<usize>,
    values: &'a [f64],
    offsets: Vec<usize>,
}

impl<'a> Layers<'a> {
    fn new(spec: &'a ModelSpec, params: &'a ParamVector) -> Self {
        let dims = spec.dims();
        let mut offsets = Vec::with_capacity(dims.len());
        let mut off = 0;
        for d in dims.windows(2) {
            offsets.push(off);
            off += d[1] * d[0] + if spec.bias { d[1] } else { 0 };
        }
        Layers { spec, dims, values: &params.values, offsets }
    }

    fn count(&self) -> usize {
        self.dims.len() - 1
    }

    fn weight(&self, l: usize) -> &[f64] {
        let (din, dout) = (self.dims[l], self.dims[l + 1]);
        &self.values[self.offsets[l]..self.offsets[l] + dout * din]
    }

    fn bias(&self, l: usize) -> Option<&[f64]> {
        if !self.spec.bias {
            return None;
        }
        let (din, dout) = (self.dims[l], self.dims[l + 1]);
        let start = self.offsets[l] + dout * din;
        Some(&self.values[start..start + dout])
    }
}

/// Forward pass for one example; returns all pre-activations by layer plus
/// the final output. Hidden layers apply tanh, the output layer is linear.
fn forward_example(layers: &Layers, x: &[f64], keep: bool) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut activations: Vec<Vec<f64>> = Vec::new();
    let mut cur: Vec<f64> = x.to_vec();
    let last = layers.count() - 1;
    for l in 0..layers.count() {
        let (din, dout) = (layers.dims[l], layers.dims[l + 1]);
        let w = layers.weight(l);
        let b = layers.bias(l);
        let mut next = vec![0.0; dout];
        for o in 0..dout {
            let mut z = b.map_or(0.0, |b| b[o]);
            let row = &w[o * din..(o + 1) * din];
            for (wi, xi) in row.iter().zip(&cur) {
                z += wi * xi;
            }
            next[o] = z;
        }
        if l < last {
            for z in next.iter_mut() {
                *z = z.tanh();
            }
        }
        if keep {
            activations.push(cur.clone());
        }
        cur = next;
    }
    (activations, cur)
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| e / s).collect()
}

fn example_loss(spec: &ModelSpec, out: &[f64], targets: &Targets, i: usize) -> Result<f64> {
    match (spec.loss, targets) {
        (LossKind::SquaredError, Targets::Values(y)) => {
            let yi = &y[i * spec.output_dim..(i + 1) * spec.output_dim];
            Ok(0.5 * out.iter().zip(yi).map(|(o, t)| (o - t) * (o - t)).sum::<f64>())
        }
        (LossKind::CrossEntropy, Targets::Classes(c)) => {
            let class = c[i];
            if class >= out.len() {
                return Err(FedError::domain(format!(
                    "class {class} out of range for {} outputs",
                    out.len()
                )));
            }
            Ok(log_sum_exp(out) - out[class])
        }
        _ => Err(FedError::domain("loss kind does not match target kind")),
    }
}

/// Residual at the output layer: the gradient of the example loss with
/// respect to the output pre-activations.
fn output_residual(spec: &ModelSpec, out: &[f64], targets: &Targets, i: usize) -> Vec<f64> {
    match (spec.loss, targets) {
        (LossKind::SquaredError, Targets::Values(y)) => {
            let yi = &y[i * spec.output_dim..(i + 1) * spec.output_dim];
            out.iter().zip(yi).map(|(o, t)| o - t).collect()
        }
        (LossKind::CrossEntropy, Targets::Classes(c)) => {
            let mut r = softmax(out);
            r[c[i]] -= 1.0;
            r
        }
        _ => unreachable!("checked by example_loss"),
    }
}

/// Mean loss over the indexed examples. Rejects empty batches and
/// non-finite results.
pub fn loss(spec: &ModelSpec, params: &ParamVector, data: &DataSplit, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(FedError::domain("loss: empty batch"));
    }
    let layers = Layers::new(spec, params);
    let mut total = 0.0;
    for &i in idx {
        let (_, out) = forward_example(&layers, data.example(i), false);
        total += example_loss(spec, &out, &data.targets, i)?;
    }
    let mean = total / idx.len() as f64;
    if !mean.is_finite() {
        return Err(FedError::domain("loss: non-finite value"));
    }
    Ok(mean)
}

/// Accumulates one example's gradient (backprop) into `grad`.
fn accumulate_example_grad(
    spec: &ModelSpec,
    layers: &Layers,
    data: &DataSplit,
    i: usize,
    grad: &mut [f64],
) -> Result<f64> {
    let x = data.example(i);
    let (acts, out) = forward_example(layers, x, true);
    let l = example_loss(spec, &out, &data.targets, i)?;
    let mut delta = output_residual(spec, &out, &data.targets, i);
    // Walk layers backwards; `acts[l]` is the input fed into layer l.
    for lidx in (0..layers.count()).rev() {
        let (din, dout) = (layers.dims[lidx], layers.dims[lidx + 1]);
        let input = &acts[lidx];
        let off = layers.offsets[lidx];
        for o in 0..dout {
            let row = off + o * din;
            for j in 0..din {
                grad[row + j] += delta[o] * input[j];
            }
            if spec.bias {
                grad[off + dout * din + o] += delta[o];
            }
        }
        if lidx > 0 {
            let w = layers.weight(lidx);
            let mut prev = vec![0.0; din];
            for j in 0..din {
                let mut s = 0.0;
                for o in 0..dout {
                    s += w[o * din + j] * delta[o];
                }
                // Input to this layer was tanh(u); tanh'(u) = 1 - tanh(u)^2.
                prev[j] = s * (1.0 - input[j] * input[j]);
            }
            delta = prev;
        }
    }
    Ok(l)
}

/// Mean gradient over the indexed examples.
pub fn gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &DataSplit,
    idx: &[usize],
) -> Result<ParamVector> {
    if idx.is_empty() {
        return Err(FedError::domain("gradient: empty batch"));
    }
    let layers = Layers::new(spec, params);
    let mut grad = vec![0.0; params.dim()];
    for &i in idx {
        accumulate_example_grad(spec, &layers, data, i, &mut grad)?;
    }
    let inv = 1.0 / idx.len() as f64;
    for g in grad.iter_mut() {
        *g *= inv;
        if !g.is_finite() {
            return Err(FedError::domain("gradient: non-finite value"));
        }
    }
    ParamVector::new(grad, params.layout().clone())
}

/// Hessian-vector product by central finite differences of the analytic
/// gradient, with step `sqrt(machine_eps) * (1 + ||w||) / max(||v||, 1)`.
pub fn hvp(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &DataSplit,
    idx: &[usize],
    v: &ParamVector,
) -> Result<ParamVector> {
    if !params.same_layout(v) {
        return Err(FedError::domain("hvp: direction layout differs from params"));
    }
    let eps = MACHINE_EPS.sqrt() * (1.0 + params.norm()) / v.norm().max(1.0);
    let mut plus = params.clone();
    plus.axpy(eps, v)?;
    let mut minus = params.clone();
    minus.axpy(-eps, v)?;
    let gp = gradient(spec, &plus, data, idx)?;
    let gm = gradient(spec, &minus, data, idx)?;
    let mut out = gp.sub(&gm)?;
    for o in out.values.iter_mut() {
        *o /= 2.0 * eps;
    }
    Ok(out)
}

/// Empirical Fisher diagonal: the mean of squared per-example gradients.
pub fn fisher_diag(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &DataSplit,
    idx: &[usize],
) -> Result<ParamVector> {
    if idx.is_empty() {
        return Err(FedError::domain("fisher_diag: empty batch"));
    }
    let layers = Layers::new(spec, params);
    let mut acc = vec![0.0; params.dim()];
    let mut g = vec![0.0; params.dim()];
    for &i in idx {
        g.iter_mut().for_each(|x| *x = 0.0);
        accumulate_example_grad(spec, &layers, data, i, &mut g)?;
        for (a, gi) in acc.iter_mut().zip(&g) {
            *a += gi * gi;
        }
    }
    let inv = 1.0 / idx.len() as f64;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    ParamVector::new(acc, params.layout().clone())
}

/// Model outputs for the indexed examples: raw outputs for regression,
/// softmax probabilities for classification. Row-major `idx.len() x output_dim`.
pub fn predict(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &DataSplit,
    idx: &[usize],
) -> Vec<f64> {
    let layers = Layers::new(spec, params);
    let mut out = Vec::with_capacity(idx.len() * spec.output_dim);
    for &i in idx {
        let (_, o) = forward_example(&layers, data.example(i), false);
        if spec.is_classification() {
            out.extend(softmax(&o));
        } else {
            out.extend(o);
        }
    }
    out
}

/// Loss and accuracy of precomputed predictions (as `predict` lays them
/// out) against the split's targets. Accuracy is `None` for regression.
pub fn prediction_metrics(
    spec: &ModelSpec,
    preds: &[f64],
    data: &DataSplit,
    idx: &[usize],
) -> Result<(f64, Option<f64>)> {
    if idx.is_empty() {
        return Err(FedError::domain("prediction_metrics: empty batch"));
    }
    let d = spec.output_dim;
    let mut total = 0.0;
    let mut hits = 0usize;
    for (k, &i) in idx.iter().enumerate() {
        let row = &preds[k * d..(k + 1) * d];
        match (&data.targets, spec.is_classification()) {
            (Targets::Values(y), false) => {
                let yi = &y[i * d..(i + 1) * d];
                total += 0.5 * row.iter().zip(yi).map(|(o, t)| (o - t) * (o - t)).sum::<f64>();
            }
            (Targets::Classes(c), true) => {
                // Rows are probabilities here; clip to keep the log finite.
                total += -(row[c[i]].max(1e-300)).ln();
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                    .map(|(j, _)| j)
                    .unwrap_or(0);
                if argmax == c[i] {
                    hits += 1;
                }
            }
            _ => return Err(FedError::domain("prediction kind does not match target kind")),
        }
    }
    let loss = total / idx.len() as f64;
    let acc = spec.is_classification().then(|| hits as f64 / idx.len() as f64);
    Ok((loss, acc))
}

/// Loss and accuracy of `params` on the indexed examples.
pub fn evaluate(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &DataSplit,
    idx: &[usize],
) -> Result<(f64, Option<f64>)> {
    let preds = predict(spec, params, data, idx);
    prediction_metrics(spec, &preds, data, idx)
}

/// Ensemble prediction: the unweighted mean of member predictions, laid
/// out like `predict`. A one-member mixture reproduces `predict` exactly.
pub fn mixture_predict(
    spec: &ModelSpec,
    members: &[&ParamVector],
    data: &DataSplit,
    idx: &[usize],
) -> Result<Vec<f64>> {
    if members.is_empty() {
        return Err(FedError::domain("mixture_predict: no members"));
    }
    let mut acc = vec![0.0; idx.len() * spec.output_dim];
    for m in members {
        for (a, p) in acc.iter_mut().zip(predict(spec, m, data, idx)) {
            *a += p;
        }
    }
    let inv = 1.0 / members.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Ok(acc)
}

/// Loss and accuracy of the mean-of-members prediction.
pub fn evaluate_mixture(
    spec: &ModelSpec,
    members: &[&ParamVector],
    data: &DataSplit,
    idx: &[usize],
) -> Result<(f64, Option<f64>)> {
    let preds = mixture_predict(spec, members, data, idx)?;
    prediction_metrics(spec, &preds, data, idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn linear_spec(bias: bool) -> ModelSpec {
        ModelSpec {
            family: ModelFamily::Linear,
            input_dim: 1,
            output_dim: 1,
            hidden_dims: vec![],
            activation: Activation::Tanh,
            loss: LossKind::SquaredError,
            bias,
        }
    }

    fn mlp_spec(hidden: Vec<usize>) -> ModelSpec {
        ModelSpec {
            family: ModelFamily::Mlp,
            input_dim: 2,
            output_dim: 1,
            hidden_dims: hidden,
            activation: Activation::Tanh,
            loss: LossKind::SquaredError,
            bias: true,
        }
    }

    #[test]
    fn linear_dim_is_d_plus_one_with_bias() {
        let spec = ModelSpec { input_dim: 4, ..linear_spec(true) };
        assert_eq!(spec.param_dim(), 5);
        assert_eq!(spec.layout().layer_names(), vec!["layer0"]);
    }

    #[test]
    fn mlp_2_3_1_has_13_params() {
        let spec = mlp_spec(vec![3]);
        assert_eq!(spec.param_dim(), 13);
        assert_eq!(spec.layout().layer_names(), vec!["layer0", "layer1"]);
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let spec = mlp_spec(vec![3]);
        let a = init_params(&spec, &mut substream(9, "init", 0, 0));
        let b = init_params(&spec, &mut substream(9, "init", 0, 0));
        assert_eq!(a.values, b.values);
        // layer0 biases live at offsets 6..9, layer1 bias at 12.
        assert_eq!(&a.values[6..9], &[0.0, 0.0, 0.0]);
        assert_eq!(a.values[12], 0.0);
        let c = init_params(&spec, &mut substream(10, "init", 0, 0));
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn squared_loss_on_exact_fit_is_zero_and_w0_is_two() {
        // One example (x=1, y=2) under y_hat = w*x without bias.
        let spec = linear_spec(false);
        let data = DataSplit::new(vec![1.0], Targets::Values(vec![2.0]), 1).unwrap();
        let layout = spec.layout();
        let fit = ParamVector::new(vec![2.0], layout.clone()).unwrap();
        let zero = ParamVector::new(vec![0.0], layout).unwrap();
        assert_eq!(loss(&spec, &fit, &data, &[0]).unwrap(), 0.0);
        assert_eq!(loss(&spec, &zero, &data, &[0]).unwrap(), 2.0);
    }

    #[test]
    fn logistic_at_zero_params_is_ln_class_count() {
        for classes in [2usize, 5] {
            let spec = ModelSpec {
                family: ModelFamily::Logistic,
                input_dim: 3,
                output_dim: classes,
                hidden_dims: vec![],
                activation: Activation::Tanh,
                loss: LossKind::CrossEntropy,
                bias: true,
            };
            let data = DataSplit::new(vec![0.5, -1.0, 2.0], Targets::Classes(vec![1]), 3).unwrap();
            let zero = ParamVector::zeros(spec.layout());
            let l = loss(&spec, &zero, &data, &[0]).unwrap();
            assert!((l - (classes as f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_gradient_is_w_minus_a() {
        // Point (x=1, y=a) makes the loss 0.5*(w-a)^2, so grad = w - a.
        let spec = linear_spec(false);
        let data = DataSplit::new(vec![1.0], Targets::Values(vec![3.0]), 1).unwrap();
        let w = ParamVector::new(vec![5.0], spec.layout()).unwrap();
        let g = gradient(&spec, &w, &data, &[0]).unwrap();
        assert!((g.values[0] - 2.0).abs() < 1e-15);
        let fit = ParamVector::new(vec![3.0], spec.layout()).unwrap();
        let g0 = gradient(&spec, &fit, &data, &[0]).unwrap();
        assert_eq!(g0.values[0], 0.0);
    }

    #[test]
    fn hvp_of_scaled_quadratic_is_h_times_v() {
        // Point (x=sqrt(3), y=0) gives loss (3/2) w^2, Hessian 3.
        let spec = linear_spec(false);
        let x = 3.0_f64.sqrt();
        let data = DataSplit::new(vec![x], Targets::Values(vec![0.0]), 1).unwrap();
        let w = ParamVector::new(vec![0.7], spec.layout()).unwrap();
        let v = ParamVector::new(vec![2.0], spec.layout()).unwrap();
        let hv = hvp(&spec, &w, &data, &[0], &v).unwrap();
        assert!((hv.values[0] - 6.0).abs() < 1e-6, "got {}", hv.values[0]);
        let z = ParamVector::new(vec![0.0], spec.layout()).unwrap();
        let hz = hvp(&spec, &w, &data, &[0], &z).unwrap();
        assert_eq!(hz.values[0], 0.0);
    }

    #[test]
    fn hvp_is_symmetric_in_directions() {
        let spec = mlp_spec(vec![3]);
        let data = DataSplit::new(
            vec![0.2, -0.4, 1.0, 0.3, -0.7, 0.9],
            Targets::Values(vec![0.5, -0.2, 0.8]),
            2,
        )
        .unwrap();
        let idx = data.all_indices();
        let w = init_params(&spec, &mut substream(3, "init", 0, 0));
        let mut r = substream(3, "dir", 0, 0);
        let u = ParamVector::new(
            (0..w.dim()).map(|_| r.random_range(-1.0..1.0)).collect(),
            w.layout().clone(),
        )
        .unwrap();
        let v = ParamVector::new(
            (0..w.dim()).map(|_| r.random_range(-1.0..1.0)).collect(),
            w.layout().clone(),
        )
        .unwrap();
        let hu = hvp(&spec, &w, &data, &idx, &u).unwrap();
        let hv = hvp(&spec, &w, &data, &idx, &v).unwrap();
        let a = v.dot(&hu).unwrap();
        let b = u.dot(&hv).unwrap();
        assert!((a - b).abs() <= 1e-4 * (1.0 + a.abs()), "{a} vs {b}");
    }

    #[test]
    fn fisher_diag_cases() {
        let spec = linear_spec(false);
        // Exact fit: per-example gradient is zero, so Fisher is zero.
        let fit_data = DataSplit::new(vec![1.0], Targets::Values(vec![2.0]), 1).unwrap();
        let fit = ParamVector::new(vec![2.0], spec.layout()).unwrap();
        assert_eq!(fisher_diag(&spec, &fit, &fit_data, &[0]).unwrap().values, vec![0.0]);
        // Single example: Fisher equals the squared gradient.
        let w = ParamVector::new(vec![5.0], spec.layout()).unwrap();
        let data = DataSplit::new(vec![1.0], Targets::Values(vec![3.0]), 1).unwrap();
        let f = fisher_diag(&spec, &w, &data, &[0]).unwrap();
        assert!((f.values[0] - 4.0).abs() < 1e-15);
        // Two examples: mean of squared per-example gradients, computed by hand.
        let data2 =
            DataSplit::new(vec![1.0, 2.0], Targets::Values(vec![3.0, 1.0]), 1).unwrap();
        let f2 = fisher_diag(&spec, &w, &data2, &[0, 1]).unwrap();
        // grads: (5-3)*1 = 2 and (10-1)*2 = 18; mean of squares = (4+324)/2.
        assert!((f2.values[0] - 164.0).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_empty_batch_and_bad_class() {
        let spec = linear_spec(false);
        let data = DataSplit::new(vec![1.0], Targets::Values(vec![2.0]), 1).unwrap();
        let w = ParamVector::new(vec![0.0], spec.layout()).unwrap();
        assert!(loss(&spec, &w, &data, &[]).is_err());
        let cls_spec = ModelSpec {
            family: ModelFamily::Logistic,
            input_dim: 1,
            output_dim: 2,
            hidden_dims: vec![],
            activation: Activation::Tanh,
            loss: LossKind::CrossEntropy,
            bias: false,
        };
        let bad = DataSplit::new(vec![1.0], Targets::Classes(vec![2]), 1).unwrap();
        let w2 = ParamVector::zeros(cls_spec.layout());
        assert!(loss(&cls_spec, &w2, &bad, &[0]).is_err());
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let spec = ModelSpec {
            family: ModelFamily::Logistic,
            input_dim: 1,
            output_dim: 2,
            hidden_dims: vec![],
            activation: Activation::Tanh,
            loss: LossKind::CrossEntropy,
            bias: false,
        };
        // W = [[1],[.-1]] scores class 0 higher for positive x.
        let w = ParamVector::new(vec![1.0, -1.0], spec.layout()).unwrap();
        let data =
            DataSplit::new(vec![1.0, -1.0], Targets::Classes(vec![0, 1]), 1).unwrap();
        let (_, acc) = evaluate(&spec, &w, &data, &[0, 1]).unwrap();
        assert_eq!(acc, Some(1.0));
        let flipped =
            DataSplit::new(vec![1.0, -1.0], Targets::Classes(vec![1, 0]), 1).unwrap();
        let (_, acc2) = evaluate(&spec, &w, &flipped, &[0, 1]).unwrap();
        assert_eq!(acc2, Some(0.0));
    }
}
