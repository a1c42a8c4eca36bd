//! Differentiable classifiers with per-sample losses, weighted gradients and
//! exact Hessians.
//!
//! Parameters live in one flat [`ParamVector`]. The layout is fixed per
//! [`ModelSpec`] and published by [`ModelSpec::layout`]: layers in order,
//! each as a row-major weight block followed by its bias block. Saliency
//! masks and Hessians index into this coordinate system.

mod net;
pub mod scalar;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CluError, Result};
use scalar::Dual;

pub use net::PROB_FLOOR;

/// Default upper bound on the parameter count for [`explicit_hessian`].
pub const HESSIAN_PARAM_CAP: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

/// Test-only loss `1/2 (θ-c)ᵀA(θ-c) + gᵀθ`, identical for every sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSurrogate {
    /// Row-major symmetric matrix `A`, `dim x dim`.
    pub hessian: Vec<f64>,
    pub center: Vec<f64>,
    pub linear: Vec<f64>,
}

impl QuadraticSurrogate {
    pub fn new(hessian: &DMatrix<f64>, center: Vec<f64>, linear: Vec<f64>) -> Self {
        let dim = center.len();
        let mut h = Vec::with_capacity(dim * dim);
        for r in 0..dim {
            for c in 0..dim {
                h.push(hessian[(r, c)]);
            }
        }
        Self {
            hessian: h,
            center,
            linear,
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.hessian)
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        let d = self.dim();
        let diff: Vec<f64> = theta.iter().zip(&self.center).map(|(t, c)| t - c).collect();
        let mut q = 0.0;
        for r in 0..d {
            let mut row = 0.0;
            for c in 0..d {
                row += self.hessian[r * d + c] * diff[c];
            }
            q += diff[r] * row;
        }
        0.5 * q + self.linear.iter().zip(theta).map(|(g, t)| g * t).sum::<f64>()
    }

    fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|r| {
                let mut s = self.linear[r];
                for c in 0..d {
                    s += self.hessian[r * d + c] * (theta[c] - self.center[c]);
                }
                s
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Fully connected network with the given hidden widths.
    Mlp { hidden: Vec<usize> },
    /// 1-D convolutions (kernel 3, same padding) over the feature vector,
    /// global average pooling, then a linear head.
    TinyConv { channels: Vec<usize> },
    Quadratic(QuadraticSurrogate),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

/// One named block of the flat parameter layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, num_classes: usize, activation: Activation) -> Self {
        Self {
            architecture: Architecture::Mlp { hidden },
            input_dim,
            num_classes,
            activation,
        }
    }

    pub fn tiny_conv(
        input_dim: usize,
        channels: Vec<usize>,
        num_classes: usize,
        activation: Activation,
    ) -> Self {
        Self {
            architecture: Architecture::TinyConv { channels },
            input_dim,
            num_classes,
            activation,
        }
    }

    /// Quadratic surrogate; features are ignored so `input_dim` is 1.
    pub fn quadratic(surrogate: QuadraticSurrogate) -> Self {
        Self {
            architecture: Architecture::Quadratic(surrogate),
            input_dim: 1,
            num_classes: 2,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(CluError::validation("input_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(CluError::validation("num_classes must be at least 2"));
        }
        match &self.architecture {
            Architecture::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(CluError::validation("layer widths must be positive"));
                }
            }
            Architecture::TinyConv { channels } => {
                if channels.is_empty() || channels.contains(&0) {
                    return Err(CluError::validation(
                        "tiny-conv needs at least one positive channel width",
                    ));
                }
            }
            Architecture::Quadratic(q) => {
                let d = q.dim();
                if d == 0 || q.hessian.len() != d * d || q.linear.len() != d {
                    return Err(CluError::validation("quadratic surrogate dimensions disagree"));
                }
                for r in 0..d {
                    for c in 0..r {
                        if q.hessian[r * d + c] != q.hessian[c * d + r] {
                            return Err(CluError::validation("quadratic surrogate matrix must be symmetric"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self.architecture, Architecture::Quadratic(_))
    }

    pub fn layout(&self) -> Vec<ParamBlock> {
        match &self.architecture {
            Architecture::Mlp { hidden } => {
                let mut blocks = Vec::new();
                for (i, l) in net::mlp_layers(self.input_dim, hidden, self.num_classes)
                    .iter()
                    .enumerate()
                {
                    blocks.push(ParamBlock {
                        name: format!("dense{i}.weight"),
                        offset: l.offset,
                        shape: vec![l.output, l.input],
                    });
                    blocks.push(ParamBlock {
                        name: format!("dense{i}.bias"),
                        offset: l.offset + l.input * l.output,
                        shape: vec![l.output],
                    });
                }
                blocks
            }
            Architecture::TinyConv { channels } => {
                let (convs, head) = net::conv_layers(channels, self.num_classes);
                let mut blocks = Vec::new();
                for (i, c) in convs.iter().enumerate() {
                    let wlen = c.out_channels * c.in_channels * 3;
                    blocks.push(ParamBlock {
                        name: format!("conv{i}.weight"),
                        offset: c.offset,
                        shape: vec![c.out_channels, c.in_channels, 3],
                    });
                    blocks.push(ParamBlock {
                        name: format!("conv{i}.bias"),
                        offset: c.offset + wlen,
                        shape: vec![c.out_channels],
                    });
                }
                blocks.push(ParamBlock {
                    name: "head.weight".into(),
                    offset: head.offset,
                    shape: vec![head.output, head.input],
                });
                blocks.push(ParamBlock {
                    name: "head.bias".into(),
                    offset: head.offset + head.input * head.output,
                    shape: vec![head.output],
                });
                blocks
            }
            Architecture::Quadratic(q) => vec![ParamBlock {
                name: "theta".into(),
                offset: 0,
                shape: vec![q.dim()],
            }],
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(ParamBlock::len).sum()
    }

    /// Seeded Glorot-uniform weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = vec![0.0; self.param_count()];
        let mut fill = |offset: usize, len: usize, fan_in: usize, fan_out: usize| {
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut values[offset..offset + len] {
                *v = rng.random_range(-s..s);
            }
        };
        match &self.architecture {
            Architecture::Mlp { hidden } => {
                for l in net::mlp_layers(self.input_dim, hidden, self.num_classes) {
                    fill(l.offset, l.input * l.output, l.input, l.output);
                }
            }
            Architecture::TinyConv { channels } => {
                let (convs, head) = net::conv_layers(channels, self.num_classes);
                for c in convs {
                    let (fi, fo) = c.fan();
                    fill(c.offset, c.out_channels * c.in_channels * 3, fi, fo);
                }
                fill(head.offset, head.input * head.output, head.input, head.output);
            }
            Architecture::Quadratic(_) => {}
        }
        ParamVector(values)
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(CluError::shape(format!(
                "parameter vector has {} entries, model expects {}",
                params.len(),
                self.param_count()
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if self.is_quadratic() {
            return Ok(());
        }
        if batch.dim != self.input_dim {
            return Err(CluError::shape(format!(
                "batch feature width {} does not match model input {}",
                batch.dim, self.input_dim
            )));
        }
        if let Some(&bad) = batch.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(CluError::shape(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Flat model parameters (also used for gradients, which share the layout).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CluError::validation("parameter vector has non-finite entries"));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn abs(&self) -> Vec<f64> {
        self.0.iter().map(|v| v.abs()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self + k * other`.
    pub fn add_scaled(&self, k: f64, other: &ParamVector) -> Result<ParamVector> {
        if self.len() != other.len() {
            return Err(CluError::shape(format!(
                "vector lengths {} and {} differ",
                self.len(),
                other.len()
            )));
        }
        Ok(ParamVector(
            self.0.iter().zip(&other.0).map(|(a, b)| a + k * b).collect(),
        ))
    }
}

/// Features (row-major `n x dim`) and integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(CluError::shape("batch must hold at least one sample"));
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(CluError::shape(format!(
                "{} feature values cannot form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(CluError::validation("batch features must be finite"));
        }
        Ok(Self {
            features,
            labels,
            dim,
        })
    }

    pub fn from_rows<'a>(rows: impl IntoIterator<Item = (&'a [f64], usize)>) -> Result<Self> {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut dim = None;
        for (x, y) in rows {
            match dim {
                None => dim = Some(x.len()),
                Some(d) if d != x.len() => {
                    return Err(CluError::shape("rows have differing feature widths"))
                }
                _ => {}
            }
            features.extend_from_slice(x);
            labels.push(y);
        }
        Self::new(features, labels, dim.unwrap_or(0))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Concatenates two batches of equal width.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        if self.dim != other.dim {
            return Err(CluError::shape("cannot concatenate batches of different widths"));
        }
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Batch {
            features,
            labels,
            dim: self.dim,
        })
    }
}

/// Per-sample loss weights; negative entries encode gradient ascent.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWeights(Vec<f64>);

impl SampleWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(CluError::validation("sample weights must be finite"));
        }
        Ok(Self(w))
    }

    pub fn uniform(n: usize, value: f64) -> Self {
        Self(vec![value; n])
    }

    /// Mean-reduction weights `1/n`.
    pub fn mean(n: usize) -> Self {
        Self::uniform(n, 1.0 / n as f64)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Class posteriors, one row per sample.
pub fn forward_probs(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    if spec.is_quadratic() {
        return Err(CluError::Capability(
            "the quadratic surrogate has no class posterior".into(),
        ));
    }
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    Ok((0..batch.len())
        .map(|i| net::softmax(&net::logits(spec, params.as_slice(), batch.row(i))))
        .collect())
}

/// Cross-entropy `-log p(y_i | x_i)` of every sample.
pub fn per_sample_loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    if let Architecture::Quadratic(q) = &spec.architecture {
        return Ok(vec![q.loss(params.as_slice()); batch.len()]);
    }
    Ok((0..batch.len())
        .map(|i| {
            let z = net::logits(spec, params.as_slice(), batch.row(i));
            net::cross_entropy(&z, batch.labels()[i]).0
        })
        .collect())
}

/// `Σ_i w_i ∇ℓ(θ; z_i)`.
pub fn weighted_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    weights: &SampleWeights,
) -> Result<ParamVector> {
    loss_and_weighted_grad(spec, params, batch, weights).map(|(_, g)| g)
}

/// Per-sample losses together with the weighted gradient, from one pass.
pub fn loss_and_weighted_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    weights: &SampleWeights,
) -> Result<(Vec<f64>, ParamVector)> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    if weights.len() != batch.len() {
        return Err(CluError::shape(format!(
            "{} weights for {} samples",
            weights.len(),
            batch.len()
        )));
    }
    if let Architecture::Quadratic(q) = &spec.architecture {
        let total: f64 = weights.as_slice().iter().sum();
        let g = q.grad(params.as_slice()).into_iter().map(|v| total * v).collect();
        return Ok((
            vec![q.loss(params.as_slice()); batch.len()],
            ParamVector(g),
        ));
    }
    let mut grad = vec![0.0; params.len()];
    let mut losses = Vec::with_capacity(batch.len());
    for (i, &w) in weights.as_slice().iter().enumerate() {
        let l = net::sample_backward(
            spec,
            params.as_slice(),
            batch.row(i),
            batch.labels()[i],
            w,
            &mut grad,
        );
        losses.push(l);
    }
    Ok((losses, ParamVector(grad)))
}

/// Exact Hessian of `Σ_i w_i ℓ(θ; z_i)` using the default parameter cap.
pub fn explicit_hessian(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    weights: &SampleWeights,
) -> Result<DMatrix<f64>> {
    explicit_hessian_with_cap(spec, params, batch, weights, HESSIAN_PARAM_CAP)
}

/// Exact Hessian, built column by column from forward-over-reverse
/// Hessian-vector products.
pub fn explicit_hessian_with_cap(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    weights: &SampleWeights,
    cap: usize,
) -> Result<DMatrix<f64>> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    let p = params.len();
    if p > cap {
        return Err(CluError::Capability(format!(
            "explicit Hessian needs {p} parameters <= cap {cap}"
        )));
    }
    if weights.len() != batch.len() {
        return Err(CluError::shape("weights and batch differ in length"));
    }
    if let Architecture::Quadratic(q) = &spec.architecture {
        let total: f64 = weights.as_slice().iter().sum();
        return Ok(q.matrix() * total);
    }
    let mut h = DMatrix::zeros(p, p);
    let mut dual_params: Vec<Dual> = params.as_slice().iter().map(|&v| Dual::new(v, 0.0)).collect();
    for col in 0..p {
        dual_params[col].du = 1.0;
        let mut grad = vec![Dual::new(0.0, 0.0); p];
        for (i, &w) in weights.as_slice().iter().enumerate() {
            net::sample_backward(spec, &dual_params, batch.row(i), batch.labels()[i], w, &mut grad);
        }
        for (row, g) in grad.iter().enumerate() {
            h[(row, col)] = g.du;
        }
        dual_params[col].du = 0.0;
    }
    Ok(h)
}

/// Predicted class among `allowed` (all classes when `None`).
pub fn predict(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    allowed: Option<&[usize]>,
) -> Result<Vec<usize>> {
    let probs = forward_probs(spec, params, batch)?;
    Ok(probs
        .iter()
        .map(|row| {
            let candidates: Box<dyn Iterator<Item = usize>> = match allowed {
                Some(a) => Box::new(a.iter().copied()),
                None => Box::new(0..row.len()),
            };
            candidates
                .fold(None::<(usize, f64)>, |best, c| match best {
                    Some((_, bp)) if bp >= row[c] => best,
                    _ => Some((c, row[c])),
                })
                .map(|(c, _)| c)
                .unwrap_or(0)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Batch {
        let features = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        Batch::new(features, labels, dim).unwrap()
    }

    fn central_diff_grad(spec: &ModelSpec, params: &ParamVector, batch: &Batch, w: &SampleWeights, h: f64) -> Vec<f64> {
        let loss = |p: &[f64]| -> f64 {
            let pv = ParamVector(p.to_vec());
            per_sample_loss(spec, &pv, batch)
                .unwrap()
                .iter()
                .zip(w.as_slice())
                .map(|(l, w)| l * w)
                .sum()
        };
        let mut p = params.as_slice().to_vec();
        (0..p.len())
            .map(|j| {
                let orig = p[j];
                p[j] = orig + h;
                let up = loss(&p);
                p[j] = orig - h;
                let down = loss(&p);
                p[j] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    #[test]
    fn zero_network_gives_uniform_rows() {
        let spec = ModelSpec::mlp(3, vec![5], 4, Activation::Relu);
        let params = ParamVector::zeros(spec.param_count());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = random_batch(&mut rng, 6, 3, 4);
        for row in forward_probs(&spec, &params, &batch).unwrap() {
            for p in row {
                assert_eq!(p, 0.25);
            }
        }
        for l in per_sample_loss(&spec, &params, &batch).unwrap() {
            assert!((l - 4f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let spec = ModelSpec::mlp(4, vec![8, 6], 5, Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = spec.init_params(&mut rng);
        let batch = random_batch(&mut rng, 16, 4, 5);
        for row in forward_probs(&spec, &params, &batch).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn hand_two_class_linear_model() {
        // no hidden layer: logits = W x + b
        let spec = ModelSpec::mlp(2, vec![], 2, Activation::Relu);
        // W = [[1, 2], [-1, 0.5]], b = [0.1, -0.2]
        let params = ParamVector::new(vec![1.0, 2.0, -1.0, 0.5, 0.1, -0.2]).unwrap();
        let batch = Batch::new(vec![0.5, -1.0], vec![1], 2).unwrap();
        // z0 = 0.5 - 2 + 0.1 = -1.4 ; z1 = -0.5 - 0.5 - 0.2 = -1.2
        let (z0, z1) = (-1.4f64, -1.2f64);
        let p1 = z1.exp() / (z0.exp() + z1.exp());
        let probs = forward_probs(&spec, &params, &batch).unwrap();
        assert!((probs[0][1] - p1).abs() < 1e-15);
        assert!((probs[0][0] - (1.0 - p1)).abs() < 1e-15);
        let loss = per_sample_loss(&spec, &params, &batch).unwrap();
        assert!((loss[0] + p1.ln()).abs() < 1e-14);
    }

    #[test]
    fn confident_true_class_has_zero_loss() {
        let spec = ModelSpec::mlp(1, vec![], 2, Activation::Relu);
        // logit gap of 800 makes p(y) == 1.0 exactly in f64
        let params = ParamVector::new(vec![0.0, 0.0, 400.0, -400.0]).unwrap();
        let batch = Batch::new(vec![1.0], vec![0], 1).unwrap();
        assert_eq!(forward_probs(&spec, &params, &batch).unwrap()[0][0], 1.0);
        assert_eq!(per_sample_loss(&spec, &params, &batch).unwrap()[0], 0.0);
    }

    #[test]
    fn floored_loss_is_bounded() {
        let spec = ModelSpec::mlp(1, vec![], 2, Activation::Relu);
        let params = ParamVector::new(vec![0.0, 0.0, 400.0, -400.0]).unwrap();
        let batch = Batch::new(vec![1.0], vec![1], 1).unwrap();
        let l = per_sample_loss(&spec, &params, &batch).unwrap()[0];
        assert!((l + PROB_FLOOR.ln()).abs() < 1e-12);
        let g = weighted_grad(&spec, &params, &batch, &SampleWeights::uniform(1, 1.0)).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let spec = ModelSpec::mlp(3, vec![4], 3, Activation::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = spec.init_params(&mut rng);
        let batch = random_batch(&mut rng, 5, 3, 3);
        let g = weighted_grad(&spec, &params, &batch, &SampleWeights::uniform(5, 0.0)).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_weights_doubles_gradient() {
        let spec = ModelSpec::mlp(3, vec![4], 3, Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = spec.init_params(&mut rng);
        let batch = random_batch(&mut rng, 5, 3, 3);
        let w: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g1 = weighted_grad(&spec, &params, &batch, &SampleWeights::new(w.clone()).unwrap()).unwrap();
        let g2 = weighted_grad(
            &spec,
            &params,
            &batch,
            &SampleWeights::new(w.iter().map(|v| 2.0 * v).collect()).unwrap(),
        )
        .unwrap();
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_all_architectures() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let specs = [
            ModelSpec::mlp(4, vec![6, 5], 3, Activation::Tanh),
            ModelSpec::mlp(4, vec![7], 3, Activation::Relu),
            ModelSpec::tiny_conv(6, vec![3, 4], 3, Activation::Tanh),
            ModelSpec::tiny_conv(5, vec![2], 4, Activation::Relu),
        ];
        for spec in &specs {
            let params = spec.init_params(&mut rng);
            let batch = random_batch(&mut rng, 7, spec.input_dim, spec.num_classes);
            let w = SampleWeights::new((0..7).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let g = weighted_grad(spec, &params, &batch, &w).unwrap();
            let fd = central_diff_grad(spec, &params, &batch, &w, 1e-5);
            let e = rel_err(g.as_slice(), &fd);
            assert!(e < 1e-4, "{:?}: rel err {e}", spec.architecture);
        }
    }

    #[test]
    fn hessian_is_symmetric_and_matches_gradient_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for spec in [
            ModelSpec::mlp(3, vec![4], 3, Activation::Tanh),
            ModelSpec::tiny_conv(4, vec![2], 3, Activation::Tanh),
        ] {
            let params = spec.init_params(&mut rng);
            let batch = random_batch(&mut rng, 6, spec.input_dim, 3);
            let w = SampleWeights::mean(6);
            let h = explicit_hessian(&spec, &params, &batch, &w).unwrap();
            let p = params.len();
            let mut asym = 0.0f64;
            for r in 0..p {
                for c in 0..p {
                    asym = asym.max((h[(r, c)] - h[(c, r)]).abs());
                }
            }
            assert!(asym < 1e-8, "asymmetry {asym}");
            let step = 1e-5;
            for j in 0..p {
                let mut e = ParamVector::zeros(p);
                e.0[j] = step;
                let up = weighted_grad(&spec, &params.add_scaled(1.0, &e).unwrap(), &batch, &w).unwrap();
                let down = weighted_grad(&spec, &params.add_scaled(-1.0, &e).unwrap(), &batch, &w).unwrap();
                let fd: Vec<f64> = up
                    .as_slice()
                    .iter()
                    .zip(down.as_slice())
                    .map(|(a, b)| (a - b) / (2.0 * step))
                    .collect();
                let col: Vec<f64> = (0..p).map(|r| h[(r, j)]).collect();
                if fd.iter().any(|v| v.abs() > 1e-9) {
                    assert!(rel_err(&col, &fd) < 1e-3, "column {j}");
                }
            }
        }
    }

    #[test]
    fn quadratic_surrogate_hessian_is_its_matrix() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let q = QuadraticSurrogate::new(&a, vec![1.0, -1.0, 0.5], vec![0.1, 0.0, -0.3]);
        let spec = ModelSpec::quadratic(q);
        spec.validate().unwrap();
        let params = ParamVector::new(vec![0.3, 0.2, 0.1]).unwrap();
        let batch = Batch::new(vec![0.0], vec![0], 1).unwrap();
        let h = explicit_hessian(&spec, &params, &batch, &SampleWeights::uniform(1, 1.0)).unwrap();
        assert_eq!(h, a);
    }

    #[test]
    fn hessian_cap_is_enforced() {
        let spec = ModelSpec::mlp(3, vec![4], 3, Activation::Tanh);
        let params = ParamVector::zeros(spec.param_count());
        let batch = Batch::new(vec![0.0; 3], vec![0], 3).unwrap();
        let err = explicit_hessian_with_cap(&spec, &params, &batch, &SampleWeights::mean(1), 5);
        assert!(matches!(err, Err(CluError::Capability(_))));
    }

    #[test]
    fn shape_errors() {
        let spec = ModelSpec::mlp(3, vec![4], 3, Activation::Relu);
        let params = ParamVector::zeros(spec.param_count());
        let batch = Batch::new(vec![0.0; 4], vec![0, 1], 2).unwrap();
        assert!(matches!(forward_probs(&spec, &params, &batch), Err(CluError::Shape(_))));
        let good = Batch::new(vec![0.0; 3], vec![0], 3).unwrap();
        assert!(matches!(
            weighted_grad(&spec, &params, &good, &SampleWeights::mean(2)),
            Err(CluError::Shape(_))
        ));
        assert!(Batch::new(vec![], vec![], 3).is_err());
    }

    #[test]
    fn layout_is_contiguous_and_deterministic() {
        let spec = ModelSpec::tiny_conv(8, vec![3, 4], 5, Activation::Relu);
        let blocks = spec.layout();
        let mut offset = 0;
        for b in &blocks {
            assert_eq!(b.offset, offset);
            offset += b.len();
        }
        assert_eq!(offset, spec.param_count());
        assert_eq!(spec.layout(), blocks);
        let mlp = ModelSpec::mlp(16, vec![32, 32], 8, Activation::Relu);
        assert_eq!(mlp.param_count(), 16 * 32 + 32 + 32 * 32 + 32 + 32 * 8 + 8);
    }

    #[test]
    fn init_is_seeded() {
        let spec = ModelSpec::mlp(4, vec![8], 3, Activation::Relu);
        let a = spec.init_params(&mut ChaCha8Rng::seed_from_u64(9));
        let b = spec.init_params(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let s = (6.0f64 / 12.0).sqrt();
        assert!(a.as_slice()[..32].iter().all(|v| v.abs() < s));
    }

    #[test]
    fn validation_rejects_bad_specs() {
        assert!(ModelSpec::mlp(3, vec![0], 3, Activation::Relu).validate().is_err());
        assert!(ModelSpec::mlp(3, vec![2], 1, Activation::Relu).validate().is_err());
        assert!(ModelSpec::tiny_conv(3, vec![], 3, Activation::Relu).validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, proptest, ProptestConfig};
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn gradient_is_additive_in_weights(seed in 0u64..10_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let spec = ModelSpec::mlp(3, vec![5], 3, Activation::Tanh);
                let params = spec.init_params(&mut rng);
                let batch = random_batch(&mut rng, 6, 3, 3);
                let w1: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                let w2: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                let sum: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
                let g1 = weighted_grad(&spec, &params, &batch, &SampleWeights::new(w1).unwrap()).unwrap();
                let g2 = weighted_grad(&spec, &params, &batch, &SampleWeights::new(w2).unwrap()).unwrap();
                let gs = weighted_grad(&spec, &params, &batch, &SampleWeights::new(sum).unwrap()).unwrap();
                for ((a, b), c) in g1.as_slice().iter().zip(g2.as_slice()).zip(gs.as_slice()) {
                    prop_assert!((a + b - c).abs() < 1e-10);
                }
            }
        }
    }
}
