//! Per-sample forward and backward passes for the neural architectures.
//!
//! Everything here is generic over [`Scalar`] so the same code computes plain
//! gradients (`f64`) and Hessian-vector products (`Dual`).

use super::scalar::Scalar;
use super::{Activation, Architecture, ModelSpec};

/// Probabilities are floored at this value inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

const CONV_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    pub input: usize,
    pub output: usize,
    pub offset: usize,
}

impl Dense {
    fn weight(&self, o: usize, i: usize) -> usize {
        self.offset + o * self.input + i
    }
    fn bias(&self, o: usize) -> usize {
        self.offset + self.input * self.output + o
    }
    pub fn len(&self) -> usize {
        self.input * self.output + self.output
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub offset: usize,
}

impl Conv {
    fn weight(&self, o: usize, i: usize, k: usize) -> usize {
        self.offset + (o * self.in_channels + i) * CONV_KERNEL + k
    }
    fn bias(&self, o: usize) -> usize {
        self.offset + self.out_channels * self.in_channels * CONV_KERNEL + o
    }
    pub fn len(&self) -> usize {
        self.out_channels * self.in_channels * CONV_KERNEL + self.out_channels
    }
    pub fn fan(&self) -> (usize, usize) {
        (self.in_channels * CONV_KERNEL, self.out_channels * CONV_KERNEL)
    }
}

pub(crate) fn mlp_layers(input_dim: usize, hidden: &[usize], classes: usize) -> Vec<Dense> {
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut offset = 0;
    let mut input = input_dim;
    for &output in hidden.iter().chain(std::iter::once(&classes)) {
        let l = Dense {
            input,
            output,
            offset,
        };
        offset += l.len();
        input = output;
        layers.push(l);
    }
    layers
}

pub(crate) fn conv_layers(channels: &[usize], classes: usize) -> (Vec<Conv>, Dense) {
    let mut convs = Vec::with_capacity(channels.len());
    let mut offset = 0;
    let mut in_channels = 1;
    for &out_channels in channels {
        let c = Conv {
            in_channels,
            out_channels,
            offset,
        };
        offset += c.len();
        in_channels = out_channels;
        convs.push(c);
    }
    let head = Dense {
        input: in_channels,
        output: classes,
        offset,
    };
    (convs, head)
}

#[inline]
fn activate<T: Scalar>(act: Activation, z: T) -> T {
    match act {
        Activation::Relu => {
            if z.value() > 0.0 {
                z
            } else {
                T::zero()
            }
        }
        Activation::Tanh => z.tanh(),
    }
}

/// Derivative of the activation given its pre-activation `z` and output `a`.
#[inline]
fn activate_deriv<T: Scalar>(act: Activation, z: T, a: T) -> T {
    match act {
        Activation::Relu => {
            if z.value() > 0.0 {
                T::constant(1.0)
            } else {
                T::zero()
            }
        }
        Activation::Tanh => T::constant(1.0) - a * a,
    }
}

/// Cross-entropy of `logits` against class `y` with max-subtraction.
///
/// Returns the loss and, unless the floor is active, the logit gradient
/// `softmax(z) - onehot(y)`.
pub(crate) fn cross_entropy<T: Scalar>(logits: &[T], y: usize) -> (T, Option<Vec<T>>) {
    let m = logits
        .iter()
        .map(|z| z.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<T> = logits.iter().map(|&z| (z - T::constant(m)).exp()).collect();
    let mut sum = T::zero();
    for &e in &shifted {
        sum += e;
    }
    let log_p = logits[y] - T::constant(m) - sum.ln();
    if log_p.value() < PROB_FLOOR.ln() {
        return (T::constant(-PROB_FLOOR.ln()), None);
    }
    let grad = shifted
        .iter()
        .enumerate()
        .map(|(c, &e)| {
            let p = e / sum;
            if c == y {
                p - T::constant(1.0)
            } else {
                p
            }
        })
        .collect();
    (-log_p, Some(grad))
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Logits of a single sample.
pub(crate) fn logits<T: Scalar>(spec: &ModelSpec, params: &[T], x: &[f64]) -> Vec<T> {
    match &spec.architecture {
        Architecture::Mlp { hidden } => {
            let layers = mlp_layers(spec.input_dim, hidden, spec.num_classes);
            let mut a: Vec<T> = x.iter().map(|&v| T::constant(v)).collect();
            for (li, l) in layers.iter().enumerate() {
                let z = dense_forward(l, params, &a);
                a = if li + 1 < layers.len() {
                    z.into_iter().map(|v| activate(spec.activation, v)).collect()
                } else {
                    z
                };
            }
            a
        }
        Architecture::TinyConv { channels } => {
            let (convs, head) = conv_layers(channels, spec.num_classes);
            let len = spec.input_dim;
            let mut a: Vec<T> = x.iter().map(|&v| T::constant(v)).collect();
            for c in &convs {
                let z = conv_forward(c, params, &a, len);
                a = z.into_iter().map(|v| activate(spec.activation, v)).collect();
            }
            let pooled = pool(&a, head.input, len);
            dense_forward(&head, params, &pooled)
        }
        Architecture::Quadratic(_) => unreachable!("quadratic surrogate has no logits"),
    }
}

fn dense_forward<T: Scalar>(l: &Dense, params: &[T], a: &[T]) -> Vec<T> {
    (0..l.output)
        .map(|o| {
            let mut s = params[l.bias(o)];
            let row = &params[l.weight(o, 0)..l.weight(o, 0) + l.input];
            for (w, &v) in row.iter().zip(a) {
                s += *w * v;
            }
            s
        })
        .collect()
}

/// `a` is laid out channel-major: `a[ch * len + t]`.
fn conv_forward<T: Scalar>(c: &Conv, params: &[T], a: &[T], len: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(c.out_channels * len);
    for o in 0..c.out_channels {
        for t in 0..len {
            let mut s = params[c.bias(o)];
            for i in 0..c.in_channels {
                for k in 0..CONV_KERNEL {
                    let src = t as isize + k as isize - 1;
                    if src >= 0 && (src as usize) < len {
                        s += params[c.weight(o, i, k)] * a[i * len + src as usize];
                    }
                }
            }
            out.push(s);
        }
    }
    out
}

fn pool<T: Scalar>(a: &[T], channels: usize, len: usize) -> Vec<T> {
    let inv = 1.0 / len as f64;
    (0..channels)
        .map(|ch| {
            let mut s = T::zero();
            for &v in &a[ch * len..(ch + 1) * len] {
                s += v;
            }
            s.scale(inv)
        })
        .collect()
}

/// Accumulates `weight * grad(loss)` into `grad` and returns the sample loss.
pub(crate) fn sample_backward<T: Scalar>(
    spec: &ModelSpec,
    params: &[T],
    x: &[f64],
    y: usize,
    weight: f64,
    grad: &mut [T],
) -> T {
    match &spec.architecture {
        Architecture::Mlp { hidden } => mlp_backward(spec, hidden, params, x, y, weight, grad),
        Architecture::TinyConv { channels } => {
            conv_backward(spec, channels, params, x, y, weight, grad)
        }
        Architecture::Quadratic(_) => unreachable!("quadratic surrogate handled by caller"),
    }
}

fn mlp_backward<T: Scalar>(
    spec: &ModelSpec,
    hidden: &[usize],
    params: &[T],
    x: &[f64],
    y: usize,
    weight: f64,
    grad: &mut [T],
) -> T {
    let layers = mlp_layers(spec.input_dim, hidden, spec.num_classes);
    let mut acts: Vec<Vec<T>> = vec![x.iter().map(|&v| T::constant(v)).collect()];
    let mut pre: Vec<Vec<T>> = Vec::with_capacity(layers.len());
    for (li, l) in layers.iter().enumerate() {
        let z = dense_forward(l, params, acts.last().unwrap());
        if li + 1 < layers.len() {
            acts.push(z.iter().map(|&v| activate(spec.activation, v)).collect());
        }
        pre.push(z);
    }
    let (loss, dlogits) = cross_entropy(pre.last().unwrap(), y);
    let Some(mut delta) = dlogits else {
        return loss;
    };
    for (li, l) in layers.iter().enumerate().rev() {
        let a = &acts[li];
        for o in 0..l.output {
            let d = delta[o].scale(weight);
            grad[l.bias(o)] += d;
            let base = l.weight(o, 0);
            for (i, &ai) in a.iter().enumerate() {
                grad[base + i] += d * ai;
            }
        }
        if li > 0 {
            let z_prev = &pre[li - 1];
            let mut next = vec![T::zero(); l.input];
            for o in 0..l.output {
                let base = l.weight(o, 0);
                for (i, n) in next.iter_mut().enumerate() {
                    *n += params[base + i] * delta[o];
                }
            }
            for (i, n) in next.iter_mut().enumerate() {
                *n = *n * activate_deriv(spec.activation, z_prev[i], a[i]);
            }
            delta = next;
        }
    }
    loss
}

fn conv_backward<T: Scalar>(
    spec: &ModelSpec,
    channels: &[usize],
    params: &[T],
    x: &[f64],
    y: usize,
    weight: f64,
    grad: &mut [T],
) -> T {
    let (convs, head) = conv_layers(channels, spec.num_classes);
    let len = spec.input_dim;
    let mut acts: Vec<Vec<T>> = vec![x.iter().map(|&v| T::constant(v)).collect()];
    let mut pre: Vec<Vec<T>> = Vec::with_capacity(convs.len());
    for c in &convs {
        let z = conv_forward(c, params, acts.last().unwrap(), len);
        acts.push(z.iter().map(|&v| activate(spec.activation, v)).collect());
        pre.push(z);
    }
    let pooled = pool(acts.last().unwrap(), head.input, len);
    let logits = dense_forward(&head, params, &pooled);
    let (loss, dlogits) = cross_entropy(&logits, y);
    let Some(delta) = dlogits else {
        return loss;
    };

    let mut dpool = vec![T::zero(); head.input];
    for o in 0..head.output {
        let d = delta[o].scale(weight);
        grad[head.bias(o)] += d;
        let base = head.weight(o, 0);
        for i in 0..head.input {
            grad[base + i] += d * pooled[i];
            dpool[i] += params[base + i] * delta[o];
        }
    }
    let inv = 1.0 / len as f64;
    // gradient w.r.t. the last activation map (unweighted)
    let mut da: Vec<T> = (0..head.input * len)
        .map(|idx| dpool[idx / len].scale(inv))
        .collect();

    for (ci, c) in convs.iter().enumerate().rev() {
        let a_out = &acts[ci + 1];
        let z = &pre[ci];
        let dz: Vec<T> = (0..c.out_channels * len)
            .map(|idx| da[idx] * activate_deriv(spec.activation, z[idx], a_out[idx]))
            .collect();
        let a_in = &acts[ci];
        let mut din = vec![T::zero(); c.in_channels * len];
        for o in 0..c.out_channels {
            let mut bsum = T::zero();
            for t in 0..len {
                let d = dz[o * len + t];
                bsum += d;
                for i in 0..c.in_channels {
                    for k in 0..CONV_KERNEL {
                        let src = t as isize + k as isize - 1;
                        if src >= 0 && (src as usize) < len {
                            let s = i * len + src as usize;
                            let widx = c.weight(o, i, k);
                            grad[widx] += (d * a_in[s]).scale(weight);
                            if ci > 0 {
                                din[s] += params[widx] * d;
                            }
                        }
                    }
                }
            }
            grad[c.bias(o)] += bsum.scale(weight);
        }
        da = din;
    }
    loss
}
