// SPDX-License-Identifier: MIT OR Apache-2.0

//! A tanh multilayer perceptron stored directly as a [`TensorMap`].
//!
//! Layer `k` (1-based) owns `layer{k}.weight` with shape `[out, in]` and
//! `layer{k}.bias` with shape `[out]`. Hidden layers apply tanh; the last
//! layer produces logits for a softmax.

use serde::{Deserialize, Serialize};

use crate::importance::FewShotBatch;
use crate::partition::{GroupSpec, Level, PartitionSchema, ResidualPolicy};
use crate::rng::CounterRng;
use crate::{DenseTensor, Element, Error, Result, TensorMap};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyNetSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub class_count: usize,
    pub seed: u64,
}

pub fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

impl ToyNetSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, class_count: usize, seed: u64) -> Result<Self> {
        let s = Self {
            input_dim,
            hidden_dims,
            class_count,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.class_count == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::invalid(format!("toy net dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Number of weight layers, hidden plus output.
    pub fn layer_count(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    /// `(out, in)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.layer_count());
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((h, fan_in));
            fan_in = h;
        }
        dims.push((self.class_count, fan_in));
        dims
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims().iter().map(|(o, i)| o * i + o).sum()
    }

    /// Uniform `+-1/sqrt(fan_in)` initialization, keyed by `seed` and tensor name.
    pub fn init(&self) -> TensorMap<f64> {
        let root = CounterRng::new(self.seed);
        let mut m = TensorMap::new();
        for (k, (out, fan_in)) in self.layer_dims().into_iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for (name, shape) in [
                (weight_name(k + 1), vec![out, fan_in]),
                (bias_name(k + 1), vec![out]),
            ] {
                let rng = root.stream(&name);
                let n: usize = shape.iter().product();
                let data = (0..n as u64)
                    .map(|i| (2.0 * rng.uniform_at(i) - 1.0) * bound)
                    .collect();
                m.insert(name, DenseTensor::new(shape, data).unwrap()).unwrap();
            }
        }
        m
    }

    /// Recovers the architecture from tensor names and shapes.
    pub fn infer<E: Element>(map: &TensorMap<E>) -> Result<Self> {
        let layers = map.len() / 2;
        if layers == 0 || !map.len().is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "a toy net has weight/bias pairs; found {} tensors",
                map.len()
            )));
        }
        let mut dims = Vec::with_capacity(layers);
        for k in 1..=layers {
            let w = map
                .get(&weight_name(k))
                .ok_or_else(|| Error::invalid(format!("toy net lacks {}", weight_name(k))))?;
            if w.shape().len() != 2 {
                return Err(Error::invalid(format!("{} must be 2-D", weight_name(k))));
            }
            dims.push((w.shape()[0], w.shape()[1]));
        }
        let spec = Self {
            input_dim: dims[0].1,
            hidden_dims: dims[..layers - 1].iter().map(|d| d.0).collect(),
            class_count: dims[layers - 1].0,
            seed: 0,
        };
        spec.check(map)?;
        Ok(spec)
    }

    /// Verifies that `map` has exactly this architecture.
    pub fn check<E: Element>(&self, map: &TensorMap<E>) -> Result<()> {
        let dims = self.layer_dims();
        if map.len() != 2 * dims.len() {
            return Err(Error::invalid(format!(
                "toy net expects {} tensors, found {}",
                2 * dims.len(),
                map.len()
            )));
        }
        for (k, &(out, fan_in)) in dims.iter().enumerate() {
            let w = map.require(&weight_name(k + 1))?;
            let b = map.require(&bias_name(k + 1))?;
            if w.shape() != [out, fan_in] || b.shape() != [out] {
                return Err(Error::invalid(format!(
                    "layer {} has shapes {:?}/{:?}, expected [{out}, {fan_in}]/[{out}]",
                    k + 1,
                    w.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// One group per layer (`layer{k}.*`), ready for layer or hidden partitioning.
    pub fn schema(&self, level: Level) -> PartitionSchema {
        PartitionSchema {
            level,
            groups: (1..=self.layer_count())
                .map(|k| GroupSpec::new(format!("layer{k}"), &[&format!("layer{k}.*")]))
                .collect(),
            residual: ResidualPolicy::Error,
        }
    }
}

struct Layers<'a> {
    w: Vec<&'a [f64]>,
    b: Vec<&'a [f64]>,
    dims: Vec<(usize, usize)>,
}

impl<'a> Layers<'a> {
    fn new(net: &'a TensorMap<f64>, spec: &ToyNetSpec) -> Result<Self> {
        spec.check(net)?;
        let dims = spec.layer_dims();
        let w = (1..=dims.len()).map(|k| net.get(&weight_name(k)).unwrap().data()).collect();
        let b = (1..=dims.len()).map(|k| net.get(&bias_name(k)).unwrap().data()).collect();
        Ok(Self { w, b, dims })
    }

    /// Activations per layer; the last entry holds logits.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let last = self.dims.len() - 1;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.dims.len() + 1);
        acts.push(x.to_vec());
        for (k, &(out, fan_in)) in self.dims.iter().enumerate() {
            let a = &acts[k];
            let z: Vec<f64> = (0..out)
                .map(|o| {
                    let row = &self.w[k][o * fan_in..(o + 1) * fan_in];
                    let s: f64 = row.iter().zip(a).map(|(w, x)| w * x).sum();
                    let z = s + self.b[k][o];
                    if k == last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            acts.push(z);
        }
        acts
    }
}

fn check_inputs(spec: &ToyNetSpec, inputs: &[Vec<f64>]) -> Result<()> {
    if let Some(x) = inputs.iter().find(|x| x.len() != spec.input_dim) {
        return Err(Error::invalid(format!(
            "input has width {}, the net expects {}",
            x.len(),
            spec.input_dim
        )));
    }
    Ok(())
}

fn check_labels(spec: &ToyNetSpec, batch: &FewShotBatch) -> Result<()> {
    batch.validate()?;
    check_inputs(spec, &batch.inputs)?;
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= spec.class_count) {
        return Err(Error::invalid(format!(
            "label {y} is out of range for {} classes",
            spec.class_count
        )));
    }
    Ok(())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax_at(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[y] - lse
}

/// Class probabilities, one row per input.
pub fn forward(net: &TensorMap<f64>, spec: &ToyNetSpec, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    check_inputs(spec, inputs)?;
    let layers = Layers::new(net, spec)?;
    Ok(inputs
        .iter()
        .map(|x| softmax(layers.activations(x).last().unwrap()))
        .collect())
}

/// Mean cross-entropy.
pub fn loss(net: &TensorMap<f64>, spec: &ToyNetSpec, batch: &FewShotBatch) -> Result<f64> {
    check_labels(spec, batch)?;
    let layers = Layers::new(net, spec)?;
    let total: f64 = batch
        .inputs
        .iter()
        .zip(&batch.labels)
        .map(|(x, &y)| -log_softmax_at(layers.activations(x).last().unwrap(), y))
        .sum();
    Ok(total / batch.len() as f64)
}

/// Mean cross-entropy and its exact gradient by backpropagation.
pub fn loss_and_grad(
    net: &TensorMap<f64>,
    spec: &ToyNetSpec,
    batch: &FewShotBatch,
) -> Result<(f64, TensorMap<f64>)> {
    check_labels(spec, batch)?;
    let layers = Layers::new(net, spec)?;
    let dims = &layers.dims;
    let mut gw: Vec<Vec<f64>> = dims.iter().map(|(o, i)| vec![0.0; o * i]).collect();
    let mut gb: Vec<Vec<f64>> = dims.iter().map(|(o, _)| vec![0.0; *o]).collect();
    let inv_n = 1.0 / batch.len() as f64;
    let mut total = 0.0;

    for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
        let acts = layers.activations(x);
        let logits = acts.last().unwrap();
        total -= log_softmax_at(logits, y);
        let mut delta = softmax(logits);
        delta[y] -= 1.0;
        delta.iter_mut().for_each(|d| *d *= inv_n);

        for k in (0..dims.len()).rev() {
            let (out, fan_in) = dims[k];
            let a_prev = &acts[k];
            for o in 0..out {
                let d = delta[o];
                gb[k][o] += d;
                let row = &mut gw[k][o * fan_in..(o + 1) * fan_in];
                for (g, a) in row.iter_mut().zip(a_prev) {
                    *g += d * a;
                }
            }
            if k > 0 {
                let mut back = vec![0.0; fan_in];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &layers.w[k][o * fan_in..(o + 1) * fan_in];
                    for (b, w) in back.iter_mut().zip(row) {
                        *b += w * d;
                    }
                }
                // a_prev = tanh(z), so d tanh / dz = 1 - a^2
                for (b, a) in back.iter_mut().zip(a_prev) {
                    *b *= 1.0 - a * a;
                }
                delta = back;
            }
        }
    }

    let mut grad = TensorMap::new();
    for (k, ((w, b), &(out, fan_in))) in gw.into_iter().zip(gb).zip(dims).enumerate() {
        grad.insert(weight_name(k + 1), DenseTensor::new(vec![out, fan_in], w)?)?;
        grad.insert(bias_name(k + 1), DenseTensor::new(vec![out], b)?)?;
    }
    Ok((total * inv_n, grad))
}

/// Central differences `(L(theta + h e_i) - L(theta - h e_i)) / 2h` for every parameter.
pub fn finite_diff_grad(
    net: &TensorMap<f64>,
    spec: &ToyNetSpec,
    batch: &FewShotBatch,
    h: f64,
) -> Result<TensorMap<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    finite_diff(net, h, |m| loss(m, spec, batch))
}

/// Central differences of an arbitrary scalar function of a tensor map.
pub fn finite_diff(
    point: &TensorMap<f64>,
    h: f64,
    f: impl Fn(&TensorMap<f64>) -> Result<f64>,
) -> Result<TensorMap<f64>> {
    let mut probe = point.clone();
    let mut out = point.zeros_like::<f64>();
    let names: Vec<String> = point.names().map(str::to_string).collect();
    for name in &names {
        let n = point.get(name).unwrap().len();
        for i in 0..n {
            let orig = point.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = f(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = f(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            out.get_mut(name).unwrap().data_mut()[i] = (up - down) / (2.0 * h);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub step_size: f64,
    /// 1-based layer indices whose parameters stay fixed.
    #[serde(default)]
    pub frozen_layers: Vec<usize>,
}

/// Full-batch gradient descent. Deterministic: no shuffling, no sampling.
pub fn train(
    net: &TensorMap<f64>,
    spec: &ToyNetSpec,
    data: &FewShotBatch,
    cfg: &TrainConfig,
) -> Result<TensorMap<f64>> {
    if !(cfg.step_size.is_finite() && cfg.step_size >= 0.0) {
        return Err(Error::invalid(format!("step size {} is invalid", cfg.step_size)));
    }
    let frozen: Vec<String> = cfg
        .frozen_layers
        .iter()
        .flat_map(|&k| [weight_name(k), bias_name(k)])
        .collect();
    let mut params = net.clone();
    for epoch in 0..cfg.epochs {
        let (l, g) = loss_and_grad(&params, spec, data)?;
        if !l.is_finite() {
            return Err(Error::Diverged(format!(
                "loss is {l} at epoch {epoch} (step size {})",
                cfg.step_size
            )));
        }
        for (name, t) in params.iter_mut() {
            if frozen.iter().any(|f| f == name) {
                continue;
            }
            let gd = g.get(name).unwrap().data();
            for (p, gv) in t.data_mut().iter_mut().zip(gd) {
                *p -= cfg.step_size * gv;
            }
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!(
                    "{name} became non-finite at epoch {epoch} (step size {})",
                    cfg.step_size
                )));
            }
        }
    }
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean probability assigned to the true label.
    pub probability: f64,
    pub loss: f64,
}

/// Accuracy (arg-max, lowest index wins ties) and mean true-label probability.
pub fn evaluate(net: &TensorMap<f64>, spec: &ToyNetSpec, split: &FewShotBatch) -> Result<Evaluation> {
    check_labels(spec, split)?;
    let layers = Layers::new(net, spec)?;
    let (mut correct, mut prob, mut loss) = (0usize, 0.0, 0.0);
    for (x, &y) in split.inputs.iter().zip(&split.labels) {
        let acts = layers.activations(x);
        let logits = acts.last().unwrap();
        let p = softmax(logits);
        let arg = p
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > p[best] { i } else { best });
        correct += (arg == y) as usize;
        prob += p[y];
        loss -= log_softmax_at(logits, y);
    }
    let n = split.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        probability: prob / n,
        loss: loss / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ToyNetSpec {
        ToyNetSpec::new(3, vec![4], 3, 1).unwrap()
    }

    fn batch() -> FewShotBatch {
        FewShotBatch::new(
            "t",
            vec![vec![0.5, -1.0, 0.2], vec![1.5, 0.3, -0.7], vec![-0.2, 0.1, 0.9]],
            vec![0, 2, 1],
        )
        .unwrap()
    }

    #[test]
    fn init_layout_and_bounds() {
        let s = spec();
        let net = s.init();
        assert_eq!(net.len(), 4);
        assert_eq!(net.get("layer1.weight").unwrap().shape(), &[4, 3]);
        assert_eq!(net.get("layer2.weight").unwrap().shape(), &[3, 4]);
        let bound = 1.0 / 3f64.sqrt();
        assert!(net.get("layer1.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert_eq!(net.total_elements(), s.parameter_count());
        assert_eq!(ToyNetSpec::infer(&net).unwrap().hidden_dims, vec![4]);
        assert_eq!(s.init(), net);
    }

    #[test]
    fn zero_net_is_uniform() {
        let s = spec();
        let zero = s.init().map(|_| 0.0);
        let p = forward(&zero, &s, &batch().inputs).unwrap();
        for row in p {
            for v in row {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rows_are_distributions() {
        let s = spec();
        for row in forward(&s.init(), &s, &batch().inputs).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn dimension_and_label_errors() {
        let s = spec();
        assert!(forward(&s.init(), &s, &[vec![1.0, 2.0]]).is_err());
        let mut b = batch();
        b.labels[0] = 3;
        assert!(loss_and_grad(&s.init(), &s, &b).is_err());
        let other = ToyNetSpec::new(3, vec![5], 3, 1).unwrap();
        assert!(forward(&other.init(), &s, &batch().inputs).is_err());
    }

    #[test]
    fn softmax_regression_gradient_closed_form() {
        let s = ToyNetSpec::new(3, vec![], 3, 4).unwrap();
        let net = s.init();
        let b = batch();
        let (_, g) = loss_and_grad(&net, &s, &b).unwrap();
        let probs = forward(&net, &s, &b.inputs).unwrap();
        let mut expected = vec![0.0; 9];
        for ((x, &y), p) in b.inputs.iter().zip(&b.labels).zip(&probs) {
            for c in 0..3 {
                let r = p[c] - (c == y) as u8 as f64;
                for j in 0..3 {
                    expected[c * 3 + j] += r * x[j] / 3.0;
                }
            }
        }
        for (a, e) in g.get("layer1.weight").unwrap().data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-14, "{a} vs {e}");
        }
    }

    #[test]
    fn confident_prediction_has_vanishing_gradient() {
        let s = ToyNetSpec::new(2, vec![], 2, 0).unwrap();
        let mut net = s.init().map(|_| 0.0);
        let b = FewShotBatch::new("t", vec![vec![1.0, 0.0]], vec![0]).unwrap();
        net.get_mut("layer1.bias").unwrap().data_mut()[0] = 40.0;
        let (l, g) = loss_and_grad(&net, &s, &b).unwrap();
        assert!(l < 1e-15);
        let norm: f64 = g.iter().flat_map(|(_, t)| t.data().to_vec()).map(|v| v * v).sum();
        assert!(norm.sqrt() < 1e-15);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let s = ToyNetSpec::new(3, vec![4, 5], 3, 9).unwrap();
        let net = s.init();
        let (_, g) = loss_and_grad(&net, &s, &batch()).unwrap();
        let fd = finite_diff_grad(&net, &s, &batch(), 1e-5).unwrap();
        for (name, t) in g.iter() {
            for (a, e) in t.data().iter().zip(fd.get(name).unwrap().data()) {
                assert!((a - e).abs() <= 1e-6 * e.abs().max(1e-3), "{name}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn central_difference_is_second_order() {
        let mut p = TensorMap::new();
        p.insert("w", DenseTensor::new(vec![1], vec![0.7]).unwrap()).unwrap();
        // f(w) = w^3 so the central-difference error is exactly h^2
        let f = |m: &TensorMap<f64>| Ok(m.get("w").unwrap().data()[0].powi(3));
        let exact = 3.0 * 0.7f64.powi(2);
        let err = |h: f64| (finite_diff(&p, h, f).unwrap().get("w").unwrap().data()[0] - exact).abs();
        let ratio = err(1e-2) / err(5e-3);
        assert!((ratio - 4.0).abs() < 0.01, "{ratio}");
        // on the quadratic the error vanishes to rounding
        let q = |m: &TensorMap<f64>| Ok(m.get("w").unwrap().data()[0].powi(2));
        let d = finite_diff(&p, 1e-3, q).unwrap().get("w").unwrap().data()[0];
        assert!((d - 1.4).abs() < 1e-10);
    }

    #[test]
    fn zero_step_is_rejected() {
        let s = spec();
        assert!(finite_diff_grad(&s.init(), &s, &batch(), 0.0).is_err());
    }

    #[test]
    fn training_basics() {
        let s = spec();
        let net = s.init();
        let none = TrainConfig {
            epochs: 0,
            step_size: 0.1,
            frozen_layers: vec![],
        };
        assert_eq!(train(&net, &s, &batch(), &none).unwrap(), net);
        let cfg = TrainConfig {
            epochs: 200,
            step_size: 0.5,
            frozen_layers: vec![1],
        };
        let a = train(&net, &s, &batch(), &cfg).unwrap();
        assert_eq!(a, train(&net, &s, &batch(), &cfg).unwrap());
        assert!(loss(&a, &s, &batch()).unwrap() < loss(&net, &s, &batch()).unwrap());
        assert_eq!(a.get("layer1.weight"), net.get("layer1.weight"));
        assert_eq!(a.get("layer1.bias"), net.get("layer1.bias"));
        assert_ne!(a.get("layer2.weight"), net.get("layer2.weight"));
    }

    #[test]
    fn divergence_is_reported() {
        let s = ToyNetSpec::new(3, vec![], 3, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            step_size: 1e306,
            frozen_layers: vec![],
        };
        let b = FewShotBatch::new("t", vec![vec![1e3, 5e2, -5e2]; 2], vec![0, 1]).unwrap();
        let r = train(&s.init(), &s, &b, &cfg);
        assert!(matches!(r, Err(Error::Diverged(_))), "{r:?}");
    }

    #[test]
    fn evaluation_definitions() {
        let s = ToyNetSpec::new(2, vec![], 2, 0).unwrap();
        let mut net = s.init().map(|_| 0.0);
        // logits = 10 * x, so class c wins when x[c] is larger
        net.get_mut("layer1.weight").unwrap().data_mut().copy_from_slice(&[10.0, 0.0, 0.0, 10.0]);
        let b = FewShotBatch::new("t", vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]).unwrap();
        let e = evaluate(&net, &s, &b).unwrap();
        assert_eq!(e.accuracy, 1.0);
        let p = forward(&net, &s, &b.inputs).unwrap();
        assert!((e.probability - (p[0][0] + p[1][1]) / 2.0).abs() < 1e-15);
    }
}
