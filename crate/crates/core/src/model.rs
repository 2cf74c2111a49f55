//! Fully connected classifier with ReLU hidden layers and a softmax output.
//!
//! Parameters live in one flat [`ParamVector`]. Layer `l` contributes its
//! weight matrix (`dims[l+1] × dims[l]`, row-major) followed by its bias
//! vector, so the output layer always occupies the tail of the vector.

use std::ops::Range;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelArch {
    layer_dims: Vec<usize>,
}

impl ModelArch {
    pub fn new(layer_dims: Vec<usize>) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidArch(format!(
                "need at least input and output layers, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidArch(format!("zero-width layer in {layer_dims:?}")));
        }
        Ok(ModelArch { layer_dims })
    }

    /// 784-30-10, the MNIST network.
    pub fn mnist_mlp() -> Self {
        ModelArch {
            layer_dims: vec![784, 30, 10],
        }
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    fn layer_count(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// `Σ (dims[i] + 1) · dims[i+1]`.
    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Offsets of the weight block and the bias block of layer `l`.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let start: usize = self.layer_dims[..=l]
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum();
        let w_len = self.layer_dims[l] * self.layer_dims[l + 1];
        (start, start + w_len)
    }

    /// Index range of the output layer's weights and biases.
    pub fn indicative_range(&self) -> Range<usize> {
        let (w_off, _) = self.layer_offsets(self.layer_count() - 1);
        w_off..self.param_count()
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.dim() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                actual: params.dim(),
            });
        }
        Ok(())
    }
}

/// A borrowed set of labelled samples.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    rows: Vec<&'a [f64]>,
    labels: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn new(rows: Vec<&'a [f64]>, labels: Vec<usize>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidBatch("no samples".into()));
        }
        if rows.len() != labels.len() {
            return Err(Error::InvalidBatch(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let width = rows[0].len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidBatch("ragged rows".into()));
        }
        Ok(Batch { rows, labels })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[&'a [f64]] {
        &self.rows
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn check(&self, arch: &ModelArch) -> Result<()> {
        if self.rows[0].len() != arch.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: arch.input_dim(),
                actual: self.rows[0].len(),
            });
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= arch.classes()) {
            return Err(Error::InvalidBatch(format!(
                "label {bad} out of range for {} classes",
                arch.classes()
            )));
        }
        Ok(())
    }
}

/// Deterministic initialisation: weights ~ N(0, 1/fan_in), biases zero.
pub fn init_params(arch: &ModelArch, seed: u64) -> ParamVector {
    let mut rng = seed::rng(seed);
    let mut out = vec![0.0; arch.param_count()];
    for l in 0..arch.layer_count() {
        let fan_in = arch.layer_dims[l];
        let (w_off, b_off) = arch.layer_offsets(l);
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).unwrap();
        for w in &mut out[w_off..b_off] {
            *w = normal.sample(&mut rng);
        }
    }
    ParamVector::new(out).expect("initial weights are finite")
}

/// Scratch buffers for one forward/backward pass.
pub(crate) struct Workspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    pub(crate) fn new(arch: &ModelArch) -> Self {
        let dims = &arch.layer_dims;
        Workspace {
            acts: dims[1..].iter().map(|&d| vec![0.0; d]).collect(),
            deltas: dims[1..].iter().map(|&d| vec![0.0; d]).collect(),
        }
    }
}

/// Runs the network on `x`; the logits end up in `ws.acts.last()`.
fn forward(params: &[f64], arch: &ModelArch, x: &[f64], ws: &mut Workspace) {
    let layers = arch.layer_count();
    for l in 0..layers {
        let (w_off, b_off) = arch.layer_offsets(l);
        let fan_in = arch.layer_dims[l];
        let fan_out = arch.layer_dims[l + 1];
        let (before, rest) = ws.acts.split_at_mut(l);
        let input: &[f64] = if l == 0 { x } else { &before[l - 1] };
        let out = &mut rest[0];
        for o in 0..fan_out {
            let row = &params[w_off + o * fan_in..w_off + (o + 1) * fan_in];
            let mut z = params[b_off + o];
            for (w, a) in row.iter().zip(input) {
                z += w * a;
            }
            out[o] = if l + 1 < layers { z.max(0.0) } else { z };
        }
    }
}

/// Numerically stable softmax in place; returns log-sum-exp of the input.
fn softmax_in_place(z: &mut [f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Accumulates the summed (not averaged) gradient of the batch into `grad`
/// and returns the summed cross-entropy.
pub(crate) fn accumulate_grad(
    params: &[f64],
    arch: &ModelArch,
    rows: &[&[f64]],
    labels: &[usize],
    grad: &mut [f64],
    ws: &mut Workspace,
) -> f64 {
    let layers = arch.layer_count();
    let mut loss = 0.0;
    for (x, &y) in rows.iter().zip(labels) {
        forward(params, arch, x, ws);
        let logits = ws.acts.last_mut().unwrap();
        let z_y = logits[y];
        let lse = softmax_in_place(logits);
        loss += lse - z_y;

        // output delta = p - onehot(y)
        let out_delta = &mut ws.deltas[layers - 1];
        out_delta.copy_from_slice(&ws.acts[layers - 1]);
        out_delta[y] -= 1.0;

        for l in (0..layers).rev() {
            let (w_off, b_off) = arch.layer_offsets(l);
            let fan_in = arch.layer_dims[l];
            let fan_out = arch.layer_dims[l + 1];
            let input: &[f64] = if l == 0 { x } else { &ws.acts[l - 1] };
            let delta = &ws.deltas[l];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let g_row = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                for (g, a) in g_row.iter_mut().zip(input) {
                    *g += d * a;
                }
                grad[b_off + o] += d;
            }
            if l > 0 {
                let (lower, upper) = ws.deltas.split_at_mut(l);
                let prev = &mut lower[l - 1];
                let delta = &upper[0];
                let act = &ws.acts[l - 1];
                for i in 0..fan_in {
                    if act[i] <= 0.0 {
                        prev[i] = 0.0;
                        continue;
                    }
                    let mut s = 0.0;
                    for o in 0..fan_out {
                        s += params[w_off + o * fan_in + i] * delta[o];
                    }
                    prev[i] = s;
                }
            }
        }
    }
    loss
}

/// Mean cross-entropy over the batch and its gradient.
pub fn loss_and_grad(params: &ParamVector, arch: &ModelArch, batch: &Batch) -> Result<(f64, ParamVector)> {
    arch.check_params(params)?;
    batch.check(arch)?;
    let mut grad = vec![0.0; arch.param_count()];
    let mut ws = Workspace::new(arch);
    let loss = accumulate_grad(params.as_slice(), arch, &batch.rows, &batch.labels, &mut grad, &mut ws);
    let n = batch.len() as f64;
    for g in &mut grad {
        *g /= n;
    }
    Ok((loss / n, ParamVector::new(grad)?))
}

/// Class probabilities for one sample.
pub fn predict_proba(params: &ParamVector, arch: &ModelArch, x: &[f64]) -> Result<Vec<f64>> {
    arch.check_params(params)?;
    if x.len() != arch.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: arch.input_dim(),
            actual: x.len(),
        });
    }
    let mut ws = Workspace::new(arch);
    forward(params.as_slice(), arch, x, &mut ws);
    Ok(softmax(ws.acts.last().unwrap()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub error_rate: f64,
    /// Mean cross-entropy.
    pub loss: f64,
}

/// Accuracy, error rate and mean loss. Ties in the argmax go to the lowest class id.
pub fn evaluate(params: &ParamVector, arch: &ModelArch, data: &Batch) -> Result<Evaluation> {
    arch.check_params(params)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.check(arch)?;
    Ok(evaluate_unchecked(params.as_slice(), arch, data.rows(), data.labels()))
}

pub(crate) fn evaluate_unchecked(params: &[f64], arch: &ModelArch, rows: &[&[f64]], labels: &[usize]) -> Evaluation {
    let mut ws = Workspace::new(arch);
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (x, &y) in rows.iter().zip(labels) {
        forward(params, arch, x, &mut ws);
        let logits = ws.acts.last_mut().unwrap();
        if argmax(logits) == y {
            correct += 1;
        }
        let z_y = logits[y];
        loss += softmax_in_place(logits) - z_y;
    }
    let n = rows.len() as f64;
    let accuracy = correct as f64 / n;
    Evaluation {
        accuracy,
        error_rate: (rows.len() - correct) as f64 / n,
        loss: loss / n,
    }
}

/// The output layer's weights and biases as a standalone vector.
pub fn indicative_features(params: &ParamVector, arch: &ModelArch) -> Result<ParamVector> {
    arch.check_params(params)?;
    ParamVector::new(params.as_slice()[arch.indicative_range()].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(rng: &mut impl Rng, n: usize, dim: usize, classes: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let rows = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        (rows, labels)
    }

    fn as_batch<'a>(rows: &'a [Vec<f64>], labels: &[usize]) -> Batch<'a> {
        Batch::new(rows.iter().map(|r| r.as_slice()).collect(), labels.to_vec()).unwrap()
    }

    #[test]
    fn param_counts() {
        assert_eq!(ModelArch::new(vec![2, 3, 2]).unwrap().param_count(), 17);
        assert_eq!(ModelArch::mnist_mlp().param_count(), 23_860);
        assert_eq!(init_params(&ModelArch::mnist_mlp(), 3).dim(), 23_860);
        assert!(ModelArch::new(vec![4]).is_err());
        assert!(ModelArch::new(vec![4, 0, 2]).is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let arch = ModelArch::new(vec![5, 4, 3]).unwrap();
        let a = init_params(&arch, 11);
        assert_eq!(a, init_params(&arch, 11));
        assert_ne!(a, init_params(&arch, 12));
        let (_, b0) = arch.layer_offsets(0);
        assert!(a.as_slice()[b0..b0 + 4].iter().all(|&b| b == 0.0));
        assert!(a.as_slice()[arch.param_count() - 3..].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let arch = ModelArch::new(vec![3, 4, 5]).unwrap();
        let params = ParamVector::zeros(arch.param_count()).unwrap();
        let rows = vec![vec![0.2, -0.4, 1.0]];
        let (loss, _) = loss_and_grad(&params, &arch, &as_batch(&rows, &[2])).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let arch = ModelArch::new(vec![4, 5, 3]).unwrap();
        let mut rng = seed::rng(99);
        let params = init_params(&arch, 5);
        let (rows, labels) = random_batch(&mut rng, 6, 4, 3);
        let batch = as_batch(&rows, &labels);
        let (_, grad) = loss_and_grad(&params, &arch, &batch).unwrap();
        let h = 1e-5;
        for i in 0..arch.param_count() {
            let mut plus = params.clone().into_inner();
            let mut minus = plus.clone();
            plus[i] += h;
            minus[i] -= h;
            let lp = loss_and_grad(&ParamVector::new(plus).unwrap(), &arch, &batch).unwrap().0;
            let lm = loss_and_grad(&ParamVector::new(minus).unwrap(), &arch, &batch).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs()).max(1e-6);
            assert!((fd - grad[i]).abs() / scale <= 1e-4, "coord {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn duplicating_samples_keeps_mean() {
        let arch = ModelArch::new(vec![4, 5, 3]).unwrap();
        let mut rng = seed::rng(7);
        let params = init_params(&arch, 1);
        let (rows, labels) = random_batch(&mut rng, 5, 4, 3);
        let (l1, g1) = loss_and_grad(&params, &arch, &as_batch(&rows, &labels)).unwrap();
        let rows2: Vec<_> = rows.iter().chain(rows.iter()).cloned().collect();
        let labels2: Vec<_> = labels.iter().chain(labels.iter()).cloned().collect();
        let (l2, g2) = loss_and_grad(&params, &arch, &as_batch(&rows2, &labels2)).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for i in 0..g1.dim() {
            assert!((g1[i] - g2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_and_grad_is_deterministic() {
        let arch = ModelArch::new(vec![4, 5, 3]).unwrap();
        let mut rng = seed::rng(8);
        let params = init_params(&arch, 2);
        let (rows, labels) = random_batch(&mut rng, 9, 4, 3);
        let batch = as_batch(&rows, &labels);
        let a = loss_and_grad(&params, &arch, &batch).unwrap();
        let b = loss_and_grad(&params, &arch, &batch).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn rejects_mismatched_params_and_labels() {
        let arch = ModelArch::new(vec![2, 3, 2]).unwrap();
        let rows = vec![vec![0.0, 1.0]];
        let batch = as_batch(&rows, &[0]);
        let short = ParamVector::zeros(5).unwrap();
        assert!(matches!(loss_and_grad(&short, &arch, &batch), Err(Error::DimensionMismatch { .. })));
        let bad = as_batch(&rows, &[2]);
        assert!(loss_and_grad(&ParamVector::zeros(17).unwrap(), &arch, &bad).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut rng = seed::rng(3);
        for _ in 0..200 {
            let z: Vec<f64> = (0..10).map(|_| rng.random_range(-50.0..50.0)).collect();
            let p = softmax(&z);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_argmax_scores_perfectly() {
        let arch = ModelArch::new(vec![3, 2, 4]).unwrap();
        // all-zero params: every logit ties, argmax goes to class 0
        let params = ParamVector::zeros(arch.param_count()).unwrap();
        let rows = vec![vec![1.0, 2.0, 3.0]; 7];
        let eval = evaluate(&params, &arch, &as_batch(&rows, &[0; 7])).unwrap();
        assert_eq!(eval.accuracy, 1.0);
        assert_eq!(eval.error_rate, 0.0);
        let eval = evaluate(&params, &arch, &as_batch(&rows, &[1; 7])).unwrap();
        assert_eq!(eval.accuracy, 0.0);
    }

    #[test]
    fn accuracy_matches_per_sample_oracle() {
        let arch = ModelArch::new(vec![6, 8, 10]).unwrap();
        let mut rng = seed::rng(50);
        let params = init_params(&arch, 4);
        let (rows, labels) = random_batch(&mut rng, 50, 6, 10);
        let eval = evaluate(&params, &arch, &as_batch(&rows, &labels)).unwrap();

        // oracle: explicit matrix products straight from the layout
        let p = params.as_slice();
        let mut correct = 0;
        for (x, &y) in rows.iter().zip(&labels) {
            let mut h = [0.0f64; 8];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut z = p[48 + j];
                for i in 0..6 {
                    z += p[j * 6 + i] * x[i];
                }
                *hj = if z > 0.0 { z } else { 0.0 };
            }
            let mut best = (0usize, f64::NEG_INFINITY);
            for k in 0..10 {
                let mut z = p[56 + 80 + k];
                for j in 0..8 {
                    z += p[56 + k * 8 + j] * h[j];
                }
                if z > best.1 {
                    best = (k, z);
                }
            }
            if best.0 == y {
                correct += 1;
            }
        }
        assert_eq!(eval.accuracy, correct as f64 / 50.0);
        assert!((eval.accuracy + eval.error_rate - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_params_score_near_chance() {
        let arch = ModelArch::new(vec![20, 16, 10]).unwrap();
        let mut rng = seed::rng(12);
        let rows: Vec<Vec<f64>> = (0..1000)
            .map(|_| (0..20).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..1000).map(|i| i % 10).collect();
        let batch = as_batch(&rows, &labels);
        let mean: f64 = (0..20)
            .map(|s| evaluate(&init_params(&arch, s), &arch, &batch).unwrap().accuracy)
            .sum::<f64>()
            / 20.0;
        assert!((mean - 0.1).abs() <= 0.05, "mean accuracy {mean}");
    }

    #[test]
    fn indicative_features_is_the_output_layer() {
        let arch = ModelArch::new(vec![2, 3, 2]).unwrap();
        let params = ParamVector::new((0..17).map(|i| i as f64).collect()).unwrap();
        let ind = indicative_features(&params, &arch).unwrap();
        assert_eq!(ind.as_slice(), &[9., 10., 11., 12., 13., 14., 15., 16.]);

        let mut perturbed = params.clone().into_inner();
        for v in &mut perturbed[..6] {
            *v += 100.0;
        }
        let ind2 = indicative_features(&ParamVector::new(perturbed).unwrap(), &arch).unwrap();
        assert_eq!(ind, ind2);
        assert_eq!(ModelArch::mnist_mlp().indicative_range().len(), 310);
    }

    #[test]
    fn small_sgd_step_rarely_increases_loss() {
        let arch = ModelArch::new(vec![20, 16, 10]).unwrap();
        let data = crate::data::generate_synthetic(&crate::data::SyntheticSpec {
            seed: 1,
            class_count: 10,
            input_dim: 20,
            samples_per_class: 10,
            cluster_spread: 0.3,
        })
        .unwrap();
        let batch = data.batch();
        let mut violations = 0;
        for trial in 0..50 {
            let params = init_params(&arch, trial);
            let (before, grad) = loss_and_grad(&params, &arch, &batch).unwrap();
            let lr = 1e-2;
            let stepped: Vec<f64> = params.as_slice().iter().zip(grad.as_slice()).map(|(p, g)| p - lr * g).collect();
            let (after, _) = loss_and_grad(&ParamVector::new(stepped).unwrap(), &arch, &batch).unwrap();
            if after > before {
                violations += 1;
            }
        }
        assert!(violations <= 2, "{violations} violations");
    }
}
