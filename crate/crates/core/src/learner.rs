//! Softmax-regression model, loss/gradient evaluation and the ADAM update.
//!
//! The model is a single linear layer over `F` features with the bias folded
//! in as a constant-1 feature appended to every sample, so the parameter
//! vector has length `d = C · (F + 1)` laid out as `C` contiguous per-class
//! blocks. For the 28x28 / 10-class task this gives d = 7850.

use crate::{Error, Result};

/// Model parameter vector plus the iteration it belongs to.
#[derive(Debug, Clone)]
pub struct ModelParams {
    weights: Vec<f64>,
    classes: usize,
    features: usize,
    /// Number of optimizer updates applied so far.
    pub iteration: u32,
}

impl ModelParams {
    /// All-zero parameters for `classes` classes over `features` raw features.
    pub fn zeros(classes: usize, features: usize) -> Self {
        Self {
            weights: vec![0.0; classes * (features + 1)],
            classes,
            features,
            iteration: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Weight block (length F + 1, bias last) for one class.
    pub fn class_block(&self, class: usize) -> &[f64] {
        let w = self.features + 1;
        &self.weights[class * w..(class + 1) * w]
    }
}

/// ADAM hyperparameters. Defaults: η = 1e-3, β1 = 0.9, β2 = 0.999, ε = 1e-8.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.learning_rate > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "bad ADAM hyperparameters: {self:?}"
            )))
        }
    }
}

/// First/second moment state of the ADAM optimizer.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u32,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(dim: usize, hyper: AdamHyper) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
            hyper,
        }
    }

    pub fn step_count(&self) -> u32 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }
}

/// A batch of samples: row-major feature matrix and one label per row.
#[derive(Debug, Clone)]
pub struct Batch {
    features: Vec<f32>,
    labels: Vec<u8>,
    feature_dim: usize,
}

impl Batch {
    /// Builds a batch, checking that features lie in [0, 1] and that the
    /// label count matches the sample count.
    pub fn new(features: Vec<f32>, labels: Vec<u8>, feature_dim: usize) -> Result<Self> {
        if feature_dim == 0 || features.len() != labels.len() * feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "batch of {} labels needs {} features, got {}",
                labels.len(),
                labels.len() * feature_dim,
                features.len()
            )));
        }
        if features.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::InvalidArgument(
                "batch features must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            features,
            labels,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }
}

fn check_compatible(params: &ModelParams, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch.feature_dim() != params.features {
        return Err(Error::ShapeMismatch(format!(
            "batch features {} vs model features {}",
            batch.feature_dim(),
            params.features
        )));
    }
    if batch.labels.iter().any(|&l| usize::from(l) >= params.classes) {
        return Err(Error::InvalidArgument("label out of class range".into()));
    }
    Ok(())
}

/// Per-class logits for one sample (bias weight added last).
fn logits_into(params: &ModelParams, x: &[f32], out: &mut [f64]) {
    let width = params.features + 1;
    for (c, slot) in out.iter_mut().enumerate() {
        let row = &params.weights[c * width..(c + 1) * width];
        let mut acc = row[params.features]; // bias term, constant-1 feature
        for (w, &xi) in row[..params.features].iter().zip(x) {
            acc += w * f64::from(xi);
        }
        *slot = acc;
    }
}

/// log-softmax pieces for one logit vector: (max, log Σ exp(l - max)).
fn log_sum_exp(logits: &[f64]) -> (f64, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    (max, sum.ln())
}

/// Mean cross-entropy of the batch under the softmax model.
pub fn loss(params: &ModelParams, batch: &Batch) -> Result<f64> {
    check_compatible(params, batch)?;
    let mut logits = vec![0.0f64; params.classes];
    let mut total = 0.0f64;
    for i in 0..batch.len() {
        logits_into(params, batch.sample(i), &mut logits);
        let (max, lse) = log_sum_exp(&logits);
        total += max + lse - logits[batch.label(i)];
    }
    Ok(total / batch.len() as f64)
}

/// Batch-mean gradient of the cross-entropy loss, length `d`.
pub fn gradient(params: &ModelParams, batch: &Batch) -> Result<Vec<f64>> {
    check_compatible(params, batch)?;
    let width = params.features + 1;
    let mut grad = vec![0.0f64; params.dim()];
    let mut logits = vec![0.0f64; params.classes];
    for i in 0..batch.len() {
        let x = batch.sample(i);
        logits_into(params, x, &mut logits);
        let (max, lse) = log_sum_exp(&logits);
        let label = batch.label(i);
        for c in 0..params.classes {
            // softmax probability minus the one-hot target
            let mut coef = (logits[c] - max - lse).exp();
            if c == label {
                coef -= 1.0;
            }
            let row = &mut grad[c * width..(c + 1) * width];
            for (g, &xi) in row[..params.features].iter_mut().zip(x) {
                *g += coef * f64::from(xi);
            }
            row[params.features] += coef;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for g in &mut grad {
        *g *= inv;
    }
    Ok(grad)
}

/// One bias-corrected ADAM update in place. The gradient estimate may come
/// from any transport scheme; it is applied exactly as a raw gradient.
pub fn adam_step(params: &mut ModelParams, state: &mut AdamState, grad: &[f64]) -> Result<()> {
    if grad.len() != params.dim() {
        return Err(Error::ShapeMismatch(format!(
            "gradient of length {} vs model dimension {}",
            grad.len(),
            params.dim()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    state.step += 1;
    let h = state.hyper;
    let bias1 = 1.0 - h.beta1.powi(state.step as i32);
    let bias2 = 1.0 - h.beta2.powi(state.step as i32);
    for i in 0..grad.len() {
        let g = grad[i];
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        params.weights[i] -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
    }
    params.iteration += 1;
    Ok(())
}

/// Fraction of samples whose argmax logit matches the label. Ties break
/// toward the lowest class index.
pub fn evaluate(params: &ModelParams, test: &Batch) -> Result<f64> {
    check_compatible(params, test)?;
    let mut logits = vec![0.0f64; params.classes];
    let mut hits = 0usize;
    for i in 0..test.len() {
        logits_into(params, test.sample(i), &mut logits);
        let mut best = 0usize;
        for c in 1..params.classes {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        if best == test.label(i) {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_batch(
        rng: &mut impl Rng,
        n: usize,
        features: usize,
        classes: usize,
    ) -> Batch {
        let feats: Vec<f32> = (0..n * features).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..classes) as u8).collect();
        Batch::new(feats, labels, features).unwrap()
    }

    fn random_params(rng: &mut impl Rng, classes: usize, features: usize) -> ModelParams {
        let mut p = ModelParams::zeros(classes, features);
        for w in p.weights_mut() {
            *w = rng.gen_range(-1.0..1.0);
        }
        p
    }

    #[test]
    fn zero_weights_loss_is_log_c() {
        let params = ModelParams::zeros(10, 4);
        let mut rng = crate::seeded_stream(3, "loss");
        let batch = random_batch(&mut rng, 16, 4, 10);
        assert_relative_eq!(
            loss(&params, &batch).unwrap(),
            10.0f64.ln(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn loss_vanishes_as_true_logit_grows() {
        // Push the true-class weight block up and watch the loss fall to 0.
        let batch = Batch::new(vec![1.0, 0.5], vec![1], 2).unwrap();
        let mut previous = f64::INFINITY;
        for scale in [1.0, 2.0, 4.0, 8.0] {
            let mut params = ModelParams::zeros(3, 2);
            let w = params.weights_mut();
            w[3] = scale; // class-1 block starts at index 3
            w[4] = scale;
            w[5] = scale;
            let l = loss(&params, &batch).unwrap();
            assert!(l < previous);
            previous = l;
        }
        assert!(previous < 1e-8);
    }

    #[test]
    fn loss_matches_brute_force_oracle() {
        let mut rng = crate::seeded_stream(17, "loss-oracle");
        for _ in 0..20 {
            let classes = rng.gen_range(2..6);
            let features = rng.gen_range(1..12);
            let n = rng.gen_range(1..24);
            let params = random_params(&mut rng, classes, features);
            let batch = random_batch(&mut rng, n, features, classes);

            // Per-sample softmax + NLL, summed with Kahan compensation.
            let mut sum = 0.0f64;
            let mut comp = 0.0f64;
            for i in 0..n {
                let x = batch.sample(i);
                let logits: Vec<f64> = (0..classes)
                    .map(|c| {
                        let block = params.class_block(c);
                        block[features]
                            + x.iter()
                                .enumerate()
                                .map(|(j, &xi)| block[j] * f64::from(xi))
                                .sum::<f64>()
                    })
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                let p = logits[batch.label(i)].exp() / z;
                let term = -p.ln();
                let y = term - comp;
                let t = sum + y;
                comp = (t - sum) - y;
                sum = t;
            }
            assert_relative_eq!(
                loss(&params, &batch).unwrap(),
                sum / n as f64,
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let params = ModelParams::zeros(3, 2);
        let batch = Batch::new(vec![], vec![], 2).unwrap();
        assert!(matches!(loss(&params, &batch), Err(Error::EmptyBatch)));
        assert!(matches!(gradient(&params, &batch), Err(Error::EmptyBatch)));
        assert!(matches!(evaluate(&params, &batch), Err(Error::EmptyBatch)));
    }

    #[test]
    fn gradient_at_zero_weights_single_sample() {
        // Uniform prediction: true-class block gets (1/C - 1)·x, others (1/C)·x.
        let params = ModelParams::zeros(10, 3);
        let features = vec![0.2f32, 0.4, 0.8];
        let batch = Batch::new(features.clone(), vec![7], 3).unwrap();
        let grad = gradient(&params, &batch).unwrap();
        let mut x: Vec<f64> = features.iter().map(|&v| f64::from(v)).collect();
        x.push(1.0); // bias folded in
        for c in 0..10 {
            let coef = if c == 7 { 0.1 - 1.0 } else { 0.1 };
            for j in 0..4 {
                assert_relative_eq!(grad[c * 4 + j], coef * x[j], max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = crate::seeded_stream(5, "fd");
        for _ in 0..5 {
            let classes = rng.gen_range(2..5);
            let features = rng.gen_range(1..8);
            let mut params = random_params(&mut rng, classes, features);
            let batch = random_batch(&mut rng, 6, features, classes);
            let grad = gradient(&params, &batch).unwrap();
            let step = 1e-5;
            for i in 0..params.dim() {
                let orig = params.weights()[i];
                params.weights_mut()[i] = orig + step;
                let plus = loss(&params, &batch).unwrap();
                params.weights_mut()[i] = orig - step;
                let minus = loss(&params, &batch).unwrap();
                params.weights_mut()[i] = orig;
                let fd = (plus - minus) / (2.0 * step);
                assert!(
                    (grad[i] - fd).abs() <= 1e-6 * (1.0 + grad[i].abs()),
                    "coordinate {i}: analytic {} vs fd {fd}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn duplicated_batch_keeps_gradient() {
        let mut rng = crate::seeded_stream(9, "dup");
        let params = random_params(&mut rng, 3, 5);
        let batch = random_batch(&mut rng, 7, 5, 3);
        let mut feats = batch.features.clone();
        feats.extend_from_slice(&batch.features);
        let mut labels = batch.labels.clone();
        labels.extend_from_slice(&batch.labels);
        let doubled = Batch::new(feats, labels, 5).unwrap();
        let g1 = gradient(&params, &batch).unwrap();
        let g2 = gradient(&params, &doubled).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn permuting_classes_permutes_gradient_blocks() {
        let mut rng = crate::seeded_stream(21, "perm");
        let features = 4;
        let params = random_params(&mut rng, 3, features);
        let batch = random_batch(&mut rng, 9, features, 3);
        let grad = gradient(&params, &batch).unwrap();

        // Permutation π = (0 1 2) -> (2 0 1) applied to classes.
        let perm = [2usize, 0, 1];
        let width = features + 1;
        let mut permuted_params = ModelParams::zeros(3, features);
        for c in 0..3 {
            let src = params.class_block(c).to_vec();
            permuted_params.weights_mut()[perm[c] * width..(perm[c] + 1) * width]
                .copy_from_slice(&src);
        }
        let permuted_labels: Vec<u8> = batch.labels.iter().map(|&l| perm[usize::from(l)] as u8).collect();
        let permuted_batch = Batch::new(batch.features.clone(), permuted_labels, features).unwrap();
        let permuted_grad = gradient(&permuted_params, &permuted_batch).unwrap();
        for c in 0..3 {
            for j in 0..width {
                assert_relative_eq!(
                    grad[c * width + j],
                    permuted_grad[perm[c] * width + j],
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_signed_learning_rate() {
        let mut params = ModelParams::zeros(2, 1);
        let mut state = AdamState::new(params.dim(), AdamHyper::default());
        let grad = vec![0.5, -0.25, 0.75, -1.0];
        adam_step(&mut params, &mut state, &grad).unwrap();
        for (w, g) in params.weights().iter().zip(&grad) {
            assert_relative_eq!(*w, -1e-3 * g.signum(), max_relative = 1e-6);
        }
        assert_eq!(state.step_count(), 1);
        assert_eq!(params.iteration, 1);
    }

    #[test]
    fn adam_zero_gradient_first_step_is_inert() {
        let mut params = ModelParams::zeros(2, 2);
        let mut state = AdamState::new(params.dim(), AdamHyper::default());
        let zero = vec![0.0; params.dim()];
        adam_step(&mut params, &mut state, &zero).unwrap();
        assert!(params.weights().iter().all(|&w| w == 0.0));
        assert!(state.first_moment().iter().all(|&m| m == 0.0));
        assert!(state.second_moment().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_matches_scalar_reference_trace() {
        // Two steps against a hand-rolled scalar ADAM.
        let g = 0.3f64;
        let h = AdamHyper::default();
        let mut theta = 0.0f64;
        let mut m = 0.0f64;
        let mut v = 0.0f64;
        for step in 1..=2 {
            m = h.beta1 * m + (1.0 - h.beta1) * g;
            v = h.beta2 * v + (1.0 - h.beta2) * g * g;
            let m_hat = m / (1.0 - h.beta1.powi(step));
            let v_hat = v / (1.0 - h.beta2.powi(step));
            theta -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
        }

        let mut params = ModelParams::zeros(1, 0);
        let mut state = AdamState::new(1, h);
        adam_step(&mut params, &mut state, &[g]).unwrap();
        adam_step(&mut params, &mut state, &[g]).unwrap();
        assert_relative_eq!(params.weights()[0], theta, max_relative = 1e-14);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut params = ModelParams::zeros(1, 1);
        let mut state = AdamState::new(params.dim(), AdamHyper::default());
        let err = adam_step(&mut params, &mut state, &[f64::NAN, 0.0]);
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn evaluate_zero_weights_predicts_class_zero() {
        let params = ModelParams::zeros(3, 2);
        let batch = Batch::new(
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            vec![0, 1, 0, 2],
            2,
        )
        .unwrap();
        assert_relative_eq!(evaluate(&params, &batch).unwrap(), 0.5);
    }

    #[test]
    fn evaluate_memorized_samples() {
        let mut params = ModelParams::zeros(2, 1);
        // Class 0 fires on low feature, class 1 on high.
        params.weights_mut().copy_from_slice(&[-10.0, 5.0, 10.0, -5.0]);
        let batch = Batch::new(vec![0.0, 1.0], vec![0, 1], 1).unwrap();
        assert_relative_eq!(evaluate(&params, &batch).unwrap(), 1.0);
    }

    #[test]
    fn evaluate_matches_brute_force_argmax() {
        let mut rng = crate::seeded_stream(2, "eval");
        let params = random_params(&mut rng, 4, 6);
        let batch = random_batch(&mut rng, 50, 6, 4);
        let mut hits = 0;
        for i in 0..batch.len() {
            let x = batch.sample(i);
            let logits: Vec<f64> = (0..4)
                .map(|c| {
                    let block = params.class_block(c);
                    block[6]
                        + x.iter()
                            .enumerate()
                            .map(|(j, &xi)| block[j] * f64::from(xi))
                            .sum::<f64>()
                })
                .collect();
            let mut best = 0;
            for c in 1..4 {
                if logits[c] > logits[best] {
                    best = c;
                }
            }
            if best == batch.label(i) {
                hits += 1;
            }
        }
        assert_relative_eq!(
            evaluate(&params, &batch).unwrap(),
            hits as f64 / batch.len() as f64
        );
    }

    #[test]
    fn plain_gradient_descent_decreases_loss() {
        let mut rng = crate::seeded_stream(13, "gd");
        let mut params = random_params(&mut rng, 3, 6);
        let batch = random_batch(&mut rng, 20, 6, 3);
        let mut last = loss(&params, &batch).unwrap();
        for _ in 0..10 {
            let grad = gradient(&params, &batch).unwrap();
            for (w, g) in params.weights_mut().iter_mut().zip(&grad) {
                *w -= 1e-2 * g;
            }
            let next = loss(&params, &batch).unwrap();
            assert!(next < last);
            last = next;
        }
    }
}
