//! Feed-forward classifier used as the protected victim model, the attacker
//! substitutes, and the hardening target: rectified-linear MLP with a softmax
//! head, cross-entropy loss, backprop gradients, minibatch SGD, and Monte
//! Carlo dropout sampling for uncertainty.
//!
//! Determinism contract: every stochastic entry point takes an explicit seed.
//! Training derives one rng per epoch from `(seed, epoch_offset + epoch)`, so
//! a run split across multiple calls (progressive hardening rounds) replays
//! bit-identically to one uninterrupted call with the same base seed.

pub mod data;
pub mod io;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seed;

use data::LabeledExample;

/// Probabilities are floored at this value before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

const EPOCH_SEED_TAG: u64 = 0xE90C;

/// Index of the first maximal entry.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// A training target: a hard class index or a full soft-label distribution
/// (what an attacker gets back from a soft-label oracle).
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Soft(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Offset added to the epoch index when deriving per-epoch rng streams.
    /// Lets staged training (hardening rounds) replay exactly like one
    /// contiguous run.
    pub epoch_offset: usize,
}

impl TrainOptions {
    pub fn new(epochs: usize, learning_rate: f64, batch_size: usize, seed: u64) -> Self {
        TrainOptions {
            epochs,
            learning_rate,
            batch_size,
            seed,
            epoch_offset: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::input("learning_rate must be a positive real"));
        }
        if self.batch_size == 0 {
            return Err(Error::input("batch_size must be ≥ 1"));
        }
        Ok(())
    }
}

/// Mean training loss per epoch, in epoch order.
#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub epoch_mean_loss: Vec<f64>,
}

/// Gradients of the loss with respect to every parameter.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    dropout_rate: f64,
}

struct ForwardCache {
    /// activations[0] is the input; activations[l+1] is the post-activation
    /// output of affine layer l (identity on the final layer).
    activations: Vec<Vec<f64>>,
    /// pre[l] is the pre-activation vector of affine layer l.
    pre: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

enum TargetRef<'a> {
    Class(usize),
    Soft(&'a [f64]),
}

impl Model {
    /// He-style random initialization.
    pub fn new(layer_dims: &[usize], dropout_rate: f64, init_seed: u64) -> Result<Self> {
        Self::check_dims(layer_dims, dropout_rate)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(init_seed, &[0x1217]));
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for l in 0..layer_dims.len() - 1 {
            let fan_in = layer_dims[l];
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("std is positive and finite");
            weights.push(Matrix::from_fn(layer_dims[l + 1], fan_in, |_, _| {
                normal.sample(&mut rng)
            }));
            biases.push(vec![0.0; layer_dims[l + 1]]);
        }
        Ok(Model {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            dropout_rate,
        })
    }

    /// All-zero parameters (uniform output everywhere).
    pub fn zeroed(layer_dims: &[usize], dropout_rate: f64) -> Result<Self> {
        Self::check_dims(layer_dims, dropout_rate)?;
        let weights = (0..layer_dims.len() - 1)
            .map(|l| Matrix::zeros(layer_dims[l + 1], layer_dims[l]))
            .collect();
        let biases = (0..layer_dims.len() - 1)
            .map(|l| vec![0.0; layer_dims[l + 1]])
            .collect();
        Ok(Model {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            dropout_rate,
        })
    }

    pub(crate) fn from_parts(
        layer_dims: Vec<usize>,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        dropout_rate: f64,
    ) -> Result<Self> {
        Self::check_dims(&layer_dims, dropout_rate)?;
        if weights.len() != layer_dims.len() - 1 || biases.len() != layer_dims.len() - 1 {
            return Err(Error::input("layer count mismatch"));
        }
        for l in 0..weights.len() {
            if weights[l].rows() != layer_dims[l + 1]
                || weights[l].cols() != layer_dims[l]
                || biases[l].len() != layer_dims[l + 1]
            {
                return Err(Error::input(format!("parameter shape mismatch at layer {l}")));
            }
        }
        Ok(Model {
            layer_dims,
            weights,
            biases,
            dropout_rate,
        })
    }

    fn check_dims(layer_dims: &[usize], dropout_rate: f64) -> Result<()> {
        if layer_dims.len() < 2 {
            return Err(Error::input("model needs at least input and output layers"));
        }
        if layer_dims.iter().any(|d| *d == 0) {
            return Err(Error::input("layer dimensions must be positive"));
        }
        if layer_dims[layer_dims.len() - 1] < 2 {
            return Err(Error::input("model needs at least 2 output classes"));
        }
        if !(dropout_rate.is_finite() && (0.0..1.0).contains(&dropout_rate)) {
            return Err(Error::input("dropout_rate must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn class_count(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 1]
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub(crate) fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub(crate) fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .map(|w| w.rows() * w.cols())
            .sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// All parameters flattened in a fixed order (per layer: weights
    /// row-major, then biases). Round-trips bit-exactly through
    /// [`Model::set_flat_params`].
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in 0..self.weights.len() {
            out.extend_from_slice(self.weights[l].data());
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::input(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut offset = 0;
        for l in 0..self.weights.len() {
            let wlen = self.weights[l].rows() * self.weights[l].cols();
            self.weights[l]
                .data_mut()
                .copy_from_slice(&params[offset..offset + wlen]);
            offset += wlen;
            let blen = self.biases[l].len();
            self.biases[l].copy_from_slice(&params[offset..offset + blen]);
            offset += blen;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::input(format!(
                "input dimension {} does not match model dimension {}",
                x.len(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("input contains a non-finite feature"));
        }
        Ok(())
    }

    fn check_class(&self, y: usize) -> Result<()> {
        if y >= self.class_count() {
            return Err(Error::input(format!(
                "class index {y} out of range for {} classes",
                self.class_count()
            )));
        }
        Ok(())
    }

    /// Runs the network. `masks`, when present, scales the post-activation
    /// output of each hidden layer (inverted-dropout convention: entries are
    /// 0 or 1/(1-rate)).
    fn forward_cached(&self, x: &[f64], masks: Option<&[Vec<f64>]>) -> ForwardCache {
        let layers = self.weights.len();
        let mut activations = Vec::with_capacity(layers + 1);
        let mut pre = Vec::with_capacity(layers);
        activations.push(x.to_vec());
        for l in 0..layers {
            let mut z = self.weights[l].matvec(&activations[l]);
            for (zi, b) in z.iter_mut().zip(&self.biases[l]) {
                *zi += b;
            }
            pre.push(z.clone());
            if l + 1 < layers {
                for zi in z.iter_mut() {
                    if *zi < 0.0 {
                        *zi = 0.0;
                    }
                }
                if let Some(masks) = masks {
                    for (zi, m) in z.iter_mut().zip(&masks[l]) {
                        *zi *= m;
                    }
                }
            }
            activations.push(z);
        }
        let probs = softmax(&activations[layers]);
        ForwardCache {
            activations,
            pre,
            probs,
        }
    }

    /// Deterministic forward pass (dropout disabled): softmax probabilities.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_cached(x, None).probs)
    }

    /// Deterministic final-layer logits.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let cache = self.forward_cached(x, None);
        Ok(cache.pre[self.weights.len() - 1].clone())
    }

    pub fn predict_class(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Fraction of examples whose predicted class matches the label.
    pub fn accuracy(&self, examples: &[LabeledExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::input("accuracy needs at least one example"));
        }
        let mut hits = 0usize;
        for ex in examples {
            if self.predict_class(&ex.x)? == ex.y {
                hits += 1;
            }
        }
        Ok(hits as f64 / examples.len() as f64)
    }

    /// Cross-entropy loss −log p(y|x), probability floored at [`PROB_FLOOR`].
    pub fn loss(&self, x: &[f64], y: usize) -> Result<f64> {
        self.check_class(y)?;
        let probs = self.forward(x)?;
        Ok(-(probs[y].max(PROB_FLOOR)).ln())
    }

    /// Cross-entropy against a soft or hard target.
    pub fn loss_target(&self, x: &[f64], target: &Target) -> Result<f64> {
        let tref = self.check_target(target)?;
        let probs = self.forward(x)?;
        Ok(cross_entropy(&probs, &tref))
    }

    fn check_target<'a>(&self, target: &'a Target) -> Result<TargetRef<'a>> {
        match target {
            Target::Class(y) => {
                self.check_class(*y)?;
                Ok(TargetRef::Class(*y))
            }
            Target::Soft(t) => {
                if t.len() != self.class_count() {
                    return Err(Error::input(format!(
                        "soft target length {} does not match {} classes",
                        t.len(),
                        self.class_count()
                    )));
                }
                let sum: f64 = t.iter().sum();
                if t.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::input(
                        "soft target must be a probability distribution",
                    ));
                }
                Ok(TargetRef::Soft(t))
            }
        }
    }

    /// Gradient of the loss with respect to the input, via backpropagation.
    pub fn grad_input(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_class(y)?;
        let cache = self.forward_cached(x, None);
        let d_logits = d_logits_for(&cache.probs, &TargetRef::Class(y));
        let (_, gx) = self.backprop(&cache, &d_logits, None, false);
        Ok(gx)
    }

    /// Gradients of the loss with respect to every parameter.
    pub fn param_grads(&self, x: &[f64], target: &Target) -> Result<ParamGrads> {
        self.check_input(x)?;
        let tref = self.check_target(target)?;
        let cache = self.forward_cached(x, None);
        let d_logits = d_logits_for(&cache.probs, &tref);
        let (grads, _) = self.backprop(&cache, &d_logits, None, true);
        Ok(grads.expect("requested parameter gradients"))
    }

    /// Jacobian of the logits with respect to the input: K rows of length D.
    pub fn logit_jacobian(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let cache = self.forward_cached(x, None);
        let k = self.class_count();
        let mut rows = Vec::with_capacity(k);
        for class in 0..k {
            let mut d_logits = vec![0.0; k];
            d_logits[class] = 1.0;
            let (_, gx) = self.backprop(&cache, &d_logits, None, false);
            rows.push(gx);
        }
        Ok(rows)
    }

    /// Backpropagate from d(loss)/d(logits). Returns parameter gradients when
    /// requested and always the input gradient. `masks` must match the masks
    /// used for the forward pass that produced `cache`.
    fn backprop(
        &self,
        cache: &ForwardCache,
        d_logits: &[f64],
        masks: Option<&[Vec<f64>]>,
        want_params: bool,
    ) -> (Option<ParamGrads>, Vec<f64>) {
        let layers = self.weights.len();
        let mut grads = if want_params {
            Some(ParamGrads {
                weights: self
                    .weights
                    .iter()
                    .map(|w| Matrix::zeros(w.rows(), w.cols()))
                    .collect(),
                biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            })
        } else {
            None
        };

        let mut delta = d_logits.to_vec();
        for l in (0..layers).rev() {
            if let Some(g) = grads.as_mut() {
                g.weights[l].add_outer(&delta, &cache.activations[l], 1.0);
                for (gb, d) in g.biases[l].iter_mut().zip(&delta) {
                    *gb += d;
                }
            }
            let mut upstream = self.weights[l].matvec_transpose(&delta);
            if l > 0 {
                // Through the hidden activation: dropout mask scale (if any),
                // then the rectifier gate.
                if let Some(masks) = masks {
                    for (u, m) in upstream.iter_mut().zip(&masks[l - 1]) {
                        *u *= m;
                    }
                }
                for (u, z) in upstream.iter_mut().zip(&cache.pre[l - 1]) {
                    if *z <= 0.0 {
                        *u = 0.0;
                    }
                }
            }
            delta = upstream;
        }
        (grads, delta)
    }

    fn draw_masks(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let keep_scale = 1.0 / (1.0 - self.dropout_rate);
        (1..self.layer_dims.len() - 1)
            .map(|l| {
                (0..self.layer_dims[l])
                    .map(|_| {
                        if rng.random::<f64>() < self.dropout_rate {
                            0.0
                        } else {
                            keep_scale
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Minibatch SGD on labeled examples.
    pub fn train(&mut self, examples: &[LabeledExample], opts: &TrainOptions) -> Result<TrainTrace> {
        for ex in examples {
            self.check_input(&ex.x)?;
            self.check_class(ex.y)?;
        }
        self.train_core(
            examples.len(),
            |i| (examples[i].x.as_slice(), TargetRef::Class(examples[i].y)),
            opts,
        )
    }

    /// Minibatch SGD on parallel input/target slices (soft or hard targets).
    pub fn train_targets(
        &mut self,
        inputs: &[Vec<f64>],
        targets: &[Target],
        opts: &TrainOptions,
    ) -> Result<TrainTrace> {
        if inputs.len() != targets.len() {
            return Err(Error::input("inputs and targets must have equal length"));
        }
        for (x, t) in inputs.iter().zip(targets) {
            self.check_input(x)?;
            self.check_target(t)?;
        }
        self.train_core(
            inputs.len(),
            |i| {
                let tref = match &targets[i] {
                    Target::Class(y) => TargetRef::Class(*y),
                    Target::Soft(t) => TargetRef::Soft(t),
                };
                (inputs[i].as_slice(), tref)
            },
            opts,
        )
    }

    fn train_core<'a, F>(&mut self, n: usize, get: F, opts: &TrainOptions) -> Result<TrainTrace>
    where
        F: Fn(usize) -> (&'a [f64], TargetRef<'a>),
    {
        opts.validate()?;
        if n == 0 {
            return Err(Error::input("training set is empty"));
        }
        let use_dropout = self.dropout_rate > 0.0;
        let mut trace = TrainTrace::default();

        for epoch in 0..opts.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(
                opts.seed,
                &[EPOCH_SEED_TAG, (opts.epoch_offset + epoch) as u64],
            ));
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);

            let mut loss_sum = 0.0;
            for chunk in order.chunks(opts.batch_size) {
                let mut acc: Option<ParamGrads> = None;
                for &i in chunk {
                    let (x, tref) = get(i);
                    let masks = use_dropout.then(|| self.draw_masks(&mut rng));
                    let cache = self.forward_cached(x, masks.as_deref());
                    loss_sum += cross_entropy(&cache.probs, &tref);
                    let d_logits = d_logits_for(&cache.probs, &tref);
                    let (grads, _) = self.backprop(&cache, &d_logits, masks.as_deref(), true);
                    let grads = grads.expect("requested parameter gradients");
                    match acc.as_mut() {
                        None => acc = Some(grads),
                        Some(acc) => {
                            for l in 0..acc.weights.len() {
                                acc.weights[l].add_scaled(&grads.weights[l], 1.0);
                                for (a, g) in acc.biases[l].iter_mut().zip(&grads.biases[l]) {
                                    *a += g;
                                }
                            }
                        }
                    }
                }
                if let Some(acc) = acc {
                    let scale = -opts.learning_rate / chunk.len() as f64;
                    for l in 0..self.weights.len() {
                        self.weights[l].add_scaled(&acc.weights[l], scale);
                        for (b, g) in self.biases[l].iter_mut().zip(&acc.biases[l]) {
                            *b += scale * g;
                        }
                    }
                }
            }
            trace.epoch_mean_loss.push(loss_sum / n as f64);
        }
        Ok(trace)
    }

    /// `n_samples` stochastic forward passes with dropout active. With
    /// dropout_rate = 0 the passes are all identical to the deterministic
    /// forward output.
    pub fn mc_dropout_samples(
        &self,
        x: &[f64],
        n_samples: usize,
        seed_value: u64,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        if n_samples < 2 {
            return Err(Error::input("mc dropout needs n_samples ≥ 2"));
        }
        if self.dropout_rate == 0.0 {
            let probs = self.forward_cached(x, None).probs;
            return Ok(vec![probs; n_samples]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, &[0x3CD0]));
        Ok((0..n_samples)
            .map(|_| {
                let masks = self.draw_masks(&mut rng);
                self.forward_cached(x, Some(&masks)).probs
            })
            .collect())
    }

    /// Monte Carlo dropout estimate: renormalized mean probability vector and
    /// σ = mean over classes of the across-sample (population) standard
    /// deviation. σ = 0 exactly when dropout is disabled.
    pub fn mc_dropout_predict(
        &self,
        x: &[f64],
        n_samples: usize,
        seed_value: u64,
    ) -> Result<(Vec<f64>, f64)> {
        if self.dropout_rate == 0.0 {
            self.check_input(x)?;
            if n_samples < 2 {
                return Err(Error::input("mc dropout needs n_samples ≥ 2"));
            }
            return Ok((self.forward(x)?, 0.0));
        }
        let samples = self.mc_dropout_samples(x, n_samples, seed_value)?;
        Ok(aggregate_mc_samples(&samples))
    }
}

/// Mean (renormalized) and mean-over-classes population standard deviation of
/// a set of probability vectors.
pub fn aggregate_mc_samples(samples: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let n = samples.len();
    let k = samples[0].len();
    let mut mean = vec![0.0; k];
    for s in samples {
        for (m, p) in mean.iter_mut().zip(s) {
            *m += p;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut sigma = 0.0;
    for class in 0..k {
        let mut var = 0.0;
        for s in samples {
            let d = s[class] - mean[class];
            var += d * d;
        }
        sigma += (var / n as f64).sqrt();
    }
    sigma /= k as f64;

    let sum: f64 = mean.iter().sum();
    if sum > 0.0 {
        for m in mean.iter_mut() {
            *m /= sum;
        }
    } else {
        mean.fill(1.0 / k as f64);
    }
    (mean, sigma)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

fn cross_entropy(probs: &[f64], target: &TargetRef) -> f64 {
    match target {
        TargetRef::Class(y) => -(probs[*y].max(PROB_FLOOR)).ln(),
        TargetRef::Soft(t) => t
            .iter()
            .zip(probs)
            .filter(|(ti, _)| **ti > 0.0)
            .map(|(ti, pi)| -ti * pi.max(PROB_FLOOR).ln())
            .sum(),
    }
}

/// d(cross-entropy)/d(logits) = probs − target.
fn d_logits_for(probs: &[f64], target: &TargetRef) -> Vec<f64> {
    let mut d = probs.to_vec();
    match target {
        TargetRef::Class(y) => d[*y] -= 1.0,
        TargetRef::Soft(t) => {
            for (di, ti) in d.iter_mut().zip(*t) {
                *di -= ti;
            }
        }
    }
    d
}
