//! Progressive adversarial training and the periodic self-evaluation loop.
//!
//! Hardening runs in rounds: every `refresh_period` rounds a fresh
//! adversarial pool is generated against the *current* model (the previous
//! pool is replaced, bounding memory), then the model trains
//! `epochs_per_round` epochs on clean data mixed with the pool. Per-epoch rng
//! streams are derived from the base seed and the absolute epoch index, so a
//! schedule with adversarial_fraction = 0 replays plain training bit for bit.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{deepfool, fgsm, pgd, AttackParams};
use crate::detection::{score_query, UncertaintyWeights};
use crate::error::{Error, Result};
use crate::model::data::{Dataset, LabeledExample};
use crate::model::{Model, Target, TrainOptions};
use crate::seed;

/// Default multiplicative decrement applied to τ when the simulated attack
/// success rate exceeds tolerance.
pub const DEFAULT_TAU_DECREMENT: f64 = 0.95;

/// Relative weights of the three generators when building adversarial pools.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MethodMix {
    pub fgsm: f64,
    pub pgd: f64,
    pub deepfool: f64,
}

impl Default for MethodMix {
    fn default() -> Self {
        MethodMix {
            fgsm: 0.4,
            pgd: 0.4,
            deepfool: 0.2,
        }
    }
}

impl MethodMix {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.fgsm, self.pgd, self.deepfool];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::input("method mix weights must be nonnegative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::input(format!(
                "method mix weights must sum to 1 (got {sum})"
            )));
        }
        Ok(())
    }

    fn pick(&self, roll: f64) -> Method {
        if roll < self.fgsm {
            Method::Fgsm
        } else if roll < self.fgsm + self.pgd {
            Method::Pgd
        } else {
            Method::Deepfool
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Method {
    Fgsm,
    Pgd,
    Deepfool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub rounds: usize,
    pub epochs_per_round: usize,
    /// Share of each round's training set drawn from the adversarial pool.
    pub adversarial_fraction: f64,
    pub method_mix: MethodMix,
    /// Rounds between pool regenerations.
    pub refresh_period: usize,
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.epochs_per_round == 0 || self.refresh_period == 0 {
            return Err(Error::input(
                "rounds, epochs_per_round, and refresh_period must be ≥ 1",
            ));
        }
        if !(0.0..=1.0).contains(&self.adversarial_fraction)
            || !self.adversarial_fraction.is_finite()
        {
            return Err(Error::input("adversarial_fraction must lie in [0,1]"));
        }
        self.method_mix.validate()
    }
}

/// Post-round measurements. Losses are evaluated with dropout disabled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub clean_loss: f64,
    /// Mean loss over the adversarial pool; absent when the pool is empty.
    pub adversarial_loss: Option<f64>,
    /// Fraction of pool points the current model misclassifies (their labels
    /// are the source points' true labels); absent when the pool is empty.
    pub attack_success_rate: Option<f64>,
    pub pool_size: usize,
    pub refreshed: bool,
}

/// Harden `model` in place. Uses `base.learning_rate`, `base.batch_size`,
/// and `base.seed`; epoch counts come from the schedule (`base.epochs` and
/// `base.epoch_offset` are ignored).
pub fn progressive_adversarial_train(
    model: &mut Model,
    dataset: &Dataset,
    schedule: &TrainingSchedule,
    attack_params: &AttackParams,
    base: &TrainOptions,
) -> Result<Vec<RoundReport>> {
    schedule.validate()?;
    attack_params.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::input("training split is empty"));
    }

    let n = dataset.train.len();
    let fraction = schedule.adversarial_fraction;
    let pool_target = if fraction >= 1.0 {
        n
    } else {
        (fraction / (1.0 - fraction) * n as f64).round() as usize
    };

    let mut pool: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut reports = Vec::with_capacity(schedule.rounds);

    for round in 0..schedule.rounds {
        let refreshed = pool_target > 0 && round % schedule.refresh_period == 0;
        if refreshed {
            pool = generate_pool(
                model,
                &dataset.train,
                pool_target,
                &schedule.method_mix,
                attack_params,
                seed::derive(base.seed, &[0xAD5, round as u64]),
            )?;
        }

        // Assemble the round's training set: clean ∪ pool (pool only when
        // the schedule is fully adversarial).
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(n + pool.len());
        let mut targets: Vec<Target> = Vec::with_capacity(n + pool.len());
        if fraction < 1.0 {
            for ex in &dataset.train {
                inputs.push(ex.x.clone());
                targets.push(Target::Class(ex.y));
            }
        }
        for (x, y) in &pool {
            inputs.push(x.clone());
            targets.push(Target::Class(*y));
        }

        let opts = TrainOptions {
            epochs: schedule.epochs_per_round,
            learning_rate: base.learning_rate,
            batch_size: base.batch_size,
            seed: base.seed,
            epoch_offset: round * schedule.epochs_per_round,
        };
        model.train_targets(&inputs, &targets, &opts)?;

        let clean_loss = mean_loss(model, dataset.train.iter().map(|ex| (ex.x.as_slice(), ex.y)))?;
        let (adversarial_loss, attack_success_rate) = if pool.is_empty() {
            (None, None)
        } else {
            let loss = mean_loss(model, pool.iter().map(|(x, y)| (x.as_slice(), *y)))?;
            let mut misses = 0usize;
            for (x, y) in &pool {
                if model.predict_class(x)? != *y {
                    misses += 1;
                }
            }
            (Some(loss), Some(misses as f64 / pool.len() as f64))
        };
        reports.push(RoundReport {
            round,
            clean_loss,
            adversarial_loss,
            attack_success_rate,
            pool_size: pool.len(),
            refreshed,
        });
    }
    Ok(reports)
}

fn mean_loss<'a>(
    model: &Model,
    examples: impl Iterator<Item = (&'a [f64], usize)>,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, y) in examples {
        sum += model.loss(x, y)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::input("loss over an empty set"));
    }
    Ok(sum / count as f64)
}

/// Build an adversarial pool of `target` examples against the current model.
/// Source points cycle through a seeded shuffle of the clean set; each keeps
/// its true label.
fn generate_pool(
    model: &Model,
    clean: &[LabeledExample],
    target: usize,
    mix: &MethodMix,
    params: &AttackParams,
    pool_seed: u64,
) -> Result<Vec<(Vec<f64>, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(pool_seed);
    let mut order: Vec<usize> = (0..clean.len()).collect();
    order.shuffle(&mut rng);
    let mut pool = Vec::with_capacity(target);
    for i in 0..target {
        let src = &clean[order[i % order.len()]];
        let method = mix.pick(rng.random::<f64>());
        let x_adv = match method {
            Method::Fgsm => fgsm(model, &src.x, src.y, params.epsilon)?,
            Method::Pgd => pgd(model, &src.x, src.y, params)?,
            Method::Deepfool => {
                deepfool(model, &src.x, src.y, params.iterations.max(10), params.overshoot)?.x_adv
            }
        };
        pool.push((x_adv, src.y));
    }
    Ok(pool)
}

/// Outcome of one self-evaluation pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub attack_success_rate: f64,
    pub fgsm_success_rate: f64,
    pub pgd_success_rate: f64,
    /// Fraction of the clean holdout flagged by the current threshold.
    pub false_positive_rate: f64,
    pub tau_before: f64,
    pub tau_after: f64,
    pub adjusted: bool,
}

/// Simulate FGSM and PGD batteries against the model, measure the detector's
/// false-positive rate on the clean holdout, and lower τ (multiplicative
/// decrement) when the attack success rate exceeds tolerance. Successful
/// adversarial examples come back labeled for pool augmentation.
#[allow(clippy::too_many_arguments)]
pub fn periodic_evaluation(
    model: &Model,
    weights: &UncertaintyWeights,
    holdout: &[LabeledExample],
    tolerance: f64,
    simulation_budget: usize,
    attack_params: &AttackParams,
    tau_decrement: f64,
    mc_samples: usize,
    seed_value: u64,
) -> Result<(UncertaintyWeights, Vec<LabeledExample>, EvaluationReport)> {
    weights.validate()?;
    attack_params.validate()?;
    if !(tolerance > 0.0 && tolerance < 1.0) {
        return Err(Error::input("tolerance must lie in (0,1)"));
    }
    if !(tau_decrement > 0.0 && tau_decrement < 1.0) {
        return Err(Error::input("tau decrement must lie in (0,1)"));
    }
    if holdout.is_empty() {
        return Err(Error::input("holdout split is empty"));
    }
    if simulation_budget == 0 {
        return Err(Error::input("simulation budget must be ≥ 1"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, &[0xE7A1]));
    let mut order: Vec<usize> = (0..holdout.len()).collect();
    order.shuffle(&mut rng);

    let mut successes = Vec::new();
    let (mut fgsm_hits, mut fgsm_tries) = (0usize, 0usize);
    let (mut pgd_hits, mut pgd_tries) = (0usize, 0usize);
    for i in 0..simulation_budget {
        let ex = &holdout[order[i % order.len()]];
        let before = model.predict_class(&ex.x)?;
        let use_fgsm = i % 2 == 0;
        let x_adv = if use_fgsm {
            fgsm_tries += 1;
            fgsm(model, &ex.x, ex.y, attack_params.epsilon)?
        } else {
            pgd_tries += 1;
            pgd(model, &ex.x, ex.y, attack_params)?
        };
        let flipped = model.predict_class(&x_adv)? != before;
        if flipped {
            if use_fgsm {
                fgsm_hits += 1;
            } else {
                pgd_hits += 1;
            }
            successes.push(LabeledExample { x: x_adv, y: ex.y });
        }
    }
    let success_rate = (fgsm_hits + pgd_hits) as f64 / simulation_budget as f64;

    let mut flagged = 0usize;
    for (i, ex) in holdout.iter().enumerate() {
        let breakdown = score_query(
            model,
            &ex.x,
            weights,
            mc_samples,
            seed::derive(seed_value, &[0xF9, i as u64]),
        )?;
        if breakdown.u > weights.tau {
            flagged += 1;
        }
    }
    let false_positive_rate = flagged as f64 / holdout.len() as f64;

    let adjusted = success_rate > tolerance;
    let mut adjusted_weights = weights.clone();
    if adjusted {
        adjusted_weights.tau *= tau_decrement;
    }
    let report = EvaluationReport {
        attack_success_rate: success_rate,
        fgsm_success_rate: if fgsm_tries > 0 {
            fgsm_hits as f64 / fgsm_tries as f64
        } else {
            0.0
        },
        pgd_success_rate: if pgd_tries > 0 {
            pgd_hits as f64 / pgd_tries as f64
        } else {
            0.0
        },
        false_positive_rate,
        tau_before: weights.tau,
        tau_after: adjusted_weights.tau,
        adjusted,
    };
    Ok((adjusted_weights, successes, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversarial::AttackNorm;
    use crate::model::data::{gaussian_blobs, BlobSpec};

    fn small_dataset(seed_value: u64) -> Dataset {
        gaussian_blobs(&BlobSpec {
            dim: 6,
            classes: 3,
            n_train: 300,
            n_validation: 90,
            n_test: 150,
            noise_std: 0.05,
            seed: seed_value,
        })
        .unwrap()
    }

    fn default_params() -> AttackParams {
        AttackParams {
            epsilon: 0.1,
            step_size: 0.05,
            iterations: 5,
            overshoot: 0.02,
            norm: AttackNorm::LInf,
        }
    }

    #[test]
    fn zero_fraction_replays_plain_training() {
        let dataset = small_dataset(1);
        let base = TrainOptions::new(0, 0.3, 32, 77);

        let mut plain = Model::new(&[6, 12, 3], 0.0, 5).unwrap();
        plain
            .train(&dataset.train, &TrainOptions::new(6, 0.3, 32, 77))
            .unwrap();

        let mut progressive = Model::new(&[6, 12, 3], 0.0, 5).unwrap();
        let schedule = TrainingSchedule {
            rounds: 3,
            epochs_per_round: 2,
            adversarial_fraction: 0.0,
            method_mix: MethodMix::default(),
            refresh_period: 1,
        };
        let reports = progressive_adversarial_train(
            &mut progressive,
            &dataset,
            &schedule,
            &default_params(),
            &base,
        )
        .unwrap();

        assert_eq!(plain.flat_params(), progressive.flat_params());
        assert!(reports.iter().all(|r| r.pool_size == 0));
        assert!(reports.iter().all(|r| r.adversarial_loss.is_none()));
    }

    #[test]
    fn hardening_is_deterministic() {
        let dataset = small_dataset(2);
        let schedule = TrainingSchedule {
            rounds: 2,
            epochs_per_round: 3,
            adversarial_fraction: 0.5,
            method_mix: MethodMix::default(),
            refresh_period: 1,
        };
        let run = || {
            let mut model = Model::new(&[6, 12, 3], 0.0, 9).unwrap();
            progressive_adversarial_train(
                &mut model,
                &dataset,
                &schedule,
                &default_params(),
                &TrainOptions::new(0, 0.3, 32, 13),
            )
            .unwrap();
            model.flat_params()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn hardening_reduces_fgsm_flip_rate() {
        let dataset = small_dataset(3);

        let mut standard = Model::new(&[6, 16, 3], 0.0, 4).unwrap();
        standard
            .train(&dataset.train, &TrainOptions::new(40, 0.3, 32, 21))
            .unwrap();

        let mut hardened = Model::new(&[6, 16, 3], 0.0, 4).unwrap();
        let schedule = TrainingSchedule {
            rounds: 8,
            epochs_per_round: 5,
            adversarial_fraction: 0.5,
            method_mix: MethodMix {
                fgsm: 0.5,
                pgd: 0.5,
                deepfool: 0.0,
            },
            refresh_period: 1,
        };
        progressive_adversarial_train(
            &mut hardened,
            &dataset,
            &schedule,
            &default_params(),
            &TrainOptions::new(0, 0.3, 32, 21),
        )
        .unwrap();

        let flip_rate = |model: &Model| {
            let mut flips = 0usize;
            for ex in &dataset.test {
                let before = model.predict_class(&ex.x).unwrap();
                let x_adv = fgsm(model, &ex.x, ex.y, 0.1).unwrap();
                if model.predict_class(&x_adv).unwrap() != before {
                    flips += 1;
                }
            }
            flips as f64 / dataset.test.len() as f64
        };
        let standard_rate = flip_rate(&standard);
        let hardened_rate = flip_rate(&hardened);
        assert!(
            standard_rate - hardened_rate >= 0.10,
            "flip rates: standard {standard_rate:.3}, hardened {hardened_rate:.3}"
        );
    }

    #[test]
    fn schedule_validation() {
        let mut s = TrainingSchedule {
            rounds: 1,
            epochs_per_round: 1,
            adversarial_fraction: 0.5,
            method_mix: MethodMix::default(),
            refresh_period: 1,
        };
        assert!(s.validate().is_ok());
        s.adversarial_fraction = 1.5;
        assert!(s.validate().is_err());
        s.adversarial_fraction = 0.5;
        s.method_mix.fgsm = 0.9;
        assert!(s.validate().is_err());
        s.method_mix = MethodMix::default();
        s.rounds = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn empty_dataset_is_an_input_error() {
        let dataset = Dataset {
            train: vec![],
            validation: vec![],
            test: vec![],
            dim: 2,
            classes: 2,
        };
        let mut model = Model::zeroed(&[2, 2], 0.0).unwrap();
        let schedule = TrainingSchedule {
            rounds: 1,
            epochs_per_round: 1,
            adversarial_fraction: 0.0,
            method_mix: MethodMix::default(),
            refresh_period: 1,
        };
        let err = progressive_adversarial_train(
            &mut model,
            &dataset,
            &schedule,
            &default_params(),
            &TrainOptions::new(0, 0.1, 8, 0),
        );
        assert!(matches!(err, Err(Error::Input(_))));
    }

    fn trained_for_eval() -> (Model, Dataset) {
        let dataset = small_dataset(4);
        let mut model = Model::new(&[6, 12, 3], 0.0, 6).unwrap();
        model
            .train(&dataset.train, &TrainOptions::new(30, 0.3, 32, 17))
            .unwrap();
        (model, dataset)
    }

    #[test]
    fn evaluation_leaves_tau_alone_under_tolerance() {
        let (model, dataset) = trained_for_eval();
        let weights = UncertaintyWeights::uniform(0.6);
        // Tolerance so generous the battery cannot exceed it.
        let (adjusted, _, report) = periodic_evaluation(
            &model,
            &weights,
            &dataset.validation,
            0.999,
            64,
            &default_params(),
            DEFAULT_TAU_DECREMENT,
            0,
            3,
        )
        .unwrap();
        assert!(!report.adjusted);
        assert_eq!(adjusted.tau, weights.tau);
        assert_eq!(report.tau_before, report.tau_after);
    }

    #[test]
    fn evaluation_lowers_tau_over_tolerance() {
        let (model, dataset) = trained_for_eval();
        let weights = UncertaintyWeights::uniform(0.6);
        // Tolerance below any plausible success rate; use a large epsilon so
        // the battery definitely flips some predictions.
        let params = AttackParams {
            epsilon: 0.4,
            step_size: 0.1,
            iterations: 8,
            overshoot: 0.02,
            norm: AttackNorm::LInf,
        };
        let (adjusted, pool, report) = periodic_evaluation(
            &model,
            &weights,
            &dataset.validation,
            0.01,
            128,
            &params,
            DEFAULT_TAU_DECREMENT,
            0,
            3,
        )
        .unwrap();
        assert!(report.attack_success_rate > 0.01);
        assert!(report.adjusted);
        assert!(adjusted.tau < weights.tau);
        assert!((adjusted.tau - weights.tau * 0.95).abs() < 1e-12);
        // Successful examples keep their source labels and stay in the box.
        assert!(!pool.is_empty());
        for ex in &pool {
            assert!(ex.x.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(ex.y < 3);
        }
    }

    #[test]
    fn evaluation_false_positive_rate_matches_recount() {
        let (model, dataset) = trained_for_eval();
        let weights = UncertaintyWeights::uniform(0.2);
        let (_, _, report) = periodic_evaluation(
            &model,
            &weights,
            &dataset.validation,
            0.5,
            32,
            &default_params(),
            DEFAULT_TAU_DECREMENT,
            0,
            91,
        )
        .unwrap();
        // Naive recount with the same component definitions.
        let mut flagged = 0usize;
        for (i, ex) in dataset.validation.iter().enumerate() {
            let b = score_query(&model, &ex.x, &weights, 0, seed::derive(91, &[0xF9, i as u64]))
                .unwrap();
            if b.u > weights.tau {
                flagged += 1;
            }
        }
        let expected = flagged as f64 / dataset.validation.len() as f64;
        assert_eq!(report.false_positive_rate, expected);
    }

    #[test]
    fn evaluation_validates_tolerance() {
        let (model, dataset) = trained_for_eval();
        let weights = UncertaintyWeights::uniform(0.5);
        for bad in [0.0, 1.0, -0.5] {
            assert!(periodic_evaluation(
                &model,
                &weights,
                &dataset.validation,
                bad,
                8,
                &default_params(),
                DEFAULT_TAU_DECREMENT,
                0,
                1,
            )
            .is_err());
        }
    }
}
