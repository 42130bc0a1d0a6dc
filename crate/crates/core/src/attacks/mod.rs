//! Extraction-attack simulators: adversarial clients that query a victim
//! oracle and train a substitute from its answers, plus the metrics (test
//! accuracy, fidelity) that quantify how much of the victim leaked.
//!
//! Three strategies are implemented. jbda_tr grows its training set by
//! perturbing current samples toward random target classes with targeted
//! FGSM against the substitute. knockoffnet labels an unrelated surrogate
//! pool. cloudleak asks about points pushed onto the substitute's decision
//! boundary and fine-tunes a pretrained substitute on the answers.
//!
//! Every oracle call counts against the budget, seed labeling included, and
//! no attack issues a query past `total_queries`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{deepfool, targeted_fgsm};
use crate::error::{Error, Result};
use crate::model::data::LabeledExample;
use crate::model::{Model, Target, TrainOptions};
use crate::response::{ResponseMode, ResponsePayload};

const SUBSTITUTE_LEARNING_RATE: f64 = 0.3;
const SUBSTITUTE_BATCH_SIZE: usize = 32;
const CLOUDLEAK_FINETUNE_EPOCHS: usize = 20;
const CLOUDLEAK_DEEPFOOL_ITERATIONS: usize = 20;
const CLOUDLEAK_DEEPFOOL_OVERSHOOT: f64 = 0.02;

/// Where the attacker sends queries. Implementations must count every call
/// exactly once.
pub trait VictimOracle {
    fn query(&mut self, x: &[f64]) -> Result<ResponsePayload>;
    fn mode(&self) -> ResponseMode;
    fn queries_used(&self) -> u64;
}

/// Oracle over an in-process model, answering in the declared mode.
pub struct LocalOracle {
    model: Model,
    mode: ResponseMode,
    counter: u64,
}

impl LocalOracle {
    pub fn new(model: Model, mode: ResponseMode) -> Self {
        LocalOracle {
            model,
            mode,
            counter: 0,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }
}

impl VictimOracle for LocalOracle {
    fn query(&mut self, x: &[f64]) -> Result<ResponsePayload> {
        self.counter += 1;
        let probs = self.model.forward(x)?;
        Ok(match self.mode {
            ResponseMode::SoftLabel => ResponsePayload::Soft(probs),
            ResponseMode::HardLabel => ResponsePayload::Hard(crate::model::argmax(&probs)),
        })
    }

    fn mode(&self) -> ResponseMode {
        self.mode
    }

    fn queries_used(&self) -> u64 {
        self.counter
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackBudget {
    /// Number of seed inputs labeled before any augmentation.
    pub seed_samples: usize,
    /// Hard cap on oracle calls across the whole attack.
    pub total_queries: usize,
    pub rounds: usize,
    pub epochs_per_round: usize,
}

impl Default for AttackBudget {
    fn default() -> Self {
        AttackBudget {
            seed_samples: 100,
            total_queries: 10_000,
            rounds: 6,
            epochs_per_round: 20,
        }
    }
}

impl AttackBudget {
    pub fn validate(&self) -> Result<()> {
        if self.total_queries < self.seed_samples {
            return Err(Error::input("total_queries must cover the seed samples"));
        }
        if self.rounds == 0 {
            return Err(Error::input("rounds must be ≥ 1"));
        }
        Ok(())
    }
}

/// Attack result: the substitute plus the bookkeeping an analysis needs.
#[derive(Debug, Clone)]
pub struct ExtractionOutcome {
    pub substitute: Model,
    pub queries_used: u64,
    /// True when the query budget ran out before the attack's schedule
    /// completed.
    pub truncated: bool,
    pub training_set_size: usize,
    /// Every input that was sent to the oracle, in order.
    pub labeled_queries: Vec<Vec<f64>>,
}

fn payload_target(payload: ResponsePayload) -> Target {
    match payload {
        ResponsePayload::Soft(p) => Target::Soft(p),
        ResponsePayload::Hard(c) => Target::Class(c),
    }
}

/// Label `xs` through the oracle until the budget stops us. Returns the
/// labeled pairs and whether labeling was cut short.
fn label_batch<O: VictimOracle + ?Sized>(
    oracle: &mut O,
    budget: &AttackBudget,
    xs: &[Vec<f64>],
    inputs: &mut Vec<Vec<f64>>,
    targets: &mut Vec<Target>,
    log: &mut Vec<Vec<f64>>,
) -> Result<bool> {
    for x in xs {
        if oracle.queries_used() >= budget.total_queries as u64 {
            return Ok(true);
        }
        let payload = oracle.query(x)?;
        inputs.push(x.clone());
        targets.push(payload_target(payload));
        log.push(x.clone());
    }
    Ok(false)
}

/// Jacobian-based dataset augmentation with targeted random classes: per
/// round, train the substitute on everything labeled so far, then push each
/// sample toward a random class with targeted FGSM against the substitute
/// and label the results. The set doubles every full round. Budget
/// exhaustion stops the attack with `truncated` set.
pub fn jbda_tr<O: VictimOracle + ?Sized>(
    oracle: &mut O,
    seed_set: &[Vec<f64>],
    budget: &AttackBudget,
    epsilon_aug: f64,
    substitute_init: &Model,
    rng_seed: u64,
) -> Result<ExtractionOutcome> {
    budget.validate()?;
    if seed_set.len() < budget.seed_samples || budget.seed_samples == 0 {
        return Err(Error::input(format!(
            "seed set holds {} inputs, budget wants {}",
            seed_set.len(),
            budget.seed_samples
        )));
    }
    if !(epsilon_aug.is_finite() && epsilon_aug > 0.0) {
        return Err(Error::input("epsilon_aug must be positive"));
    }

    let mut substitute = substitute_init.clone();
    let classes = substitute.class_count();
    let mut inputs: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<Target> = Vec::new();
    let mut log: Vec<Vec<f64>> = Vec::new();
    let mut truncated = label_batch(
        oracle,
        budget,
        &seed_set[..budget.seed_samples],
        &mut inputs,
        &mut targets,
        &mut log,
    )?;

    let mut class_rng =
        ChaCha8Rng::seed_from_u64(crate::seed::derive_labeled(rng_seed, "jbda-targets", &[]));
    let mut rounds_done = 0;
    while rounds_done < budget.rounds && !truncated {
        let mut opts = TrainOptions::new(
            budget.epochs_per_round,
            SUBSTITUTE_LEARNING_RATE,
            SUBSTITUTE_BATCH_SIZE,
            rng_seed,
        );
        opts.epoch_offset = rounds_done * budget.epochs_per_round;
        substitute.train_targets(&inputs, &targets, &opts)?;
        rounds_done += 1;

        let mut synthetic: Vec<Vec<f64>> = Vec::with_capacity(inputs.len());
        for x in &inputs {
            let target_class = class_rng.random_range(0..classes);
            synthetic.push(targeted_fgsm(&substitute, x, target_class, epsilon_aug)?);
        }
        truncated = label_batch(oracle, budget, &synthetic, &mut inputs, &mut targets, &mut log)?;
    }

    Ok(ExtractionOutcome {
        substitute,
        queries_used: oracle.queries_used(),
        truncated,
        training_set_size: inputs.len(),
        labeled_queries: log,
    })
}

/// Label a budget's worth of surrogate inputs and train the substitute on
/// the answers. Samples without replacement when the pool is large enough,
/// with replacement otherwise.
pub fn knockoffnet<O: VictimOracle + ?Sized>(
    oracle: &mut O,
    surrogate_data: &[Vec<f64>],
    budget: &AttackBudget,
    substitute_init: &Model,
    epochs: usize,
    rng_seed: u64,
) -> Result<ExtractionOutcome> {
    if surrogate_data.is_empty() {
        return Err(Error::input("surrogate pool is empty"));
    }
    if budget.rounds == 0 {
        return Err(Error::input("rounds must be ≥ 1"));
    }

    let mut substitute = substitute_init.clone();
    let mut rng =
        ChaCha8Rng::seed_from_u64(crate::seed::derive_labeled(rng_seed, "knockoff-pool", &[]));
    let wanted = budget.total_queries;
    let picks: Vec<Vec<f64>> = if wanted <= surrogate_data.len() {
        let mut pool: Vec<usize> = (0..surrogate_data.len()).collect();
        pool.shuffle(&mut rng);
        pool[..wanted]
            .iter()
            .map(|&i| surrogate_data[i].clone())
            .collect()
    } else {
        (0..wanted)
            .map(|_| surrogate_data[rng.random_range(0..surrogate_data.len())].clone())
            .collect()
    };

    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut log = Vec::new();
    let truncated = label_batch(oracle, budget, &picks, &mut inputs, &mut targets, &mut log)?;

    if !inputs.is_empty() && epochs > 0 {
        let opts = TrainOptions::new(epochs, SUBSTITUTE_LEARNING_RATE, SUBSTITUTE_BATCH_SIZE, rng_seed);
        substitute.train_targets(&inputs, &targets, &opts)?;
    }

    Ok(ExtractionOutcome {
        substitute,
        queries_used: oracle.queries_used(),
        truncated,
        training_set_size: inputs.len(),
        labeled_queries: log,
    })
}

/// Feature-based boundary attack: push each seed onto the pretrained
/// substitute's decision boundary with deepfool, label those points through
/// the oracle, and fine-tune the substitute on the answers.
pub fn cloudleak<O: VictimOracle + ?Sized>(
    oracle: &mut O,
    seed_set: &[Vec<f64>],
    budget: &AttackBudget,
    pretrained_substitute: &Model,
    rng_seed: u64,
) -> Result<ExtractionOutcome> {
    if seed_set.is_empty() {
        return Err(Error::input("seed set is empty"));
    }

    let mut substitute = pretrained_substitute.clone();
    let mut boundary_points: Vec<Vec<f64>> = Vec::with_capacity(seed_set.len());
    for x in seed_set {
        let predicted = substitute.predict_class(x)?;
        let outcome = deepfool(
            &substitute,
            x,
            predicted,
            CLOUDLEAK_DEEPFOOL_ITERATIONS,
            CLOUDLEAK_DEEPFOOL_OVERSHOOT,
        )?;
        boundary_points.push(outcome.x_adv);
    }

    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut log = Vec::new();
    let truncated = label_batch(
        oracle,
        budget,
        &boundary_points,
        &mut inputs,
        &mut targets,
        &mut log,
    )?;

    if !inputs.is_empty() {
        let opts = TrainOptions::new(
            CLOUDLEAK_FINETUNE_EPOCHS,
            SUBSTITUTE_LEARNING_RATE,
            SUBSTITUTE_BATCH_SIZE,
            rng_seed,
        );
        substitute.train_targets(&inputs, &targets, &opts)?;
    }

    Ok(ExtractionOutcome {
        substitute,
        queries_used: oracle.queries_used(),
        truncated,
        training_set_size: inputs.len(),
        labeled_queries: log,
    })
}

/// Fraction of probes where victim and substitute agree by argmax.
pub fn fidelity(victim: &Model, substitute: &Model, probe_set: &[Vec<f64>]) -> Result<f64> {
    if probe_set.is_empty() {
        return Err(Error::input("fidelity needs at least one probe"));
    }
    if victim.input_dim() != substitute.input_dim()
        || victim.class_count() != substitute.class_count()
    {
        return Err(Error::input(
            "victim and substitute must share input dim and class count",
        ));
    }
    let mut agree = 0usize;
    for x in probe_set {
        if victim.predict_class(x)? == substitute.predict_class(x)? {
            agree += 1;
        }
    }
    Ok(agree as f64 / probe_set.len() as f64)
}

/// Fraction correct by argmax on a held-out split.
pub fn test_accuracy(model: &Model, test_split: &[LabeledExample]) -> Result<f64> {
    model.accuracy(test_split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::data::{gaussian_blobs, BlobSpec, Dataset};

    fn bench_spec(seed_value: u64) -> BlobSpec {
        BlobSpec {
            dim: 6,
            classes: 3,
            n_train: 300,
            n_validation: 90,
            n_test: 150,
            noise_std: 0.05,
            seed: seed_value,
        }
    }

    fn small_dataset(seed_value: u64) -> Dataset {
        gaussian_blobs(&bench_spec(seed_value)).unwrap()
    }

    fn trained_model(dataset: &Dataset, seed_value: u64) -> Model {
        let mut model = Model::new(&[6, 12, 3], 0.0, seed_value).unwrap();
        model
            .train(&dataset.train, &TrainOptions::new(8, 0.3, 32, seed_value))
            .unwrap();
        model
    }

    fn seeds_from(dataset: &Dataset, n: usize) -> Vec<Vec<f64>> {
        dataset.train.iter().take(n).map(|ex| ex.x.clone()).collect()
    }

    #[test]
    fn local_oracle_counts_every_query() {
        let dataset = small_dataset(1);
        let victim = trained_model(&dataset, 11);
        let mut oracle = LocalOracle::new(victim, ResponseMode::SoftLabel);
        assert_eq!(oracle.queries_used(), 0);
        for i in 0..5 {
            oracle.query(&dataset.test[i].x).unwrap();
        }
        assert_eq!(oracle.queries_used(), 5);
    }

    #[test]
    fn budget_validation() {
        let mut budget = AttackBudget::default();
        assert!(budget.validate().is_ok());
        budget.total_queries = budget.seed_samples - 1;
        assert!(budget.validate().is_err());
        budget = AttackBudget::default();
        budget.rounds = 0;
        assert!(budget.validate().is_err());
    }

    #[test]
    fn jbda_accumulation_doubles_per_full_round() {
        let dataset = small_dataset(2);
        let victim = trained_model(&dataset, 13);
        let mut oracle = LocalOracle::new(victim, ResponseMode::SoftLabel);
        let init = Model::new(&[6, 12, 3], 0.0, 99).unwrap();
        // 4 seeds, 3 rounds: labels 4 + 4 + 8 + 16 = 32 queries, final set
        // 4 * 2^3 = 32.
        let budget = AttackBudget {
            seed_samples: 4,
            total_queries: 32,
            rounds: 3,
            epochs_per_round: 2,
        };
        let outcome = jbda_tr(&mut oracle, &seeds_from(&dataset, 4), &budget, 0.1, &init, 7)
            .unwrap();
        assert_eq!(outcome.training_set_size, 32);
        assert_eq!(outcome.queries_used, 32);
        assert!(!outcome.truncated);
        assert_eq!(outcome.labeled_queries.len(), 32);
    }

    #[test]
    fn jbda_never_exceeds_budget_and_flags_truncation() {
        let dataset = small_dataset(3);
        let victim = trained_model(&dataset, 15);
        let mut oracle = LocalOracle::new(victim, ResponseMode::SoftLabel);
        let init = Model::new(&[6, 12, 3], 0.0, 98).unwrap();
        let budget = AttackBudget {
            seed_samples: 8,
            total_queries: 20,
            rounds: 3,
            epochs_per_round: 2,
        };
        let outcome = jbda_tr(&mut oracle, &seeds_from(&dataset, 8), &budget, 0.1, &init, 7)
            .unwrap();
        assert!(outcome.truncated);
        assert_eq!(outcome.queries_used, 20);
        assert_eq!(oracle.queries_used(), 20);
        assert_eq!(outcome.training_set_size, 20);
    }

    #[test]
    fn jbda_with_seed_only_budget_is_one_training_round() {
        let dataset = small_dataset(4);
        let victim = trained_model(&dataset, 17);
        let seeds = seeds_from(&dataset, 6);
        let init = Model::new(&[6, 12, 3], 0.0, 97).unwrap();
        let budget = AttackBudget {
            seed_samples: 6,
            total_queries: 6,
            rounds: 4,
            epochs_per_round: 3,
        };

        let mut oracle = LocalOracle::new(victim.clone(), ResponseMode::SoftLabel);
        let outcome = jbda_tr(&mut oracle, &seeds, &budget, 0.1, &init, 7).unwrap();
        assert!(outcome.truncated);

        // Manual replication: label the seeds, train once, stop.
        let mut manual = init.clone();
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for x in &seeds {
            inputs.push(x.clone());
            targets.push(Target::Soft(victim.forward(x).unwrap()));
        }
        manual
            .train_targets(&inputs, &targets, &TrainOptions::new(3, 0.3, 32, 7))
            .unwrap();
        assert_eq!(outcome.substitute.flat_params(), manual.flat_params());
    }

    #[test]
    fn jbda_is_deterministic_in_its_seed() {
        let dataset = small_dataset(5);
        let victim = trained_model(&dataset, 19);
        let init = Model::new(&[6, 12, 3], 0.0, 96).unwrap();
        let budget = AttackBudget {
            seed_samples: 4,
            total_queries: 16,
            rounds: 2,
            epochs_per_round: 2,
        };
        let run = |rng_seed: u64| {
            let mut oracle = LocalOracle::new(victim.clone(), ResponseMode::SoftLabel);
            jbda_tr(
                &mut oracle,
                &seeds_from(&dataset, 4),
                &budget,
                0.1,
                &init,
                rng_seed,
            )
            .unwrap()
            .substitute
            .flat_params()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn knockoff_budget_zero_returns_initialization() {
        let dataset = small_dataset(6);
        let victim = trained_model(&dataset, 21);
        let mut oracle = LocalOracle::new(victim, ResponseMode::SoftLabel);
        let init = Model::new(&[6, 12, 3], 0.0, 95).unwrap();
        let budget = AttackBudget {
            seed_samples: 0,
            total_queries: 0,
            rounds: 1,
            epochs_per_round: 1,
        };
        let surrogate = seeds_from(&dataset, 50);
        let outcome = knockoffnet(&mut oracle, &surrogate, &budget, &init, 50, 7).unwrap();
        assert_eq!(outcome.substitute.flat_params(), init.flat_params());
        assert_eq!(outcome.queries_used, 0);
        assert_eq!(outcome.training_set_size, 0);
    }

    #[test]
    fn knockoff_rejects_empty_surrogate_pool() {
        let dataset = small_dataset(7);
        let victim = trained_model(&dataset, 23);
        let mut oracle = LocalOracle::new(victim, ResponseMode::SoftLabel);
        let init = Model::new(&[6, 12, 3], 0.0, 94).unwrap();
        assert!(knockoffnet(&mut oracle, &[], &AttackBudget::default(), &init, 50, 7).is_err());
    }

    #[test]
    fn knockoff_on_victim_training_inputs_nears_victim_accuracy() {
        let dataset = small_dataset(8);
        let victim = trained_model(&dataset, 25);
        let victim_acc = victim.accuracy(&dataset.test).unwrap();
        let surrogate: Vec<Vec<f64>> = dataset.train.iter().map(|ex| ex.x.clone()).collect();
        let mut oracle = LocalOracle::new(victim.clone(), ResponseMode::SoftLabel);
        let init = Model::new(&[6, 12, 3], 0.0, 93).unwrap();
        let budget = AttackBudget {
            seed_samples: 0,
            total_queries: surrogate.len(),
            rounds: 1,
            epochs_per_round: 50,
        };
        let outcome = knockoffnet(&mut oracle, &surrogate, &budget, &init, 50, 7).unwrap();
        let substitute_acc = outcome.substitute.accuracy(&dataset.test).unwrap();
        assert!(
            victim_acc - substitute_acc <= 0.05,
            "victim {victim_acc}, substitute {substitute_acc}"
        );
    }

    #[test]
    fn knockoff_sampling_is_deterministic_and_respects_budget() {
        let dataset = small_dataset(9);
        let victim = trained_model(&dataset, 27);
        let surrogate = seeds_from(&dataset, 30);
        let budget = AttackBudget {
            seed_samples: 0,
            total_queries: 80, // more than the pool: with-replacement path
            rounds: 1,
            epochs_per_round: 1,
        };
        let run = |rng_seed: u64| {
            let mut oracle = LocalOracle::new(victim.clone(), ResponseMode::HardLabel);
            let outcome =
                knockoffnet(&mut oracle, &surrogate, &budget, &trained_model(&dataset, 28), 5, rng_seed)
                    .unwrap();
            assert_eq!(outcome.queries_used, 80);
            outcome.substitute.flat_params()
        };
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn cloudleak_budget_zero_leaves_substitute_unchanged() {
        let dataset = small_dataset(10);
        let victim = trained_model(&dataset, 29);
        let mut oracle = LocalOracle::new(victim, ResponseMode::SoftLabel);
        let pretrained = trained_model(&small_dataset(55), 56);
        let budget = AttackBudget {
            seed_samples: 0,
            total_queries: 0,
            rounds: 1,
            epochs_per_round: 1,
        };
        let outcome = cloudleak(
            &mut oracle,
            &seeds_from(&dataset, 10),
            &budget,
            &pretrained,
            7,
        )
        .unwrap();
        assert_eq!(outcome.substitute.flat_params(), pretrained.flat_params());
        assert_eq!(outcome.queries_used, 0);
        assert!(outcome.truncated);
    }

    #[test]
    fn cloudleak_queries_sit_near_the_substitute_boundary() {
        let dataset = small_dataset(11);
        let victim = trained_model(&dataset, 31);
        let mut oracle = LocalOracle::new(victim, ResponseMode::SoftLabel);
        let pretrained = trained_model(&small_dataset(57), 58);
        let seeds = seeds_from(&dataset, 40);
        let budget = AttackBudget {
            seed_samples: 0,
            total_queries: 40,
            rounds: 1,
            epochs_per_round: 1,
        };
        let outcome = cloudleak(&mut oracle, &seeds, &budget, &pretrained, 7).unwrap();
        assert_eq!(outcome.labeled_queries.len(), 40);

        // Margin of the pretrained substitute: top-1 minus top-2 probability.
        let margin = |x: &[f64]| {
            let mut p = pretrained.forward(x).unwrap();
            p.sort_by(|a, b| b.partial_cmp(a).unwrap());
            p[0] - p[1]
        };
        let median = |mut v: Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        let boundary_median = median(outcome.labeled_queries.iter().map(|q| margin(q)).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let random_median = median(
            (0..200)
                .map(|_| {
                    let x: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
                    margin(&x)
                })
                .collect(),
        );
        assert!(
            boundary_median < random_median,
            "boundary {boundary_median} vs random {random_median}"
        );
    }

    #[test]
    fn fidelity_of_model_with_itself_is_one() {
        let dataset = small_dataset(12);
        let victim = trained_model(&dataset, 37);
        let probes: Vec<Vec<f64>> = dataset.test.iter().map(|ex| ex.x.clone()).collect();
        assert_eq!(fidelity(&victim, &victim, &probes).unwrap(), 1.0);
        assert!(fidelity(&victim, &victim, &[]).is_err());
    }

    #[test]
    fn fidelity_drops_when_the_class_head_is_permuted() {
        let dataset = small_dataset(13);
        let victim = trained_model(&dataset, 39);
        // Swap output rows 0 and 1 in the final layer: predictions for those
        // classes trade places. Layout is layer-major, weights then biases:
        // layer 1 occupies 12*6 + 12 = 84, the final 3x12 weights start at 84
        // and the 3 biases at 120.
        let mut params = victim.flat_params();
        for c in 0..12 {
            params.swap(84 + c, 96 + c);
        }
        params.swap(120, 121);
        let mut permuted = victim.clone();
        permuted.set_flat_params(&params).unwrap();

        let probes: Vec<Vec<f64>> = dataset.test.iter().map(|ex| ex.x.clone()).collect();
        let f = fidelity(&victim, &permuted, &probes).unwrap();
        // Agreement only where the victim predicts class 2: far below 1,
        // near the balanced one-third share.
        assert!(f < 0.6, "fidelity {f}");

        // Recount with an independent loop.
        let mut agree = 0;
        for x in &probes {
            if victim.predict_class(x).unwrap() == permuted.predict_class(x).unwrap() {
                agree += 1;
            }
        }
        assert_eq!(f, agree as f64 / probes.len() as f64);
    }

    #[test]
    fn test_accuracy_matches_recount_and_handles_edges() {
        let dataset = small_dataset(14);
        let model = trained_model(&dataset, 43);
        let acc = test_accuracy(&model, &dataset.test).unwrap();
        let mut hits = 0;
        for ex in &dataset.test {
            if model.predict_class(&ex.x).unwrap() == ex.y {
                hits += 1;
            }
        }
        assert_eq!(acc, hits as f64 / dataset.test.len() as f64);
        assert!(test_accuracy(&model, &[]).is_err());

        // A zeroed model answers uniform, argmax 0: perfect on an all-zero
        // class split.
        let constant = Model::zeroed(&[6, 12, 3], 0.0).unwrap();
        let zeros: Vec<LabeledExample> = dataset
            .test
            .iter()
            .map(|ex| LabeledExample::new(ex.x.clone(), 0, 3).unwrap())
            .collect();
        assert_eq!(test_accuracy(&constant, &zeros).unwrap(), 1.0);
    }

    #[test]
    fn soft_labels_extract_more_than_hard_labels_without_defense() {
        // The soft-label advantage needs two things at this scale: a victim
        // whose probabilities carry margin information (overlapping classes,
        // not a saturated one-hot oracle) and a query budget small enough
        // that both modes have not converged to the same substitute.
        // Averaged over attack seeds because a single run is a coin flip
        // between two nearby means.
        let spec = crate::model::data::BlobSpec {
            dim: 6,
            classes: 3,
            n_train: 300,
            n_validation: 90,
            n_test: 150,
            noise_std: 0.12,
            seed: 15,
        };
        let dataset = crate::model::data::gaussian_blobs(&spec).unwrap();
        let mut victim = Model::new(&[6, 12, 3], 0.0, 47).unwrap();
        victim
            .train(&dataset.train, &TrainOptions::new(8, 0.3, 32, 47))
            .unwrap();
        let mut pool_rng = ChaCha8Rng::seed_from_u64(61);
        let pool: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..6).map(|_| pool_rng.random::<f64>()).collect())
            .collect();
        let budget = AttackBudget {
            seed_samples: 0,
            total_queries: 60,
            rounds: 1,
            epochs_per_round: 50,
        };
        let run = |mode: ResponseMode| {
            let mut total = 0.0;
            for rng_seed in [7u64, 8, 9, 10, 11, 12, 13, 14] {
                let mut oracle = LocalOracle::new(victim.clone(), mode);
                let init = Model::new(&[6, 12, 3], 0.0, 92 + rng_seed).unwrap();
                let outcome = knockoffnet(&mut oracle, &pool, &budget, &init, 50, rng_seed).unwrap();
                total += outcome.substitute.accuracy(&dataset.test).unwrap();
            }
            total / 8.0
        };
        let soft = run(ResponseMode::SoftLabel);
        let hard = run(ResponseMode::HardLabel);
        assert!(soft > hard, "soft {soft} vs hard {hard}");
        assert!(hard > 0.9, "hard-label substitute should still be strong: {hard}");
    }
}
