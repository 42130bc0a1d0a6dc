//! Benchmark harness: builds matched victim pairs (standard and hardened),
//! calibrates detection profiles from attack probes, measures detector
//! quality, and runs the extraction grid with and without the gateway in
//! the loop. The CLI `evaluate` command and the acceptance suite both drive
//! these helpers.

use std::sync::Arc;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::adversarial::training::{progressive_adversarial_train, MethodMix, TrainingSchedule};
use crate::adversarial::{AttackNorm, AttackParams};
use crate::attacks::{
    cloudleak, jbda_tr, knockoffnet, AttackBudget, ExtractionOutcome, LocalOracle, VictimOracle,
};
use crate::detection::window::{BehaviorReference, Disposition};
use crate::detection::{calibrate, score_probs, CalibrationOutcome, UncertaintyBreakdown};
use crate::error::{Error, Result};
use crate::gateway::{DetectionProfile, Gateway, GatewayConfig, GatewayOracle, VirtualClock};
use crate::model::data::{gaussian_blobs, shifted_blobs, BlobSpec, Dataset};
use crate::model::{Model, TrainOptions};
use crate::response::{ResponseMode, TierConfig};
use crate::seed;

/// Synthetic benchmark scale. The default is the full desk-scale grid; unit
/// tests shrink it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub dim: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Hidden layer width of victims and substitutes.
    pub hidden: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            dim: 20,
            classes: 4,
            n_train: 4000,
            n_validation: 1000,
            n_test: 1000,
            noise_std: 0.05,
            seed: 1717,
            hidden: 32,
        }
    }
}

impl BenchmarkConfig {
    pub fn blob_spec(&self) -> BlobSpec {
        BlobSpec {
            dim: self.dim,
            classes: self.classes,
            n_train: self.n_train,
            n_validation: self.n_validation,
            n_test: self.n_test,
            noise_std: self.noise_std,
            seed: self.seed,
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        gaussian_blobs(&self.blob_spec())
    }

    /// Surrogate data from a related distribution: same feature space and
    /// geometry routine, different centers. Shuffled so prefix subsampling
    /// mixes the clusters.
    pub fn surrogate_pool(&self, tag: u64) -> Result<Vec<Vec<f64>>> {
        use rand::seq::SliceRandom;
        let shifted = shifted_blobs(&self.blob_spec(), tag)?;
        let mut pool: Vec<Vec<f64>> = shifted.train.into_iter().map(|ex| ex.x).collect();
        let mut rng =
            rand_chacha::ChaCha8Rng::seed_from_u64(seed::derive(tag, &[0x5_4FF1E]));
        pool.shuffle(&mut rng);
        Ok(pool)
    }

    /// A wider surrogate set built from three independent shifted draws, a
    /// dozen clusters in total. Boundary-probing attacks need this breadth:
    /// probes grown from a four-cluster pool can miss entire victim classes.
    pub fn diverse_surrogate_pool(&self, tag: u64) -> Result<Vec<Vec<f64>>> {
        use rand::seq::SliceRandom;
        let mut pool = Vec::with_capacity(3 * self.n_train);
        for i in 0..3u64 {
            let shifted = shifted_blobs(&self.blob_spec(), seed::derive(tag, &[i]))?;
            pool.extend(shifted.train.into_iter().map(|ex| ex.x));
        }
        let mut rng =
            rand_chacha::ChaCha8Rng::seed_from_u64(seed::derive(tag, &[0x3_4FF1E]));
        pool.shuffle(&mut rng);
        Ok(pool)
    }

    pub fn layers(&self) -> Vec<usize> {
        vec![self.dim, self.hidden, self.classes]
    }
}

const VICTIM_EPOCHS: usize = 30;
const VICTIM_LEARNING_RATE: f64 = 0.3;
const VICTIM_BATCH_SIZE: usize = 32;
// Victims serve with dropout so MC sampling has dispersion to measure;
// off-distribution probes light up the σ component of the score.
const VICTIM_DROPOUT: f64 = 0.1;

/// Standard victim: plain supervised training.
pub fn train_victim(config: &BenchmarkConfig, dataset: &Dataset, seed_value: u64) -> Result<Model> {
    let mut model = Model::new(
        &config.layers(),
        VICTIM_DROPOUT,
        seed::derive(seed_value, &[0x71C]),
    )?;
    model.train(
        &dataset.train,
        &TrainOptions::new(
            VICTIM_EPOCHS,
            VICTIM_LEARNING_RATE,
            VICTIM_BATCH_SIZE,
            seed_value,
        ),
    )?;
    Ok(model)
}

/// Hardened victim: same initialization, then progressive adversarial
/// training over the same total epoch budget.
pub fn harden_victim(
    config: &BenchmarkConfig,
    dataset: &Dataset,
    seed_value: u64,
) -> Result<Model> {
    let mut model = Model::new(
        &config.layers(),
        VICTIM_DROPOUT,
        seed::derive(seed_value, &[0x71C]),
    )?;
    let schedule = TrainingSchedule {
        rounds: 6,
        epochs_per_round: 5,
        adversarial_fraction: 0.5,
        method_mix: MethodMix::default(),
        refresh_period: 1,
    };
    let params = AttackParams {
        epsilon: 0.25,
        step_size: 0.0625,
        iterations: 8,
        overshoot: 0.02,
        norm: AttackNorm::LInf,
    };
    progressive_adversarial_train(
        &mut model,
        dataset,
        &schedule,
        &params,
        &TrainOptions::new(0, VICTIM_LEARNING_RATE, VICTIM_BATCH_SIZE, seed_value),
    )?;
    Ok(model)
}

/// The attacker's seed samples. The threat model is a thief with data from
/// a related domain, not from the victim's own distribution: seed inputs
/// come from the shifted surrogate pool, and the victim's answers are the
/// only in-distribution knowledge the attack ever obtains.
pub fn attack_seed_inputs(
    config: &BenchmarkConfig,
    n: usize,
    tag: u64,
) -> Result<Vec<Vec<f64>>> {
    let pool = config.surrogate_pool(tag)?;
    if pool.len() < n {
        return Err(Error::input(format!(
            "need {n} seed inputs, surrogate pool has {}",
            pool.len()
        )));
    }
    Ok(pool.into_iter().take(n).collect())
}

/// Default extraction budgets per attack at benchmark scale.
pub fn default_budget(kind: AttackKind) -> AttackBudget {
    match kind {
        AttackKind::JbdaTr => AttackBudget {
            seed_samples: 30,
            total_queries: 10_000,
            rounds: 6,
            epochs_per_round: 20,
        },
        AttackKind::KnockoffNet => AttackBudget {
            seed_samples: 0,
            total_queries: 2_000,
            rounds: 1,
            epochs_per_round: 50,
        },
        AttackKind::Cloudleak => AttackBudget {
            seed_samples: 500,
            total_queries: 1_000,
            rounds: 1,
            epochs_per_round: 20,
        },
    }
}

/// Queries per window an honest desk session is expected to send. Extraction
/// needs orders of magnitude more, so the rate check trips early in a flood.
pub const PROFILE_EXPECTED_RATE: f64 = 50.0;
const PROFILE_ATTACK_ROUNDS: usize = 6;
const CLOUDLEAK_PRETRAIN_EPOCHS: usize = 4;
const TIER_GAP: f64 = 0.08;
const TIER_EPS_MEDIUM: f64 = 0.15;
const TIER_EPS_HIGH: f64 = 0.35;
// Full strength would collapse every escalated response to class 0; 0.9
// keeps a trace of signal so hard-label outputs stay diverse while still
// drowning the extraction gradient.
const TIER_SCALING_STRENGTH: f64 = 0.9;

const PROFILE_MC_SAMPLES: usize = 32;

/// Score a batch of inputs exactly the way the serving path does:
/// deterministic forward probabilities plus MC-dropout dispersion when the
/// model can drop units.
pub fn breakdowns_for(
    model: &Model,
    inputs: &[Vec<f64>],
    seed_value: u64,
) -> Result<Vec<UncertaintyBreakdown>> {
    let weights = crate::detection::UncertaintyWeights::uniform(0.5);
    inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let probs = model.forward(x)?;
            let sigma = if model.dropout_rate() > 0.0 {
                model
                    .mc_dropout_predict(
                        x,
                        PROFILE_MC_SAMPLES,
                        seed::derive(seed_value, &[i as u64]),
                    )?
                    .1
            } else {
                0.0
            };
            score_probs(&probs, sigma, &weights)
        })
        .collect()
}

/// Queries a JBDA-style attacker would send this victim: every oracle input
/// from a seeded train-then-augment run starting from surrogate-domain seeds.
pub fn attack_query_stream(
    config: &BenchmarkConfig,
    victim: &Model,
    rng_seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let seeds = attack_seed_inputs(config, 30, seed::derive(rng_seed, &[0xA77]))?;
    let budget = AttackBudget {
        seed_samples: 30,
        total_queries: 30 * (1 << PROFILE_ATTACK_ROUNDS),
        rounds: PROFILE_ATTACK_ROUNDS,
        epochs_per_round: 20,
    };
    let mut oracle = LocalOracle::new(victim.clone(), ResponseMode::SoftLabel);
    let init = Model::new(
        &config.layers(),
        0.0,
        seed::derive(rng_seed, &[0x5AB]),
    )?;
    let outcome = jbda_tr(&mut oracle, &seeds, &budget, 0.1, &init, rng_seed)?;
    Ok(outcome.labeled_queries)
}

/// Calibrate a full serving profile for a victim: mixing weights and τ from
/// a benign-vs-attack score grid search, a behavioral baseline from the
/// validation split, and response tiers anchored at the calibrated τ.
pub fn build_profile(
    config: &BenchmarkConfig,
    victim: &Model,
    dataset: &Dataset,
    rng_seed: u64,
) -> Result<(DetectionProfile, CalibrationOutcome)> {
    let benign_inputs: Vec<Vec<f64>> =
        dataset.validation.iter().map(|ex| ex.x.clone()).collect();
    if benign_inputs.is_empty() {
        return Err(Error::input("validation split is empty"));
    }
    let attack_inputs = attack_query_stream(
        config,
        victim,
        seed::derive_labeled(rng_seed, "profile-attack", &[]),
    )?;

    let benign = breakdowns_for(victim, &benign_inputs, seed::derive(rng_seed, &[0xB9]))?;
    let adversarial = breakdowns_for(victim, &attack_inputs, seed::derive(rng_seed, &[0xAD]))?;
    let outcome = calibrate(&benign, &adversarial)?;

    let mut histogram = vec![0u64; victim.class_count()];
    let mut variance_acc = vec![(0.0f64, 0.0f64); dataset.dim];
    for (i, ex) in dataset.validation.iter().enumerate() {
        histogram[victim.predict_class(&ex.x)?] += 1;
        let n = (i + 1) as f64;
        for d in 0..dataset.dim {
            let (mean, m2) = variance_acc[d];
            let delta = ex.x[d] - mean;
            let mean = mean + delta / n;
            variance_acc[d] = (mean, m2 + delta * (ex.x[d] - mean));
        }
    }
    let n = dataset.validation.len() as f64;
    let mean_variance =
        variance_acc.iter().map(|(_, m2)| m2 / n).sum::<f64>() / dataset.dim as f64;
    let total: u64 = histogram.iter().sum();
    let reference_histogram: Vec<f64> =
        histogram.iter().map(|c| *c as f64 / total as f64).collect();

    let reference = BehaviorReference {
        expected_rate: PROFILE_EXPECTED_RATE,
        reference_histogram,
        // A quarter of the natural per-dimension spread: genuinely varied
        // traffic clears it, replayed or line-searched probes do not.
        min_variance: 0.25 * mean_variance,
        rate_multiplier: 3.0,
    };

    let tau = outcome.weights.tau;
    let tau2 = (tau + TIER_GAP).min(0.99);
    let tau1 = if tau < tau2 { tau } else { tau2 - 0.05 };
    let tiers = TierConfig {
        tau1: tau1.max(0.0),
        tau2,
        eps_low: 0.0,
        eps_medium: TIER_EPS_MEDIUM,
        eps_high: TIER_EPS_HIGH,
        scaling_strength: TIER_SCALING_STRENGTH,
    };

    let profile = DetectionProfile {
        weights: outcome.weights.clone(),
        reference,
        tiers,
        mc_samples: PROFILE_MC_SAMPLES,
    };
    profile.validate()?;
    Ok((profile, outcome))
}

/// Per-query detector quality on held-out streams.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionQuality {
    pub balanced_accuracy: f64,
    pub f1: f64,
    pub true_positive_rate: f64,
    pub false_positive_rate: f64,
}

/// Score held-out clean and attack queries with a calibrated profile and
/// report balanced accuracy and F1 (attack = positive class).
pub fn detector_quality(
    victim: &Model,
    profile: &DetectionProfile,
    clean: &[Vec<f64>],
    attack: &[Vec<f64>],
    seed_value: u64,
) -> Result<DetectionQuality> {
    if clean.is_empty() || attack.is_empty() {
        return Err(Error::input("detector quality needs both streams"));
    }
    let tau = profile.weights.tau;
    let mut tp = 0usize;
    let mut fp = 0usize;
    for b in breakdowns_for(victim, attack, seed::derive(seed_value, &[1]))? {
        let u = b.combine(&profile.weights);
        if u > tau {
            tp += 1;
        }
    }
    for b in breakdowns_for(victim, clean, seed::derive(seed_value, &[2]))? {
        let u = b.combine(&profile.weights);
        if u > tau {
            fp += 1;
        }
    }
    quality_from_counts(tp, attack.len(), fp, clean.len())
}

fn quality_from_counts(
    tp: usize,
    n_attack: usize,
    fp: usize,
    n_clean: usize,
) -> Result<DetectionQuality> {
    if n_attack == 0 || n_clean == 0 {
        return Err(Error::input("detection quality needs both streams"));
    }
    let tn = n_clean - fp;
    let tpr = tp as f64 / n_attack as f64;
    let fpr = fp as f64 / n_clean as f64;
    let tnr = tn as f64 / n_clean as f64;
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let f1 = if precision + tpr == 0.0 {
        0.0
    } else {
        2.0 * precision * tpr / (precision + tpr)
    };
    Ok(DetectionQuality {
        balanced_accuracy: 0.5 * (tpr + tnr),
        f1,
        true_positive_rate: tpr,
        false_positive_rate: fpr,
    })
}

/// Detection quality of the hybrid detector as actually served: per-query
/// uncertainty fused with the behavioral window checks. The attack side is
/// a default-budget extraction run hitting its own gateway; the clean side
/// paces validation traffic at the honest per-window rate through fresh
/// sessions. A query counts as detected when its disposition leaves Benign.
pub fn gateway_detection_quality(
    config: &BenchmarkConfig,
    victim: &Model,
    profile: &DetectionProfile,
    dataset: &Dataset,
    rng_seed: u64,
) -> Result<DetectionQuality> {
    let attack_gateway = experiment_gateway(victim, profile, seed::derive(rng_seed, &[1]))?;
    let mut oracle = GatewayOracle::new(
        Arc::clone(&attack_gateway),
        "extraction",
        ResponseMode::SoftLabel,
    );
    run_extraction(
        config,
        &mut oracle,
        AttackKind::JbdaTr,
        seed::derive(rng_seed, &[2]),
    )?;
    let stats = attack_gateway
        .session_stats("extraction")
        .ok_or_else(|| Error::input("attack session missing after extraction run"))?;
    let n_attack = stats.total_queries as usize;
    let tp = attack_gateway.flagged_len();

    let clean_gateway = experiment_gateway(victim, profile, seed::derive(rng_seed, &[3]))?;
    let per_session = (profile.reference.expected_rate.max(1.0)) as usize;
    let mut fp = 0usize;
    for (i, ex) in dataset.validation.iter().enumerate() {
        let session = format!("clean-{}", i / per_session);
        let (_, record) = clean_gateway.handle_query(&session, None, &ex.x)?;
        if record.disposition != Disposition::Benign {
            fp += 1;
        }
    }
    quality_from_counts(tp, n_attack, fp, dataset.validation.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    JbdaTr,
    KnockoffNet,
    Cloudleak,
}

impl AttackKind {
    pub fn all() -> [AttackKind; 3] {
        [
            AttackKind::JbdaTr,
            AttackKind::KnockoffNet,
            AttackKind::Cloudleak,
        ]
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AttackKind::JbdaTr => "jbda_tr",
            AttackKind::KnockoffNet => "knockoffnet",
            AttackKind::Cloudleak => "cloudleak",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jbda_tr" | "jbda-tr" | "jbda" => Ok(AttackKind::JbdaTr),
            "knockoffnet" | "knockoff" => Ok(AttackKind::KnockoffNet),
            "cloudleak" => Ok(AttackKind::Cloudleak),
            other => Err(Error::input(format!(
                "unknown attack {other:?} (expected jbda_tr, knockoffnet, or cloudleak)"
            ))),
        }
    }
}

/// Run one extraction attack against an arbitrary oracle with the default
/// benchmark budgets.
pub fn run_extraction(
    config: &BenchmarkConfig,
    oracle: &mut dyn VictimOracle,
    kind: AttackKind,
    rng_seed: u64,
) -> Result<ExtractionOutcome> {
    let budget = default_budget(kind);
    let init = Model::new(
        &config.layers(),
        0.0,
        seed::derive(rng_seed, &[0x1417]),
    )?;
    match kind {
        AttackKind::JbdaTr => {
            let seeds =
                attack_seed_inputs(config, budget.seed_samples, seed::derive(rng_seed, &[0x5E]))?;
            jbda_tr(oracle, &seeds, &budget, 0.1, &init, rng_seed)
        }
        AttackKind::KnockoffNet => {
            let pool = config.surrogate_pool(seed::derive(rng_seed, &[0x900]))?;
            knockoffnet(
                oracle,
                &pool,
                &budget,
                &init,
                budget.epochs_per_round,
                rng_seed,
            )
        }
        AttackKind::Cloudleak => {
            let pool =
                config.diverse_surrogate_pool(seed::derive(rng_seed, &[0x5E]))?;
            let seeds: Vec<Vec<f64>> =
                pool.into_iter().take(budget.seed_samples).collect();
            if seeds.len() < budget.seed_samples {
                return Err(Error::input("surrogate pool too small for seed budget"));
            }
            let shifted = shifted_blobs(
                &config.blob_spec(),
                seed::derive(rng_seed, &[0x90B]),
            )?;
            // A lightly pretrained substitute keeps its boundary regions
            // broad, so the DeepFool probes spread across the victim's
            // space instead of clustering in the disjoint task's geometry.
            let mut pretrained = init;
            pretrained.train(
                &shifted.train,
                &TrainOptions::new(
                    CLOUDLEAK_PRETRAIN_EPOCHS,
                    VICTIM_LEARNING_RATE,
                    VICTIM_BATCH_SIZE,
                    rng_seed,
                ),
            )?;
            cloudleak(oracle, &seeds, &budget, &pretrained, rng_seed)
        }
    }
}

/// Build a serving gateway around a victim for extraction experiments. The
/// clock is virtual and pinned, so an attack's whole stream lands in one
/// behavior window, the worst case the defense is calibrated for.
pub fn experiment_gateway(
    victim: &Model,
    profile: &DetectionProfile,
    response_seed: u64,
) -> Result<Arc<Gateway>> {
    let config = GatewayConfig {
        version: crate::gateway::CONFIG_VERSION,
        model_path: "in-memory".into(),
        profile_path: "in-memory".into(),
        kit_path: None,
        flagged_path: None,
        listen_addr: "127.0.0.1:0".to_string(),
        default_mode: ResponseMode::SoftLabel,
        timing_enabled: false,
        window_interval_ms: 60_000,
        store_capacity: 16_384,
        similarity_threshold: 0.95,
        response_seed,
    };
    let clock = Arc::new(VirtualClock::new(0));
    Ok(Arc::new(Gateway::new(
        victim.clone(),
        profile.clone(),
        None,
        &config,
        clock,
    )?))
}

/// One cell of the defense grid: an attack in a mode, with and without the
/// gateway in front of the same victim.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseCell {
    pub attack: AttackKind,
    pub mode: ResponseMode,
    pub undefended_accuracy: f64,
    pub defended_accuracy: f64,
    pub undefended_queries: u64,
    pub defended_queries: u64,
}

impl DefenseCell {
    pub fn margin(&self) -> f64 {
        self.undefended_accuracy - self.defended_accuracy
    }
}

/// Run the full attack grid against one victim, bare and gatewayed.
pub fn defense_grid(
    config: &BenchmarkConfig,
    victim: &Model,
    profile: &DetectionProfile,
    dataset: &Dataset,
    rng_seed: u64,
) -> Result<Vec<DefenseCell>> {
    let mut cells = Vec::new();
    for kind in AttackKind::all() {
        for mode in [ResponseMode::SoftLabel, ResponseMode::HardLabel] {
            let mut bare = LocalOracle::new(victim.clone(), mode);
            let undefended = run_extraction(config, &mut bare, kind, rng_seed)?;
            let undefended_accuracy = undefended.substitute.accuracy(&dataset.test)?;

            let gateway = experiment_gateway(
                victim,
                profile,
                seed::derive(rng_seed, &[0x6A7E]),
            )?;
            let session = format!("attack-{kind}-{mode:?}");
            let mut guarded = GatewayOracle::new(Arc::clone(&gateway), session, mode);
            let defended = run_extraction(config, &mut guarded, kind, rng_seed)?;
            let defended_accuracy = defended.substitute.accuracy(&dataset.test)?;

            cells.push(DefenseCell {
                attack: kind,
                mode,
                undefended_accuracy,
                defended_accuracy,
                undefended_queries: undefended.queries_used,
                defended_queries: defended.queries_used,
            });
        }
    }
    Ok(cells)
}
