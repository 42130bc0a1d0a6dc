//! Dual-layer ownership verification.
//!
//! Layer one embeds backdoor triggers: off-distribution inputs trained to
//! return predetermined classes, so a model that answers them correctly far
//! above chance carries the owner's signature in its weights. Layer two
//! watermarks served outputs: a keyed hash selects a fraction of queries as
//! carriers and adds a small zero-sum perturbation derived from the secret
//! key, detectable later by correlating suspect outputs against the expected
//! perturbation directions. Verification accepts if either layer clears its
//! threshold.
//!
//! Everything here is deterministic in its seeds: trigger sets, carrier
//! selection, perturbations, and the permutation null all replay exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::data::{Dataset, LabeledExample};
use crate::model::{argmax, Model, TrainOptions};
use crate::response::{check_probs, ResponsePayload};
use crate::seed;

const EMBED_LEARNING_RATE: f64 = 0.2;
const EMBED_BATCH_SIZE: usize = 32;
const TRIGGER_ACCURACY_FLOOR: f64 = 0.95;
const CLEAN_DROP_CEILING: f64 = 0.02;
const PERMUTATION_ROUNDS: usize = 200;
const ROBUSTNESS_PROBE_COUNT: usize = 1000;

/// Backdoor trigger inputs with their predetermined response classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSet {
    pub pairs: Vec<(Vec<f64>, usize)>,
    pub generation_seed: u64,
}

impl TriggerSet {
    pub fn empty(generation_seed: u64) -> Self {
        TriggerSet {
            pairs: Vec::new(),
            generation_seed,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Median distance from each training example to its nearest neighbor.
/// Empty or single-example data has no neighbor structure and yields 0.
pub fn median_nn_distance(data: &[LabeledExample]) -> f64 {
    if data.len() < 2 {
        return 0.0;
    }
    let mut nearest: Vec<f64> = Vec::with_capacity(data.len());
    for (i, a) in data.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, b) in data.iter().enumerate() {
            if i != j {
                best = best.min(l2_distance(&a.x, &b.x));
            }
        }
        nearest.push(best);
    }
    nearest.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = nearest.len();
    if n % 2 == 1 {
        nearest[n / 2]
    } else {
        0.5 * (nearest[n / 2 - 1] + nearest[n / 2])
    }
}

/// Isolation radius used by trigger generation: twice the training set's
/// median nearest-neighbor distance.
pub fn isolation_radius(training_data: &[LabeledExample]) -> f64 {
    2.0 * median_nn_distance(training_data)
}

/// Sample `n` trigger inputs uniformly from [0,1]^D, rejecting any within
/// the isolation radius of a training example, and assign each a random
/// predetermined class. Deterministic given the seed.
pub fn generate_trigger_set(
    n: usize,
    dim: usize,
    classes: usize,
    training_data: &[LabeledExample],
    rng_seed: u64,
) -> Result<TriggerSet> {
    if n == 0 {
        return Err(Error::input("trigger count must be ≥ 1"));
    }
    if dim == 0 || classes < 2 {
        return Err(Error::input("need dim ≥ 1 and ≥ 2 classes"));
    }
    let radius = isolation_radius(training_data);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut pairs: Vec<(Vec<f64>, usize)> = Vec::with_capacity(n);
    let max_attempts = n.saturating_mul(1000);
    let mut attempts = 0;
    while pairs.len() < n && attempts < max_attempts {
        attempts += 1;
        let candidate: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        let isolated = training_data
            .iter()
            .all(|ex| l2_distance(&candidate, &ex.x) >= radius);
        if !isolated {
            continue;
        }
        if pairs.iter().any(|(q, _)| *q == candidate) {
            continue;
        }
        let label = rng.random_range(0..classes);
        pairs.push((candidate, label));
    }
    if pairs.len() < n {
        return Err(Error::TriggerGeneration {
            requested: n,
            achieved: pairs.len(),
        });
    }
    Ok(TriggerSet {
        pairs,
        generation_seed: rng_seed,
    })
}

/// Continue training on clean data mixed with repeated trigger pairs until
/// the triggers reach `mixing_ratio` of the combined data. Fails (leaving
/// the caller's model untouched) unless trigger accuracy reaches 95% with a
/// clean validation drop of at most 2 points.
pub fn embed_backdoor(
    model: &Model,
    triggers: &TriggerSet,
    dataset: &Dataset,
    epochs: usize,
    mixing_ratio: f64,
    rng_seed: u64,
) -> Result<Model> {
    if !(0.0..1.0).contains(&mixing_ratio) {
        return Err(Error::input("mixing_ratio must lie in [0,1)"));
    }
    for (q, y) in &triggers.pairs {
        if q.len() != model.input_dim() {
            return Err(Error::input("trigger dimension does not match the model"));
        }
        if *y >= model.class_count() {
            return Err(Error::input("trigger class out of range"));
        }
    }
    let mut embedded = model.clone();
    if epochs == 0 {
        return Ok(embedded);
    }

    let clean_before = model.accuracy(&dataset.validation)?;

    let mut mixed: Vec<LabeledExample> = dataset.train.clone();
    if !triggers.is_empty() && mixing_ratio > 0.0 {
        let target =
            (mixing_ratio / (1.0 - mixing_ratio) * dataset.train.len() as f64).round() as usize;
        let repeats = target.div_ceil(triggers.len()).max(1);
        for (q, y) in &triggers.pairs {
            for _ in 0..repeats {
                mixed.push(LabeledExample::new(q.clone(), *y, model.class_count())?);
            }
        }
    }

    let opts = TrainOptions::new(epochs, EMBED_LEARNING_RATE, EMBED_BATCH_SIZE, rng_seed);
    embedded.train(&mixed, &opts)?;

    let trigger_accuracy = if triggers.is_empty() {
        1.0
    } else {
        let mut hits = 0usize;
        for (q, y) in &triggers.pairs {
            if embedded.predict_class(q)? == *y {
                hits += 1;
            }
        }
        hits as f64 / triggers.len() as f64
    };
    let clean_after = embedded.accuracy(&dataset.validation)?;
    let clean_accuracy_drop = clean_before - clean_after;

    if trigger_accuracy < TRIGGER_ACCURACY_FLOOR || clean_accuracy_drop > CLEAN_DROP_CEILING {
        return Err(Error::Embedding {
            trigger_accuracy,
            clean_accuracy_drop,
        });
    }
    Ok(embedded)
}

/// Secret parameters of the output watermark: a keyed hash of the query
/// selects carriers at rate `carrier_fraction`, and the same key seeds the
/// zero-sum perturbation added to carrier responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkKey {
    pub secret_seed: u64,
    pub magnitude: f64,
    pub carrier_fraction: f64,
}

fn feature_bits(query: &[f64]) -> Vec<u64> {
    query.iter().map(|v| v.to_bits()).collect()
}

impl WatermarkKey {
    pub fn new(secret_seed: u64, magnitude: f64, carrier_fraction: f64) -> Result<Self> {
        let key = WatermarkKey {
            secret_seed,
            magnitude,
            carrier_fraction,
        };
        key.validate()?;
        Ok(key)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.magnitude.is_finite() && self.magnitude > 0.0 && self.magnitude <= 1.0) {
            return Err(Error::input("watermark magnitude must lie in (0,1]"));
        }
        if !(self.carrier_fraction.is_finite()
            && self.carrier_fraction > 0.0
            && self.carrier_fraction <= 1.0)
        {
            return Err(Error::input("carrier_fraction must lie in (0,1]"));
        }
        Ok(())
    }

    /// Keyed selection: a hash of (secret, query bits) mapped to [0,1) and
    /// compared against the carrier fraction.
    pub fn is_carrier(&self, query: &[f64]) -> bool {
        let h = seed::derive_labeled(self.secret_seed, "watermark-carrier", &feature_bits(query));
        let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
        unit < self.carrier_fraction
    }

    /// Zero-sum perturbation over `classes` entries with l_inf norm equal to
    /// the key magnitude, derived deterministically from (key, query).
    pub fn perturbation(&self, query: &[f64], classes: usize) -> Vec<f64> {
        let h = seed::derive_labeled(self.secret_seed, "watermark-noise", &feature_bits(query));
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let mut eps: Vec<f64> = (0..classes).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
        let mean = eps.iter().sum::<f64>() / classes as f64;
        for v in eps.iter_mut() {
            *v -= mean;
        }
        let max_abs = eps.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_abs > 1e-12 {
            let scale = self.magnitude / max_abs;
            for v in eps.iter_mut() {
                *v *= scale;
            }
        }
        eps
    }
}

/// Shrink the magnitude (halving, at most 24 times) until every carrier in
/// the validation sample keeps its argmax after watermarking.
pub fn calibrate_watermark_key(
    model: &Model,
    validation: &[LabeledExample],
    secret_seed: u64,
    initial_magnitude: f64,
    carrier_fraction: f64,
) -> Result<WatermarkKey> {
    let mut magnitude = initial_magnitude;
    for _ in 0..24 {
        let key = WatermarkKey::new(secret_seed, magnitude, carrier_fraction)?;
        let mut preserved = true;
        for ex in validation {
            if !key.is_carrier(&ex.x) {
                continue;
            }
            let probs = model.forward(&ex.x)?;
            let marked = watermark_response(&probs, &ex.x, &key)?;
            if argmax(&marked) != argmax(&probs) {
                preserved = false;
                break;
            }
        }
        if preserved {
            return Ok(key);
        }
        magnitude /= 2.0;
    }
    Err(Error::Calibration(
        "no watermark magnitude preserved argmax on the validation carriers".into(),
    ))
}

/// Add the key's perturbation when the query is a carrier, then clamp and
/// renormalize. Non-carriers pass through bit-exact.
pub fn watermark_response(probs: &[f64], query: &[f64], key: &WatermarkKey) -> Result<Vec<f64>> {
    check_probs(probs)?;
    key.validate()?;
    if !key.is_carrier(query) {
        return Ok(probs.to_vec());
    }
    let eps = key.perturbation(query, probs.len());
    let mut out: Vec<f64> = probs
        .iter()
        .zip(&eps)
        .map(|(p, e)| (p + e).max(0.0))
        .collect();
    let sum: f64 = out.iter().sum();
    if sum > 0.0 {
        for v in out.iter_mut() {
            *v /= sum;
        }
    } else {
        out.fill(1.0 / probs.len() as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationThresholds {
    /// Minimum trigger match rate for the backdoor layer.
    pub trigger_match: f64,
    /// Minimum permutation z-score for the watermark layer.
    pub watermark_z: f64,
}

impl Default for VerificationThresholds {
    fn default() -> Self {
        VerificationThresholds {
            trigger_match: 0.5,
            watermark_z: 3.0,
        }
    }
}

impl VerificationThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.trigger_match > 0.0 && self.trigger_match <= 1.0) {
            return Err(Error::input("trigger_match threshold must lie in (0,1]"));
        }
        if !(self.watermark_z.is_finite() && self.watermark_z > 0.0) {
            return Err(Error::input("watermark_z threshold must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Verified,
    NotVerified,
}

/// Outcome of one trigger probe. `observed` is None when the oracle failed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriggerOutcome {
    pub index: usize,
    pub expected: usize,
    pub observed: Option<usize>,
    pub matched: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OwnershipVerdict {
    pub trigger_match_rate: f64,
    pub watermark_score: f64,
    pub decision: Decision,
    /// Fraction of issued oracle queries that returned an answer.
    pub coverage: f64,
    /// False when the watermark layer was skipped (hard-label oracle or too
    /// few carrier probes).
    pub watermark_layer_used: bool,
    pub details: Vec<TriggerOutcome>,
}

/// Query a suspect oracle with the trigger set and carrier probes, then
/// decide ownership: verified when the trigger match rate or the watermark
/// permutation z-score clears its threshold. Oracle failures reduce
/// `coverage` but never abort the verdict.
pub fn verify_ownership<F>(
    mut oracle: F,
    triggers: &TriggerSet,
    key: &WatermarkKey,
    probe_queries: &[Vec<f64>],
    thresholds: &VerificationThresholds,
) -> Result<OwnershipVerdict>
where
    F: FnMut(&[f64]) -> Result<ResponsePayload>,
{
    thresholds.validate()?;
    key.validate()?;

    let mut details = Vec::with_capacity(triggers.len());
    let mut issued = 0usize;
    let mut answered = 0usize;
    let mut matched = 0usize;
    for (index, (q, expected)) in triggers.pairs.iter().enumerate() {
        issued += 1;
        match oracle(q) {
            Ok(payload) => {
                answered += 1;
                let observed = payload.class();
                let hit = observed == *expected;
                if hit {
                    matched += 1;
                }
                details.push(TriggerOutcome {
                    index,
                    expected: *expected,
                    observed: Some(observed),
                    matched: hit,
                });
            }
            Err(_) => details.push(TriggerOutcome {
                index,
                expected: *expected,
                observed: None,
                matched: false,
            }),
        }
    }
    let trigger_match_rate = if answered > 0 {
        matched as f64 / answered as f64
    } else {
        0.0
    };

    let mut expected_directions: Vec<Vec<f64>> = Vec::new();
    let mut observed_outputs: Vec<Vec<f64>> = Vec::new();
    let mut hard_label_seen = false;
    for q in probe_queries {
        if !key.is_carrier(q) {
            continue;
        }
        issued += 1;
        match oracle(q) {
            Ok(ResponsePayload::Soft(p)) => {
                answered += 1;
                expected_directions.push(key.perturbation(q, p.len()));
                observed_outputs.push(p);
            }
            Ok(ResponsePayload::Hard(_)) => {
                answered += 1;
                hard_label_seen = true;
            }
            Err(_) => {}
        }
    }

    let (watermark_score, watermark_layer_used) =
        if hard_label_seen || observed_outputs.len() < 2 {
            (0.0, false)
        } else {
            (
                permutation_z(&expected_directions, &observed_outputs, key.secret_seed),
                true,
            )
        };

    let decision = if trigger_match_rate >= thresholds.trigger_match
        || watermark_score >= thresholds.watermark_z
    {
        Decision::Verified
    } else {
        Decision::NotVerified
    };

    Ok(OwnershipVerdict {
        trigger_match_rate,
        watermark_score,
        decision,
        coverage: if issued > 0 {
            answered as f64 / issued as f64
        } else {
            1.0
        },
        watermark_layer_used,
        details,
    })
}

/// Mean dot-product between expected perturbation directions and observed
/// outputs, standardized against a permutation null that shuffles the
/// pairing between the two.
fn permutation_z(directions: &[Vec<f64>], outputs: &[Vec<f64>], seed_base: u64) -> f64 {
    let n = directions.len();
    let stat = |pairing: &[usize]| -> f64 {
        let mut total = 0.0;
        for (i, &j) in pairing.iter().enumerate() {
            total += directions[i]
                .iter()
                .zip(&outputs[j])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        total / n as f64
    };
    let identity: Vec<usize> = (0..n).collect();
    let observed = stat(&identity);

    let mut rng =
        ChaCha8Rng::seed_from_u64(seed::derive_labeled(seed_base, "watermark-permute", &[]));
    let mut pairing = identity;
    let mut null_stats = Vec::with_capacity(PERMUTATION_ROUNDS);
    for _ in 0..PERMUTATION_ROUNDS {
        pairing.shuffle(&mut rng);
        null_stats.push(stat(&pairing));
    }
    let mean = null_stats.iter().sum::<f64>() / null_stats.len() as f64;
    let var = null_stats
        .iter()
        .map(|s| (s - mean) * (s - mean))
        .sum::<f64>()
        / null_stats.len() as f64;
    let std = var.sqrt();
    if std > 1e-15 {
        (observed - mean) / std
    } else {
        0.0
    }
}

/// Zero the given fraction of smallest-magnitude parameters (ties broken by
/// parameter index, so the result is stable).
pub fn prune_smallest(model: &Model, fraction: f64) -> Result<Model> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::input("prune fraction must lie in [0,1]"));
    }
    let mut params = model.flat_params();
    let k = (fraction * params.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..params.len()).collect();
    order.sort_by(|&a, &b| {
        params[a]
            .abs()
            .partial_cmp(&params[b].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    for &idx in order.iter().take(k) {
        params[idx] = 0.0;
    }
    let mut pruned = model.clone();
    pruned.set_flat_params(&params)?;
    Ok(pruned)
}

/// A single post-theft modification to evaluate retention against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelEdit {
    FineTune { epochs: usize },
    Prune { fraction: f64 },
}

impl ModelEdit {
    fn label(&self) -> String {
        match self {
            ModelEdit::FineTune { epochs } => format!("fine_tune({epochs})"),
            ModelEdit::Prune { fraction } => format!("prune({fraction:.2})"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetentionEntry {
    pub label: String,
    pub trigger_match_rate: f64,
    pub watermark_score: f64,
    pub decision: Decision,
}

/// Verify the embedded model as-is (baseline) and again after each edit,
/// applied to a fresh copy, reporting what each layer retains. The suspect
/// oracle is the edited model served through the watermark layer. Probes
/// come from the dataset's test split.
pub fn robustness_eval(
    model: &Model,
    triggers: &TriggerSet,
    key: &WatermarkKey,
    dataset: &Dataset,
    edits: &[ModelEdit],
    thresholds: &VerificationThresholds,
    seed_base: u64,
) -> Result<Vec<RetentionEntry>> {
    // Test-split traffic plus synthetic uniform probes: the watermark
    // statistic's power grows with the carrier count, and probe inputs need
    // not come from the data distribution.
    let mut probes: Vec<Vec<f64>> = dataset.test.iter().map(|ex| ex.x.clone()).collect();
    let mut probe_rng =
        ChaCha8Rng::seed_from_u64(seed::derive(seed_base, &[0x9806]));
    for _ in 0..ROBUSTNESS_PROBE_COUNT {
        probes.push((0..model.input_dim()).map(|_| probe_rng.random::<f64>()).collect());
    }

    let verdict_for = |m: &Model| -> Result<OwnershipVerdict> {
        verify_ownership(
            |q| {
                let probs = m.forward(q)?;
                Ok(ResponsePayload::Soft(watermark_response(&probs, q, key)?))
            },
            triggers,
            key,
            &probes,
            thresholds,
        )
    };

    let mut entries = Vec::with_capacity(edits.len() + 1);
    let baseline = verdict_for(model)?;
    entries.push(RetentionEntry {
        label: "baseline".into(),
        trigger_match_rate: baseline.trigger_match_rate,
        watermark_score: baseline.watermark_score,
        decision: baseline.decision,
    });

    for (i, edit) in edits.iter().enumerate() {
        let edited = match edit {
            ModelEdit::FineTune { epochs } => {
                let mut copy = model.clone();
                if *epochs > 0 {
                    let opts = TrainOptions::new(
                        *epochs,
                        EMBED_LEARNING_RATE,
                        EMBED_BATCH_SIZE,
                        seed::derive(seed_base, &[0xF17E, i as u64]),
                    );
                    copy.train(&dataset.train, &opts)?;
                }
                copy
            }
            ModelEdit::Prune { fraction } => prune_smallest(model, *fraction)?,
        };
        let verdict = verdict_for(&edited)?;
        entries.push(RetentionEntry {
            label: edit.label(),
            trigger_match_rate: verdict.trigger_match_rate,
            watermark_score: verdict.watermark_score,
            decision: verdict.decision,
        });
    }
    Ok(entries)
}

const KIT_FORMAT: &str = "modelgate-ownership-kit";
const KIT_VERSION: u32 = 1;

/// Everything the owner needs to later verify a suspect: the trigger set,
/// the watermark key parameters, and the decision thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OwnershipKit {
    pub trigger_set: TriggerSet,
    pub key: WatermarkKey,
    pub thresholds: VerificationThresholds,
}

#[derive(Serialize, Deserialize)]
struct KitFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    kit: OwnershipKit,
}

impl OwnershipKit {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = KitFile {
            format: KIT_FORMAT.to_string(),
            version: KIT_VERSION,
            kit: self.clone(),
        };
        let writer = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(writer, &file)
            .map_err(|e| Error::Format(format!("kit serialization failed: {e}")))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let file: KitFile = serde_json::from_reader(reader)
            .map_err(|e| Error::Format(format!("kit parse failed: {e}")))?;
        if file.format != KIT_FORMAT {
            return Err(Error::Format(format!(
                "unexpected kit format {:?}",
                file.format
            )));
        }
        if file.version != KIT_VERSION {
            return Err(Error::Format(format!(
                "unsupported kit version {}",
                file.version
            )));
        }
        file.kit.key.validate()?;
        file.kit.thresholds.validate()?;
        Ok(file.kit)
    }
}
