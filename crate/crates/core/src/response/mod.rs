//! Adaptive query response: tier selection, tier-scaled Gaussian output
//! perturbation, escalation transforms (label flipping, adaptive label
//! scaling), flagged-query similarity matching, and periodic threshold
//! recalibration.
//!
//! The noise parameter of each tier is a standard deviation, so perturbation
//! magnitude scales linearly with the tier value. Noisy vectors are clamped
//! nonnegative and renormalized, so every soft response remains a valid
//! distribution no matter the tier.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detection::window::Disposition;
use crate::error::{Error, Result};
use crate::model::argmax;

/// Suspicion thresholds and noise levels for the three response tiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub eps_low: f64,
    pub eps_medium: f64,
    pub eps_high: f64,
    /// Mixing strength of the escalation scaling transform.
    pub scaling_strength: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Low,
    Medium,
    High,
}

impl TierConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.tau1,
            self.tau2,
            self.eps_low,
            self.eps_medium,
            self.eps_high,
            self.scaling_strength,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("tier config has non-finite fields"));
        }
        if !(0.0 <= self.tau1 && self.tau1 < self.tau2 && self.tau2 <= 1.0) {
            return Err(Error::input(format!(
                "tier thresholds must satisfy 0 ≤ τ1 < τ2 ≤ 1 (got τ1={}, τ2={})",
                self.tau1, self.tau2
            )));
        }
        if !(0.0 <= self.eps_low && self.eps_low <= self.eps_medium && self.eps_medium <= self.eps_high)
        {
            return Err(Error::input(
                "tier noise levels must satisfy 0 ≤ eps_low ≤ eps_medium ≤ eps_high",
            ));
        }
        if !(0.0..=1.0).contains(&self.scaling_strength) {
            return Err(Error::input("scaling_strength must lie in [0,1]"));
        }
        Ok(())
    }

    pub fn tier_for(&self, suspicion: f64) -> Tier {
        if suspicion <= self.tau1 {
            Tier::Low
        } else if suspicion <= self.tau2 {
            Tier::Medium
        } else {
            Tier::High
        }
    }

    pub fn epsilon_for(&self, tier: Tier) -> f64 {
        match tier {
            Tier::Low => self.eps_low,
            Tier::Medium => self.eps_medium,
            Tier::High => self.eps_high,
        }
    }
}

/// Noise level for a suspicion score: eps_low for s ≤ τ1 (boundary
/// inclusive), eps_medium for τ1 < s ≤ τ2, eps_high above.
pub fn select_tier(suspicion: f64, tiers: &TierConfig) -> f64 {
    tiers.epsilon_for(tiers.tier_for(suspicion))
}

pub(crate) fn check_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::input("probability vector is empty"));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::input(
            "probability vector has negative or non-finite entries",
        ));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-4 {
        return Err(Error::input(format!(
            "probability vector sums to {sum}, not 1"
        )));
    }
    Ok(())
}

/// Add i.i.d. N(0, ε) noise (standard deviation ε), clamp nonnegative,
/// renormalize; all-zero fallback is uniform. ε = 0 returns the input
/// unchanged, bit for bit.
pub fn perturb_response(probs: &[f64], epsilon: f64, seed: u64) -> Result<Vec<f64>> {
    check_probs(probs)?;
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::input("epsilon must be nonnegative"));
    }
    if epsilon == 0.0 {
        return Ok(probs.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, epsilon).expect("epsilon is positive and finite");
    let mut out: Vec<f64> = probs
        .iter()
        .map(|p| (p + noise.sample(&mut rng)).max(0.0))
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

/// Swap the largest and second-largest entries (first occurrences on ties).
pub fn flip_label(probs: &[f64]) -> Result<Vec<f64>> {
    check_probs(probs)?;
    if probs.len() < 2 {
        return Err(Error::input("flip_label needs at least 2 classes"));
    }
    let top = argmax(probs);
    let mut second = if top == 0 { 1 } else { 0 };
    for (i, v) in probs.iter().enumerate() {
        if i != top && *v > probs[second] {
            second = i;
        }
    }
    let mut out = probs.to_vec();
    out.swap(top, second);
    Ok(out)
}

/// Convex mix with the uniform distribution:
/// (1 − strength)·probs + strength/K.
pub fn adaptive_label_scaling(probs: &[f64], strength: f64) -> Result<Vec<f64>> {
    check_probs(probs)?;
    if !(0.0..=1.0).contains(&strength) || !strength.is_finite() {
        return Err(Error::input("strength must lie in [0,1]"));
    }
    if strength == 0.0 {
        return Ok(probs.to_vec());
    }
    let uniform = 1.0 / probs.len() as f64;
    Ok(probs
        .iter()
        .map(|p| (1.0 - strength) * p + strength * uniform)
        .collect())
}

/// A query that drew a suspicious or malicious disposition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlaggedQuery {
    pub timestamp_ms: u64,
    pub session_id: String,
    pub features: Vec<f64>,
    pub disposition: Disposition,
}

/// Bounded in-memory store of recently flagged queries, oldest evicted first.
#[derive(Debug, Clone)]
pub struct FlaggedStore {
    entries: VecDeque<FlaggedQuery>,
    capacity: usize,
    similarity_threshold: f64,
}

impl FlaggedStore {
    pub fn new(capacity: usize, similarity_threshold: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::input("store capacity must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&similarity_threshold) || !similarity_threshold.is_finite() {
            return Err(Error::input("similarity_threshold must lie in [0,1]"));
        }
        Ok(FlaggedStore {
            entries: VecDeque::new(),
            capacity,
            similarity_threshold,
        })
    }

    pub fn insert(&mut self, entry: FlaggedQuery) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn similarity_threshold(&self) -> f64 {
        self.similarity_threshold
    }

    pub fn iter(&self) -> impl Iterator<Item = &FlaggedQuery> {
        self.entries.iter()
    }
}

fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Highest cosine similarity between the query and any stored entry, and
/// whether it clears the store's threshold. Zero vectors score 0; entries of
/// a different dimension are skipped.
pub fn similarity_check(query: &[f64], store: &FlaggedStore) -> (bool, f64) {
    let mut best: f64 = 0.0;
    for entry in store.iter() {
        if entry.features.len() != query.len() {
            continue;
        }
        best = best.max(cosine_similarity(query, &entry.features));
    }
    (best >= store.similarity_threshold && !store.is_empty(), best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseMode {
    SoftLabel,
    HardLabel,
}

/// What goes back to the client: a probability vector or a class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponsePayload {
    Soft(Vec<f64>),
    Hard(usize),
}

impl ResponsePayload {
    pub fn class(&self) -> usize {
        match self {
            ResponsePayload::Soft(p) => argmax(p),
            ResponsePayload::Hard(c) => *c,
        }
    }
}

/// Full response pipeline: tier-scaled noise, then (for malicious
/// dispositions or similarity-matched queries) adaptive label scaling and,
/// at the high tier, a label flip. Soft mode returns the final vector, hard
/// mode its argmax.
pub fn respond(
    probs: &[f64],
    suspicion: f64,
    disposition: Disposition,
    similarity_matched: bool,
    tiers: &TierConfig,
    mode: ResponseMode,
    seed: u64,
) -> Result<ResponsePayload> {
    tiers.validate()?;
    let tier = tiers.tier_for(suspicion);
    let epsilon = tiers.epsilon_for(tier);
    let mut out = perturb_response(probs, epsilon, seed)?;
    if disposition == Disposition::Malicious || similarity_matched {
        out = adaptive_label_scaling(&out, tiers.scaling_strength)?;
        if tier == Tier::High {
            out = flip_label(&out)?;
        }
    }
    Ok(match mode {
        ResponseMode::SoftLabel => ResponsePayload::Soft(out),
        ResponseMode::HardLabel => ResponsePayload::Hard(argmax(&out)),
    })
}

/// One served query as recalibration evidence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseHistoryEntry {
    pub suspicion: f64,
    pub disposition: Disposition,
    /// Ground truth when available; gateways without labels treat their own
    /// malicious disposition as confirmation.
    pub confirmed_malicious: bool,
}

/// Targets and gains for threshold recalibration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecalibrationTargets {
    /// Acceptable fraction of benign traffic above τ1 (medium+ noise).
    pub benign_medium_rate: f64,
    /// Acceptable fraction of benign traffic above τ2 (high noise).
    pub benign_high_rate: f64,
    pub gain: f64,
    /// Hard cap on per-invocation threshold movement.
    pub max_step: f64,
    /// Minimum enforced gap between τ1 and τ2.
    pub min_gap: f64,
}

impl Default for RecalibrationTargets {
    fn default() -> Self {
        RecalibrationTargets {
            benign_medium_rate: 0.05,
            benign_high_rate: 0.01,
            gain: 0.5,
            max_step: 0.05,
            min_gap: 0.01,
        }
    }
}

/// Nudge τ1/τ2 toward the configured benign-perturbation targets: raise a
/// threshold when benign traffic lands above it too often, lower it when
/// confirmed-malicious queries slip into the low tier. Movement is bounded
/// by `max_step` per invocation and the ordering invariant always holds. A
/// history with no false positives above target and no misses leaves the
/// config unchanged.
pub fn recalibrate_thresholds(
    history: &[ResponseHistoryEntry],
    current: &TierConfig,
    targets: &RecalibrationTargets,
) -> Result<TierConfig> {
    current.validate()?;
    if history.is_empty() {
        return Err(Error::input("recalibration needs a non-empty history"));
    }

    let benign: Vec<&ResponseHistoryEntry> =
        history.iter().filter(|e| !e.confirmed_malicious).collect();
    let malicious: Vec<&ResponseHistoryEntry> =
        history.iter().filter(|e| e.confirmed_malicious).collect();

    let rate = |pool: &[&ResponseHistoryEntry], above: f64| -> f64 {
        if pool.is_empty() {
            0.0
        } else {
            pool.iter().filter(|e| e.suspicion > above).count() as f64 / pool.len() as f64
        }
    };
    let fp_medium = rate(&benign, current.tau1);
    let fp_high = rate(&benign, current.tau2);
    let miss_rate = if malicious.is_empty() {
        0.0
    } else {
        malicious
            .iter()
            .filter(|e| e.suspicion <= current.tau1)
            .count() as f64
            / malicious.len() as f64
    };

    let mut d1 = 0.0;
    if fp_medium > targets.benign_medium_rate {
        d1 += (targets.gain * (fp_medium - targets.benign_medium_rate)).min(targets.max_step);
    }
    if miss_rate > 0.0 {
        d1 -= (targets.gain * miss_rate).min(targets.max_step);
    }
    d1 = d1.clamp(-targets.max_step, targets.max_step);

    let mut d2 = 0.0;
    if fp_high > targets.benign_high_rate {
        d2 += (targets.gain * (fp_high - targets.benign_high_rate)).min(targets.max_step);
    }
    if miss_rate > 0.0 {
        d2 -= (0.5 * targets.gain * miss_rate).min(targets.max_step);
    }
    d2 = d2.clamp(-targets.max_step, targets.max_step);

    let mut out = current.clone();
    if d2 != 0.0 {
        out.tau2 = (current.tau2 + d2).clamp(targets.min_gap, 1.0);
    }
    if d1 != 0.0 || out.tau1 > out.tau2 - targets.min_gap {
        out.tau1 = (current.tau1 + d1).clamp(0.0, out.tau2 - targets.min_gap);
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiers() -> TierConfig {
        TierConfig {
            tau1: 0.3,
            tau2: 0.7,
            eps_low: 0.0,
            eps_medium: 0.05,
            eps_high: 0.2,
            scaling_strength: 1.0,
        }
    }

    #[test]
    fn tier_selection_boundaries() {
        let t = tiers();
        assert_eq!(select_tier(0.0, &t), 0.0);
        assert_eq!(select_tier(0.3, &t), 0.0); // boundary inclusive
        assert_eq!(select_tier(0.5, &t), 0.05);
        assert_eq!(select_tier(0.7, &t), 0.05);
        assert_eq!(select_tier(0.71, &t), 0.2);
        assert_eq!(select_tier(1.0, &t), 0.2);
    }

    #[test]
    fn tier_selection_is_monotone() {
        let t = tiers();
        let scores = [0.0, 0.1, 0.29, 0.3, 0.31, 0.5, 0.7, 0.72, 0.9, 1.0];
        for pair in scores.windows(2) {
            assert!(select_tier(pair[0], &t) <= select_tier(pair[1], &t));
        }
    }

    #[test]
    fn tier_config_validation() {
        let mut t = tiers();
        assert!(t.validate().is_ok());
        t.tau1 = 0.7;
        assert!(t.validate().is_err());
        t.tau1 = 0.3;
        t.eps_medium = 0.3;
        assert!(t.validate().is_err());
        t.eps_medium = 0.05;
        t.scaling_strength = 1.2;
        assert!(t.validate().is_err());
    }

    #[test]
    fn perturb_zero_epsilon_is_identity() {
        let probs = vec![0.5, 0.3, 0.2];
        let out = perturb_response(&probs, 0.0, 42).unwrap();
        assert_eq!(probs, out);
        for (a, b) in probs.iter().zip(&out) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn perturb_always_yields_valid_distribution() {
        let probs = vec![0.1; 10];
        for seed in 0..10_000u64 {
            let out = perturb_response(&probs, 0.3, seed).unwrap();
            let sum: f64 = out.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "sum {sum} at seed {seed}");
            assert!(out.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn perturbation_grows_with_epsilon() {
        let probs = vec![0.6, 0.25, 0.1, 0.05];
        let mean_tv = |eps: f64| {
            let mut total = 0.0;
            for seed in 0..1000u64 {
                let out = perturb_response(&probs, eps, 7000 + seed).unwrap();
                let tv: f64 = out
                    .iter()
                    .zip(&probs)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / 2.0;
                total += tv;
            }
            total / 1000.0
        };
        let small = mean_tv(0.01);
        let medium = mean_tv(0.05);
        let large = mean_tv(0.2);
        assert!(small < medium && medium < large, "{small} {medium} {large}");
    }

    #[test]
    fn perturb_is_deterministic_per_seed() {
        let probs = vec![0.7, 0.2, 0.1];
        assert_eq!(
            perturb_response(&probs, 0.1, 5).unwrap(),
            perturb_response(&probs, 0.1, 5).unwrap()
        );
        assert_ne!(
            perturb_response(&probs, 0.1, 5).unwrap(),
            perturb_response(&probs, 0.1, 6).unwrap()
        );
    }

    #[test]
    fn flip_label_swaps_top_two() {
        assert_eq!(
            flip_label(&[0.7, 0.2, 0.1]).unwrap(),
            vec![0.2, 0.7, 0.1]
        );
        // Uniform: a value no-op.
        assert_eq!(
            flip_label(&[0.25, 0.25, 0.25, 0.25]).unwrap(),
            vec![0.25, 0.25, 0.25, 0.25]
        );
        assert!(flip_label(&[1.0]).is_err());
    }

    #[test]
    fn flip_label_moves_argmax_to_second() {
        let probs = vec![0.1, 0.5, 0.15, 0.25];
        let flipped = flip_label(&probs).unwrap();
        assert_eq!(argmax(&flipped), 3); // old second-ranked class
        // Involution when top two are distinct and unique.
        let back = flip_label(&flipped).unwrap();
        assert_eq!(back, probs);
    }

    #[test]
    fn scaling_examples() {
        let probs = vec![0.8, 0.2];
        assert_eq!(adaptive_label_scaling(&probs, 0.0).unwrap(), probs);
        let half = adaptive_label_scaling(&probs, 0.5).unwrap();
        assert!((half[0] - 0.65).abs() < 1e-12);
        assert!((half[1] - 0.35).abs() < 1e-12);
        let full = adaptive_label_scaling(&probs, 1.0).unwrap();
        assert_eq!(full, vec![0.5, 0.5]);
    }

    #[test]
    fn scaling_preserves_argmax_below_one() {
        let probs = vec![0.05, 0.3, 0.45, 0.2];
        for strength in [0.1, 0.5, 0.9, 0.999] {
            let out = adaptive_label_scaling(&probs, strength).unwrap();
            assert_eq!(argmax(&out), argmax(&probs));
        }
    }

    fn entry(features: Vec<f64>) -> FlaggedQuery {
        FlaggedQuery {
            timestamp_ms: 0,
            session_id: "s".into(),
            features,
            disposition: Disposition::Suspicious,
        }
    }

    #[test]
    fn similarity_empty_store() {
        let store = FlaggedStore::new(10, 0.9).unwrap();
        assert_eq!(similarity_check(&[1.0, 0.0], &store), (false, 0.0));
    }

    #[test]
    fn similarity_identical_and_orthogonal() {
        let mut store = FlaggedStore::new(10, 0.9).unwrap();
        store.insert(entry(vec![0.5, 0.5, 0.0]));
        let (matched, sim) = similarity_check(&[0.5, 0.5, 0.0], &store);
        assert!(matched);
        assert!((sim - 1.0).abs() < 1e-12);
        let (matched, sim) = similarity_check(&[0.0, 0.0, 1.0], &store);
        assert!(!matched);
        assert_eq!(sim, 0.0);
    }

    #[test]
    fn similarity_matches_naive_scan() {
        use rand::Rng;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut store = FlaggedStore::new(2000, 0.95).unwrap();
        let mut raw = Vec::new();
        for _ in 0..1000 {
            let v: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
            raw.push(v.clone());
            store.insert(entry(v));
        }
        let query: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let (_, best) = similarity_check(&query, &store);
        let naive = raw
            .iter()
            .map(|v| {
                let dot: f64 = v.iter().zip(&query).map(|(a, b)| a * b).sum();
                let na: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nb: f64 = query.iter().map(|a| a * a).sum::<f64>().sqrt();
                dot / (na * nb)
            })
            .fold(f64::NEG_INFINITY, f64::max)
            .max(0.0);
        assert!((best - naive).abs() < 1e-12);
    }

    #[test]
    fn store_evicts_oldest_at_capacity() {
        let mut store = FlaggedStore::new(3, 0.9).unwrap();
        for i in 0..5 {
            store.insert(FlaggedQuery {
                timestamp_ms: i,
                session_id: "s".into(),
                features: vec![i as f64],
                disposition: Disposition::Malicious,
            });
        }
        assert_eq!(store.len(), 3);
        let stamps: Vec<u64> = store.iter().map(|e| e.timestamp_ms).collect();
        assert_eq!(stamps, vec![2, 3, 4]);
    }

    #[test]
    fn respond_passes_through_benign_traffic() {
        let t = tiers();
        let probs = vec![0.6, 0.3, 0.1];
        let payload = respond(
            &probs,
            0.0,
            Disposition::Benign,
            false,
            &t,
            ResponseMode::SoftLabel,
            9,
        )
        .unwrap();
        match payload {
            ResponsePayload::Soft(out) => {
                for (a, b) in out.iter().zip(&probs) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            _ => panic!("expected soft payload"),
        }
    }

    #[test]
    fn respond_malicious_full_scaling_is_uniform() {
        let t = tiers(); // scaling_strength 1.0
        let probs = vec![0.6, 0.3, 0.1];
        // High tier: suspicion above tau2.
        let payload = respond(
            &probs,
            0.9,
            Disposition::Malicious,
            false,
            &t,
            ResponseMode::SoftLabel,
            11,
        )
        .unwrap();
        match payload {
            ResponsePayload::Soft(out) => {
                for v in out {
                    assert!((v - 1.0 / 3.0).abs() < 1e-12);
                }
            }
            _ => panic!("expected soft payload"),
        }
    }

    #[test]
    fn respond_hard_mode_returns_valid_class() {
        let t = tiers();
        let probs = vec![0.25, 0.25, 0.25, 0.25];
        for seed in 0..200 {
            let payload = respond(
                &probs,
                0.5,
                Disposition::Suspicious,
                false,
                &t,
                ResponseMode::HardLabel,
                seed,
            )
            .unwrap();
            match payload {
                ResponsePayload::Hard(c) => assert!(c < 4),
                _ => panic!("expected hard payload"),
            }
        }
    }

    #[test]
    fn respond_is_deterministic() {
        let t = tiers();
        let probs = vec![0.5, 0.2, 0.3];
        let a = respond(&probs, 0.8, Disposition::Malicious, true, &t, ResponseMode::SoftLabel, 3)
            .unwrap();
        let b = respond(&probs, 0.8, Disposition::Malicious, true, &t, ResponseMode::SoftLabel, 3)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn similarity_match_escalates_without_malicious_disposition() {
        let mut t = tiers();
        t.scaling_strength = 1.0;
        t.eps_medium = 0.0; // isolate the scaling effect
        let probs = vec![0.9, 0.05, 0.05];
        let payload = respond(
            &probs,
            0.5,
            Disposition::Benign,
            true,
            &t,
            ResponseMode::SoftLabel,
            4,
        )
        .unwrap();
        match payload {
            ResponsePayload::Soft(out) => {
                for v in out {
                    assert!((v - 1.0 / 3.0).abs() < 1e-12);
                }
            }
            _ => panic!("expected soft payload"),
        }
    }

    fn history_entry(s: f64, malicious: bool) -> ResponseHistoryEntry {
        ResponseHistoryEntry {
            suspicion: s,
            disposition: if malicious {
                Disposition::Malicious
            } else {
                Disposition::Benign
            },
            confirmed_malicious: malicious,
        }
    }

    #[test]
    fn recalibration_fixed_point_on_clean_history() {
        let t = tiers();
        let history: Vec<_> = (0..100).map(|_| history_entry(0.1, false)).collect();
        let out = recalibrate_thresholds(&history, &t, &RecalibrationTargets::default()).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn recalibration_raises_tau1_on_benign_overflow() {
        let t = tiers();
        let targets = RecalibrationTargets::default();
        // 10% of benign traffic above tau1: twice the 5% target.
        let mut history: Vec<_> = (0..90).map(|_| history_entry(0.1, false)).collect();
        history.extend((0..10).map(|_| history_entry(0.5, false)));
        let out = recalibrate_thresholds(&history, &t, &targets).unwrap();
        assert!(out.tau1 > t.tau1);
        assert!(out.tau1 - t.tau1 <= targets.max_step + 1e-12);
        assert!(out.tau1 < out.tau2);
    }

    #[test]
    fn recalibration_lowers_tau_on_misses() {
        let t = tiers();
        let mut history: Vec<_> = (0..50).map(|_| history_entry(0.1, false)).collect();
        // Confirmed malicious queries slipping under tau1.
        history.extend((0..50).map(|_| history_entry(0.2, true)));
        let out = recalibrate_thresholds(&history, &t, &RecalibrationTargets::default()).unwrap();
        assert!(out.tau1 < t.tau1);
        assert!(out.tau2 <= t.tau2);
        assert!(out.tau1 < out.tau2);
    }

    #[test]
    fn recalibration_preserves_ordering_under_pressure() {
        let targets = RecalibrationTargets::default();
        let mut t = tiers();
        t.tau1 = 0.68;
        t.tau2 = 0.7;
        // Everything benign lands above tau1 -> push up, but the gap to tau2
        // must survive.
        let history: Vec<_> = (0..100).map(|_| history_entry(0.69, false)).collect();
        let out = recalibrate_thresholds(&history, &t, &targets).unwrap();
        assert!(out.tau1 < out.tau2);
        assert!(out.tau2 <= 1.0);
        assert!(out.validate().is_ok());
    }

    #[test]
    fn recalibration_needs_history() {
        let t = tiers();
        assert!(recalibrate_thresholds(&[], &t, &RecalibrationTargets::default()).is_err());
    }
}
