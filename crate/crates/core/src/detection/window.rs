//! Per-session behavioral windows.
//!
//! Queries are segmented into fixed time intervals per session. Each window
//! accumulates a count, per-dimension feature variance (Welford), and a
//! histogram of predicted classes. A window is compared against a benign
//! reference along three axes: histogram KL divergence, query rate, and
//! feature variance (extraction streams are often either near-duplicate
//! replays or unnaturally repetitive in prediction space).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default rate-anomaly multiplier: a window is anomalous when its count
/// exceeds this multiple of the expected per-interval rate.
pub const DEFAULT_RATE_MULTIPLIER: f64 = 3.0;

/// One session's activity within one time interval.
#[derive(Debug, Clone)]
pub struct BehaviorWindow {
    session_id: String,
    start_ms: u64,
    interval_ms: u64,
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    histogram: Vec<u64>,
}

impl BehaviorWindow {
    pub fn new(
        session_id: impl Into<String>,
        start_ms: u64,
        interval_ms: u64,
        dim: usize,
        classes: usize,
    ) -> Result<Self> {
        if interval_ms == 0 {
            return Err(Error::input("window interval must be positive"));
        }
        if dim == 0 || classes < 2 {
            return Err(Error::input("window needs dim ≥ 1 and ≥ 2 classes"));
        }
        Ok(BehaviorWindow {
            session_id: session_id.into(),
            start_ms,
            interval_ms,
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            histogram: vec![0; classes],
        })
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn start_ms(&self) -> u64 {
        self.start_ms
    }

    pub fn interval_ms(&self) -> u64 {
        self.interval_ms
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn histogram(&self) -> &[u64] {
        &self.histogram
    }

    pub fn contains(&self, timestamp_ms: u64) -> bool {
        timestamp_ms >= self.start_ms && timestamp_ms < self.start_ms + self.interval_ms
    }

    /// Mean over dimensions of the per-dimension population variance.
    pub fn feature_variance(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let dim = self.mean.len() as f64;
        self.m2.iter().map(|v| v / self.count as f64).sum::<f64>() / dim
    }

    /// Record a query. The caller must have rotated to a window covering the
    /// timestamp first; an out-of-interval timestamp is a contract error.
    pub fn update(&mut self, timestamp_ms: u64, features: &[f64], predicted_class: usize) -> Result<()> {
        if !self.contains(timestamp_ms) {
            return Err(Error::input(format!(
                "timestamp {timestamp_ms} outside window [{}, {}): rotate first",
                self.start_ms,
                self.start_ms + self.interval_ms
            )));
        }
        if features.len() != self.mean.len() {
            return Err(Error::input(format!(
                "feature dimension {} does not match window dimension {}",
                features.len(),
                self.mean.len()
            )));
        }
        if predicted_class >= self.histogram.len() {
            return Err(Error::input(format!(
                "predicted class {predicted_class} out of range"
            )));
        }
        self.count += 1;
        let n = self.count as f64;
        for i in 0..features.len() {
            let delta = features[i] - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (features[i] - self.mean[i]);
        }
        self.histogram[predicted_class] += 1;
        Ok(())
    }

    /// Start a fresh window for the interval covering `timestamp_ms`,
    /// aligned to this window's interval grid.
    pub fn successor(&self, timestamp_ms: u64) -> BehaviorWindow {
        let elapsed = timestamp_ms.saturating_sub(self.start_ms);
        let steps = elapsed / self.interval_ms;
        let start = self.start_ms + steps * self.interval_ms;
        BehaviorWindow {
            session_id: self.session_id.clone(),
            start_ms: start,
            interval_ms: self.interval_ms,
            count: 0,
            mean: vec![0.0; self.mean.len()],
            m2: vec![0.0; self.m2.len()],
            histogram: vec![0; self.histogram.len()],
        }
    }
}

/// The benign traffic baseline a window is judged against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BehaviorReference {
    /// Expected queries per interval from an honest session.
    pub expected_rate: f64,
    /// Expected distribution of predicted classes.
    pub reference_histogram: Vec<f64>,
    /// Windows with feature variance below this (and at least two queries)
    /// are anomalous: near-duplicate probing.
    pub min_variance: f64,
    /// Rate-anomaly multiplier; fixed default 3, config-overridable.
    #[serde(default = "default_rate_multiplier")]
    pub rate_multiplier: f64,
}

fn default_rate_multiplier() -> f64 {
    DEFAULT_RATE_MULTIPLIER
}

impl BehaviorReference {
    pub fn validate(&self) -> Result<()> {
        if !(self.expected_rate.is_finite() && self.expected_rate > 0.0) {
            return Err(Error::input("expected_rate must be positive"));
        }
        if self.reference_histogram.len() < 2 {
            return Err(Error::input("reference histogram needs ≥ 2 classes"));
        }
        let sum: f64 = self.reference_histogram.iter().sum();
        if self
            .reference_histogram
            .iter()
            .any(|p| !p.is_finite() || *p < 0.0)
            || (sum - 1.0).abs() > 1e-6
        {
            return Err(Error::input(
                "reference histogram must be a probability vector",
            ));
        }
        if !(self.min_variance.is_finite() && self.min_variance >= 0.0) {
            return Err(Error::input("min_variance must be nonnegative"));
        }
        if !(self.rate_multiplier.is_finite() && self.rate_multiplier > 0.0) {
            return Err(Error::input("rate_multiplier must be positive"));
        }
        Ok(())
    }
}

/// Behavioral comparison of one window against the benign reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehavioralAssessment {
    pub kl: f64,
    pub rate_anomaly: bool,
    pub variance_anomaly: bool,
}

impl BehavioralAssessment {
    pub fn none() -> Self {
        BehavioralAssessment {
            kl: 0.0,
            rate_anomaly: false,
            variance_anomaly: false,
        }
    }

    pub fn any_anomaly(&self) -> bool {
        self.rate_anomaly || self.variance_anomaly
    }
}

/// KL divergence between the window's smoothed prediction histogram and the
/// reference, plus the rate and variance anomaly flags.
///
/// Add-one smoothing on the window side, p_i = (n_i + 1)/(N + K); the
/// reference is scaled to the same count and smoothed identically,
/// q_i = (r_i·N + 1)/(N + K), which keeps KL(p‖p) at exactly zero and
/// handles zero reference entries.
pub fn behavioral_score(
    window: &BehaviorWindow,
    reference: &BehaviorReference,
) -> Result<BehavioralAssessment> {
    reference.validate()?;
    if window.count() == 0 {
        return Err(Error::input("behavioral score needs a window with ≥ 1 query"));
    }
    if reference.reference_histogram.len() != window.histogram.len() {
        return Err(Error::input(format!(
            "reference has {} classes, window has {}",
            reference.reference_histogram.len(),
            window.histogram.len()
        )));
    }
    let n = window.count() as f64;
    let k = window.histogram.len() as f64;
    let norm = n + k;
    let mut kl = 0.0;
    for (count, r) in window.histogram.iter().zip(&reference.reference_histogram) {
        let p = (*count as f64 + 1.0) / norm;
        let q = (r * n + 1.0) / norm;
        kl += p * (p / q).ln();
    }
    // Gibbs' inequality guarantees kl ≥ 0; rounding can leave a tiny
    // negative residue when the distributions coincide.
    let kl = kl.max(0.0);

    let rate_anomaly = n > reference.rate_multiplier * reference.expected_rate;
    // A single query has no meaningful variance; require two before calling
    // the stream unnaturally repetitive.
    let variance_anomaly = window.count() >= 2 && window.feature_variance() < reference.min_variance;
    Ok(BehavioralAssessment {
        kl,
        rate_anomaly,
        variance_anomaly,
    })
}

/// Query disposition: drives the response tiering and escalation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Benign,
    Suspicious,
    Malicious,
}

impl std::fmt::Display for Disposition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Disposition::Benign => "benign",
            Disposition::Suspicious => "suspicious",
            Disposition::Malicious => "malicious",
        };
        f.write_str(s)
    }
}

/// Fuse the per-query uncertainty flag with the behavioral anomalies:
/// benign when neither fires, malicious when both do, suspicious in between.
pub fn classify_query(
    u: f64,
    tau: f64,
    behavioral: &BehavioralAssessment,
) -> Disposition {
    let uncertain = u > tau;
    let anomalous = behavioral.any_anomaly();
    match (uncertain, anomalous) {
        (false, false) => Disposition::Benign,
        (true, true) => Disposition::Malicious,
        _ => Disposition::Suspicious,
    }
}
