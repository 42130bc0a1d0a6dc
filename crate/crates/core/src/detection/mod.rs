//! Per-query uncertainty scoring.
//!
//! A query's composite uncertainty fuses four signals: top-probability
//! deficit, normalized prediction entropy, top-two margin deficit, and Monte
//! Carlo dropout dispersion. Entropy is normalized by ln K and σ capped at
//! 0.5 (the largest possible standard deviation of values in [0,1]) so every
//! term lies in [0,1] and the flagging threshold τ is interpretable no matter
//! the class count.

pub mod window;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, PROB_FLOOR};
use crate::seed;

/// Mixing weights and the flagging threshold for the composite score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub tau: f64,
}

impl UncertaintyWeights {
    pub fn uniform(tau: f64) -> Self {
        UncertaintyWeights {
            alpha1: 0.25,
            alpha2: 0.25,
            alpha3: 0.25,
            alpha4: 0.25,
            tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let alphas = [self.alpha1, self.alpha2, self.alpha3, self.alpha4];
        if alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::input("weights must be nonnegative reals"));
        }
        let sum: f64 = alphas.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::input(format!(
                "weights must sum to 1 (got {sum})"
            )));
        }
        if !self.tau.is_finite() {
            return Err(Error::input("tau must be finite"));
        }
        Ok(())
    }
}

/// The composite score with every component that went into it. The
/// normalized fields are stored alongside the raw ones so the combination
/// can be re-verified from the breakdown alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBreakdown {
    pub p_max: f64,
    /// Raw prediction entropy in [0, ln K].
    pub entropy: f64,
    /// entropy / ln K, in [0, 1].
    pub entropy_norm: f64,
    pub margin: f64,
    /// Raw MC-dropout dispersion.
    pub sigma: f64,
    /// min(sigma / 0.5, 1), in [0, 1].
    pub sigma_norm: f64,
    pub u: f64,
}

impl UncertaintyBreakdown {
    /// Recombine the stored components under the given weights.
    pub fn combine(&self, w: &UncertaintyWeights) -> f64 {
        w.alpha1 * (1.0 - self.p_max)
            + w.alpha2 * self.entropy_norm
            + w.alpha3 * (1.0 - self.margin)
            + w.alpha4 * self.sigma_norm
    }
}

fn check_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::input("probability vector is empty"));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::input("probability vector has negative or non-finite entries"));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-4 {
        return Err(Error::input(format!(
            "probability vector sums to {sum}, not 1"
        )));
    }
    Ok(())
}

/// Shannon entropy −Σ p ln p, probabilities floored at 1e-12 inside the log.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    check_probs(probs)?;
    Ok(probs
        .iter()
        .map(|p| -p * p.max(PROB_FLOOR).ln())
        .sum())
}

/// Difference between the largest and second-largest probabilities.
pub fn margin(probs: &[f64]) -> Result<f64> {
    check_probs(probs)?;
    if probs.len() < 2 {
        return Err(Error::input("margin needs at least 2 classes"));
    }
    let (mut top, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in probs {
        if p > top {
            second = top;
            top = p;
        } else if p > second {
            second = p;
        }
    }
    Ok(top - second)
}

/// Composite uncertainty from raw components. `classes` supplies the ln K
/// entropy normalizer.
pub fn uncertainty_score(
    p_max: f64,
    entropy_raw: f64,
    margin: f64,
    sigma: f64,
    classes: usize,
    weights: &UncertaintyWeights,
) -> Result<UncertaintyBreakdown> {
    weights.validate()?;
    if classes < 2 {
        return Err(Error::input("uncertainty needs at least 2 classes"));
    }
    if !(0.0..=1.0).contains(&p_max) || !p_max.is_finite() {
        return Err(Error::input(format!("p_max {p_max} outside [0,1]")));
    }
    let ln_k = (classes as f64).ln();
    if !entropy_raw.is_finite() || entropy_raw < 0.0 || entropy_raw > ln_k + 1e-9 {
        return Err(Error::input(format!(
            "entropy {entropy_raw} outside [0, ln {classes}]"
        )));
    }
    if !(0.0..=1.0).contains(&margin) || !margin.is_finite() {
        return Err(Error::input(format!("margin {margin} outside [0,1]")));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::input(format!("sigma {sigma} must be nonnegative")));
    }
    let entropy_norm = (entropy_raw / ln_k).clamp(0.0, 1.0);
    let sigma_norm = (sigma / 0.5).min(1.0);
    let breakdown = UncertaintyBreakdown {
        p_max,
        entropy: entropy_raw,
        entropy_norm,
        margin,
        sigma,
        sigma_norm,
        u: 0.0,
    };
    let u = breakdown.combine(weights);
    Ok(UncertaintyBreakdown { u, ..breakdown })
}

/// Composite uncertainty of a full probability vector plus an MC dispersion.
pub fn score_probs(
    probs: &[f64],
    sigma: f64,
    weights: &UncertaintyWeights,
) -> Result<UncertaintyBreakdown> {
    check_probs(probs)?;
    let p_max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let h = entropy(probs)?;
    let m = margin(probs)?;
    // Guard against entropy landing a hair above ln K through the floor.
    let ln_k = (probs.len() as f64).ln();
    uncertainty_score(p_max.min(1.0), h.min(ln_k), m, sigma, probs.len(), weights)
}

/// Score a query against a model: deterministic forward probabilities plus,
/// when the σ term carries weight and the model has dropout, an MC-dropout
/// dispersion estimate. The response path keeps using the deterministic
/// probabilities; sampling only informs σ.
pub fn score_query(
    model: &Model,
    x: &[f64],
    weights: &UncertaintyWeights,
    mc_samples: usize,
    seed_value: u64,
) -> Result<UncertaintyBreakdown> {
    let probs = model.forward(x)?;
    let sigma = if weights.alpha4 > 0.0 && model.dropout_rate() > 0.0 && mc_samples >= 2 {
        model
            .mc_dropout_predict(x, mc_samples, seed::derive(seed_value, &[0x516A]))?
            .1
    } else {
        0.0
    };
    score_probs(&probs, sigma, weights)
}

/// Calibration result: the selected weights/threshold and how well they
/// separated the two populations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub weights: UncertaintyWeights,
    pub balanced_accuracy: f64,
    pub true_positive_rate: f64,
    pub false_positive_rate: f64,
    /// Set when the populations were statistically indistinguishable and the
    /// returned weights are a uniform fallback.
    pub low_confidence: bool,
}

/// Grid-search mixing weights (step 0.1 over the simplex) and τ (step 0.01)
/// to maximize balanced accuracy separating benign from adversarial scores.
/// Ties break toward lower false-positive rate, then lexicographically
/// smallest (α1, α2, α3, α4, τ).
pub fn calibrate(
    benign: &[UncertaintyBreakdown],
    adversarial: &[UncertaintyBreakdown],
) -> Result<CalibrationOutcome> {
    if benign.is_empty() || adversarial.is_empty() {
        return Err(Error::input("calibration needs both populations non-empty"));
    }

    // Per-sample component vectors in combination order.
    let components = |b: &UncertaintyBreakdown| {
        [1.0 - b.p_max, b.entropy_norm, 1.0 - b.margin, b.sigma_norm]
    };
    let benign_c: Vec<[f64; 4]> = benign.iter().map(components).collect();
    let adv_c: Vec<[f64; 4]> = adversarial.iter().map(components).collect();

    struct Best {
        ba: f64,
        fpr: f64,
        tpr: f64,
        weights: UncertaintyWeights,
    }
    let mut best: Option<Best> = None;
    let mut worst_ba = f64::INFINITY;

    let mut benign_u = vec![0.0; benign_c.len()];
    let mut adv_u = vec![0.0; adv_c.len()];
    for i1 in 0..=10u32 {
        for i2 in 0..=(10 - i1) {
            for i3 in 0..=(10 - i1 - i2) {
                let i4 = 10 - i1 - i2 - i3;
                let a = [
                    i1 as f64 / 10.0,
                    i2 as f64 / 10.0,
                    i3 as f64 / 10.0,
                    i4 as f64 / 10.0,
                ];
                for (u, c) in benign_u.iter_mut().zip(&benign_c) {
                    *u = a[0] * c[0] + a[1] * c[1] + a[2] * c[2] + a[3] * c[3];
                }
                for (u, c) in adv_u.iter_mut().zip(&adv_c) {
                    *u = a[0] * c[0] + a[1] * c[1] + a[2] * c[2] + a[3] * c[3];
                }
                for t in 0..=100u32 {
                    let tau = t as f64 / 100.0;
                    let tn = benign_u.iter().filter(|u| **u <= tau).count();
                    let tp = adv_u.iter().filter(|u| **u > tau).count();
                    let tnr = tn as f64 / benign_u.len() as f64;
                    let tpr = tp as f64 / adv_u.len() as f64;
                    let ba = 0.5 * (tnr + tpr);
                    let fpr = 1.0 - tnr;
                    if ba < worst_ba {
                        worst_ba = ba;
                    }
                    let better = match &best {
                        None => true,
                        Some(b) => ba > b.ba || (ba == b.ba && fpr < b.fpr),
                    };
                    if better {
                        best = Some(Best {
                            ba,
                            fpr,
                            tpr,
                            weights: UncertaintyWeights {
                                alpha1: a[0],
                                alpha2: a[1],
                                alpha3: a[2],
                                alpha4: a[3],
                                tau,
                            },
                        });
                    }
                }
            }
        }
    }
    let best = best.expect("grid is non-empty");

    if best.ba <= 0.55 {
        // Nothing separates the populations in the flagging direction. If the
        // *inverted* rule would separate them well, the caller swapped the
        // inputs; otherwise the populations are indistinguishable.
        let inverted_ba = 1.0 - worst_ba;
        if inverted_ba >= 0.75 {
            return Err(Error::Calibration(format!(
                "populations appear inverted: flagging low-uncertainty queries would reach \
                 balanced accuracy {inverted_ba:.3}; check the benign/adversarial inputs"
            )));
        }
        let uniform = UncertaintyWeights::uniform(0.0);
        let us: Vec<f64> = benign_c
            .iter()
            .chain(&adv_c)
            .map(|c| 0.25 * (c[0] + c[1] + c[2] + c[3]))
            .collect();
        let min = us.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = us.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        return Ok(CalibrationOutcome {
            weights: UncertaintyWeights {
                tau: 0.5 * (min + max),
                ..uniform
            },
            balanced_accuracy: best.ba,
            true_positive_rate: best.tpr,
            false_positive_rate: best.fpr,
            low_confidence: true,
        });
    }

    Ok(CalibrationOutcome {
        weights: best.weights,
        balanced_accuracy: best.ba,
        true_positive_rate: best.tpr,
        false_positive_rate: best.fpr,
        low_confidence: false,
    })
}
