//! Gradient-based adversarial example generation.
//!
//! Four generators: FGSM (single signed-gradient ascent step), targeted FGSM
//! (signed-gradient descent toward a chosen class), PGD (iterated projected
//! steps), and DeepFool (iterative minimal-l2 boundary crossing via
//! multiclass linearization). All outputs stay inside the unit box.

pub mod training;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, Model};

/// sign with sign(0) = 0: dead gradient components produce no perturbation.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackNorm {
    LInf,
    L2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackParams {
    /// Perturbation budget in feature units.
    pub epsilon: f64,
    /// PGD inner step.
    pub step_size: f64,
    pub iterations: usize,
    /// DeepFool boundary-crossing multiplier.
    pub overshoot: f64,
    pub norm: AttackNorm,
}

impl AttackParams {
    pub fn new(epsilon: f64, step_size: f64, iterations: usize) -> Self {
        AttackParams {
            epsilon,
            step_size,
            iterations,
            overshoot: 0.02,
            norm: AttackNorm::LInf,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::input("epsilon must be a positive real"));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::input("step_size must be a positive real"));
        }
        if self.step_size > self.epsilon {
            return Err(Error::input("step_size must not exceed epsilon"));
        }
        if self.iterations == 0 {
            return Err(Error::input("iterations must be ≥ 1"));
        }
        if !(self.overshoot.is_finite() && self.overshoot >= 0.0) {
            return Err(Error::input("overshoot must be nonnegative"));
        }
        Ok(())
    }
}

fn check_attack_input(model: &Model, x: &[f64]) -> Result<()> {
    if x.len() != model.input_dim() {
        return Err(Error::input(format!(
            "input dimension {} does not match model dimension {}",
            x.len(),
            model.input_dim()
        )));
    }
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::input("attack input must lie in [0,1]^D"));
    }
    Ok(())
}

/// x_adv = clip(x + ε·sign(∇x loss)). ε = 0 returns x unchanged; so does a
/// gradient that is zero everywhere.
pub fn fgsm(model: &Model, x: &[f64], y: usize, epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::input("epsilon must be nonnegative"));
    }
    check_attack_input(model, x)?;
    if epsilon == 0.0 {
        return Ok(x.to_vec());
    }
    let g = model.grad_input(x, y)?;
    Ok(x.iter()
        .zip(&g)
        .map(|(xi, gi)| (xi + epsilon * sign(*gi)).clamp(0.0, 1.0))
        .collect())
}

/// Descent toward the target class: x_adv = clip(x − ε·sign(∇x loss(y_target))).
pub fn targeted_fgsm(model: &Model, x: &[f64], y_target: usize, epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::input("epsilon must be nonnegative"));
    }
    check_attack_input(model, x)?;
    if epsilon == 0.0 {
        return Ok(x.to_vec());
    }
    let g = model.grad_input(x, y_target)?;
    Ok(x.iter()
        .zip(&g)
        .map(|(xi, gi)| (xi - epsilon * sign(*gi)).clamp(0.0, 1.0))
        .collect())
}

/// Projected gradient descent (ascent on the loss): `iterations` signed steps
/// of `step_size`, each projected back onto the ε-ball around x and the unit
/// box. With iterations = 1 and step_size = ε the l_inf variant reproduces
/// FGSM bit for bit.
pub fn pgd(model: &Model, x: &[f64], y: usize, params: &AttackParams) -> Result<Vec<f64>> {
    params.validate()?;
    check_attack_input(model, x)?;
    let mut cur = x.to_vec();
    for _ in 0..params.iterations {
        let g = model.grad_input(&cur, y)?;
        match params.norm {
            AttackNorm::LInf => {
                for i in 0..cur.len() {
                    let stepped = cur[i] + params.step_size * sign(g[i]);
                    let projected = stepped.clamp(x[i] - params.epsilon, x[i] + params.epsilon);
                    cur[i] = projected.clamp(0.0, 1.0);
                }
            }
            AttackNorm::L2 => {
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    break;
                }
                for i in 0..cur.len() {
                    cur[i] += params.step_size * g[i] / norm;
                }
                let mut d: Vec<f64> = cur.iter().zip(x).map(|(c, xi)| c - xi).collect();
                let dnorm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                if dnorm > params.epsilon {
                    let scale = params.epsilon / dnorm;
                    for v in d.iter_mut() {
                        *v *= scale;
                    }
                }
                for i in 0..cur.len() {
                    cur[i] = (x[i] + d[i]).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(cur)
}

#[derive(Debug, Clone)]
pub struct DeepfoolOutcome {
    pub x_adv: Vec<f64>,
    /// Whether the prediction escaped `y` within the iteration budget.
    pub converged: bool,
    pub iterations: usize,
}

/// Iterative minimal-l2 boundary crossing (multiclass linearization). `y` is
/// the class to escape; a point whose argmax already differs from `y` is
/// converged at iteration 0 and returned unchanged. The accumulated
/// perturbation is scaled by (1 + overshoot) and clipped to the unit box.
pub fn deepfool(
    model: &Model,
    x: &[f64],
    y: usize,
    max_iterations: usize,
    overshoot: f64,
) -> Result<DeepfoolOutcome> {
    check_attack_input(model, x)?;
    if y >= model.class_count() {
        return Err(Error::input(format!(
            "class index {y} out of range for {} classes",
            model.class_count()
        )));
    }
    if max_iterations == 0 {
        return Err(Error::input("max_iterations must be ≥ 1"));
    }
    if !(overshoot.is_finite() && overshoot >= 0.0) {
        return Err(Error::input("overshoot must be nonnegative"));
    }

    let k = model.class_count();
    let apply = |r_total: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(r_total)
            .map(|(xi, ri)| xi + (1.0 + overshoot) * ri)
            .collect()
    };
    let clip = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|c| c.clamp(0.0, 1.0)).collect() };

    let mut r_total = vec![0.0; x.len()];
    for iteration in 0..=max_iterations {
        let x_pert = apply(&r_total);
        let logits = model.logits(&x_pert)?;
        if argmax(&logits) != y {
            return Ok(DeepfoolOutcome {
                x_adv: clip(x_pert),
                converged: true,
                iterations: iteration,
            });
        }
        if iteration == max_iterations {
            break;
        }
        let jac = model.logit_jacobian(&x_pert)?;
        // Nearest linearized boundary: minimize |f_j − f_y| / ||w_j − w_y||.
        let mut best: Option<(f64, usize, f64, f64)> = None; // (dist, class, df, wnorm2)
        for j in 0..k {
            if j == y {
                continue;
            }
            let df = logits[j] - logits[y];
            let mut wnorm2 = 0.0;
            for d in 0..x.len() {
                let w = jac[j][d] - jac[y][d];
                wnorm2 += w * w;
            }
            if wnorm2 <= 1e-30 {
                continue;
            }
            let dist = df.abs() / wnorm2.sqrt();
            if best.map_or(true, |(bd, _, _, _)| dist < bd) {
                best = Some((dist, j, df, wnorm2));
            }
        }
        let Some((_, j, df, wnorm2)) = best else {
            // All candidate hyperplanes are degenerate (e.g. a zero model):
            // no direction to move in.
            return Ok(DeepfoolOutcome {
                x_adv: clip(x_pert),
                converged: false,
                iterations: iteration,
            });
        };
        let scale = df.abs() / wnorm2;
        for d in 0..x.len() {
            r_total[d] += scale * (jac[j][d] - jac[y][d]);
        }
    }

    Ok(DeepfoolOutcome {
        x_adv: clip(apply(&r_total)),
        converged: false,
        iterations: max_iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::data::{gaussian_blobs, BlobSpec};
    use crate::model::TrainOptions;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trained_blob_model(dim: usize, classes: usize, seed_value: u64) -> (Model, crate::model::data::Dataset) {
        let spec = BlobSpec {
            dim,
            classes,
            n_train: 400,
            n_validation: 100,
            n_test: 200,
            noise_std: 0.07,
            seed: seed_value,
        };
        let dataset = gaussian_blobs(&spec).unwrap();
        let mut model = Model::new(&[dim, 16, classes], 0.0, seed_value).unwrap();
        model
            .train(&dataset.train, &TrainOptions::new(30, 0.3, 32, seed_value))
            .unwrap();
        (model, dataset)
    }

    #[test]
    fn fgsm_zero_epsilon_returns_input() {
        let (model, dataset) = trained_blob_model(4, 3, 1);
        let x = &dataset.test[0].x;
        assert_eq!(&fgsm(&model, x, dataset.test[0].y, 0.0).unwrap(), x);
    }

    #[test]
    fn fgsm_zero_model_returns_input() {
        let model = Model::zeroed(&[3, 2], 0.0).unwrap();
        let x = vec![0.2, 0.5, 0.8];
        assert_eq!(fgsm(&model, &x, 1, 0.1).unwrap(), x);
    }

    #[test]
    fn fgsm_increases_loss_on_trained_model() {
        let (model, dataset) = trained_blob_model(6, 3, 2);
        let mut ascended = 0;
        for ex in dataset.test.iter().take(200) {
            let x_adv = fgsm(&model, &ex.x, ex.y, 0.1).unwrap();
            if model.loss(&x_adv, ex.y).unwrap() >= model.loss(&ex.x, ex.y).unwrap() {
                ascended += 1;
            }
        }
        assert!(ascended >= 190, "loss ascended on only {ascended}/200 points");
    }

    #[test]
    fn fgsm_respects_budget_and_box() {
        let (model, dataset) = trained_blob_model(5, 3, 3);
        for ex in dataset.test.iter().take(50) {
            let x_adv = fgsm(&model, &ex.x, ex.y, 0.07).unwrap();
            for (a, b) in x_adv.iter().zip(&ex.x) {
                assert!((a - b).abs() <= 0.07 + 1e-9);
                assert!((0.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn targeted_fgsm_descends_toward_target() {
        let (model, dataset) = trained_blob_model(6, 3, 4);
        let mut descended = 0;
        for ex in dataset.test.iter().take(200) {
            let pred = model.predict_class(&ex.x).unwrap();
            let x_adv = targeted_fgsm(&model, &ex.x, pred, 0.05).unwrap();
            let before = model.forward(&ex.x).unwrap()[pred];
            let after = model.forward(&x_adv).unwrap()[pred];
            if after >= before - 1e-12 {
                descended += 1;
            }
        }
        assert!(descended >= 180, "target prob rose on only {descended}/200 points");
    }

    #[test]
    fn pgd_one_step_is_bitwise_fgsm() {
        let (model, dataset) = trained_blob_model(5, 3, 5);
        let params = AttackParams {
            epsilon: 0.08,
            step_size: 0.08,
            iterations: 1,
            overshoot: 0.0,
            norm: AttackNorm::LInf,
        };
        for ex in dataset.test.iter().take(100) {
            let a = pgd(&model, &ex.x, ex.y, &params).unwrap();
            let b = fgsm(&model, &ex.x, ex.y, 0.08).unwrap();
            for (ai, bi) in a.iter().zip(&b) {
                assert_eq!(ai.to_bits(), bi.to_bits());
            }
        }
    }

    #[test]
    fn pgd_dominates_fgsm_with_iterations() {
        let (model, dataset) = trained_blob_model(6, 3, 6);
        let params = AttackParams {
            epsilon: 0.1,
            step_size: 0.025,
            iterations: 10,
            overshoot: 0.0,
            norm: AttackNorm::LInf,
        };
        let mut dominated = 0;
        for ex in dataset.test.iter().take(200) {
            let x_pgd = pgd(&model, &ex.x, ex.y, &params).unwrap();
            let x_fgsm = fgsm(&model, &ex.x, ex.y, 0.1).unwrap();
            if model.loss(&x_pgd, ex.y).unwrap() >= model.loss(&x_fgsm, ex.y).unwrap() - 1e-9 {
                dominated += 1;
            }
        }
        assert!(dominated >= 160, "pgd beat fgsm on only {dominated}/200 points");
    }

    #[test]
    fn pgd_respects_linf_budget() {
        let (model, dataset) = trained_blob_model(5, 3, 7);
        let params = AttackParams {
            epsilon: 0.06,
            step_size: 0.02,
            iterations: 12,
            overshoot: 0.0,
            norm: AttackNorm::LInf,
        };
        for ex in dataset.test.iter().take(100) {
            let x_adv = pgd(&model, &ex.x, ex.y, &params).unwrap();
            for (a, b) in x_adv.iter().zip(&ex.x) {
                assert!((a - b).abs() <= 0.06 + 1e-9);
                assert!((0.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn pgd_l2_respects_budget() {
        let (model, dataset) = trained_blob_model(5, 3, 8);
        let params = AttackParams {
            epsilon: 0.15,
            step_size: 0.05,
            iterations: 10,
            overshoot: 0.0,
            norm: AttackNorm::L2,
        };
        for ex in dataset.test.iter().take(50) {
            let x_adv = pgd(&model, &ex.x, ex.y, &params).unwrap();
            let d: f64 = x_adv
                .iter()
                .zip(&ex.x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(d <= 0.15 + 1e-9);
        }
    }

    #[test]
    fn pgd_validates_params() {
        let model = Model::zeroed(&[2, 2], 0.0).unwrap();
        let bad = AttackParams {
            epsilon: 0.05,
            step_size: 0.1,
            iterations: 3,
            overshoot: 0.0,
            norm: AttackNorm::LInf,
        };
        assert!(pgd(&model, &[0.5, 0.5], 0, &bad).is_err());
        let zero_iter = AttackParams {
            epsilon: 0.1,
            step_size: 0.05,
            iterations: 0,
            overshoot: 0.0,
            norm: AttackNorm::LInf,
        };
        assert!(pgd(&model, &[0.5, 0.5], 0, &zero_iter).is_err());
    }

    #[test]
    fn deepfool_returns_misclassified_point_unchanged() {
        let (model, dataset) = trained_blob_model(5, 3, 9);
        // Find a test point and ask deepfool to escape a label it does not
        // currently predict.
        let ex = &dataset.test[0];
        let pred = model.predict_class(&ex.x).unwrap();
        let other = (pred + 1) % 3;
        let outcome = deepfool(&model, &ex.x, other, 10, 0.02).unwrap();
        assert!(outcome.converged);
        assert_eq!(outcome.iterations, 0);
        assert_eq!(outcome.x_adv, ex.x);
    }

    /// Two-class linear model: one DeepFool iteration lands on the analytic
    /// distance-to-hyperplane, scaled by (1 + overshoot).
    #[test]
    fn deepfool_matches_analytic_hyperplane_distance() {
        // Logits: z0 = w0·x, z1 = w1·x + b. Decision boundary where
        // (w1−w0)·x + b = 0; distance from x is |(w1−w0)·x + b| / ||w1−w0||.
        let mut model = Model::zeroed(&[2, 2], 0.0).unwrap();
        // weights row-major: w0 = (1, 0), w1 = (0, 1.5); biases (0, -0.3)
        model
            .set_flat_params(&[1.0, 0.0, 0.0, 1.5, 0.0, -0.3])
            .unwrap();
        let x = vec![0.6, 0.2];
        let y = model.predict_class(&x).unwrap();
        assert_eq!(y, 0); // z0 = 0.6, z1 = 0.0

        let overshoot = 0.1;
        let outcome = deepfool(&model, &x, y, 20, overshoot).unwrap();
        assert!(outcome.converged);
        assert_eq!(outcome.iterations, 1);

        let w_diff: [f64; 2] = [0.0 - 1.0, 1.5 - 0.0];
        let f_diff = (0.0 * x[0] + 1.5 * x[1] - 0.3) - (1.0 * x[0]);
        let analytic = f_diff.abs() / (w_diff[0] * w_diff[0] + w_diff[1] * w_diff[1]).sqrt();
        let moved: f64 = outcome
            .x_adv
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let expected = analytic * (1.0 + overshoot);
        assert!(
            (moved - expected).abs() < 1e-6,
            "moved {moved}, expected {expected}"
        );
        // And the prediction flipped.
        assert_ne!(model.predict_class(&outcome.x_adv).unwrap(), y);
    }

    #[test]
    fn deepfool_perturbations_smaller_than_fgsm_at_flip() {
        let (model, dataset) = trained_blob_model(6, 3, 10);
        let mut df_norms = Vec::new();
        let mut fgsm_norms = Vec::new();
        for ex in dataset.test.iter().take(100) {
            if model.predict_class(&ex.x).unwrap() != ex.y {
                continue;
            }
            let outcome = deepfool(&model, &ex.x, ex.y, 30, 0.02).unwrap();
            if !outcome.converged {
                continue;
            }
            // Smallest epsilon on a grid at which FGSM flips the prediction.
            let mut flip_norm = None;
            for step in 1..=30 {
                let eps = step as f64 * 0.01;
                let x_adv = fgsm(&model, &ex.x, ex.y, eps).unwrap();
                if model.predict_class(&x_adv).unwrap() != ex.y {
                    flip_norm = Some(l2(&x_adv, &ex.x));
                    break;
                }
            }
            if let Some(fn_) = flip_norm {
                df_norms.push(l2(&outcome.x_adv, &ex.x));
                fgsm_norms.push(fn_);
            }
        }
        assert!(df_norms.len() >= 30, "too few comparable points: {}", df_norms.len());
        let m_df = median(&mut df_norms);
        let m_fgsm = median(&mut fgsm_norms);
        assert!(
            m_df < m_fgsm,
            "deepfool median {m_df} not below fgsm-at-flip median {m_fgsm}"
        );
    }

    #[test]
    fn deepfool_zero_model_reports_non_convergence() {
        let model = Model::zeroed(&[3, 2], 0.0).unwrap();
        let outcome = deepfool(&model, &[0.2, 0.4, 0.6], 0, 5, 0.02).unwrap();
        assert!(!outcome.converged);
        assert_eq!(outcome.x_adv, vec![0.2, 0.4, 0.6]);
    }

    #[test]
    fn attacks_reject_out_of_box_inputs() {
        let model = Model::zeroed(&[2, 2], 0.0).unwrap();
        assert!(fgsm(&model, &[0.5, 1.2], 0, 0.1).is_err());
        assert!(targeted_fgsm(&model, &[-0.1, 0.5], 0, 0.1).is_err());
        assert!(deepfool(&model, &[0.5, 2.0], 0, 5, 0.0).is_err());
    }

    #[test]
    fn attack_outputs_stay_in_box_on_random_inputs() {
        let (model, _) = trained_blob_model(4, 3, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = AttackParams {
            epsilon: 0.3,
            step_size: 0.1,
            iterations: 5,
            overshoot: 0.0,
            norm: AttackNorm::LInf,
        };
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let y = (rng.random::<u32>() % 3) as usize;
            for out in [
                fgsm(&model, &x, y, 0.3).unwrap(),
                targeted_fgsm(&model, &x, y, 0.3).unwrap(),
                pgd(&model, &x, y, &params).unwrap(),
                deepfool(&model, &x, y, 10, 0.05).unwrap().x_adv,
            ] {
                assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    fn l2(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    fn median(values: &mut [f64]) -> f64 {
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values[values.len() / 2]
    }
}
