//! Labeled examples, dataset splits, synthetic generators, CSV io.
//!
//! Features live in the unit box [0,1]^D so the clipping step after
//! adversarial perturbation is well-defined everywhere.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub x: Vec<f64>,
    pub y: usize,
}

impl LabeledExample {
    pub fn new(x: Vec<f64>, y: usize, classes: usize) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::input("feature vector must be non-empty"));
        }
        if let Some(bad) = x.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::input(format!(
                "feature {bad} outside the unit interval"
            )));
        }
        if y >= classes {
            return Err(Error::input(format!(
                "class index {y} out of range for {classes} classes"
            )));
        }
        Ok(LabeledExample { x, y })
    }
}

/// Train/validation/test splits sharing one feature dimension and class count.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub dim: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn from_splits(
        train: Vec<LabeledExample>,
        validation: Vec<LabeledExample>,
        test: Vec<LabeledExample>,
        dim: usize,
        classes: usize,
    ) -> Result<Self> {
        if dim == 0 || classes < 2 {
            return Err(Error::input("dataset needs dim ≥ 1 and at least 2 classes"));
        }
        for split in [&train, &validation, &test] {
            for ex in split {
                if ex.x.len() != dim {
                    return Err(Error::input(format!(
                        "example dimension {} does not match dataset dimension {dim}",
                        ex.x.len()
                    )));
                }
                if ex.y >= classes {
                    return Err(Error::input(format!(
                        "label {} out of range for {classes} classes",
                        ex.y
                    )));
                }
            }
        }
        Ok(Dataset {
            train,
            validation,
            test,
            dim,
            classes,
        })
    }
}

/// Parameters for the Gaussian-blob generator.
#[derive(Debug, Clone)]
pub struct BlobSpec {
    pub dim: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            dim: 20,
            classes: 4,
            n_train: 4000,
            n_validation: 1000,
            n_test: 1000,
            noise_std: 0.08,
            seed: 7,
        }
    }
}

/// One Gaussian cluster per class, centers kept pairwise separated, points
/// clipped into the unit box. Labels cycle through classes so every split is
/// balanced.
pub fn gaussian_blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.dim == 0 || spec.classes < 2 {
        return Err(Error::input("blobs need dim ≥ 1 and at least 2 classes"));
    }
    if !(spec.noise_std.is_finite() && spec.noise_std >= 0.0) {
        return Err(Error::input("noise_std must be a nonnegative real"));
    }
    let centers = blob_centers(spec.dim, spec.classes, spec.noise_std, spec.seed)?;
    let noise = Normal::new(0.0, spec.noise_std.max(1e-12))
        .map_err(|e| Error::input(format!("bad noise parameter: {e}")))?;

    let make_split = |n: usize, tag: u64| -> Vec<LabeledExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &[0xB10B, tag]));
        (0..n)
            .map(|i| {
                let y = i % spec.classes;
                let x = centers[y]
                    .iter()
                    .map(|c| (c + noise.sample(&mut rng)).clamp(0.0, 1.0))
                    .collect();
                LabeledExample { x, y }
            })
            .collect()
    };

    let train = make_split(spec.n_train, 1);
    let validation = make_split(spec.n_validation, 2);
    let test = make_split(spec.n_test, 3);
    Dataset::from_splits(train, validation, test, spec.dim, spec.classes)
}

/// Blob centers for a *shifted* distribution over the same feature space:
/// same geometry routine, different seed stream. Used as attacker surrogate
/// data standing in for a related-but-different natural dataset.
pub fn shifted_blobs(spec: &BlobSpec, shift_tag: u64) -> Result<Dataset> {
    let mut shifted = spec.clone();
    shifted.seed = seed::derive(spec.seed, &[0x5F1F7, shift_tag]);
    gaussian_blobs(&shifted)
}

fn blob_centers(dim: usize, classes: usize, noise_std: f64, base_seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(base_seed, &[0xCE17E25]));
    // Separation scales with noise so clusters stay distinguishable; the
    // 0.35 floor keeps low-noise configurations from packing centers.
    let min_dist = (6.0 * noise_std).max(0.35);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0usize;
    while centers.len() < classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::input(format!(
                "could not place {classes} blob centers at pairwise distance {min_dist:.3} in dimension {dim}"
            )));
        }
        let cand: Vec<f64> = (0..dim).map(|_| 0.2 + 0.6 * rng.random::<f64>()).collect();
        let ok = centers.iter().all(|c| euclidean(c, &cand) >= min_dist);
        if ok {
            centers.push(cand);
        }
    }
    Ok(centers)
}

/// Two interleaved half-circles embedded in the first two dimensions,
/// remaining dimensions filled with noise around 0.5. Always two classes.
pub fn two_moons(
    dim: usize,
    n_train: usize,
    n_validation: usize,
    n_test: usize,
    noise_std: f64,
    seed_value: u64,
) -> Result<Dataset> {
    if dim < 2 {
        return Err(Error::input("two_moons needs dim ≥ 2"));
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::input("noise_std must be a nonnegative real"));
    }
    let noise = Normal::new(0.0, noise_std.max(1e-12))
        .map_err(|e| Error::input(format!("bad noise parameter: {e}")))?;

    let make_split = |n: usize, tag: u64| -> Vec<LabeledExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed_value, &[0x30075, tag]));
        (0..n)
            .map(|i| {
                let y = i % 2;
                let t = std::f64::consts::PI * rng.random::<f64>();
                // Raw moon coordinates span roughly [-1, 2] x [-0.7, 1.2];
                // map into the unit box with margin for noise.
                let (mx, my) = if y == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let mut x = vec![0.0; dim];
                x[0] = ((mx + 1.2) / 3.4 + noise.sample(&mut rng)).clamp(0.0, 1.0);
                x[1] = ((my + 0.9) / 2.4 + noise.sample(&mut rng)).clamp(0.0, 1.0);
                for slot in x.iter_mut().skip(2) {
                    *slot = (0.5 + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
                LabeledExample { x, y }
            })
            .collect()
    };

    let train = make_split(n_train, 1);
    let validation = make_split(n_validation, 2);
    let test = make_split(n_test, 3);
    Dataset::from_splits(train, validation, test, dim, 2)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Read labeled examples from a CSV file: D feature columns then one integer
/// label column. No header row.
pub fn read_examples_csv(path: &Path, classes: usize) -> Result<Vec<LabeledExample>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    let mut dim: Option<usize> = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        if record.len() < 2 {
            return Err(Error::format(format!(
                "{}: row {} needs at least one feature and a label",
                path.display(),
                line + 1
            )));
        }
        let d = record.len() - 1;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::format(format!(
                    "{}: row {} has {d} features, expected {expected}",
                    path.display(),
                    line + 1
                )))
            }
            _ => {}
        }
        let mut x = Vec::with_capacity(d);
        for field in record.iter().take(d) {
            let v: f64 = field.parse().map_err(|_| {
                Error::format(format!(
                    "{}: row {}: feature {field:?} is not a number",
                    path.display(),
                    line + 1
                ))
            })?;
            x.push(v);
        }
        let y: usize = record[d].parse().map_err(|_| {
            Error::format(format!(
                "{}: row {}: label {:?} is not a class index",
                path.display(),
                line + 1,
                &record[d]
            ))
        })?;
        out.push(LabeledExample::new(x, y, classes)?);
    }
    Ok(out)
}

/// Write labeled examples as CSV (features then label, no header).
pub fn write_examples_csv(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    for ex in examples {
        let mut row: Vec<String> = ex.x.iter().map(|v| format!("{v}")).collect();
        row.push(ex.y.to_string());
        writer
            .write_record(&row)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Read unlabeled query vectors. Rows may carry a trailing label column
/// (dim + 1 fields); it is dropped.
pub fn read_queries_csv(path: &Path, dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let take = if record.len() == dim {
            dim
        } else if record.len() == dim + 1 {
            dim
        } else {
            return Err(Error::format(format!(
                "{}: row {} has {} fields, expected {dim} or {}",
                path.display(),
                line + 1,
                record.len(),
                dim + 1
            )));
        };
        let mut x = Vec::with_capacity(take);
        for field in record.iter().take(take) {
            let v: f64 = field.parse().map_err(|_| {
                Error::format(format!(
                    "{}: row {}: feature {field:?} is not a number",
                    path.display(),
                    line + 1
                ))
            })?;
            x.push(v);
        }
        out.push(x);
    }
    Ok(out)
}
