//! Image-quality scoring and the quality gate.
//!
//! The gate turns a per-image quality score into the blend weight `alpha`
//! used by twin adapters: calibrate a threshold `t = mu + sigma` on scores
//! sampled from the fine-tuning dataset, then map a query's score `q` to
//! `alpha = clamp(0.5 + (q - t), 0, 1)`. Scores equal to the threshold sit
//! exactly at 0.5; higher-quality images push weight onto the high-quality
//! adapter. Scores are plain data: nothing here participates in gradients.
//!
//! Estimators must report scores in `[0, 1]`; [`QualityEstimator::score`]
//! normalizes the raw value through an affine map from the estimator's
//! nominal range, so third-party estimators with other scales plug in
//! without touching calibration math.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PetalError, Result};
use crate::imaging::{block_grid_excess, gaussian_blur, laplacian, variance, ImageBuf};

/// Per-image quality score source.
///
/// Implementations must be deterministic: the same image yields the same
/// score. `Send + Sync` so extraction and training can share one instance.
pub trait QualityEstimator: Send + Sync {
    fn name(&self) -> &str;

    /// Inclusive raw-score bounds used to normalize into `[0, 1]`.
    fn nominal_range(&self) -> (f64, f64);

    fn raw_score(&self, image: &ImageBuf) -> Result<f64>;

    /// Normalized score in `[0, 1]`.
    fn score(&self, image: &ImageBuf) -> Result<f64> {
        let (lo, hi) = self.nominal_range();
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(PetalError::Config(format!(
                "estimator {} has invalid nominal range ({lo}, {hi})",
                self.name()
            )));
        }
        let raw = self.raw_score(image)?;
        if !raw.is_finite() {
            return Err(PetalError::Numeric(format!(
                "estimator {} produced non-finite raw score",
                self.name()
            )));
        }
        Ok(((raw - lo) / (hi - lo)).clamp(0.0, 1.0))
    }
}

/// Light pre-smoothing applied before the Laplacian response.
const SHARPNESS_SMOOTHING_SIGMA: f64 = 1.0;
/// Weight of the high-frequency residual penalty (suppresses the score on
/// noisy images, which would otherwise look "sharp" to a pure Laplacian).
const SHARPNESS_RESIDUAL_WEIGHT: f64 = 4.0;
/// Weight of the block-grid penalty (suppresses the score on heavily
/// compressed images, whose texture loss would otherwise read as clean).
const SHARPNESS_BLOCKINESS_WEIGHT: f64 = 1.0;
/// Additive floor that sets the operating point of the squash.
const SHARPNESS_FLOOR: f64 = 0.002;

/// Default no-reference sharpness estimator.
///
/// Score = `s / (s + w * r + b * g + k)` where `s` is the variance of the
/// discrete Laplacian response of the lightly smoothed luminance plane,
/// `r` is the mean squared high-frequency residual (image minus its
/// smoothed version), and `g` is the 8x8 block-boundary energy excess from
/// [`block_grid_excess`]. The residual term penalizes additive noise,
/// which inflates a raw Laplacian-variance score; the block term penalizes
/// coarse compression, which *removes* residual energy and would otherwise
/// raise the score. The fixed squash is monotone in `s`, maps a constant
/// image to exactly 0, and stays inside `[0, 1)`.
///
/// The score orders clearly separated degradation levels; differences of
/// a couple of percent (a half-pixel blur, a mild recompression of a small
/// image) sit inside its discrimination floor and carry no meaning.
#[derive(Clone, Copy, Debug, Default)]
pub struct SharpnessEstimator;

impl SharpnessEstimator {
    pub const NAME: &'static str = "builtin-sharpness";
}

impl QualityEstimator for SharpnessEstimator {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn nominal_range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn raw_score(&self, image: &ImageBuf) -> Result<f64> {
        let luma = image.luma();
        let smoothed = gaussian_blur(&luma, SHARPNESS_SMOOTHING_SIGMA);
        let structure = variance(&laplacian(&smoothed));
        let residual = (&luma - &smoothed).mapv(|v| v * v).mean().unwrap_or(0.0);
        let blockiness = block_grid_excess(&luma);
        Ok(structure
            / (structure
                + SHARPNESS_RESIDUAL_WEIGHT * residual
                + SHARPNESS_BLOCKINESS_WEIGHT * blockiness
                + SHARPNESS_FLOOR))
    }
}

/// Builds the estimator registered under `name`.
pub fn estimator_by_name(name: &str) -> Result<Box<dyn QualityEstimator>> {
    match name {
        SharpnessEstimator::NAME => Ok(Box::new(SharpnessEstimator)),
        other => Err(PetalError::Config(format!(
            "unknown quality estimator '{other}'"
        ))),
    }
}

/// Frozen gate statistics from one calibration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateCalibration {
    pub mu: f64,
    pub sigma: f64,
    pub threshold: f64,
    pub sample_count: usize,
    pub estimator: String,
    pub seed: u64,
}

/// Samples `sample_count` images (uniform, without replacement when the
/// dataset is large enough, with replacement otherwise), scores them, and
/// freezes `threshold = mu + sigma` with population statistics.
pub fn calibrate(
    images: &[ImageBuf],
    estimator: &dyn QualityEstimator,
    sample_count: usize,
    seed: u64,
) -> Result<GateCalibration> {
    if images.is_empty() {
        return Err(PetalError::Input("calibration dataset is empty".into()));
    }
    if sample_count == 0 {
        return Err(PetalError::Config("calibration sample count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if sample_count <= images.len() {
        rand::seq::index::sample(&mut rng, images.len(), sample_count).into_vec()
    } else {
        (0..sample_count)
            .map(|_| rng.random_range(0..images.len()))
            .collect()
    };
    let mut scores = Vec::with_capacity(picks.len());
    for i in picks {
        scores.push(estimator.score(&images[i])?);
    }
    Ok(calibration_from_scores(&scores, estimator.name(), seed))
}

/// Population mean/std over already-normalized scores.
pub fn calibration_from_scores(scores: &[f64], estimator: &str, seed: u64) -> GateCalibration {
    // A constant score set has sigma exactly 0 and mu exactly that score;
    // summation rounding must not leave an ulp of fake spread.
    if scores.iter().all(|&s| s == scores[0]) {
        return GateCalibration {
            mu: scores[0],
            sigma: 0.0,
            threshold: scores[0],
            sample_count: scores.len(),
            estimator: estimator.to_string(),
            seed,
        };
    }
    let l = scores.len() as f64;
    let mu = scores.iter().sum::<f64>() / l;
    let sigma = (scores.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / l).sqrt();
    GateCalibration {
        mu,
        sigma,
        threshold: mu + sigma,
        sample_count: scores.len(),
        estimator: estimator.to_string(),
        seed,
    }
}

/// Blend weight for a quality score against a calibrated threshold:
/// `clamp(0.5 + (q - t), 0, 1)`.
///
/// The single expression covers the three regimes (below, at, above the
/// threshold): at `q == t` it is exactly 0.5, and each unit of score
/// distance shifts the weight by the same amount in either direction.
pub fn alpha_from_quality(q: f64, calibration: &GateCalibration) -> Result<f64> {
    if !q.is_finite() {
        return Err(PetalError::Gating(format!("quality score {q} is not finite")));
    }
    if !calibration.threshold.is_finite() {
        return Err(PetalError::Gating(format!(
            "calibration threshold {} is not finite",
            calibration.threshold
        )));
    }
    Ok((0.5 + (q - calibration.threshold)).clamp(0.0, 1.0))
}

const CALIBRATION_KEYS: [&str; 6] = ["mu", "sigma", "threshold", "l", "estimator", "seed"];

impl GateCalibration {
    /// Plain-text artifact: one `key=value` per line, fixed key order, full
    /// round-trip float precision.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mu={}", self.mu);
        let _ = writeln!(out, "sigma={}", self.sigma);
        let _ = writeln!(out, "threshold={}", self.threshold);
        let _ = writeln!(out, "l={}", self.sample_count);
        let _ = writeln!(out, "estimator={}", self.estimator);
        let _ = writeln!(out, "seed={}", self.seed);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PetalError::Corrupt(format!(
                    "calibration line {} is not key=value: '{line}'",
                    lineno + 1
                ))
            })?;
            fields.insert(key.to_string(), value.to_string());
        }
        for key in CALIBRATION_KEYS {
            if !fields.contains_key(key) {
                return Err(PetalError::Corrupt(format!(
                    "calibration text is missing key '{key}'"
                )));
            }
        }
        let parse_f64 = |key: &str| -> Result<f64> {
            fields[key].parse::<f64>().map_err(|_| {
                PetalError::Corrupt(format!("calibration key '{key}' is not a float"))
            })
        };
        Ok(GateCalibration {
            mu: parse_f64("mu")?,
            sigma: parse_f64("sigma")?,
            threshold: parse_f64("threshold")?,
            sample_count: fields["l"]
                .parse()
                .map_err(|_| PetalError::Corrupt("calibration key 'l' is not an integer".into()))?,
            estimator: fields["estimator"].clone(),
            seed: fields["seed"]
                .parse()
                .map_err(|_| PetalError::Corrupt("calibration key 'seed' is not an integer".into()))?,
        })
    }

    pub fn write_text_file(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn read_text_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
