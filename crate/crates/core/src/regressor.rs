//! Desk-scale stand-in for fine-tuning a detector with the asymmetric loss.
//!
//! A simulated detector predicts every ground-truth box with a random
//! relative size error. Training learns one correction offset per dimension
//! (width, height) by full-batch gradient descent on the asymmetric loss of
//! the relative residuals. Because the loss has slope `sqrt(alpha)` below
//! zero and `1/sqrt(alpha)` above it, the learned offset sits at the
//! `alpha / (1 + alpha)` quantile of the correction targets, so that share
//! of the corrected predictions ends up larger than the ground truth.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coco::{DatasetBundle, Detection};
use crate::eval::{coco_thresholds, evaluate, ApReport, EvalError};
use crate::geometry::{resize_centered, GeometryError, SizeCategory};
use crate::loss::AsymmetricLossParams;

/// Stop once the mean gradient magnitude falls below this.
pub const GRADIENT_TOLERANCE: f64 = 1e-6;

/// Relative sizes are floored here so a noisy prediction never collapses.
const MIN_RELATIVE_SIZE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegressError {
    #[error("no targets to fit")]
    EmptyTargets,
    #[error("learning rate must be finite and > 0, got {0}")]
    InvalidLearningRate(f64),
    #[error("iteration budget must be > 0")]
    NoIterations,
    #[error("invalid noise configuration: {0}")]
    InvalidNoise(String),
    #[error("gradient descent did not converge in {iterations} iterations (|mean gradient| = {gradient:e})")]
    NonConvergence { iterations: usize, gradient: f64 },
    #[error("dataset has no ground-truth objects")]
    EmptyBundle,
    #[error("image {0} referenced by the ground truth is missing")]
    MissingImage(u64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalarFit {
    pub offset: f64,
    pub iterations: usize,
    pub final_gradient: f64,
}

/// Minimizes `mean(loss(w - t))` over `targets` by gradient descent with a
/// fixed step, starting from the target mean.
pub fn fit_scalar(
    targets: &[f64],
    p: &AsymmetricLossParams,
    lr: f64,
    iters: usize,
) -> Result<ScalarFit, RegressError> {
    if targets.is_empty() {
        return Err(RegressError::EmptyTargets);
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(RegressError::InvalidLearningRate(lr));
    }
    if iters == 0 {
        return Err(RegressError::NoIterations);
    }
    let n = targets.len() as f64;
    let mut w = targets.iter().sum::<f64>() / n;
    let mut g = f64::INFINITY;
    for it in 0..iters {
        g = targets.iter().map(|&t| p.gradient(w - t)).sum::<f64>() / n;
        if g.abs() < GRADIENT_TOLERANCE {
            return Ok(ScalarFit {
                offset: w,
                iterations: it,
                final_gradient: g,
            });
        }
        w -= lr * g;
    }
    Err(RegressError::NonConvergence {
        iterations: iters,
        gradient: g,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseDistribution {
    /// Uniform on `[-half_width, half_width]`.
    Uniform { half_width: f64 },
    Gaussian { sigma: f64 },
}

impl NoiseDistribution {
    fn validate(&self) -> Result<(), RegressError> {
        match *self {
            NoiseDistribution::Uniform { half_width } if !(half_width.is_finite() && half_width > 0.0) => {
                Err(RegressError::InvalidNoise(format!("uniform half width {half_width}")))
            }
            NoiseDistribution::Gaussian { sigma } if !(sigma.is_finite() && sigma > 0.0) => {
                Err(RegressError::InvalidNoise(format!("gaussian sigma {sigma}")))
            }
            _ => Ok(()),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            NoiseDistribution::Uniform { half_width } => rng.random_range(-half_width..=half_width),
            NoiseDistribution::Gaussian { sigma } => Normal::new(0.0, sigma).expect("validated sigma").sample(rng),
        }
    }
}

impl std::str::FromStr for NoiseDistribution {
    type Err = RegressError;

    /// `uniform:<half_width>` or `gaussian:<sigma>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || RegressError::InvalidNoise(format!("expected uniform:<w> or gaussian:<sigma>, got {s:?}"));
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        let value: f64 = value.trim().parse().map_err(|_| bad())?;
        let d = match kind.trim() {
            "uniform" => NoiseDistribution::Uniform { half_width: value },
            "gaussian" => NoiseDistribution::Gaussian { sigma: value },
            _ => return Err(bad()),
        };
        d.validate()?;
        Ok(d)
    }
}

/// Relative prediction noise of the simulated detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub distribution: NoiseDistribution,
    pub seed: u64,
    /// Draw width and height errors independently. When false one error
    /// per object scales both sides.
    #[serde(default)]
    pub per_dimension: bool,
}

impl NoiseConfig {
    pub fn new(distribution: NoiseDistribution, seed: u64) -> Self {
        Self {
            distribution,
            seed,
            per_dimension: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SizeBreakdown {
    pub objects: usize,
    pub fraction_larger: f64,
    pub mean_scale_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionOutcome {
    pub alpha: f64,
    pub beta: f64,
    pub width_offset: ScalarFit,
    pub height_offset: ScalarFit,
    /// Share of predictions whose area exceeds the ground truth's.
    pub fraction_larger: f64,
    /// Mean of predicted area / ground-truth area.
    pub mean_scale_ratio: f64,
    pub per_size: BTreeMap<SizeCategory, SizeBreakdown>,
    pub ap: ApReport,
    #[serde(skip)]
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimulationSettings {
    pub lr: f64,
    pub iters: usize,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self { lr: 0.01, iters: 100_000 }
    }
}

struct ObjectDraw {
    width_error: f64,
    height_error: f64,
    confidence: f64,
}

fn draw_noise(n: usize, noise: &NoiseConfig) -> Vec<ObjectDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    (0..n)
        .map(|_| {
            let width_error = noise.distribution.sample(&mut rng);
            let height_error = if noise.per_dimension {
                noise.distribution.sample(&mut rng)
            } else {
                width_error
            };
            let confidence = rng.random::<f64>();
            ObjectDraw {
                width_error,
                height_error,
                confidence,
            }
        })
        .collect()
}

/// Trains the correction offsets on `bundle`'s ground truth and evaluates
/// the corrected predictions. Identical inputs give bit-identical output.
pub fn simulate_detector(
    bundle: &DatasetBundle,
    noise: &NoiseConfig,
    p: &AsymmetricLossParams,
    settings: SimulationSettings,
) -> Result<RegressionOutcome, RegressError> {
    noise.distribution.validate()?;
    let gts = &bundle.ground_truth;
    if gts.is_empty() {
        return Err(RegressError::EmptyBundle);
    }
    let draws = draw_noise(gts.len(), noise);

    // Residual of a corrected prediction is error + offset, so the offset
    // targets are the negated errors.
    let width_targets: Vec<f64> = draws.iter().map(|d| -d.width_error).collect();
    let width_offset = fit_scalar(&width_targets, p, settings.lr, settings.iters)?;
    let height_offset = if noise.per_dimension {
        let targets: Vec<f64> = draws.iter().map(|d| -d.height_error).collect();
        fit_scalar(&targets, p, settings.lr, settings.iters)?
    } else {
        width_offset
    };

    let mut detections = Vec::with_capacity(gts.len());
    let mut larger = 0usize;
    let mut ratio_sum = 0.0;
    let mut by_size: BTreeMap<SizeCategory, (usize, usize, f64)> = BTreeMap::new();
    for (gt, d) in gts.iter().zip(&draws) {
        let img = bundle.image_size(gt.image_id).ok_or(RegressError::MissingImage(gt.image_id))?;
        let rw = (1.0 + d.width_error + width_offset.offset).max(MIN_RELATIVE_SIZE);
        let rh = (1.0 + d.height_error + height_offset.offset).max(MIN_RELATIVE_SIZE);
        let bbox = resize_centered(&gt.bbox, gt.bbox.width() * rw, gt.bbox.height() * rh, &img)?;
        let ratio = bbox.area() / gt.bbox.area();
        let is_larger = bbox.area() > gt.bbox.area();
        larger += is_larger as usize;
        ratio_sum += ratio;
        let entry = by_size.entry(gt.size_category).or_default();
        entry.0 += 1;
        entry.1 += is_larger as usize;
        entry.2 += ratio;
        detections.push(Detection {
            image_id: gt.image_id,
            category_id: gt.category_id,
            bbox,
            confidence: d.confidence,
        });
    }

    let n = gts.len() as f64;
    let per_size = by_size
        .into_iter()
        .map(|(size, (count, lg, rs))| {
            (
                size,
                SizeBreakdown {
                    objects: count,
                    fraction_larger: lg as f64 / count as f64,
                    mean_scale_ratio: rs / count as f64,
                },
            )
        })
        .collect();
    let ap = evaluate(&detections, bundle, &coco_thresholds())?;

    Ok(RegressionOutcome {
        alpha: p.alpha(),
        beta: p.beta(),
        width_offset,
        height_offset,
        fraction_larger: larger as f64 / n,
        mean_scale_ratio: ratio_sum / n,
        per_size,
        ap,
        detections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coco::{GroundTruthObject, ImageRecord};
    use crate::geometry::{BBox, ImageSize};

    fn params(a: f64, b: f64) -> AsymmetricLossParams {
        AsymmetricLossParams::new(a, b).unwrap()
    }

    #[test]
    fn constant_targets_are_a_fixed_point() {
        for alpha in [1.0, 4.0, 100.0] {
            let fit = fit_scalar(&[2.5; 50], &params(alpha, 0.1), 0.1, 100).unwrap();
            assert_eq!(fit.offset, 2.5);
            assert_eq!(fit.iterations, 0);
        }
    }

    #[test]
    fn symmetric_loss_lands_on_the_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t: Vec<f64> = (0..2001).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fit = fit_scalar(&t, &params(1.0, 0.01), 0.1, 10_000).unwrap();
        t.sort_by(f64::total_cmp);
        let median = t[1000];
        // standard error of the median of U(-1,1): 1 / (2 f sqrt(n)) with f = 1/2
        let se = 1.0 / (2.0 * 0.5 * (t.len() as f64).sqrt());
        assert!((fit.offset - median).abs() < 2.0 * se, "{} vs {median}", fit.offset);
    }

    #[test]
    fn fit_errors() {
        let p = params(1.0, 1.0);
        assert_eq!(fit_scalar(&[], &p, 0.1, 10), Err(RegressError::EmptyTargets));
        assert_eq!(fit_scalar(&[1.0], &p, 0.0, 10), Err(RegressError::InvalidLearningRate(0.0)));
        assert_eq!(fit_scalar(&[1.0], &p, 0.1, 0), Err(RegressError::NoIterations));
        let err = fit_scalar(&[0.0, 0.0, 100.0], &p, 1e-6, 3).unwrap_err();
        assert!(matches!(err, RegressError::NonConvergence { iterations: 3, .. }));
    }

    #[test]
    fn noise_parsing() {
        assert_eq!(
            "uniform:0.2".parse::<NoiseDistribution>().unwrap(),
            NoiseDistribution::Uniform { half_width: 0.2 }
        );
        assert_eq!(
            "gaussian:0.1".parse::<NoiseDistribution>().unwrap(),
            NoiseDistribution::Gaussian { sigma: 0.1 }
        );
        assert!("uniform".parse::<NoiseDistribution>().is_err());
        assert!("laplace:1".parse::<NoiseDistribution>().is_err());
        assert!("uniform:-1".parse::<NoiseDistribution>().is_err());
    }

    fn grid_bundle(n: usize) -> DatasetBundle {
        let images = vec![ImageRecord {
            image_id: 1,
            file_name: "grid.jpg".into(),
            size: ImageSize::new(10_000.0, 10_000.0).unwrap(),
        }];
        let gts = (0..n)
            .map(|i| {
                let side = 10.0 + (i % 13) as f64 * 10.0;
                let cx = 150.0 + (i % 40) as f64 * 240.0;
                let cy = 150.0 + (i / 40) as f64 * 240.0;
                GroundTruthObject::new(i as u64, 1, 1, BBox::from_center(cx, cy, side, side * 0.8).unwrap())
            })
            .collect();
        DatasetBundle::new(images, gts, [(1, "thing".to_string())].into_iter().collect()).unwrap()
    }

    #[test]
    fn symmetric_simulation_is_balanced() {
        let b = grid_bundle(800);
        let noise = NoiseConfig::new(NoiseDistribution::Uniform { half_width: 0.15 }, 3);
        let out = simulate_detector(&b, &noise, &params(1.0, 0.01), SimulationSettings::default()).unwrap();
        assert!((out.fraction_larger - 0.5).abs() < 0.06, "{}", out.fraction_larger);
        assert!((out.mean_scale_ratio - 1.0).abs() < 0.02, "{}", out.mean_scale_ratio);
        assert_eq!(out.per_size.values().map(|s| s.objects).sum::<usize>(), 800);
    }

    #[test]
    fn simulation_is_deterministic() {
        let b = grid_bundle(300);
        let mut noise = NoiseConfig::new(NoiseDistribution::Gaussian { sigma: 0.1 }, 11);
        noise.per_dimension = true;
        let p = params(10.0, 0.01);
        let a = simulate_detector(&b, &noise, &p, SimulationSettings::default()).unwrap();
        let c = simulate_detector(&b, &noise, &p, SimulationSettings::default()).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.detections, c.detections);
        assert!(a.fraction_larger > 0.75);
    }

    #[test]
    fn empty_bundle_is_rejected() {
        let b = DatasetBundle::new(vec![], vec![], BTreeMap::new()).unwrap();
        let noise = NoiseConfig::new(NoiseDistribution::Uniform { half_width: 0.1 }, 1);
        assert_eq!(
            simulate_detector(&b, &noise, &params(1.0, 0.01), SimulationSettings::default()),
            Err(RegressError::EmptyBundle)
        );
    }
}
