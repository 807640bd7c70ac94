//! Central-difference gradient checking.
//!
//! The generic checker compares an analytic gradient against
//! `(f(x + e) - f(x - e)) / 2e` coordinate by coordinate. The loss check
//! builds seeded random prediction tensors around a small grid and verifies
//! each loss component and the weighted total in one sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::assignment::{assign, AssignParams, Assignment, Geometry};
use crate::dataset::{AnnotatedInstance, Source};
use crate::embedding::{invert_target, AnchorSet, GridSpec, RawPrediction, DEFAULT_STRIDES};
use crate::error::{Error, Result};
use crate::kinds::{Box2D, OrientationAngle};
use crate::losses::{
    near_nonsmooth, total_loss_assigned, ImageInput, LossConfig, LossWeights, TargetGradient,
};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `max_i |a_i - n_i| / max(1e-8, |n_i|)`; zero for empty input.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1e-8))
        .fold(0.0, f64::max)
}

/// Central differences of a vector-valued function, one row per coordinate.
pub fn central_differences<const K: usize>(
    mut f: impl FnMut(&[f64]) -> [f64; K],
    x: &[f64],
    eps: f64,
) -> Vec<[f64; K]> {
    central_differences_split(|p| f(p).map(|v| (v, 0.0)), x, eps)
}

/// As [`central_differences`] for functions returning `(value, residual)`
/// pairs whose sum is more precise than `value` alone. The high parts of
/// nearby evaluations subtract exactly, so the residuals carry the extra
/// digits into the difference.
pub fn central_differences_split<const K: usize>(
    mut f: impl FnMut(&[f64]) -> [(f64, f64); K],
    x: &[f64],
    eps: f64,
) -> Vec<[f64; K]> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe);
        probe[i] = x[i] - eps;
        let lo = f(&probe);
        probe[i] = x[i];
        let mut d = [0.0; K];
        for k in 0..K {
            d[k] = ((hi[k].0 - lo[k].0) + (hi[k].1 - lo[k].1)) / (2.0 * eps);
        }
        out.push(d);
    }
    out
}

/// Max relative error between `analytic` and the central difference of `f`
/// at `x`.
pub fn gradcheck(mut f: impl FnMut(&[f64]) -> f64, analytic: &[f64], x: &[f64], eps: f64) -> f64 {
    let numeric: Vec<f64> = central_differences(|p| [f(p)], x, eps)
        .into_iter()
        .map(|[d]| d)
        .collect();
    max_relative_error(analytic, &numeric)
}

// ---------------------------------------------------------------------------
// loss check

/// 64x64 input, strides 8..64, anchors sized for it.
pub fn check_geometry() -> Geometry {
    let anchors = AnchorSet::new([
        [(4.0, 8.0), (6.0, 12.0), (8.0, 16.0)],
        [(10.0, 20.0), (12.0, 28.0), (16.0, 32.0)],
        [(20.0, 40.0), (24.0, 48.0), (32.0, 56.0)],
        [(40.0, 60.0), (48.0, 64.0), (56.0, 64.0)],
    ])
    .expect("valid anchors");
    Geometry {
        grid: GridSpec::new(64, 64, DEFAULT_STRIDES).expect("valid grid"),
        anchors,
        assign: AssignParams::default(),
    }
}

#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub gts: Vec<AnnotatedInstance>,
    pub raw: RawPrediction,
    pub assignment: Assignment,
}

/// 1-4 persons; matched channels sit near their ideal logits, the rest are
/// drawn wide.
pub fn random_instance(geom: &Geometry, rng: &mut impl Rng) -> Result<RandomInstance> {
    let (iw, ih) = geom.grid.input_size();
    let n = rng.random_range(1..=4);
    let mut gts = Vec::with_capacity(n);
    for k in 0..n {
        let h = rng.random_range(8.0..56.0);
        let w = h * rng.random_range(0.35..0.6);
        let cx = rng.random_range(w / 2.0..iw as f64 - w / 2.0);
        let cy = rng.random_range(h / 2.0..ih as f64 - h / 2.0);
        gts.push(AnnotatedInstance {
            image_id: 0,
            annotation_id: k as u64,
            bbox: Box2D::new(cx, cy, w, h)?,
            orientation: Some(OrientationAngle::from_degrees(rng.random_range(0.0..360.0))?),
            weak: false,
            source: Source::OrientationBenchmark,
        });
    }
    let assignment = assign(&gts, &geom.grid, &geom.anchors, &geom.assign)?;
    let wide = Normal::new(0.0, 1.5).expect("valid sigma");
    let near = Normal::new(0.0, 0.7).expect("valid sigma");
    let mut raw = RawPrediction::zeros(&geom.grid);
    for v in raw.as_mut_slice() {
        *v = wide.sample(rng);
    }
    for m in &assignment.matches {
        let ideal = invert_target(&m.target, &m.channel, &geom.grid, &geom.anchors, 0.0)?;
        for (dst, ideal) in raw.logits_mut(&m.channel).iter_mut().zip(ideal) {
            *dst = ideal + near.sample(rng);
        }
    }
    Ok(RandomInstance {
        gts,
        raw,
        assignment,
    })
}

/// Weight selections isolating each component, then the configured total.
fn component_configs(cfg: &LossConfig) -> [LossConfig; 4] {
    let only = |alpha, beta, lambda| LossConfig {
        weights: LossWeights {
            alpha,
            beta,
            lambda,
            tau: cfg.weights.tau,
        },
        ..*cfg
    };
    [only(1.0, 0.0, 0.0), only(0.0, 1.0, 0.0), only(0.0, 0.0, 1.0), *cfg]
}

pub const COMPONENT_NAMES: [&str; 4] = ["objectness", "box", "orientation", "total"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCheck {
    pub seed: u64,
    /// Per component, ordered as [`COMPONENT_NAMES`].
    pub max_error: [f64; 4],
    /// Instances drawn before one cleared the non-smooth screen.
    pub attempts: usize,
    pub positives: usize,
}

impl LossCheck {
    pub fn worst(&self) -> f64 {
        self.max_error.iter().copied().fold(0.0, f64::max)
    }
}

const MAX_ATTEMPTS: usize = 50;

/// Gradient check of every loss component at a seeded random instance.
/// The exact target gradient is always used: a detached target is a
/// surrogate with no finite-difference counterpart.
pub fn check_loss_gradients(seed: u64, cfg: &LossConfig, eps: f64) -> Result<LossCheck> {
    let cfg = &LossConfig {
        target_gradient: TargetGradient::Exact,
        ..*cfg
    };
    let geom = check_geometry();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 1..=MAX_ATTEMPTS {
        let inst = random_instance(&geom, &mut rng)?;
        let input = [ImageInput {
            raw: &inst.raw,
            assignment: &inst.assignment,
        }];
        if near_nonsmooth(&input, &geom, cfg, eps)? {
            continue;
        }
        let analytic = component_configs(cfg)
            .map(|c| total_loss_assigned(&input, &geom, &c).map(|b| b.gradient[0].as_slice().to_vec()));
        let mut probe = inst.raw.clone();
        let x = inst.raw.as_slice().to_vec();
        let mut failure = None;
        let numeric = central_differences_split(
            |p| {
                probe.as_mut_slice().copy_from_slice(p);
                let input = [ImageInput {
                    raw: &probe,
                    assignment: &inst.assignment,
                }];
                match total_loss_assigned(&input, &geom, cfg) {
                    Ok(b) => [
                        (b.objectness, b.residual[0]),
                        (b.box_loss, b.residual[1]),
                        (b.orientation, b.residual[2]),
                        (b.total, b.residual[3]),
                    ],
                    Err(e) => {
                        failure.get_or_insert(e);
                        [(f64::NAN, 0.0); 4]
                    }
                }
            },
            &x,
            eps,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let mut max_error = [0.0; 4];
        for (k, a) in analytic.into_iter().enumerate() {
            let a = a?;
            let n: Vec<f64> = numeric.iter().map(|row| row[k]).collect();
            max_error[k] = max_relative_error(&a, &n);
        }
        return Ok(LossCheck {
            seed,
            max_error,
            attempts: attempt,
            positives: inst.assignment.matches.len(),
        });
    }
    Err(Error::NoSmoothPoint {
        seed,
        attempts: MAX_ATTEMPTS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{orientation_loss, OrientationDistance, OrientationTerm, Reduction};

    #[test]
    fn quadratic_sanity() {
        // f = sum c_i x_i^2 + x_0 x_1
        let c = [1.0, -2.0, 0.5, 3.0];
        let f = |x: &[f64]| c.iter().zip(x).map(|(c, x)| c * x * x).sum::<f64>() + x[0] * x[1];
        let x = [0.3, -1.2, 2.0, 0.7];
        let grad = [2.0 * c[0] * x[0] + x[1], 2.0 * c[1] * x[1] + x[0], 2.0 * c[2] * x[2], 2.0 * c[3] * x[3]];
        assert!(gradcheck(f, &grad, &x, DEFAULT_EPS) < 1e-9);
        let wrong = [grad[0], grad[1], grad[2], grad[3] * 1.01];
        assert!(gradcheck(f, &wrong, &x, DEFAULT_EPS) > 1e-3);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(max_relative_error(&[1e-9], &[0.0]), 1e-9 / 1e-8);
        assert_eq!(max_relative_error(&[], &[]), 0.0);
    }

    fn orientation_branch(d: f64, distance: OrientationDistance) -> f64 {
        // prediction sigmoid(l), target placed so the signed raw gap is d
        let target = 0.2;
        let l0 = crate::embedding::logit(target + d);
        let f = |x: &[f64]| {
            orientation_loss(
                &[OrientationTerm {
                    scale: 0,
                    objectness: 0.9,
                    predicted: crate::embedding::sigmoid(x[0]),
                    target,
                }],
                0.2,
                distance,
                Reduction::PerScaleMean,
            )
            .value
        };
        let analytic = orientation_loss(
            &[OrientationTerm {
                scale: 0,
                objectness: 0.9,
                predicted: crate::embedding::sigmoid(l0),
                target,
            }],
            0.2,
            distance,
            Reduction::PerScaleMean,
        )
        .d_logit[0];
        gradcheck(f, &[analytic], &[l0], DEFAULT_EPS)
    }

    #[test]
    fn orientation_wrap_branches() {
        for distance in [OrientationDistance::Squared, OrientationDistance::Absolute] {
            for d in [0.49, 0.51] {
                let e = orientation_branch(d, distance);
                assert!(e < DEFAULT_TOLERANCE, "{distance:?} d={d}: {e}");
            }
        }
    }

    #[test]
    fn loss_gradients_few_seeds() {
        let cfg = LossConfig::default();
        for seed in 0..5 {
            let r = check_loss_gradients(seed, &cfg, DEFAULT_EPS).unwrap();
            assert!(r.worst() < DEFAULT_TOLERANCE, "{r:?}");
            assert!(r.positives > 0);
        }
    }

    #[test]
    fn detects_broken_gradient() {
        // scaling one component's weight in the analytic path only must fail
        let geom = check_geometry();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = random_instance(&geom, &mut rng).unwrap();
        let input = [ImageInput {
            raw: &inst.raw,
            assignment: &inst.assignment,
        }];
        let cfg = LossConfig {
            target_gradient: TargetGradient::Exact,
            ..Default::default()
        };
        let mut skewed = cfg;
        skewed.weights.beta *= 1.5;
        let analytic = total_loss_assigned(&input, &geom, &skewed).unwrap().gradient[0]
            .as_slice()
            .to_vec();
        let mut probe = inst.raw.clone();
        let e = gradcheck(
            |p| {
                probe.as_mut_slice().copy_from_slice(p);
                total_loss_assigned(
                    &[ImageInput {
                        raw: &probe,
                        assignment: &inst.assignment,
                    }],
                    &geom,
                    &cfg,
                )
                .unwrap()
                .total
            },
            &analytic,
            inst.raw.as_slice(),
            DEFAULT_EPS,
        );
        assert!(e > 1e-2, "{e}");
    }
}
