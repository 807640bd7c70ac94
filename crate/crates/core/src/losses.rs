//! Training losses with analytic gradients with respect to the raw logits.
//!
//! * objectness: BCE of every channel's objectness against `clamp(CIoU, 0, 1)`
//!   on positive channels and 0 elsewhere,
//! * box: `1 - CIoU` over positive channels,
//! * orientation: wrapped squared distance over positive channels whose
//!   current objectness exceeds `tau`,
//!
//! combined as `alpha * obj + beta * box + lambda * ori`. Each component is a
//! per-scale mean averaged over the scales that contribute at least one term.
//!
//! Gradients are exact derivatives of these functions, including the path from
//! the box logits through the CIoU-valued objectness target. The `p > tau`
//! indicator is a hard gate and passes no gradient to the objectness logit.

use serde::{Deserialize, Serialize};

use crate::assignment::{assign, Assignment, Geometry};
use crate::dataset::AnnotatedInstance;
use crate::embedding::{
    decode_with_jacobian, DecodeJacobian, Field, RawPrediction, UnifiedEmbedding, NUM_SCALES,
};
use crate::error::{Error, Result};
use crate::kinds::{edge_margin, overlap_with_grad, Box2D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.05,
            lambda: 0.05,
            tau: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss.{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!(
                "loss.tau must lie in [0, 1), got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrientationDistance {
    /// `d^2`
    #[default]
    Squared,
    /// `|d|`
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Mean within each scale, then mean over scales with at least one term.
    #[default]
    PerScaleMean,
    /// Plain sum over all terms.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectnessTarget {
    #[default]
    Ciou,
    Iou,
}

/// Whether the objectness BCE target passes gradient back to the box logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetGradient {
    /// Target treated as a constant, as in common detector training.
    #[default]
    Detached,
    /// Exact derivative of the loss, including the target's dependence on
    /// the predicted box.
    Exact,
}

/// Serialized flat: the weight keys sit next to the switches.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "FlatLossConfig", into = "FlatLossConfig")]
pub struct LossConfig {
    pub weights: LossWeights,
    pub orientation_distance: OrientationDistance,
    pub reduction: Reduction,
    pub objectness_target: ObjectnessTarget,
    pub target_gradient: TargetGradient,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatLossConfig {
    #[serde(default = "default_alpha")]
    alpha: f64,
    #[serde(default = "default_beta")]
    beta: f64,
    #[serde(default = "default_lambda")]
    lambda: f64,
    #[serde(default = "default_tau")]
    tau: f64,
    #[serde(default)]
    orientation_distance: OrientationDistance,
    #[serde(default)]
    reduction: Reduction,
    #[serde(default)]
    objectness_target: ObjectnessTarget,
    #[serde(default)]
    target_gradient: TargetGradient,
}

fn default_alpha() -> f64 {
    LossWeights::default().alpha
}
fn default_beta() -> f64 {
    LossWeights::default().beta
}
fn default_lambda() -> f64 {
    LossWeights::default().lambda
}
fn default_tau() -> f64 {
    LossWeights::default().tau
}

impl From<FlatLossConfig> for LossConfig {
    fn from(f: FlatLossConfig) -> Self {
        Self {
            weights: LossWeights {
                alpha: f.alpha,
                beta: f.beta,
                lambda: f.lambda,
                tau: f.tau,
            },
            orientation_distance: f.orientation_distance,
            reduction: f.reduction,
            objectness_target: f.objectness_target,
            target_gradient: f.target_gradient,
        }
    }
}

impl From<LossConfig> for FlatLossConfig {
    fn from(c: LossConfig) -> Self {
        Self {
            alpha: c.weights.alpha,
            beta: c.weights.beta,
            lambda: c.weights.lambda,
            tau: c.weights.tau,
            orientation_distance: c.orientation_distance,
            reduction: c.reduction,
            objectness_target: c.objectness_target,
            target_gradient: c.target_gradient,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()
    }
}

/// Per-term multipliers implementing a [`Reduction`] over scale-tagged terms.
fn term_scales(scales: impl Iterator<Item = usize>, mask: &[bool], reduction: Reduction) -> Vec<f64> {
    let scales: Vec<usize> = scales.collect();
    match reduction {
        Reduction::Sum => scales
            .iter()
            .zip(mask)
            .map(|(_, &m)| if m { 1.0 } else { 0.0 })
            .collect(),
        Reduction::PerScaleMean => {
            let mut counts = [0usize; NUM_SCALES];
            for (s, &m) in scales.iter().zip(mask) {
                if m {
                    counts[*s] += 1;
                }
            }
            let active = counts.iter().filter(|&&c| c > 0).count();
            scales
                .iter()
                .zip(mask)
                .map(|(s, &m)| {
                    if m {
                        1.0 / (counts[*s] as f64 * active as f64)
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    }
}

/// Error-free running sum: `hi + lo` carries the exact total of the added
/// values up to second-order rounding.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Compensated {
    hi: f64,
    lo: f64,
}

impl Compensated {
    fn add(&mut self, x: f64) {
        let s = self.hi + x;
        let bp = s - self.hi;
        self.lo += (self.hi - (s - bp)) + (x - bp);
        self.hi = s;
    }

    fn scaled(self, w: f64) -> Self {
        let p = w * self.hi;
        Self {
            hi: p,
            lo: w.mul_add(self.hi, -p) + w * self.lo,
        }
    }

    /// Rounded value and what the rounding dropped.
    fn split(self) -> (f64, f64) {
        let v = self.hi + self.lo;
        (v, (self.hi - v) + self.lo)
    }
}

// ---------------------------------------------------------------------------
// orientation

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientationTerm {
    pub scale: usize,
    /// Current decoded objectness, used only by the `tau` gate.
    pub objectness: f64,
    /// Decoded unit orientation in `(0, 1)`.
    pub predicted: f64,
    /// Target unit orientation in `[0, 1)`.
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrientationLoss {
    pub value: f64,
    /// Rounding residual of `value`; see [`LossBreakdown::residual`].
    pub residual: f64,
    /// Gradient with respect to each term's orientation logit.
    pub d_logit: Vec<f64>,
    pub contributing: usize,
}

/// Wrapped difference and `d(distance)/d(predicted)`.
fn wrapped_with_slope(predicted: f64, target: f64) -> (f64, f64) {
    let d = predicted - target;
    let sign = if d >= 0.0 { 1.0 } else { -1.0 };
    if d.abs() <= 0.5 {
        (d.abs(), sign)
    } else {
        (1.0 - d.abs(), -sign)
    }
}

pub fn orientation_loss(
    terms: &[OrientationTerm],
    tau: f64,
    distance: OrientationDistance,
    reduction: Reduction,
) -> OrientationLoss {
    let mask: Vec<bool> = terms.iter().map(|t| t.objectness > tau).collect();
    let mult = term_scales(terms.iter().map(|t| t.scale), &mask, reduction);
    let mut sum = Compensated::default();
    let mut d_logit = vec![0.0; terms.len()];
    for (k, t) in terms.iter().enumerate() {
        if !mask[k] {
            continue;
        }
        let (dw, slope) = wrapped_with_slope(t.predicted, t.target);
        let (v, dv) = match distance {
            OrientationDistance::Squared => (dw * dw, 2.0 * dw * slope),
            OrientationDistance::Absolute => (dw, slope),
        };
        sum.add(mult[k] * v);
        d_logit[k] = mult[k] * dv * t.predicted * (1.0 - t.predicted);
    }
    let (value, residual) = sum.split();
    OrientationLoss {
        value,
        residual,
        d_logit,
        contributing: mask.iter().filter(|&&m| m).count(),
    }
}

// ---------------------------------------------------------------------------
// box

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxTerm {
    pub scale: usize,
    pub pred: Box2D,
    pub target: Box2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxLoss {
    pub value: f64,
    pub residual: f64,
    /// Gradient with respect to each term's predicted `(cx, cy, w, h)`.
    pub d_box: Vec<[f64; 4]>,
    /// CIoU of each term, reused for objectness targets.
    pub ciou: Vec<f64>,
}

pub fn box_loss(terms: &[BoxTerm], reduction: Reduction) -> BoxLoss {
    let mask = vec![true; terms.len()];
    let mult = term_scales(terms.iter().map(|t| t.scale), &mask, reduction);
    let mut sum = Compensated::default();
    let mut d_box = Vec::with_capacity(terms.len());
    let mut ciou = Vec::with_capacity(terms.len());
    for (t, m) in terms.iter().zip(&mult) {
        let g = overlap_with_grad(&t.pred, &t.target);
        sum.add(m * (1.0 - g.ciou));
        d_box.push(g.d_ciou.map(|d| -m * d));
        ciou.push(g.ciou);
    }
    let (value, residual) = sum.split();
    BoxLoss {
        value,
        residual,
        d_box,
        ciou,
    }
}

// ---------------------------------------------------------------------------
// objectness

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectnessTerm {
    pub scale: usize,
    pub logit: f64,
    /// BCE target in `[0, 1]`.
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectnessLoss {
    pub value: f64,
    pub residual: f64,
    pub d_logit: Vec<f64>,
    pub d_target: Vec<f64>,
}

/// `BCE(sigmoid(l), t)` evaluated stably from the logit.
pub fn bce_with_logit(l: f64, t: f64) -> f64 {
    l.max(0.0) - l * t + (-l.abs()).exp().ln_1p()
}

pub fn objectness_loss(terms: &[ObjectnessTerm], reduction: Reduction) -> ObjectnessLoss {
    let mask = vec![true; terms.len()];
    let mult = term_scales(terms.iter().map(|t| t.scale), &mask, reduction);
    let mut sum = Compensated::default();
    let mut d_logit = Vec::with_capacity(terms.len());
    let mut d_target = Vec::with_capacity(terms.len());
    for (t, m) in terms.iter().zip(&mult) {
        sum.add(m * bce_with_logit(t.logit, t.target));
        d_logit.push(m * (crate::embedding::sigmoid(t.logit) - t.target));
        d_target.push(-m * t.logit);
    }
    let (value, residual) = sum.split();
    ObjectnessLoss {
        value,
        residual,
        d_logit,
        d_target,
    }
}

// ---------------------------------------------------------------------------
// total

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub objectness: f64,
    pub box_loss: f64,
    pub orientation: f64,
    pub total: f64,
    /// Rounding residuals of `objectness`, `box_loss`, `orientation` and
    /// `total`. Each value plus its residual is the compensated sum before
    /// the final rounding, so differences between nearby evaluations stay
    /// resolved far below one ulp of the value.
    pub residual: [f64; 4],
    /// One gradient tensor per image, weighted like `total`.
    pub gradient: Vec<RawPrediction>,
    pub positives: usize,
    /// Positives that passed the `tau` gate.
    pub contributing: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ImageInput<'a> {
    pub raw: &'a RawPrediction,
    pub assignment: &'a Assignment,
}

struct Positive {
    image: usize,
    emb: UnifiedEmbedding,
    jac: DecodeJacobian,
    obj_index: usize,
    target_box: Box2D,
    target_orientation: f64,
}

pub fn total_loss(
    raw: &RawPrediction,
    gts: &[AnnotatedInstance],
    geom: &Geometry,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let assignment = assign(gts, &geom.grid, &geom.anchors, &geom.assign)?;
    total_loss_assigned(
        &[ImageInput {
            raw,
            assignment: &assignment,
        }],
        geom,
        cfg,
    )
}

pub fn total_loss_batch(
    batch: &[(&RawPrediction, &[AnnotatedInstance])],
    geom: &Geometry,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let assignments = batch
        .iter()
        .map(|(_, gts)| assign(gts, &geom.grid, &geom.anchors, &geom.assign))
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<_> = batch
        .iter()
        .zip(&assignments)
        .map(|((raw, _), a)| ImageInput { raw, assignment: a })
        .collect();
    total_loss_assigned(&inputs, geom, cfg)
}

fn collect_positives(inputs: &[ImageInput<'_>], geom: &Geometry) -> Result<(Vec<ObjectnessTerm>, Vec<Positive>, Vec<usize>)> {
    let mut obj_terms = Vec::new();
    let mut positives = Vec::new();
    let mut obj_base = Vec::with_capacity(inputs.len());
    for (img, input) in inputs.iter().enumerate() {
        if !input.raw.matches_grid(&geom.grid) {
            return Err(Error::Shape(format!(
                "image {img}: raw prediction does not match grid {}",
                geom.grid
            )));
        }
        let base = obj_terms.len();
        obj_base.push(base);
        // layout order puts scales contiguously; channel k's objectness is data[7k]
        let data = input.raw.as_slice();
        let mut scale = 0;
        let mut scale_end = geom.grid.channels(0);
        for k in 0..data.len() / 7 {
            while k >= scale_end {
                scale += 1;
                scale_end += geom.grid.channels(scale);
            }
            let l = data[k * 7 + Field::Objectness as usize];
            if !l.is_finite() {
                return Err(Error::NonFiniteLogit(format!("image {img}, channel {k}")));
            }
            obj_terms.push(ObjectnessTerm {
                scale,
                logit: l,
                target: 0.0,
            });
        }
        for m in &input.assignment.matches {
            let (emb, jac) =
                decode_with_jacobian(input.raw, &m.channel, &geom.grid, &geom.anchors)?;
            positives.push(Positive {
                image: img,
                emb,
                jac,
                obj_index: base + input.raw.offset(&m.channel) / 7,
                target_box: m.target.bbox,
                target_orientation: m.target.orientation,
            });
        }
    }
    Ok((obj_terms, positives, obj_base))
}

/// Loss and gradient given precomputed assignments.
pub fn total_loss_assigned(
    inputs: &[ImageInput<'_>],
    geom: &Geometry,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let w = &cfg.weights;
    let (mut obj_terms, positives, _) = collect_positives(inputs, geom)?;

    let box_terms: Vec<BoxTerm> = positives
        .iter()
        .map(|p| BoxTerm {
            scale: p.emb.channel.scale,
            pred: p.emb.bbox,
            target: p.target_box,
        })
        .collect();
    let boxes = box_loss(&box_terms, cfg.reduction);

    // objectness targets from the overlap of the decoded box
    let mut target_grads = Vec::with_capacity(positives.len());
    for (p, bt) in positives.iter().zip(&box_terms) {
        let g = overlap_with_grad(&bt.pred, &bt.target);
        let (v, d) = match cfg.objectness_target {
            ObjectnessTarget::Ciou => (g.ciou, g.d_ciou),
            ObjectnessTarget::Iou => (g.iou, g.d_iou),
        };
        let inside = v > 0.0 && v < 1.0 && cfg.target_gradient == TargetGradient::Exact;
        obj_terms[p.obj_index].target = v.clamp(0.0, 1.0);
        target_grads.push(if inside { d } else { [0.0; 4] });
    }
    let obj = objectness_loss(&obj_terms, cfg.reduction);

    let ori_terms: Vec<OrientationTerm> = positives
        .iter()
        .map(|p| OrientationTerm {
            scale: p.emb.channel.scale,
            objectness: p.emb.objectness,
            predicted: p.emb.orientation,
            target: p.target_orientation,
        })
        .collect();
    let ori = orientation_loss(&ori_terms, w.tau, cfg.orientation_distance, cfg.reduction);

    // assemble gradients
    let mut gradient: Vec<RawPrediction> = inputs
        .iter()
        .map(|_| RawPrediction::zeros(&geom.grid))
        .collect();
    let per_image = geom.grid.total_channels();
    for (k, d) in obj.d_logit.iter().enumerate() {
        gradient[k / per_image].as_mut_slice()[(k % per_image) * 7] = w.alpha * d;
    }
    for (i, p) in positives.iter().enumerate() {
        let off = inputs[p.image].raw.offset(&p.emb.channel);
        let g = gradient[p.image].as_mut_slice();
        let dt = obj.d_target[p.obj_index];
        for f in 0..4 {
            let d_box = w.beta * boxes.d_box[i][f] + w.alpha * dt * target_grads[i][f];
            g[off + 1 + f] = d_box * p.jac.d_box[f];
        }
        g[off + Field::Orientation as usize] = w.lambda * ori.d_logit[i];
    }

    let part = |v: f64, r: f64| Compensated { hi: v, lo: r };
    let mut sum = Compensated::default();
    for c in [
        part(obj.value, obj.residual).scaled(w.alpha),
        part(boxes.value, boxes.residual).scaled(w.beta),
        part(ori.value, ori.residual).scaled(w.lambda),
    ] {
        sum.add(c.hi);
        sum.add(c.lo);
    }
    let (total, total_residual) = sum.split();
    Ok(LossBreakdown {
        objectness: obj.value,
        box_loss: boxes.value,
        orientation: ori.value,
        total,
        residual: [obj.residual, boxes.residual, ori.residual, total_residual],
        gradient,
        positives: positives.len(),
        contributing: ori.contributing,
    })
}

/// True when a central difference of half-width `step` along any single
/// logit could cross a point where the loss is not differentiable: the
/// wrap switch of the orientation distance (and `d = 0` for the absolute
/// form), the `tau` gate, edge coincidences inside CIoU, and the clamp of the
/// objectness target.
pub fn near_nonsmooth(inputs: &[ImageInput<'_>], geom: &Geometry, cfg: &LossConfig, step: f64) -> Result<bool> {
    const MARGIN: f64 = 1e-6;
    let (_, positives, _) = collect_positives(inputs, geom)?;
    for p in &positives {
        let reach = |sens: f64| MARGIN + 2.0 * step * sens;
        let (d, _) = wrapped_with_slope(p.emb.orientation, p.target_orientation);
        let raw_d = (p.emb.orientation - p.target_orientation).abs();
        let r_o = reach(p.jac.d_orientation);
        if (raw_d - 0.5).abs() < r_o {
            return Ok(true);
        }
        if cfg.orientation_distance == OrientationDistance::Absolute && d < r_o {
            return Ok(true);
        }
        if (p.emb.objectness - cfg.weights.tau).abs() < reach(p.jac.d_objectness) {
            return Ok(true);
        }
        let j = &p.jac.d_box;
        let edge_sens = j[0].max(j[1]) + 0.5 * j[2].max(j[3]);
        if edge_margin(&p.emb.bbox, &p.target_box) < reach(edge_sens) {
            return Ok(true);
        }
        let g = overlap_with_grad(&p.emb.bbox, &p.target_box);
        let (v, dv) = match cfg.objectness_target {
            ObjectnessTarget::Ciou => (g.ciou, g.d_ciou),
            ObjectnessTarget::Iou => (g.iou, g.d_iou),
        };
        let sens = (0..4).map(|f| (dv[f] * j[f]).abs()).fold(0.0, f64::max);
        let r = reach(sens);
        if v.abs() < r || (v - 1.0).abs() < r {
            return Ok(true);
        }
    }
    Ok(false)
}
