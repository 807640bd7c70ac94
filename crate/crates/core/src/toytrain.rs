//! Desk-scale training on synthetic scenes.
//!
//! Each scene holds a few person boxes with uniform orientations. Every grid
//! cell gets a feature vector `P * code + noise`, where `code` stacks the
//! ideal logits of the cell's three anchor channels (zero for unmatched
//! channels) and `P` is a fixed random projection. A linear head maps features
//! back to logits. Training runs the real assignment, decode and loss code
//! with plain gradient descent, so convergence exercises the loss and its
//! gradient rather than model capacity.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assignment::{AssignParams, Assignment, Geometry};
use crate::dataset::{AnnotatedInstance, Letterbox, Source};
use crate::embedding::{
    invert_target, logit, AnchorSet, Field, GridSpec, RawPrediction, ANCHORS_PER_SCALE,
    DEFAULT_STRIDES, EMBEDDING_LEN, NUM_SCALES,
};
use crate::error::{Error, Result};
use crate::kinds::{iou, Box2D, OrientationAngle};
use crate::losses::{total_loss_assigned, ImageInput, LossConfig};
use crate::metrics::{evaluate, EvalParams, EvalReport};
use crate::postprocess::{detect, Detection, PostprocessParams, ScoreMode};

/// Logits per cell: three anchors of seven slots.
pub const CELL_CODE_LEN: usize = ANCHORS_PER_SCALE * EMBEDDING_LEN;

/// Keeps planted orientation logits finite and moderate.
const CODE_ORIENTATION_CLAMP: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    pub input_size: u32,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_height: f64,
    pub max_height: f64,
    /// Width as a fraction of height.
    pub min_aspect: f64,
    pub max_aspect: f64,
    /// Largest IoU allowed between two boxes of one scene.
    pub max_overlap: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            input_size: 64,
            min_instances: 1,
            max_instances: 5,
            min_height: 8.0,
            max_height: 56.0,
            min_aspect: 0.35,
            max_aspect: 0.6,
            max_overlap: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Detection threshold for the AP sweep.
    pub ap_conf: f64,
    /// Threshold for recall and orientation metrics.
    pub conf: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            ap_conf: 0.001,
            conf: 0.25,
            nms_iou: 0.45,
            match_iou: 0.5,
        }
    }
}

pub fn toy_anchors() -> [[(f64, f64); ANCHORS_PER_SCALE]; NUM_SCALES] {
    [
        [(3.0, 6.0), (4.5, 10.0), (7.0, 14.0)],
        [(8.0, 18.0), (11.0, 24.0), (15.0, 30.0)],
        [(17.0, 35.0), (22.0, 44.0), (28.0, 52.0)],
        [(32.0, 50.0), (40.0, 56.0), (48.0, 62.0)],
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Scenes per step, taken cyclically; 0 means the full training set.
    pub batch_size: usize,
    pub noise_sigma: f64,
    pub feature_dim: usize,
    pub anchors: [[(f64, f64); ANCHORS_PER_SCALE]; NUM_SCALES],
    pub assign: AssignParams,
    pub loss: LossConfig,
    pub scene: SceneParams,
    pub eval: EvalSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            train_scenes: 200,
            eval_scenes: 50,
            steps: 2000,
            learning_rate: 0.5,
            batch_size: 0,
            noise_sigma: 0.05,
            feature_dim: 32,
            anchors: toy_anchors(),
            assign: AssignParams::default(),
            loss: LossConfig::default(),
            scene: SceneParams::default(),
            eval: EvalSettings::default(),
        }
    }
}

fn config_err(msg: String) -> Error {
    Error::Config(msg)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config_err("train.steps must be > 0".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(config_err(format!(
                "train.learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.train_scenes == 0 {
            return Err(config_err("train.train_scenes must be > 0".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(config_err(format!(
                "train.noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.feature_dim == 0 {
            return Err(config_err("train.feature_dim must be > 0".into()));
        }
        let s = &self.scene;
        if !(1 <= s.min_instances && s.min_instances <= s.max_instances) {
            return Err(config_err(format!(
                "train.scene instance range {}..={} is empty or starts at 0",
                s.min_instances, s.max_instances
            )));
        }
        if !(0.0 < s.min_height && s.min_height < s.max_height && s.max_height <= s.input_size as f64) {
            return Err(config_err(format!(
                "train.scene height range [{}, {}] invalid for input {}",
                s.min_height, s.max_height, s.input_size
            )));
        }
        if !(0.0 < s.min_aspect && s.min_aspect < s.max_aspect && s.max_aspect * s.max_height <= s.input_size as f64) {
            return Err(config_err(format!(
                "train.scene aspect range [{}, {}] invalid",
                s.min_aspect, s.max_aspect
            )));
        }
        if !(0.0..=1.0).contains(&s.max_overlap) {
            return Err(config_err(format!("train.scene.max_overlap {} outside [0, 1]", s.max_overlap)));
        }
        let e = &self.eval;
        for (name, v) in [("ap_conf", e.ap_conf), ("conf", e.conf), ("nms_iou", e.nms_iou), ("match_iou", e.match_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(config_err(format!("train.eval.{name} {v} outside [0, 1]")));
            }
        }
        self.assign.validate()?;
        self.loss.validate()?;
        self.geometry().map(|_| ())
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Ok(Geometry {
            grid: GridSpec::new(self.scene.input_size, self.scene.input_size, DEFAULT_STRIDES)?,
            anchors: AnchorSet::new(self.anchors)?,
            assign: self.assign,
        })
    }
}

// ---------------------------------------------------------------------------
// scene generation

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Seed of scene `index` within a split.
pub fn scene_seed(base: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x7472_6169_6e00_0000u64,
        Split::Eval => 0x6576_616c_0000_0000u64,
    };
    splitmix64(base ^ splitmix64(tag ^ index as u64))
}

/// Person boxes with uniform orientations, fully inside the frame.
pub fn gen_instances(seed: u64, params: &SceneParams) -> Vec<AnnotatedInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(params.min_instances..=params.max_instances);
    let size = params.input_size as f64;
    let mut out: Vec<AnnotatedInstance> = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n && tries < 100 * n {
        tries += 1;
        let h = rng.random_range(params.min_height..params.max_height);
        let w = h * rng.random_range(params.min_aspect..params.max_aspect);
        let cx = rng.random_range(w / 2.0..size - w / 2.0);
        let cy = rng.random_range(h / 2.0..size - h / 2.0);
        let deg = rng.random_range(0.0..360.0);
        let bbox = Box2D::new(cx, cy, w, h).expect("sampled box is positive");
        if out.iter().any(|o| iou(&o.bbox, &bbox) > params.max_overlap) {
            continue;
        }
        out.push(AnnotatedInstance {
            image_id: 0,
            annotation_id: out.len() as u64,
            bbox,
            orientation: Some(OrientationAngle::from_degrees(deg).expect("sampled in range")),
            weak: false,
            source: Source::OrientationBenchmark,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub gts: Vec<AnnotatedInstance>,
    pub assignment: Assignment,
    /// Row-major, one row of `feature_dim` per cell in prediction layout order.
    pub features: Vec<f64>,
}

impl SyntheticScene {
    pub fn cells(&self, feature_dim: usize) -> usize {
        self.features.len() / feature_dim
    }
}

/// Builds scenes that share one projection.
#[derive(Debug, Clone)]
pub struct SceneGenerator {
    config: TrainConfig,
    geometry: Geometry,
    /// `feature_dim x CELL_CODE_LEN`, row-major.
    projection: Vec<f64>,
}

impl SceneGenerator {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x7072_6f6a));
        let normal = Normal::new(0.0, 1.0 / (CELL_CODE_LEN as f64).sqrt()).expect("valid sigma");
        let projection = (0..config.feature_dim * CELL_CODE_LEN)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            geometry: config.geometry()?,
            projection,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    /// Per-cell ideal codes, one row of [`CELL_CODE_LEN`] per cell.
    pub fn codes(&self, assignment: &Assignment) -> Result<Vec<f64>> {
        let grid = &self.geometry.grid;
        let cells: usize = (0..NUM_SCALES).map(|s| grid.cells(s)).sum();
        let mut codes = vec![0.0; cells * CELL_CODE_LEN];
        // channel offsets in a RawPrediction coincide with code offsets
        let layout = RawPrediction::zeros(grid);
        for m in &assignment.matches {
            let mut ideal = invert_target(&m.target, &m.channel, grid, &self.geometry.anchors, 1.0)?;
            let o = m
                .target
                .orientation
                .clamp(CODE_ORIENTATION_CLAMP, 1.0 - CODE_ORIENTATION_CLAMP);
            ideal[Field::Orientation as usize] = logit(o);
            let off = layout.offset(&m.channel);
            codes[off..off + EMBEDDING_LEN].copy_from_slice(&ideal);
        }
        Ok(codes)
    }

    pub fn scene(&self, seed: u64) -> Result<SyntheticScene> {
        let gts = gen_instances(seed, &self.config.scene);
        let assignment = self.geometry.assign(&gts)?;
        let codes = self.codes(&assignment)?;
        let f = self.config.feature_dim;
        let cells = codes.len() / CELL_CODE_LEN;
        let mut features = vec![0.0; cells * f];
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x006e_6f69_7365));
        let noise = (self.config.noise_sigma > 0.0)
            .then(|| Normal::new(0.0, self.config.noise_sigma).expect("valid sigma"));
        for c in 0..cells {
            let code = &codes[c * CELL_CODE_LEN..(c + 1) * CELL_CODE_LEN];
            let row = &mut features[c * f..(c + 1) * f];
            for (i, out) in row.iter_mut().enumerate() {
                let p = &self.projection[i * CELL_CODE_LEN..(i + 1) * CELL_CODE_LEN];
                let mut v: f64 = p.iter().zip(code).map(|(a, b)| a * b).sum();
                if let Some(n) = &noise {
                    v += n.sample(&mut rng);
                }
                *out = v;
            }
        }
        Ok(SyntheticScene {
            seed,
            gts,
            assignment,
            features,
        })
    }

    pub fn split(&self, split: Split, count: usize) -> Result<Vec<SyntheticScene>> {
        (0..count)
            .map(|i| self.scene(scene_seed(self.config.seed, split, i)))
            .collect()
    }
}

pub fn gen_scene(seed: u64, config: &TrainConfig) -> Result<SyntheticScene> {
    SceneGenerator::new(config)?.scene(seed)
}

// ---------------------------------------------------------------------------
// head

/// Linear map from cell features to the cell's three anchor embeddings.
/// Columns `7a..7a+7` of `weight` form anchor `a`'s `feature_dim x 7` block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub feature_dim: usize,
    /// `feature_dim x CELL_CODE_LEN`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            weight: vec![0.0; feature_dim * CELL_CODE_LEN],
            bias: vec![0.0; CELL_CODE_LEN],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    /// `features` holds `rows x feature_dim`; returns `rows x CELL_CODE_LEN`.
    pub fn forward(&self, features: &[f64]) -> Vec<f64> {
        let f = self.feature_dim;
        let rows = features.len() / f;
        let mut out = Vec::with_capacity(rows * CELL_CODE_LEN);
        for _ in 0..rows {
            out.extend_from_slice(&self.bias);
        }
        // SAFETY: slices sized rows*f, f*21 and rows*21 with the strides given.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                f,
                CELL_CODE_LEN,
                1.0,
                features.as_ptr(),
                f as isize,
                1,
                self.weight.as_ptr(),
                CELL_CODE_LEN as isize,
                1,
                1.0,
                out.as_mut_ptr(),
                CELL_CODE_LEN as isize,
                1,
            );
        }
        out
    }

    /// Parameter gradient from per-row output gradients.
    pub fn backward(&self, features: &[f64], d_out: &[f64]) -> LinearHead {
        let f = self.feature_dim;
        let rows = features.len() / f;
        let mut grad = LinearHead::zeros(f);
        // SAFETY: features viewed transposed as f x rows, d_out rows x 21.
        unsafe {
            matrixmultiply::dgemm(
                f,
                rows,
                CELL_CODE_LEN,
                1.0,
                features.as_ptr(),
                1,
                f as isize,
                d_out.as_ptr(),
                CELL_CODE_LEN as isize,
                1,
                0.0,
                grad.weight.as_mut_ptr(),
                CELL_CODE_LEN as isize,
                1,
            );
        }
        for row in d_out.chunks_exact(CELL_CODE_LEN) {
            for (b, d) in grad.bias.iter_mut().zip(row) {
                *b += d;
            }
        }
        grad
    }

    fn step(&mut self, grad: &LinearHead, lr: f64) {
        for (w, g) in self.weight.iter_mut().zip(&grad.weight) {
            *w -= lr * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * g;
        }
    }

    pub fn predict(&self, scene: &SyntheticScene, grid: &GridSpec) -> Result<RawPrediction> {
        RawPrediction::from_vec(grid, self.forward(&scene.features))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("head serializes");
        s.push('\n');
        s
    }
}

// ---------------------------------------------------------------------------
// training

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistoryRow {
    pub step: usize,
    pub objectness: f64,
    pub box_loss: f64,
    pub orientation: f64,
    pub total: f64,
    pub positives: usize,
    /// Positives whose objectness cleared the orientation gate.
    pub contributing: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub head: LinearHead,
    /// Loss at the parameters before each update.
    pub history: Vec<HistoryRow>,
    /// Loss after the last update.
    pub final_loss: HistoryRow,
}

fn stacked_features(scenes: &[&SyntheticScene]) -> Vec<f64> {
    scenes.iter().flat_map(|s| s.features.iter().copied()).collect()
}

/// Loss row and output gradient for `scenes`, whose features are stacked in
/// `features`.
fn batch_loss(
    head: &LinearHead,
    scenes: &[&SyntheticScene],
    features: &[f64],
    geom: &Geometry,
    cfg: &LossConfig,
    step: usize,
) -> Result<(HistoryRow, Vec<f64>)> {
    let out = head.forward(features);
    let per_scene = geom.grid.total_channels() * EMBEDDING_LEN;
    let raws = out
        .chunks_exact(per_scene)
        .map(|c| RawPrediction::from_vec(&geom.grid, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<ImageInput<'_>> = raws
        .iter()
        .zip(scenes)
        .map(|(raw, s)| ImageInput {
            raw,
            assignment: &s.assignment,
        })
        .collect();
    let b = total_loss_assigned(&inputs, geom, cfg).map_err(|e| match e {
        Error::NonFiniteLogit(_) => Error::Diverged {
            step,
            value: f64::NAN,
        },
        other => other,
    })?;
    if !b.total.is_finite() {
        return Err(Error::Diverged {
            step,
            value: b.total,
        });
    }
    let mut d_out = Vec::with_capacity(out.len());
    for g in &b.gradient {
        d_out.extend_from_slice(g.as_slice());
    }
    let row = HistoryRow {
        step,
        objectness: b.objectness,
        box_loss: b.box_loss,
        orientation: b.orientation,
        total: b.total,
        positives: b.positives,
        contributing: b.contributing,
    };
    Ok((row, d_out))
}

/// Loss of `head` over all of `scenes` under `cfg`, without updating.
pub fn dataset_loss(
    head: &LinearHead,
    scenes: &[SyntheticScene],
    geom: &Geometry,
    cfg: &LossConfig,
) -> Result<HistoryRow> {
    let all: Vec<&SyntheticScene> = scenes.iter().collect();
    batch_loss(head, &all, &stacked_features(&all), geom, cfg, 0).map(|(row, _)| row)
}

fn batch_for(scenes: &[SyntheticScene], batch_size: usize, step: usize) -> Vec<&SyntheticScene> {
    let n = scenes.len();
    (0..batch_size).map(|k| &scenes[(step * batch_size + k) % n]).collect()
}

/// Gradient descent from a zero head on pre-built training scenes.
pub fn train_on(config: &TrainConfig, scenes: &[SyntheticScene], geom: &Geometry) -> Result<TrainOutput> {
    let mut head = LinearHead::zeros(config.feature_dim);
    let mut history = Vec::with_capacity(config.steps);
    let all: Vec<&SyntheticScene> = scenes.iter().collect();
    let all_features = stacked_features(&all);
    let full_batch = config.batch_size == 0 || config.batch_size >= scenes.len();
    for step in 0..config.steps {
        let (row, grad) = if full_batch {
            let (row, d_out) = batch_loss(&head, &all, &all_features, geom, &config.loss, step)?;
            (row, head.backward(&all_features, &d_out))
        } else {
            let batch = batch_for(scenes, config.batch_size, step);
            let features = stacked_features(&batch);
            let (row, d_out) = batch_loss(&head, &batch, &features, geom, &config.loss, step)?;
            (row, head.backward(&features, &d_out))
        };
        history.push(row);
        head.step(&grad, config.learning_rate);
        if !head.is_finite() {
            return Err(Error::Diverged {
                step,
                value: f64::NAN,
            });
        }
    }
    let (final_loss, _) = batch_loss(&head, &all, &all_features, geom, &config.loss, config.steps)?;
    Ok(TrainOutput {
        head,
        history,
        final_loss,
    })
}

pub fn train(config: &TrainConfig) -> Result<TrainOutput> {
    let generator = SceneGenerator::new(config)?;
    let scenes = generator.split(Split::Train, config.train_scenes)?;
    train_on(config, &scenes, generator.geometry())
}

/// Detections for each scene, image id = position in `scenes`.
pub fn detect_scenes(
    head: &LinearHead,
    scenes: &[SyntheticScene],
    geom: &Geometry,
    settings: &EvalSettings,
) -> Result<Vec<Detection>> {
    let (w, h) = geom.grid.input_size();
    let letterbox = Letterbox::identity(w, h);
    let params = PostprocessParams {
        conf_thresh: settings.ap_conf,
        iou_thresh: settings.nms_iou,
        score: ScoreMode::Objectness,
    };
    let mut out = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let raw = head.predict(s, &geom.grid)?;
        out.extend(detect(i as u64, &raw, geom, &letterbox, &params)?);
    }
    Ok(out)
}

pub fn scene_ground_truth(scenes: &[SyntheticScene]) -> Vec<AnnotatedInstance> {
    scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.gts.iter().map(move |g| AnnotatedInstance {
                image_id: i as u64,
                ..*g
            })
        })
        .collect()
}

pub fn evaluate_head(
    head: &LinearHead,
    scenes: &[SyntheticScene],
    geom: &Geometry,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let preds = detect_scenes(head, scenes, geom, settings)?;
    evaluate(
        &preds,
        &scene_ground_truth(scenes),
        &EvalParams {
            iou_thresh: settings.match_iou,
            conf_thresh: settings.conf,
            exclude_weak: false,
        },
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyRun {
    pub output: TrainOutput,
    pub report: EvalReport,
}

/// Train, then evaluate on fresh held-out scenes.
pub fn train_and_evaluate(config: &TrainConfig) -> Result<ToyRun> {
    let generator = SceneGenerator::new(config)?;
    let scenes = generator.split(Split::Train, config.train_scenes)?;
    let output = train_on(config, &scenes, generator.geometry())?;
    let held_out = generator.split(Split::Eval, config.eval_scenes)?;
    let report = evaluate_head(&output.head, &held_out, generator.geometry(), &config.eval)?;
    Ok(ToyRun { output, report })
}

/// Trailing moving average over `window` entries, from the first full window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

/// First index where `values` increases, if any.
pub fn first_increase(values: &[f64]) -> Option<usize> {
    values.windows(2).position(|w| w[1] > w[0]).map(|i| i + 1)
}

pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut s = String::from("step,l_obj,l_box,l_ori,total\n");
    for r in history {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.step, r.objectness, r.box_loss, r.orientation, r.total
        )
        .expect("write to string");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        TrainConfig {
            train_scenes: 8,
            eval_scenes: 4,
            steps: 20,
            ..Default::default()
        }
    }

    #[test]
    fn scenes_deterministic() {
        let cfg = small();
        let a = gen_scene(7, &cfg).unwrap();
        let b = gen_scene(7, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.features, gen_scene(8, &cfg).unwrap().features);
    }

    #[test]
    fn adjacent_seeds_differ() {
        let p = SceneParams::default();
        let mut prev = gen_instances(0, &p);
        for seed in 1..1000 {
            let cur = gen_instances(seed, &p);
            assert_ne!(prev, cur, "seed {seed}");
            prev = cur;
        }
    }

    #[test]
    fn instances_valid() {
        let p = SceneParams::default();
        for seed in 0..200 {
            let gts = gen_instances(seed, &p);
            assert!((p.min_instances..=p.max_instances).contains(&gts.len()));
            for g in &gts {
                let c = g.bbox.to_corners();
                assert!(c.x1 >= 0.0 && c.y1 >= 0.0 && c.x2 <= 64.0 && c.y2 <= 64.0);
            }
        }
    }

    #[test]
    fn every_instance_is_assigned() {
        let cfg = TrainConfig::default();
        let gen = SceneGenerator::new(&cfg).unwrap();
        for seed in 0..100 {
            let s = gen.scene(seed).unwrap();
            assert!(s.assignment.skipped.is_empty(), "seed {seed}");
        }
    }

    /// Solves `P^T P c = P^T f` by Gaussian elimination.
    fn recover_code(p: &[f64], f: &[f64], dim: usize) -> Vec<f64> {
        let n = CELL_CODE_LEN;
        let mut a = vec![vec![0.0; n + 1]; n];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = (0..dim).map(|r| p[r * n + i] * p[r * n + j]).sum();
            }
            a[i][n] = (0..dim).map(|r| p[r * n + i] * f[r]).sum();
        }
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
                .unwrap();
            a.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let k = a[r][col] / a[col][col];
                    for c in col..=n {
                        a[r][c] -= k * a[col][c];
                    }
                }
            }
        }
        (0..n).map(|i| a[i][n] / a[i][i]).collect()
    }

    #[test]
    fn noiseless_features_determine_targets() {
        let cfg = TrainConfig {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let gen = SceneGenerator::new(&cfg).unwrap();
        let s = gen.scene(5).unwrap();
        let codes = gen.codes(&s.assignment).unwrap();
        let f = cfg.feature_dim;
        let mut positive_cells = 0;
        for c in 0..s.cells(f) {
            let code = &codes[c * CELL_CODE_LEN..(c + 1) * CELL_CODE_LEN];
            let feat = &s.features[c * f..(c + 1) * f];
            if code.iter().all(|&v| v == 0.0) {
                assert!(feat.iter().all(|&v| v == 0.0));
                continue;
            }
            positive_cells += 1;
            let got = recover_code(gen.projection(), feat, f);
            for (g, w) in got.iter().zip(code) {
                assert!((g - w).abs() < 1e-9, "{g} vs {w}");
            }
        }
        assert!(positive_cells > 0);
    }

    #[test]
    fn head_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = 4;
        let rows = 3;
        let features: Vec<f64> = (0..rows * f).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut head = LinearHead::zeros(f);
        for w in head.weight.iter_mut().chain(head.bias.iter_mut()) {
            *w = rng.random_range(-1.0..1.0);
        }
        let seed_out: Vec<f64> = (0..rows * CELL_CODE_LEN).map(|_| rng.random_range(-1.0..1.0)).collect();
        // loss = <out, seed_out>, so d_out = seed_out
        let loss = |h: &LinearHead| -> f64 {
            h.forward(&features).iter().zip(&seed_out).map(|(a, b)| a * b).sum()
        };
        let grad = head.backward(&features, &seed_out);
        for k in [0, 5, 30, head.weight.len() - 1] {
            let mut hi = head.clone();
            hi.weight[k] += 1e-6;
            let mut lo = head.clone();
            lo.weight[k] -= 1e-6;
            let n = (loss(&hi) - loss(&lo)) / 2e-6;
            assert!((n - grad.weight[k]).abs() < 1e-7);
        }
        head.bias[3] += 0.0;
        let expect: f64 = seed_out.chunks_exact(CELL_CODE_LEN).map(|r| r[3]).sum();
        assert!((grad.bias[3] - expect).abs() < 1e-12);
    }

    #[test]
    fn short_run_is_reproducible_and_descends() {
        let cfg = small();
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.final_loss.total < a.history[0].total);
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
    }

    #[test]
    fn divergence_reports_step() {
        let cfg = TrainConfig {
            learning_rate: 1e200,
            ..small()
        };
        match train(&cfg) {
            Err(Error::Diverged { step, .. }) => assert!(step < cfg.steps),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            TrainConfig { steps: 0, ..small() },
            TrainConfig { learning_rate: -1.0, ..small() },
            TrainConfig {
                scene: SceneParams { input_size: 100, ..Default::default() },
                ..small()
            },
        ] {
            assert!(cfg.validate().unwrap_err().is_config());
        }
    }

    #[test]
    fn smoothing() {
        assert_eq!(smoothed(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(smoothed(&[1.0], 2).is_empty());
        assert_eq!(first_increase(&[3.0, 2.0, 2.0, 2.5]), Some(3));
        assert_eq!(first_increase(&[3.0, 2.0]), None);
    }
}
