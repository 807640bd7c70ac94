//! Per-anchor-channel embedding codec.
//!
//! Every channel of the multi-scale head emits seven logits laid out as
//! `(p, x, y, w, h, c, o)`: objectness, box offsets, the single class score and
//! the body orientation. Decoding squashes them through a sigmoid and maps the
//! box fields into input-image pixels relative to the channel's cell and anchor.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::AnnotatedInstance;
use crate::error::{Error, Result};
use crate::kinds::{Box2D, OrientationAngle};

pub const NUM_SCALES: usize = 4;
pub const ANCHORS_PER_SCALE: usize = 3;
pub const EMBEDDING_LEN: usize = 7;

pub const DEFAULT_STRIDES: [u32; NUM_SCALES] = [8, 16, 32, 64];

/// Index of each field inside a channel's logit vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum Field {
    Objectness = 0,
    X = 1,
    Y = 2,
    W = 3,
    H = 4,
    Class = 5,
    Orientation = 6,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Four-scale grid geometry over a fixed network input size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    input_width: u32,
    input_height: u32,
    strides: [u32; NUM_SCALES],
}

impl GridSpec {
    pub fn new(input_width: u32, input_height: u32, strides: [u32; NUM_SCALES]) -> Result<Self> {
        if strides.contains(&0) {
            return Err(Error::InvalidGrid("strides must be positive".into()));
        }
        if strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidGrid(format!(
                "strides must be strictly increasing, got {strides:?}"
            )));
        }
        let max = strides[NUM_SCALES - 1];
        if input_width == 0 || input_height == 0 || !input_width.is_multiple_of(max) || !input_height.is_multiple_of(max)
        {
            return Err(Error::InvalidGrid(format!(
                "input {input_width}x{input_height} is not a positive multiple of stride {max}"
            )));
        }
        for &s in &strides {
            if !input_width.is_multiple_of(s) || !input_height.is_multiple_of(s) {
                return Err(Error::InvalidGrid(format!(
                    "input {input_width}x{input_height} not divisible by stride {s}"
                )));
            }
        }
        Ok(Self {
            input_width,
            input_height,
            strides,
        })
    }

    /// 1024x1024 input with the default strides.
    pub fn default_1024() -> Self {
        Self::new(1024, 1024, DEFAULT_STRIDES).expect("valid default grid")
    }

    pub fn input_size(&self) -> (u32, u32) {
        (self.input_width, self.input_height)
    }

    pub fn strides(&self) -> &[u32; NUM_SCALES] {
        &self.strides
    }

    pub fn stride(&self, scale: usize) -> f64 {
        self.strides[scale] as f64
    }

    /// `(grid_w, grid_h)` at `scale`.
    pub fn dims(&self, scale: usize) -> (usize, usize) {
        let s = self.strides[scale];
        ((self.input_width / s) as usize, (self.input_height / s) as usize)
    }

    pub fn cells(&self, scale: usize) -> usize {
        let (w, h) = self.dims(scale);
        w * h
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.cells(scale) * ANCHORS_PER_SCALE
    }

    pub fn total_channels(&self) -> usize {
        (0..NUM_SCALES).map(|s| self.channels(s)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorShape {
    pub w: f64,
    pub h: f64,
}

/// Three anchor shapes per scale, in input pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    anchors: [[AnchorShape; ANCHORS_PER_SCALE]; NUM_SCALES],
}

impl AnchorSet {
    pub fn new(anchors: [[(f64, f64); ANCHORS_PER_SCALE]; NUM_SCALES]) -> Result<Self> {
        for (s, row) in anchors.iter().enumerate() {
            for (a, &(w, h)) in row.iter().enumerate() {
                if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
                    return Err(Error::InvalidGrid(format!(
                        "anchor {a} at scale {s} has non-positive size ({w}, {h})"
                    )));
                }
            }
        }
        Ok(Self {
            anchors: anchors.map(|row| row.map(|(w, h)| AnchorShape { w, h })),
        })
    }

    /// Four-scale presets of the reference detector family (P3..P6).
    pub fn default_four_scale() -> Self {
        Self::new([
            [(19.0, 27.0), (44.0, 40.0), (38.0, 94.0)],
            [(96.0, 68.0), (86.0, 152.0), (180.0, 137.0)],
            [(140.0, 301.0), (303.0, 264.0), (238.0, 542.0)],
            [(436.0, 615.0), (739.0, 380.0), (925.0, 792.0)],
        ])
        .expect("valid default anchors")
    }

    pub fn get(&self, scale: usize, anchor: usize) -> AnchorShape {
        self.anchors[scale][anchor]
    }

    pub fn scale(&self, scale: usize) -> &[AnchorShape; ANCHORS_PER_SCALE] {
        &self.anchors[scale]
    }

    pub fn to_pairs(&self) -> [[(f64, f64); ANCHORS_PER_SCALE]; NUM_SCALES] {
        self.anchors.map(|row| row.map(|a| (a.w, a.h)))
    }
}

/// Grid cell by column `x` and row `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

/// One anchor channel of the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelIndex {
    pub scale: usize,
    pub cell: Cell,
    pub anchor: usize,
}

impl ChannelIndex {
    pub fn new(scale: usize, x: usize, y: usize, anchor: usize) -> Self {
        Self {
            scale,
            cell: Cell { x, y },
            anchor,
        }
    }

    /// Ordering key: scale, then row, then column, then anchor.
    pub fn sort_key(&self) -> (usize, usize, usize, usize) {
        (self.scale, self.cell.y, self.cell.x, self.anchor)
    }
}

impl PartialOrd for ChannelIndex {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ChannelIndex {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl fmt::Display for ChannelIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "scale {} cell (x={}, y={}) anchor {}",
            self.scale, self.cell.x, self.cell.y, self.anchor
        )
    }
}

/// Raw head output for one image: per scale a `grid_h x grid_w x 3 x 7` tensor,
/// all scales concatenated in one buffer. Also used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrediction {
    dims: [(usize, usize); NUM_SCALES],
    offsets: [usize; NUM_SCALES],
    data: Vec<f64>,
}

impl RawPrediction {
    pub fn zeros(grid: &GridSpec) -> Self {
        let mut dims = [(0, 0); NUM_SCALES];
        let mut offsets = [0; NUM_SCALES];
        let mut len = 0;
        for s in 0..NUM_SCALES {
            dims[s] = grid.dims(s);
            offsets[s] = len;
            len += grid.channels(s) * EMBEDDING_LEN;
        }
        Self {
            dims,
            offsets,
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(grid: &GridSpec, data: Vec<f64>) -> Result<Self> {
        let mut out = Self::zeros(grid);
        if data.len() != out.data.len() {
            return Err(Error::Shape(format!(
                "expected {} logits, got {}",
                out.data.len(),
                data.len()
            )));
        }
        out.data = data;
        Ok(out)
    }

    pub fn matches_grid(&self, grid: &GridSpec) -> bool {
        (0..NUM_SCALES).all(|s| self.dims[s] == grid.dims(s))
    }

    /// Offset of the first logit of `ch` in the flat buffer.
    pub fn offset(&self, ch: &ChannelIndex) -> usize {
        let (gw, _) = self.dims[ch.scale];
        self.offsets[ch.scale]
            + ((ch.cell.y * gw + ch.cell.x) * ANCHORS_PER_SCALE + ch.anchor) * EMBEDDING_LEN
    }

    pub fn logits(&self, ch: &ChannelIndex) -> &[f64] {
        let o = self.offset(ch);
        &self.data[o..o + EMBEDDING_LEN]
    }

    pub fn logits_mut(&mut self, ch: &ChannelIndex) -> &mut [f64] {
        let o = self.offset(ch);
        &mut self.data[o..o + EMBEDDING_LEN]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Every channel in layout order.
    pub fn channels(&self) -> impl Iterator<Item = ChannelIndex> + '_ {
        (0..NUM_SCALES).flat_map(move |s| {
            let (gw, gh) = self.dims[s];
            (0..gh).flat_map(move |y| {
                (0..gw).flat_map(move |x| {
                    (0..ANCHORS_PER_SCALE).map(move |a| ChannelIndex::new(s, x, y, a))
                })
            })
        })
    }
}

/// Decoded channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnifiedEmbedding {
    pub channel: ChannelIndex,
    pub objectness: f64,
    pub bbox: Box2D,
    pub class_score: f64,
    /// Unit orientation in `(0, 1)`.
    pub orientation: f64,
}

impl UnifiedEmbedding {
    pub fn orientation_degrees(&self) -> f64 {
        let d = self.orientation * 360.0;
        if d >= 360.0 {
            0.0
        } else {
            d
        }
    }
}

/// Decode plus the partial of each decoded field with respect to its own logit.
/// Each decoded quantity depends on exactly one logit.
#[derive(Debug, Clone, Copy)]
pub struct DecodeJacobian {
    pub d_objectness: f64,
    /// `d(cx, cy, w, h) / d(logit x, y, w, h)`.
    pub d_box: [f64; 4],
    pub d_orientation: f64,
}

fn decode_fields(
    logits: &[f64],
    ch: &ChannelIndex,
    grid: &GridSpec,
    anchors: &AnchorSet,
) -> Result<(UnifiedEmbedding, DecodeJacobian)> {
    if let Some(k) = logits.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFiniteLogit(format!("{ch}, field {k}")));
    }
    let s = grid.stride(ch.scale);
    let anchor = anchors.get(ch.scale, ch.anchor);
    let sg: [f64; EMBEDDING_LEN] = std::array::from_fn(|k| sigmoid(logits[k]));
    let ds: [f64; EMBEDDING_LEN] = std::array::from_fn(|k| sg[k] * (1.0 - sg[k]));

    let cx = (2.0 * sg[1] - 0.5 + ch.cell.x as f64) * s;
    let cy = (2.0 * sg[2] - 0.5 + ch.cell.y as f64) * s;
    let w = 4.0 * sg[3] * sg[3] * anchor.w;
    let h = 4.0 * sg[4] * sg[4] * anchor.h;
    // keep the box valid when a size sigmoid underflows
    let bbox = Box2D::new(cx, cy, w.max(f64::MIN_POSITIVE), h.max(f64::MIN_POSITIVE))?;
    let emb = UnifiedEmbedding {
        channel: *ch,
        objectness: sg[0],
        bbox,
        class_score: sg[5],
        orientation: sg[6],
    };
    let jac = DecodeJacobian {
        d_objectness: ds[0],
        d_box: [
            2.0 * s * ds[1],
            2.0 * s * ds[2],
            8.0 * sg[3] * ds[3] * anchor.w,
            8.0 * sg[4] * ds[4] * anchor.h,
        ],
        d_orientation: ds[6],
    };
    Ok((emb, jac))
}

pub fn decode(
    raw: &RawPrediction,
    ch: &ChannelIndex,
    grid: &GridSpec,
    anchors: &AnchorSet,
) -> Result<UnifiedEmbedding> {
    decode_fields(raw.logits(ch), ch, grid, anchors).map(|(e, _)| e)
}

pub fn decode_with_jacobian(
    raw: &RawPrediction,
    ch: &ChannelIndex,
    grid: &GridSpec,
    anchors: &AnchorSet,
) -> Result<(UnifiedEmbedding, DecodeJacobian)> {
    decode_fields(raw.logits(ch), ch, grid, anchors)
}

/// Decode every channel of an image, in layout order.
pub fn decode_all(
    raw: &RawPrediction,
    grid: &GridSpec,
    anchors: &AnchorSet,
) -> Result<Vec<UnifiedEmbedding>> {
    if !raw.matches_grid(grid) {
        return Err(Error::Shape("raw prediction does not match grid".into()));
    }
    raw.channels()
        .map(|ch| decode(raw, &ch, grid, anchors))
        .collect()
}

/// Training target stored alongside a positive channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub gt_index: usize,
    pub bbox: Box2D,
    /// Unit orientation in `[0, 1)`.
    pub orientation: f64,
    pub objectness: f64,
}

/// Centre offset of `bbox` from `ch`'s cell origin, in cells, and the
/// per-dimension size ratio to the anchor.
fn channel_relative(
    bbox: &Box2D,
    ch: &ChannelIndex,
    grid: &GridSpec,
    anchors: &AnchorSet,
) -> ([f64; 2], [f64; 2]) {
    let s = grid.stride(ch.scale);
    let a = anchors.get(ch.scale, ch.anchor);
    (
        [bbox.cx() / s - ch.cell.x as f64, bbox.cy() / s - ch.cell.y as f64],
        [bbox.w() / a.w, bbox.h() / a.h],
    )
}

pub fn is_representable(
    bbox: &Box2D,
    ch: &ChannelIndex,
    grid: &GridSpec,
    anchors: &AnchorSet,
) -> std::result::Result<(), String> {
    let (off, ratio) = channel_relative(bbox, ch, grid, anchors);
    for (k, o) in off.iter().enumerate() {
        if !(*o > -0.5 && *o < 1.5) {
            return Err(format!("centre offset {o} on axis {k} outside (-0.5, 1.5) cells"));
        }
    }
    for (k, r) in ratio.iter().enumerate() {
        if !(*r > 0.0 && *r < 4.0) {
            return Err(format!("size ratio {r} on axis {k} outside (0, 4)"));
        }
    }
    Ok(())
}

pub fn encode_target(
    gt: &AnnotatedInstance,
    gt_index: usize,
    ch: &ChannelIndex,
    grid: &GridSpec,
    anchors: &AnchorSet,
) -> Result<Target> {
    let orientation = gt
        .orientation
        .ok_or(Error::MissingOrientation(gt_index))?;
    is_representable(&gt.bbox, ch, grid, anchors).map_err(|reason| Error::Unrepresentable {
        gt: gt_index,
        channel: ch.to_string(),
        reason,
    })?;
    Ok(Target {
        gt_index,
        bbox: gt.bbox,
        orientation: orientation.unit(),
        objectness: 1.0,
    })
}

/// Smallest unit orientation kept away from the sigmoid's asymptotes when
/// inverting.
pub const ORIENTATION_INVERT_CLAMP: f64 = 1e-9;

/// Logits whose decode reproduces `target` at `ch`: the inverse of the box
/// map, `logit(o)` for orientation, and the supplied objectness/class logits.
pub fn invert_target(
    target: &Target,
    ch: &ChannelIndex,
    grid: &GridSpec,
    anchors: &AnchorSet,
    objectness_logit: f64,
) -> Result<[f64; EMBEDDING_LEN]> {
    is_representable(&target.bbox, ch, grid, anchors).map_err(|reason| Error::Unrepresentable {
        gt: target.gt_index,
        channel: ch.to_string(),
        reason,
    })?;
    let (off, ratio) = channel_relative(&target.bbox, ch, grid, anchors);
    let o = target
        .orientation
        .clamp(ORIENTATION_INVERT_CLAMP, 1.0 - ORIENTATION_INVERT_CLAMP);
    Ok([
        objectness_logit,
        logit((off[0] + 0.5) / 2.0),
        logit((off[1] + 0.5) / 2.0),
        logit(ratio[0].sqrt() / 2.0),
        logit(ratio[1].sqrt() / 2.0),
        0.0,
        logit(o),
    ])
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{} strides {:?}",
            self.input_width, self.input_height, self.strides
        )
    }
}

/// Orientation as a checked angle; decoded orientation never reaches 1.
pub fn orientation_angle(emb: &UnifiedEmbedding) -> OrientationAngle {
    OrientationAngle::from_degrees(emb.orientation_degrees()).expect("sigmoid range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{AnnotatedInstance, Source};

    fn grid8() -> (GridSpec, AnchorSet) {
        let anchors = AnchorSet::new([
            [(16.0, 24.0), (30.0, 30.0), (40.0, 80.0)],
            [(60.0, 60.0), (80.0, 120.0), (150.0, 100.0)],
            [(120.0, 250.0), (250.0, 200.0), (200.0, 400.0)],
            [(400.0, 500.0), (600.0, 300.0), (800.0, 700.0)],
        ])
        .unwrap();
        (GridSpec::default_1024(), anchors)
    }

    fn gt(cx: f64, cy: f64, w: f64, h: f64, deg: f64) -> AnnotatedInstance {
        AnnotatedInstance {
            image_id: 1,
            annotation_id: 1,
            bbox: Box2D::new(cx, cy, w, h).unwrap(),
            orientation: Some(OrientationAngle::from_degrees(deg).unwrap()),
            weak: false,
            source: Source::OrientationBenchmark,
        }
    }

    #[test]
    fn zero_logits_decode() {
        let (grid, anchors) = grid8();
        let raw = RawPrediction::zeros(&grid);
        let ch = ChannelIndex::new(0, 3, 4, 0);
        let e = decode(&raw, &ch, &grid, &anchors).unwrap();
        assert_eq!(e.objectness, 0.5);
        assert_eq!(e.bbox, Box2D::new(28.0, 36.0, 16.0, 24.0).unwrap());
        assert_eq!(e.orientation, 0.5);
        assert_eq!(e.orientation_degrees(), 180.0);
    }

    #[test]
    fn saturated_orientation_stays_in_range() {
        let (grid, anchors) = grid8();
        let mut raw = RawPrediction::zeros(&grid);
        let ch = ChannelIndex::new(1, 0, 0, 2);
        for l in [5.0, 20.0, 40.0, 700.0] {
            raw.logits_mut(&ch)[Field::Orientation as usize] = l;
            let e = decode(&raw, &ch, &grid, &anchors).unwrap();
            let d = e.orientation_degrees();
            assert!((0.0..360.0).contains(&d));
        }
    }

    #[test]
    fn non_finite_rejected() {
        let (grid, anchors) = grid8();
        let mut raw = RawPrediction::zeros(&grid);
        let ch = ChannelIndex::new(2, 1, 1, 1);
        raw.logits_mut(&ch)[3] = f64::NAN;
        assert!(matches!(
            decode(&raw, &ch, &grid, &anchors),
            Err(Error::NonFiniteLogit(_))
        ));
    }

    #[test]
    fn orientation_monotone_in_logit() {
        let (grid, anchors) = grid8();
        let mut raw = RawPrediction::zeros(&grid);
        let ch = ChannelIndex::new(0, 0, 0, 0);
        let mut prev = 0.0;
        for k in -30..30 {
            raw.logits_mut(&ch)[6] = k as f64 * 0.5;
            let o = decode(&raw, &ch, &grid, &anchors).unwrap().orientation;
            assert!(o > prev);
            prev = o;
        }
    }

    #[test]
    fn prediction_count_at_1024() {
        let grid = GridSpec::default_1024();
        assert_eq!(grid.total_channels(), 65_280);
        let raw = RawPrediction::zeros(&grid);
        assert_eq!(raw.len(), 65_280 * EMBEDDING_LEN);
        assert_eq!(raw.channels().count(), 65_280);
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new(1000, 1024, DEFAULT_STRIDES).is_err());
        assert!(GridSpec::new(1024, 1024, [8, 8, 32, 64]).is_err());
        assert!(GridSpec::new(64, 64, DEFAULT_STRIDES).is_ok());
        assert!(AnchorSet::new([[(1.0, 0.0); 3]; 4]).is_err());
    }

    #[test]
    fn encode_normalizes_orientation() {
        let (grid, anchors) = grid8();
        let ch = ChannelIndex::new(0, 3, 4, 0);
        let t = encode_target(&gt(28.0, 36.0, 16.0, 24.0, 90.0), 0, &ch, &grid, &anchors).unwrap();
        assert_eq!(t.orientation, 0.25);
        assert_eq!(t.objectness, 1.0);
        let t = encode_target(&gt(28.0, 36.0, 16.0, 24.0, 0.0), 0, &ch, &grid, &anchors).unwrap();
        assert_eq!(t.orientation, 0.0);
        let t = encode_target(&gt(28.0, 36.0, 16.0, 24.0, 360.0), 0, &ch, &grid, &anchors).unwrap();
        assert_eq!(t.orientation, 0.0);
    }

    #[test]
    fn encode_rejects_unrepresentable() {
        let (grid, anchors) = grid8();
        let ch = ChannelIndex::new(0, 3, 4, 0);
        // centre two cells away
        let far = gt(44.0, 36.0, 16.0, 24.0, 10.0);
        assert!(matches!(
            encode_target(&far, 0, &ch, &grid, &anchors),
            Err(Error::Unrepresentable { .. })
        ));
        // width ratio 4
        let wide = gt(28.0, 36.0, 64.0, 24.0, 10.0);
        assert!(encode_target(&wide, 0, &ch, &grid, &anchors).is_err());
        let mut unlabeled = gt(28.0, 36.0, 16.0, 24.0, 10.0);
        unlabeled.orientation = None;
        assert!(matches!(
            encode_target(&unlabeled, 3, &ch, &grid, &anchors),
            Err(Error::MissingOrientation(3))
        ));
    }

    /// Bisection on a monotone scalar map; independent of the closed-form inverse.
    fn bisect(f: impl Fn(f64) -> f64, target: f64) -> f64 {
        let (mut lo, mut hi) = (-60.0, 60.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn numeric_inversion_reproduces_gt_box() {
        let (grid, anchors) = grid8();
        let ch = ChannelIndex::new(1, 5, 7, 1);
        let g = gt(5.2 * 16.0, 8.3 * 16.0, 50.0, 201.0, 123.0);
        let t = encode_target(&g, 0, &ch, &grid, &anchors).unwrap();
        let a = anchors.get(1, 1);
        let s = 16.0;
        let lx = bisect(|l| (2.0 * sigmoid(l) - 0.5 + 5.0) * s, t.bbox.cx());
        let ly = bisect(|l| (2.0 * sigmoid(l) - 0.5 + 7.0) * s, t.bbox.cy());
        let lw = bisect(|l| (2.0 * sigmoid(l)).powi(2) * a.w, t.bbox.w());
        let lh = bisect(|l| (2.0 * sigmoid(l)).powi(2) * a.h, t.bbox.h());
        let lo = bisect(sigmoid, t.orientation);
        let mut raw = RawPrediction::zeros(&grid);
        raw.logits_mut(&ch).copy_from_slice(&[3.0, lx, ly, lw, lh, 0.0, lo]);
        let e = decode(&raw, &ch, &grid, &anchors).unwrap();
        assert!((e.bbox.cx() - g.bbox.cx()).abs() < 1e-6);
        assert!((e.bbox.cy() - g.bbox.cy()).abs() < 1e-6);
        assert!((e.bbox.w() - g.bbox.w()).abs() < 1e-6);
        assert!((e.bbox.h() - g.bbox.h()).abs() < 1e-6);
        assert!((e.orientation - t.orientation).abs() < 1e-9);

        let closed = invert_target(&t, &ch, &grid, &anchors, 3.0).unwrap();
        for (k, (c, n)) in closed.iter().zip([3.0, lx, ly, lw, lh, 0.0, lo]).enumerate() {
            assert!((c - n).abs() < 1e-6, "field {k}: {c} vs {n}");
        }
    }

    #[test]
    fn jacobian_matches_differences() {
        let (grid, anchors) = grid8();
        let ch = ChannelIndex::new(2, 3, 1, 2);
        let mut raw = RawPrediction::zeros(&grid);
        raw.logits_mut(&ch)
            .copy_from_slice(&[0.3, -0.7, 1.1, 0.4, -1.3, 0.0, 2.0]);
        let (_, jac) = decode_with_jacobian(&raw, &ch, &grid, &anchors).unwrap();
        let h = 1e-6;
        let field = |raw: &RawPrediction, k: usize| {
            let e = decode(raw, &ch, &grid, &anchors).unwrap();
            match k {
                0 => e.objectness,
                1 => e.bbox.cx(),
                2 => e.bbox.cy(),
                3 => e.bbox.w(),
                4 => e.bbox.h(),
                _ => e.orientation,
            }
        };
        let analytic = [
            jac.d_objectness,
            jac.d_box[0],
            jac.d_box[1],
            jac.d_box[2],
            jac.d_box[3],
            jac.d_orientation,
        ];
        for (i, k) in [0usize, 1, 2, 3, 4, 6].into_iter().enumerate() {
            let mut hi = raw.clone();
            let mut lo = raw.clone();
            hi.logits_mut(&ch)[k] += h;
            lo.logits_mut(&ch)[k] -= h;
            let num = (field(&hi, i) - field(&lo, i)) / (2.0 * h);
            assert!((num - analytic[i]).abs() < 1e-6 * (1.0 + num.abs()), "field {k}");
        }
    }
}
