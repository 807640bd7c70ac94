//! Positive-channel assignment.
//!
//! A ground truth claims an anchor when both size ratios are within
//! `anchor_ratio`, at its centre cell plus the nearer horizontal and nearer
//! vertical neighbour. When several ground truths claim one channel the one
//! overlapping the anchor-sized box at that cell the most wins, ties going to
//! the lower ground-truth index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::AnnotatedInstance;
use crate::embedding::{
    encode_target, AnchorSet, Cell, ChannelIndex, GridSpec, Target, ANCHORS_PER_SCALE, NUM_SCALES,
};
use crate::error::{Error, Result};
use crate::kinds::{iou, Box2D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignParams {
    /// Upper bound (exclusive) on `max(r, 1/r)` for both width and height.
    pub anchor_ratio: f64,
    /// Also claim the two nearest neighbour cells.
    pub neighbor_cells: bool,
}

impl Default for AssignParams {
    fn default() -> Self {
        Self {
            anchor_ratio: 4.0,
            neighbor_cells: true,
        }
    }
}

impl AssignParams {
    pub fn validate(&self) -> Result<()> {
        // ratios at or above 4 cannot be reached by the (2*sigmoid)^2 size decode
        if !(self.anchor_ratio > 1.0 && self.anchor_ratio <= 4.0) {
            return Err(Error::Config(format!(
                "assign.anchor_ratio must lie in (1, 4], got {}",
                self.anchor_ratio
            )));
        }
        Ok(())
    }
}

/// Grid, anchors and assignment rule of one head configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub grid: GridSpec,
    pub anchors: AnchorSet,
    pub assign: AssignParams,
}

impl Geometry {
    pub fn assign(&self, gts: &[AnnotatedInstance]) -> Result<Assignment> {
        assign(gts, &self.grid, &self.anchors, &self.assign)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub gt_index: usize,
    pub channel: ChannelIndex,
    pub target: Target,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    /// Sorted by ground-truth index, then channel.
    pub matches: Vec<Match>,
    /// Ground truths that ended up with no channel.
    pub skipped: Vec<usize>,
}

fn anchor_passes(bbox: &Box2D, aw: f64, ah: f64, thresh: f64) -> bool {
    let rw = bbox.w() / aw;
    let rh = bbox.h() / ah;
    rw.max(1.0 / rw) < thresh && rh.max(1.0 / rh) < thresh
}

/// Centre cell along one axis plus the nearer neighbour, if any.
fn axis_cells(g: f64, n: usize, neighbors: bool) -> (usize, Option<usize>) {
    let c = (g.floor() as isize).clamp(0, n as isize - 1) as usize;
    if !neighbors {
        return (c, None);
    }
    let frac = g - c as f64;
    let nb = if frac < 0.5 && c >= 1 {
        Some(c - 1)
    } else if frac > 0.5 && c + 1 < n {
        Some(c + 1)
    } else {
        None
    };
    (c, nb)
}

/// Candidate cells a ground truth claims at `scale`, centre first.
pub fn candidate_cells(bbox: &Box2D, grid: &GridSpec, scale: usize, neighbors: bool) -> Vec<Cell> {
    let s = grid.stride(scale);
    let (gw, gh) = grid.dims(scale);
    let (x, nx) = axis_cells(bbox.cx() / s, gw, neighbors);
    let (y, ny) = axis_cells(bbox.cy() / s, gh, neighbors);
    let mut cells = vec![Cell { x, y }];
    if let Some(nx) = nx {
        cells.push(Cell { x: nx, y });
    }
    if let Some(ny) = ny {
        cells.push(Cell { x, y: ny });
    }
    cells
}

pub fn assign(
    gts: &[AnnotatedInstance],
    grid: &GridSpec,
    anchors: &AnchorSet,
    params: &AssignParams,
) -> Result<Assignment> {
    let (iw, ih) = grid.input_size();
    // channel -> (gt index, overlap with the anchor box there)
    let mut claims: BTreeMap<ChannelIndex, (usize, f64)> = BTreeMap::new();
    for (gi, gt) in gts.iter().enumerate() {
        let b = &gt.bbox;
        if !(0.0..=iw as f64).contains(&b.cx()) || !(0.0..=ih as f64).contains(&b.cy()) {
            return Err(Error::Data {
                path: Default::default(),
                message: format!(
                    "ground truth {gi} centre ({}, {}) lies outside the {iw}x{ih} input",
                    b.cx(),
                    b.cy()
                ),
            });
        }
        for scale in 0..NUM_SCALES {
            let s = grid.stride(scale);
            let cells = candidate_cells(b, grid, scale, params.neighbor_cells);
            for a in 0..ANCHORS_PER_SCALE {
                let shape = anchors.get(scale, a);
                if !anchor_passes(b, shape.w, shape.h, params.anchor_ratio) {
                    continue;
                }
                for cell in &cells {
                    let ch = ChannelIndex {
                        scale,
                        cell: *cell,
                        anchor: a,
                    };
                    let anchor_box = Box2D::new(
                        (cell.x as f64 + 0.5) * s,
                        (cell.y as f64 + 0.5) * s,
                        shape.w,
                        shape.h,
                    )?;
                    let score = iou(b, &anchor_box);
                    claims
                        .entry(ch)
                        .and_modify(|cur| {
                            if score > cur.1 {
                                *cur = (gi, score);
                            }
                        })
                        .or_insert((gi, score));
                }
            }
        }
    }

    let mut matches = claims
        .into_iter()
        .map(|(ch, (gi, _))| {
            let target = encode_target(&gts[gi], gi, &ch, grid, anchors)?;
            Ok(Match {
                gt_index: gi,
                channel: ch,
                target,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    matches.sort_by_key(|a| (a.gt_index, a.channel));

    let mut has = vec![false; gts.len()];
    for m in &matches {
        has[m.gt_index] = true;
    }
    let skipped = has
        .iter()
        .enumerate()
        .filter_map(|(i, &h)| (!h).then_some(i))
        .collect();
    Ok(Assignment { matches, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Source;
    use crate::embedding::is_representable;
    use crate::kinds::OrientationAngle;

    fn gt(cx: f64, cy: f64, w: f64, h: f64) -> AnnotatedInstance {
        AnnotatedInstance {
            image_id: 0,
            annotation_id: 0,
            bbox: Box2D::new(cx, cy, w, h).unwrap(),
            orientation: Some(OrientationAngle::from_degrees(45.0).unwrap()),
            weak: false,
            source: Source::OrientationBenchmark,
        }
    }

    /// Only the first anchor at the first scale can match a 16x16 box.
    fn single_anchor_setup() -> (GridSpec, AnchorSet) {
        let anchors = AnchorSet::new([
            [(16.0, 16.0), (70.0, 70.0), (300.0, 300.0)],
            [(100.0, 100.0), (200.0, 200.0), (300.0, 300.0)],
            [(100.0, 100.0), (200.0, 200.0), (300.0, 300.0)],
            [(100.0, 100.0), (200.0, 200.0), (300.0, 300.0)],
        ])
        .unwrap();
        (GridSpec::new(256, 256, [8, 16, 32, 64]).unwrap(), anchors)
    }

    #[test]
    fn anchor_sized_gt_claims_three_cells() {
        let (grid, anchors) = single_anchor_setup();
        // inside cell (5, 6), off the exact midpoint so both neighbours are representable
        let out = assign(&[gt(5.25 * 8.0, 6.75 * 8.0, 16.0, 16.0)], &grid, &anchors, &Default::default())
            .unwrap();
        assert!(out.skipped.is_empty());
        let cells: Vec<_> = out.matches.iter().map(|m| m.channel.cell).collect();
        assert_eq!(out.matches.len(), 3);
        assert!(cells.contains(&Cell { x: 5, y: 6 }));
        assert!(cells.contains(&Cell { x: 4, y: 6 }));
        assert!(cells.contains(&Cell { x: 5, y: 7 }));
    }

    #[test]
    fn exact_midpoint_claims_only_centre() {
        let (grid, anchors) = single_anchor_setup();
        let out = assign(&[gt(5.5 * 8.0, 6.5 * 8.0, 16.0, 16.0)], &grid, &anchors, &Default::default())
            .unwrap();
        assert_eq!(out.matches.len(), 1);
    }

    #[test]
    fn oversize_gt_is_skipped() {
        let (grid, anchors) = single_anchor_setup();
        let wide = gt(128.0, 128.0, 5.0 * 300.0, 40.0);
        let out = assign(&[wide], &grid, &anchors, &Default::default()).unwrap();
        assert!(out.matches.is_empty());
        assert_eq!(out.skipped, vec![0]);
    }

    #[test]
    fn gt_outside_frame_rejected() {
        let (grid, anchors) = single_anchor_setup();
        assert!(assign(&[gt(300.0, 10.0, 16.0, 16.0)], &grid, &anchors, &Default::default()).is_err());
    }

    #[test]
    fn duplicate_claims_go_to_better_overlap() {
        let (grid, anchors) = single_anchor_setup();
        // both centred in cell (5,5); second matches the anchor box exactly
        let a = gt(5.2 * 8.0, 5.2 * 8.0, 12.0, 20.0);
        let b = gt(5.5 * 8.0, 5.5 * 8.0, 16.0, 16.0);
        let out = assign(&[a, b], &grid, &anchors, &Default::default()).unwrap();
        let centre = out
            .matches
            .iter()
            .find(|m| m.channel.cell == Cell { x: 5, y: 5 })
            .unwrap();
        assert_eq!(centre.gt_index, 1);
        let mut seen = std::collections::HashSet::new();
        for m in &out.matches {
            assert!(seen.insert(m.channel));
        }
    }

    /// Brute force: visit every channel and decide membership from the
    /// ratio rule and the nearest-cell rule stated geometrically.
    fn brute_force(gts: &[AnnotatedInstance], grid: &GridSpec, anchors: &AnchorSet) -> Vec<(usize, ChannelIndex)> {
        let mut out = vec![];
        for scale in 0..NUM_SCALES {
            let s = grid.stride(scale);
            let (gw, gh) = grid.dims(scale);
            for y in 0..gh {
                for x in 0..gw {
                    for a in 0..ANCHORS_PER_SCALE {
                        let sh = anchors.get(scale, a);
                        for (gi, g) in gts.iter().enumerate() {
                            let b = &g.bbox;
                            let rw = b.w() / sh.w;
                            let rh = b.h() / sh.h;
                            if !(rw < 4.0 && 1.0 / rw < 4.0 && rh < 4.0 && 1.0 / rh < 4.0) {
                                continue;
                            }
                            let (gx, gy) = (b.cx() / s, b.cy() / s);
                            let inside = |c: usize, g: f64| g >= c as f64 && g < c as f64 + 1.0;
                            let home = inside(x, gx) && inside(y, gy);
                            // adjacent cell whose centre is strictly closer than the opposite one
                            let horiz = inside(y, gy)
                                && ((x + 1 < gw && inside(x + 1, gx) && (gx - (x + 1) as f64) < 0.5)
                                    || (x >= 1 && inside(x - 1, gx) && gx - (x - 1) as f64 > 0.5));
                            let vert = inside(x, gx)
                                && ((y + 1 < gh && inside(y + 1, gy) && (gy - (y + 1) as f64) < 0.5)
                                    || (y >= 1 && inside(y - 1, gy) && gy - (y - 1) as f64 > 0.5));
                            if home || horiz || vert {
                                out.push((gi, ChannelIndex::new(scale, x, y, a)));
                            }
                        }
                    }
                }
            }
        }
        out.sort_by_key(|(g, c)| (*g, *c));
        out
    }

    #[test]
    fn two_far_gts_match_six_channels() {
        let (grid, anchors) = single_anchor_setup();
        let gts = [gt(3.3 * 8.0, 4.6 * 8.0, 16.0, 17.0), gt(25.8 * 8.0, 20.2 * 8.0, 15.0, 14.0)];
        let out = assign(&gts, &grid, &anchors, &Default::default()).unwrap();
        let got: Vec<_> = out.matches.iter().map(|m| (m.gt_index, m.channel)).collect();
        let oracle = brute_force(&gts, &grid, &anchors);
        assert_eq!(oracle.len(), 6);
        assert_eq!(got, oracle);
    }

    #[test]
    fn matches_are_representable_and_sorted() {
        let grid = GridSpec::default_1024();
        let anchors = AnchorSet::default_four_scale();
        let gts: Vec<_> = (0..12)
            .map(|k| {
                let k = k as f64;
                gt(40.0 + 75.3 * k, 1000.0 - 71.1 * k, 20.0 + 31.0 * k, 40.0 + 27.0 * k)
            })
            .collect();
        let out = assign(&gts, &grid, &anchors, &Default::default()).unwrap();
        assert!(!out.matches.is_empty());
        for m in &out.matches {
            is_representable(&gts[m.gt_index].bbox, &m.channel, &grid, &anchors).unwrap();
        }
        for w in out.matches.windows(2) {
            assert!((w[0].gt_index, w[0].channel) < (w[1].gt_index, w[1].channel));
        }
        let again = assign(&gts, &grid, &anchors, &Default::default()).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn tighter_ratio_never_adds_channels() {
        let grid = GridSpec::default_1024();
        let anchors = AnchorSet::default_four_scale();
        let gts: Vec<_> = (0..8)
            .map(|k| {
                let k = k as f64;
                gt(100.0 + 110.0 * k, 80.0 + 100.0 * k, 15.0 + 50.0 * k, 60.0 + 40.0 * k)
            })
            .collect();
        let mut prev: Option<Vec<ChannelIndex>> = None;
        for ratio in [4.0, 3.0, 2.0, 1.5, 1.1] {
            let p = AssignParams {
                anchor_ratio: ratio,
                neighbor_cells: true,
            };
            let chans: Vec<_> = assign(&gts, &grid, &anchors, &p)
                .unwrap()
                .matches
                .iter()
                .map(|m| m.channel)
                .collect();
            if let Some(prev) = &prev {
                assert!(chans.iter().all(|c| prev.contains(c)));
            }
            prev = Some(chans);
        }
    }
}
