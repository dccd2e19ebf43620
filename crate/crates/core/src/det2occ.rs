//! Conversion of 3D detection boxes into an occupancy probability grid.
//!
//! Boxes below their class threshold are dropped, each survivor is filled
//! with a centered point lattice of spacing `t`, points are voxelized, and
//! voxels claimed by several boxes keep the highest-scoring label (then the
//! lowest class id, then the earliest box).

use serde::{Deserialize, Serialize};

use crate::error::{OccError, Result};
use crate::grid::{GridSpec, LabelGrid, Point3, ProbGrid};

pub const DEFAULT_THRESHOLD: f64 = 0.3;
pub const DEFAULT_SPACING: f64 = 0.2;

/// Upright box: `size` is (length, width, height) with length along the
/// heading, `yaw` rotates counter-clockwise about +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionBox {
    pub center: Point3,
    pub size: Point3,
    pub yaw: f64,
    pub class_id: usize,
    pub score: f64,
}

impl DetectionBox {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.center.iter().chain([&self.yaw]).any(|v| !v.is_finite()) {
            return Err(OccError::invalid("detection box", "non-finite center or yaw"));
        }
        if self.size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(OccError::invalid(
                "detection box",
                format!("size {:?} must be positive", self.size),
            ));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(OccError::invalid(
                "detection box",
                format!("score {} outside [0, 1]", self.score),
            ));
        }
        if self.class_id + 1 >= num_classes {
            return Err(OccError::invalid(
                "detection box",
                format!(
                    "class_id {} is not a semantic class (num_classes {num_classes})",
                    self.class_id
                ),
            ));
        }
        Ok(())
    }

    fn local_to_world(&self, local: Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * local[0] - s * local[1],
            self.center[1] + s * local[0] + c * local[1],
            self.center[2] + local[2],
        ]
    }

    fn world_to_local(&self, p: Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionConfig {
    /// Per semantic class, boxes need `score >= threshold` to be kept.
    pub thresholds: Vec<f64>,
    pub spacing_t: f64,
}

impl ConversionConfig {
    pub fn new(thresholds: Vec<f64>, spacing_t: f64) -> Result<Self> {
        if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(OccError::invalid(
                "conversion config",
                format!("threshold {t} outside [0, 1]"),
            ));
        }
        if !(spacing_t.is_finite() && spacing_t > 0.0) {
            return Err(OccError::invalid(
                "conversion config",
                format!("spacing_t {spacing_t} must be > 0"),
            ));
        }
        Ok(ConversionConfig {
            thresholds,
            spacing_t,
        })
    }

    pub fn uniform(spec: &GridSpec, threshold: f64, spacing_t: f64) -> Result<Self> {
        ConversionConfig::new(vec![threshold; spec.num_semantic()], spacing_t)
    }

    pub fn default_for(spec: &GridSpec) -> Self {
        ConversionConfig {
            thresholds: vec![DEFAULT_THRESHOLD; spec.num_semantic()],
            spacing_t: DEFAULT_SPACING,
        }
    }

    pub(crate) fn check_against(&self, spec: &GridSpec) -> Result<()> {
        if self.thresholds.len() != spec.num_semantic() {
            return Err(OccError::invalid(
                "conversion config",
                format!(
                    "{} thresholds for {} semantic classes",
                    self.thresholds.len(),
                    spec.num_semantic()
                ),
            ));
        }
        Ok(())
    }
}

/// Winning detection score per voxel, 0 where no box landed.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    spec: GridSpec,
    scores: Vec<f64>,
}

impl ScoreGrid {
    pub fn new(spec: GridSpec, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != spec.num_voxels() {
            return Err(OccError::Shape(format!(
                "score grid has {} entries, spec needs {}",
                scores.len(),
                spec.num_voxels()
            )));
        }
        if let Some(v) = scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
            return Err(OccError::Validation {
                voxel: v,
                reason: format!("score {} outside [0, 1]", scores[v]),
            });
        }
        Ok(ScoreGrid { spec, scores })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

/// Boxes whose score reaches their class threshold, in input order.
pub fn filter_boxes(boxes: &[DetectionBox], cfg: &ConversionConfig) -> Vec<DetectionBox> {
    boxes
        .iter()
        .filter(|b| {
            cfg.thresholds
                .get(b.class_id)
                .is_some_and(|&t| b.score >= t)
        })
        .copied()
        .collect()
}

/// Cell-centered lattice with `max(1, floor(size / t))` points per axis,
/// rotated and translated into the world frame.
pub fn box_to_points(b: &DetectionBox, spacing_t: f64) -> Vec<Point3> {
    let counts: [usize; 3] =
        std::array::from_fn(|a| ((b.size[a] / spacing_t).floor() as usize).max(1));
    let axis = |a: usize, k: usize| (k as f64 + 0.5) / counts[a] as f64 * b.size[a] - b.size[a] / 2.0;

    let mut points = Vec::with_capacity(counts.iter().product());
    for i in 0..counts[0] {
        for j in 0..counts[1] {
            for k in 0..counts[2] {
                points.push(b.local_to_world([axis(0, i), axis(1, j), axis(2, k)]));
            }
        }
    }
    points
}

/// Closed-box containment after moving `p` into the box frame.
pub fn point_in_box(p: Point3, b: &DetectionBox) -> bool {
    let local = b.world_to_local(p);
    (0..3).all(|a| local[a].abs() <= b.size[a] / 2.0)
}

#[derive(Debug, Clone, Copy)]
struct Claim {
    score: f64,
    class: u8,
}

impl Claim {
    fn beats(&self, other: &Claim) -> bool {
        self.score > other.score || (self.score == other.score && self.class < other.class)
    }
}

/// Distinct in-volume voxel indices hit by the box's lattice, ascending.
fn box_voxels(b: &DetectionBox, spec: &GridSpec, spacing_t: f64) -> Vec<usize> {
    let mut hit: Vec<usize> = box_to_points(b, spacing_t)
        .into_iter()
        .filter(|&p| point_in_box(p, b))
        .filter_map(|p| spec.world_to_voxel(p))
        .map(|c| spec.voxel_index(c).expect("world_to_voxel returned an in-range voxel"))
        .collect();
    hit.sort_unstable();
    hit.dedup();
    hit
}

/// Rasterizes the boxes that pass `cfg`'s thresholds.
pub fn voxelize_boxes(
    boxes: &[DetectionBox],
    spec: &GridSpec,
    cfg: &ConversionConfig,
) -> (LabelGrid, ScoreGrid) {
    let mut claims: Vec<Option<Claim>> = vec![None; spec.num_voxels()];
    for b in filter_boxes(boxes, cfg) {
        let claim = Claim {
            score: b.score,
            class: b.class_id as u8,
        };
        for v in box_voxels(&b, spec, cfg.spacing_t) {
            match &claims[v] {
                Some(current) if !claim.beats(current) => {}
                _ => claims[v] = Some(claim),
            }
        }
    }

    let free = spec.free_label();
    let labels = claims.iter().map(|c| c.map_or(free, |c| c.class)).collect();
    let scores = claims.iter().map(|c| c.map_or(0.0, |c| c.score)).collect();
    (
        LabelGrid::new(*spec, labels).expect("box classes are semantic"),
        ScoreGrid {
            spec: *spec,
            scores,
        },
    )
}

/// Semantic voxel with score `s` becomes `p(class) = s, p(free) = 1 - s`;
/// free voxels are one-hot on free.
pub fn det_to_probgrid(labels: &LabelGrid, scores: &ScoreGrid) -> Result<ProbGrid> {
    labels
        .spec()
        .ensure_same(scores.spec(), "det labels vs scores")?;
    let spec = *labels.spec();
    let k = spec.num_classes();
    let free = spec.free_label() as usize;
    let mut probs = vec![0.0; spec.num_voxels() * k];
    for (v, (&l, &s)) in labels.labels().iter().zip(scores.scores()).enumerate() {
        let dist = &mut probs[v * k..(v + 1) * k];
        if l as usize == free {
            dist[free] = 1.0;
        } else {
            dist[l as usize] = s;
            dist[free] = 1.0 - s;
        }
    }
    Ok(ProbGrid::from_normalized(spec, probs))
}

/// Filter, rasterize and convert in one step.
pub fn boxes_to_probgrid(
    boxes: &[DetectionBox],
    spec: &GridSpec,
    cfg: &ConversionConfig,
) -> Result<ProbGrid> {
    cfg.check_against(spec)?;
    let (labels, scores) = voxelize_boxes(boxes, spec, cfg);
    det_to_probgrid(&labels, &scores)
}
