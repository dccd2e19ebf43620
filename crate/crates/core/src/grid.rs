//! Voxel volume geometry and the dense grids defined over it.
//!
//! All grids share one linear layout: x-major, then y, then z, so voxel
//! `(x, y, z)` lives at `(x * ny + y) * nz + z`. Probability grids append
//! the class axis innermost.

use serde::{Deserialize, Serialize};

use crate::error::{OccError, Result};

/// Maximum deviation of a voxel's probability sum from 1 accepted on input.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// Sums closer to 1 than this are left untouched rather than rescaled, so
/// an already-normalized grid survives a round-trip bit for bit.
const RENORMALIZE_THRESHOLD: f64 = 1e-12;

/// Labels are stored as `u8`, which caps the class count.
pub const MAX_CLASSES: usize = 256;

pub type Point3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelCoord {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl VoxelCoord {
    pub const fn new(x: usize, y: usize, z: usize) -> Self {
        VoxelCoord { x, y, z }
    }
}

impl From<[usize; 3]> for VoxelCoord {
    fn from(c: [usize; 3]) -> Self {
        VoxelCoord::new(c[0], c[1], c[2])
    }
}

/// Geometry of the voxel volume: cell counts, isotropic voxel size, the
/// minimum corner, and the number of classes (the last one is free space).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpecFields", into = "GridSpecFields")]
pub struct GridSpec {
    dims: [usize; 3],
    voxel_size: f64,
    origin: Point3,
    num_classes: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSpecFields {
    dims: [usize; 3],
    voxel_size: f64,
    origin: Point3,
    num_classes: usize,
}

impl TryFrom<GridSpecFields> for GridSpec {
    type Error = OccError;

    fn try_from(f: GridSpecFields) -> Result<Self> {
        GridSpec::new(f.dims, f.voxel_size, f.origin, f.num_classes)
    }
}

impl From<GridSpec> for GridSpecFields {
    fn from(s: GridSpec) -> Self {
        GridSpecFields {
            dims: s.dims,
            voxel_size: s.voxel_size,
            origin: s.origin,
            num_classes: s.num_classes,
        }
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::challenge()
    }
}

impl GridSpec {
    pub fn new(
        dims: [usize; 3],
        voxel_size: f64,
        origin: Point3,
        num_classes: usize,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(OccError::invalid("grid spec", format!("dims {dims:?} must all be >= 1")));
        }
        if dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).is_none() {
            return Err(OccError::invalid("grid spec", format!("dims {dims:?} overflow")));
        }
        if !(voxel_size.is_finite() && voxel_size > 0.0) {
            return Err(OccError::invalid(
                "grid spec",
                format!("voxel_size {voxel_size} must be finite and > 0"),
            ));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(OccError::invalid("grid spec", format!("origin {origin:?} not finite")));
        }
        if !(2..=MAX_CLASSES).contains(&num_classes) {
            return Err(OccError::invalid(
                "grid spec",
                format!("num_classes {num_classes} must be in [2, {MAX_CLASSES}]"),
            ));
        }
        Ok(GridSpec {
            dims,
            voxel_size,
            origin,
            num_classes,
        })
    }

    /// The 200x200x16 volume at 0.4 m spanning [-40, 40] x [-40, 40] x [-1, 5.4]
    /// with 17 semantic classes plus free (label 17).
    pub fn challenge() -> Self {
        GridSpec {
            dims: [200, 200, 16],
            voxel_size: 0.4,
            origin: [-40.0, -40.0, -1.0],
            num_classes: 18,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn origin(&self) -> Point3 {
        self.origin
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn free_label(&self) -> u8 {
        (self.num_classes - 1) as u8
    }

    pub fn num_semantic(&self) -> usize {
        self.num_classes - 1
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Maximum corner, `origin + dims * voxel_size`.
    pub fn upper_corner(&self) -> Point3 {
        std::array::from_fn(|a| self.origin[a] + self.dims[a] as f64 * self.voxel_size)
    }

    pub fn voxel_index(&self, c: VoxelCoord) -> Result<usize> {
        let [nx, ny, nz] = self.dims;
        if c.x >= nx || c.y >= ny || c.z >= nz {
            return Err(OccError::IndexOutOfRange {
                coord: [c.x, c.y, c.z],
                dims: self.dims,
            });
        }
        Ok((c.x * ny + c.y) * nz + c.z)
    }

    /// Inverse of [`GridSpec::voxel_index`].
    pub fn voxel_coord(&self, index: usize) -> Result<VoxelCoord> {
        let [_, ny, nz] = self.dims;
        if index >= self.num_voxels() {
            return Err(OccError::IndexOutOfRange {
                coord: [index / (ny * nz), (index / nz) % ny, index % nz],
                dims: self.dims,
            });
        }
        Ok(VoxelCoord::new(index / (ny * nz), (index / nz) % ny, index % nz))
    }

    /// Cell containing `p` under half-open cells; `None` outside the volume.
    pub fn world_to_voxel(&self, p: Point3) -> Option<VoxelCoord> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            // NaN fails both comparisons
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out.into())
    }

    pub fn voxel_center(&self, c: VoxelCoord) -> Point3 {
        let idx = [c.x, c.y, c.z];
        std::array::from_fn(|a| self.origin[a] + (idx[a] as f64 + 0.5) * self.voxel_size)
    }

    pub(crate) fn ensure_same(&self, other: &GridSpec, context: &str) -> Result<()> {
        if self != other {
            return Err(OccError::SpecMismatch(format!(
                "{context}: {self:?} vs {other:?}"
            )));
        }
        Ok(())
    }
}

/// Dense per-voxel semantic labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    spec: GridSpec,
    labels: Vec<u8>,
}

impl LabelGrid {
    pub fn new(spec: GridSpec, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != spec.num_voxels() {
            return Err(OccError::Shape(format!(
                "label grid has {} entries, spec needs {}",
                labels.len(),
                spec.num_voxels()
            )));
        }
        if let Some(v) = labels.iter().position(|&l| l as usize >= spec.num_classes()) {
            return Err(OccError::Validation {
                voxel: v,
                reason: format!("label {} >= num_classes {}", labels[v], spec.num_classes()),
            });
        }
        Ok(LabelGrid { spec, labels })
    }

    pub fn filled(spec: GridSpec, label: u8) -> Result<Self> {
        LabelGrid::new(spec, vec![label; spec.num_voxels()])
    }

    pub fn free(spec: GridSpec) -> Self {
        LabelGrid {
            spec,
            labels: vec![spec.free_label(); spec.num_voxels()],
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, c: VoxelCoord) -> Result<u8> {
        Ok(self.labels[self.spec.voxel_index(c)?])
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }
}

/// Dense per-voxel class distributions, voxel-major then class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbGrid {
    spec: GridSpec,
    probs: Vec<f64>,
}

impl ProbGrid {
    /// Validates non-negativity and per-voxel sums within
    /// [`PROB_SUM_TOLERANCE`], then rescales any voxel whose sum is not
    /// already 1 to within 1e-12.
    pub fn new(spec: GridSpec, mut probs: Vec<f64>) -> Result<Self> {
        let k = spec.num_classes();
        if probs.len() != spec.num_voxels() * k {
            return Err(OccError::Shape(format!(
                "prob grid has {} entries, spec needs {}",
                probs.len(),
                spec.num_voxels() * k
            )));
        }
        for (v, dist) in probs.chunks_exact_mut(k).enumerate() {
            if let Some(p) = dist.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
                return Err(OccError::Validation {
                    voxel: v,
                    reason: format!("probability {p} is negative or not finite"),
                });
            }
            let sum: f64 = dist.iter().sum();
            if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
                return Err(OccError::Validation {
                    voxel: v,
                    reason: format!("probabilities sum to {sum}"),
                });
            }
            if (sum - 1.0).abs() > RENORMALIZE_THRESHOLD {
                dist.iter_mut().for_each(|p| *p /= sum);
            }
        }
        Ok(ProbGrid { spec, probs })
    }

    /// Caller guarantees every voxel is already a distribution.
    pub(crate) fn from_normalized(spec: GridSpec, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), spec.num_voxels() * spec.num_classes());
        ProbGrid { spec, probs }
    }

    pub fn one_hot(labels: &LabelGrid) -> Self {
        let spec = *labels.spec();
        let k = spec.num_classes();
        let mut probs = vec![0.0; spec.num_voxels() * k];
        for (v, &l) in labels.labels().iter().enumerate() {
            probs[v * k + l as usize] = 1.0;
        }
        ProbGrid { spec, probs }
    }

    pub fn uniform(spec: GridSpec) -> Self {
        let k = spec.num_classes();
        ProbGrid {
            spec,
            probs: vec![1.0 / k as f64; spec.num_voxels() * k],
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn voxel(&self, index: usize) -> &[f64] {
        let k = self.spec.num_classes();
        &self.probs[index * k..(index + 1) * k]
    }

    pub fn voxels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.probs.chunks_exact(self.spec.num_classes())
    }

    pub fn argmax(&self) -> LabelGrid {
        argmax_labels(self)
    }
}

/// Lowest class index attaining the maximum.
pub(crate) fn argmax_index(dist: &[f64]) -> usize {
    let mut best = 0;
    for (c, &p) in dist.iter().enumerate().skip(1) {
        if p > dist[best] {
            best = c;
        }
    }
    best
}

/// Per-voxel argmax, ties resolved to the lowest class index.
pub fn argmax_labels(p: &ProbGrid) -> LabelGrid {
    LabelGrid {
        spec: p.spec,
        labels: p.voxels().map(|d| argmax_index(d) as u8).collect(),
    }
}

/// Per-voxel evaluation mask; `true` voxels participate.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMask {
    spec: GridSpec,
    bits: Vec<bool>,
}

impl VoxelMask {
    pub fn new(spec: GridSpec, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != spec.num_voxels() {
            return Err(OccError::Shape(format!(
                "mask has {} entries, spec needs {}",
                bits.len(),
                spec.num_voxels()
            )));
        }
        Ok(VoxelMask { spec, bits })
    }

    pub fn full(spec: GridSpec) -> Self {
        VoxelMask {
            spec,
            bits: vec![true; spec.num_voxels()],
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Ordered class names, the last being free space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTable {
    names: Vec<String>,
}

const CHALLENGE_CLASSES: [&str; 18] = [
    "others",
    "barrier",
    "bicycle",
    "bus",
    "car",
    "construction_vehicle",
    "motorcycle",
    "pedestrian",
    "traffic_cone",
    "trailer",
    "truck",
    "driveable_surface",
    "other_flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
    "free",
];

impl ClassTable {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if !(2..=MAX_CLASSES).contains(&names.len()) {
            return Err(OccError::invalid(
                "class table",
                format!("{} names, need 2..={MAX_CLASSES}", names.len()),
            ));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(OccError::invalid("class table", format!("duplicate name {n:?}")));
            }
        }
        Ok(ClassTable { names })
    }

    pub fn challenge() -> Self {
        ClassTable {
            names: CHALLENGE_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// The challenge table when the grid has 18 classes, otherwise
    /// `class_0 .. class_{k-2}` followed by `free`.
    pub fn for_spec(spec: &GridSpec) -> Self {
        if spec.num_classes() == CHALLENGE_CLASSES.len() {
            return ClassTable::challenge();
        }
        let mut names: Vec<String> =
            (0..spec.num_semantic()).map(|c| format!("class_{c}")).collect();
        names.push("free".into());
        ClassTable { names }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, class: usize) -> Option<&str> {
        self.names.get(class).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dims: [usize; 3]) -> GridSpec {
        GridSpec::new(dims, 0.5, [-1.0, 2.0, 0.25], 4).unwrap()
    }

    #[test]
    fn challenge_upper_corner_is_exact() {
        let s = GridSpec::challenge();
        assert_eq!(s.upper_corner(), [40.0, 40.0, 5.4]);
        assert_eq!(s.free_label(), 17);
        assert_eq!(s.num_voxels(), 640_000);
    }

    #[test]
    fn voxel_index_examples() {
        let s = GridSpec::challenge();
        assert_eq!(s.voxel_index(VoxelCoord::new(0, 0, 0)).unwrap(), 0);
        assert_eq!(s.voxel_index(VoxelCoord::new(199, 199, 15)).unwrap(), 639_999);

        let s = small([2, 3, 4]);
        // enumeration in x, y, z order is the canonical order
        let mut n = 0;
        for x in 0..2 {
            for y in 0..3 {
                for z in 0..4 {
                    assert_eq!(s.voxel_index(VoxelCoord::new(x, y, z)).unwrap(), n);
                    n += 1;
                }
            }
        }
        assert_eq!(s.voxel_index(VoxelCoord::new(1, 2, 3)).unwrap(), 23);
    }

    #[test]
    fn voxel_index_rejects_out_of_range() {
        let s = small([2, 3, 4]);
        for c in [[2, 0, 0], [0, 3, 0], [0, 0, 4]] {
            assert!(matches!(
                s.voxel_index(c.into()),
                Err(OccError::IndexOutOfRange { .. })
            ));
        }
        assert!(s.voxel_coord(24).is_err());
    }

    #[test]
    fn index_and_coord_are_inverse() {
        let s = small([3, 5, 2]);
        for i in 0..s.num_voxels() {
            let c = s.voxel_coord(i).unwrap();
            assert_eq!(s.voxel_index(c).unwrap(), i);
        }
    }

    #[test]
    fn world_to_voxel_examples() {
        let s = GridSpec::challenge();
        assert_eq!(s.world_to_voxel([-40.0, -40.0, -1.0]), Some(VoxelCoord::new(0, 0, 0)));
        assert_eq!(s.world_to_voxel([40.0, 0.0, 0.0]), None);
        assert_eq!(s.world_to_voxel([0.0, 0.0, 5.4]), None);
        assert_eq!(s.world_to_voxel([-40.0001, 0.0, 0.0]), None);
        assert_eq!(s.world_to_voxel([-39.9, -39.5, -0.9]), Some(VoxelCoord::new(0, 1, 0)));
        assert_eq!(s.world_to_voxel([f64::NAN, 0.0, 0.0]), None);
    }

    #[test]
    fn voxel_centers_map_back() {
        for s in [small([3, 4, 5]), GridSpec::challenge()] {
            let step = if s.num_voxels() > 1000 { 97 } else { 1 };
            for i in (0..s.num_voxels()).step_by(step) {
                let c = s.voxel_coord(i).unwrap();
                assert_eq!(s.world_to_voxel(s.voxel_center(c)), Some(c));
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(GridSpec::new([0, 1, 1], 1.0, [0.0; 3], 2).is_err());
        assert!(GridSpec::new([1, 1, 1], 0.0, [0.0; 3], 2).is_err());
        assert!(GridSpec::new([1, 1, 1], 1.0, [0.0; 3], 1).is_err());
        assert!(GridSpec::new([1, 1, 1], 1.0, [0.0; 3], 257).is_err());
        assert!(GridSpec::new([1, 1, 1], 1.0, [f64::INFINITY, 0.0, 0.0], 2).is_err());
    }

    #[test]
    fn spec_json_round_trip_validates() {
        let s = GridSpec::challenge();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<GridSpec>(&text).unwrap(), s);
        let bad = r#"{"dims":[1,1,1],"voxel_size":-1.0,"origin":[0,0,0],"num_classes":3}"#;
        assert!(serde_json::from_str::<GridSpec>(bad).is_err());
    }

    #[test]
    fn argmax_examples() {
        let s = GridSpec::challenge();
        let one = GridSpec::new([1, 1, 1], 0.4, [0.0; 3], 18).unwrap();
        let mut hot = vec![0.0; 18];
        hot[4] = 1.0;
        assert_eq!(argmax_labels(&ProbGrid::new(one, hot).unwrap()).labels(), &[4]);
        assert_eq!(argmax_labels(&ProbGrid::uniform(one)).labels(), &[0]);
        let mut d = vec![0.0; 18];
        d[0] = 0.1;
        d[1] = 0.5;
        d[2] = 0.4;
        assert_eq!(argmax_labels(&ProbGrid::new(one, d).unwrap()).labels(), &[1]);
        assert_eq!(s.num_classes(), 18);
    }

    #[test]
    fn prob_grid_validation_and_renormalization() {
        let s = GridSpec::new([2, 1, 1], 1.0, [0.0; 3], 2).unwrap();
        let g = ProbGrid::new(s, vec![0.5, 0.5 + 5e-7, 1.0, 0.0]).unwrap();
        let sum: f64 = g.voxel(0).iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
        assert_eq!(g.voxel(1), &[1.0, 0.0]);

        match ProbGrid::new(s, vec![0.5, 0.5, 0.7, 0.2]) {
            Err(OccError::Validation { voxel, .. }) => assert_eq!(voxel, 1),
            other => panic!("expected validation error, got {other:?}"),
        }
        assert!(ProbGrid::new(s, vec![1.5, -0.5, 1.0, 0.0]).is_err());
        assert!(ProbGrid::new(s, vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn normalized_input_is_kept_bit_exact() {
        let s = GridSpec::new([1, 1, 1], 1.0, [0.0; 3], 3).unwrap();
        let d = vec![0.1, 0.2, 0.7];
        assert_eq!(ProbGrid::new(s, d.clone()).unwrap().probs(), d.as_slice());
    }

    #[test]
    fn label_grid_validation() {
        let s = small([1, 1, 2]);
        assert!(LabelGrid::new(s, vec![0, 3]).is_ok());
        assert!(matches!(
            LabelGrid::new(s, vec![0, 4]),
            Err(OccError::Validation { voxel: 1, .. })
        ));
        assert!(LabelGrid::new(s, vec![0]).is_err());
        assert!(VoxelMask::new(s, vec![true]).is_err());
    }

    #[test]
    fn class_table() {
        let t = ClassTable::challenge();
        assert_eq!(t.len(), 18);
        assert_eq!(t.name(4), Some("car"));
        assert_eq!(t.name(17), Some("free"));
        assert_eq!(t.id_of("vegetation"), Some(16));
        assert!(ClassTable::new(vec!["a".into(), "a".into()]).is_err());
        let small = ClassTable::for_spec(&small([1, 1, 1]));
        assert_eq!(small.names(), &["class_0", "class_1", "class_2", "free"]);
    }
}
