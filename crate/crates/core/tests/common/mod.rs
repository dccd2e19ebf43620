//! Shared fixtures and independent reference implementations.

#![allow(dead_code)]

use std::collections::HashSet;

use occkit::det2occ::{ConversionConfig, DetectionBox};
use occkit::{GridSpec, LabelGrid, ProbGrid, VoxelMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_spec(dims: [usize; 3], k: usize) -> GridSpec {
    GridSpec::new(dims, 0.4, [-2.0, -3.0, -1.0], k).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, spec: GridSpec) -> LabelGrid {
    let k = spec.num_classes();
    let labels = (0..spec.num_voxels()).map(|_| rng.gen_range(0..k) as u8).collect();
    LabelGrid::new(spec, labels).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, spec: GridSpec, p: f64) -> VoxelMask {
    VoxelMask::new(spec, (0..spec.num_voxels()).map(|_| rng.gen_bool(p)).collect()).unwrap()
}

pub fn random_dist(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(1e-3..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| r / total).collect()
}

pub fn random_probs(rng: &mut ChaCha8Rng, spec: GridSpec) -> ProbGrid {
    let k = spec.num_classes();
    let probs = (0..spec.num_voxels()).flat_map(|_| random_dist(rng, k)).collect();
    ProbGrid::new(spec, probs).unwrap()
}

/// Per-class `(intersection, union)` by materializing the voxel sets.
pub fn brute_force_counts(pred: &LabelGrid, gt: &LabelGrid, mask: &VoxelMask) -> Vec<(u64, u64)> {
    let k = pred.spec().num_classes();
    (0..k)
        .map(|c| {
            let visible: Vec<usize> = (0..mask.bits().len()).filter(|&v| mask.bits()[v]).collect();
            let p: HashSet<usize> = visible
                .iter()
                .copied()
                .filter(|&v| pred.labels()[v] as usize == c)
                .collect();
            let g: HashSet<usize> = visible
                .iter()
                .copied()
                .filter(|&v| gt.labels()[v] as usize == c)
                .collect();
            (p.intersection(&g).count() as u64, p.union(&g).count() as u64)
        })
        .collect()
}

/// Brute-force mIoU over semantic classes with a non-empty union.
pub fn brute_force_miou(pred: &LabelGrid, gt: &LabelGrid, mask: &VoxelMask) -> Option<f64> {
    let counts = brute_force_counts(pred, gt, mask);
    let semantic = &counts[..counts.len() - 1];
    let ious: Vec<f64> = semantic
        .iter()
        .filter(|(_, u)| *u > 0)
        .map(|&(i, u)| i as f64 / u as f64)
        .collect();
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Containment by rotating the point with polar coordinates, then an
/// axis-aligned comparison.
pub fn contains_via_polar(p: [f64; 3], b: &DetectionBox) -> bool {
    let dx = p[0] - b.center[0];
    let dy = p[1] - b.center[1];
    let r = dx.hypot(dy);
    let theta = dy.atan2(dx) - b.yaw;
    let local = [r * theta.cos(), r * theta.sin(), p[2] - b.center[2]];
    local
        .iter()
        .zip(&b.size)
        .all(|(l, s)| -s / 2.0 <= *l && *l <= s / 2.0)
}

/// Straight double loop over boxes and lattice points, rebuilding the
/// lattice and voxelization from their definitions.
pub fn naive_voxelize(
    boxes: &[DetectionBox],
    spec: &GridSpec,
    cfg: &ConversionConfig,
) -> (Vec<u8>, Vec<f64>) {
    let [nx, ny, nz] = spec.dims();
    let free = (spec.num_classes() - 1) as u8;
    let mut labels = vec![free; nx * ny * nz];
    let mut scores = vec![0.0; nx * ny * nz];
    let mut claimed = vec![false; nx * ny * nz];
    for b in boxes {
        if b.score < cfg.thresholds[b.class_id] {
            continue;
        }
        let n: Vec<usize> = b
            .size
            .iter()
            .map(|s| ((s / cfg.spacing_t).floor() as usize).max(1))
            .collect();
        let (sin, cos) = b.yaw.sin_cos();
        for i in 0..n[0] {
            for j in 0..n[1] {
                for k in 0..n[2] {
                    let lx = (i as f64 + 0.5) / n[0] as f64 * b.size[0] - b.size[0] / 2.0;
                    let ly = (j as f64 + 0.5) / n[1] as f64 * b.size[1] - b.size[1] / 2.0;
                    let lz = (k as f64 + 0.5) / n[2] as f64 * b.size[2] - b.size[2] / 2.0;
                    let p = [
                        b.center[0] + cos * lx - sin * ly,
                        b.center[1] + sin * lx + cos * ly,
                        b.center[2] + lz,
                    ];
                    let o = spec.origin();
                    let idx: Vec<f64> = (0..3)
                        .map(|a| ((p[a] - o[a]) / spec.voxel_size()).floor())
                        .collect();
                    let dims = [nx, ny, nz];
                    if (0..3).any(|a| idx[a] < 0.0 || idx[a] >= dims[a] as f64) {
                        continue;
                    }
                    let v = (idx[0] as usize * ny + idx[1] as usize) * nz + idx[2] as usize;
                    let class = b.class_id as u8;
                    let wins = !claimed[v]
                        || b.score > scores[v]
                        || (b.score == scores[v] && class < labels[v]);
                    if wins {
                        labels[v] = class;
                        scores[v] = b.score;
                        claimed[v] = true;
                    }
                }
            }
        }
    }
    (labels, scores)
}

pub fn random_box(rng: &mut ChaCha8Rng, spec: &GridSpec) -> DetectionBox {
    let lo = spec.origin();
    let hi = spec.upper_corner();
    let semantic = spec.num_semantic();
    DetectionBox {
        center: std::array::from_fn(|a| rng.gen_range(lo[a] - 0.5..hi[a] + 0.5)),
        size: [
            rng.gen_range(0.2..5.0),
            rng.gen_range(0.2..3.0),
            rng.gen_range(0.2..2.5),
        ],
        yaw: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        class_id: rng.gen_range(0..semantic),
        // coarse grid of scores so equal-score ties actually occur
        score: rng.gen_range(0..=20) as f64 / 20.0,
    }
}

/// splitmix64 written over 128-bit arithmetic with explicit truncation.
pub struct RefSplitMix(pub u128);

impl RefSplitMix {
    pub fn next(&mut self) -> u64 {
        const M: u128 = (1 << 64) - 1;
        self.0 = (self.0 + 0x9E37_79B9_7F4A_7C15) & M;
        let mut z = self.0;
        z = ((z ^ (z >> 30)) * 0xBF58_476D_1CE4_E5B9) & M;
        z = ((z ^ (z >> 27)) * 0x94D0_49BB_1331_11EB) & M;
        (z ^ (z >> 31)) as u64
    }
}

/// Expected filled rectangles `(rows, cols)` for one image.
pub fn reference_holes(
    seed: u64,
    image: u64,
    holes: usize,
    hole: (usize, usize),
    h: usize,
    w: usize,
) -> Vec<((usize, usize), (usize, usize))> {
    let mixed = seed ^ ((image as u128 * 0x9E37_79B9_7F4A_7C15) as u64);
    let mut r = RefSplitMix(mixed as u128);
    let span = |c: u64, ext: usize, lim: usize| {
        let start = c as i128 - (ext / 2) as i128;
        let end = start + ext as i128;
        (start.max(0).min(lim as i128) as usize, end.max(0).min(lim as i128) as usize)
    };
    (0..holes)
        .map(|_| {
            let cy = r.next() % h as u64;
            let cx = r.next() % w as u64;
            (span(cy, hole.0, h), span(cx, hole.1, w))
        })
        .collect()
}
