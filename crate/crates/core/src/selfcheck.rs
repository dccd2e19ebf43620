//! Built-in verification suites run by `occkit selfcheck`.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{cutout, CutoutSpec, ImageSet};
use crate::det2occ::{box_to_points, point_in_box, DetectionBox};
use crate::ensemble::{weighted_average, EnsembleWeights};
use crate::error::Result;
use crate::grid::{GridSpec, LabelGrid, ProbGrid, VoxelMask};
use crate::head::gradcheck::{check_gradients_with, toy_instance};
use crate::head::{total_loss, BackwardHooks, HeadConfig, LossWeights, VoxelFeatureVolume};
use crate::io::{decode_grid, encode_grid, GridPayload};
use crate::metrics::evaluate;

/// Pass threshold for the gradient suite.
pub const GRAD_TOLERANCE: f64 = 1e-4;

const FULL_GRAD_SEEDS: u64 = 10;
const QUICK_GRAD_SEEDS: u64 = 1;
const TOY_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, Default)]
pub struct SelfcheckOptions {
    pub quick: bool,
    /// Scales the dice gradient by 2 to confirm the checks catch it.
    pub inject_dice_fault: bool,
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SelfcheckReport {
    pub suites: Vec<SuiteResult>,
    pub max_rel_error: f64,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

fn suite(name: &'static str, outcome: Result<std::result::Result<String, String>>) -> SuiteResult {
    let (passed, detail) = match outcome {
        Ok(Ok(d)) => (true, d),
        Ok(Err(d)) => (false, d),
        Err(e) => (false, format!("error: {e}")),
    };
    SuiteResult { name, passed, detail }
}

fn gradients(opts: &SelfcheckOptions) -> Result<(f64, std::result::Result<String, String>)> {
    let cfg = HeadConfig::default();
    let hooks = BackwardHooks {
        dice_grad_scale: if opts.inject_dice_fault { 2.0 } else { 1.0 },
    };
    let seeds = if opts.quick { QUICK_GRAD_SEEDS } else { FULL_GRAD_SEEDS };
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut checked = 0;
    for seed in 0..seeds {
        let inst = toy_instance(&cfg, TOY_SIDE, TOY_SIDE, seed)?;
        let r = check_gradients_with(&inst, &hooks)?;
        checked += r.checked;
        if r.max_rel_error >= worst {
            worst = r.max_rel_error;
            worst_at = format!("seed {seed} {}", r.worst);
        }
    }
    let detail = format!("{checked} parameters over {seeds} seeds, worst {worst_at}");
    Ok((worst, if worst <= GRAD_TOLERANCE { Ok(detail) } else { Err(detail) }))
}

fn loss_anchors() -> Result<std::result::Result<String, String>> {
    let spec = GridSpec::new([2, 2, 2], 1.0, [0.0; 3], 18)?;
    let gt = LabelGrid::new(spec, (0..8).map(|i| (i * 5 % 18) as u8).collect())?;
    let uniform = VoxelFeatureVolume::zeros(2, 2, 2, 18);
    let ce = total_loss(&uniform, &gt, None, LossWeights::new(1.0, 0.0)?)?;
    if (ce - 18f64.ln()).abs() > 1e-9 {
        return Ok(Err(format!("uniform CE {ce} != ln 18")));
    }
    let mut one_hot = VoxelFeatureVolume::zeros(2, 2, 2, 18);
    for (v, &l) in gt.labels().iter().enumerate() {
        one_hot.data[v * 18 + l as usize] = 1e3;
    }
    let dice = total_loss(&one_hot, &gt, None, LossWeights::new(0.0, 1.0)?)?;
    if dice.abs() > 1e-12 {
        return Ok(Err(format!("perfect dice loss {dice} != 0")));
    }
    Ok(Ok(format!("CE {ce:.8}, dice {dice:.1e}")))
}

fn random_labels(rng: &mut ChaCha8Rng, spec: GridSpec) -> Result<LabelGrid> {
    let k = spec.num_classes();
    LabelGrid::new(spec, (0..spec.num_voxels()).map(|_| rng.gen_range(0..k) as u8).collect())
}

fn metric_invariance() -> Result<std::result::Result<String, String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spec = GridSpec::new([4, 4, 2], 1.0, [0.0; 3], 5)?;
    for trial in 0..20 {
        let pred = random_labels(&mut rng, spec)?;
        let gt = random_labels(&mut rng, spec)?;
        let mask = VoxelMask::new(spec, (0..spec.num_voxels()).map(|_| rng.gen_bool(0.6)).collect())?;
        let base = evaluate(&pred, &gt, &mask)?;
        let mut mutated = pred.labels().to_vec();
        for (v, &m) in mask.bits().iter().enumerate() {
            if !m {
                mutated[v] = rng.gen_range(0..5);
            }
        }
        if evaluate(&LabelGrid::new(spec, mutated)?, &gt, &mask)? != base {
            return Ok(Err(format!("trial {trial}: masked-out voxels changed the report")));
        }
        if evaluate(&gt, &pred, &mask)?.per_class != base.per_class {
            return Ok(Err(format!("trial {trial}: IoU not symmetric")));
        }
    }
    Ok(Ok("20 trials".into()))
}

fn random_probs(rng: &mut ChaCha8Rng, spec: GridSpec) -> Result<ProbGrid> {
    let k = spec.num_classes();
    let mut probs = Vec::with_capacity(spec.num_voxels() * k);
    for _ in 0..spec.num_voxels() {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        probs.extend(raw.iter().map(|r| r / total));
    }
    ProbGrid::new(spec, probs)
}

fn ensemble_validity() -> Result<std::result::Result<String, String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let spec = GridSpec::new([3, 3, 2], 1.0, [0.0; 3], 6)?;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let grids = [random_probs(&mut rng, spec)?, random_probs(&mut rng, spec)?];
        let w = EnsembleWeights::new(vec![rng.gen_range(0.1..5.0), rng.gen_range(0.1..5.0)])?;
        let avg = weighted_average(&grids, &w)?;
        for v in avg.voxels() {
            worst = worst.max((v.iter().sum::<f64>() - 1.0).abs());
        }
    }
    if worst > 1e-12 {
        return Ok(Err(format!("normalization error {worst:e}")));
    }
    Ok(Ok(format!("normalization error {worst:.1e}")))
}

fn det_containment() -> Result<std::result::Result<String, String>> {
    let b = |yaw| DetectionBox {
        center: [0.0; 3],
        size: [4.0, 2.0, 1.0],
        yaw,
        class_id: 0,
        score: 1.0,
    };
    if !point_in_box([0.9, 1.9, 0.0], &b(FRAC_PI_2)) || point_in_box([0.9, 1.9, 0.0], &b(0.0)) {
        return Ok(Err("rotated containment fixture failed".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let bx = DetectionBox {
            center: [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-1.0..1.0)],
            size: [rng.gen_range(0.1..4.0), rng.gen_range(0.1..4.0), rng.gen_range(0.1..2.0)],
            yaw: rng.gen_range(-3.2..3.2),
            class_id: 0,
            score: 1.0,
        };
        if let Some(p) = box_to_points(&bx, 0.2).into_iter().find(|&p| !point_in_box(p, &bx)) {
            return Ok(Err(format!("lattice point {p:?} outside its box")));
        }
    }
    Ok(Ok("fixture + 50 lattices".into()))
}

fn io_round_trip() -> Result<std::result::Result<String, String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let spec = GridSpec::new([3, 2, 2], 0.5, [-1.0, 2.0, 0.0], 4)?;
    let labels = random_labels(&mut rng, spec)?;
    let probs = random_probs(&mut rng, spec)?;
    let mask = VoxelMask::new(spec, (0..12).map(|_| rng.gen_bool(0.5)).collect())?;
    for payload in [
        GridPayload::Labels(labels),
        GridPayload::Probs(probs),
        GridPayload::Mask(mask),
    ] {
        let bytes = encode_grid(&payload);
        let back = decode_grid(&bytes)?;
        if back != payload || encode_grid(&back) != bytes {
            return Ok(Err(format!("{:?} payload did not round-trip", payload.kind())));
        }
    }
    Ok(Ok("labels, probs, mask".into()))
}

fn cutout_determinism() -> Result<std::result::Result<String, String>> {
    let imgs = ImageSet::new(2, 6, 8, 3, (0..288).map(|i| (i % 200) as u8 + 1).collect())?;
    let spec = CutoutSpec::new(2, 3, 3, 0, 42)?;
    if cutout(&imgs, &spec) != cutout(&imgs, &spec) {
        return Ok(Err("same seed gave different output".into()));
    }
    if cutout(&imgs, &CutoutSpec::new(0, 3, 3, 0, 42)?) != imgs {
        return Ok(Err("zero holes changed the images".into()));
    }
    Ok(Ok("repeatable, zero-hole identity".into()))
}

/// Runs every suite, writing one line per suite to `out`.
pub fn run(opts: &SelfcheckOptions, out: &mut dyn Write) -> Result<SelfcheckReport> {
    let start = Instant::now();
    let (max_rel_error, grad_outcome) = match gradients(opts) {
        Ok((e, o)) => (e, Ok(o)),
        Err(e) => (f64::NAN, Err(e)),
    };
    let suites = vec![
        suite("gradients", grad_outcome),
        suite("loss-anchors", loss_anchors()),
        suite("metrics", metric_invariance()),
        suite("ensemble", ensemble_validity()),
        suite("det2occ", det_containment()),
        suite("io", io_round_trip()),
        suite("cutout", cutout_determinism()),
    ];
    writeln!(out, "max gradient relative error: {max_rel_error:.3e} (tolerance {GRAD_TOLERANCE:e})")?;
    for s in &suites {
        let tag = if s.passed { "PASS" } else { "FAIL" };
        writeln!(out, "{tag} {:<13} {}", s.name, s.detail)?;
    }
    let report = SelfcheckReport {
        suites,
        max_rel_error,
    };
    writeln!(
        out,
        "{} in {:.2}s",
        if report.passed() { "all suites passed" } else { "selfcheck FAILED" },
        start.elapsed().as_secs_f64()
    )?;
    Ok(report)
}
