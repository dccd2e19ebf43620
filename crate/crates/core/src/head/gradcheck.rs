//! Central finite-difference verification of [`super::backward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{backward_with, loss, BackwardHooks, BevQueryGrid, HeadConfig, HeadParams};
use crate::error::Result;
use crate::grid::{GridSpec, LabelGrid, VoxelMask};

pub const FD_STEP: f64 = 1e-6;

/// Denominator floor for the relative error. A central difference at
/// [`FD_STEP`] carries about 2e-9 of rounding noise, so gradients below
/// the floor are effectively held to an absolute 1e-8.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst parameter.
    pub worst: String,
    pub checked: usize,
}

/// One random training instance for the head.
pub struct ToyInstance {
    pub q: BevQueryGrid,
    pub gt: LabelGrid,
    pub mask: VoxelMask,
    pub params: HeadParams,
}

/// Random BEV grid `(h, w, cfg.bev_channels)`, labels and a mask that
/// drops about a quarter of the voxels.
pub fn toy_instance(cfg: &HeadConfig, h: usize, w: usize, seed: u64) -> Result<ToyInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0CC0);
    let spec = GridSpec::new([h, w, cfg.z], 0.4, [0.0; 3], cfg.num_classes)?;
    let n = spec.num_voxels();
    let labels = (0..n)
        .map(|_| rng.gen_range(0..cfg.num_classes) as u8)
        .collect();
    let mut bits: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.75)).collect();
    bits[0] = true;
    Ok(ToyInstance {
        q: BevQueryGrid::random(h, w, cfg.bev_channels, seed),
        gt: LabelGrid::new(spec, labels)?,
        mask: VoxelMask::new(spec, bits)?,
        params: HeadParams::random(cfg, seed.wrapping_add(1), 0.5)?,
    })
}

/// Compares every analytic parameter gradient against a central
/// difference with step [`FD_STEP`].
pub fn check_gradients(inst: &ToyInstance) -> Result<GradCheckReport> {
    check_gradients_with(inst, &BackwardHooks::default())
}

#[doc(hidden)]
pub fn check_gradients_with(inst: &ToyInstance, hooks: &BackwardHooks) -> Result<GradCheckReport> {
    let mask = Some(&inst.mask);
    let (_, grads) = backward_with(&inst.q, &inst.gt, mask, &inst.params, hooks)?;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(name, _, data)| (name, data.to_vec()))
        .collect();

    let mut params = inst.params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (t, (name, analytic)) in analytic.iter().enumerate() {
        for i in 0..analytic.len() {
            let original = params.tensors_mut()[t][i];
            params.tensors_mut()[t][i] = original + FD_STEP;
            let plus = loss(&inst.q, &inst.gt, mask, &params)?;
            params.tensors_mut()[t][i] = original - FD_STEP;
            let minus = loss(&inst.q, &inst.gt, mask, &params)?;
            params.tensors_mut()[t][i] = original;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = err;
                report.worst = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}
