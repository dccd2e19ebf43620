//! Cross-entropy and soft dice over per-voxel logits, with gradients.

use serde::{Deserialize, Serialize};

use super::VoxelFeatureVolume as Logits;
use crate::error::{OccError, Result};
use crate::grid::{LabelGrid, VoxelMask};

pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ce: 1.0, dice: 1.0 }
    }
}

impl LossWeights {
    pub fn new(ce: f64, dice: f64) -> Result<Self> {
        let ok = |l: f64| l.is_finite() && l >= 0.0;
        if !ok(ce) || !ok(dice) || (ce == 0.0 && dice == 0.0) {
            return Err(OccError::invalid(
                "loss weights",
                format!("({ce}, {dice}) must be >= 0 and not both zero"),
            ));
        }
        Ok(LossWeights { ce, dice })
    }
}

fn check_aligned(logits: &Logits, gt: &LabelGrid) -> Result<()> {
    let [nx, ny, nz] = gt.spec().dims();
    if (logits.h, logits.w, logits.z) != (nx, ny, nz) || logits.ch != gt.spec().num_classes() {
        return Err(OccError::Shape(format!(
            "logits {}x{}x{}x{} vs labels {nx}x{ny}x{nz}x{}",
            logits.h,
            logits.w,
            logits.z,
            logits.ch,
            gt.spec().num_classes()
        )));
    }
    Ok(())
}

fn softmax_into(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Per-voxel softmax, same layout as the logits.
pub fn softmax(logits: &Logits) -> Vec<f64> {
    let mut p = vec![0.0; logits.data.len()];
    for (z, out) in logits.data.chunks_exact(logits.ch).zip(p.chunks_exact_mut(logits.ch)) {
        softmax_into(z, out);
    }
    p
}

fn neg_log_softmax(z: &[f64], target: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[target]
}

fn included<'a>(
    gt: &'a LabelGrid,
    mask: Option<&'a VoxelMask>,
) -> Result<impl Iterator<Item = bool> + 'a> {
    if let Some(m) = mask {
        gt.spec().ensure_same(m.spec(), "labels vs mask")?;
    }
    let n = gt.labels().len();
    Ok((0..n).map(move |v| mask.map_or(true, |m| m.bits()[v])))
}

/// Mean `-log softmax(logits)[gt]` over voxels selected by `mask` (all
/// voxels when `None`).
pub fn ce_loss(logits: &Logits, gt: &LabelGrid, mask: Option<&VoxelMask>) -> Result<f64> {
    Ok(ce_loss_grad(logits, gt, mask)?.0)
}

/// Loss and its gradient with respect to the logits.
pub fn ce_loss_grad(
    logits: &Logits,
    gt: &LabelGrid,
    mask: Option<&VoxelMask>,
) -> Result<(f64, Vec<f64>)> {
    check_aligned(logits, gt)?;
    let k = logits.ch;
    let mut grad = vec![0.0; logits.data.len()];
    let mut total = 0.0;
    let mut count = 0usize;
    for (v, take) in included(gt, mask)?.enumerate() {
        if !take {
            continue;
        }
        let z = &logits.data[v * k..(v + 1) * k];
        let target = gt.labels()[v] as usize;
        total += neg_log_softmax(z, target);
        let g = &mut grad[v * k..(v + 1) * k];
        softmax_into(z, g);
        g[target] -= 1.0;
        count += 1;
    }
    if count == 0 {
        return Err(OccError::invalid("cross-entropy", "mask selects no voxels"));
    }
    let n = count as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, grad))
}

/// Soft dice averaged over every class (free included), smoothing
/// [`DICE_EPS`].
pub fn dice_loss(logits: &Logits, gt: &LabelGrid) -> Result<f64> {
    Ok(dice_loss_grad(logits, gt)?.0)
}

pub fn dice_loss_grad(logits: &Logits, gt: &LabelGrid) -> Result<(f64, Vec<f64>)> {
    check_aligned(logits, gt)?;
    let k = logits.ch;
    let p = softmax(logits);

    let mut inter = vec![0.0; k];
    let mut p_sum = vec![0.0; k];
    let mut g_sum = vec![0.0; k];
    for (dist, &label) in p.chunks_exact(k).zip(gt.labels()) {
        for (c, &pc) in dist.iter().enumerate() {
            p_sum[c] += pc;
        }
        inter[label as usize] += dist[label as usize];
        g_sum[label as usize] += 1.0;
    }

    let mut loss = 0.0;
    // d loss / d p(c) = -(2 g M - N) / (K M^2), with N = 2I + eps, M = P + G + eps
    let mut coef_hit = vec![0.0; k];
    let mut coef_miss = vec![0.0; k];
    for c in 0..k {
        let num = 2.0 * inter[c] + DICE_EPS;
        let den = p_sum[c] + g_sum[c] + DICE_EPS;
        loss += 1.0 - num / den;
        coef_miss[c] = num / (den * den) / k as f64;
        coef_hit[c] = coef_miss[c] - 2.0 / den / k as f64;
    }
    loss /= k as f64;

    let mut grad = vec![0.0; p.len()];
    for (v, (dist, &label)) in p.chunks_exact(k).zip(gt.labels()).enumerate() {
        let g = &mut grad[v * k..(v + 1) * k];
        for c in 0..k {
            g[c] = if c == label as usize { coef_hit[c] } else { coef_miss[c] };
        }
        softmax_backward_in_place(dist, g);
    }
    Ok((loss, grad))
}

/// Turns `dL/dp` into `dL/dz` for `p = softmax(z)`.
fn softmax_backward_in_place(p: &[f64], g: &mut [f64]) {
    let inner: f64 = p.iter().zip(g.iter()).map(|(p, g)| p * g).sum();
    for (gc, &pc) in g.iter_mut().zip(p) {
        *gc = pc * (*gc - inner);
    }
}

/// `ce * CE + dice * Dice`.
pub fn total_loss(
    logits: &Logits,
    gt: &LabelGrid,
    mask: Option<&VoxelMask>,
    weights: LossWeights,
) -> Result<f64> {
    let ce = if weights.ce != 0.0 { ce_loss(logits, gt, mask)? } else { 0.0 };
    let dice = if weights.dice != 0.0 { dice_loss(logits, gt)? } else { 0.0 };
    Ok(weights.ce * ce + weights.dice * dice)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    fn labels(dims: [usize; 3], k: usize, l: Vec<u8>) -> LabelGrid {
        LabelGrid::new(GridSpec::new(dims, 1.0, [0.0; 3], k).unwrap(), l).unwrap()
    }

    fn logits(dims: [usize; 3], k: usize, data: Vec<f64>) -> Logits {
        Logits::new(dims[0], dims[1], dims[2], k, data).unwrap()
    }

    #[test]
    fn ce_uniform_is_log_k() {
        let gt = labels([1, 2, 1], 18, vec![3, 17]);
        let z = logits([1, 2, 1], 18, vec![0.25; 36]);
        assert!((ce_loss(&z, &gt, None).unwrap() - 18f64.ln()).abs() < 1e-12);
        assert!((18f64.ln() - 2.890_371_76).abs() < 1e-8);
    }

    #[test]
    fn ce_large_margin_is_near_zero() {
        let gt = labels([1, 1, 1], 18, vec![5]);
        let mut d = vec![0.0; 18];
        d[5] = 50.0;
        assert!(ce_loss(&logits([1, 1, 1], 18, d), &gt, None).unwrap() <= 1e-9);
    }

    #[test]
    fn ce_two_voxel_hand_computation() {
        let gt = labels([2, 1, 1], 2, vec![0, 1]);
        let z = logits([2, 1, 1], 2, vec![1.0, 0.0, 0.0, 2.0]);
        // -ln(e/(e+1)) and -ln(e^2/(1+e^2))
        let e = std::f64::consts::E;
        let expected = (-(e / (e + 1.0)).ln() - (e * e / (1.0 + e * e)).ln()) / 2.0;
        assert!((ce_loss(&z, &gt, None).unwrap() - expected).abs() < 1e-14);

        let mask = VoxelMask::new(*gt.spec(), vec![false, true]).unwrap();
        let masked = ce_loss(&z, &gt, Some(&mask)).unwrap();
        assert!((masked + (e * e / (1.0 + e * e)).ln()).abs() < 1e-14);

        let none = VoxelMask::new(*gt.spec(), vec![false, false]).unwrap();
        assert!(ce_loss(&z, &gt, Some(&none)).is_err());
    }

    #[test]
    fn dice_perfect_overlap_is_zero() {
        let gt = labels([2, 1, 1], 3, vec![0, 2]);
        let z = logits([2, 1, 1], 3, vec![800.0, 0.0, 0.0, 0.0, 0.0, 800.0]);
        assert!(dice_loss(&z, &gt).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn dice_disjoint_is_near_one_per_class() {
        // both voxels predicted as class 1, truth is class 0 for both
        let gt = labels([2, 1, 1], 2, vec![0, 0]);
        let z = logits([2, 1, 1], 2, vec![0.0, 800.0, 0.0, 800.0]);
        // class 0: 1 - eps/(0 + 2 + eps); class 1: 1 - eps/(2 + 0 + eps)
        let each = 1.0 - DICE_EPS / (2.0 + DICE_EPS);
        assert!((dice_loss(&z, &gt).unwrap() - each).abs() < 1e-12);
    }

    #[test]
    fn dice_soft_hand_computation() {
        // p = [0.6, 0.4] at both voxels, truth (0, 1)
        let gt = labels([2, 1, 1], 2, vec![0, 1]);
        let a = (0.6f64 / 0.4).ln();
        let z = logits([2, 1, 1], 2, vec![a, 0.0, a, 0.0]);
        let d0 = 1.0 - (2.0 * 0.6 + DICE_EPS) / (1.2 + 1.0 + DICE_EPS);
        let d1 = 1.0 - (2.0 * 0.4 + DICE_EPS) / (0.8 + 1.0 + DICE_EPS);
        assert!((dice_loss(&z, &gt).unwrap() - (d0 + d1) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn total_is_linear() {
        let gt = labels([2, 1, 1], 3, vec![0, 2]);
        let z = logits([2, 1, 1], 3, vec![0.3, -1.0, 2.0, 0.1, 0.0, -0.4]);
        let ce = ce_loss(&z, &gt, None).unwrap();
        let dice = dice_loss(&z, &gt).unwrap();
        let w = |a, b| LossWeights::new(a, b).unwrap();
        assert_eq!(total_loss(&z, &gt, None, w(1.0, 0.0)).unwrap(), ce);
        assert_eq!(total_loss(&z, &gt, None, w(0.0, 1.0)).unwrap(), dice);
        let t = total_loss(&z, &gt, None, w(2.0, 3.0)).unwrap();
        assert!((t - (2.0 * ce + 3.0 * dice)).abs() < 1e-12);
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0).is_err());
    }

    #[test]
    fn shape_mismatch() {
        let gt = labels([2, 1, 1], 3, vec![0, 2]);
        let z = logits([2, 1, 1], 2, vec![0.0; 4]);
        assert!(matches!(ce_loss(&z, &gt, None), Err(OccError::Shape(_))));
        assert!(dice_loss(&z, &gt).is_err());
    }

    fn finite_diff(f: impl Fn(&Logits) -> f64, z: &Logits) -> Vec<f64> {
        let h = 1e-6;
        (0..z.data.len())
            .map(|i| {
                let mut plus = z.clone();
                plus.data[i] += h;
                let mut minus = z.clone();
                minus.data[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let gt = labels([3, 1, 1], 4, vec![0, 3, 3]);
        let z = logits(
            [3, 1, 1],
            4,
            (0..12).map(|i| ((i * 7) as f64 * 0.31).sin()).collect(),
        );
        let mask = VoxelMask::new(*gt.spec(), vec![true, false, true]).unwrap();
        let (_, g) = ce_loss_grad(&z, &gt, Some(&mask)).unwrap();
        let fd = finite_diff(|z| ce_loss(z, &gt, Some(&mask)).unwrap(), &z);
        for (a, n) in g.iter().zip(&fd) {
            assert!((a - n).abs() < 1e-8, "ce {a} vs {n}");
        }
        let (_, g) = dice_loss_grad(&z, &gt).unwrap();
        let fd = finite_diff(|z| dice_loss(z, &gt).unwrap(), &z);
        for (a, n) in g.iter().zip(&fd) {
            assert!((a - n).abs() < 1e-8, "dice {a} vs {n}");
        }
    }
}
