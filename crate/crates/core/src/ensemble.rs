//! Fusion of per-model probability grids.
//!
//! [`weighted_average`] is the strategy used in practice; [`max_prob_fuse`]
//! and [`vote_fuse`] are the baselines it is compared against. All three
//! work one voxel at a time with O(num_classes) scratch state.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{OccError, Result};
use crate::grid::{argmax_index, GridSpec, LabelGrid, ProbGrid};

/// Per-model positive weights, normalized to sum to 1 when applied.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleWeights(Vec<f64>);

impl EnsembleWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(OccError::invalid("ensemble weights", "no weights given"));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(OccError::invalid(
                "ensemble weights",
                format!("weight {w} must be finite and > 0"),
            ));
        }
        Ok(EnsembleWeights(weights))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        EnsembleWeights::new(vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn normalized(&self) -> Vec<f64> {
        let total: f64 = self.0.iter().sum();
        self.0.iter().map(|w| w / total).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Weighted,
    Max,
    Vote,
}

impl FromStr for Strategy {
    type Err = OccError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(Strategy::Weighted),
            "max" => Ok(Strategy::Max),
            "vote" => Ok(Strategy::Vote),
            other => Err(OccError::invalid(
                "strategy",
                format!("{other:?} (expected weighted, max or vote)"),
            )),
        }
    }
}

fn common_spec(grids: &[ProbGrid]) -> Result<GridSpec> {
    let first = grids
        .first()
        .ok_or_else(|| OccError::invalid("ensemble input", "no grids given"))?;
    for (i, g) in grids.iter().enumerate().skip(1) {
        first
            .spec()
            .ensure_same(g.spec(), &format!("ensemble input 0 vs {i}"))?;
    }
    Ok(*first.spec())
}

/// Convex combination `sum_i w_i / sum(w) * p_i`, per voxel and class.
pub fn weighted_average(grids: &[ProbGrid], weights: &EnsembleWeights) -> Result<ProbGrid> {
    let spec = common_spec(grids)?;
    if grids.len() != weights.len() {
        return Err(OccError::invalid(
            "ensemble weights",
            format!("{} weights for {} grids", weights.len(), grids.len()),
        ));
    }
    let w = weights.normalized();
    let mut out = vec![0.0; spec.num_voxels() * spec.num_classes()];
    for (grid, &wi) in grids.iter().zip(&w) {
        for (o, &p) in out.iter_mut().zip(grid.probs()) {
            *o += wi * p;
        }
    }
    Ok(ProbGrid::from_normalized(spec, out))
}

/// Per voxel, copies the whole distribution of the model with the largest
/// maximum class probability (ties to the lowest model index).
pub fn max_prob_fuse(grids: &[ProbGrid]) -> Result<ProbGrid> {
    let spec = common_spec(grids)?;
    let k = spec.num_classes();
    let mut out = Vec::with_capacity(spec.num_voxels() * k);
    for v in 0..spec.num_voxels() {
        let mut best = grids[0].voxel(v);
        let mut best_max = best.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for g in &grids[1..] {
            let dist = g.voxel(v);
            let m = dist.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m > best_max {
                best = dist;
                best_max = m;
            }
        }
        out.extend_from_slice(best);
    }
    Ok(ProbGrid::from_normalized(spec, out))
}

/// One vote per model for its argmax label; most votes wins, ties to the
/// lowest class index.
pub fn vote_fuse(grids: &[ProbGrid]) -> Result<LabelGrid> {
    let spec = common_spec(grids)?;
    let mut tally = vec![0u32; spec.num_classes()];
    let mut labels = Vec::with_capacity(spec.num_voxels());
    for v in 0..spec.num_voxels() {
        tally.iter_mut().for_each(|t| *t = 0);
        for g in grids {
            tally[argmax_index(g.voxel(v))] += 1;
        }
        let mut winner = 0;
        for (c, &t) in tally.iter().enumerate().skip(1) {
            if t > tally[winner] {
                winner = c;
            }
        }
        labels.push(winner as u8);
    }
    LabelGrid::new(spec, labels)
}
