//! Masked per-class IoU and mIoU over semantic classes.

use serde_json::{json, Map, Value};

use crate::error::{OccError, Result};
use crate::grid::{argmax_labels, ClassTable, LabelGrid, ProbGrid, VoxelMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassCounts {
    pub intersection: u64,
    pub union: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Score classes absent from both prediction and ground truth as 0 in
    /// the mean instead of leaving them out.
    pub strict_zero: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoUReport {
    /// One entry per semantic class; `None` when the masked union is empty.
    pub per_class: Vec<Option<f64>>,
    /// `None` when no class is defined (and `strict_zero` is off).
    pub miou: Option<f64>,
    pub counts: Vec<ClassCounts>,
}

impl IoUReport {
    fn from_counts(counts: Vec<ClassCounts>, opts: EvalOptions) -> Self {
        let per_class: Vec<Option<f64>> = counts
            .iter()
            .map(|c| (c.union > 0).then(|| c.intersection as f64 / c.union as f64))
            .collect();
        let scored: Vec<f64> = if opts.strict_zero {
            per_class.iter().map(|v| v.unwrap_or(0.0)).collect()
        } else {
            per_class.iter().flatten().copied().collect()
        };
        let miou = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
        IoUReport {
            per_class,
            miou,
            counts,
        }
    }

    pub fn to_json(&self, classes: &ClassTable) -> Value {
        let mut per_class = Map::new();
        let mut counts = Map::new();
        for (c, (iou, n)) in self.per_class.iter().zip(&self.counts).enumerate() {
            let name = classes
                .name(c)
                .map(str::to_owned)
                .unwrap_or_else(|| format!("class_{c}"));
            per_class.insert(name.clone(), json!(iou));
            counts.insert(
                name,
                json!({ "intersection": n.intersection, "union": n.union }),
            );
        }
        json!({
            "miou": self.miou,
            "per_class": per_class,
            "counts": counts,
        })
    }
}

pub fn evaluate(pred: &LabelGrid, gt: &LabelGrid, mask: &VoxelMask) -> Result<IoUReport> {
    evaluate_with(pred, gt, mask, EvalOptions::default())
}

pub fn evaluate_with(
    pred: &LabelGrid,
    gt: &LabelGrid,
    mask: &VoxelMask,
    opts: EvalOptions,
) -> Result<IoUReport> {
    pred.spec().ensure_same(gt.spec(), "prediction vs ground truth")?;
    pred.spec().ensure_same(mask.spec(), "prediction vs mask")?;
    let semantic = pred.spec().num_semantic();
    let mut counts = vec![ClassCounts::default(); semantic];

    let voxels = pred.labels().iter().zip(gt.labels()).zip(mask.bits());
    for ((&p, &g), &visible) in voxels {
        if !visible {
            continue;
        }
        let (p, g) = (p as usize, g as usize);
        if p == g {
            if p < semantic {
                counts[p].intersection += 1;
                counts[p].union += 1;
            }
        } else {
            if p < semantic {
                counts[p].union += 1;
            }
            if g < semantic {
                counts[g].union += 1;
            }
        }
    }
    Ok(IoUReport::from_counts(counts, opts))
}

/// `evaluate` on the per-voxel argmax of `pred`.
pub fn evaluate_prob(pred: &ProbGrid, gt: &LabelGrid, mask: &VoxelMask) -> Result<IoUReport> {
    evaluate_prob_with(pred, gt, mask, EvalOptions::default())
}

pub fn evaluate_prob_with(
    pred: &ProbGrid,
    gt: &LabelGrid,
    mask: &VoxelMask,
    opts: EvalOptions,
) -> Result<IoUReport> {
    if pred.spec() != gt.spec() {
        return Err(OccError::SpecMismatch(format!(
            "prediction vs ground truth: {:?} vs {:?}",
            pred.spec(),
            gt.spec()
        )));
    }
    evaluate_with(&argmax_labels(pred), gt, mask, opts)
}
