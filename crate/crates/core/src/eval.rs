//! Per-slice evaluation of a thresholded prediction against ground truth.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field::{BinaryMask2D, SampleId};
use crate::metrics::{
    extract_surfaces, overlap_scores, roughness_deviations, segment_angles, OverlapScores,
    SurfaceProfile,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceEval {
    pub id: SampleId,
    pub scores: OverlapScores,
    /// Sum of roughness deviations over both surfaces.
    pub ra_sum: f64,
    /// Valid columns counted over both surfaces.
    pub ra_count: usize,
    pub n_invalid_columns: usize,
    pub top: SurfaceProfile,
    pub bottom: SurfaceProfile,
}

impl SliceEval {
    /// Roughness of this slice, both surfaces pooled; `None` for an empty prediction.
    pub fn ra(&self) -> Option<f64> {
        (self.ra_count > 0).then(|| self.ra_sum / self.ra_count as f64)
    }

    /// Segment angles of both predicted surfaces, in degrees.
    pub fn angles(&self, spacing_x: f64, spacing_z: f64) -> Vec<f64> {
        let mut a = segment_angles(&self.top, spacing_x, spacing_z);
        a.extend(segment_angles(&self.bottom, spacing_x, spacing_z));
        a
    }
}

pub fn evaluate_slice(pred: &BinaryMask2D, gt: &BinaryMask2D, id: SampleId) -> Result<SliceEval> {
    let scores = overlap_scores(pred, gt)?;
    let (top, bottom) = extract_surfaces(pred);
    let (s1, c1) = roughness_deviations(&top);
    let (s2, c2) = roughness_deviations(&bottom);
    Ok(SliceEval {
        id,
        scores,
        ra_sum: s1 + s2,
        ra_count: c1 + c2,
        n_invalid_columns: top.n_invalid(),
        top,
        bottom,
    })
}

/// Pooled roughness over many slices: total deviation over total valid columns.
pub fn pooled_ra<'a>(evals: impl IntoIterator<Item = &'a SliceEval>) -> Option<f64> {
    let (s, c) = evals
        .into_iter()
        .fold((0.0, 0usize), |(s, c), e| (s + e.ra_sum, c + e.ra_count));
    (c > 0).then(|| s / c as f64)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
