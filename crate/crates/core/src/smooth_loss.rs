//! Per-pixel binary cross entropy plus a distance-based smoothness penalty.
//!
//! For a probability map `P` split into along-x rows `p_z`, the penalty is
//!
//! ```text
//! S = sum_z sum_x | ((p_z * K) + 1) / (p_z + 1) - 1 |
//! ```
//!
//! where `K` is the width-5 box kernel with unit sum and the division is
//! elementwise. The combined loss is `mean(BCE) + s * S`. The BCE term is a
//! spatial mean while `S` is an un-normalized sum over all pixels; see
//! [`SmoothnessScale`] for how the sum is weighted against the mean.
//!
//! Rows whose probabilities are constant give `S = 0` exactly. The
//! convolution pads by edge replication, which keeps that property at the
//! row ends.

use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::field::{BinaryMask2D, ProbabilityMap, ScalarField2D};

/// Width-5 uniform kernel, `K(d) = 1/5` for `|d| <= 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothKernel {
    weights: [f64; 5],
}

impl SmoothKernel {
    pub const RADIUS: usize = 2;

    pub fn box5() -> Self {
        Self { weights: [0.2; 5] }
    }

    /// Taps for offsets `-2..=2`.
    pub fn weights(&self) -> &[f64; 5] {
        &self.weights
    }
}

impl Default for SmoothKernel {
    fn default() -> Self {
        Self::box5()
    }
}

/// How the summed penalty is weighted against the averaged BCE term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothnessScale {
    /// `total = mean(BCE) + s * S` with `S` the raw double sum.
    #[default]
    Sum,
    /// `total = mean(BCE) + s * S / (X * Z)`.
    PerPixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub smoothness_weight: f64,
    pub probability_clamp: f64,
    pub scale: SmoothnessScale,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            smoothness_weight: 0.0,
            probability_clamp: 1e-7,
            scale: SmoothnessScale::Sum,
        }
    }
}

impl LossConfig {
    pub fn with_weight(smoothness_weight: f64) -> Self {
        Self {
            smoothness_weight,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.smoothness_weight >= 0.0) {
            return Err(Error::Config(format!(
                "smoothness weight must be >= 0, got {}",
                self.smoothness_weight
            )));
        }
        if !(self.probability_clamp > 0.0 && self.probability_clamp < 0.5) {
            return Err(Error::Config(format!(
                "probability clamp must lie in (0, 0.5), got {}",
                self.probability_clamp
            )));
        }
        Ok(())
    }

    /// Multiplier applied to the raw penalty for a field of `n_pixels`.
    pub fn penalty_factor(&self, n_pixels: usize) -> f64 {
        match self.scale {
            SmoothnessScale::Sum => self.smoothness_weight,
            SmoothnessScale::PerPixel => self.smoothness_weight / n_pixels as f64,
        }
    }
}

/// Loss decomposition for one sample.
///
/// `smoothness` is the penalty term as it enters the total, so that
/// `total == bce_mean + smoothness_weight * smoothness` always holds; for
/// [`SmoothnessScale::Sum`] it equals the raw penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce_mean: f64,
    pub smoothness: f64,
    pub total: f64,
}

/// `-[t ln p + (1 - t) ln(1 - p)]` per pixel, with `p` clamped to `[eps, 1 - eps]`.
pub fn bce_map(pred: &ProbabilityMap, target: &BinaryMask2D, eps: f64) -> Result<ScalarField2D> {
    check_shape(&pred.shape(), &target.shape())?;
    let values = pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(&p, &t)| {
            let p = p.clamp(eps, 1.0 - eps);
            if t {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .collect();
    ScalarField2D::new(pred.width(), pred.depth(), values)
}

/// Same-length convolution with edge-replicate padding.
pub fn conv_row(row: &[f64], k: &SmoothKernel) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    conv_row_into(row, k, &mut out);
    out
}

fn conv_row_into(row: &[f64], k: &SmoothKernel, out: &mut [f64]) {
    let n = row.len();
    let last = n as isize - 1;
    let r = SmoothKernel::RADIUS as isize;
    for (x, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (w, d) in k.weights.iter().zip(-r..=r) {
            let j = (x as isize + d).clamp(0, last) as usize;
            acc += w * row[j];
        }
        *o = acc;
    }
}

/// `conv(row)[x] - row[x]`, accumulated as weighted differences so that a
/// locally constant row gives exactly zero.
fn conv_excess_into(row: &[f64], k: &SmoothKernel, out: &mut [f64]) {
    let last = row.len() as isize - 1;
    let r = SmoothKernel::RADIUS as isize;
    for (x, o) in out.iter_mut().enumerate() {
        let centre = row[x];
        let mut acc = 0.0;
        for (w, d) in k.weights.iter().zip(-r..=r) {
            let j = (x as isize + d).clamp(0, last) as usize;
            acc += w * (row[j] - centre);
        }
        *o = acc;
    }
}

// |(c + 1) / (p + 1) - 1| == |c - p| / (p + 1)
fn row_penalty(row: &[f64], k: &SmoothKernel, excess: &mut [f64]) -> f64 {
    conv_excess_into(row, k, excess);
    row.iter()
        .zip(excess.iter())
        .map(|(&p, &e)| e.abs() / (p + 1.0))
        .sum()
}

/// The raw smoothness penalty `S` of a nonnegative field.
pub fn smoothness_penalty(pred: &ScalarField2D, k: &SmoothKernel) -> Result<f64> {
    if let Some(bad) = pred.values().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!(
            "smoothness penalty needs nonnegative values, got {bad}"
        )));
    }
    let mut excess = vec![0.0; pred.width()];
    // Fixed summation order: per-row sums accumulated over z.
    Ok(pred.rows().map(|row| row_penalty(row, k, &mut excess)).sum())
}

pub fn total_loss(
    pred: &ProbabilityMap,
    target: &BinaryMask2D,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let bce = bce_map(pred, target, cfg.probability_clamp)?;
    let n = bce.values().len();
    let bce_mean = bce.values().iter().sum::<f64>() / n as f64;
    let raw = smoothness_penalty(pred, &SmoothKernel::box5())?;
    let smoothness = match cfg.scale {
        SmoothnessScale::Sum => raw,
        SmoothnessScale::PerPixel => raw / n as f64,
    };
    Ok(LossBreakdown {
        bce_mean,
        smoothness,
        total: bce_mean + cfg.smoothness_weight * smoothness,
    })
}

/// Gradient of the raw penalty with respect to every pixel.
///
/// The absolute value uses subgradient 0 at exactly-zero arguments. The
/// convolution is differentiated by accumulating with the same clamped
/// indices the forward pass reads.
pub fn smoothness_gradient(pred: &ScalarField2D, k: &SmoothKernel) -> ScalarField2D {
    let width = pred.width();
    let last = width as isize - 1;
    let r = SmoothKernel::RADIUS as isize;
    let mut grad = vec![0.0; pred.values().len()];
    let mut excess = vec![0.0; width];
    for (row, g) in pred.rows().zip(grad.chunks_exact_mut(width)) {
        conv_excess_into(row, k, &mut excess);
        for x in 0..width {
            let sign = sign_or_zero(excess[x]);
            if sign == 0.0 {
                continue;
            }
            let denom = row[x] + 1.0;
            // through the denominator; (p + 1 + excess) is conv + 1
            g[x] -= sign * (denom + excess[x]) / (denom * denom);
            // through the numerator, j = clamp(x + d)
            let a = sign / denom;
            for (w, d) in k.weights.iter().zip(-r..=r) {
                let j = (x as isize + d).clamp(0, last) as usize;
                g[j] += a * w;
            }
        }
    }
    ScalarField2D::new(width, pred.depth(), grad).expect("shape preserved")
}

#[inline]
fn sign_or_zero(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `d total / d p` for every pixel.
pub fn loss_gradient(
    pred: &ProbabilityMap,
    target: &BinaryMask2D,
    cfg: &LossConfig,
) -> Result<ScalarField2D> {
    check_shape(&pred.shape(), &target.shape())?;
    let n = pred.values().len();
    let inv_n = 1.0 / n as f64;
    let eps = cfg.probability_clamp;
    let factor = cfg.penalty_factor(n);
    let smooth = if factor != 0.0 {
        Some(smoothness_gradient(pred, &SmoothKernel::box5()))
    } else {
        None
    };
    let values = pred
        .values()
        .iter()
        .zip(target.values())
        .enumerate()
        .map(|(i, (&p, &t))| {
            // the clamp is flat outside [eps, 1 - eps]
            let bce = if p < eps || p > 1.0 - eps {
                0.0
            } else {
                let t = f64::from(u8::from(t));
                (p - t) / (p * (1.0 - p)) * inv_n
            };
            match &smooth {
                Some(g) => bce + factor * g.values()[i],
                None => bce,
            }
        })
        .collect();
    ScalarField2D::new(pred.width(), pred.depth(), values)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn probabilities_from_logits(logits: &ScalarField2D) -> ProbabilityMap {
    ProbabilityMap::new(logits.map(sigmoid)).expect("sigmoid maps into [0, 1]")
}

/// Loss and gradient with respect to pre-sigmoid logits.
pub fn logit_loss_and_gradient(
    logits: &ScalarField2D,
    target: &BinaryMask2D,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, ScalarField2D)> {
    let pred = probabilities_from_logits(logits);
    let loss = total_loss(&pred, target, cfg)?;
    let mut grad = loss_gradient(&pred, target, cfg)?;
    for (g, &p) in grad.values_mut().iter_mut().zip(pred.values()) {
        *g *= p * (1.0 - p);
    }
    Ok((loss, grad))
}

pub fn logit_gradient(
    logits: &ScalarField2D,
    target: &BinaryMask2D,
    cfg: &LossConfig,
) -> Result<ScalarField2D> {
    logit_loss_and_gradient(logits, target, cfg).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prob(width: usize, depth: usize, v: Vec<f64>) -> ProbabilityMap {
        ProbabilityMap::new(ScalarField2D::new(width, depth, v).unwrap()).unwrap()
    }

    #[test]
    fn kernel_sums_to_one_and_is_symmetric() {
        let k = SmoothKernel::box5();
        assert_eq!(k.weights().iter().sum::<f64>(), 1.0);
        let w = k.weights();
        assert_eq!(w[0], w[4]);
        assert_eq!(w[1], w[3]);
    }

    #[test]
    fn bce_perfect_prediction_is_tiny() {
        let t = BinaryMask2D::new(2, 1, vec![true, false]).unwrap();
        let p = prob(2, 1, vec![1.0, 0.0]);
        let m = bce_map(&p, &t, 1e-7).unwrap();
        let expected = -(1.0f64 - 1e-7).ln();
        for &v in m.values() {
            assert!((v - expected).abs() < 1e-15);
            assert!(v < 1e-6);
        }
    }

    #[test]
    fn bce_half_is_ln2() {
        let t = BinaryMask2D::new(2, 1, vec![true, false]).unwrap();
        let m = bce_map(&prob(2, 1, vec![0.5, 0.5]), &t, 1e-7).unwrap();
        for &v in m.values() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-6);
        }
    }

    #[test]
    fn bce_point_value() {
        let t = BinaryMask2D::new(1, 1, vec![true]).unwrap();
        let m = bce_map(&prob(1, 1, vec![0.9]), &t, 1e-7).unwrap();
        assert!((m.values()[0] - 0.105361).abs() < 1e-6);
    }

    #[test]
    fn bce_shape_mismatch() {
        let t = BinaryMask2D::empty(3, 1).unwrap();
        assert!(matches!(
            bce_map(&prob(2, 1, vec![0.5; 2]), &t, 1e-7),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn conv_row_examples() {
        let k = SmoothKernel::box5();
        assert_eq!(conv_row(&[0.3; 7], &k), vec![0.3; 7]);
        let out = conv_row(&[0.0, 0.0, 1.0, 0.0, 0.0], &k);
        for v in out {
            assert!((v - 0.2).abs() < 1e-15);
        }
        assert_eq!(conv_row(&[0.7], &k), vec![0.7]);
    }

    #[test]
    fn penalty_hand_value() {
        let f = ScalarField2D::new(5, 1, vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let s = smoothness_penalty(&f, &SmoothKernel::box5()).unwrap();
        assert!((s - 1.2).abs() < 1e-12, "{s}");
    }

    #[test]
    fn penalty_zero_for_constant_rows() {
        let f = ScalarField2D::from_fn(9, 4, |_, z| [0.0, 0.13, 0.77, 1.0][z]).unwrap();
        assert_eq!(smoothness_penalty(&f, &SmoothKernel::box5()).unwrap(), 0.0);
    }

    #[test]
    fn penalty_rejects_negative_values() {
        let f = ScalarField2D::new(2, 1, vec![0.1, -0.1]).unwrap();
        assert!(matches!(
            smoothness_penalty(&f, &SmoothKernel::box5()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn total_loss_for_flat_layer_is_near_zero() {
        let t = BinaryMask2D::from_fn(6, 5, |_, z| (1..3).contains(&z)).unwrap();
        let p = ProbabilityMap::new(t.to_field()).unwrap();
        for s in [0.0, 1.0, 2000.0] {
            let l = total_loss(&p, &t, &LossConfig::with_weight(s)).unwrap();
            assert_eq!(l.smoothness, 0.0);
            assert!(l.total < 1e-6);
        }
    }

    #[test]
    fn total_loss_s_zero_is_bce_mean() {
        let t = BinaryMask2D::from_fn(5, 3, |x, z| x + z > 3).unwrap();
        let p = prob(5, 3, (0..15).map(|i| (i as f64 + 0.5) / 15.0).collect());
        let l = total_loss(&p, &t, &LossConfig::with_weight(0.0)).unwrap();
        assert_eq!(l.total, l.bce_mean);
    }

    #[test]
    fn total_loss_difference_is_linear_in_s() {
        // sloped boundary: z_boundary(x) = x / 2
        let t = BinaryMask2D::from_fn(8, 6, |x, z| 2 * z >= x).unwrap();
        let p = prob(
            8,
            6,
            (0..48)
                .map(|i| {
                    let (x, z) = ((i % 8) as f64, (i / 8) as f64);
                    sigmoid(2.0 * z - x)
                })
                .collect(),
        );
        let a = total_loss(&p, &t, &LossConfig::with_weight(0.0)).unwrap();
        let b = total_loss(&p, &t, &LossConfig::with_weight(2000.0)).unwrap();
        assert!(b.smoothness > 0.0);
        assert!(((b.total - a.total) - 2000.0 * b.smoothness).abs() < 1e-9);
    }

    #[test]
    fn per_pixel_scale_divides_penalty() {
        let p = prob(5, 1, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let t = BinaryMask2D::empty(5, 1).unwrap();
        let cfg = LossConfig {
            smoothness_weight: 3.0,
            scale: SmoothnessScale::PerPixel,
            ..LossConfig::default()
        };
        let l = total_loss(&p, &t, &cfg).unwrap();
        assert!((l.smoothness - 1.2 / 5.0).abs() < 1e-12);
        assert_eq!(l.total, l.bce_mean + 3.0 * l.smoothness);
    }

    #[test]
    fn gradient_with_s_zero_is_bce_derivative() {
        let t = BinaryMask2D::from_fn(4, 3, |x, z| (x + z) % 2 == 0).unwrap();
        let vals: Vec<f64> = (0..12).map(|i| 0.05 + 0.9 * i as f64 / 11.0).collect();
        let p = prob(4, 3, vals.clone());
        let g = loss_gradient(&p, &t, &LossConfig::with_weight(0.0)).unwrap();
        for (i, (&p, &t)) in vals.iter().zip(t.values()).enumerate() {
            let t = if t { 1.0 } else { 0.0 };
            let expected = (p - t) / (p * (1.0 - p)) / 12.0;
            assert!((g.values()[i] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn bce_gradient_vanishes_outside_clamp() {
        let t = BinaryMask2D::new(2, 1, vec![true, false]).unwrap();
        let g = loss_gradient(&prob(2, 1, vec![1.0, 0.0]), &t, &LossConfig::default()).unwrap();
        assert_eq!(g.values(), &[0.0, 0.0]);
    }

    #[test]
    fn logit_zero_has_quarter_slope() {
        let t = BinaryMask2D::new(1, 1, vec![true]).unwrap();
        let l = ScalarField2D::new(1, 1, vec![0.0]).unwrap();
        let g = logit_gradient(&l, &t, &LossConfig::default()).unwrap();
        // p = 0.5: dL/dp = -1/0.5 = -2, times sigma' = 0.25
        assert!((g.values()[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_have_vanishing_gradient() {
        let t = BinaryMask2D::new(3, 1, vec![false, true, false]).unwrap();
        let l = ScalarField2D::new(3, 1, vec![-800.0, 800.0, 60.0]).unwrap();
        let g = logit_gradient(&l, &t, &LossConfig::with_weight(100.0)).unwrap();
        for &v in g.values() {
            assert!(v.abs() < 1e-20, "{v}");
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-1000.0) >= 0.0);
        assert!(sigmoid(1000.0) <= 1.0);
    }
}
