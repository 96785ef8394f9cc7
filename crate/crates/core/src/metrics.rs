//! Overlap scores, layer-surface extraction, roughness, surface-normal
//! histograms and the paired Wilcoxon signed-rank test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{check_shape, Error, Result};
use crate::field::{BinaryMask2D, BinaryMask3D};

/// Anything that can be scored as a flat binary mask.
pub trait MaskView {
    fn mask_shape(&self) -> Vec<usize>;
    fn mask_values(&self) -> &[bool];
}

impl MaskView for BinaryMask2D {
    fn mask_shape(&self) -> Vec<usize> {
        self.shape().to_vec()
    }

    fn mask_values(&self) -> &[bool] {
        self.values()
    }
}

impl MaskView for BinaryMask3D {
    fn mask_shape(&self) -> Vec<usize> {
        self.dims().to_vec()
    }

    fn mask_values(&self) -> &[bool] {
        self.values()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapScores {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl OverlapScores {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Result<Self> {
        if tp + fn_ == 0 {
            return Err(Error::UndefinedMetric(
                "ground truth has no foreground; dice and recall are undefined".into(),
            ));
        }
        let (tpf, fpf, fnf) = (tp as f64, fp as f64, fn_ as f64);
        // An empty prediction has no true positives: precision 0.
        let precision = if tp + fp == 0 { 0.0 } else { tpf / (tpf + fpf) };
        Ok(Self {
            dice: 2.0 * tpf / (2.0 * tpf + fpf + fnf),
            iou: tpf / (tpf + fpf + fnf),
            precision,
            recall: tpf / (tpf + fnf),
            tp,
            fp,
            fn_,
            tn,
        })
    }
}

pub fn overlap_scores<M: MaskView + ?Sized>(pred: &M, gt: &M) -> Result<OverlapScores> {
    check_shape(&gt.mask_shape(), &pred.mask_shape())?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &g) in pred.mask_values().iter().zip(gt.mask_values()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    OverlapScores::from_counts(tp, fp, fn_, tn)
}

/// Per-column boundary depth, in pixels, with a validity flag per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceProfile {
    depths: Vec<f64>,
    valid: Vec<bool>,
}

impl SurfaceProfile {
    pub fn new(depths: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        check_shape(&[depths.len()], &[valid.len()])?;
        Ok(Self { depths, valid })
    }

    /// All columns valid.
    pub fn from_depths(depths: Vec<f64>) -> Self {
        let valid = vec![true; depths.len()];
        Self { depths, valid }
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn n_invalid(&self) -> usize {
        self.len() - self.n_valid()
    }

    pub fn get(&self, x: usize) -> Option<f64> {
        self.valid[x].then(|| self.depths[x])
    }
}

/// Topmost and bottommost foreground row of every column.
pub fn extract_surfaces(mask: &BinaryMask2D) -> (SurfaceProfile, SurfaceProfile) {
    let (w, d) = (mask.width(), mask.depth());
    let mut top = vec![0.0; w];
    let mut bottom = vec![0.0; w];
    let mut valid = vec![false; w];
    for x in 0..w {
        let mut first = None;
        let mut last = None;
        for z in 0..d {
            if mask.get(x, z) {
                first.get_or_insert(z);
                last = Some(z);
            }
        }
        if let (Some(f), Some(l)) = (first, last) {
            top[x] = f as f64;
            bottom[x] = l as f64;
            valid[x] = true;
        }
    }
    (
        SurfaceProfile {
            depths: top,
            valid: valid.clone(),
        },
        SurfaceProfile {
            depths: bottom,
            valid,
        },
    )
}

pub const ROUGHNESS_WINDOW: usize = 5;

/// Sum of `|z(x) - local mean|` over valid columns, and the valid count.
///
/// The local mean at `x` averages the valid columns of `[x - 2, x + 2]`
/// clipped to the profile.
pub fn roughness_deviations(profile: &SurfaceProfile) -> (f64, usize) {
    let n = profile.len();
    let half = ROUGHNESS_WINDOW / 2;
    let mut total = 0.0;
    let mut count = 0;
    for x in 0..n {
        let Some(z) = profile.get(x) else { continue };
        let lo = x.saturating_sub(half);
        let hi = (x + half).min(n - 1);
        let (sum, k) = (lo..=hi)
            .filter_map(|i| profile.get(i))
            .fold((0.0, 0usize), |(s, k), v| (s + v, k + 1));
        total += (z - sum / k as f64).abs();
        count += 1;
    }
    (total, count)
}

/// Arithmetic mean deviation `R_a` of a profile from its 5-pixel local mean.
pub fn roughness(profile: &SurfaceProfile) -> Result<f64> {
    let (total, count) = roughness_deviations(profile);
    if count == 0 {
        return Err(Error::UndefinedMetric(
            "roughness needs at least one valid column".into(),
        ));
    }
    Ok(total / count as f64)
}

/// `R_a` pooled over many profiles: all per-column deviations averaged together.
pub fn pooled_roughness<'a>(profiles: impl IntoIterator<Item = &'a SurfaceProfile>) -> Result<f64> {
    let (total, count) = profiles
        .into_iter()
        .map(roughness_deviations)
        .fold((0.0, 0), |(t, c), (dt, dc)| (t + dt, c + dc));
    if count == 0 {
        return Err(Error::UndefinedMetric(
            "pooled roughness needs at least one valid column".into(),
        ));
    }
    Ok(total / count as f64)
}

/// Counts of surface-segment orientations over `[-90°, 90°]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalHistogram {
    pub bin_width_deg: f64,
    pub counts: Vec<u64>,
}

impl NormalHistogram {
    pub fn new(bin_width_deg: f64) -> Result<Self> {
        let n = 180.0 / bin_width_deg;
        if !(bin_width_deg > 0.0) || (n - n.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "bin width {bin_width_deg} does not divide 180 degrees"
            )));
        }
        Ok(Self {
            bin_width_deg,
            counts: vec![0; n.round() as usize],
        })
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    /// Lower edges of every bin, in degrees.
    pub fn edges(&self) -> Vec<f64> {
        (0..self.n_bins())
            .map(|i| -90.0 + i as f64 * self.bin_width_deg)
            .collect()
    }

    pub fn bin_of(&self, angle_deg: f64) -> usize {
        let i = ((angle_deg + 90.0) / self.bin_width_deg + 1e-9).floor();
        (i.max(0.0) as usize).min(self.n_bins() - 1)
    }

    pub fn add(&mut self, angle_deg: f64) {
        let b = self.bin_of(angle_deg);
        self.counts[b] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        check_shape(&[self.n_bins()], &[other.n_bins()])?;
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Orientation of every segment between adjacent valid columns, in degrees.
///
/// The angle is `atan(dz * spacing_z / spacing_x)`: the deviation of the
/// segment normal from the depth axis.
pub fn segment_angles(profile: &SurfaceProfile, spacing_x: f64, spacing_z: f64) -> Vec<f64> {
    (0..profile.len().saturating_sub(1))
        .filter_map(|x| match (profile.get(x), profile.get(x + 1)) {
            (Some(a), Some(b)) => Some(((b - a) * spacing_z / spacing_x).atan().to_degrees()),
            _ => None,
        })
        .collect()
}

pub fn normal_histogram(
    profile: &SurfaceProfile,
    bin_width_deg: f64,
    spacing_x: f64,
    spacing_z: f64,
) -> Result<NormalHistogram> {
    let angles = segment_angles(profile, spacing_x, spacing_z);
    if angles.is_empty() {
        return Err(Error::UndefinedMetric(
            "normal histogram needs two adjacent valid columns".into(),
        ));
    }
    let mut h = NormalHistogram::new(bin_width_deg)?;
    for a in angles {
        h.add(a);
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`
    pub statistic: f64,
    pub p_two_sided: f64,
    /// Pairs left after discarding zero differences.
    pub n: usize,
    pub method: WilcoxonMethod,
}

/// Largest reduced sample size evaluated by exact enumeration.
pub const WILCOXON_EXACT_MAX_N: usize = 25;
pub const WILCOXON_MIN_N: usize = 5;

/// Average ranks of `values` (1-based), ties sharing the mean of their ranks.
/// Returned doubled so that every rank is an integer.
pub fn doubled_ranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u64; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1, doubled mean = i + j + 2
        for &k in &order[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided paired Wilcoxon signed-rank test.
///
/// Zero differences are discarded. For up to
/// [`WILCOXON_EXACT_MAX_N`] remaining pairs the p-value is exact over all
/// `2^n` sign assignments (counted by dynamic programming over rank sums);
/// beyond that a tie-corrected normal approximation is used.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    check_shape(&[a.len()], &[b.len()])?;
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Domain("non-finite paired difference".into()));
    }
    let n = diffs.len();
    if n == 0 {
        return Err(Error::DegenerateTest("all paired differences are zero".into()));
    }
    if n < WILCOXON_MIN_N {
        return Err(Error::DegenerateTest(format!(
            "{n} nonzero differences; at least {WILCOXON_MIN_N} are required"
        )));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let total: u64 = ranks.iter().sum();
    let w_plus: u64 = ranks
        .iter()
        .zip(&diffs)
        .filter(|(_, d)| **d > 0.0)
        .map(|(r, _)| r)
        .sum();
    let w_min = w_plus.min(total - w_plus);
    let statistic = w_min as f64 / 2.0;

    if n <= WILCOXON_EXACT_MAX_N {
        // counts[v] = number of sign assignments with doubled W+ == v
        let mut counts = vec![0u64; total as usize + 1];
        counts[0] = 1;
        let mut reach = 0usize;
        for &r in &ranks {
            let r = r as usize;
            for v in (0..=reach).rev() {
                let c = counts[v];
                if c != 0 {
                    counts[v + r] += c;
                }
            }
            reach += r;
        }
        let tail: u64 = counts[..=w_min as usize].iter().sum();
        let p = (2 * tail) as f64 / (1u64 << n) as f64;
        return Ok(WilcoxonResult {
            statistic,
            p_two_sided: p.min(1.0),
            n,
            method: WilcoxonMethod::Exact,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    for group in sorted.chunk_by(|x, y| x == y) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = (statistic - mean) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = 2.0 * normal.cdf(-z.abs());
    Ok(WilcoxonResult {
        statistic,
        p_two_sided: p.min(1.0),
        n,
        method: WilcoxonMethod::NormalApprox,
    })
}
