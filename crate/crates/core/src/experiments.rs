//! The smoothness sweep and the vessel-masking experiment.
//!
//! Both commands are pure functions of their configuration: every random
//! draw is keyed by the configured seeds, per-s training runs are assembled
//! in s order whatever the thread count, and output files carry no
//! timestamps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_slice, mean_std, pooled_ra, SliceEval};
use crate::field::{write_overlay_pgm, write_pgm, BinaryMask2D, BinaryMask3D, SampleId, Volume3D};
use crate::metrics::{
    extract_surfaces, overlap_scores, wilcoxon_signed_rank, NormalHistogram, OverlapScores,
    WilcoxonResult,
};
use crate::phantom::{gen_volume, gen_volume_slices, split_dataset, DatasetSplit, LabeledSlice, PhantomConfig};
use crate::segmenter::{read_checkpoint, train, ConvArch, ConvModel, Segmenter, TrainConfig, TrainRecord};
use crate::smooth_loss::SmoothnessScale;

/// Segment angles steeper than this count as steep in [`SweepRow::steep_fraction`].
pub const STEEP_ANGLE_DEG: f64 = 20.0;

/// Training defaults shared by the sweep, `train` and `vessel-exp`.
pub fn default_train_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        smoothness_warmup: 5,
        ..TrainConfig::default()
    };
    cfg.loss.scale = SmoothnessScale::PerPixel;
    cfg
}

/// Phantom defaults for 2D slice experiments: the default geometry without
/// the 3D vessel tree.
pub fn default_slice_phantom() -> PhantomConfig {
    PhantomConfig {
        vessel_count: 0,
        ..PhantomConfig::default()
    }
}

/// Volume-level dataset layout shared by the sweep and `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_volumes: u32,
    pub folds: usize,
    pub fold_index: usize,
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_volumes: 6,
            folds: 5,
            fold_index: 0,
            test_fraction: 1.0 / 6.0,
            split_seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn split(&self) -> Result<DatasetSplit> {
        let volumes: Vec<u32> = (0..self.n_volumes).collect();
        split_dataset(&volumes, self.folds, self.fold_index, self.test_fraction, self.split_seed)
    }
}

/// Slices of the given volumes, in the order listed.
pub fn load_volumes(phantom: &PhantomConfig, volumes: &[u32]) -> Result<Vec<LabeledSlice>> {
    let mut out = Vec::new();
    for &v in volumes {
        out.extend(gen_volume_slices(phantom, v)?);
    }
    Ok(out)
}

/// Thresholds the model's prediction for every slice and scores it.
pub fn evaluate_model<S: Segmenter>(
    model: &S,
    slices: &[LabeledSlice],
    threshold: f64,
) -> Result<Vec<SliceEval>> {
    slices
        .iter()
        .map(|s| evaluate_slice(&model.forward(&s.image)?.threshold(threshold), &s.epidermis_gt, s.id))
        .collect()
}

/// Trains a fresh model on the configured split.
pub fn train_on_split(
    phantom: &PhantomConfig,
    split: &DatasetSplit,
    arch: &ConvArch,
    model_seed: u64,
    train_cfg: &TrainConfig,
) -> Result<(ConvModel, TrainRecord)> {
    let train_set = load_volumes(phantom, &split.train)?;
    let val_set = load_volumes(phantom, &split.val)?;
    train(ConvModel::new(arch.clone(), model_seed)?, &train_set, &val_set, train_cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub smoothness_weights: Vec<f64>,
    pub phantom: PhantomConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub architecture: ConvArch,
    pub model_seed: u64,
    pub normal_bin_width_deg: f64,
    /// Index into the test slices of the slice exported as graymaps.
    pub export_slice: usize,
    pub out_dir: PathBuf,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            smoothness_weights: vec![0.0, 1.0, 10.0, 100.0, 1000.0, 2000.0],
            phantom: default_slice_phantom(),
            dataset: DatasetConfig::default(),
            train: default_train_config(),
            architecture: ConvArch::default(),
            model_seed: 0,
            normal_bin_width_deg: 5.0,
            export_slice: 0,
            out_dir: PathBuf::from("out/sweep"),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.smoothness_weights;
        if s.first() != Some(&0.0) {
            return Err(Error::Config(
                "smoothness weights must start with the s = 0 baseline".into(),
            ));
        }
        if s.windows(2).any(|w| !(w[1] > w[0])) || s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "smoothness weights must be finite and strictly increasing, got {s:?}"
            )));
        }
        self.phantom.validate()?;
        self.train.validate()?;
        self.architecture.validate()?;
        NormalHistogram::new(self.normal_bin_width_deg)?;
        Ok(())
    }
}

/// Mean and population standard deviation over test slices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub smoothness_weight: f64,
    /// Divergence diagnostic; the metric fields are `None` when set.
    pub failure: Option<String>,
    pub dice: Option<MeanStd>,
    pub precision: Option<MeanStd>,
    pub recall: Option<MeanStd>,
    pub iou: Option<MeanStd>,
    pub ra: Option<f64>,
    pub n_invalid_columns: Option<usize>,
    /// Fraction of surface segments with `|angle| > 20` degrees.
    pub steep_fraction: Option<f64>,
    pub n_segments: Option<u64>,
    /// Paired test of per-slice dice against the s = 0 row.
    pub dice_test: Option<WilcoxonResult>,
    /// Paired test of per-slice roughness against the s = 0 row.
    pub ra_test: Option<WilcoxonResult>,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
}

impl SweepRow {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

/// Per-slice metrics for one s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub smoothness_weight: f64,
    pub volume: u32,
    pub slice: usize,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub ra: Option<f64>,
    pub n_invalid_columns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub split: DatasetSplit,
    pub n_test_slices: usize,
    pub rows: Vec<SweepRow>,
    pub histograms: Vec<Option<NormalHistogram>>,
    pub slices: Vec<SliceRecord>,
    pub records: Vec<Option<TrainRecord>>,
}

impl SweepReport {
    pub fn row(&self, s: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.smoothness_weight == s)
    }
}

struct RunOutcome {
    evals: Vec<SliceEval>,
    record: TrainRecord,
    model: ConvModel,
}

fn run_one(
    cfg: &SweepConfig,
    s: f64,
    train_set: &[LabeledSlice],
    val_set: &[LabeledSlice],
    test_set: &[LabeledSlice],
) -> Result<RunOutcome> {
    let mut tc = cfg.train.clone();
    tc.loss.smoothness_weight = s;
    let model = ConvModel::new(cfg.architecture.clone(), cfg.model_seed)?;
    let (model, record) = train(model, train_set, val_set, &tc)?;
    let evals = evaluate_model(&model, test_set, tc.threshold)?;
    Ok(RunOutcome {
        evals,
        record,
        model,
    })
}

/// Runs `f(i)` for `i in 0..n` on up to `threads` workers; results keep index order.
fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                scope.spawn(move || {
                    (t..n)
                        .step_by(threads)
                        .map(|i| (i, f(i)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, v) in h.join().expect("sweep worker panicked") {
                slots[i] = Some(v);
            }
        }
    });
    slots.into_iter().map(|v| v.expect("every index ran")).collect()
}

fn paired_test(a: &[f64], b: &[f64]) -> Option<WilcoxonResult> {
    wilcoxon_signed_rank(a, b).ok()
}

/// Per-slice roughness pairs where both predictions are nonempty.
fn ra_pairs(base: &[SliceEval], other: &[SliceEval]) -> (Vec<f64>, Vec<f64>) {
    base.iter()
        .zip(other)
        .filter_map(|(a, b)| Some((a.ra()?, b.ra()?)))
        .unzip()
}

/// Trains one model per s on a shared split and evaluates it on the shared
/// test set. A diverged run becomes a failed row; other errors abort.
pub fn run_sweep(cfg: &SweepConfig, threads: usize) -> Result<(SweepReport, Vec<Option<ConvModel>>)> {
    cfg.validate()?;
    let split = cfg.dataset.split()?;
    if split.test.is_empty() {
        return Err(Error::Config("the sweep needs at least one test volume".into()));
    }
    let train_set = load_volumes(&cfg.phantom, &split.train)?;
    let val_set = load_volumes(&cfg.phantom, &split.val)?;
    let test_set = load_volumes(&cfg.phantom, &split.test)?;

    let outcomes = parallel_map(cfg.smoothness_weights.len(), threads, |i| {
        run_one(cfg, cfg.smoothness_weights[i], &train_set, &val_set, &test_set)
    });

    let [sx, _, sz] = cfg.phantom.spacing_um;
    let mut runs = Vec::with_capacity(outcomes.len());
    for out in outcomes {
        match out {
            Ok(o) => runs.push(Ok(o)),
            Err(e @ Error::Divergence { .. }) => runs.push(Err(e.to_string())),
            Err(e) => return Err(e),
        }
    }
    let baseline = runs[0].as_ref().ok().map(|o| &o.evals);

    let mut rows = Vec::with_capacity(runs.len());
    let mut histograms = Vec::with_capacity(runs.len());
    let mut slices = Vec::new();
    let mut records = Vec::with_capacity(runs.len());
    for (&s, run) in cfg.smoothness_weights.iter().zip(&runs) {
        let o = match run {
            Ok(o) => o,
            Err(msg) => {
                rows.push(SweepRow {
                    smoothness_weight: s,
                    failure: Some(msg.clone()),
                    dice: None,
                    precision: None,
                    recall: None,
                    iou: None,
                    ra: None,
                    n_invalid_columns: None,
                    steep_fraction: None,
                    n_segments: None,
                    dice_test: None,
                    ra_test: None,
                    best_epoch: None,
                    epochs_run: None,
                });
                histograms.push(None);
                records.push(None);
                continue;
            }
        };
        let pick = |f: fn(&OverlapScores) -> f64| -> Vec<f64> {
            o.evals.iter().map(|e| f(&e.scores)).collect()
        };
        let dice = pick(|sc| sc.dice);
        let mut hist = NormalHistogram::new(cfg.normal_bin_width_deg)?;
        let mut steep = 0u64;
        for e in &o.evals {
            for a in e.angles(sx, sz) {
                hist.add(a);
                if a.abs() > STEEP_ANGLE_DEG {
                    steep += 1;
                }
            }
        }
        let n_segments = hist.total();
        let (dice_test, ra_test) = match baseline {
            Some(base) if s != 0.0 => {
                let base_dice: Vec<f64> = base.iter().map(|e| e.scores.dice).collect();
                let (ra0, ra1) = ra_pairs(base, &o.evals);
                (paired_test(&base_dice, &dice), paired_test(&ra0, &ra1))
            }
            _ => (None, None),
        };
        for e in &o.evals {
            slices.push(SliceRecord {
                smoothness_weight: s,
                volume: e.id.volume,
                slice: e.id.slice,
                dice: e.scores.dice,
                precision: e.scores.precision,
                recall: e.scores.recall,
                iou: e.scores.iou,
                ra: e.ra(),
                n_invalid_columns: e.n_invalid_columns,
            });
        }
        rows.push(SweepRow {
            smoothness_weight: s,
            failure: None,
            dice: Some(MeanStd::of(&dice)),
            precision: Some(MeanStd::of(&pick(|sc| sc.precision))),
            recall: Some(MeanStd::of(&pick(|sc| sc.recall))),
            iou: Some(MeanStd::of(&pick(|sc| sc.iou))),
            ra: pooled_ra(&o.evals),
            n_invalid_columns: Some(o.evals.iter().map(|e| e.n_invalid_columns).sum()),
            steep_fraction: (n_segments > 0).then(|| steep as f64 / n_segments as f64),
            n_segments: Some(n_segments),
            dice_test,
            ra_test,
            best_epoch: Some(o.record.best_epoch),
            epochs_run: Some(o.record.epochs.len()),
        });
        histograms.push(Some(hist));
        records.push(Some(o.record.clone()));
    }

    let models = runs.into_iter().map(|r| r.ok().map(|o| o.model)).collect();
    let report = SweepReport {
        split,
        n_test_slices: test_set.len(),
        rows,
        histograms,
        slices,
        records,
    };
    Ok((report, models))
}

/// Flat CSV view of a sweep row.
#[derive(Serialize)]
struct SweepCsvRow {
    s: f64,
    status: &'static str,
    dice_mean: Option<f64>,
    dice_std: Option<f64>,
    precision_mean: Option<f64>,
    precision_std: Option<f64>,
    recall_mean: Option<f64>,
    recall_std: Option<f64>,
    iou_mean: Option<f64>,
    iou_std: Option<f64>,
    ra: Option<f64>,
    n_invalid_columns: Option<usize>,
    steep_fraction: Option<f64>,
    p_dice: Option<f64>,
    p_ra: Option<f64>,
    best_epoch: Option<usize>,
    epochs_run: Option<usize>,
    failure: Option<String>,
}

impl From<&SweepRow> for SweepCsvRow {
    fn from(r: &SweepRow) -> Self {
        Self {
            s: r.smoothness_weight,
            status: if r.failed() { "failed" } else { "ok" },
            dice_mean: r.dice.map(|m| m.mean),
            dice_std: r.dice.map(|m| m.std),
            precision_mean: r.precision.map(|m| m.mean),
            precision_std: r.precision.map(|m| m.std),
            recall_mean: r.recall.map(|m| m.mean),
            recall_std: r.recall.map(|m| m.std),
            iou_mean: r.iou.map(|m| m.mean),
            iou_std: r.iou.map(|m| m.std),
            ra: r.ra,
            n_invalid_columns: r.n_invalid_columns,
            steep_fraction: r.steep_fraction,
            p_dice: r.dice_test.map(|t| t.p_two_sided),
            p_ra: r.ra_test.map(|t| t.p_two_sided),
            best_epoch: r.best_epoch,
            epochs_run: r.epochs_run,
            failure: r.failure.clone(),
        }
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// File-name form of an s value: `0`, `2000`, `0.5`.
pub fn s_label(s: f64) -> String {
    format!("{s}")
}

#[derive(Serialize)]
struct HistogramCsvRow {
    bin_lo_deg: f64,
    bin_hi_deg: f64,
    count: u64,
}

fn write_histogram(path: &Path, h: &NormalHistogram) -> Result<()> {
    write_csv(
        path,
        h.edges().into_iter().zip(&h.counts).map(|(lo, &count)| HistogramCsvRow {
            bin_lo_deg: lo,
            bin_hi_deg: lo + h.bin_width_deg,
            count,
        }),
    )
}

/// Run manifest: the command, its fully resolved configuration and the files written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest<C> {
    pub command: String,
    pub version: String,
    pub config: C,
    pub files: Vec<String>,
}

impl<C: Serialize> Manifest<C> {
    pub fn new(command: &str, config: C, files: Vec<String>) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            files,
        }
    }
}

/// Runs the sweep and writes `sweep.csv`, `sweep_slices.csv`,
/// `normals_<s>.csv`, `sweep_report.json`, the three-panel graymaps and
/// `manifest.json` into `cfg.out_dir`.
pub fn cmd_sweep(cfg: &SweepConfig, threads: usize) -> Result<SweepReport> {
    let (report, models) = run_sweep(cfg, threads)?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir)?;
    let mut files = vec!["sweep.csv".to_string(), "sweep_slices.csv".into(), "sweep_report.json".into()];
    write_csv(&dir.join("sweep.csv"), report.rows.iter().map(SweepCsvRow::from))?;
    write_csv(&dir.join("sweep_slices.csv"), &report.slices)?;
    write_json(&dir.join("sweep_report.json"), &report)?;
    for (&s, h) in cfg.smoothness_weights.iter().zip(&report.histograms) {
        if let Some(h) = h {
            let name = format!("normals_{}.csv", s_label(s));
            write_histogram(&dir.join(&name), h)?;
            files.push(name);
        }
    }

    let test_set = load_volumes(&cfg.phantom, &report.split.test)?;
    if let Some(sl) = test_set.get(cfg.export_slice) {
        let threshold = cfg.train.threshold;
        write_pgm(&sl.image, dir.join("slice_image.pgm"))?;
        write_overlay_pgm(&sl.image, &sl.epidermis_gt, dir.join("slice_gt.pgm"))?;
        files.extend(["slice_image.pgm".into(), "slice_gt.pgm".into()]);
        let baseline = models.first().and_then(Option::as_ref);
        let smooth = cfg
            .smoothness_weights
            .iter()
            .zip(&models)
            .skip(1)
            .rev()
            .find_map(|(&s, m)| m.as_ref().map(|m| (s, m)));
        let panels = baseline.map(|m| (0.0, m)).into_iter().chain(smooth);
        for (s, m) in panels {
            let name = format!("slice_pred_s{}.pgm", s_label(s));
            write_overlay_pgm(&sl.image, &m.forward(&sl.image)?.threshold(threshold), dir.join(&name))?;
            files.push(name);
        }
    }
    files.push("manifest.json".into());
    write_json(&dir.join("manifest.json"), &Manifest::new("sweep", cfg, files))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VesselExpConfig {
    /// 3D phantom with vessels; melanin and vessel intensities overlap by default.
    pub phantom: PhantomConfig,
    /// Checkpoint written by `smoothseg train`.
    pub model: Option<PathBuf>,
    /// Evaluation volumes are `first_volume..first_volume + n_volumes`.
    pub n_volumes: u32,
    pub first_volume: u32,
    /// Held-out volume on which the detector threshold is chosen.
    pub calibration_volume: u32,
    /// Candidate detector thresholds are `k / threshold_steps` for `k` in `1..threshold_steps`.
    pub threshold_steps: usize,
    /// Probability threshold turning the model output into an epidermis mask.
    pub mask_threshold: f64,
    pub out_dir: PathBuf,
}

impl Default for VesselExpConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            model: None,
            n_volumes: 8,
            first_volume: 1000,
            calibration_volume: 999,
            threshold_steps: 100,
            mask_threshold: 0.5,
            out_dir: PathBuf::from("out/vessel"),
        }
    }
}

impl VesselExpConfig {
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        if self.phantom.vessel_count == 0 {
            return Err(Error::Config("the vessel experiment needs vessel_count > 0".into()));
        }
        if self.n_volumes == 0 || self.threshold_steps < 2 {
            return Err(Error::Config(
                "n_volumes must be positive and threshold_steps at least 2".into(),
            ));
        }
        let eval = self.first_volume..self.first_volume.saturating_add(self.n_volumes);
        if eval.contains(&self.calibration_volume) {
            return Err(Error::Config(
                "the calibration volume must not be an evaluation volume".into(),
            ));
        }
        Ok(())
    }
}

/// A single global intensity threshold: voxels at or above it are vessel.
pub fn detect_vessels(volume: &Volume3D, threshold: f64) -> BinaryMask3D {
    BinaryMask3D::new(
        volume.dims(),
        volume.values().iter().map(|&v| v >= threshold).collect(),
    )
    .expect("same dims")
}

/// Zeroes every voxel at or above the per-column lower surface of `epidermis`
/// in each x–z slice. Columns without epidermis are left untouched.
pub fn mask_above_epidermis(volume: &Volume3D, epidermis: &[BinaryMask2D]) -> Result<Volume3D> {
    let [nx, ny, _] = volume.dims();
    if epidermis.len() != ny {
        return Err(Error::ShapeMismatch {
            expected: vec![ny],
            actual: vec![epidermis.len()],
        });
    }
    let mut out = volume.clone();
    for (y, mask) in epidermis.iter().enumerate() {
        let (_, bottom) = extract_surfaces(mask);
        for x in 0..nx {
            if let Some(b) = bottom.get(x) {
                for z in 0..=(b as usize) {
                    out.set(x, y, z, 0.0);
                }
            }
        }
    }
    Ok(out)
}

fn gt_slices(mask: &BinaryMask3D) -> Result<Vec<BinaryMask2D>> {
    (0..mask.dims()[1]).map(|y| mask.slice_xz(y)).collect()
}

fn predicted_slices(model: &ConvModel, volume: &Volume3D, threshold: f64) -> Result<Vec<BinaryMask2D>> {
    (0..volume.dims()[1])
        .map(|y| Ok(model.forward(&volume.slice_xz(y)?)?.threshold(threshold)))
        .collect()
}

/// Threshold maximizing unmasked dice on one volume, ties to the lowest.
pub fn calibrate_threshold(volume: &Volume3D, vessel_gt: &BinaryMask3D, steps: usize) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for k in 1..steps {
        let t = k as f64 / steps as f64;
        let dice = overlap_scores(&detect_vessels(volume, t), vessel_gt)?.dice;
        if best.is_none_or(|(_, d)| dice > d) {
            best = Some((t, dice));
        }
    }
    Ok(best.expect("at least one candidate"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    fn add(&mut self, s: &OverlapScores) {
        self.tp += s.tp;
        self.fp += s.fp;
        self.fn_ += s.fn_;
        self.tn += s.tn;
    }

    fn scores(&self) -> Result<OverlapScores> {
        OverlapScores::from_counts(self.tp, self.fp, self.fn_, self.tn)
    }
}

/// Detector settings echoed in the report; identical for every arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorEcho {
    pub kind: String,
    pub threshold: f64,
    pub calibration_volume: u32,
    pub calibration_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselArm {
    pub name: String,
    pub mask: String,
    pub detector: DetectorEcho,
    /// Pooled over all evaluation voxels.
    pub scores: OverlapScores,
    pub per_volume_dice: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselReport {
    pub n_volumes: u32,
    pub volumes: Vec<u32>,
    pub no_mask: VesselArm,
    pub learned_mask: VesselArm,
    pub oracle_mask: VesselArm,
    /// `dice(learned_mask) - dice(no_mask)`.
    pub dice_gain: f64,
    pub model_smoothness_weight: f64,
    pub mask_threshold: f64,
}

/// Compares vessel detection without a mask, with the model's epidermis
/// mask and with the ground-truth epidermis mask.
pub fn run_vessel_exp(cfg: &VesselExpConfig, model: &ConvModel, model_s: f64) -> Result<VesselReport> {
    cfg.validate()?;
    let calib = gen_volume(&cfg.phantom, cfg.calibration_volume)?;
    let (threshold, calibration_dice) =
        calibrate_threshold(&calib.volume, &calib.vessel_gt, cfg.threshold_steps)?;
    let detector = DetectorEcho {
        kind: "global_intensity_threshold".into(),
        threshold,
        calibration_volume: cfg.calibration_volume,
        calibration_dice,
    };

    let volumes: Vec<u32> = (cfg.first_volume..cfg.first_volume + cfg.n_volumes).collect();
    let mut totals = [Counts { tp: 0, fp: 0, fn_: 0, tn: 0 }; 3];
    let mut per_volume: [Vec<f64>; 3] = Default::default();
    for &v in &volumes {
        let lv = gen_volume(&cfg.phantom, v)?;
        let learned = predicted_slices(model, &lv.volume, cfg.mask_threshold)?;
        let oracle = gt_slices(&lv.epidermis_gt)?;
        let inputs = [
            lv.volume.clone(),
            mask_above_epidermis(&lv.volume, &learned)?,
            mask_above_epidermis(&lv.volume, &oracle)?,
        ];
        for (i, input) in inputs.iter().enumerate() {
            let sc = overlap_scores(&detect_vessels(input, threshold), &lv.vessel_gt)?;
            totals[i].add(&sc);
            per_volume[i].push(sc.dice);
        }
    }
    let [a, b, c] = per_volume;
    let arm = |name: &str, mask: &str, counts: &Counts, dice: Vec<f64>| -> Result<VesselArm> {
        Ok(VesselArm {
            name: name.into(),
            mask: mask.into(),
            detector: detector.clone(),
            scores: counts.scores()?,
            per_volume_dice: dice,
        })
    };
    let no_mask = arm("no_mask", "none", &totals[0], a)?;
    let learned_mask = arm("learned_mask", "model epidermis, lower surface", &totals[1], b)?;
    let oracle_mask = arm("oracle_mask", "ground-truth epidermis, lower surface", &totals[2], c)?;
    Ok(VesselReport {
        n_volumes: cfg.n_volumes,
        volumes,
        dice_gain: learned_mask.scores.dice - no_mask.scores.dice,
        no_mask,
        learned_mask,
        oracle_mask,
        model_smoothness_weight: model_s,
        mask_threshold: cfg.mask_threshold,
    })
}

/// Loads the configured checkpoint, runs the experiment and writes
/// `vessel_report.json` and `manifest.json` into `cfg.out_dir`.
pub fn cmd_vessel_exp(cfg: &VesselExpConfig) -> Result<VesselReport> {
    let path = cfg
        .model
        .clone()
        .ok_or_else(|| Error::MissingModel(PathBuf::from("<none configured>")))?;
    if !path.exists() {
        return Err(Error::MissingModel(path));
    }
    let (model, header) = read_checkpoint(&path)?;
    let report = run_vessel_exp(cfg, &model, header.smoothness_weight)?;
    fs::create_dir_all(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("vessel_report.json"), &report)?;
    write_json(
        &cfg.out_dir.join("manifest.json"),
        &Manifest::new(
            "vessel-exp",
            cfg,
            vec!["vessel_report.json".into(), "manifest.json".into()],
        ),
    )?;
    Ok(report)
}

/// Scores a predicted mask stack against ground truth, one row per slice.
pub fn eval_slices(pred: &[BinaryMask2D], gt: &[BinaryMask2D], volume: u32) -> Result<Vec<SliceEval>> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![gt.len()],
            actual: vec![pred.len()],
        });
    }
    pred.iter()
        .zip(gt)
        .enumerate()
        .map(|(y, (p, g))| evaluate_slice(p, g, SampleId::new(volume, y)))
        .collect()
}
