//! Dataset generation, training, evaluation and export commands.

use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{pooled_ra, SliceEval};
use crate::experiments::{
    default_train_config, eval_slices, load_volumes, train_on_split, write_json, DatasetConfig,
    Manifest,
};
use crate::field::{read_mask, write_mask, write_overlay_pgm, write_pgm, write_volume, BinaryMask2D};
use crate::metrics::overlap_scores;
use crate::phantom::{gen_slice, gen_volume, DatasetSplit, PhantomConfig};
use crate::segmenter::{read_checkpoint, write_checkpoint, ConvArch, Segmenter, TrainConfig, TrainRecord};
use crate::field::SampleId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomCmdConfig {
    pub phantom: PhantomConfig,
    pub dataset: DatasetConfig,
    pub out_dir: PathBuf,
}

impl Default for PhantomCmdConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            dataset: DatasetConfig::default(),
            out_dir: PathBuf::from("out/phantom"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub volumes: Vec<VolumeEntry>,
    pub split: DatasetSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeEntry {
    pub id: u32,
    pub partition: String,
    pub volume: String,
    pub epidermis: String,
    pub vessels: String,
    pub melanin: String,
}

fn partition_of(split: &DatasetSplit, v: u32) -> &'static str {
    if split.train.contains(&v) {
        "train"
    } else if split.val.contains(&v) {
        "val"
    } else if split.test.contains(&v) {
        "test"
    } else {
        "unused"
    }
}

/// Writes every phantom volume with its three ground-truth masks, plus
/// `dataset.json` (ids and split membership) and `manifest.json`.
pub fn cmd_phantom(cfg: &PhantomCmdConfig) -> Result<DatasetManifest> {
    cfg.phantom.validate()?;
    let split = cfg.dataset.split()?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir)?;
    let spacing = cfg.phantom.spacing_um;
    let mut volumes = Vec::new();
    let mut files = Vec::new();
    for v in 0..cfg.dataset.n_volumes {
        let lv = gen_volume(&cfg.phantom, v)?;
        let name = |kind: &str| format!("{kind}_{v:03}");
        write_volume(&lv.volume, dir.join(name("volume")))?;
        write_mask(&lv.epidermis_gt, spacing, dir.join(name("epidermis")))?;
        write_mask(&lv.vessel_gt, spacing, dir.join(name("vessels")))?;
        write_mask(&lv.melanin_gt, spacing, dir.join(name("melanin")))?;
        for kind in ["volume", "epidermis", "vessels", "melanin"] {
            files.push(format!("{}.json", name(kind)));
            files.push(format!("{}.raw", name(kind)));
        }
        volumes.push(VolumeEntry {
            id: v,
            partition: partition_of(&split, v).into(),
            volume: name("volume"),
            epidermis: name("epidermis"),
            vessels: name("vessels"),
            melanin: name("melanin"),
        });
    }
    let manifest = DatasetManifest { volumes, split };
    write_json(&dir.join("dataset.json"), &manifest)?;
    files.extend(["dataset.json".into(), "manifest.json".into()]);
    write_json(&dir.join("manifest.json"), &Manifest::new("phantom", cfg, files))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCmdConfig {
    pub phantom: PhantomConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub architecture: ConvArch,
    pub model_seed: u64,
    pub out_dir: PathBuf,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        let mut train = default_train_config();
        train.loss.smoothness_weight = 10.0;
        Self {
            phantom: PhantomConfig::default(),
            dataset: DatasetConfig::default(),
            train,
            architecture: ConvArch::default(),
            model_seed: 0,
            out_dir: PathBuf::from("out/train"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub split: DatasetSplit,
    pub record: TrainRecord,
    pub test_dice: f64,
    pub test_ra: Option<f64>,
}

/// Trains one model and writes `model.ckpt`, `train_record.json` and `manifest.json`.
pub fn cmd_train(cfg: &TrainCmdConfig) -> Result<TrainSummary> {
    let split = cfg.dataset.split()?;
    let (model, record) =
        train_on_split(&cfg.phantom, &split, &cfg.architecture, cfg.model_seed, &cfg.train)?;
    let test = load_volumes(&cfg.phantom, &split.test)?;
    let evals: Vec<SliceEval> = crate::experiments::evaluate_model(&model, &test, cfg.train.threshold)?;
    let test_dice = if evals.is_empty() {
        f64::NAN
    } else {
        evals.iter().map(|e| e.scores.dice).sum::<f64>() / evals.len() as f64
    };
    fs::create_dir_all(&cfg.out_dir)?;
    let checkpoint = cfg.out_dir.join("model.ckpt");
    write_checkpoint(
        &model,
        cfg.model_seed,
        record.best_epoch,
        cfg.train.loss.smoothness_weight,
        &checkpoint,
    )?;
    let summary = TrainSummary {
        checkpoint,
        split,
        record,
        test_dice,
        test_ra: pooled_ra(&evals),
    };
    write_json(&cfg.out_dir.join("train_record.json"), &summary)?;
    write_json(
        &cfg.out_dir.join("manifest.json"),
        &Manifest::new(
            "train",
            cfg,
            vec!["model.ckpt".into(), "train_record.json".into(), "manifest.json".into()],
        ),
    )?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub slice: Option<usize>,
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub ra: Option<f64>,
    pub n_invalid_columns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Scores over the whole volume; `slice` is `None`.
    pub overall: EvalRow,
    pub slices: Vec<EvalRow>,
}

/// Scores a predicted 3D mask file against a ground-truth mask file, per
/// x–z slice and overall; writes `eval.csv` (overall row first) into `out_dir`.
pub fn cmd_eval(pred: &std::path::Path, gt: &std::path::Path, out_dir: &std::path::Path) -> Result<EvalReport> {
    let (pred, _) = read_mask(pred)?;
    let (gt, _) = read_mask(gt)?;
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch {
            expected: gt.dims().to_vec(),
            actual: pred.dims().to_vec(),
        });
    }
    let ny = gt.dims()[1];
    let split = |m: &crate::field::BinaryMask3D| -> Result<Vec<BinaryMask2D>> {
        (0..ny).map(|y| m.slice_xz(y)).collect()
    };
    let evals = eval_slices(&split(&pred)?, &split(&gt)?, 0)?;
    let whole = overlap_scores(&pred, &gt)?;
    let overall = EvalRow {
        slice: None,
        dice: whole.dice,
        iou: whole.iou,
        precision: whole.precision,
        recall: whole.recall,
        ra: pooled_ra(&evals),
        n_invalid_columns: evals.iter().map(|e| e.n_invalid_columns).sum(),
    };
    let slices = evals
        .iter()
        .map(|e| EvalRow {
            slice: Some(e.id.slice),
            dice: e.scores.dice,
            iou: e.scores.iou,
            precision: e.scores.precision,
            recall: e.scores.recall,
            ra: e.ra(),
            n_invalid_columns: e.n_invalid_columns,
        })
        .collect();
    let report = EvalReport { overall, slices };
    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("eval.csv"))?;
    w.serialize(&report.overall)?;
    for r in &report.slices {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportCmdConfig {
    pub phantom: PhantomConfig,
    pub volume: u32,
    pub slice: usize,
    pub model: Option<PathBuf>,
    pub threshold: f64,
    pub out_dir: PathBuf,
}

impl Default for ExportCmdConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            volume: 0,
            slice: 0,
            model: None,
            threshold: 0.5,
            out_dir: PathBuf::from("out/export"),
        }
    }
}

/// Writes `image.pgm`, `gt_overlay.pgm` and, given a model, `pred_overlay.pgm`
/// for one phantom slice. Returns the file names.
pub fn cmd_export(cfg: &ExportCmdConfig) -> Result<Vec<String>> {
    let sl = gen_slice(&cfg.phantom, SampleId::new(cfg.volume, cfg.slice))?;
    fs::create_dir_all(&cfg.out_dir)?;
    let dir = &cfg.out_dir;
    write_pgm(&sl.image, dir.join("image.pgm"))?;
    write_overlay_pgm(&sl.image, &sl.epidermis_gt, dir.join("gt_overlay.pgm"))?;
    let mut files = vec!["image.pgm".to_string(), "gt_overlay.pgm".into()];
    if let Some(path) = &cfg.model {
        if !path.exists() {
            return Err(Error::MissingModel(path.clone()));
        }
        let (model, _) = read_checkpoint(path)?;
        let pred = model.forward(&sl.image)?.threshold(cfg.threshold);
        write_overlay_pgm(&sl.image, &pred, dir.join("pred_overlay.pgm"))?;
        files.push("pred_overlay.pgm".into());
    }
    Ok(files)
}
