//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test --release -p smoothseg-cli --test acceptance`.
//! Artifacts of the long runs are kept under `target/tmp/acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use smoothseg::commands::{cmd_train, ExportCmdConfig, PhantomCmdConfig, TrainCmdConfig};
use smoothseg::experiments::{cmd_sweep, cmd_vessel_exp, DatasetConfig, SweepConfig, SweepReport, VesselExpConfig};
use smoothseg::field::{BinaryMask2D, ProbabilityMap, ScalarField2D};
use smoothseg::metrics::{wilcoxon_signed_rank, WilcoxonMethod};
use smoothseg::phantom::PhantomConfig;
use smoothseg::rng::SplitMix64;
use smoothseg::segmenter::{ConvArch, ConvModel, Segmenter};
use smoothseg::smooth_loss::{loss_gradient, smoothness_penalty, total_loss, LossConfig, SmoothKernel, SmoothnessScale};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn artifacts() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn zero_penalty() -> Outcome {
    let mut rng = SplitMix64::new(1);
    let fields: Vec<ScalarField2D> = (0..1000)
        .map(|_| {
            let (w, d) = (1 + rng.below(128), 1 + rng.below(64));
            let rows: Vec<f64> = (0..d).map(|_| rng.next_f64()).collect();
            ScalarField2D::from_fn(w, d, |_, z| rows[z]).unwrap()
        })
        .collect();
    let start = Instant::now();
    let k = SmoothKernel::box5();
    let nonzero = fields.iter().filter(|f| smoothness_penalty(f, &k).unwrap() != 0.0).count();
    let t = start.elapsed();
    check(
        nonzero == 0 && t < Duration::from_secs(1),
        format!("{nonzero} of 1000 row-constant fields with nonzero penalty, {:.3} s", t.as_secs_f64()),
    )
}

fn hand_value() -> Outcome {
    let f = ScalarField2D::new(5, 1, vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let s = smoothness_penalty(&f, &SmoothKernel::box5()).unwrap();
    check((s - 1.2).abs() <= 1e-12, format!("S = {s:.15}"))
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Smallest `|conv(p)_x - p_x|` over the field: distance to the penalty's kinks.
fn kink_distance(f: &ScalarField2D) -> f64 {
    let w = f.width() as i64;
    f.rows()
        .flat_map(|row| {
            (0..w).map(move |x| {
                let c: f64 = (-2..=2).map(|d| row[(x + d).clamp(0, w - 1) as usize] / 5.0).sum();
                (c - row[x as usize]).abs()
            })
        })
        .fold(f64::INFINITY, f64::min)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = SplitMix64::new(31);
    let weights = [0.0, 1.0, 10.0, 100.0, 2000.0];
    let random_cfg = |rng: &mut SplitMix64| LossConfig {
        smoothness_weight: weights[rng.below(weights.len())],
        scale: if rng.next_f64() < 0.5 { SmoothnessScale::Sum } else { SmoothnessScale::PerPixel },
        ..LossConfig::default()
    };

    let (mut field_worst, mut field_n) = (0.0f64, 0);
    while field_n < 100 {
        let (w, d) = (3 + rng.below(8), 2 + rng.below(6));
        let p = ScalarField2D::new(w, d, (0..w * d).map(|_| rng.uniform(0.02, 0.98)).collect()).unwrap();
        if kink_distance(&p) <= 1e-4 {
            continue;
        }
        let t = BinaryMask2D::new(w, d, (0..w * d).map(|_| rng.next_f64() < 0.5).collect()).unwrap();
        let cfg = random_cfg(&mut rng);
        let g = loss_gradient(&ProbabilityMap::new(p.clone()).unwrap(), &t, &cfg).unwrap();
        let eval = |q: &ScalarField2D| total_loss(&ProbabilityMap::new(q.clone()).unwrap(), &t, &cfg).unwrap().total;
        let h = 1e-6;
        for i in 0..w * d {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.values_mut()[i] += h;
            b.values_mut()[i] -= h;
            field_worst = field_worst.max(rel_err(g.values()[i], (eval(&a) - eval(&b)) / (2.0 * h)));
        }
        field_n += 1;
    }

    let (mut param_worst, mut params_checked, mut skipped) = (0.0f64, 0, 0);
    for _ in 0..100 {
        let (w, d) = (6 + rng.below(6), 5 + rng.below(6));
        let image = ScalarField2D::new(w, d, (0..w * d).map(|_| rng.next_f64()).collect()).unwrap();
        let target = BinaryMask2D::from_fn(w, d, |_, z| z >= d / 3 && z < 2 * d / 3).unwrap();
        let mut model = ConvModel::new(ConvArch::default(), rng.next_u64()).unwrap();
        for v in model.params_mut() {
            *v += 0.05 * rng.normal();
        }
        let cfg = random_cfg(&mut rng);
        let (_, g) = model.loss_and_gradient(&image, &target, &cfg).unwrap();
        let eval = |m: &ConvModel| total_loss(&m.forward(&image).unwrap(), &target, &cfg).unwrap().total;
        let base = eval(&model);
        let h = 1e-5;
        for _ in 0..50 {
            let i = rng.below(g.len());
            let (mut a, mut b) = (model.clone(), model.clone());
            a.params_mut()[i] += h;
            b.params_mut()[i] -= h;
            let (la, lb) = (eval(&a), eval(&b));
            // one-sided slopes disagree only across a rectifier or |.| kink
            let (right, left) = ((la - base) / h, (base - lb) / h);
            if rel_err(right, left) > 1e-3 && (right - left).abs() > 1e-7 {
                skipped += 1;
                continue;
            }
            param_worst = param_worst.max(rel_err(g[i], (la - lb) / (2.0 * h)));
            params_checked += 1;
        }
    }
    let t = start.elapsed();
    check(
        field_worst < 1e-5 && param_worst < 1e-4 && t < Duration::from_secs(30),
        format!(
            "field: {field_n} instances, max rel err {field_worst:.2e}; params: 100 models, \
             {params_checked} checks ({skipped} at kinks), max rel err {param_worst:.2e}; {:.1} s",
            t.as_secs_f64()
        ),
    )
}

struct Sweep {
    report: SweepReport,
    elapsed: Duration,
}

fn run_default_sweep() -> Result<Sweep, String> {
    let cfg = SweepConfig {
        out_dir: artifacts().join("sweep"),
        ..SweepConfig::default()
    };
    let start = Instant::now();
    let report = cmd_sweep(&cfg, 1).map_err(|e| e.to_string())?;
    Ok(Sweep { report, elapsed: start.elapsed() })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

fn sweep_trend(sw: &Sweep) -> Outcome {
    let rows = &sw.report.rows;
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| r.failure.is_some() || r.ra.is_none() || r.dice.is_none())
        .map(|r| format!("s={}", r.smoothness_weight))
        .collect();
    let ra: Vec<Option<f64>> = rows.iter().map(|r| r.ra).collect();
    let dice: Vec<Option<f64>> = rows.iter().map(|r| r.dice.map(|d| d.mean)).collect();
    let decreasing = ra.windows(2).all(|w| matches!((w[0], w[1]), (Some(a), Some(b)) if b < a));
    let d0 = dice[0].unwrap_or(f64::NAN);
    let drop = dice.iter().map(|d| d.map_or(f64::INFINITY, |d| (d - d0).abs())).fold(0.0, f64::max);
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("s={}: dice {} R_a {}", r.smoothness_weight, fmt_opt(r.dice.map(|d| d.mean)), fmt_opt(r.ra)))
        .collect();
    check(
        failed.is_empty() && decreasing && drop <= 0.03 && sw.elapsed < Duration::from_secs(15 * 60),
        format!(
            "R_a strictly decreasing: {decreasing}; max |dice - dice(0)| {drop:.4}; degenerate rows [{}]; {:.0} s; {}",
            failed.join(", "),
            sw.elapsed.as_secs_f64(),
            table.join("; ")
        ),
    )
}

fn steep_normals(sw: &Sweep) -> Outcome {
    let f0 = sw.report.row(0.0).and_then(|r| r.steep_fraction);
    let f2000 = sw.report.row(2000.0).and_then(|r| r.steep_fraction);
    let ok = matches!((f0, f2000), (Some(a), Some(b)) if b <= 0.5 * a);
    check(ok, format!("steep fraction s=0 {}, s=2000 {}", fmt_opt(f0), fmt_opt(f2000)))
}

fn significance(sw: &Sweep) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in sw.report.rows.iter().filter(|r| r.smoothness_weight >= 10.0) {
        let p_ra = r.ra_test.map(|t| t.p_two_sided);
        let p_dice = r.dice_test.map(|t| t.p_two_sided);
        ok &= p_ra.is_some_and(|p| p < 0.05) && p_dice.is_some_and(|p| p > 0.05);
        parts.push(format!(
            "s={}: p(R_a) {} p(dice) {}",
            r.smoothness_weight,
            p_ra.map_or("-".into(), |p| format!("{p:.3e}")),
            p_dice.map_or("-".into(), |p| format!("{p:.3e}"))
        ));
    }
    check(ok, parts.join("; "))
}

fn vessel_masking() -> Outcome {
    let dir = artifacts().join("vessel");
    let start = Instant::now();
    let train = TrainCmdConfig {
        out_dir: dir.join("train"),
        ..TrainCmdConfig::default()
    };
    let summary = cmd_train(&train).map_err(|e| e.to_string())?;
    let cfg = VesselExpConfig {
        model: Some(summary.checkpoint),
        out_dir: dir.join("exp"),
        ..VesselExpConfig::default()
    };
    let r = cmd_vessel_exp(&cfg).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let (a, b, c) = (r.no_mask.scores.dice, r.learned_mask.scores.dice, r.oracle_mask.scores.dice);
    check(
        r.dice_gain >= 0.10 && c >= b && t < Duration::from_secs(600),
        format!(
            "dice no mask {a:.4}, learned mask {b:.4}, oracle mask {c:.4}; gain {:.4}; {} volumes; {:.0} s",
            r.dice_gain,
            r.n_volumes,
            t.as_secs_f64()
        ),
    )
}

fn enumerate_p(diffs: &[f64]) -> f64 {
    let n = diffs.len();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|a| {
            let less = abs.iter().filter(|b| *b < a).count() as f64;
            let tied = abs.iter().filter(|b| *b == a).count() as f64;
            less + (tied + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let w_plus: f64 = ranks.iter().zip(diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let w = w_plus.min(total - w_plus);
    let tail = (0u64..1 << n)
        .filter(|m| (0..n).filter(|i| m >> i & 1 == 1).map(|i| ranks[i]).sum::<f64>() <= w)
        .count() as u64;
    ((2 * tail) as f64 / (1u64 << n) as f64).min(1.0)
}

fn wilcoxon_exact() -> Outcome {
    let mut rng = SplitMix64::new(8);
    let (mut count, mut mismatches) = (0, 0);
    for n in 5..=10usize {
        for trial in 0..300 {
            let support = [2, 4, 7, 1 << 20][trial % 4];
            let diffs: Vec<f64> = (0..n)
                .map(|_| {
                    let v = 1 + rng.below(support);
                    if rng.next_f64() < 0.5 { -(v as f64) } else { v as f64 }
                })
                .collect();
            let zeros = vec![0.0; n];
            let r = wilcoxon_signed_rank(&diffs, &zeros).map_err(|e| e.to_string())?;
            if r.method != WilcoxonMethod::Exact || r.p_two_sided != enumerate_p(&diffs) {
                mismatches += 1;
            }
            count += 1;
        }
    }
    check(mismatches == 0, format!("{count} instances with n in 5..=10, {mismatches} mismatches"))
}

fn tiny_phantom(vessels: usize) -> PhantomConfig {
    PhantomConfig {
        dims: [40, 6, 72],
        epidermis_depth: 18.0,
        epidermis_thickness: 12.0,
        waviness_amplitude: 3.0,
        vessel_count: vessels,
        ..PhantomConfig::default()
    }
}

fn hash_dir(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let digest = Sha256::digest(fs::read(&path).unwrap());
        out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), format!("{digest:x}"));
    }
    out
}

/// Runs the CLI with the same arguments twice into a fresh directory and
/// compares stdout and every output file.
fn run_twice(work: &Path, name: &str, config: Option<serde_json::Value>, args: &[&str]) -> Result<usize, String> {
    let out = work.join(name);
    let mut cmd_args: Vec<String> = vec!["--seed".into(), "7".into(), "--out".into(), out.display().to_string()];
    if let Some(cfg) = config {
        let path = work.join(format!("{name}.json"));
        fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
        cmd_args.extend(["--config".into(), path.display().to_string()]);
    }
    cmd_args.extend(args.iter().map(|s| s.to_string()));
    let mut runs = Vec::new();
    for _ in 0..2 {
        let _ = fs::remove_dir_all(&out);
        let o = Command::new(env!("CARGO_BIN_EXE_smoothseg")).args(&cmd_args).output().unwrap();
        if !o.status.success() {
            return Err(format!("{name} failed: {}", String::from_utf8_lossy(&o.stderr)));
        }
        runs.push((o.stdout, hash_dir(&out)));
    }
    if runs[0] != runs[1] {
        return Err(format!("{name}: outputs differ between runs"));
    }
    Ok(runs[0].1.len())
}

fn determinism() -> Outcome {
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let w = work.path();
    let dataset = DatasetConfig { n_volumes: 6, ..DatasetConfig::default() };
    let mut train = TrainCmdConfig { phantom: tiny_phantom(3), dataset: dataset.clone(), ..TrainCmdConfig::default() };
    train.train.epochs = 2;
    let mut sweep = SweepConfig {
        smoothness_weights: vec![0.0, 10.0],
        phantom: tiny_phantom(0),
        dataset: dataset.clone(),
        ..SweepConfig::default()
    };
    sweep.train.epochs = 2;
    let vessel = VesselExpConfig { phantom: tiny_phantom(3), n_volumes: 2, ..VesselExpConfig::default() };
    let phantom = PhantomCmdConfig { phantom: tiny_phantom(3), dataset, ..PhantomCmdConfig::default() };
    let export = ExportCmdConfig { phantom: tiny_phantom(3), slice: 2, ..ExportCmdConfig::default() };

    let mut files = 0;
    files += run_twice(w, "phantom", Some(json(&phantom)), &["phantom"])?;
    files += run_twice(w, "train", Some(json(&train)), &["train"])?;
    // later commands read the first run's outputs; keep a stable copy
    let model = w.join("model.ckpt");
    fs::copy(w.join("train/model.ckpt"), &model).map_err(|e| e.to_string())?;
    let model = model.display().to_string();
    let gt = w.join("phantom/epidermis_000").display().to_string();
    let pred = w.join("phantom/epidermis_001").display().to_string();
    files += run_twice(w, "eval", None, &["eval", "--pred", &pred, "--gt", &gt])?;
    files += run_twice(w, "export", Some(json(&export)), &["export", "--model", &model])?;
    files += run_twice(w, "vessel", Some(json(&vessel)), &["vessel-exp", "--model", &model])?;
    files += run_twice(w, "sweep", Some(json(&sweep)), &["sweep", "--threads", "2"])?;
    Ok(format!("phantom, train, eval, export, vessel-exp and sweep each run twice; {files} files and stdout identical"))
}

fn json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap()
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    // `cargo test -- --list` and filters expect a harness; there is nothing to list.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |id: u32, name: &'static str, outcome: Outcome| {
        let tag = if outcome.is_ok() { "PASS" } else { "FAIL" };
        let detail = match &outcome {
            Ok(d) | Err(d) => d.clone(),
        };
        println!("criterion {id} [{tag}] {name}: {detail}");
        results.push((id, name, outcome));
    };

    report(1, "zero penalty on row-constant fields", guarded(zero_penalty));
    report(2, "hand value [0,0,1,0,0]", guarded(hand_value));
    report(3, "gradients vs finite differences", guarded(gradients));
    report(8, "exact Wilcoxon vs enumeration", guarded(wilcoxon_exact));
    report(9, "CLI determinism", guarded(determinism));
    report(7, "vessel masking gain", guarded(vessel_masking));
    let sweep = panic::catch_unwind(run_default_sweep).unwrap_or_else(|_| Err("panicked".into()));
    match &sweep {
        Ok(sw) => {
            report(4, "sweep trend", guarded(|| sweep_trend(sw)));
            report(5, "steep normals", guarded(|| steep_normals(sw)));
            report(6, "significance pattern", guarded(|| significance(sw)));
        }
        Err(e) => {
            for (id, name) in [(4, "sweep trend"), (5, "steep normals"), (6, "significance pattern")] {
                report(id, name, Err(format!("sweep failed: {e}")));
            }
        }
    }

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    results.sort_by_key(|r| r.0);
    println!("summary:");
    for (id, name, outcome) in &results {
        println!("  {id} {} {name}", if outcome.is_ok() { "PASS" } else { "FAIL" });
    }
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
