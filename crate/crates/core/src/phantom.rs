//! Seeded synthetic layered phantoms with ground truth.
//!
//! A phantom volume has a dark layer above the skin, an epidermis band whose
//! upper and lower surfaces are smooth low-frequency curves in x and y, and a
//! dermis below it. The epidermis carries irregular bright melanin blobs; the
//! dermis carries capillary dots just under the band and tubular vessels
//! deeper down. Melanin and vessels share one peak-intensity range, so a
//! global intensity threshold cannot tell them apart.
//!
//! All randomness is drawn from [`crate::rng`] keyed by `(seed, volume, ...)`.
//! Slices are rendered independently, and [`gen_volume`] stacks exactly the
//! slices [`gen_slice`] returns.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{BinaryMask2D, BinaryMask3D, SampleId, ScalarField2D, Volume3D};
use crate::rng::{keyed_normal, SplitMix64};

const TAG_SURFACES: u64 = 1;
const TAG_MELANIN: u64 = 2;
const TAG_CAPILLARY: u64 = 3;
const TAG_VESSEL: u64 = 4;
const TAG_NOISE: u64 = 5;
const TAG_SPLIT: u64 = 6;

/// Relative amplitudes of the upper-surface sinusoids; the first dominates.
const TOP_WEIGHTS: [f64; 3] = [0.7, 0.15, 0.15];
/// Relative amplitudes of the thickness modulation.
const THICKNESS_WEIGHTS: [f64; 2] = [0.2, 0.1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    /// `[X, Y, Z]` in pixels.
    pub dims: [usize; 3],
    pub spacing_um: [f64; 3],
    pub seed: u64,
    /// Mean depth of the upper epidermis surface, pixels.
    pub epidermis_depth: f64,
    /// Mean epidermis thickness, pixels.
    pub epidermis_thickness: f64,
    /// Amplitude of the surface undulation, pixels.
    pub waviness_amplitude: f64,
    /// Highest surface frequency, in cycles per slice width.
    pub waviness_max_frequency: f64,
    pub background_level: f64,
    pub epidermis_level: f64,
    pub dermis_level: f64,
    /// Width in pixels of the intensity transition at each epidermis surface;
    /// 0 gives a hard step.
    pub edge_width: f64,
    /// Melanin blobs per 100 surface columns (x, y pairs).
    pub melanin_density: f64,
    /// Peak intensity range of melanin blobs.
    pub melanin_intensity: [f64; 2],
    pub noise_std: f64,
    pub vessel_count: usize,
    /// Tube radius range, pixels.
    pub vessel_radius: [f64; 2],
    /// Peak intensity range of vessels and capillaries.
    pub vessel_intensity: [f64; 2],
    /// Capillary dots per 100 surface columns.
    pub capillary_density: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [128, 16, 192],
            spacing_um: [12.0, 12.0, 3.0],
            seed: 0,
            epidermis_depth: 40.0,
            epidermis_thickness: 24.0,
            waviness_amplitude: 7.0,
            waviness_max_frequency: 1.0,
            background_level: 0.02,
            epidermis_level: 0.3,
            dermis_level: 0.15,
            edge_width: 0.0,
            melanin_density: 3.0,
            melanin_intensity: [0.45, 0.9],
            noise_std: 0.08,
            vessel_count: 6,
            vessel_radius: [1.0, 1.6],
            vessel_intensity: [0.45, 0.9],
            capillary_density: 1.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let [nx, ny, nz] = self.dims;
        let bad = |m: String| Err(Error::Config(m));
        if nx < 3 || ny < 1 || nz < 3 {
            return bad(format!("dims {:?} too small", self.dims));
        }
        if self.spacing_um.iter().any(|&s| !(s > 0.0)) {
            return bad(format!("spacing {:?} must be positive", self.spacing_um));
        }
        if !(self.epidermis_thickness > 0.0) {
            return bad("epidermis thickness must be positive".into());
        }
        let a = self.waviness_amplitude;
        if !(a >= 0.0) || !(self.waviness_max_frequency >= 0.5) {
            return bad("waviness amplitude must be >= 0 and max frequency >= 0.5".into());
        }
        let top_swing = a * TOP_WEIGHTS.iter().sum::<f64>();
        let thick_swing = a * THICKNESS_WEIGHTS.iter().sum::<f64>();
        if self.epidermis_depth - top_swing < 1.0 {
            return bad("epidermis reaches the top of the slice".into());
        }
        if self.epidermis_thickness - thick_swing < 1.0 {
            return bad("thickness modulation exceeds the mean thickness".into());
        }
        if self.epidermis_depth + self.epidermis_thickness + top_swing + thick_swing
            >= nz as f64 - 1.0
        {
            return bad("depth + thickness must stay inside the slice".into());
        }
        for (name, v) in [
            ("melanin_density", self.melanin_density),
            ("capillary_density", self.capillary_density),
            ("noise_std", self.noise_std),
            ("edge_width", self.edge_width),
        ] {
            if !(v >= 0.0) {
                return bad(format!("{name} must be >= 0"));
            }
        }
        for (name, r) in [
            ("melanin_intensity", self.melanin_intensity),
            ("vessel_intensity", self.vessel_intensity),
            ("vessel_radius", self.vessel_radius),
        ] {
            if !(r[0] <= r[1]) || r[0] < 0.0 {
                return bad(format!("{name} range {r:?} is invalid"));
            }
        }
        if self.vessel_count > 0 && self.vessel_radius[0] <= 0.0 {
            return bad("vessel radius must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSlice {
    pub image: ScalarField2D,
    pub epidermis_gt: BinaryMask2D,
    pub id: SampleId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    pub volume: Volume3D,
    pub epidermis_gt: BinaryMask3D,
    pub vessel_gt: BinaryMask3D,
    /// Voxels at or above half of some melanin blob's peak contrast.
    pub melanin_gt: BinaryMask3D,
}

#[derive(Debug, Clone, Copy)]
struct Wave {
    amplitude: f64,
    fx: f64,
    fy: f64,
    phase: f64,
}

impl Wave {
    fn eval(&self, x: f64, y: f64, width: f64) -> f64 {
        self.amplitude * (TAU * (self.fx * x + self.fy * y) / width + self.phase).sin()
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    center: [f64; 3],
    radius_xy: f64,
    radius_z: f64,
    contrast: f64,
}

#[derive(Debug, Clone, Copy)]
struct Tube {
    point: [f64; 3],
    axis: [f64; 3],
    radius: f64,
    contrast: f64,
}

/// Everything random about one phantom volume, drawn once.
struct VolumeModel<'a> {
    cfg: &'a PhantomConfig,
    volume: u32,
    top_waves: Vec<Wave>,
    thickness_waves: Vec<Wave>,
    melanin: Vec<Blob>,
    capillaries: Vec<Blob>,
    vessels: Vec<Tube>,
}

struct RenderedSlice {
    image: ScalarField2D,
    epidermis: BinaryMask2D,
    vessels: BinaryMask2D,
    melanin: BinaryMask2D,
}

impl<'a> VolumeModel<'a> {
    fn new(cfg: &'a PhantomConfig, volume: u32) -> Result<Self> {
        cfg.validate()?;
        let [nx, ny, _] = cfg.dims;
        let (w, h) = (nx as f64, ny as f64);
        let a = cfg.waviness_amplitude;
        let cap = cfg.waviness_max_frequency;
        let vol = u64::from(volume);

        let mut rng = SplitMix64::keyed(cfg.seed, &[TAG_SURFACES, vol]);
        let mut wave = |amplitude: f64, fx_lo: f64| Wave {
            amplitude,
            fx: rng.uniform(fx_lo.min(cap), cap),
            fy: rng.uniform(-0.5 * cap, 0.5 * cap),
            phase: rng.uniform(0.0, TAU),
        };
        let top_waves: Vec<Wave> = TOP_WEIGHTS
            .iter()
            .enumerate()
            .map(|(i, wt)| wave(wt * a, if i == 0 { 1.0 } else { 0.5 }))
            .collect();
        let thickness_waves: Vec<Wave> =
            THICKNESS_WEIGHTS.iter().map(|wt| wave(wt * a, 0.5)).collect();

        let mut model = Self {
            cfg,
            volume,
            top_waves,
            thickness_waves,
            melanin: Vec::new(),
            capillaries: Vec::new(),
            vessels: Vec::new(),
        };

        let columns = w * h;
        let mut rng = SplitMix64::keyed(cfg.seed, &[TAG_MELANIN, vol]);
        let n_melanin = (cfg.melanin_density * columns / 100.0).round() as usize;
        for _ in 0..n_melanin {
            let x = rng.uniform(0.0, w);
            let y = rng.uniform(0.0, h);
            let (top, bottom) = model.surfaces(x, y);
            let z = rng.uniform(top, bottom);
            let peak = rng.uniform(cfg.melanin_intensity[0], cfg.melanin_intensity[1]);
            model.melanin.push(Blob {
                center: [x, y, z],
                radius_xy: rng.uniform(2.0, 5.0),
                radius_z: rng.uniform(1.5, 4.0),
                contrast: peak - cfg.epidermis_level,
            });
        }

        let mut rng = SplitMix64::keyed(cfg.seed, &[TAG_CAPILLARY, vol]);
        let n_cap = (cfg.capillary_density * columns / 100.0).round() as usize;
        for _ in 0..n_cap {
            let x = rng.uniform(0.0, w);
            let y = rng.uniform(0.0, h);
            let (_, bottom) = model.surfaces(x, y);
            let z = bottom + rng.uniform(3.0, 12.0);
            let peak = rng.uniform(cfg.vessel_intensity[0], cfg.vessel_intensity[1]);
            let r = rng.uniform(1.0, 1.8);
            model.capillaries.push(Blob {
                center: [x, y, z],
                radius_xy: r,
                radius_z: r,
                contrast: peak - cfg.dermis_level,
            });
        }

        let mut rng = SplitMix64::keyed(cfg.seed, &[TAG_VESSEL, vol]);
        let deepest = cfg.epidermis_depth
            + cfg.epidermis_thickness
            + a * (TOP_WEIGHTS.iter().sum::<f64>() + THICKNESS_WEIGHTS.iter().sum::<f64>());
        let z_lo = (deepest + 14.0).min(cfg.dims[2] as f64 - 2.0);
        let z_hi = (cfg.dims[2] as f64 - 6.0).max(z_lo);
        for _ in 0..cfg.vessel_count {
            let point = [rng.uniform(0.0, w), rng.uniform(0.0, h), rng.uniform(z_lo, z_hi)];
            // mostly horizontal, random in-plane direction
            let mut axis = [rng.normal(), rng.normal(), 0.3 * rng.normal()];
            let norm = axis.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            axis.iter_mut().for_each(|v| *v /= norm);
            let peak = rng.uniform(cfg.vessel_intensity[0], cfg.vessel_intensity[1]);
            model.vessels.push(Tube {
                point,
                axis,
                radius: rng.uniform(cfg.vessel_radius[0], cfg.vessel_radius[1]),
                contrast: peak - cfg.dermis_level,
            });
        }
        Ok(model)
    }

    /// Real-valued upper and lower epidermis surfaces at `(x, y)`.
    fn surfaces(&self, x: f64, y: f64) -> (f64, f64) {
        let w = self.cfg.dims[0] as f64;
        let top = self.cfg.epidermis_depth
            + self.top_waves.iter().map(|s| s.eval(x, y, w)).sum::<f64>();
        let thickness = self.cfg.epidermis_thickness
            + self
                .thickness_waves
                .iter()
                .map(|s| s.eval(x, y, w))
                .sum::<f64>();
        (top, top + thickness)
    }

    /// Integer band `[top, bottom)` for column `(x, y)`.
    fn band(&self, x: usize, y: usize) -> (usize, usize) {
        let (top, bottom) = self.surfaces(x as f64, y as f64);
        let nz = self.cfg.dims[2];
        let t = (top.round().max(1.0) as usize).min(nz - 2);
        let b = (bottom.round() as usize).clamp(t + 1, nz - 1);
        (t, b)
    }

    fn render(&self, y: usize) -> RenderedSlice {
        let cfg = self.cfg;
        let [nx, _, nz] = cfg.dims;
        let yf = y as f64;
        let bands: Vec<(usize, usize)> = (0..nx).map(|x| self.band(x, y)).collect();

        let mut base = vec![0.0; nx * nz];
        let mut epidermis = vec![false; nx * nz];
        for (x, &(t, b)) in bands.iter().enumerate() {
            let (top, bottom) = self.surfaces(x as f64, yf);
            for z in 0..nz {
                let i = z * nx + x;
                epidermis[i] = (t..b).contains(&z);
                base[i] = if cfg.edge_width > 0.0 {
                    // pixel z is labeled epidermis once it passes top - 0.5
                    let below_top = logistic((z as f64 - top + 0.5) / cfg.edge_width);
                    let above_bottom = logistic((bottom - 0.5 - z as f64) / cfg.edge_width);
                    let inner = cfg.epidermis_level * above_bottom
                        + cfg.dermis_level * (1.0 - above_bottom);
                    cfg.background_level * (1.0 - below_top) + inner * below_top
                } else if z < t {
                    cfg.background_level
                } else if z < b {
                    cfg.epidermis_level
                } else {
                    cfg.dermis_level
                };
            }
        }

        let mut melanin_mask = vec![false; nx * nz];
        let mut clutter = vec![0.0; nx * nz];
        for blob in &self.melanin {
            splat_blob(blob, yf, nx, nz, |x, z, f| {
                let (t, b) = bands[x];
                if (t..b).contains(&z) {
                    let i = z * nx + x;
                    clutter[i] = f64::max(clutter[i], blob.contrast * f);
                    if f >= 0.5 {
                        melanin_mask[i] = true;
                    }
                }
            });
        }

        let mut vessel_mask = vec![false; nx * nz];
        let mut vessel_signal = vec![0.0f64; nx * nz];
        for cap in &self.capillaries {
            splat_blob(cap, yf, nx, nz, |x, z, f| {
                if z > bands[x].1 {
                    let i = z * nx + x;
                    vessel_signal[i] = vessel_signal[i].max(cap.contrast * f);
                    if f >= 0.5 {
                        vessel_mask[i] = true;
                    }
                }
            });
        }
        for tube in &self.vessels {
            let reach = 2.0 * tube.radius;
            for z in 0..nz {
                for (x, &(_, b)) in bands.iter().enumerate() {
                    if z <= b + 1 {
                        continue;
                    }
                    let d = [
                        x as f64 - tube.point[0],
                        yf - tube.point[1],
                        z as f64 - tube.point[2],
                    ];
                    let along = d[0] * tube.axis[0] + d[1] * tube.axis[1] + d[2] * tube.axis[2];
                    let perp2 = d.iter().map(|v| v * v).sum::<f64>() - along * along;
                    if perp2 > reach * reach {
                        continue;
                    }
                    let u2 = perp2.max(0.0) / (tube.radius * tube.radius);
                    // same flat-topped profile as the blobs; half contrast at the wall
                    let f = (-std::f64::consts::LN_2 * u2 * u2 * u2).exp();
                    let i = z * nx + x;
                    vessel_signal[i] = vessel_signal[i].max(tube.contrast * f);
                    if u2 <= 1.0 {
                        vessel_mask[i] = true;
                    }
                }
            }
        }

        let vol = u64::from(self.volume);
        let mut image = Vec::with_capacity(nx * nz);
        for z in 0..nz {
            for x in 0..nx {
                let i = z * nx + x;
                let noise = if cfg.noise_std > 0.0 {
                    cfg.noise_std
                        * keyed_normal(cfg.seed, &[TAG_NOISE, vol, x as u64, y as u64, z as u64])
                } else {
                    0.0
                };
                let v = (base[i] + clutter[i] + vessel_signal[i] + noise).clamp(0.0, 1.0);
                image.push(f64::from(v as f32));
            }
        }

        RenderedSlice {
            image: ScalarField2D::new(nx, nz, image).expect("phantom shape"),
            epidermis: BinaryMask2D::new(nx, nz, epidermis).expect("phantom shape"),
            vessels: BinaryMask2D::new(nx, nz, vessel_mask).expect("phantom shape"),
            melanin: BinaryMask2D::new(nx, nz, melanin_mask).expect("phantom shape"),
        }
    }
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Calls `f(x, z, falloff)` for every pixel of slice `y` near an
/// axis-aligned flat-topped blob, `exp(-ln2 * u^6)` in normalized radius `u`:
/// 1 at the center, 0.5 at one radius.
fn splat_blob(blob: &Blob, y: f64, nx: usize, nz: usize, mut f: impl FnMut(usize, usize, f64)) {
    let dy = (y - blob.center[1]) / blob.radius_xy;
    if dy.abs() > 2.0 {
        return;
    }
    let x_lo = (blob.center[0] - 2.0 * blob.radius_xy).floor().max(0.0) as usize;
    let x_hi = ((blob.center[0] + 2.0 * blob.radius_xy).ceil() as usize).min(nx - 1);
    let z_lo = (blob.center[2] - 2.0 * blob.radius_z).floor().max(0.0) as usize;
    let z_hi = ((blob.center[2] + 2.0 * blob.radius_z).ceil() as usize).min(nz - 1);
    for z in z_lo..=z_hi {
        let dz = (z as f64 - blob.center[2]) / blob.radius_z;
        for x in x_lo..=x_hi {
            let dx = (x as f64 - blob.center[0]) / blob.radius_xy;
            let u2 = dx * dx + dy * dy + dz * dz;
            if u2 <= 4.0 {
                f(x, z, (-std::f64::consts::LN_2 * u2 * u2 * u2).exp());
            }
        }
    }
}

/// One labeled x–z slice: slice `id.slice` of phantom volume `id.volume`.
pub fn gen_slice(cfg: &PhantomConfig, id: SampleId) -> Result<LabeledSlice> {
    let model = VolumeModel::new(cfg, id.volume)?;
    if id.slice >= cfg.dims[1] {
        return Err(Error::Index {
            index: id.slice,
            len: cfg.dims[1],
        });
    }
    let r = model.render(id.slice);
    Ok(LabeledSlice {
        image: r.image,
        epidermis_gt: r.epidermis,
        id,
    })
}

/// All slices of `volume`, in y order.
pub fn gen_volume_slices(cfg: &PhantomConfig, volume: u32) -> Result<Vec<LabeledSlice>> {
    let model = VolumeModel::new(cfg, volume)?;
    Ok((0..cfg.dims[1])
        .map(|y| {
            let r = model.render(y);
            LabeledSlice {
                image: r.image,
                epidermis_gt: r.epidermis,
                id: SampleId::new(volume, y),
            }
        })
        .collect())
}

pub fn gen_volume(cfg: &PhantomConfig, volume: u32) -> Result<LabeledVolume> {
    let model = VolumeModel::new(cfg, volume)?;
    let rendered: Vec<RenderedSlice> = (0..cfg.dims[1]).map(|y| model.render(y)).collect();
    let images: Vec<ScalarField2D> = rendered.iter().map(|r| r.image.clone()).collect();
    let stack = |pick: fn(&RenderedSlice) -> &BinaryMask2D| {
        BinaryMask3D::from_slices(&rendered.iter().map(|r| pick(r).clone()).collect::<Vec<_>>())
    };
    Ok(LabeledVolume {
        volume: Volume3D::from_slices(&images, cfg.spacing_um)?,
        epidermis_gt: stack(|r| &r.epidermis)?,
        vessel_gt: stack(|r| &r.vessels)?,
        melanin_gt: stack(|r| &r.melanin)?,
    })
}

/// Slices of volumes `0..n_volumes`, volume-major.
pub fn gen_dataset(cfg: &PhantomConfig, n_volumes: u32) -> Result<Vec<LabeledSlice>> {
    let mut out = Vec::with_capacity(n_volumes as usize * cfg.dims[1]);
    for v in 0..n_volumes {
        out.extend(gen_volume_slices(cfg, v)?);
    }
    Ok(out)
}

/// Volume-level partition of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl DatasetSplit {
    /// Keeps the items whose volume is in `volumes`, preserving order.
    pub fn select<'a, T>(
        items: &'a [T],
        volumes: &[u32],
        volume_of: impl Fn(&T) -> u32,
    ) -> Vec<&'a T> {
        items
            .iter()
            .filter(|it| volumes.contains(&volume_of(it)))
            .collect()
    }
}

/// Splits by volume: a seeded shuffle, then `round(test_fraction * n)`
/// volumes for test and the rest cut into `folds` contiguous folds, of which
/// `fold_index` is validation.
pub fn split_dataset(
    volumes: &[u32],
    folds: usize,
    fold_index: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    if fold_index >= folds {
        return Err(Error::Config(format!(
            "fold index {fold_index} out of range for {folds} folds"
        )));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} must lie in [0, 1)"
        )));
    }
    let mut ids: Vec<u32> = volumes.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let n_test = (test_fraction * ids.len() as f64).round() as usize;
    let n_rest = ids.len().saturating_sub(n_test);
    if n_rest < folds {
        return Err(Error::Config(format!(
            "{} volumes leave {n_rest} for {folds} folds",
            ids.len()
        )));
    }
    SplitMix64::keyed(seed, &[TAG_SPLIT]).shuffle(&mut ids);
    let (test, rest) = ids.split_at(n_test);
    // fold i covers rest[start(i)..start(i + 1)]
    let start = |i: usize| i * n_rest / folds;
    let (lo, hi) = (start(fold_index), start(fold_index + 1));
    let val = rest[lo..hi].to_vec();
    let train = rest[..lo].iter().chain(&rest[hi..]).copied().collect();
    Ok(DatasetSplit {
        train,
        val,
        test: test.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{extract_surfaces, roughness};

    fn small() -> PhantomConfig {
        PhantomConfig {
            dims: [48, 4, 96],
            epidermis_depth: 20.0,
            epidermis_thickness: 16.0,
            waviness_amplitude: 7.0,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn flat_phantom_has_rectangular_band() {
        let cfg = PhantomConfig {
            waviness_amplitude: 0.0,
            ..small()
        };
        let s = gen_slice(&cfg, SampleId::new(0, 1)).unwrap();
        let (top, bottom) = extract_surfaces(&s.epidermis_gt);
        assert!(top.depths().iter().all(|&z| z == 20.0));
        assert!(bottom.depths().iter().all(|&z| z == 35.0));
        assert_eq!(roughness(&top).unwrap(), 0.0);
        assert_eq!(roughness(&bottom).unwrap(), 0.0);
    }

    #[test]
    fn slices_are_deterministic() {
        let cfg = small();
        let a = gen_slice(&cfg, SampleId::new(3, 2)).unwrap();
        let b = gen_slice(&cfg, SampleId::new(3, 2)).unwrap();
        assert_eq!(a, b);
        let c = gen_slice(&cfg, SampleId::new(4, 2)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn gt_columns_are_single_runs() {
        let s = gen_slice(&small(), SampleId::new(1, 0)).unwrap();
        let m = &s.epidermis_gt;
        for x in 0..m.width() {
            let col: Vec<bool> = (0..m.depth()).map(|z| m.get(x, z)).collect();
            let starts = col.windows(2).filter(|w| !w[0] && w[1]).count() + usize::from(col[0]);
            assert_eq!(starts, 1, "column {x}");
        }
    }

    #[test]
    fn volume_stacks_the_slices() {
        let cfg = small();
        let v = gen_volume(&cfg, 2).unwrap();
        for y in 0..cfg.dims[1] {
            let s = gen_slice(&cfg, SampleId::new(2, y)).unwrap();
            assert_eq!(v.volume.slice_xz(y).unwrap(), s.image);
            assert_eq!(v.epidermis_gt.slice_xz(y).unwrap(), s.epidermis_gt);
        }
    }

    #[test]
    fn no_vessels_means_empty_vessel_gt() {
        let cfg = PhantomConfig {
            vessel_count: 0,
            capillary_density: 0.0,
            ..small()
        };
        assert_eq!(gen_volume(&cfg, 0).unwrap().vessel_gt.count(), 0);
    }

    #[test]
    fn intensities_in_unit_range() {
        let s = gen_slice(&small(), SampleId::new(0, 0)).unwrap();
        assert!(s.image.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_configs_rejected() {
        let c = PhantomConfig {
            epidermis_thickness: 0.0,
            ..small()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = PhantomConfig {
            epidermis_depth: 80.0,
            ..small()
        };
        assert!(c.validate().is_err());
        let c = PhantomConfig {
            melanin_density: -1.0,
            ..small()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn split_paper_sizes() {
        let vols: Vec<u32> = (0..31).collect();
        let s = split_dataset(&vols, 5, 0, 6.0 / 31.0, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (20, 5, 6));
    }

    #[test]
    fn split_two_folds_no_test() {
        let s = split_dataset(&[0, 1, 2, 3], 2, 1, 0.0, 9).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2, 2, 0));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let vols: Vec<u32> = (0..12).collect();
        let a = split_dataset(&vols, 3, 2, 0.25, 5).unwrap();
        assert_eq!(a, split_dataset(&vols, 3, 2, 0.25, 5).unwrap());
        let mut all: Vec<u32> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, vols);
    }

    #[test]
    fn split_errors() {
        assert!(split_dataset(&[0, 1, 2], 1, 0, 0.0, 0).is_err());
        assert!(split_dataset(&[0, 1, 2], 5, 0, 0.0, 0).is_err());
        assert!(split_dataset(&[0, 1, 2], 2, 2, 0.0, 0).is_err());
    }
}
