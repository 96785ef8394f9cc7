//! Dense scalar fields, binary masks and volumes.
//!
//! Layout is row-major with x fastest everywhere. A 2D field stores row `z`
//! at `values[z * width .. (z + 1) * width]`, so the along-x row vectors the
//! smoothness penalty works on are contiguous slices. A volume stores voxel
//! `(x, y, z)` at `x + X * (y + Y * z)`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};

fn check_dims_2d(width: usize, depth: usize, len: usize) -> Result<()> {
    if width == 0 || depth == 0 {
        return Err(Error::Dimensions(format!(
            "field dimensions must be positive, got {width}x{depth}"
        )));
    }
    if width * depth != len {
        return Err(Error::Dimensions(format!(
            "{width}x{depth} field needs {} values, got {len}",
            width * depth
        )));
    }
    Ok(())
}

/// An X-by-Z grid of reals: images, probability maps, per-pixel loss maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField2D {
    width: usize,
    depth: usize,
    values: Vec<f64>,
}

impl ScalarField2D {
    pub fn new(width: usize, depth: usize, values: Vec<f64>) -> Result<Self> {
        check_dims_2d(width, depth, values.len())?;
        Ok(Self {
            width,
            depth,
            values,
        })
    }

    pub fn filled(width: usize, depth: usize, value: f64) -> Result<Self> {
        Self::new(width, depth, vec![value; width * depth])
    }

    pub fn from_fn(width: usize, depth: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(width * depth);
        for z in 0..depth {
            for x in 0..width {
                values.push(f(x, z));
            }
        }
        Self::new(width, depth, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// `[width, depth]`
    pub fn shape(&self) -> [usize; 2] {
        [self.width, self.depth]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, z: usize) -> f64 {
        self.values[z * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, z: usize, v: f64) {
        self.values[z * self.width + x] = v;
    }

    /// Row `z` as a contiguous slice of length `width`.
    pub fn row(&self, z: usize) -> &[f64] {
        &self.values[z * self.width..(z + 1) * self.width]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.width)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            depth: self.depth,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Thresholds inclusively: a pixel is foreground iff its value is `>= t`.
    pub fn threshold(&self, t: f64) -> BinaryMask2D {
        BinaryMask2D {
            width: self.width,
            depth: self.depth,
            values: self.values.iter().map(|&v| v >= t).collect(),
        }
    }
}

/// A [`ScalarField2D`] with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(ScalarField2D);

impl ProbabilityMap {
    pub fn new(field: ScalarField2D) -> Result<Self> {
        if let Some(bad) = field
            .values()
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Domain(format!(
                "probability map value {bad} outside [0, 1]"
            )));
        }
        Ok(Self(field))
    }

    pub fn as_field(&self) -> &ScalarField2D {
        &self.0
    }

    pub fn into_field(self) -> ScalarField2D {
        self.0
    }
}

impl std::ops::Deref for ProbabilityMap {
    type Target = ScalarField2D;

    fn deref(&self) -> &ScalarField2D {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask2D {
    width: usize,
    depth: usize,
    values: Vec<bool>,
}

impl BinaryMask2D {
    pub fn new(width: usize, depth: usize, values: Vec<bool>) -> Result<Self> {
        check_dims_2d(width, depth, values.len())?;
        Ok(Self {
            width,
            depth,
            values,
        })
    }

    pub fn empty(width: usize, depth: usize) -> Result<Self> {
        Self::new(width, depth, vec![false; width * depth])
    }

    pub fn from_fn(width: usize, depth: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut values = Vec::with_capacity(width * depth);
        for z in 0..depth {
            for x in 0..width {
                values.push(f(x, z));
            }
        }
        Self::new(width, depth, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.width, self.depth]
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, z: usize) -> bool {
        self.values[z * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, z: usize, v: bool) {
        self.values[z * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    /// 0/1 field, for use as a BCE target or for export.
    pub fn to_field(&self) -> ScalarField2D {
        ScalarField2D {
            width: self.width,
            depth: self.depth,
            values: self.values.iter().map(|&v| f64::from(u8::from(v))).collect(),
        }
    }
}

/// Volume identifier plus y-slice index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId {
    pub volume: u32,
    pub slice: usize,
}

impl SampleId {
    pub fn new(volume: u32, slice: usize) -> Self {
        Self { volume, slice }
    }
}

fn check_dims_3d(dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Dimensions(format!(
            "volume dimensions must be positive, got {dims:?}"
        )));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Dimensions(format!(
            "spacings must be strictly positive, got {spacing:?}"
        )));
    }
    let n = dims[0] * dims[1] * dims[2];
    if n != len {
        return Err(Error::Dimensions(format!(
            "{dims:?} volume needs {n} values, got {len}"
        )));
    }
    Ok(())
}

#[inline]
fn index3(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

/// X-by-Y-by-Z scalar volume with physical spacing in micrometers.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f64; 3],
    values: Vec<f64>,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], values: Vec<f64>) -> Result<Self> {
        check_dims_3d(dims, spacing, values.len())?;
        Ok(Self {
            dims,
            spacing,
            values,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[index3(self.dims, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = index3(self.dims, x, y, z);
        self.values[i] = v;
    }

    /// The x–z plane at `y`.
    pub fn slice_xz(&self, y: usize) -> Result<ScalarField2D> {
        let [nx, ny, nz] = self.dims;
        if y >= ny {
            return Err(Error::Index { index: y, len: ny });
        }
        let mut values = Vec::with_capacity(nx * nz);
        for z in 0..nz {
            let start = index3(self.dims, 0, y, z);
            values.extend_from_slice(&self.values[start..start + nx]);
        }
        ScalarField2D::new(nx, nz, values)
    }

    /// Rebuilds a volume from its x–z slices in y order.
    pub fn from_slices(slices: &[ScalarField2D], spacing: [f64; 3]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Dimensions("no slices to stack".into()))?;
        let (nx, nz) = (first.width(), first.depth());
        let dims = [nx, slices.len(), nz];
        let mut values = vec![0.0; nx * slices.len() * nz];
        for (y, s) in slices.iter().enumerate() {
            check_shape(&[nx, nz], &s.shape())?;
            for z in 0..nz {
                let start = index3(dims, 0, y, z);
                values[start..start + nx].copy_from_slice(s.row(z));
            }
        }
        Self::new(dims, spacing, values)
    }

    /// Maximum intensity projection along y.
    pub fn mip_y(&self) -> ScalarField2D {
        let [nx, ny, nz] = self.dims;
        let mut out = vec![f64::NEG_INFINITY; nx * nz];
        for z in 0..nz {
            let row = &mut out[z * nx..(z + 1) * nx];
            for y in 0..ny {
                let start = index3(self.dims, 0, y, z);
                for (o, &v) in row.iter_mut().zip(&self.values[start..start + nx]) {
                    *o = o.max(v);
                }
            }
        }
        ScalarField2D {
            width: nx,
            depth: nz,
            values: out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask3D {
    dims: [usize; 3],
    values: Vec<bool>,
}

impl BinaryMask3D {
    pub fn new(dims: [usize; 3], values: Vec<bool>) -> Result<Self> {
        check_dims_3d(dims, [1.0; 3], values.len())?;
        Ok(Self { dims, values })
    }

    pub fn empty(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, vec![false; dims[0] * dims[1] * dims[2]])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.values[index3(self.dims, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = index3(self.dims, x, y, z);
        self.values[i] = v;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn slice_xz(&self, y: usize) -> Result<BinaryMask2D> {
        let [nx, ny, nz] = self.dims;
        if y >= ny {
            return Err(Error::Index { index: y, len: ny });
        }
        let mut values = Vec::with_capacity(nx * nz);
        for z in 0..nz {
            let start = index3(self.dims, 0, y, z);
            values.extend_from_slice(&self.values[start..start + nx]);
        }
        BinaryMask2D::new(nx, nz, values)
    }

    pub fn from_slices(slices: &[BinaryMask2D]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Dimensions("no slices to stack".into()))?;
        let (nx, nz) = (first.width(), first.depth());
        let dims = [nx, slices.len(), nz];
        let mut values = vec![false; nx * slices.len() * nz];
        for (y, s) in slices.iter().enumerate() {
            check_shape(&[nx, nz], &s.shape())?;
            for z in 0..nz {
                let start = index3(dims, 0, y, z);
                values[start..start + nx].copy_from_slice(&s.values()[z * nx..(z + 1) * nx]);
            }
        }
        Self::new(dims, values)
    }
}

// ---------------------------------------------------------------------------
// Volume file format: `<name>.json` header + `<name>.raw` little-endian payload.
// ---------------------------------------------------------------------------

pub const DTYPE_F32: &str = "f32le";
pub const DTYPE_U8: &str = "u8";
pub const ORDER_X_FASTEST: &str = "x-fastest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_um: [f64; 3],
    pub dtype: String,
    pub order: String,
}

fn sidecar_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("raw"))
}

fn write_header(path: &Path, header: &VolumeHeader) -> Result<()> {
    let mut text = serde_json::to_string(header)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_header(path: &Path, dtype: &str) -> Result<VolumeHeader> {
    let text = fs::read_to_string(path)?;
    let header: VolumeHeader = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("malformed header {}: {e}", path.display())))?;
    if header.dtype != dtype {
        return Err(Error::Format(format!(
            "unsupported dtype {:?} (expected {dtype:?})",
            header.dtype
        )));
    }
    if header.order != ORDER_X_FASTEST {
        return Err(Error::Format(format!("unsupported order {:?}", header.order)));
    }
    check_dims_3d(header.dims, header.spacing_um, header.dims.iter().product())
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(header)
}

/// Writes `vol` as `<path>.json` + `<path>.raw`. Values are stored as f32.
pub fn write_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let (json, raw) = sidecar_paths(path.as_ref());
    write_header(
        &json,
        &VolumeHeader {
            dims: vol.dims,
            spacing_um: vol.spacing,
            dtype: DTYPE_F32.into(),
            order: ORDER_X_FASTEST.into(),
        },
    )?;
    let mut bytes = Vec::with_capacity(vol.values.len() * 4);
    for &v in &vol.values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(raw, bytes)?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let (json, raw) = sidecar_paths(path.as_ref());
    let header = read_header(&json, DTYPE_F32)?;
    let bytes = fs::read(raw)?;
    let n: usize = header.dims.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Format(format!(
            "payload has {} bytes, header implies {}",
            bytes.len(),
            n * 4
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Volume3D::new(header.dims, header.spacing_um, values)
}

pub fn write_mask(mask: &BinaryMask3D, spacing: [f64; 3], path: impl AsRef<Path>) -> Result<()> {
    let (json, raw) = sidecar_paths(path.as_ref());
    write_header(
        &json,
        &VolumeHeader {
            dims: mask.dims,
            spacing_um: spacing,
            dtype: DTYPE_U8.into(),
            order: ORDER_X_FASTEST.into(),
        },
    )?;
    fs::write(raw, mask.values.iter().map(|&v| u8::from(v)).collect::<Vec<_>>())?;
    Ok(())
}

/// Reads a u8 mask; returns the mask and the spacing recorded in its header.
pub fn read_mask(path: impl AsRef<Path>) -> Result<(BinaryMask3D, [f64; 3])> {
    let (json, raw) = sidecar_paths(path.as_ref());
    let header = read_header(&json, DTYPE_U8)?;
    let bytes = fs::read(raw)?;
    let n: usize = header.dims.iter().product();
    if bytes.len() != n {
        return Err(Error::Format(format!(
            "payload has {} bytes, header implies {n}",
            bytes.len()
        )));
    }
    let values = bytes
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Format(format!("mask byte {other} is not 0 or 1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((BinaryMask3D::new(header.dims, values)?, header.spacing_um))
}

// ---------------------------------------------------------------------------
// Graymap export
// ---------------------------------------------------------------------------

fn scaled_bytes(field: &ScalarField2D, top: f64) -> Vec<u8> {
    let (lo, hi) = field.min_max();
    let range = hi - lo;
    field
        .values()
        .iter()
        .map(|&v| {
            if range > 0.0 {
                ((v - lo) / range * top).round() as u8
            } else {
                0
            }
        })
        .collect()
}

fn write_pgm_bytes(path: &Path, width: usize, depth: usize, pixels: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {depth}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Binary PGM (P5), min-max scaled to 0..=255. Image rows are z.
pub fn write_pgm(field: &ScalarField2D, path: impl AsRef<Path>) -> Result<()> {
    let pixels = scaled_bytes(field, 255.0);
    write_pgm_bytes(path.as_ref(), field.width(), field.depth(), &pixels)
}

/// Image with a semitransparent white overlay of `mask`.
pub fn write_overlay_pgm(
    image: &ScalarField2D,
    mask: &BinaryMask2D,
    path: impl AsRef<Path>,
) -> Result<()> {
    check_shape(&image.shape(), &mask.shape())?;
    let mut pixels = scaled_bytes(image, 191.0);
    for (p, &m) in pixels.iter_mut().zip(mask.values()) {
        if m {
            *p = p.saturating_div(2).saturating_add(128);
        }
    }
    write_pgm_bytes(path.as_ref(), image.width(), image.depth(), &pixels)
}

/// Parses a P5 graymap written by [`write_pgm`]; returns `(width, depth, pixels)`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::Format("not an 8-bit P5 graymap".into()));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM dimension {s:?}")))
    };
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let data = bytes[pos + 1..].to_vec();
    if data.len() != w * h {
        return Err(Error::Format(format!(
            "PGM payload has {} bytes, expected {}",
            data.len(),
            w * h
        )));
    }
    Ok((w, h, data))
}
