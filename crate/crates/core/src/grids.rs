//! Grid types (masks, fields, partitions), their algebra, the GRD binary
//! format and dataset manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported side length.
pub const MAX_SIDE: usize = 4096;

pub const GRD_MAGIC: &[u8; 4] = b"OAMP";
pub const GRD_VERSION: u16 = 1;
const GRD_HEADER_LEN: usize = 4 + 2 + 1 + 4 + 4;

fn check_shape(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Dimension(format!(
            "grid sides must be positive, got {height}x{width}"
        )));
    }
    if height > MAX_SIDE || width > MAX_SIDE {
        return Err(Error::Dimension(format!(
            "grid sides limited to {MAX_SIDE}, got {height}x{width}"
        )));
    }
    Ok(())
}

/// Binary observation mask, row-major, 1 = valid observation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        check_shape(height, width)?;
        if bits.len() != height * width {
            return Err(Error::Dimension(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidArgument(format!(
                "mask bits must be 0 or 1, found {b}"
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn from_bools(height: usize, width: usize, bools: &[bool]) -> Result<Self> {
        Self::new(height, width, bools.iter().map(|&b| b as u8).collect())
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0)
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::filled(height, width, 1)
    }

    fn filled(height: usize, width: usize, v: u8) -> Self {
        assert!(height > 0 && width > 0 && height <= MAX_SIDE && width <= MAX_SIDE);
        Self {
            height,
            width,
            bits: vec![v; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i] == 1
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn set(&mut self, i: usize, v: bool) {
        self.bits[i] = v as u8;
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn ensure_same_shape(&self, other: &Mask) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Dimension(format!(
                "mask shapes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Mask, f: impl Fn(u8, u8) -> u8) -> Result<Mask> {
        self.ensure_same_shape(other)?;
        Ok(Mask {
            height: self.height,
            width: self.width,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Elementwise AND.
    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, |a, b| a & b)
    }

    /// Elementwise OR.
    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, |a, b| a | b)
    }

    /// `self ∧ ¬other`.
    pub fn minus(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, |a, b| a & (1 - b))
    }

    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|&b| 1 - b).collect(),
        }
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.same_shape(other) && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a <= b)
    }

    pub fn hamming(&self, other: &Mask) -> Result<usize> {
        self.ensure_same_shape(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count())
    }

    /// Indices of set pixels in row-major order.
    pub fn ones_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| (b == 1).then_some(i))
            .collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}

/// Elementwise AND of two masks.
pub fn intersect(a: &Mask, b: &Mask) -> Result<Mask> {
    a.intersect(b)
}

/// Real-valued grid paired with a validity mask. Values at invalid pixels
/// are always stored as 0.0.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    values: Vec<f64>,
    validity: Mask,
}

impl Field {
    /// Builds a field, zeroing values outside `validity`. Valid values must
    /// be finite.
    pub fn new(mut values: Vec<f64>, validity: Mask) -> Result<Self> {
        if values.len() != validity.len() {
            return Err(Error::Dimension(format!(
                "field has {} values but mask has {} pixels",
                values.len(),
                validity.len()
            )));
        }
        for (i, v) in values.iter_mut().enumerate() {
            if validity.get(i) {
                if !v.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "non-finite value {v} at valid pixel {i}"
                    )));
                }
            } else {
                *v = 0.0;
            }
        }
        Ok(Self { values, validity })
    }

    /// A field that is valid everywhere.
    pub fn dense(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_shape(height, width)?;
        Self::new(values, Mask::ones(height, width))
    }

    pub fn height(&self) -> usize {
        self.validity.height()
    }

    pub fn width(&self) -> usize {
        self.validity.width()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn validity(&self) -> &Mask {
        &self.validity
    }

    /// Restricts validity to `mask ∧ validity`, zeroing the rest.
    pub fn masked(&self, mask: &Mask) -> Result<Field> {
        let validity = self.validity.intersect(mask)?;
        Field::new(self.values.clone(), validity)
    }

    /// Mean of valid values, or `None` if nothing is valid.
    pub fn valid_mean(&self) -> Option<f64> {
        let n = self.validity.count();
        if n == 0 {
            return None;
        }
        let s: f64 = self
            .values
            .iter()
            .zip(self.validity.bits())
            .filter(|(_, &b)| b == 1)
            .map(|(v, _)| v)
            .sum();
        Some(s / n as f64)
    }
}

/// A context/query split of an observed mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub ctx: Mask,
    pub qry: Mask,
    pub parent: Mask,
    /// True when the strategy guarantees `ctx ∧ qry = 0` and
    /// `ctx ∨ qry = parent`.
    pub disjoint: bool,
}

impl Partition {
    /// Checks the structural invariants: both parts inside the parent, and
    /// for disjoint partitions an exact split.
    pub fn check(&self) -> Result<()> {
        if !self.ctx.is_subset_of(&self.parent) || !self.qry.is_subset_of(&self.parent) {
            return Err(Error::InvalidArgument(
                "partition parts must lie inside the parent mask".into(),
            ));
        }
        if self.disjoint {
            let overlap = self.ctx.intersect(&self.qry)?.count();
            let cover = self.ctx.union(&self.qry)?;
            if overlap != 0 || cover != self.parent {
                return Err(Error::InvalidArgument(
                    "disjoint partition must split the parent exactly".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Intersection partition: `ctx = generated ∧ observed`,
/// `qry = observed ∧ ¬ctx`.
pub fn make_partition(observed: &Mask, generated: &Mask) -> Result<Partition> {
    let ctx = generated.intersect(observed)?;
    let qry = observed.minus(&ctx)?;
    Ok(Partition {
        ctx,
        qry,
        parent: observed.clone(),
        disjoint: true,
    })
}

// ---------------------------------------------------------------------------
// GRD format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum GrdDtype {
    U8Mask = 0,
    F64 = 1,
}

/// Contents of a GRD file.
#[derive(Debug, Clone, PartialEq)]
pub enum Grid {
    Mask(Mask),
    Values {
        height: usize,
        width: usize,
        values: Vec<f64>,
    },
}

fn encode_header(buf: &mut Vec<u8>, dtype: GrdDtype, height: usize, width: usize) {
    buf.extend_from_slice(GRD_MAGIC);
    buf.extend_from_slice(&GRD_VERSION.to_le_bytes());
    buf.push(dtype as u8);
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    buf.extend_from_slice(&(width as u32).to_le_bytes());
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let mut buf = Vec::with_capacity(GRD_HEADER_LEN + mask.len());
    encode_header(&mut buf, GrdDtype::U8Mask, mask.height(), mask.width());
    buf.extend_from_slice(mask.bits());
    buf
}

pub fn encode_values(height: usize, width: usize, values: &[f64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(GRD_HEADER_LEN + 8 * values.len());
    encode_header(&mut buf, GrdDtype::F64, height, width);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_grid(bytes: &[u8]) -> Result<Grid> {
    if bytes.len() < GRD_HEADER_LEN {
        return Err(Error::Format(format!(
            "truncated header: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..4] != GRD_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != GRD_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = bytes[6];
    let height = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[11..15].try_into().unwrap()) as usize;
    check_shape(height, width).map_err(|e| Error::Format(e.to_string()))?;
    let n = height * width;
    let payload = &bytes[GRD_HEADER_LEN..];
    match dtype {
        0 => {
            if payload.len() != n {
                return Err(Error::Format(format!(
                    "mask payload: expected {n} bytes, got {}",
                    payload.len()
                )));
            }
            Ok(Grid::Mask(
                Mask::new(height, width, payload.to_vec())
                    .map_err(|e| Error::Format(e.to_string()))?,
            ))
        }
        1 => {
            if payload.len() != 8 * n {
                return Err(Error::Format(format!(
                    "f64 payload: expected {} bytes, got {}",
                    8 * n,
                    payload.len()
                )));
            }
            let values = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Grid::Values {
                height,
                width,
                values,
            })
        }
        other => Err(Error::Format(format!("unknown dtype {other}"))),
    }
}

/// Writes `bytes` to `path` via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_atomic(path, &encode_mask(mask))
}

pub fn save_values(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::Dimension(format!(
            "{} values for a {height}x{width} grid",
            values.len()
        )));
    }
    write_atomic(path, &encode_values(height, width, values))
}

/// Saves the field's values (zeros at invalid pixels) as an f64 grid.
pub fn save_field(path: &Path, field: &Field) -> Result<()> {
    save_values(path, field.height(), field.width(), field.values())
}

pub fn load_grid(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes)
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    match load_grid(path)? {
        Grid::Mask(m) => Ok(m),
        Grid::Values { .. } => Err(Error::Format(format!(
            "{}: expected u8 mask, found f64 grid",
            path.display()
        ))),
    }
}

/// Loads an f64 grid as a field valid everywhere.
pub fn load_field(path: &Path) -> Result<Field> {
    match load_grid(path)? {
        Grid::Values {
            height,
            width,
            values,
        } => Field::dense(height, width, values),
        Grid::Mask(_) => Err(Error::Format(format!(
            "{}: expected f64 grid, found u8 mask",
            path.display()
        ))),
    }
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplePaths {
    pub field: String,
    pub mask: String,
}

/// Dataset listing on disk. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub samples: Vec<SamplePaths>,
    pub height: usize,
    pub width: usize,
    pub mean: f64,
    pub std: f64,
    #[serde(skip)]
    pub root: PathBuf,
}

/// One loaded training sample, already standardized.
#[derive(Debug, Clone)]
pub struct Sample {
    pub field: Field,
    pub mask: Mask,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        check_shape(m.height, m.width)?;
        if !(m.std.is_finite() && m.std > 0.0 && m.mean.is_finite()) {
            return Err(Error::Format(format!(
                "manifest normalization invalid: mean={} std={}",
                m.mean, m.std
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(path, text.as_bytes())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_mask(&self, i: usize) -> Result<Mask> {
        let m = load_mask(&self.resolve(&self.samples[i].mask))?;
        self.check_dims(m.height(), m.width())?;
        Ok(m)
    }

    /// Raw (unnormalized) stored field restricted to its mask.
    pub fn load_raw(&self, i: usize) -> Result<Sample> {
        let mask = self.load_mask(i)?;
        let f = load_field(&self.resolve(&self.samples[i].field))?;
        self.check_dims(f.height(), f.width())?;
        let field = Field::new(f.values().to_vec(), mask.clone())?;
        Ok(Sample { field, mask })
    }

    /// Sample standardized with the manifest statistics at valid pixels.
    pub fn load_sample(&self, i: usize) -> Result<Sample> {
        let raw = self.load_raw(i)?;
        Ok(Sample {
            field: self.normalize(&raw.field)?,
            mask: raw.mask,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }

    pub fn load_masks(&self) -> Result<Vec<Mask>> {
        (0..self.len()).map(|i| self.load_mask(i)).collect()
    }

    pub fn normalize(&self, f: &Field) -> Result<Field> {
        let values = f
            .values()
            .iter()
            .map(|v| (v - self.mean) / self.std)
            .collect();
        Field::new(values, f.validity().clone())
    }

    pub fn denormalize(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| v * self.std + self.mean).collect()
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        if h != self.height || w != self.width {
            return Err(Error::Dimension(format!(
                "sample is {h}x{w}, manifest declares {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Mean and standard deviation over all valid pixels of raw samples.
pub fn normalization_stats<'a>(fields: impl IntoIterator<Item = &'a Field>) -> Result<(f64, f64)> {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for f in fields {
        for (v, &b) in f.values().iter().zip(f.validity().bits()) {
            if b == 1 {
                n += 1;
                sum += v;
                sum_sq += v * v;
            }
        }
    }
    if n == 0 {
        return Err(Error::Empty("no valid pixels for normalization".into()));
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    Ok((mean, std))
}

/// Never-observed indicator: bit 1 exactly where no mask observes the
/// pixel.
pub fn land_mask_of<'a>(masks: impl IntoIterator<Item = &'a Mask>) -> Result<Mask> {
    let mut iter = masks.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::Empty("land mask needs at least one sample".into()))?;
    let mut seen = first.clone();
    for m in iter {
        seen = seen.union(m)?;
    }
    Ok(seen.complement())
}

pub fn land_mask(manifest: &DatasetManifest) -> Result<Mask> {
    if manifest.is_empty() {
        return Err(Error::Empty("manifest has no samples".into()));
    }
    let masks = manifest.load_masks()?;
    land_mask_of(&masks)
}
