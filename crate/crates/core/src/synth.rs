//! Synthetic stand-in datasets: smooth random fields with structured,
//! sample-dependent occlusion (cloud blobs, swath stripes, static land).

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{
    load_field, normalization_stats, save_field, save_mask, DatasetManifest, Field, Mask,
    SamplePaths,
};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OcclusionStyle {
    Blobs,
    Swaths,
    Mixed,
}

impl std::str::FromStr for OcclusionStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "swaths" => Ok(Self::Swaths),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::Config(format!(
                "unknown occlusion style {other:?}; expected blobs, swaths or mixed"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Field correlation length in pixels.
    pub corr_len: f64,
    pub style: OcclusionStyle,
    /// Target observed fraction of the whole frame.
    pub coverage: f64,
    pub land_fraction: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            corr_len: 3.0,
            style: OcclusionStyle::Mixed,
            coverage: 0.5,
            land_fraction: 0.1,
            n_samples: 100,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 3 || self.width < 3 || self.height > 4096 || self.width > 4096 {
            return Err(Error::Config(format!(
                "grid must be between 3x3 and 4096x4096, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.corr_len >= 1.0 && self.corr_len.is_finite()) {
            return Err(Error::Config(format!("corr_len must be >= 1, got {}", self.corr_len)));
        }
        if !(self.coverage > 0.0 && self.coverage < 1.0) {
            return Err(Error::Config(format!("coverage must lie in (0,1), got {}", self.coverage)));
        }
        if !(0.0..1.0).contains(&self.land_fraction) {
            return Err(Error::Config(format!(
                "land_fraction must lie in [0,1), got {}",
                self.land_fraction
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        Ok(())
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Observed pixel count per sample.
    pub fn observed_count(&self) -> usize {
        (self.coverage * self.pixels() as f64).round() as usize
    }

    fn land_count(&self) -> usize {
        (self.land_fraction * self.pixels() as f64).round() as usize
    }

    fn blob_scale(&self) -> f64 {
        (self.height.max(self.width) as f64 / 8.0).max(1.0)
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// White noise smoothed by a separable Gaussian (valid convolution over a
/// padded noise grid, so no boundary artefacts).
fn smoothed_noise(h: usize, w: usize, sigma: f64, r: &mut rng::Rng) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let rad = k.len() / 2;
    let (ph, pw) = (h + 2 * rad, w + 2 * rad);
    let noise: Vec<f64> = (0..ph * pw).map(|_| StandardNormal.sample(r)).collect();
    let mut rows = vec![0.0; ph * w];
    for y in 0..ph {
        for x in 0..w {
            rows[y * w + x] = k.iter().enumerate().map(|(j, kv)| kv * noise[y * pw + x + j]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k.iter().enumerate().map(|(j, kv)| kv * rows[(y + j) * w + x]).sum();
        }
    }
    out
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter_mut().for_each(|x| *x -= mean);
    let sd = (v.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        v.iter_mut().for_each(|x| *x /= sd);
    }
    // Second pass removes the rounding left by the first.
    let mean = v.iter().sum::<f64>() / n;
    v.iter_mut().for_each(|x| *x -= mean);
}

/// Complete field `u_0`, standardized over all pixels.
pub fn gen_field(cfg: &SynthConfig, sample_seed: u64) -> Result<Field> {
    cfg.validate()?;
    let mut r = rng::stream(sample_seed, "synth/field");
    let mut v = smoothed_noise(cfg.height, cfg.width, cfg.corr_len, &mut r);
    standardize(&mut v);
    Field::dense(cfg.height, cfg.width, v)
}

/// The `k` candidate pixels with the lowest score (index breaks ties).
fn lowest_k(scores: &[f64], candidates: &Mask, k: usize) -> Result<Mask> {
    let mut idx = candidates.ones_indices();
    if k > idx.len() {
        return Err(Error::Config(format!(
            "need {k} observed pixels but only {} are available",
            idx.len()
        )));
    }
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut m = Mask::zeros(candidates.height(), candidates.width());
    for &i in &idx[..k] {
        m.set(i, true);
    }
    Ok(m)
}

/// Static land mask (1 = land) for the dataset seed.
pub fn gen_land(cfg: &SynthConfig) -> Result<Mask> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut r = rng::stream(cfg.seed, "synth/land");
    let score = smoothed_noise(h, w, (h.max(w) as f64 / 5.0).max(1.0), &mut r);
    let neg: Vec<f64> = score.iter().map(|v| -v).collect();
    lowest_k(&neg, &Mask::ones(h, w), cfg.land_count())
}

fn blob_scores(cfg: &SynthConfig, r: &mut rng::Rng) -> Vec<f64> {
    smoothed_noise(cfg.height, cfg.width, cfg.blob_scale(), r)
}

/// Position along a random diagonal direction, wrapped into stripes of
/// random period and phase.
fn swath_scores(cfg: &SynthConfig, r: &mut rng::Rng) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let theta = r.random_range(std::f64::consts::PI * 0.15..std::f64::consts::PI * 0.35)
        * if r.random::<bool>() { 1.0 } else { -1.0 };
    let period = r.random_range(h.max(w) as f64 / 4.0..h.max(w) as f64 / 2.0);
    let phase: f64 = r.random();
    let (c, s) = (theta.cos(), theta.sin());
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            ((x * c + y * s) / period + phase).rem_euclid(1.0)
        })
        .collect()
}

/// Observation mask for one sample; land is always 0 and the observed
/// count equals `round(coverage·H·W)` exactly.
pub fn gen_occlusion(cfg: &SynthConfig, land: &Mask, sample_seed: u64) -> Result<Mask> {
    cfg.validate()?;
    let sea = land.complement();
    let k = cfg.observed_count();
    if k > sea.count() {
        return Err(Error::Config(format!(
            "coverage {} is unachievable with {} land pixels",
            cfg.coverage,
            land.count()
        )));
    }
    let mut r = rng::stream(sample_seed, "synth/occlusion");
    match cfg.style {
        OcclusionStyle::Blobs => lowest_k(&blob_scores(cfg, &mut r), &sea, k),
        OcclusionStyle::Swaths => lowest_k(&swath_scores(cfg, &mut r), &sea, k),
        OcclusionStyle::Mixed => {
            // Blob mask at coverage √c of the sea, then swath stripes cut
            // inside it down to the target count.
            let kb = ((k as f64 * sea.count() as f64).sqrt().round() as usize).clamp(k, sea.count());
            let blobs = lowest_k(&blob_scores(cfg, &mut r), &sea, kb)?;
            lowest_k(&swath_scores(cfg, &mut r), &blobs, k)
        }
    }
}

pub fn sample_seed(dataset_seed: u64, i: usize) -> u64 {
    rng::derive_seed(dataset_seed, &format!("synth/sample/{i}"))
}

pub const FIELDS_DIR: &str = "fields";
pub const MASKS_DIR: &str = "masks";
pub const ORACLE_DIR: &str = "oracle";
pub const MANIFEST_FILE: &str = "manifest.json";

fn file_name(i: usize) -> String {
    format!("{i:04}.grd")
}

/// Writes `fields/`, `masks/`, `oracle/` and `manifest.json` under
/// `out_dir`. Stored fields hold `M ⊙ u_0`.
pub fn gen_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let land = gen_land(cfg)?;
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut stored = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let s = sample_seed(cfg.seed, i);
        let u0 = gen_field(cfg, s)?;
        let mask = gen_occlusion(cfg, &land, s)?;
        let u_obs = u0.masked(&mask)?;
        let name = file_name(i);
        save_field(&out_dir.join(ORACLE_DIR).join(&name), &u0)?;
        save_field(&out_dir.join(FIELDS_DIR).join(&name), &u_obs)?;
        save_mask(&out_dir.join(MASKS_DIR).join(&name), &mask)?;
        samples.push(SamplePaths {
            field: format!("{FIELDS_DIR}/{name}"),
            mask: format!("{MASKS_DIR}/{name}"),
        });
        stored.push(u_obs);
    }
    let (mean, std) = normalization_stats(&stored)?;
    let manifest = DatasetManifest {
        samples,
        height: cfg.height,
        width: cfg.width,
        mean,
        std,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

static ORACLE_READS: AtomicUsize = AtomicUsize::new(0);

/// Number of oracle reads made by this process.
pub fn oracle_reads() -> usize {
    ORACLE_READS.load(Ordering::SeqCst)
}

pub fn oracle_path(manifest: &DatasetManifest, i: usize) -> Result<PathBuf> {
    let field = &manifest
        .samples
        .get(i)
        .ok_or_else(|| Error::InvalidArgument(format!("sample {i} out of range")))?
        .field;
    let name = Path::new(field)
        .file_name()
        .ok_or_else(|| Error::Format(format!("bad field path {field:?}")))?;
    Ok(manifest.root.join(ORACLE_DIR).join(name))
}

/// Complete field of sample `i`. Evaluation only.
pub fn load_oracle(manifest: &DatasetManifest, i: usize) -> Result<Field> {
    ORACLE_READS.fetch_add(1, Ordering::SeqCst);
    let f = load_field(&oracle_path(manifest, i)?)?;
    if f.height() != manifest.height || f.width() != manifest.width {
        return Err(Error::Dimension(format!("oracle {i} has the wrong shape")));
    }
    Ok(f)
}

/// Lag-1 horizontal autocorrelation.
pub fn lag1_autocorr(f: &Field) -> f64 {
    let (h, w) = (f.height(), f.width());
    let v = f.values();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let mut acc = 0.0;
    let mut cnt = 0usize;
    for y in 0..h {
        for x in 0..w - 1 {
            acc += (v[y * w + x] - mean) * (v[y * w + x + 1] - mean);
            cnt += 1;
        }
    }
    acc / cnt as f64 / var
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::{land_mask, load_field, load_mask};

    fn cfg(style: OcclusionStyle) -> SynthConfig {
        SynthConfig {
            height: 64,
            width: 64,
            style,
            ..Default::default()
        }
    }

    #[test]
    fn field_is_standardized_and_deterministic() {
        let c = SynthConfig::default();
        let f = gen_field(&c, 5).unwrap();
        let n = f.len() as f64;
        let mean = f.values().iter().sum::<f64>() / n;
        let var = f.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-10);
        assert_eq!(f, gen_field(&c, 5).unwrap());
        assert_ne!(f, gen_field(&c, 6).unwrap());
    }

    #[test]
    fn correlation_grows_with_length_scale() {
        let mean_rho = |l: f64| {
            let c = SynthConfig {
                corr_len: l,
                ..Default::default()
            };
            (0..50).map(|s| lag1_autocorr(&gen_field(&c, s).unwrap())).sum::<f64>() / 50.0
        };
        let (a, b) = (mean_rho(1.0), mean_rho(4.0));
        assert!(b > a, "{a} vs {b}");
    }

    #[test]
    fn coverage_is_exact_and_land_is_never_observed() {
        for style in [OcclusionStyle::Blobs, OcclusionStyle::Swaths, OcclusionStyle::Mixed] {
            let c = cfg(style);
            let land = gen_land(&c).unwrap();
            assert_eq!(land.count(), c.land_count());
            for s in 0..5 {
                let m = gen_occlusion(&c, &land, s).unwrap();
                let cov = m.count() as f64 / m.len() as f64;
                assert!((cov - c.coverage).abs() <= 0.02, "{style:?}: {cov}");
                assert_eq!(m.intersect(&land).unwrap().count(), 0);
            }
            let a = gen_occlusion(&c, &land, 1).unwrap();
            let b = gen_occlusion(&c, &land, 2).unwrap();
            assert!(a.hamming(&b).unwrap() > 0);
        }
    }

    #[test]
    fn unachievable_coverage_is_a_config_error() {
        let c = SynthConfig {
            coverage: 0.95,
            land_fraction: 0.2,
            ..Default::default()
        };
        let land = gen_land(&c).unwrap();
        assert!(matches!(gen_occlusion(&c, &land, 0), Err(Error::Config(_))));
        assert!(SynthConfig { corr_len: 0.5, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { coverage: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn dataset_layout_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = SynthConfig {
            n_samples: 30,
            ..Default::default()
        };
        let m = gen_dataset(&c, dir.path()).unwrap();
        let loaded = DatasetManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded.samples, m.samples);
        assert_eq!((loaded.mean, loaded.std), (m.mean, m.std));
        assert_eq!(land_mask(&loaded).unwrap(), gen_land(&c).unwrap());
        for i in [0, 7, 29] {
            let raw = load_field(&dir.path().join(FIELDS_DIR).join(file_name(i))).unwrap();
            let mask = load_mask(&dir.path().join(MASKS_DIR).join(file_name(i))).unwrap();
            let oracle = load_oracle(&loaded, i).unwrap();
            for p in 0..mask.len() {
                if mask.get(p) {
                    assert_eq!(raw.values()[p], oracle.values()[p]);
                } else {
                    assert_eq!(raw.values()[p], 0.0);
                }
            }
        }
    }

    #[test]
    fn aggregate_coverage_on_100_samples() {
        let dir = tempfile::tempdir().unwrap();
        let c = SynthConfig::default();
        let m = gen_dataset(&c, dir.path()).unwrap();
        let masks = m.load_masks().unwrap();
        let obs: usize = masks.iter().map(Mask::count).sum();
        let frac = obs as f64 / (masks.len() * c.pixels()) as f64;
        assert!((frac - 0.5).abs() <= 0.03, "{frac}");
    }
}
