//! Evaluation metrics, the mask-overlay evaluation protocol and the
//! ensemble query-probability estimator.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::grids::{save_values, write_atomic, Field, Mask};
use crate::partitioning::PartitionGenerator;
use crate::rng;

/// Mean squared difference over `region`.
pub fn masked_mse(pred: &Field, truth: &Field, region: &Mask) -> Result<f64> {
    if pred.len() != truth.len() || pred.len() != region.len() {
        return Err(Error::Dimension(format!(
            "masked_mse shapes differ: pred {}, truth {}, region {}",
            pred.len(),
            truth.len(),
            region.len()
        )));
    }
    let n = region.count();
    if n == 0 {
        return Err(Error::Empty("masked_mse over an empty region".into()));
    }
    let sum: f64 = region
        .ones_indices()
        .into_iter()
        .map(|i| (pred.values()[i] - truth.values()[i]).powi(2))
        .sum();
    Ok(sum / n as f64)
}

/// `10·log₁₀(peak²/mse)`; `mse = 0` gives `+∞`.
pub fn psnr(mse: f64, peak: f64) -> Result<f64> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::InvalidArgument(format!("peak must be positive, got {peak}")));
    }
    if !(mse >= 0.0) || mse.is_infinite() {
        return Err(Error::InvalidArgument(format!("mse must be finite and >= 0, got {mse}")));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Dynamic range `max − min` of a set of values.
pub fn peak_of(values: impl IntoIterator<Item = f64>) -> Result<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return Err(Error::Empty("peak of an empty set".into()));
    }
    Ok(hi - lo)
}

/// Sobel gradient magnitude with replicate padding. Invalid pixels are
/// first filled with the mean of the valid ones (0 if none are valid).
pub fn sobel_magnitude(f: &Field) -> Vec<f64> {
    let (h, w) = (f.height(), f.width());
    let fill = f.valid_mean().unwrap_or(0.0);
    let vals: Vec<f64> = f
        .values()
        .iter()
        .zip(f.validity().bits())
        .map(|(&v, &ok)| if ok == 1 { v } else { fill })
        .collect();
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        vals[yy * w + xx]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

fn touches(mask: &Mask, y: usize, x: usize) -> bool {
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    for dy in -1..=1isize {
        for dx in -1..=1isize {
            if dy == 0 && dx == 0 {
                continue;
            }
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            if yy >= 0 && yy < h && xx >= 0 && xx < w && mask.at(yy as usize, xx as usize) {
                return true;
            }
        }
    }
    false
}

/// Boundary bands: generated pixels 8-adjacent to context, and context
/// pixels 8-adjacent to generated ones.
pub fn boundary_bands(ctx: &Mask, gen_region: &Mask) -> Result<(Mask, Mask)> {
    if !ctx.same_shape(gen_region) {
        return Err(Error::Dimension("cbgd masks differ in shape".into()));
    }
    let (h, w) = (ctx.height(), ctx.width());
    let mut b_gen = Mask::zeros(h, w);
    let mut b_ctx = Mask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if gen_region.get(i) && touches(ctx, y, x) {
                b_gen.set(i, true);
            }
            if ctx.get(i) && touches(gen_region, y, x) {
                b_ctx.set(i, true);
            }
        }
    }
    Ok((b_gen, b_ctx))
}

/// Cross-boundary gradient discrepancy: mean Sobel magnitude on the
/// generated side of the interface over the mean on the context side.
pub fn cbgd(recon: &Field, ctx: &Mask, gen_region: &Mask) -> Result<f64> {
    if recon.len() != ctx.len() {
        return Err(Error::Dimension("cbgd field and masks differ in shape".into()));
    }
    let (b_gen, b_ctx) = boundary_bands(ctx, gen_region)?;
    if b_gen.count() == 0 || b_ctx.count() == 0 {
        return Err(Error::UndefinedMetric("cbgd boundary band is empty".into()));
    }
    let g = sobel_magnitude(&Field::dense(recon.height(), recon.width(), recon.values().to_vec())?);
    let mean = |m: &Mask| m.ones_indices().iter().map(|&i| g[i]).sum::<f64>() / m.count() as f64;
    let num = mean(&b_gen);
    let den = mean(&b_ctx);
    if den < 1e-8 {
        return Err(Error::UndefinedMetric(format!(
            "cbgd denominator {den} below 1e-8"
        )));
    }
    Ok(num / den)
}

/// Overlay evaluation case.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCase {
    pub m_eval: Mask,
    pub m_tilde: Mask,
    pub m_input: Mask,
    pub eval_region: Mask,
}

impl EvalCase {
    pub fn from_overlay(m_eval: &Mask, m_tilde: &Mask) -> Result<Self> {
        let m_input = m_tilde.intersect(m_eval)?;
        let eval_region = m_eval.minus(&m_input)?;
        Ok(Self {
            m_eval: m_eval.clone(),
            m_tilde: m_tilde.clone(),
            m_input,
            eval_region,
        })
    }

    fn usable(&self) -> bool {
        self.m_input.count() > 0 && self.eval_region.count() > 0
    }
}

pub const MAX_OVERLAY_DRAWS: usize = 100;

/// Draws overlays from `pool` until both the input and the evaluation
/// region are non-empty.
pub fn build_eval_case(m_eval: &Mask, pool: &[Mask], seed: u64) -> Result<EvalCase> {
    if pool.is_empty() {
        return Err(Error::Empty("overlay pool is empty".into()));
    }
    let mut r = rng::stream(seed, "metrics/overlay");
    for _ in 0..MAX_OVERLAY_DRAWS {
        let pick = &pool[r.random_range(0..pool.len())];
        let case = EvalCase::from_overlay(m_eval, pick)?;
        if case.usable() {
            return Ok(case);
        }
    }
    Err(Error::Empty(format!(
        "no usable overlay after {MAX_OVERLAY_DRAWS} draws"
    )))
}

/// Empirical per-pixel query frequency over an ensemble of partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryProbGrid {
    pub height: usize,
    pub width: usize,
    /// `counts[i] / n_ens` on valid pixels, NaN elsewhere.
    pub freq: Vec<f64>,
    pub counts: Vec<u32>,
    pub n_ens: usize,
    pub valid: Mask,
}

impl QueryProbGrid {
    /// Minimum frequency over valid pixels.
    pub fn min_valid(&self) -> Option<f64> {
        self.valid
            .ones_indices()
            .iter()
            .map(|&i| self.freq[i])
            .reduce(f64::min)
    }

    /// Number of valid pixels never queried.
    pub fn zero_query_pixels(&self) -> usize {
        self.valid
            .ones_indices()
            .iter()
            .filter(|&&i| self.counts[i] == 0)
            .count()
    }
}

/// Seed of ensemble member `j`.
pub fn member_seed(seed: u64, j: usize) -> u64 {
    rng::derive_seed(seed, &format!("ensemble/{j}"))
}

pub fn query_prob_heatmap(
    mask: &Mask,
    generator: &dyn PartitionGenerator,
    field: Option<&Field>,
    n_ens: usize,
    seed: u64,
) -> Result<QueryProbGrid> {
    if n_ens == 0 {
        return Err(Error::InvalidArgument("n_ens must be >= 1".into()));
    }
    let seeds: Vec<u64> = (0..n_ens).map(|j| member_seed(seed, j)).collect();
    let parts = generator.generate(mask, field, &seeds)?;
    let mut counts = vec![0u32; mask.len()];
    for p in &parts {
        for i in p.qry.ones_indices() {
            counts[i] += 1;
        }
    }
    let freq = counts
        .iter()
        .zip(mask.bits())
        .map(|(&c, &v)| if v == 1 { c as f64 / n_ens as f64 } else { f64::NAN })
        .collect();
    Ok(QueryProbGrid {
        height: mask.height(),
        width: mask.width(),
        freq,
        counts,
        n_ens,
        valid: mask.clone(),
    })
}

/// Plain-text PGM (P2), values in `[0,1]` quantized to 8 bits. Non-finite
/// entries are written as 0.
pub fn encode_pgm(height: usize, width: usize, values: &[f64]) -> Result<String> {
    if values.len() != height * width {
        return Err(Error::Dimension("pgm values do not match shape".into()));
    }
    let mut s = format!("P2\n{width} {height}\n255\n");
    for y in 0..height {
        let row: Vec<String> = (0..width)
            .map(|x| {
                let v = values[y * width + x];
                let q = if v.is_finite() { (v.clamp(0.0, 1.0) * 255.0).round() as u8 } else { 0 };
                q.to_string()
            })
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    Ok(s)
}

pub fn save_pgm(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    write_atomic(path, encode_pgm(height, width, values)?.as_bytes())
}

/// Writes `<stem>.pgm` and `<stem>.grd` for a heatmap.
pub fn save_heatmap(dir: &Path, stem: &str, grid: &QueryProbGrid) -> Result<()> {
    save_pgm(&dir.join(format!("{stem}.pgm")), grid.height, grid.width, &grid.freq)?;
    save_values(&dir.join(format!("{stem}.grd")), grid.height, grid.width, &grid.freq)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub sample_id: String,
    pub mse: f64,
    pub psnr: f64,
    /// `None` when the boundary metric is undefined for the sample.
    pub cbgd: Option<f64>,
    pub n_eval_pixels: usize,
}

fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

pub fn encode_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("sample_id,mse,psnr,cbgd,n_eval_pixels\n");
    for r in rows {
        let cbgd = r.cbgd.map(fmt_num).unwrap_or_else(|| "undefined".into());
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.sample_id,
            fmt_num(r.mse),
            fmt_num(r.psnr),
            cbgd,
            r.n_eval_pixels
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct MetricSummary {
    pub n: usize,
    pub mean_mse: f64,
    pub mean_psnr: f64,
    /// Mean over samples where the metric is defined.
    pub mean_cbgd: Option<f64>,
}

/// Unweighted means over the evaluation set.
pub fn summarize(rows: &[MetricRow]) -> Result<MetricSummary> {
    if rows.is_empty() {
        return Err(Error::Empty("no metric rows to summarize".into()));
    }
    let n = rows.len() as f64;
    let defined: Vec<f64> = rows.iter().filter_map(|r| r.cbgd).collect();
    Ok(MetricSummary {
        n: rows.len(),
        mean_mse: rows.iter().map(|r| r.mse).sum::<f64>() / n,
        mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_cbgd: (!defined.is_empty())
            .then(|| defined.iter().sum::<f64>() / defined.len() as f64),
    })
}
