//! Context/query partition strategies and brute-force verifiers for the
//! strict-positivity results on small discrete mask distributions.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use num_rational::Ratio;
use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{make_partition, Field, Mask, Partition};
use crate::guided::{guided_sample_batch, make_anchor, GuidanceConfig};
use crate::mask_prior::{sample_unconditional_batch, MaskPrior};
use crate::metrics::sobel_magnitude;
use crate::rng;

// ---------------------------------------------------------------------------
// Strategies
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub enum PartitionStrategy {
    /// Guided mask `M̂`, then `ctx = M̂ ∧ M`, `qry = M ∧ ¬ctx`.
    Guided {
        prior: Arc<MaskPrior>,
        cfg: GuidanceConfig,
    },
    /// Independent Bernoulli draws for ctx and qry over observed pixels.
    PixelLevel { r_ctx: f64, r_qry: f64 },
    /// `⌊r·d²⌋` blocks of a `d × d` grid for each of ctx and qry.
    BlockWise { grid_d: usize, r_ctx: f64, r_qry: f64 },
    /// Half of the context budget from high-gradient pixels, half from
    /// low-gradient ones; every other observed pixel is a query.
    SaliencyDriven { r_ctx: f64 },
    /// Intersection with a mask drawn from a pool.
    Empirical { pool: Arc<Vec<Mask>> },
    /// Intersection with an unconditional prior sample.
    UnconditionalPrior { prior: Arc<MaskPrior>, n_steps: usize },
}

impl fmt::Debug for PartitionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Guided { cfg, .. } => f.debug_struct("Guided").field("cfg", cfg).finish(),
            Self::PixelLevel { r_ctx, r_qry } => f
                .debug_struct("PixelLevel")
                .field("r_ctx", r_ctx)
                .field("r_qry", r_qry)
                .finish(),
            Self::BlockWise { grid_d, r_ctx, r_qry } => f
                .debug_struct("BlockWise")
                .field("grid_d", grid_d)
                .field("r_ctx", r_ctx)
                .field("r_qry", r_qry)
                .finish(),
            Self::SaliencyDriven { r_ctx } => {
                f.debug_struct("SaliencyDriven").field("r_ctx", r_ctx).finish()
            }
            Self::Empirical { pool } => f
                .debug_struct("Empirical")
                .field("pool_size", &pool.len())
                .finish(),
            Self::UnconditionalPrior { n_steps, .. } => f
                .debug_struct("UnconditionalPrior")
                .field("n_steps", n_steps)
                .finish(),
        }
    }
}

pub const STRATEGY_NAMES: [&str; 6] = [
    "guided",
    "pixel-level",
    "block-wise",
    "saliency-driven",
    "empirical",
    "unconditional-prior",
];

fn check_ratio(name: &str, r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in (0,1], got {r}")))
    }
}

impl PartitionStrategy {
    pub fn pixel_level_default() -> Self {
        Self::PixelLevel {
            r_ctx: 0.3,
            r_qry: 0.3,
        }
    }

    pub fn block_wise_default() -> Self {
        Self::BlockWise {
            grid_d: 8,
            r_ctx: 0.5,
            r_qry: 0.5,
        }
    }

    pub fn saliency_default() -> Self {
        Self::SaliencyDriven { r_ctx: 0.3 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Guided { .. } => STRATEGY_NAMES[0],
            Self::PixelLevel { .. } => STRATEGY_NAMES[1],
            Self::BlockWise { .. } => STRATEGY_NAMES[2],
            Self::SaliencyDriven { .. } => STRATEGY_NAMES[3],
            Self::Empirical { .. } => STRATEGY_NAMES[4],
            Self::UnconditionalPrior { .. } => STRATEGY_NAMES[5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Guided { cfg, .. } => cfg.validate(),
            Self::PixelLevel { r_ctx, r_qry } => {
                check_ratio("r_ctx", *r_ctx)?;
                check_ratio("r_qry", *r_qry)
            }
            Self::BlockWise { grid_d, r_ctx, r_qry } => {
                if *grid_d == 0 {
                    return Err(Error::Config("grid_d must be >= 1".into()));
                }
                check_ratio("r_ctx", *r_ctx)?;
                check_ratio("r_qry", *r_qry)
            }
            Self::SaliencyDriven { r_ctx } => check_ratio("r_ctx", *r_ctx),
            Self::Empirical { pool } => {
                if pool.is_empty() {
                    Err(Error::Empty("empirical partition needs a non-empty pool".into()))
                } else {
                    Ok(())
                }
            }
            Self::UnconditionalPrior { n_steps, .. } => {
                if *n_steps == 0 {
                    Err(Error::Config("unconditional prior needs n_steps >= 1".into()))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// True when the strategy needs the observed field.
    pub fn needs_field(&self) -> bool {
        matches!(self, Self::SaliencyDriven { .. })
    }

    pub fn partition(&self, mask: &Mask, field: Option<&Field>, seed: u64) -> Result<Partition> {
        self.partitions(mask, field, &[seed]).map(|mut v| v.remove(0))
    }

    /// One partition per seed. Prior-based strategies sample their masks
    /// as a single batch.
    pub fn partitions(
        &self,
        mask: &Mask,
        field: Option<&Field>,
        seeds: &[u64],
    ) -> Result<Vec<Partition>> {
        self.validate()?;
        if mask.count() == 0 {
            return Err(Error::Empty("cannot partition an empty observed region".into()));
        }
        match self {
            Self::Guided { prior, cfg } => guided_sample_batch(prior, mask, cfg, seeds)?
                .iter()
                .map(|g| make_partition(mask, &g.mask))
                .collect(),
            Self::UnconditionalPrior { prior, n_steps } => {
                let gen_seeds: Vec<u64> = seeds
                    .iter()
                    .map(|&s| rng::derive_seed(s, "partition/unconditional"))
                    .collect();
                sample_unconditional_batch(prior, mask.height(), mask.width(), *n_steps, &gen_seeds)?
                    .iter()
                    .map(|g| make_partition(mask, g))
                    .collect()
            }
            _ => seeds
                .iter()
                .map(|&s| self.partition_simple(mask, field, s))
                .collect(),
        }
    }

    fn partition_simple(&self, mask: &Mask, field: Option<&Field>, seed: u64) -> Result<Partition> {
        match self {
            Self::PixelLevel { r_ctx, r_qry } => pixel_level(mask, *r_ctx, *r_qry, seed),
            Self::BlockWise { grid_d, r_ctx, r_qry } => {
                block_wise(mask, *grid_d, *r_ctx, *r_qry, seed)
            }
            Self::SaliencyDriven { r_ctx } => {
                let f = field.ok_or_else(|| {
                    Error::InvalidArgument("saliency-driven partition needs the observed field".into())
                })?;
                saliency_driven(mask, f, *r_ctx, seed)
            }
            Self::Empirical { pool } => {
                let mut r = rng::stream(seed, "partition/empirical");
                let pick = &pool[r.random_range(0..pool.len())];
                make_partition(mask, pick)
            }
            _ => unreachable!("prior-based strategies are batched"),
        }
    }
}

/// Anything that yields one partition per seed.
pub trait PartitionGenerator {
    fn generate(&self, mask: &Mask, field: Option<&Field>, seeds: &[u64]) -> Result<Vec<Partition>>;
}

impl PartitionGenerator for PartitionStrategy {
    fn generate(&self, mask: &Mask, field: Option<&Field>, seeds: &[u64]) -> Result<Vec<Partition>> {
        self.partitions(mask, field, seeds)
    }
}

/// Adapter for closures.
pub struct FnGenerator<F>(pub F);

impl<F> PartitionGenerator for FnGenerator<F>
where
    F: Fn(&Mask, Option<&Field>, &[u64]) -> Result<Vec<Partition>>,
{
    fn generate(&self, mask: &Mask, field: Option<&Field>, seeds: &[u64]) -> Result<Vec<Partition>> {
        (self.0)(mask, field, seeds)
    }
}

/// Bernoulli thinning of the observed mask: each observed pixel stays in
/// context with probability `rho`, the rest are queries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelDropout {
    pub rho: f64,
}

impl PartitionGenerator for PixelDropout {
    fn generate(&self, mask: &Mask, _field: Option<&Field>, seeds: &[u64]) -> Result<Vec<Partition>> {
        if mask.count() == 0 {
            return Err(Error::Empty("cannot partition an empty observed region".into()));
        }
        seeds
            .iter()
            .map(|&s| make_partition(mask, &make_anchor(mask, self.rho, s)?))
            .collect()
    }
}

pub fn pixel_level(mask: &Mask, r_ctx: f64, r_qry: f64, seed: u64) -> Result<Partition> {
    let mut r = rng::stream(seed, "partition/pixel");
    let n = mask.len();
    let mut ctx = vec![0u8; n];
    let mut qry = vec![0u8; n];
    for i in 0..n {
        if mask.get(i) {
            let u: f64 = r.random();
            ctx[i] = u8::from(u < r_ctx);
            let v: f64 = r.random();
            qry[i] = u8::from(v < r_qry);
        }
    }
    Ok(Partition {
        ctx: Mask::new(mask.height(), mask.width(), ctx)?,
        qry: Mask::new(mask.height(), mask.width(), qry)?,
        parent: mask.clone(),
        disjoint: false,
    })
}

/// Block index of each pixel for a `d × d` grid; block edges at
/// `⌊j·H/d⌋`. Blocks may be empty when `d` exceeds a side length.
fn block_of(y: usize, x: usize, h: usize, w: usize, d: usize) -> usize {
    let by = (y * d) / h;
    let bx = (x * d) / w;
    by * d + bx
}

pub fn block_wise(mask: &Mask, grid_d: usize, r_ctx: f64, r_qry: f64, seed: u64) -> Result<Partition> {
    let (h, w) = (mask.height(), mask.width());
    let k = grid_d * grid_d;
    let n_ctx = (r_ctx * k as f64).floor() as usize;
    let n_qry = (r_qry * k as f64).floor() as usize;
    let mut r = rng::stream(seed, "partition/block");
    let mut ctx_blocks = vec![false; k];
    for b in index::sample(&mut r, k, n_ctx) {
        ctx_blocks[b] = true;
    }
    let mut qry_blocks = vec![false; k];
    for b in index::sample(&mut r, k, n_qry) {
        qry_blocks[b] = true;
    }
    let mut ctx = vec![0u8; h * w];
    let mut qry = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let b = block_of(y, x, h, w, grid_d);
            if mask.get(i) {
                ctx[i] = u8::from(ctx_blocks[b]);
                qry[i] = u8::from(qry_blocks[b]);
            }
        }
    }
    Ok(Partition {
        ctx: Mask::new(h, w, ctx)?,
        qry: Mask::new(h, w, qry)?,
        parent: mask.clone(),
        disjoint: false,
    })
}

pub fn saliency_driven(mask: &Mask, field: &Field, r_ctx: f64, seed: u64) -> Result<Partition> {
    if field.height() != mask.height() || field.width() != mask.width() {
        return Err(Error::Dimension("saliency field and mask differ in shape".into()));
    }
    let observed = field.masked(mask)?;
    let g = sobel_magnitude(&observed);
    let mut order = mask.ones_indices();
    let n_obs = order.len();
    // Descending magnitude, index order for ties.
    order.sort_by(|&a, &b| g[b].total_cmp(&g[a]).then(a.cmp(&b)));
    let n_ctx = (r_ctx * n_obs as f64).floor() as usize;
    let n_half = n_ctx / 2;
    let (high, low) = order.split_at(n_obs / 2);
    let mut r = rng::stream(seed, "partition/saliency");
    let mut ctx = vec![0u8; mask.len()];
    for j in index::sample(&mut r, high.len(), n_half) {
        ctx[high[j]] = 1;
    }
    for j in index::sample(&mut r, low.len(), n_ctx - n_half) {
        ctx[low[j]] = 1;
    }
    let ctx = Mask::new(mask.height(), mask.width(), ctx)?;
    let qry = mask.minus(&ctx)?;
    Ok(Partition {
        ctx,
        qry,
        parent: mask.clone(),
        disjoint: true,
    })
}

// ---------------------------------------------------------------------------
// Discrete distributions and theorem verifiers
// ---------------------------------------------------------------------------

pub const MAX_DIM: usize = 12;
const PROB_TOL: f64 = 1e-12;

/// Probability distribution over masks of `d ≤ 12` dimensions. Masks are
/// bit sets: dimension `j + 1` (the `j`-th character of a bit string) is
/// bit `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMaskDistribution {
    pub d: usize,
    pub support: Vec<u32>,
    pub probs: Vec<f64>,
    /// Integer weights behind `probs`, when known; enables the exact
    /// rational cross-check.
    pub weights: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DistributionFile {
    d: usize,
    support: Vec<String>,
    probs: Vec<f64>,
}

pub fn parse_bits(s: &str, d: usize) -> Result<u32> {
    if s.len() != d {
        return Err(Error::Format(format!("bit string {s:?} does not have length {d}")));
    }
    let mut v = 0u32;
    for (j, c) in s.chars().enumerate() {
        match c {
            '1' => v |= 1 << j,
            '0' => {}
            _ => return Err(Error::Format(format!("bad character {c:?} in bit string"))),
        }
    }
    Ok(v)
}

pub fn format_bits(v: u32, d: usize) -> String {
    (0..d).map(|j| if v >> j & 1 == 1 { '1' } else { '0' }).collect()
}

impl DiscreteMaskDistribution {
    pub fn new(d: usize, support: Vec<u32>, probs: Vec<f64>) -> Result<Self> {
        if d == 0 || d > MAX_DIM {
            return Err(Error::InvalidArgument(format!("d must lie in 1..={MAX_DIM}, got {d}")));
        }
        if support.is_empty() || support.len() != probs.len() {
            return Err(Error::InvalidArgument(
                "support and probabilities must be non-empty and of equal length".into(),
            ));
        }
        let mut seen = support.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != support.len() {
            return Err(Error::InvalidArgument("support masks must be distinct".into()));
        }
        if support.iter().any(|&m| m >> d != 0) {
            return Err(Error::InvalidArgument(format!("support mask wider than d={d}")));
        }
        if probs.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidArgument("probabilities must be positive".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self {
            d,
            support,
            probs,
            weights: None,
        })
    }

    pub fn from_weights(d: usize, support: Vec<u32>, weights: Vec<u64>) -> Result<Self> {
        if weights.contains(&0) {
            return Err(Error::InvalidArgument("weights must be positive".into()));
        }
        let total: u64 = weights.iter().sum();
        let probs = weights.iter().map(|&w| w as f64 / total as f64).collect::<Vec<_>>();
        // Sum of rounded quotients can miss 1 by a few ulps; renormalize
        // through the validating constructor with the exact total.
        let mut dist = Self::new(d, support, probs)?;
        dist.weights = Some(weights);
        Ok(dist)
    }

    pub fn uniform(d: usize, support: Vec<u32>) -> Result<Self> {
        let n = support.len();
        Self::from_weights(d, support, vec![1; n])
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: DistributionFile = serde_json::from_str(text)?;
        let support = f
            .support
            .iter()
            .map(|s| parse_bits(s, f.d))
            .collect::<Result<Vec<_>>>()?;
        Self::new(f.d, support, f.probs)
    }

    pub fn to_json(&self) -> Result<String> {
        let f = DistributionFile {
            d: self.d,
            support: self.support.iter().map(|&m| format_bits(m, self.d)).collect(),
            probs: self.probs.clone(),
        };
        Ok(serde_json::to_string_pretty(&f)?)
    }

    fn rational_probs(&self) -> Option<Vec<Ratio<i128>>> {
        let w = self.weights.as_ref()?;
        let total: i128 = w.iter().map(|&x| x as i128).sum();
        Some(w.iter().map(|&x| Ratio::new(x as i128, total)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem1Case {
    pub ctx: String,
    /// 1-based dimension.
    pub dim: usize,
    pub p_ctx: f64,
    pub p_query: f64,
    pub assumption_holds: bool,
    /// Witness pair `(M_a, M_b)` for the coverage assumption.
    pub witness: Option<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem1Report {
    pub d: usize,
    pub n_contexts: usize,
    pub cases: Vec<Theorem1Case>,
    pub n_assumption_holds: usize,
    /// Cases where the assumption holds but the query probability is not
    /// strictly positive.
    pub violations: Vec<Theorem1Case>,
    /// Exact rational cross-check result, when it was run.
    pub rational_agrees: Option<bool>,
}

impl Theorem1Report {
    /// `P((M_qry)_dim = 1 | M_ctx = ctx)` for a 1-based dimension.
    pub fn query_prob(&self, ctx: &str, dim: usize) -> Option<f64> {
        self.cases
            .iter()
            .find(|c| c.ctx == ctx && c.dim == dim)
            .map(|c| c.p_query)
    }

    pub fn context_prob(&self, ctx: &str) -> Option<f64> {
        self.cases.iter().find(|c| c.ctx == ctx).map(|c| c.p_ctx)
    }
}

/// Enumerates all independent pairs `(M_1, M_2)` with
/// `ctx = M_1 ∧ M_2`, `qry = M_1 ∧ ¬ctx`.
pub fn verify_theorem1(dist: &DiscreteMaskDistribution) -> Result<Theorem1Report> {
    let d = dist.d;
    // ctx -> (P(ctx), P(qry_i = 1 and ctx) per i, witness per i)
    let mut table: BTreeMap<u32, (f64, Vec<f64>, Vec<Option<(u32, u32)>>)> = BTreeMap::new();
    for (ia, &a) in dist.support.iter().enumerate() {
        for (ib, &b) in dist.support.iter().enumerate() {
            let p = dist.probs[ia] * dist.probs[ib];
            let ctx = a & b;
            let entry = table
                .entry(ctx)
                .or_insert_with(|| (0.0, vec![0.0; d], vec![None; d]));
            entry.0 += p;
            for i in 0..d {
                if ctx >> i & 1 == 0 && a >> i & 1 == 1 {
                    entry.1[i] += p;
                    entry.2[i].get_or_insert((a, b));
                }
            }
        }
    }
    let mut cases = Vec::new();
    for (&ctx, (p_ctx, joint, witness)) in &table {
        for i in 0..d {
            if ctx >> i & 1 == 1 {
                continue;
            }
            cases.push(Theorem1Case {
                ctx: format_bits(ctx, d),
                dim: i + 1,
                p_ctx: *p_ctx,
                p_query: joint[i] / p_ctx,
                assumption_holds: witness[i].is_some(),
                witness: witness[i].map(|(a, b)| (format_bits(a, d), format_bits(b, d))),
            });
        }
    }
    let n_assumption_holds = cases.iter().filter(|c| c.assumption_holds).count();
    let violations = cases
        .iter()
        .filter(|c| c.assumption_holds && !(c.p_query > 0.0))
        .cloned()
        .collect();
    let rational_agrees = if d <= 4 {
        theorem1_rational(dist).map(|exact| {
            cases.iter().all(|c| {
                let key = (parse_bits(&c.ctx, d).unwrap(), c.dim - 1);
                exact.get(&key).is_some_and(|(pc, pq)| {
                    (ratio_to_f64(pc) - c.p_ctx).abs() <= PROB_TOL
                        && (ratio_to_f64(pq) - c.p_query).abs() <= PROB_TOL
                })
            })
        })
    } else {
        None
    };
    Ok(Theorem1Report {
        d,
        n_contexts: table.len(),
        cases,
        n_assumption_holds,
        violations,
        rational_agrees,
    })
}

fn ratio_to_f64(r: &Ratio<i128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

type ExactTable = BTreeMap<(u32, usize), (Ratio<i128>, Ratio<i128>)>;

/// Exact `(P(ctx), P(qry_i | ctx))` keyed by `(ctx, i)`.
fn theorem1_rational(dist: &DiscreteMaskDistribution) -> Option<ExactTable> {
    let probs = dist.rational_probs()?;
    let d = dist.d;
    let zero = Ratio::from_integer(0);
    let mut p_ctx: BTreeMap<u32, Ratio<i128>> = BTreeMap::new();
    let mut joint: BTreeMap<(u32, usize), Ratio<i128>> = BTreeMap::new();
    for (ia, &a) in dist.support.iter().enumerate() {
        for (ib, &b) in dist.support.iter().enumerate() {
            let p = probs[ia] * probs[ib];
            let ctx = a & b;
            *p_ctx.entry(ctx).or_insert(zero) += p;
            for i in 0..d {
                if ctx >> i & 1 == 0 {
                    let e = joint.entry((ctx, i)).or_insert(zero);
                    if a >> i & 1 == 1 {
                        *e += p;
                    }
                }
            }
        }
    }
    Some(
        joint
            .into_iter()
            .map(|((ctx, i), j)| {
                let pc = p_ctx[&ctx];
                ((ctx, i), (pc, j / pc))
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem2Case {
    pub dim: usize,
    pub p_query: f64,
    pub p_gen_zero: f64,
    pub assumption_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem2Report {
    pub d: usize,
    pub observed: String,
    pub k: usize,
    pub constrained_support: usize,
    pub cases: Vec<Theorem2Case>,
    pub n_assumption_holds: usize,
    pub violations: Vec<Theorem2Case>,
    /// Dimensions where `P(qry_i | C_k) ≠ P(M̂_i = 0 | C_k)` beyond 1e-12.
    pub identity_failures: Vec<usize>,
    /// Observed dimensions that every constrained mask covers.
    pub collapsed: Vec<usize>,
}

/// Restricts `dist` to `|M̂ ∧ M| = k` and checks, per observed dimension,
/// the coverage assumption, positivity and the identity
/// `P(qry_i | C_k) = P(M̂_i = 0 | C_k)`.
pub fn verify_theorem2(
    dist: &DiscreteMaskDistribution,
    observed: u32,
    k: usize,
) -> Result<Theorem2Report> {
    let d = dist.d;
    if observed >> d != 0 {
        return Err(Error::InvalidArgument(format!("observed mask wider than d={d}")));
    }
    let m_count = observed.count_ones() as usize;
    if !(0 < k && k < m_count) {
        return Err(Error::InvalidArgument(format!(
            "k must satisfy 0 < k < |M| = {m_count}, got {k}"
        )));
    }
    let constrained: Vec<(u32, f64)> = dist
        .support
        .iter()
        .zip(&dist.probs)
        .filter(|(&g, _)| (g & observed).count_ones() as usize == k)
        .map(|(&g, &p)| (g, p))
        .collect();
    if constrained.is_empty() {
        return Err(Error::Empty(format!(
            "no support mask meets the intersection constraint k={k}"
        )));
    }
    let z: f64 = constrained.iter().map(|(_, p)| p).sum();
    let mut cases = Vec::new();
    for i in 0..d {
        if observed >> i & 1 == 0 {
            continue;
        }
        let mut p_query = 0.0;
        let mut p_zero = 0.0;
        let mut assumption = false;
        for &(g, p) in &constrained {
            let ctx = g & observed;
            let qry = observed & !ctx;
            if qry >> i & 1 == 1 {
                p_query += p / z;
            }
            if g >> i & 1 == 0 {
                p_zero += p / z;
                assumption = true;
            }
        }
        cases.push(Theorem2Case {
            dim: i + 1,
            p_query,
            p_gen_zero: p_zero,
            assumption_holds: assumption,
        });
    }
    let n_assumption_holds = cases.iter().filter(|c| c.assumption_holds).count();
    let violations = cases
        .iter()
        .filter(|c| c.assumption_holds && !(c.p_query > 0.0))
        .cloned()
        .collect();
    let identity_failures = cases
        .iter()
        .filter(|c| (c.p_query - c.p_gen_zero).abs() > PROB_TOL)
        .map(|c| c.dim)
        .collect();
    let collapsed = cases
        .iter()
        .filter(|c| !c.assumption_holds)
        .map(|c| c.dim)
        .collect();
    Ok(Theorem2Report {
        d,
        observed: format_bits(observed, d),
        k,
        constrained_support: constrained.len(),
        cases,
        n_assumption_holds,
        violations,
        identity_failures,
        collapsed,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub trials: usize,
    pub theorem1_cases: usize,
    pub theorem1_assumption_holds: usize,
    pub theorem1_violations: usize,
    pub theorem2_cases: usize,
    pub theorem2_assumption_holds: usize,
    pub theorem2_violations: usize,
    pub theorem2_identity_failures: usize,
    pub rational_crosschecks: usize,
    pub rational_mismatches: usize,
}

impl CampaignSummary {
    pub fn violations(&self) -> usize {
        self.theorem1_violations
            + self.theorem2_violations
            + self.theorem2_identity_failures
            + self.rational_mismatches
    }
}

/// Random supports with integer weights; every trial runs the first
/// verifier once and the second for every admissible `k` of one random
/// observed mask.
pub fn randomized_theorem_campaign(n_trials: usize, d_max: usize, seed: u64) -> Result<CampaignSummary> {
    if d_max == 0 || d_max > MAX_DIM {
        return Err(Error::InvalidArgument(format!(
            "d_max must lie in 1..={MAX_DIM}, got {d_max}"
        )));
    }
    let mut r = rng::stream(seed, "partitioning/campaign");
    let mut s = CampaignSummary::default();
    for _ in 0..n_trials {
        s.trials += 1;
        let d = r.random_range(1..=d_max);
        let full = 1usize << d;
        let size = r.random_range(1..=full.min(16));
        let support: Vec<u32> = index::sample(&mut r, full, size)
            .into_iter()
            .map(|v| v as u32)
            .collect();
        let weights: Vec<u64> = (0..size).map(|_| r.random_range(1..=9)).collect();
        let dist = DiscreteMaskDistribution::from_weights(d, support, weights)?;
        let t1 = verify_theorem1(&dist)?;
        s.theorem1_cases += t1.cases.len();
        s.theorem1_assumption_holds += t1.n_assumption_holds;
        s.theorem1_violations += t1.violations.len();
        if let Some(ok) = t1.rational_agrees {
            s.rational_crosschecks += 1;
            s.rational_mismatches += usize::from(!ok);
        }
        let observed = r.random_range(1..full) as u32;
        for k in 1..observed.count_ones() as usize {
            match verify_theorem2(&dist, observed, k) {
                Ok(t2) => {
                    s.theorem2_cases += t2.cases.len();
                    s.theorem2_assumption_holds += t2.n_assumption_holds;
                    s.theorem2_violations += t2.violations.len();
                    s.theorem2_identity_failures += t2.identity_failures.len();
                }
                Err(Error::Empty(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(s: &str) -> u32 {
        parse_bits(s, s.len()).unwrap()
    }

    fn random_mask(h: usize, w: usize, p: f64, seed: u64) -> Mask {
        let mut r = rng::seeded(seed);
        let b = (0..h * w).map(|_| u8::from(r.random::<f64>() < p)).collect();
        Mask::new(h, w, b).unwrap()
    }

    #[test]
    fn pixel_dropout_splits_exactly() {
        let m = random_mask(8, 8, 0.5, 3);
        let parts = PixelDropout { rho: 0.8 }.generate(&m, None, &[1, 2, 3]).unwrap();
        for p in &parts {
            p.check().unwrap();
            assert!(p.disjoint);
        }
        assert_ne!(parts[0], parts[1]);
    }

    #[test]
    fn bit_string_convention() {
        assert_eq!(bits("10"), 1);
        assert_eq!(bits("01"), 2);
        assert_eq!(format_bits(0b110, 3), "011");
        assert!(parse_bits("1x", 2).is_err());
        assert!(parse_bits("1", 2).is_err());
    }

    #[test]
    fn theorem1_hand_example() {
        let dist = DiscreteMaskDistribution::uniform(2, vec![bits("10"), bits("01"), bits("11")])
            .unwrap();
        let rep = verify_theorem1(&dist).unwrap();
        assert!((rep.context_prob("00").unwrap() - 2.0 / 9.0).abs() < 1e-15);
        assert_eq!(rep.query_prob("00", 1).unwrap(), 0.5);
        assert!(rep.violations.is_empty());
        assert_eq!(rep.rational_agrees, Some(true));
    }

    #[test]
    fn theorem1_exact_rational_values() {
        let dist = DiscreteMaskDistribution::uniform(2, vec![bits("10"), bits("01"), bits("11")])
            .unwrap();
        let exact = theorem1_rational(&dist).unwrap();
        let (pc, pq) = exact[&(0, 0)];
        assert_eq!(pc, Ratio::new(2, 9));
        assert_eq!(pq, Ratio::new(1, 2));
    }

    #[test]
    fn theorem1_degenerate_all_ones() {
        let dist = DiscreteMaskDistribution::uniform(3, vec![bits("111")]).unwrap();
        let rep = verify_theorem1(&dist).unwrap();
        assert!(rep.cases.is_empty());
        assert!(rep.violations.is_empty());
    }

    #[test]
    fn theorem1_assumption_failure_reported() {
        let dist = DiscreteMaskDistribution::uniform(3, vec![bits("100"), bits("110")]).unwrap();
        let rep = verify_theorem1(&dist).unwrap();
        let dim3: Vec<_> = rep.cases.iter().filter(|c| c.dim == 3).collect();
        assert!(!dim3.is_empty());
        assert!(dim3.iter().all(|c| !c.assumption_holds && c.p_query == 0.0));
        assert!(rep.violations.is_empty());
    }

    #[test]
    fn theorem2_examples() {
        let dist = DiscreteMaskDistribution::uniform(2, vec![bits("10"), bits("01")]).unwrap();
        let rep = verify_theorem2(&dist, bits("11"), 1).unwrap();
        assert_eq!(rep.cases[0].p_query, 0.5);
        assert!(rep.violations.is_empty() && rep.identity_failures.is_empty());

        let single = DiscreteMaskDistribution::uniform(3, vec![bits("110")]).unwrap();
        let rep = verify_theorem2(&single, bits("111"), 2).unwrap();
        assert_eq!(rep.collapsed, vec![1, 2]);
        assert!(rep.violations.is_empty());

        assert!(matches!(
            verify_theorem2(&single, bits("111"), 1),
            Err(Error::Empty(_))
        ));
        assert!(verify_theorem2(&single, bits("111"), 3).is_err());
    }

    #[test]
    fn distribution_validation_and_json() {
        assert!(DiscreteMaskDistribution::new(2, vec![1, 1], vec![0.5, 0.5]).is_err());
        assert!(DiscreteMaskDistribution::new(2, vec![1, 2], vec![0.5, 0.4]).is_err());
        assert!(DiscreteMaskDistribution::new(13, vec![1], vec![1.0]).is_err());
        let text = r#"{"d": 2, "support": ["10", "01", "11"], "probs": [0.25, 0.25, 0.5]}"#;
        let dist = DiscreteMaskDistribution::from_json(text).unwrap();
        assert_eq!(dist.support, vec![1, 2, 3]);
        let again = DiscreteMaskDistribution::from_json(&dist.to_json().unwrap()).unwrap();
        assert_eq!(again, dist);
        assert!(DiscreteMaskDistribution::from_json(r#"{"d":1,"support":["1"],"probs":[1.0],"x":1}"#).is_err());
    }

    #[test]
    fn campaign_is_reproducible_and_clean() {
        assert_eq!(randomized_theorem_campaign(0, 6, 1).unwrap(), CampaignSummary::default());
        let a = randomized_theorem_campaign(30, 6, 7).unwrap();
        let b = randomized_theorem_campaign(30, 6, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.violations(), 0);
        assert!(a.theorem1_assumption_holds > 0 && a.theorem2_assumption_holds > 0);
    }

    #[test]
    fn pixel_level_certain_draws() {
        let m = random_mask(6, 6, 0.5, 1);
        let p = pixel_level(&m, 1.0, 1.0, 3).unwrap();
        assert_eq!(p.ctx, m);
        assert_eq!(p.qry, m);
        assert!(!p.disjoint);
        p.check().unwrap();
    }

    #[test]
    fn block_wise_single_block() {
        let m = random_mask(7, 5, 0.5, 2);
        let p = block_wise(&m, 1, 1.0, 1.0, 4).unwrap();
        assert_eq!(p.ctx, m);
        let p = block_wise(&m, 4, 0.5, 0.5, 4).unwrap();
        p.check().unwrap();
    }

    #[test]
    fn empirical_with_complement_pool() {
        let m = random_mask(5, 5, 0.5, 3);
        let s = PartitionStrategy::Empirical {
            pool: Arc::new(vec![m.complement()]),
        };
        let p = s.partition(&m, None, 9).unwrap();
        assert_eq!(p.ctx.count(), 0);
        assert_eq!(p.qry, m);
        p.check().unwrap();
    }

    #[test]
    fn saliency_splits_observed_region() {
        let (h, w) = (8, 8);
        let m = random_mask(h, w, 0.7, 4);
        let vals: Vec<f64> = (0..h * w).map(|i| ((i % w) as f64).powi(2) * 0.1).collect();
        let f = Field::dense(h, w, vals).unwrap();
        let p = saliency_driven(&m, &f, 0.3, 5).unwrap();
        p.check().unwrap();
        assert_eq!(p.ctx.count(), (0.3 * m.count() as f64).floor() as usize);
        let s = PartitionStrategy::saliency_default();
        assert!(s.partition(&m, None, 1).is_err());
    }

    #[test]
    fn empty_observed_region_rejected() {
        let s = PartitionStrategy::pixel_level_default();
        assert!(matches!(
            s.partition(&Mask::zeros(3, 3), None, 1),
            Err(Error::Empty(_))
        ));
    }
}
