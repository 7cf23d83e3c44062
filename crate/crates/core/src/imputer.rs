//! Context/query training of the reconstruction network and the five
//! inference samplers.
//!
//! The network sees two channels, `(M_ctx ⊙ value, M_ctx)`, and predicts the
//! clean field. One time-conditioned network covers both the clean `t = 0`
//! regression and the noisy-time calls of the iterative samplers.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};
use crate::grids::{Field, Mask, Partition, Sample};
use crate::metrics::member_seed;
use crate::nnet::{self, AdamState, ConvNetSpec, InitScheme, LrSchedule, NetParams, OutputHead};
use crate::partitioning::{PartitionGenerator, PartitionStrategy};
use crate::rng;
use crate::schedule::{NoiseSchedule, DEFAULT_T_MIN};

pub const IN_CHANNELS: usize = 2;

/// Read access to observed values. Lets tests count which pixels are read.
pub trait ObservedValues {
    fn value(&self, i: usize) -> f64;
}

impl ObservedValues for [f64] {
    fn value(&self, i: usize) -> f64 {
        self[i]
    }
}

impl ObservedValues for Vec<f64> {
    fn value(&self, i: usize) -> f64 {
        self[i]
    }
}

/// Network input `(ctx ⊙ values, ctx)`; values are read only where
/// `ctx = 1`.
pub fn context_input(values: &(impl ObservedValues + ?Sized), ctx: &Mask) -> Vec<f64> {
    let n = ctx.len();
    let mut out = vec![0.0; IN_CHANNELS * n];
    for i in ctx.ones_indices() {
        out[i] = values.value(i);
        out[n + i] = 1.0;
    }
    out
}

/// `‖M_qry ⊙ (û − u_obs)‖² / |M_qry|` and its gradient in `û`. Reads
/// `u_obs` only on query pixels.
pub fn query_loss(
    pred: &[f64],
    u_obs: &(impl ObservedValues + ?Sized),
    qry: &Mask,
) -> Result<(f64, Vec<f64>)> {
    dim_check("query_loss prediction", qry.len(), pred.len())?;
    let n = qry.count();
    if n == 0 {
        return Err(Error::Empty("query region is empty".into()));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for i in qry.ones_indices() {
        let r = pred[i] - u_obs.value(i);
        loss += r * r;
        grad[i] = 2.0 * r / n as f64;
    }
    Ok((loss / n as f64, grad))
}

/// Where training partitions come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionSource {
    /// A fresh partition for every drawn sample.
    Live,
    /// `per_sample` partitions per training sample, drawn once up front.
    Bank { per_sample: usize },
}

#[derive(Debug, Clone)]
pub struct ImputerTrainConfig {
    pub strategy: PartitionStrategy,
    pub source: PartitionSource,
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    /// Probability of a clean (`t = 0`) training input.
    pub p_clean: f64,
    pub t_min: f64,
    pub net: ConvNetSpec,
    pub seed: u64,
}

impl ImputerTrainConfig {
    pub fn new(strategy: PartitionStrategy) -> Self {
        Self {
            strategy,
            source: PartitionSource::Live,
            steps: 2000,
            batch: 8,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Cosine { floor: 0.05 },
            p_clean: 0.5,
            t_min: DEFAULT_T_MIN,
            net: ConvNetSpec::imputer(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("imputer training needs steps >= 1 and batch >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.p_clean) {
            return Err(Error::Config(format!("p_clean must lie in [0,1], got {}", self.p_clean)));
        }
        if let PartitionSource::Bank { per_sample: 0 } = self.source {
            return Err(Error::Config("partition bank needs per_sample >= 1".into()));
        }
        NoiseSchedule::new(self.t_min)?;
        self.net.validate()?;
        check_imputer_spec(&self.net)?;
        self.strategy.validate()
    }
}

fn check_imputer_spec(spec: &ConvNetSpec) -> Result<()> {
    if spec.in_channels != IN_CHANNELS || spec.out_channels != 1 || spec.output_head != OutputHead::Linear {
        return Err(Error::Config(
            "imputer network must map 2 input channels to 1 linear output".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ImputerTrainOutcome {
    pub params: NetParams,
    /// Loss of every executed step.
    pub losses: Vec<f64>,
    /// Steps skipped because every query in the batch was empty.
    pub skipped_steps: usize,
}

fn sample_partitions(
    strategy: &PartitionStrategy,
    sample: &Sample,
    seeds: &[u64],
) -> Result<Vec<Partition>> {
    let field = strategy.needs_field().then_some(&sample.field);
    strategy.partitions(&sample.mask, field, seeds)
}

/// Draws a partition bank: `per_sample` partitions for every sample.
pub fn partition_bank(
    strategy: &PartitionStrategy,
    data: &[Sample],
    per_sample: usize,
    seed: u64,
) -> Result<Vec<Vec<Partition>>> {
    data.iter()
        .enumerate()
        .map(|(i, s)| {
            let base = rng::derive_seed(seed, &format!("imputer/bank/{i}"));
            let seeds: Vec<u64> = (0..per_sample).map(|j| member_seed(base, j)).collect();
            sample_partitions(strategy, s, &seeds)
        })
        .collect()
}

/// Trains on standardized samples. Observed values outside each sample's
/// mask are never read.
pub fn train_imputer(data: &[Sample], cfg: &ImputerTrainConfig) -> Result<ImputerTrainOutcome> {
    cfg.validate()?;
    let first = data
        .first()
        .ok_or_else(|| Error::Empty("imputer training needs at least one sample".into()))?;
    let (h, w) = (first.mask.height(), first.mask.width());
    if data.iter().any(|s| !s.mask.same_shape(&first.mask) || s.field.len() != h * w) {
        return Err(Error::Dimension("training samples differ in shape".into()));
    }
    let hw = h * w;
    let schedule = NoiseSchedule::new(cfg.t_min)?;
    let bank = match cfg.source {
        PartitionSource::Live => None,
        PartitionSource::Bank { per_sample } => {
            let bank = partition_bank(&cfg.strategy, data, per_sample, cfg.seed)?;
            if bank.iter().flatten().all(|p| p.qry.count() == 0) {
                return Err(Error::Config("every banked partition has an empty query".into()));
            }
            Some(bank)
        }
    };
    let mut params = NetParams::init(
        cfg.net,
        rng::derive_seed(cfg.seed, "imputer/init"),
        InitScheme::HeNormalZeroHead,
    )?;
    let mut adam = AdamState::new(params.data.len(), cfg.learning_rate);
    let mut r = rng::stream(cfg.seed, "imputer/train");
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut skipped_steps = 0;
    let mut empty_run = 0usize;
    for step in 0..cfg.steps {
        adam.lr = cfg.lr_schedule.rate(cfg.learning_rate, step, cfg.steps);
        let mut inputs = Vec::with_capacity(cfg.batch * IN_CHANNELS * hw);
        let mut times = Vec::with_capacity(cfg.batch);
        let mut picked = Vec::with_capacity(cfg.batch);
        for b in 0..cfg.batch {
            let idx = r.random_range(0..data.len());
            let part = match &bank {
                Some(bank) => bank[idx][r.random_range(0..bank[idx].len())].clone(),
                None => {
                    let s = rng::derive_seed(cfg.seed, &format!("imputer/partition/{step}/{b}"));
                    sample_partitions(&cfg.strategy, &data[idx], &[s])?.remove(0)
                }
            };
            let t = if r.random::<f64>() < cfg.p_clean {
                0.0
            } else {
                // Uniform on (t_min, 1].
                1.0 - (1.0 - cfg.t_min) * r.random::<f64>()
            };
            let eps: Vec<f64> = (0..hw).map(|_| StandardNormal.sample(&mut r)).collect();
            if part.qry.count() == 0 {
                empty_run += 1;
                if empty_run >= data.len().max(cfg.batch) {
                    return Err(Error::Config(format!(
                        "{empty_run} consecutive partitions had empty queries"
                    )));
                }
                continue;
            }
            empty_run = 0;
            let values = data[idx].field.values();
            let input = if t == 0.0 {
                context_input(values, &part.ctx)
            } else {
                let (a, s) = schedule.alpha_sigma(t)?;
                let noisy: Vec<f64> = part
                    .ctx
                    .bits()
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| if c == 1 { a * values[i] + s * eps[i] } else { 0.0 })
                    .collect();
                context_input(&noisy, &part.ctx)
            };
            inputs.extend(input);
            times.push(t);
            picked.push((idx, part.qry));
        }
        if picked.is_empty() {
            skipped_steps += 1;
            continue;
        }
        let nb = picked.len() as f64;
        let loss_fn = |out: &[f64]| {
            let mut total = 0.0;
            let mut grad = Vec::with_capacity(out.len());
            for (k, (idx, qry)) in picked.iter().enumerate() {
                let (l, g) = query_loss(&out[k * hw..(k + 1) * hw], data[*idx].field.values(), qry)?;
                total += l / nb;
                grad.extend(g.into_iter().map(|v| v / nb));
            }
            Ok((total, grad))
        };
        let (loss, grad) = nnet::param_grad(&params, &loss_fn, &inputs, &times, h, w)
            .map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("imputer training step {step}: {m}")),
                other => other,
            })?;
        adam.step(&mut params.data, &grad)?;
        if !params.is_finite() {
            return Err(Error::Numerical(format!("imputer parameters diverged at step {step}")));
        }
        losses.push(loss);
    }
    Ok(ImputerTrainOutcome {
        params,
        losses,
        skipped_steps,
    })
}

/// Anything that maps a batch of `(ctx ⊙ value, ctx)` inputs and times to
/// clean-field predictions.
pub trait Predictor {
    fn predict_batch(&self, inputs: &[f64], times: &[f64], height: usize, width: usize) -> Result<Vec<f64>>;
}

impl Predictor for NetParams {
    fn predict_batch(&self, inputs: &[f64], times: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
        check_imputer_spec(&self.spec)?;
        nnet::forward_batch(self, inputs, times, height, width).map(|r| r.0)
    }
}

/// Returns a fixed field whatever the input.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleImputer {
    pub truth: Vec<f64>,
}

impl Predictor for OracleImputer {
    fn predict_batch(&self, inputs: &[f64], times: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
        let hw = height * width;
        dim_check("oracle truth", hw, self.truth.len())?;
        dim_check("oracle inputs", times.len() * IN_CHANNELS * hw, inputs.len())?;
        Ok(self.truth.repeat(times.len()))
    }
}

pub const SAMPLER_NAMES: [&str; 5] = [
    "direct-projection",
    "proximal",
    "iterative-conditioning",
    "repaint",
    "recursive-jump",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum SamplerConfig {
    DirectProjection { k_ens: usize },
    Proximal { delta: f64, k_ens: usize },
    IterativeConditioning { steps: usize, k_ens: usize },
    Repaint { steps: usize, jump: usize, freq: usize, k_ens: usize },
    RecursiveJump { steps: usize, stages: usize, k_ens: usize },
}

pub const DEFAULT_K_ENS: usize = 8;

impl SamplerConfig {
    /// Default configuration for a sampler name.
    pub fn by_name(name: &str) -> Result<Self> {
        Ok(match name {
            "direct-projection" => Self::DirectProjection { k_ens: DEFAULT_K_ENS },
            "proximal" => Self::Proximal {
                delta: 1e-3,
                k_ens: DEFAULT_K_ENS,
            },
            "iterative-conditioning" => Self::IterativeConditioning {
                steps: 50,
                k_ens: DEFAULT_K_ENS,
            },
            "repaint" => Self::Repaint {
                steps: 50,
                jump: 2,
                freq: 4,
                k_ens: DEFAULT_K_ENS,
            },
            "recursive-jump" => Self::RecursiveJump {
                steps: 50,
                stages: 3,
                k_ens: DEFAULT_K_ENS,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown sampler {other:?}; expected one of {}",
                    SAMPLER_NAMES.join(", ")
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::DirectProjection { .. } => SAMPLER_NAMES[0],
            Self::Proximal { .. } => SAMPLER_NAMES[1],
            Self::IterativeConditioning { .. } => SAMPLER_NAMES[2],
            Self::Repaint { .. } => SAMPLER_NAMES[3],
            Self::RecursiveJump { .. } => SAMPLER_NAMES[4],
        }
    }

    pub fn k_ens(&self) -> usize {
        match *self {
            Self::DirectProjection { k_ens }
            | Self::Proximal { k_ens, .. }
            | Self::IterativeConditioning { k_ens, .. }
            | Self::Repaint { k_ens, .. }
            | Self::RecursiveJump { k_ens, .. } => k_ens,
        }
    }

    pub fn with_k_ens(mut self, k: usize) -> Self {
        match &mut self {
            Self::DirectProjection { k_ens }
            | Self::Proximal { k_ens, .. }
            | Self::IterativeConditioning { k_ens, .. }
            | Self::Repaint { k_ens, .. }
            | Self::RecursiveJump { k_ens, .. } => *k_ens = k,
        }
        self
    }

    pub fn with_steps(mut self, n: usize) -> Self {
        match &mut self {
            Self::IterativeConditioning { steps, .. }
            | Self::Repaint { steps, .. }
            | Self::RecursiveJump { steps, .. } => *steps = n,
            _ => {}
        }
        self
    }

    pub fn validate(&self, t_min: f64) -> Result<()> {
        if self.k_ens() == 0 {
            return Err(Error::Config("k_ens must be >= 1".into()));
        }
        match *self {
            Self::DirectProjection { .. } => {}
            Self::Proximal { delta, .. } => {
                if !(delta > 0.0 && delta <= t_min) {
                    return Err(Error::Config(format!(
                        "delta must lie in (0, {t_min}], got {delta}"
                    )));
                }
            }
            Self::IterativeConditioning { steps, .. } => check_steps(steps)?,
            Self::Repaint { steps, jump, freq, .. } => {
                check_steps(steps)?;
                if jump == 0 || freq == 0 {
                    return Err(Error::Config("repaint jump and freq must be >= 1".into()));
                }
                // Each cycle of `freq` steps climbs back `jump`; without
                // net progress the loop never reaches t = 0.
                if jump >= freq {
                    return Err(Error::Config(format!(
                        "repaint needs jump < freq, got jump={jump}, freq={freq}"
                    )));
                }
            }
            Self::RecursiveJump { steps, stages, .. } => {
                check_steps(steps)?;
                if stages == 0 {
                    return Err(Error::Config("recursive jump needs stages >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

fn check_steps(steps: usize) -> Result<()> {
    if steps == 0 {
        Err(Error::Config("sampler needs steps >= 1".into()))
    } else {
        Ok(())
    }
}

/// `K` partitions of `mask`, one per ensemble member seed.
pub fn partition_ensemble(
    mask: &Mask,
    generator: &dyn PartitionGenerator,
    field: Option<&Field>,
    k_ens: usize,
    seed: u64,
) -> Result<Vec<Partition>> {
    if k_ens == 0 {
        return Err(Error::InvalidArgument("k_ens must be >= 1".into()));
    }
    let seeds: Vec<u64> = (0..k_ens).map(|j| member_seed(seed, j)).collect();
    generator.generate(mask, field, &seeds)
}

/// Inputs shared by every sampler.
pub struct ImputeRequest<'a> {
    pub predictor: &'a dyn Predictor,
    pub generator: &'a dyn PartitionGenerator,
    pub schedule: NoiseSchedule,
    /// Observed values; read only where `mask = 1`.
    pub u_obs: &'a Field,
    pub mask: &'a Mask,
    /// Passed to generators that need the field.
    pub field_for_partition: Option<&'a Field>,
}

fn ensemble_mean(
    predictor: &dyn Predictor,
    values: &[f64],
    parts: &[Partition],
    t: f64,
    h: usize,
    w: usize,
) -> Result<Vec<f64>> {
    let hw = h * w;
    let mut inputs = Vec::with_capacity(parts.len() * IN_CHANNELS * hw);
    for p in parts {
        inputs.extend(context_input(values, &p.ctx));
    }
    let out = predictor.predict_batch(&inputs, &vec![t; parts.len()], h, w)?;
    // Running mean in member order; exact when all members agree.
    let mut mean = vec![0.0; hw];
    for (k, chunk) in out.chunks(hw).enumerate() {
        for (m, v) in mean.iter_mut().zip(chunk) {
            *m += (v - *m) / (k + 1) as f64;
        }
    }
    Ok(mean)
}

/// Observed values where `mask = 1`, zero elsewhere.
fn observed_values(u_obs: &Field, mask: &Mask) -> Result<Vec<f64>> {
    if u_obs.len() != mask.len() {
        return Err(Error::Dimension("observed field and mask differ in shape".into()));
    }
    if !mask.is_subset_of(u_obs.validity()) {
        return Err(Error::InvalidArgument(
            "mask marks pixels observed that the field does not hold".into(),
        ));
    }
    let mut v = vec![0.0; mask.len()];
    for i in mask.ones_indices() {
        v[i] = u_obs.values()[i];
    }
    Ok(v)
}

fn overwrite_observed(x: &[f64], obs: &[f64], mask: &Mask, h: usize, w: usize) -> Result<Field> {
    let out: Vec<f64> = x
        .iter()
        .zip(obs)
        .zip(mask.bits())
        .map(|((&x, &o), &m)| if m == 1 { o } else { x })
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite imputation".into()));
    }
    Field::dense(h, w, out)
}

/// Continuous time of integer step `s` out of `n`; `s = 0` is the clean
/// target.
pub fn step_time(s: usize, n: usize, t_min: f64) -> f64 {
    if s == 0 {
        0.0
    } else {
        (s as f64 / n as f64).clamp(t_min, 1.0)
    }
}

struct ReverseState<'a, 'b> {
    req: &'b ImputeRequest<'a>,
    obs: Vec<f64>,
    e_imp: Vec<f64>,
    n_steps: usize,
    seed: u64,
    calls: usize,
    h: usize,
    w: usize,
}

impl ReverseState<'_, '_> {
    /// One blended reverse step from integer step `s` to `t`.
    fn step(&mut self, x_s: &[f64], s: usize, t: usize) -> Result<Vec<f64>> {
        let sched = &self.req.schedule;
        let ts = step_time(s, self.n_steps, sched.t_min);
        let tt = step_time(t, self.n_steps, sched.t_min);
        let part_seed = rng::derive_seed(self.seed, &format!("impute/step/{}", self.calls));
        self.calls += 1;
        let part = self
            .req
            .generator
            .generate(self.req.mask, self.req.field_for_partition, &[part_seed])?
            .remove(0);
        let e_diff = ensemble_mean(self.req.predictor, x_s, &[part], ts, self.h, self.w)?;
        let omega = s as f64 / self.n_steps as f64;
        let (a, sg) = sched.alpha_sigma(ts)?;
        let mut x0_full = vec![0.0; x_s.len()];
        let mut eps_full = vec![0.0; x_s.len()];
        for i in 0..x_s.len() {
            let x0 = if self.req.mask.get(i) {
                self.obs[i]
            } else {
                omega * e_diff[i] + (1.0 - omega) * self.e_imp[i]
            };
            x0_full[i] = x0;
            eps_full[i] = (x_s[i] - a * x0) / sg;
        }
        // α_t x̂₀ + σ_t ε with the branch-wise x̂₀ and ε; identical to the
        // noise-form update and finite at t = 1 where α = 0.
        let x_t = sched.step_with_eps(&x0_full, &eps_full, tt)?;
        if x_t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite state at step {s}")));
        }
        Ok(x_t)
    }

    fn renoise(&self, x: &[f64], from: usize, to: usize, r: &mut rng::Rng) -> Result<Vec<f64>> {
        let sched = &self.req.schedule;
        let eps: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(r)).collect();
        sched.renoise(
            x,
            step_time(from, self.n_steps, sched.t_min),
            step_time(to, self.n_steps, sched.t_min),
            &eps,
        )
    }
}

/// Runs one sampler. Deterministic given the request and `seed`.
pub fn impute(req: &ImputeRequest<'_>, cfg: &SamplerConfig, seed: u64) -> Result<Field> {
    cfg.validate(req.schedule.t_min)?;
    let (h, w) = (req.mask.height(), req.mask.width());
    let hw = h * w;
    let obs = observed_values(req.u_obs, req.mask)?;
    if req.mask.count() == 0 {
        return Err(Error::Empty("nothing observed to condition on".into()));
    }
    let parts = partition_ensemble(
        req.mask,
        req.generator,
        req.field_for_partition,
        cfg.k_ens(),
        seed,
    )?;
    match *cfg {
        SamplerConfig::DirectProjection { .. } => {
            let x = ensemble_mean(req.predictor, &obs, &parts, 0.0, h, w)?;
            overwrite_observed(&x, &obs, req.mask, h, w)
        }
        SamplerConfig::Proximal { delta, .. } => {
            let mut r = rng::stream(seed, "impute/proximal");
            let (a, s) = req.schedule.alpha_sigma_raw(delta);
            let noisy: Vec<f64> = obs
                .iter()
                .map(|&o| {
                    let e: f64 = StandardNormal.sample(&mut r);
                    a * o + s * e
                })
                .collect();
            let x = ensemble_mean(req.predictor, &noisy, &parts, delta, h, w)?;
            overwrite_observed(&x, &obs, req.mask, h, w)
        }
        SamplerConfig::IterativeConditioning { steps, .. }
        | SamplerConfig::Repaint { steps, .. }
        | SamplerConfig::RecursiveJump { steps, .. } => {
            let e_imp = ensemble_mean(req.predictor, &obs, &parts, 0.0, h, w)?;
            let mut st = ReverseState {
                req,
                obs: obs.clone(),
                e_imp,
                n_steps: steps,
                seed,
                calls: 0,
                h,
                w,
            };
            let mut init = rng::stream(seed, "impute/init");
            let mut x: Vec<f64> = (0..hw).map(|_| StandardNormal.sample(&mut init)).collect();
            let mut jumps = rng::stream(seed, "impute/renoise");
            let mut s = steps;
            match *cfg {
                SamplerConfig::Repaint { jump, freq, .. } => {
                    let mut c = 0usize;
                    while s > 0 {
                        let t = s - 1;
                        x = st.step(&x, s, t)?;
                        c += 1;
                        if c % freq == 0 && t > 0 {
                            let s_new = (t + jump).min(steps);
                            x = st.renoise(&x, t, s_new, &mut jumps)?;
                            s = s_new;
                        } else {
                            s = t;
                        }
                    }
                }
                SamplerConfig::RecursiveJump { stages, .. } => {
                    let mut k = stages - 1;
                    while s > 0 {
                        let t = s - 1;
                        x = st.step(&x, s, t)?;
                        if t == 0 && k > 0 {
                            let t_jump = k * steps / stages;
                            x = st.renoise(&x, 0, t_jump, &mut jumps)?;
                            s = t_jump;
                            k -= 1;
                        } else {
                            s = t;
                        }
                    }
                }
                _ => {
                    while s > 0 {
                        x = st.step(&x, s, s - 1)?;
                        s -= 1;
                    }
                }
            }
            overwrite_observed(&x, &obs, req.mask, h, w)
        }
    }
}
