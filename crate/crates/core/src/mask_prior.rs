//! Learned prior over binary observation masks.
//!
//! Masks are encoded as scaled one-hot logits (`κ·e_c`, two classes with
//! channel 0 = observed, channel 1 = missing), corrupted with the VP
//! schedule, and a softmax-headed network is trained to recover the
//! one-hot class probabilities from the softmax-projected latent.
//! Sampling integrates the deterministic reverse ODE from pure noise and
//! decodes by per-pixel argmax.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};
use crate::grids::{write_atomic, Mask};
use crate::nnet::{
    self, AdamState, ConvNetSpec, InitScheme, LrSchedule, NetParams, OutputHead, Tape,
};
use crate::rng;
use crate::schedule::{NoiseSchedule, DEFAULT_T_MIN};

pub const N_CLASSES: usize = 2;
pub const DEFAULT_KAPPA: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledLogitCodec {
    pub kappa: f64,
}

impl Default for ScaledLogitCodec {
    fn default() -> Self {
        Self {
            kappa: DEFAULT_KAPPA,
        }
    }
}

impl ScaledLogitCodec {
    pub fn new(kappa: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::InvalidArgument(format!("kappa must be > 0, got {kappa}")));
        }
        Ok(Self { kappa })
    }

    /// `2 × H·W`, channel-major: (κ, 0) for observed pixels, (0, κ) for
    /// missing ones.
    pub fn encode(&self, mask: &Mask) -> Vec<f64> {
        let n = mask.len();
        let mut out = vec![0.0; N_CLASSES * n];
        for (i, &b) in mask.bits().iter().enumerate() {
            if b == 1 {
                out[i] = self.kappa;
            } else {
                out[n + i] = self.kappa;
            }
        }
        out
    }

    pub fn decode(&self, x0: &[f64], height: usize, width: usize) -> Result<Mask> {
        decode(x0, height, width)
    }
}

/// One-hot class targets (`κ = 1`).
pub fn one_hot(mask: &Mask) -> Vec<f64> {
    ScaledLogitCodec { kappa: 1.0 }.encode(mask)
}

pub fn encode_mask(codec: &ScaledLogitCodec, mask: &Mask) -> Vec<f64> {
    codec.encode(mask)
}

/// Per-pixel argmax; ties go to "missing".
pub fn decode(x0: &[f64], height: usize, width: usize) -> Result<Mask> {
    let n = height * width;
    dim_check("decode latent", N_CLASSES * n, x0.len())?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite latent in decode".into()));
    }
    let bits = (0..n).map(|i| u8::from(x0[i] > x0[n + i])).collect();
    Mask::new(height, width, bits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossWeighting {
    /// `w(t) = 1`.
    Uniform,
    /// `w(t) = min(α²/σ², 5)`.
    ClippedSnr,
}

impl LossWeighting {
    pub fn weight(&self, alpha: f64, sigma: f64) -> f64 {
        match self {
            LossWeighting::Uniform => 1.0,
            LossWeighting::ClippedSnr => (alpha * alpha / (sigma * sigma)).min(5.0),
        }
    }
}

/// Distribution of training times on `[t_min, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeSampling {
    Uniform,
    /// `t = 1 − (1 − t_min)·u^power` for uniform `u`; `power > 1` puts more
    /// mass near pure noise.
    Power { power: f64 },
}

impl TimeSampling {
    pub fn sample(&self, t_min: f64, r: &mut rng::Rng) -> f64 {
        match *self {
            TimeSampling::Uniform => r.random_range(t_min..=1.0),
            TimeSampling::Power { power } => {
                let u: f64 = r.random();
                1.0 - (1.0 - t_min) * u.powf(power)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub weighting: LossWeighting,
    pub time_sampling: TimeSampling,
    pub kappa: f64,
    pub t_min: f64,
    pub net: ConvNetSpec,
    pub seed: u64,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            learning_rate: 2e-3,
            lr_schedule: LrSchedule::Cosine { floor: 0.05 },
            weighting: LossWeighting::Uniform,
            time_sampling: TimeSampling::Uniform,
            kappa: DEFAULT_KAPPA,
            t_min: DEFAULT_T_MIN,
            net: ConvNetSpec::mask_prior(),
            seed: 0,
        }
    }
}

impl PriorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("prior training needs steps >= 1 and batch >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let TimeSampling::Power { power } = self.time_sampling {
            if !(power > 0.0 && power.is_finite()) {
                return Err(Error::Config(format!("time sampling power must be > 0, got {power}")));
            }
        }
        ScaledLogitCodec::new(self.kappa)?;
        NoiseSchedule::new(self.t_min)?;
        self.net.validate()?;
        if self.net.in_channels != N_CLASSES
            || self.net.out_channels != N_CLASSES
            || self.net.output_head != OutputHead::SoftmaxOverChannels
        {
            return Err(Error::Config(
                "mask prior network must map 2 channels to a 2-class softmax".into(),
            ));
        }
        Ok(())
    }
}

/// A trained prior: network, codec and schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPrior {
    pub params: NetParams,
    pub codec: ScaledLogitCodec,
    pub schedule: NoiseSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorMeta {
    kappa: f64,
    t_min: f64,
}

pub const PRIOR_CHECKPOINT: &str = "prior.ckpt";
pub const PRIOR_META: &str = "prior.json";

impl MaskPrior {
    pub fn untrained(spec: ConvNetSpec, codec: ScaledLogitCodec, seed: u64) -> Result<Self> {
        Ok(Self {
            params: NetParams::init(spec, seed, InitScheme::HeNormalZeroHead)?,
            codec,
            schedule: NoiseSchedule::default(),
        })
    }

    /// Writes `prior.ckpt` and `prior.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        nnet::save_checkpoint(&dir.join(PRIOR_CHECKPOINT), &self.params)?;
        let meta = PriorMeta {
            kappa: self.codec.kappa,
            t_min: self.schedule.t_min,
        };
        write_atomic(
            &dir.join(PRIOR_META),
            serde_json::to_string_pretty(&meta)?.as_bytes(),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let params = nnet::load_checkpoint(&dir.join(PRIOR_CHECKPOINT))?;
        let meta_path = dir.join(PRIOR_META);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: PriorMeta = serde_json::from_str(&text)?;
        if params.spec.output_head != OutputHead::SoftmaxOverChannels {
            return Err(Error::Format("prior checkpoint must have a softmax head".into()));
        }
        Ok(Self {
            params,
            codec: ScaledLogitCodec::new(meta.kappa)?,
            schedule: NoiseSchedule::new(meta.t_min)?,
        })
    }

    /// Class probabilities `ê(t, softmax(x))` for a batch of latents
    /// (`B × 2 × H·W`). Also returns the projected inputs and the tape for
    /// gradient computations.
    pub fn predict_batch(
        &self,
        latents: &[f64],
        times: &[f64],
        height: usize,
        width: usize,
    ) -> Result<(Vec<f64>, Vec<f64>, Tape)> {
        let per = N_CLASSES * height * width;
        dim_check("prior latent batch", per * times.len(), latents.len())?;
        let mut projected = Vec::with_capacity(latents.len());
        for chunk in latents.chunks(per) {
            projected.extend(nnet::softmax_channels(chunk, N_CLASSES));
        }
        let (e_hat, tape) = nnet::forward_batch(&self.params, &projected, times, height, width)?;
        Ok((e_hat, projected, tape))
    }

    pub fn predict(&self, latent: &[f64], t: f64, height: usize, width: usize) -> Result<Vec<f64>> {
        self.predict_batch(latent, &[t], height, width).map(|r| r.0)
    }
}

#[derive(Debug, Clone)]
pub struct PriorTrainOutcome {
    pub prior: MaskPrior,
    pub losses: Vec<f64>,
}

/// Batch loss: mean over samples of `w(t)` times the per-pixel mean of
/// `Σ_c (ê_c − e_c)²`.
pub fn prior_loss(e_hat: &[f64], targets: &[f64], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    dim_check("prior loss targets", e_hat.len(), targets.len())?;
    let b = weights.len();
    if b == 0 || e_hat.len() % (b * N_CLASSES) != 0 {
        return Err(Error::Dimension("prior loss batch layout".into()));
    }
    let per = e_hat.len() / b;
    let pixels = (per / N_CLASSES) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; e_hat.len()];
    for (bi, &w) in weights.iter().enumerate() {
        let scale = w / (b as f64 * pixels);
        for i in bi * per..(bi + 1) * per {
            let r = e_hat[i] - targets[i];
            loss += scale * r * r;
            grad[i] = 2.0 * scale * r;
        }
    }
    Ok((loss, grad))
}

pub fn train_prior(masks: &[Mask], cfg: &PriorTrainConfig) -> Result<PriorTrainOutcome> {
    cfg.validate()?;
    let first = masks
        .first()
        .ok_or_else(|| Error::Empty("mask prior training needs at least one mask".into()))?;
    if masks.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::Dimension("training masks differ in shape".into()));
    }
    let (h, w) = (first.height(), first.width());
    let hw = h * w;
    let per = N_CLASSES * hw;
    let codec = ScaledLogitCodec::new(cfg.kappa)?;
    let schedule = NoiseSchedule::new(cfg.t_min)?;
    let mut params = NetParams::init(
        cfg.net,
        rng::derive_seed(cfg.seed, "prior/init"),
        InitScheme::HeNormalZeroHead,
    )?;
    let mut adam = AdamState::new(params.data.len(), cfg.learning_rate);
    let mut r = rng::stream(cfg.seed, "prior/train");
    let encoded: Vec<Vec<f64>> = masks.iter().map(|m| codec.encode(m)).collect();
    let targets_all: Vec<Vec<f64>> = masks.iter().map(one_hot).collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        adam.lr = cfg.lr_schedule.rate(cfg.learning_rate, step, cfg.steps);
        let mut inputs = Vec::with_capacity(cfg.batch * per);
        let mut targets = Vec::with_capacity(cfg.batch * per);
        let mut times = Vec::with_capacity(cfg.batch);
        let mut weights = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let idx = r.random_range(0..masks.len());
            let t = cfg.time_sampling.sample(cfg.t_min, &mut r);
            let eps: Vec<f64> = (0..per).map(|_| StandardNormal.sample(&mut r)).collect();
            let x_t = schedule.forward_corrupt(&encoded[idx], t, &eps)?;
            inputs.extend(nnet::softmax_channels(&x_t, N_CLASSES));
            targets.extend_from_slice(&targets_all[idx]);
            let (a, s) = schedule.alpha_sigma(t)?;
            weights.push(cfg.weighting.weight(a, s));
            times.push(t);
        }
        let loss_fn = |o: &[f64]| prior_loss(o, &targets, &weights);
        let (loss, grad) = nnet::param_grad(&params, &loss_fn, &inputs, &times, h, w)
            .map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("prior training step {step}: {m}")),
                other => other,
            })?;
        adam.step(&mut params.data, &grad)?;
        if !params.is_finite() {
            return Err(Error::Numerical(format!(
                "prior parameters diverged at step {step}"
            )));
        }
        losses.push(loss);
    }
    Ok(PriorTrainOutcome {
        prior: MaskPrior {
            params,
            codec,
            schedule,
        },
        losses,
    })
}

/// Initial Gaussian latent for one sampling run.
pub fn initial_latent(seed: u64, height: usize, width: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, "prior/sample/init");
    (0..N_CLASSES * height * width)
        .map(|_| StandardNormal.sample(&mut r))
        .collect()
}

/// Unconditional samples, one per seed, integrated together as a batch.
pub fn sample_unconditional_batch(
    prior: &MaskPrior,
    height: usize,
    width: usize,
    n_steps: usize,
    seeds: &[u64],
) -> Result<Vec<Mask>> {
    let grid = prior.schedule.time_grid(n_steps)?;
    let per = N_CLASSES * height * width;
    let mut x: Vec<f64> = seeds
        .iter()
        .flat_map(|&s| initial_latent(s, height, width))
        .collect();
    for i in 0..n_steps {
        let (t, t_next) = (grid[i], grid[i + 1]);
        let times = vec![t; seeds.len()];
        let (e_hat, _, _) = prior.predict_batch(&x, &times, height, width)?;
        let x0_hat: Vec<f64> = e_hat.iter().map(|e| prior.codec.kappa * e).collect();
        x = prior.schedule.ode_step(&x, &x0_hat, t, t_next)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite latent at step {i}")));
        }
    }
    x.chunks(per).map(|c| decode(c, height, width)).collect()
}

pub fn sample_unconditional(
    prior: &MaskPrior,
    height: usize,
    width: usize,
    n_steps: usize,
    seed: u64,
) -> Result<Mask> {
    sample_unconditional_batch(prior, height, width, n_steps, &[seed]).map(|mut v| v.remove(0))
}

/// Noise prediction implied by a class-probability prediction:
/// `ε̂ = (x − α κ ê)/σ`.
pub fn implied_noise(
    schedule: &NoiseSchedule,
    x_t: &[f64],
    e_hat: &[f64],
    t: f64,
    kappa: f64,
) -> Result<Vec<f64>> {
    dim_check("implied_noise e_hat", x_t.len(), e_hat.len())?;
    let (a, s) = schedule.alpha_sigma_eval(t)?;
    Ok(x_t
        .iter()
        .zip(e_hat)
        .map(|(x, e)| (x - a * kappa * e) / s)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_mask(h: usize, w: usize, seed: u64) -> Mask {
        let mut r = rng::seeded(seed);
        Mask::new(h, w, (0..h * w).map(|_| r.random_range(0..2u8)).collect()).unwrap()
    }

    #[test]
    fn encode_observed_pixel() {
        let codec = ScaledLogitCodec::default();
        let m = Mask::new(1, 2, vec![1, 0]).unwrap();
        assert_eq!(codec.encode(&m), vec![4.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn decode_encode_round_trip() {
        let codec = ScaledLogitCodec::default();
        for s in 0..100 {
            let m = random_mask(5, 7, s);
            assert_eq!(codec.decode(&codec.encode(&m), 5, 7).unwrap(), m);
        }
    }

    #[test]
    fn softmax_of_encoding() {
        let codec = ScaledLogitCodec::default();
        let p = nnet::softmax_channels(&codec.encode(&Mask::ones(1, 1)), 2);
        let hi = 1.0 / (1.0 + (-4.0f64).exp());
        assert!((p[0] - hi).abs() < 1e-15);
        assert!((p[0] - 0.982_013_790_037_908_4).abs() < 1e-15);
        assert!((p[1] - 0.017_986_209_962_091_56).abs() < 1e-15);
    }

    #[test]
    fn decode_examples_and_tie() {
        assert_eq!(decode(&[3.0, 1.0], 1, 1).unwrap().bits(), &[1]);
        assert_eq!(decode(&[0.0, 0.0], 1, 1).unwrap().bits(), &[0]);
        assert!(decode(&[f64::NAN, 0.0], 1, 1).is_err());
    }

    #[test]
    fn decode_invariant_under_affine_map() {
        let mut r = rng::seeded(3);
        for _ in 0..50 {
            let x: Vec<f64> = (0..2 * 12).map(|_| StandardNormal.sample(&mut r)).collect();
            let y: Vec<f64> = x.iter().map(|v| (v + 1.0) / 2.0).collect();
            assert_eq!(decode(&x, 3, 4).unwrap(), decode(&y, 3, 4).unwrap());
        }
    }

    #[test]
    fn codec_rejects_bad_kappa() {
        assert!(ScaledLogitCodec::new(0.0).is_err());
        assert!(ScaledLogitCodec::new(f64::NAN).is_err());
    }

    #[test]
    fn initial_loss_with_uniform_prediction() {
        // Zero head gives ê = 0.5 on both channels; each pixel contributes
        // 0.25 + 0.25.
        let masks = vec![random_mask(4, 4, 1), random_mask(4, 4, 2)];
        let cfg = PriorTrainConfig {
            steps: 1,
            batch: 4,
            ..Default::default()
        };
        let out = train_prior(&masks, &cfg).unwrap();
        assert!((out.losses[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn prior_loss_gradient_matches_closed_form() {
        let e_hat = vec![0.2, 0.7, 0.8, 0.3];
        let tgt = vec![1.0, 0.0, 0.0, 1.0];
        let (l, g) = prior_loss(&e_hat, &tgt, &[1.0]).unwrap();
        let expect = (0.64 + 0.49 + 0.64 + 0.49) / 2.0;
        assert!((l - expect).abs() < 1e-15);
        for i in 0..4 {
            assert!((g[i] - (e_hat[i] - tgt[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_seeds_identical_traces() {
        let masks = vec![random_mask(4, 4, 5)];
        let cfg = PriorTrainConfig {
            steps: 5,
            batch: 2,
            net: ConvNetSpec::mask_prior().with_hidden(8),
            seed: 9,
            ..Default::default()
        };
        let a = train_prior(&masks, &cfg).unwrap();
        let b = train_prior(&masks, &cfg).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.prior, b.prior);
    }

    #[test]
    fn untrained_sampler_smoke() {
        let prior = MaskPrior::untrained(
            ConvNetSpec::mask_prior(),
            ScaledLogitCodec::default(),
            1,
        )
        .unwrap();
        let a = sample_unconditional(&prior, 6, 5, 4, 11).unwrap();
        let b = sample_unconditional(&prior, 6, 5, 4, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.height(), a.width()), (6, 5));
    }

    #[test]
    fn noise_and_data_residuals_are_linked() {
        let schedule = NoiseSchedule::default();
        let prior = MaskPrior {
            params: NetParams::init(ConvNetSpec::mask_prior(), 4, InitScheme::HeNormalFull)
                .unwrap(),
            codec: ScaledLogitCodec::default(),
            schedule,
        };
        let m = random_mask(4, 4, 8);
        let x0 = prior.codec.encode(&m);
        let mut r = rng::seeded(12);
        for &t in &[0.1, 0.4, 0.9] {
            let eps: Vec<f64> = (0..x0.len()).map(|_| StandardNormal.sample(&mut r)).collect();
            let x_t = schedule.forward_corrupt(&x0, t, &eps).unwrap();
            let e_hat = prior.predict(&x_t, t, 4, 4).unwrap();
            let eps_hat = implied_noise(&schedule, &x_t, &e_hat, t, 4.0).unwrap();
            let (a, s) = schedule.alpha_sigma(t).unwrap();
            for i in 0..x0.len() {
                let data_res = 4.0 * e_hat[i] - x0[i];
                let noise_res = eps[i] - eps_hat[i];
                assert!((data_res - (s / a) * noise_res).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn prior_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let prior = MaskPrior::untrained(
            ConvNetSpec::mask_prior().with_hidden(4),
            ScaledLogitCodec::new(3.0).unwrap(),
            2,
        )
        .unwrap();
        prior.save(dir.path()).unwrap();
        assert_eq!(MaskPrior::load(dir.path()).unwrap(), prior);
    }
}
