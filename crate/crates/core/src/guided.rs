//! Observation-aligned mask generation: a Bernoulli-thinned anchor of the
//! observed mask steers the prior's reverse ODE through the gradient of a
//! cross-entropy between the predicted "observed" probability and the
//! anchor.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};
use crate::grids::Mask;
use crate::mask_prior::{initial_latent, MaskPrior, N_CLASSES};
use crate::nnet;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Retention ratio of the anchor.
    pub rho: f64,
    /// Guidance scale `w_g`.
    pub scale: f64,
    pub steps: usize,
    /// Probability clamp applied before the logarithm.
    pub clamp: f64,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            rho: 0.8,
            scale: 120.0,
            steps: 15,
            clamp: 1e-6,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must lie in (0,1], got {}", self.rho)));
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!(
                "guidance scale must be finite and >= 0, got {}",
                self.scale
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("guided sampling needs steps >= 1".into()));
        }
        if !(self.clamp > 0.0 && self.clamp < 0.5) {
            return Err(Error::Config(format!("clamp must lie in (0, 0.5), got {}", self.clamp)));
        }
        Ok(())
    }
}

/// `y_i = 1[r_i < ρ] · M_i` with one uniform draw per pixel.
pub fn make_anchor(mask: &Mask, rho: f64, seed: u64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("rho must lie in [0,1], got {rho}")));
    }
    let mut r = rng::stream(seed, "guided/anchor");
    let bits = mask
        .bits()
        .iter()
        .map(|&m| {
            let u: f64 = r.random();
            u8::from(u < rho && m == 1)
        })
        .collect();
    Mask::new(mask.height(), mask.width(), bits)
}

/// Mean binary cross-entropy over all `d` pixels between the clamped
/// probabilities and the anchor, with its gradient in the probabilities
/// (zero where the clamp is active).
pub fn guidance_loss_grad(e_hat: &[f64], anchor: &Mask, clamp: f64) -> Result<(f64, Vec<f64>)> {
    dim_check("guidance loss probabilities", anchor.len(), e_hat.len())?;
    let d = e_hat.len() as f64;
    let (lo, hi) = (clamp, 1.0 - clamp);
    let mut loss = 0.0;
    let mut grad = vec![0.0; e_hat.len()];
    for (i, (&p, &y)) in e_hat.iter().zip(anchor.bits()).enumerate() {
        if !p.is_finite() {
            return Err(Error::Numerical("non-finite probability in guidance loss".into()));
        }
        let pc = p.clamp(lo, hi);
        let inside = p > lo && p < hi;
        if y == 1 {
            loss -= pc.ln();
            if inside {
                grad[i] = -1.0 / (d * pc);
            }
        } else {
            loss -= (1.0 - pc).ln();
            if inside {
                grad[i] = 1.0 / (d * (1.0 - pc));
            }
        }
    }
    Ok((loss / d, grad))
}

pub fn guidance_loss(e_hat: &[f64], anchor: &Mask, clamp: f64) -> Result<f64> {
    guidance_loss_grad(e_hat, anchor, clamp).map(|r| r.0)
}

/// Guidance losses and their gradients with respect to a batch of
/// latents, back-propagated through the network and the softmax
/// projection. Anchors pair with the batch entries.
pub fn guidance_gradient_batch(
    prior: &MaskPrior,
    latents: &[f64],
    t: f64,
    anchors: &[Mask],
    clamp: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let first = anchors
        .first()
        .ok_or_else(|| Error::Empty("guidance gradient needs at least one anchor".into()))?;
    let (h, w) = (first.height(), first.width());
    let hw = h * w;
    let per = N_CLASSES * hw;
    let times = vec![t; anchors.len()];
    let (e_hat, projected, tape) = prior.predict_batch(latents, &times, h, w)?;
    let mut losses = Vec::with_capacity(anchors.len());
    let mut d_out = vec![0.0; e_hat.len()];
    for (b, y) in anchors.iter().enumerate() {
        let (l, g) = guidance_loss_grad(&e_hat[b * per..b * per + hw], y, clamp)?;
        losses.push(l);
        d_out[b * per..b * per + hw].copy_from_slice(&g);
    }
    let d_proj = nnet::backward(&prior.params, &tape, &d_out, false)?.input;
    let mut grad = Vec::with_capacity(latents.len());
    for b in 0..anchors.len() {
        let r = b * per..(b + 1) * per;
        grad.extend(nnet::softmax_channels_backward(
            &projected[r.clone()],
            &d_proj[r],
            N_CLASSES,
        ));
    }
    Ok((losses, grad, e_hat))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedSample {
    pub mask: Mask,
    pub anchor: Mask,
    /// Guidance loss of the prediction at the terminal latent.
    pub final_loss: f64,
}

/// Guided samples of `mask`, one per seed, integrated together as a
/// batch. The seed fixes both the anchor and the initial latent; with
/// `scale = 0` the trajectory is the unconditional one for that seed.
pub fn guided_sample_batch(
    prior: &MaskPrior,
    mask: &Mask,
    cfg: &GuidanceConfig,
    seeds: &[u64],
) -> Result<Vec<GuidedSample>> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Ok(Vec::new());
    }
    let (h, w) = (mask.height(), mask.width());
    let hw = h * w;
    let per = N_CLASSES * hw;
    let anchors = seeds
        .iter()
        .map(|&s| make_anchor(mask, cfg.rho, s))
        .collect::<Result<Vec<_>>>()?;
    let grid = prior.schedule.time_grid(cfg.steps)?;
    let kappa = prior.codec.kappa;
    let mut x: Vec<f64> = seeds.iter().flat_map(|&s| initial_latent(s, h, w)).collect();
    let times_of = |t: f64| vec![t; seeds.len()];
    for i in 0..cfg.steps {
        let (t, t_next) = (grid[i], grid[i + 1]);
        let (e_hat, grad) = if cfg.scale > 0.0 {
            let (_, g, e) = guidance_gradient_batch(prior, &x, t, &anchors, cfg.clamp)?;
            (e, Some(g))
        } else {
            (prior.predict_batch(&x, &times_of(t), h, w)?.0, None)
        };
        let x0_hat: Vec<f64> = e_hat.iter().map(|e| kappa * e).collect();
        let mut next = prior.schedule.ode_step(&x, &x0_hat, t, t_next)?;
        if let Some(g) = grad {
            for (v, gv) in next.iter_mut().zip(&g) {
                *v -= cfg.scale * gv;
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite guided latent at step {i}")));
        }
        x = next;
    }
    let t_end = grid[cfg.steps];
    let (e_end, _, _) = prior.predict_batch(&x, &times_of(t_end), h, w)?;
    let mut out = Vec::with_capacity(seeds.len());
    for (b, anchor) in anchors.into_iter().enumerate() {
        let r = b * per..(b + 1) * per;
        out.push(GuidedSample {
            mask: crate::mask_prior::decode(&x[r.clone()], h, w)?,
            final_loss: guidance_loss(&e_end[b * per..b * per + hw], &anchor, cfg.clamp)?,
            anchor,
        });
    }
    Ok(out)
}

pub fn guided_sample(prior: &MaskPrior, mask: &Mask, cfg: &GuidanceConfig) -> Result<GuidedSample> {
    guided_sample_batch(prior, mask, cfg, &[cfg.seed]).map(|mut v| v.remove(0))
}

/// Per-pixel mean and (population) standard deviation over an ensemble
/// of masks.
pub fn ensemble_stats(masks: &[Mask]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Empty("ensemble statistics need at least one mask".into()))?;
    if masks.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::Dimension("ensemble masks differ in shape".into()));
    }
    let n = masks.len() as f64;
    let mut mean = vec![0.0; first.len()];
    for m in masks {
        for (acc, &b) in mean.iter_mut().zip(m.bits()) {
            *acc += b as f64;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let std = mean.iter().map(|&p| (p * (1.0 - p)).max(0.0).sqrt()).collect();
    Ok((mean, std))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask_prior::{sample_unconditional_batch, ScaledLogitCodec};
    use crate::nnet::{ConvNetSpec, InitScheme, NetParams};
    use crate::schedule::NoiseSchedule;
    use rand_distr::{Distribution, StandardNormal};

    fn random_mask(h: usize, w: usize, p: f64, seed: u64) -> Mask {
        let mut r = rng::seeded(seed);
        let bits = (0..h * w).map(|_| u8::from(r.random::<f64>() < p)).collect();
        Mask::new(h, w, bits).unwrap()
    }

    fn random_prior(seed: u64) -> MaskPrior {
        MaskPrior {
            params: NetParams::init(ConvNetSpec::mask_prior().with_hidden(8), seed, InitScheme::HeNormalFull)
                .unwrap(),
            codec: ScaledLogitCodec::default(),
            schedule: NoiseSchedule::default(),
        }
    }

    #[test]
    fn anchor_extremes() {
        let m = random_mask(6, 6, 0.5, 1);
        assert_eq!(make_anchor(&m, 1.0, 3).unwrap(), m);
        assert_eq!(make_anchor(&m, 0.0, 3).unwrap().count(), 0);
        assert!(make_anchor(&m, 0.5, 3).unwrap().is_subset_of(&m));
        assert!(make_anchor(&m, 1.5, 3).is_err());
    }

    #[test]
    fn anchor_size_binomial_moments() {
        let m = Mask::ones(25, 40);
        let n = 200;
        let mean = (0..n)
            .map(|s| make_anchor(&m, 0.8, s).unwrap().count() as f64)
            .sum::<f64>()
            / n as f64;
        let band = 3.0 * (1000.0f64 * 0.8 * 0.2).sqrt();
        assert!((mean - 800.0).abs() <= band, "mean {mean}");
    }

    #[test]
    fn guidance_loss_examples() {
        let y = Mask::new(2, 2, vec![1, 0, 1, 0]).unwrap();
        let half = guidance_loss(&[0.5; 4], &y, 1e-6).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        let good = guidance_loss(&[0.9, 0.1, 0.9, 0.1], &y, 1e-6).unwrap();
        assert!((good - 0.105_360_515_657_826_3).abs() < 1e-12);
        let perfect = guidance_loss(&[1.0, 0.0, 1.0, 0.0], &y, 1e-6).unwrap();
        assert!((perfect - -(1.0f64 - 1e-6).ln()).abs() < 1e-15);
        assert!((perfect - 1e-6).abs() < 1e-11);
        assert!(guidance_loss(&[0.5; 3], &y, 1e-6).is_err());
    }

    #[test]
    fn guidance_loss_gradient_matches_fd() {
        let y = Mask::new(1, 3, vec![1, 0, 1]).unwrap();
        let p = [0.3, 0.6, 0.8];
        let (_, g) = guidance_loss_grad(&p, &y, 1e-6).unwrap();
        for i in 0..3 {
            let mut a = p;
            let mut b = p;
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (guidance_loss(&a, &y, 1e-6).unwrap() - guidance_loss(&b, &y, 1e-6).unwrap())
                / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_scale_matches_unconditional() {
        let prior = random_prior(2);
        let m = random_mask(5, 6, 0.6, 4);
        let cfg = GuidanceConfig {
            scale: 0.0,
            steps: 6,
            ..Default::default()
        };
        let seeds = [10, 11, 12];
        let guided = guided_sample_batch(&prior, &m, &cfg, &seeds).unwrap();
        let plain = sample_unconditional_batch(&prior, 5, 6, 6, &seeds).unwrap();
        for (g, p) in guided.iter().zip(&plain) {
            assert_eq!(&g.mask, p);
        }
    }

    #[test]
    fn guidance_gradient_matches_fd() {
        let prior = random_prior(5);
        let (h, w) = (4, 5);
        let m = random_mask(h, w, 0.6, 6);
        let y = make_anchor(&m, 0.8, 7).unwrap();
        let mut r = rng::seeded(8);
        let mut x: Vec<f64> = (0..2 * h * w).map(|_| StandardNormal.sample(&mut r)).collect();
        let t = 0.6;
        let (_, g, _) = guidance_gradient_batch(&prior, &x, t, &[y.clone()], 1e-6).unwrap();
        let loss_at = |x: &[f64]| {
            let e = prior.predict(x, t, h, w).unwrap();
            guidance_loss(&e[..h * w], &y, 1e-6).unwrap()
        };
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + 1e-5;
            let lp = loss_at(&x);
            x[i] = orig - 1e-5;
            let lm = loss_at(&x);
            x[i] = orig;
            let fd = (lp - lm) / 2e-5;
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            assert!(rel <= 1e-4, "pixel {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn guided_output_is_valid_and_deterministic() {
        let prior = random_prior(3);
        let m = random_mask(6, 6, 0.5, 9);
        let cfg = GuidanceConfig {
            steps: 5,
            seed: 21,
            ..Default::default()
        };
        let a = guided_sample(&prior, &m, &cfg).unwrap();
        let b = guided_sample(&prior, &m, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.anchor.is_subset_of(&m));
        assert_eq!(a.mask.len(), 36);
    }

    #[test]
    fn ensemble_stats_of_constant_ensemble() {
        let m = random_mask(3, 3, 0.5, 1);
        let (mean, std) = ensemble_stats(&[m.clone(), m.clone()]).unwrap();
        assert_eq!(mean, m.to_f64());
        assert!(std.iter().all(|&s| s == 0.0));
        let (mean, std) = ensemble_stats(&[Mask::ones(1, 1), Mask::zeros(1, 1)]).unwrap();
        assert_eq!((mean[0], std[0]), (0.5, 0.5));
    }

    #[test]
    fn config_validation() {
        assert!(GuidanceConfig::default().validate().is_ok());
        assert!(GuidanceConfig { rho: 0.0, ..Default::default() }.validate().is_err());
        assert!(GuidanceConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(GuidanceConfig { scale: -1.0, ..Default::default() }.validate().is_err());
    }
}
