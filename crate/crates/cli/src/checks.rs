//! Self-check suites run by `verify` and the acceptance target.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use oamp::grids::Mask;
use oamp::mask_prior::{self, train_prior, LossWeighting, PriorTrainConfig, TimeSampling};
use oamp::nnet::{
    forward, forward_batch, input_grad, param_grad, softmax_channels, ConvNetSpec, InitScheme,
    NetParams,
};
use oamp::partitioning::{
    parse_bits, randomized_theorem_campaign, verify_theorem1, CampaignSummary,
    DiscreteMaskDistribution,
};
use oamp::rng;
use oamp::schedule::NoiseSchedule;
use oamp::Result;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn normal_vec(n: usize, r: &mut rng::Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoremReport {
    pub campaign: CampaignSummary,
    /// `P((M_qry)_1 = 1 | M_ctx = 00)` for the uniform support {10, 01, 11}.
    pub hand_case_query_prob: f64,
}

pub fn theorem_suite(trials: usize, d_max: usize, seed: u64) -> Result<(TheoremReport, Check)> {
    let campaign = randomized_theorem_campaign(trials, d_max, seed)?;
    let support = ["10", "01", "11"]
        .iter()
        .map(|s| parse_bits(s, 2))
        .collect::<Result<Vec<_>>>()?;
    let rep = verify_theorem1(&DiscreteMaskDistribution::uniform(2, support)?)?;
    let hand = rep.query_prob("00", 1).unwrap_or(f64::NAN);
    let passed = campaign.violations() == 0 && campaign.rational_mismatches == 0 && hand == 0.5;
    let detail = format!(
        "{} trials, {} violations, {} rational mismatches, hand case {}",
        campaign.trials,
        campaign.violations(),
        campaign.rational_mismatches,
        hand
    );
    Ok((
        TheoremReport {
            campaign,
            hand_case_query_prob: hand,
        },
        check("theorems", passed, detail),
    ))
}

/// Per-pixel shifts applied to both latent channels leave the softmax-fed
/// network output bitwise unchanged. Latents are dyadic and shifts are
/// integers so every addition is exact.
pub fn shift_invariance_suite(n_triples: usize, seed: u64) -> Result<Check> {
    let mut r = rng::stream(seed, "verify/shift");
    let mut failures = 0;
    for k in 0..n_triples {
        let (h, w) = (r.random_range(3..9), r.random_range(3..9));
        let spec = ConvNetSpec::mask_prior().with_hidden(r.random_range(4..17));
        let params = NetParams::init(spec, rng::derive_seed(seed, &format!("verify/shift/{k}")), InitScheme::HeNormalFull)?;
        let x: Vec<f64> = (0..2 * h * w)
            .map(|_| r.random_range(-8192i32..8192) as f64 / 1024.0)
            .collect();
        let mut shifted = x.clone();
        for p in 0..h * w {
            let c = r.random_range(-16i32..=16) as f64;
            shifted[p] += c;
            shifted[h * w + p] += c;
        }
        let t = r.random_range(1e-3..=1.0);
        let a = forward(&params, &softmax_channels(&x, 2), t, h, w)?;
        let b = forward(&params, &softmax_channels(&shifted, 2), t, h, w)?;
        if !a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()) {
            failures += 1;
        }
    }
    Ok(check(
        "shift-invariance",
        failures == 0,
        format!("{failures} of {n_triples} triples differ"),
    ))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central finite differences against backprop for parameters and inputs
/// of every network spec.
pub fn gradient_suite(coords: usize, seed: u64) -> Result<Check> {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut r = rng::stream(seed, "verify/grad");
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for (name, spec) in [("mask-prior", ConvNetSpec::mask_prior()), ("imputer", ConvNetSpec::imputer())] {
        let (h, w, b) = (5, 6, 2);
        let mut params = NetParams::init(spec, r.random(), InitScheme::HeNormalFull)?;
        let n_out = b * spec.out_channels * h * w;
        let wts = normal_vec(n_out, &mut r);
        let tgt = normal_vec(n_out, &mut r);
        let loss = move |o: &[f64]| -> Result<(f64, Vec<f64>)> {
            let n = o.len() as f64;
            let mut l = 0.0;
            let mut d = vec![0.0; o.len()];
            for i in 0..o.len() {
                let e = o[i] - tgt[i];
                l += wts[i] * e * e / n;
                d[i] = 2.0 * wts[i] * e / n;
            }
            Ok((l, d))
        };
        let mut x = normal_vec(b * spec.in_channels * h * w, &mut r);
        let times = [r.random_range(0.05..0.95), r.random_range(0.05..0.95)];
        let (_, gp) = param_grad(&params, &loss, &x, &times, h, w)?;
        let eval = |p: &NetParams, x: &[f64]| -> Result<f64> {
            Ok(loss(&forward_batch(p, x, &times, h, w)?.0)?.0)
        };
        let mut wp: f64 = 0.0;
        for _ in 0..coords {
            let i = r.random_range(0..params.data.len());
            let orig = params.data[i];
            params.data[i] = orig + STEP;
            let lp = eval(&params, &x)?;
            params.data[i] = orig - STEP;
            let lm = eval(&params, &x)?;
            params.data[i] = orig;
            wp = wp.max(rel_err(gp[i], (lp - lm) / (2.0 * STEP)));
        }
        // Input gradient on the first sample of the batch.
        let per_in = spec.in_channels * h * w;
        let per_out = spec.out_channels * h * w;
        let single = |o: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut full = vec![0.0; n_out];
            full[..per_out].copy_from_slice(o);
            let (l, d) = loss(&full)?;
            Ok((l, d[..per_out].to_vec()))
        };
        let (_, gi) = input_grad(&params, &single, &x[..per_in], times[0], h, w)?;
        let mut wi: f64 = 0.0;
        for _ in 0..coords {
            let i = r.random_range(0..per_in);
            let orig = x[i];
            x[i] = orig + STEP;
            let lp = single(&forward(&params, &x[..per_in], times[0], h, w)?)?.0;
            x[i] = orig - STEP;
            let lm = single(&forward(&params, &x[..per_in], times[0], h, w)?)?.0;
            x[i] = orig;
            wi = wi.max(rel_err(gi[i], (lp - lm) / (2.0 * STEP)));
        }
        lines.push(format!("{name}: params {wp:.2e}, inputs {wi:.2e}"));
        worst = worst.max(wp).max(wi);
    }
    Ok(check(
        "gradients",
        worst <= TOL,
        format!("{coords} coordinates each; {}", lines.join("; ")),
    ))
}

/// `α² + σ² = 1`, the `t' = t` fixed point, and a Monte-Carlo check of
/// the renoise marginal against 3-standard-error bands.
pub fn schedule_suite(seed: u64) -> Result<Check> {
    let sched = NoiseSchedule::default();
    let mut worst_id: f64 = 0.0;
    for i in 0..=1000 {
        let t = sched.t_min + (1.0 - sched.t_min) * i as f64 / 1000.0;
        let (a, s) = sched.alpha_sigma(t)?;
        worst_id = worst_id.max((a * a + s * s - 1.0).abs());
    }
    let mut r = rng::stream(seed, "verify/schedule");
    let x = normal_vec(16, &mut r);
    let x0 = normal_vec(16, &mut r);
    let mut fixed = true;
    for &t in &[0.01, 0.3, 0.77, 1.0] {
        fixed &= sched.ode_step(&x, &x0, t, t)? == x;
    }
    let n = 20_000;
    let x0v = 1.5;
    let mut band_ok = true;
    let mut worst_z: f64 = 0.0;
    for &(t, t_up) in &[(0.1, 0.4), (0.3, 0.9), (0.05, 0.06)] {
        let e1 = normal_vec(n, &mut r);
        let e2 = normal_vec(n, &mut r);
        let xt = sched.forward_corrupt(&vec![x0v; n], t, &e1)?;
        let up = sched.renoise(&xt, t, t_up, &e2)?;
        let (a, s) = sched.alpha_sigma(t_up)?;
        let mean = up.iter().sum::<f64>() / n as f64;
        let var = up.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let z_mean = (mean - a * x0v).abs() / (s / (n as f64).sqrt());
        let z_var = (var - s * s).abs() / (s * s * (2.0 / (n - 1) as f64).sqrt());
        worst_z = worst_z.max(z_mean).max(z_var);
        band_ok &= z_mean <= 3.0 && z_var <= 3.0;
    }
    Ok(check(
        "schedule",
        worst_id <= 1e-12 && fixed && band_ok,
        format!("max |α²+σ²−1| {worst_id:.1e}, fixed point {fixed}, worst renoise z {worst_z:.2}"),
    ))
}

/// Tweedie score of a prior trained on one mask against the analytic score
/// of the single-atom Gaussian, at three times. Returns the check and the
/// relative errors.
pub fn tweedie_suite(train_steps: usize, seed: u64) -> Result<(Check, Vec<(f64, f64)>)> {
    let (h, w) = (6, 6);
    let mut r = rng::stream(seed, "verify/tweedie");
    let atom = Mask::new(h, w, (0..h * w).map(|_| r.random_range(0..2u8)).collect())?;
    let out = train_prior(
        std::slice::from_ref(&atom),
        &PriorTrainConfig {
            steps: train_steps,
            batch: 8,
            learning_rate: 3e-3,
            weighting: LossWeighting::Uniform,
            time_sampling: TimeSampling::Uniform,
            net: ConvNetSpec::mask_prior().with_hidden(16),
            seed,
            ..Default::default()
        },
    )?;
    let prior = out.prior;
    let kappa = prior.codec.kappa;
    let x0 = prior.codec.encode(&atom);
    let onehot = mask_prior::one_hot(&atom);
    let mut errs = Vec::new();
    let mut exact_ok = true;
    for &t in &[0.2, 0.5, 0.8] {
        let (a, s) = prior.schedule.alpha_sigma(t)?;
        let (mut num, mut den) = (0.0, 0.0);
        for _ in 0..8 {
            let eps = normal_vec(x0.len(), &mut r);
            let xt = prior.schedule.forward_corrupt(&x0, t, &eps)?;
            let analytic: Vec<f64> = xt.iter().zip(&x0).map(|(x, m)| (a * m - x) / (s * s)).collect();
            let e_hat = prior.predict(&xt, t, h, w)?;
            let est = prior.schedule.tweedie_score(&xt, &e_hat, t, kappa)?;
            num += est.iter().zip(&analytic).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
            den += analytic.iter().map(|v| v * v).sum::<f64>();
            let exact = prior.schedule.tweedie_score(&xt, &onehot, t, kappa)?;
            exact_ok &= exact.iter().zip(&analytic).all(|(u, v)| (u - v).abs() <= 1e-9 * v.abs().max(1.0));
        }
        errs.push((t, (num / den).sqrt()));
    }
    let passed = exact_ok && errs.iter().all(|&(_, e)| e <= 0.05);
    let detail = format!(
        "exact-posterior identity {exact_ok}; trained relative errors {}",
        errs.iter()
            .map(|(t, e)| format!("t={t}: {e:.4}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok((check("tweedie", passed, detail), errs))
}
