//! Variance-preserving noise schedule and the continuous-time updates built
//! on it: forward corruption, the deterministic reverse step, forward
//! re-noising and the Tweedie score.
//!
//! `α(t) = √(1−t)`, `σ(t) = √t`. Model evaluations happen on
//! `[t_min, 1]`; `t = 0` is accepted only as the clean endpoint of a
//! reverse trajectory (α = 1, σ = 0).

use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};

pub const DEFAULT_T_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    VpLinear,
}

/// Which reverse update [`NoiseSchedule::ode_step`] applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OdeUpdate {
    /// `α' x̂₀ + σ' (x − α x̂₀)/σ`.
    #[default]
    Standard,
    /// Compatibility form `α' x̂₀ + σ' (α x̂₀ − x)/σ²`. Not a fixed point at
    /// `t' = t`; kept only to reproduce the alternative update.
    Printed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_min: f64,
    pub kind: ScheduleKind,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            t_min: DEFAULT_T_MIN,
            kind: ScheduleKind::VpLinear,
        }
    }
}

impl NoiseSchedule {
    pub fn new(t_min: f64) -> Result<Self> {
        if !(t_min > 0.0 && t_min < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "t_min must lie in (0,1), got {t_min}"
            )));
        }
        Ok(Self {
            t_min,
            kind: ScheduleKind::VpLinear,
        })
    }

    fn check_t(&self, t: f64) -> Result<()> {
        if t == 0.0 || (t >= self.t_min && t <= 1.0) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "time {t} outside [{}, 1]",
                self.t_min
            )))
        }
    }

    /// `(α_t, σ_t)`.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        self.check_t(t)?;
        Ok(self.alpha_sigma_raw(t))
    }

    /// Coefficients for any `t ∈ [0, 1]`, including times below `t_min`.
    pub fn alpha_sigma_raw(&self, t: f64) -> (f64, f64) {
        match self.kind {
            ScheduleKind::VpLinear => ((1.0 - t).sqrt(), t.sqrt()),
        }
    }

    /// Same as [`alpha_sigma`](Self::alpha_sigma) but for model-evaluation
    /// times, which must be strictly inside `[t_min, 1]`.
    pub fn alpha_sigma_eval(&self, t: f64) -> Result<(f64, f64)> {
        if t == 0.0 {
            return Err(Error::InvalidArgument(
                "model evaluation requires t >= t_min".into(),
            ));
        }
        self.alpha_sigma(t)
    }

    /// `x_t = α_t x0 + σ_t ε`.
    pub fn forward_corrupt(&self, x0: &[f64], t: f64, eps: &[f64]) -> Result<Vec<f64>> {
        dim_check("forward_corrupt eps", x0.len(), eps.len())?;
        let (a, s) = self.alpha_sigma(t)?;
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
    }

    /// Deterministic reverse step from `t` to `t_next ≤ t` given a clean
    /// estimate `x0_hat`.
    pub fn ode_step(
        &self,
        x_t: &[f64],
        x0_hat: &[f64],
        t: f64,
        t_next: f64,
    ) -> Result<Vec<f64>> {
        self.ode_step_with(OdeUpdate::Standard, x_t, x0_hat, t, t_next)
    }

    pub fn ode_step_with(
        &self,
        update: OdeUpdate,
        x_t: &[f64],
        x0_hat: &[f64],
        t: f64,
        t_next: f64,
    ) -> Result<Vec<f64>> {
        dim_check("ode_step x0_hat", x_t.len(), x0_hat.len())?;
        if t_next > t {
            return Err(Error::InvalidArgument(format!(
                "ode_step runs backward in time: t_next={t_next} > t={t}"
            )));
        }
        let (a, s) = self.alpha_sigma_eval(t)?;
        let (a2, s2) = self.alpha_sigma(t_next)?;
        if t_next == t {
            return Ok(x_t.to_vec());
        }
        Ok(match update {
            OdeUpdate::Standard => x_t
                .iter()
                .zip(x0_hat)
                .map(|(&x, &x0)| a2 * x0 + s2 * (x - a * x0) / s)
                .collect(),
            OdeUpdate::Printed => x_t
                .iter()
                .zip(x0_hat)
                .map(|(&x, &x0)| a2 * x0 + s2 * (a * x0 - x) / (s * s))
                .collect(),
        })
    }

    /// Step given an explicit noise estimate: `α' x̂₀ + σ' ε`.
    pub fn step_with_eps(&self, x0_hat: &[f64], eps: &[f64], t_next: f64) -> Result<Vec<f64>> {
        dim_check("step_with_eps eps", x0_hat.len(), eps.len())?;
        let (a2, s2) = self.alpha_sigma(t_next)?;
        Ok(x0_hat.iter().zip(eps).map(|(x, e)| a2 * x + s2 * e).collect())
    }

    /// Forward jump from `t` to `t_up ≥ t` whose marginal matches
    /// forward corruption of the same clean signal at `t_up`.
    pub fn renoise(&self, x_t: &[f64], t: f64, t_up: f64, eps: &[f64]) -> Result<Vec<f64>> {
        dim_check("renoise eps", x_t.len(), eps.len())?;
        if t_up < t {
            return Err(Error::InvalidArgument(format!(
                "renoise must move forward in time: t_up={t_up} < t={t}"
            )));
        }
        let (a, s) = self.alpha_sigma(t)?;
        let (a_up, s_up) = self.alpha_sigma(t_up)?;
        if a == 0.0 {
            // Already pure noise; only t_up = 1 is reachable.
            return Ok(x_t.to_vec());
        }
        let ratio = a_up / a;
        let radicand = s_up * s_up - ratio * ratio * s * s;
        if radicand < -1e-12 {
            return Err(Error::Numerical(format!(
                "renoise radicand negative ({radicand}) between t={t} and t_up={t_up}"
            )));
        }
        let scale = radicand.max(0.0).sqrt();
        Ok(x_t
            .iter()
            .zip(eps)
            .map(|(x, e)| ratio * x + scale * e)
            .collect())
    }

    /// Score estimate `(α κ ê − x)/σ²`.
    pub fn tweedie_score(
        &self,
        x_t: &[f64],
        e_hat: &[f64],
        t: f64,
        kappa: f64,
    ) -> Result<Vec<f64>> {
        dim_check("tweedie_score e_hat", x_t.len(), e_hat.len())?;
        if let Some(e) = e_hat.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return Err(Error::InvalidArgument(format!(
                "probability {e} outside [0,1]"
            )));
        }
        let (a, s) = self.alpha_sigma_eval(t)?;
        let s2 = s * s;
        Ok(x_t
            .iter()
            .zip(e_hat)
            .map(|(x, e)| (a * kappa * e - x) / s2)
            .collect())
    }

    /// `n + 1` times uniform from 1 down to `t_min`.
    pub fn time_grid(&self, n: usize) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::InvalidArgument("time grid needs n >= 1".into()));
        }
        let span = 1.0 - self.t_min;
        Ok((0..=n)
            .map(|i| {
                if i == n {
                    self.t_min
                } else {
                    1.0 - span * i as f64 / n as f64
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    fn s() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    #[test]
    fn alpha_sigma_examples() {
        let (a, b) = s().alpha_sigma(0.5).unwrap();
        assert_eq!(a, 0.5f64.sqrt());
        assert_eq!(b, 0.5f64.sqrt());
        assert_eq!(s().alpha_sigma(1.0).unwrap(), (0.0, 1.0));
        let (a, b) = s().alpha_sigma(0.36).unwrap();
        assert!((a - 0.8).abs() < 1e-15 && (b - 0.6).abs() < 1e-15);
        assert!(s().alpha_sigma(1.5).is_err());
        assert!(s().alpha_sigma(1e-4).is_err());
        assert!(s().alpha_sigma(-0.1).is_err());
        assert!(NoiseSchedule::new(0.0).is_err());
    }

    #[test]
    fn variance_preserving_and_monotone() {
        let sched = s();
        let mut prev = (f64::INFINITY, -1.0);
        for i in 0..1000 {
            let t = sched.t_min + (1.0 - sched.t_min) * i as f64 / 999.0;
            let (a, b) = sched.alpha_sigma(t).unwrap();
            assert!((a * a + b * b - 1.0).abs() < 1e-12);
            assert!(a <= prev.0 && b >= prev.1);
            prev = (a, b);
        }
    }

    #[test]
    fn forward_corrupt_examples() {
        let x = s().forward_corrupt(&[2.0], 0.36, &[1.0]).unwrap();
        assert!((x[0] - 2.2).abs() < 1e-12);
        let x = s().forward_corrupt(&[3.0], DEFAULT_T_MIN, &[0.0]).unwrap();
        assert!((x[0] - 3.0 * (1.0 - DEFAULT_T_MIN).sqrt()).abs() < 1e-15);
        assert!(s().forward_corrupt(&[1.0, 2.0], 0.5, &[1.0]).is_err());
    }

    #[test]
    fn forward_corrupt_moments() {
        let n = 100_000;
        let mut r = rng::seeded(11);
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        let x = s().forward_corrupt(&vec![0.0; n], 0.5, &eps).unwrap();
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Standard errors: mean √(0.5/n), variance 0.5·√(2/n).
        assert!(mean.abs() < 3.0 * (0.5 / n as f64).sqrt());
        assert!((var - 0.5).abs() < 3.0 * 0.5 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn ode_step_examples() {
        let sched = s();
        let x = vec![0.3, -1.2];
        assert_eq!(sched.ode_step(&x, &[1.0, 2.0], 0.4, 0.4).unwrap(), x);

        let out = sched.ode_step(&[2.2], &[2.0], 0.36, 0.04).unwrap();
        let expected = (0.96f64).sqrt() * 2.0 + 0.2 * (2.2 - 1.6) / 0.6;
        assert!((out[0] - expected).abs() < 1e-12);
        assert!((out[0] - 2.1596).abs() < 1e-4);

        // Consistent x̂₀ keeps the same ε.
        let (x0, eps) = (1.7, -0.4);
        let xt = sched.forward_corrupt(&[x0], 0.7, &[eps]).unwrap();
        let out = sched.ode_step(&xt, &[x0], 0.7, 0.2).unwrap();
        let want = sched.forward_corrupt(&[x0], 0.2, &[eps]).unwrap();
        assert!((out[0] - want[0]).abs() < 1e-12);

        assert!(sched.ode_step(&x, &[1.0, 2.0], 0.4, 0.5).is_err());
    }

    #[test]
    fn printed_update_is_not_a_fixed_point() {
        let out = s()
            .ode_step_with(OdeUpdate::Printed, &[2.2], &[2.0], 0.36, 0.36)
            .unwrap();
        assert_eq!(out[0], 2.2);
        let out = s()
            .ode_step_with(OdeUpdate::Printed, &[2.2], &[2.0], 0.36, 0.35)
            .unwrap();
        let (a2, s2) = s().alpha_sigma(0.35).unwrap();
        let expected = a2 * 2.0 + s2 * (0.8 * 2.0 - 2.2) / 0.36;
        assert!((out[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn ode_refinement_matches_single_step() {
        let sched = s();
        let x0 = vec![0.8, -0.3, 4.0];
        let xt = vec![0.1, 0.5, -2.0];
        let single = sched.ode_step(&xt, &x0, 0.9, 0.05).unwrap();
        let mut x = xt.clone();
        let n = 64;
        for i in 0..n {
            let t = 0.9 - 0.85 * i as f64 / n as f64;
            let tn = 0.9 - 0.85 * (i + 1) as f64 / n as f64;
            x = sched.ode_step(&x, &x0, t, tn).unwrap();
        }
        for (a, b) in x.iter().zip(&single) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn renoise_examples() {
        let sched = s();
        let x = vec![0.4, -0.9];
        let out = sched.renoise(&x, 0.3, 0.3, &[5.0, 5.0]).unwrap();
        for (a, b) in out.iter().zip(&x) {
            assert!((a - b).abs() < 1e-15);
        }
        // From the clean endpoint renoise equals forward corruption.
        let x0 = vec![1.5, -0.5];
        let eps = vec![0.3, 0.7];
        let a = sched.renoise(&x0, 0.0, 0.6, &eps).unwrap();
        let b = sched.forward_corrupt(&x0, 0.6, &eps).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
        // Near-clean start within α(t_min).
        let xt = sched.forward_corrupt(&x0, DEFAULT_T_MIN, &[0.0, 0.0]).unwrap();
        let a = sched.renoise(&xt, DEFAULT_T_MIN, 0.6, &eps).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 0.05);
        }
        assert!(sched.renoise(&x, 0.5, 0.3, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn renoise_marginal_variance() {
        let sched = s();
        let n = 100_000;
        let mut r = rng::seeded(5);
        let e1: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        let e2: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        let xt = sched.forward_corrupt(&vec![0.0; n], 0.25, &e1).unwrap();
        let up = sched.renoise(&xt, 0.25, 0.75, &e2).unwrap();
        let var = up.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((var - 0.75).abs() < 3.0 * 0.75 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn renoise_then_denoise_is_identity() {
        let sched = s();
        let x0 = vec![2.0, -1.0, 0.25];
        let eps = vec![0.1, 0.2, -0.3];
        let (t, t_up) = (0.2, 0.7);
        let xt = sched.forward_corrupt(&x0, t, &eps).unwrap();
        // Fresh noise aligned with ε so that the jump stays on the same
        // trajectory; the exact x̂₀ step must then land back on x_t.
        let (a, sg) = sched.alpha_sigma(t).unwrap();
        let (a_up, s_up) = sched.alpha_sigma(t_up).unwrap();
        let ratio = a_up / a;
        let c = (s_up * s_up - ratio * ratio * sg * sg).sqrt();
        let fresh: Vec<f64> = eps.iter().map(|e| e * (s_up - ratio * sg) / c).collect();
        let up = sched.renoise(&xt, t, t_up, &fresh).unwrap();
        let back = sched.ode_step(&up, &x0, t_up, t).unwrap();
        for (u, v) in back.iter().zip(&xt) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn tweedie_examples() {
        let sched = s();
        let (a, _) = sched.alpha_sigma(0.64).unwrap();
        let x = vec![a * 4.0 * 0.7];
        let sc = sched.tweedie_score(&x, &[0.7], 0.64, 4.0).unwrap();
        assert!(sc[0].abs() < 1e-12);
        let sc = sched.tweedie_score(&[1.2], &[1.0], 0.64, 4.0).unwrap();
        assert!((sc[0] - 1.875).abs() < 1e-12);
        assert!(sched.tweedie_score(&[1.2], &[1.1], 0.64, 4.0).is_err());
    }

    #[test]
    fn tweedie_single_atom_matches_gaussian_score() {
        let sched = s();
        let mu = [4.0, 0.0];
        for &t in &[0.2, 0.5, 0.8] {
            let (a, sg) = sched.alpha_sigma(t).unwrap();
            let x = [0.3, -1.1];
            let analytic: Vec<f64> = x
                .iter()
                .zip(&mu)
                .map(|(x, m)| (a * m - x) / (sg * sg))
                .collect();
            let tw = sched.tweedie_score(&x, &[1.0, 0.0], t, 4.0).unwrap();
            for (u, v) in analytic.iter().zip(&tw) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn time_grid_endpoints() {
        let g = s().time_grid(4).unwrap();
        assert_eq!(g.len(), 5);
        assert_eq!(g[0], 1.0);
        assert_eq!(g[4], DEFAULT_T_MIN);
        assert!(g.windows(2).all(|w| w[1] < w[0]));
        assert!(s().time_grid(0).is_err());
    }
}
