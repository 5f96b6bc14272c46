//! Generalized Pareto distribution primitives and probability-weighted-moment
//! (PWM) fitting.
//!
//! Two fits are provided. [`fit_pwm_hard`] works on an explicitly sorted tail.
//! [`SoftPwmFit`] replaces the tail indicator by a sigmoid gate on soft ranks,
//! which makes the fitted scale and shape differentiable in the weights.
//!
//! The first-order moment uses the plotting coefficient `(n - i) / M`, i.e. the
//! empirical survival fraction of each order statistic within the tail.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smoothing::sigmoid_gate;

/// Below this magnitude the shape is treated as exactly zero.
pub const XI_ZERO_TOL: f64 = 1e-12;
/// Tolerance on `alpha0` and `alpha0 - 2 alpha1` below which a fit is degenerate.
pub const DEGENERATE_TOL: f64 = 1e-12;
/// Minimum gated tail mass for a soft fit.
pub const MIN_TAIL_MASS: f64 = 1e-6;
/// Shape above which a fit is flagged unreliable.
pub const DEFAULT_RELIABILITY_THRESHOLD: f64 = 0.7;
/// Slack on the `r_i <= n - M` location test, absorbing rounding in soft ranks.
pub const RANK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdParams {
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
    pub reliable: bool,
}

impl GpdParams {
    /// Builds parameters, flagging `reliable` against the default threshold.
    pub fn new(mu: f64, sigma: f64, xi: f64) -> Result<Self> {
        Self::with_threshold(mu, sigma, xi, DEFAULT_RELIABILITY_THRESHOLD)
    }

    pub fn with_threshold(mu: f64, sigma: f64, xi: f64, threshold: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() || !xi.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "GPD parameters must be finite with sigma > 0 (mu={mu}, sigma={sigma}, xi={xi})"
            )));
        }
        Ok(Self {
            mu,
            sigma,
            xi,
            reliable: xi <= threshold,
        })
    }

    fn is_exponential(&self) -> bool {
        self.xi.abs() < XI_ZERO_TOL
    }

    /// Upper end of the support (infinite for `xi >= 0`).
    pub fn upper_bound(&self) -> f64 {
        if self.xi < 0.0 && !self.is_exponential() {
            self.mu - self.sigma / self.xi
        } else {
            f64::INFINITY
        }
    }
}

/// Size of the replaced tail for a sample of `n` weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TailSpec {
    pub n: usize,
    pub m: usize,
}

impl TailSpec {
    /// Soft rank at which the tail gate is centred.
    ///
    /// Hard ranks are integers, so the midpoint between the last body rank
    /// `n - M` and the first tail rank `n - M + 1` separates them; with a steep
    /// gate this recovers the indicator exactly on both sides.
    pub fn gate_center(&self) -> f64 {
        (self.n - self.m) as f64 + 0.5
    }

    /// Largest rank that still belongs to the body.
    pub fn body_max_rank(&self) -> f64 {
        (self.n - self.m) as f64
    }
}

/// `M = min(floor(n / 5), floor(3 sqrt(n)))`, at least 1.
pub fn tail_size(n: usize) -> Result<TailSpec> {
    if n < 3 {
        return Err(Error::InvalidInput(format!(
            "tail_size: need at least 3 weights, got {n}"
        )));
    }
    let by_fraction = n / 5;
    let by_sqrt = (9 * n as u64).isqrt() as usize;
    let m = by_fraction.min(by_sqrt).max(1);
    Ok(TailSpec { n, m })
}

/// Distribution function of the GPD.
pub fn gpd_cdf(w: f64, p: &GpdParams) -> Result<f64> {
    let upper = p.upper_bound();
    if !(w >= p.mu) || w > upper {
        return Err(Error::Domain {
            value: w,
            lower: p.mu,
            upper,
        });
    }
    let x = (w - p.mu) / p.sigma;
    if p.is_exponential() {
        return Ok(-(-x).exp_m1());
    }
    // 1 - (1 + xi x)^(-1/xi), written through log1p/expm1 for accuracy.
    let t = (p.xi * x).ln_1p();
    Ok(-(-t / p.xi).exp_m1())
}

/// Inverse of [`gpd_cdf`].
pub fn gpd_quantile(prob: f64, p: &GpdParams) -> Result<f64> {
    if !(0.0..1.0).contains(&prob) {
        return Err(Error::Domain {
            value: prob,
            lower: 0.0,
            upper: 1.0,
        });
    }
    Ok(quantile_unchecked(prob, p.mu, p.sigma, p.xi))
}

/// `(1 - p)^(-xi) - 1) / xi` with its exponential limit; `t = -ln(1 - p)`.
fn excess_factor(t: f64, xi: f64) -> f64 {
    if xi.abs() < XI_ZERO_TOL {
        t
    } else {
        (xi * t).exp_m1() / xi
    }
}

pub(crate) fn quantile_unchecked(prob: f64, mu: f64, sigma: f64, xi: f64) -> f64 {
    let t = -(-prob).ln_1p();
    mu + sigma * excess_factor(t, xi)
}

/// Partial derivatives of the quantile function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileGrad {
    pub value: f64,
    pub d_prob: f64,
    pub d_mu: f64,
    pub d_sigma: f64,
    pub d_xi: f64,
}

pub(crate) fn quantile_with_grad(prob: f64, mu: f64, sigma: f64, xi: f64) -> QuantileGrad {
    let t = -(-prob).ln_1p();
    let f = excess_factor(t, xi);
    // d/dxi of expm1(xi t)/xi; series near xi t = 0 avoids cancellation.
    let df_dxi = if (xi * t).abs() < 1e-4 {
        t * t / 2.0 + xi * t * t * t / 3.0 + xi * xi * t.powi(4) / 8.0
    } else {
        (xi * t * (xi * t).exp() - (xi * t).exp_m1()) / (xi * xi)
    };
    // dt/dp = 1/(1-p); df/dt = exp(xi t).
    let d_prob = sigma * (xi * t).exp() / (1.0 - prob);
    QuantileGrad {
        value: mu + sigma * f,
        d_prob,
        d_mu: 1.0,
        d_sigma: f,
        d_xi: sigma * df_dxi,
    }
}

/// Scale and shape from the two probability-weighted moments.
pub(crate) fn pwm_scale_shape(alpha0: f64, alpha1: f64) -> Result<(f64, f64)> {
    let denom = alpha0 - 2.0 * alpha1;
    if !(alpha0 > DEGENERATE_TOL) {
        return Err(Error::DegenerateFit(format!(
            "alpha0 = {alpha0} is not positive"
        )));
    }
    if !(denom > DEGENERATE_TOL) {
        return Err(Error::DegenerateFit(format!(
            "alpha0 - 2 alpha1 = {denom} is not positive"
        )));
    }
    let sigma = 2.0 * alpha0 * alpha1 / denom;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::DegenerateFit(format!("scale estimate {sigma} is not positive")));
    }
    Ok((sigma, 2.0 - alpha0 / denom))
}

/// Jacobian of `(sigma, xi)` with respect to `(alpha0, alpha1)`.
fn pwm_scale_shape_grad(alpha0: f64, alpha1: f64) -> [[f64; 2]; 2] {
    let d = alpha0 - 2.0 * alpha1;
    let d2 = d * d;
    [
        [-4.0 * alpha1 * alpha1 / d2, 2.0 * alpha0 * alpha0 / d2],
        [2.0 * alpha1 / d2, -2.0 * alpha0 / d2],
    ]
}

/// PWM fit to the `M` largest weights, given ascending.
///
/// `mu_hat` is the `(M+1)`-th largest weight. `n` is the full sample size; the
/// tail entry of overall rank `i` gets coefficient `(n - i) / M`.
pub fn fit_pwm_hard(tail_sorted: &[f64], mu_hat: f64, n: usize, m: usize) -> Result<GpdParams> {
    if tail_sorted.len() != m || m == 0 || m >= n {
        return Err(Error::InvalidInput(format!(
            "fit_pwm_hard: tail has {} entries, expected M = {m} with 0 < M < n = {n}",
            tail_sorted.len()
        )));
    }
    if !mu_hat.is_finite() || tail_sorted.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidInput("fit_pwm_hard: non-finite input".into()));
    }
    if tail_sorted.windows(2).any(|p| p[0] > p[1]) || tail_sorted[0] < mu_hat {
        return Err(Error::InvalidInput(
            "fit_pwm_hard: tail must be ascending and bounded below by mu_hat".into(),
        ));
    }
    let mf = m as f64;
    let mut alpha0 = 0.0;
    let mut alpha1 = 0.0;
    for (k, &w) in tail_sorted.iter().enumerate() {
        let excess = w - mu_hat;
        // Overall rank i = n - M + k + 1, so n - i = M - k - 1.
        let coeff = (m - k - 1) as f64 / mf;
        alpha0 += excess;
        alpha1 += coeff * excess;
    }
    alpha0 /= mf;
    alpha1 /= mf;
    let (sigma, xi) = pwm_scale_shape(alpha0, alpha1)?;
    GpdParams::new(mu_hat, sigma, xi)
}

/// Differentiable PWM fit on soft ranks, keeping what the backward pass needs.
#[derive(Debug, Clone)]
pub struct SoftPwmFit {
    pub params: GpdParams,
    /// Index whose weight serves as the location.
    pub location_index: usize,
    /// True when no soft rank fell inside the body and the smallest was used.
    pub location_fallback: bool,
    pub gates: Vec<f64>,
    pub tail_mass: f64,
    pub alpha0: f64,
    pub alpha1: f64,
    kappa: f64,
    spec: TailSpec,
    excess: Vec<f64>,
    coeff: Vec<f64>,
}

/// Gradients of a soft fit with respect to its inputs.
#[derive(Debug, Clone)]
pub struct SoftPwmGrad {
    pub d_weights: Vec<f64>,
    pub d_ranks: Vec<f64>,
}

impl SoftPwmFit {
    pub fn fit(w: &[f64], ranks: &[f64], spec: TailSpec, kappa: f64) -> Result<Self> {
        let n = w.len();
        if ranks.len() != n || spec.n != n {
            return Err(Error::Shape(format!(
                "fit_pwm_soft: {n} weights, {} ranks, tail spec for n = {}",
                ranks.len(),
                spec.n
            )));
        }
        if !(kappa > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "fit_pwm_soft: kappa must be positive, got {kappa}"
            )));
        }
        let body_max = spec.body_max_rank() + RANK_TOL;
        let mut location = None::<usize>;
        for (i, &r) in ranks.iter().enumerate() {
            if r <= body_max && location.is_none_or(|j| r > ranks[j]) {
                location = Some(i);
            }
        }
        let (location_index, location_fallback) = match location {
            Some(i) => (i, false),
            None => {
                let mut j = 0;
                for (i, &r) in ranks.iter().enumerate() {
                    if r < ranks[j] {
                        j = i;
                    }
                }
                (j, true)
            }
        };
        let mu = w[location_index];
        let center = spec.gate_center();
        let mf = spec.m as f64;
        let nf = n as f64;
        let gates: Vec<f64> = ranks.iter().map(|&r| sigmoid_gate(r, center, kappa)).collect();
        let tail_mass: f64 = gates.iter().sum();
        if !(tail_mass >= MIN_TAIL_MASS) {
            return Err(Error::DegenerateFit(format!(
                "gated tail mass {tail_mass} is empty"
            )));
        }
        let excess: Vec<f64> = w.iter().map(|v| v - mu).collect();
        let coeff: Vec<f64> = ranks.iter().map(|r| (nf - r) / mf).collect();
        let mut s0 = 0.0;
        let mut s1 = 0.0;
        for i in 0..n {
            s0 += gates[i] * excess[i];
            s1 += gates[i] * coeff[i] * excess[i];
        }
        let alpha0 = s0 / tail_mass;
        let alpha1 = s1 / tail_mass;
        let (sigma, xi) = pwm_scale_shape(alpha0, alpha1)?;
        Ok(Self {
            params: GpdParams::new(mu, sigma, xi)?,
            location_index,
            location_fallback,
            gates,
            tail_mass,
            alpha0,
            alpha1,
            kappa,
            spec,
            excess,
            coeff,
        })
    }

    /// Pulls gradients on `(mu, sigma, xi)` and on the gates back to the
    /// weights (direct path) and the ranks.
    ///
    /// The location index is held fixed; its gradient flows to the selected
    /// weight only.
    pub fn backward(&self, d_mu: f64, d_sigma: f64, d_xi: f64, d_gates: &[f64]) -> SoftPwmGrad {
        let n = self.gates.len();
        let jac = pwm_scale_shape_grad(self.alpha0, self.alpha1);
        let d_a0 = d_sigma * jac[0][0] + d_xi * jac[1][0];
        let d_a1 = d_sigma * jac[0][1] + d_xi * jac[1][1];
        let mass = self.tail_mass;
        let mf = self.spec.m as f64;

        let mut d_weights = vec![0.0; n];
        let mut d_ranks = vec![0.0; n];
        let mut d_mu_total = d_mu;
        for i in 0..n {
            let g = self.gates[i];
            let e = self.excess[i];
            let c = self.coeff[i];
            let d_gate = d_gates[i]
                + d_a0 * (e - self.alpha0) / mass
                + d_a1 * (c * e - self.alpha1) / mass;
            let d_excess = (d_a0 * g + d_a1 * g * c) / mass;
            let d_coeff = d_a1 * g * e / mass;
            d_weights[i] += d_excess;
            d_mu_total -= d_excess;
            d_ranks[i] += -d_coeff / mf + d_gate * self.kappa * g * (1.0 - g);
        }
        d_weights[self.location_index] += d_mu_total;
        SoftPwmGrad { d_weights, d_ranks }
    }
}

/// PWM fit with soft-rank gating of the tail.
pub fn fit_pwm_soft(w: &[f64], r: &crate::softrank::RankVector, spec: TailSpec, kappa: f64) -> Result<GpdParams> {
    SoftPwmFit::fit(w, &r.values, spec, kappa).map(|f| f.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::softrank::{hard_rank, soft_rank, SoftRank};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tail_size_examples() {
        assert_eq!(tail_size(5000).unwrap().m, 212);
        assert_eq!(tail_size(25).unwrap().m, 5);
        assert_eq!(tail_size(5).unwrap().m, 1);
        assert_eq!(tail_size(3).unwrap().m, 1);
        assert!(tail_size(2).is_err());
        // floor(3 sqrt n) with a perfect square: n = 100 -> min(20, 30).
        assert_eq!(tail_size(100).unwrap().m, 20);
        // sqrt branch wins for large n: n = 10000 -> min(2000, 300).
        assert_eq!(tail_size(10000).unwrap().m, 300);
    }

    #[test]
    fn cdf_examples() {
        let p = GpdParams::new(2.0, 1.5, 0.0).unwrap();
        assert_eq!(gpd_cdf(2.0, &p).unwrap(), 0.0);
        assert!((gpd_cdf(3.5, &p).unwrap() - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        let p = GpdParams::new(0.0, 1.0, 1.0).unwrap();
        assert!((gpd_cdf(1.0, &p).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cdf_rejects_outside_support() {
        let p = GpdParams::new(0.0, 1.0, -0.5).unwrap();
        assert_eq!(p.upper_bound(), 2.0);
        assert!(matches!(gpd_cdf(-0.1, &p), Err(Error::Domain { .. })));
        assert!(matches!(gpd_cdf(2.1, &p), Err(Error::Domain { .. })));
        assert!((gpd_cdf(2.0, &p).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quantile_examples() {
        let p = GpdParams::new(0.3, 2.0, 0.4).unwrap();
        assert_eq!(gpd_quantile(0.0, &p).unwrap(), 0.3);
        let p = GpdParams::new(1.0, 2.0, 0.0).unwrap();
        let q = gpd_quantile(1.0 - (-1.0f64).exp(), &p).unwrap();
        assert!((q - 3.0).abs() < 1e-12);
        let p = GpdParams::new(0.0, 1.0, 1.0).unwrap();
        assert!((gpd_quantile(0.5, &p).unwrap() - 1.0).abs() < 1e-15);
        assert!(gpd_quantile(1.0, &p).is_err());
        assert!(gpd_quantile(-0.1, &p).is_err());
    }

    #[test]
    fn quantile_cdf_round_trip() {
        for xi in [-0.4, -1e-13, 0.0, 1e-13, 0.2, 0.9, 2.0] {
            let p = GpdParams::new(0.7, 1.3, xi).unwrap();
            for k in 0..200 {
                let prob = k as f64 / 200.0;
                let q = gpd_quantile(prob, &p).unwrap();
                let back = gpd_cdf(q, &p).unwrap();
                assert!((back - prob).abs() < 1e-10, "xi={xi} p={prob} back={back}");
            }
        }
    }

    #[test]
    fn quantile_partials_match_finite_differences() {
        let h = 1e-6;
        for &(p, mu, s, xi) in &[
            (0.3, 0.5, 1.2, 0.25),
            (0.9, -1.0, 0.4, -0.3),
            (0.6, 0.0, 2.0, 1e-9),
            (0.95, 1.0, 1.0, 0.7),
        ] {
            let g = quantile_with_grad(p, mu, s, xi);
            let q = |p: f64, mu: f64, s: f64, xi: f64| quantile_unchecked(p, mu, s, xi);
            let fd_p = (q(p + h, mu, s, xi) - q(p - h, mu, s, xi)) / (2.0 * h);
            let fd_s = (q(p, mu, s + h, xi) - q(p, mu, s - h, xi)) / (2.0 * h);
            let fd_x = (q(p, mu, s, xi + h) - q(p, mu, s, xi - h)) / (2.0 * h);
            assert!((g.d_prob - fd_p).abs() <= 1e-6 * fd_p.abs().max(1.0));
            assert!((g.d_sigma - fd_s).abs() <= 1e-6 * fd_s.abs().max(1.0));
            assert!((g.d_xi - fd_x).abs() <= 1e-6 * fd_x.abs().max(1.0), "{} vs {fd_x}", g.d_xi);
        }
    }

    /// Straight-line evaluation of the PWM estimator on a small tail.
    fn pwm_by_hand(tail: &[f64], mu: f64) -> (f64, f64, f64, f64) {
        let m = tail.len() as f64;
        let a0 = tail.iter().map(|w| w - mu).sum::<f64>() / m;
        let a1 = tail
            .iter()
            .enumerate()
            .map(|(k, w)| ((m - 1.0 - k as f64) / m) * (w - mu))
            .sum::<f64>()
            / m;
        let sigma = 2.0 * a0 * a1 / (a0 - 2.0 * a1);
        let xi = 2.0 - a0 / (a0 - 2.0 * a1);
        (a0, a1, sigma, xi)
    }

    #[test]
    fn fit_pwm_hard_small_tail() {
        let tail = [1.1, 1.5, 3.0];
        let (a0, a1, sigma, xi) = pwm_by_hand(&tail, 1.0);
        assert!((a0 - 2.6 / 3.0).abs() < 1e-12);
        assert!((a1 - 0.7 / 9.0).abs() < 1e-12);
        assert!((sigma - 0.189_583_333_333).abs() < 1e-9);
        assert!((xi - 0.781_25).abs() < 1e-12);
        let fit = fit_pwm_hard(&tail, 1.0, 10, 3).unwrap();
        assert!((fit.sigma - sigma).abs() < 1e-12);
        assert!((fit.xi - xi).abs() < 1e-12);
        assert_eq!(fit.mu, 1.0);
        assert!(!fit.reliable);
    }

    #[test]
    fn fit_pwm_hard_recovers_generating_parameters() {
        let truth = GpdParams::new(0.0, 1.0, 0.2).unwrap();
        let m = 1000;
        let tail: Vec<f64> = (1..=m)
            .map(|k| gpd_quantile((k as f64 - 0.5) / m as f64, &truth).unwrap())
            .collect();
        let fit = fit_pwm_hard(&tail, 0.0, 5000, m).unwrap();
        assert!((fit.sigma - 1.0).abs() <= 0.05, "sigma {}", fit.sigma);
        assert!((fit.xi - 0.2).abs() <= 0.05, "xi {}", fit.xi);
        assert!(fit.reliable);
    }

    #[test]
    fn fit_pwm_hard_degenerate_cases() {
        assert!(matches!(
            fit_pwm_hard(&[2.0, 2.0, 2.0], 2.0, 10, 3),
            Err(Error::DegenerateFit(_))
        ));
        // A single exceedance has zero first-order moment, so sigma = 0.
        assert!(matches!(
            fit_pwm_hard(&[3.0], 1.0, 5, 1),
            Err(Error::DegenerateFit(_))
        ));
        assert!(fit_pwm_hard(&[1.0, 2.0], 1.0, 10, 3).is_err());
    }

    #[test]
    fn fit_pwm_hard_scale_equivariance() {
        let tail = [1.2, 1.3, 1.9, 2.4, 4.0, 7.5];
        let base = fit_pwm_hard(&tail, 1.0, 30, 6).unwrap();
        let c = 3.7;
        let scaled: Vec<f64> = tail.iter().map(|w| 1.0 + c * (w - 1.0)).collect();
        let fit = fit_pwm_hard(&scaled, 1.0, 30, 6).unwrap();
        assert!((fit.sigma - c * base.sigma).abs() < 1e-12 * fit.sigma.abs().max(1.0));
        assert!((fit.xi - base.xi).abs() < 1e-12);
    }

    fn hard_fit_of(w: &[f64]) -> GpdParams {
        let spec = tail_size(w.len()).unwrap();
        let mut sorted = w.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = w.len();
        fit_pwm_hard(&sorted[n - spec.m..], sorted[n - spec.m - 1], n, spec.m).unwrap()
    }

    #[test]
    fn soft_fit_converges_to_hard_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let w: Vec<f64> = (0..100).map(|_| (rng.random::<f64>() * 2.0).exp()).collect();
            let hard = hard_fit_of(&w);
            let mut sorted = w.clone();
            sorted.sort_by(f64::total_cmp);
            let gap = sorted.windows(2).map(|p| p[1] - p[0]).fold(f64::INFINITY, f64::min);
            let r = soft_rank(&w, 1e-6 * gap).unwrap();
            let soft = fit_pwm_soft(&w, &r, tail_size(100).unwrap(), 1e4).unwrap();
            assert!((soft.mu - hard.mu).abs() < 1e-3);
            assert!((soft.sigma - hard.sigma).abs() < 1e-3);
            assert!((soft.xi - hard.xi).abs() < 1e-3);
        }
    }

    #[test]
    fn soft_fit_with_hard_ranks_equals_hard_fit() {
        let w = [0.4, 2.2, 1.1, 0.9, 5.0, 3.3, 0.7, 1.6, 8.0, 2.9, 1.2, 4.1, 0.5, 6.6, 1.9];
        let hard = hard_fit_of(&w);
        let r = hard_rank(&w).unwrap();
        let soft = fit_pwm_soft(&w, &r, tail_size(w.len()).unwrap(), 200.0).unwrap();
        assert!((soft.sigma - hard.sigma).abs() < 1e-12);
        assert!((soft.xi - hard.xi).abs() < 1e-12);
    }

    #[test]
    fn soft_fit_empty_tail_is_degenerate() {
        // Huge epsilon puts every soft rank at the centroid, far below the gate.
        let w: Vec<f64> = (0..50).map(|i| 1.0 + i as f64 * 0.1).collect();
        let r = soft_rank(&w, 1e9).unwrap();
        let err = fit_pwm_soft(&w, &r, tail_size(50).unwrap(), 1e4).unwrap_err();
        assert!(matches!(err, Error::DegenerateFit(_)));
    }

    #[test]
    fn soft_fit_location_fallback() {
        // Ranks all above n - M: no body index exists.
        let w = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ranks = [4.5, 4.6, 4.7, 4.8, 4.9];
        let fit = SoftPwmFit::fit(&w, &ranks, tail_size(5).unwrap(), 1.0).unwrap();
        assert!(fit.location_fallback);
        assert_eq!(fit.location_index, 0);
    }

    fn sigma_of(w: &[f64], eps: f64, kappa: f64) -> f64 {
        let r = soft_rank(w, eps).unwrap();
        fit_pwm_soft(w, &r, tail_size(w.len()).unwrap(), kappa).unwrap().sigma
    }

    #[test]
    fn soft_sigma_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w: Vec<f64> = (0..40).map(|_| (rng.random::<f64>() * 1.5).exp()).collect();
        let (eps, kappa) = (0.05, 2.0);
        let sr = SoftRank::compute(&w, eps).unwrap();
        let fit = SoftPwmFit::fit(&w, &sr.ranks().values, tail_size(40).unwrap(), kappa).unwrap();
        let g = fit.backward(0.0, 1.0, 0.0, &vec![0.0; 40]);
        let through_ranks = sr.vjp(&g.d_ranks).unwrap();
        let analytic: Vec<f64> = g.d_weights.iter().zip(&through_ranks).map(|(a, b)| a + b).collect();

        let h = 1e-6;
        let fd: Vec<f64> = (0..w.len())
            .map(|j| {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[j] += h;
                wm[j] -= h;
                (sigma_of(&wp, eps, kappa) - sigma_of(&wm, eps, kappa)) / (2.0 * h)
            })
            .collect();
        let num: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den <= 1e-4, "rel err {}", num / den);
    }
}
