//! Importance-weight schemes: raw IPW, truncation, self-normalization, and
//! hard and differentiable Pareto smoothing.
//!
//! Every scheme that is used inside training also records a [`SchemeTape`]
//! so that gradients on the final weights can be pulled back to the raw IPW
//! weights.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::gpd::{self, GpdParams, SoftPwmFit, TailSpec};
use crate::softrank::{argsort_ascending, SoftRank};

/// Lower end of the propensity interval used by the truncation and ignore
/// schemes.
pub const CRUMP_LOW: f64 = 0.1;
/// Upper end of the same interval.
pub const CRUMP_HIGH: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Raw,
    Truncated,
    Normalized,
    /// 0/1 mask dropping instances with propensity outside the interval.
    Ignore,
    ParetoHard,
    ParetoDiff,
    ParetoDiffNormalized,
}

impl Scheme {
    pub const ALL: [Scheme; 7] = [
        Scheme::Raw,
        Scheme::Truncated,
        Scheme::Normalized,
        Scheme::Ignore,
        Scheme::ParetoHard,
        Scheme::ParetoDiff,
        Scheme::ParetoDiffNormalized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Raw => "raw",
            Scheme::Truncated => "truncated",
            Scheme::Normalized => "normalized",
            Scheme::Ignore => "ignore",
            Scheme::ParetoHard => "pareto_hard",
            Scheme::ParetoDiff => "pareto_diff",
            Scheme::ParetoDiffNormalized => "pareto_diff_normalized",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown weighting scheme '{s}'")))
    }
}

/// Outcome of a Pareto-smoothing step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SmoothingDiagnostics {
    pub fit: Option<GpdParams>,
    /// The GPD fit was degenerate and the weights were passed through.
    pub fallback: bool,
    /// The soft location index had to fall back to the smallest soft rank.
    pub location_fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub values: Vec<f64>,
    pub scheme: Scheme,
    pub diagnostics: Option<SmoothingDiagnostics>,
}

impl WeightVector {
    /// Wraps raw weights, checking that they are positive and finite.
    pub fn raw(values: Vec<f64>) -> Result<Self> {
        check_positive(&values)?;
        Ok(Self {
            values,
            scheme: Scheme::Raw,
            diagnostics: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn derived(&self, values: Vec<f64>, scheme: Scheme) -> Self {
        Self {
            values,
            scheme,
            diagnostics: self.diagnostics.clone(),
        }
    }
}

fn check_positive(values: &[f64]) -> Result<()> {
    ensure_finite(values, "weights")?;
    match values.iter().position(|v| *v <= 0.0) {
        Some(i) => Err(Error::InvalidInput(format!(
            "weights must be positive; entry {i} is {}",
            values[i]
        ))),
        None => Ok(()),
    }
}

/// `P(A = a) / P(A = 1 - a)`.
pub fn marginal_ratio(a: u8, p_treated: f64) -> f64 {
    if a == 1 {
        p_treated / (1.0 - p_treated)
    } else {
        (1.0 - p_treated) / p_treated
    }
}

/// IPW weight of one instance given the propensity of its own arm.
pub fn ipw_weight(pi_a: f64, a: u8, p_treated: f64) -> f64 {
    1.0 + marginal_ratio(a, p_treated) * (1.0 / pi_a - 1.0)
}

/// Derivative of [`ipw_weight`] in `pi_a`.
pub fn ipw_weight_grad(pi_a: f64, a: u8, p_treated: f64) -> f64 {
    -marginal_ratio(a, p_treated) / (pi_a * pi_a)
}

/// `w_i = 1 + P(A=a_i)/P(A=1-a_i) (1/pi_{a_i} - 1)`.
pub fn ipw_weights(pi_a: &[f64], a: &[u8], p_treated: f64) -> Result<WeightVector> {
    if pi_a.len() != a.len() {
        return Err(Error::Shape(format!(
            "ipw_weights: {} propensities for {} treatments",
            pi_a.len(),
            a.len()
        )));
    }
    if !(p_treated > 0.0 && p_treated < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "p_treated must lie in (0, 1), got {p_treated}"
        )));
    }
    check_binary(a)?;
    let mut values = Vec::with_capacity(a.len());
    for (i, (&p, &ai)) in pi_a.iter().zip(a).enumerate() {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Positivity { index: i, value: p });
        }
        values.push(ipw_weight(p, ai, p_treated));
    }
    Ok(WeightVector {
        values,
        scheme: Scheme::Raw,
        diagnostics: None,
    })
}

fn check_binary(a: &[u8]) -> Result<()> {
    match a.iter().position(|&v| v > 1) {
        Some(i) => Err(Error::InvalidInput(format!(
            "treatment at index {i} is {}, expected 0 or 1",
            a[i]
        ))),
        None => Ok(()),
    }
}

/// Elementwise clamp to `[lower, upper]`.
pub fn truncate(w: &WeightVector, lower: f64, upper: f64) -> Result<WeightVector> {
    if !(lower > 0.0) || !(upper > 0.0) || lower > upper {
        return Err(Error::InvalidParameter(format!(
            "truncation needs 0 < L <= U, got L = {lower}, U = {upper}"
        )));
    }
    let values = w.values.iter().map(|&v| clamp_weight(v, lower, upper)).collect();
    Ok(w.derived(values, Scheme::Truncated))
}

fn clamp_weight(v: f64, lower: f64, upper: f64) -> f64 {
    if v < lower {
        lower
    } else if v < upper {
        v
    } else {
        upper
    }
}

/// Truncation bounds for arm `a`: the IPW weights at own-arm propensity
/// `CRUMP_HIGH` and `CRUMP_LOW`.
pub fn crump_bounds(a: u8, p_treated: f64) -> (f64, f64) {
    (
        ipw_weight(CRUMP_HIGH, a, p_treated),
        ipw_weight(CRUMP_LOW, a, p_treated),
    )
}

/// 1 where the treatment propensity lies in `[CRUMP_LOW, CRUMP_HIGH]`, else 0.
pub fn ignore_mask(propensity: &[f64]) -> Vec<f64> {
    propensity
        .iter()
        .map(|&p| if (CRUMP_LOW..=CRUMP_HIGH).contains(&p) { 1.0 } else { 0.0 })
        .collect()
}

/// Per-arm counts and means of `values`.
fn group_means(values: &[f64], a: &[u8]) -> Result<[(usize, f64); 2]> {
    let mut acc = [(0usize, 0.0f64); 2];
    for (&v, &ai) in values.iter().zip(a) {
        let g = &mut acc[ai as usize];
        g.0 += 1;
        g.1 += v;
    }
    for (arm, g) in acc.iter_mut().enumerate() {
        if g.0 > 0 {
            g.1 /= g.0 as f64;
            if !(g.1 > 0.0) {
                return Err(Error::EmptyGroup(format!(
                    "treatment group {arm} has zero total weight"
                )));
            }
        }
    }
    Ok(acc)
}

/// Divides each weight by the mean weight of its treatment group.
pub fn self_normalize(w: &WeightVector, a: &[u8]) -> Result<WeightVector> {
    if w.len() != a.len() {
        return Err(Error::Shape(format!(
            "self_normalize: {} weights for {} treatments",
            w.len(),
            a.len()
        )));
    }
    check_binary(a)?;
    if a.is_empty() {
        return Err(Error::EmptyGroup("self_normalize: empty batch".into()));
    }
    let means = group_means(&w.values, a)?;
    let values = w
        .values
        .iter()
        .zip(a)
        .map(|(v, &ai)| v / means[ai as usize].1)
        .collect();
    let scheme = match w.scheme {
        Scheme::ParetoDiff => Scheme::ParetoDiffNormalized,
        _ => Scheme::Normalized,
    };
    Ok(w.derived(values, scheme))
}

/// Smooth stand-in for the indicator `1(i >= j)`.
pub fn sigmoid_gate(i: f64, j: f64, kappa: f64) -> f64 {
    let x = kappa * (i - j);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Replaces the `M` largest weights by GPD quantiles at `(m - 1/2) / M`.
///
/// A degenerate fit returns the input unchanged with the fallback flag set.
pub fn pareto_smooth_hard(w: &WeightVector) -> Result<WeightVector> {
    check_positive(&w.values)?;
    let n = w.len();
    let spec = gpd::tail_size(n)?;
    let order = argsort_ascending(&w.values);
    let sorted: Vec<f64> = order.iter().map(|&i| w.values[i]).collect();
    let body_end = n - spec.m;
    let mu_hat = sorted[body_end - 1];
    let mut out = w.derived(w.values.clone(), Scheme::ParetoHard);
    match gpd::fit_pwm_hard(&sorted[body_end..], mu_hat, n, spec.m) {
        Ok(fit) => {
            for m in 1..=spec.m {
                let prob = (m as f64 - 0.5) / spec.m as f64;
                out.values[order[body_end + m - 1]] = gpd::gpd_quantile(prob, &fit)?;
            }
            out.diagnostics = Some(SmoothingDiagnostics {
                fit: Some(fit),
                ..Default::default()
            });
        }
        Err(Error::DegenerateFit(msg)) => {
            log::debug!("hard Pareto smoothing fell back: {msg}");
            out.diagnostics = Some(SmoothingDiagnostics {
                fallback: true,
                ..Default::default()
            });
        }
        Err(e) => return Err(e),
    }
    Ok(out)
}

/// Differentiable Pareto smoothing with everything its backward pass needs.
#[derive(Debug, Clone)]
pub struct DiffParetoSmoothing {
    pub output: Vec<f64>,
    pub diagnostics: SmoothingDiagnostics,
    state: Option<DiffState>,
}

#[derive(Debug, Clone)]
struct DiffState {
    ranks: SoftRank,
    fit: SoftPwmFit,
    spec: TailSpec,
    input: Vec<f64>,
    quantiles: Vec<f64>,
    /// dQ/dp, zero where the probability was clamped.
    d_prob: Vec<f64>,
    d_sigma: Vec<f64>,
    d_xi: Vec<f64>,
}

impl DiffParetoSmoothing {
    pub fn forward(w: &[f64], epsilon: f64, kappa: f64) -> Result<Self> {
        check_positive(w)?;
        if !(kappa > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "kappa must be positive, got {kappa}"
            )));
        }
        let n = w.len();
        let spec = gpd::tail_size(n)?;
        let ranks = SoftRank::compute(w, epsilon)?;
        let fit = match SoftPwmFit::fit(w, &ranks.ranks().values, spec, kappa) {
            Ok(fit) => fit,
            Err(Error::DegenerateFit(msg)) => {
                log::debug!("differentiable Pareto smoothing fell back: {msg}");
                return Ok(Self {
                    output: w.to_vec(),
                    diagnostics: SmoothingDiagnostics {
                        fallback: true,
                        ..Default::default()
                    },
                    state: None,
                });
            }
            Err(e) => return Err(e),
        };
        let GpdParams { mu, sigma, xi, .. } = fit.params;
        let mf = spec.m as f64;
        let cap = 1.0 - 0.5 / mf;
        let offset = spec.body_max_rank() + 0.5;
        let mut output = Vec::with_capacity(n);
        let mut quantiles = Vec::with_capacity(n);
        let mut d_prob = Vec::with_capacity(n);
        let mut d_sigma = Vec::with_capacity(n);
        let mut d_xi = Vec::with_capacity(n);
        for (i, &r) in ranks.ranks().values.iter().enumerate() {
            let raw = (r - offset) / mf;
            let (prob, free) = if raw <= 0.0 {
                (0.0, false)
            } else if raw >= cap {
                (cap, false)
            } else {
                (raw, true)
            };
            let q = gpd::quantile_with_grad(prob, mu, sigma, xi);
            let g = fit.gates[i];
            output.push(g * q.value + (1.0 - g) * w[i]);
            quantiles.push(q.value);
            d_prob.push(if free { q.d_prob } else { 0.0 });
            d_sigma.push(q.d_sigma);
            d_xi.push(q.d_xi);
        }
        if let Some(i) = output.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Numerical(format!(
                "smoothed weight {i} is {} (fit {:?})",
                output[i], fit.params
            )));
        }
        Ok(Self {
            output,
            diagnostics: SmoothingDiagnostics {
                fit: Some(fit.params),
                fallback: false,
                location_fallback: fit.location_fallback,
            },
            state: Some(DiffState {
                ranks,
                fit,
                spec,
                input: w.to_vec(),
                quantiles,
                d_prob,
                d_sigma,
                d_xi,
            }),
        })
    }

    /// Gradient of `upstream . output` with respect to the input weights.
    pub fn vjp(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        let Some(st) = &self.state else {
            return Ok(upstream.to_vec());
        };
        let n = st.input.len();
        if upstream.len() != n {
            return Err(Error::Shape(format!(
                "smoothing vjp: upstream length {} != {n}",
                upstream.len()
            )));
        }
        let mf = st.spec.m as f64;
        let mut d_w = vec![0.0; n];
        let mut d_gates = vec![0.0; n];
        let mut d_r = vec![0.0; n];
        let (mut d_mu, mut d_sigma, mut d_xi) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let u = upstream[i];
            let g = st.fit.gates[i];
            d_gates[i] = u * (st.quantiles[i] - st.input[i]);
            d_w[i] += u * (1.0 - g);
            let dq = u * g;
            d_mu += dq;
            d_sigma += dq * st.d_sigma[i];
            d_xi += dq * st.d_xi[i];
            d_r[i] += dq * st.d_prob[i] / mf;
        }
        let fit_grad = st.fit.backward(d_mu, d_sigma, d_xi, &d_gates);
        for i in 0..n {
            d_w[i] += fit_grad.d_weights[i];
            d_r[i] += fit_grad.d_ranks[i];
        }
        let through_ranks = st.ranks.vjp(&d_r)?;
        for i in 0..n {
            d_w[i] += through_ranks[i];
        }
        Ok(d_w)
    }
}

/// Differentiable Pareto smoothing of `w`.
pub fn pareto_smooth_diff(w: &WeightVector, epsilon: f64, kappa: f64) -> Result<WeightVector> {
    let sm = DiffParetoSmoothing::forward(&w.values, epsilon, kappa)?;
    Ok(WeightVector {
        values: sm.output,
        scheme: Scheme::ParetoDiff,
        diagnostics: Some(sm.diagnostics),
    })
}

/// Parameters for [`apply_scheme`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    /// Training-split treated fraction.
    pub p_treated: f64,
    /// Soft-rank regularization.
    pub epsilon: f64,
    /// Gate steepness.
    pub kappa: f64,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            p_treated: 0.5,
            epsilon: 0.1,
            kappa: 10.0,
        }
    }
}

/// Recorded steps of a scheme application, for backpropagation.
#[derive(Debug, Clone)]
pub struct SchemeTape {
    stages: Vec<Stage>,
}

#[derive(Debug, Clone)]
enum Stage {
    /// d out / d in = mask.
    Mask(Vec<f64>),
    /// Output no longer depends on the input.
    Constant,
    Pareto(Box<DiffParetoSmoothing>),
    Normalize {
        input: Vec<f64>,
        a: Vec<u8>,
        means: [(usize, f64); 2],
    },
}

impl SchemeTape {
    /// Pulls `upstream` (gradient on the final weights) back to the raw weights.
    pub fn vjp(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        let mut grad = upstream.to_vec();
        for stage in self.stages.iter().rev() {
            grad = match stage {
                Stage::Mask(mask) => grad.iter().zip(mask).map(|(g, m)| g * m).collect(),
                Stage::Constant => vec![0.0; grad.len()],
                Stage::Pareto(sm) => sm.vjp(&grad)?,
                Stage::Normalize { input, a, means } => {
                    let mut dot = [0.0; 2];
                    for i in 0..grad.len() {
                        dot[a[i] as usize] += grad[i] * input[i];
                    }
                    (0..grad.len())
                        .map(|i| {
                            let (count, mean) = means[a[i] as usize];
                            grad[i] / mean - dot[a[i] as usize] / (mean * mean * count as f64)
                        })
                        .collect()
                }
            };
        }
        Ok(grad)
    }
}

/// Applies `scheme` to raw IPW weights, returning the weights and a tape for
/// their vector-Jacobian product.
pub fn apply_scheme_with_tape(
    w_raw: &WeightVector,
    a: &[u8],
    scheme: Scheme,
    config: &SchemeConfig,
) -> Result<(WeightVector, SchemeTape)> {
    if w_raw.len() != a.len() {
        return Err(Error::Shape(format!(
            "apply_scheme: {} weights for {} treatments",
            w_raw.len(),
            a.len()
        )));
    }
    check_binary(a)?;
    let mut stages = Vec::new();
    let out = match scheme {
        Scheme::Raw => w_raw.clone(),
        Scheme::Truncated => {
            let mut values = Vec::with_capacity(a.len());
            let mut mask = Vec::with_capacity(a.len());
            for (&v, &ai) in w_raw.values.iter().zip(a) {
                let (lo, hi) = crump_bounds(ai, config.p_treated);
                let c = clamp_weight(v, lo, hi);
                mask.push(if c == v && v >= lo && v < hi { 1.0 } else { 0.0 });
                values.push(c);
            }
            stages.push(Stage::Mask(mask));
            w_raw.derived(values, Scheme::Truncated)
        }
        Scheme::Normalized => {
            let out = self_normalize(w_raw, a)?;
            stages.push(Stage::Normalize {
                input: w_raw.values.clone(),
                a: a.to_vec(),
                means: group_means(&w_raw.values, a)?,
            });
            out
        }
        Scheme::Ignore => {
            // Own-arm propensity recovered from the weight; the interval is
            // symmetric, so it matches the treatment propensity test.
            let values = w_raw
                .values
                .iter()
                .zip(a)
                .map(|(&w, &ai)| {
                    let r = marginal_ratio(ai, config.p_treated);
                    let pi_a = r / (w - 1.0 + r);
                    if (CRUMP_LOW..=CRUMP_HIGH).contains(&pi_a) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            stages.push(Stage::Constant);
            w_raw.derived(values, Scheme::Ignore)
        }
        Scheme::ParetoHard => {
            stages.push(Stage::Constant);
            pareto_smooth_hard(w_raw)?
        }
        Scheme::ParetoDiff | Scheme::ParetoDiffNormalized => {
            let sm = DiffParetoSmoothing::forward(&w_raw.values, config.epsilon, config.kappa)?;
            let smoothed = WeightVector {
                values: sm.output.clone(),
                scheme: Scheme::ParetoDiff,
                diagnostics: Some(sm.diagnostics.clone()),
            };
            stages.push(Stage::Pareto(Box::new(sm)));
            if scheme == Scheme::ParetoDiffNormalized {
                let means = group_means(&smoothed.values, a)?;
                let out = self_normalize(&smoothed, a)?;
                stages.push(Stage::Normalize {
                    input: smoothed.values,
                    a: a.to_vec(),
                    means,
                });
                out
            } else {
                smoothed
            }
        }
    };
    Ok((out, SchemeTape { stages }))
}

/// Applies `scheme` to raw IPW weights.
pub fn apply_scheme(
    w_raw: &WeightVector,
    a: &[u8],
    scheme: Scheme,
    config: &SchemeConfig,
) -> Result<WeightVector> {
    apply_scheme_with_tape(w_raw, a, scheme, config).map(|(w, _)| w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, LogNormal};

    fn wv(v: &[f64]) -> WeightVector {
        WeightVector::raw(v.to_vec()).unwrap()
    }

    #[test]
    fn ipw_examples() {
        // No confounding: own-arm propensity equals the marginal.
        let w = ipw_weights(&[0.3, 0.7, 0.3], &[1, 0, 1], 0.3).unwrap();
        for v in &w.values {
            assert!((v - 2.0).abs() < 1e-12);
        }
        let w = ipw_weights(&[0.25], &[1], 0.5).unwrap();
        assert!((w.values[0] - 4.0).abs() < 1e-12);
        let w = ipw_weights(&[0.5], &[0], 0.8).unwrap();
        assert!((w.values[0] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn ipw_positivity_violation() {
        assert!(matches!(
            ipw_weights(&[0.5, 1.0], &[1, 0], 0.5),
            Err(Error::Positivity { index: 1, .. })
        ));
        assert!(ipw_weights(&[0.0], &[1], 0.5).is_err());
        assert!(ipw_weights(&[0.5], &[1], 1.0).is_err());
    }

    #[test]
    fn truncate_examples() {
        let w = wv(&[0.05, 5.0, 20.0]);
        let t = truncate(&w, 0.1, 10.0).unwrap();
        assert_eq!(t.values, vec![0.1, 5.0, 10.0]);
        assert_eq!(t.scheme, Scheme::Truncated);
        assert!(matches!(truncate(&w, 2.0, 1.0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn self_normalize_examples() {
        let n = self_normalize(&wv(&[2.0, 4.0]), &[1, 1]).unwrap();
        assert!((n.values[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((n.values[1] - 4.0 / 3.0).abs() < 1e-15);
        let n = self_normalize(&wv(&[3.0, 3.0, 7.0]), &[0, 0, 1]).unwrap();
        assert!(n.values.iter().all(|v| (v - 1.0).abs() < 1e-15));
        let n = self_normalize(&wv(&[2.0, 4.0, 6.0]), &[1, 1, 0]).unwrap();
        assert!((n.values[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((n.values[1] - 4.0 / 3.0).abs() < 1e-15);
        assert!((n.values[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn self_normalize_zero_weight_group() {
        let w = WeightVector {
            values: vec![0.0, 1.0],
            scheme: Scheme::Ignore,
            diagnostics: None,
        };
        assert!(matches!(self_normalize(&w, &[0, 1]), Err(Error::EmptyGroup(_))));
    }

    #[test]
    fn gate_examples() {
        assert_eq!(sigmoid_gate(3.0, 3.0, 7.0), 0.5);
        assert_eq!(sigmoid_gate(4.0, 3.0, 1e6), 1.0);
        assert_eq!(sigmoid_gate(2.0, 3.0, 1e6), 0.0);
        assert!((sigmoid_gate(2.0, 0.0, 1.0) - 0.880_797_077_977_882_3).abs() < 1e-15);
    }

    #[test]
    fn hard_smoothing_constant_weights_fall_back() {
        let w = wv(&[1.7; 20]);
        let s = pareto_smooth_hard(&w).unwrap();
        assert_eq!(s.values, w.values);
        assert!(s.diagnostics.unwrap().fallback);
    }

    #[test]
    fn hard_smoothing_single_tail_falls_back() {
        let w = wv(&[1.0, 2.0, 3.0, 4.0, 9.0]);
        let s = pareto_smooth_hard(&w).unwrap();
        assert_eq!(s.values, w.values);
        assert!(s.diagnostics.unwrap().fallback);
    }

    #[test]
    fn hard_smoothing_preserves_body_and_orders_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dist = LogNormal::new(0.0, 1.0).unwrap();
        let raw: Vec<f64> = (0..100).map(|_| dist.sample(&mut rng)).collect();
        let s = pareto_smooth_hard(&wv(&raw)).unwrap();
        let diag = s.diagnostics.clone().unwrap();
        assert!(!diag.fallback);
        let order = argsort_ascending(&raw);
        let m = gpd::tail_size(100).unwrap().m;
        for &i in &order[..100 - m] {
            assert_eq!(s.values[i].to_bits(), raw[i].to_bits());
        }
        let tail: Vec<f64> = order[100 - m..].iter().map(|&i| s.values[i]).collect();
        assert!(tail.windows(2).all(|p| p[0] < p[1]), "{tail:?}");
        assert!(s.values.iter().all(|v| *v > 0.0));
    }

    fn min_gap(w: &[f64]) -> f64 {
        let mut s = w.to_vec();
        s.sort_by(f64::total_cmp);
        s.windows(2).map(|p| p[1] - p[0]).fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn diff_smoothing_matches_hard_in_the_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dist = LogNormal::new(0.0, 1.0).unwrap();
        for _ in 0..10 {
            let raw: Vec<f64> = (0..100).map(|_| dist.sample(&mut rng)).collect();
            let hard = pareto_smooth_hard(&wv(&raw)).unwrap();
            let diff = pareto_smooth_diff(&wv(&raw), 1e-6 * min_gap(&raw), 1e4).unwrap();
            for (h, d) in hard.values.iter().zip(&diff.values) {
                assert!((h - d).abs() <= 1e-3, "{h} vs {d}");
            }
        }
    }

    #[test]
    fn diff_smoothing_gate_off_entries_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dist = LogNormal::new(0.0, 1.0).unwrap();
        let raw: Vec<f64> = (0..60).map(|_| dist.sample(&mut rng)).collect();
        let sm = DiffParetoSmoothing::forward(&raw, 0.01, 5.0).unwrap();
        let gates = &sm.state.as_ref().unwrap().fit.gates;
        let mut checked = 0;
        for i in 0..raw.len() {
            if gates[i] < 1e-6 {
                checked += 1;
                assert!((sm.output[i] - raw[i]).abs() <= 1e-6 * raw[i].abs().max(1.0) * 10.0);
            }
            // Convex combination of the raw value and a quantile.
            let q = sm.state.as_ref().unwrap().quantiles[i];
            let lo = raw[i].min(q) - 1e-12;
            let hi = raw[i].max(q) + 1e-12;
            assert!(sm.output[i] >= lo && sm.output[i] <= hi);
        }
        assert!(checked > 0);
    }

    #[test]
    fn diff_smoothing_sum_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dist = LogNormal::new(0.0, 0.8).unwrap();
        let raw: Vec<f64> = (0..50).map(|_| dist.sample(&mut rng)).collect();
        let (eps, kappa) = (0.05, 3.0);
        let sum = |w: &[f64]| -> f64 {
            DiffParetoSmoothing::forward(w, eps, kappa).unwrap().output.iter().sum()
        };
        let sm = DiffParetoSmoothing::forward(&raw, eps, kappa).unwrap();
        assert!(!sm.diagnostics.fallback);
        let g = sm.vjp(&vec![1.0; raw.len()]).unwrap();
        let h = 1e-6;
        let fd: Vec<f64> = (0..raw.len())
            .map(|j| {
                let mut p = raw.clone();
                let mut m = raw.clone();
                p[j] += h;
                m[j] -= h;
                (sum(&p) - sum(&m)) / (2.0 * h)
            })
            .collect();
        let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den <= 1e-4, "rel err {}", num / den);
    }

    #[test]
    fn diff_smoothing_degenerate_falls_back() {
        let w = wv(&[2.0; 10]);
        let s = pareto_smooth_diff(&w, 0.1, 10.0).unwrap();
        assert_eq!(s.values, w.values);
        assert!(s.diagnostics.unwrap().fallback);
    }

    #[test]
    fn scheme_dispatch() {
        let cfg = SchemeConfig {
            p_treated: 0.5,
            ..Default::default()
        };
        let w = wv(&[2.0, 4.0]);
        assert_eq!(apply_scheme(&w, &[1, 1], Scheme::Raw, &cfg).unwrap().values, w.values);

        let n = apply_scheme(&w, &[1, 1], Scheme::ParetoDiffNormalized, &cfg);
        // n = 2 is below the minimum tail size.
        assert!(n.is_err());
        let w5 = wv(&[2.0, 4.0, 1.0, 3.0, 8.0]);
        let n = apply_scheme(&w5, &[1; 5], Scheme::ParetoDiffNormalized, &cfg).unwrap();
        let mean = n.values.iter().sum::<f64>() / 5.0;
        assert!((mean - 1.0).abs() < 1e-9);
        assert_eq!(n.scheme, Scheme::ParetoDiffNormalized);

        // Ignore: propensities 0.05 and 0.5 for two treated units.
        let raw = ipw_weights(&[0.05, 0.5], &[1, 1], 0.5).unwrap();
        let mask = apply_scheme(&raw, &[1, 1], Scheme::Ignore, &cfg).unwrap();
        assert_eq!(mask.values, vec![0.0, 1.0]);
        assert_eq!(ignore_mask(&[0.05, 0.5]), vec![0.0, 1.0]);

        assert!(matches!("bogus".parse::<Scheme>(), Err(Error::Config(_))));
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
    }

    #[test]
    fn truncated_scheme_uses_crump_bounds() {
        let cfg = SchemeConfig {
            p_treated: 0.5,
            ..Default::default()
        };
        // With p_treated = 0.5 the bounds are 1/0.9 and 1/0.1.
        let raw = wv(&[1.0 + 1e-3, 5.0, 50.0]);
        let t = apply_scheme(&raw, &[0, 1, 1], Scheme::Truncated, &cfg).unwrap();
        assert!((t.values[0] - 1.0 / 0.9).abs() < 1e-12);
        assert_eq!(t.values[1], 5.0);
        assert!((t.values[2] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn tape_vjp_matches_finite_differences_for_each_scheme() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let dist = LogNormal::new(0.3, 0.7).unwrap();
        let raw: Vec<f64> = (0..40).map(|_| 1.0 + dist.sample(&mut rng)).collect();
        let a: Vec<u8> = (0..40).map(|i| (i % 3 == 0) as u8).collect();
        let up: Vec<f64> = (0..40).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let cfg = SchemeConfig {
            p_treated: 0.4,
            epsilon: 0.05,
            kappa: 4.0,
        };
        for scheme in [
            Scheme::Raw,
            Scheme::Truncated,
            Scheme::Normalized,
            Scheme::ParetoDiff,
            Scheme::ParetoDiffNormalized,
        ] {
            let f = |w: &[f64]| -> f64 {
                let out = apply_scheme(&wv(w), &a, scheme, &cfg).unwrap();
                out.values.iter().zip(&up).map(|(x, u)| x * u).sum()
            };
            let (_, tape) = apply_scheme_with_tape(&wv(&raw), &a, scheme, &cfg).unwrap();
            let g = tape.vjp(&up).unwrap();
            let h = 1e-6;
            let fd: Vec<f64> = (0..raw.len())
                .map(|j| {
                    let mut p = raw.clone();
                    let mut m = raw.clone();
                    p[j] += h;
                    m[j] -= h;
                    (f(&p) - f(&m)) / (2.0 * h)
                })
                .collect();
            let num: f64 = g.iter().zip(&fd).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            assert!(num / den <= 1e-5, "{scheme}: rel err {}", num / den);
        }
    }
}
