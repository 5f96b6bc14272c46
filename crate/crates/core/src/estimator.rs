//! The three-encoder treatment-effect model and its alternating training loop.
//!
//! Encoders `gamma` (instruments), `delta` (confounders) and `upsilon`
//! (adjustment variables) feed a propensity head on `[gamma, delta]` and two
//! outcome heads on `[delta, upsilon]`. Training alternates between fitting
//! the propensity head alone and fitting everything else on the weighted
//! outcome loss. In the `dpsw*` modes the weights are Pareto-smoothed through
//! soft ranks, so the outcome loss also sends gradients into `gamma` and
//! `delta` through the (frozen) propensity head.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::nnet::{
    median_bandwidth, mmd_rbf_with_grad, Activation, AdamConfig, AdamState, Mlp, MlpCache, MlpGrad, Tensor,
};
use crate::smoothing::{
    self, apply_scheme_with_tape, ipw_weight, ipw_weight_grad, Scheme, SchemeConfig, SchemeTape, WeightVector,
};

/// Propensities are clamped to `[PI_CLAMP, 1 - PI_CLAMP]`.
pub const PI_CLAMP: f64 = 1e-7;
/// Minibatches shorter than this are dropped (no tail exists below 3).
pub const MIN_BATCH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dpsw,
    DpswNorm,
    DrcfrRaw,
    DrcfrNorm,
    DrcfrTrunc,
    DrcfrIgnore,
    PswSeparate,
    SingleEncoder,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::Dpsw,
        Mode::DpswNorm,
        Mode::DrcfrRaw,
        Mode::DrcfrNorm,
        Mode::DrcfrTrunc,
        Mode::DrcfrIgnore,
        Mode::PswSeparate,
        Mode::SingleEncoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Dpsw => "dpsw",
            Mode::DpswNorm => "dpsw_norm",
            Mode::DrcfrRaw => "drcfr_raw",
            Mode::DrcfrNorm => "drcfr_norm",
            Mode::DrcfrTrunc => "drcfr_trunc",
            Mode::DrcfrIgnore => "drcfr_ignore",
            Mode::PswSeparate => "psw_separate",
            Mode::SingleEncoder => "single_encoder",
        }
    }

    /// Weighting scheme applied per minibatch, for modes that weight with the
    /// jointly learned propensity head.
    pub fn joint_scheme(self) -> Option<Scheme> {
        match self {
            Mode::Dpsw => Some(Scheme::ParetoDiff),
            Mode::DpswNorm => Some(Scheme::ParetoDiffNormalized),
            Mode::DrcfrRaw => Some(Scheme::Raw),
            Mode::DrcfrNorm => Some(Scheme::Normalized),
            Mode::DrcfrTrunc => Some(Scheme::Truncated),
            Mode::DrcfrIgnore => Some(Scheme::Ignore),
            Mode::PswSeparate | Mode::SingleEncoder => None,
        }
    }

    /// Whether gradients flow through the weights by default.
    pub fn default_differentiable_weights(self) -> bool {
        matches!(self, Mode::Dpsw | Mode::DpswNorm)
    }

    fn has_gamma(self) -> bool {
        self.joint_scheme().is_some()
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}'")))
    }
}

/// Training hyperparameters. Every field has a default, so partial JSON works.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub lambda_pi: f64,
    pub lambda_upsilon: f64,
    pub lambda_minus_pi: f64,
    /// Soft-rank regularization.
    pub epsilon: f64,
    /// Gate steepness.
    pub kappa: f64,
    pub batch_size: usize,
    pub lr_pi: f64,
    pub lr_outcome: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub pi_epochs: usize,
    pub outcome_epochs: usize,
    pub max_rounds: usize,
    pub patience: usize,
    pub hidden_dim: usize,
    /// Width of each encoder output; `None` means `max(1, d / 3)`.
    pub rep_dim: Option<usize>,
    /// Overrides the mode's default for backpropagating through weights.
    pub differentiable_weights: Option<bool>,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda_pi: 1e-4,
            lambda_upsilon: 1.0,
            lambda_minus_pi: 1e-4,
            epsilon: 0.1,
            kappa: 10.0,
            batch_size: 128,
            lr_pi: 1e-3,
            lr_outcome: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            pi_epochs: 1,
            outcome_epochs: 1,
            max_rounds: 200,
            patience: 10,
            hidden_dim: 32,
            rep_dim: None,
            differentiable_weights: None,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_pi", self.lambda_pi),
            ("lambda_upsilon", self.lambda_upsilon),
            ("lambda_minus_pi", self.lambda_minus_pi),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        let pos = [
            ("epsilon", self.epsilon),
            ("kappa", self.kappa),
            ("lr_pi", self.lr_pi),
            ("lr_outcome", self.lr_outcome),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size < MIN_BATCH {
            return Err(Error::Config(format!(
                "batch_size must be at least {MIN_BATCH}, got {}",
                self.batch_size
            )));
        }
        if self.hidden_dim == 0 || self.rep_dim == Some(0) || self.max_rounds == 0 || self.patience == 0 {
            return Err(Error::Config(
                "hidden_dim, rep_dim, max_rounds and patience must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn rep_dim_for(&self, d: usize) -> usize {
        self.rep_dim.unwrap_or((d / 3).max(1))
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

const ENCODER_ACTS: [Activation; 3] = [Activation::Elu; 3];
const PI_ACTS: [Activation; 3] = [Activation::Elu, Activation::Elu, Activation::Sigmoid];
const HEAD_ACTS: [Activation; 3] = [Activation::Elu, Activation::Elu, Activation::Identity];

/// Network parameters of one trained (or initialized) model.
///
/// `delta` is the shared encoder in `single_encoder` mode, and `pi_head` reads
/// raw features in `psw_separate` mode.
#[derive(Debug, Clone, PartialEq)]
pub struct DpswModel {
    pub mode: Mode,
    pub gamma: Option<Mlp>,
    pub delta: Mlp,
    pub upsilon: Option<Mlp>,
    pub pi_head: Option<Mlp>,
    pub h0: Mlp,
    pub h1: Mlp,
}

impl DpswModel {
    pub fn init(mode: Mode, d: usize, hp: &Hyperparams, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::Shape("feature dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (hid, rep) = (hp.hidden_dim, hp.rep_dim_for(d));
        let encoder = |out: usize, rng: &mut ChaCha8Rng| Mlp::init(&[d, hid, hid, out], &ENCODER_ACTS, rng);
        let head = |inp: usize, rng: &mut ChaCha8Rng| Mlp::init(&[inp, hid, hid, 1], &HEAD_ACTS, rng);
        let model = match mode {
            Mode::SingleEncoder => {
                let shared = encoder(2 * rep, &mut rng)?;
                DpswModel {
                    mode,
                    gamma: None,
                    delta: shared,
                    upsilon: None,
                    pi_head: None,
                    h0: head(2 * rep, &mut rng)?,
                    h1: head(2 * rep, &mut rng)?,
                }
            }
            Mode::PswSeparate => DpswModel {
                mode,
                gamma: None,
                delta: encoder(rep, &mut rng)?,
                upsilon: Some(encoder(rep, &mut rng)?),
                pi_head: Some(Mlp::init(&[d, hid, hid, 1], &PI_ACTS, &mut rng)?),
                h0: head(2 * rep, &mut rng)?,
                h1: head(2 * rep, &mut rng)?,
            },
            _ => DpswModel {
                mode,
                gamma: Some(encoder(rep, &mut rng)?),
                delta: encoder(rep, &mut rng)?,
                upsilon: Some(encoder(rep, &mut rng)?),
                pi_head: Some(Mlp::init(&[2 * rep, hid, hid, 1], &PI_ACTS, &mut rng)?),
                h0: head(2 * rep, &mut rng)?,
                h1: head(2 * rep, &mut rng)?,
            },
        };
        Ok(model)
    }

    pub fn in_dim(&self) -> usize {
        self.delta.in_dim()
    }

    /// Outcome-head input for every row of `x`.
    fn outcome_features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let d = self.delta.forward(x)?;
        match &self.upsilon {
            Some(u) => Ok(concatenate![Axis(1), d, u.forward(x)?]),
            None => Ok(d),
        }
    }

    /// Treatment propensity `pi(x)` for every row.
    pub fn propensity(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let pi = self
            .pi_head
            .as_ref()
            .ok_or_else(|| Error::Config(format!("mode {} has no propensity head", self.mode)))?;
        let input = match &self.gamma {
            Some(g) => concatenate![Axis(1), g.forward(x)?, self.delta.forward(x)?],
            None => x.to_owned(),
        };
        Ok(pi.forward(input.view())?.column(0).to_vec())
    }

    /// Encoders as `(name, network)`; `single_encoder` reports its shared
    /// encoder under `delta`.
    pub fn encoders(&self) -> Vec<(&'static str, &Mlp)> {
        let mut out = Vec::new();
        if let Some(g) = &self.gamma {
            out.push(("gamma", g));
        }
        out.push(("delta", &self.delta));
        if let Some(u) = &self.upsilon {
            out.push(("upsilon", u));
        }
        out
    }

    fn components(&self) -> Vec<(&'static str, &Mlp)> {
        let mut out = self.encoders();
        if let Some(p) = &self.pi_head {
            out.push(("pi", p));
        }
        out.push(("h0", &self.h0));
        out.push(("h1", &self.h1));
        out
    }

    /// Mutable access to every component, in a fixed order.
    pub fn components_mut(&mut self) -> Vec<(&'static str, &mut Mlp)> {
        let mut out: Vec<(&'static str, &mut Mlp)> = Vec::new();
        if let Some(g) = &mut self.gamma {
            out.push(("gamma", g));
        }
        out.push(("delta", &mut self.delta));
        if let Some(u) = &mut self.upsilon {
            out.push(("upsilon", u));
        }
        if let Some(p) = &mut self.pi_head {
            out.push(("pi", p));
        }
        out.push(("h0", &mut self.h0));
        out.push(("h1", &mut self.h1));
        out
    }

    pub fn num_params(&self) -> usize {
        self.components().iter().map(|(_, m)| m.num_params()).sum()
    }

    /// All parameters, in the order of [`GradientTape::flatten_for`].
    pub fn flatten(&self) -> Vec<f64> {
        self.components().into_iter().flat_map(|(_, m)| m.flatten()).collect()
    }

    /// Parameter `idx` in flattened order.
    pub fn param_mut(&mut self, mut idx: usize) -> Option<&mut f64> {
        for (_, m) in self.components_mut() {
            let k = m.num_params();
            if idx < k {
                return m.param_mut(idx);
            }
            idx -= k;
        }
        None
    }

    /// `sum of squared weights` over everything except the propensity head.
    fn outcome_penalty(&self) -> f64 {
        self.components()
            .into_iter()
            .filter(|(name, _)| *name != "pi")
            .map(|(_, m)| m.l2_penalty())
            .sum()
    }
}

/// `h1(x) - h0(x)` for every row of `x`.
pub fn predict_cate(model: &DpswModel, x: ArrayView2<f64>) -> Result<Vec<f64>> {
    let feat = model.outcome_features(x)?;
    let y0 = model.h0.forward(feat.view())?;
    let y1 = model.h1.forward(feat.view())?;
    Ok(y1.column(0).iter().zip(y0.column(0)).map(|(a, b)| a - b).collect())
}

/// A minibatch view.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: ArrayView2<'a, f64>,
    pub a: &'a [u8],
    pub y: &'a [f64],
}

impl<'a> Batch<'a> {
    pub fn new(x: ArrayView2<'a, f64>, a: &'a [u8], y: &'a [f64]) -> Result<Self> {
        if x.nrows() != a.len() || y.len() != a.len() || a.is_empty() {
            return Err(Error::Shape(format!(
                "batch has {} rows, {} treatments, {} outcomes",
                x.nrows(),
                a.len(),
                y.len()
            )));
        }
        Ok(Self { x, a, y })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

/// Owned minibatch, gathered from a dataset.
#[derive(Debug, Clone)]
pub struct OwnedBatch {
    pub x: Array2<f64>,
    pub a: Vec<u8>,
    pub y: Vec<f64>,
    /// Rows of the source dataset.
    pub rows: Vec<usize>,
}

impl OwnedBatch {
    pub fn gather(data: &Dataset, rows: &[usize]) -> Self {
        Self {
            x: data.x.select(Axis(0), rows),
            a: rows.iter().map(|&i| data.a[i]).collect(),
            y: rows.iter().map(|&i| data.y[i]).collect(),
            rows: rows.to_vec(),
        }
    }

    pub fn view(&self) -> Batch<'_> {
        Batch {
            x: self.x.view(),
            a: &self.a,
            y: &self.y,
        }
    }
}

/// Per-component gradients of one objective.
#[derive(Debug, Clone, Default)]
pub struct GradientTape {
    pub loss: f64,
    pub grads: BTreeMap<&'static str, MlpGrad>,
}

impl GradientTape {
    fn add(&mut self, name: &'static str, g: MlpGrad) {
        match self.grads.get_mut(name) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.grads.insert(name, g);
            }
        }
    }

    /// Gradients concatenated in the order of [`DpswModel::components_mut`].
    pub fn flatten_for(&self, model: &DpswModel) -> Vec<f64> {
        model
            .components()
            .into_iter()
            .flat_map(|(name, m)| match self.grads.get(name) {
                Some(g) => g.flatten(),
                None => vec![0.0; m.num_params()],
            })
            .collect()
    }
}

/// Diagnostics of one objective evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub smoothing_fallback: bool,
    pub location_fallback: bool,
    pub mmd_skipped: bool,
    pub clamped_pi: usize,
    pub xi: Option<f64>,
    pub unreliable_fit: bool,
}

/// Fixed inputs of the outcome objective.
#[derive(Debug, Clone, Copy)]
pub struct OutcomeContext<'a> {
    pub hp: &'a Hyperparams,
    pub p_treated: f64,
    pub bandwidth: f64,
    /// Precomputed weights (separate-learning mode).
    pub fixed_weights: Option<&'a [f64]>,
}

impl OutcomeContext<'_> {
    fn differentiable(&self, mode: Mode) -> bool {
        self.hp
            .differentiable_weights
            .unwrap_or(mode.default_differentiable_weights())
    }
}

#[derive(Debug, Clone)]
pub struct OutcomeEval {
    pub tape: GradientTape,
    pub weights: Vec<f64>,
    pub diagnostics: StepDiagnostics,
    pub weighted_loss: f64,
    pub mmd: f64,
    pub penalty: f64,
}

fn clamp_pi(p: f64) -> (f64, bool) {
    if p < PI_CLAMP {
        (PI_CLAMP, true)
    } else if p > 1.0 - PI_CLAMP {
        (1.0 - PI_CLAMP, true)
    } else {
        (p, false)
    }
}

fn group_rows(a: &[u8]) -> [Vec<usize>; 2] {
    let mut g = [Vec::new(), Vec::new()];
    for (i, &ai) in a.iter().enumerate() {
        g[ai as usize].push(i);
    }
    g
}

/// Mean cross-entropy of the propensity head plus `lambda_pi * Omega(pi)`.
///
/// The gradient tape only holds the propensity head: encoders are inputs here.
pub fn propensity_loss(model: &DpswModel, batch: Batch<'_>, hp: &Hyperparams, with_grad: bool) -> Result<(GradientTape, usize)> {
    let pi = model
        .pi_head
        .as_ref()
        .ok_or_else(|| Error::Config(format!("mode {} has no propensity head", model.mode)))?;
    let input = match &model.gamma {
        Some(g) => concatenate![Axis(1), g.forward(batch.x)?, model.delta.forward(batch.x)?],
        None => batch.x.to_owned(),
    };
    let cache = pi.forward_cached(input.view())?;
    let out = cache.output();
    let b = batch.len() as f64;
    let mut nll = 0.0;
    let mut clamped = 0;
    let mut d_out = Array2::zeros((batch.len(), 1));
    for i in 0..batch.len() {
        let (p, was_clamped) = clamp_pi(out[[i, 0]]);
        clamped += was_clamped as usize;
        let ai = batch.a[i] as f64;
        nll -= ai * p.ln() + (1.0 - ai) * (1.0 - p).ln();
        if !was_clamped {
            d_out[[i, 0]] = (-ai / p + (1.0 - ai) / (1.0 - p)) / b;
        }
    }
    if clamped > 0 {
        log::debug!("{clamped} propensities clamped to [{PI_CLAMP}, {}]", 1.0 - PI_CLAMP);
    }
    let mut tape = GradientTape {
        loss: nll / b + hp.lambda_pi * pi.l2_penalty(),
        grads: BTreeMap::new(),
    };
    if with_grad {
        let (mut g, _) = pi.backward(&cache, &d_out);
        pi.add_l2_grad(hp.lambda_pi, &mut g);
        tape.add("pi", g);
    }
    Ok((tape, clamped))
}

/// Weighted outcome loss plus `lambda_upsilon * MMD(upsilon | a)` and
/// `lambda_minus_pi * Omega`, with gradients for every component.
///
/// Propensity-head gradients are reported but are not meant to be applied in
/// this phase.
pub fn outcome_loss(model: &DpswModel, batch: Batch<'_>, ctx: &OutcomeContext<'_>, with_grad: bool) -> Result<OutcomeEval> {
    let hp = ctx.hp;
    let n = batch.len();
    let bf = n as f64;
    let mut diag = StepDiagnostics::default();

    // Representations.
    let gamma_cache = match (&model.gamma, model.mode.has_gamma()) {
        (Some(g), true) => Some(g.forward_cached(batch.x)?),
        _ => None,
    };
    let delta_cache = model.delta.forward_cached(batch.x)?;
    let ups_cache = match &model.upsilon {
        Some(u) => Some(u.forward_cached(batch.x)?),
        None => None,
    };
    let feat = match &ups_cache {
        Some(u) => concatenate![Axis(1), *delta_cache.output(), *u.output()],
        None => delta_cache.output().clone(),
    };
    let rep_split = delta_cache.output().ncols();

    // Weights.
    struct PiPath {
        cache: MlpCache,
        pi_a: Vec<f64>,
        clamped: Vec<bool>,
        w_raw: Vec<f64>,
        tape: SchemeTape,
    }
    let mut pi_path: Option<PiPath> = None;
    let weights: Vec<f64> = match (model.mode.joint_scheme(), ctx.fixed_weights) {
        (_, Some(w)) => {
            if w.len() != n {
                return Err(Error::Shape(format!("{} fixed weights for a batch of {n}", w.len())));
            }
            w.to_vec()
        }
        (None, None) => vec![1.0; n],
        (Some(scheme), None) => {
            let pi = model.pi_head.as_ref().expect("joint modes carry a propensity head");
            let gc = gamma_cache.as_ref().expect("joint modes carry gamma");
            let pi_in = concatenate![Axis(1), *gc.output(), *delta_cache.output()];
            let cache = pi.forward_cached(pi_in.view())?;
            let mut pi_a = Vec::with_capacity(n);
            let mut clamped = Vec::with_capacity(n);
            for i in 0..n {
                let p = cache.output()[[i, 0]];
                let own = if batch.a[i] == 1 { p } else { 1.0 - p };
                let (c, was) = clamp_pi(own);
                pi_a.push(c);
                clamped.push(was);
            }
            diag.clamped_pi = clamped.iter().filter(|c| **c).count();
            let w_raw: Vec<f64> = pi_a
                .iter()
                .zip(batch.a)
                .map(|(&p, &ai)| ipw_weight(p, ai, ctx.p_treated))
                .collect();
            let scheme_cfg = SchemeConfig {
                p_treated: ctx.p_treated,
                epsilon: hp.epsilon,
                kappa: hp.kappa,
            };
            let raw = WeightVector {
                values: w_raw.clone(),
                scheme: Scheme::Raw,
                diagnostics: None,
            };
            let (w, tape) = apply_scheme_with_tape(&raw, batch.a, scheme, &scheme_cfg)?;
            if let Some(sd) = &w.diagnostics {
                diag.smoothing_fallback = sd.fallback;
                diag.location_fallback = sd.location_fallback;
                if let Some(fit) = sd.fit {
                    diag.xi = Some(fit.xi);
                    diag.unreliable_fit = !fit.reliable;
                }
            }
            pi_path = Some(PiPath {
                cache,
                pi_a,
                clamped,
                w_raw,
                tape,
            });
            w.values
        }
    };

    // Factual predictions, one head per arm.
    let groups = group_rows(batch.a);
    let heads = [&model.h0, &model.h1];
    let mut pred = vec![0.0; n];
    let mut head_caches = Vec::with_capacity(2);
    for arm in 0..2 {
        if groups[arm].is_empty() {
            head_caches.push(None);
            continue;
        }
        let sub = feat.select(Axis(0), &groups[arm]);
        let cache = heads[arm].forward_cached(sub.view())?;
        for (k, &i) in groups[arm].iter().enumerate() {
            pred[i] = cache.output()[[k, 0]];
        }
        head_caches.push(Some((sub, cache)));
    }
    let sq: Vec<f64> = (0..n).map(|i| (batch.y[i] - pred[i]).powi(2)).collect();
    let weighted_loss = weights.iter().zip(&sq).map(|(w, l)| w * l).sum::<f64>() / bf;

    // Balance penalty on upsilon.
    let mut mmd = 0.0;
    let mut mmd_grads = None;
    if let Some(uc) = &ups_cache {
        if hp.lambda_upsilon > 0.0 {
            if groups[0].is_empty() || groups[1].is_empty() {
                diag.mmd_skipped = true;
            } else {
                let u = uc.output();
                let s0 = u.select(Axis(0), &groups[0]);
                let s1 = u.select(Axis(0), &groups[1]);
                let (v, g0, g1) = mmd_rbf_with_grad(s0.view(), s1.view(), ctx.bandwidth)?;
                mmd = v;
                mmd_grads = Some((g0, g1));
            }
        }
    }
    let penalty = model.outcome_penalty();
    let loss = weighted_loss + hp.lambda_upsilon * mmd + hp.lambda_minus_pi * penalty;
    if !loss.is_finite() {
        log::error!("non-finite outcome loss; batch weights: {weights:?}");
        return Err(Error::Numerical(format!(
            "outcome loss is {loss} (weighted {weighted_loss}, mmd {mmd}); batch weights: {weights:?}"
        )));
    }

    let mut tape = GradientTape {
        loss,
        grads: BTreeMap::new(),
    };
    if !with_grad {
        return Ok(OutcomeEval {
            tape,
            weights,
            diagnostics: diag,
            weighted_loss,
            mmd,
            penalty,
        });
    }

    // Heads.
    let mut d_feat = Array2::<f64>::zeros(feat.raw_dim());
    for arm in 0..2 {
        let Some((_, cache)) = &head_caches[arm] else { continue };
        let rows = &groups[arm];
        let mut d_out = Array2::zeros((rows.len(), 1));
        for (k, &i) in rows.iter().enumerate() {
            d_out[[k, 0]] = 2.0 * weights[i] * (pred[i] - batch.y[i]) / bf;
        }
        let (g, d_in) = heads[arm].backward(cache, &d_out);
        tape.add(if arm == 0 { "h0" } else { "h1" }, g);
        for (k, &i) in rows.iter().enumerate() {
            let mut row = d_feat.row_mut(i);
            row += &d_in.row(k);
        }
    }
    if !head_caches[0].is_some() {
        tape.add("h0", MlpGrad::zeros_like(&model.h0));
    }
    if !head_caches[1].is_some() {
        tape.add("h1", MlpGrad::zeros_like(&model.h1));
    }

    let mut d_delta = d_feat.slice(s![.., ..rep_split]).to_owned();
    let mut d_ups = if ups_cache.is_some() {
        Some(d_feat.slice(s![.., rep_split..]).to_owned())
    } else {
        None
    };
    if let (Some((g0, g1)), Some(du)) = (&mmd_grads, d_ups.as_mut()) {
        for (k, &i) in groups[0].iter().enumerate() {
            du.row_mut(i).scaled_add(hp.lambda_upsilon, &g0.row(k));
        }
        for (k, &i) in groups[1].iter().enumerate() {
            du.row_mut(i).scaled_add(hp.lambda_upsilon, &g1.row(k));
        }
    }

    // Through the weights into the propensity head and its encoders.
    let mut d_gamma = None;
    if let Some(pp) = &pi_path {
        let pi = model.pi_head.as_ref().unwrap();
        let gc = gamma_cache.as_ref().unwrap();
        let differentiable = ctx.differentiable(model.mode);
        let mut d_pi = Array2::zeros((n, 1));
        if differentiable {
            let d_w: Vec<f64> = sq.iter().map(|l| l / bf).collect();
            let d_raw = pp.tape.vjp(&d_w)?;
            for i in 0..n {
                if pp.clamped[i] {
                    continue;
                }
                let d_pi_a = d_raw[i] * ipw_weight_grad(pp.pi_a[i], batch.a[i], ctx.p_treated);
                d_pi[[i, 0]] = if batch.a[i] == 1 { d_pi_a } else { -d_pi_a };
            }
        }
        debug_assert_eq!(pp.w_raw.len(), n);
        let (g_pi, d_in) = pi.backward(&pp.cache, &d_pi);
        tape.add("pi", g_pi);
        let g_width = gc.output().ncols();
        d_gamma = Some(d_in.slice(s![.., ..g_width]).to_owned());
        d_delta += &d_in.slice(s![.., g_width..]);
    }

    // Encoders.
    if let (Some(g), Some(gc)) = (&model.gamma, &gamma_cache) {
        let d = d_gamma.unwrap_or_else(|| Array2::zeros(gc.output().raw_dim()));
        let (grad, _) = g.backward(gc, &d);
        tape.add("gamma", grad);
    } else if let Some(g) = &model.gamma {
        tape.add("gamma", MlpGrad::zeros_like(g));
    }
    let (g_delta, _) = model.delta.backward(&delta_cache, &d_delta);
    tape.add("delta", g_delta);
    if let (Some(u), Some(uc), Some(du)) = (&model.upsilon, &ups_cache, &d_ups) {
        let (g, _) = u.backward(uc, du);
        tape.add("upsilon", g);
    }

    // Complexity penalty.
    for (name, m) in model.components() {
        if name == "pi" {
            continue;
        }
        if let Some(g) = tape.grads.get_mut(name) {
            m.add_l2_grad(hp.lambda_minus_pi, g);
        }
    }

    Ok(OutcomeEval {
        tape,
        weights,
        diagnostics: diag,
        weighted_loss,
        mmd,
        penalty,
    })
}

/// One record of the training log, written per outer round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub propensity_loss: f64,
    pub outcome_loss: f64,
    pub val_objective: f64,
    pub smoothing_fallbacks: usize,
    pub location_fallbacks: usize,
    pub mmd_skipped: usize,
    pub clamped_pi: usize,
    pub xi_mean: Option<f64>,
    pub xi_max: Option<f64>,
    pub unreliable_fits: usize,
    pub min_weight: f64,
    pub max_weight: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: DpswModel,
    pub log: Vec<RoundLog>,
    pub best_round: usize,
    pub best_val_objective: f64,
    pub p_treated: f64,
    pub bandwidth: f64,
}

impl TrainOutput {
    pub fn total_fallbacks(&self) -> usize {
        self.log.iter().map(|r| r.smoothing_fallbacks).sum()
    }

    /// Mean fitted shape per round (rounds without fits are skipped).
    pub fn xi_trace(&self) -> Vec<f64> {
        self.log.iter().filter_map(|r| r.xi_mean).collect()
    }
}

#[derive(Default)]
struct RoundStats {
    prop_loss: f64,
    prop_batches: usize,
    out_loss: f64,
    out_batches: usize,
    fallbacks: usize,
    loc_fallbacks: usize,
    mmd_skipped: usize,
    clamped: usize,
    xi_sum: f64,
    xi_count: usize,
    xi_max: Option<f64>,
    unreliable: usize,
    w_min: f64,
    w_max: f64,
}

impl RoundStats {
    fn new() -> Self {
        Self {
            w_min: f64::INFINITY,
            w_max: f64::NEG_INFINITY,
            ..Default::default()
        }
    }

    fn absorb(&mut self, ev: &OutcomeEval) {
        let dg = &ev.diagnostics;
        self.out_loss += ev.tape.loss;
        self.out_batches += 1;
        self.fallbacks += dg.smoothing_fallback as usize;
        self.loc_fallbacks += dg.location_fallback as usize;
        self.mmd_skipped += dg.mmd_skipped as usize;
        self.clamped += dg.clamped_pi;
        self.unreliable += dg.unreliable_fit as usize;
        if let Some(xi) = dg.xi {
            self.xi_sum += xi;
            self.xi_count += 1;
            self.xi_max = Some(self.xi_max.map_or(xi, |m: f64| m.max(xi)));
        }
        for &w in &ev.weights {
            self.w_min = self.w_min.min(w);
            self.w_max = self.w_max.max(w);
        }
    }

    fn finish(self, round: usize, val_objective: f64) -> RoundLog {
        RoundLog {
            round,
            propensity_loss: self.prop_loss / self.prop_batches.max(1) as f64,
            outcome_loss: self.out_loss / self.out_batches.max(1) as f64,
            val_objective,
            smoothing_fallbacks: self.fallbacks,
            location_fallbacks: self.loc_fallbacks,
            mmd_skipped: self.mmd_skipped,
            clamped_pi: self.clamped,
            xi_mean: (self.xi_count > 0).then(|| self.xi_sum / self.xi_count as f64),
            xi_max: self.xi_max,
            unreliable_fits: self.unreliable,
            min_weight: self.w_min,
            max_weight: self.w_max,
        }
    }
}

/// Shuffled minibatches of row indices; a trailing batch shorter than
/// [`MIN_BATCH`] is dropped.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size)
        .filter(|c| c.len() >= MIN_BATCH)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Contiguous evaluation chunks of size `batch_size`; a short tail is merged
/// into the previous chunk.
fn eval_chunks(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut chunks: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(batch_size).map(<[usize]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < MIN_BATCH) {
        let tail = chunks.pop().unwrap();
        chunks.last_mut().unwrap().extend(tail);
    }
    chunks
}

struct Trainer<'a> {
    hp: &'a Hyperparams,
    train: &'a Dataset,
    val: &'a Dataset,
    p_treated: f64,
    rng: ChaCha8Rng,
}

impl Trainer<'_> {
    fn propensity_epoch(&mut self, model: &mut DpswModel, adam: &mut AdamState, stats: &mut RoundStats) -> Result<()> {
        let cfg = self.hp.adam(self.hp.lr_pi);
        for rows in epoch_batches(self.train.len(), self.hp.batch_size, &mut self.rng) {
            let b = OwnedBatch::gather(self.train, &rows);
            let (tape, clamped) = propensity_loss(model, b.view(), self.hp, true)?;
            if !tape.loss.is_finite() {
                return Err(Error::Numerical(format!("propensity loss is {}", tape.loss)));
            }
            stats.prop_loss += tape.loss;
            stats.prop_batches += 1;
            stats.clamped += clamped;
            let pi = model.pi_head.as_mut().unwrap();
            adam.step_mlp(pi, &tape.grads["pi"], &cfg);
        }
        Ok(())
    }

    fn outcome_epoch(
        &mut self,
        model: &mut DpswModel,
        adams: &mut BTreeMap<&'static str, AdamState>,
        bandwidth: f64,
        fixed: Option<&[f64]>,
        stats: &mut RoundStats,
    ) -> Result<()> {
        let cfg = self.hp.adam(self.hp.lr_outcome);
        for rows in epoch_batches(self.train.len(), self.hp.batch_size, &mut self.rng) {
            let b = OwnedBatch::gather(self.train, &rows);
            let fw: Option<Vec<f64>> = fixed.map(|w| rows.iter().map(|&i| w[i]).collect());
            let ctx = OutcomeContext {
                hp: self.hp,
                p_treated: self.p_treated,
                bandwidth,
                fixed_weights: fw.as_deref(),
            };
            let ev = outcome_loss(model, b.view(), &ctx, true)?;
            stats.absorb(&ev);
            for (name, m) in model.components_mut() {
                if name == "pi" {
                    continue;
                }
                if let (Some(g), Some(st)) = (ev.tape.grads.get(name), adams.get_mut(name)) {
                    st.step_mlp(m, g, &cfg);
                }
            }
        }
        Ok(())
    }

    /// Validation objective: propensity loss plus outcome loss, both averaged
    /// over fixed chunks of the validation split.
    fn validation_objective(&self, model: &DpswModel, bandwidth: f64, fixed_val: Option<&[f64]>) -> Result<f64> {
        let mut total = 0.0;
        let chunks = eval_chunks(self.val.len(), self.hp.batch_size);
        for rows in &chunks {
            let b = OwnedBatch::gather(self.val, rows);
            if model.mode.has_gamma() {
                total += propensity_loss(model, b.view(), self.hp, false)?.0.loss;
            }
            let fw: Option<Vec<f64>> = fixed_val.map(|w| rows.iter().map(|&i| w[i]).collect());
            let ctx = OutcomeContext {
                hp: self.hp,
                p_treated: self.p_treated,
                bandwidth,
                fixed_weights: fw.as_deref(),
            };
            total += outcome_loss(model, b.view(), &ctx, false)?.tape.loss;
        }
        Ok(total / chunks.len() as f64)
    }
}

/// Hard Pareto-smoothed IPW weights from a propensity head on raw features.
fn separate_weights(pi: &Mlp, data: &Dataset, p_treated: f64) -> Result<Vec<f64>> {
    let p = pi.forward(data.x.view())?;
    let pi_a: Vec<f64> = (0..data.len())
        .map(|i| {
            let v = p[[i, 0]];
            clamp_pi(if data.a[i] == 1 { v } else { 1.0 - v }).0
        })
        .collect();
    let raw = smoothing::ipw_weights(&pi_a, &data.a, p_treated)?;
    if raw.len() < 3 {
        return Ok(raw.values);
    }
    Ok(smoothing::pareto_smooth_hard(&raw)?.values)
}

/// Trains a model of the given mode with early stopping on the validation
/// objective and returns the best snapshot.
pub fn train(train_data: &Dataset, val_data: &Dataset, hp: &Hyperparams, mode: Mode) -> Result<TrainOutput> {
    hp.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::InvalidInput("training and validation splits must be nonempty".into()));
    }
    if train_data.dim() != val_data.dim() || train_data.dim() == 0 {
        return Err(Error::Shape(format!(
            "training split has {} features, validation split {}",
            train_data.dim(),
            val_data.dim()
        )));
    }
    if train_data.len() < MIN_BATCH {
        return Err(Error::InvalidInput(format!(
            "training split needs at least {MIN_BATCH} rows"
        )));
    }
    let p_treated = train_data.treated_fraction();
    let needs_both = mode != Mode::SingleEncoder;
    if needs_both && !(p_treated > 0.0 && p_treated < 1.0) {
        return Err(Error::InvalidInput(format!(
            "training split has treated fraction {p_treated}; both arms are required"
        )));
    }

    let mut model = DpswModel::init(mode, train_data.dim(), hp, hp.seed)?;
    let mut trainer = Trainer {
        hp,
        train: train_data,
        val: val_data,
        p_treated,
        rng: ChaCha8Rng::seed_from_u64(hp.seed.wrapping_add(0x5eed)),
    };

    // Kernel bandwidth from the first batch's adjustment representation.
    let bandwidth = match &model.upsilon {
        Some(u) => {
            let first = (0..train_data.len().min(hp.batch_size)).collect::<Vec<_>>();
            let b = OwnedBatch::gather(train_data, &first);
            median_bandwidth(u.forward(b.x.view())?.view())
        }
        None => 1.0,
    };

    let mut pi_adam = model.pi_head.as_ref().map(AdamState::for_mlp);
    let mut adams: BTreeMap<&'static str, AdamState> = model
        .components()
        .into_iter()
        .filter(|(n, _)| *n != "pi")
        .map(|(n, m)| (n, AdamState::for_mlp(m)))
        .collect();

    // Separate learning: fit the propensity head on raw features first.
    let mut fixed_train = None;
    let mut fixed_val = None;
    if mode == Mode::PswSeparate {
        let adam = pi_adam.as_mut().unwrap();
        let mut best = (f64::INFINITY, model.pi_head.clone().unwrap());
        let mut since = 0;
        for _ in 0..hp.max_rounds {
            let mut stats = RoundStats::new();
            for _ in 0..hp.pi_epochs {
                trainer.propensity_epoch(&mut model, adam, &mut stats)?;
            }
            let mut val = 0.0;
            let chunks = eval_chunks(val_data.len(), hp.batch_size);
            for rows in &chunks {
                let b = OwnedBatch::gather(val_data, rows);
                val += propensity_loss(&model, b.view(), hp, false)?.0.loss;
            }
            val /= chunks.len() as f64;
            if val < best.0 {
                best = (val, model.pi_head.clone().unwrap());
                since = 0;
            } else {
                since += 1;
                if since >= hp.patience {
                    break;
                }
            }
        }
        model.pi_head = Some(best.1);
        let pi = model.pi_head.as_ref().unwrap();
        fixed_train = Some(separate_weights(pi, train_data, p_treated)?);
        fixed_val = Some(separate_weights(pi, val_data, p_treated)?);
    }

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, DpswModel)> = None;
    let mut since = 0;
    for round in 0..hp.max_rounds {
        let mut stats = RoundStats::new();
        if mode.has_gamma() {
            let adam = pi_adam.as_mut().unwrap();
            for _ in 0..hp.pi_epochs {
                trainer.propensity_epoch(&mut model, adam, &mut stats)?;
            }
        }
        for _ in 0..hp.outcome_epochs {
            trainer.outcome_epoch(&mut model, &mut adams, bandwidth, fixed_train.as_deref(), &mut stats)?;
        }
        let val = trainer.validation_objective(&model, bandwidth, fixed_val.as_deref())?;
        if !val.is_finite() {
            return Err(Error::Numerical(format!("validation objective is {val} at round {round}")));
        }
        let record = stats.finish(round, val);
        log::debug!(
            "{mode} round {round}: outcome {:.5} val {:.5}",
            record.outcome_loss,
            record.val_objective
        );
        log.push(record);
        if best.as_ref().is_none_or(|(b, _, _)| val < *b) {
            best = Some((val, round, model.clone()));
            since = 0;
        } else {
            since += 1;
            if since >= hp.patience {
                break;
            }
        }
    }
    let (best_val_objective, best_round, model) = best.expect("at least one round runs");
    Ok(TrainOutput {
        model,
        log,
        best_round,
        best_val_objective,
        p_treated,
        bandwidth,
    })
}

pub const CHECKPOINT_FORMAT: &str = "dpsw-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized model: named row-major tensors plus what is needed to rebuild
/// the layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub mode: Mode,
    pub in_dim: usize,
    pub hyperparams: Hyperparams,
    pub p_treated: f64,
    pub bandwidth: f64,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_training(out: &TrainOutput, hp: &Hyperparams) -> Self {
        let mut tensors = BTreeMap::new();
        for (name, m) in out.model.components() {
            m.export(name, &mut tensors);
        }
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            mode: out.model.mode,
            in_dim: out.model.in_dim(),
            hyperparams: hp.clone(),
            p_treated: out.p_treated,
            bandwidth: out.bandwidth,
            tensors,
        }
    }

    pub fn to_model(&self) -> Result<DpswModel> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let t = &self.tensors;
        let opt = |name: &str, acts: &[Activation]| -> Result<Option<Mlp>> {
            if t.contains_key(&format!("{name}.0.weight")) {
                Mlp::import(name, acts, t).map(Some)
            } else {
                Ok(None)
            }
        };
        let model = DpswModel {
            mode: self.mode,
            gamma: opt("gamma", &ENCODER_ACTS)?,
            delta: Mlp::import("delta", &ENCODER_ACTS, t)?,
            upsilon: opt("upsilon", &ENCODER_ACTS)?,
            pi_head: opt("pi", &PI_ACTS)?,
            h0: Mlp::import("h0", &HEAD_ACTS, t)?,
            h1: Mlp::import("h1", &HEAD_ACTS, t)?,
        };
        if model.in_dim() != self.in_dim {
            return Err(Error::Shape(format!(
                "checkpoint declares {} inputs but its encoder takes {}",
                self.in_dim,
                model.in_dim()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}
