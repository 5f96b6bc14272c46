//! Feed-forward networks with hand-derived reverse-mode gradients, the
//! Gaussian-kernel MMD penalty and the Adam optimizer.
//!
//! Inputs are row-major batches (`batch x features`). A layer stores its
//! weight as `out x in`, so column `j` of the first weight matrix belongs to
//! input feature `j`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Exponential linear unit with alpha = 1.
    Elu,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Sigmoid => crate::smoothing::sigmoid_gate(z, 0.0, 1.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Elu => "elu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elu" => Ok(Activation::Elu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "identity" => Ok(Activation::Identity),
            _ => Err(Error::Config(format!("unknown activation '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Intermediate values of a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("cache of an empty network")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub weight: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
}

impl MlpGrad {
    pub fn zeros_like(m: &Mlp) -> Self {
        Self {
            weight: m.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            bias: m.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    /// Row-major concatenation of every gradient entry, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weight.iter().zip(&self.bias) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }
}

impl Mlp {
    /// Random network with `dims = [in, h1, ..., out]` and one activation per
    /// layer.
    ///
    /// Weights are uniform on `±1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::Shape(format!(
                "init: {} dims need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Shape(format!("init: zero-width layer in {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &activation)| {
                let bound = 1.0 / (d[0] as f64).sqrt();
                let weight = Array2::from_shape_fn((d[1], d[0]), |_| rng.random_range(-bound..bound));
                Dense {
                    weight,
                    bias: Array1::zeros(d[1]),
                    activation,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::out_dim)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "network expects {} input features, got {}",
                self.in_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for layer in &self.layers {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            z.mapv_inplace(|v| layer.activation.apply(v));
            h = z;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<MlpCache> {
        self.check_input(&x)?;
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.to_owned();
        for layer in &self.layers {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            let y = z.mapv(|v| layer.activation.apply(v));
            cache.inputs.push(h);
            cache.pre.push(z);
            h = y.clone();
            cache.outputs.push(y);
        }
        Ok(cache)
    }

    /// Gradients of a scalar loss given `d_out = dL/d(output)`.
    ///
    /// Returns parameter gradients and `dL/d(input)`.
    pub fn backward(&self, cache: &MlpCache, d_out: &Array2<f64>) -> (MlpGrad, Array2<f64>) {
        let mut weight = Vec::with_capacity(self.layers.len());
        let mut bias = Vec::with_capacity(self.layers.len());
        let mut delta = d_out.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre[k];
            let y = &cache.outputs[k];
            ndarray::Zip::from(&mut delta)
                .and(z)
                .and(y)
                .for_each(|d, &zv, &yv| *d *= layer.activation.derivative(zv, yv));
            weight.push(delta.t().dot(&cache.inputs[k]));
            bias.push(delta.sum_axis(Axis(0)));
            delta = delta.dot(&layer.weight);
        }
        weight.reverse();
        bias.reverse();
        (MlpGrad { weight, bias }, delta)
    }

    /// Sum of squared weight-matrix entries; biases are not penalized.
    pub fn l2_penalty(&self) -> f64 {
        self.layers.iter().map(|l| l.weight.iter().map(|w| w * w).sum::<f64>()).sum()
    }

    /// Adds `scale * d(l2_penalty)` to `grad`.
    pub fn add_l2_grad(&self, scale: f64, grad: &mut MlpGrad) {
        for (g, l) in grad.weight.iter_mut().zip(&self.layers) {
            g.scaled_add(2.0 * scale, &l.weight);
        }
    }

    /// Row-major concatenation of every parameter, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    /// Mutable access to the parameter with flat index `idx` (see [`Mlp::flatten`]).
    pub fn param_mut(&mut self, mut idx: usize) -> Option<&mut f64> {
        for l in &mut self.layers {
            let (wn, bn) = (l.weight.len(), l.bias.len());
            if idx < wn {
                let c = l.weight.ncols();
                return l.weight.get_mut((idx / c, idx % c));
            }
            idx -= wn;
            if idx < bn {
                return l.bias.get_mut(idx);
            }
            idx -= bn;
        }
        None
    }

    /// Writes every layer as `"{prefix}.{k}.weight"` / `"{prefix}.{k}.bias"`.
    pub fn export(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
        for (k, l) in self.layers.iter().enumerate() {
            out.insert(format!("{prefix}.{k}.weight"), Tensor::from_matrix(&l.weight));
            out.insert(
                format!("{prefix}.{k}.bias"),
                Tensor {
                    shape: vec![l.bias.len()],
                    data: l.bias.to_vec(),
                },
            );
        }
    }

    /// Inverse of [`Mlp::export`].
    pub fn import(prefix: &str, activations: &[Activation], tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut layers = Vec::with_capacity(activations.len());
        for (k, &activation) in activations.iter().enumerate() {
            let get = |name: &str| {
                let key = format!("{prefix}.{k}.{name}");
                tensors
                    .get(&key)
                    .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor '{key}'")))
            };
            let weight = get("weight")?.to_matrix()?;
            let b = get("bias")?;
            if b.shape != [weight.nrows()] || b.data.len() != weight.nrows() {
                return Err(Error::Shape(format!(
                    "{prefix}.{k}.bias has shape {:?}, expected [{}]",
                    b.shape,
                    weight.nrows()
                )));
            }
            if let Some(prev) = layers.last().map(|l: &Dense| l.out_dim()) {
                if prev != weight.ncols() {
                    return Err(Error::Shape(format!(
                        "{prefix}.{k}.weight takes {} inputs but the previous layer emits {prev}",
                        weight.ncols()
                    )));
                }
            }
            layers.push(Dense {
                weight,
                bias: Array1::from_vec(b.data.clone()),
                activation,
            });
        }
        Ok(Self { layers })
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }
}

/// Row-major tensor with its shape, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_matrix(m: &Array2<f64>) -> Self {
        Self {
            shape: vec![m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        match self.shape.as_slice() {
            &[r, c] => Array2::from_shape_vec((r, c), self.data.clone())
                .map_err(|e| Error::Shape(format!("tensor {:?}: {e}", self.shape))),
            s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }
}

/// Deterministic initialization from a seed.
pub fn init_params(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Mlp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mlp::init(dims, activations, &mut rng)
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Biased (V-statistic) squared MMD with kernel `exp(-|x-y|^2 / (2 h^2))`.
pub fn mmd_rbf(s0: ArrayView2<f64>, s1: ArrayView2<f64>, bandwidth: f64) -> Result<f64> {
    mmd_rbf_with_grad(s0, s1, bandwidth).map(|(v, _, _)| v)
}

/// [`mmd_rbf`] together with its gradients in both sample sets.
pub fn mmd_rbf_with_grad(
    s0: ArrayView2<f64>,
    s1: ArrayView2<f64>,
    bandwidth: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if s0.nrows() == 0 || s1.nrows() == 0 {
        return Err(Error::EmptyGroup(format!(
            "MMD needs both groups, got {} and {} rows",
            s0.nrows(),
            s1.nrows()
        )));
    }
    if s0.ncols() != s1.ncols() {
        return Err(Error::Shape(format!(
            "MMD samples have {} and {} features",
            s0.ncols(),
            s1.ncols()
        )));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "MMD bandwidth must be positive, got {bandwidth}"
        )));
    }
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let h2 = bandwidth * bandwidth;
    let (n0, n1) = (s0.nrows() as f64, s1.nrows() as f64);
    let mut g0 = Array2::zeros(s0.raw_dim());
    let mut g1 = Array2::zeros(s1.raw_dim());
    let mut value = 0.0;

    // Within-group terms; each pair (i, j) contributes to both rows.
    for (s, g, n) in [(&s0, &mut g0, n0), (&s1, &mut g1, n1)] {
        let c = 1.0 / (n * n);
        for i in 0..s.nrows() {
            value += c; // k(x, x) = 1
            for j in (i + 1)..s.nrows() {
                let k = (-sq_dist(s.row(i), s.row(j)) * inv).exp();
                value += 2.0 * c * k;
                // d k / d x_i = -k (x_i - x_j) / h^2; the pair appears twice.
                let coef = -2.0 * c * k / h2;
                for f in 0..s.ncols() {
                    let diff = s[[i, f]] - s[[j, f]];
                    g[[i, f]] += coef * diff;
                    g[[j, f]] -= coef * diff;
                }
            }
        }
    }
    let c = -2.0 / (n0 * n1);
    for i in 0..s0.nrows() {
        for j in 0..s1.nrows() {
            let k = (-sq_dist(s0.row(i), s1.row(j)) * inv).exp();
            value += c * k;
            let coef = -c * k / h2;
            for f in 0..s0.ncols() {
                let diff = s0[[i, f]] - s1[[j, f]];
                g0[[i, f]] += coef * diff;
                g1[[j, f]] -= coef * diff;
            }
        }
    }
    Ok((value.max(0.0), g0, g1))
}

/// Median pairwise Euclidean distance between rows; 1 when it is zero.
pub fn median_bandwidth(x: ArrayView2<f64>) -> f64 {
    let mut d = Vec::with_capacity(x.nrows() * x.nrows().saturating_sub(1) / 2);
    for i in 0..x.nrows() {
        for j in (i + 1)..x.nrows() {
            d.push(sq_dist(x.row(i), x.row(j)).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let med = d[d.len() / 2];
    if med > 0.0 && med.is_finite() {
        med
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn for_mlp(m: &Mlp) -> Self {
        Self::new(m.num_params())
    }

    /// One update of every parameter of `mlp`.
    pub fn step_mlp(&mut self, mlp: &mut Mlp, grad: &MlpGrad, cfg: &AdamConfig) {
        self.t += 1;
        let (c1, c2) = self.bias_corrections(cfg);
        let mut off = 0;
        for (layer, (gw, gb)) in mlp.layers.iter_mut().zip(grad.weight.iter().zip(&grad.bias)) {
            for (p, g) in layer.weight.iter_mut().zip(gw.iter()) {
                adam_update(p, *g, &mut self.m[off], &mut self.v[off], c1, c2, cfg);
                off += 1;
            }
            for (p, g) in layer.bias.iter_mut().zip(gb.iter()) {
                adam_update(p, *g, &mut self.m[off], &mut self.v[off], c1, c2, cfg);
                off += 1;
            }
        }
    }

    fn bias_corrections(&self, cfg: &AdamConfig) -> (f64, f64) {
        let t = self.t as i32;
        (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t))
    }
}

#[inline]
fn adam_update(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, c1: f64, c2: f64, cfg: &AdamConfig) {
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    let m_hat = *m / c1;
    let v_hat = *v / c2;
    *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
}

/// Adam update of a flat parameter vector.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam_step: {} params, {} grads, state of {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let (c1, c2) = state.bias_corrections(cfg);
    for i in 0..params.len() {
        adam_update(&mut params[i], grads[i], &mut state.m[i], &mut state.v[i], c1, c2, cfg);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    #[test]
    fn zero_network_gives_zero_output() {
        let mut m = init_params(&[3, 4, 2], &[Activation::Identity; 2], 1).unwrap();
        for l in &mut m.layers {
            l.weight.fill(0.0);
        }
        let y = m.forward(array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]].view()).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_weights_with_elu_pass_nonnegative_inputs() {
        let mut m = init_params(&[3, 3, 3, 3], &[Activation::Elu; 3], 1).unwrap();
        for l in &mut m.layers {
            l.weight = Array2::eye(3);
        }
        let x = array![[0.0, 1.5, 2.0], [3.0, 0.25, 0.0]];
        assert_eq!(m.forward(x.view()).unwrap(), x);
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let m = init_params(&[2, 3, 1], &[Activation::Elu, Activation::Sigmoid], 7).unwrap();
        let x = [0.3, -1.2];
        let (w1, b1, w2, b2) = (&m.layers[0].weight, &m.layers[0].bias, &m.layers[1].weight, &m.layers[1].bias);
        let mut hidden = [0.0; 3];
        for (j, h) in hidden.iter_mut().enumerate() {
            let z = w1[[j, 0]] * x[0] + w1[[j, 1]] * x[1] + b1[j];
            *h = if z > 0.0 { z } else { z.exp() - 1.0 };
        }
        let z = (0..3).map(|j| w2[[0, j]] * hidden[j]).sum::<f64>() + b2[0];
        let expected = 1.0 / (1.0 + (-z).exp());
        let got = m.forward(array![[0.3, -1.2]].view()).unwrap()[[0, 0]];
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = init_params(&[3, 2], &[Activation::Identity], 1).unwrap();
        assert!(matches!(m.forward(Array2::zeros((2, 4)).view()), Err(Error::Shape(_))));
        assert!(init_params(&[3, 2], &[], 1).is_err());
    }

    #[test]
    fn elu_is_c1_at_zero() {
        let e = Activation::Elu;
        assert_eq!(e.apply(0.0), 0.0);
        assert!((e.apply(1e-9) - e.apply(-1e-9)).abs() < 1e-8);
        assert_eq!(e.derivative(0.0, e.apply(0.0)), 1.0);
        assert_eq!(e.derivative(1e-12, e.apply(1e-12)), 1.0);
    }

    #[test]
    fn half_squared_norm_gradient_is_parameter() {
        let m = init_params(&[4, 3, 2], &[Activation::Elu, Activation::Identity], 3).unwrap();
        let mut g = MlpGrad::zeros_like(&m);
        m.add_l2_grad(0.5, &mut g);
        for (gw, l) in g.weight.iter().zip(&m.layers) {
            assert_eq!(gw, &l.weight);
        }
        // Constant loss: nothing flows back.
        let cache = m.forward_cached(Array2::ones((2, 4)).view()).unwrap();
        let (g, dx) = m.backward(&cache, &Array2::zeros((2, 2)));
        assert!(g.flatten().iter().all(|v| *v == 0.0));
        assert!(dx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let acts = [Activation::Elu, Activation::Elu, Activation::Sigmoid];
        let m = init_params(&[4, 5, 3, 2], &acts, 11).unwrap();
        let x = array![[0.2, -0.7, 1.1, 0.0], [-1.5, 0.3, 0.4, 2.0], [0.9, 0.9, -0.2, -0.6]];
        let target = array![[0.1, 0.9], [0.5, 0.2], [0.7, 0.4]];
        let loss = |m: &Mlp, x: &Array2<f64>| -> f64 {
            let y = m.forward(x.view()).unwrap();
            0.5 * (&y - &target).mapv(|v| v * v).sum()
        };
        let cache = m.forward_cached(x.view()).unwrap();
        let (g, dx) = m.backward(&cache, &(cache.output() - &target));
        let h = 1e-6;
        let fd: Vec<f64> = (0..m.num_params())
            .map(|i| {
                let mut p = m.clone();
                *p.param_mut(i).unwrap() += h;
                let mut q = m.clone();
                *q.param_mut(i).unwrap() -= h;
                (loss(&p, &x) - loss(&q, &x)) / (2.0 * h)
            })
            .collect();
        assert!(rel_err(&g.flatten(), &fd) <= 1e-5);
        let fdx: Vec<f64> = (0..x.len())
            .map(|i| {
                let (r, c) = (i / 4, i % 4);
                let mut p = x.clone();
                p[[r, c]] += h;
                let mut q = x.clone();
                q[[r, c]] -= h;
                (loss(&m, &p) - loss(&m, &q)) / (2.0 * h)
            })
            .collect();
        assert!(rel_err(&dx.iter().copied().collect::<Vec<_>>(), &fdx) <= 1e-5);
    }

    #[test]
    fn mmd_examples() {
        let s = array![[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]];
        assert!(mmd_rbf(s.view(), s.view(), 1.3).unwrap().abs() < 1e-12);
        let t = array![[1.0, 1.0], [-0.5, 0.0]];
        let a = mmd_rbf(s.view(), t.view(), 0.8).unwrap();
        let b = mmd_rbf(t.view(), s.view(), 0.8).unwrap();
        assert!((a - b).abs() < 1e-14);
        let x = array![[1.0, 2.0]];
        let y = array![[2.0, 0.0]];
        let h = 1.5;
        let expected = 2.0 - 2.0 * (-5.0 / (2.0 * h * h) as f64).exp();
        assert!((mmd_rbf(x.view(), y.view(), h).unwrap() - expected).abs() < 1e-14);
        assert!(matches!(
            mmd_rbf(Array2::zeros((0, 2)).view(), y.view(), h),
            Err(Error::EmptyGroup(_))
        ));
    }

    #[test]
    fn mmd_gradient_matches_finite_differences() {
        let s0 = array![[0.1, 0.4], [1.2, -0.3], [0.7, 0.9]];
        let s1 = array![[0.0, 0.0], [-0.8, 0.5]];
        let h = 0.9;
        let (_, g0, g1) = mmd_rbf_with_grad(s0.view(), s1.view(), h).unwrap();
        let step = 1e-6;
        for (which, g) in [(0, &g0), (1, &g1)] {
            let base = if which == 0 { &s0 } else { &s1 };
            for r in 0..base.nrows() {
                for c in 0..2 {
                    let mut p = base.clone();
                    p[[r, c]] += step;
                    let mut q = base.clone();
                    q[[r, c]] -= step;
                    let (fp, fq) = if which == 0 {
                        (mmd_rbf(p.view(), s1.view(), h).unwrap(), mmd_rbf(q.view(), s1.view(), h).unwrap())
                    } else {
                        (mmd_rbf(s0.view(), p.view(), h).unwrap(), mmd_rbf(s0.view(), q.view(), h).unwrap())
                    };
                    let fd = (fp - fq) / (2.0 * step);
                    assert!((g[[r, c]] - fd).abs() < 1e-8, "{} vs {fd}", g[[r, c]]);
                }
            }
        }
    }

    #[test]
    fn median_bandwidth_of_collinear_points() {
        let x = array![[0.0], [1.0], [3.0]];
        // Distances 1, 3, 2 -> median 2.
        assert_eq!(median_bandwidth(x.view()), 2.0);
        assert_eq!(median_bandwidth(Array2::zeros((3, 2)).view()), 1.0);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_two_step_trace() {
        // Hand trace with lr = 0.1, beta = (0.9, 0.999), eps = 1e-8:
        // step 1, g = 0.5: m = 0.05, v = 0.00025, m_hat = 0.5, v_hat = 0.25,
        //   update = 0.1 * 0.5 / (0.5 + 1e-8).
        // step 2, g = 0.5: m = 0.095, v = 0.00049975, m_hat = 0.5, v_hat = 0.25.
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut p = vec![1.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[0.5], &mut st, &cfg).unwrap();
        let step = 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - (1.0 - step)).abs() < 1e-15);
        adam_step(&mut p, &[0.5], &mut st, &cfg).unwrap();
        assert!((st.m[0] - 0.095).abs() < 1e-15);
        assert!((st.v[0] - 0.000_499_75).abs() < 1e-15);
        assert!((p[0] - (1.0 - 2.0 * step)).abs() < 1e-12);
        // Negative gradient moves the other way by the same magnitude.
        let mut q = vec![0.0];
        adam_step(&mut q, &[-3.0], &mut AdamState::new(1), &cfg).unwrap();
        assert!((q[0] - 0.1 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_mlp_matches_flat_step() {
        let mut m = init_params(&[3, 2], &[Activation::Identity], 4).unwrap();
        let mut g = MlpGrad::zeros_like(&m);
        g.weight[0].fill(0.3);
        g.bias[0].fill(-0.2);
        let mut flat = m.flatten();
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(flat.len());
        adam_step(&mut flat, &g.flatten(), &mut st, &cfg).unwrap();
        AdamState::for_mlp(&m).step_mlp(&mut m, &g, &cfg);
        assert_eq!(m.flatten(), flat);
    }

    #[test]
    fn init_is_seeded_and_scaled() {
        let a = init_params(&[5, 4], &[Activation::Elu], 9).unwrap();
        assert_eq!(a, init_params(&[5, 4], &[Activation::Elu], 9).unwrap());
        assert_ne!(a, init_params(&[5, 4], &[Activation::Elu], 10).unwrap());
        let m = init_params(&[64, 157], &[Activation::Elu], 1).unwrap();
        let w = &m.layers[0].weight;
        assert!(w.len() >= 10_000);
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expected = 1.0 / (3.0 * 64.0);
        assert!((var - expected).abs() <= 0.2 * expected, "{var} vs {expected}");
    }

    #[test]
    fn tensors_round_trip_through_export() {
        let m = init_params(&[3, 4, 1], &[Activation::Elu, Activation::Sigmoid], 2).unwrap();
        let mut map = BTreeMap::new();
        m.export("pi", &mut map);
        assert_eq!(map["pi.0.weight"].shape, vec![4, 3]);
        let back = Mlp::import("pi", &m.activations(), &map).unwrap();
        assert_eq!(back, m);
        map.remove("pi.1.bias");
        assert!(Mlp::import("pi", &m.activations(), &map).is_err());
    }
}
