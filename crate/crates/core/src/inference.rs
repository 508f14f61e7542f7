//! Amortized inference network mapping a feature vector to per-coefficient
//! posterior parameters, and the coefficient samplers built on it.
//!
//! Batched outputs are `B x (N*M)` matrices; column `i*M + j` belongs to
//! block `j` of task vector `i`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::task_vectors::{CoefficientMatrix, ParamSet};

/// Hidden width as a multiple of the input dimension.
pub const HIDDEN_FACTOR: usize = 4;
/// Bound on the inclusion logit, keeping `pi` strictly inside (0, 1).
pub const PI_LOGIT_BOUND: f64 = 30.0;

const NAMES: [&str; 8] = ["w_h", "b_h", "w_pi", "b_pi", "w_mu", "b_mu", "w_lv", "b_lv"];

/// Starting point of the three heads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadInit {
    /// Standard deviation of head weights, relative to 1/sqrt(hidden).
    pub weight_scale: f64,
    pub pi: f64,
    pub mu: f64,
    pub log_var: f64,
}

impl Default for HeadInit {
    fn default() -> Self {
        HeadInit { weight_scale: 0.1, pi: 0.9, mu: 0.05, log_var: -6.0 }
    }
}

/// One hidden tanh layer of width `4d` feeding the `pi`, `mu` and
/// `log_var` heads.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceNet {
    input: usize,
    hidden: usize,
    n_tasks: usize,
    n_blocks: usize,
    params: ParamSet,
}

/// Head outputs as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub pi: Var,
    pub mu: Var,
    pub log_var: Var,
}

/// Head outputs for a batch, each `B x (N*M)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub pi: Tensor,
    pub mu: Tensor,
    pub log_var: Tensor,
    n_tasks: usize,
    n_blocks: usize,
}

impl PosteriorParams {
    pub fn new(pi: Tensor, mu: Tensor, log_var: Tensor, n_tasks: usize, n_blocks: usize) -> Result<Self> {
        let shape = mu.shape().to_vec();
        if shape.len() != 2 || shape[1] != n_tasks * n_blocks || pi.shape() != shape || log_var.shape() != shape {
            return Err(Error::shape(
                "posterior",
                format!("pi {:?}, mu {:?}, log_var {:?} for {n_tasks}x{n_blocks}", pi.shape(), shape, log_var.shape()),
            ));
        }
        if pi.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Invalid("inclusion probabilities must lie in [0, 1]".into()));
        }
        if !mu.is_finite() || !log_var.is_finite() {
            return Err(Error::NonFinite { op: "posterior" });
        }
        Ok(PosteriorParams { pi, mu, log_var, n_tasks, n_blocks })
    }

    pub fn batch(&self) -> usize {
        self.mu.rows()
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    /// Row `b` of a `B x (N*M)` tensor as an N x M matrix.
    pub fn as_matrix(&self, t: &Tensor, b: usize) -> CoefficientMatrix {
        CoefficientMatrix::new(self.n_tasks, self.n_blocks, t.row(b).to_vec()).expect("shape checked")
    }
}

impl InferenceNet {
    pub fn new(input: usize, n_tasks: usize, n_blocks: usize, init: &HeadInit, rng: &mut Stream) -> Result<Self> {
        check_dims(input, n_tasks, n_blocks)?;
        if !(init.pi > 0.0 && init.pi < 1.0) {
            return Err(Error::config("init_pi", "must lie strictly between 0 and 1"));
        }
        let hidden = HIDDEN_FACTOR * input;
        let out = n_tasks * n_blocks;
        let hs = init.weight_scale / (hidden as f64).sqrt();
        let w_h = rng::normal_tensor(rng, &[hidden, input]).map(|v| v / (input as f64).sqrt());
        let mut head = |bias: f64| {
            (rng::normal_tensor(rng, &[out, hidden]).map(|v| v * hs), Tensor::full(&[1, out], bias))
        };
        let (w_pi, b_pi) = head((init.pi / (1.0 - init.pi)).ln());
        let (w_mu, b_mu) = head(init.mu);
        let (w_lv, b_lv) = head(init.log_var);
        let params = ParamSet::new(
            NAMES
                .iter()
                .map(|s| s.to_string())
                .zip([w_h, Tensor::zeros(&[1, hidden]), w_pi, b_pi, w_mu, b_mu, w_lv, b_lv])
                .collect(),
        )?;
        Ok(InferenceNet { input, hidden, n_tasks, n_blocks, params })
    }

    /// Every weight and bias zero.
    pub fn zeros(input: usize, n_tasks: usize, n_blocks: usize) -> Result<Self> {
        check_dims(input, n_tasks, n_blocks)?;
        let hidden = HIDDEN_FACTOR * input;
        let out = n_tasks * n_blocks;
        let shapes = [[hidden, input], [1, hidden], [out, hidden], [1, out], [out, hidden], [1, out], [out, hidden], [1, out]];
        let params = ParamSet::new(NAMES.iter().zip(shapes).map(|(n, s)| (n.to_string(), Tensor::zeros(&s))).collect())?;
        Ok(InferenceNet { input, hidden, n_tasks, n_blocks, params })
    }

    pub fn from_params(params: ParamSet, n_tasks: usize, n_blocks: usize) -> Result<Self> {
        let w_h = params.require("w_h")?;
        let (hidden, input) = (w_h.rows(), w_h.cols());
        let template = InferenceNet { hidden, ..InferenceNet::zeros(input, n_tasks, n_blocks)? };
        let out = n_tasks * n_blocks;
        let expected = [[hidden, input], [1, hidden], [out, hidden], [1, out], [out, hidden], [1, out], [out, hidden], [1, out]];
        let layout: Vec<(String, Vec<usize>)> = NAMES.iter().zip(expected).map(|(n, s)| (n.to_string(), s.to_vec())).collect();
        if params.layout() != layout {
            return Err(Error::Layout(format!("inference net layout {:?} does not match {layout:?}", params.layout())));
        }
        Ok(InferenceNet { params, ..template })
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        params.check_same_layout(&self.params)?;
        self.params = params;
        Ok(())
    }

    /// Put the weights on `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>> {
        self.params
            .tensors()
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { Ok(g.constant(t.clone())) })
            .collect()
    }

    /// Heads for a `B x d` input node; `vars` come from [`InferenceNet::bind`].
    pub fn forward(&self, g: &mut Graph, x: Var, vars: &[Var]) -> Result<PosteriorVars> {
        if vars.len() != NAMES.len() {
            return Err(Error::Layout(format!("expected {} inference-net nodes, got {}", NAMES.len(), vars.len())));
        }
        let h = g.linear(x, vars[0], vars[1])?;
        let h = g.tanh(h)?;
        let logit = g.linear(h, vars[2], vars[3])?;
        let logit = g.clamp(logit, -PI_LOGIT_BOUND, PI_LOGIT_BOUND)?;
        let pi = g.sigmoid(logit)?;
        let mu = g.linear(h, vars[4], vars[5])?;
        let lv = g.linear(h, vars[6], vars[7])?;
        let log_var = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok(PosteriorVars { pi, mu, log_var })
    }

    /// Posterior parameters for each row of `x` (B x d).
    pub fn infer_posterior(&self, x: &Tensor) -> Result<PosteriorParams> {
        if x.shape().len() != 2 || x.cols() != self.input {
            return Err(Error::shape("infer_posterior", format!("input {:?} for d={}", x.shape(), self.input)));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "infer_posterior" });
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let xv = g.constant(x.clone());
        let p = self.forward(&mut g, xv, &vars)?;
        PosteriorParams::new(
            g.value(p.pi).clone(),
            g.value(p.mu).clone(),
            g.value(p.log_var).clone(),
            self.n_tasks,
            self.n_blocks,
        )
    }

    /// Per-sample L2 norms of the input gradient of every `mu` output,
    /// `|| d mu_k / d x ||`, as a `B x (N*M)` matrix.
    pub fn mu_input_gradient_norms(&self, x: &Tensor) -> Result<Tensor> {
        let w_h = self.params.require("w_h")?;
        let b_h = self.params.require("b_h")?;
        let w_mu = self.params.require("w_mu")?;
        let pre = x.gemm(w_h, false, true)?;
        let out = self.n_tasks * self.n_blocks;
        let mut norms = Vec::with_capacity(x.rows() * out);
        let mut scaled = Tensor::zeros(&[out, self.hidden]);
        for r in 0..x.rows() {
            // J = W_mu diag(1 - h^2) W_h
            for k in 0..out {
                for j in 0..self.hidden {
                    let h = (pre.get(r, j) + b_h.data()[j]).tanh();
                    scaled.data_mut()[k * self.hidden + j] = w_mu.get(k, j) * (1.0 - h * h);
                }
            }
            let jac = scaled.matmul(w_h)?;
            norms.extend((0..out).map(|k| jac.row(k).iter().map(|v| v * v).sum::<f64>().sqrt()));
        }
        let t = Tensor::matrix(x.rows(), out, norms)?;
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "gradient_sensitivity" });
        }
        Ok(t)
    }
}

fn check_dims(input: usize, n_tasks: usize, n_blocks: usize) -> Result<()> {
    if input == 0 || n_tasks == 0 || n_blocks == 0 {
        return Err(Error::Invalid(format!("bad inference net dims d={input}, N={n_tasks}, M={n_blocks}")));
    }
    Ok(())
}

/// Bernoulli gradient estimator for the inclusion variables.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    StraightThrough,
    ScoreFunction,
}

/// Noise behind one spike-and-slab draw. `pi_anchor` is the inclusion
/// probability the indicators were drawn at; the straight-through path
/// adds `pi - pi_anchor` so the forward value stays `omega * z` at the
/// anchor while gradients reach `pi`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeSlabNoise {
    pub eps: Tensor,
    pub omega: Tensor,
    pub pi_anchor: Tensor,
}

impl SpikeSlabNoise {
    pub fn draw(pi: &Tensor, rng: &mut Stream) -> Self {
        let eps = rng::normal_tensor(rng, pi.shape());
        let u = rng::uniform_tensor(rng, pi.shape());
        let omega = u.zip_map(pi, |u, p| if u < p { 1.0 } else { 0.0 }).expect("same shape");
        SpikeSlabNoise { eps, omega, pi_anchor: pi.clone() }
    }
}

/// `z = mu + sigma * eps` on the graph.
pub fn gaussian_draw(g: &mut Graph, post: &PosteriorVars, eps: &Tensor) -> Result<Var> {
    g.reparam(post.mu, post.log_var, eps)
}

/// `omega * z` on the graph; returns the gated draw and the gate node.
pub fn spike_slab_draw(g: &mut Graph, post: &PosteriorVars, noise: &SpikeSlabNoise, estimator: Estimator) -> Result<(Var, Var)> {
    let z = g.reparam(post.mu, post.log_var, &noise.eps)?;
    let gate = match estimator {
        Estimator::StraightThrough => {
            let shift = g.constant(noise.omega.zip_map(&noise.pi_anchor, |w, p| w - p)?);
            g.add(post.pi, shift)?
        }
        Estimator::ScoreFunction => g.constant(noise.omega.clone()),
    };
    Ok((g.mul(gate, z)?, gate))
}

/// Reparameterized Gaussian coefficients, one row per sample.
pub fn sample_coefficients_gaussian(post: &PosteriorParams, rng: &mut Stream) -> Tensor {
    let eps = rng::normal_tensor(rng, post.mu.shape());
    let mut out = post.mu.clone();
    for ((o, lv), e) in out.data_mut().iter_mut().zip(post.log_var.data()).zip(eps.data()) {
        *o += (0.5 * lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).exp() * e;
    }
    out
}

/// `omega * z` with `omega ~ Bernoulli(pi)` and `z ~ N(mu, sigma^2)`.
pub fn sample_coefficients_spike_slab(post: &PosteriorParams, rng: &mut Stream) -> Tensor {
    let noise = SpikeSlabNoise::draw(&post.pi, rng);
    let mut out = post.mu.clone();
    for (k, o) in out.data_mut().iter_mut().enumerate() {
        let sd = (0.5 * post.log_var.data()[k].clamp(LOG_VAR_MIN, LOG_VAR_MAX)).exp();
        *o = noise.omega.data()[k] * (*o + sd * noise.eps.data()[k]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_many;

    fn net(seed: u64) -> InferenceNet {
        let init = HeadInit { weight_scale: 1.0, pi: 0.5, mu: 0.1, log_var: -1.0 };
        InferenceNet::new(3, 2, 2, &init, &mut rng::stream(seed, "net")).unwrap()
    }

    fn post(pi: f64, mu: f64, lv: f64, n: usize) -> PosteriorParams {
        PosteriorParams::new(Tensor::full(&[1, n], pi), Tensor::full(&[1, n], mu), Tensor::full(&[1, n], lv), 1, n).unwrap()
    }

    #[test]
    fn deterministic_forward() {
        let n = net(1);
        let x = rng::normal_tensor(&mut rng::stream(2, "x"), &[4, 3]);
        assert_eq!(n.infer_posterior(&x).unwrap(), n.infer_posterior(&x).unwrap());
    }

    #[test]
    fn zero_net_outputs() {
        let n = InferenceNet::zeros(3, 2, 2).unwrap();
        let p = n.infer_posterior(&rng::normal_tensor(&mut rng::stream(3, "x"), &[2, 3])).unwrap();
        assert!(p.mu.data().iter().all(|&v| v == 0.0));
        assert!(p.log_var.data().iter().all(|&v| v == 0.0));
        assert!(p.pi.data().iter().all(|&v| v == 0.5));
        assert_eq!(p.pi.shape(), &[2, 4]);
    }

    #[test]
    fn pi_strictly_inside_unit_interval() {
        let mut n = net(4);
        let big: Vec<f64> = n.params().flatten().iter().map(|v| v * 1e3).collect();
        n.set_params(n.params().with_flat(&big).unwrap()).unwrap();
        let p = n.infer_posterior(&rng::normal_tensor(&mut rng::stream(5, "x"), &[50, 3]).map(|v| v * 10.0)).unwrap();
        assert!(p.pi.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(p.log_var.data().iter().all(|&v| (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&v)));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let n = net(6);
        let x = rng::normal_tensor(&mut rng::stream(7, "x"), &[3, 3]);
        let w = rng::normal_tensor(&mut rng::stream(8, "w"), &[3, 4]);
        let err = grad_check_many(
            |g, v| {
                let xv = g.constant(x.clone());
                let p = n.forward(g, xv, v)?;
                let wv = g.constant(w.clone());
                let a = g.mul(p.pi, wv)?;
                let b = g.mul(p.mu, p.mu)?;
                let c = g.exp(p.log_var)?;
                let s = g.add(a, b)?;
                let s = g.add(s, c)?;
                g.sum(s)
            },
            n.params().tensors(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn input_gradient_norms_match_finite_differences() {
        let n = net(9);
        let x = rng::normal_tensor(&mut rng::stream(10, "x"), &[2, 3]);
        let s = n.mu_input_gradient_norms(&x).unwrap();
        let h = 1e-6;
        for r in 0..2 {
            for k in 0..4 {
                let mut sq = 0.0;
                for c in 0..3 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp.data_mut()[r * 3 + c] += h;
                    xm.data_mut()[r * 3 + c] -= h;
                    let d = (n.infer_posterior(&xp).unwrap().mu.get(r, k) - n.infer_posterior(&xm).unwrap().mu.get(r, k)) / (2.0 * h);
                    sq += d * d;
                }
                let fd = sq.sqrt();
                assert!((s.get(r, k) - fd).abs() / fd.max(1e-3) < 1e-4, "{} vs {fd}", s.get(r, k));
            }
        }
    }

    #[test]
    fn gaussian_draw_at_variance_floor_is_mean() {
        let p = post(0.5, 0.7, LOG_VAR_MIN, 5);
        let z = sample_coefficients_gaussian(&p, &mut rng::stream(1, "s"));
        assert!(z.data().iter().all(|v| (v - 0.7).abs() < 0.05));
    }

    #[test]
    fn gaussian_draws_average_to_mean() {
        let n = 100_000;
        let p = post(0.5, -0.4, 0.0, n);
        let z = sample_coefficients_gaussian(&p, &mut rng::stream(2, "s"));
        let mean = z.sum() / n as f64;
        assert!((mean + 0.4).abs() < 3.0 / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn fixed_seed_reproduces_draws() {
        let p = post(0.5, 0.0, 0.0, 8);
        let a = sample_coefficients_spike_slab(&p, &mut rng::stream(3, "s"));
        let b = sample_coefficients_spike_slab(&p, &mut rng::stream(3, "s"));
        assert_eq!(a, b);
        let c = sample_coefficients_gaussian(&p, &mut rng::stream(3, "s"));
        assert_eq!(c, sample_coefficients_gaussian(&p, &mut rng::stream(3, "s")));
    }

    #[test]
    fn spike_slab_limits() {
        let mut r = rng::stream(4, "s");
        let zero = sample_coefficients_spike_slab(&post(0.0, 1.0, 0.0, 100), &mut r);
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let p = post(1.0, 1.0, 0.0, 100);
        let a = sample_coefficients_spike_slab(&p, &mut rng::stream(5, "s"));
        let noise = SpikeSlabNoise::draw(&p.pi, &mut rng::stream(5, "s"));
        for (k, v) in a.data().iter().enumerate() {
            assert_eq!(*v, 1.0 + noise.eps.data()[k]);
        }
    }

    #[test]
    fn spike_slab_retained_fraction_and_mean() {
        let n = 100_000;
        let p = post(0.5, 2.0, -2.0, n);
        let z = sample_coefficients_spike_slab(&p, &mut rng::stream(6, "s"));
        let kept = z.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        assert!((kept - 0.5).abs() < 0.01, "{kept}");
        // E = pi * mu; Var = pi (mu^2 + s^2) - (pi mu)^2
        let var = 0.5 * (4.0 + (-2.0f64).exp()) - 1.0;
        let mean = z.sum() / n as f64;
        assert!((mean - 1.0).abs() < 3.0 * (var / n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn straight_through_forward_value_and_gradient() {
        let pi = Tensor::row_vector(vec![0.3, 0.8]);
        let noise = SpikeSlabNoise {
            eps: Tensor::row_vector(vec![0.0, 0.0]),
            omega: Tensor::row_vector(vec![0.0, 1.0]),
            pi_anchor: pi.clone(),
        };
        let mut g = Graph::new();
        let piv = g.param(pi).unwrap();
        let mu = g.constant(Tensor::row_vector(vec![2.0, 3.0]));
        let lv = g.constant(Tensor::row_vector(vec![0.0, 0.0]));
        let post = PosteriorVars { pi: piv, mu, log_var: lv };
        let (z, _) = spike_slab_draw(&mut g, &post, &noise, Estimator::StraightThrough).unwrap();
        assert!(g.value(z).max_abs_diff(&Tensor::row_vector(vec![0.0, 3.0])) < 1e-15);
        let s = g.sum(z).unwrap();
        let grad = g.backward(s).unwrap().wrt(piv).unwrap();
        assert_eq!(grad.data(), &[2.0, 3.0]);
    }
}
