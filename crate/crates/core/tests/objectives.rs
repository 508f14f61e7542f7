use proptest::prelude::*;

use taskvec::autodiff::LOG_VAR_MIN;
use taskvec::inference::{PosteriorParams, PosteriorVars};
use taskvec::objectives::*;
use taskvec::rng;
use taskvec::{Graph, Result, Tensor, Var};

/// `y_b ~ N(a z_b, s2)` with one coefficient per sample.
struct Toy {
    y: Vec<f64>,
    a: f64,
    s2: f64,
}

impl Toy {
    fn log_density(&self, b: usize, z: f64) -> f64 {
        let r = self.y[b] - self.a * z;
        -0.5 * (2.0 * std::f64::consts::PI * self.s2).ln() - r * r / (2.0 * self.s2)
    }
}

impl Likelihood for Toy {
    fn log_lik(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let y = g.constant(Tensor::new(vec![self.y.len(), 1], self.y.clone())?);
        let az = g.scale(z, self.a)?;
        let r = g.sub(y, az)?;
        let r2 = g.square(r)?;
        let q = g.scale(r2, -0.5 / self.s2)?;
        g.add_scalar(q, -0.5 * (2.0 * std::f64::consts::PI * self.s2).ln())
    }
}

fn col(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
}

fn bind(g: &mut Graph, pi: &[f64], mu: &[f64], lv: &[f64]) -> PosteriorVars {
    PosteriorVars { pi: g.param(col(pi)).unwrap(), mu: g.param(col(mu)).unwrap(), log_var: g.param(col(lv)).unwrap() }
}

fn toy() -> Toy {
    Toy { y: vec![0.4, -1.2, 2.0], a: 1.5, s2: 0.7 }
}

fn gaussian(slab: f64) -> PriorSpec {
    PriorSpec::new(PriorKind::Gaussian, slab, 0.5).unwrap()
}

fn spike_slab(slab: f64, p: f64) -> PriorSpec {
    PriorSpec::new(PriorKind::SpikeSlab, slab, p).unwrap()
}

#[test]
fn posterior_equal_to_prior_has_zero_kl() {
    let slab: f64 = 2.5;
    let mut g = Graph::new();
    let post = bind(&mut g, &[0.5; 3], &[0.0; 3], &[slab.ln(); 3]);
    let nodes = gaussian_elbo_quadrature(&mut g, &toy(), &post, &gaussian(slab), 20).unwrap();
    let b = nodes.breakdown(&g);
    assert!(b.kl_gaussian_total.abs() < 1e-12);
    assert_eq!(b.kl_bernoulli_total, 0.0);
    assert!(kl_gaussian_slab(0.0, slab, slab).unwrap().abs() < 1e-15);
}

#[test]
fn spike_slab_at_prior_has_zero_kl() {
    let (slab, p): (f64, f64) = (1.3, 0.3);
    let mut g = Graph::new();
    let post = bind(&mut g, &[p; 3], &[0.0; 3], &[slab.ln(); 3]);
    let nodes = spike_slab_elbo_quadrature(&mut g, &toy(), &post, &spike_slab(slab, p), 20).unwrap();
    let b = nodes.breakdown(&g);
    assert!(b.kl_bernoulli_total.abs() < 1e-12);
    assert!(b.kl_gaussian_total.abs() < 1e-12);
}

#[test]
fn full_inclusion_reduces_to_gaussian() {
    let (mu, lv, p) = ([0.3, -0.8, 1.1], [-1.0, 0.2, -2.5], 0.2f64);
    let lik = toy();
    let mut g = Graph::new();
    let post = bind(&mut g, &[1.0 - 1e-13; 3], &mu, &lv);
    let ss = spike_slab_elbo_quadrature(&mut g, &lik, &post, &spike_slab(1.0, p), 30).unwrap().breakdown(&g);
    let mut g = Graph::new();
    let post = bind(&mut g, &[1.0; 3], &mu, &lv);
    let ga = gaussian_elbo_quadrature(&mut g, &lik, &post, &gaussian(1.0), 30).unwrap().breakdown(&g);
    assert!((ss.expected_log_lik - ga.expected_log_lik).abs() < 1e-9);
    assert!((ss.kl_gaussian_total - ga.kl_gaussian_total).abs() < 1e-9);
    let penalty = 3.0 * (1.0 / p).ln();
    assert!((ss.kl_bernoulli_total - penalty).abs() < 1e-9);
    assert!((ss.elbo - (ga.elbo - penalty)).abs() < 1e-9);
    assert!((kl_bernoulli(1.0, p).unwrap() - (1.0 / p).ln()).abs() < 1e-15);
}

#[test]
fn vanishing_variance_is_finite_and_tends_to_point_likelihood() {
    let lik = toy();
    let mu = [0.2, -0.7, 1.4];
    let point: f64 = (0..3).map(|b| lik.log_density(b, mu[b])).sum();
    for lv in [LOG_VAR_MIN, -40.0, -1e6] {
        let mut g = Graph::new();
        let post = bind(&mut g, &[1.0; 3], &mu, &[lv; 3]);
        let b = gaussian_elbo_quadrature(&mut g, &lik, &post, &gaussian(1.0), 10).unwrap().breakdown(&g);
        assert!(b.elbo.is_finite());
        let var = LOG_VAR_MIN.exp();
        assert!((b.expected_log_lik - (point - 1.5 * lik.a * lik.a * var / lik.s2)).abs() < 1e-9);
        let kl: f64 = mu.iter().map(|&m| kl_gaussian_slab(m, var, 1.0).unwrap()).sum();
        assert!((b.kl_gaussian_total - kl).abs() < 1e-9);
    }
}

#[test]
fn breakdown_terms_sum_to_objective() {
    let lik = toy();
    let mut r = rng::stream(11, "objectives/breakdown");
    for _ in 0..20 {
        let pi: Vec<f64> = (0..3).map(|_| 0.05 + 0.9 * rng::uniform(&mut r)).collect();
        let mu: Vec<f64> = (0..3).map(|_| rng::normal(&mut r)).collect();
        let lv: Vec<f64> = (0..3).map(|_| rng::normal(&mut r) - 1.0).collect();
        let mut g = Graph::new();
        let post = bind(&mut g, &pi, &mu, &lv);
        let nodes = spike_slab_elbo_quadrature(&mut g, &lik, &post, &spike_slab(1.0, 0.5), 12).unwrap();
        let obj = nodes.objective(&mut g, 1.0).unwrap();
        let b = nodes.breakdown(&g);
        assert!((g.value(obj).item() - b.elbo).abs() < 1e-10);
        assert!((b.elbo - (b.expected_log_lik - b.kl_bernoulli_total - b.kl_gaussian_total)).abs() < 1e-10);
        let kb: f64 = pi.iter().map(|&p| kl_bernoulli(p, 0.5).unwrap()).sum();
        let kg: f64 = (0..3).map(|k| pi[k] * kl_gaussian_slab(mu[k], lv[k].exp(), 1.0).unwrap()).sum();
        assert!((b.kl_bernoulli_total - kb).abs() < 1e-10);
        assert!((b.kl_gaussian_total - kg).abs() < 1e-10);
    }
}

#[test]
fn wrong_prior_kind_is_rejected() {
    let mut g = Graph::new();
    let post = bind(&mut g, &[0.5; 3], &[0.0; 3], &[0.0; 3]);
    assert!(gaussian_elbo_quadrature(&mut g, &toy(), &post, &spike_slab(1.0, 0.5), 5).is_err());
    assert!(spike_slab_elbo_quadrature(&mut g, &toy(), &post, &gaussian(1.0), 5).is_err());
    assert!(gaussian_elbo_nodes(&mut g, &toy(), &post, &gaussian(1.0), &[]).is_err());
}

fn params(pi: &[f64], mu: &[f64], lv: &[f64]) -> PosteriorParams {
    let row = |v: &[f64]| Tensor::new(vec![1, v.len()], v.to_vec()).unwrap();
    PosteriorParams::new(row(pi), row(mu), row(lv), 1, pi.len()).unwrap()
}

#[test]
fn mc_kl_at_prior_is_zero_within_three_se() {
    let prior = spike_slab(2.0, 0.4);
    let post = params(&[0.4; 4], &[0.0; 4], &[2f64.ln(); 4]);
    let (mean, se) = mc_kl_estimate(&post, &prior, 20_000, &mut rng::stream(1, "mc/zero")).unwrap();
    assert!(mean.abs() <= 3.0 * se + 1e-12, "{mean} vs se {se}");
}

#[test]
fn mc_kl_standard_error_shrinks_with_samples() {
    let prior = spike_slab(1.0, 0.5);
    let post = params(&[0.8, 0.3], &[0.5, -1.0], &[-1.0, 0.5]);
    let (m1, se1) = mc_kl_estimate(&post, &prior, 10_000, &mut rng::stream(2, "mc/a")).unwrap();
    let (m4, se4) = mc_kl_estimate(&post, &prior, 40_000, &mut rng::stream(2, "mc/b")).unwrap();
    let ratio = se1 / se4;
    assert!((ratio - 2.0).abs() < 0.2, "se ratio {ratio}");
    let exact = kl_bernoulli(0.8, 0.5).unwrap()
        + kl_bernoulli(0.3, 0.5).unwrap()
        + 0.8 * kl_gaussian_slab(0.5, (-1f64).exp(), 1.0).unwrap()
        + 0.3 * kl_gaussian_slab(-1.0, 0.5f64.exp(), 1.0).unwrap();
    assert!((m1 - exact).abs() < 3.0 * se1);
    assert!((m4 - exact).abs() < 3.0 * se4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quadrature_elbo_never_exceeds_log_evidence(mu in -2.0f64..2.0, lv in -4.0f64..2.0, y in -3.0f64..3.0) {
        // evidence of y ~ N(a z, s2), z ~ N(0, 1) is N(y; 0, a^2 + s2)
        let lik = Toy { y: vec![y], a: 1.5, s2: 0.7 };
        let mut g = Graph::new();
        let post = bind(&mut g, &[1.0], &[mu], &[lv]);
        let b = gaussian_elbo_quadrature(&mut g, &lik, &post, &gaussian(1.0), 20).unwrap().breakdown(&g);
        let v = lik.a * lik.a + lik.s2;
        let log_evidence = -0.5 * (2.0 * std::f64::consts::PI * v).ln() - y * y / (2.0 * v);
        prop_assert!(b.elbo <= log_evidence + 1e-9);
    }

    #[test]
    fn spike_slab_kl_terms_nonnegative(pi in 0.01f64..0.99, mu in -3.0f64..3.0, lv in -5.0f64..3.0, p in 0.05f64..0.95) {
        let mut g = Graph::new();
        let post = bind(&mut g, &[pi], &[mu], &[lv]);
        let b = spike_slab_elbo_quadrature(&mut g, &toy_one(), &post, &spike_slab(1.0, p), 8).unwrap().breakdown(&g);
        prop_assert!(b.kl_bernoulli_total >= -1e-12);
        prop_assert!(b.kl_gaussian_total >= -1e-12);
    }
}

fn toy_one() -> Toy {
    Toy { y: vec![0.9], a: 1.0, s2: 1.0 }
}
