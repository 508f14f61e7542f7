use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::metrics::MetricsRecord;
use super::optim::{cosine_lr, AdamW};
use super::suite::{Split, TaskSuite};
use crate::autodiff::{Graph, Tensor, Var, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::error::{Error, Result};
use crate::gating::{
    distributional_deviation, gated_ratio, gradient_sensitivity, hard_gate, reg_total_nodes, soft_gate, soft_gate_nodes,
    threshold, uncertainty, BatchStats, GateParams, GateVars, RegWeights,
};
use crate::inference::{Estimator, HeadInit, InferenceNet, PosteriorVars, SpikeSlabNoise, PI_LOGIT_BOUND};
use crate::model::{accuracy, ComposedModel};
use crate::objectives::{gaussian_elbo_nodes, spike_slab_elbo_nodes, Classification, ElboNodes, PriorKind, PriorSpec};
use crate::rng::{self, Stream};
use crate::task_vectors::{read_checkpoint, write_checkpoint, ParamSet, TaskVectorPool};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// One coefficient matrix shared by every sample.
    TaskLevelDet,
    /// Coefficients from the mean head of an inference network.
    SampleSpecificDet,
    /// One free posterior shared by every sample.
    TaskLevelVi,
    /// Amortized posterior, optionally gated.
    SampleSpecificVi,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::TaskLevelDet, Regime::SampleSpecificDet, Regime::TaskLevelVi, Regime::SampleSpecificVi];

    pub fn name(self) -> &'static str {
        match self {
            Regime::TaskLevelDet => "task_level_det",
            Regime::SampleSpecificDet => "sample_specific_det",
            Regime::TaskLevelVi => "task_level_vi",
            Regime::SampleSpecificVi => "sample_specific_vi",
        }
    }

    pub fn is_variational(self) -> bool {
        matches!(self, Regime::TaskLevelVi | Regime::SampleSpecificVi)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::config("train.regimes", format!("unknown regime `{s}`")))
    }
}

/// Optimization and model settings shared by every (regime, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub prior: PriorKind,
    pub slab_variance: f64,
    pub prior_inclusion: f64,
    /// Weight of the KL terms relative to the per-sample log-likelihood.
    pub kl_weight: f64,
    /// Monte Carlo samples per training step.
    pub mc_samples: usize,
    /// Monte Carlo samples for the reported objective trace.
    pub eval_samples: usize,
    pub estimator: Estimator,
    /// Starting value of shared coefficients.
    pub coef_init: f64,
    pub head: HeadInit,
    /// Gate the amortized variational regime.
    pub gating: bool,
    pub gate: GateParams,
    pub reg: RegWeights,
    /// Weight of the gate regularizers in the training objective.
    pub reg_weight: f64,
    pub ema_decay: f64,
    /// Training samples in the fixed probe set behind the objective trace.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            lr: 5e-4,
            weight_decay: 0.01,
            epochs: 20,
            prior: PriorKind::SpikeSlab,
            slab_variance: 1.0,
            prior_inclusion: 0.5,
            kl_weight: 1e-3,
            mc_samples: 1,
            eval_samples: 16,
            estimator: Estimator::StraightThrough,
            coef_init: 0.05,
            head: HeadInit::default(),
            gating: false,
            gate: GateParams::default(),
            reg: RegWeights::default(),
            reg_weight: 1e-3,
            ema_decay: 0.99,
            probe_size: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::config("train.kl_weight", "must be non-negative"));
        }
        if self.mc_samples == 0 || self.eval_samples == 0 {
            return Err(Error::config("train.mc_samples", "must be positive"));
        }
        if !(self.reg_weight >= 0.0) {
            return Err(Error::config("train.reg_weight", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("train.ema_decay", "must lie in [0, 1)"));
        }
        if self.probe_size == 0 {
            return Err(Error::config("train.probe_size", "must be positive"));
        }
        if !self.coef_init.is_finite() || !self.head.mu.is_finite() {
            return Err(Error::config("train.coef_init", "must be finite"));
        }
        if !(self.head.pi > 0.0 && self.head.pi < 1.0) {
            return Err(Error::config("train.head.pi", "must lie strictly between 0 and 1"));
        }
        PriorSpec::new(self.prior, self.slab_variance, self.prior_inclusion)?;
        self.gate.validate()?;
        self.reg.validate()
    }

    pub fn prior_spec(&self) -> Result<PriorSpec> {
        PriorSpec::new(self.prior, self.slab_variance, self.prior_inclusion)
    }
}

/// One (regime, seed) training cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub regime: Regime,
    pub seed: u64,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Gating only applies to the amortized variational regime.
    pub fn gated(&self) -> bool {
        self.train.gating && self.regime == Regime::SampleSpecificVi
    }

    fn prior_label(&self) -> String {
        if self.regime.is_variational() {
            self.train.prior.to_string()
        } else {
            "none".into()
        }
    }
}

/// Learned coefficient source of a trained state.
#[derive(Clone, Debug, PartialEq)]
pub enum CoefficientModel {
    /// `1 x (N*M)` coefficients.
    Shared { lam: Tensor },
    /// `1 x (N*M)` posterior parameters.
    SharedPosterior { pi: Tensor, mu: Tensor, log_var: Tensor },
    Amortized { net: InferenceNet },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateModel {
    pub params: GateParams,
    pub stats: BatchStats,
}

#[derive(Clone)]
pub struct TrainedState {
    pub regime: Regime,
    pub prior: PriorKind,
    pub seed: u64,
    pub coefficients: CoefficientModel,
    pub gate: Option<GateModel>,
    pub elbo_trace: Vec<f64>,
    pub model: Arc<ComposedModel>,
}

impl TrainedState {
    fn prior_label(&self) -> String {
        if self.regime.is_variational() {
            self.prior.to_string()
        } else {
            "none".into()
        }
    }

    /// Evaluation coefficients for each row of `x`: posterior means (times
    /// the inclusion probability under a spike-and-slab prior), or the
    /// gated means when a gate was trained.
    pub fn coefficients(&self, x: &Tensor, hard: bool) -> Result<Tensor> {
        let rows = x.rows();
        let spike = self.regime.is_variational() && self.prior == PriorKind::SpikeSlab;
        let repeat = |row: &Tensor| Tensor::from_fn(rows, row.len(), |_, c| row.data()[c]);
        match &self.coefficients {
            CoefficientModel::Shared { lam } => Ok(repeat(lam)),
            CoefficientModel::SharedPosterior { pi, mu, .. } => {
                let m = if spike { pi.zip_map(mu, |p, m| p * m)? } else { mu.clone() };
                Ok(repeat(&m))
            }
            CoefficientModel::Amortized { net } => {
                let post = net.infer_posterior(x)?;
                match &self.gate {
                    Some(gm) => {
                        let s = gradient_sensitivity(x, net)?;
                        let v = gm.stats.deviation(&post.mu)?;
                        let u = uncertainty(&s, &v, gm.params.eta)?;
                        let gamma = threshold(&u, &gm.params);
                        if hard {
                            hard_gate(&post.mu, &gamma)
                        } else {
                            let omega = soft_gate(&post.mu, &gamma, gm.params.rho)?;
                            post.mu.zip_map(&omega, |m, o| m * o)
                        }
                    }
                    None if spike => post.pi.zip_map(&post.mu, |p, m| p * m),
                    None => Ok(post.mu),
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (kind, entries): (&str, Vec<(String, Tensor)>) = match &self.coefficients {
            CoefficientModel::Shared { lam } => ("shared", vec![("lam".into(), lam.clone())]),
            CoefficientModel::SharedPosterior { pi, mu, log_var } => (
                "shared_posterior",
                vec![("pi".into(), pi.clone()), ("mu".into(), mu.clone()), ("log_var".into(), log_var.clone())],
            ),
            CoefficientModel::Amortized { net } => {
                ("amortized", net.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect())
            }
        };
        let meta = json!({
            "regime": self.regime,
            "prior": self.prior,
            "seed": self.seed,
            "coefficients": kind,
            "gate": self.gate.as_ref().map(|g| json!({"params": g.params, "stats": g.stats})),
            "elbo_trace": self.elbo_trace,
        });
        write_checkpoint(path, "trained_state", &ParamSet::new(entries)?, meta)
    }

    pub fn load(path: &Path, model: Arc<ComposedModel>, n_tasks: usize, n_blocks: usize) -> Result<TrainedState> {
        let ck = read_checkpoint(path)?;
        let bad = |message: String| Error::Malformed { path: path.to_path_buf(), message };
        if ck.kind != "trained_state" {
            return Err(bad(format!("expected a trained state, found `{}`", ck.kind)));
        }
        let field = |name: &str| ck.meta.get(name).cloned().ok_or_else(|| bad(format!("missing `{name}`")));
        let regime: Regime = serde_json::from_value(field("regime")?).map_err(|e| bad(e.to_string()))?;
        let prior: PriorKind = serde_json::from_value(field("prior")?).map_err(|e| bad(e.to_string()))?;
        let seed: u64 = serde_json::from_value(field("seed")?).map_err(|e| bad(e.to_string()))?;
        let elbo_trace: Vec<f64> = serde_json::from_value(field("elbo_trace")?).map_err(|e| bad(e.to_string()))?;
        let gate = match field("gate")? {
            serde_json::Value::Null => None,
            v => Some(GateModel {
                params: serde_json::from_value(v["params"].clone()).map_err(|e| bad(e.to_string()))?,
                stats: serde_json::from_value(v["stats"].clone()).map_err(|e| bad(e.to_string()))?,
            }),
        };
        let get = |n: &str| ck.params.require(n).cloned();
        let coefficients = match field("coefficients")?.as_str() {
            Some("shared") => CoefficientModel::Shared { lam: get("lam")? },
            Some("shared_posterior") => CoefficientModel::SharedPosterior { pi: get("pi")?, mu: get("mu")?, log_var: get("log_var")? },
            Some("amortized") => CoefficientModel::Amortized { net: InferenceNet::from_params(ck.params.clone(), n_tasks, n_blocks)? },
            other => return Err(bad(format!("unknown coefficient kind {other:?}"))),
        };
        Ok(TrainedState { regime, prior, seed, coefficients, gate, elbo_trace, model })
    }
}

enum Phase<'a> {
    Train(&'a mut BatchStats),
    Probe,
}

struct Objective<'a> {
    cfg: &'a ExperimentConfig,
    model: &'a ComposedModel,
    prior: PriorSpec,
    n_train: usize,
    template: Option<InferenceNet>,
}

impl Objective<'_> {
    fn initial_params(&self) -> Result<Vec<Tensor>> {
        let t = &self.cfg.train;
        let k = self.model.n_coefficients();
        Ok(match self.cfg.regime {
            Regime::TaskLevelDet => vec![Tensor::full(&[1, k], t.coef_init)],
            Regime::TaskLevelVi => vec![
                Tensor::full(&[1, k], t.coef_init),
                Tensor::full(&[1, k], t.head.log_var),
                Tensor::full(&[1, k], (t.head.pi / (1.0 - t.head.pi)).ln()),
            ],
            Regime::SampleSpecificDet | Regime::SampleSpecificVi => {
                let mut p = self.template.as_ref().expect("amortized regimes carry a net").params().tensors().to_vec();
                if self.cfg.gated() {
                    p.push(Tensor::full(&[1, 1], t.gate.psi1));
                    p.push(Tensor::full(&[1, 1], t.gate.psi2));
                }
                p
            }
        })
    }

    fn net_with(&self, params: &[Tensor]) -> Result<InferenceNet> {
        let mut net = self.template.clone().expect("amortized regimes carry a net");
        let names = net.params().names().to_vec();
        net.set_params(ParamSet::new(names.into_iter().zip(params[..8].iter().cloned()).collect())?)?;
        Ok(net)
    }

    fn elbo(&self, g: &mut Graph, post: &PosteriorVars, x: &Tensor, y: &[usize], k: usize, rng: &mut Stream) -> Result<ElboNodes> {
        let lik = Classification { model: self.model, x, y };
        match self.prior.kind {
            PriorKind::Gaussian => {
                let shape = g.value(post.mu).shape().to_vec();
                let eps: Vec<Tensor> = (0..k).map(|_| rng::normal_tensor(rng, &shape)).collect();
                gaussian_elbo_nodes(g, &lik, post, &self.prior, &eps)
            }
            PriorKind::SpikeSlab => {
                let pi = g.value(post.pi).clone();
                let noise: Vec<SpikeSlabNoise> = (0..k).map(|_| SpikeSlabNoise::draw(&pi, rng)).collect();
                spike_slab_elbo_nodes(g, &lik, post, &self.prior, &noise, self.cfg.train.estimator)
            }
        }
    }

    /// Per-sample training loss on one batch.
    fn loss(&self, g: &mut Graph, params: &[Tensor], vars: &[Var], batch: &Split, k: usize, rng: &mut Stream, phase: Phase) -> Result<Var> {
        let (x, y) = (&batch.x, batch.y.as_slice());
        let b = x.rows() as f64;
        let t = &self.cfg.train;
        match self.cfg.regime {
            Regime::TaskLevelDet => {
                let z = g.broadcast_row(vars[0], x.rows())?;
                let logits = self.model.forward(g, x, z)?;
                g.softmax_cross_entropy(logits, y)
            }
            Regime::SampleSpecificDet => {
                let net = self.template.as_ref().expect("amortized");
                let xv = g.constant(x.clone());
                let post = net.forward(g, xv, &vars[..8])?;
                let logits = self.model.forward(g, x, post.mu)?;
                g.softmax_cross_entropy(logits, y)
            }
            Regime::TaskLevelVi => {
                let rows = x.rows();
                let mu = g.broadcast_row(vars[0], rows)?;
                let lv = g.clamp(vars[1], LOG_VAR_MIN, LOG_VAR_MAX)?;
                let log_var = g.broadcast_row(lv, rows)?;
                let logit = g.clamp(vars[2], -PI_LOGIT_BOUND, PI_LOGIT_BOUND)?;
                let pi = g.sigmoid(logit)?;
                let pi = g.broadcast_row(pi, rows)?;
                let post = PosteriorVars { pi, mu, log_var };
                let nodes = self.elbo(g, &post, x, y, k, rng)?;
                // the shared posterior's KL is paid once per training set
                let obj = nodes.objective(g, t.kl_weight * b / self.n_train as f64)?;
                g.scale(obj, -1.0 / b)
            }
            Regime::SampleSpecificVi if !self.cfg.gated() => {
                let net = self.template.as_ref().expect("amortized");
                let xv = g.constant(x.clone());
                let post = net.forward(g, xv, &vars[..8])?;
                let nodes = self.elbo(g, &post, x, y, k, rng)?;
                let obj = nodes.objective(g, t.kl_weight)?;
                g.scale(obj, -1.0 / b)
            }
            Regime::SampleSpecificVi => {
                let net = self.net_with(params)?;
                let xv = g.constant(x.clone());
                let post = net.forward(g, xv, &vars[..8])?;
                let mu_val = g.value(post.mu).clone();
                let s = gradient_sensitivity(x, &net)?;
                let v = distributional_deviation(&mu_val)?;
                if let Phase::Train(stats) = phase {
                    stats.update(&mu_val)?;
                }
                let u = uncertainty(&s, &v, t.gate.eta)?;
                let gv = GateVars { psi1: vars[8], psi2: vars[9] };
                let gp = GateParams { psi1: params[8].item(), psi2: params[9].item(), ..t.gate };
                let gamma = gv.threshold(g, &u)?;
                let omega = soft_gate_nodes(g, post.mu, gamma, t.gate.rho)?;
                let z = g.mul(post.mu, omega)?;
                let logits = self.model.forward(g, x, z)?;
                let ce = g.softmax_cross_entropy(logits, y)?;
                let reg = reg_total_nodes(g, post.mu, gamma, omega, &u, &gv, &gp, &t.reg)?;
                let reg = g.scale(reg, t.reg_weight)?;
                g.add(ce, reg)
            }
        }
    }
}

fn numerical(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Numerical(format!("non-finite {op} at epoch {epoch}, step {step}")),
        other => other,
    }
}

/// Train one (regime, seed) cell on the union of the suite's training
/// splits and evaluate it on every task's test split.
pub fn train_regime(
    cfg: &ExperimentConfig,
    suite: &TaskSuite,
    pool: &TaskVectorPool,
    theta_0: &ParamSet,
) -> Result<(TrainedState, MetricsRecord)> {
    cfg.train.validate()?;
    if pool.n_tasks() != suite.n_tasks() {
        return Err(Error::Invalid(format!("pool has {} task vectors for {} tasks", pool.n_tasks(), suite.n_tasks())));
    }
    let model = Arc::new(ComposedModel::new(theta_0, pool)?);
    if model.mlp().input != suite.spec.dim {
        return Err(Error::Invalid(format!("model input {} but suite dim {}", model.mlp().input, suite.spec.dim)));
    }
    let t = &cfg.train;
    let union = suite.train_union();
    let n = union.len();
    let label = format!("train/{}", cfg.regime);
    let template = match cfg.regime {
        Regime::SampleSpecificDet | Regime::SampleSpecificVi => {
            Some(InferenceNet::new(suite.spec.dim, pool.n_tasks(), pool.n_blocks(), &t.head, &mut rng::stream(cfg.seed, &format!("{label}/init")))?)
        }
        _ => None,
    };
    let objective = Objective { cfg, model: &model, prior: t.prior_spec()?, n_train: n, template };

    let mut params = objective.initial_params()?;
    let mut opt = AdamW::new(&params, t.weight_decay);
    let mut stats = BatchStats::new(model.n_coefficients(), t.ema_decay);
    let mut shuffle = rng::stream(cfg.seed, &format!("{label}/shuffle"));
    let mut noise = rng::stream(cfg.seed, &format!("{label}/noise"));
    let probe_n = t.probe_size.min(n);
    let probe = union.select(&(0..probe_n).map(|i| i * n / probe_n).collect::<Vec<_>>());

    let steps_per_epoch = n.div_ceil(t.batch_size);
    let total = t.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(t.epochs);
    let mut step = 0;
    for epoch in 0..t.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(t.batch_size) {
            let batch = union.select(chunk);
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect::<Result<_>>()?;
            let loss = objective
                .loss(&mut g, &params, &vars, &batch, t.mc_samples, &mut noise, Phase::Train(&mut stats))
                .map_err(|e| numerical(e, epoch, step))?;
            let grads = g.backward(loss).map_err(|e| numerical(e, epoch, step))?;
            let grads: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect::<Result<_>>()?;
            opt.step(&mut params, &grads, cosine_lr(t.lr, step, total));
            if cfg.gated() {
                let p1 = params[8].data_mut();
                p1[0] = p1[0].max(0.0);
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Numerical(format!("parameters diverged at epoch {epoch}, step {step}")));
            }
            step += 1;
        }
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect::<Result<_>>()?;
        let mut probe_rng = rng::stream(cfg.seed, &format!("{label}/probe"));
        let loss = objective
            .loss(&mut g, &params, &vars, &probe, t.eval_samples, &mut probe_rng, Phase::Probe)
            .map_err(|e| numerical(e, epoch, step))?;
        trace.push(-g.value(loss).item());
    }

    let coefficients = match cfg.regime {
        Regime::TaskLevelDet => CoefficientModel::Shared { lam: params[0].clone() },
        Regime::TaskLevelVi => CoefficientModel::SharedPosterior {
            mu: params[0].clone(),
            log_var: params[1].map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)),
            pi: params[2].map(|v| crate::autodiff::sigmoid(v.clamp(-PI_LOGIT_BOUND, PI_LOGIT_BOUND))),
        },
        Regime::SampleSpecificDet | Regime::SampleSpecificVi => CoefficientModel::Amortized { net: objective.net_with(&params)? },
    };
    let gate = cfg.gated().then(|| GateModel {
        params: GateParams { psi1: params[8].item(), psi2: params[9].item(), ..t.gate },
        stats,
    });
    let state = TrainedState { regime: cfg.regime, prior: t.prior, seed: cfg.seed, coefficients, gate, elbo_trace: trace, model };
    let metrics = evaluate(&state, suite, true)?;
    debug_assert_eq!(metrics.prior, cfg.prior_label());
    Ok((state, metrics))
}

/// Test accuracy per task; hard gating at inference when `hard_gate` is set
/// and the state carries a gate.
pub fn evaluate(state: &TrainedState, suite: &TaskSuite, hard_gate: bool) -> Result<MetricsRecord> {
    let mut accs = Vec::with_capacity(suite.n_tasks());
    let (mut kept, mut total) = (0.0, 0usize);
    for task in &suite.tasks {
        let z = state.coefficients(&task.test.x, hard_gate)?;
        let logits = state.model.logits(&task.test.x, &z)?;
        accs.push(accuracy(&logits, &task.test.y));
        if state.gate.is_some() && hard_gate {
            kept += gated_ratio(&z)? * z.len() as f64;
            total += z.len();
        }
    }
    let ratio = if total > 0 { kept / total as f64 } else { 1.0 };
    Ok(MetricsRecord {
        regime: state.regime.to_string(),
        prior: state.prior_label(),
        gated: state.gate.is_some(),
        seed: state.seed,
        avg_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
        task_accuracies: accs,
        gated_ratio: ratio,
        elbo_trace: state.elbo_trace.clone(),
    })
}

/// Hard-gate the coefficients of a trained task-level deterministic state.
/// Shared coefficients do not depend on the input and do not vary across a
/// batch, so their uncertainty is zero and the threshold reduces to `psi1`.
pub fn gate_filter_baseline(state: &TrainedState, gp: &GateParams, suite: &TaskSuite) -> Result<MetricsRecord> {
    let lam = match (&state.coefficients, state.regime) {
        (CoefficientModel::Shared { lam }, Regime::TaskLevelDet) => lam,
        _ => return Err(Error::Invalid("gate filtering needs a trained task_level_det state".into())),
    };
    gp.validate()?;
    let s = Tensor::zeros(lam.shape());
    let v = distributional_deviation(lam)?;
    let u = uncertainty(&s, &v, gp.eta)?;
    let gated = hard_gate(lam, &threshold(&u, gp))?;
    let filtered = TrainedState { coefficients: CoefficientModel::Shared { lam: gated.clone() }, ..state.clone() };
    let mut record = evaluate(&filtered, suite, true)?;
    record.gated = true;
    record.gated_ratio = gated_ratio(&gated)?;
    Ok(record)
}
