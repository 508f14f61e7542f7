use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::Mlp;
use crate::task_vectors::{block_partition, derive_task_vector, BlockLayout, ParamSet, PartitionScheme, TaskVectorPool};

use super::suite::{Split, TaskSuite};

/// Mean cross-entropy of the base model and its gradient.
pub fn loss_and_grad(theta: &ParamSet, split: &Split) -> Result<(f64, Vec<crate::autodiff::Tensor>)> {
    let mlp = Mlp::from_params(theta)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = theta.tensors().iter().map(|t| g.param(t.clone())).collect::<Result<_>>()?;
    let x = g.constant(split.x.clone());
    let logits = mlp.forward(&mut g, x, &vars)?;
    let loss = g.softmax_cross_entropy(logits, &split.y)?;
    let grads = g.backward(loss)?;
    let gs = vars.iter().map(|&v| grads.wrt(v)).collect::<Result<_>>()?;
    Ok((g.value(loss).item(), gs))
}

/// `steps` full-batch gradient-descent steps on `split` from `theta_0`.
pub fn finetune_base(theta_0: &ParamSet, split: &Split, steps: usize, lr: f64) -> Result<ParamSet> {
    if !(lr > 0.0) {
        return Err(Error::config("finetune.lr", "must be positive"));
    }
    let mut theta = theta_0.clone();
    for step in 0..steps {
        let (loss, grads) = loss_and_grad(&theta, split).map_err(|e| match e {
            Error::NonFinite { op } => Error::Numerical(format!("fine-tuning diverged at step {step} ({op})")),
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("fine-tuning loss is {loss} at step {step}")));
        }
        let flat: Vec<f64> = theta
            .flatten()
            .iter()
            .zip(grads.iter().flat_map(|g| g.data().iter()))
            .map(|(p, g)| p - lr * g)
            .collect();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("fine-tuning diverged at step {step}")));
        }
        theta = theta.with_flat(&flat)?;
    }
    Ok(theta)
}

/// Fine-tune `theta_0` on every task of `suite` and collect the task
/// vectors; returns the fine-tuned parameter sets and the pool.
pub fn build_pool(
    theta_0: &ParamSet,
    suite: &TaskSuite,
    steps: usize,
    lr: f64,
    scheme: &PartitionScheme,
) -> Result<(Vec<ParamSet>, TaskVectorPool)> {
    let blocks: BlockLayout = block_partition(theta_0, scheme)?;
    let mut thetas = Vec::with_capacity(suite.n_tasks());
    let mut vectors = Vec::with_capacity(suite.n_tasks());
    for (t, task) in suite.tasks.iter().enumerate() {
        let theta_t = finetune_base(theta_0, &task.train, steps, lr)?;
        vectors.push(derive_task_vector(&theta_t, theta_0, t)?);
        thetas.push(theta_t);
    }
    Ok((thetas, TaskVectorPool::new(vectors, blocks)?))
}
