//! Parameter sets, task vectors and their block-wise composition.
//!
//! A task vector is the difference between fine-tuned and base parameters.
//! A [`TaskVectorPool`] holds N of them sharing one layout, each split into
//! the M blocks of a [`BlockLayout`]; a [`CoefficientMatrix`] assigns one
//! scaling coefficient per (task, block) pair.

mod checkpoint;
mod energy;
mod partition;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use energy::{block_row_energy, cumulative_energy, svd_energy};
pub use partition::{block_partition, BlockLayout, PartitionScheme};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Ordered named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, t) in entries {
            if names.contains(&name) {
                return Err(Error::Layout(format!("duplicate tensor name `{name}`")));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite { op: "param_set" });
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(ParamSet { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Layout(format!("missing tensor `{name}`")))
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// `(name, shape)` pairs in order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect()
    }

    pub fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Layout(format!("tensor names {:?} vs {:?}", self.names, other.names)));
        }
        for ((name, a), b) in self.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Layout(format!("`{name}` has shape {:?} vs {:?}", a.shape(), b.shape())));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All values in tensor order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Rebuild a set with this layout from values in tensor order.
    pub fn with_flat(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.num_params() {
            return Err(Error::Layout(format!("expected {} values, got {}", self.num_params(), flat.len())));
        }
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.len());
        for (name, t) in self.iter() {
            let n = t.len();
            entries.push((name.to_string(), Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?));
            offset += n;
        }
        ParamSet::new(entries)
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.tensors.iter().zip(&other.tensors).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max)
    }
}

/// `theta_t - theta_0` for one source task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    pub task: usize,
    pub delta: ParamSet,
}

pub fn derive_task_vector(theta_t: &ParamSet, theta_0: &ParamSet, task: usize) -> Result<TaskVector> {
    theta_t.check_same_layout(theta_0)?;
    let tensors = theta_t
        .tensors
        .iter()
        .zip(&theta_0.tensors)
        .map(|(a, b)| a.zip_map(b, |x, y| x - y))
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskVector { task, delta: ParamSet { names: theta_t.names.clone(), tensors } })
}

/// N task vectors over one layout, partitioned into M blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVectorPool {
    vectors: Vec<TaskVector>,
    blocks: BlockLayout,
    tensor_block: Vec<usize>,
}

impl TaskVectorPool {
    pub fn new(vectors: Vec<TaskVector>, blocks: BlockLayout) -> Result<Self> {
        let first = vectors.first().ok_or_else(|| Error::Invalid("task vector pool is empty".into()))?;
        for v in &vectors[1..] {
            v.delta.check_same_layout(&first.delta)?;
        }
        let tensor_block = blocks.tensor_blocks(&first.delta)?;
        Ok(TaskVectorPool { vectors, blocks, tensor_block })
    }

    pub fn vectors(&self) -> &[TaskVector] {
        &self.vectors
    }

    pub fn blocks(&self) -> &BlockLayout {
        &self.blocks
    }

    pub fn n_tasks(&self) -> usize {
        self.vectors.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Number of composition coefficients, N * M.
    pub fn n_coefficients(&self) -> usize {
        self.n_tasks() * self.n_blocks()
    }

    /// Block index of each tensor, in tensor order.
    pub fn tensor_blocks(&self) -> &[usize] {
        &self.tensor_block
    }

    pub fn layout_template(&self) -> &ParamSet {
        &self.vectors[0].delta
    }
}

/// Row-major N x M coefficients; entry `(i, j)` scales block `j` of task `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientMatrix {
    n_tasks: usize,
    n_blocks: usize,
    values: Vec<f64>,
}

impl CoefficientMatrix {
    pub fn new(n_tasks: usize, n_blocks: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_tasks * n_blocks {
            return Err(Error::shape("coefficients", format!("{n_tasks}x{n_blocks} needs {} values, got {}", n_tasks * n_blocks, values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "coefficients" });
        }
        Ok(CoefficientMatrix { n_tasks, n_blocks, values })
    }

    pub fn uniform(n_tasks: usize, n_blocks: usize, value: f64) -> Self {
        CoefficientMatrix { n_tasks, n_blocks, values: vec![value; n_tasks * n_blocks] }
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn get(&self, task: usize, block: usize) -> f64 {
        self.values[task * self.n_blocks + block]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// `theta_0 + sum_i sum_j lam[i][j] * tau_i^j`, accumulated task-major so the
/// result is reproducible to the bit.
pub fn compose(theta_0: &ParamSet, pool: &TaskVectorPool, lam: &CoefficientMatrix) -> Result<ParamSet> {
    if lam.n_tasks != pool.n_tasks() || lam.n_blocks != pool.n_blocks() {
        return Err(Error::shape(
            "compose",
            format!("coefficients {}x{} for a pool of {}x{}", lam.n_tasks, lam.n_blocks, pool.n_tasks(), pool.n_blocks()),
        ));
    }
    theta_0.check_same_layout(pool.layout_template())?;
    let mut out = theta_0.clone();
    for (i, tv) in pool.vectors.iter().enumerate() {
        for (k, tau) in tv.delta.tensors.iter().enumerate() {
            let c = lam.get(i, pool.tensor_block[k]);
            out.tensors[k].axpy(c, tau);
        }
    }
    if out.tensors.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite { op: "compose" });
    }
    Ok(out)
}

/// `theta_0 + lambda * sum_i tau_i`, i.e. [`compose`] with every coefficient
/// equal to `lambda`.
pub fn task_addition(theta_0: &ParamSet, pool: &TaskVectorPool, lambda: f64) -> Result<ParamSet> {
    if !lambda.is_finite() {
        return Err(Error::Invalid(format!("task addition scale must be finite, got {lambda}")));
    }
    compose(theta_0, pool, &CoefficientMatrix::uniform(pool.n_tasks(), pool.n_blocks(), lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn vec_set(v: &[f64]) -> ParamSet {
        ParamSet::new(vec![("w".into(), Tensor::row_vector(v.to_vec()))]).unwrap()
    }

    fn pool_of(sets: &[ParamSet], scheme: PartitionScheme) -> TaskVectorPool {
        let vectors = sets.iter().enumerate().map(|(i, s)| TaskVector { task: i, delta: s.clone() }).collect();
        let blocks = block_partition(&sets[0], &scheme).unwrap();
        TaskVectorPool::new(vectors, blocks).unwrap()
    }

    fn mlp_like(seed: u64) -> ParamSet {
        let mut r = rng::stream(seed, "tv-test");
        ParamSet::new(vec![
            ("w1".into(), rng::normal_tensor(&mut r, &[3, 2])),
            ("b1".into(), rng::normal_tensor(&mut r, &[1, 3])),
            ("w2".into(), rng::normal_tensor(&mut r, &[2, 3])),
            ("b2".into(), rng::normal_tensor(&mut r, &[1, 2])),
        ])
        .unwrap()
    }

    #[test]
    fn derive_identical_is_zero() {
        let t = mlp_like(1);
        let tv = derive_task_vector(&t, &t, 0).unwrap();
        assert!(tv.delta.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn derive_subtracts() {
        let tv = derive_task_vector(&vec_set(&[3.0, 5.0]), &vec_set(&[1.0, 2.0]), 0).unwrap();
        assert_eq!(tv.delta.flatten(), vec![2.0, 3.0]);
    }

    #[test]
    fn derive_rejects_layout_mismatch() {
        assert!(matches!(derive_task_vector(&vec_set(&[1.0]), &vec_set(&[1.0, 2.0]), 0), Err(Error::Layout(_))));
    }

    #[test]
    fn derive_then_compose_recovers_theta_t() {
        let (t0, tt) = (mlp_like(2), mlp_like(3));
        let tv = derive_task_vector(&tt, &t0, 0).unwrap();
        let pool = pool_of(&[tv.delta], PartitionScheme::PerTensor);
        let back = compose(&t0, &pool, &CoefficientMatrix::uniform(1, 4, 1.0)).unwrap();
        assert!(back.max_abs_diff(&tt) <= 1e-12);
    }

    #[test]
    fn compose_zero_coefficients_is_base() {
        let t0 = mlp_like(4);
        let pool = pool_of(&[mlp_like(5), mlp_like(6)], PartitionScheme::PerTensor);
        let out = compose(&t0, &pool, &CoefficientMatrix::uniform(2, 4, 0.0)).unwrap();
        assert_eq!(out, t0);
    }

    #[test]
    fn compose_single_vector_unit_coefficient() {
        let pool = pool_of(&[vec_set(&[2.0])], PartitionScheme::Single);
        let out = compose(&vec_set(&[1.0]), &pool, &CoefficientMatrix::uniform(1, 1, 1.0)).unwrap();
        assert_eq!(out.flatten(), vec![3.0]);
    }

    #[test]
    fn compose_signed_coefficients() {
        // 1 + 0.5*2 - 0.5*4 = 0
        let pool = pool_of(&[vec_set(&[2.0]), vec_set(&[4.0])], PartitionScheme::Single);
        let lam = CoefficientMatrix::new(2, 1, vec![0.5, -0.5]).unwrap();
        assert_eq!(compose(&vec_set(&[1.0]), &pool, &lam).unwrap().flatten(), vec![0.0]);
    }

    #[test]
    fn compose_dimension_mismatch() {
        let pool = pool_of(&[mlp_like(7)], PartitionScheme::PerTensor);
        let lam = CoefficientMatrix::uniform(1, 1, 1.0);
        assert!(matches!(compose(&mlp_like(8), &pool, &lam), Err(Error::Shape { .. })));
    }

    #[test]
    fn task_addition_scale_zero_and_one() {
        let t0 = mlp_like(9);
        let tau = mlp_like(10);
        let pool = pool_of(&[tau.clone()], PartitionScheme::PerTensor);
        assert_eq!(task_addition(&t0, &pool, 0.0).unwrap(), t0);
        let plus = task_addition(&t0, &pool, 1.0).unwrap();
        let expect: Vec<f64> = t0.flatten().iter().zip(tau.flatten()).map(|(a, b)| a + b).collect();
        assert_eq!(plus.flatten(), expect);
    }

    #[test]
    fn task_addition_equals_uniform_compose_on_random_pools() {
        for seed in 0..100u64 {
            let mut r = rng::stream(seed, "pools");
            let n = 1 + (rng::uniform(&mut r) * 4.0) as usize;
            let t0 = mlp_like(1000 + seed);
            let sets: Vec<ParamSet> = (0..n).map(|i| mlp_like(2000 + seed * 10 + i as u64)).collect();
            let pool = pool_of(&sets, PartitionScheme::PerTensor);
            let lambda = rng::normal(&mut r);
            let a = task_addition(&t0, &pool, lambda).unwrap();
            let b = compose(&t0, &pool, &CoefficientMatrix::uniform(n, 4, lambda)).unwrap();
            assert_eq!(a, b);
        }
    }

    proptest! {
        #[test]
        fn compose_is_linear(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let t0 = mlp_like(seed);
            let pool = pool_of(&[mlp_like(seed + 1), mlp_like(seed + 2)], PartitionScheme::PerTensor);
            let mut r = rng::stream(seed, "lin");
            let l1: Vec<f64> = (0..8).map(|_| rng::normal(&mut r)).collect();
            let l2: Vec<f64> = (0..8).map(|_| rng::normal(&mut r)).collect();
            let mix: Vec<f64> = l1.iter().zip(&l2).map(|(x, y)| a * x + b * y).collect();
            let c1 = compose(&t0, &pool, &CoefficientMatrix::new(2, 4, l1).unwrap()).unwrap().flatten();
            let c2 = compose(&t0, &pool, &CoefficientMatrix::new(2, 4, l2).unwrap()).unwrap().flatten();
            let cm = compose(&t0, &pool, &CoefficientMatrix::new(2, 4, mix).unwrap()).unwrap().flatten();
            let base = t0.flatten();
            for k in 0..base.len() {
                let expect = a * (c1[k] - base[k]) + b * (c2[k] - base[k]) + base[k];
                prop_assert!((cm[k] - expect).abs() < 1e-10);
            }
        }
    }
}
