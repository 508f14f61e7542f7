//! The base classifier `d -> hidden -> classes` with tanh activation, and a
//! batched forward pass through `theta_0` composed with a task-vector pool
//! under per-sample coefficients.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::task_vectors::{ParamSet, TaskVectorPool};

pub const TENSOR_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, classes: usize) -> Result<Self> {
        if input == 0 || hidden == 0 || classes < 2 {
            return Err(Error::Invalid(format!("bad model dims {input}->{hidden}->{classes}")));
        }
        Ok(Mlp { input, hidden, classes })
    }

    /// Infer dimensions from a parameter set with the `w1, b1, w2, b2` layout.
    pub fn from_params(theta: &ParamSet) -> Result<Self> {
        let w1 = theta.require("w1")?;
        let w2 = theta.require("w2")?;
        let mlp = Mlp::new(w1.cols(), w1.rows(), w2.rows())?;
        let expected = mlp.layout();
        if theta.layout() != expected {
            return Err(Error::Layout(format!("expected layout {expected:?}, found {:?}", theta.layout())));
        }
        Ok(mlp)
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            ("w1".into(), vec![self.hidden, self.input]),
            ("b1".into(), vec![1, self.hidden]),
            ("w2".into(), vec![self.classes, self.hidden]),
            ("b2".into(), vec![1, self.classes]),
        ]
    }

    /// Weights ~ N(0, 1/fan_in), zero biases.
    pub fn init(&self, rng: &mut Stream) -> ParamSet {
        let w1 = rng::normal_tensor(rng, &[self.hidden, self.input]).map(|v| v / (self.input as f64).sqrt());
        let w2 = rng::normal_tensor(rng, &[self.classes, self.hidden]).map(|v| v / (self.hidden as f64).sqrt());
        ParamSet::new(vec![
            ("w1".into(), w1),
            ("b1".into(), Tensor::zeros(&[1, self.hidden])),
            ("w2".into(), w2),
            ("b2".into(), Tensor::zeros(&[1, self.classes])),
        ])
        .expect("fresh init is finite")
    }

    /// Logits on the graph; `vars` are `w1, b1, w2, b2` in order.
    pub fn forward(&self, g: &mut Graph, x: Var, vars: &[Var]) -> Result<Var> {
        let h = g.linear(x, vars[0], vars[1])?;
        let h = g.tanh(h)?;
        g.linear(h, vars[2], vars[3])
    }

    /// Logits for a fixed parameter set.
    pub fn logits(&self, theta: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let vars: Vec<Var> = TENSOR_NAMES.iter().map(|n| theta.require(n).map(|t| g.constant(t.clone()))).collect::<Result<_>>()?;
        let out = self.forward(&mut g, xv, &vars)?;
        Ok(g.value(out).clone())
    }
}

/// Row-wise argmax.
pub fn predict_classes(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
        })
        .collect()
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predict_classes(logits).iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Forward pass of `theta_0 + sum_ij z[b, i*M + j] * tau_i^j` for every row
/// `b` of a coefficient matrix, without materialising per-sample weights.
pub struct ComposedModel {
    mlp: Mlp,
    n_coef: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    // (N*H) x d and (N*C) x H stacks of the task vectors' weight matrices
    stack_w1: Tensor,
    stack_w2: Tensor,
    // coefficient -> stacked column expanders and stacked -> output reducers
    sel_w1: Tensor,
    sum_w1: Tensor,
    sel_w2: Tensor,
    sum_w2: Tensor,
    // coefficient -> bias contribution
    k_b1: Tensor,
    k_b2: Tensor,
}

impl ComposedModel {
    pub fn new(theta_0: &ParamSet, pool: &TaskVectorPool) -> Result<Self> {
        let mlp = Mlp::from_params(theta_0)?;
        theta_0.check_same_layout(pool.layout_template())?;
        let (n, m) = (pool.n_tasks(), pool.n_blocks());
        let (h, c) = (mlp.hidden, mlp.classes);
        let nm = n * m;
        let block = |name: &str| pool.tensor_blocks()[theta_0.index_of(name).expect("layout checked")];
        let delta = |i: usize, name: &str| pool.vectors()[i].delta.require(name).expect("layout checked");

        let stack = |name: &str| -> Result<Tensor> {
            let t0 = theta_0.require(name)?;
            let data: Vec<f64> = (0..n).flat_map(|i| delta(i, name).data().to_vec()).collect();
            Tensor::matrix(n * t0.rows(), t0.cols(), data)
        };
        let expander = |width: usize, b: usize| {
            Tensor::from_fn(nm, n * width, |r, col| if r % m == b && r / m == col / width { 1.0 } else { 0.0 })
        };
        let reducer = |width: usize| Tensor::from_fn(n * width, width, |r, col| if r % width == col { 1.0 } else { 0.0 });
        let bias = |name: &str, width: usize| {
            let b = block(name);
            Tensor::from_fn(nm, width, |r, col| if r % m == b { delta(r / m, name).data()[col] } else { 0.0 })
        };

        Ok(ComposedModel {
            mlp,
            n_coef: nm,
            w1: theta_0.require("w1")?.clone(),
            b1: theta_0.require("b1")?.clone(),
            w2: theta_0.require("w2")?.clone(),
            b2: theta_0.require("b2")?.clone(),
            stack_w1: stack("w1")?,
            stack_w2: stack("w2")?,
            sel_w1: expander(h, block("w1")),
            sum_w1: reducer(h),
            sel_w2: expander(c, block("w2")),
            sum_w2: reducer(c),
            k_b1: bias("b1", h),
            k_b2: bias("b2", c),
        })
    }

    pub fn mlp(&self) -> Mlp {
        self.mlp
    }

    /// N * M.
    pub fn n_coefficients(&self) -> usize {
        self.n_coef
    }

    /// Logits (B x classes) for inputs `x` (B x d) under coefficients `z`
    /// (B x N*M), which may be any node on `g`.
    pub fn forward(&self, g: &mut Graph, x: &Tensor, z: Var) -> Result<Var> {
        let zs = g.value(z).shape().to_vec();
        if x.shape().len() != 2 || x.cols() != self.mlp.input || zs != [x.rows(), self.n_coef] {
            return Err(Error::shape(
                "composed_forward",
                format!("x {:?} and coefficients {zs:?} for d={} and {} coefficients", x.shape(), self.mlp.input, self.n_coef),
            ));
        }
        let rows = x.rows();
        let mut base1 = x.gemm(&self.w1, false, true)?;
        for r in 0..rows {
            for (v, b) in base1.data_mut()[r * self.mlp.hidden..(r + 1) * self.mlp.hidden].iter_mut().zip(self.b1.data()) {
                *v += b;
            }
        }
        let y1 = x.gemm(&self.stack_w1, false, true)?;

        let base1 = g.constant(base1);
        let y1 = g.constant(y1);
        let sel_w1 = g.constant(self.sel_w1.clone());
        let sum_w1 = g.constant(self.sum_w1.clone());
        let k_b1 = g.constant(self.k_b1.clone());
        let zw = g.matmul(z, sel_w1)?;
        let p = g.mul(zw, y1)?;
        let c1 = g.matmul(p, sum_w1)?;
        let cb1 = g.matmul(z, k_b1)?;
        let pre = g.add(base1, c1)?;
        let pre = g.add(pre, cb1)?;
        let h = g.tanh(pre)?;

        let w2 = g.constant(self.w2.clone());
        let b2 = g.constant(self.b2.clone());
        let stack_w2 = g.constant(self.stack_w2.clone());
        let sel_w2 = g.constant(self.sel_w2.clone());
        let sum_w2 = g.constant(self.sum_w2.clone());
        let k_b2 = g.constant(self.k_b2.clone());
        let base2 = g.linear(h, w2, b2)?;
        let y2 = g.matmul_t(h, stack_w2)?;
        let zw2 = g.matmul(z, sel_w2)?;
        let p2 = g.mul(zw2, y2)?;
        let c2 = g.matmul(p2, sum_w2)?;
        let cb2 = g.matmul(z, k_b2)?;
        let out = g.add(base2, c2)?;
        g.add(out, cb2)
    }

    /// Logits for fixed coefficients.
    pub fn logits(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let out = self.forward(&mut g, x, zv)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::task_vectors::{block_partition, compose, CoefficientMatrix, PartitionScheme, TaskVector};

    fn setup(scheme: PartitionScheme) -> (ParamSet, TaskVectorPool, Mlp) {
        let mlp = Mlp::new(5, 6, 3).unwrap();
        let theta_0 = mlp.init(&mut rng::stream(1, "model"));
        let vectors = (0..3)
            .map(|i| {
                let other = mlp.init(&mut rng::stream(10 + i, "model"));
                let delta = theta_0.with_flat(&other.flatten()).unwrap();
                TaskVector { task: i as usize, delta }
            })
            .collect();
        let blocks = block_partition(&theta_0, &scheme).unwrap();
        (theta_0, TaskVectorPool::new(vectors, blocks).unwrap(), mlp)
    }

    #[test]
    fn composed_forward_matches_explicit_composition() {
        let layered = PartitionScheme::Custom(vec![
            ("l1".into(), vec!["w1".into(), "b1".into()]),
            ("l2".into(), vec!["w2".into(), "b2".into()]),
        ]);
        for scheme in [PartitionScheme::PerTensor, PartitionScheme::Single, layered] {
            let (theta_0, pool, mlp) = setup(scheme);
            let cm = ComposedModel::new(&theta_0, &pool).unwrap();
            let mut r = rng::stream(2, "x");
            let x = rng::normal_tensor(&mut r, &[4, 5]);
            let z = rng::normal_tensor(&mut r, &[4, pool.n_coefficients()]);
            let fast = cm.logits(&x, &z).unwrap();
            for b in 0..4 {
                let lam = CoefficientMatrix::new(pool.n_tasks(), pool.n_blocks(), z.row(b).to_vec()).unwrap();
                let theta = compose(&theta_0, &pool, &lam).unwrap();
                let xb = Tensor::row_vector(x.row(b).to_vec());
                let slow = mlp.logits(&theta, &xb).unwrap();
                for k in 0..3 {
                    assert!((slow.data()[k] - fast.get(b, k)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn zero_coefficients_give_base_model() {
        let (theta_0, pool, mlp) = setup(PartitionScheme::PerTensor);
        let cm = ComposedModel::new(&theta_0, &pool).unwrap();
        let x = rng::normal_tensor(&mut rng::stream(3, "x"), &[3, 5]);
        let a = cm.logits(&x, &Tensor::zeros(&[3, 12])).unwrap();
        assert!(a.max_abs_diff(&mlp.logits(&theta_0, &x).unwrap()) < 1e-12);
    }

    #[test]
    fn coefficient_gradient_matches_finite_differences() {
        let (theta_0, pool, _) = setup(PartitionScheme::PerTensor);
        let cm = ComposedModel::new(&theta_0, &pool).unwrap();
        let x = rng::normal_tensor(&mut rng::stream(4, "x"), &[3, 5]);
        let z = rng::normal_tensor(&mut rng::stream(5, "z"), &[3, 12]).map(|v| 0.3 * v);
        let err = grad_check(|g, zv| {
            let logits = cm.forward(g, &x, zv)?;
            g.softmax_cross_entropy(logits, &[0, 2, 1])
        }, &z, 1e-5)
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn argmax_and_accuracy() {
        let logits = Tensor::matrix(3, 2, vec![0.0, 1.0, 2.0, -1.0, 0.5, 0.5]).unwrap();
        assert_eq!(predict_classes(&logits), vec![1, 0, 0]);
        assert!((accuracy(&logits, &[1, 0, 1]) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn wrong_layout_rejected() {
        let bad = ParamSet::new(vec![("w1".into(), Tensor::zeros(&[2, 2]))]).unwrap();
        assert!(Mlp::from_params(&bad).is_err());
    }
}
