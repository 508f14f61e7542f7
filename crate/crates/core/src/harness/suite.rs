//! Synthetic multi-task classification suites.
//!
//! Every task is a Gaussian mixture whose class means sit on a regular
//! polygon inside a shared rank-`r` subspace of the feature space. Task `t`
//! rotates the polygon by `h * 2 pi t / n_tasks` and shifts its samples by
//! `h * offset` along the remaining latent directions, so `h = 0` gives
//! identical tasks.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const SUITE_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSpec {
    pub n_tasks: usize,
    pub dim: usize,
    pub classes: usize,
    pub heterogeneity: f64,
    pub rank: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Radius of the class-mean polygon.
    pub class_radius: f64,
    /// Length of the per-task shift at `h = 1`.
    pub task_offset: f64,
    /// Within-class standard deviation inside the subspace.
    pub within_sd: f64,
    /// Isotropic noise added in the full feature space.
    pub ambient_sd: f64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec {
            n_tasks: 4,
            dim: 32,
            classes: 3,
            heterogeneity: 0.8,
            rank: 4,
            n_train: 2000,
            n_test: 500,
            class_radius: 4.0,
            task_offset: 6.0,
            within_sd: 1.0,
            ambient_sd: 0.05,
        }
    }
}

impl SuiteSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks < 2 {
            return Err(Error::config("n_tasks", "n_tasks must be ≥ 2"));
        }
        if self.dim < 2 {
            return Err(Error::config("dim", "dim must be ≥ 2"));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "classes must be ≥ 2"));
        }
        if self.rank < 2 || self.rank > self.dim {
            return Err(Error::config("rank", "rank must lie in [2, dim]"));
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return Err(Error::config("heterogeneity", "heterogeneity must lie in [0, 1]"));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::config("n_train", "train and test splits must be non-empty"));
        }
        for (name, v) in [
            ("class_radius", self.class_radius),
            ("task_offset", self.task_offset),
            ("within_sd", self.within_sd),
            ("ambient_sd", self.ambient_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("{name} must be a non-negative number")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// `n x d` features; values are exactly representable as f32.
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Rows `idx` as a new split.
    pub fn select(&self, idx: &[usize]) -> Split {
        let d = self.x.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        Split { x: Tensor::matrix(idx.len(), d, data).expect("row count matches"), y: idx.iter().map(|&i| self.y[i]).collect() }
    }

    pub fn concat(parts: &[&Split]) -> Split {
        let d = parts[0].x.cols();
        let mut data = Vec::new();
        let mut y = Vec::new();
        for p in parts {
            data.extend_from_slice(p.x.data());
            y.extend_from_slice(&p.y);
        }
        Split { x: Tensor::matrix(y.len(), d, data).expect("row count matches"), y }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub train: Split,
    pub test: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSuite {
    pub spec: SuiteSpec,
    pub seed: u64,
    pub tasks: Vec<Task>,
}

impl TaskSuite {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Union of every task's training split, in task order.
    pub fn train_union(&self) -> Split {
        Split::concat(&self.tasks.iter().map(|t| &t.train).collect::<Vec<_>>())
    }
}

/// Orthonormal `dim x rank` basis.
fn random_basis(rng: &mut Stream, dim: usize, rank: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, rank, |_, _| rng::normal(rng));
    g.qr().q()
}

pub fn generate_task_suite(spec: &SuiteSpec, seed: u64) -> Result<TaskSuite> {
    spec.validate()?;
    let mut geo = rng::stream(seed, "suite/geometry");
    let basis = random_basis(&mut geo, spec.dim, spec.rank);
    let h = spec.heterogeneity;
    let phase0 = 2.0 * PI * rng::uniform(&mut geo);

    let offset_dims = spec.rank - 2;
    let offsets: Vec<Vec<f64>> = (0..spec.n_tasks)
        .map(|t| {
            let mut o = vec![0.0; spec.rank];
            let a = 2.0 * PI * t as f64 / spec.n_tasks as f64;
            match offset_dims {
                0 => {
                    o[0] = a.cos();
                    o[1] = a.sin();
                }
                1 => o[2] = 2.0 * t as f64 / (spec.n_tasks - 1) as f64 - 1.0,
                _ => {
                    o[2] = a.cos();
                    o[3] = a.sin();
                }
            }
            o.iter().map(|v| v * h * spec.task_offset).collect()
        })
        .collect();

    let tasks = (0..spec.n_tasks)
        .map(|t| {
            let angle = phase0 + h * 2.0 * PI * t as f64 / spec.n_tasks as f64;
            let sample = |n: usize, label: &str| {
                let mut r = rng::stream(seed, &format!("suite/task{t}/{label}"));
                let mut y: Vec<usize> = (0..n).map(|k| k % spec.classes).collect();
                y.shuffle(&mut r);
                let mut data = Vec::with_capacity(n * spec.dim);
                let mut latent = vec![0.0; spec.rank];
                for &c in &y {
                    let theta = angle + 2.0 * PI * c as f64 / spec.classes as f64;
                    for (k, l) in latent.iter_mut().enumerate() {
                        *l = offsets[t][k] + spec.within_sd * rng::normal(&mut r);
                    }
                    latent[0] += spec.class_radius * theta.cos();
                    latent[1] += spec.class_radius * theta.sin();
                    for i in 0..spec.dim {
                        let mut v = spec.ambient_sd * rng::normal(&mut r);
                        for (k, l) in latent.iter().enumerate() {
                            v += basis[(i, k)] * l;
                        }
                        data.push(v as f32 as f64);
                    }
                }
                Split { x: Tensor::matrix(n, spec.dim, data).expect("sizes match"), y }
            };
            Task { train: sample(spec.n_train, "train"), test: sample(spec.n_test, "test") }
        })
        .collect();
    Ok(TaskSuite { spec: spec.clone(), seed, tasks })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    seed: u64,
    spec: SuiteSpec,
    tasks: Vec<TaskFiles>,
}

#[derive(Serialize, Deserialize)]
struct TaskFiles {
    train: SplitFiles,
    test: SplitFiles,
}

#[derive(Serialize, Deserialize)]
struct SplitFiles {
    rows: usize,
    features: String,
    labels: String,
}

/// Write `manifest.json` plus raw little-endian f32 features and i32 labels;
/// returns the files written.
pub fn save_suite(suite: &TaskSuite, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut write = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    let mut files = Vec::new();
    for (t, task) in suite.tasks.iter().enumerate() {
        let mut entry = |split: &Split, label: &str| -> Result<SplitFiles> {
            let features = format!("task{t}_{label}_x.f32");
            let labels = format!("task{t}_{label}_y.i32");
            write(&features, split.x.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect())?;
            write(&labels, split.y.iter().flat_map(|&v| (v as i32).to_le_bytes()).collect())?;
            Ok(SplitFiles { rows: split.len(), features, labels })
        };
        files.push(TaskFiles { train: entry(&task.train, "train")?, test: entry(&task.test, "test")? });
    }
    let manifest = Manifest { format_version: SUITE_FORMAT_VERSION, seed: suite.seed, spec: suite.spec.clone(), tasks: files };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Invalid(e.to_string()))?;
    write(MANIFEST, json)?;
    Ok(written)
}

pub fn load_suite(dir: &Path) -> Result<TaskSuite> {
    let mpath = dir.join(MANIFEST);
    let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let bad = |path: &Path, message: String| Error::Malformed { path: path.to_path_buf(), message };
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| bad(&mpath, e.to_string()))?;
    if m.format_version != SUITE_FORMAT_VERSION {
        return Err(bad(&mpath, format!("unsupported format version {}", m.format_version)));
    }
    let d = m.spec.dim;
    let read_split = |f: &SplitFiles| -> Result<Split> {
        let xp = dir.join(&f.features);
        let xb = fs::read(&xp).map_err(|e| Error::io(&xp, e))?;
        if xb.len() != f.rows * d * 4 {
            return Err(bad(&xp, format!("expected {} bytes, found {}", f.rows * d * 4, xb.len())));
        }
        let data = xb.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        let yp = dir.join(&f.labels);
        let yb = fs::read(&yp).map_err(|e| Error::io(&yp, e))?;
        if yb.len() != f.rows * 4 {
            return Err(bad(&yp, format!("expected {} bytes, found {}", f.rows * 4, yb.len())));
        }
        let y = yb
            .chunks_exact(4)
            .map(|c| {
                let v = i32::from_le_bytes(c.try_into().unwrap());
                usize::try_from(v).ok().filter(|&v| v < m.spec.classes).ok_or_else(|| bad(&yp, format!("label {v} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Split { x: Tensor::matrix(f.rows, d, data)?, y })
    };
    let tasks = m
        .tasks
        .iter()
        .map(|t| Ok(Task { train: read_split(&t.train)?, test: read_split(&t.test)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskSuite { spec: m.spec, seed: m.seed, tasks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(h: f64) -> SuiteSpec {
        SuiteSpec { n_train: 300, n_test: 100, heterogeneity: h, ..SuiteSpec::default() }
    }

    #[test]
    fn same_seed_same_suite() {
        assert_eq!(generate_task_suite(&small(0.8), 3).unwrap(), generate_task_suite(&small(0.8), 3).unwrap());
        assert_ne!(generate_task_suite(&small(0.8), 3).unwrap(), generate_task_suite(&small(0.8), 4).unwrap());
    }

    #[test]
    fn validation_messages() {
        let err = generate_task_suite(&SuiteSpec { n_tasks: 1, ..SuiteSpec::default() }, 0).unwrap_err();
        assert_eq!(err.to_string(), "invalid config field `n_tasks`: n_tasks must be ≥ 2");
        assert!(generate_task_suite(&SuiteSpec { rank: 40, ..SuiteSpec::default() }, 0).is_err());
        assert!(generate_task_suite(&SuiteSpec { classes: 1, ..SuiteSpec::default() }, 0).is_err());
    }

    #[test]
    fn balanced_classes() {
        let spec = SuiteSpec { n_train: 10_000, n_test: 10, ..SuiteSpec::default() };
        let s = generate_task_suite(&spec, 1).unwrap();
        for t in &s.tasks {
            for c in 0..3 {
                let frac = t.train.y.iter().filter(|&&y| y == c).count() as f64 / 10_000.0;
                assert!((frac - 1.0 / 3.0).abs() <= 0.02);
            }
        }
    }

    #[test]
    fn zero_heterogeneity_tasks_share_a_distribution() {
        let s = generate_task_suite(&small(0.0), 5).unwrap();
        let mean = |sp: &Split| (0..sp.x.cols()).map(|c| (0..sp.len()).map(|r| sp.x.get(r, c)).sum::<f64>() / sp.len() as f64).collect::<Vec<_>>();
        let (a, b) = (mean(&s.tasks[0].train), mean(&s.tasks[3].train));
        let gap: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(gap < 0.5, "{gap}");
    }

    #[test]
    fn features_are_f32_values() {
        let s = generate_task_suite(&small(0.5), 2).unwrap();
        assert!(s.tasks[0].train.x.data().iter().all(|&v| v as f32 as f64 == v));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_task_suite(&small(0.8), 7).unwrap();
        let files = save_suite(&s, dir.path()).unwrap();
        assert_eq!(files.len(), 4 * 4 + 1);
        assert_eq!(load_suite(dir.path()).unwrap(), s);
    }

    #[test]
    fn missing_suite() {
        assert!(matches!(load_suite(Path::new("/nonexistent/suite")), Err(Error::Missing(_))));
    }
}
