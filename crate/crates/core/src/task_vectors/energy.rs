use nalgebra::DMatrix;

use super::TaskVectorPool;
use crate::error::{Error, Result};

/// Cumulative singular-value energy `e_k = sum_{i<=k} s_i^2 / sum_i s_i^2` of
/// a row-major `rows x cols` matrix, for k = 1..min(rows, cols).
pub fn cumulative_energy(rows: usize, cols: usize, data: &[f64]) -> Result<Vec<f64>> {
    if rows == 0 || cols == 0 || data.len() != rows * cols {
        return Err(Error::shape("svd_energy", format!("{rows}x{cols} matrix with {} values", data.len())));
    }
    if data.iter().all(|&v| v == 0.0) {
        return Err(Error::Invalid("singular-value energy is undefined for an all-zero matrix".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "svd_energy" });
    }
    let m = DMatrix::from_row_slice(rows, cols, data);
    let mut sq: Vec<f64> = m.singular_values().iter().map(|s| s * s).collect();
    sq.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = sq.iter().sum();
    let mut acc = 0.0;
    let mut out: Vec<f64> = sq
        .iter()
        .map(|s| {
            acc += s;
            (acc / total).min(1.0)
        })
        .collect();
    for k in 1..out.len() {
        out[k] = out[k].max(out[k - 1]);
    }
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    Ok(out)
}

/// Energy curve of the N x D matrix of flattened task vectors.
pub fn svd_energy(pool: &TaskVectorPool) -> Result<Vec<f64>> {
    let d = pool.layout_template().num_params();
    let data: Vec<f64> = pool.vectors().iter().flat_map(|v| v.delta.flatten()).collect();
    cumulative_energy(pool.n_tasks(), d, &data)
}

/// Energy curve of one weight tensor's rows stacked over every task vector,
/// i.e. the spectrum of the span the pool's updates to that tensor occupy.
pub fn block_row_energy(pool: &TaskVectorPool, tensor: &str) -> Result<Vec<f64>> {
    let shape = pool.layout_template().require(tensor)?.shape().to_vec();
    let cols = *shape.last().unwrap_or(&1);
    let mut data = Vec::new();
    for v in pool.vectors() {
        data.extend_from_slice(v.delta.require(tensor)?.data());
    }
    cumulative_energy(data.len() / cols.max(1), cols, &data)
}
