//! Exact kernel segmentation by dynamic programming.
//!
//! Minimizes the total within-segment scatter over all ways of cutting the
//! sequence into `k` contiguous pieces in `O(k n²)` time. Meant for desk-scale
//! inputs, where it serves as ground truth for the relaxed solvers.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KcsrError, Result};
use crate::kernels::KernelMatrix;

/// Default upper bound on `n` accepted by [`dp_segment`].
pub const DEFAULT_MAX_LEN: usize = 2000;

/// O(1) segment scatter queries from prefix sums of the kernel diagonal and
/// of its 2-D blocks.
#[derive(Debug, Clone)]
pub struct ScatterTable {
    diag: Vec<f64>,
    block: Array2<f64>,
}

impl ScatterTable {
    pub fn new(kernel: &KernelMatrix) -> Self {
        let n = kernel.size();
        let k = kernel.values();
        let mut diag = vec![0.0; n + 1];
        for j in 0..n {
            diag[j + 1] = diag[j] + k[[j, j]];
        }
        let mut block = Array2::<f64>::zeros((n + 1, n + 1));
        for i in 0..n {
            let mut row_acc = 0.0;
            for j in 0..n {
                row_acc += k[[i, j]];
                block[[i + 1, j + 1]] = block[[i, j + 1]] + row_acc;
            }
        }
        Self { diag, block }
    }

    pub fn len(&self) -> usize {
        self.diag.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scatter of samples `s..=e` (1-based, inclusive):
    /// `Σ K[j][j] − (1/len) Σ K[j][j']`.
    pub fn scatter(&self, s: usize, e: usize) -> Result<f64> {
        if s == 0 || s > e || e > self.len() {
            return Err(KcsrError::input(format!(
                "segment [{s}, {e}] is not within [1, {}]",
                self.len()
            )));
        }
        Ok(self.scatter_unchecked(s, e))
    }

    #[inline]
    fn scatter_unchecked(&self, s: usize, e: usize) -> f64 {
        let b = &self.block;
        let a = s - 1;
        let sum = b[[e, e]] - b[[a, e]] - b[[e, a]] + b[[a, a]];
        let diag = self.diag[e] - self.diag[a];
        (diag - sum / (e - a) as f64).max(0.0)
    }
}

pub fn segment_scatter(kernel: &KernelMatrix, s: usize, e: usize) -> Result<f64> {
    ScatterTable::new(kernel).scatter(s, e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpSolution {
    /// 1-based index of the last sample of each of the first `k − 1` segments.
    pub boundaries: Vec<usize>,
    pub optimal_cost: f64,
    /// `cost_table[[c, e]]`: best cost of splitting samples `1..=e+1` into
    /// `c + 1` segments (infinite where infeasible).
    #[serde(skip)]
    pub cost_table: Array2<f64>,
}

pub fn dp_segment(kernel: &KernelMatrix, k: usize) -> Result<DpSolution> {
    dp_segment_capped(kernel, k, DEFAULT_MAX_LEN)
}

pub fn dp_segment_capped(kernel: &KernelMatrix, k: usize, max_len: usize) -> Result<DpSolution> {
    let n = kernel.size();
    if n > max_len {
        return Err(KcsrError::input(format!(
            "exact segmentation is limited to {max_len} samples, got {n}"
        )));
    }
    if k == 0 || k > n {
        return Err(KcsrError::input(format!("need 1 <= k <= n, got k = {k}, n = {n}")));
    }
    let table = ScatterTable::new(kernel);
    let mut cost = Array2::<f64>::from_elem((k, n), f64::INFINITY);
    // back[[c, e]]: length of the prefix covered by the first c segments
    let mut back = Array2::<usize>::zeros((k, n));
    for e in 1..=n {
        cost[[0, e - 1]] = table.scatter_unchecked(1, e);
    }
    for c in 1..k {
        let prev = cost.row(c - 1).to_owned();
        let row: Vec<(f64, usize)> = (1..=n)
            .into_par_iter()
            .map(|e| {
                let mut best = (f64::INFINITY, 0);
                // the first c segments cover samples 1..=s, with s >= c
                for s in c..e {
                    let candidate = prev[s - 1] + table.scatter_unchecked(s + 1, e);
                    if candidate < best.0 {
                        best = (candidate, s);
                    }
                }
                best
            })
            .collect();
        for (e, (v, s)) in row.into_iter().enumerate() {
            cost[[c, e]] = v;
            back[[c, e]] = s;
        }
    }
    let mut boundaries = vec![0; k - 1];
    let mut end = n;
    for c in (1..k).rev() {
        let s = back[[c, end - 1]];
        boundaries[c - 1] = s;
        end = s;
    }
    Ok(DpSolution {
        boundaries,
        optimal_cost: cost[[k - 1, n - 1]],
        cost_table: cost,
    })
}

/// Total scatter of the segmentation described by `boundaries` (1-based last
/// indices, strictly increasing, each below `n`).
pub fn segmentation_cost(kernel: &KernelMatrix, boundaries: &[usize]) -> Result<f64> {
    let table = ScatterTable::new(kernel);
    let n = table.len();
    let mut start = 1;
    let mut total = 0.0;
    for &b in boundaries.iter().chain(std::iter::once(&n)) {
        if b < start {
            return Err(KcsrError::input("boundaries must be strictly increasing"));
        }
        total += table.scatter(start, b)?;
        start = b + 1;
    }
    Ok(total)
}
