//! Kernel functions and Gram matrices.

use std::cell::Cell;
use std::fmt;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DataSequence;
use crate::error::{KcsrError, Result};

/// Number of evenly spaced samples the median heuristic looks at by default.
pub const MEDIAN_HEURISTIC_CAP: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    /// `exp(-‖x − y‖² / (2σ²))`.
    Rbf { sigma: f64 },
    /// Plain dot product. Useful where hand-computable costs are needed.
    Linear,
}

impl KernelSpec {
    pub fn rbf(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(KcsrError::input(format!("RBF bandwidth must be positive, got {sigma}")));
        }
        Ok(Self::Rbf { sigma })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Rbf { .. } => "rbf",
            Self::Linear => "linear",
        }
    }

    pub fn sigma(&self) -> Option<f64> {
        match self {
            Self::Rbf { sigma } => Some(*sigma),
            Self::Linear => None,
        }
    }

    /// Kernel value for two equally sized feature vectors (not checked).
    #[inline]
    pub fn eval(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
        match *self {
            Self::Rbf { sigma } => {
                let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-sq / (2.0 * sigma * sigma)).exp()
            }
            Self::Linear => x.dot(&y),
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Rbf { sigma } => write!(f, "rbf(sigma={sigma})"),
            Self::Linear => f.write_str("linear"),
        }
    }
}

pub fn rbf_kernel(x: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(KcsrError::input(format!(
            "feature dimensions differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let spec = KernelSpec::rbf(sigma)?;
    Ok(spec.eval(ArrayView1::from(x), ArrayView1::from(y)))
}

/// A symmetric Gram matrix, either over a whole sequence or over an ascending
/// subset of its samples.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    values: Array2<f64>,
    source_indices: Option<Vec<usize>>,
}

impl KernelMatrix {
    /// Wraps an explicit matrix. Symmetry is enforced by copying the upper
    /// triangle over the lower one.
    pub fn from_matrix(mut values: Array2<f64>) -> Result<Self> {
        let p = values.nrows();
        if values.ncols() != p {
            return Err(KcsrError::input("kernel matrix must be square"));
        }
        for i in 0..p {
            for j in (i + 1)..p {
                let upper = values[[i, j]];
                if (upper - values[[j, i]]).abs() > 1e-12 * (1.0 + upper.abs()) {
                    return Err(KcsrError::input(format!("kernel matrix not symmetric at ({i}, {j})")));
                }
                values[[j, i]] = upper;
            }
        }
        record_kernel_dim(p);
        Ok(Self {
            values,
            source_indices: None,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Ascending sample indices (0-based) of a partial matrix.
    pub fn source_indices(&self) -> Option<&[usize]> {
        self.source_indices.as_deref()
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.values.diag().sum()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }
}

/// Full `n × n` Gram matrix of a sequence.
pub fn build_kernel_matrix(x: &DataSequence, spec: &KernelSpec) -> Result<KernelMatrix> {
    let indices: Vec<usize> = (0..x.len()).collect();
    let values = gram(x, &indices, spec)?;
    record_kernel_dim(indices.len());
    Ok(KernelMatrix {
        values,
        source_indices: None,
    })
}

/// `b × b` Gram matrix of the samples at `indices` (0-based, strictly
/// increasing). Entry `(a, c)` equals the full matrix entry
/// `(indices[a], indices[c])` bit for bit.
pub fn build_partial_kernel(x: &DataSequence, indices: &[usize], spec: &KernelSpec) -> Result<KernelMatrix> {
    validate_indices(indices, x.len())?;
    let values = gram(x, indices, spec)?;
    record_kernel_dim(indices.len());
    Ok(KernelMatrix {
        values,
        source_indices: Some(indices.to_vec()),
    })
}

pub(crate) fn validate_indices(indices: &[usize], n: usize) -> Result<()> {
    if indices.is_empty() {
        return Err(KcsrError::input("index list is empty"));
    }
    if let Some(w) = indices.windows(2).find(|w| w[0] >= w[1]) {
        return Err(KcsrError::input(format!(
            "indices must be strictly increasing, found {} then {}",
            w[0], w[1]
        )));
    }
    if let Some(&last) = indices.last() {
        if last >= n {
            return Err(KcsrError::input(format!("index {last} out of range for {n} samples")));
        }
    }
    Ok(())
}

fn gram(x: &DataSequence, indices: &[usize], spec: &KernelSpec) -> Result<Array2<f64>> {
    let p = indices.len();
    let bytes = p.checked_mul(p).and_then(|e| e.checked_mul(8));
    if bytes.is_none() {
        return Err(KcsrError::Resource(format!(
            "a {p}×{p} kernel matrix does not fit in memory"
        )));
    }
    let mut values = Array2::<f64>::zeros((p, p));
    // Each row fills its upper triangle; the lower one is mirrored after.
    values
        .as_slice_mut()
        .expect("fresh arrays are contiguous")
        .par_chunks_mut(p.max(1))
        .enumerate()
        .for_each(|(a, row)| {
            let xa = x.sample(indices[a]);
            for c in a..p {
                row[c] = spec.eval(xa, x.sample(indices[c]));
            }
        });
    for a in 0..p {
        for c in 0..a {
            values[[a, c]] = values[[c, a]];
        }
    }
    Ok(values)
}

/// Diagonal `κ(x_j, x_j)` without forming the matrix.
pub fn kernel_diagonal(x: &DataSequence, spec: &KernelSpec) -> Vec<f64> {
    (0..x.len()).map(|j| spec.eval(x.sample(j), x.sample(j))).collect()
}

/// Median pairwise Euclidean distance over at most `sample_cap` evenly
/// spaced samples. Falls back to 1.0 when the median is zero.
pub fn median_heuristic_sigma(x: &DataSequence, sample_cap: usize) -> Result<f64> {
    let n = x.len();
    if n < 2 {
        return Err(KcsrError::input("the median heuristic needs at least two samples"));
    }
    let m = n.min(sample_cap.max(2));
    let picks: Vec<usize> = (0..m).map(|i| i * (n - 1) / (m - 1)).collect();
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for (a, &i) in picks.iter().enumerate() {
        for &j in &picks[a + 1..] {
            let sq: f64 = x
                .sample(i)
                .iter()
                .zip(x.sample(j))
                .map(|(u, v)| (u - v) * (u - v))
                .sum();
            dists.push(sq.sqrt());
        }
    }
    let len = dists.len();
    let mid = len / 2;
    let (_, &mut upper, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let median = if len % 2 == 1 {
        upper
    } else {
        let lower = dists[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    Ok(if median > 0.0 { median } else { 1.0 })
}

thread_local! {
    static PEAK_KERNEL_DIM: Cell<usize> = const { Cell::new(0) };
}

fn record_kernel_dim(p: usize) {
    PEAK_KERNEL_DIM.with(|peak| peak.set(peak.get().max(p)));
}

/// Largest side length of any kernel matrix allocated on this thread since
/// the last [`reset_peak_kernel_dim`].
pub fn peak_kernel_dim() -> usize {
    PEAK_KERNEL_DIM.with(Cell::get)
}

pub fn reset_peak_kernel_dim() {
    PEAK_KERNEL_DIM.with(|peak| peak.set(0));
}
