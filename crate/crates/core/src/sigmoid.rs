//! The differentiable chain `γ → β → τ → G`.
//!
//! Midpoints `β` are cumulative softmax interpolations of the free parameters
//! `γ`, the continuous label `τ_j` is a staircase of sigmoids centred at the
//! midpoints, and the soft indicator `G` is a tent function of `τ`. Positions
//! passed to sigmoids are 1-based time indices: sample index `j` (0-based)
//! sits at time `j + 1`.

use ndarray::Array2;

use crate::error::{KcsrError, Result};

/// Tolerance for `τ` leaving `[1, k]` before it counts as a broken invariant.
pub const TAU_RANGE_TOL: f64 = 1e-9;

/// Logistic curve `1 / (1 + exp(−α(x − β)))` evaluated without overflow.
#[inline]
pub fn sigmoid(x: f64, alpha: f64, beta: f64) -> f64 {
    let z = alpha * (x - beta);
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `∂σ(j; α, β)/∂β = −α σ (1 − σ)`.
#[inline]
pub fn sigmoid_midpoint_derivative(x: f64, alpha: f64, beta: f64) -> f64 {
    let s = sigmoid(x, alpha, beta);
    -alpha * s * (1.0 - s)
}

/// Cumulative softmax ratios `r_1 .. r_{k-1}` and the softmax weights.
fn cumulative_softmax(gamma: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = gamma.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = gamma.iter().map(|g| (g - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let mut acc = 0.0;
    let ratios = exps[..exps.len().saturating_sub(1)]
        .iter()
        .map(|e| {
            acc += e;
            acc / total
        })
        .collect();
    (ratios, weights)
}

/// Midpoints for a single sequence of length `n`:
/// `β_i = (1 − r_i) + n r_i` with `r_i` the cumulative softmax of `γ`.
pub fn betas_from_gamma(gamma: &[f64], n: usize) -> Vec<f64> {
    if gamma.len() < 2 {
        return Vec::new();
    }
    let (ratios, _) = cumulative_softmax(gamma);
    ratios.iter().map(|r| (1.0 - r) + n as f64 * r).collect()
}

/// Continuous labels `τ_j = 1 + Σ_i σ(j; α, β_i)` for `j = 1..=n`.
pub fn tau_from_betas(betas: &[f64], alpha: f64, n: usize) -> Vec<f64> {
    (1..=n)
        .map(|j| 1.0 + betas.iter().map(|&b| sigmoid(j as f64, alpha, b)).sum::<f64>())
        .collect()
}

/// Midpoints for `m` concatenated sequences. `γ` holds `k` entries per block;
/// block `p`'s midpoints interpolate between its first and last time index.
pub fn betas_from_gamma_multi(gamma: &[f64], lengths: &[usize]) -> Result<Vec<f64>> {
    let m = lengths.len();
    if m == 0 || !gamma.len().is_multiple_of(m) {
        return Err(KcsrError::input(format!(
            "{} parameters cannot be split over {m} sequences",
            gamma.len()
        )));
    }
    let k = gamma.len() / m;
    let mut betas = Vec::with_capacity(m * k.saturating_sub(1));
    let mut start = 0usize;
    for (block, &len) in gamma.chunks(k).zip(lengths) {
        let first = (start + 1) as f64;
        let last = (start + len) as f64;
        if k >= 2 {
            let (ratios, _) = cumulative_softmax(block);
            betas.extend(ratios.iter().map(|r| first * (1.0 - r) + last * r));
        }
        start += len;
    }
    Ok(betas)
}

/// Labels for concatenated sequences: the plain sigmoid staircase plus fixed
/// cut-off sigmoids, scaled by `1 − k`, that reset the label to 1 right
/// after each junction.
pub fn cutoff_tau(betas: &[f64], alpha: f64, lengths: &[usize], k: usize) -> Vec<f64> {
    let layout = Parametrization::new(k, alpha, lengths.to_vec());
    let n = layout.n();
    (0..n).map(|j| layout.tau_at_index(betas, j)).collect()
}

/// Soft sample-to-segment indicator, `k × p`, with entries
/// `G[i][j] = max(0, 1 − |τ_j − i|)` (rows 1-based in that formula).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftIndicator {
    values: Array2<f64>,
}

impl SoftIndicator {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn k(&self) -> usize {
        self.values.nrows()
    }

    pub fn columns(&self) -> usize {
        self.values.ncols()
    }

    /// Wraps an arbitrary non-negative `k × p` matrix, e.g. a hard indicator.
    pub fn from_matrix(values: Array2<f64>) -> Self {
        Self { values }
    }

    /// Hard indicator for labels in `1..=k`.
    pub fn from_labels(labels: &[usize], k: usize) -> Self {
        let mut values = Array2::zeros((k, labels.len()));
        for (j, &l) in labels.iter().enumerate() {
            values[[l - 1, j]] = 1.0;
        }
        Self { values }
    }

    /// Row sums `G·1`, i.e. soft segment sizes.
    pub fn row_sums(&self) -> Vec<f64> {
        self.values.rows().into_iter().map(|r| r.sum()).collect()
    }
}

pub fn indicator_from_tau(tau: &[f64], k: usize) -> Result<SoftIndicator> {
    let mut values = Array2::zeros((k, tau.len()));
    for (j, &t) in tau.iter().enumerate() {
        let t = clamp_tau(t, k)?;
        for i in 1..=k {
            values[[i - 1, j]] = tent(t, i);
        }
    }
    Ok(SoftIndicator { values })
}

#[inline]
pub(crate) fn tent(tau: f64, row: usize) -> f64 {
    (1.0 - (tau - row as f64).abs()).max(0.0)
}

pub(crate) fn clamp_tau(t: f64, k: usize) -> Result<f64> {
    let k = k as f64;
    if !(t >= 1.0 - TAU_RANGE_TOL && t <= k + TAU_RANGE_TOL) {
        return Err(KcsrError::Internal(format!("segment label {t} outside [1, {k}]")));
    }
    Ok(t.clamp(1.0, k))
}

/// `∂G[i][j]/∂τ_j` for 1-based row `i`, following the case split
/// `−1` if `i ≤ τ ≤ i+1`, `+1` if `i−1 ≤ τ < i`, else `0`.
#[inline]
pub fn indicator_tau_derivative(tau: f64, row: usize) -> f64 {
    let i = row as f64;
    if i <= tau && tau <= i + 1.0 {
        -1.0
    } else if i - 1.0 <= tau && tau < i {
        1.0
    } else {
        0.0
    }
}

/// The whole parametrization for `m ≥ 1` blocks of lengths `n_1..n_m`, with
/// `k` segments per block and shared steepness `α`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parametrization {
    pub k: usize,
    pub alpha: f64,
    /// Steepness of the fixed junction sigmoids. Equal to `alpha` unless a
    /// continuation schedule flattens only the free ones.
    pub reset_alpha: f64,
    lengths: Vec<usize>,
    junctions: Vec<f64>,
}

impl Parametrization {
    pub fn new(k: usize, alpha: f64, lengths: Vec<usize>) -> Self {
        let mut acc = 0usize;
        let junctions = lengths[..lengths.len().saturating_sub(1)]
            .iter()
            .map(|&len| {
                acc += len;
                acc as f64 + 0.5
            })
            .collect();
        Self {
            k,
            alpha,
            reset_alpha: alpha,
            lengths,
            junctions,
        }
    }

    pub fn single(k: usize, alpha: f64, n: usize) -> Self {
        Self::new(k, alpha, vec![n])
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn blocks(&self) -> usize {
        self.lengths.len()
    }

    pub fn n(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn gamma_len(&self) -> usize {
        self.k * self.blocks()
    }

    pub fn betas(&self, gamma: &[f64]) -> Result<Vec<f64>> {
        if gamma.len() != self.gamma_len() {
            return Err(KcsrError::input(format!(
                "expected {} parameters, got {}",
                self.gamma_len(),
                gamma.len()
            )));
        }
        betas_from_gamma_multi(gamma, &self.lengths)
    }

    /// `τ` at sample index `j` (0-based, time `j + 1`).
    #[inline]
    pub fn tau_at_index(&self, betas: &[f64], j: usize) -> f64 {
        let t = (j + 1) as f64;
        let rise: f64 = betas.iter().map(|&b| sigmoid(t, self.alpha, b)).sum();
        let reset: f64 = self.junctions.iter().map(|&c| sigmoid(t, self.reset_alpha, c)).sum();
        1.0 + rise + (1.0 - self.k as f64) * reset
    }

    pub fn tau_at(&self, betas: &[f64], indices: &[usize]) -> Vec<f64> {
        indices.iter().map(|&j| self.tau_at_index(betas, j)).collect()
    }

    pub fn tau_full(&self, betas: &[f64]) -> Vec<f64> {
        (0..self.n()).map(|j| self.tau_at_index(betas, j)).collect()
    }

    /// Pulls `∂J/∂β` back to `∂J/∂γ` through the per-block cumulative
    /// softmax: `∂β_i/∂γ_c = (n_p − 1) w_c ([c ≤ i] − r_i)`.
    pub fn pullback_betas(&self, gamma: &[f64], dj_dbeta: &[f64]) -> Vec<f64> {
        let k = self.k;
        let mut grad = vec![0.0; gamma.len()];
        if k < 2 {
            return grad;
        }
        for (p, &len) in self.lengths.iter().enumerate() {
            let block = &gamma[p * k..(p + 1) * k];
            let (ratios, weights) = cumulative_softmax(block);
            let span = len as f64 - 1.0;
            let dbeta = &dj_dbeta[p * (k - 1)..(p + 1) * (k - 1)];
            for c in 0..k {
                grad[p * k + c] = (0..k - 1)
                    .map(|i| {
                        let step = if c <= i { 1.0 } else { 0.0 };
                        dbeta[i] * span * weights[c] * (step - ratios[i])
                    })
                    .sum();
            }
        }
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(11.5, 10.0, 11.5), 0.5);
        assert_abs_diff_eq!(sigmoid(1011.5, 1.0, 11.5), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sigmoid(11.4, 10.0, 11.5), 1.0 / (1.0 + 1f64.exp()), epsilon = 1e-12);
        assert_abs_diff_eq!(sigmoid(11.4, 10.0, 11.5), 0.268941, epsilon = 1e-6);
        // no overflow far on the negative side
        assert_eq!(sigmoid(-1e6, 10.0, 0.0), 0.0);
        assert!(sigmoid(-70.0, 10.0, 0.0) > 0.0);
        assert_abs_diff_eq!(sigmoid_midpoint_derivative(5.0, 10.0, 5.0), -2.5);
    }

    #[test]
    fn betas_for_zero_gamma() {
        assert_eq!(betas_from_gamma(&[0.0; 4], 101), vec![26.0, 51.0, 76.0]);
        assert_eq!(betas_from_gamma(&[0.0; 2], 23), vec![12.0]);
        assert!(betas_from_gamma(&[3.0], 23).is_empty());
        // large entries do not overflow
        let b = betas_from_gamma(&[800.0, 800.0], 11);
        assert_eq!(b, vec![6.0]);
    }

    #[test]
    fn tau_two_segments() {
        let tau = tau_from_betas(&[11.5], 10.0, 23);
        assert!(tau[0] >= 1.0 && tau[0] <= 1.0 + 1e-12);
        assert!(tau[22] >= 2.0 - 1e-12 && tau[22] <= 2.0);
        assert!(tau_from_betas(&[], 10.0, 5).iter().all(|&t| t == 1.0));
    }

    #[test]
    fn indicator_columns() {
        let g = indicator_from_tau(&[1.5, 3.0, 1.0, 2.25], 3).unwrap();
        let v = g.values();
        assert_eq!(v.column(0).to_vec(), vec![0.5, 0.5, 0.0]);
        assert_eq!(v.column(1).to_vec(), vec![0.0, 0.0, 1.0]);
        assert_eq!(v.column(2).to_vec(), vec![1.0, 0.0, 0.0]);
        assert_eq!(v.column(3).to_vec(), vec![0.0, 0.75, 0.25]);
        // slightly out of range is clamped, far out of range is an error
        assert!(indicator_from_tau(&[3.0 + 1e-12], 3).is_ok());
        assert!(matches!(indicator_from_tau(&[3.1], 3), Err(KcsrError::Internal(_))));
        assert!(matches!(indicator_from_tau(&[0.5], 3), Err(KcsrError::Internal(_))));
    }

    #[test]
    fn tau_derivative_cases() {
        // τ = 2.3: rows 2 (−1) and 3 (+1)
        let d: Vec<f64> = (1..=4).map(|i| indicator_tau_derivative(2.3, i)).collect();
        assert_eq!(d, vec![0.0, -1.0, 1.0, 0.0]);
        // exact integer: the `i ≤ τ ≤ i+1` branch wins for rows 1 and 2
        let d: Vec<f64> = (1..=4).map(|i| indicator_tau_derivative(2.0, i)).collect();
        assert_eq!(d, vec![-1.0, -1.0, 1.0, 0.0]);
    }

    #[test]
    fn multi_block_betas() {
        let b = betas_from_gamma_multi(&[0.0; 6], &[10, 10]).unwrap();
        for (got, want) in b.iter().zip([4.0, 7.0, 14.0, 17.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        assert!(betas_from_gamma_multi(&[0.0; 5], &[10, 10]).is_err());
        let g = [0.3, -1.2, 2.0];
        assert_eq!(betas_from_gamma_multi(&g, &[40]).unwrap(), betas_from_gamma(&g, 40));
    }

    #[test]
    fn cutoff_resets_at_junction() {
        let lengths = [20, 30];
        let k = 3;
        let betas = betas_from_gamma_multi(&[0.0; 6], &lengths).unwrap();
        let tau = cutoff_tau(&betas, 10.0, &lengths, k);
        // the cut-off only reaches e^(-α/2) of its plateau half a sample away
        let leak = 2.0 * sigmoid(-0.5, 10.0, 0.0);
        assert!((tau[19] - 3.0).abs() < leak + 1e-6);
        assert!((tau[20] - 1.0).abs() < leak + 1e-6);
        assert!(tau[..20].windows(2).all(|w| w[0] <= w[1] + leak));
        assert!(tau[20..].windows(2).all(|w| w[0] <= w[1] + leak));
        assert_eq!(
            cutoff_tau(&betas[..2], 10.0, &[20], k),
            tau_from_betas(&betas[..2], 10.0, 20)
        );
    }

    #[test]
    fn flattening_free_sigmoids_keeps_the_reset() {
        let mut layout = Parametrization::new(3, 10.0, vec![20, 30]);
        let betas = layout.betas(&[0.0; 6]).unwrap();
        let steep = layout.tau_full(&betas);
        layout.alpha = 0.5;
        let flat = layout.tau_full(&betas);
        // the free sigmoids now spread, the junction still drops by k - 1
        assert!((flat[5] - steep[5]).abs() > 0.1);
        let drop = |t: &[f64]| t[19] - t[20];
        assert!((drop(&steep) - 2.0).abs() < 0.05);
        assert!(drop(&flat) > 1.5);
    }

    #[test]
    fn half_integer_midpoints_round_to_hard_indicator() {
        let betas = [3.5, 8.5, 9.5];
        let tau = tau_from_betas(&betas, 10.0, 12);
        let g = indicator_from_tau(&tau, 4).unwrap();
        let hard = g.values().mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        assert_eq!(hard[[0, 0]], 1.0);
        assert_eq!(hard[[3, 11]], 1.0);
        let mut row_of = Vec::new();
        for col in hard.columns() {
            assert_eq!(col.sum(), 1.0);
            row_of.push(col.iter().position(|&v| v == 1.0).unwrap());
        }
        assert!(row_of.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
        assert_eq!(row_of, vec![0, 0, 0, 1, 1, 1, 1, 1, 2, 3, 3, 3]);
    }

    proptest! {
        #[test]
        fn betas_ordered(gamma in proptest::collection::vec(-30.0f64..30.0, 2..8), n in 2usize..5000) {
            let b = betas_from_gamma(&gamma, n);
            prop_assert_eq!(b.len(), gamma.len() - 1);
            // softmax weights far below machine precision can leave ties
            let spread = gamma.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - gamma.iter().copied().fold(f64::INFINITY, f64::min);
            for w in b.windows(2) {
                if spread < 20.0 {
                    prop_assert!(w[0] < w[1]);
                } else {
                    prop_assert!(w[0] <= w[1]);
                }
            }
            prop_assert!(b.iter().all(|&v| (1.0..=n as f64).contains(&v)));
        }

        #[test]
        fn tau_monotone_and_columns_stochastic(
            gamma in proptest::collection::vec(-3.0f64..3.0, 2..7),
            n in 2usize..200,
            alpha in 0.1f64..30.0,
        ) {
            let k = gamma.len();
            let tau = tau_from_betas(&betas_from_gamma(&gamma, n), alpha, n);
            for w in tau.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            let g = indicator_from_tau(&tau, k).unwrap();
            for col in g.values().columns() {
                prop_assert!((col.sum() - 1.0).abs() <= 1e-12);
                let nz: Vec<usize> = col.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, _)| i).collect();
                prop_assert!(nz.len() <= 2);
                if nz.len() == 2 {
                    prop_assert_eq!(nz[1], nz[0] + 1);
                }
            }
        }

        #[test]
        fn multi_block_invariants(
            gamma in proptest::collection::vec(-5.0f64..5.0, 12),
            lengths in proptest::collection::vec(4usize..60, 3),
        ) {
            let k = 4;
            let betas = betas_from_gamma_multi(&gamma, &lengths).unwrap();
            let tau = cutoff_tau(&betas, 10.0, &lengths, k);
            let mut start = 0;
            for (p, &len) in lengths.iter().enumerate() {
                let block = &betas[p * (k - 1)..(p + 1) * (k - 1)];
                for w in block.windows(2) {
                    prop_assert!(w[0] < w[1]);
                }
                prop_assert!(block.iter().all(|&b| b >= (start + 1) as f64 && b <= (start + len) as f64));
                let t = &tau[start..start + len];
                let leak = (k - 1) as f64 * sigmoid(-0.5, 10.0, 0.0);
                for w in t.windows(2) {
                    prop_assert!(w[0] <= w[1] + leak);
                }
                prop_assert!(t.iter().all(|&v| v >= 1.0 - 1e-9 && v <= k as f64 + 1e-9));
                start += len;
            }
        }
    }
}
