//! Balanced kernel-clustering objective and its gradient.
//!
//! For a soft indicator `G` (`k × p`) and a Gram matrix `K` (`p × p`):
//!
//! ```text
//! J(G) = Tr(K) − Tr((GGᵀ + ρI)⁻¹ G K Gᵀ) + λ ‖G·1‖²
//! ```
//!
//! which is `Tr(LK) + λ Tr(G11ᵀGᵀ)` with `L = I − Gᵀ(GGᵀ + ρI)⁻¹G`. The ridge
//! `ρ` keeps the `k × k` solve well posed when a soft segment is empty.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;

use crate::data::DataSequence;
use crate::error::{KcsrError, Result};
use crate::kernels::{validate_indices, KernelMatrix, KernelSpec};
use crate::sigmoid::{
    indicator_from_tau, indicator_tau_derivative, sigmoid_midpoint_derivative, Parametrization, SoftIndicator,
};

/// Diagonal regularizer added to `GGᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ridge {
    Fixed(f64),
    /// `scale · Tr(GGᵀ) / k`; differentiated along with `G`.
    Relative(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Self::Relative(1e-8)
    }
}

impl Ridge {
    fn resolve(self, g: &Array2<f64>) -> (f64, f64) {
        match self {
            Self::Fixed(r) => (r, 0.0),
            Self::Relative(scale) => {
                let k = g.nrows().max(1) as f64;
                let d_ridge_coef = scale / k;
                (d_ridge_coef * g.iter().map(|v| v * v).sum::<f64>(), d_ridge_coef)
            }
        }
    }
}

/// Everything needed to evaluate `J(γ)` besides the kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveParams {
    pub lambda: f64,
    pub ridge: Ridge,
    pub layout: Parametrization,
}

impl ObjectiveParams {
    pub fn single(k: usize, alpha: f64, n: usize, lambda: f64) -> Self {
        Self {
            lambda,
            ridge: Ridge::default(),
            layout: Parametrization::single(k, alpha, n),
        }
    }

    pub fn multi(k: usize, alpha: f64, lengths: Vec<usize>, lambda: f64) -> Self {
        Self {
            lambda,
            ridge: Ridge::default(),
            layout: Parametrization::new(k, alpha, lengths),
        }
    }

    pub fn with_ridge(mut self, ridge: Ridge) -> Self {
        self.ridge = ridge;
        self
    }

    pub fn k(&self) -> usize {
        self.layout.k
    }

    pub fn n(&self) -> usize {
        self.layout.n()
    }
}

/// Balanced-term weight that makes both terms comparable at the start:
/// `0.01 · Tr(K) / (n² / k)`.
pub fn auto_lambda(kernel_trace: f64, n: usize, k: usize) -> f64 {
    1e-2 * kernel_trace * k as f64 / (n as f64 * n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub value: f64,
    pub grad_gamma: Vec<f64>,
}

struct Pieces {
    value: f64,
    dj_dg: Option<Array2<f64>>,
}

/// Column-sparse view of `G`: the nonzero rows of each column.
fn column_support(g: &Array2<f64>) -> Vec<Vec<(usize, f64)>> {
    g.columns()
        .into_iter()
        .map(|col| {
            col.iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(i, &v)| (i, v))
                .collect()
        })
        .collect()
}

/// Core evaluation over any symmetric kernel given entrywise. `entry(c, j)`
/// must equal `entry(j, c)`.
fn evaluate_with<F>(
    g: &Array2<f64>,
    p: usize,
    kernel_trace: f64,
    entry: F,
    lambda: f64,
    ridge: Ridge,
    with_grad: bool,
) -> Result<Pieces>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let k = g.nrows();
    if g.ncols() != p {
        return Err(KcsrError::input(format!(
            "indicator has {} columns but the kernel has size {p}",
            g.ncols()
        )));
    }
    let support = column_support(g);

    // GK, one column per sample; columns are independent so the result does
    // not depend on the thread count.
    let gk_cols: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; k];
            for (j, col) in support.iter().enumerate() {
                if col.is_empty() {
                    continue;
                }
                let kv = entry(c, j);
                for &(i, gv) in col {
                    acc[i] += gv * kv;
                }
            }
            acc
        })
        .collect();
    let mut gk = Array2::<f64>::zeros((k, p));
    for (c, col) in gk_cols.iter().enumerate() {
        for i in 0..k {
            gk[[i, c]] = col[i];
        }
    }

    // M = G K Gᵀ and GGᵀ from the sparse columns.
    let mut m = Array2::<f64>::zeros((k, k));
    let mut ggt = Array2::<f64>::zeros((k, k));
    for (c, col) in support.iter().enumerate() {
        for &(i2, gv) in col {
            for i in 0..k {
                m[[i, i2]] += gk[[i, c]] * gv;
            }
            for &(i, gv1) in col {
                ggt[[i, i2]] += gv1 * gv;
            }
        }
    }
    let m = symmetrize(m);

    let (ridge_value, ridge_coef) = ridge.resolve(g);
    let mut a = ggt.clone();
    for i in 0..k {
        a[[i, i]] += ridge_value;
    }
    let a_inv = spd_inverse(&a).ok_or_else(|| {
        let (row, size) = (0..k)
            .map(|i| (i, ggt[[i, i]]))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap_or((0, 0.0));
        KcsrError::numerical(format!("GGᵀ is singular: segment {} has soft size {size:.3e}", row + 1))
    })?;

    let a_inv_m = a_inv.dot(&m);
    let fit: f64 = a_inv_m.diag().sum();
    let sizes = g.sum_axis(Axis(1));
    let balance: f64 = sizes.iter().map(|s| s * s).sum();
    let value = kernel_trace - fit + lambda * balance;

    let dj_dg = with_grad.then(|| {
        let b = symmetrize(a_inv_m.dot(&a_inv));
        let mut grad = 2.0 * b.dot(g) - 2.0 * a_inv.dot(&gk);
        let ridge_term = 2.0 * ridge_coef * b.diag().sum();
        if ridge_term != 0.0 {
            grad.scaled_add(ridge_term, g);
        }
        for (i, mut row) in grad.rows_mut().into_iter().enumerate() {
            row += 2.0 * lambda * sizes[i];
        }
        grad
    });
    Ok(Pieces { value, dj_dg })
}

fn symmetrize(m: Array2<f64>) -> Array2<f64> {
    let t = m.t().to_owned();
    (m + t) * 0.5
}

/// Inverse of a small symmetric positive-definite matrix via Cholesky, or
/// `None` if the factorization breaks down.
pub(crate) fn spd_inverse(a: &Array2<f64>) -> Option<Array2<f64>> {
    let k = a.nrows();
    let scale = (0..k).map(|i| a[[i, i]].abs()).fold(0.0, f64::max);
    let mut l = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in 0..=i {
            let s: f64 = (0..j).map(|c| l[[i, c]] * l[[j, c]]).sum();
            if i == j {
                let d = a[[i, i]] - s;
                if !d.is_finite() || d <= 1e-14 * scale {
                    return None;
                }
                l[[i, i]] = d.sqrt();
            } else {
                l[[i, j]] = (a[[i, j]] - s) / l[[j, j]];
            }
        }
    }
    let mut inv = Array2::<f64>::zeros((k, k));
    for col in 0..k {
        let mut y = Array1::<f64>::zeros(k);
        for i in 0..k {
            let rhs = if i == col { 1.0 } else { 0.0 };
            let s: f64 = (0..i).map(|c| l[[i, c]] * y[c]).sum();
            y[i] = (rhs - s) / l[[i, i]];
        }
        for i in (0..k).rev() {
            let s: f64 = ((i + 1)..k).map(|c| l[[c, i]] * inv[[c, col]]).sum();
            inv[[i, col]] = (y[i] - s) / l[[i, i]];
        }
    }
    Some(symmetrize(inv))
}

fn evaluate_matrix(
    g: &Array2<f64>,
    kernel: &KernelMatrix,
    lambda: f64,
    ridge: Ridge,
    with_grad: bool,
) -> Result<Pieces> {
    let values = kernel.values();
    evaluate_with(
        g,
        kernel.size(),
        kernel.trace(),
        |c, j| values[[c, j]],
        lambda,
        ridge,
        with_grad,
    )
}

/// `Tr(LK) + λ‖G·1‖²` for an explicit indicator.
pub fn evaluate_objective(g: &SoftIndicator, kernel: &KernelMatrix, lambda: f64, ridge: Ridge) -> Result<f64> {
    Ok(evaluate_matrix(g.values(), kernel, lambda, ridge, false)?.value)
}

/// `∂J/∂G = 2A⁻¹GKGᵀA⁻¹G − 2A⁻¹GK + 2λG11ᵀ` with `A = GGᵀ + ρI`.
///
/// The balanced term `‖G·1‖²` differentiates to `2G11ᵀ`; with a relative
/// ridge the extra `2(scale/k)·Tr(A⁻¹MA⁻¹)·G` term is included as well.
pub fn grad_wrt_indicator(g: &SoftIndicator, kernel: &KernelMatrix, lambda: f64, ridge: Ridge) -> Result<Array2<f64>> {
    let pieces = evaluate_matrix(g.values(), kernel, lambda, ridge, true)?;
    Ok(pieces.dj_dg.unwrap_or_default())
}

fn resolve_indices(kernel: &KernelMatrix, indices: Option<&[usize]>, n: usize) -> Result<Vec<usize>> {
    let idx: Vec<usize> = match indices {
        Some(idx) => {
            validate_indices(idx, n)?;
            idx.to_vec()
        }
        None => (0..n).collect(),
    };
    if idx.len() != kernel.size() {
        return Err(KcsrError::input(format!(
            "kernel of size {} does not match {} sample indices",
            kernel.size(),
            idx.len()
        )));
    }
    Ok(idx)
}

/// `J(γ)` on the samples at `indices` (all samples when `None`).
pub fn objective_value(
    gamma: &[f64],
    kernel: &KernelMatrix,
    indices: Option<&[usize]>,
    params: &ObjectiveParams,
) -> Result<f64> {
    let idx = resolve_indices(kernel, indices, params.n())?;
    let betas = params.layout.betas(gamma)?;
    let tau = params.layout.tau_at(&betas, &idx);
    let g = indicator_from_tau(&tau, params.k())?;
    Ok(evaluate_matrix(g.values(), kernel, params.lambda, params.ridge, false)?.value)
}

/// Analytic `∂J/∂γ` by the chain `∂J/∂G · ∂G/∂τ · ∂τ/∂β · ∂β/∂γ`.
///
/// With `indices`, the kernel is the partial matrix of those samples and the
/// sigmoids are evaluated at their original time positions.
pub fn grad_wrt_gamma(
    gamma: &[f64],
    kernel: &KernelMatrix,
    indices: Option<&[usize]>,
    params: &ObjectiveParams,
) -> Result<GradientReport> {
    let idx = resolve_indices(kernel, indices, params.n())?;
    let values = kernel.values();
    chain_rule(gamma, &idx, params, |g, with_grad| {
        evaluate_with(
            g,
            kernel.size(),
            kernel.trace(),
            |c, j| values[[c, j]],
            params.lambda,
            params.ridge,
            with_grad,
        )
    })
}

fn chain_rule<E>(gamma: &[f64], idx: &[usize], params: &ObjectiveParams, eval: E) -> Result<GradientReport>
where
    E: FnOnce(&Array2<f64>, bool) -> Result<Pieces>,
{
    let layout = &params.layout;
    let k = layout.k;
    let alpha = layout.alpha;
    let betas = layout.betas(gamma)?;
    let tau = layout.tau_at(&betas, idx);
    let g = indicator_from_tau(&tau, k)?;
    let pieces = eval(g.values(), true)?;
    let dj_dg = pieces.dj_dg.expect("gradient requested");

    let dj_dtau: Vec<f64> = tau
        .iter()
        .enumerate()
        .map(|(c, &t)| {
            let t = t.clamp(1.0, k as f64);
            (0..k)
                .map(|i| {
                    let d = indicator_tau_derivative(t, i + 1);
                    if d == 0.0 {
                        0.0
                    } else {
                        dj_dg[[i, c]] * d
                    }
                })
                .sum()
        })
        .collect();

    let dj_dbeta: Vec<f64> = betas
        .iter()
        .map(|&b| {
            idx.iter()
                .zip(&dj_dtau)
                .map(|(&j, &d)| d * sigmoid_midpoint_derivative((j + 1) as f64, alpha, b))
                .sum()
        })
        .collect();
    let grad_gamma = layout.pullback_betas(gamma, &dj_dbeta);
    if let Some(bad) = grad_gamma.iter().position(|v| !v.is_finite()) {
        return Err(KcsrError::numerical(format!("gradient entry {bad} is not finite")));
    }
    Ok(GradientReport {
        value: pieces.value,
        grad_gamma,
    })
}

/// Full-sequence objective and gradient evaluated without storing the Gram
/// matrix: kernel entries are recomputed on the fly (`O(n² d)` time,
/// `O(kn)` memory).
pub fn streaming_grad_wrt_gamma(
    gamma: &[f64],
    x: &DataSequence,
    spec: &KernelSpec,
    params: &ObjectiveParams,
) -> Result<GradientReport> {
    let n = params.n();
    if x.len() != n {
        return Err(KcsrError::input(format!("{} samples for a layout of {n}", x.len())));
    }
    let idx: Vec<usize> = (0..n).collect();
    let trace: f64 = (0..n).map(|j| spec.eval(x.sample(j), x.sample(j))).sum();
    chain_rule(gamma, &idx, params, |g, with_grad| {
        evaluate_with(
            g,
            n,
            trace,
            |c, j| {
                // evaluate in a fixed argument order so entry(c, j) == entry(j, c)
                let (a, b) = if c <= j { (c, j) } else { (j, c) };
                spec.eval(x.sample(a), x.sample(b))
            },
            params.lambda,
            params.ridge,
            with_grad,
        )
    })
}

/// Value-only counterpart of [`streaming_grad_wrt_gamma`].
pub fn streaming_objective_value(
    gamma: &[f64],
    x: &DataSequence,
    spec: &KernelSpec,
    params: &ObjectiveParams,
) -> Result<f64> {
    let n = params.n();
    if x.len() != n {
        return Err(KcsrError::input(format!("{} samples for a layout of {n}", x.len())));
    }
    let trace: f64 = (0..n).map(|j| spec.eval(x.sample(j), x.sample(j))).sum();
    let betas = params.layout.betas(gamma)?;
    let g = indicator_from_tau(&params.layout.tau_full(&betas), params.k())?;
    let pieces = evaluate_with(
        g.values(),
        n,
        trace,
        |c, j| {
            let (a, b) = if c <= j { (c, j) } else { (j, c) };
            spec.eval(x.sample(a), x.sample(b))
        },
        params.lambda,
        params.ridge,
        false,
    )?;
    Ok(pieces.value)
}

/// Central differences `(J(γ + h e_c) − J(γ − h e_c)) / 2h`.
pub fn finite_diff_grad(
    gamma: &[f64],
    kernel: &KernelMatrix,
    indices: Option<&[usize]>,
    params: &ObjectiveParams,
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = gamma.to_vec();
    (0..gamma.len())
        .map(|c| {
            probe[c] = gamma[c] + h;
            let up = objective_value(&probe, kernel, indices, params)?;
            probe[c] = gamma[c] - h;
            let down = objective_value(&probe, kernel, indices, params)?;
            probe[c] = gamma[c];
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::build_kernel_matrix;
    use crate::sigmoid::tau_from_betas;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_psd(p: usize, rng: &mut ChaCha8Rng) -> KernelMatrix {
        let x: Vec<f64> = (0..p * 2).map(|_| rng.sample(StandardNormal)).collect();
        let seq = DataSequence::new(Array2::from_shape_vec((p, 2), x).unwrap(), "r").unwrap();
        build_kernel_matrix(&seq, &KernelSpec::Rbf { sigma: 1.0 }).unwrap()
    }

    fn random_soft_indicator(k: usize, p: usize, rng: &mut ChaCha8Rng) -> SoftIndicator {
        let mut taus: Vec<f64> = (0..p).map(|_| rng.random_range(1.0..k as f64)).collect();
        taus.sort_by(f64::total_cmp);
        indicator_from_tau(&taus, k).unwrap()
    }

    #[test]
    fn single_segment_closed_form() {
        let k = KernelMatrix::from_matrix(array![[2.0, 0.5, 0.1], [0.5, 1.0, 0.3], [0.1, 0.3, 1.5]]).unwrap();
        let g = SoftIndicator::from_matrix(Array2::ones((1, 3)));
        let lambda = 0.25;
        let total: f64 = k.values().sum();
        let expected = k.trace() - total / 3.0 + lambda * 9.0;
        let got = evaluate_objective(&g, &k, lambda, Ridge::Fixed(0.0)).unwrap();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
    }

    #[test]
    fn identity_kernel_gives_n_minus_k() {
        let labels = [1, 1, 2, 2, 2, 3, 4, 4];
        let g = SoftIndicator::from_labels(&labels, 4);
        let k = KernelMatrix::from_matrix(Array2::eye(8)).unwrap();
        assert_abs_diff_eq!(
            evaluate_objective(&g, &k, 0.0, Ridge::Fixed(0.0)).unwrap(),
            4.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            evaluate_objective(&g, &k, 0.0, Ridge::default()).unwrap(),
            4.0,
            epsilon = 1e-6
        );
    }

    #[test]
    fn balanced_term_for_reported_sizes() {
        let sizes = [832usize, 1018, 1174, 843];
        let labels: Vec<usize> = sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &s)| std::iter::repeat_n(c + 1, s))
            .collect();
        let g = SoftIndicator::from_labels(&labels, 4);
        let squares: f64 = g.row_sums().iter().map(|s| s * s).sum();
        assert_eq!(squares, 3_817_473.0);
    }

    #[test]
    fn singular_without_ridge_names_segment() {
        let g = SoftIndicator::from_labels(&[1, 1, 1], 2);
        let k = KernelMatrix::from_matrix(Array2::eye(3)).unwrap();
        let err = evaluate_objective(&g, &k, 0.0, Ridge::Fixed(0.0)).unwrap_err();
        assert!(
            matches!(err, KcsrError::Numerical(ref m) if m.contains("segment 2")),
            "{err}"
        );
        assert!(evaluate_objective(&g, &k, 0.0, Ridge::Fixed(1e-8)).is_ok());
    }

    #[test]
    fn zero_kernel_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_soft_indicator(3, 10, &mut rng);
        let zero = KernelMatrix::from_matrix(Array2::zeros((10, 10))).unwrap();
        let d = grad_wrt_indicator(&g, &zero, 0.0, Ridge::Fixed(1e-6)).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));

        let lambda = 0.3;
        let d = grad_wrt_indicator(&g, &zero, lambda, Ridge::Fixed(1e-6)).unwrap();
        let sizes = g.row_sums();
        for i in 0..3 {
            for j in 0..10 {
                assert_abs_diff_eq!(d[[i, j]], 2.0 * lambda * sizes[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn indicator_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for ridge in [Ridge::Fixed(1e-3), Ridge::Relative(1e-8), Ridge::Relative(1e-2)] {
            let (k, p) = (3, 12);
            let g = random_soft_indicator(k, p, &mut rng);
            let kernel = random_psd(p, &mut rng);
            let lambda = 0.05;
            let analytic = grad_wrt_indicator(&g, &kernel, lambda, ridge).unwrap();
            let h = 1e-6;
            for i in 0..k {
                for j in 0..p {
                    let mut up = g.values().clone();
                    up[[i, j]] += h;
                    let mut down = g.values().clone();
                    down[[i, j]] -= h;
                    let fu = evaluate_objective(&SoftIndicator::from_matrix(up), &kernel, lambda, ridge).unwrap();
                    let fd = evaluate_objective(&SoftIndicator::from_matrix(down), &kernel, lambda, ridge).unwrap();
                    let numeric = (fu - fd) / (2.0 * h);
                    let a = analytic[[i, j]];
                    assert!(
                        (a - numeric).abs() <= 1e-6 * a.abs().max(1.0),
                        "({i},{j}) analytic {a} numeric {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn tau_derivative_at_midpoint() {
        assert_eq!(sigmoid_midpoint_derivative(7.0, 10.0, 7.0), -2.5);
    }

    // A label within 1e-3 of an integer is only a hazard for finite
    // differences when it still moves with the midpoints; labels pinned on a
    // sigmoid plateau sit near integers in almost every draw.
    fn away_from_kinks(betas: &[f64], alpha: f64, n: usize) -> bool {
        tau_from_betas(betas, alpha, n).iter().enumerate().all(|(j, t)| {
            let x = (j + 1) as f64;
            let slope: f64 = betas
                .iter()
                .map(|&b| -crate::sigmoid::sigmoid_midpoint_derivative(x, alpha, b))
                .sum();
            slope <= 1e-3 || (t - t.round()).abs() > 1e-3
        })
    }

    #[test]
    fn gamma_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (n, k) = (60, 3);
        let kernel = random_psd(n, &mut rng);
        let (mut checked, mut drawn) = (0, 0);
        while checked < 10 {
            drawn += 1;
            assert!(drawn < 1000, "no usable draws");
            let gamma: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            let betas = crate::sigmoid::betas_from_gamma(&gamma, n);
            if !away_from_kinks(&betas, 10.0, n) {
                continue;
            }
            for lambda in [0.0, 0.01] {
                let params = ObjectiveParams::single(k, 10.0, n, lambda);
                let analytic = grad_wrt_gamma(&gamma, &kernel, None, &params).unwrap().grad_gamma;
                let numeric = finite_diff_grad(&gamma, &kernel, None, &params, 1e-6).unwrap();
                let diff: f64 = analytic
                    .iter()
                    .zip(&numeric)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let norm: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(
                    diff <= 1e-4 * norm.max(1e-8),
                    "analytic {analytic:?} numeric {numeric:?}"
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn full_index_minibatch_equals_full_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 30;
        let kernel = random_psd(n, &mut rng);
        let params = ObjectiveParams::single(4, 10.0, n, 0.01);
        let gamma = [0.2, -0.4, 0.9, 0.0];
        let idx: Vec<usize> = (0..n).collect();
        let full = grad_wrt_gamma(&gamma, &kernel, None, &params).unwrap();
        let batch = grad_wrt_gamma(&gamma, &kernel, Some(&idx), &params).unwrap();
        assert_eq!(full, batch);
        assert_eq!(
            full.value,
            objective_value(&gamma, &kernel, Some(&idx), &params).unwrap()
        );
        assert!(grad_wrt_gamma(&gamma, &kernel, Some(&[3, 2]), &params).is_err());
    }

    #[test]
    fn streaming_matches_materialized() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..80).map(|_| rng.sample(StandardNormal)).collect();
        let seq = DataSequence::new(Array2::from_shape_vec((40, 2), x).unwrap(), "s").unwrap();
        let spec = KernelSpec::Rbf { sigma: 0.9 };
        let kernel = build_kernel_matrix(&seq, &spec).unwrap();
        let params = ObjectiveParams::single(3, 10.0, 40, 0.02);
        let gamma = [0.1, 0.5, -0.3];
        let a = grad_wrt_gamma(&gamma, &kernel, None, &params).unwrap();
        let b = streaming_grad_wrt_gamma(&gamma, &seq, &spec, &params).unwrap();
        assert_abs_diff_eq!(a.value, b.value, epsilon = 1e-9);
        for (u, v) in a.grad_gamma.iter().zip(&b.grad_gamma) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-9);
        }
    }

    #[test]
    fn finite_diff_basic_properties() {
        let zero = KernelMatrix::from_matrix(Array2::zeros((20, 20))).unwrap();
        let params = ObjectiveParams::single(3, 10.0, 20, 0.0);
        let fd = finite_diff_grad(&[0.3, 0.1, -0.2], &zero, None, &params, 1e-6).unwrap();
        assert!(fd.iter().all(|v| v.abs() < 1e-9));

        // J is affine in λ, so is every finite-difference coordinate
        let gamma = [0.31, -0.2, 0.45];
        let one = ObjectiveParams::single(3, 10.0, 20, 0.01).with_ridge(Ridge::Fixed(1e-6));
        let two = ObjectiveParams::single(3, 10.0, 20, 0.02).with_ridge(Ridge::Fixed(1e-6));
        let g1 = finite_diff_grad(&gamma, &zero, None, &one, 1e-6).unwrap();
        let g2 = finite_diff_grad(&gamma, &zero, None, &two, 1e-6).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_abs_diff_eq!(2.0 * a, *b, epsilon = 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn objective_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let (k, p) = (rng.random_range(1..5), rng.random_range(8..30));
            let kernel = random_psd(p, &mut rng);
            let labels: Vec<usize> = (0..p).map(|j| 1 + j * k / p).collect();
            let g = SoftIndicator::from_labels(&labels, k);
            let fit = evaluate_objective(&g, &kernel, 0.0, Ridge::Fixed(0.0)).unwrap();
            assert!(fit >= -1e-10);
            let balance: f64 = g.row_sums().iter().map(|s| s * s).sum();
            assert!(balance >= (p * p) as f64 / k as f64 - 1e-9);
        }
    }
}
