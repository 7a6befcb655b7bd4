//! Permutation-matched accuracy and normalized mutual information.
//!
//! Labels are positive integers (`1..=k`); the number of clusters on each
//! side is taken as the largest label present.

use ndarray::Array2;

use crate::error::{KcsrError, Result};

/// Co-occurrence counts of predicted (rows) and true (columns) labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contingency {
    pub counts: Array2<usize>,
    pub row_sums: Vec<usize>,
    pub col_sums: Vec<usize>,
    pub total: usize,
}

impl Contingency {
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(KcsrError::input(format!(
                "{} predicted labels for {} true labels",
                pred.len(),
                truth.len()
            )));
        }
        if pred.is_empty() {
            return Err(KcsrError::input("label vectors are empty"));
        }
        if pred.iter().chain(truth).any(|&l| l == 0) {
            return Err(KcsrError::input("labels start at 1"));
        }
        let rows = pred.iter().copied().max().unwrap_or(1);
        let cols = truth.iter().copied().max().unwrap_or(1);
        let mut counts = Array2::<usize>::zeros((rows, cols));
        for (&p, &t) in pred.iter().zip(truth) {
            counts[[p - 1, t - 1]] += 1;
        }
        let row_sums = counts.rows().into_iter().map(|r| r.sum()).collect();
        let col_sums = counts.columns().into_iter().map(|c| c.sum()).collect();
        Ok(Self {
            counts,
            row_sums,
            col_sums,
            total: pred.len(),
        })
    }
}

/// Maximum-profit assignment (Kuhn–Munkres). Returns, for every row, the
/// column it is assigned to. Rectangular inputs are padded with zeros, so
/// surplus rows map to columns `>= ncols`.
pub fn hungarian(profit: &Array2<f64>) -> Vec<usize> {
    let rows = profit.nrows();
    let size = rows.max(profit.ncols());
    if size == 0 {
        return Vec::new();
    }
    let max = profit.iter().copied().fold(0.0, f64::max);
    let cost = |i: usize, j: usize| -> f64 {
        let p = if i < profit.nrows() && j < profit.ncols() {
            profit[[i, j]]
        } else {
            0.0
        };
        max - p
    };

    // Shortest augmenting path formulation with row/column potentials;
    // index 0 is a sentinel, rows and columns are 1-based inside.
    let mut u = vec![0.0; size + 1];
    let mut v = vec![0.0; size + 1];
    let mut col_owner = vec![0usize; size + 1];
    let mut way = vec![0usize; size + 1];
    for i in 1..=size {
        col_owner[0] = i;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=size {
                if used[j] {
                    continue;
                }
                let reduced = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=size {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; size];
    for j in 1..=size {
        if col_owner[j] > 0 {
            assignment[col_owner[j] - 1] = j - 1;
        }
    }
    assignment.truncate(rows);
    assignment
}

/// Fraction of samples whose predicted label, after the best one-to-one
/// relabeling, equals the true label.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = Contingency::new(pred, truth)?;
    let profit = table.counts.mapv(|c| c as f64);
    let assignment = hungarian(&profit);
    let matched: usize = assignment
        .iter()
        .enumerate()
        .filter(|&(_, &col)| col < table.counts.ncols())
        .map(|(row, &col)| table.counts[[row, col]])
        .sum();
    Ok(matched as f64 / table.total as f64)
}

// Terms are summed in sorted order so relabeling either side gives
// bit-identical results.
fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

fn entropy(marginal: &[usize], total: f64) -> f64 {
    sorted_sum(
        marginal
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total;
                -p * p.log2()
            })
            .collect(),
    )
}

/// Mutual information in bits.
pub fn mutual_information(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = Contingency::new(pred, truth)?;
    Ok(mi_from(&table))
}

fn mi_from(table: &Contingency) -> f64 {
    let total = table.total as f64;
    let terms = table
        .counts
        .indexed_iter()
        .filter(|&(_, &count)| count > 0)
        .map(|((r, c), &count)| {
            let joint = count as f64 / total;
            let pr = table.row_sums[r] as f64 / total;
            let pc = table.col_sums[c] as f64 / total;
            joint * (joint / (pr * pc)).log2()
        })
        .collect();
    sorted_sum(terms).max(0.0)
}

/// `MI / max(H(pred), H(truth))`; 1.0 when both sides are a single cluster.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = Contingency::new(pred, truth)?;
    let total = table.total as f64;
    let h = entropy(&table.row_sums, total).max(entropy(&table.col_sums, total));
    if h == 0.0 {
        return Ok(1.0);
    }
    Ok((mi_from(&table) / h).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hungarian_small_cases() {
        assert_eq!(hungarian(&Array2::eye(4)), vec![0, 1, 2, 3]);
        assert_eq!(hungarian(&array![[0.0, 1.0], [1.0, 0.0]]), vec![1, 0]);
        // wide and tall inputs
        assert_eq!(hungarian(&array![[1.0, 5.0, 2.0]]), vec![1]);
        let tall = hungarian(&array![[1.0], [7.0], [3.0]]);
        assert_eq!(tall[1], 0);
        assert!(tall[0] >= 1 && tall[2] >= 1);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 2, 3], &[1, 2, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[2, 2, 1, 1], &[1, 1, 2, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2, 1, 2], &[1, 1, 2, 2]).unwrap(), 0.5);
        assert!(accuracy(&[1, 2], &[1]).is_err());
        // more predicted clusters than true ones
        assert_eq!(accuracy(&[1, 2, 3, 3], &[1, 1, 2, 2]).unwrap(), 0.75);
    }

    #[test]
    fn nmi_examples() {
        assert_eq!(nmi(&[1, 1, 2, 2, 3], &[1, 1, 2, 2, 3]).unwrap(), 1.0);
        assert_eq!(nmi(&[1, 2, 1, 2], &[1, 1, 2, 2]).unwrap(), 0.0);
        assert!((nmi(&[3, 3, 1, 1, 2], &[1, 1, 2, 2, 3]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[1, 1, 1], &[1, 1, 1]).unwrap(), 1.0);
        assert_eq!(nmi(&[1, 1, 1, 1], &[1, 1, 2, 2]).unwrap(), 0.0);
        assert!(nmi(&[1], &[1, 1]).is_err());
    }

    #[test]
    fn mutual_information_in_bits() {
        // two balanced, perfectly aligned clusters carry one bit
        assert!((mutual_information(&[1, 1, 2, 2], &[2, 2, 1, 1]).unwrap() - 1.0).abs() < 1e-12);
    }

    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![Vec::new()];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn hungarian_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for k in 1..=6 {
            let perms = permutations(k);
            for _ in 0..20 {
                let profit = Array2::from_shape_fn((k, k), |_| rng.random_range(0..50) as f64);
                let best = perms
                    .iter()
                    .map(|p| p.iter().enumerate().map(|(r, &c)| profit[[r, c]]).sum::<f64>())
                    .fold(f64::MIN, f64::max);
                let got: f64 = hungarian(&profit)
                    .iter()
                    .enumerate()
                    .map(|(r, &c)| profit[[r, c]])
                    .sum();
                assert_eq!(got, best, "{profit:?}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn relabeling_leaves_scores_unchanged(
            pairs in proptest::collection::vec((1usize..=4, 1usize..=4), 1..60),
            perm_seed in 0usize..24,
        ) {
            let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let perm = &permutations(4)[perm_seed];
            let relabeled: Vec<usize> = pred.iter().map(|&l| perm[l - 1] + 1).collect();
            // compacting labels keeps the cluster count fixed at the maximum label
            let used = |v: &[usize]| v.iter().copied().max().unwrap();
            proptest::prop_assume!(used(&pred) == 4 && used(&relabeled) == 4);
            proptest::prop_assert_eq!(accuracy(&pred, &truth).unwrap(), accuracy(&relabeled, &truth).unwrap());
            proptest::prop_assert_eq!(nmi(&pred, &truth).unwrap(), nmi(&relabeled, &truth).unwrap());
            proptest::prop_assert_eq!(nmi(&truth, &pred).unwrap(), nmi(&truth, &relabeled).unwrap());
        }
    }
}
