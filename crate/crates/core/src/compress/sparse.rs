//! Threshold and top-k sparsification.

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

/// Coordinate-list sparse matrix with strictly increasing flat indices and
/// non-zero values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    pub shape: (usize, usize),
    pub entries: Vec<(usize, f64)>,
}

impl SparseTensor {
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.shape.0, self.shape.1);
        let data = m.data_mut();
        for &(i, v) in &self.entries {
            data[i] = v;
        }
        m
    }

    pub fn density(&self) -> f64 {
        let n = self.shape.0 * self.shape.1;
        if n == 0 {
            0.0
        } else {
            self.nnz() as f64 / n as f64
        }
    }
}

/// Drops entries with `|v| < cut`; zeros are never stored.
pub fn sparsify_threshold(s: &Matrix, cut: f64) -> SparseTensor {
    let entries = s
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0 && v.abs() >= cut)
        .map(|(i, &v)| (i, v))
        .collect();
    SparseTensor {
        shape: s.shape(),
        entries,
    }
}

/// Flat indices of the `k` largest-magnitude non-zero values, ties broken
/// toward the smaller index. Returned sorted ascending.
pub fn topk_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| values[i] != 0.0).collect();
    if k < idx.len() {
        idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
        idx.truncate(k);
        idx.sort_unstable();
    }
    idx
}

/// Keeps the `min(k, nnz)` largest-magnitude entries.
pub fn sparsify_topk(s: &Matrix, k: usize) -> SparseTensor {
    let data = s.data();
    let entries = topk_indices(data, k)
        .into_iter()
        .map(|i| (i, data[i]))
        .collect();
    SparseTensor {
        shape: s.shape(),
        entries,
    }
}

/// Sparsification applied to the personalized channel after each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sparsifier {
    /// Zero every entry with `|v| < cut`.
    Threshold { cut: f64 },
    /// Keep the `⌈beta · N⌉` largest entries over all `N` parameters.
    TopK { beta: f64 },
}

impl Sparsifier {
    /// Budget of non-zeros for a parameter set of `total` entries, if any.
    pub fn budget(&self, total: usize) -> Option<usize> {
        match *self {
            Sparsifier::Threshold { .. } => None,
            Sparsifier::TopK { beta } => Some(((beta * total as f64).ceil() as usize).min(total)),
        }
    }

    /// Applies the sparsifier jointly to a group of matrices (top-k is taken
    /// over the concatenation, in order).
    pub fn apply_many(&self, mats: &mut [&mut Matrix]) {
        match *self {
            Sparsifier::Threshold { cut } => {
                for m in mats.iter_mut() {
                    for v in m.data_mut() {
                        if v.abs() < cut {
                            *v = 0.0;
                        }
                    }
                }
            }
            Sparsifier::TopK { .. } => {
                let total: usize = mats.iter().map(|m| m.len()).sum();
                let k = self.budget(total).unwrap_or(total);
                let flat: Vec<f64> = mats.iter().flat_map(|m| m.data().iter().copied()).collect();
                let keep = topk_indices(&flat, k);
                let mut mask = vec![false; total];
                for i in keep {
                    mask[i] = true;
                }
                let mut offset = 0;
                for m in mats.iter_mut() {
                    let len = m.len();
                    for (j, v) in m.data_mut().iter_mut().enumerate() {
                        if !mask[offset + j] {
                            *v = 0.0;
                        }
                    }
                    offset += len;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_examples() {
        let s = Matrix::from_rows(&[&[0.5, -0.01], &[0.0, 2.0]]);
        assert_eq!(sparsify_threshold(&s, 0.1).entries, vec![(0, 0.5), (3, 2.0)]);
        assert_eq!(
            sparsify_threshold(&s, 0.0).entries,
            vec![(0, 0.5), (1, -0.01), (3, 2.0)]
        );
        assert!(sparsify_threshold(&s, 1e300).entries.is_empty());
    }

    #[test]
    fn topk_examples() {
        let s = Matrix::from_rows(&[&[1.0, -3.0], &[2.0, 0.0]]);
        assert_eq!(sparsify_topk(&s, 2).entries, vec![(1, -3.0), (2, 2.0)]);
        assert!(sparsify_topk(&s, 0).entries.is_empty());
        assert_eq!(sparsify_topk(&s, 4).to_dense(), s);
    }

    #[test]
    fn topk_ties_prefer_smaller_index() {
        let s = Matrix::from_rows(&[&[1.0, -1.0, 1.0]]);
        assert_eq!(sparsify_topk(&s, 2).entries, vec![(0, 1.0), (1, -1.0)]);
    }

    #[test]
    fn topk_is_optimal_over_all_supports() {
        // Brute force over every support of size ≤ k on random 3×3 matrices.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let s = Matrix::from_vec(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect());
            for k in 0..=3usize {
                let ours = s.sub(&sparsify_topk(&s, k).to_dense()).unwrap().frobenius_norm();
                let mut best = f64::INFINITY;
                for mask in 0u32..(1 << 9) {
                    if mask.count_ones() as usize > k {
                        continue;
                    }
                    let err: f64 = (0..9)
                        .filter(|i| mask & (1 << i) == 0)
                        .map(|i| s.data()[i].powi(2))
                        .sum::<f64>()
                        .sqrt();
                    best = best.min(err);
                }
                assert!(ours <= best + 1e-12);
            }
        }
    }

    #[test]
    fn joint_topk_budget_spans_matrices() {
        let mut a = Matrix::from_rows(&[&[0.1, 5.0]]);
        let mut b = Matrix::from_rows(&[&[3.0, 0.2, 0.3]]);
        let sp = Sparsifier::TopK { beta: 0.4 };
        assert_eq!(sp.budget(5), Some(2));
        sp.apply_many(&mut [&mut a, &mut b]);
        assert_eq!(a.data(), &[0.0, 5.0]);
        assert_eq!(b.data(), &[3.0, 0.0, 0.0]);
    }
}
