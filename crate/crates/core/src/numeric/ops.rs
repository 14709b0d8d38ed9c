//! Forward and backward functions for the operations the model uses.
//! Callers compose them explicitly; there is no tape.

use super::{Matrix, NumericError};

/// `C = A·B`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, NumericError> {
    a.matmul(b)
}

/// Given `dC`, returns `(dA, dB) = (dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_backward(
    a: &Matrix,
    b: &Matrix,
    d_out: &Matrix,
) -> Result<(Matrix, Matrix), NumericError> {
    if d_out.shape() != (a.rows(), b.cols()) {
        return Err(NumericError::shape("matmul_backward", a, d_out));
    }
    Ok((d_out.matmul_transposed(b)?, a.transposed_matmul(d_out)?))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Softmax backward from the forward output `y`: `dX = y ⊙ (dY − (dY·y)1)` per row.
pub fn softmax_rows_backward(y: &Matrix, d_y: &Matrix) -> Result<Matrix, NumericError> {
    if y.shape() != d_y.shape() {
        return Err(NumericError::shape("softmax_rows_backward", y, d_y));
    }
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let dr = d_y.row(r);
        let inner: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for (o, (yv, dv)) in out.row_mut(r).iter_mut().zip(yr.iter().zip(dr)) {
            *o = yv * (dv - inner);
        }
    }
    Ok(out)
}

/// Column-wise mean, giving a 1×cols row vector.
pub fn mean_pool_rows(m: &Matrix) -> Matrix {
    m.sum_rows().scale(1.0 / m.rows() as f64)
}

/// Spreads `dY / rows` to every row.
pub fn mean_pool_rows_backward(d_y: &Matrix, rows: usize) -> Result<Matrix, NumericError> {
    if d_y.rows() != 1 || rows == 0 {
        return Err(NumericError::EmptyShape {
            rows: d_y.rows(),
            cols: d_y.cols(),
        });
    }
    let scaled = d_y.scale(1.0 / rows as f64);
    Ok(Matrix::from_fn(rows, d_y.cols(), |_, c| scaled.get(0, c)))
}

/// Row offsets of stacked segments: segment `i` spans `bounds[i]..bounds[i+1]`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Segments {
    bounds: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Segments {
        let mut bounds = Vec::with_capacity(lengths.len() + 1);
        bounds.push(0);
        for l in lengths {
            bounds.push(bounds.last().unwrap() + l);
        }
        Segments { bounds }
    }

    /// Validates that bounds start at 0 and strictly increase.
    pub fn from_bounds(bounds: Vec<usize>) -> Result<Segments, NumericError> {
        if bounds.first() != Some(&0) || bounds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(NumericError::Segments(format!("invalid bounds {bounds:?}")));
        }
        Ok(Segments { bounds })
    }

    pub fn bounds(&self) -> &[usize] {
        &self.bounds
    }

    pub fn len(&self) -> usize {
        self.bounds.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total(&self) -> usize {
        *self.bounds.last().unwrap_or(&0)
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.bounds[i]..self.bounds[i + 1]
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.bounds.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Stacks matrices with equal column counts.
pub fn concat_rows(parts: &[Matrix]) -> Result<(Matrix, Segments), NumericError> {
    let first = parts.first().ok_or(NumericError::EmptyShape { rows: 0, cols: 0 })?;
    let cols = first.cols();
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.rows() * cols).sum());
    for p in parts {
        if p.cols() != cols {
            return Err(NumericError::shape("concat_rows", first, p));
        }
        data.extend_from_slice(p.data());
    }
    let lengths: Vec<usize> = parts.iter().map(Matrix::rows).collect();
    let total = lengths.iter().sum();
    Ok((Matrix::from_raw(total, cols, data), Segments::from_lengths(&lengths)))
}

/// Inverse of [`concat_rows`]; also the backward pass of concatenation.
pub fn split_rows(m: &Matrix, segments: &Segments) -> Result<Vec<Matrix>, NumericError> {
    if segments.total() != m.rows() || segments.is_empty() {
        return Err(NumericError::Segments(format!(
            "bounds {:?} do not cover {} rows",
            segments.bounds(),
            m.rows()
        )));
    }
    Ok((0..segments.len())
        .map(|i| {
            let r = segments.range(i);
            m.slice_rows(r.start, r.end)
        })
        .collect())
}

pub fn tanh(m: &Matrix) -> Matrix {
    m.map(f64::tanh)
}

/// Backward of tanh from its output `y`.
pub fn tanh_backward(y: &Matrix, d_y: &Matrix) -> Result<Matrix, NumericError> {
    if y.shape() != d_y.shape() {
        return Err(NumericError::shape("tanh_backward", y, d_y));
    }
    Ok(Matrix::from_fn(y.rows(), y.cols(), |r, c| {
        let t = y.get(r, c);
        d_y.get(r, c) * (1.0 - t * t)
    }))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::{finite_difference_check, GradCheckOptions};
    use crate::numeric::testing::random_matrix;
    use proptest::prelude::*;

    #[test]
    fn identity_matmul() {
        let m = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 4.0, -1.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Matrix::from_rows(&[[5.0], [6.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), Matrix::from_rows(&[[17.0], [39.0]]));
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let a = Matrix::zeros(2, 3);
        let err = matmul(&a, &a).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn transposed_variants_agree() {
        let a = random_matrix(3, 4, 1);
        let b = random_matrix(5, 4, 2);
        let c = random_matrix(3, 2, 3);
        assert!(a.matmul_transposed(&b).unwrap().max_abs_diff(&a.matmul(&b.transpose()).unwrap()) < 1e-14);
        assert!(a.transposed_matmul(&c).unwrap().max_abs_diff(&a.transpose().matmul(&c).unwrap()) < 1e-14);
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let a = random_matrix(3, 3, 11);
        let b = random_matrix(3, 3, 12);
        let weights = random_matrix(3, 3, 13);
        // loss = sum(W ⊙ (A·B)), so dC = W
        let (da, db) = matmul_backward(&a, &b, &weights).unwrap();
        let f = |p: &[Matrix]| {
            let c = p[0].matmul(&p[1]).unwrap();
            c.data().iter().zip(weights.data()).map(|(x, w)| x * w).sum()
        };
        let report = finite_difference_check(f, &[a, b], &[da, db], &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&Matrix::from_rows(&[[0.0, 0.0]]));
        assert_eq!(y.data(), &[0.5, 0.5]);
        for c in [-50.0, 0.0, 3.7, 800.0] {
            let y = softmax_rows(&Matrix::from_rows(&[[c, c + 3f64.ln()]]));
            assert!((y.get(0, 0) - 0.25).abs() < 1e-12);
            assert!((y.get(0, 1) - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let x = random_matrix(3, 4, 21).scale(3.0);
        let weights = random_matrix(3, 4, 22);
        let y = softmax_rows(&x);
        let dx = softmax_rows_backward(&y, &weights).unwrap();
        let f = |p: &[Matrix]| {
            let y = softmax_rows(&p[0]);
            y.data().iter().zip(weights.data()).map(|(a, w)| a * w).sum()
        };
        let report = finite_difference_check(f, &[x], &[dx], &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn mean_pool_examples() {
        let single = Matrix::from_rows(&[[1.5, -2.0]]);
        assert_eq!(mean_pool_rows(&single), single);
        let m = Matrix::from_rows(&[[0.0, 2.0], [2.0, 0.0]]);
        assert_eq!(mean_pool_rows(&m), Matrix::from_rows(&[[1.0, 1.0]]));
    }

    #[test]
    fn mean_pool_backward_matches_finite_differences() {
        let x = random_matrix(4, 3, 31);
        let weights = random_matrix(1, 3, 32);
        let dx = mean_pool_rows_backward(&weights, 4).unwrap();
        let f = |p: &[Matrix]| {
            let y = mean_pool_rows(&p[0]);
            y.data().iter().zip(weights.data()).map(|(a, w)| a * w).sum()
        };
        let report = finite_difference_check(f, &[x], &[dx], &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn concat_examples() {
        let a = random_matrix(3, 4, 41);
        let (m, seg) = concat_rows(std::slice::from_ref(&a)).unwrap();
        assert_eq!(m, a);
        assert_eq!(seg.bounds(), &[0, 3]);

        let (m, seg) = concat_rows(&[Matrix::zeros(2, 5), Matrix::zeros(3, 5)]).unwrap();
        assert_eq!(m.shape(), (5, 5));
        assert_eq!(seg.bounds(), &[0, 2, 5]);

        assert!(concat_rows(&[Matrix::zeros(2, 5), Matrix::zeros(2, 4)]).is_err());
        assert!(split_rows(&m, &Segments::from_lengths(&[2, 2])).is_err());
        assert!(Segments::from_bounds(vec![0, 3, 3]).is_err());
    }

    #[test]
    fn tanh_backward_matches_finite_differences() {
        let x = random_matrix(2, 3, 51);
        let weights = random_matrix(2, 3, 52);
        let dx = tanh_backward(&tanh(&x), &weights).unwrap();
        let f = |p: &[Matrix]| {
            tanh(&p[0]).data().iter().zip(weights.data()).map(|(a, w)| a * w).sum()
        };
        let report = finite_difference_check(f, &[x], &[dx], &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-300);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            rows in 1usize..6, cols in 1usize..7, seed in any::<u64>(), scale in 0.1f64..30.0
        ) {
            let y = softmax_rows(&random_matrix(rows, cols, seed).scale(scale));
            for r in 0..rows {
                let s: f64 = y.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
                prop_assert!(y.row(r).iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn split_inverts_concat(lengths in proptest::collection::vec(1usize..5, 1..6), cols in 1usize..5, seed in any::<u64>()) {
            let parts: Vec<Matrix> = lengths
                .iter()
                .enumerate()
                .map(|(i, &l)| random_matrix(l, cols, seed.wrapping_add(i as u64)))
                .collect();
            let (m, seg) = concat_rows(&parts).unwrap();
            prop_assert_eq!(seg.lengths(), lengths);
            prop_assert_eq!(split_rows(&m, &seg).unwrap(), parts);
        }
    }
}
