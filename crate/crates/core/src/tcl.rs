//! Two-stage single-head attention: within-theme correlation (stage 1) and
//! cross-theme correlation over the concatenated sequence (stage 2).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::{
    concat_rows, softmax_rows, softmax_rows_backward, split_rows, uniform_matrix, Matrix,
    NumericError, Param, Segments,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Within one theme.
    Stage1,
    /// Across the concatenated themes.
    Stage2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub stage: Stage,
}

impl AttentionParams {
    pub fn from_matrices(wq: Matrix, wk: Matrix, wv: Matrix, stage: Stage) -> Result<Self, NumericError> {
        let d = wq.rows();
        for w in [&wq, &wk, &wv] {
            if w.shape() != (d, d) {
                return Err(NumericError::shape("attention params", &wq, w));
            }
        }
        Ok(AttentionParams {
            wq: Param::new(wq),
            wk: Param::new(wk),
            wv: Param::new(wv),
            stage,
        })
    }

    /// Entries uniform in ±1/√d.
    pub fn init(d: usize, stage: Stage, rng: &mut impl Rng) -> AttentionParams {
        let b = 1.0 / (d as f64).sqrt();
        let wq = uniform_matrix(d, d, b, rng);
        let wk = uniform_matrix(d, d, b, rng);
        let wv = uniform_matrix(d, d, b, rng);
        AttentionParams::from_matrices(wq, wk, wv, stage).expect("square")
    }

    pub fn dim(&self) -> usize {
        self.wq.value.rows()
    }

    pub fn params_mut(&mut self) -> [&mut Param; 3] {
        [&mut self.wq, &mut self.wk, &mut self.wv]
    }

    pub fn params(&self) -> [&Param; 3] {
        [&self.wq, &self.wk, &self.wv]
    }

    fn check(&self, x: &Matrix) -> Result<(), NumericError> {
        if x.cols() != self.dim() {
            return Err(NumericError::shape("attention input", x, &self.wq.value));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

impl AttentionGrads {
    pub fn zeros(d: usize) -> AttentionGrads {
        AttentionGrads {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
        }
    }

    pub fn add_assign(&mut self, other: &AttentionGrads) -> Result<(), NumericError> {
        self.wq.add_assign(&other.wq)?;
        self.wk.add_assign(&other.wk)?;
        self.wv.add_assign(&other.wv)
    }
}

/// Intermediate values of one correlate call, kept for backward and export.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelateCache {
    pub x: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Attention map `A`, L×L.
    pub a: Matrix,
    pub y: Matrix,
}

/// `A = softmax((X·W_Q)(X·W_K)ᵀ / √d)`.
pub fn correlation_matrix(x: &Matrix, params: &AttentionParams) -> Result<Matrix, NumericError> {
    Ok(correlate_forward(x, params)?.a)
}

/// `A(X)·X·W_V`.
pub fn correlate(x: &Matrix, params: &AttentionParams) -> Result<Matrix, NumericError> {
    Ok(correlate_forward(x, params)?.y)
}

pub fn correlate_forward(x: &Matrix, params: &AttentionParams) -> Result<CorrelateCache, NumericError> {
    params.check(x)?;
    let scale = 1.0 / (params.dim() as f64).sqrt();
    let q = x.matmul(&params.wq.value)?;
    let k = x.matmul(&params.wk.value)?;
    let v = x.matmul(&params.wv.value)?;
    let a = softmax_rows(&q.matmul_transposed(&k)?.scale(scale));
    let y = a.matmul(&v)?;
    Ok(CorrelateCache {
        x: x.clone(),
        q,
        k,
        v,
        a,
        y,
    })
}

/// Returns `dX` and the parameter gradients for upstream gradient `dY`.
pub fn correlate_backward(
    cache: &CorrelateCache,
    params: &AttentionParams,
    d_y: &Matrix,
) -> Result<(Matrix, AttentionGrads), NumericError> {
    if d_y.shape() != cache.y.shape() {
        return Err(NumericError::shape("correlate_backward", &cache.y, d_y));
    }
    let scale = 1.0 / (params.dim() as f64).sqrt();
    let x = &cache.x;
    // Y = A·V
    let d_a = d_y.matmul_transposed(&cache.v)?;
    let d_v = cache.a.transposed_matmul(d_y)?;
    // S = Q·Kᵀ·scale, A = softmax(S)
    let d_s = softmax_rows_backward(&cache.a, &d_a)?.scale(scale);
    let d_q = d_s.matmul(&cache.k)?;
    let d_k = d_s.transposed_matmul(&cache.q)?;
    let grads = AttentionGrads {
        wq: x.transposed_matmul(&d_q)?,
        wk: x.transposed_matmul(&d_k)?,
        wv: x.transposed_matmul(&d_v)?,
    };
    let mut d_x = d_q.matmul_transposed(&params.wq.value)?;
    d_x.add_assign(&d_k.matmul_transposed(&params.wk.value)?)?;
    d_x.add_assign(&d_v.matmul_transposed(&params.wv.value)?)?;
    Ok((d_x, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Output {
    pub caches: Vec<CorrelateCache>,
}

impl Stage1Output {
    pub fn outputs(&self) -> Vec<Matrix> {
        self.caches.iter().map(|c| c.y.clone()).collect()
    }
}

/// Applies `correlate` to each theme with shared parameters.
pub fn stage1(themes: &[Matrix], params: &AttentionParams) -> Result<Stage1Output, NumericError> {
    let caches = themes
        .iter()
        .map(|x| correlate_forward(x, params))
        .collect::<Result<_, _>>()?;
    Ok(Stage1Output { caches })
}

pub fn stage1_backward(
    out: &Stage1Output,
    params: &AttentionParams,
    d_outputs: &[Matrix],
) -> Result<(Vec<Matrix>, AttentionGrads), NumericError> {
    let mut grads = AttentionGrads::zeros(params.dim());
    let mut d_xs = Vec::with_capacity(d_outputs.len());
    for (cache, d) in out.caches.iter().zip(d_outputs) {
        let (d_x, g) = correlate_backward(cache, params, d)?;
        grads.add_assign(&g)?;
        d_xs.push(d_x);
    }
    Ok((d_xs, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Output {
    pub segments: Segments,
    pub cache: CorrelateCache,
}

impl Stage2Output {
    /// Per-theme rows of the cross-theme output.
    pub fn resplit(&self) -> Result<Vec<Matrix>, NumericError> {
        resplit(&self.cache.y, &self.segments)
    }

    pub fn theme_affinity(&self) -> Matrix {
        theme_affinity(&self.cache.a, &self.segments)
    }
}

/// Concatenates the per-theme inputs and correlates across them.
pub fn stage2(inputs: &[Matrix], params: &AttentionParams) -> Result<Stage2Output, NumericError> {
    let (x, segments) = concat_rows(inputs)?;
    let cache = correlate_forward(&x, params)?;
    Ok(Stage2Output { segments, cache })
}

/// Takes per-theme gradients of the resplit output and returns per-theme
/// gradients of the stage-2 inputs.
pub fn stage2_backward(
    out: &Stage2Output,
    params: &AttentionParams,
    d_parts: &[Matrix],
) -> Result<(Vec<Matrix>, AttentionGrads), NumericError> {
    let (d_y, segs) = concat_rows(d_parts)?;
    if segs != out.segments {
        return Err(NumericError::Segments("gradient segments differ from forward".into()));
    }
    let (d_x, grads) = correlate_backward(&out.cache, params, &d_y)?;
    Ok((split_rows(&d_x, &out.segments)?, grads))
}

/// Inverse of the stage-2 concatenation.
pub fn resplit(m: &Matrix, segments: &Segments) -> Result<Vec<Matrix>, NumericError> {
    split_rows(m, segments)
}

/// k×k theme affinity from an attention map over concatenated segments:
/// entry (i, j) is the attention mass that rows of segment i place on
/// segment j, averaged over those rows. Rows sum to 1.
pub fn theme_affinity(a: &Matrix, segments: &Segments) -> Matrix {
    let k = segments.len();
    Matrix::from_fn(k, k, |i, j| {
        let (ri, rj) = (segments.range(i), segments.range(j));
        let n = ri.len() as f64;
        ri.map(|r| a.row(r)[rj.clone()].iter().sum::<f64>()).sum::<f64>() / n
    })
}

/// k×k block means `mean(A[seg_i, seg_j])`, unnormalized.
pub fn block_means(a: &Matrix, segments: &Segments) -> Matrix {
    let k = segments.len();
    Matrix::from_fn(k, k, |i, j| {
        let (ri, rj) = (segments.range(i), segments.range(j));
        let n = (ri.len() * rj.len()) as f64;
        ri.map(|r| a.row(r)[rj.clone()].iter().sum::<f64>()).sum::<f64>() / n
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_difference_check, random_matrix, GradCheckOptions};

    fn params(d: usize, seed: u64) -> AttentionParams {
        AttentionParams::from_matrices(
            random_matrix(d, d, seed),
            random_matrix(d, d, seed + 1),
            random_matrix(d, d, seed + 2),
            Stage::Stage1,
        )
        .unwrap()
    }

    #[test]
    fn single_token_and_zero_scores() {
        let p = params(4, 1);
        let a = correlation_matrix(&random_matrix(1, 4, 9), &p).unwrap();
        assert_eq!(a, Matrix::from_rows(&[[1.0]]));

        let zero = AttentionParams::from_matrices(
            Matrix::zeros(4, 4),
            Matrix::zeros(4, 4),
            Matrix::identity(4),
            Stage::Stage1,
        )
        .unwrap();
        let x = random_matrix(3, 4, 5);
        let a = correlation_matrix(&x, &zero).unwrap();
        assert!(a.data().iter().all(|v| (*v - 1.0 / 3.0).abs() < 1e-15));
        let y = correlate(&x, &zero).unwrap();
        let mean = crate::numeric::mean_pool_rows(&x);
        for r in 0..3 {
            for c in 0..4 {
                assert!((y.get(r, c) - mean.get(0, c)).abs() < 1e-15);
            }
        }

        let wv0 = AttentionParams::from_matrices(
            random_matrix(4, 4, 1),
            random_matrix(4, 4, 2),
            Matrix::zeros(4, 4),
            Stage::Stage1,
        )
        .unwrap();
        assert!(correlate(&x, &wv0).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hand_oracle_two_tokens() {
        let p = AttentionParams::from_matrices(
            Matrix::identity(2),
            Matrix::identity(2),
            Matrix::identity(2),
            Stage::Stage1,
        )
        .unwrap();
        let a = correlation_matrix(&Matrix::identity(2), &p).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let hi = s.exp() / (s.exp() + 1.0);
        assert!((a.get(0, 0) - hi).abs() < 1e-15);
        assert!((a.get(0, 1) - (1.0 - hi)).abs() < 1e-15);
        assert!((a.get(1, 1) - hi).abs() < 1e-15);
    }

    #[test]
    fn correlate_matches_triple_loop() {
        let p = params(4, 3);
        let x = random_matrix(3, 4, 4);
        let y = correlate(&x, &p).unwrap();
        let d = 4;
        let mul = |a: &Matrix, b: &Matrix| {
            let mut out = vec![vec![0.0; b.cols()]; a.rows()];
            for i in 0..a.rows() {
                for j in 0..b.cols() {
                    for k in 0..a.cols() {
                        out[i][j] += a.get(i, k) * b.get(k, j);
                    }
                }
            }
            out
        };
        let q = mul(&x, &p.wq.value);
        let k = mul(&x, &p.wk.value);
        let v = mul(&x, &p.wv.value);
        for i in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for c in 0..d {
                let want: f64 = (0..3).map(|j| scores[j].exp() / z * v[j][c]).sum();
                assert!((y.get(i, c) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn correlate_gradcheck() {
        let p = params(5, 11);
        let x = random_matrix(4, 5, 12);
        let g = random_matrix(4, 5, 13);
        let cache = correlate_forward(&x, &p).unwrap();
        let (d_x, grads) = correlate_backward(&cache, &p, &g).unwrap();
        let loss = |m: &[Matrix]| {
            let p = AttentionParams::from_matrices(m[1].clone(), m[2].clone(), m[3].clone(), Stage::Stage1)
                .unwrap();
            let y = correlate(&m[0], &p).unwrap();
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let report = finite_difference_check(
            loss,
            &[x.clone(), p.wq.value.clone(), p.wk.value.clone(), p.wv.value.clone()],
            &[d_x, grads.wq, grads.wk, grads.wv],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn stage_compositions() {
        let p1 = params(4, 20);
        let p2 = params(4, 30);
        let themes: Vec<Matrix> = (0..5).map(|i| random_matrix(i % 3 + 1, 4, 40 + i as u64)).collect();
        let s1 = stage1(&themes, &p1).unwrap();
        for (x, y) in themes.iter().zip(s1.outputs()) {
            assert_eq!(correlate(x, &p1).unwrap(), y);
        }
        let s2 = stage2(&s1.outputs(), &p2).unwrap();
        let (cat, _) = concat_rows(&s1.outputs()).unwrap();
        assert_eq!(s2.cache.y, correlate(&cat, &p2).unwrap());
        let parts = s2.resplit().unwrap();
        for (part, x) in parts.iter().zip(&themes) {
            assert_eq!(part.shape(), x.shape());
        }
        let aff = s2.theme_affinity();
        assert_eq!(aff.shape(), (5, 5));
        for r in 0..5 {
            assert!((aff.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let same: Vec<Matrix> = (0..5).map(|_| themes[1].clone()).collect();
        let outs = stage1(&same, &p1).unwrap().outputs();
        assert!(outs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn stage2_block_permutation_equivariance() {
        let p = params(4, 50);
        let themes: Vec<Matrix> = (0..5).map(|i| random_matrix(i + 1, 4, 60 + i as u64)).collect();
        let perm = [3, 0, 4, 1, 2];
        let permuted: Vec<Matrix> = perm.iter().map(|&i| themes[i].clone()).collect();
        let a = stage2(&themes, &p).unwrap().resplit().unwrap();
        let b = stage2(&permuted, &p).unwrap().resplit().unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!(a[i].max_abs_diff(&b[k]) < 1e-12);
        }
    }
}
