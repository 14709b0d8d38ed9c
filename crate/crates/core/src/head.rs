//! Detection head: dense layers with tanh hidden activations, a sigmoid
//! output and binary cross-entropy.

use rand::Rng;

use crate::numeric::{ops, uniform_matrix, Matrix, NumericError, Param};

/// Probability clamp used inside the loss.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// in×out
    pub w: Param,
    /// 1×out
    pub b: Param,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// Hidden layers then the 1-unit output layer.
    pub layers: Vec<DenseLayer>,
}

impl HeadParams {
    /// `sizes` lists every width from input to output, e.g. `[d, d/2, 1]`.
    /// Weights and biases are uniform in ±1/√fan_in.
    pub fn init(sizes: &[usize], rng: &mut impl Rng) -> HeadParams {
        assert!(sizes.len() >= 2 && *sizes.last().unwrap() == 1, "head must end in one unit");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                DenseLayer {
                    w: Param::new(uniform_matrix(w[0], w[1], bound, rng)),
                    b: Param::new(uniform_matrix(1, w[1], bound, rng)),
                }
            })
            .collect();
        HeadParams { layers }
    }

    pub fn zeros(sizes: &[usize]) -> HeadParams {
        HeadParams {
            layers: sizes
                .windows(2)
                .map(|w| DenseLayer {
                    w: Param::new(Matrix::zeros(w[0], w[1])),
                    b: Param::new(Matrix::zeros(1, w[1])),
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.value.rows()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    /// Input to each layer; `inputs[0]` is `X_final`.
    pub inputs: Vec<Matrix>,
    pub logit: f64,
    pub prob: f64,
}

pub fn forward(params: &HeadParams, x: &Matrix) -> Result<HeadCache, NumericError> {
    if x.shape() != (1, params.input_dim()) {
        return Err(NumericError::shape("head input", x, &params.layers[0].w.value));
    }
    let mut inputs = vec![x.clone()];
    let last = params.layers.len() - 1;
    let mut logit = 0.0;
    for (i, layer) in params.layers.iter().enumerate() {
        let z = inputs[i].matmul(&layer.w.value)?.add(&layer.b.value)?;
        if i == last {
            logit = z.get(0, 0);
        } else {
            inputs.push(ops::tanh(&z));
        }
    }
    Ok(HeadCache {
        inputs,
        logit,
        prob: ops::sigmoid(logit),
    })
}

/// Gradients for each layer's (w, b), plus d/dX_final, given d loss/d logit.
pub fn backward(
    params: &HeadParams,
    cache: &HeadCache,
    d_logit: f64,
) -> Result<(Vec<(Matrix, Matrix)>, Matrix), NumericError> {
    let mut grads = vec![(Matrix::zeros(1, 1), Matrix::zeros(1, 1)); params.layers.len()];
    let mut d_z = Matrix::filled(1, 1, d_logit);
    for i in (0..params.layers.len()).rev() {
        let layer = &params.layers[i];
        let input = &cache.inputs[i];
        grads[i] = (input.transposed_matmul(&d_z)?, d_z.clone());
        let d_in = d_z.matmul_transposed(&layer.w.value)?;
        d_z = if i > 0 {
            ops::tanh_backward(input, &d_in)?
        } else {
            d_in
        };
    }
    Ok((grads, d_z))
}

/// `−[y·log ŷ + (1−y)·log(1−ŷ)]` with ŷ clamped to [1e-12, 1−1e-12].
pub fn bce_loss(prob: f64, y: f64) -> f64 {
    let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Loss as a function of the logit; numerically stable for large |z|.
pub fn bce_with_logit(logit: f64, y: f64) -> f64 {
    // log(1 + e^z) − y·z
    let softplus = if logit > 0.0 {
        logit + (-logit).exp().ln_1p()
    } else {
        logit.exp().ln_1p()
    };
    softplus - y * logit
}

/// d loss / d logit = ŷ − y.
pub fn bce_grad_logit(prob: f64, y: f64) -> f64 {
    prob - y
}
