//! Forward kernels and their hand-derived backward passes.
//!
//! Each kernel is a pure function. The backward functions take the upstream
//! gradient `dy` and return gradients for every input and parameter; the
//! autodiff tape in [`super::tape`] just wires these together.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{PgatError, Result};

/// Default epsilon for [`masked_layer_norm`].
pub const NORM_EPSILON: f64 = 1e-5;

/// Affine layer `y = W x + b`, applied column by column.
///
/// Generic so the same shape can hold parameter values, gradients, or tape
/// handles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    /// out × in
    pub weight: T,
    /// out × 1
    pub bias: T,
}

pub type LinearParams = Linear<Matrix>;

impl Linear<Matrix> {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Scale/shift of a masked normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedNorm<T> {
    pub gamma: T,
    pub beta: T,
    pub epsilon: f64,
}

pub type MaskedNormParams = MaskedNorm<Matrix>;

impl MaskedNorm<Matrix> {
    /// Unit scale, zero shift.
    pub fn identity(features: usize) -> Self {
        MaskedNorm {
            gamma: Matrix::filled(features, 1, 1.0),
            beta: Matrix::zeros(features, 1),
            epsilon: NORM_EPSILON,
        }
    }
}

pub fn linear_forward(params: &LinearParams, x: &Matrix) -> Result<Matrix> {
    if params.bias.shape() != (params.out_dim(), 1) {
        return Err(PgatError::dim(format!(
            "bias {:?} for a layer with {} outputs",
            params.bias.shape(),
            params.out_dim()
        )));
    }
    if x.rows() != params.in_dim() {
        return Err(PgatError::dim(format!(
            "linear layer expects {} input rows, got {}",
            params.in_dim(),
            x.rows()
        )));
    }
    let mut y = params.weight.matmul(x)?;
    add_column_bias(&mut y, &params.bias);
    Ok(y)
}

/// Gradients of a linear layer.
#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub weight: Matrix,
    pub bias: Matrix,
    pub input: Matrix,
}

pub fn linear_backward(params: &LinearParams, x: &Matrix, dy: &Matrix) -> Result<LinearGrads> {
    Ok(LinearGrads {
        weight: dy.matmul_nt(x)?,
        bias: row_sums(dy),
        input: params.weight.matmul_tn(dy)?,
    })
}

pub(crate) fn add_column_bias(y: &mut Matrix, bias: &Matrix) {
    for r in 0..y.rows() {
        let b = bias[(r, 0)];
        y.row_mut(r).iter_mut().for_each(|v| *v += b);
    }
}

pub(crate) fn row_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), 1);
    for r in 0..m.rows() {
        out[(r, 0)] = m.row(r).iter().sum();
    }
    out
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = dy.clone();
    for (d, v) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
        if *v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Saved statistics of a [`masked_layer_norm`] forward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    /// Standardized input; zero in masked-out columns.
    pub x_hat: Matrix,
    /// `1 / sqrt(var + eps)` per feature row.
    pub inv_std: Vec<f64>,
    pub valid: usize,
}

/// Per-feature normalization over the valid node columns.
///
/// Mean and variance of each row are taken over columns whose mask entry is
/// `true`; masked-out columns of the output are zero and never read.
pub fn masked_layer_norm(x: &Matrix, mask: &[bool], params: &MaskedNormParams) -> Result<Matrix> {
    masked_layer_norm_cached(x, mask, params).map(|(y, _)| y)
}

pub fn masked_layer_norm_cached(
    x: &Matrix,
    mask: &[bool],
    params: &MaskedNormParams,
) -> Result<(Matrix, NormCache)> {
    check_mask(x, mask)?;
    let features = x.rows();
    if params.gamma.shape() != (features, 1) || params.beta.shape() != (features, 1) {
        return Err(PgatError::dim(format!(
            "norm parameters sized {:?}/{:?} for {features} features",
            params.gamma.shape(),
            params.beta.shape()
        )));
    }
    if !(params.epsilon > 0.0) {
        return Err(PgatError::Input("norm epsilon must be positive".into()));
    }
    let valid = mask.iter().filter(|m| **m).count();
    if valid == 0 {
        return Err(PgatError::Degenerate(
            "masked normalization over an all-padding mask".into(),
        ));
    }
    let n = valid as f64;
    let mut y = Matrix::zeros(features, x.cols());
    let mut x_hat = Matrix::zeros(features, x.cols());
    let mut inv_std = Vec::with_capacity(features);
    for e in 0..features {
        let row = x.row(e);
        let mut mean = 0.0;
        for (v, _) in row.iter().zip(mask).filter(|(_, m)| **m) {
            mean += v;
        }
        mean /= n;
        let mut var = 0.0;
        for (v, _) in row.iter().zip(mask).filter(|(_, m)| **m) {
            var += (v - mean) * (v - mean);
        }
        var /= n;
        let istd = 1.0 / (var + params.epsilon).sqrt();
        inv_std.push(istd);
        let (g, b) = (params.gamma[(e, 0)], params.beta[(e, 0)]);
        for j in 0..x.cols() {
            if mask[j] {
                let h = (row[j] - mean) * istd;
                x_hat[(e, j)] = h;
                y[(e, j)] = g * h + b;
            }
        }
    }
    Ok((y, NormCache { x_hat, inv_std, valid }))
}

#[derive(Clone, Debug)]
pub struct NormGrads {
    pub input: Matrix,
    pub gamma: Matrix,
    pub beta: Matrix,
}

pub fn masked_layer_norm_backward(
    cache: &NormCache,
    gamma: &Matrix,
    mask: &[bool],
    dy: &Matrix,
) -> NormGrads {
    let (features, cols) = dy.shape();
    let n = cache.valid as f64;
    let mut dx = Matrix::zeros(features, cols);
    let mut dgamma = Matrix::zeros(features, 1);
    let mut dbeta = Matrix::zeros(features, 1);
    for e in 0..features {
        let g = gamma[(e, 0)];
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for j in (0..cols).filter(|j| mask[*j]) {
            let d = dy[(e, j)];
            sum_dy += d;
            sum_dy_xhat += d * cache.x_hat[(e, j)];
        }
        dbeta[(e, 0)] = sum_dy;
        dgamma[(e, 0)] = sum_dy_xhat;
        let mean_dy = sum_dy / n;
        let mean_dy_xhat = sum_dy_xhat / n;
        let k = g * cache.inv_std[e];
        for j in (0..cols).filter(|j| mask[*j]) {
            dx[(e, j)] = k * (dy[(e, j)] - mean_dy - cache.x_hat[(e, j)] * mean_dy_xhat);
        }
    }
    NormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

/// Row-wise softmax over the sender columns whose mask entry is `true`.
///
/// Masked columns come out exactly zero. Rows are stabilized by subtracting
/// the row maximum over unmasked entries.
pub fn masked_softmax(scores: &Matrix, sender_mask: &[bool]) -> Result<Matrix> {
    check_mask(scores, sender_mask)?;
    if !sender_mask.iter().any(|m| *m) {
        return Err(PgatError::Degenerate("every sender is masked".into()));
    }
    let mut out = Matrix::zeros(scores.rows(), scores.cols());
    for r in 0..scores.rows() {
        let row = scores.row(r);
        let max = row
            .iter()
            .zip(sender_mask)
            .filter(|(_, m)| **m)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let dst = out.row_mut(r);
        let mut total = 0.0;
        for j in 0..row.len() {
            if sender_mask[j] {
                let e = (row[j] - max).exp();
                dst[j] = e;
                total += e;
            }
        }
        dst.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

/// Softmax backward from the forward output `attn`.
pub fn masked_softmax_backward(attn: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(attn.rows(), attn.cols());
    for r in 0..attn.rows() {
        let a = attn.row(r);
        let d = dy.row(r);
        let dot: f64 = a.iter().zip(d).map(|(x, y)| x * y).sum();
        for (o, (ai, di)) in dx.row_mut(r).iter_mut().zip(a.iter().zip(d)) {
            *o = ai * (di - dot);
        }
    }
    dx
}

/// Smallest column norm accepted by [`normalize_columns`].
pub const MIN_COLUMN_NORM: f64 = 1e-12;

/// Scales every column to unit L2 norm. Returns the normalized matrix and
/// the original norms.
pub fn normalize_columns(x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.cols());
    for j in 0..x.cols() {
        let norm = (0..x.rows()).map(|i| x[(i, j)] * x[(i, j)]).sum::<f64>().sqrt();
        if !(norm >= MIN_COLUMN_NORM) {
            return Err(PgatError::Degenerate(format!(
                "descriptor column {j} has norm {norm:e}"
            )));
        }
        for i in 0..x.rows() {
            out[(i, j)] /= norm;
        }
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Backward of [`normalize_columns`], given its output `unit` and norms.
pub fn normalize_columns_backward(unit: &Matrix, norms: &[f64], dy: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(unit.rows(), unit.cols());
    for j in 0..unit.cols() {
        let dot: f64 = (0..unit.rows()).map(|i| unit[(i, j)] * dy[(i, j)]).sum();
        for i in 0..unit.rows() {
            dx[(i, j)] = (dy[(i, j)] - unit[(i, j)] * dot) / norms[j];
        }
    }
    dx
}

fn check_mask(x: &Matrix, mask: &[bool]) -> Result<()> {
    if mask.len() != x.cols() {
        return Err(PgatError::dim(format!(
            "mask of length {} for {} columns",
            mask.len(),
            x.cols()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check::central_difference;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_linear(p: &LinearParams, x: &Matrix) -> Matrix {
        let mut y = Matrix::zeros(p.out_dim(), x.cols());
        for i in 0..p.out_dim() {
            for j in 0..x.cols() {
                let mut acc = p.bias[(i, 0)];
                for k in 0..p.in_dim() {
                    acc += p.weight[(i, k)] * x[(k, j)];
                }
                y[(i, j)] = acc;
            }
        }
        y
    }

    #[test]
    fn linear_identity_and_scaled_cases() {
        let id = Linear {
            weight: Matrix::identity(2),
            bias: Matrix::zeros(2, 1),
        };
        let x = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(linear_forward(&id, &x).unwrap(), x);

        let two = Linear {
            weight: Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 2.0]]),
            bias: Matrix::column(&[1.0, 1.0]),
        };
        let y = linear_forward(&two, &Matrix::column(&[1.0, 1.0])).unwrap();
        assert_eq!(y, Matrix::column(&[3.0, 3.0]));
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = Linear {
            weight: Matrix::random_uniform(4, 3, 1.0, &mut rng),
            bias: Matrix::random_uniform(4, 1, 1.0, &mut rng),
        };
        let x = Matrix::random_uniform(3, 5, 1.0, &mut rng);
        let y = linear_forward(&p, &x).unwrap();
        assert!(y.max_abs_diff(&naive_linear(&p, &x)) < 1e-12);
    }

    #[test]
    fn linear_rejects_wrong_input_rows() {
        let p = Linear {
            weight: Matrix::zeros(2, 3),
            bias: Matrix::zeros(2, 1),
        };
        assert!(matches!(
            linear_forward(&p, &Matrix::zeros(2, 1)),
            Err(PgatError::Dimension(_))
        ));
    }

    #[test]
    fn two_point_standardization() {
        let x = Matrix::from_rows(&[&[1.0, 3.0], &[1.0, 3.0]]);
        let y = masked_layer_norm(&x, &[true, true], &MaskedNorm::identity(2)).unwrap();
        for e in 0..2 {
            assert!((y[(e, 0)] + 1.0).abs() < 1e-5);
            assert!((y[(e, 1)] - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn padding_column_is_ignored_bit_for_bit() {
        let x = Matrix::from_rows(&[&[1.0, 3.0], &[0.5, -2.0]]);
        let padded = Matrix::from_rows(&[&[1.0, 3.0, 1e6], &[0.5, -2.0, -7.25]]);
        let p = MaskedNorm::identity(2);
        let a = masked_layer_norm(&x, &[true, true], &p).unwrap();
        let b = masked_layer_norm(&padded, &[true, true, false], &p).unwrap();
        for e in 0..2 {
            for j in 0..2 {
                assert_eq!(a[(e, j)].to_bits(), b[(e, j)].to_bits());
            }
            assert_eq!(b[(e, 2)], 0.0);
        }
    }

    #[test]
    fn valid_outputs_have_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::random_uniform(4, 6, 3.0, &mut rng);
        let mask = [true, false, true, true, false, true];
        let y = masked_layer_norm(&x, &mask, &MaskedNorm::identity(4)).unwrap();
        for e in 0..4 {
            let mean: f64 = (0..6).filter(|j| mask[*j]).map(|j| y[(e, j)]).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn all_false_mask_is_degenerate() {
        let x = Matrix::zeros(2, 2);
        assert!(matches!(
            masked_layer_norm(&x, &[false, false], &MaskedNorm::identity(2)),
            Err(PgatError::Degenerate(_))
        ));
        assert!(matches!(
            masked_softmax(&x, &[false, false]),
            Err(PgatError::Degenerate(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let u = masked_softmax(&Matrix::from_rows(&[&[0.0, 0.0, 0.0]]), &[true; 3]).unwrap();
        for v in u.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let m = masked_softmax(&Matrix::from_rows(&[&[10.0, 0.0, 0.0]]), &[true, true, false]).unwrap();
        assert_eq!(m[(0, 2)], 0.0);
        assert!((m[(0, 0)] + m[(0, 1)] - 1.0).abs() < 1e-15);

        let big = masked_softmax(&Matrix::from_rows(&[&[1000.0, 1001.0]]), &[true, true]).unwrap();
        assert!(big.is_finite());
        // log-domain: w0 = 1/(1+e), w1 = e/(1+e)
        let e = std::f64::consts::E;
        assert!((big[(0, 0)] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((big[(0, 1)] / big[(0, 0)] - e).abs() < 1e-12);
    }

    fn check_kernel_gradient(
        seed: u64,
        x: &Matrix,
        forward: impl Fn(&Matrix) -> Matrix,
        backward: impl Fn(&Matrix, &Matrix) -> Matrix,
    ) -> f64 {
        // Random linear functional of the output makes a scalar loss.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y0 = forward(x);
        let probe = Matrix::random_uniform(y0.rows(), y0.cols(), 1.0, &mut rng);
        let loss = |m: &Matrix| -> f64 {
            forward(m).as_slice().iter().zip(probe.as_slice()).map(|(a, b)| a * b).sum()
        };
        let analytic = backward(x, &probe);
        let numeric = central_difference(
            |v: &[f64]| Ok(loss(&Matrix::from_vec(x.rows(), x.cols(), v.to_vec()).unwrap())),
            x.as_slice(),
            1e-5,
        )
        .unwrap();
        analytic
            .as_slice()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
            .fold(0.0, f64::max)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn kernel_gradients_match_finite_differences(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = vec![true, true, false, true, true];
            let x = Matrix::random_uniform(3, 5, 2.0, &mut rng);
            let norm = MaskedNorm {
                gamma: Matrix::random_uniform(3, 1, 1.5, &mut rng),
                beta: Matrix::random_uniform(3, 1, 1.0, &mut rng),
                epsilon: NORM_EPSILON,
            };

            let err = check_kernel_gradient(
                seed,
                &x,
                |m| masked_layer_norm(m, &mask, &norm).unwrap(),
                |m, dy| {
                    let (_, cache) = masked_layer_norm_cached(m, &mask, &norm).unwrap();
                    masked_layer_norm_backward(&cache, &norm.gamma, &mask, dy).input
                },
            );
            prop_assert!(err < 1e-4, "masked norm input grad err {err}");

            let err = check_kernel_gradient(
                seed,
                &x,
                |m| masked_softmax(m, &mask).unwrap(),
                |m, dy| masked_softmax_backward(&masked_softmax(m, &mask).unwrap(), dy),
            );
            prop_assert!(err < 1e-4, "softmax grad err {err}");

            let err = check_kernel_gradient(
                seed,
                &x,
                |m| normalize_columns(m).unwrap().0,
                |m, dy| {
                    let (u, n) = normalize_columns(m).unwrap();
                    normalize_columns_backward(&u, &n, dy)
                },
            );
            prop_assert!(err < 1e-4, "normalize grad err {err}");

            let lin = Linear {
                weight: Matrix::random_uniform(4, 3, 1.0, &mut rng),
                bias: Matrix::random_uniform(4, 1, 1.0, &mut rng),
            };
            let err = check_kernel_gradient(
                seed,
                &x,
                |m| linear_forward(&lin, m).unwrap(),
                |m, dy| linear_backward(&lin, m, dy).unwrap().input,
            );
            prop_assert!(err < 1e-4, "linear input grad err {err}");

            // parameter gradients: treat gamma and the weight as the variable
            let err = check_kernel_gradient(
                seed,
                &norm.gamma,
                |g| {
                    let p = MaskedNorm { gamma: g.clone(), ..norm.clone() };
                    masked_layer_norm(&x, &mask, &p).unwrap()
                },
                |g, dy| {
                    let p = MaskedNorm { gamma: g.clone(), ..norm.clone() };
                    let (_, cache) = masked_layer_norm_cached(&x, &mask, &p).unwrap();
                    masked_layer_norm_backward(&cache, g, &mask, dy).gamma
                },
            );
            prop_assert!(err < 1e-4, "gamma grad err {err}");

            let err = check_kernel_gradient(
                seed,
                &lin.weight,
                |w| linear_forward(&Linear { weight: w.clone(), bias: lin.bias.clone() }, &x).unwrap(),
                |w, dy| linear_backward(&Linear { weight: w.clone(), bias: lin.bias.clone() }, &x, dy).unwrap().weight,
            );
            prop_assert!(err < 1e-4, "weight grad err {err}");
        }

        #[test]
        fn softmax_rows_are_distributions(
            values in proptest::collection::vec(-50.0f64..50.0, 12),
            mask_bits in proptest::collection::vec(any::<bool>(), 4),
        ) {
            let mut mask = mask_bits.clone();
            mask[0] = true;
            let s = Matrix::from_vec(3, 4, values).unwrap();
            let a = masked_softmax(&s, &mask).unwrap();
            for r in 0..3 {
                let total: f64 = a.row(r).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                for (j, v) in a.row(r).iter().enumerate() {
                    prop_assert!((0.0..=1.0).contains(v));
                    if !mask[j] {
                        prop_assert_eq!(*v, 0.0);
                    }
                }
            }
        }
    }
}
