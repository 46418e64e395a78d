//! Cosine similarity, probability mapping and the masked BCE loss.

use crate::error::{PgatError, Result};
use crate::numerics::kernels::normalize_columns;
use crate::numerics::{Graph, Matrix, Var};
use crate::pose_graph::PairLabels;

/// Clamp applied to probabilities before taking logs.
pub const PROBABILITY_EPSILON: f64 = 1e-7;

/// Cosine similarities between the columns of two descriptor matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix(pub Matrix);

/// `0.5 s + 0.5`, read as the probability that two keynodes are the same place.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMatrix(pub Matrix);

/// `s_ij = ⟨f_i, f_j⟩ / (‖f_i‖ ‖f_j‖)` for columns of `fa` (E×N) and `fb` (E×M).
pub fn similarity_matrix(fa: &Matrix, fb: &Matrix) -> Result<SimilarityMatrix> {
    if fa.rows() != fb.rows() {
        return Err(PgatError::dim(format!(
            "descriptor dims {} and {} differ",
            fa.rows(),
            fb.rows()
        )));
    }
    let (ua, _) = normalize_columns(fa)?;
    let (ub, _) = normalize_columns(fb)?;
    Ok(SimilarityMatrix(ua.matmul_tn(&ub)?))
}

/// Records the similarity computation on a tape.
pub fn similarity_on_graph(g: &mut Graph<'_>, fa: Var, fb: Var) -> Result<Var> {
    let ua = g.normalize_columns(fa)?;
    let ub = g.normalize_columns(fb)?;
    g.matmul_tn(ua, ub)
}

pub fn to_probability(s: &SimilarityMatrix) -> ProbabilityMatrix {
    ProbabilityMatrix(s.0.map(|v| v * 0.5 + 0.5))
}

/// Summed loss plus the number of pairs that contributed to it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BceLoss {
    pub loss: f64,
    pub active_pairs: usize,
}

impl BceLoss {
    pub fn mean(&self) -> f64 {
        if self.active_pairs == 0 {
            0.0
        } else {
            self.loss / self.active_pairs as f64
        }
    }
}

/// `−Σ ω (y log p̃ + (1−y) log(1−p̃))` with `p̃` clamped to `[1e-7, 1 − 1e-7]`.
pub fn weighted_bce(p: &ProbabilityMatrix, labels: &PairLabels) -> Result<BceLoss> {
    check_label_shapes(&p.0, labels)?;
    let mut loss = 0.0;
    for ((prob, y), w) in p.0.as_slice().iter().zip(labels.y.as_slice()).zip(labels.omega.as_slice()) {
        if *w == 0.0 {
            continue;
        }
        let pc = prob.clamp(PROBABILITY_EPSILON, 1.0 - PROBABILITY_EPSILON);
        loss -= w * (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
    }
    Ok(BceLoss {
        loss,
        active_pairs: labels.active_pairs(),
    })
}

/// Loss and `dL/ds` computed straight from a similarity matrix.
///
/// Clamped entries get a zero gradient, matching the derivative of the clamp.
pub(crate) fn bce_from_similarity(s: &Matrix, y: &Matrix, omega: &Matrix) -> Result<(f64, Matrix)> {
    if s.shape() != y.shape() || s.shape() != omega.shape() {
        return Err(PgatError::dim(format!(
            "similarity {:?} vs labels {:?} / weights {:?}",
            s.shape(),
            y.shape(),
            omega.shape()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(s.rows(), s.cols());
    for (k, ((sv, yv), wv)) in s
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .zip(omega.as_slice())
        .enumerate()
    {
        if *wv == 0.0 {
            continue;
        }
        let p = sv * 0.5 + 0.5;
        let pc = p.clamp(PROBABILITY_EPSILON, 1.0 - PROBABILITY_EPSILON);
        loss -= wv * (yv * pc.ln() + (1.0 - yv) * (1.0 - pc).ln());
        if pc == p {
            let dp = -wv * (yv / pc - (1.0 - yv) / (1.0 - pc));
            grad.as_mut_slice()[k] = 0.5 * dp;
        }
    }
    Ok((loss, grad))
}

fn check_label_shapes(p: &Matrix, labels: &PairLabels) -> Result<()> {
    if p.shape() != labels.y.shape() || p.shape() != labels.omega.shape() {
        return Err(PgatError::dim(format!(
            "probabilities {:?} vs labels {:?}",
            p.shape(),
            labels.y.shape()
        )));
    }
    Ok(())
}
