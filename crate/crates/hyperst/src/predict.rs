//! Gene decoder: maps the concatenated spot- and niche-level image
//! embeddings to a spot-level expression prediction in log space, plus the
//! squared-error prediction loss.
//!
//! Decoding runs on the Euclidean embeddings, not on their hyperbolic
//! projections; the hyperbolic space only shapes the embeddings through
//! the alignment losses.

use ndarray::Array2;
use thiserror::Error;

use crate::represent::xavier;
use rand::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum PredictError {
    #[error("decoder input width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: (usize, usize), right: (usize, usize) },
}

/// Which embeddings feed the decoder. The unused level is replaced by
/// zeros, so the corresponding first-layer block receives zero gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderInput {
    Spot,
    Niche,
    Both,
}

impl std::fmt::Display for DecoderInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecoderInput::Spot => write!(f, "spot"),
            DecoderInput::Niche => write!(f, "niche"),
            DecoderInput::Both => write!(f, "both"),
        }
    }
}

impl std::str::FromStr for DecoderInput {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spot" => Ok(DecoderInput::Spot),
            "niche" => Ok(DecoderInput::Niche),
            "both" => Ok(DecoderInput::Both),
            other => Err(format!("unknown decoder input '{other}' (spot|niche|both)")),
        }
    }
}

/// Two-layer decoder `2d -> hidden -> N` with one tanh. Weights are
/// `out x in`, biases `1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl DecoderParams {
    pub fn init<R: Rng>(embed_dim: usize, hidden: usize, n_genes: usize, rng: &mut R) -> Self {
        Self {
            w1: xavier(hidden, 2 * embed_dim, rng),
            b1: Array2::zeros((1, hidden)),
            w2: xavier(n_genes, hidden, rng),
            b2: Array2::zeros((1, n_genes)),
        }
    }

    /// Concatenated input width, `2d`.
    pub fn input_width(&self) -> usize {
        self.w1.ncols()
    }

    pub fn n_genes(&self) -> usize {
        self.w2.nrows()
    }
}

/// Apply the decoder-input ablation by zeroing the unused level.
pub fn apply_input_mode(
    i_s: &Array2<f64>,
    i_n: &Array2<f64>,
    mode: DecoderInput,
) -> (Array2<f64>, Array2<f64>) {
    match mode {
        DecoderInput::Both => (i_s.clone(), i_n.clone()),
        DecoderInput::Spot => (i_s.clone(), Array2::zeros(i_n.dim())),
        DecoderInput::Niche => (Array2::zeros(i_s.dim()), i_n.clone()),
    }
}

/// Batched decode: rows are spots, inputs concatenated as `[I_s | I_n]`.
pub fn predict_expression_batch(
    i_s: &Array2<f64>,
    i_n: &Array2<f64>,
    params: &DecoderParams,
) -> Result<Array2<f64>, PredictError> {
    let width = i_s.ncols() + i_n.ncols();
    if width != params.input_width() {
        return Err(PredictError::WidthMismatch { expected: params.input_width(), got: width });
    }
    let b = i_s.nrows();
    let mut cat = Array2::zeros((b, width));
    cat.slice_mut(ndarray::s![.., ..i_s.ncols()]).assign(i_s);
    cat.slice_mut(ndarray::s![.., i_s.ncols()..]).assign(i_n);
    let h = (cat.dot(&params.w1.t()) + &params.b1).mapv(f64::tanh);
    Ok(h.dot(&params.w2.t()) + &params.b2)
}

/// Decode one spot from its two embedding vectors, spot level first.
pub fn predict_expression(
    i_s: &[f64],
    i_n: &[f64],
    params: &DecoderParams,
) -> Result<Vec<f64>, PredictError> {
    let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row");
    let out = predict_expression_batch(&row(i_s), &row(i_n), params)?;
    Ok(out.row(0).to_vec())
}

/// Mean over the batch of the squared L2 gene-residual norm:
/// `(1/B) * sum_i ||pred_i - truth_i||^2`.
pub fn prediction_loss(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64, PredictError> {
    if pred.dim() != truth.dim() {
        return Err(PredictError::ShapeMismatch { left: pred.dim(), right: truth.dim() });
    }
    let diff = pred - truth;
    Ok(diff.iter().map(|x| x * x).sum::<f64>() / pred.nrows() as f64)
}
