//! Alignment objectives in hyperbolic space.
//!
//! Three pieces:
//!
//! * a batch InfoNCE loss whose similarity is the negative Lorentzian
//!   geodesic distance ([`info_nce_hyperbolic`]),
//! * the four-term hierarchical contrastive composite ([`hca_loss`]),
//! * the four-term hierarchical entailment composite ([`hea_loss`]),
//!   which penalizes children that leave their parent's entailment cone.
//!
//! The contrastive loss intentionally deviates from a literal reading of
//! its source: similarities are negative distances and the positive pair
//! is included in the denominator, which keeps the loss bounded below and
//! minimized when each positive pair is closer than every in-batch
//! negative. The literal variant (positive distances as similarities,
//! positive pair excluded from the denominator) stays available as
//! [`InfoNceVariant::Inverted`] for comparison.

use ndarray::Array2;
use thiserror::Error;

use crate::hypgeom::{
    entailment_penalty, exp_map_origin, lorentz_distance, Curvature, GeomError, LorentzPoint,
};
use crate::tape::{Tape, TensorId};

/// Lower clamp applied to the temperature after each optimizer step.
pub const TAU_MIN: f64 = 0.01;
/// Upper clamp applied to the temperature after each optimizer step.
pub const TAU_MAX: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("contrastive batch needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("embedding arrays must share one length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error(transparent)]
    Geometry(#[from] GeomError),
}

/// Softmax temperature, parameterized as `tau = exp(log_tau)`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Temperature {
    log_tau: f64,
}

impl Temperature {
    pub fn from_tau(tau: f64) -> Result<Self, AlignError> {
        if !tau.is_finite() || tau <= 0.0 {
            return Err(AlignError::Geometry(GeomError::NonFinite));
        }
        Ok(Self { log_tau: tau.ln() })
    }

    pub fn from_log_tau(log_tau: f64) -> Self {
        Self { log_tau }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn log_tau(&self) -> f64 {
        self.log_tau
    }

    /// Clamp `log_tau` so that `tau` stays in `[TAU_MIN, TAU_MAX]`.
    pub fn clamped(self) -> Self {
        Self { log_tau: self.log_tau.clamp(TAU_MIN.ln(), TAU_MAX.ln()) }
    }
}

/// Which InfoNCE reading to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum InfoNceVariant {
    /// Similarity is the negative distance; the positive pair is part of
    /// the denominator. Bounded below, standard behavior. Default.
    Standard,
    /// Similarity is the positive distance and the positive pair is
    /// excluded from the denominator. Rewards large positive-pair
    /// distances; kept only for comparison runs.
    Inverted,
}

/// Denominator membership of the positive pair in the softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Denominator {
    AllPairs,
    ExcludeDiagonal,
}

/// The four embedding sets of one batch projected onto a shared
/// hyperboloid: spot/niche image embeddings and spot/niche gene
/// embeddings.
#[derive(Clone, Debug)]
pub struct HyperbolicBatch {
    pub i_s: Vec<LorentzPoint>,
    pub i_n: Vec<LorentzPoint>,
    pub g_s: Vec<LorentzPoint>,
    pub g_n: Vec<LorentzPoint>,
}

impl HyperbolicBatch {
    /// Validates equal lengths, a shared curvature and a shared dimension.
    pub fn new(
        i_s: Vec<LorentzPoint>,
        i_n: Vec<LorentzPoint>,
        g_s: Vec<LorentzPoint>,
        g_n: Vec<LorentzPoint>,
    ) -> Result<Self, AlignError> {
        let b = i_s.len();
        if b == 0 {
            return Err(AlignError::BatchTooSmall(0));
        }
        for arr in [&i_n, &g_s, &g_n] {
            if arr.len() != b {
                return Err(AlignError::LengthMismatch { left: b, right: arr.len() });
            }
        }
        let cur = i_s[0].curvature();
        let dim = i_s[0].dim();
        for p in i_s.iter().chain(&i_n).chain(&g_s).chain(&g_n) {
            if p.curvature() != cur {
                return Err(AlignError::Geometry(GeomError::CurvatureMismatch {
                    left: cur.c(),
                    right: p.curvature().c(),
                }));
            }
            if p.dim() != dim {
                return Err(AlignError::Geometry(GeomError::DimensionMismatch {
                    left: dim,
                    right: p.dim(),
                }));
            }
        }
        Ok(Self { i_s, i_n, g_s, g_n })
    }

    pub fn len(&self) -> usize {
        self.i_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.i_s.is_empty()
    }
}

/// Project the four Euclidean embedding matrices (rows are samples) onto
/// the hyperboloid with curvature `c`.
pub fn project_batch(
    i_s: &Array2<f64>,
    i_n: &Array2<f64>,
    g_s: &Array2<f64>,
    g_n: &Array2<f64>,
    curvature: Curvature,
) -> Result<HyperbolicBatch, AlignError> {
    let project = |m: &Array2<f64>| -> Vec<LorentzPoint> {
        m.rows().into_iter().map(|r| exp_map_origin(r.as_slice().unwrap(), curvature)).collect()
    };
    HyperbolicBatch::new(project(i_s), project(i_n), project(g_s), project(g_n))
}

/// Shared softmax cross-entropy core. `sim` holds similarities (larger
/// means more similar); row `i`'s positive sits at column `i`. Returns the
/// loss and the row-softmax matrix (zeroed outside the denominator set).
pub(crate) fn info_nce_core(sim: &Array2<f64>, tau: f64, denom: Denominator) -> (f64, Array2<f64>) {
    let b = sim.nrows();
    debug_assert_eq!(b, sim.ncols());
    let mut softmax = Array2::zeros((b, b));
    let mut loss = 0.0;
    for i in 0..b {
        let mut max = f64::NEG_INFINITY;
        for j in 0..b {
            if denom == Denominator::ExcludeDiagonal && j == i {
                continue;
            }
            max = max.max(sim[[i, j]] / tau);
        }
        let mut z = 0.0;
        for j in 0..b {
            if denom == Denominator::ExcludeDiagonal && j == i {
                continue;
            }
            z += ((sim[[i, j]] / tau) - max).exp();
        }
        let lse = max + z.ln();
        loss += lse - sim[[i, i]] / tau;
        for j in 0..b {
            if denom == Denominator::ExcludeDiagonal && j == i {
                continue;
            }
            softmax[[i, j]] = ((sim[[i, j]] / tau) - lse).exp();
        }
    }
    (loss / b as f64, softmax)
}

fn distance_matrix(
    anchors: &[LorentzPoint],
    targets: &[LorentzPoint],
) -> Result<Array2<f64>, AlignError> {
    let b = anchors.len();
    if targets.len() != b {
        return Err(AlignError::LengthMismatch { left: b, right: targets.len() });
    }
    let mut d = Array2::zeros((b, b));
    for i in 0..b {
        for j in 0..b {
            d[[i, j]] = lorentz_distance(&anchors[i], &targets[j])?;
        }
    }
    Ok(d)
}

/// Batch InfoNCE over hyperbolic embeddings; `anchors[i]` is positively
/// paired with `targets[i]`, all other targets in the batch act as
/// negatives. Requires `B >= 2`.
pub fn info_nce_hyperbolic(
    anchors: &[LorentzPoint],
    targets: &[LorentzPoint],
    tau: Temperature,
    variant: InfoNceVariant,
) -> Result<f64, AlignError> {
    if anchors.len() < 2 {
        return Err(AlignError::BatchTooSmall(anchors.len()));
    }
    let d = distance_matrix(anchors, targets)?;
    let (sim, denom) = match variant {
        InfoNceVariant::Standard => (-&d, Denominator::AllPairs),
        InfoNceVariant::Inverted => (d.clone(), Denominator::ExcludeDiagonal),
    };
    Ok(info_nce_core(&sim, tau.tau(), denom).0)
}

/// Hierarchical contrastive alignment: the mean of four InfoNCE terms —
/// both directions at spot level plus the two niche-to-spot cross-modal
/// terms. Spot-to-niche anchoring is deliberately omitted: one spot-level
/// feature may legitimately match several niche-level features in a batch.
pub fn hca_loss(
    batch: &HyperbolicBatch,
    tau: Temperature,
    variant: InfoNceVariant,
) -> Result<f64, AlignError> {
    let t1 = info_nce_hyperbolic(&batch.i_s, &batch.g_s, tau, variant)?;
    let t2 = info_nce_hyperbolic(&batch.g_s, &batch.i_s, tau, variant)?;
    let t3 = info_nce_hyperbolic(&batch.g_n, &batch.i_s, tau, variant)?;
    let t4 = info_nce_hyperbolic(&batch.i_n, &batch.g_s, tau, variant)?;
    Ok(0.25 * (t1 + t2 + t3 + t4))
}

/// Which HEA terms to keep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeaTerms {
    /// All four: spot entails niche per modality, image entails gene per
    /// level.
    All,
    /// Only the spot-entails-niche terms; the image-gene terms are
    /// dropped and the normalizer becomes 1/2.
    SpotNicheOnly,
}

/// Hierarchical entailment alignment: mean over the batch of the cone
/// penalties, averaged over the kept terms. Parents and children per
/// term: image spot -> image niche, gene spot -> gene niche, image spot
/// -> gene spot, image niche -> gene niche.
pub fn hea_loss_terms(batch: &HyperbolicBatch, terms: HeaTerms) -> Result<f64, AlignError> {
    let mean_pen = |parents: &[LorentzPoint], children: &[LorentzPoint]| -> Result<f64, AlignError> {
        let mut acc = 0.0;
        for (p, c) in parents.iter().zip(children) {
            acc += entailment_penalty(p, c)?;
        }
        Ok(acc / parents.len() as f64)
    };
    let t1 = mean_pen(&batch.i_s, &batch.i_n)?;
    let t2 = mean_pen(&batch.g_s, &batch.g_n)?;
    match terms {
        HeaTerms::SpotNicheOnly => Ok(0.5 * (t1 + t2)),
        HeaTerms::All => {
            let t3 = mean_pen(&batch.i_s, &batch.g_s)?;
            let t4 = mean_pen(&batch.i_n, &batch.g_n)?;
            Ok(0.25 * (t1 + t2 + t3 + t4))
        }
    }
}

/// [`hea_loss_terms`] with all four terms.
pub fn hea_loss(batch: &HyperbolicBatch) -> Result<f64, AlignError> {
    hea_loss_terms(batch, HeaTerms::All)
}

// ---------------------------------------------------------------------------
// Fused tape operations.
// ---------------------------------------------------------------------------

impl Tape {
    /// InfoNCE over a similarity matrix (larger = more similar, positive
    /// pairs on the diagonal), differentiable in the similarities and in
    /// `log_tau`.
    pub fn info_nce(&mut self, sim: TensorId, log_tau: TensorId, denom: Denominator) -> TensorId {
        let sv = self.value(sim).clone();
        let b = sv.nrows();
        assert!(b >= 2, "contrastive batch needs at least 2 rows");
        assert_eq!(b, sv.ncols(), "similarity matrix must be square");
        let tau = self.scalar(log_tau).exp();
        let (loss, softmax) = info_nce_core(&sv, tau, denom);
        self.push(
            Array2::from_elem((1, 1), loss),
            vec![sim, log_tau],
            Some(Box::new(move |grad| {
                let g = grad[[0, 0]];
                let bf = b as f64;
                let mut ds = &softmax * (g / (bf * tau));
                let mut diag_sim = 0.0;
                let mut weighted_sim = 0.0;
                for i in 0..b {
                    ds[[i, i]] -= g / (bf * tau);
                    diag_sim += sv[[i, i]];
                    for j in 0..b {
                        weighted_sim += softmax[[i, j]] * sv[[i, j]];
                    }
                }
                let d_log_tau = g * (diag_sim - weighted_sim) / (bf * tau);
                vec![ds, Array2::from_elem((1, 1), d_log_tau)]
            })),
        )
    }

    /// Pairwise cosine similarities between rows of `a` and rows of `b`,
    /// with norms floored at 1e-12.
    pub fn cosine_matrix(&mut self, a: TensorId, b: TensorId) -> TensorId {
        const NORM_FLOOR: f64 = 1e-12;
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        assert_eq!(av.ncols(), bv.ncols(), "cosine_matrix width mismatch");
        let row_norms = |m: &Array2<f64>| -> Vec<f64> {
            m.rows().into_iter().map(|r| r.dot(&r).sqrt().max(NORM_FLOOR)).collect()
        };
        let na = row_norms(&av);
        let nb = row_norms(&bv);
        let mut a_hat = av.clone();
        for (i, n) in na.iter().enumerate() {
            a_hat.row_mut(i).mapv_inplace(|x| x / n);
        }
        let mut b_hat = bv.clone();
        for (j, n) in nb.iter().enumerate() {
            b_hat.row_mut(j).mapv_inplace(|x| x / n);
        }
        let cos = a_hat.dot(&b_hat.t());
        let cos_saved = cos.clone();
        self.push(
            cos,
            vec![a, b],
            Some(Box::new(move |grad| {
                let gb_hat = grad.dot(&b_hat); // (B1 x d)
                let ga_hat = grad.t().dot(&a_hat); // (B2 x d)
                let mut da = Array2::zeros(a_hat.dim());
                let mut db = Array2::zeros(b_hat.dim());
                for i in 0..a_hat.nrows() {
                    let row_weight: f64 =
                        (0..cos_saved.ncols()).map(|j| grad[[i, j]] * cos_saved[[i, j]]).sum();
                    for k in 0..a_hat.ncols() {
                        da[[i, k]] = (gb_hat[[i, k]] - row_weight * a_hat[[i, k]]) / na[i];
                    }
                }
                for j in 0..b_hat.nrows() {
                    let col_weight: f64 =
                        (0..cos_saved.nrows()).map(|i| grad[[i, j]] * cos_saved[[i, j]]).sum();
                    for k in 0..b_hat.ncols() {
                        db[[j, k]] = (ga_hat[[j, k]] - col_weight * b_hat[[j, k]]) / nb[j];
                    }
                }
                vec![da, db]
            })),
        )
    }
}
