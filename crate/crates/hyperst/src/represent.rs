//! Multi-level representation extractors.
//!
//! * spatial niches: each spot plus its `K-1` nearest neighbors on the
//!   same slide ([`knn_neighbors`]), and niche profiles as member means
//!   ([`niche_gene_profile`]),
//! * a frozen two-layer image-feature encoder adapted by trainable
//!   low-rank factors (`W_new = W + B . A`), standing in for a
//!   LoRA-adapted foundation model over precomputed patch features,
//! * a trainable fully-connected gene-profile encoder shared across the
//!   spot and niche levels.
//!
//! Only adapter factors and the gene network receive gradients; the image
//! base never changes after initialization.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RepresentError {
    #[error("need at least K = {k} spots, got {m}")]
    TooFewSpots { m: usize, k: usize },
    #[error("K must be at least 2, got {0}")]
    BadK(usize),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("adapter rank {r} too large for a {out}x{inp} weight (need 4r <= min dim)")]
    RankTooLarge { r: usize, out: usize, inp: usize },
    #[error("non-finite input")]
    NonFinite,
}

/// One spot's niche: the center plus its `K-1` spatial nearest neighbors,
/// as indices into the slice the niche was built from. Neighbors are
/// ordered by ascending distance, ties broken by ascending spot id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NicheIndex {
    pub center: usize,
    pub neighbors: Vec<usize>,
}

impl NicheIndex {
    /// Total member count, center included.
    pub fn k(&self) -> usize {
        self.neighbors.len() + 1
    }

    /// Center followed by the neighbors.
    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.center).chain(self.neighbors.iter().copied())
    }
}

/// Brute-force K-nearest-neighbors over one slide's spot coordinates (in
/// micrometers). `ids` supplies the deterministic tie-break key for
/// equidistant candidates.
pub fn knn_neighbors<I: Ord>(
    coords: &[[f64; 2]],
    ids: &[I],
    k: usize,
) -> Result<Vec<NicheIndex>, RepresentError> {
    if k < 2 {
        return Err(RepresentError::BadK(k));
    }
    if coords.len() < k {
        return Err(RepresentError::TooFewSpots { m: coords.len(), k });
    }
    if coords.len() != ids.len() {
        return Err(RepresentError::LengthMismatch { left: coords.len(), right: ids.len() });
    }
    if coords.iter().any(|c| !c[0].is_finite() || !c[1].is_finite()) {
        return Err(RepresentError::NonFinite);
    }
    let mut out = Vec::with_capacity(coords.len());
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(coords.len() - 1);
    for (center, cc) in coords.iter().enumerate() {
        candidates.clear();
        for (j, cj) in coords.iter().enumerate() {
            if j == center {
                continue;
            }
            let dx = cc[0] - cj[0];
            let dy = cc[1] - cj[1];
            candidates.push((dx * dx + dy * dy, j));
        }
        candidates.sort_by(|a, b| {
            a.0.partial_cmp(&b.0).expect("finite distances").then(ids[a.1].cmp(&ids[b.1]))
        });
        out.push(NicheIndex {
            center,
            neighbors: candidates[..k - 1].iter().map(|&(_, j)| j).collect(),
        });
    }
    Ok(out)
}

/// Arithmetic mean of the center's profile and its neighbors' profiles.
pub fn niche_gene_profile(
    center: &[f64],
    neighbors: &[&[f64]],
) -> Result<Vec<f64>, RepresentError> {
    let n = center.len();
    for nb in neighbors {
        if nb.len() != n {
            return Err(RepresentError::LengthMismatch { left: n, right: nb.len() });
        }
    }
    let k = (neighbors.len() + 1) as f64;
    let mut out = center.to_vec();
    for nb in neighbors {
        for (o, v) in out.iter_mut().zip(nb.iter()) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= k;
    }
    Ok(out)
}

/// Trainable low-rank factors of a weight update `delta W = B . A` with
/// `B: out x r`, `A: r x in` and `4r <= min(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter {
    pub b_factor: Array2<f64>,
    pub a_factor: Array2<f64>,
}

impl LowRankAdapter {
    /// `A ~ N(0, sigma^2)`, `B = 0`: the adapted network starts exactly at
    /// the frozen base.
    pub fn init<R: Rng>(
        out: usize,
        inp: usize,
        r: usize,
        sigma: f64,
        rng: &mut R,
    ) -> Result<Self, RepresentError> {
        if 4 * r > out.min(inp) {
            return Err(RepresentError::RankTooLarge { r, out, inp });
        }
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        Ok(Self {
            b_factor: Array2::zeros((out, r)),
            a_factor: Array2::from_shape_fn((r, inp), |_| normal.sample(rng)),
        })
    }

    pub fn rank(&self) -> usize {
        self.b_factor.ncols()
    }
}

/// `W + B . A`, leaving `W` untouched.
pub fn low_rank_update(
    w: &Array2<f64>,
    adapter: &LowRankAdapter,
) -> Result<Array2<f64>, RepresentError> {
    let (out, inp) = w.dim();
    if adapter.b_factor.nrows() != out
        || adapter.a_factor.ncols() != inp
        || adapter.b_factor.ncols() != adapter.a_factor.nrows()
    {
        return Err(RepresentError::ShapeMismatch {
            expected: format!("B: {out}xr, A: rx{inp}"),
            got: format!(
                "B: {}x{}, A: {}x{}",
                adapter.b_factor.nrows(),
                adapter.b_factor.ncols(),
                adapter.a_factor.nrows(),
                adapter.a_factor.ncols()
            ),
        });
    }
    Ok(w + &adapter.b_factor.dot(&adapter.a_factor))
}

/// Frozen two-layer image feature map. Weights are `out x in`; biases are
/// `1 x out` row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBase {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl ImageBase {
    pub fn init<R: Rng>(d_in: usize, d: usize, rng: &mut R) -> Self {
        Self {
            w1: xavier(d, d_in, rng),
            b1: Array2::zeros((1, d)),
            w2: xavier(d, d, rng),
            b2: Array2::zeros((1, d)),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.nrows()
    }
}

/// Trainable gene-profile encoder `N -> hidden -> d` with one tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneNet {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl GeneNet {
    pub fn init<R: Rng>(n_genes: usize, hidden: usize, d: usize, rng: &mut R) -> Self {
        Self {
            w1: xavier(hidden, n_genes, rng),
            b1: Array2::zeros((1, hidden)),
            w2: xavier(d, hidden, rng),
            b2: Array2::zeros((1, d)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }
}

/// All encoder parameters. `image_base` is immutable after initialization;
/// among encoder weights only the adapters and the gene network are
/// trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub image_base: ImageBase,
    /// Per-layer adapters; `None` when the layer is not adapted. Layers
    /// gain adapters from the last one backwards.
    pub image_adapters: [Option<LowRankAdapter>; 2],
    pub gene: GeneNet,
}

impl EncoderParams {
    /// Count of adapted layers (0, 1 or 2).
    pub fn adapter_layers(&self) -> usize {
        self.image_adapters.iter().filter(|a| a.is_some()).count()
    }
}

pub(crate) fn xavier<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Array2<f64> {
    let sigma = (2.0 / (out + inp) as f64).sqrt();
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    Array2::from_shape_fn((out, inp), |_| normal.sample(rng))
}

/// One affine layer `X . W^T + b` with an optional low-rank adapter
/// contribution `(X . A^T) . B^T`.
pub(crate) fn affine_adapted(
    x: &Array2<f64>,
    w: &Array2<f64>,
    b: &Array2<f64>,
    adapter: Option<&LowRankAdapter>,
) -> Array2<f64> {
    let mut out = x.dot(&w.t()) + b;
    if let Some(ad) = adapter {
        out += &x.dot(&ad.a_factor.t()).dot(&ad.b_factor.t());
    }
    out
}

/// Batched image path: rows of `x` through the adapted two-layer network.
pub fn encode_image_batch(x: &Array2<f64>, params: &EncoderParams) -> Array2<f64> {
    let base = &params.image_base;
    let h = affine_adapted(x, &base.w1, &base.b1, params.image_adapters[0].as_ref())
        .mapv(f64::tanh);
    affine_adapted(&h, &base.w2, &base.b2, params.image_adapters[1].as_ref())
}

/// Batched gene path: rows of `y` through the shared gene network.
pub fn encode_gene_batch(y: &Array2<f64>, params: &EncoderParams) -> Array2<f64> {
    let g = &params.gene;
    let h = (y.dot(&g.w1.t()) + &g.b1).mapv(f64::tanh);
    h.dot(&g.w2.t()) + &g.b2
}

fn one_row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

/// Encode a spot-level and a niche-level feature vector through the same
/// adapted image network.
pub fn encode_image(
    feat_spot: &[f64],
    feat_niche: &[f64],
    params: &EncoderParams,
) -> Result<(Vec<f64>, Vec<f64>), RepresentError> {
    let d_in = params.image_base.feature_dim();
    for f in [feat_spot, feat_niche] {
        if f.len() != d_in {
            return Err(RepresentError::ShapeMismatch {
                expected: format!("feature of length {d_in}"),
                got: format!("{}", f.len()),
            });
        }
    }
    let i_s = encode_image_batch(&one_row(feat_spot), params);
    let i_n = encode_image_batch(&one_row(feat_niche), params);
    Ok((i_s.row(0).to_vec(), i_n.row(0).to_vec()))
}

/// Encode spot-level and niche-level gene profiles through the shared
/// gene network. Inputs are preprocessed (log-transformed) vectors.
pub fn encode_gene(
    y_s: &[f64],
    y_n: &[f64],
    params: &EncoderParams,
) -> Result<(Vec<f64>, Vec<f64>), RepresentError> {
    let n = params.gene.input_dim();
    for y in [y_s, y_n] {
        if y.len() != n {
            return Err(RepresentError::ShapeMismatch {
                expected: format!("gene vector of length {n}"),
                got: format!("{}", y.len()),
            });
        }
    }
    let g_s = encode_gene_batch(&one_row(y_s), params);
    let g_n = encode_gene_batch(&one_row(y_n), params);
    Ok((g_s.row(0).to_vec(), g_n.row(0).to_vec()))
}
