//! Parameter store, total objective, optimizer, training loop and the
//! gradient-check harness.
//!
//! The total objective is `L = L_pred + alpha * (L_HCA + beta * L_HEA)`,
//! assembled as a computation graph on a [`Tape`] so that every trainable
//! scalar receives an analytic reverse-mode gradient. Optimization uses
//! Adam with decoupled weight decay (matrices only) and a cosine learning
//! rate schedule over the planned step count.
//!
//! Determinism: all randomness flows through ChaCha streams derived from
//! the run seed (one stream per purpose, one per epoch for batch
//! shuffling), arithmetic is sequential `f64`, and trainable parameters
//! are enumerated in one documented order — identical seed and config
//! give bit-identical checkpoints and history.
//!
//! Trainable group order: `image.adapter1.{a,b}`, `image.adapter2.{a,b}`
//! (as configured), `gene.{w1,b1,w2,b2}`, `decoder.{w1,b1,w2,b2}`,
//! `geom.log_c`, `align.log_tau`. The frozen image base is serialized but
//! never trained.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::align::{AlignError, Denominator, InfoNceVariant, Temperature, TAU_MAX, TAU_MIN};
use crate::checkpoint::{self, CheckpointError, ParamGroup};
use crate::data::{derive_seed, DataError, Prepared, PreparedSplit};
use crate::hypgeom::{Curvature, GeomError};
use crate::metrics::{MetricsError, MetricsReport};
use crate::predict::{
    apply_input_mode, predict_expression_batch, DecoderInput, DecoderParams, PredictError,
};
use crate::represent::{
    encode_image_batch, EncoderParams, GeneNet, ImageBase, LowRankAdapter, RepresentError,
};
use crate::tape::{ClampEvents, Tape, TensorId};

/// Seed of the frozen image base; fixed so that every run shares the same
/// stand-in backbone, the way a pretrained model would be shared.
pub const FROZEN_BASE_SEED: u64 = 0xBA5E_BA5E;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Represent(#[from] RepresentError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at epoch {epoch}; aborted at the last finite state")]
    Divergence { epoch: usize, last: Box<TrainOutput> },
}

/// Ablation switches of the objective and the decoder input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AblationFlags {
    /// Drop the entailment composite entirely.
    pub no_hea: bool,
    /// Drop only the image-gene entailment terms (keep spot-niche),
    /// renormalizing to 1/2.
    pub no_gi_hea: bool,
    /// Drop the contrastive composite.
    pub no_hca: bool,
    /// Replace hyperbolic alignment by cosine InfoNCE on the Euclidean
    /// embeddings (no entailment term exists in this mode).
    pub euclidean_mode: bool,
    /// Which embeddings feed the decoder.
    pub decoder_input: DecoderInput,
    /// Use the inverted InfoNCE reading (positive distances as
    /// similarities, positive pair excluded from the denominator).
    pub inverted_nce: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            no_hea: false,
            no_gi_hea: false,
            no_hca: false,
            euclidean_mode: false,
            decoder_input: DecoderInput::Both,
            inverted_nce: false,
        }
    }
}

impl AblationFlags {
    pub fn hca_enabled(&self) -> bool {
        !self.no_hca
    }

    pub fn hea_enabled(&self) -> bool {
        !self.no_hea && !self.euclidean_mode
    }
}

/// Training hyperparameters and model dimensions.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    /// Weight of the alignment losses in the total objective.
    pub alpha: f64,
    /// Weight of the entailment composite inside the alignment term.
    pub beta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Shared embedding dimension `d`.
    pub embed_dim: usize,
    pub gene_hidden: usize,
    pub decoder_hidden: usize,
    pub adapter_rank: usize,
    /// How many of the two image layers carry adapters (filled from the
    /// last layer backwards): 0, 1 or 2.
    pub adapter_layers: usize,
    /// Niche size K (center plus K-1 neighbors).
    pub knn_k: usize,
    pub n_panel_genes: usize,
    pub tau_init: f64,
    pub curvature_init: f64,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.2,
            batch_size: 128,
            epochs: 20,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            embed_dim: 32,
            gene_hidden: 512,
            decoder_hidden: 512,
            adapter_rank: 4,
            adapter_layers: 2,
            knn_k: 7,
            n_panel_genes: 200,
            tau_init: 0.07,
            curvature_init: 1.0,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(TrainError::Config("alpha and beta must be >= 0".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2".into()));
        }
        if self.adapter_layers > 2 {
            return Err(TrainError::Config("adapter_layers must be 0, 1 or 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if !(self.tau_init > 0.0 && self.curvature_init > 0.0) {
            return Err(TrainError::Config("tau_init and curvature_init must be positive".into()));
        }
        if self.knn_k < 2 {
            return Err(TrainError::Config("knn_k must be at least 2".into()));
        }
        Ok(())
    }
}

/// All model parameters. `encoder.image_base` is frozen; everything else
/// trains.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    /// `1x1`: log of the curvature magnitude.
    pub log_c: Array2<f64>,
    /// `1x1`: log of the contrastive temperature.
    pub log_tau: Array2<f64>,
}

/// Name and decay policy of one trainable group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupSpec {
    pub name: &'static str,
    pub decay: bool,
}

const ADAPTER_SPECS: [[GroupSpec; 2]; 2] = [
    [
        GroupSpec { name: "image.adapter1.a", decay: true },
        GroupSpec { name: "image.adapter1.b", decay: true },
    ],
    [
        GroupSpec { name: "image.adapter2.a", decay: true },
        GroupSpec { name: "image.adapter2.b", decay: true },
    ],
];

const DENSE_SPECS: [GroupSpec; 10] = [
    GroupSpec { name: "gene.w1", decay: true },
    GroupSpec { name: "gene.b1", decay: false },
    GroupSpec { name: "gene.w2", decay: true },
    GroupSpec { name: "gene.b2", decay: false },
    GroupSpec { name: "decoder.w1", decay: true },
    GroupSpec { name: "decoder.b1", decay: false },
    GroupSpec { name: "decoder.w2", decay: true },
    GroupSpec { name: "decoder.b2", decay: false },
    GroupSpec { name: "geom.log_c", decay: false },
    GroupSpec { name: "align.log_tau", decay: false },
];

const FROZEN_NAMES: [&str; 4] =
    ["image.base.w1", "image.base.b1", "image.base.w2", "image.base.b2"];

impl ModelParams {
    /// Initialize from the config: a frozen image base shared across all
    /// runs, zero-product adapters, Xavier gene and decoder nets,
    /// `c = curvature_init`, `tau = tau_init`.
    pub fn init(config: &TrainConfig, feature_dim: usize, n_genes: usize) -> Result<Self, TrainError> {
        config.validate()?;
        let d = config.embed_dim;
        let mut base_rng = ChaCha8Rng::seed_from_u64(FROZEN_BASE_SEED);
        let image_base = ImageBase::init(feature_dim, d, &mut base_rng);

        let mut adapter_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 11));
        let mut image_adapters: [Option<LowRankAdapter>; 2] = [None, None];
        // adapters fill from the last layer backwards
        let adapted: &[usize] = match config.adapter_layers {
            0 => &[],
            1 => &[1],
            _ => &[0, 1],
        };
        for &layer in adapted {
            let inp = if layer == 0 { feature_dim } else { d };
            image_adapters[layer] =
                Some(LowRankAdapter::init(d, inp, config.adapter_rank, 0.01, &mut adapter_rng)?);
        }

        let mut gene_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 12));
        let gene = GeneNet::init(n_genes, config.gene_hidden, d, &mut gene_rng);
        let mut dec_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 13));
        let decoder = DecoderParams::init(d, config.decoder_hidden, n_genes, &mut dec_rng);

        Ok(Self {
            encoder: EncoderParams { image_base, image_adapters, gene },
            decoder,
            log_c: Array2::from_elem((1, 1), config.curvature_init.ln()),
            log_tau: Array2::from_elem((1, 1), config.tau_init.ln()),
        })
    }

    pub fn curvature(&self) -> Curvature {
        Curvature::from_log_c(self.log_c[[0, 0]]).expect("finite log_c")
    }

    pub fn temperature(&self) -> Temperature {
        Temperature::from_log_tau(self.log_tau[[0, 0]])
    }

    /// Trainable group specs in the stable documented order.
    pub fn trainable_specs(&self) -> Vec<GroupSpec> {
        let mut out = Vec::new();
        for (layer, specs) in ADAPTER_SPECS.iter().enumerate() {
            if self.encoder.image_adapters[layer].is_some() {
                out.extend_from_slice(specs);
            }
        }
        out.extend_from_slice(&DENSE_SPECS);
        out
    }

    /// Trainable tensors aligned with [`Self::trainable_specs`].
    pub fn trainable(&self) -> Vec<&Array2<f64>> {
        let mut out: Vec<&Array2<f64>> = Vec::new();
        for ad in self.encoder.image_adapters.iter().flatten() {
            out.push(&ad.a_factor);
            out.push(&ad.b_factor);
        }
        out.extend([
            &self.encoder.gene.w1,
            &self.encoder.gene.b1,
            &self.encoder.gene.w2,
            &self.encoder.gene.b2,
            &self.decoder.w1,
            &self.decoder.b1,
            &self.decoder.w2,
            &self.decoder.b2,
            &self.log_c,
            &self.log_tau,
        ]);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> = Vec::new();
        let [ad0, ad1] = &mut self.encoder.image_adapters;
        for ad in [ad0, ad1].into_iter().flatten() {
            out.push(&mut ad.a_factor);
            out.push(&mut ad.b_factor);
        }
        out.extend([
            &mut self.encoder.gene.w1,
            &mut self.encoder.gene.b1,
            &mut self.encoder.gene.w2,
            &mut self.encoder.gene.b2,
            &mut self.decoder.w1,
            &mut self.decoder.b1,
            &mut self.decoder.w2,
            &mut self.decoder.b2,
            &mut self.log_c,
            &mut self.log_tau,
        ]);
        out
    }

    /// Total trainable scalar count.
    pub fn n_trainable(&self) -> usize {
        self.trainable().iter().map(|a| a.len()).sum()
    }

    /// All groups (frozen base first, then trainables) for serialization.
    pub fn to_groups(&self) -> Vec<ParamGroup> {
        let base = &self.encoder.image_base;
        let mut groups = vec![
            ParamGroup::matrix(FROZEN_NAMES[0], &base.w1),
            ParamGroup::matrix(FROZEN_NAMES[1], &base.b1),
            ParamGroup::matrix(FROZEN_NAMES[2], &base.w2),
            ParamGroup::matrix(FROZEN_NAMES[3], &base.b2),
        ];
        for (spec, arr) in self.trainable_specs().iter().zip(self.trainable()) {
            groups.push(ParamGroup::matrix(spec.name, arr));
        }
        groups
    }

    /// Rebuild from checkpoint groups.
    pub fn from_groups(groups: &[ParamGroup]) -> Result<Self, TrainError> {
        let mat = |name: &str| -> Result<Array2<f64>, TrainError> {
            Ok(checkpoint::find(groups, name)?.to_matrix()?)
        };
        let image_base = ImageBase {
            w1: mat(FROZEN_NAMES[0])?,
            b1: mat(FROZEN_NAMES[1])?,
            w2: mat(FROZEN_NAMES[2])?,
            b2: mat(FROZEN_NAMES[3])?,
        };
        let mut image_adapters: [Option<LowRankAdapter>; 2] = [None, None];
        for (layer, specs) in ADAPTER_SPECS.iter().enumerate() {
            if groups.iter().any(|g| g.name == specs[0].name) {
                image_adapters[layer] = Some(LowRankAdapter {
                    a_factor: mat(specs[0].name)?,
                    b_factor: mat(specs[1].name)?,
                });
            }
        }
        let gene = GeneNet {
            w1: mat("gene.w1")?,
            b1: mat("gene.b1")?,
            w2: mat("gene.w2")?,
            b2: mat("gene.b2")?,
        };
        let decoder = DecoderParams {
            w1: mat("decoder.w1")?,
            b1: mat("decoder.b1")?,
            w2: mat("decoder.w2")?,
            b2: mat("decoder.b2")?,
        };
        Ok(Self {
            encoder: EncoderParams { image_base, image_adapters, gene },
            decoder,
            log_c: mat("geom.log_c")?,
            log_tau: mat("align.log_tau")?,
        })
    }
}

/// One training batch, rows aligned across the four matrices.
#[derive(Clone, Debug)]
pub struct BatchData {
    pub feat_spot: Array2<f64>,
    pub feat_niche: Array2<f64>,
    pub y_spot: Array2<f64>,
    pub y_niche: Array2<f64>,
}

impl BatchData {
    pub fn gather(split: &PreparedSplit, rows: &[usize]) -> Self {
        let take = |m: &Array2<f64>| {
            Array2::from_shape_fn((rows.len(), m.ncols()), |(i, j)| m[[rows[i], j]])
        };
        Self {
            feat_spot: take(&split.feat_spot),
            feat_niche: take(&split.feat_niche),
            y_spot: take(&split.y_spot),
            y_niche: take(&split.y_niche),
        }
    }

    pub fn len(&self) -> usize {
        self.y_spot.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss values of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub pred: f64,
    pub hca: f64,
    pub hea: f64,
}

struct LossGraph {
    /// Tensor ids of the trainable groups, aligned with `trainable_specs`.
    param_ids: Vec<TensorId>,
    total: TensorId,
    pred: TensorId,
    hca: Option<TensorId>,
    hea: Option<TensorId>,
}

/// Image path on the tape: two affine layers with optional adapters, tanh
/// between them. Base weights enter as constants, adapters as the given
/// parameter leaves.
fn image_path(
    tape: &mut Tape,
    x: TensorId,
    base: [TensorId; 4],
    adapters: [Option<(TensorId, TensorId)>; 2],
) -> TensorId {
    let mut h = tape.matmul_nt(x, base[0]);
    h = tape.add_row(h, base[1]);
    if let Some((a, b)) = adapters[0] {
        let t = tape.matmul_nt(x, a);
        let t = tape.matmul_nt(t, b);
        h = tape.add(h, t);
    }
    let h = tape.tanh(h);
    let mut out = tape.matmul_nt(h, base[2]);
    out = tape.add_row(out, base[3]);
    if let Some((a, b)) = adapters[1] {
        let t = tape.matmul_nt(h, a);
        let t = tape.matmul_nt(t, b);
        out = tape.add(out, t);
    }
    out
}

fn dense_path(tape: &mut Tape, x: TensorId, w1: TensorId, b1: TensorId, w2: TensorId, b2: TensorId) -> TensorId {
    let h = tape.matmul_nt(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.tanh(h);
    let out = tape.matmul_nt(h, w2);
    tape.add_row(out, b2)
}

fn build_graph(
    tape: &mut Tape,
    batch: &BatchData,
    params: &ModelParams,
    config: &TrainConfig,
) -> Result<LossGraph, TrainError> {
    let flags = &config.ablation;
    let b = batch.len();
    if b < 2 {
        return Err(AlignError::BatchTooSmall(b).into());
    }

    // constants
    let x_s = tape.input(batch.feat_spot.clone());
    let x_n = tape.input(batch.feat_niche.clone());
    let y_s_in = tape.input(batch.y_spot.clone());
    let y_n_in = tape.input(batch.y_niche.clone());
    let base = &params.encoder.image_base;
    let base_ids = [
        tape.input(base.w1.clone()),
        tape.input(base.b1.clone()),
        tape.input(base.w2.clone()),
        tape.input(base.b2.clone()),
    ];

    // trainable leaves, in spec order
    let mut param_ids = Vec::new();
    let mut adapter_ids: [Option<(TensorId, TensorId)>; 2] = [None, None];
    for (layer, slot) in adapter_ids.iter_mut().enumerate() {
        if let Some(ad) = &params.encoder.image_adapters[layer] {
            let a = tape.input(ad.a_factor.clone());
            let bf = tape.input(ad.b_factor.clone());
            param_ids.push(a);
            param_ids.push(bf);
            *slot = Some((a, bf));
        }
    }
    let gene = &params.encoder.gene;
    let g_ids =
        [gene.w1.clone(), gene.b1.clone(), gene.w2.clone(), gene.b2.clone()].map(|m| tape.input(m));
    let dec = &params.decoder;
    let d_ids =
        [dec.w1.clone(), dec.b1.clone(), dec.w2.clone(), dec.b2.clone()].map(|m| tape.input(m));
    param_ids.extend(g_ids);
    param_ids.extend(d_ids);
    let log_c = tape.input(params.log_c.clone());
    let log_tau = tape.input(params.log_tau.clone());
    param_ids.push(log_c);
    param_ids.push(log_tau);

    // encoders
    let i_s = image_path(tape, x_s, base_ids, adapter_ids);
    let i_n = image_path(tape, x_n, base_ids, adapter_ids);
    let g_s = dense_path(tape, y_s_in, g_ids[0], g_ids[1], g_ids[2], g_ids[3]);
    let g_n = dense_path(tape, y_n_in, g_ids[0], g_ids[1], g_ids[2], g_ids[3]);

    // decoder with the input ablation applied
    let zeros = |tape: &mut Tape| {
        tape.input(Array2::zeros((b, config.embed_dim)))
    };
    let (dec_s, dec_n) = match flags.decoder_input {
        DecoderInput::Both => (i_s, i_n),
        DecoderInput::Spot => (i_s, zeros(tape)),
        DecoderInput::Niche => (zeros(tape), i_n),
    };
    let cat = tape.concat_cols(dec_s, dec_n);
    let pred_out = dense_path(tape, cat, d_ids[0], d_ids[1], d_ids[2], d_ids[3]);
    let pred = tape.mse_rows(pred_out, y_s_in);

    // alignment; terms with zero effective weight are skipped entirely
    let variant =
        if flags.inverted_nce { InfoNceVariant::Inverted } else { InfoNceVariant::Standard };
    let hca_on = flags.hca_enabled() && config.alpha > 0.0;
    let hea_on = flags.hea_enabled() && config.alpha > 0.0 && config.beta > 0.0;
    let mut hca = None;
    let mut hea = None;
    if hca_on {
        // anchor/target pairs: (I_s,G_s), (G_s,I_s), (G_n,I_s), (I_n,G_s)
        let pairs = [(i_s, g_s), (g_s, i_s), (g_n, i_s), (i_n, g_s)];
        let mut terms = Vec::with_capacity(4);
        if flags.euclidean_mode {
            for (anchor, target) in pairs {
                let sim = tape.cosine_matrix(anchor, target);
                terms.push(tape.info_nce(sim, log_tau, Denominator::AllPairs));
            }
        } else {
            let projected: std::collections::HashMap<usize, TensorId> =
                [i_s, i_n, g_s, g_n].iter().map(|t| (t.0, tape.exp_map_rows(*t, log_c))).collect();
            for (anchor, target) in pairs {
                let pa = projected[&anchor.0];
                let pt = projected[&target.0];
                let dm = tape.lorentz_distance_matrix(pa, pt, log_c);
                let (sim, denom) = match variant {
                    InfoNceVariant::Standard => (tape.neg(dm), Denominator::AllPairs),
                    InfoNceVariant::Inverted => (dm, Denominator::ExcludeDiagonal),
                };
                terms.push(tape.info_nce(sim, log_tau, denom));
            }
            if hea_on {
                hea = Some(build_hea(tape, &projected, [i_s, i_n, g_s, g_n], log_c, flags)?);
            }
        }
        let s01 = tape.add(terms[0], terms[1]);
        let s23 = tape.add(terms[2], terms[3]);
        let sum = tape.add(s01, s23);
        hca = Some(tape.scale(sum, 0.25));
    } else if hea_on {
        let projected: std::collections::HashMap<usize, TensorId> =
            [i_s, i_n, g_s, g_n].iter().map(|t| (t.0, tape.exp_map_rows(*t, log_c))).collect();
        hea = Some(build_hea(tape, &projected, [i_s, i_n, g_s, g_n], log_c, flags)?);
    }

    // total = pred + alpha * (hca + beta * hea)
    let mut total = pred;
    if let Some(h) = hca {
        let scaled = tape.scale(h, config.alpha);
        total = tape.add(total, scaled);
    }
    if let Some(h) = hea {
        let scaled = tape.scale(h, config.alpha * config.beta);
        total = tape.add(total, scaled);
    }

    Ok(LossGraph { param_ids, total, pred, hca, hea })
}

/// The entailment composite on the tape: parents (I_s, G_s, I_s, I_n),
/// children (I_n, G_n, G_s, G_n); all four terms or only the spot-niche
/// pair under the gene-image ablation.
fn build_hea(
    tape: &mut Tape,
    projected: &std::collections::HashMap<usize, TensorId>,
    [i_s, i_n, g_s, g_n]: [TensorId; 4],
    log_c: TensorId,
    flags: &AblationFlags,
) -> Result<TensorId, TrainError> {
    let p = |t: TensorId| projected[&t.0];
    let t1 = tape.entailment_mean(p(i_s), p(i_n), log_c)?;
    let t2 = tape.entailment_mean(p(g_s), p(g_n), log_c)?;
    if flags.no_gi_hea {
        let sum = tape.add(t1, t2);
        Ok(tape.scale(sum, 0.5))
    } else {
        let t3 = tape.entailment_mean(p(i_s), p(g_s), log_c)?;
        let t4 = tape.entailment_mean(p(i_n), p(g_n), log_c)?;
        let s12 = tape.add(t1, t2);
        let s34 = tape.add(t3, t4);
        let sum = tape.add(s12, s34);
        Ok(tape.scale(sum, 0.25))
    }
}

/// Forward-only evaluation of the total objective and its components.
pub fn total_loss(
    batch: &BatchData,
    params: &ModelParams,
    config: &TrainConfig,
) -> Result<(LossComponents, ClampEvents), TrainError> {
    let mut tape = Tape::new();
    let graph = build_graph(&mut tape, batch, params, config)?;
    Ok((
        LossComponents {
            total: tape.scalar(graph.total),
            pred: tape.scalar(graph.pred),
            hca: graph.hca.map_or(0.0, |id| tape.scalar(id)),
            hea: graph.hea.map_or(0.0, |id| tape.scalar(id)),
        },
        tape.clamp_events,
    ))
}

/// Analytic gradients of the total objective for every trainable group,
/// aligned with `trainable_specs`.
pub fn loss_gradients(
    batch: &BatchData,
    params: &ModelParams,
    config: &TrainConfig,
) -> Result<(LossComponents, Vec<Array2<f64>>, ClampEvents), TrainError> {
    let mut tape = Tape::new();
    let graph = build_graph(&mut tape, batch, params, config)?;
    let components = LossComponents {
        total: tape.scalar(graph.total),
        pred: tape.scalar(graph.pred),
        hca: graph.hca.map_or(0.0, |id| tape.scalar(id)),
        hea: graph.hea.map_or(0.0, |id| tape.scalar(id)),
    };
    let grads = tape.backward(graph.total);
    let out = graph
        .param_ids
        .iter()
        .map(|&id| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(tape.value(id).dim()))
        })
        .collect();
    Ok((components, out, tape.clamp_events))
}

// ---------------------------------------------------------------------------
// Optimizer.
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay. Decay applies only to groups whose
/// spec says so (weight matrices and adapter factors, never biases or the
/// geometry scalars).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: usize,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(params: &ModelParams) -> Self {
        let shapes: Vec<_> = params.trainable().iter().map(|a| a.dim()).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    pub fn apply(
        &mut self,
        params: &mut ModelParams,
        grads: &[Array2<f64>],
        lr: f64,
        weight_decay: f64,
    ) {
        self.step += 1;
        let specs = params.trainable_specs();
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, target) in params.trainable_mut().into_iter().enumerate() {
            let g = &grads[i];
            self.m[i].zip_mut_with(g, |m, &gv| *m = self.beta1 * *m + (1.0 - self.beta1) * gv);
            self.v[i]
                .zip_mut_with(g, |v, &gv| *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv);
            let decay = if specs[i].decay { weight_decay } else { 0.0 };
            for ((t, m), v) in target.iter_mut().zip(self.m[i].iter()).zip(self.v[i].iter()) {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *t -= lr * (m_hat / (v_hat.sqrt() + self.eps) + decay * *t);
            }
        }
        // temperature clamp
        params.log_tau[[0, 0]] = params.log_tau[[0, 0]].clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }

    fn state_groups(&self, specs: &[GroupSpec]) -> Vec<ParamGroup> {
        let mut out = Vec::new();
        for (i, spec) in specs.iter().enumerate() {
            out.push(ParamGroup::matrix(&format!("opt.m.{}", spec.name), &self.m[i]));
            out.push(ParamGroup::matrix(&format!("opt.v.{}", spec.name), &self.v[i]));
        }
        out.push(ParamGroup {
            name: "opt.step".into(),
            dims: vec![1, 1],
            data: vec![self.step as f64],
        });
        out
    }

    fn from_state_groups(
        groups: &[ParamGroup],
        params: &ModelParams,
    ) -> Result<Self, TrainError> {
        let mut opt = Self::new(params);
        for (i, spec) in params.trainable_specs().iter().enumerate() {
            opt.m[i] = checkpoint::find(groups, &format!("opt.m.{}", spec.name))?.to_matrix()?;
            opt.v[i] = checkpoint::find(groups, &format!("opt.v.{}", spec.name))?.to_matrix()?;
        }
        opt.step = checkpoint::find(groups, "opt.step")?.data[0] as usize;
        Ok(opt)
    }
}

/// Cosine decay from the base rate to zero over `total_steps`.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let t = (step as f64 / total_steps as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

/// One history line: epoch-mean loss components plus validation metrics.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub pred: f64,
    pub hca: f64,
    pub hea: f64,
    pub val_pcc: std::collections::BTreeMap<usize, f64>,
    pub val_mse: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutput {
    /// Parameters of the epoch with the best validation headline PCC.
    pub best: ModelParams,
    /// Parameters after the final step (resume state).
    pub last: ModelParams,
    pub optimizer: AdamW,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub epochs_done: usize,
}

/// Predict a whole split through the image path and decoder.
pub fn predict_split(
    split: &PreparedSplit,
    params: &ModelParams,
    mode: DecoderInput,
) -> Result<Array2<f64>, TrainError> {
    let i_s = encode_image_batch(&split.feat_spot, &params.encoder);
    let i_n = encode_image_batch(&split.feat_niche, &params.encoder);
    let (zi_s, zi_n) = apply_input_mode(&i_s, &i_n, mode);
    Ok(predict_expression_batch(&zi_s, &zi_n, &params.decoder)?)
}

/// Metrics of a split under the given parameters.
pub fn evaluate_split(
    split: &PreparedSplit,
    params: &ModelParams,
    mode: DecoderInput,
) -> Result<MetricsReport, TrainError> {
    let pred = predict_split(split, params, mode)?;
    Ok(MetricsReport::compute(&pred, &split.y_spot)?)
}

/// Optional resume state for [`train_from`].
#[derive(Clone, Debug)]
pub struct ResumeState {
    pub params: ModelParams,
    pub optimizer: AdamW,
    pub epochs_done: usize,
}

/// Train from scratch.
pub fn train(prepared: &Prepared, config: &TrainConfig) -> Result<TrainOutput, TrainError> {
    let params = ModelParams::init(config, prepared.feature_dim, prepared.panel.len())?;
    let optimizer = AdamW::new(&params);
    train_from(prepared, config, ResumeState { params, optimizer, epochs_done: 0 })
}

/// Deterministic training loop: shuffled batches without replacement,
/// last partial batch dropped, per-epoch validation, best checkpoint by
/// validation headline PCC.
pub fn train_from(
    prepared: &Prepared,
    config: &TrainConfig,
    state: ResumeState,
) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    let n_train = prepared.train.n_spots();
    if n_train == 0 {
        return Err(TrainError::Config("training split is empty".into()));
    }
    let steps_per_epoch = n_train / config.batch_size;
    if steps_per_epoch == 0 && config.epochs > state.epochs_done {
        return Err(TrainError::Config(format!(
            "batch_size {} exceeds the training split ({n_train} spots)",
            config.batch_size
        )));
    }
    let total_steps = config.epochs * steps_per_epoch;

    let mut params = state.params;
    let mut opt = state.optimizer;
    let mut history = Vec::new();
    let mut best = params.clone();
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = state.epochs_done;

    for epoch in state.epochs_done..config.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1000 + epoch as u64));
        order.shuffle(&mut rng);

        let prev = params.clone();
        let mut sums = LossComponents { total: 0.0, pred: 0.0, hca: 0.0, hea: 0.0 };
        let mut lr_last = 0.0;
        for step in 0..steps_per_epoch {
            let rows = &order[step * config.batch_size..(step + 1) * config.batch_size];
            let batch = BatchData::gather(&prepared.train, rows);
            let (components, grads, _) = loss_gradients(&batch, &params, config)?;
            if !components.total.is_finite() {
                let output = TrainOutput {
                    best: if best_metric.is_finite() { best } else { prev.clone() },
                    last: prev,
                    optimizer: opt,
                    history,
                    best_epoch,
                    epochs_done: epoch,
                };
                return Err(TrainError::Divergence { epoch, last: Box::new(output) });
            }
            lr_last = cosine_lr(config.learning_rate, opt.step, total_steps);
            opt.apply(&mut params, &grads, lr_last, config.weight_decay);
            sums.total += components.total;
            sums.pred += components.pred;
            sums.hca += components.hca;
            sums.hea += components.hea;
        }

        let val = evaluate_split(&prepared.val, &params, config.ablation.decoder_input)?;
        let spe = steps_per_epoch as f64;
        history.push(EpochRecord {
            epoch,
            lr: lr_last,
            total: sums.total / spe,
            pred: sums.pred / spe,
            hca: sums.hca / spe,
            hea: sums.hea / spe,
            val_pcc: val.pcc_at.clone(),
            val_mse: val.mse,
            val_mae: val.mae,
        });
        if val.headline_pcc() > best_metric {
            best_metric = val.headline_pcc();
            best = params.clone();
            best_epoch = epoch;
        }
    }

    if history.is_empty() {
        best = params.clone();
    }
    Ok(TrainOutput {
        best,
        last: params,
        optimizer: opt,
        history,
        best_epoch,
        epochs_done: config.epochs.max(state.epochs_done),
    })
}

/// Serialize the full resume state (parameters plus optimizer moments).
pub fn train_state_groups(output: &TrainOutput) -> Vec<ParamGroup> {
    let mut groups = output.last.to_groups();
    groups.extend(output.optimizer.state_groups(&output.last.trainable_specs()));
    groups.push(ParamGroup {
        name: "meta.epochs_done".into(),
        dims: vec![1, 1],
        data: vec![output.epochs_done as f64],
    });
    groups
}

/// Rebuild a resume state from [`train_state_groups`] output.
pub fn resume_from_groups(groups: &[ParamGroup]) -> Result<ResumeState, TrainError> {
    let params = ModelParams::from_groups(groups)?;
    let optimizer = AdamW::from_state_groups(groups, &params)?;
    let epochs_done = checkpoint::find(groups, "meta.epochs_done")?.data[0] as usize;
    Ok(ResumeState { params, optimizer, epochs_done })
}

// ---------------------------------------------------------------------------
// Gradient check.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, serde::Serialize)]
pub struct GradCheckEntry {
    pub group: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Vec<GradCheckEntry>,
    pub skipped: Vec<String>,
    pub clamp_events_total: usize,
}

/// Scalars sampled per group before topping up.
const GRADCHECK_PER_GROUP: usize = 20;

/// Minimum total sample size (when the model has that many scalars).
const GRADCHECK_MIN_TOTAL: usize = 200;

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    if denom < 1e-6 {
        0.0
    } else {
        (a - n).abs() / denom
    }
}

/// Compare analytic gradients against central finite differences of the
/// total objective on one batch. A deterministic per-group subsample of
/// scalars is checked; parameters sitting on their own clamp boundary
/// (the temperature bounds) are skipped and reported.
pub fn grad_check(
    params: &ModelParams,
    batch: &BatchData,
    config: &TrainConfig,
    eps: f64,
) -> Result<GradCheckReport, TrainError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(TrainError::Config("eps must be positive".into()));
    }
    let (_, analytic, clamp_events) = loss_gradients(batch, params, config)?;
    let specs = params.trainable_specs();

    let mut work = params.clone();
    let mut entries: Vec<GradCheckEntry> = Vec::new();
    let mut skipped = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 21));

    // Per-group quota first, then top up from the larger groups until the
    // sample reaches GRADCHECK_MIN_TOTAL (or every scalar is covered).
    let mut shuffled: Vec<Vec<usize>> = analytic
        .iter()
        .map(|g| {
            let mut idx: Vec<usize> = (0..g.len()).collect();
            idx.shuffle(&mut rng);
            idx
        })
        .collect();
    let mut per_group: Vec<Vec<usize>> = shuffled
        .iter_mut()
        .map(|idx| idx.drain(..GRADCHECK_PER_GROUP.min(idx.len())).collect())
        .collect();
    let mut total: usize = per_group.iter().map(Vec::len).sum();
    while total < GRADCHECK_MIN_TOTAL {
        let Some(gi) = (0..shuffled.len())
            .filter(|&gi| !shuffled[gi].is_empty())
            .max_by_key(|&gi| shuffled[gi].len())
        else {
            break;
        };
        per_group[gi].push(shuffled[gi].pop().expect("nonempty"));
        total += 1;
    }

    for (gi, spec) in specs.iter().enumerate() {
        let mut indices = std::mem::take(&mut per_group[gi]);
        indices.sort_unstable();
        for idx in indices {
            let (r, c) = (idx / analytic[gi].ncols(), idx % analytic[gi].ncols());
            let orig = work.trainable()[gi][[r, c]];
            if spec.name == "align.log_tau" {
                let lo = TAU_MIN.ln();
                let hi = TAU_MAX.ln();
                if (orig - lo).abs() <= eps || (orig - hi).abs() <= eps {
                    skipped.push(format!("{}[{idx}]: at its clamp boundary", spec.name));
                    continue;
                }
            }
            work.trainable_mut()[gi][[r, c]] = orig + eps;
            let fp = total_loss(batch, &work, config)?.0.total;
            work.trainable_mut()[gi][[r, c]] = orig - eps;
            let fm = total_loss(batch, &work, config)?.0.total;
            work.trainable_mut()[gi][[r, c]] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[gi][[r, c]];
            entries.push(GradCheckEntry {
                group: spec.name.to_string(),
                index: idx,
                analytic: a,
                numeric,
                rel_err: rel_err(a, numeric),
            });
        }
    }

    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    let checked = entries.len();
    entries.sort_by(|a, b| b.rel_err.partial_cmp(&a.rel_err).unwrap());
    entries.truncate(10);
    Ok(GradCheckReport {
        checked,
        max_rel_err,
        worst: entries,
        skipped,
        clamp_events_total: clamp_events.total(),
    })
}

/// A deterministic synthetic batch for gradient checking: random features
/// and nonnegative expression, scaled so the geometry stays clear of its
/// clamp boundaries.
pub fn gradcheck_batch(
    b: usize,
    feature_dim: usize,
    n_genes: usize,
    seed: u64,
) -> BatchData {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 31));
    let gen = |rows: usize, cols: usize, rng: &mut ChaCha8Rng, scale: f64| {
        Array2::from_shape_fn((rows, cols), |_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
    };
    let feat_spot = gen(b, feature_dim, &mut rng, 1.0);
    let feat_niche = gen(b, feature_dim, &mut rng, 1.0);
    let y_spot = Array2::from_shape_fn((b, n_genes), |_| rng.random::<f64>() * 2.0);
    let y_niche = Array2::from_shape_fn((b, n_genes), |_| rng.random::<f64>() * 2.0);
    BatchData { feat_spot, feat_niche, y_spot, y_niche }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, prepare, GridKind, SynthConfig};
    use approx::assert_relative_eq;

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs: 2,
            embed_dim: 8,
            gene_hidden: 16,
            decoder_hidden: 16,
            adapter_rank: 2,
            knn_k: 4,
            n_panel_genes: 12,
            ..TrainConfig::default()
        }
    }

    fn small_prepared(seed: u64) -> Prepared {
        let ds = generate_synthetic(&SynthConfig {
            slides: 5,
            spots_per_slide: 49,
            genes: 16,
            feature_dim: 8,
            niche_latent_dim: 3,
            grid: GridKind::Square,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        prepare(&ds, seed, 4, 12).unwrap()
    }

    #[test]
    fn params_group_round_trip() {
        let config = small_config();
        let params = ModelParams::init(&config, 8, 12).unwrap();
        let groups = params.to_groups();
        let back = ModelParams::from_groups(&groups).unwrap();
        assert_eq!(params, back);
        // stable, documented order
        let names: Vec<&str> = params.trainable_specs().iter().map(|s| s.name).collect();
        assert_eq!(
            names,
            vec![
                "image.adapter1.a",
                "image.adapter1.b",
                "image.adapter2.a",
                "image.adapter2.b",
                "gene.w1",
                "gene.b1",
                "gene.w2",
                "gene.b2",
                "decoder.w1",
                "decoder.b1",
                "decoder.w2",
                "decoder.b2",
                "geom.log_c",
                "align.log_tau"
            ]
        );
    }

    #[test]
    fn adapter_layers_fill_from_the_back() {
        let mut config = small_config();
        config.adapter_layers = 1;
        let params = ModelParams::init(&config, 8, 12).unwrap();
        assert!(params.encoder.image_adapters[0].is_none());
        assert!(params.encoder.image_adapters[1].is_some());

        config.adapter_layers = 0;
        let params = ModelParams::init(&config, 8, 12).unwrap();
        assert_eq!(params.encoder.adapter_layers(), 0);
    }

    #[test]
    fn frozen_base_is_shared_across_seeds() {
        let mut c1 = small_config();
        c1.seed = 1;
        let mut c2 = small_config();
        c2.seed = 2;
        let p1 = ModelParams::init(&c1, 8, 12).unwrap();
        let p2 = ModelParams::init(&c2, 8, 12).unwrap();
        assert_eq!(p1.encoder.image_base, p2.encoder.image_base);
        assert_ne!(p1.encoder.gene.w1, p2.encoder.gene.w1);
    }

    #[test]
    fn total_loss_weight_zeroing() {
        let config = small_config();
        let params = ModelParams::init(&config, 8, 12).unwrap();
        let batch = gradcheck_batch(6, 8, 12, 3);

        let mut alpha0 = config.clone();
        alpha0.alpha = 0.0;
        let (comp, _) = total_loss(&batch, &params, &alpha0).unwrap();
        assert_eq!(comp.total, comp.pred, "alpha = 0 must leave exactly the prediction loss");

        let mut beta0 = config.clone();
        beta0.beta = 0.0;
        let (comp, _) = total_loss(&batch, &params, &beta0).unwrap();
        assert_relative_eq!(comp.total, comp.pred + beta0.alpha * comp.hca, epsilon = 1e-12);

        let (full, _) = total_loss(&batch, &params, &config).unwrap();
        assert_relative_eq!(
            full.total,
            full.pred + config.alpha * (full.hca + config.beta * full.hea),
            epsilon = 1e-12
        );
    }

    #[test]
    fn total_loss_matches_plain_module_composition() {
        // the tape forward must agree with the plain hypgeom/align/predict
        // functions composed by hand
        let config = small_config();
        let params = ModelParams::init(&config, 8, 12).unwrap();
        let batch = gradcheck_batch(5, 8, 12, 9);
        let (comp, _) = total_loss(&batch, &params, &config).unwrap();

        let i_s = encode_image_batch(&batch.feat_spot, &params.encoder);
        let i_n = encode_image_batch(&batch.feat_niche, &params.encoder);
        let g_s = crate::represent::encode_gene_batch(&batch.y_spot, &params.encoder);
        let g_n = crate::represent::encode_gene_batch(&batch.y_niche, &params.encoder);

        let pred = predict_expression_batch(&i_s, &i_n, &params.decoder).unwrap();
        let pred_loss = crate::predict::prediction_loss(&pred, &batch.y_spot).unwrap();
        assert_relative_eq!(comp.pred, pred_loss, epsilon = 1e-12);

        let hb = crate::align::project_batch(&i_s, &i_n, &g_s, &g_n, params.curvature()).unwrap();
        let hca =
            crate::align::hca_loss(&hb, params.temperature(), InfoNceVariant::Standard).unwrap();
        assert_relative_eq!(comp.hca, hca, epsilon = 1e-10);
        let hea = crate::align::hea_loss(&hb).unwrap();
        assert_relative_eq!(comp.hea, hea, epsilon = 1e-10);
    }

    #[test]
    fn zero_loss_batch_has_zero_gradients() {
        let config = TrainConfig { alpha: 0.0, ..small_config() };
        let mut params = ModelParams::init(&config, 8, 12).unwrap();
        // perfect decoder on an all-zero problem
        for m in [
            &mut params.decoder.w1,
            &mut params.decoder.b1,
            &mut params.decoder.w2,
            &mut params.decoder.b2,
        ] {
            m.fill(0.0);
        }
        let b = 4;
        let batch = BatchData {
            feat_spot: Array2::zeros((b, 8)),
            feat_niche: Array2::zeros((b, 8)),
            y_spot: Array2::zeros((b, 12)),
            y_niche: Array2::zeros((b, 12)),
        };
        let (comp, grads, _) = loss_gradients(&batch, &params, &config).unwrap();
        assert_eq!(comp.total, 0.0);
        for g in &grads {
            assert!(g.iter().all(|&x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn gradcheck_default_mode_passes() {
        let config = small_config();
        let params = ModelParams::init(&config, 8, 12).unwrap();
        let batch = gradcheck_batch(6, 8, 12, config.seed);
        let report = grad_check(&params, &batch, &config, 1e-5).unwrap();
        assert!(report.checked >= 200, "only {} scalars checked", report.checked);
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} (worst: {:?})",
            report.max_rel_err,
            report.worst.first()
        );
    }

    #[test]
    fn gradcheck_euclidean_and_inverted_modes_pass() {
        let mut config = small_config();
        config.ablation.euclidean_mode = true;
        let params = ModelParams::init(&config, 8, 12).unwrap();
        let batch = gradcheck_batch(6, 8, 12, config.seed);
        let report = grad_check(&params, &batch, &config, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-4, "euclidean: {}", report.max_rel_err);

        let mut config = small_config();
        config.ablation.inverted_nce = true;
        let params = ModelParams::init(&config, 8, 12).unwrap();
        let report = grad_check(&params, &batch, &config, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-4, "inverted: {}", report.max_rel_err);
    }

    #[test]
    fn gradcheck_skips_clamped_temperature() {
        let config = small_config();
        let mut params = ModelParams::init(&config, 8, 12).unwrap();
        params.log_tau[[0, 0]] = TAU_MIN.ln();
        let batch = gradcheck_batch(6, 8, 12, config.seed);
        let report = grad_check(&params, &batch, &config, 1e-5).unwrap();
        assert!(report.skipped.iter().any(|s| s.contains("align.log_tau")));
    }

    #[test]
    fn alignment_off_means_pred_only_gradients() {
        // with both alignment losses disabled, gradients flow only
        // through the prediction loss: the niche gene profile feeds
        // nothing else, so perturbing it must change no gradient, and the
        // geometry scalars must receive none at all
        let config = small_config();
        let params = ModelParams::init(&config, 8, 12).unwrap();
        let batch = gradcheck_batch(6, 8, 12, 5);

        let mut off = config.clone();
        off.ablation.no_hca = true;
        off.ablation.no_hea = true;
        let (_, grads_off, _) = loss_gradients(&batch, &params, &off).unwrap();

        let mut shifted = batch.clone();
        shifted.y_niche.mapv_inplace(|v| v * 3.0 + 1.0);
        let (_, grads_shifted, _) = loss_gradients(&shifted, &params, &off).unwrap();
        for (a, b) in grads_off.iter().zip(&grads_shifted) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x, y);
            }
        }

        let specs = params.trainable_specs();
        for (i, spec) in specs.iter().enumerate() {
            if spec.name == "geom.log_c" || spec.name == "align.log_tau" {
                assert!(grads_off[i].iter().all(|&g| g == 0.0), "{} got gradient", spec.name);
            }
        }

        // the same gradients also arise when alignment is merely
        // zero-weighted
        let mut alpha0 = config.clone();
        alpha0.alpha = 0.0;
        let (comp, grads_a0, _) = loss_gradients(&batch, &params, &alpha0).unwrap();
        assert_eq!(comp.total, comp.pred);
        for (a, b) in grads_off.iter().zip(&grads_a0) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn decoder_input_ablation_zeroes_the_unused_block() {
        let mut config = small_config();
        config.ablation.decoder_input = DecoderInput::Spot;
        let params = ModelParams::init(&config, 8, 12).unwrap();
        let batch = gradcheck_batch(6, 8, 12, 6);
        let (_, grads, _) = loss_gradients(&batch, &params, &config).unwrap();
        let specs = params.trainable_specs();
        let w1_idx = specs.iter().position(|s| s.name == "decoder.w1").unwrap();
        let d = config.embed_dim;
        let g = &grads[w1_idx];
        // the niche half of the first layer receives exactly zero gradient
        for r in 0..g.nrows() {
            for c in d..2 * d {
                assert_eq!(g[[r, c]], 0.0);
            }
        }
        let spot_block_nonzero = (0..g.nrows()).any(|r| (0..d).any(|c| g[[r, c]] != 0.0));
        assert!(spot_block_nonzero);
    }

    #[test]
    fn epochs_zero_returns_initialization() {
        let prepared = small_prepared(1);
        let mut config = small_config();
        config.epochs = 0;
        let out = train(&prepared, &config).unwrap();
        let init = ModelParams::init(&config, prepared.feature_dim, prepared.panel.len()).unwrap();
        assert_eq!(out.best, init);
        assert!(out.history.is_empty());
    }

    #[test]
    fn training_is_bit_deterministic() {
        let prepared = small_prepared(2);
        let config = small_config();
        let a = train(&prepared, &config).unwrap();
        let b = train(&prepared, &config).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.best, b.best);
        assert_eq!(a.last, b.last);
    }

    #[test]
    fn training_reduces_loss() {
        let prepared = small_prepared(3);
        let mut config = small_config();
        config.epochs = 10;
        let out = train(&prepared, &config).unwrap();
        let first = out.history.first().unwrap().total;
        let last = out.history.last().unwrap().total;
        assert!(last < first, "loss did not improve: {first} -> {last}");
    }

    #[test]
    fn resume_continues_from_state() {
        let prepared = small_prepared(4);
        let mut config = small_config();
        config.epochs = 3;
        let out3 = train(&prepared, &config).unwrap();

        // serialize, resume for two more epochs
        let groups = train_state_groups(&out3);
        let resumed = resume_from_groups(&groups).unwrap();
        assert_eq!(resumed.epochs_done, 3);
        let mut config5 = config.clone();
        config5.epochs = 5;
        let out5 = train_from(&prepared, &config5, resumed).unwrap();
        assert_eq!(out5.history.len(), 2);
        assert_eq!(out5.history[0].epoch, 3);
    }

    #[test]
    fn batch_too_small_is_rejected() {
        let config = small_config();
        let params = ModelParams::init(&config, 8, 12).unwrap();
        let batch = gradcheck_batch(1, 8, 12, 0);
        assert!(matches!(
            total_loss(&batch, &params, &config),
            Err(TrainError::Align(AlignError::BatchTooSmall(1)))
        ));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_relative_eq!(cosine_lr(1.0, 0, 100), 1.0, epsilon = 1e-12);
        assert!(cosine_lr(1.0, 50, 100) < 1.0);
        assert!(cosine_lr(1.0, 100, 100) < 1e-12);
    }
}
