//! Multi-level hyperbolic image-gene representation learning for spatial
//! transcriptomics prediction.
//!
//! The library trains a small cross-modal model that predicts spot-level
//! gene expression from precomputed histology feature vectors. Image and
//! gene-expression inputs are encoded at two spatial levels (spot and
//! niche), projected onto the Lorentz model of hyperbolic space, and tied
//! together by contrastive and entailment-cone alignment losses while a
//! decoder regresses expression from the image embeddings.
//!
//! Module map:
//!
//! * [`hypgeom`] — Lorentz-model geometry kernel (hyperboloid lifting,
//!   geodesic distance, exponential map at the origin, entailment cones).
//! * [`tape`] — minimal reverse-mode autodiff engine used by training.
//! * [`align`] — hyperbolic InfoNCE and the hierarchical contrastive /
//!   entailment alignment objectives.
//! * [`represent`] — spatial KNN niches, niche profile averaging, the
//!   frozen-base image encoder with low-rank adapters, the gene encoder.
//! * [`predict`] — gene decoder and prediction loss.
//! * [`train`] — parameter store, total objective, optimizer, training
//!   loop, gradient-check harness.
//! * [`checkpoint`] — versioned binary parameter container.
//! * [`data`] — dataset model, file formats, preprocessing, synthetic
//!   data generator.
//! * [`metrics`] — PCC@k / MSE / MAE, slide-level splits, pseudo-bulk.
//! * [`cli`] — the `hyperst` command-line tool.

pub mod align;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod hypgeom;
pub mod metrics;
pub mod predict;
pub mod represent;
pub mod tape;
pub mod train;
