//! Dataset model, on-disk formats, preprocessing and the synthetic
//! spatial-transcriptomics generator.
//!
//! A dataset is a flat list of spots (slide id, spot id, coordinates in
//! micrometers, raw gene counts, a precomputed image feature vector) plus
//! the raw gene names. On disk it is four files:
//!
//! * `spots.csv` — header `slide_id,spot_id,x_um,y_um`, UTF-8, LF line
//!   endings, `.` decimal separator,
//! * `expr.bin` — magic `HSTE`, format version `u32` LE, rows `u64` LE,
//!   cols `u64` LE, then row-major little-endian `f32` counts,
//! * `feats.bin` — same layout with magic `HSTF`,
//! * `genes.txt` — one gene name per line.
//!
//! Row order in the binary files matches `spots.csv`. Save followed by
//! load reproduces every record bit-exactly.
//!
//! Preprocessing follows the panel-then-log convention: gene selection
//! ranks raw counts computed on training spots only (see
//! [`select_hmhvg`]), and the kept counts are `log(1 + x)` transformed.

use std::collections::BTreeSet;
use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::metrics::{split_slides, MetricsError, SlideSplit, SplitSpec};
use crate::represent::{knn_neighbors, RepresentError};

pub const EXPR_MAGIC: &[u8; 4] = b"HSTE";
pub const FEATS_MAGIC: &[u8; 4] = b"HSTF";
pub const DATA_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error("{file}: {message}")]
    Format { file: String, message: String },
    #[error("invalid dataset: {0}")]
    Validation(String),
    #[error("gene selection needs at least 2 spots, got {0}")]
    TooFewSpots(usize),
    #[error("cannot select {requested} genes from {available}")]
    PanelTooLarge { requested: usize, available: usize },
    #[error("negative count in gene vector")]
    NegativeCount,
    #[error(transparent)]
    Split(#[from] MetricsError),
    #[error(transparent)]
    Niche(#[from] RepresentError),
}

/// One measured spot.
#[derive(Clone, Debug, PartialEq)]
pub struct SpotRecord {
    pub slide_id: String,
    pub spot_id: String,
    pub x_um: f64,
    pub y_um: f64,
    pub counts: Vec<f32>,
    pub feature: Vec<f32>,
}

/// A full dataset: raw gene names plus all spots of all slides.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub gene_names: Vec<String>,
    pub spots: Vec<SpotRecord>,
}

impl Dataset {
    pub fn n_genes_raw(&self) -> usize {
        self.gene_names.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.spots.first().map_or(0, |s| s.feature.len())
    }

    /// Slide ids in first-appearance order.
    pub fn slide_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for s in &self.spots {
            if seen.insert(s.slide_id.clone()) {
                out.push(s.slide_id.clone());
            }
        }
        out
    }

    /// Spot indices per slide, in dataset order.
    pub fn slide_spot_indices(&self, slide_id: &str) -> Vec<usize> {
        self.spots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.slide_id == slide_id)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.n_genes_raw();
        let d = self.feature_dim();
        let mut keys = HashSet::new();
        for s in &self.spots {
            if !keys.insert((s.slide_id.clone(), s.spot_id.clone())) {
                return Err(DataError::Validation(format!(
                    "duplicate spot ({}, {})",
                    s.slide_id, s.spot_id
                )));
            }
            if !s.x_um.is_finite() || !s.y_um.is_finite() {
                return Err(DataError::Validation(format!(
                    "non-finite coordinates for spot ({}, {})",
                    s.slide_id, s.spot_id
                )));
            }
            if s.counts.len() != n {
                return Err(DataError::Validation(format!(
                    "spot ({}, {}) has {} counts, expected {n}",
                    s.slide_id,
                    s.spot_id,
                    s.counts.len()
                )));
            }
            if s.feature.len() != d {
                return Err(DataError::Validation(format!(
                    "spot ({}, {}) has feature dim {}, expected {d}",
                    s.slide_id,
                    s.spot_id,
                    s.feature.len()
                )));
            }
            if s.counts.iter().any(|&c| !c.is_finite() || c < 0.0) {
                return Err(DataError::Validation(format!(
                    "negative or non-finite count in spot ({}, {})",
                    s.slide_id, s.spot_id
                )));
            }
            if s.feature.iter().any(|f| !f.is_finite()) {
                return Err(DataError::Validation(format!(
                    "non-finite feature in spot ({}, {})",
                    s.slide_id, s.spot_id
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gene panel selection and the log transform.
// ---------------------------------------------------------------------------

/// Selected gene panel with the statistics the ranking used.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenePanel {
    /// Panel gene names, in ranked order.
    pub names: Vec<String>,
    /// Column indices into the raw gene order.
    pub indices: Vec<usize>,
    /// Per-gene mean raw count over the selection spots.
    pub means: Vec<f64>,
    /// Per-gene population variance of raw counts over the selection spots.
    pub variances: Vec<f64>,
}

impl GenePanel {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Check the panel indices against a dataset's raw gene names.
    pub fn check_against(&self, gene_names: &[String]) -> Result<(), DataError> {
        for (name, &idx) in self.names.iter().zip(&self.indices) {
            if gene_names.get(idx) != Some(name) {
                return Err(DataError::Validation(format!(
                    "panel gene '{name}' not at raw index {idx}"
                )));
            }
        }
        Ok(())
    }

    /// Gather the panel columns of a raw count vector.
    pub fn project(&self, counts: &[f32]) -> Vec<f64> {
        self.indices.iter().map(|&i| counts[i] as f64).collect()
    }
}

/// Two-stage highly-mean / highly-variant gene selection over a raw count
/// matrix (rows are spots). Rank genes by mean descending and keep the top
/// `2 * n_genes`, then rank the survivors by variance descending and keep
/// the top `n_genes`. All ties break by ascending gene name, so the result
/// is deterministic. Must be computed on training spots only.
pub fn select_hmhvg(
    counts: &Array2<f64>,
    gene_names: &[String],
    n_genes: usize,
) -> Result<GenePanel, DataError> {
    let (m, n_raw) = counts.dim();
    if m < 2 {
        return Err(DataError::TooFewSpots(m));
    }
    if n_genes > n_raw || n_genes == 0 {
        return Err(DataError::PanelTooLarge { requested: n_genes, available: n_raw });
    }
    assert_eq!(gene_names.len(), n_raw, "gene name count mismatch");

    let mut means = vec![0.0; n_raw];
    let mut variances = vec![0.0; n_raw];
    for g in 0..n_raw {
        let col = counts.column(g);
        let mean = col.sum() / m as f64;
        means[g] = mean;
        variances[g] = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64;
    }

    let mut by_mean: Vec<usize> = (0..n_raw).collect();
    by_mean.sort_by(|&a, &b| {
        means[b].partial_cmp(&means[a]).unwrap().then_with(|| gene_names[a].cmp(&gene_names[b]))
    });
    by_mean.truncate((2 * n_genes).min(n_raw));

    let mut by_var = by_mean;
    by_var.sort_by(|&a, &b| {
        variances[b]
            .partial_cmp(&variances[a])
            .unwrap()
            .then_with(|| gene_names[a].cmp(&gene_names[b]))
    });
    by_var.truncate(n_genes);

    Ok(GenePanel {
        names: by_var.iter().map(|&i| gene_names[i].clone()).collect(),
        indices: by_var.clone(),
        means: by_var.iter().map(|&i| means[i]).collect(),
        variances: by_var.iter().map(|&i| variances[i]).collect(),
    })
}

/// Elementwise `log(1 + x)`; rejects negative counts.
pub fn log_transform(counts: &[f64]) -> Result<Vec<f64>, DataError> {
    if counts.iter().any(|&c| c < 0.0) {
        return Err(DataError::NegativeCount);
    }
    Ok(counts.iter().map(|&c| c.ln_1p()).collect())
}

// ---------------------------------------------------------------------------
// Synthetic generator.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Hex,
    Square,
}

impl std::str::FromStr for GridKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hex" => Ok(GridKind::Hex),
            "square" => Ok(GridKind::Square),
            other => Err(format!("unknown grid '{other}' (hex|square)")),
        }
    }
}

/// Configuration of the synthetic hierarchical generator.
///
/// Spots sit on a grid; the grid is partitioned into square blocks of
/// `niche_block x niche_block` cells and every block draws one latent
/// vector. Each spot perturbs its block latent, expression is a fixed
/// linear map of the spot latent plus noise (exponentiated, minus one,
/// floored at zero to form counts), and the image feature is a different
/// fixed linear map of the same latent plus independent noise. Both maps
/// are seeded by `gene_loading_seed`, so different master seeds share
/// them; everything else derives from `seed` with one substream per
/// slide.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub slides: usize,
    pub spots_per_slide: usize,
    pub grid: GridKind,
    pub genes: usize,
    pub feature_dim: usize,
    pub niche_latent_dim: usize,
    /// Additive noise on log-expression.
    pub spot_noise: f64,
    /// Scale of the spot-level offset added to the block latent.
    pub latent_perturbation: f64,
    /// Additive noise on image features.
    pub feature_noise: f64,
    /// Block side length, in grid cells.
    pub niche_block: usize,
    pub spacing_um: f64,
    /// Master seed for latents and noise.
    pub seed: u64,
    /// Seed of the fixed expression/feature loading maps.
    pub gene_loading_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            slides: 5,
            spots_per_slide: 400,
            grid: GridKind::Hex,
            genes: 200,
            feature_dim: 32,
            niche_latent_dim: 8,
            spot_noise: 0.3,
            latent_perturbation: 0.4,
            feature_noise: 0.8,
            niche_block: 3,
            spacing_um: 100.0,
            seed: 1,
            gene_loading_seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let positive = [
            ("slides", self.slides),
            ("spots_per_slide", self.spots_per_slide),
            ("genes", self.genes),
            ("feature_dim", self.feature_dim),
            ("niche_latent_dim", self.niche_latent_dim),
            ("niche_block", self.niche_block),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(DataError::Validation(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("spot_noise", self.spot_noise),
            ("latent_perturbation", self.latent_perturbation),
            ("feature_noise", self.feature_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DataError::Validation(format!("{name} must be >= 0")));
            }
        }
        if !(self.spacing_um.is_finite() && self.spacing_um > 0.0) {
            return Err(DataError::Validation("spacing_um must be > 0".into()));
        }
        Ok(())
    }
}

/// Keyed seed derivation for per-slide substreams.
pub(crate) fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn grid_positions(kind: GridKind, m: usize, spacing: f64) -> Vec<(usize, usize, f64, f64)> {
    let side = (m as f64).sqrt().ceil() as usize;
    let mut out = Vec::with_capacity(m);
    'rows: for row in 0.. {
        for col in 0..side {
            if out.len() == m {
                break 'rows;
            }
            let (x, y) = match kind {
                GridKind::Square => (col as f64 * spacing, row as f64 * spacing),
                GridKind::Hex => (
                    col as f64 * spacing + if row % 2 == 1 { spacing / 2.0 } else { 0.0 },
                    row as f64 * spacing * 3.0_f64.sqrt() / 2.0,
                ),
            };
            out.push((row, col, x, y));
        }
    }
    out
}

/// Deterministic synthetic dataset; see [`SynthConfig`].
pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset, DataError> {
    config.validate()?;
    let l = config.niche_latent_dim;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    // Fixed loading maps, shared across master seeds.
    let mut map_rng = ChaCha8Rng::seed_from_u64(config.gene_loading_seed);
    let scale = 1.0 / (l as f64).sqrt();
    let mut gene_loading = Array2::zeros((config.genes, l));
    for g in 0..config.genes {
        // Per-gene scale diversifies means and variances across the panel.
        let gene_scale: f64 = 0.4 + 1.2 * rand::Rng::random::<f64>(&mut map_rng);
        for j in 0..l {
            gene_loading[[g, j]] = std_normal.sample(&mut map_rng) * scale * gene_scale;
        }
    }
    let feature_map = Array2::from_shape_fn((config.feature_dim, l), |_| {
        std_normal.sample(&mut map_rng) * scale
    });

    let gene_names: Vec<String> = (0..config.genes).map(|g| format!("gene{g:04}")).collect();
    let positions = grid_positions(config.grid, config.spots_per_slide, config.spacing_um);

    let mut spots = Vec::with_capacity(config.slides * config.spots_per_slide);
    for slide in 0..config.slides {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, slide as u64));
        let slide_id = format!("slide{slide:02}");

        // One latent per grid block, drawn in sorted block order.
        let blocks: BTreeSet<(usize, usize)> = positions
            .iter()
            .map(|&(row, col, _, _)| (row / config.niche_block, col / config.niche_block))
            .collect();
        let mut block_latents = std::collections::BTreeMap::new();
        for &b in &blocks {
            let z: Vec<f64> = (0..l).map(|_| std_normal.sample(&mut rng)).collect();
            block_latents.insert(b, z);
        }

        for (idx, &(row, col, x, y)) in positions.iter().enumerate() {
            let block = (row / config.niche_block, col / config.niche_block);
            let z_block = &block_latents[&block];
            let z_spot: Vec<f64> = (0..l)
                .map(|j| z_block[j] + config.latent_perturbation * std_normal.sample(&mut rng))
                .collect();

            let mut counts = Vec::with_capacity(config.genes);
            for g in 0..config.genes {
                let mut log_expr: f64 =
                    (0..l).map(|j| gene_loading[[g, j]] * z_spot[j]).sum();
                log_expr += config.spot_noise * std_normal.sample(&mut rng);
                counts.push((log_expr.exp() - 1.0).max(0.0) as f32);
            }
            let mut feature = Vec::with_capacity(config.feature_dim);
            for f in 0..config.feature_dim {
                let mut v: f64 = (0..l).map(|j| feature_map[[f, j]] * z_spot[j]).sum();
                v += config.feature_noise * std_normal.sample(&mut rng);
                feature.push(v as f32);
            }
            spots.push(SpotRecord {
                slide_id: slide_id.clone(),
                spot_id: format!("s{idx:05}"),
                x_um: x,
                y_um: y,
                counts,
                feature,
            });
        }
    }
    let ds = Dataset { gene_names, spots };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// On-disk formats.
// ---------------------------------------------------------------------------

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

fn write_matrix(
    path: &Path,
    magic: &[u8; 4],
    rows: usize,
    cols: usize,
    data: impl Iterator<Item = f32>,
) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(4 + 4 + 16 + rows * cols * 4);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&DATA_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows as u64).to_le_bytes());
    buf.extend_from_slice(&(cols as u64).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

fn read_matrix(path: &Path, magic: &[u8; 4]) -> Result<(usize, usize, Vec<f32>), DataError> {
    let file = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    if bytes.len() < 24 {
        return Err(DataError::Format {
            file,
            message: format!("header needs 24 bytes, file has {}", bytes.len()),
        });
    }
    if &bytes[0..4] != magic {
        return Err(DataError::Format {
            file,
            message: format!(
                "bad magic {:?}, expected {:?}",
                &bytes[0..4],
                std::str::from_utf8(magic).unwrap()
            ),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != DATA_FORMAT_VERSION {
        return Err(DataError::Format {
            file,
            message: format!("unsupported format version {version}, expected {DATA_FORMAT_VERSION}"),
        });
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| DataError::Format {
            file: file.clone(),
            message: "dimension overflow".into(),
        })?;
    let actual = bytes.len() - 24;
    if actual != expected {
        return Err(DataError::Format {
            file,
            message: format!("expected {expected} data bytes for {rows}x{cols}, got {actual}"),
        });
    }
    let data = bytes[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, data))
}

/// Write `spots.csv`, `expr.bin`, `feats.bin` and `genes.txt` under `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    ds.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let csv_path = dir.join("spots.csv");
    let mut csv = String::from("slide_id,spot_id,x_um,y_um\n");
    for s in &ds.spots {
        csv.push_str(&format!("{},{},{},{}\n", s.slide_id, s.spot_id, s.x_um, s.y_um));
    }
    std::fs::File::create(&csv_path)
        .and_then(|mut f| f.write_all(csv.as_bytes()))
        .map_err(|e| io_err(&csv_path, e))?;

    let genes_path = dir.join("genes.txt");
    let mut genes = String::new();
    for g in &ds.gene_names {
        genes.push_str(g);
        genes.push('\n');
    }
    std::fs::File::create(&genes_path)
        .and_then(|mut f| f.write_all(genes.as_bytes()))
        .map_err(|e| io_err(&genes_path, e))?;

    let n = ds.n_genes_raw();
    let d = ds.feature_dim();
    write_matrix(
        &dir.join("expr.bin"),
        EXPR_MAGIC,
        ds.spots.len(),
        n,
        ds.spots.iter().flat_map(|s| s.counts.iter().copied()),
    )?;
    write_matrix(
        &dir.join("feats.bin"),
        FEATS_MAGIC,
        ds.spots.len(),
        d,
        ds.spots.iter().flat_map(|s| s.feature.iter().copied()),
    )?;
    Ok(())
}

/// Load a dataset saved by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let csv_path = dir.join("spots.csv");
    let csv_file = csv_path.display().to_string();
    let text = std::fs::read_to_string(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "slide_id,spot_id,x_um,y_um")) => {}
        Some((_, other)) => {
            return Err(DataError::Parse {
                file: csv_file,
                line: 1,
                message: format!(
                    "bad header '{other}', expected 'slide_id,spot_id,x_um,y_um'"
                ),
            })
        }
        None => {
            return Err(DataError::Parse {
                file: csv_file,
                line: 1,
                message: "empty file, expected a header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(DataError::Parse {
                file: csv_file,
                line: lineno + 1,
                message: format!("expected 4 comma-separated fields, got {}", parts.len()),
            });
        }
        let parse_coord = |s: &str, name: &str| -> Result<f64, DataError> {
            s.parse::<f64>().map_err(|_| DataError::Parse {
                file: csv_file.clone(),
                line: lineno + 1,
                message: format!("bad {name} '{s}', expected a decimal number"),
            })
        };
        rows.push((
            parts[0].to_string(),
            parts[1].to_string(),
            parse_coord(parts[2], "x_um")?,
            parse_coord(parts[3], "y_um")?,
        ));
    }

    let genes_path = dir.join("genes.txt");
    let gene_text = std::fs::read_to_string(&genes_path).map_err(|e| io_err(&genes_path, e))?;
    let gene_names: Vec<String> = gene_text.lines().map(str::to_string).collect();

    let (er, ec, expr) = read_matrix(&dir.join("expr.bin"), EXPR_MAGIC)?;
    let (fr, fc, feats) = read_matrix(&dir.join("feats.bin"), FEATS_MAGIC)?;
    if er != rows.len() {
        return Err(DataError::Format {
            file: dir.join("expr.bin").display().to_string(),
            message: format!("{er} rows but spots.csv has {}", rows.len()),
        });
    }
    if fr != rows.len() {
        return Err(DataError::Format {
            file: dir.join("feats.bin").display().to_string(),
            message: format!("{fr} rows but spots.csv has {}", rows.len()),
        });
    }
    if ec != gene_names.len() {
        return Err(DataError::Format {
            file: dir.join("expr.bin").display().to_string(),
            message: format!("{ec} columns but genes.txt has {}", gene_names.len()),
        });
    }

    let spots = rows
        .into_iter()
        .enumerate()
        .map(|(i, (slide_id, spot_id, x_um, y_um))| SpotRecord {
            slide_id,
            spot_id,
            x_um,
            y_um,
            counts: expr[i * ec..(i + 1) * ec].to_vec(),
            feature: feats[i * fc..(i + 1) * fc].to_vec(),
        })
        .collect();
    let ds = Dataset { gene_names, spots };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Preprocessing into training matrices.
// ---------------------------------------------------------------------------

/// Matrices of one split: rows are spots. Expression is log-transformed
/// panel expression; niche rows are member means (center included).
#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub feat_spot: Array2<f64>,
    pub feat_niche: Array2<f64>,
    pub y_spot: Array2<f64>,
    pub y_niche: Array2<f64>,
}

impl PreparedSplit {
    pub fn n_spots(&self) -> usize {
        self.y_spot.nrows()
    }
}

/// A dataset split, panel-selected, log-transformed, with niches built.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub panel: GenePanel,
    pub split: SlideSplit,
    pub train: PreparedSplit,
    pub val: PreparedSplit,
    pub test: PreparedSplit,
    pub feature_dim: usize,
}

impl Prepared {
    pub fn split_named(&self, name: &str) -> Option<&PreparedSplit> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

fn build_split(
    ds: &Dataset,
    slides: &[String],
    panel: &GenePanel,
    k: usize,
) -> Result<PreparedSplit, DataError> {
    let d_in = ds.feature_dim();
    let n = panel.len();
    let mut feat_spot = Vec::new();
    let mut feat_niche = Vec::new();
    let mut y_spot = Vec::new();
    let mut y_niche = Vec::new();
    let mut n_rows = 0usize;

    for slide in slides {
        let idx = ds.slide_spot_indices(slide);
        let coords: Vec<[f64; 2]> = idx.iter().map(|&i| [ds.spots[i].x_um, ds.spots[i].y_um]).collect();
        let ids: Vec<&str> = idx.iter().map(|&i| ds.spots[i].spot_id.as_str()).collect();
        let niches = knn_neighbors(&coords, &ids, k)?;

        // log-transformed panel expression per slide spot
        let logs: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| log_transform(&panel.project(&ds.spots[i].counts)))
            .collect::<Result<_, _>>()?;

        for (local, &spot_idx) in idx.iter().enumerate() {
            let spot = &ds.spots[spot_idx];
            feat_spot.extend(spot.feature.iter().map(|&f| f as f64));
            y_spot.extend_from_slice(&logs[local]);

            let members: Vec<usize> = niches[local].members().collect();
            let kf = members.len() as f64;
            for g in 0..n {
                y_niche.push(members.iter().map(|&mi| logs[mi][g]).sum::<f64>() / kf);
            }
            for f in 0..d_in {
                feat_niche.push(
                    members.iter().map(|&mi| ds.spots[idx[mi]].feature[f] as f64).sum::<f64>()
                        / kf,
                );
            }
            n_rows += 1;
        }
    }
    let shape_err = |what: &str| DataError::Validation(format!("internal shape error in {what}"));
    Ok(PreparedSplit {
        feat_spot: Array2::from_shape_vec((n_rows, d_in), feat_spot)
            .map_err(|_| shape_err("feat_spot"))?,
        feat_niche: Array2::from_shape_vec((n_rows, d_in), feat_niche)
            .map_err(|_| shape_err("feat_niche"))?,
        y_spot: Array2::from_shape_vec((n_rows, n), y_spot).map_err(|_| shape_err("y_spot"))?,
        y_niche: Array2::from_shape_vec((n_rows, n), y_niche).map_err(|_| shape_err("y_niche"))?,
    })
}

/// Split slides, select the gene panel on training spots only, transform
/// and assemble all three splits.
pub fn prepare(
    ds: &Dataset,
    split_seed: u64,
    k: usize,
    n_panel: usize,
) -> Result<Prepared, DataError> {
    ds.validate()?;
    let split = split_slides(&ds.slide_ids(), &SplitSpec { seed: split_seed })?;

    let train_rows: Vec<usize> =
        split.train.iter().flat_map(|s| ds.slide_spot_indices(s)).collect();
    let mut counts = Array2::zeros((train_rows.len(), ds.n_genes_raw()));
    for (r, &i) in train_rows.iter().enumerate() {
        for (g, &c) in ds.spots[i].counts.iter().enumerate() {
            counts[[r, g]] = c as f64;
        }
    }
    let panel = select_hmhvg(&counts, &ds.gene_names, n_panel)?;

    Ok(Prepared {
        train: build_split(ds, &split.train, &panel, k)?,
        val: build_split(ds, &split.val, &panel, k)?,
        test: build_split(ds, &split.test, &panel, k)?,
        split,
        panel,
        feature_dim: ds.feature_dim(),
    })
}

/// Prepare with an externally supplied panel (evaluation path).
pub fn prepare_with_panel(
    ds: &Dataset,
    split_seed: u64,
    k: usize,
    panel: GenePanel,
) -> Result<Prepared, DataError> {
    ds.validate()?;
    panel.check_against(&ds.gene_names)?;
    let split = split_slides(&ds.slide_ids(), &SplitSpec { seed: split_seed })?;
    Ok(Prepared {
        train: build_split(ds, &split.train, &panel, k)?,
        val: build_split(ds, &split.val, &panel, k)?,
        test: build_split(ds, &split.test, &panel, k)?,
        split,
        panel,
        feature_dim: ds.feature_dim(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn tiny_config() -> SynthConfig {
        SynthConfig {
            slides: 4,
            spots_per_slide: 36,
            genes: 20,
            feature_dim: 6,
            niche_latent_dim: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn hmhvg_toy_table() {
        // means: g0 = 10, g1 = 10, g2 = 1; variances: 1, 5, 9.
        // mean stage keeps {g0, g1} (2 * n_genes = 2), variance picks g1.
        let counts = array![[9.0, 8.0, 4.0], [11.0, 12.0, -2.0_f64.max(0.0)]];
        // construct exact means/variances: rows chosen so mean g0 = 10 (var 1),
        // g1 = 10 (var 4) ... adjust to the stated table instead:
        let counts = {
            let mut c = counts;
            // g0: 9, 11 -> mean 10, var 1
            // g1: mean 10, var 5 -> values 10 +/- sqrt(5)
            c[[0, 1]] = 10.0 - 5.0_f64.sqrt();
            c[[1, 1]] = 10.0 + 5.0_f64.sqrt();
            // g2: mean 1, var 9 -> values 1 -/+ 3
            c[[0, 2]] = 0.0;
            c[[1, 2]] = 4.0;
            c
        };
        let names = vec!["g0".to_string(), "g1".to_string(), "g2".to_string()];
        let panel = select_hmhvg(&counts, &names, 1).unwrap();
        assert_eq!(panel.names, vec!["g1".to_string()]);
        assert_eq!(panel.indices, vec![1]);
        assert_relative_eq!(panel.means[0], 10.0, epsilon = 1e-12);
        assert_relative_eq!(panel.variances[0], 5.0, epsilon = 1e-9);
    }

    #[test]
    fn hmhvg_keeps_all_when_panel_is_full_width() {
        let counts = array![[1.0, 5.0, 3.0], [3.0, 5.0, 1.0]];
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let panel = select_hmhvg(&counts, &names, 3).unwrap();
        // ranked by variance desc (a: 1, b: 0, c: 1), ties by name
        assert_eq!(panel.names, vec!["a", "c", "b"]);
    }

    #[test]
    fn hmhvg_ties_break_by_name() {
        let counts = array![[2.0, 2.0, 2.0], [4.0, 4.0, 4.0]];
        let names = vec!["zz".to_string(), "aa".to_string(), "mm".to_string()];
        let panel = select_hmhvg(&counts, &names, 2).unwrap();
        assert_eq!(panel.names, vec!["aa", "mm"]);
    }

    #[test]
    fn hmhvg_rejects_bad_sizes() {
        let counts = array![[1.0, 2.0]];
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(matches!(select_hmhvg(&counts, &names, 1), Err(DataError::TooFewSpots(1))));
        let counts = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(matches!(
            select_hmhvg(&counts, &names, 3),
            Err(DataError::PanelTooLarge { requested: 3, available: 2 })
        ));
    }

    #[test]
    fn log_transform_examples() {
        assert_eq!(log_transform(&[0.0]).unwrap(), vec![0.0]);
        let e = std::f64::consts::E;
        assert_relative_eq!(log_transform(&[e - 1.0]).unwrap()[0], 1.0, epsilon = 1e-12);
        assert!(matches!(log_transform(&[-0.1]), Err(DataError::NegativeCount)));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..40).map(|_| rand::Rng::random::<f64>(&mut rng) * 30.0).collect();
        let got = log_transform(&v).unwrap();
        for (g, x) in got.iter().zip(&v) {
            assert!((g - (1.0 + x).ln()).abs() < 1e-12);
        }
        // monotone
        let a = log_transform(&[1.0]).unwrap()[0];
        let b = log_transform(&[2.0]).unwrap()[0];
        assert!(b > a);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = tiny_config();
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SynthConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_generator_shares_expression_within_block() {
        let cfg = SynthConfig {
            spot_noise: 0.0,
            latent_perturbation: 0.0,
            slides: 1,
            spots_per_slide: 36,
            genes: 8,
            feature_dim: 4,
            grid: GridKind::Square,
            ..tiny_config()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        // spots 0 and 1 share the 3x3 block at the grid origin
        assert_eq!(ds.spots[0].counts, ds.spots[1].counts);
        // spot in another block differs
        assert_ne!(ds.spots[0].counts, ds.spots[5].counts);
    }

    #[test]
    fn niche_mates_correlate_more_than_random_pairs() {
        let ds = generate_synthetic(&tiny_config()).unwrap();
        let idx = ds.slide_spot_indices("slide00");
        let logs: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| log_transform(&ds.spots[i].counts.iter().map(|&c| c as f64).collect::<Vec<_>>()).unwrap())
            .collect();
        let coords: Vec<[f64; 2]> =
            idx.iter().map(|&i| [ds.spots[i].x_um, ds.spots[i].y_um]).collect();
        let ids: Vec<&str> = idx.iter().map(|&i| ds.spots[i].spot_id.as_str()).collect();
        let niches = knn_neighbors(&coords, &ids, 7).unwrap();

        let pearson = |a: &[f64], b: &[f64]| -> f64 {
            let n = a.len() as f64;
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
            let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
            cov / (va.sqrt() * vb.sqrt())
        };

        let mut neighbor_corr = Vec::new();
        for niche in &niches {
            for &nb in &niche.neighbors {
                neighbor_corr.push(pearson(&logs[niche.center], &logs[nb]));
            }
        }
        let mut random_corr = Vec::new();
        let m = logs.len();
        for i in 0..m {
            let j = (i + m / 2) % m;
            if i != j {
                random_corr.push(pearson(&logs[i], &logs[j]));
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&neighbor_corr) > mean(&random_corr) + 0.1,
            "niche correlation {} vs random {}",
            mean(&neighbor_corr),
            mean(&random_corr)
        );
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&tiny_config()).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, loaded);

        // saving the loaded dataset reproduces the files byte for byte
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(&loaded, dir2.path()).unwrap();
        for f in ["spots.csv", "expr.bin", "feats.bin", "genes.txt"] {
            let a = std::fs::read(dir.path().join(f)).unwrap();
            let b = std::fs::read(dir2.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs");
        }
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset { gene_names: vec!["g0".into()], spots: vec![] };
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn truncated_feature_file_reports_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&tiny_config()).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("feats.bin");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected"), "{msg}");
        assert!(msg.contains("got"), "{msg}");
        assert!(msg.contains("feats.bin"), "{msg}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&tiny_config()).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("expr.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn malformed_csv_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&tiny_config()).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("spots.csv");
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("only,three,fields\n");
        std::fs::write(&path, text).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("spots.csv"), "{msg}");
        assert!(msg.contains("expected 4"), "{msg}");
    }

    #[test]
    fn panel_uses_training_spots_only() {
        let mut cfg = tiny_config();
        cfg.slides = 5;
        let ds = generate_synthetic(&cfg).unwrap();
        let prepared = prepare(&ds, 3, 4, 10).unwrap();

        // perturb every non-training spot's counts; the panel must not move
        let train: HashSet<&String> = prepared.split.train.iter().collect();
        let mut ds2 = ds.clone();
        for s in &mut ds2.spots {
            if !train.contains(&s.slide_id) {
                for c in &mut s.counts {
                    *c = (*c + 17.0) * 3.0;
                }
            }
        }
        let prepared2 = prepare(&ds2, 3, 4, 10).unwrap();
        assert_eq!(prepared.panel, prepared2.panel);
    }

    #[test]
    fn prepared_niche_rows_are_member_means() {
        let ds = generate_synthetic(&tiny_config()).unwrap();
        let prepared = prepare(&ds, 1, 4, 10).unwrap();
        let first_train_slide = &prepared.split.train[0];
        let idx = ds.slide_spot_indices(first_train_slide);
        let coords: Vec<[f64; 2]> =
            idx.iter().map(|&i| [ds.spots[i].x_um, ds.spots[i].y_um]).collect();
        let ids: Vec<&str> = idx.iter().map(|&i| ds.spots[i].spot_id.as_str()).collect();
        let niches = knn_neighbors(&coords, &ids, 4).unwrap();

        // check spot 0 of the first training slide against a direct mean
        let members: Vec<usize> = niches[0].members().collect();
        for g in 0..prepared.panel.len() {
            let want = members
                .iter()
                .map(|&mi| {
                    (1.0 + prepared.panel.project(&ds.spots[idx[mi]].counts)[g]).ln()
                })
                .sum::<f64>()
                / members.len() as f64;
            assert_relative_eq!(prepared.train.y_niche[[0, g]], want, epsilon = 1e-12);
        }
    }

    /// Plain OLS via Gaussian elimination; test-only learnability oracle.
    fn ols_fit(x: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
        let d = x.ncols();
        let xtx = x.t().dot(x) + &(Array2::<f64>::eye(d) * 1e-6);
        let xty = x.t().dot(y);
        // solve xtx * w = xty column by column
        let mut a = xtx.clone();
        let mut b = xty.clone();
        for col in 0..d {
            // partial pivot
            let mut piv = col;
            for r in col + 1..d {
                if a[[r, col]].abs() > a[[piv, col]].abs() {
                    piv = r;
                }
            }
            for k in 0..d {
                let tmp = a[[col, k]];
                a[[col, k]] = a[[piv, k]];
                a[[piv, k]] = tmp;
            }
            for k in 0..b.ncols() {
                let tmp = b[[col, k]];
                b[[col, k]] = b[[piv, k]];
                b[[piv, k]] = tmp;
            }
            let diag = a[[col, col]];
            for r in col + 1..d {
                let factor = a[[r, col]] / diag;
                for k in col..d {
                    a[[r, k]] -= factor * a[[col, k]];
                }
                for k in 0..b.ncols() {
                    b[[r, k]] -= factor * b[[col, k]];
                }
            }
        }
        let mut w = Array2::zeros((d, b.ncols()));
        for col in (0..d).rev() {
            for k in 0..b.ncols() {
                let mut acc = b[[col, k]];
                for j in col + 1..d {
                    acc -= a[[col, j]] * w[[j, k]];
                }
                w[[col, k]] = acc / a[[col, col]];
            }
        }
        w
    }

    #[test]
    fn default_generator_is_linearly_learnable() {
        let cfg = SynthConfig::default();
        let ds = generate_synthetic(&cfg).unwrap();
        let prepared = prepare(&ds, 0, 7, 200).unwrap();

        let w = ols_fit(&prepared.train.feat_spot, &prepared.train.y_spot);
        let pred = prepared.test.feat_spot.dot(&w);
        let pcc = crate::metrics::pcc_at_k(&pred, &prepared.test.y_spot, 200).unwrap();
        assert!(pcc > 0.3, "held-out OLS PCC@200 = {pcc}");
    }

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
}
