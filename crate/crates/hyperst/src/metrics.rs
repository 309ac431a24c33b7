//! Evaluation metrics and the slide-level split protocol.
//!
//! Predictions are compared to measured expression per gene across spots
//! with the Pearson correlation; `PCC@k` is the mean of the `k` largest
//! per-gene correlations. Genes with zero variance in either matrix
//! contribute a correlation of 0 (not NaN, not excluded), keeping metrics
//! total and rankings stable. MSE and MAE average over all entries.
//!
//! Splits are made at slide level: slide ids are sorted, shuffled by the
//! split seed, and cut into test / val / train with
//! `n_test = n_val = max(1, floor(0.1 * S))`. Every spot inherits its
//! slide's split.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: (usize, usize), right: (usize, usize) },
    #[error("k = {k} exceeds gene count {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("need at least 3 slides to split, got {0}")]
    TooFewSlides(usize),
}

/// Slide-level split request; fractions are fixed at 0.8 / 0.1 / 0.1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
}

/// Result of [`split_slides`]: a partition of the slide ids.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SlideSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Deterministic slide-level split: sort ids, shuffle by seed, then cut
/// test first, val second, train last.
pub fn split_slides(slide_ids: &[String], spec: &SplitSpec) -> Result<SlideSplit, MetricsError> {
    let s = slide_ids.len();
    if s < 3 {
        return Err(MetricsError::TooFewSlides(s));
    }
    let mut ids: Vec<String> = slide_ids.to_vec();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ids.shuffle(&mut rng);

    let n_test = ((0.1 * s as f64).floor() as usize).max(1);
    let n_val = ((0.1 * s as f64).floor() as usize).max(1);
    let test = ids[..n_test].to_vec();
    let val = ids[n_test..n_test + n_val].to_vec();
    let train = ids[n_test + n_val..].to_vec();
    Ok(SlideSplit { train, val, test })
}

fn check_shapes(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<(), MetricsError> {
    if pred.dim() != truth.dim() {
        return Err(MetricsError::ShapeMismatch { left: pred.dim(), right: truth.dim() });
    }
    Ok(())
}

/// Pearson correlation between prediction and truth for every gene
/// (column), across spots (rows). Zero-variance genes contribute 0.
pub fn per_gene_pcc(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<Vec<f64>, MetricsError> {
    check_shapes(pred, truth)?;
    let (m, n) = pred.dim();
    if m < 2 {
        return Err(MetricsError::TooFewRows { need: 2, got: m });
    }
    let mut out = Vec::with_capacity(n);
    for g in 0..n {
        let p = pred.column(g);
        let t = truth.column(g);
        let mp = p.sum() / m as f64;
        let mt = t.sum() / m as f64;
        let mut cov = 0.0;
        let mut vp = 0.0;
        let mut vt = 0.0;
        for i in 0..m {
            let dp = p[i] - mp;
            let dt = t[i] - mt;
            cov += dp * dt;
            vp += dp * dp;
            vt += dt * dt;
        }
        if vp == 0.0 || vt == 0.0 {
            out.push(0.0);
        } else {
            out.push(cov / (vp.sqrt() * vt.sqrt()));
        }
    }
    Ok(out)
}

/// Mean of the `k` largest per-gene Pearson correlations.
pub fn pcc_at_k(pred: &Array2<f64>, truth: &Array2<f64>, k: usize) -> Result<f64, MetricsError> {
    let pccs = per_gene_pcc(pred, truth)?;
    if k > pccs.len() || k == 0 {
        return Err(MetricsError::KTooLarge { k, n: pccs.len() });
    }
    Ok(top_k_mean(&pccs, k))
}

fn top_k_mean(values: &[f64], k: usize) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite metric"));
    sorted[..k].iter().sum::<f64>() / k as f64
}

/// Mean squared error over all entries.
pub fn mse(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64, MetricsError> {
    check_shapes(pred, truth)?;
    let n = pred.len() as f64;
    Ok(pred.iter().zip(truth.iter()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

/// Mean absolute error over all entries.
pub fn mae(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64, MetricsError> {
    check_shapes(pred, truth)?;
    let n = pred.len() as f64;
    Ok(pred.iter().zip(truth.iter()).map(|(p, t)| (p - t).abs()).sum::<f64>() / n)
}

/// Column means: the slide-level pseudo-bulk profile of a prediction
/// matrix.
pub fn pseudo_bulk(pred: &Array2<f64>) -> Result<Vec<f64>, MetricsError> {
    let (m, n) = pred.dim();
    if m == 0 {
        return Err(MetricsError::TooFewRows { need: 1, got: 0 });
    }
    Ok((0..n).map(|g| pred.column(g).sum() / m as f64).collect())
}

/// The standard report ks; only those not exceeding the panel size are
/// emitted.
pub const REPORT_KS: [usize; 3] = [10, 50, 200];

/// Per-split evaluation report.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub per_gene_pcc: Vec<f64>,
    /// `k -> PCC@k` for the standard ks that fit the panel (the panel
    /// size itself is always included).
    pub pcc_at: BTreeMap<usize, f64>,
    pub mse: f64,
    pub mae: f64,
}

impl MetricsReport {
    pub fn compute(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<Self, MetricsError> {
        let per_gene = per_gene_pcc(pred, truth)?;
        let n = per_gene.len();
        let mut ks: Vec<usize> = REPORT_KS.iter().copied().filter(|&k| k <= n).collect();
        if !ks.contains(&n) {
            ks.push(n);
        }
        let mut pcc_at = BTreeMap::new();
        for k in ks {
            pcc_at.insert(k, top_k_mean(&per_gene, k));
        }
        let report =
            Self { per_gene_pcc: per_gene, pcc_at, mse: mse(pred, truth)?, mae: mae(pred, truth)? };
        report.assert_monotone();
        Ok(report)
    }

    /// Top-k means of a sorted-descending list cannot increase with k.
    fn assert_monotone(&self) {
        let mut last = f64::INFINITY;
        for (&k, &v) in &self.pcc_at {
            assert!(
                v <= last + 1e-12,
                "PCC@{k} = {v} exceeds the previous smaller-k mean {last}"
            );
            last = v;
        }
    }

    /// The most inclusive PCC@k in the report (k = panel size), the
    /// model-selection metric.
    pub fn headline_pcc(&self) -> f64 {
        *self.pcc_at.iter().next_back().expect("nonempty").1
    }
}

/// One-sided paired sign test: p-value for the hypothesis that `a` tends
/// to exceed `b`, i.e. `P(wins >= observed)` under a fair coin over the
/// non-tied pairs. An empty or all-tied sample returns 1.0.
pub fn sign_test_p_greater(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "paired samples must align");
    let mut wins = 0u32;
    let mut n = 0u32;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            wins += 1;
            n += 1;
        } else if x < y {
            n += 1;
        }
    }
    if n == 0 {
        return 1.0;
    }
    let total = 2f64.powi(n as i32);
    let mut tail = 0.0;
    for i in wins..=n {
        tail += binomial(n, i);
    }
    tail / total
}

fn binomial(n: u32, k: u32) -> f64 {
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn perfect_and_anti_correlation() {
        let truth = array![[1.0, 0.0], [2.0, 1.0], [3.0, 4.0]];
        let report = MetricsReport::compute(&truth, &truth).unwrap();
        for &v in report.pcc_at.values() {
            assert_relative_eq!(v, 1.0, epsilon = 1e-12);
        }
        let neg = truth.mapv(|x| -x);
        let pccs = per_gene_pcc(&neg, &truth).unwrap();
        for p in pccs {
            assert_relative_eq!(p, -1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn pcc_matches_from_definition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pred = Array2::from_shape_fn((5, 4), |_| rng.random::<f64>());
        let truth = Array2::from_shape_fn((5, 4), |_| rng.random::<f64>());
        let got = per_gene_pcc(&pred, &truth).unwrap();
        for g in 0..4 {
            // covariance oracle straight from the definition
            let p: Vec<f64> = pred.column(g).to_vec();
            let t: Vec<f64> = truth.column(g).to_vec();
            let mp = p.iter().sum::<f64>() / 5.0;
            let mt = t.iter().sum::<f64>() / 5.0;
            let cov: f64 = p.iter().zip(&t).map(|(x, y)| (x - mp) * (y - mt)).sum::<f64>() / 5.0;
            let sp = (p.iter().map(|x| (x - mp) * (x - mp)).sum::<f64>() / 5.0).sqrt();
            let st = (t.iter().map(|y| (y - mt) * (y - mt)).sum::<f64>() / 5.0).sqrt();
            assert!((got[g] - cov / (sp * st)).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_variance_contributes_zero() {
        let pred = array![[1.0, 5.0], [1.0, 6.0], [1.0, 7.0]];
        let truth = array![[0.0, 5.0], [1.0, 6.0], [2.0, 7.0]];
        let pccs = per_gene_pcc(&pred, &truth).unwrap();
        assert_eq!(pccs[0], 0.0);
        assert_relative_eq!(pccs[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pcc_affine_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pred = Array2::from_shape_fn((8, 5), |_| rng.random::<f64>());
        let truth = Array2::from_shape_fn((8, 5), |_| rng.random::<f64>());
        let base = per_gene_pcc(&pred, &truth).unwrap();
        // positive per-gene affine rescaling leaves Pearson unchanged
        let mut scaled = pred.clone();
        for g in 0..5 {
            let a = 0.5 + rng.random::<f64>() * 3.0;
            let b = rng.random::<f64>() * 10.0 - 5.0;
            for i in 0..8 {
                scaled[[i, g]] = a * pred[[i, g]] + b;
            }
        }
        let after = per_gene_pcc(&scaled, &truth).unwrap();
        for (x, y) in base.iter().zip(&after) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn pcc_at_k_is_non_increasing_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pred = Array2::from_shape_fn((30, 60), |_| rng.random::<f64>());
        let truth = Array2::from_shape_fn((30, 60), |_| rng.random::<f64>());
        let report = MetricsReport::compute(&pred, &truth).unwrap();
        // ks present: 10, 50, 60
        let p10 = report.pcc_at[&10];
        let p50 = report.pcc_at[&50];
        let p60 = report.pcc_at[&60];
        assert!(p10 >= p50 && p50 >= p60);
        assert_eq!(report.headline_pcc(), p60);
    }

    #[test]
    fn mse_mae_examples_and_oracle() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);

        let b = a.mapv(|x| x + 0.5);
        assert_relative_eq!(mse(&b, &a).unwrap(), 0.25, epsilon = 1e-12);
        assert_relative_eq!(mae(&b, &a).unwrap(), 0.5, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = Array2::from_shape_fn((6, 3), |_| rng.random::<f64>());
        let t = Array2::from_shape_fn((6, 3), |_| rng.random::<f64>());
        let mut se = 0.0;
        let mut ae = 0.0;
        for i in 0..6 {
            for j in 0..3 {
                se += (p[[i, j]] - t[[i, j]]).powi(2);
                ae += (p[[i, j]] - t[[i, j]]).abs();
            }
        }
        assert!((mse(&p, &t).unwrap() - se / 18.0).abs() < 1e-12);
        assert!((mae(&p, &t).unwrap() - ae / 18.0).abs() < 1e-12);
    }

    #[test]
    fn split_examples() {
        let ids: Vec<String> = (0..10).map(|i| format!("w{i:02}")).collect();
        let split = split_slides(&ids, &SplitSpec { seed: 0 }).unwrap();
        assert_eq!(split.train.len(), 8);
        assert_eq!(split.val.len(), 1);
        assert_eq!(split.test.len(), 1);

        let small: Vec<String> = (0..3).map(|i| format!("w{i}")).collect();
        let split = split_slides(&small, &SplitSpec { seed: 5 }).unwrap();
        assert_eq!((split.train.len(), split.val.len(), split.test.len()), (1, 1, 1));

        let again = split_slides(&small, &SplitSpec { seed: 5 }).unwrap();
        assert_eq!(split, again);

        assert_eq!(
            split_slides(&small[..2].to_vec(), &SplitSpec { seed: 0 }),
            Err(MetricsError::TooFewSlides(2))
        );
    }

    #[test]
    fn split_partitions_exactly() {
        let ids: Vec<String> = (0..7).map(|i| format!("s{i}")).collect();
        for seed in 0..5 {
            let split = split_slides(&ids, &SplitSpec { seed }).unwrap();
            let mut all: Vec<String> = split
                .train
                .iter()
                .chain(&split.val)
                .chain(&split.test)
                .cloned()
                .collect();
            all.sort();
            let mut want = ids.clone();
            want.sort();
            assert_eq!(all, want);
        }
    }

    #[test]
    fn split_is_input_order_independent() {
        let ids: Vec<String> = (0..6).map(|i| format!("s{i}")).collect();
        let mut reversed = ids.clone();
        reversed.reverse();
        let a = split_slides(&ids, &SplitSpec { seed: 9 }).unwrap();
        let b = split_slides(&reversed, &SplitSpec { seed: 9 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pseudo_bulk_examples() {
        let one = array![[1.0, 2.0, 3.0]];
        assert_eq!(pseudo_bulk(&one).unwrap(), vec![1.0, 2.0, 3.0]);

        let two = array![[0.0, 2.0], [2.0, 0.0]];
        assert_eq!(pseudo_bulk(&two).unwrap(), vec![1.0, 1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = Array2::from_shape_fn((5, 4), |_| rng.random::<f64>());
        let got = pseudo_bulk(&m).unwrap();
        for g in 0..4 {
            let want = (0..5).map(|i| m[[i, g]]).sum::<f64>() / 5.0;
            assert!((got[g] - want).abs() < 1e-12);
        }

        let empty = Array2::<f64>::zeros((0, 3));
        assert!(pseudo_bulk(&empty).is_err());
    }

    #[test]
    fn sign_test_tails() {
        // 5/5 wins: p = 1/32
        assert_relative_eq!(
            sign_test_p_greater(&[1.0; 5], &[0.0; 5]),
            1.0 / 32.0,
            epsilon = 1e-12
        );
        // 4/5 wins: p = 6/32
        let a = [1.0, 1.0, 1.0, 1.0, 0.0];
        let b = [0.0, 0.0, 0.0, 0.0, 1.0];
        assert_relative_eq!(sign_test_p_greater(&a, &b), 6.0 / 32.0, epsilon = 1e-12);
        // ties drop out
        assert_eq!(sign_test_p_greater(&[1.0, 1.0], &[1.0, 1.0]), 1.0);
    }

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
}
