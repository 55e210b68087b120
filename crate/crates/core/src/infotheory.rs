//! Mutual-information lexicon quality measures, in bits.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-12;

/// Joint distribution over words (rows) and referents (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    p: Array2<f64>,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
}

impl JointDistribution {
    pub fn new(p: Array2<f64>, rows: Vec<String>, cols: Vec<String>) -> Result<Self> {
        if p.nrows() == 0 || p.ncols() == 0 {
            return Err(Error::Empty("joint distribution".into()));
        }
        if rows.len() != p.nrows() || cols.len() != p.ncols() {
            return Err(Error::Shape(format!("{}x{} joint with {} row and {} column labels", p.nrows(), p.ncols(), rows.len(), cols.len())));
        }
        if p.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("joint entries must be finite and nonnegative".into()));
        }
        let total = p.sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidArgument(format!("joint sums to {total}, not 1")));
        }
        Ok(JointDistribution { p, rows, cols })
    }

    /// Unlabelled joint; rows and columns are named by index.
    pub fn from_matrix(p: Array2<f64>) -> Result<Self> {
        let rows = (0..p.nrows()).map(|i| i.to_string()).collect();
        let cols = (0..p.ncols()).map(|i| i.to_string()).collect();
        Self::new(p, rows, cols)
    }

    /// Normalised contingency table.
    pub fn from_counts(counts: ArrayView2<f64>) -> Result<Self> {
        let total = counts.sum();
        if !(total > 0.0) {
            return Err(Error::Empty("contingency table has no mass".into()));
        }
        Self::from_matrix(counts.mapv(|c| c / total))
    }

    pub fn p(&self) -> ArrayView2<'_, f64> {
        self.p.view()
    }

    pub fn row_marginal(&self) -> Vec<f64> {
        self.p.sum_axis(Axis(1)).to_vec()
    }

    pub fn col_marginal(&self) -> Vec<f64> {
        self.p.sum_axis(Axis(0)).to_vec()
    }

    pub fn transpose(&self) -> Self {
        JointDistribution { p: self.p.t().to_owned(), rows: self.cols.clone(), cols: self.rows.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconQuality {
    pub mi_bits: f64,
    pub normalizer_bits: f64,
    pub q: f64,
}

/// Mutual information in bits; zero cells contribute nothing.
pub fn mutual_information(joint: &JointDistribution) -> f64 {
    let pr = joint.row_marginal();
    let pc = joint.col_marginal();
    let mut mi = 0.0;
    for ((i, j), &p) in joint.p.indexed_iter() {
        if p > 0.0 {
            mi += p * (p / (pr[i] * pc[j])).log2();
        }
    }
    mi.max(0.0)
}

/// MI normalised by `max(log2 |L|, log2 |C|)`.
pub fn lexicon_quality_eq1(joint: &JointDistribution) -> Result<LexiconQuality> {
    let (l, c) = joint.p.dim();
    let normalizer_bits = (l.max(c) as f64).log2();
    if normalizer_bits <= 0.0 {
        return Err(Error::InvalidArgument("1x1 joint has no information capacity".into()));
    }
    let mi_bits = mutual_information(joint);
    Ok(LexiconQuality { mi_bits, normalizer_bits, q: mi_bits / normalizer_bits })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelQuality {
    #[serde(flatten)]
    pub quality: LexiconQuality,
    pub n_utterances: usize,
    /// Cells with posterior mass on a class of zero prior, left out of the sum.
    pub skipped_cells: usize,
    pub estimator: String,
    pub renormalization: String,
}

/// Plug-in estimate of model-based lexicon quality from utterance
/// posteriors. Each row is renormalised to sum to one first.
pub fn model_quality_eq2(posteriors: ArrayView2<f64>, prior: &[f64]) -> Result<ModelQuality> {
    let (n, v) = posteriors.dim();
    if n == 0 {
        return Err(Error::Empty("no utterances".into()));
    }
    if prior.len() != v {
        return Err(Error::Shape(format!("{v} posterior columns, {} prior entries", prior.len())));
    }
    if v < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    if prior.iter().any(|&p| !(p >= 0.0)) || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("prior must be a probability vector".into()));
    }
    let mut mi = 0.0;
    let mut skipped = 0;
    for (i, row) in posteriors.rows().into_iter().enumerate() {
        if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::InvalidArgument(format!("posterior row {i} has invalid entries")));
        }
        let s = row.sum();
        if !(s > 0.0) {
            return Err(Error::InvalidArgument(format!("posterior row {i} has no mass")));
        }
        for (&p, &pc) in row.iter().zip(prior) {
            let p = p / s;
            if p <= 0.0 {
                continue;
            }
            if pc <= 0.0 {
                skipped += 1;
                continue;
            }
            mi += p * (p / pc).log2();
        }
    }
    let mi_bits = mi / n as f64;
    let normalizer_bits = (v as f64).log2();
    Ok(ModelQuality {
        quality: LexiconQuality { mi_bits, normalizer_bits, q: mi_bits / normalizer_bits },
        n_utterances: n,
        skipped_cells: skipped,
        estimator: "plug-in mean over utterances of sum_c P(c|X) log2(P(c|X)/P(c))".into(),
        renormalization: "utterance posteriors divided by their row sum".into(),
    })
}

/// Class frequencies of `labels` over `n_classes` classes.
pub fn label_prior(labels: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::Empty("labels".into()));
    }
    let mut p = vec![0.0; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(Error::InvalidArgument(format!("label {l} >= {n_classes}")));
        }
        p[l] += 1.0;
    }
    let n = labels.len() as f64;
    p.iter_mut().for_each(|v| *v /= n);
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn analytic_cases() {
        let ind = JointDistribution::from_matrix(array![[0.12, 0.28], [0.18, 0.42]]).unwrap();
        assert!(mutual_information(&ind).abs() < 1e-12);
        for k in [2usize, 4, 7] {
            let d = JointDistribution::from_matrix(Array2::from_diag_elem(k, 1.0 / k as f64)).unwrap();
            assert!((mutual_information(&d) - (k as f64).log2()).abs() < 1e-12);
            assert!((lexicon_quality_eq1(&d).unwrap().q - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_by_two() {
        let j = JointDistribution::from_matrix(array![[0.4, 0.1], [0.1, 0.4]]).unwrap();
        // 0.8 log2(1.6) + 0.2 log2(0.4)
        let oracle = 0.8 * 1.6f64.ln() / 2f64.ln() + 0.2 * 0.4f64.ln() / 2f64.ln();
        assert!((mutual_information(&j) - oracle).abs() < 1e-12);
        assert!((oracle - 0.2781).abs() < 1e-4);
        let q = lexicon_quality_eq1(&j).unwrap();
        assert_eq!(q.normalizer_bits, 1.0);
        assert!((q.q - oracle).abs() < 1e-12);
        assert!((mutual_information(&j.transpose()) - oracle).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        assert!(JointDistribution::from_matrix(array![[0.5, 0.4]]).is_err());
        assert!(JointDistribution::from_matrix(array![[1.5, -0.5]]).is_err());
        let one = JointDistribution::from_matrix(array![[1.0]]).unwrap();
        assert!(lexicon_quality_eq1(&one).is_err());
        let rect = JointDistribution::from_matrix(array![[0.5, 0.0, 0.0], [0.0, 0.5, 0.0]]).unwrap();
        let q = lexicon_quality_eq1(&rect).unwrap();
        assert_eq!(q.normalizer_bits, 3f64.log2());
        assert!((q.mi_bits - 1.0).abs() < 1e-12);
    }

    #[test]
    fn model_quality_bounds() {
        let k = 4;
        let labels: Vec<usize> = (0..40).map(|i| i % k).collect();
        let prior = label_prior(&labels, k).unwrap();
        let mut oracle = Array2::zeros((40, k));
        for (i, &l) in labels.iter().enumerate() {
            oracle[[i, l]] = 1.0;
        }
        let q = model_quality_eq2(oracle.view(), &prior).unwrap();
        assert!((q.quality.q - 1.0).abs() < 1e-12);
        let flat = Array2::from_shape_fn((40, k), |(_, c)| prior[c]);
        assert!(model_quality_eq2(flat.view(), &prior).unwrap().quality.q.abs() < 1e-12);
        // unnormalised max-pooled scores are rescaled first
        let scaled = oracle.mapv(|v| 0.5 * v + 0.1);
        let a = model_quality_eq2(scaled.view(), &prior).unwrap();
        let b = model_quality_eq2((scaled.clone() * 3.0).view(), &prior).unwrap();
        assert!((a.quality.q - b.quality.q).abs() < 1e-12);
    }

    #[test]
    fn model_quality_skips_zero_prior_cells() {
        let post = array![[0.5, 0.5, 0.0], [0.2, 0.3, 0.5]];
        let q = model_quality_eq2(post.view(), &[0.5, 0.5, 0.0]).unwrap();
        assert_eq!(q.skipped_cells, 1);
        assert!(model_quality_eq2(post.view(), &[0.5, 0.5]).is_err());
    }
}
