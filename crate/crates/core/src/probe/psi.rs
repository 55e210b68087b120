use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::model::LayerId;

use super::LayerSamples;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestKind {
    /// Classical unpaired test with pooled variance.
    #[default]
    Pooled,
    /// Unequal variances, Welch-Satterthwaite degrees of freedom.
    Welch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsiConfig {
    pub alpha: f64,
    pub min_samples: usize,
    pub t_test: TTestKind,
}

impl Default for PsiConfig {
    fn default() -> Self {
        PsiConfig { alpha: 0.05, min_samples: 10, t_test: TTestKind::Pooled }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let ss = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    (m, ss / (n - 1.0))
}

/// Two-sided unpaired t-test of `a` against `b` (each needs >= 2 samples).
/// Zero spread with equal means gives t = 0, p = 1; with different means
/// t = ±inf, p = 0.
pub fn t_test(a: &[f64], b: &[f64], kind: TTestKind) -> TTestResult {
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (m1, v1) = mean_var(a);
    let (m2, v2) = mean_var(b);
    let (se, df) = match kind {
        TTestKind::Pooled => {
            let df = n1 + n2 - 2.0;
            let sp2 = ((n1 - 1.0) * v1 + (n2 - 1.0) * v2) / df;
            ((sp2 * (1.0 / n1 + 1.0 / n2)).sqrt(), df)
        }
        TTestKind::Welch => {
            let (q1, q2) = (v1 / n1, v2 / n2);
            let s = q1 + q2;
            let df = if s > 0.0 { s * s / (q1 * q1 / (n1 - 1.0) + q2 * q2 / (n2 - 1.0)) } else { n1 + n2 - 2.0 };
            (s.sqrt(), df)
        }
    };
    let d = m1 - m2;
    if se == 0.0 {
        return if d == 0.0 {
            TTestResult { t: 0.0, df, p: 1.0 }
        } else {
            TTestResult { t: d.signum() * f64::INFINITY, df, p: 0.0 }
        };
    }
    let t = d / se;
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    TTestResult { t, df, p: (2.0 * dist.sf(t.abs())).min(1.0) }
}

/// Phone selectivity of every node of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiReport {
    pub layer: LayerId,
    pub phones: Vec<String>,
    /// `psi[node][phone]`: number of other phones the node separates from `phone`.
    pub psi: Vec<Vec<u32>>,
    /// `tstat[node][phone][other]`; NaN on the diagonal and for excluded pairs.
    pub tstat: Vec<Vec<Vec<f64>>>,
    /// Unordered phone pairs left out for having too few samples.
    pub excluded_pairs: usize,
    pub config: PsiConfig,
}

impl PsiReport {
    /// Mean |t| of a (node, phone) cell over finite included pairs.
    pub fn mean_abs_t(&self, node: usize, phone: usize) -> f64 {
        let v: Vec<f64> = self.tstat[node][phone].iter().copied().filter(|t| t.is_finite()).map(f64::abs).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    /// Columnar (layer, node, phone, psi, mean_t) text.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("layer\tnode\tphone\tpsi\tmean_t\n");
        for (n, row) in self.psi.iter().enumerate() {
            for (p, &v) in row.iter().enumerate() {
                s.push_str(&format!("{}\t{n}\t{}\t{v}\t{:.6}\n", self.layer, self.phones[p], self.mean_abs_t(n, p)));
            }
        }
        s
    }
}

pub fn compute_psi(samples: &LayerSamples, phones: &[String], cfg: &PsiConfig) -> Result<PsiReport> {
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::Config("alpha must lie in (0, 1)".into()));
    }
    let min_n = cfg.min_samples.max(2);
    let n_phones = phones.len();
    let mut psi = vec![vec![0u32; n_phones]; samples.n_nodes()];
    let mut tstat = vec![vec![vec![f64::NAN; n_phones]; n_phones]; samples.n_nodes()];
    let mut excluded = 0;
    for (node, groups) in samples.samples.iter().enumerate() {
        if groups.len() != n_phones {
            return Err(Error::Shape(format!("node {node} has {} phone groups, expected {n_phones}", groups.len())));
        }
        for p in 0..n_phones {
            for q in p + 1..n_phones {
                if groups[p].len() < min_n || groups[q].len() < min_n {
                    if node == 0 {
                        excluded += 1;
                    }
                    continue;
                }
                let r = t_test(&groups[p], &groups[q], cfg.t_test);
                tstat[node][p][q] = r.t;
                tstat[node][q][p] = -r.t;
                if r.p < cfg.alpha {
                    psi[node][p] += 1;
                    psi[node][q] += 1;
                }
            }
        }
    }
    Ok(PsiReport { layer: samples.layer, phones: phones.to_vec(), psi, tstat, excluded_pairs: excluded, config: cfg.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: LayerId,
    pub n_nodes: usize,
    /// PSI averaged over nodes, then over phones.
    pub mean_psi: f64,
    /// Standard error of the per-phone means across phones.
    pub se_psi: f64,
    pub mean_abs_t: f64,
}

/// One row per layer, ordered from input to output.
pub fn layer_summary(reports: &[PsiReport]) -> Result<Vec<LayerSummary>> {
    if reports.is_empty() {
        return Err(Error::Empty("no layer reports".into()));
    }
    let mut rows: Vec<LayerSummary> = reports
        .iter()
        .map(|r| {
            let n_nodes = r.psi.len();
            let n_phones = r.phones.len();
            let phone_means: Vec<f64> = (0..n_phones)
                .map(|p| r.psi.iter().map(|row| row[p] as f64).sum::<f64>() / n_nodes.max(1) as f64)
                .collect();
            let k = phone_means.len() as f64;
            let mean = phone_means.iter().sum::<f64>() / k;
            let se = if phone_means.len() > 1 {
                let var = phone_means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (k - 1.0);
                (var / k).sqrt()
            } else {
                0.0
            };
            let ts: Vec<f64> = (0..n_nodes)
                .flat_map(|n| (0..n_phones).map(move |p| (n, p)))
                .map(|(n, p)| r.mean_abs_t(n, p))
                .filter(|t| t.is_finite())
                .collect();
            let mean_abs_t = if ts.is_empty() { f64::NAN } else { ts.iter().sum::<f64>() / ts.len() as f64 };
            LayerSummary { layer: r.layer, n_nodes, mean_psi: mean, se_psi: se, mean_abs_t }
        })
        .collect();
    rows.sort_by_key(|r| r.layer);
    Ok(rows)
}

pub fn summary_tsv(rows: &[LayerSummary]) -> String {
    let mut s = String::from("layer\tn_nodes\tmean_psi\tse_psi\tmean_abs_t\n");
    for r in rows {
        s.push_str(&format!("{}\t{}\t{:.6}\t{:.6}\t{:.6}\n", r.layer, r.n_nodes, r.mean_psi, r.se_psi, r.mean_abs_t));
    }
    s
}
