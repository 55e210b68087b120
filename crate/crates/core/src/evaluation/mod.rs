//! Word detection scoring, threshold sweeps, confusions and boundaries.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::model::Model;
use crate::parallel::Parallelism;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub gamma_grid: Vec<f64>,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig { gamma_grid: default_grid() }
    }
}

/// 0.05, 0.10, ..., 0.95
pub fn default_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).map(|g| (g * 100.0).round() / 100.0).collect()
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_grid.is_empty() {
            return Err(Error::Config("gamma_grid is empty".into()));
        }
        if self.gamma_grid.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
            return Err(Error::Config("gamma values must lie in (0, 1)".into()));
        }
        if self.gamma_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("gamma_grid must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// `posterior > gamma`, elementwise.
pub fn detect_words(posteriors: ArrayView2<f64>, gamma: f64) -> Array2<bool> {
    posteriors.mapv(|p| p > gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordScore {
    pub word: String,
    pub gamma: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    /// Number of test targets of this word.
    pub support: usize,
    pub detections: usize,
    pub hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroScore {
    pub gamma: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
    /// Words that entered the average.
    pub n_words: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaScore {
    pub words: Vec<WordScore>,
    pub macro_avg: MacroScore,
}

pub fn f_score(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Per-word and macro precision/recall/F of `detections` against single
/// labels. Words without test targets are listed but excluded from the macro.
pub fn score(detections: ArrayView2<bool>, labels: &[usize], vocabulary: &[String], gamma: f64) -> Result<GammaScore> {
    let (n, v) = detections.dim();
    if n == 0 {
        return Err(Error::Empty("test set".into()));
    }
    if labels.len() != n || vocabulary.len() != v {
        return Err(Error::Shape(format!(
            "detections {n}x{v}, labels {}, vocabulary {}",
            labels.len(),
            vocabulary.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= v) {
        return Err(Error::InvalidArgument(format!("label {l} >= {v}")));
    }
    let mut words = Vec::with_capacity(v);
    for (c, word) in vocabulary.iter().enumerate() {
        let support = labels.iter().filter(|&&l| l == c).count();
        let col = detections.column(c);
        let det = col.iter().filter(|&&d| d).count();
        let hits = col.iter().zip(labels).filter(|(&d, &l)| d && l == c).count();
        let recall = if support > 0 { hits as f64 / support as f64 } else { 0.0 };
        let precision = if det > 0 { hits as f64 / det as f64 } else { 0.0 };
        words.push(WordScore {
            word: word.clone(),
            gamma,
            precision,
            recall,
            f: f_score(precision, recall),
            support,
            detections: det,
            hits,
        });
    }
    let counted: Vec<&WordScore> = words.iter().filter(|w| w.support > 0).collect();
    let k = counted.len() as f64;
    let mean = |f: fn(&WordScore) -> f64| counted.iter().map(|w| f(w)).sum::<f64>() / k;
    let macro_avg = MacroScore {
        gamma,
        precision: mean(|w| w.precision),
        recall: mean(|w| w.recall),
        f: mean(|w| w.f),
        n_words: counted.len(),
    };
    Ok(GammaScore { words, macro_avg })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<GammaScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub table: MetricsTable,
    pub best: MacroScore,
}

impl MetricsTable {
    /// Columnar (word, gamma, precision, recall, f, support) text.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("word\tgamma\tprecision\trecall\tf\tsupport\n");
        for row in &self.rows {
            for w in &row.words {
                s.push_str(&format!(
                    "{}\t{:.2}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
                    w.word, w.gamma, w.precision, w.recall, w.f, w.support
                ));
            }
        }
        s
    }

    /// Macro curve: (gamma, precision, recall, f, n_words).
    pub fn macro_tsv(&self) -> String {
        let mut s = String::from("gamma\tprecision\trecall\tf\tn_words\n");
        for row in &self.rows {
            let m = &row.macro_avg;
            s.push_str(&format!("{:.2}\t{:.6}\t{:.6}\t{:.6}\t{}\n", m.gamma, m.precision, m.recall, m.f, m.n_words));
        }
        s
    }
}

/// Scores every γ of the grid; the best γ maximises macro F, ties going to
/// the smaller γ.
pub fn gamma_sweep(
    posteriors: ArrayView2<f64>,
    labels: &[usize],
    vocabulary: &[String],
    config: &DetectionConfig,
) -> Result<SweepResult> {
    config.validate()?;
    let rows = config
        .gamma_grid
        .iter()
        .map(|&g| score(detect_words(posteriors, g).view(), labels, vocabulary, g))
        .collect::<Result<Vec<_>>>()?;
    let mut best = rows[0].macro_avg.clone();
    for r in &rows[1..] {
        if r.macro_avg.f > best.f {
            best = r.macro_avg.clone();
        }
    }
    Ok(SweepResult { table: MetricsTable { rows }, best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    /// `counts[true][predicted]`
    pub counts: Vec<Vec<usize>>,
    pub chance: f64,
}

impl ConfusionMatrix {
    pub fn supports(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Row-normalised percentages; empty rows stay zero.
    pub fn row_percent(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|r| {
                let s: usize = r.iter().sum();
                r.iter().map(|&c| if s > 0 { 100.0 * c as f64 / s as f64 } else { 0.0 }).collect()
            })
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("# chance_percent\t{:.2}\ntrue\\pred", 100.0 * self.chance);
        for c in &self.classes {
            s.push('\t');
            s.push_str(c);
        }
        s.push('\n');
        for (c, row) in self.classes.iter().zip(self.row_percent()) {
            s.push_str(c);
            for v in row {
                s.push_str(&format!("\t{v:.2}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Top-1 confusion counts; ties in the argmax go to the lower class index.
pub fn confusion(posteriors: ArrayView2<f64>, labels: &[usize], vocabulary: &[String]) -> Result<ConfusionMatrix> {
    let (n, v) = posteriors.dim();
    if n == 0 {
        return Err(Error::Empty("no utterances".into()));
    }
    if labels.len() != n || vocabulary.len() != v {
        return Err(Error::Shape(format!("posteriors {n}x{v}, labels {}", labels.len())));
    }
    let mut counts = vec![vec![0usize; v]; v];
    for (row, &l) in posteriors.rows().into_iter().zip(labels) {
        if l >= v {
            return Err(Error::InvalidArgument(format!("label {l} >= {v}")));
        }
        counts[l][argmax(row.iter().copied())] += 1;
    }
    Ok(ConfusionMatrix { classes: vocabulary.to_vec(), counts, chance: 1.0 / v as f64 })
}

pub(crate) fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Times (seconds) at which the frame-wise argmax changes.
pub fn extract_boundaries(frame_posteriors: ArrayView2<f64>, stride: usize, hop_ms: f64) -> Vec<f64> {
    let arg: Vec<usize> = frame_posteriors.rows().into_iter().map(|r| argmax(r.iter().copied())).collect();
    (1..arg.len())
        .filter(|&i| arg[i] != arg[i - 1])
        .map(|i| (i * stride) as f64 * hop_ms / 1000.0)
        .collect()
}

/// Utterance-level posteriors of a set of test utterances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDump {
    pub vocabulary: Vec<String>,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    /// One row per utterance, `[n_utt][d_visual]`.
    pub posteriors: Vec<Vec<f64>>,
}

impl PosteriorDump {
    pub fn matrix(&self) -> Result<Array2<f64>> {
        let v = self.vocabulary.len();
        if self.ids.len() != self.posteriors.len() || self.labels.len() != self.posteriors.len() {
            return Err(Error::Shape("posterior dump rows, ids and labels differ in length".into()));
        }
        let mut m = Array2::zeros((self.posteriors.len(), v));
        for (i, row) in self.posteriors.iter().enumerate() {
            if row.len() != v {
                return Err(Error::Shape(format!("posterior row {i} has {} entries, expected {v}", row.len())));
            }
            m.row_mut(i).iter_mut().zip(row).for_each(|(d, &x)| *d = x);
        }
        Ok(m)
    }
}

/// Runs `model` over `ids` and collects utterance posteriors.
pub fn collect_posteriors<T: Real>(
    model: &Model<T>,
    store: &FeatureStore,
    ids: &[String],
    labels: &[usize],
    vocabulary: &[String],
    mode: Parallelism,
) -> Result<PosteriorDump> {
    model.check_vocabulary(vocabulary.len())?;
    if ids.len() != labels.len() {
        return Err(Error::Shape(format!("{} ids, {} labels", ids.len(), labels.len())));
    }
    let specs = ids.iter().map(|id| store.require(id).cloned()).collect::<Result<Vec<_>>>()?;
    let outs = model.forward(&specs, &[], mode)?;
    Ok(PosteriorDump {
        vocabulary: vocabulary.to_vec(),
        ids: ids.to_vec(),
        labels: labels.to_vec(),
        posteriors: outs.into_iter().map(|o| o.utterance_posterior.to_vec()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn vocab(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i}")).collect()
    }

    #[test]
    fn grid_default() {
        let g = default_grid();
        assert_eq!(g.len(), 19);
        assert_eq!(g[0], 0.05);
        assert_eq!(g[18], 0.95);
        assert_eq!(g[5], 0.3);
        DetectionConfig::default().validate().unwrap();
        assert!(DetectionConfig { gamma_grid: vec![0.2, 0.2] }.validate().is_err());
        assert!(DetectionConfig { gamma_grid: vec![] }.validate().is_err());
        assert!(DetectionConfig { gamma_grid: vec![1.0] }.validate().is_err());
    }

    #[test]
    fn detection_boundaries() {
        let p = array![[0.3, 0.0, 1.0, 1e-9]];
        assert_eq!(detect_words(p.view(), 0.0), array![[true, false, true, true]]);
        assert_eq!(detect_words(p.view(), 1.0), array![[false, false, false, false]]);
        assert!(!detect_words(p.view(), 0.3)[[0, 0]]);
    }

    #[test]
    fn two_word_hand_count() {
        // A: 2 targets detected, 1 false alarm; B: 1 target missed, no detections
        let labels = [0, 0, 1];
        // the third utterance is a B target: A fires (false alarm), B misses
        let det = array![[true, false], [true, false], [true, false]];
        let s = score(det.view(), &labels[..], &vocab(2), 0.5).unwrap();
        let a = &s.words[0];
        assert_eq!((a.recall, a.precision), (1.0, 2.0 / 3.0));
        assert!((a.f - 0.8).abs() < 1e-15);
        let b = &s.words[1];
        assert_eq!((b.recall, b.precision, b.f), (0.0, 0.0, 0.0));
        assert!((s.macro_avg.f - 0.4).abs() < 1e-15);
    }

    #[test]
    fn perfect_separation() {
        let labels = [0, 1, 2, 1];
        let mut p = Array2::zeros((4, 3));
        for (u, &l) in labels.iter().enumerate() {
            p[[u, l]] = 1.0;
        }
        let s = score(detect_words(p.view(), 0.5).view(), &labels, &vocab(3), 0.5).unwrap();
        assert_eq!((s.macro_avg.precision, s.macro_avg.recall, s.macro_avg.f), (1.0, 1.0, 1.0));
    }

    #[test]
    fn absent_words_excluded() {
        let labels = [0, 0];
        let det = array![[true, true], [true, false]];
        let s = score(det.view(), &labels, &vocab(2), 0.5).unwrap();
        assert_eq!(s.macro_avg.n_words, 1);
        assert_eq!(s.macro_avg.recall, 1.0);
        assert!(score(Array2::<bool>::default((0, 2)).view(), &[], &vocab(2), 0.5).is_err());
    }

    #[test]
    fn sweep_ties_go_to_smallest_gamma() {
        let labels = [0, 1];
        let p = array![[0.9, 0.0], [0.0, 0.9]];
        let cfg = DetectionConfig { gamma_grid: vec![0.1, 0.5, 0.8] };
        let r = gamma_sweep(p.view(), &labels, &vocab(2), &cfg).unwrap();
        assert_eq!(r.best.gamma, 0.1);
        assert_eq!(r.best.f, 1.0);
        let single = gamma_sweep(p.view(), &labels, &vocab(2), &DetectionConfig { gamma_grid: vec![0.5] }).unwrap();
        assert_eq!(single.table.rows[0], score(detect_words(p.view(), 0.5).view(), &labels, &vocab(2), 0.5).unwrap());
    }

    #[test]
    fn confusion_counts() {
        let labels = [0, 0, 1, 2];
        let p = array![[0.9, 0.1, 0.0], [0.2, 0.7, 0.1], [0.0, 1.0, 0.0], [0.3, 0.3, 0.4]];
        let c = confusion(p.view(), &labels, &vocab(3)).unwrap();
        assert_eq!(c.counts, vec![vec![1, 1, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        assert_eq!(c.supports(), vec![2, 1, 1]);
        assert_eq!(c.row_percent()[0], vec![50.0, 50.0, 0.0]);
        let c60 = confusion(Array2::from_elem((1, 60), 0.5).view(), &[3], &vocab(60)).unwrap();
        assert_eq!(format!("{:.1}", 100.0 * c60.chance), "1.7");
    }

    #[test]
    fn boundaries() {
        let a = array![[0.9, 0.1], [0.8, 0.2], [0.1, 0.9], [0.3, 0.7]];
        assert_eq!(extract_boundaries(a.view(), 4, 10.0), vec![0.08]);
        let c = array![[0.9, 0.1], [0.8, 0.2]];
        assert!(extract_boundaries(c.view(), 4, 10.0).is_empty());
        let alt = array![[0.9, 0.1], [0.1, 0.9], [0.9, 0.1], [0.1, 0.9]];
        assert_eq!(extract_boundaries(alt.view(), 4, 10.0).len(), 3);
    }
}
