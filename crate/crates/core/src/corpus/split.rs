use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CorpusManifest;
use crate::error::{Error, Result};

/// Disjoint train/validation/test id lists, each in manifest order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitAssignment {
    pub fn train_set(&self) -> HashSet<String> {
        self.train_ids.iter().cloned().collect()
    }

    pub fn val_set(&self) -> HashSet<String> {
        self.val_ids.iter().cloned().collect()
    }

    pub fn test_set(&self) -> HashSet<String> {
        self.test_ids.iter().cloned().collect()
    }

    /// Train and validation ids together (the pool label noise applies to).
    pub fn train_pool(&self) -> HashSet<String> {
        self.train_ids.iter().chain(&self.val_ids).cloned().collect()
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Per class, `round(train_frac * n)` records go to the training pool and the
/// rest to test. The validation set is then drawn from the whole pool at
/// `val_frac_of_train`, never taking the last training record of a class.
pub fn stratified_split(
    manifest: &CorpusManifest,
    train_frac: f64,
    val_frac_of_train: f64,
    seed: u64,
) -> Result<SplitAssignment> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidArgument(format!("train_frac {train_frac} not in (0, 1)")));
    }
    if !(0.0..1.0).contains(&val_frac_of_train) {
        return Err(Error::InvalidArgument(format!(
            "val_frac_of_train {val_frac_of_train} not in [0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = manifest.vocabulary.len();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, r) in manifest.records.iter().enumerate() {
        by_class[r.label].push(i);
    }

    let mut in_pool = vec![false; manifest.len()];
    let mut pool_count = vec![0usize; n_classes];
    for (c, members) in by_class.iter_mut().enumerate() {
        let n = members.len();
        if n == 0 {
            continue;
        }
        members.shuffle(&mut rng);
        let floor = if n >= 2 { 1 } else { 0 };
        let k = round_half_up(train_frac * n as f64).clamp(floor, n);
        for &i in &members[..k] {
            in_pool[i] = true;
        }
        pool_count[c] = k;
    }

    let mut pool: Vec<usize> = (0..manifest.len()).filter(|&i| in_pool[i]).collect();
    let n_val = round_half_up(val_frac_of_train * pool.len() as f64);
    pool.shuffle(&mut rng);
    let mut in_val = vec![false; manifest.len()];
    let mut taken = 0;
    for &i in &pool {
        if taken == n_val {
            break;
        }
        let c = manifest.records[i].label;
        if pool_count[c] > 1 {
            pool_count[c] -= 1;
            in_val[i] = true;
            taken += 1;
        }
    }

    let mut split = SplitAssignment { train_ids: vec![], val_ids: vec![], test_ids: vec![] };
    for (i, r) in manifest.records.iter().enumerate() {
        let id = r.utterance_id.clone();
        match (in_pool[i], in_val[i]) {
            (true, true) => split.val_ids.push(id),
            (true, false) => split.train_ids.push(id),
            _ => split.test_ids.push(id),
        }
    }
    Ok(split)
}
