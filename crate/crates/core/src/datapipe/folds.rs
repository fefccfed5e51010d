//! Hold-out test split plus five validation folds over the remainder,
//! stratified by label.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::image::Label;
use crate::error::{Error, Result};

pub const NUM_FOLDS: usize = 5;
pub const TEST_FRACTION: f64 = 0.2;
pub const MIN_IDS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub test_ids: Vec<String>,
    pub fold_ids: Vec<Vec<String>>,
    pub seed: u64,
}

impl FoldPlan {
    /// `(train, validation)` ids for fold `k` (0-based).
    pub fn fold(&self, k: usize) -> (Vec<String>, Vec<String>) {
        let train = self
            .fold_ids
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .flat_map(|(_, ids)| ids.iter().cloned())
            .collect();
        (train, self.fold_ids[k].clone())
    }

    pub fn train_val_len(&self) -> usize {
        self.fold_ids.iter().map(Vec::len).sum()
    }

    /// `"test"` or the 1-based fold number.
    pub fn assignment(&self, id: &str) -> Option<String> {
        if self.test_ids.iter().any(|t| t == id) {
            return Some("test".into());
        }
        self.fold_ids
            .iter()
            .position(|f| f.iter().any(|t| t == id))
            .map(|k| (k + 1).to_string())
    }
}

/// Largest-remainder allocation of `n` slots proportionally to `sizes`.
fn apportion(sizes: &[usize], n: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let quotas: Vec<f64> = sizes.iter().map(|&s| s as f64 * n as f64 / total as f64).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = n - out.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if out[i] < sizes[i] {
            out[i] += 1;
            left -= 1;
        }
    }
    out
}

/// Splits labeled ids into a test set of `round(0.2 * total)` ids and five
/// folds whose sizes differ by at most one. Deterministic for a given seed and
/// independent of input order.
pub fn split_folds(items: &[(String, Label)], seed: u64) -> Result<FoldPlan> {
    if items.len() < MIN_IDS {
        return Err(Error::Data(format!(
            "need at least {MIN_IDS} ids to split, got {}",
            items.len()
        )));
    }
    let mut by_label: BTreeMap<Label, Vec<String>> = BTreeMap::new();
    for (id, label) in items {
        by_label.entry(*label).or_default().push(id.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ids in by_label.values_mut() {
        ids.sort();
        let before = ids.len();
        ids.dedup();
        if ids.len() != before {
            return Err(Error::Data("duplicate ids in split input".into()));
        }
        ids.shuffle(&mut rng);
    }
    let n_test = (TEST_FRACTION * items.len() as f64).round() as usize;
    let sizes: Vec<usize> = by_label.values().map(Vec::len).collect();
    let test_per_label = apportion(&sizes, n_test);

    let mut test_ids = Vec::with_capacity(n_test);
    let mut rest = Vec::with_capacity(items.len() - n_test);
    for (ids, &t) in by_label.values().zip(&test_per_label) {
        test_ids.extend_from_slice(&ids[..t]);
        rest.extend_from_slice(&ids[t..]);
    }
    // dealing the label-grouped remainder round-robin keeps folds stratified
    let mut fold_ids = vec![Vec::new(); NUM_FOLDS];
    for (i, id) in rest.into_iter().enumerate() {
        fold_ids[i % NUM_FOLDS].push(id);
    }
    Ok(FoldPlan {
        test_ids,
        fold_ids,
        seed,
    })
}
