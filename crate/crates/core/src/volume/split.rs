use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Sex, VolumeSample};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub age_bins: Vec<f64>,
}

impl DatasetSplit {
    /// Partitions `samples` into (train, validation) by subject id, keeping
    /// input order within each side.
    pub fn partition<'a>(&self, samples: &'a [VolumeSample]) -> (Vec<&'a VolumeSample>, Vec<&'a VolumeSample>) {
        let val: std::collections::HashSet<&str> = self.val_ids.iter().map(String::as_str).collect();
        samples.iter().partition(|s| !val.contains(s.subject_id.as_str()))
    }
}

/// Index of the bin holding `age`; ages beyond the outer edges fall in the
/// first or last bin.
pub fn age_bin(age: f64, edges: &[f64]) -> usize {
    if edges.len() < 2 {
        return 0;
    }
    let inner = &edges[1..edges.len() - 1];
    inner.iter().take_while(|&&e| age >= e).count()
}

/// Stratified split: within every (age bin, sex) cell the validation share
/// matches `val_fraction` to within one sample, and the overall validation
/// size is `round(n * val_fraction)`.
pub fn make_split(samples: &[VolumeSample], val_fraction: f64, age_bins: &[f64], rng_seed: u64) -> Result<DatasetSplit> {
    if samples.is_empty() {
        return Err(Error::Parameter("cannot split an empty sample list".into()));
    }
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(Error::Parameter(format!("val_fraction {val_fraction} outside [0, 1]")));
    }
    if age_bins.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter("age bin edges must be strictly increasing".into()));
    }
    let mut seen = std::collections::HashSet::new();
    let mut cells: BTreeMap<(usize, Sex), Vec<&str>> = BTreeMap::new();
    for s in samples {
        s.validate_labels()?;
        if !seen.insert(s.subject_id.as_str()) {
            return Err(Error::Parameter(format!("duplicate subject id {}", s.subject_id)));
        }
        cells.entry((age_bin(s.age, age_bins), s.sex)).or_default().push(&s.subject_id);
    }

    // largest-remainder apportionment of the validation budget over cells
    let target = (samples.len() as f64 * val_fraction).round() as usize;
    let quotas: Vec<f64> = cells.values().map(|ids| ids.len() as f64 * val_fraction).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut remaining = target.saturating_sub(counts.iter().sum());
    for &c in &order {
        if remaining == 0 {
            break;
        }
        if counts[c] < cells.values().nth(c).map_or(0, Vec::len) {
            counts[c] += 1;
            remaining -= 1;
        }
    }

    let mut train_ids = Vec::new();
    let mut val_ids = Vec::new();
    for (cell_idx, ids) in cells.into_values().enumerate() {
        let mut ids: Vec<&str> = ids;
        ids.sort_unstable();
        ids.shuffle(&mut rng::derived(rng_seed, 0x5911, cell_idx as u64));
        let (v, t) = ids.split_at(counts[cell_idx]);
        val_ids.extend(v.iter().map(|s| s.to_string()));
        train_ids.extend(t.iter().map(|s| s.to_string()));
    }
    train_ids.sort();
    val_ids.sort();
    Ok(DatasetSplit { train_ids, val_ids, age_bins: age_bins.to_vec() })
}
