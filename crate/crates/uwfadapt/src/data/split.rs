//! Deterministic stratified train/val/test assignment.

use crate::data::manifest::{DatasetManifest, Split};
use crate::data::sample::stratum_key;
use crate::error::{Error, Result};
use crate::seeding::rng_for;
use rand::RngExt;
use std::collections::BTreeMap;

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.60, 0.15, 0.25);

#[derive(Debug, Clone, Default)]
pub struct SplitSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub warnings: Vec<String>,
}

/// Assigns every entry to train/val/test, stratified by label class. Strata
/// with fewer than 3 samples go wholly to train (recorded as a warning).
/// Deterministic for a fixed seed regardless of entry order.
pub fn split_dataset(
    manifest: &mut DatasetManifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitSummary> {
    let (rt, rv, rs) = ratios;
    if rt < 0.0 || rv < 0.0 || rs < 0.0 || (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios ({rt}, {rv}, {rs}) must be non-negative and sum to 1"
        )));
    }
    if manifest.entries.is_empty() {
        return Err(Error::Invalid("cannot split an empty manifest".into()));
    }

    let mut strata: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, entry) in manifest.entries.iter().enumerate() {
        let label = manifest.load_label(entry)?;
        strata
            .entry(stratum_key(label.as_ref()))
            .or_default()
            .push(i);
    }

    let mut summary = SplitSummary::default();
    let mut assignments: Vec<(usize, Split)> = Vec::with_capacity(manifest.entries.len());
    for (stratum, mut indices) in strata {
        indices.sort_by(|&a, &b| manifest.entries[a].id.cmp(&manifest.entries[b].id));
        let mut rng = rng_for(seed, &format!("split/{stratum}"));
        for i in (1..indices.len()).rev() {
            let j = rng.random_range(0..=i);
            indices.swap(i, j);
        }
        let n = indices.len();
        if n < 3 {
            summary.warnings.push(format!(
                "stratum {stratum:?} has only {n} sample(s); placing all in train"
            ));
            for &i in &indices {
                assignments.push((i, Split::Train));
            }
            continue;
        }
        let counts = largest_remainder(n, [rt, rv, rs]);
        let (end_train, end_val) = (counts[0], counts[0] + counts[1]);
        for (pos, &i) in indices.iter().enumerate() {
            let split = if pos < end_train {
                Split::Train
            } else if pos < end_val {
                Split::Val
            } else {
                Split::Test
            };
            assignments.push((i, split));
        }
    }

    for (i, split) in assignments {
        manifest.entries[i].split = Some(split);
        match split {
            Split::Train => summary.train += 1,
            Split::Val => summary.val += 1,
            Split::Test => summary.test += 1,
        }
    }
    Ok(summary)
}

/// Integer quotas summing to `n` that are each within 1 of `ratio * n`.
fn largest_remainder(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let mut leftover = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    [counts[0], counts[1], counts[2]]
}
