use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{HarnessError, ManifestEntry};

/// Seeded stratified subset over (generator, label) cells. Each non-empty
/// cell keeps `max(1, round(fraction * n))` entries; output keeps manifest
/// order.
pub fn stratified_subset(
    entries: &[ManifestEntry],
    fraction: f64,
    seed: u64,
) -> Result<Vec<ManifestEntry>, HarnessError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(HarnessError::Invalid(format!("subset fraction must be in (0, 1], got {fraction}")));
    }
    let mut cells: BTreeMap<(String, &str), Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        cells
            .entry((e.generator.clone().unwrap_or_default(), e.label.as_str()))
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (_, mut idx) in cells {
        let take = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len());
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..take]);
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| entries[i].clone()).collect())
}
