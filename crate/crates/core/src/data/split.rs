use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const TRAIN_FRACTION: f64 = 0.8;

/// Seeded shuffle, then the first `round(0.8 n)` ids train and the rest test.
pub fn dataset_split(ids: &[String], seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if ids.len() < 5 {
        return Err(Error::Data(format!(
            "need at least 5 ids to split, got {}",
            ids.len()
        )));
    }
    let mut v = ids.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (TRAIN_FRACTION * ids.len() as f64).round() as usize;
    let test = v.split_off(n_train);
    Ok((v, test))
}

/// One id per line; blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

pub fn write_manifest(path: &Path, ids: &[String]) -> Result<()> {
    let mut s = ids.join("\n");
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}
