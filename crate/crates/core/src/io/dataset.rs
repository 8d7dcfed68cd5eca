use std::collections::BTreeSet;
use std::path::Path;

use super::wav::wav_read;
use crate::error::{Error, Result};
use crate::training::{AudioPair, Dataset};

fn wav_names(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".wav") {
            names.insert(name);
        }
    }
    Ok(names)
}

/// Pairs `clean_dir/x.wav` with `noisy_dir/x.wav`, sorted by name. Files
/// present on one side only are listed in the error.
pub fn dataset_load(clean_dir: impl AsRef<Path>, noisy_dir: impl AsRef<Path>) -> Result<Dataset> {
    let (clean_dir, noisy_dir) = (clean_dir.as_ref(), noisy_dir.as_ref());
    let clean = wav_names(clean_dir)?;
    let noisy = wav_names(noisy_dir)?;
    let orphans: Vec<String> = clean
        .symmetric_difference(&noisy)
        .map(|n| {
            let side = if clean.contains(n) { clean_dir } else { noisy_dir };
            side.join(n).display().to_string()
        })
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Dataset(format!("unpaired files: {}", orphans.join(", "))));
    }
    if clean.is_empty() {
        return Err(Error::Dataset(format!("no .wav files in {}", clean_dir.display())));
    }
    let pairs = clean
        .iter()
        .map(|name| {
            let c = wav_read(clean_dir.join(name))?;
            let x = wav_read(noisy_dir.join(name))?;
            if c.len() != x.len() {
                return Err(Error::Dataset(format!("{name}: clean has {} samples, noisy {}", c.len(), x.len())));
            }
            Ok(AudioPair {
                name: name.trim_end_matches(".wav").to_string(),
                clean: c,
                noisy: x,
                snr_db: None,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { pairs })
}
