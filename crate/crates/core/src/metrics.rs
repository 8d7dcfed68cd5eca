//! SI-SDR and gate-activity statistics.

use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::gating::GateMask;

/// Returned when the estimate is an exact multiple of the reference.
pub const SI_SDR_CAP_DB: f64 = 100.0;

/// Scale-invariant SDR in dB over the full signals.
pub fn si_sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    si_sdr_slices(&estimate.samples, &reference.samples)
}

pub fn si_sdr_slices(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "si_sdr: {} estimate samples, {} reference samples",
            estimate.len(),
            reference.len()
        )));
    }
    let ref_energy: f64 = reference.iter().map(|s| s * s).sum();
    if ref_energy == 0.0 {
        return Err(Error::Empty("silent reference"));
    }
    let alpha = estimate.iter().zip(reference).map(|(e, s)| e * s).sum::<f64>() / ref_energy;
    let (mut target, mut noise) = (0.0, 0.0);
    for (&e, &s) in estimate.iter().zip(reference) {
        let t = alpha * s;
        target += t * t;
        noise += (t - e) * (t - e);
    }
    if noise <= target * 1e-20 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / noise).log10()).min(SI_SDR_CAP_DB))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningStats {
    /// `[block][frame]` fraction of active channels (averaged over batch).
    pub instantaneous: Vec<Vec<f64>>,
    pub per_block: Vec<f64>,
    pub global: f64,
}

pub fn pruning_stats(g: &GateMask) -> PruningStats {
    let denom = (g.batch * g.channels) as f64;
    let instantaneous: Vec<Vec<f64>> = (0..g.blocks)
        .map(|i| {
            (0..g.frames)
                .map(|l| {
                    let mut on = 0usize;
                    for n in 0..g.batch {
                        for c in 0..g.channels {
                            on += g.get(n, c, l, i) as usize;
                        }
                    }
                    on as f64 / denom
                })
                .collect()
        })
        .collect();
    let per_block: Vec<f64> = instantaneous
        .iter()
        .map(|r| r.iter().sum::<f64>() / r.len().max(1) as f64)
        .collect();
    let global = per_block.iter().sum::<f64>() / per_block.len().max(1) as f64;
    PruningStats {
        instantaneous,
        per_block,
        global,
    }
}

/// One block's channels-by-frames activity for the first batch item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityMap {
    pub block: usize,
    /// `active[c][l]`.
    pub active: Vec<Vec<bool>>,
    pub instantaneous: Vec<f64>,
    pub average: f64,
}

pub fn activity_map(g: &GateMask, block: usize) -> Result<ActivityMap> {
    if block >= g.blocks {
        return Err(Error::Config(format!("block {block} out of range (model has {})", g.blocks)));
    }
    if g.batch == 0 || g.frames == 0 {
        return Err(Error::Empty("gate mask"));
    }
    let active: Vec<Vec<bool>> = (0..g.channels)
        .map(|c| (0..g.frames).map(|l| g.get(0, c, l, block)).collect())
        .collect();
    let instantaneous: Vec<f64> = (0..g.frames)
        .map(|l| active.iter().filter(|row| row[l]).count() as f64 / g.channels as f64)
        .collect();
    let average = instantaneous.iter().sum::<f64>() / g.frames as f64;
    Ok(ActivityMap {
        block,
        active,
        instantaneous,
        average,
    })
}

impl ActivityMap {
    /// CSV with one row per channel and one column per frame, followed by a
    /// row of instantaneous ratios.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let frames = self.instantaneous.len();
        let mut header = vec!["channel".to_string()];
        header.extend((0..frames).map(|l| l.to_string()));
        w.write_record(&header)?;
        for (c, row) in self.active.iter().enumerate() {
            let mut rec = vec![c.to_string()];
            rec.extend(row.iter().map(|&a| u8::from(a).to_string()));
            w.write_record(&rec)?;
        }
        let mut ratio = vec!["ratio".to_string()];
        ratio.extend(self.instantaneous.iter().map(|r| format!("{r:.6}")));
        w.write_record(&ratio)?;
        let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
        String::from_utf8(bytes).map_err(|e| Error::Dataset(e.to_string()))
    }
}
