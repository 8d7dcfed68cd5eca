//! Calibration-driven static pruning of gated models.

use serde::{Deserialize, Serialize};

use super::macs::gate_cost;
use crate::error::{Error, Result};
use crate::gating::{ChannelRole, GateMask};
use crate::model::{ModelConfig, ModelWeights};
use crate::tensor::Real;

/// Per-block, per-channel count of active frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelActivity {
    pub frames: u64,
    pub active: Vec<Vec<u64>>,
}

impl ChannelActivity {
    pub fn new(blocks: usize, channels: usize) -> Self {
        Self {
            frames: 0,
            active: vec![vec![0; channels]; blocks],
        }
    }

    pub fn add(&mut self, g: &GateMask) -> Result<()> {
        if g.blocks != self.active.len() || self.active.first().is_some_and(|a| a.len() != g.channels) {
            return Err(Error::Shape("gate mask does not match activity table".into()));
        }
        for n in 0..g.batch {
            for c in 0..g.channels {
                for l in 0..g.frames {
                    for i in 0..g.blocks {
                        if g.get(n, c, l, i) {
                            self.active[i][c] += 1;
                        }
                    }
                }
            }
        }
        self.frames += (g.batch * g.frames) as u64;
        Ok(())
    }

    pub fn fraction(&self, block: usize, channel: usize) -> f64 {
        self.active[block][channel] as f64 / self.frames.max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneOptions {
    /// Also fix nearly-constant channels, not just never-active ones.
    pub volatile_heuristic: bool,
    pub always_on_above: f64,
    pub never_on_below: f64,
}

impl Default for PruneOptions {
    fn default() -> Self {
        Self {
            volatile_heuristic: false,
            always_on_above: 0.99,
            never_on_below: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub removed: Vec<usize>,
    pub always_on: Vec<usize>,
    pub dynamic: Vec<usize>,
    pub params_before: usize,
    pub params_after: usize,
    pub storage_reduction: f64,
    /// Expected per-frame MACs on the calibration activity.
    pub macs_before: f64,
    pub macs_after: f64,
    pub reduction_before: f64,
    pub reduction_after: f64,
}

/// Assigns channel roles from calibration activity. Channels with no
/// activity are removed. With the heuristic, channels active in fewer than
/// `never_on_below` of the frames are removed too, and channels active in
/// more than `always_on_above` become always-on when the extra `pw2` work
/// does not exceed the saved scoring row.
pub fn static_prune<T: Real>(
    weights: &ModelWeights<T>,
    activity: &ChannelActivity,
    opts: &PruneOptions,
) -> Result<(ModelWeights<T>, PruneReport)> {
    let cfg = &weights.config;
    if !cfg.gating_enabled {
        return Err(Error::Config("static pruning needs a gated model".into()));
    }
    if activity.frames == 0 {
        return Err(Error::Empty("calibration activity"));
    }
    if activity.active.len() != cfg.total_blocks() || activity.active.iter().any(|a| a.len() != cfg.c_res) {
        return Err(Error::Shape("activity table does not match the model".into()));
    }
    let before = weights
        .roles
        .clone()
        .unwrap_or_else(|| vec![vec![ChannelRole::Dynamic; cfg.c_res]; cfg.total_blocks()]);
    let mut roles = before.clone();
    for (i, block) in roles.iter_mut().enumerate() {
        for (c, role) in block.iter_mut().enumerate() {
            if *role != ChannelRole::Dynamic {
                continue;
            }
            let frac = activity.fraction(i, c);
            if activity.active[i][c] == 0 {
                *role = ChannelRole::Removed;
            } else if opts.volatile_heuristic {
                if frac < opts.never_on_below {
                    *role = ChannelRole::Removed;
                } else if frac > opts.always_on_above && (1.0 - frac) * cfg.c_conv as f64 <= cfg.c_gate as f64 {
                    *role = ChannelRole::AlwaysOn;
                }
            }
        }
    }

    let count = |r: &[Vec<ChannelRole>], which: ChannelRole| r.iter().map(|b| b.iter().filter(|&&x| x == which).count()).collect::<Vec<_>>();
    let params_before = stored_params(cfg, weights.parameter_count(), &before);
    let params_after = stored_params(cfg, weights.parameter_count(), &roles);
    let static_total = super::count_macs_analytic(cfg, super::GatingAssumption::Static)?.total;
    let macs_before = expected_macs(cfg, activity, &before);
    let macs_after = expected_macs(cfg, activity, &roles);
    let report = PruneReport {
        removed: count(&roles, ChannelRole::Removed),
        always_on: count(&roles, ChannelRole::AlwaysOn),
        dynamic: count(&roles, ChannelRole::Dynamic),
        params_before,
        params_after,
        storage_reduction: 1.0 - params_after as f64 / params_before as f64,
        macs_before,
        macs_after,
        reduction_before: 1.0 - macs_before / static_total,
        reduction_after: 1.0 - macs_after / static_total,
    };
    let mut out = weights.clone();
    out.roles = Some(roles);
    Ok((out, report))
}

/// Parameters that must still be stored under `roles`.
fn stored_params(cfg: &ModelConfig, total: usize, roles: &[Vec<ChannelRole>]) -> usize {
    let (cc, cg, cr) = (cfg.c_conv, cfg.c_gate, cfg.c_res);
    let mut saved = 0;
    for block in roles {
        let removed = block.iter().filter(|&&r| r == ChannelRole::Removed).count();
        let fixed = block.iter().filter(|&&r| r != ChannelRole::Dynamic).count();
        saved += removed * (cc + 1) + fixed * (cg + 1);
        if fixed == cr {
            saved += cg * cr + cg;
        }
    }
    total - saved
}

fn expected_macs(cfg: &ModelConfig, activity: &ChannelActivity, roles: &[Vec<ChannelRole>]) -> f64 {
    let (f, cr, cc, k, cg) = (
        cfg.freq_bins as f64,
        cfg.c_res as f64,
        cfg.c_conv as f64,
        cfg.kernel_size as f64,
        cfg.c_gate as u64,
    );
    let mut total = 2.0 * f * cr;
    for (i, block) in roles.iter().enumerate() {
        let rows: f64 = block
            .iter()
            .enumerate()
            .map(|(c, r)| match r {
                ChannelRole::Dynamic => activity.fraction(i, c),
                ChannelRole::AlwaysOn => 1.0,
                ChannelRole::Removed => 0.0,
            })
            .sum();
        total += cr * cc + cc * k + cc * rows + gate_cost(cfg.c_res as u64, cg, Some(block)) as f64;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    fn gated() -> ModelWeights<f32> {
        let cfg = ModelConfig {
            c_res: 4,
            c_conv: 64,
            c_gate: 2,
            freq_bins: 5,
            blocks_per_stack: 1,
            stacks: 1,
            gating_enabled: true,
            ..ModelConfig::default()
        };
        init_weights(&cfg, 0).unwrap()
    }

    fn activity(counts: [u64; 4], frames: u64) -> ChannelActivity {
        ChannelActivity {
            frames,
            active: vec![counts.to_vec()],
        }
    }

    #[test]
    fn never_active_channels_are_removed() {
        let (w, r) = static_prune(&gated(), &activity([0, 10, 50, 100], 100), &PruneOptions::default()).unwrap();
        assert_eq!(w.roles.unwrap()[0], [ChannelRole::Removed, ChannelRole::Dynamic, ChannelRole::Dynamic, ChannelRole::Dynamic]);
        assert_eq!(r.removed, [1]);
        assert!(r.params_after < r.params_before);
        assert!(r.reduction_after >= r.reduction_before);
    }

    #[test]
    fn all_volatile_changes_nothing() {
        let opts = PruneOptions {
            volatile_heuristic: true,
            ..PruneOptions::default()
        };
        let (w, r) = static_prune(&gated(), &activity([30, 40, 50, 60], 100), &opts).unwrap();
        assert!(w.roles.unwrap()[0].iter().all(|&x| x == ChannelRole::Dynamic));
        assert_eq!(r.params_after, r.params_before);
        assert_eq!(r.macs_after, r.macs_before);
    }

    #[test]
    fn always_on_respects_cost_guard() {
        let opts = PruneOptions {
            volatile_heuristic: true,
            ..PruneOptions::default()
        };
        // 0.995 active: 0.005 * 64 = 0.32 <= 2 extra rows are cheaper than scoring
        let (w, r) = static_prune(&gated(), &activity([995, 1000, 500, 3], 1000), &opts).unwrap();
        let roles = w.roles.unwrap();
        assert_eq!(roles[0], [ChannelRole::AlwaysOn, ChannelRole::AlwaysOn, ChannelRole::Dynamic, ChannelRole::Removed]);
        assert!(r.reduction_after >= r.reduction_before);
        // 0.991 active with a wide conv: 0.009 * 2048 > 2, stays dynamic
        let mut wide = gated();
        wide.config.c_conv = 2048;
        let (w, _) = static_prune(&wide, &activity([991, 500, 500, 500], 1000), &opts).unwrap();
        assert_eq!(w.roles.unwrap()[0][0], ChannelRole::Dynamic);
    }

    #[test]
    fn empty_calibration_is_an_error() {
        assert!(matches!(
            static_prune(&gated(), &ChannelActivity::new(1, 4), &PruneOptions::default()),
            Err(Error::Empty(_))
        ));
    }
}
