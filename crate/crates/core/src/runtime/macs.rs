//! Multiply-accumulate accounting for convolution layers (activations and
//! folded normalization are free).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{ChannelRole, GateMask};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GatingAssumption {
    /// No gating subnet, every `pw2` row computed.
    Static,
    /// Gating subnet present, this fraction of `pw2` rows computed.
    Expected(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMacReport {
    pub pw1: f64,
    pub ddw: f64,
    pub pw2: f64,
    pub gate: f64,
    pub total: f64,
    /// Fraction of residual channels whose `pw2` row was computed.
    pub active_ratio: f64,
}

/// Per-frame MAC counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacReport {
    /// Frames measured; 0 for analytic counts.
    pub frames: u64,
    pub front: f64,
    pub blocks: Vec<BlockMacReport>,
    pub back: f64,
    pub total: f64,
    /// Static count of the same architecture without gating.
    pub static_total: f64,
    /// `1 - total / static_total`.
    pub reduction: f64,
    /// Mean active fraction over blocks (absent without gating).
    pub realized_ratio: Option<f64>,
}

impl MacReport {
    fn assemble(cfg: &ModelConfig, frames: u64, front: f64, back: f64, blocks: Vec<BlockMacReport>, gated: bool) -> Self {
        let total = front + back + blocks.iter().map(|b| b.total).sum::<f64>();
        let static_total = static_count(cfg) as f64;
        let realized_ratio = gated.then(|| blocks.iter().map(|b| b.active_ratio).sum::<f64>() / blocks.len() as f64);
        Self {
            frames,
            front,
            blocks,
            back,
            total,
            static_total,
            reduction: 1.0 - total / static_total,
            realized_ratio,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn block(pw1: f64, ddw: f64, pw2: f64, gate: f64, active_ratio: f64) -> BlockMacReport {
    BlockMacReport {
        pw1,
        ddw,
        pw2,
        gate,
        total: pw1 + ddw + pw2 + gate,
        active_ratio,
    }
}

fn static_count(cfg: &ModelConfig) -> u64 {
    let (f, cr, cc, k) = (cfg.freq_bins as u64, cfg.c_res as u64, cfg.c_conv as u64, cfg.kernel_size as u64);
    2 * f * cr + cfg.total_blocks() as u64 * (cr * cc + cc * k + cc * cr)
}

pub fn count_macs_analytic(cfg: &ModelConfig, gating: GatingAssumption) -> Result<MacReport> {
    cfg.validate()?;
    let (f, cr, cc, k, cg) = (
        cfg.freq_bins as f64,
        cfg.c_res as f64,
        cfg.c_conv as f64,
        cfg.kernel_size as f64,
        cfg.c_gate as f64,
    );
    let (ratio, gate, gated) = match gating {
        GatingAssumption::Static => (1.0, 0.0, false),
        GatingAssumption::Expected(phi) => {
            if !(0.0..=1.0).contains(&phi) {
                return Err(Error::Config(format!("expected ratio {phi} not in [0, 1]")));
            }
            (phi, 2.0 * cr * cg, true)
        }
    };
    let blocks = (0..cfg.total_blocks())
        .map(|_| block(cr * cc, cc * k, cc * cr * ratio, gate, ratio))
        .collect();
    Ok(MacReport::assemble(cfg, 0, f * cr, cr * f, blocks, gated))
}

/// Integer MAC totals accumulated over streamed frames.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCounter {
    pub frames: u64,
    pub front: u64,
    pub back: u64,
    pub pw1: Vec<u64>,
    pub ddw: Vec<u64>,
    pub pw2: Vec<u64>,
    pub gate: Vec<u64>,
    /// Active (computed) `pw2` rows per block.
    pub active_rows: Vec<u64>,
    pub gated: bool,
}

impl MacCounter {
    pub fn new(blocks: usize, gated: bool) -> Self {
        Self {
            pw1: vec![0; blocks],
            ddw: vec![0; blocks],
            pw2: vec![0; blocks],
            gate: vec![0; blocks],
            active_rows: vec![0; blocks],
            gated,
            ..Self::default()
        }
    }

    pub fn total(&self) -> u64 {
        self.front
            + self.back
            + self.pw1.iter().sum::<u64>()
            + self.ddw.iter().sum::<u64>()
            + self.pw2.iter().sum::<u64>()
            + self.gate.iter().sum::<u64>()
    }

    /// Adds one frame in which block `i` computed `active[i]` `pw2` rows.
    pub(crate) fn add_frame(&mut self, cfg: &ModelConfig, active: &[u64], roles: Option<&[Vec<ChannelRole>]>) {
        let (f, cr, cc, k, cg) = (
            cfg.freq_bins as u64,
            cfg.c_res as u64,
            cfg.c_conv as u64,
            cfg.kernel_size as u64,
            cfg.c_gate as u64,
        );
        self.frames += 1;
        self.front += f * cr;
        self.back += cr * f;
        for (i, &a) in active.iter().enumerate() {
            self.pw1[i] += cr * cc;
            self.ddw[i] += cc * k;
            self.pw2[i] += cc * a;
            self.active_rows[i] += a;
            if self.gated {
                self.gate[i] += gate_cost(cr, cg, roles.map(|r| r[i].as_slice()));
            }
        }
    }
    /// Adds every frame of an offline pass. `gates` are the gates the pass
    /// used; `None` means every channel was computed.
    pub fn add_offline(
        &mut self,
        cfg: &ModelConfig,
        batch: usize,
        frames: usize,
        gates: Option<&GateMask>,
        roles: Option<&[Vec<ChannelRole>]>,
    ) -> Result<()> {
        if let Some(g) = gates {
            if (g.batch, g.frames, g.blocks, g.channels) != (batch, frames, cfg.total_blocks(), cfg.c_res) {
                return Err(Error::Shape("gate mask does not match the pass".into()));
            }
        }
        let mut active = vec![cfg.c_res as u64; cfg.total_blocks()];
        for n in 0..batch {
            for l in 0..frames {
                if let Some(g) = gates {
                    for (i, a) in active.iter_mut().enumerate() {
                        *a = (0..cfg.c_res).filter(|&c| g.get(n, c, l, i)).count() as u64;
                    }
                }
                self.add_frame(cfg, &active, roles);
            }
        }
        Ok(())
    }
}

/// Gating MACs of one block for one frame: the hidden layer plus one output
/// row per dynamic channel, nothing when no channel is dynamic.
pub(crate) fn gate_cost(c_res: u64, c_gate: u64, roles: Option<&[ChannelRole]>) -> u64 {
    let dynamic = roles.map_or(c_res, |r| r.iter().filter(|&&x| x == ChannelRole::Dynamic).count() as u64);
    if dynamic == 0 {
        0
    } else {
        c_res * c_gate + c_gate * dynamic
    }
}

/// Per-frame averages of a streamed run.
pub fn count_macs_runtime(cfg: &ModelConfig, counter: &MacCounter) -> Result<MacReport> {
    if counter.frames == 0 {
        return Err(Error::Empty("no frames were processed"));
    }
    if counter.pw2.len() != cfg.total_blocks() {
        return Err(Error::Shape("counter does not match config".into()));
    }
    let fr = counter.frames as f64;
    let per = |v: u64| v as f64 / fr;
    let blocks = (0..cfg.total_blocks())
        .map(|i| {
            block(
                per(counter.pw1[i]),
                per(counter.ddw[i]),
                per(counter.pw2[i]),
                per(counter.gate[i]),
                counter.active_rows[i] as f64 / (fr * cfg.c_res as f64),
            )
        })
        .collect();
    Ok(MacReport::assemble(
        cfg,
        counter.frames,
        per(counter.front),
        per(counter.back),
        blocks,
        counter.gated,
    ))
}
