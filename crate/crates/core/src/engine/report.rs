use crate::error::{Error, Result};

/// One layer's cost on one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerFrameStats {
    pub positions: usize,
    pub fired: usize,
    pub dense_macs: u64,
    pub effective_macs: u64,
}

impl LayerFrameStats {
    pub fn fire_rate(&self) -> f64 {
        if self.positions == 0 {
            return 0.0;
        }
        self.fired as f64 / self.positions as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameReport {
    pub reference: bool,
    pub layers: Vec<LayerFrameStats>,
}

impl FrameReport {
    pub fn dense_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.dense_macs).sum()
    }

    pub fn effective_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.effective_macs).sum()
    }

    pub fn fired(&self) -> usize {
        self.layers.iter().map(|l| l.fired).sum()
    }
}

/// Per-layer dense cost plus per-frame fired counts over a stream.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MacReport {
    /// Dense multiply-accumulates per layer for one frame.
    pub layer_macs: Vec<u64>,
    pub frames: Vec<FrameReport>,
}

impl MacReport {
    pub fn new(layer_macs: Vec<u64>) -> Self {
        Self {
            layer_macs,
            frames: Vec::new(),
        }
    }

    pub fn push(&mut self, frame: FrameReport) {
        self.frames.push(frame);
    }

    /// `m_l / sum(m_i)`.
    pub fn normalized_coefficients(&self) -> Vec<f64> {
        normalize_macs(&self.layer_macs)
    }

    pub fn total_dense_macs(&self) -> u64 {
        self.frames.iter().map(FrameReport::dense_macs).sum()
    }

    pub fn total_effective_macs(&self) -> u64 {
        self.frames.iter().map(FrameReport::effective_macs).sum()
    }

    /// Dense over effective MACs across every frame, references included.
    pub fn reduction(&self) -> f64 {
        let eff = self.total_effective_macs();
        if eff == 0 {
            return f64::INFINITY;
        }
        self.total_dense_macs() as f64 / eff as f64
    }

    pub fn non_reference_frames(&self) -> impl Iterator<Item = &FrameReport> {
        self.frames.iter().filter(|f| !f.reference)
    }

    /// Mean firing probability per layer over non-reference frames, or
    /// `None` when every frame was a reference frame.
    pub fn firing_probability(&self) -> Option<Vec<f64>> {
        let n = self.non_reference_frames().count();
        if n == 0 {
            return None;
        }
        let mut acc = vec![0.0; self.layer_macs.len()];
        for f in self.non_reference_frames() {
            for (a, l) in acc.iter_mut().zip(&f.layers) {
                *a += l.fire_rate();
            }
        }
        Some(acc.into_iter().map(|v| v / n as f64).collect())
    }

    /// MAC-weighted firing rate averaged over non-reference frames:
    /// `1/(T-1) sum_t sum_l m_l E[g_l]` with normalized `m_l`.
    pub fn gate_loss(&self) -> Result<f64> {
        let probs = self
            .firing_probability()
            .ok_or(Error::ClipTooShort(self.frames.len()))?;
        Ok(self
            .normalized_coefficients()
            .iter()
            .zip(probs)
            .map(|(m, p)| m * p)
            .sum())
    }
}

pub fn normalize_macs(macs: &[u64]) -> Vec<f64> {
    let total: u64 = macs.iter().sum();
    if total == 0 {
        return vec![0.0; macs.len()];
    }
    macs.iter().map(|&m| m as f64 / total as f64).collect()
}
