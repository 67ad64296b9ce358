use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Grid rows.
    pub height: usize,
    /// Grid columns.
    pub width: usize,
    /// Input channels: state channels followed by coordinate channels.
    pub in_channels: usize,
    /// Predicted state channels.
    pub out_channels: usize,
    /// Patch size of the tokenizer.
    pub patch: usize,
    /// Token width per scale; the number of scales is `widths.len()`.
    pub widths: Vec<usize>,
    /// Attention window edge, clamped to the attention grid at coarse scales.
    pub window: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub conv_k: usize,
    pub blocks_per_scale: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    /// The desk-scale CKF operator: `64×64` vorticity plus two coordinate
    /// channels, `p = 2`, three scales.
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            in_channels: 3,
            out_channels: 1,
            patch: 2,
            widths: vec![32, 64, 128],
            window: 8,
            heads: 4,
            ffn_ratio: 2,
            conv_k: 3,
            blocks_per_scale: 1,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn scales(&self) -> usize {
        self.widths.len()
    }

    /// Token grid extents `(H/(p·2^ℓ), W/(p·2^ℓ))` at scale `ℓ`.
    pub fn grid_at(&self, scale: usize) -> (usize, usize) {
        let f = self.patch << scale;
        (self.height / f, self.width / f)
    }

    /// Total number of wavelet attention blocks in the U-shape.
    pub fn total_blocks(&self) -> usize {
        (2 * (self.scales() - 1) + 1) * self.blocks_per_scale
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.height == 0 || self.width == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("grid extents and channel counts must be positive".into());
        }
        if self.patch == 0
            || !self.height.is_multiple_of(self.patch)
            || !self.width.is_multiple_of(self.patch)
        {
            return bad(format!(
                "grid {}×{} not divisible by patch size {}",
                self.height, self.width, self.patch
            ));
        }
        if self.widths.is_empty() {
            return bad("at least one scale is required".into());
        }
        if self.window == 0 || self.heads == 0 || self.conv_k == 0 || self.ffn_ratio == 0 {
            return bad("window, heads, conv_k and ffn_ratio must be positive".into());
        }
        if self.blocks_per_scale == 0 {
            return bad("blocks_per_scale must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        for (l, &d) in self.widths.iter().enumerate() {
            if d == 0 || d % 4 != 0 || d % self.heads != 0 {
                return bad(format!(
                    "width {d} at scale {l} must be a positive multiple of 4 and of heads={}",
                    self.heads
                ));
            }
            let f = self.patch << l;
            if !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
                return bad(format!("grid does not halve evenly down to scale {l}"));
            }
            let (h, w) = self.grid_at(l);
            if h % 2 != 0 || w % 2 != 0 {
                return bad(format!(
                    "token grid {h}×{w} at scale {l} must have even extents for the wavelet transform"
                ));
            }
            let (ah, aw) = (h / 2, w / 2);
            if ah % self.window.min(ah) != 0 || aw % self.window.min(aw) != 0 {
                return bad(format!(
                    "attention grid {ah}×{aw} at scale {l} not divisible by window {}",
                    self.window
                ));
            }
        }
        Ok(())
    }
}
