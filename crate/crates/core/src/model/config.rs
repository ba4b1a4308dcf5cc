use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. The ablation flags recover plain U-Net
/// (all off), R2U-Net (attention off) and Attention U-Net (recurrence and
/// residual off).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of pooling stages.
    pub depth: usize,
    pub base_channels: usize,
    /// Recurrent unrolling steps per recurrent conv unit.
    pub time_steps: usize,
    pub attention_enabled: bool,
    pub recurrence_enabled: bool,
    pub residual_enabled: bool,
    /// Attention intermediate width is the skip width divided by this ratio.
    pub attn_inter_ratio: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 64,
            time_steps: 2,
            attention_enabled: true,
            recurrence_enabled: true,
            residual_enabled: true,
            attn_inter_ratio: 2,
            in_channels: 3,
            out_channels: 1,
        }
    }
}

impl ModelConfig {
    /// Depth 2, base width 8: the desk-scale configuration.
    pub fn tiny() -> Self {
        Self {
            depth: 2,
            base_channels: 8,
            ..Self::default()
        }
    }

    /// Every block reduced to the classic conv pair with plain skips.
    pub fn plain_unet(mut self) -> Self {
        self.attention_enabled = false;
        self.recurrence_enabled = false;
        self.residual_enabled = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("model.depth must be at least 1"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("model.base_channels must be at least 1"));
        }
        if self.attn_inter_ratio == 0 {
            return Err(Error::config("model.attn_inter_ratio must be at least 1"));
        }
        if self.in_channels != 3 {
            return Err(Error::config("model.in_channels must be 3 (RGB input)"));
        }
        if self.out_channels != 1 {
            return Err(Error::config("model.out_channels must be 1 (binary crack mask)"));
        }
        if self.depth > 16 || self.base_channels.checked_shl(self.depth as u32).is_none() {
            return Err(Error::config("model.depth too large"));
        }
        Ok(())
    }

    /// Recurrent steps actually unrolled; zero when recurrence is disabled.
    pub fn effective_steps(&self) -> usize {
        if self.recurrence_enabled {
            self.time_steps
        } else {
            0
        }
    }

    /// Block width at encoder level `level` (the bottleneck is level `depth`).
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Required divisor of the input height and width.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.depth
    }

    /// Deterministic text form (field order fixed by declaration).
    pub fn to_canonical(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let cfg = ModelConfig {
            time_steps: 3,
            attention_enabled: false,
            ..ModelConfig::tiny()
        };
        let text = cfg.to_canonical();
        assert_eq!(ModelConfig::from_canonical(&text).unwrap(), cfg);
        assert_eq!(text, cfg.to_canonical());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ModelConfig::from_canonical(r#"{"depth": 2, "widht": 3}"#).unwrap_err();
        assert!(err.to_string().contains("widht"), "{err}");
    }

    #[test]
    fn recurrence_off_means_zero_steps() {
        let cfg = ModelConfig {
            recurrence_enabled: false,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.effective_steps(), 0);
        assert_eq!(ModelConfig::default().effective_steps(), 2);
        assert_eq!(ModelConfig::tiny().spatial_divisor(), 4);
        assert_eq!(ModelConfig::default().width(4), 1024);
    }
}
