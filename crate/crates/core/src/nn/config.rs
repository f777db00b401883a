use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
pub use crate::tape::MaskMode;

/// Axis along which masked attention scores are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxDirection {
    /// Down each column: `Wa[t][i]` normalized over `t`.
    ///
    /// The column denominator includes rows after `t`, so this direction is
    /// not causal.
    #[default]
    Vertical,
    /// Along each row: `Wa[t][i]` normalized over `i`.
    Horizontal,
    /// Elementwise mean of the vertical and horizontal results.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

/// Hyperparameters and ablation switches for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcanConfig {
    pub vocab_size: usize,
    pub d_embed: usize,
    pub d_attn: usize,
    pub kernel_size: usize,
    pub num_levels: usize,
    /// Convolutions per block. Values above 1 are experimental.
    pub blocks_per_level: usize,
    pub softmax_direction: SoftmaxDirection,
    pub mask_mode: MaskMode,
    pub use_enhanced_residual: bool,
    pub use_values_for_output: bool,
    /// When false, each block's attention is replaced by one extra causal
    /// convolution with the block's dilation.
    pub temporal_attention: bool,
    pub activation: Activation,
    pub dropout: f64,
    pub tie_decoder: bool,
    pub seed: u64,
}

impl Default for TcanConfig {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            d_embed: 32,
            d_attn: 32,
            kernel_size: 3,
            num_levels: 3,
            blocks_per_level: 1,
            softmax_direction: SoftmaxDirection::Vertical,
            mask_mode: MaskMode::LiteralZero,
            use_enhanced_residual: true,
            use_values_for_output: false,
            temporal_attention: true,
            activation: Activation::Relu,
            dropout: 0.0,
            tie_decoder: false,
            seed: 0,
        }
    }
}

impl TcanConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_embed", self.d_embed),
            ("d_attn", self.d_attn),
            ("kernel_size", self.kernel_size),
            ("num_levels", self.num_levels),
            ("blocks_per_level", self.blocks_per_level),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(ConfigError::new(field, "must be at least 1"));
            }
        }
        if self.num_levels > 30 {
            return Err(ConfigError::new("num_levels", "dilation 2^(L-1) overflows above 30 levels"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::new("dropout", format!("must lie in [0, 1), got {}", self.dropout)));
        }
        if self.use_enhanced_residual && !self.temporal_attention {
            return Err(ConfigError::new(
                "use_enhanced_residual",
                "needs temporal_attention, which supplies the attention weights",
            ));
        }
        Ok(())
    }

    /// Dilation for the 1-indexed `level`: `2^(level-1)`.
    pub fn dilation(&self, level: usize) -> usize {
        1 << (level - 1)
    }

    /// Left padding of the convolutions at `level`.
    pub fn left_padding(&self, level: usize) -> usize {
        (self.kernel_size - 1) * self.dilation(level)
    }

    /// Receptive field of the convolution path alone.
    pub fn conv_receptive_field(&self) -> usize {
        let per_level = self.blocks_per_level + usize::from(!self.temporal_attention);
        1 + (1..=self.num_levels)
            .map(|l| per_level * self.left_padding(l))
            .sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilation_schedule_starts_at_one() {
        let cfg = TcanConfig {
            kernel_size: 3,
            num_levels: 4,
            ..TcanConfig::default()
        };
        assert_eq!((1..=4).map(|l| cfg.dilation(l)).collect::<Vec<_>>(), [1, 2, 4, 8]);
        assert_eq!(cfg.left_padding(1), 2);
        assert_eq!(cfg.left_padding(4), 16);
        assert_eq!(cfg.conv_receptive_field(), 1 + 2 + 4 + 8 + 16);
    }

    #[test]
    fn validation_names_the_field() {
        let cfg = TcanConfig {
            d_attn: 0,
            ..TcanConfig::default()
        };
        assert_eq!(cfg.validate().unwrap_err().field, "d_attn");
        let cfg = TcanConfig {
            temporal_attention: false,
            use_enhanced_residual: true,
            ..TcanConfig::default()
        };
        assert_eq!(cfg.validate().unwrap_err().field, "use_enhanced_residual");
        let cfg = TcanConfig {
            dropout: 1.0,
            ..TcanConfig::default()
        };
        assert_eq!(cfg.validate().unwrap_err().field, "dropout");
    }
}
