use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Point-feature width.
    pub d: usize,
    pub d_text: usize,
    /// Centroid counts of the three set-abstraction stages, strictly decreasing.
    pub granularity_sizes: [usize; 3],
    /// Neighbours grouped around each centroid.
    pub group_size: usize,
    pub heads: usize,
    pub text_heads: usize,
    pub text_layers: usize,
    pub answer_layers: usize,
    pub max_text_len: usize,
    pub encoder_refine_layers: usize,
    pub decoder_layers: usize,
    pub idw_k: usize,
    pub idw_power: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            d_text: 64,
            granularity_sizes: [128, 32, 8],
            group_size: 16,
            heads: 8,
            text_heads: 4,
            text_layers: 2,
            answer_layers: 2,
            max_text_len: 48,
            encoder_refine_layers: 2,
            decoder_layers: 2,
            idw_k: 3,
            idw_power: 2.0,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for finite-difference checks.
    pub fn toy() -> Self {
        Self {
            d: 8,
            d_text: 8,
            granularity_sizes: [16, 8, 4],
            group_size: 4,
            heads: 2,
            text_heads: 2,
            text_layers: 1,
            answer_layers: 1,
            max_text_len: 24,
            encoder_refine_layers: 1,
            decoder_layers: 1,
            idw_k: 3,
            idw_power: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [n1, n2, n3] = self.granularity_sizes;
        if !(n1 > n2 && n2 > n3 && n3 >= 1) {
            bail!(Config, "granularity sizes {:?} must be strictly decreasing and positive", self.granularity_sizes);
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            bail!(Config, "d = {} is not divisible by {} heads", self.d, self.heads);
        }
        if self.text_heads == 0 || !self.d_text.is_multiple_of(self.text_heads) {
            bail!(Config, "d_text = {} is not divisible by {} text heads", self.d_text, self.text_heads);
        }
        if !self.d.is_multiple_of(2) || self.d < 4 {
            bail!(Config, "d = {} must be an even number of at least 4", self.d);
        }
        if self.group_size == 0 || self.idw_k == 0 || !(self.idw_power > 0.0) {
            bail!(Config, "group size, idw k and idw power must be positive");
        }
        if self.max_text_len < 4 {
            bail!(Config, "max_text_len = {} is too short", self.max_text_len);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_bad_schedules_rejected() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
        let bad = ModelConfig { granularity_sizes: [32, 32, 8], ..ModelConfig::toy() };
        assert!(matches!(bad.validate(), Err(crate::Error::Config(_))));
        let bad = ModelConfig { heads: 3, ..ModelConfig::toy() };
        assert!(bad.validate().is_err());
    }
}
