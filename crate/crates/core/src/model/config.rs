use crate::error::{Error, Result};

/// Residual enhancement settings. Layer indices are 0-based; decoder layer
/// `l` means the output of block `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct FireConfig {
    pub enabled: bool,
    /// `(vision map, decoder layer)` pairs; map 0 is the input projection.
    pub injection_pairs: Vec<(usize, usize)>,
    pub early_layer: usize,
    pub deep_layer: usize,
}

impl Default for FireConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            injection_pairs: vec![(2, 1), (3, 2)],
            early_layer: 1,
            deep_layer: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub enabled: bool,
    pub heads: usize,
    pub dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            heads: 4,
            dim: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub patches: usize,
    pub patch_dim: usize,
    pub vision_width: usize,
    pub vision_layers: usize,
    pub d_model: usize,
    pub dec_layers: usize,
    pub ffn: usize,
    pub max_len: usize,
    /// When false the decoder emits `<|emb|>` right after its inputs.
    pub reasoning: bool,
    pub fire: FireConfig,
    pub fusion: FusionConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            patches: 8,
            patch_dim: 16,
            vision_width: 32,
            vision_layers: 4,
            d_model: 64,
            dec_layers: 6,
            ffn: 128,
            max_len: 160,
            reasoning: true,
            fire: FireConfig::default(),
            fusion: FusionConfig::default(),
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 9 {
            return bad(format!(
                "vocab_size {} is below the special tokens",
                self.vocab_size
            ));
        }
        for (name, v) in [
            ("patches", self.patches),
            ("patch_dim", self.patch_dim),
            ("vision_width", self.vision_width),
            ("d_model", self.d_model),
            ("dec_layers", self.dec_layers),
            ("ffn", self.ffn),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return bad(format!("model.{name} must be positive"));
            }
        }
        if self.fusion.heads == 0 || !self.fusion.dim.is_multiple_of(self.fusion.heads) {
            return bad(format!(
                "fusion.dim {} is not divisible by fusion.heads {}",
                self.fusion.dim, self.fusion.heads
            ));
        }
        if self.fire.enabled {
            let f = &self.fire;
            if !(f.early_layer < f.deep_layer && f.deep_layer < self.dec_layers) {
                return bad(format!(
                    "need fire.early_layer < fire.deep_layer < {} (got {} and {})",
                    self.dec_layers, f.early_layer, f.deep_layer
                ));
            }
            let half = self.dec_layers.div_ceil(2);
            for &(v, l) in &f.injection_pairs {
                if v > self.vision_layers {
                    return bad(format!(
                        "injection source map {v} exceeds vision depth {}",
                        self.vision_layers
                    ));
                }
                if l >= half {
                    return bad(format!(
                        "injection layer {l} is outside the first {half} decoder layers"
                    ));
                }
            }
        }
        Ok(())
    }
}
