use serde::{Deserialize, Serialize};

use super::vocab::TokenVocab;
use crate::attention::{AttentionMode, AttentionSpec};
use crate::error::{Error, Result};

/// Token capacity of the standard encoders: 1,022 residues plus CLS and EOS.
pub const STANDARD_CAPACITY: usize = 1024;
/// Token capacity after context extension: 2,048 residues plus CLS and EOS.
pub const LONG_CAPACITY: usize = 2050;
/// Local attention window kept by the long encoders.
pub const LONG_WINDOW: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    /// Token capacity including CLS and EOS.
    pub max_positions: usize,
    pub attention: AttentionMode,
    #[serde(default)]
    pub vocab: TokenVocab,
}

/// `(name, layers, heads, embed_dim)` for the published encoder family.
const FAMILY: [(&str, usize, usize, usize); 6] =
    [("T6", 6, 20, 320), ("T12", 12, 20, 480), ("T30", 30, 20, 640), ("T33", 33, 20, 1280), ("T36", 36, 40, 2560), ("T48", 48, 40, 5120)];

impl ModelConfig {
    /// Named presets: `toy`, `T6`…`T48`, and `<name>-long` variants with
    /// 2,050 positions and a 1,024-token local window.
    pub fn preset(name: &str) -> Result<Self> {
        let (base, long) = match name.strip_suffix("-long") {
            Some(b) => (b, true),
            None => (name, false),
        };
        let mut cfg = if base.eq_ignore_ascii_case("toy") {
            ModelConfig {
                num_layers: 2,
                num_heads: 4,
                embed_dim: 32,
                ffn_dim: 64,
                max_positions: 64,
                attention: AttentionMode::Global,
                vocab: TokenVocab::standard(),
            }
        } else {
            let &(_, layers, heads, dim) = FAMILY
                .iter()
                .find(|(n, ..)| n.eq_ignore_ascii_case(base))
                .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?;
            ModelConfig {
                num_layers: layers,
                num_heads: heads,
                embed_dim: dim,
                ffn_dim: 4 * dim,
                max_positions: STANDARD_CAPACITY,
                attention: AttentionMode::Global,
                vocab: TokenVocab::standard(),
            }
        };
        if long {
            cfg.max_positions = if cfg.max_positions == STANDARD_CAPACITY { LONG_CAPACITY } else { 2 * cfg.max_positions };
            cfg.attention =
                AttentionMode::Local { window_k: if cfg.max_positions == LONG_CAPACITY { LONG_WINDOW } else { cfg.max_positions / 2 } };
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.embed_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("layer count, heads and dims must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.num_heads)));
        }
        if self.max_positions < 3 {
            return Err(Error::Config("max_positions must leave room for CLS, EOS and a residue".into()));
        }
        self.attention.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn attention_spec(&self) -> Result<AttentionSpec> {
        AttentionSpec::new(self.attention, self.num_heads, self.head_dim())
    }

    /// Longest residue string that fits with CLS and EOS.
    pub fn residue_capacity(&self) -> usize {
        self.max_positions - 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_presets() {
        let t6 = ModelConfig::preset("T6").unwrap();
        assert_eq!((t6.num_layers, t6.num_heads, t6.embed_dim), (6, 20, 320));
        let t33 = ModelConfig::preset("T33").unwrap();
        assert_eq!((t33.num_layers, t33.num_heads, t33.embed_dim), (33, 20, 1280));
        let t12 = ModelConfig::preset("T12").unwrap();
        assert_eq!((t12.num_layers, t12.num_heads, t12.embed_dim), (12, 20, 480));
        let t30 = ModelConfig::preset("T30").unwrap();
        assert_eq!((t30.num_layers, t30.num_heads, t30.embed_dim), (30, 20, 640));
        let t36 = ModelConfig::preset("T36").unwrap();
        assert_eq!((t36.num_layers, t36.num_heads, t36.embed_dim), (36, 40, 2560));
        let t48 = ModelConfig::preset("T48").unwrap();
        assert_eq!((t48.num_layers, t48.num_heads, t48.embed_dim), (48, 40, 5120));
        for (name, ..) in FAMILY {
            let c = ModelConfig::preset(name).unwrap();
            c.validate().unwrap();
            assert_eq!(c.max_positions, 1024);
        }
    }

    #[test]
    fn long_presets() {
        let c = ModelConfig::preset("T6-long").unwrap();
        assert_eq!(c.max_positions, 2050);
        assert_eq!(c.residue_capacity(), 2048);
        assert_eq!(c.attention, AttentionMode::Local { window_k: 1024 });
        let toy = ModelConfig::preset("toy-long").unwrap();
        assert_eq!((toy.max_positions, toy.attention), (128, AttentionMode::Local { window_k: 64 }));
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::preset("toy").unwrap();
        c.num_heads = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(ModelConfig::preset("T7").is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = ModelConfig::preset("T6-long").unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"window_k\":1024"));
        assert_eq!(serde_json::from_str::<ModelConfig>(&text).unwrap(), c);
    }
}
