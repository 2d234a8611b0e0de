use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sgpm::GateParams;

/// Where gated units sit relative to each selected encoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SgpmPosition {
    /// (a) after the block's MLP residual.
    #[serde(alias = "a")]
    End,
    /// (b) before the block.
    #[default]
    #[serde(alias = "b")]
    Begin,
    /// (c) one independent unit before and one after.
    #[serde(alias = "c")]
    Both,
}

impl SgpmPosition {
    pub const ALL: [SgpmPosition; 3] = [SgpmPosition::End, SgpmPosition::Begin, SgpmPosition::Both];

    pub fn units_per_block(self) -> usize {
        match self {
            SgpmPosition::Both => 2,
            _ => 1,
        }
    }

    pub fn letter(self) -> char {
        match self {
            SgpmPosition::End => 'a',
            SgpmPosition::Begin => 'b',
            SgpmPosition::Both => 'c',
        }
    }
}

impl FromStr for SgpmPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "end" => Ok(SgpmPosition::End),
            "b" | "begin" => Ok(SgpmPosition::Begin),
            "c" | "both" => Ok(SgpmPosition::Both),
            other => Err(Error::Config(format!(
                "unknown SGPM position {other:?} (expected a/end, b/begin or c/both)"
            ))),
        }
    }
}

impl fmt::Display for SgpmPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SgpmPosition::End => "end",
            SgpmPosition::Begin => "begin",
            SgpmPosition::Both => "both",
        })
    }
}

/// Inclusive 1-based block range `first-last`; block 1 is the earliest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LayerRange {
    pub first: usize,
    pub last: usize,
}

impl LayerRange {
    pub fn new(first: usize, last: usize) -> Result<Self> {
        if first == 0 || first > last {
            return Err(Error::Config(format!(
                "layer range {first}-{last} must satisfy 1 <= i <= j"
            )));
        }
        Ok(Self { first, last })
    }

    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.first..=self.last).contains(&layer)
    }
}

impl FromStr for LayerRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad layer range {s:?}, expected i-j")))
        };
        match s.split_once('-') {
            Some((a, b)) => LayerRange::new(parse(a)?, parse(b)?),
            None => {
                let i = parse(s)?;
                LayerRange::new(i, i)
            }
        }
    }
}

impl TryFrom<String> for LayerRange {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LayerRange> for String {
    fn from(r: LayerRange) -> String {
        r.to_string()
    }
}

impl fmt::Display for LayerRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.first, self.last)
    }
}

/// Parses `"none"` or an `i-j` range.
pub fn parse_layers(s: &str) -> Result<Option<LayerRange>> {
    match s {
        "none" | "" => Ok(None),
        other => other.parse().map(Some),
    }
}

mod optional_range {
    use serde::{Deserialize, Deserializer, Serializer};

    use super::LayerRange;

    pub fn serialize<S: Serializer>(v: &Option<LayerRange>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(r) => s.serialize_str(&r.to_string()),
            None => s.serialize_str("none"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<LayerRange>, D::Error> {
        let s = String::deserialize(d)?;
        super::parse_layers(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_channels: usize,
    pub num_blocks: usize,
    /// Blocks carrying gated units; `None` (written `"none"`) gives the
    /// plain backbone.
    #[serde(with = "optional_range")]
    pub sgpm_layers: Option<LayerRange>,
    pub sgpm_position: SgpmPosition,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Fusion-block bottleneck width; `None` means `max(1, C / 4)`.
    pub compressed_channels: Option<usize>,
    /// Initial output bias of every key predictor, i.e. the gate logit at
    /// initialization.
    pub gate_bias_init: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_channels: 48,
            num_blocks: 4,
            sgpm_layers: Some(LayerRange { first: 1, last: 4 }),
            sgpm_position: SgpmPosition::Begin,
            heads: 2,
            mlp_ratio: 2,
            compressed_channels: None,
            gate_bias_init: GateParams::INITIAL_KEY_BIAS,
        }
    }
}

impl EncoderConfig {
    pub fn compressed(&self) -> usize {
        self.compressed_channels
            .unwrap_or_else(|| crate::msfb::compressed_channels(self.embed_channels))
    }

    /// Number of gated units the encoder contains.
    pub fn gate_count(&self) -> usize {
        self.sgpm_layers
            .map_or(0, |r| r.len() * self.sgpm_position.units_per_block())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.patch_size.is_power_of_two() {
            return bad(format!("patch_size must be a power of two, got {}", self.patch_size));
        }
        if self.embed_channels == 0 || self.heads == 0 || self.embed_channels % self.heads != 0 {
            return bad(format!(
                "embed_channels {} must be a positive multiple of heads {}",
                self.embed_channels, self.heads
            ));
        }
        if self.num_blocks == 0 || self.mlp_ratio == 0 {
            return bad("num_blocks and mlp_ratio must be positive".into());
        }
        if let Some(r) = self.sgpm_layers {
            if r.first == 0 || r.first > r.last || r.last > self.num_blocks {
                return bad(format!(
                    "SGPM layers {r} must satisfy 1 <= i <= j <= {}",
                    self.num_blocks
                ));
            }
        }
        let cp = self.compressed();
        if cp == 0 || cp > self.embed_channels {
            return bad(format!(
                "compressed channels {cp} must lie in 1..={}",
                self.embed_channels
            ));
        }
        if !self.gate_bias_init.is_finite() {
            return bad(format!("gate_bias_init must be finite, got {}", self.gate_bias_init));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Two-way (prompt ↔ image) attention layers.
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Sinusoid frequencies per axis in the positional encoding.
    pub pe_frequencies: usize,
    pub label_dim: usize,
    /// Initial bias of the mask logit.
    pub mask_bias_init: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            pe_frequencies: 4,
            label_dim: 8,
            mask_bias_init: -2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input extents `(H, W, D)`; each must be a multiple of the patch size.
    pub volume_shape: [usize; 3],
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            volume_shape: [32, 32, 32],
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> [usize; 3] {
        self.volume_shape.map(|v| v / self.encoder.patch_size)
    }

    pub fn feature_shape(&self) -> [usize; 4] {
        let [h, w, d] = self.grid();
        [h, w, d, self.encoder.embed_channels]
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let p = self.encoder.patch_size;
        if let Some(v) = self.volume_shape.iter().find(|&&v| v == 0 || v % p != 0) {
            return Err(Error::Config(format!(
                "volume extent {v} is not a positive multiple of patch size {p}"
            )));
        }
        let d = &self.decoder;
        if d.layers == 0 || d.heads == 0 || self.encoder.embed_channels % d.heads != 0 {
            return Err(Error::Config(
                "decoder needs >= 1 layer and heads dividing embed_channels".into(),
            ));
        }
        if d.pe_frequencies == 0 || d.label_dim == 0 || d.mlp_ratio == 0 {
            return Err(Error::Config(
                "decoder pe_frequencies, label_dim and mlp_ratio must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_ranges_and_positions() {
        assert_eq!("1-3".parse::<LayerRange>().unwrap(), LayerRange::new(1, 3).unwrap());
        assert_eq!("2".parse::<LayerRange>().unwrap(), LayerRange::new(2, 2).unwrap());
        assert!("3-1".parse::<LayerRange>().is_err());
        assert!("0-2".parse::<LayerRange>().is_err());
        assert_eq!("c".parse::<SgpmPosition>().unwrap(), SgpmPosition::Both);
        assert_eq!("begin".parse::<SgpmPosition>().unwrap(), SgpmPosition::Begin);
    }

    #[test]
    fn rejects_out_of_depth_range() {
        let cfg = EncoderConfig {
            sgpm_layers: Some(LayerRange::new(2, 5).unwrap()),
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gate_count_law() {
        for pos in SgpmPosition::ALL {
            for j in 1..=4 {
                let cfg = EncoderConfig {
                    sgpm_layers: Some(LayerRange::new(1, j).unwrap()),
                    sgpm_position: pos,
                    ..EncoderConfig::default()
                };
                assert_eq!(cfg.gate_count(), j * pos.units_per_block());
            }
        }
    }
}
