use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Block architecture selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Spatial MHSA followed by an MLP.
    BaselineVit,
    /// Spatial MHSA followed by single-head channel attention on the swapped tensor.
    Cavit,
    /// As `Cavit`, with multi-head channel attention.
    ChannelMhsa,
    /// Channel attention in place of spatial attention, MLP retained.
    ChannelOnly,
    /// As `Cavit`, but the class token is transposed along with the spatial tokens.
    ClsSwapped,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::BaselineVit,
        Variant::Cavit,
        Variant::ChannelMhsa,
        Variant::ChannelOnly,
        Variant::ClsSwapped,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BaselineVit => "baseline_vit",
            Variant::Cavit => "cavit",
            Variant::ChannelMhsa => "channel_mhsa",
            Variant::ChannelOnly => "channel_only",
            Variant::ClsSwapped => "cls_swapped",
        }
    }

    pub fn has_spatial_attention(self) -> bool {
        self != Variant::ChannelOnly
    }

    pub fn has_channel_attention(self) -> bool {
        self != Variant::BaselineVit
    }

    pub fn has_mlp(self) -> bool {
        matches!(self, Variant::BaselineVit | Variant::ChannelOnly)
    }

    /// Whether the channel stage splits the class token off before transposing.
    pub fn splits_cls(self) -> bool {
        matches!(self, Variant::Cavit | Variant::ChannelMhsa | Variant::ChannelOnly)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

/// How the class token is mapped between width `C` and the channel-stage width `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClsProjection {
    /// Reinterpret the `C`-vector as an `N`-vector; requires `C == N`.
    Identity,
    /// Learned `C -> N` projection going in and `N -> C` coming out, per block.
    LearnedLinear,
}

impl ClsProjection {
    pub fn name(self) -> &'static str {
        match self {
            ClsProjection::Identity => "identity",
            ClsProjection::LearnedLinear => "learned_linear",
        }
    }
}

impl fmt::Display for ClsProjection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClsProjection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(ClsProjection::Identity),
            "learned_linear" => Ok(ClsProjection::LearnedLinear),
            _ => Err(Error::config(format!(
                "unknown cls_projection {s:?} (expected identity or learned_linear)"
            ))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Square input side `W` in pixels.
    pub image_size: usize,
    /// Square patch side `w` in pixels.
    pub patch_size: usize,
    /// Token width `C`.
    pub embed_dim: usize,
    pub depth: usize,
    pub spatial_heads: usize,
    /// Heads in the channel stage; 1 except for `ChannelMhsa` and `ClsSwapped`.
    pub channel_heads: usize,
    pub mlp_ratio: f64,
    pub n_classes: usize,
    pub in_channels: usize,
    pub cls_projection: ClsProjection,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 32x32 single-channel input, 8x8 patches: N = C = 16.
    pub fn desk() -> Self {
        ModelConfig {
            variant: Variant::Cavit,
            image_size: 32,
            patch_size: 8,
            embed_dim: 16,
            depth: 2,
            spatial_heads: 2,
            channel_heads: 1,
            mlp_ratio: 4.0,
            n_classes: 2,
            in_channels: 1,
            cls_projection: ClsProjection::Identity,
        }
    }

    /// Tiny configuration for full-model finite-difference checks: N = C = 4.
    pub fn gradcheck() -> Self {
        ModelConfig {
            variant: Variant::Cavit,
            image_size: 8,
            patch_size: 4,
            embed_dim: 4,
            depth: 1,
            spatial_heads: 1,
            channel_heads: 1,
            mlp_ratio: 4.0,
            n_classes: 2,
            in_channels: 1,
            cls_projection: ClsProjection::Identity,
        }
    }

    /// Tiny ViT at 224/16 (C = 192, N = 196); used for cost comparisons.
    pub fn paper() -> Self {
        ModelConfig {
            variant: Variant::BaselineVit,
            image_size: 224,
            patch_size: 16,
            embed_dim: 192,
            depth: 12,
            spatial_heads: 3,
            channel_heads: 1,
            mlp_ratio: 4.0,
            n_classes: 1000,
            in_channels: 3,
            cls_projection: ClsProjection::LearnedLinear,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Patches per side, `W / w`.
    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Spatial token count `N`.
    pub fn num_patches(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    /// Flattened patch length, `in_channels * w * w`.
    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).floor() as usize
    }

    /// Token width of the channel stage: `N`, or `N + 1` when the class token is swapped too.
    pub fn channel_width(&self) -> usize {
        match self.variant {
            Variant::ClsSwapped => self.num_patches() + 1,
            _ => self.num_patches(),
        }
    }

    /// Token count of the channel stage: `C + 1`, or `C` when the class token is swapped too.
    pub fn channel_tokens(&self) -> usize {
        match self.variant {
            Variant::ClsSwapped => self.embed_dim,
            _ => self.embed_dim + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("spatial_heads", self.spatial_heads),
            ("channel_heads", self.channel_heads),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !matches!(self.in_channels, 1 | 3) {
            return Err(Error::config(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.variant.has_spatial_attention() && self.embed_dim % self.spatial_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by spatial_heads {}",
                self.embed_dim, self.spatial_heads
            )));
        }
        if self.variant.has_mlp() && (!(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0) {
            return Err(Error::config(format!(
                "mlp_ratio {} gives an empty hidden layer",
                self.mlp_ratio
            )));
        }
        match self.variant {
            Variant::Cavit | Variant::ChannelOnly if self.channel_heads != 1 => {
                return Err(Error::config(format!(
                    "variant {} uses single-head channel attention; channel_heads must be 1, got {}",
                    self.variant, self.channel_heads
                )));
            }
            Variant::ChannelMhsa | Variant::ClsSwapped if self.channel_width() % self.channel_heads != 0 => {
                return Err(Error::config(format!(
                    "channel width {} is not divisible by channel_heads {}",
                    self.channel_width(),
                    self.channel_heads
                )));
            }
            _ => {}
        }
        if self.variant.splits_cls()
            && self.cls_projection == ClsProjection::Identity
            && self.embed_dim != self.num_patches()
        {
            return Err(Error::config(format!(
                "identity cls_projection needs embed_dim == num_patches, got C = {} and N = {}",
                self.embed_dim,
                self.num_patches()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::gradcheck().validate().unwrap();
        for v in Variant::ALL {
            let mut cfg = ModelConfig::paper().with_variant(v);
            if v == Variant::ChannelMhsa {
                cfg.channel_heads = 4;
            }
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn derived_sizes() {
        let cfg = ModelConfig::paper();
        assert_eq!(cfg.num_patches(), 196);
        assert_eq!(cfg.patch_dim(), 768);
        let desk = ModelConfig::desk();
        assert_eq!(desk.num_patches(), 16);
        assert_eq!(desk.num_patches(), desk.embed_dim);
        let small = ModelConfig {
            image_size: 4,
            patch_size: 2,
            ..ModelConfig::desk()
        };
        assert_eq!(small.num_patches(), 4);
    }

    #[test]
    fn invalid_configs() {
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::desk();
            f(&mut c);
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        };
        bad(|c| c.patch_size = 5);
        bad(|c| c.spatial_heads = 3);
        bad(|c| c.embed_dim = 12);
        bad(|c| c.in_channels = 2);
        bad(|c| c.channel_heads = 2);
        bad(|c| {
            c.variant = Variant::ChannelMhsa;
            c.channel_heads = 3;
        });
        bad(|c| {
            c.variant = Variant::ClsSwapped;
            c.channel_heads = 2;
        });
        bad(|c| {
            c.variant = Variant::BaselineVit;
            c.mlp_ratio = 0.0;
        });
        let mut ok = ModelConfig::desk().with_variant(Variant::ChannelMhsa);
        ok.channel_heads = 4;
        ok.validate().unwrap();
        ok.embed_dim = 12;
        ok.spatial_heads = 3;
        assert!(ok.validate().is_err());
        ok.cls_projection = ClsProjection::LearnedLinear;
        ok.validate().unwrap();
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("vit".parse::<Variant>().is_err());
    }
}
