//! Transformer blocks. Every variant maps `[B, N+1, C]` to `[B, N+1, C]`.

use super::config::{ClsProjection, ModelConfig, Variant};
use super::params::BoundParams;
use super::swap::{swap_in, swap_out, ClsMap};
use crate::attention::{mhsa, AttentionVars};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// Tape handles for one block. Fields a variant does not use are `None`.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub norm1: Option<NormVars>,
    pub attn: Option<AttentionVars>,
    pub channel_norm: Option<NormVars>,
    pub channel_attn: Option<AttentionVars>,
    pub cls_in: ClsMap,
    pub cls_out: ClsMap,
    pub norm2: Option<NormVars>,
    pub mlp: Option<MlpVars>,
}

impl BlockVars {
    /// Look up block `index` of `cfg` among bound parameters.
    pub fn resolve(bound: &BoundParams, cfg: &ModelConfig, index: usize) -> Result<Self> {
        let p = |s: &str| bound.get(&format!("blocks.{index}.{s}"));
        let norm = |g: &str| -> Result<NormVars> {
            Ok(NormVars {
                gamma: p(&format!("{g}.gamma"))?,
                beta: p(&format!("{g}.beta"))?,
            })
        };
        let attn = |g: &str| -> Result<AttentionVars> {
            let w = |x: &str, leaf: &str| p(&format!("{g}.{x}.{leaf}"));
            Ok(AttentionVars {
                w_q: w("q", "weight")?,
                b_q: w("q", "bias")?,
                w_k: w("k", "weight")?,
                b_k: w("k", "bias")?,
                w_v: w("v", "weight")?,
                b_v: w("v", "bias")?,
                w_o: w("o", "weight")?,
                b_o: w("o", "bias")?,
            })
        };
        let cls = |g: &str| -> Result<ClsMap> {
            if cfg.variant.splits_cls() && cfg.cls_projection == ClsProjection::LearnedLinear {
                Ok(ClsMap::Linear {
                    weight: p(&format!("{g}.weight"))?,
                    bias: p(&format!("{g}.bias"))?,
                })
            } else {
                Ok(ClsMap::Identity)
            }
        };
        let v = cfg.variant;
        Ok(BlockVars {
            norm1: v.has_spatial_attention().then(|| norm("norm1")).transpose()?,
            attn: v.has_spatial_attention().then(|| attn("attn")).transpose()?,
            channel_norm: v.has_channel_attention().then(|| norm("channel_norm")).transpose()?,
            channel_attn: v.has_channel_attention().then(|| attn("channel_attn")).transpose()?,
            cls_in: cls("cls_in")?,
            cls_out: cls("cls_out")?,
            norm2: v.has_mlp().then(|| norm("norm2")).transpose()?,
            mlp: v
                .has_mlp()
                .then(|| -> Result<MlpVars> {
                    Ok(MlpVars {
                        fc1_w: p("mlp.fc1.weight")?,
                        fc1_b: p("mlp.fc1.bias")?,
                        fc2_w: p("mlp.fc2.weight")?,
                        fc2_b: p("mlp.fc2.bias")?,
                    })
                })
                .transpose()?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub out: Var,
    /// Spatial-stage maps `[B, H, N+1, N+1]`.
    pub spatial_maps: Option<Var>,
    /// Channel-stage maps `[B, H, T, T]` with `T = C+1` (or `C` when the class token is swapped).
    pub channel_maps: Option<Var>,
}

pub fn layernorm<T: Real>(tape: &mut Tape<T>, x: Var, n: &NormVars) -> Result<Var> {
    tape.layernorm(x, n.gamma, n.beta, T::lit(LN_EPS))
}

/// `linear(C -> hidden) -> gelu -> linear(hidden -> C)`.
pub fn mlp<T: Real>(tape: &mut Tape<T>, x: Var, m: &MlpVars) -> Result<Var> {
    let h = tape.matmul(x, m.fc1_w)?;
    let h = tape.add(h, m.fc1_b)?;
    let h = tape.gelu(h);
    let y = tape.matmul(h, m.fc2_w)?;
    tape.add(y, m.fc2_b)
}

fn missing(what: &str) -> Error {
    Error::config(format!("block parameters have no {what}"))
}

/// `x + mhsa(layernorm(x))` over the spatial tokens.
fn spatial_stage<T: Real>(tape: &mut Tape<T>, x: Var, v: &BlockVars, heads: usize) -> Result<(Var, Var)> {
    let norm1 = v.norm1.as_ref().ok_or_else(|| missing("norm1"))?;
    let attn = v.attn.as_ref().ok_or_else(|| missing("spatial attention"))?;
    let h = layernorm(tape, x, norm1)?;
    let a = mhsa(tape, h, attn, heads)?;
    Ok((tape.add(x, a.values)?, a.maps))
}

/// `u + mlp(layernorm(u))`.
fn mlp_stage<T: Real>(tape: &mut Tape<T>, u: Var, v: &BlockVars) -> Result<Var> {
    let norm2 = v.norm2.as_ref().ok_or_else(|| missing("norm2"))?;
    let m = v.mlp.as_ref().ok_or_else(|| missing("mlp"))?;
    let h = layernorm(tape, u, norm2)?;
    let h = mlp(tape, h, m)?;
    tape.add(u, h)
}

/// Standard pre-norm ViT block: spatial MHSA then MLP.
pub fn vit_block<T: Real>(tape: &mut Tape<T>, x: Var, v: &BlockVars, spatial_heads: usize) -> Result<BlockOutput> {
    let (u, maps) = spatial_stage(tape, x, v, spatial_heads)?;
    let out = mlp_stage(tape, u, v)?;
    Ok(BlockOutput {
        out,
        spatial_maps: Some(maps),
        channel_maps: None,
    })
}

/// `swap_out(attn(layernorm(swap_in(u))))`, the norm running over the `N` spatial
/// positions of each channel row.
fn channel_stage<T: Real>(tape: &mut Tape<T>, u: Var, v: &BlockVars, heads: usize) -> Result<(Var, Var)> {
    let cnorm = v.channel_norm.as_ref().ok_or_else(|| missing("channel_norm"))?;
    let cattn = v.channel_attn.as_ref().ok_or_else(|| missing("channel attention"))?;
    let s = swap_in(tape, u, &v.cls_in)?;
    let h = layernorm(tape, s, cnorm)?;
    let a = mhsa(tape, h, cattn, heads)?;
    Ok((swap_out(tape, a.values, &v.cls_out)?, a.maps))
}

/// Spatial MHSA, then channel attention on the swapped tensor:
/// `y = u + swap_out(attn(layernorm(swap_in(u))))`.
///
/// With `channel_heads == 1` this is the CAViT block; more heads give the
/// multi-head channel ablation.
pub fn cavit_block<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    v: &BlockVars,
    spatial_heads: usize,
    channel_heads: usize,
) -> Result<BlockOutput> {
    let (u, spatial_maps) = spatial_stage(tape, x, v, spatial_heads)?;
    let (back, channel_maps) = channel_stage(tape, u, v, channel_heads)?;
    Ok(BlockOutput {
        out: tape.add(u, back)?,
        spatial_maps: Some(spatial_maps),
        channel_maps: Some(channel_maps),
    })
}

/// The CAViT channel stage in place of spatial attention, MLP retained:
/// `u = x + swap_out(shsa(layernorm(swap_in(x))))`, `y = u + mlp(layernorm(u))`.
///
/// The norm sits after the swap as in [`cavit_block`]. Normalizing over `C` before
/// the swap instead makes every spatial column of the swapped tensor sum to zero, so
/// under near-uniform attention the class row receives no input-dependent signal and
/// the variant does not train.
pub fn channel_only_block<T: Real>(tape: &mut Tape<T>, x: Var, v: &BlockVars) -> Result<BlockOutput> {
    let (back, channel_maps) = channel_stage(tape, x, v, 1)?;
    let u = tape.add(x, back)?;
    let out = mlp_stage(tape, u, v)?;
    Ok(BlockOutput {
        out,
        spatial_maps: None,
        channel_maps: Some(channel_maps),
    })
}

/// Spatial MHSA, then channel attention over the full transpose `[B, C, N+1]`; the
/// class token is treated as one more spatial column.
pub fn cls_swapped_block<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    v: &BlockVars,
    spatial_heads: usize,
    channel_heads: usize,
) -> Result<BlockOutput> {
    let cnorm = v.channel_norm.as_ref().ok_or_else(|| missing("channel_norm"))?;
    let cattn = v.channel_attn.as_ref().ok_or_else(|| missing("channel attention"))?;
    let (u, spatial_maps) = spatial_stage(tape, x, v, spatial_heads)?;
    let t = tape.transpose_last2(u)?;
    let h = layernorm(tape, t, cnorm)?;
    let a = mhsa(tape, h, cattn, channel_heads)?;
    let back = tape.transpose_last2(a.values)?;
    Ok(BlockOutput {
        out: tape.add(u, back)?,
        spatial_maps: Some(spatial_maps),
        channel_maps: Some(a.maps),
    })
}

/// Dispatch on `cfg.variant`.
pub fn variant_block<T: Real>(tape: &mut Tape<T>, x: Var, v: &BlockVars, cfg: &ModelConfig) -> Result<BlockOutput> {
    match cfg.variant {
        Variant::BaselineVit => vit_block(tape, x, v, cfg.spatial_heads),
        Variant::Cavit => cavit_block(tape, x, v, cfg.spatial_heads, 1),
        Variant::ChannelMhsa => cavit_block(tape, x, v, cfg.spatial_heads, cfg.channel_heads),
        Variant::ChannelOnly => channel_only_block(tape, x, v),
        Variant::ClsSwapped => cls_swapped_block(tape, x, v, cfg.spatial_heads, cfg.channel_heads),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::init::trunc_normal;
    use crate::model::{Model, ModelConfig};
    use crate::tensor::Tensor;

    fn images(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [batch, cfg.in_channels, cfg.image_size, cfg.image_size];
        trunc_normal(&dims, 0.5, &mut rng).unwrap()
    }

    fn zero_outputs(m: &mut Model<f64>) {
        let names: Vec<String> = m
            .params()
            .names()
            .filter(|n| n.contains(".o.") || n.contains("fc2"))
            .map(str::to_string)
            .collect();
        for n in names {
            let z = m.params().get(&n).unwrap().zeros_like();
            m.params_mut().set(&n, z).unwrap();
        }
    }

    #[test]
    fn zero_output_projections_make_blocks_identity() {
        for v in Variant::ALL {
            let mut cfg = ModelConfig::desk().with_variant(v);
            if v == Variant::ChannelMhsa {
                cfg.channel_heads = 4;
            }
            let mut m = Model::<f64>::new(cfg.clone(), 1).unwrap();
            zero_outputs(&mut m);
            let mut tape = Tape::new();
            let fp = m.forward(&mut tape, &images(&cfg, 2, 3)).unwrap();
            for i in 0..cfg.depth {
                let vars = BlockVars::resolve(&fp.params, &cfg, i).unwrap();
                let input = if i == 0 { None } else { Some(fp.blocks[i - 1].out) };
                if let Some(x) = input {
                    let out = variant_block(&mut tape, x, &vars, &cfg).unwrap();
                    assert!(tape.value(out.out).bit_eq(tape.value(x)), "{v} block {i}");
                }
            }
        }
    }

    #[test]
    fn single_head_channel_mhsa_matches_cavit() {
        let cfg = ModelConfig::desk();
        let m = Model::<f64>::new(cfg.clone(), 9).unwrap();
        let mhsa_cfg = cfg.clone().with_variant(Variant::ChannelMhsa);
        let m1 = Model::from_params(mhsa_cfg, m.params().clone()).unwrap();
        let x = images(&cfg, 2, 4);
        assert!(m.logits(&x).unwrap().bit_eq(&m1.logits(&x).unwrap()));
    }

    #[test]
    fn channel_map_shapes() {
        let cfg = ModelConfig::desk();
        let (c, n) = (cfg.embed_dim, cfg.num_patches());
        for (v, want) in [
            (Variant::Cavit, Some([2, 1, c + 1, c + 1])),
            (Variant::ClsSwapped, Some([2, 1, c, c])),
            (Variant::ChannelOnly, Some([2, 1, c + 1, c + 1])),
            (Variant::BaselineVit, None),
        ] {
            let m = Model::<f64>::new(cfg.clone().with_variant(v), 2).unwrap();
            let mut tape = Tape::new();
            let fp = m.forward(&mut tape, &images(&cfg, 2, 1)).unwrap();
            let b = &fp.blocks[0];
            assert_eq!(b.channel_maps.map(|m| tape.dims(m).to_vec()), want.map(|w| w.to_vec()), "{v}");
            assert_eq!(b.spatial_maps.is_some(), v != Variant::ChannelOnly);
            if let Some(s) = b.spatial_maps {
                assert_eq!(tape.dims(s), &[2, cfg.spatial_heads, n + 1, n + 1]);
            }
        }
    }

    #[test]
    fn cls_swapped_differs_from_cavit() {
        // Same spatial weights; the channel stages see different token sets, so the
        // outputs must not agree.
        let cfg = ModelConfig::desk();
        let a = Model::<f64>::new(cfg.clone(), 3).unwrap();
        let b = Model::<f64>::new(cfg.clone().with_variant(Variant::ClsSwapped), 3).unwrap();
        let x = images(&cfg, 1, 5);
        let (la, lb) = (a.logits(&x).unwrap(), b.logits(&x).unwrap());
        assert!(la.max_abs_diff(&lb) > 0.0);
    }

    #[test]
    fn missing_stage_is_reported() {
        let cfg = ModelConfig::desk().with_variant(Variant::BaselineVit);
        let m = Model::<f64>::new(cfg.clone(), 1).unwrap();
        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape);
        let vars = BlockVars::resolve(&bound, &cfg, 0).unwrap();
        let x = tape.constant(Tensor::zeros([1, 17, 16]).unwrap());
        assert!(matches!(cavit_block(&mut tape, x, &vars, 2, 1), Err(Error::Config(_))));
        assert!(BlockVars::resolve(&bound, &cfg, 2).is_err());
    }
}
