//! Closed-form parameter and FLOP counts per sublayer.
//!
//! FLOPs are 2 x multiply-accumulates of every linear projection and of both attention
//! matmuls (`q·kᵀ` and `attn·v`), for one image. Elementwise work is excluded unless
//! [`FlopOptions::include_elementwise`] is set, in which case it is charged per output
//! element at the rates below.

use std::fmt::Write as _;

use crate::error::Result;
use crate::model::{ClsProjection, ModelConfig, Variant};

/// Per element: mean, centering, square-and-accumulate, scale by 1/std, gain, shift.
pub const LAYERNORM_FLOPS: u64 = 7;
/// Per element: running max, subtract, exp, sum, divide.
pub const SOFTMAX_FLOPS: u64 = 5;
/// Per element of the tanh approximation.
pub const GELU_FLOPS: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopOptions {
    /// Charge norms, softmax, activations, score scaling, bias and residual adds.
    pub include_elementwise: bool,
    /// Charge the `q·kᵀ` and `attn·v` matmuls. On by default; turning it off gives a
    /// projection-only count.
    pub include_attention_matmuls: bool,
}

impl Default for FlopOptions {
    fn default() -> Self {
        FlopOptions {
            include_elementwise: false,
            include_attention_matmuls: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostEntry {
    /// Sublayer name; entries that own parameters use the parameter group name.
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub variant: Variant,
    pub entries: Vec<CostEntry>,
}

/// Relative change of `other` against `base`; positive means `other` is smaller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reduction {
    pub params: f64,
    pub flops: f64,
}

pub fn relative_reduction(base: u64, other: u64) -> f64 {
    1.0 - other as f64 / base as f64
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn entry(&self, name: &str) -> Option<&CostEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Reduction of `self` relative to `base`.
    pub fn reduction_from(&self, base: &CostReport) -> Reduction {
        Reduction {
            params: relative_reduction(base.total_params(), self.total_params()),
            flops: relative_reduction(base.total_flops(), self.total_flops()),
        }
    }

    /// Sum of the entries whose name starts with `blocks.{index}.`.
    pub fn block_totals(&self, index: usize) -> (u64, u64) {
        let prefix = format!("blocks.{index}.");
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(&prefix))
            .fold((0, 0), |(p, f), e| (p + e.params, f + e.flops))
    }

    /// `sublayer,params,flops` rows followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sublayer,params,flops\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{}", e.name, e.params, e.flops);
        }
        let _ = writeln!(s, "total,{},{}", self.total_params(), self.total_flops());
        s
    }

    /// Aligned text table with a total line.
    pub fn to_table(&self) -> String {
        let width = self
            .entries
            .iter()
            .map(|e| e.name.len())
            .max()
            .unwrap_or(0)
            .max("sublayer".len());
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>16}", "sublayer", "params", "flops");
        for e in &self.entries {
            let _ = writeln!(s, "{:<width$}  {:>12}  {:>16}", e.name, e.params, e.flops);
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>12}  {:>16}",
            "total",
            self.total_params(),
            self.total_flops()
        );
        let _ = writeln!(
            s,
            "({} variant: {:.3}M params, {:.3} GFLOPs)",
            self.variant,
            self.total_params() as f64 / 1e6,
            self.total_flops() as f64 / 1e9
        );
        s
    }
}

struct Builder {
    opts: FlopOptions,
    entries: Vec<CostEntry>,
}

impl Builder {
    fn add(&mut self, name: impl Into<String>, params: u64, macs: u64, elementwise: u64) {
        let mut flops = 2 * macs;
        if self.opts.include_elementwise {
            flops += elementwise;
        }
        self.entries.push(CostEntry {
            name: name.into(),
            params,
            flops,
        });
    }

    /// `rows` tokens through a biased `fan_in -> fan_out` projection.
    fn linear(&mut self, name: impl Into<String>, rows: u64, fan_in: u64, fan_out: u64) {
        self.add(name, fan_in * fan_out + fan_out, rows * fan_in * fan_out, rows * fan_out);
    }

    fn norm(&mut self, name: impl Into<String>, rows: u64, width: u64) {
        self.add(name, 2 * width, 0, LAYERNORM_FLOPS * rows * width);
    }

    /// Self-attention over `t` tokens of width `d` with `heads` heads. Emits the
    /// projections (owning the parameters) and the score/value matmuls separately.
    fn attention(&mut self, group: &str, t: u64, d: u64, heads: u64) {
        self.add(group, 4 * d * d + 4 * d, 4 * t * d * d, 4 * t * d);
        // q·kᵀ and attn·v: each heads·t·t·(d/heads) MACs.
        let macs = if self.opts.include_attention_matmuls { 2 * t * t * d } else { 0 };
        // score scaling plus softmax on heads·t·t scores, and the residual add of t·d outputs
        let elementwise = (1 + SOFTMAX_FLOPS) * heads * t * t + t * d;
        self.add(format!("{group}_matmul"), 0, macs, elementwise);
    }
}

/// Parameter and FLOP counts per sublayer, in model order.
pub fn cost_report(cfg: &ModelConfig, opts: FlopOptions) -> Result<CostReport> {
    cfg.validate()?;
    let u = |x: usize| x as u64;
    let (c, n, p) = (u(cfg.embed_dim), u(cfg.num_patches()), u(cfg.patch_dim()));
    let t = n + 1;
    let v = cfg.variant;
    let mut b = Builder {
        opts,
        entries: Vec::new(),
    };

    b.linear("patch_embed", n, p, c);
    b.add("cls_token", c, 0, 0);
    b.add("pos_embed", t * c, 0, t * c);

    let learned_cls = v.splits_cls() && cfg.cls_projection == ClsProjection::LearnedLinear;
    let (ct, cw) = (u(cfg.channel_tokens()), u(cfg.channel_width()));
    let channel_heads = match v {
        Variant::Cavit | Variant::ChannelOnly => 1,
        _ => u(cfg.channel_heads),
    };
    for i in 0..cfg.depth {
        let g = |s: &str| format!("blocks.{i}.{s}");
        if v.has_spatial_attention() {
            b.norm(g("norm1"), t, c);
            b.attention(&g("attn"), t, c, u(cfg.spatial_heads));
        }
        if v.has_channel_attention() {
            b.norm(g("channel_norm"), ct, cw);
            if learned_cls {
                b.linear(g("cls_in"), 1, c, n);
            }
            b.attention(&g("channel_attn"), ct, cw, channel_heads);
            if learned_cls {
                b.linear(g("cls_out"), 1, n, c);
            }
        }
        if v.has_mlp() {
            let h = u(cfg.mlp_hidden());
            b.norm(g("norm2"), t, c);
            b.add(
                g("mlp"),
                2 * c * h + h + c,
                2 * t * c * h,
                t * h + GELU_FLOPS * t * h + 2 * t * c,
            );
        }
    }
    // Final norm and head see the class token only.
    b.norm("norm", 1, c);
    b.linear("head", 1, c, u(cfg.n_classes));
    Ok(CostReport {
        variant: v,
        entries: b.entries,
    })
}

/// Counts with the default FLOP convention.
pub fn count_params(cfg: &ModelConfig) -> Result<CostReport> {
    cost_report(cfg, FlopOptions::default())
}

pub fn count_flops(cfg: &ModelConfig, opts: FlopOptions) -> Result<CostReport> {
    cost_report(cfg, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn degenerate_config_is_hand_countable() {
        // 1x1 image, 1x1 patch: N = 1, P = 1, C = 1, no blocks, 2 classes.
        let cfg = ModelConfig {
            variant: Variant::BaselineVit,
            image_size: 1,
            patch_size: 1,
            embed_dim: 1,
            depth: 0,
            spatial_heads: 1,
            channel_heads: 1,
            mlp_ratio: 4.0,
            n_classes: 2,
            in_channels: 1,
            cls_projection: ClsProjection::Identity,
        };
        let r = count_params(&cfg).unwrap();
        // embed 1+1, cls 1, pos 2, final norm 2, head 2+2
        assert_eq!(r.total_params(), 11);
        // embed 1 MAC, head 2 MACs
        assert_eq!(r.total_flops(), 6);
    }

    #[test]
    fn large_preset_baseline_near_5_7m() {
        let r = count_params(&ModelConfig::paper()).unwrap();
        assert_eq!(r.total_params(), 5_717_416);
    }

    #[test]
    fn per_block_closed_forms() {
        let base = ModelConfig::paper();
        let (c, n) = (192u64, 196u64);
        let vit = count_params(&base).unwrap();
        assert_eq!(vit.block_totals(0).0, 4 * c * c + 4 * c + 8 * c * c + 5 * c + 4 * c);
        let mut cav_cfg = base.clone().with_variant(Variant::Cavit);
        let cav = count_params(&cav_cfg).unwrap();
        let cls = 2 * c * n + n + c;
        assert_eq!(cav.block_totals(3).0, 4 * c * c + 4 * c + 4 * n * n + 4 * n + 2 * c + 2 * n + cls);
        cav_cfg.depth += 1;
        let deeper = count_params(&cav_cfg).unwrap();
        assert_eq!(deeper.total_params() - cav.total_params(), cav.block_totals(0).0);
        assert_eq!(deeper.total_flops() - cav.total_flops(), cav.block_totals(0).1);
    }

    #[test]
    fn flop_formulas() {
        let cfg = ModelConfig::desk();
        let r = count_params(&cfg).unwrap();
        let (c, t) = (16u64, 17u64);
        assert_eq!(r.entry("blocks.0.attn_matmul").unwrap().flops, 2 * t * t * c * 2);
        assert_eq!(r.entry("blocks.0.channel_attn_matmul").unwrap().flops, 2 * t * t * 16 * 2);
        assert_eq!(r.entry("blocks.0.attn").unwrap().flops, 2 * 4 * t * c * c);
        let with = count_flops(&cfg, FlopOptions { include_elementwise: true, ..Default::default() }).unwrap();
        assert!(with.total_flops() > r.total_flops());
        assert_eq!(with.total_params(), r.total_params());
    }

    #[test]
    fn csv_and_table() {
        let r = count_params(&ModelConfig::desk()).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("sublayer,params,flops\npatch_embed,"));
        assert_eq!(csv.lines().count(), r.entries.len() + 2);
        assert!(csv.ends_with(&format!("total,{},{}\n", r.total_params(), r.total_flops())));
        assert!(r.to_table().contains("total"));
    }

    #[test]
    fn invalid_config() {
        let mut cfg = ModelConfig::desk();
        cfg.patch_size = 3;
        assert!(matches!(count_params(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn matches_live_store_by_group() {
        use crate::model::Model;
        for v in Variant::ALL {
            let mut cfg = ModelConfig::desk().with_variant(v);
            cfg.channel_heads = if v == Variant::ChannelMhsa { 2 } else { 1 };
            let m = Model::<f32>::new(cfg.clone(), 0).unwrap();
            let r = count_params(&cfg).unwrap();
            let owned: Vec<(String, u64)> = r
                .entries
                .iter()
                .filter(|e| e.params > 0)
                .map(|e| (e.name.clone(), e.params))
                .collect();
            let live: Vec<(String, u64)> = m
                .params()
                .group_counts()
                .into_iter()
                .map(|(k, v)| (k, v as u64))
                .collect();
            assert_eq!(owned, live, "{v}");
        }
    }

    #[test]
    fn matmul_flops_match_instrumented_forward() {
        use crate::model::Model;
        use crate::tensor::{matmul_macs, reset_matmul_macs, Tensor};
        for v in Variant::ALL {
            let mut cfg = ModelConfig::desk().with_variant(v);
            cfg.cls_projection = ClsProjection::LearnedLinear;
            let m = Model::<f32>::new(cfg.clone(), 0).unwrap();
            let x = Tensor::zeros([1, 1, 32, 32]).unwrap();
            reset_matmul_macs();
            m.logits(&x).unwrap();
            assert_eq!(2 * matmul_macs(), count_params(&cfg).unwrap().total_flops(), "{v}");
        }
    }
}
