//! Model assembly: patch embedding, class token and positions, blocks, classifier head.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod params;
pub mod swap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use blocks::{variant_block, BlockOutput, BlockVars, LN_EPS};
pub use config::{ClsProjection, ModelConfig, Variant};
pub use params::{param_layout, BoundParams, ParamSpec, ParamStore};
pub use swap::{swap_in, swap_out, ClsMap};

/// Cut `[B, in_channels, W, W]` images into `[B, N, in_channels·w·w]` patch rows.
///
/// Patches are scanned row by row from the top-left. Each patch is flattened
/// row-major over `(row, column, channel)`.
pub fn patchify<T: Real>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let d = images.dims();
    if d.len() != 4 || d[2] != d[3] || patch == 0 || d[2] % patch != 0 {
        return Err(Error::Rank {
            op: "patchify",
            expected: "[B, channels, W, W] with W divisible by the patch size",
            dims: d.to_vec(),
        });
    }
    let (b, ch, side) = (d[0], d[1], d[2]);
    let grid = side / patch;
    let pdim = ch * patch * patch;
    let src = images.data();
    let mut out = Vec::with_capacity(images.len());
    for n in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                for py in 0..patch {
                    for px in 0..patch {
                        let (y, x) = (gy * patch + py, gx * patch + px);
                        for c in 0..ch {
                            out.push(src[((n * ch + c) * side + y) * side + x]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new([b, grid * grid, pdim], out)
}

/// Linear projection of each patch to width `C`: `[B, N, P] · [P, C] + b`.
pub fn patch_embed<T: Real>(tape: &mut Tape<T>, images: &Tensor<T>, patch: usize, weight: Var, bias: Var) -> Result<Var> {
    let patches = tape.constant(patchify(images, patch)?);
    let tokens = tape.matmul(patches, weight)?;
    tape.add(tokens, bias)
}

/// Prepend the class token (broadcast over the batch) and add positions:
/// `[B, N, C] -> [B, N+1, C]`.
pub fn add_cls_and_pos<T: Real>(tape: &mut Tape<T>, tokens: Var, cls: Var, pos: Var) -> Result<Var> {
    let td = tape.dims(tokens).to_vec();
    let (cd, pd) = (tape.dims(cls).to_vec(), tape.dims(pos).to_vec());
    if td.len() != 3 || cd != [1, 1, td[2]] || pd != [1, td[1] + 1, td[2]] {
        return Err(Error::Dimension {
            op: "add_cls_and_pos",
            lhs: td,
            rhs: if cd.len() == 3 && cd[2] == tape.dims(tokens)[2] { pd } else { cd },
        });
    }
    let zeros = tape.constant(Tensor::zeros([td[0], 1, td[2]])?);
    let cls = tape.add(zeros, cls)?;
    let seq = tape.concat_axis1(cls, tokens)?;
    tape.add(seq, pos)
}

/// Values recorded by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `[B, n_classes]`
    pub logits: Var,
    pub params: BoundParams,
    pub blocks: Vec<BlockOutput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Freshly initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamStore::init(&param_layout(&config), &mut rng)?;
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        params.check_layout(&param_layout(&config))?;
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        let d = images.dims();
        if d.len() != 4 || d[1..] != [c.in_channels, c.image_size, c.image_size] {
            return Err(Error::Dimension {
                op: "forward",
                lhs: d.to_vec(),
                rhs: vec![0, c.in_channels, c.image_size, c.image_size],
            });
        }
        Ok(())
    }

    /// Record a full forward pass of `images: [B, in_channels, W, W]` on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, images: &Tensor<T>) -> Result<ForwardPass> {
        self.check_images(images)?;
        let cfg = &self.config;
        let bound = self.params.bind(tape);
        let tokens = patch_embed(
            tape,
            images,
            cfg.patch_size,
            bound.get("patch_embed.weight")?,
            bound.get("patch_embed.bias")?,
        )?;
        let mut x = add_cls_and_pos(tape, tokens, bound.get("cls_token")?, bound.get("pos_embed")?)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let vars = BlockVars::resolve(&bound, cfg, i)?;
            let out = variant_block(tape, x, &vars, cfg)?;
            x = out.out;
            blocks.push(out);
        }
        let batch = images.dims()[0];
        let cls = tape.slice_axis1(x, 0, 1)?;
        let cls = tape.reshape(cls, [batch, cfg.embed_dim])?;
        let cls = tape.layernorm(cls, bound.get("norm.gamma")?, bound.get("norm.beta")?, T::lit(LN_EPS))?;
        let logits = tape.matmul(cls, bound.get("head.weight")?)?;
        let logits = tape.add(logits, bound.get("head.bias")?)?;
        Ok(ForwardPass {
            logits,
            params: bound,
            blocks,
        })
    }

    /// Logits without keeping the tape.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let fp = self.forward(&mut tape, images)?;
        Ok(tape.value(fp.logits).clone())
    }

    /// Mean cross-entropy of `images` against `labels`.
    pub fn loss(&self, images: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let mut tape = Tape::new();
        let fp = self.forward(&mut tape, images)?;
        let loss = tape.cross_entropy(fp.logits, labels)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Forward, backward, and gradients copied into the store's slots.
    /// Returns the loss and the logits.
    pub fn loss_and_grads(&mut self, images: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
        let mut tape = Tape::new();
        let fp = self.forward(&mut tape, images)?;
        let loss = tape.cross_entropy(fp.logits, labels)?;
        tape.backward(loss)?;
        self.params.collect_grads(&tape, &fp.params)?;
        Ok((tape.value(loss).data()[0], tape.value(fp.logits).clone()))
    }
}
