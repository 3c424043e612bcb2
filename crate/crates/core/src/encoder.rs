//! ViT-style image encoder.
//!
//! Images are split into non-overlapping patches, linearly projected, tagged
//! with positional embeddings and a class token, and run through pre-norm
//! transformer layers. Selected intermediate token maps feed the decoder;
//! the final class token and final token map are additionally normalized and
//! projected to the semantic feature dimension (shared projection weights).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Linear, LayerNorm, ParamRef, Scope, TransformerLayer, WEIGHT_STD};
use crate::scalar::Scalar;
use crate::tensor::TensorId;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub clip_dim: usize,
    /// 1-based indices of the layers whose outputs feed the decoder;
    /// strictly increasing, last one equals `depth`.
    pub intermediate_indices: Vec<usize>,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "encoder: image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder: hidden dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.intermediate_indices.is_empty()
            || self.intermediate_indices.windows(2).any(|w| w[0] >= w[1])
            || *self.intermediate_indices.last().unwrap() != self.depth
            || self.intermediate_indices[0] == 0
        {
            return Err(Error::Config(format!(
                "encoder: intermediate indices {:?} must be strictly increasing, 1-based, ending at depth {}",
                self.intermediate_indices, self.depth
            )));
        }
        Ok(())
    }

    /// Tokens per image side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch tokens per image.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Per-group encoder outputs, one entry per image.
pub struct EncoderOutput {
    /// Raw final-layer class token, shape `[1, C]`.
    pub class_tokens: Vec<TensorId>,
    /// Selected intermediate patch-token maps, `[level][image]`, each `[T, C]`.
    pub level_maps: Vec<Vec<TensorId>>,
    /// Projected class vector, shape `[1, D_clip]`.
    pub clip_vectors: Vec<TensorId>,
    /// Projected final patch map, shape `[T, D_clip]`.
    pub clip_maps: Vec<TensorId>,
}

pub struct VitEncoder {
    pub cfg: EncoderConfig,
    patch_proj: Linear,
    class_token: ParamRef,
    pos_embed: ParamRef,
    blocks: Vec<TransformerLayer>,
    final_norm: LayerNorm,
    clip_proj: Linear,
}

impl VitEncoder {
    pub fn new(scope: &mut Scope, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let t = cfg.tokens();
        let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
        let patch_proj = Linear::new(&mut scope.child("patch"), patch_dim, cfg.dim, true);
        let class_token = scope.param("class_token", vec![1, cfg.dim], Init::TruncNormal { std: WEIGHT_STD });
        let pos_embed = scope.param("pos_embed", vec![t + 1, cfg.dim], Init::TruncNormal { std: WEIGHT_STD });
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            blocks.push(TransformerLayer::new(
                &mut scope.child(&format!("block{l}")),
                cfg.dim,
                cfg.heads,
                cfg.mlp_ratio,
            )?);
        }
        let final_norm = LayerNorm::new(&mut scope.child("final_norm"), cfg.dim);
        // bias-free projection to the semantic feature space
        let clip_proj = Linear::new(&mut scope.child("clip_proj"), cfg.dim, cfg.clip_dim, false);
        Ok(VitEncoder {
            cfg,
            patch_proj,
            class_token,
            pos_embed,
            blocks,
            final_norm,
            clip_proj,
        })
    }

    /// Patch-embed one image: `[3, H, W]` raw values to `[T, C]` tokens with
    /// positional embeddings added. The class token is prepended downstream.
    pub fn patch_embed<S: Scalar>(
        &self,
        ctx: &mut Ctx<S>,
        image: &[S],
        height: usize,
        width: usize,
    ) -> Result<TensorId> {
        let side = self.cfg.image_size;
        if height != side || width != side {
            return Err(Error::shape(
                "patch_embed",
                format!("{side}x{side} image"),
                format!("{height}x{width}"),
            ));
        }
        if image.len() != 3 * side * side {
            return Err(Error::shape(
                "patch_embed",
                format!("{} values", 3 * side * side),
                format!("{}", image.len()),
            ));
        }
        let p = self.cfg.patch_size;
        let g = self.cfg.grid();
        let t = self.cfg.tokens();
        let patch_dim = 3 * p * p;
        let mut rearranged = vec![S::zero(); t * patch_dim];
        for py in 0..g {
            for px in 0..g {
                let token = py * g + px;
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            let src = (c * side + py * p + dy) * side + px * p + dx;
                            let dst = token * patch_dim + (c * p + dy) * p + dx;
                            rearranged[dst] = image[src];
                        }
                    }
                }
            }
        }
        let patches = ctx.tape.constant(rearranged, &[t, patch_dim])?;
        let tokens = self.patch_proj.forward(ctx, patches)?;
        let pos = ctx.param(self.pos_embed)?;
        let patch_pos = ctx.tape.narrow(pos, 0, 1, t)?;
        ctx.tape.add(tokens, patch_pos)
    }

    /// Encode a group of images. Purely per-image: no cross-image pathway.
    pub fn encode<S: Scalar>(
        &self,
        ctx: &mut Ctx<S>,
        images: &[Vec<S>],
    ) -> Result<EncoderOutput> {
        if images.is_empty() {
            return Err(Error::Usage("encode called with an empty group".into()));
        }
        let side = self.cfg.image_size;
        let t = self.cfg.tokens();
        let levels = self.cfg.intermediate_indices.clone();

        let mut class_tokens = Vec::with_capacity(images.len());
        let mut level_maps: Vec<Vec<TensorId>> = vec![Vec::with_capacity(images.len()); levels.len()];
        let mut clip_vectors = Vec::with_capacity(images.len());
        let mut clip_maps = Vec::with_capacity(images.len());

        for image in images {
            let patches = self.patch_embed(ctx, image, side, side)?;
            let cls = ctx.param(self.class_token)?;
            let pos = ctx.param(self.pos_embed)?;
            let cls_pos = ctx.tape.narrow(pos, 0, 0, 1)?;
            let cls = ctx.tape.add(cls, cls_pos)?;
            let mut tokens = ctx.tape.concat(&[cls, patches], 0)?;

            let mut final_map = None;
            for (layer_idx, block) in self.blocks.iter().enumerate() {
                tokens = block.forward(ctx, tokens)?;
                let layer_no = layer_idx + 1;
                if let Some(slot) = levels.iter().position(|&l| l == layer_no) {
                    let map = ctx.tape.narrow(tokens, 0, 1, t)?;
                    level_maps[slot].push(map);
                    if layer_no == self.cfg.depth {
                        final_map = Some(map);
                    }
                }
            }
            let class_token = ctx.tape.narrow(tokens, 0, 0, 1)?;
            class_tokens.push(class_token);
            clip_vectors.push(self.clip_project(ctx, class_token)?);
            let final_map = final_map.expect("last intermediate index equals depth");
            clip_maps.push(self.clip_project(ctx, final_map)?);
        }

        Ok(EncoderOutput { class_tokens, level_maps, clip_vectors, clip_maps })
    }

    /// Shared normalization + projection into the semantic feature space.
    /// The same weights serve the class token and the patch map.
    pub fn clip_project<S: Scalar>(&self, ctx: &mut Ctx<S>, x: TensorId) -> Result<TensorId> {
        let n = self.final_norm.forward(ctx, x)?;
        self.clip_proj.forward(ctx, n)
    }

    pub fn clip_proj_weight(&self) -> ParamRef {
        self.clip_proj.weight
    }
}
