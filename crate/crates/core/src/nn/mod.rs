//! Neural-network building blocks composed from tape primitives.
//!
//! Every block is a thin struct of [`ParamRef`]s; `forward` binds the
//! parameters onto the context's tape, so gradients fall out of the tape's
//! backward pass.

pub mod adam;
pub mod params;

pub use adam::{Adam, AdamHyper};
pub use params::{ArchSpec, Ctx, Init, ParamRef, Params, Scope};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BatchNormMode, TensorId};

pub const WEIGHT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Affine map on the last axis: `[..., d_in] -> [..., d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamRef,
    pub bias: Option<ParamRef>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(scope: &mut Scope, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = scope.param("weight", vec![d_in, d_out], Init::TruncNormal { std: WEIGHT_STD });
        let bias = bias.then(|| scope.param("bias", vec![d_out], Init::Zeros));
        Linear { weight, bias, d_in, d_out }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: TensorId) -> Result<TensorId> {
        let shape = ctx.tape.shape(x).to_vec();
        let last = *shape.last().ok_or_else(|| Error::shape("linear", "rank >= 1", "rank 0"))?;
        if last != self.d_in {
            return Err(Error::shape("linear", format!("last dim {}", self.d_in), format!("{last}")));
        }
        let rows: usize = shape[..shape.len() - 1].iter().product::<usize>().max(1);
        let flat = ctx.tape.reshape(x, &[rows, self.d_in])?;
        let w = ctx.param(self.weight)?;
        let mut y = ctx.tape.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let b = ctx.param(b)?;
            y = ctx.tape.add(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out;
        ctx.tape.reshape(y, &out_shape)
    }
}

/// Layer normalization over the last axis with learnable affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamRef,
    pub shift: ParamRef,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(scope: &mut Scope, dim: usize) -> Self {
        LayerNorm {
            gain: scope.param("gain", vec![dim], Init::Ones),
            shift: scope.param("shift", vec![dim], Init::Zeros),
            dim,
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: TensorId) -> Result<TensorId> {
        let g = ctx.param(self.gain)?;
        let b = ctx.param(self.shift)?;
        ctx.tape.layer_norm(x, g, b, S::of_f64(LAYER_NORM_EPS))
    }
}

/// Two-layer feed-forward with GELU, hidden width `dim * mlp_ratio`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(scope: &mut Scope, dim: usize, mlp_ratio: usize) -> Self {
        let hidden = dim * mlp_ratio;
        Mlp {
            fc1: Linear::new(&mut scope.child("fc1"), dim, hidden, true),
            fc2: Linear::new(&mut scope.child("fc2"), hidden, dim, true),
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: TensorId) -> Result<TensorId> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.gelu(h)?;
        self.fc2.forward(ctx, h)
    }
}

/// Scaled dot-product attention with `heads` heads over 2D token matrices.
///
/// Self-attention is the `q_tokens == kv_tokens` case. No positional terms
/// live inside this op, so it is equivariant under row permutation of the
/// token set.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(scope: &mut Scope, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(&mut scope.child("q"), dim, dim, true),
            wk: Linear::new(&mut scope.child("k"), dim, dim, true),
            wv: Linear::new(&mut scope.child("v"), dim, dim, true),
            wo: Linear::new(&mut scope.child("out"), dim, dim, true),
            heads,
            dim,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        ctx: &mut Ctx<S>,
        q_tokens: TensorId,
        kv_tokens: TensorId,
    ) -> Result<TensorId> {
        for (name, t) in [("q_tokens", q_tokens), ("kv_tokens", kv_tokens)] {
            let s = ctx.tape.shape(t);
            if s.len() != 2 || s[1] != self.dim {
                return Err(Error::shape(
                    "multi_head_attention",
                    format!("{name} of shape [T, {}]", self.dim),
                    format!("{:?}", s),
                ));
            }
        }
        let head_dim = self.dim / self.heads;
        let scale = S::of_f64(1.0 / (head_dim as f64).sqrt());

        let q = self.wq.forward(ctx, q_tokens)?;
        let k = self.wk.forward(ctx, kv_tokens)?;
        let v = self.wv.forward(ctx, kv_tokens)?;

        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = ctx.tape.narrow(q, 1, h * head_dim, head_dim)?;
            let kh = ctx.tape.narrow(k, 1, h * head_dim, head_dim)?;
            let vh = ctx.tape.narrow(v, 1, h * head_dim, head_dim)?;
            let kt = ctx.tape.transpose2d(kh)?;
            let logits = ctx.tape.matmul(qh, kt)?;
            let logits = ctx.tape.scale(logits, scale)?;
            let weights = ctx.tape.softmax(logits, 1)?;
            head_outputs.push(ctx.tape.matmul(weights, vh)?);
        }
        let merged = ctx.tape.concat(&head_outputs, 1)?;
        self.wo.forward(ctx, merged)
    }
}

/// Pre-norm transformer layer: self-attention + MLP, both residual.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerLayer {
    pub fn new(scope: &mut Scope, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(TransformerLayer {
            norm1: LayerNorm::new(&mut scope.child("norm1"), dim),
            attn: MultiHeadAttention::new(&mut scope.child("attn"), dim, heads)?,
            norm2: LayerNorm::new(&mut scope.child("norm2"), dim),
            mlp: Mlp::new(&mut scope.child("mlp"), dim, mlp_ratio),
        })
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: TensorId) -> Result<TensorId> {
        let n = self.norm1.forward(ctx, x)?;
        let a = self.attn.forward(ctx, n, n)?;
        let x = ctx.tape.add(x, a)?;
        let n = self.norm2.forward(ctx, x)?;
        let m = self.mlp.forward(ctx, n)?;
        ctx.tape.add(x, m)
    }
}

/// Pre-norm transformer layer with cross-attention: the query stream is
/// updated from the key/value stream, which is left untouched.
#[derive(Clone, Debug)]
pub struct CrossAttentionLayer {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl CrossAttentionLayer {
    pub fn new(scope: &mut Scope, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(CrossAttentionLayer {
            norm_q: LayerNorm::new(&mut scope.child("norm_q"), dim),
            norm_kv: LayerNorm::new(&mut scope.child("norm_kv"), dim),
            attn: MultiHeadAttention::new(&mut scope.child("attn"), dim, heads)?,
            norm2: LayerNorm::new(&mut scope.child("norm2"), dim),
            mlp: Mlp::new(&mut scope.child("mlp"), dim, mlp_ratio),
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        ctx: &mut Ctx<S>,
        q: TensorId,
        kv: TensorId,
    ) -> Result<TensorId> {
        let nq = self.norm_q.forward(ctx, q)?;
        let nkv = self.norm_kv.forward(ctx, kv)?;
        let a = self.attn.forward(ctx, nq, nkv)?;
        let x = ctx.tape.add(q, a)?;
        let n = self.norm2.forward(ctx, x)?;
        let m = self.mlp.forward(ctx, n)?;
        ctx.tape.add(x, m)
    }
}

/// 2D convolution block parameter set.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamRef,
    pub bias: Option<ParamRef>,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(scope: &mut Scope, c_in: usize, c_out: usize, ksize: usize, bias: bool) -> Self {
        // padding preserves spatial dims for the supported kernel sizes (1, 3)
        let padding = (ksize - 1) / 2;
        Conv2d {
            kernel: scope.param(
                "kernel",
                vec![c_out, c_in, ksize, ksize],
                Init::TruncNormal { std: WEIGHT_STD },
            ),
            bias: bias.then(|| scope.param("bias", vec![c_out], Init::Zeros)),
            padding,
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: TensorId) -> Result<TensorId> {
        let k = ctx.param(self.kernel)?;
        let b = match self.bias {
            Some(b) => Some(ctx.param(b)?),
            None => None,
        };
        ctx.tape.conv2d(x, k, b, self.padding)
    }
}

/// Batch normalization over `[N, C, H, W]`: batch statistics while training,
/// frozen running statistics at eval.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gain: ParamRef,
    pub shift: ParamRef,
    pub running_mean: ParamRef,
    pub running_var: ParamRef,
}

impl BatchNorm2d {
    pub fn new(scope: &mut Scope, channels: usize) -> Self {
        BatchNorm2d {
            gain: scope.param("gain", vec![channels], Init::Ones),
            shift: scope.param("shift", vec![channels], Init::Zeros),
            running_mean: scope.buffer("running_mean", vec![channels], Init::Zeros),
            running_var: scope.buffer("running_var", vec![channels], Init::Ones),
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Ctx<S>, x: TensorId) -> Result<TensorId> {
        let g = ctx.param(self.gain)?;
        let b = ctx.param(self.shift)?;
        let eps = S::of_f64(BATCH_NORM_EPS);
        if ctx.training {
            let (y, mean, var) = ctx.tape.batch_norm(x, g, b, eps, BatchNormMode::Batch)?;
            // population-variance running update
            let mom = S::of_f64(BATCH_NORM_MOMENTUM);
            let keep = S::one() - mom;
            let rm = ctx.buffer_mut(self.running_mean);
            for (r, m) in rm.iter_mut().zip(mean.iter()) {
                *r = keep * *r + mom * *m;
            }
            let rv = ctx.buffer_mut(self.running_var);
            for (r, v) in rv.iter_mut().zip(var.iter()) {
                *r = keep * *r + mom * *v;
            }
            Ok(y)
        } else {
            let mode = BatchNormMode::Running {
                mean: ctx.buffer(self.running_mean).to_vec(),
                var: ctx.buffer(self.running_var).to_vec(),
            };
            let (y, _, _) = ctx.tape.batch_norm(x, g, b, eps, mode)?;
            Ok(y)
        }
    }
}
