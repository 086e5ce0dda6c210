//! Patch-transformer image encoder, the two class-text vectors and the
//! image/text similarity losses.
//!
//! Pipeline for `[n, c, H, W]` images:
//!
//! ```text
//! patchify -> linear embed -> prepend class token -> + positions
//!          -> blocks -> final layer norm -> class-token state  (pooled, [n, d])
//!          -> linear head -> L2 normalize                      (embedding, [n, e])
//! ```
//!
//! The pooled state feeds the class-regularization losses; the embedding is
//! compared against the class-text vectors.

use rand::Rng;

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::layers::{LayerNorm, Linear};
use crate::moae::{Block, MoaeConfig, SublayerKind};
use crate::params::{uniform_fan_in, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Initial value of the learnable similarity scale.
pub const INITIAL_LOGIT_SCALE: f64 = 14.3;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    pub d: usize,
    pub blocks: usize,
    pub attn_heads: usize,
    pub mlp_hidden: usize,
    pub sublayer: SublayerKind,
    /// Routing hyperparameters; `d` and `tokens` are overwritten from the encoder shape.
    pub moae: MoaeConfig,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let d = 32;
        Self {
            image_side: 16,
            patch_side: 4,
            channels: 1,
            d,
            blocks: 2,
            attn_heads: 2,
            mlp_hidden: 2 * d,
            sublayer: SublayerKind::Moae,
            moae: MoaeConfig::new(d, 17),
            embed_dim: 16,
        }
    }
}

impl EncoderConfig {
    pub fn patches_per_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    /// Sequence length including the class token.
    pub fn tokens(&self) -> usize {
        self.patches_per_side().pow(2) + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_side * self.patch_side
    }

    /// The routing configuration with `d` and `tokens` taken from this encoder.
    pub fn moae_config(&self) -> MoaeConfig {
        MoaeConfig {
            d: self.d,
            tokens: self.tokens(),
            ..self.moae.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || self.image_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return Err(Error::Config(format!(
                "image side {} is not divisible by patch side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.channels == 0 || self.d == 0 || self.embed_dim == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("channels, d, embed_dim and mlp_hidden must be >= 1".into()));
        }
        if self.attn_heads == 0 || !self.d.is_multiple_of(self.attn_heads) {
            return Err(Error::Config(format!(
                "d = {} is not divisible by {} attention heads",
                self.d, self.attn_heads
            )));
        }
        if self.sublayer != SublayerKind::None {
            self.moae_config().validate()?;
        }
        Ok(())
    }
}

/// Learnable live/fake vectors `[2, embed_dim]` and the log of the similarity scale.
#[derive(Clone, Debug)]
pub struct ClassTextEmbeddings {
    pub vectors: ParamId,
    pub log_scale: ParamId,
}

impl ClassTextEmbeddings {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, embed_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            vectors: store.add(format!("{name}.vectors"), uniform_fan_in(rng, &[2, embed_dim], embed_dim)),
            log_scale: store.add(format!("{name}.log_scale"), Tensor::scalar(T::of(INITIAL_LOGIT_SCALE.ln()))),
        }
    }

    /// Unit-norm class vectors `[2, e]`.
    pub fn normalized<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var> {
        g.l2_normalize(p[self.vectors])
    }

    /// The positive scale `exp(log_scale)`, shape `[1]`.
    pub fn logit_scale<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound) -> Var {
        g.exp(p[self.log_scale])
    }
}

/// Scaled similarities `scale * img txt^T` of unit-norm rows: `[n, e] x [k, e] -> [n, k]`.
pub fn similarity<T: Scalar>(g: &mut Graph<T>, img: Var, txt: Var, scale: Var) -> Result<Var> {
    let tt = g.transpose(txt)?;
    let s = g.matmul(img, tt)?;
    g.mul(s, scale)
}

/// Similarities of image embeddings to the live and fake vectors, `[n, 2]`.
pub fn similarity_matrix<T: Scalar>(g: &mut Graph<T>, p: &Bound, img: Var, text: &ClassTextEmbeddings) -> Result<Var> {
    let txt = text.normalized(g, p)?;
    let scale = text.logit_scale(g, p);
    similarity(g, img, txt, scale)
}

/// Symmetric image/text cross-entropy of a square similarity matrix whose
/// diagonal holds the matching pairs:
/// `-(1/2N) sum_i [log softmax_row(S)_ii + log softmax_col(S)_ii]`.
pub fn contrastive_ce<T: Scalar>(g: &mut Graph<T>, s: Var) -> Result<Var> {
    let shape = g.shape(s).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Usage(format!("contrastive_ce needs a square matrix, got {shape:?}")));
    }
    let n = shape[0];
    let eye = g.constant(Tensor::eye(n));
    let rows = g.log_softmax(s, 1)?;
    let cols = g.log_softmax(s, 0)?;
    let both = g.add(rows, cols)?;
    let diag = g.mul(both, eye)?;
    let total = g.sum_all(diag);
    Ok(g.scale(total, -T::one() / T::of(2.0 * n as f64)))
}

/// One-hot rows `[n, 2]` for `labels`.
pub fn one_hot<T: Scalar>(labels: &[Label]) -> Tensor<T> {
    Tensor::from_fn(&[labels.len(), Label::COUNT], |i| {
        if labels[i / Label::COUNT].index() == i % Label::COUNT {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Mean cross-entropy of `softmax(S)` rows against the class labels.
pub fn class_ce<T: Scalar>(g: &mut Graph<T>, s: Var, labels: &[Label]) -> Result<Var> {
    let shape = g.shape(s).to_vec();
    if shape != [labels.len(), Label::COUNT] {
        return Err(Error::Dimension {
            op: "class_ce",
            lhs: shape,
            rhs: vec![labels.len(), Label::COUNT],
        });
    }
    let ls = g.log_softmax(s, 1)?;
    let mask = g.constant(one_hot(labels));
    let picked = g.mul(ls, mask)?;
    let total = g.sum_all(picked);
    Ok(g.scale(total, -T::one() / T::of(labels.len() as f64)))
}

/// Graph outputs of one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// Class-token state after the final layer norm, `[n, d]`.
    pub pooled: Var,
    /// Unit-norm head output, `[n, embed_dim]`.
    pub embedding: Var,
}

/// Image encoder plus the class-text vectors.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub class_token: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    pub head: Linear,
    pub text: ClassTextEmbeddings,
}

impl Encoder {
    pub fn new<T: Scalar>(cfg: EncoderConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, p) = (cfg.d, cfg.tokens());
        let patch_embed = Linear::new(store, "patch_embed", cfg.patch_dim(), d, true, rng);
        let class_token = store.add("class_token", uniform_fan_in(rng, &[1, 1, d], d));
        let positions = store.add("positions", uniform_fan_in(rng, &[1, p, d], d));
        let moae = cfg.moae_config();
        let blocks = (0..cfg.blocks)
            .map(|i| Block::new(store, &format!("block{i}"), d, cfg.attn_heads, cfg.mlp_hidden, cfg.sublayer, &moae, rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_final = LayerNorm::new(store, "ln_final", d);
        let head = Linear::new(store, "head", d, cfg.embed_dim, true, rng);
        let text = ClassTextEmbeddings::new(store, "text", cfg.embed_dim, rng);
        Ok(Self {
            cfg,
            patch_embed,
            class_token,
            positions,
            blocks,
            ln_final,
            head,
            text,
        })
    }

    /// `[n, c, H, W] -> [n, patches, c*ps*ps]`, patches in row-major order.
    pub fn patchify<T: Scalar>(&self, g: &mut Graph<T>, images: Var) -> Result<Var> {
        let shape = g.shape(images).to_vec();
        let (c, side, ps) = (self.cfg.channels, self.cfg.image_side, self.cfg.patch_side);
        if shape.len() != 4 || shape[1..] != [c, side, side] {
            return Err(Error::Dimension {
                op: "encode_image",
                lhs: shape,
                rhs: vec![c, side, side],
            });
        }
        let (n, k) = (shape[0], self.cfg.patches_per_side());
        let x = g.reshape(images, &[n, c, k, ps, k, ps])?;
        let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
        g.reshape(x, &[n, k * k, self.cfg.patch_dim()])
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<Encoded> {
        let patches = self.patchify(g, images)?;
        let n = g.shape(patches)[0];
        let tokens = self.patch_embed.forward(g, p, patches)?;
        let zeros = g.constant(Tensor::zeros(&[n, 1, self.cfg.d]));
        let cls = g.add(zeros, p[self.class_token])?;
        let mut h = g.concat(&[cls, tokens], 1)?;
        h = g.add(h, p[self.positions])?;
        for block in &self.blocks {
            h = block.forward(g, p, h)?;
        }
        let h = self.ln_final.forward(g, p, h)?;
        let pooled = g.slice(h, 1, 0, 1)?;
        let pooled = g.reshape(pooled, &[n, self.cfg.d])?;
        let e = self.head.forward(g, p, pooled)?;
        let embedding = g.l2_normalize(e)?;
        Ok(Encoded { pooled, embedding })
    }
}

/// Live-minus-fake similarity per row of `S [n, 2]`; higher means more live.
pub fn liveness_scores<T: Scalar>(s: &Tensor<T>) -> Vec<f64> {
    s.data().chunks(Label::COUNT).map(|r| r[0].as_f64() - r[1].as_f64()).collect()
}

/// Encodes a batch and returns `(pooled, embedding)` as plain tensors, without gradients.
pub fn encode_image<T: Scalar>(enc: &Encoder, store: &ParamStore<T>, images: Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let x = g.constant(images);
    let out = enc.encode(&mut g, &p, x)?;
    Ok((g.value(out.pooled).clone(), g.value(out.embedding).clone()))
}

#[cfg(test)]
mod tests;
