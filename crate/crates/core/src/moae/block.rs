use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{multi_head_attention, MoaeConfig, MoaeLayer, SoftMoeLayer};
use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear, Mlp};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;

/// Which expert sublayer runs next to the MLP of a transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SublayerKind {
    None,
    SoftMoe,
    Moae,
}

impl fmt::Display for SublayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SublayerKind::None => "none",
            SublayerKind::SoftMoe => "softmoe",
            SublayerKind::Moae => "moae",
        })
    }
}

impl FromStr for SublayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SublayerKind::None),
            "softmoe" => Ok(SublayerKind::SoftMoe),
            "moae" => Ok(SublayerKind::Moae),
            other => Err(Error::Config(format!("unknown sublayer variant {other:?} (none|softmoe|moae)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Sublayer {
    None,
    SoftMoe(SoftMoeLayer),
    Moae(MoaeLayer),
}

/// Standard multi-head self-attention with an output projection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("d = {d} is not divisible by h = {heads}")));
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.wq"), d, d, false, rng),
            wk: Linear::new(store, &format!("{name}.wk"), d, d, false, rng),
            wv: Linear::new(store, &format!("{name}.wv"), d, d, false, rng),
            wo: Linear::new(store, &format!("{name}.wo"), d, d, true, rng),
            heads,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let heads = multi_head_attention(g, x, p[self.wq.w], p[self.wk.w], p[self.wv.w], self.heads)?;
        let merged = g.permute(heads, &[0, 2, 1, 3])?;
        let merged = g.reshape(merged, &shape)?;
        self.wo.forward(g, p, merged)
    }
}

/// Pre-norm transformer block with an expert sublayer in parallel to the MLP:
///
/// ```text
/// x1  = x + SelfAttn(LN1(x))
/// out = x1 + MLP(LN2(x1)) + Sublayer(LN2(x1))
/// ```
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub sub: Sublayer,
}

impl Block {
    /// The sublayer is initialized from its own seed drawn from `rng`, so
    /// blocks differing only in `kind` share every other initial value.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        attn_heads: usize,
        mlp_hidden: usize,
        kind: SublayerKind,
        moae: &MoaeConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), d);
        let attn = SelfAttention::new(store, &format!("{name}.attn"), d, attn_heads, rng)?;
        let ln2 = LayerNorm::new(store, &format!("{name}.ln2"), d);
        let mlp = Mlp::new(store, &format!("{name}.mlp"), d, mlp_hidden, rng);
        let mut sub_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let sub = match kind {
            SublayerKind::None => Sublayer::None,
            SublayerKind::SoftMoe => Sublayer::SoftMoe(SoftMoeLayer::new(moae.clone(), store, &format!("{name}.softmoe"), &mut sub_rng)?),
            SublayerKind::Moae => Sublayer::Moae(MoaeLayer::new(moae.clone(), store, &format!("{name}.moae"), &mut sub_rng)?),
        };
        Ok(Self { ln1, attn, ln2, mlp, sub })
    }

    pub fn kind(&self) -> SublayerKind {
        match self.sub {
            Sublayer::None => SublayerKind::None,
            Sublayer::SoftMoe(_) => SublayerKind::SoftMoe,
            Sublayer::Moae(_) => SublayerKind::Moae,
        }
    }

    /// The same block with the expert sublayer removed.
    pub fn without_sublayer(&self) -> Self {
        Self {
            sub: Sublayer::None,
            ..self.clone()
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let a = self.attn.forward(g, p, h)?;
        let x1 = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x1)?;
        let m = self.mlp.forward(g, p, h)?;
        let out = g.add(x1, m)?;
        match &self.sub {
            Sublayer::None => Ok(out),
            Sublayer::SoftMoe(layer) => {
                let s = layer.forward(g, p, h)?;
                g.add(out, s)
            }
            Sublayer::Moae(layer) => {
                let s = layer.forward(g, p, h)?;
                g.add(out, s)
            }
        }
    }
}
