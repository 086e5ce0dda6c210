//! Mixture-of-attack-experts (MoAE) layer and the plain Soft-MoE baseline.
//!
//! MoAE runs multi-head attention over the tokens and then routes every
//! head's output through a Soft-MoE: each slot is a softmax-weighted average
//! of tokens (dispatch), each expert processes its own slots, and each token
//! reads back a softmax-weighted average of slot outputs (combine). Experts
//! act on `d_h`-wide head outputs and are shared across heads. Slots are laid
//! out expert-major: slots `[e*s, (e+1)*s)` belong to expert `e`.

mod block;

pub use block::{Block, SelfAttention, Sublayer, SublayerKind};

use rand::Rng;

use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{Linear, Mlp};
use crate::params::{uniform_fan_in, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Shape hyperparameters of a MoAE layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MoaeConfig {
    /// Model width.
    pub d: usize,
    pub heads: usize,
    pub experts: usize,
    pub slots_per_expert: usize,
    /// Sequence length.
    pub tokens: usize,
    /// Hidden width of each expert MLP.
    pub expert_hidden: usize,
}

impl MoaeConfig {
    /// Four experts, two heads, one slot per expert, expert hidden width `2*d_h`.
    pub fn new(d: usize, tokens: usize) -> Self {
        let heads = 2;
        Self {
            d,
            heads,
            experts: 4,
            slots_per_expert: 1,
            tokens,
            expert_hidden: 2 * (d / heads).max(1),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn num_slots(&self) -> usize {
        self.experts * self.slots_per_expert
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.experts == 0 || self.slots_per_expert == 0 {
            return Err(Error::Config("heads, experts and slots_per_expert must be >= 1".into()));
        }
        if self.d == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d = {} is not divisible by h = {}", self.d, self.heads)));
        }
        if self.tokens == 0 || self.expert_hidden == 0 {
            return Err(Error::Config("tokens and expert_hidden must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of reals stored by [`MoaeLayer`].
    pub fn parameter_count(&self) -> usize {
        let dh = self.head_dim();
        4 * self.d * self.d
            + self.heads * dh * self.num_slots()
            + self.experts * Mlp::parameter_count(dh, self.expert_hidden)
    }

    /// Number of reals stored by [`SoftMoeLayer`].
    pub fn softmoe_parameter_count(&self) -> usize {
        self.d * self.num_slots()
            + self.experts * Mlp::parameter_count(self.d, self.softmoe_hidden())
            + self.d * self.d
    }

    fn softmoe_hidden(&self) -> usize {
        self.expert_hidden * self.heads
    }
}

/// Dispatch and combine weights of one Soft-MoE routing step, both `[n, p, m*s]`.
///
/// `dispatch` is normalized over tokens (axis 1): column `slot` holds the
/// weights that form that slot's input. `combine` is normalized over slots
/// (axis 2): row `token` holds the weights that form that token's output.
#[derive(Clone, Copy, Debug)]
pub struct RoutingWeights {
    pub dispatch: Var,
    pub combine: Var,
}

impl RoutingWeights {
    /// Largest deviation from 1 of the dispatch column sums and the combine
    /// row sums, in that order.
    pub fn normalization_error<T: Scalar>(&self, g: &Graph<T>) -> (f64, f64) {
        let d = g.value(self.dispatch);
        let c = g.value(self.combine);
        let (n, p, s) = (d.shape()[0], d.shape()[1], d.shape()[2]);
        let mut dispatch_err: f64 = 0.0;
        let mut combine_err: f64 = 0.0;
        for b in 0..n {
            for slot in 0..s {
                let col: f64 = (0..p).map(|t| d.at(&[b, t, slot]).as_f64()).sum();
                dispatch_err = dispatch_err.max((col - 1.0).abs());
            }
            for t in 0..p {
                let row: f64 = (0..s).map(|slot| c.at(&[b, t, slot]).as_f64()).sum();
                combine_err = combine_err.max((row - 1.0).abs());
            }
        }
        (dispatch_err, combine_err)
    }
}

/// Per-head scaled dot-product attention: `[n, p, d] -> [n, h, p, d_h]`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    heads: usize,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::Dimension {
            op: "multi_head_attention",
            lhs: shape,
            rhs: vec![],
        });
    }
    let (n, p, d) = (shape[0], shape[1], shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("d = {d} is not divisible by h = {heads}")));
    }
    let dh = d / heads;
    let split = |g: &mut Graph<T>, w: Var| -> Result<Var> {
        let y = g.matmul(x, w)?;
        let y = g.reshape(y, &[n, p, heads, dh])?;
        g.permute(y, &[0, 2, 1, 3])
    };
    let q = split(g, wq)?;
    let k = split(g, wk)?;
    let v = split(g, wv)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::one() / T::of(dh as f64).sqrt());
    let attn = g.softmax(scores, 3)?;
    g.matmul(attn, v)
}

/// Soft dispatch of `tokens [n, p, d_h]` into `m*s` slots.
///
/// Returns slot inputs `[n, m*s, d_h]` and the routing weights. Dispatch and
/// combine are two softmaxes of the same logits `tokens * slots`.
pub fn soft_dispatch<T: Scalar>(g: &mut Graph<T>, tokens: Var, slots: Var) -> Result<(Var, RoutingWeights)> {
    let logits = g.matmul(tokens, slots)?;
    let dispatch = g.softmax(logits, 1)?;
    let combine = g.softmax(logits, 2)?;
    let dt = g.transpose(dispatch)?;
    let slot_inputs = g.matmul(dt, tokens)?;
    Ok((slot_inputs, RoutingWeights { dispatch, combine }))
}

/// A token-wise function applied to the slots it owns.
pub trait Expert {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var>;
}

impl Expert for Mlp {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Mlp::forward(self, g, p, x)
    }
}

/// Applies expert `e` to slots `[e*s, (e+1)*s)` of `slot_inputs [n, m*s, w]`.
pub fn apply_experts<T: Scalar, E: Expert>(
    g: &mut Graph<T>,
    p: &Bound,
    slot_inputs: Var,
    experts: &[E],
    slots_per_expert: usize,
) -> Result<Var> {
    let total = g.shape(slot_inputs)[1];
    if experts.is_empty() || total != experts.len() * slots_per_expert {
        return Err(Error::Config(format!(
            "{total} slots cannot be split into {} experts x {slots_per_expert} slots",
            experts.len()
        )));
    }
    let mut outs = Vec::with_capacity(experts.len());
    for (e, expert) in experts.iter().enumerate() {
        let part = g.slice(slot_inputs, 1, e * slots_per_expert, slots_per_expert)?;
        outs.push(expert.forward(g, p, part)?);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    g.concat(&outs, 1)
}

/// Mixes slot outputs `[n, m*s, w]` back to tokens `[n, p, w]`.
pub fn soft_combine<T: Scalar>(g: &mut Graph<T>, outputs: Var, routing: &RoutingWeights) -> Result<Var> {
    g.matmul(routing.combine, outputs)
}

fn build_experts<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    count: usize,
    dim: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> Vec<Mlp> {
    (0..count)
        .map(|e| Mlp::new(store, &format!("{name}.expert{e}"), dim, hidden, rng))
        .collect()
}

/// Parameters of one MoAE layer.
#[derive(Clone, Debug)]
pub struct MoaeLayer {
    pub cfg: MoaeConfig,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// One `[d_h, m*s]` slot-embedding matrix per head.
    pub slots: Vec<ParamId>,
    pub experts: Vec<Mlp>,
    /// Output projection; zero at initialization so the layer starts as a no-op.
    pub wout: ParamId,
}

impl MoaeLayer {
    pub fn new<T: Scalar>(cfg: MoaeConfig, store: &mut ParamStore<T>, name: &str, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let dh = cfg.head_dim();
        let wq = store.add(format!("{name}.wq"), uniform_fan_in(rng, &[d, d], d));
        let wk = store.add(format!("{name}.wk"), uniform_fan_in(rng, &[d, d], d));
        let wv = store.add(format!("{name}.wv"), uniform_fan_in(rng, &[d, d], d));
        let slots = (0..cfg.heads)
            .map(|h| store.add(format!("{name}.slots{h}"), uniform_fan_in(rng, &[dh, cfg.num_slots()], dh)))
            .collect();
        let experts = build_experts(store, name, cfg.experts, dh, cfg.expert_hidden, rng);
        let wout = Linear::zeros(store, &format!("{name}.out"), d, d).w;
        Ok(Self {
            cfg,
            wq,
            wk,
            wv,
            slots,
            experts,
            wout,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, p, x)?.0)
    }

    /// Forward pass that also returns each head's routing weights.
    pub fn forward_traced<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<(Var, Vec<RoutingWeights>)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.d {
            return Err(Error::Dimension {
                op: "moae_forward",
                lhs: shape,
                rhs: vec![self.cfg.d],
            });
        }
        let (n, tokens) = (shape[0], shape[1]);
        let dh = self.cfg.head_dim();
        let attn = multi_head_attention(g, x, p[self.wq], p[self.wk], p[self.wv], self.cfg.heads)?;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut routing = Vec::with_capacity(self.cfg.heads);
        for (h, &slots) in self.slots.iter().enumerate() {
            let head = g.slice(attn, 1, h, 1)?;
            let head = g.reshape(head, &[n, tokens, dh])?;
            let (slot_inputs, r) = soft_dispatch(g, head, p[slots])?;
            let y = apply_experts(g, p, slot_inputs, &self.experts, self.cfg.slots_per_expert)?;
            heads.push(soft_combine(g, y, &r)?);
            routing.push(r);
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 2)? };
        Ok((g.matmul(merged, p[self.wout])?, routing))
    }
}

/// Soft-MoE applied directly to the tokens, without the attention stage.
#[derive(Clone, Debug)]
pub struct SoftMoeLayer {
    pub cfg: MoaeConfig,
    /// `[d, m*s]` slot embeddings.
    pub slots: ParamId,
    pub experts: Vec<Mlp>,
    pub wout: ParamId,
}

impl SoftMoeLayer {
    /// Experts are `d -> expert_hidden*h -> d`, keeping the MoAE width ratio.
    pub fn new<T: Scalar>(cfg: MoaeConfig, store: &mut ParamStore<T>, name: &str, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let slots = store.add(format!("{name}.slots"), uniform_fan_in(rng, &[d, cfg.num_slots()], d));
        let experts = build_experts(store, name, cfg.experts, d, cfg.softmoe_hidden(), rng);
        let wout = Linear::zeros(store, &format!("{name}.out"), d, d).w;
        Ok(Self {
            cfg,
            slots,
            experts,
            wout,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, p, x)?.0)
    }

    pub fn forward_traced<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<(Var, RoutingWeights)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.d {
            return Err(Error::Dimension {
                op: "softmoe_forward",
                lhs: shape,
                rhs: vec![self.cfg.d],
            });
        }
        let (slot_inputs, r) = soft_dispatch(g, x, p[self.slots])?;
        let y = apply_experts(g, p, slot_inputs, &self.experts, self.cfg.slots_per_expert)?;
        let mixed = soft_combine(g, y, &r)?;
        Ok((g.matmul(mixed, p[self.wout])?, r))
    }
}
