//! Registry of gradient checks over every differentiable op and loss.

use moaecr_core::crloss::{
    attraction_loss, cdm_loss, center_relation, class_centers, dm_loss, hard_triplet, npair, objective,
    repulsion_loss, supcon, triplet, RegularizerConfig,
};
use moaecr_core::diffcore::{gradcheck_many, probe, GradcheckConfig, GradcheckReport, Graph, Tensor, Var};
use moaecr_core::encoder::{class_ce, contrastive_ce, similarity, Encoder, EncoderConfig};
use moaecr_core::layers::Mlp;
use moaecr_core::moae::{
    apply_experts, multi_head_attention, soft_combine, soft_dispatch, Block, MoaeConfig, MoaeLayer, SoftMoeLayer,
    SublayerKind,
};
use moaecr_core::params::{gradcheck_params, ParamStore};
use moaecr_core::{Label, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded cases run per registered op.
pub const CASES_PER_OP: u64 = 100;

/// Coordinates sampled per input for the composite layers.
const LAYER_COORDS: usize = 12;

pub type CheckFn = fn(u64) -> Result<GradcheckReport>;

#[derive(Clone, Copy, Debug)]
pub struct CheckCase {
    pub module: &'static str,
    pub name: &'static str,
    pub run: CheckFn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseOutcome {
    pub module: &'static str,
    pub name: &'static str,
    pub cases: u64,
    pub failures: u64,
    pub max_rel_err: f64,
    /// Seed and message of the first failing case.
    pub first_failure: Option<(u64, String)>,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub outcomes: Vec<CaseOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(CaseOutcome::passed)
    }

    /// One line per op.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for o in &self.outcomes {
            let status = if o.passed() { "PASS" } else { "FAIL" };
            out.push_str(&format!(
                "{status} {}::{} cases={} failures={} max_rel_err={:.3e}",
                o.module, o.name, o.cases, o.failures, o.max_rel_err
            ));
            if let Some((seed, msg)) = &o.first_failure {
                out.push_str(&format!(" first_failure=seed{seed}: {msg}"));
            }
            out.push('\n');
        }
        let failed = self.outcomes.iter().filter(|o| !o.passed()).count();
        out.push_str(&format!("{} ops, {failed} failed\n", self.outcomes.len()));
        out
    }
}

pub fn run_suite(registry: &[CheckCase], cases: u64) -> SuiteReport {
    let outcomes = registry
        .iter()
        .map(|c| {
            let mut o = CaseOutcome {
                module: c.module,
                name: c.name,
                cases,
                failures: 0,
                max_rel_err: 0.0,
                first_failure: None,
            };
            for seed in 0..cases {
                let msg = match (c.run)(seed) {
                    Ok(rep) => {
                        o.max_rel_err = o.max_rel_err.max(rep.max_rel_err);
                        if rep.passed {
                            continue;
                        }
                        rep.summary()
                    }
                    Err(e) => e.to_string(),
                };
                o.failures += 1;
                o.first_failure.get_or_insert((seed, msg));
            }
            o
        })
        .collect();
    SuiteReport { outcomes }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0x5bd1)
}

fn rt(shape: &[usize], r: &mut impl Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-scale..scale))
}

/// Entries with magnitude in `[lo, hi]` and a random sign when `signed`.
fn away_from_zero(shape: &[usize], r: &mut impl Rng, lo: f64, hi: f64, signed: bool) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = r.random_range(lo..hi);
        if signed && r.random_bool(0.5) {
            -v
        } else {
            v
        }
    })
}

fn shape3(r: &mut impl Rng) -> Vec<usize> {
    (0..3).map(|_| r.random_range(1..=4)).collect()
}

fn cfg(seed: u64) -> GradcheckConfig {
    GradcheckConfig {
        seed,
        ..GradcheckConfig::default()
    }
}

fn layer_cfg(seed: u64) -> GradcheckConfig {
    GradcheckConfig {
        seed,
        max_coords: Some(LAYER_COORDS),
        ..GradcheckConfig::default()
    }
}

fn check<F>(seed: u64, xs: &[Tensor<f64>], f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    gradcheck_many(
        |g, v| {
            let y = f(g, v)?;
            probe(g, y, seed)
        },
        xs,
        &cfg(seed),
    )
}

/// Random labels with both classes present.
fn labels(n: usize, r: &mut impl Rng) -> Vec<Label> {
    let mut l: Vec<Label> = (0..n).map(|i| if i % 2 == 0 { Label::Live } else { Label::Fake }).collect();
    l.shuffle(r);
    l
}

fn randomize(store: &mut ParamStore<f64>, r: &mut impl Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = rt(&shape, r, scale);
    }
}

macro_rules! unary {
    ($fname:ident, $method:ident, |$r:ident, $s:ident| $input:expr) => {
        fn $fname(seed: u64) -> Result<GradcheckReport> {
            let mut $r = rng(seed);
            let $s = shape3(&mut $r);
            let x = $input;
            check(seed, &[x], |g, v| Ok(g.$method(v[0])))
        }
    };
}

macro_rules! binary {
    ($fname:ident, $method:ident, $positive_rhs:expr) => {
        fn $fname(seed: u64) -> Result<GradcheckReport> {
            let mut r = rng(seed);
            let s = shape3(&mut r);
            let a = rt(&s, &mut r, 1.0);
            let bs = match r.random_range(0..3) {
                0 => s.clone(),
                1 => vec![s[2]],
                _ => vec![s[1], 1],
            };
            let b = if $positive_rhs {
                away_from_zero(&bs, &mut r, 0.5, 1.5, true)
            } else {
                rt(&bs, &mut r, 1.0)
            };
            if !$positive_rhs && r.random_bool(0.5) {
                // Broadcast on the left operand instead.
                return check(seed, &[b, a], |g, v| g.$method(v[0], v[1]));
            }
            check(seed, &[a, b], |g, v| g.$method(v[0], v[1]))
        }
    };
}

binary!(op_add, add, false);
binary!(op_sub, sub, false);
binary!(op_mul, mul, false);
binary!(op_div, div, true);
unary!(op_neg, neg, |r, s| rt(&s, &mut r, 1.0));
unary!(op_abs, abs, |r, s| rt(&s, &mut r, 1.0));
unary!(op_square, square, |r, s| rt(&s, &mut r, 1.0));
unary!(op_exp, exp, |r, s| rt(&s, &mut r, 1.5));
unary!(op_log, log, |r, s| away_from_zero(&s, &mut r, 0.3, 3.0, false));
unary!(op_sqrt, sqrt, |r, s| away_from_zero(&s, &mut r, 0.3, 3.0, false));
unary!(op_tanh, tanh, |r, s| rt(&s, &mut r, 2.0));
unary!(op_relu, relu, |r, s| rt(&s, &mut r, 1.0));
unary!(op_gelu, gelu, |r, s| rt(&s, &mut r, 2.0));

fn op_scale(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let x = rt(&shape3(&mut r), &mut r, 1.0);
    let c = r.random_range(-2.0..2.0);
    check(seed, &[x], |g, v| Ok(g.scale(v[0], c)))
}

fn op_add_scalar(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let x = rt(&shape3(&mut r), &mut r, 1.0);
    let c = r.random_range(-2.0..2.0);
    check(seed, &[x], |g, v| Ok(g.add_scalar(v[0], c)))
}

fn op_hinge(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let x = rt(&shape3(&mut r), &mut r, 1.0);
    let t = r.random_range(-0.5..0.5);
    check(seed, &[x], |g, v| Ok(g.hinge(v[0], t)))
}

fn op_matmul(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (n, i, j, k) = (r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=4));
    let a = rt(&[n, i, j], &mut r, 1.0);
    let b = if r.random_bool(0.5) { rt(&[n, j, k], &mut r, 1.0) } else { rt(&[j, k], &mut r, 1.0) };
    check(seed, &[a, b], |g, v| g.matmul(v[0], v[1]))
}

fn op_transpose(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let x = rt(&shape3(&mut r), &mut r, 1.0);
    check(seed, &[x], |g, v| g.transpose(v[0]))
}

fn op_permute(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let x = rt(&shape3(&mut r), &mut r, 1.0);
    let mut perm = vec![0, 1, 2];
    perm.shuffle(&mut r);
    check(seed, &[x], |g, v| g.permute(v[0], &perm))
}

fn op_reshape(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let s = shape3(&mut r);
    let x = rt(&s, &mut r, 1.0);
    let to = [s[0] * s[1], s[2]];
    check(seed, &[x], |g, v| g.reshape(v[0], &to))
}

fn op_concat(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let s = shape3(&mut r);
    let axis = r.random_range(0..3);
    let mut s2 = s.clone();
    s2[axis] = r.random_range(1..=3);
    let (a, b) = (rt(&s, &mut r, 1.0), rt(&s2, &mut r, 1.0));
    check(seed, &[a, b], |g, v| g.concat(&[v[0], v[1]], axis))
}

fn op_slice(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let mut s = shape3(&mut r);
    let axis = r.random_range(0..3);
    s[axis] += 1;
    let start = r.random_range(0..s[axis]);
    let len = r.random_range(1..=s[axis] - start);
    let x = rt(&s, &mut r, 1.0);
    check(seed, &[x], |g, v| g.slice(v[0], axis, start, len))
}

macro_rules! reduce_axis {
    ($fname:ident, $method:ident) => {
        fn $fname(seed: u64) -> Result<GradcheckReport> {
            let mut r = rng(seed);
            let x = rt(&shape3(&mut r), &mut r, 2.0);
            let axis = r.random_range(0..3);
            check(seed, &[x], |g, v| g.$method(v[0], axis))
        }
    };
}

reduce_axis!(op_sum, sum);
reduce_axis!(op_mean, mean);
reduce_axis!(op_max, max);
reduce_axis!(op_softmax, softmax);
reduce_axis!(op_log_softmax, log_softmax);
reduce_axis!(op_logsumexp, logsumexp);

fn op_sum_all(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let x = rt(&shape3(&mut r), &mut r, 1.0);
    check(seed, &[x], |g, v| Ok(g.sum_all(v[0])))
}

fn op_mean_all(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let x = rt(&shape3(&mut r), &mut r, 1.0);
    check(seed, &[x], |g, v| Ok(g.mean_all(v[0])))
}

fn op_logsumexp_masked(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (a, b) = (r.random_range(1..=4), r.random_range(1..=4));
    let x = rt(&[a, b], &mut r, 2.0);
    // Reduce axis 1; keep at least the first entry of every row.
    let mask: Vec<bool> = (0..a * b).map(|i| i % b == 0 || r.random_bool(0.6)).collect();
    check(seed, &[x], |g, v| g.logsumexp_masked(v[0], 1, &mask))
}

fn op_layer_norm(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let mut s = shape3(&mut r);
    s[2] += 1;
    let x = rt(&s, &mut r, 2.0);
    check(seed, &[x], |g, v| g.layer_norm(v[0], 1e-5))
}

fn op_l2_normalize(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (n, d) = (r.random_range(1..=4), r.random_range(1..=5));
    let x = away_from_zero(&[n, d], &mut r, 0.2, 1.5, true);
    check(seed, &[x], |g, v| g.l2_normalize(v[0]))
}

fn moae_cfg(r: &mut impl Rng) -> MoaeConfig {
    let heads = r.random_range(1..=2);
    let d = heads * r.random_range(1..=3);
    MoaeConfig {
        d,
        heads,
        experts: r.random_range(1..=3),
        slots_per_expert: r.random_range(1..=2),
        tokens: r.random_range(1..=4),
        expert_hidden: r.random_range(1..=4),
    }
}

fn op_attention(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let heads = r.random_range(1..=3);
    let d = heads * r.random_range(1..=2);
    let (n, p) = (r.random_range(1..=2), r.random_range(1..=4));
    let x = rt(&[n, p, d], &mut r, 1.0);
    let w: Vec<Tensor<f64>> = (0..3).map(|_| rt(&[d, d], &mut r, 0.8)).collect();
    check(seed, &[x, w[0].clone(), w[1].clone(), w[2].clone()], |g, v| {
        multi_head_attention(g, v[0], v[1], v[2], v[3], heads)
    })
}

fn op_soft_dispatch(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (n, p, d, slots) = (r.random_range(1..=2), r.random_range(1..=4), r.random_range(1..=3), r.random_range(1..=4));
    let x = rt(&[n, p, d], &mut r, 1.0);
    let phi = rt(&[d, slots], &mut r, 1.0);
    check(seed, &[x, phi], |g, v| Ok(soft_dispatch(g, v[0], v[1])?.0))
}

fn op_soft_combine(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (n, p, d, slots) = (r.random_range(1..=2), r.random_range(1..=4), r.random_range(1..=3), r.random_range(1..=4));
    let x = rt(&[n, p, d], &mut r, 1.0);
    let phi = rt(&[d, slots], &mut r, 1.0);
    let y = rt(&[n, slots, d], &mut r, 1.0);
    check(seed, &[x, phi, y], |g, v| {
        let (_, routing) = soft_dispatch(g, v[0], v[1])?;
        soft_combine(g, v[2], &routing)
    })
}

fn op_experts(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (m, s, d, hidden) = (r.random_range(1..=3), r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=4));
    let mut store = ParamStore::new();
    let experts: Vec<Mlp> = (0..m).map(|e| Mlp::new(&mut store, &format!("e{e}"), d, hidden, &mut r)).collect();
    randomize(&mut store, &mut r, 0.8);
    let x = rt(&[r.random_range(1..=2), m * s, d], &mut r, 1.0);
    gradcheck_params(
        &store,
        &[x],
        |g, xs, b| {
            let y = apply_experts(g, b, xs[0], &experts, s)?;
            probe(g, y, seed)
        },
        &cfg(seed),
    )
}

fn op_moae_layer(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let c = moae_cfg(&mut r);
    let mut store = ParamStore::new();
    let layer = MoaeLayer::new(c.clone(), &mut store, "moae", &mut r)?;
    randomize(&mut store, &mut r, 0.6);
    let x = rt(&[r.random_range(1..=2), c.tokens, c.d], &mut r, 1.0);
    gradcheck_params(
        &store,
        &[x],
        |g, xs, b| {
            let y = layer.forward(g, b, xs[0])?;
            probe(g, y, seed)
        },
        &layer_cfg(seed),
    )
}

fn op_softmoe_layer(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let c = moae_cfg(&mut r);
    let mut store = ParamStore::new();
    let layer = SoftMoeLayer::new(c.clone(), &mut store, "softmoe", &mut r)?;
    randomize(&mut store, &mut r, 0.6);
    let x = rt(&[r.random_range(1..=2), c.tokens, c.d], &mut r, 1.0);
    gradcheck_params(
        &store,
        &[x],
        |g, xs, b| {
            let y = layer.forward(g, b, xs[0])?;
            probe(g, y, seed)
        },
        &layer_cfg(seed),
    )
}

fn op_block(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let c = moae_cfg(&mut r);
    let kind = [SublayerKind::None, SublayerKind::SoftMoe, SublayerKind::Moae][seed as usize % 3];
    let mut store = ParamStore::new();
    let block = Block::new(&mut store, "block", c.d, c.heads, 2 * c.d, kind, &c, &mut r)?;
    randomize(&mut store, &mut r, 0.6);
    let x = rt(&[r.random_range(1..=2), c.tokens, c.d], &mut r, 1.0);
    gradcheck_params(
        &store,
        &[x],
        |g, xs, b| {
            let y = block.forward(g, b, xs[0])?;
            probe(g, y, seed)
        },
        &layer_cfg(seed),
    )
}

fn op_encoder(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let kind = [SublayerKind::None, SublayerKind::SoftMoe, SublayerKind::Moae][seed as usize % 3];
    let cfg = EncoderConfig {
        image_side: 8,
        patch_side: 4,
        channels: 1,
        d: 4,
        blocks: 1,
        attn_heads: 2,
        mlp_hidden: 6,
        sublayer: kind,
        moae: MoaeConfig {
            experts: 2,
            expert_hidden: 3,
            ..MoaeConfig::new(4, 5)
        },
        embed_dim: 3,
    };
    let mut store = ParamStore::new();
    let enc = Encoder::new(cfg, &mut store, &mut r)?;
    randomize(&mut store, &mut r, 0.6);
    let x = rt(&[2, 1, 8, 8], &mut r, 1.0);
    gradcheck_params(
        &store,
        &[x],
        |g, xs, b| {
            let e = enc.encode(g, b, xs[0])?;
            let s = moaecr_core::encoder::similarity_matrix(g, b, e.embedding, &enc.text)?;
            let y = g.concat(&[e.pooled, s], 1)?;
            probe(g, y, seed)
        },
        &layer_cfg(seed),
    )
}

fn op_similarity(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (n, e) = (r.random_range(1..=4), r.random_range(1..=4));
    let img = rt(&[n, e], &mut r, 1.0);
    let txt = rt(&[2, e], &mut r, 1.0);
    let scale = away_from_zero(&[], &mut r, 0.5, 3.0, false);
    check(seed, &[img, txt, scale], |g, v| similarity(g, v[0], v[1], v[2]))
}

fn op_class_ce(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let n = r.random_range(1..=6);
    let s = rt(&[n, 2], &mut r, 3.0);
    let l = labels(n, &mut r);
    check(seed, &[s], |g, v| class_ce(g, v[0], &l))
}

fn op_contrastive_ce(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let n = r.random_range(1..=5);
    let s = rt(&[n, n], &mut r, 3.0);
    check(seed, &[s], |g, v| contrastive_ce(g, v[0]))
}

/// Features `[n, d]` with both labels present.
fn features(r: &mut impl Rng) -> (Tensor<f64>, Vec<Label>) {
    let (n, d) = (r.random_range(2..=6), r.random_range(1..=4));
    (rt(&[n, d], r, 1.5), labels(n, r))
}

fn op_class_centers(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (x, l) = features(&mut r);
    check(seed, &[x], |g, v| Ok(class_centers(g, v[0], &l)?.centers))
}

fn op_dm_loss(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (x, l) = features(&mut r);
    let t = r.random_range(-0.5..0.9);
    check(seed, &[x], |g, v| {
        let c = class_centers(g, v[0], &l)?;
        let rel = center_relation(g, &c, t)?;
        dm_loss(g, &rel)
    })
}

fn op_attraction_loss(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (x, l) = features(&mut r);
    check(seed, &[x], |g, v| {
        let c = class_centers(g, v[0], &l)?;
        attraction_loss(g, v[0], &c, &l)
    })
}

fn op_repulsion_loss(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (x, l) = features(&mut r);
    check(seed, &[x], |g, v| {
        let c = class_centers(g, v[0], &l)?;
        repulsion_loss(g, v[0], &c, &l)
    })
}

fn op_cdm_loss(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (x, l) = features(&mut r);
    check(seed, &[x], |g, v| {
        let c = class_centers(g, v[0], &l)?;
        Ok(cdm_loss(g, v[0], &c, &l)?.2)
    })
}

fn op_total_loss(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (x, l) = features(&mut r);
    let s = rt(&[l.len(), 2], &mut r, 3.0);
    let reg = RegularizerConfig {
        t: r.random_range(-0.5..0.9),
        ..RegularizerConfig::default()
    };
    check(seed, &[x, s], |g, v| {
        let ce = class_ce(g, v[1], &l)?;
        Ok(objective(g, ce, v[0], &l, &reg)?.total)
    })
}

fn op_triplet(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (x, l) = features(&mut r);
    check(seed, &[x], |g, v| triplet(g, v[0], &l, 0.3))
}

fn op_hard_triplet(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (x, l) = features(&mut r);
    check(seed, &[x], |g, v| hard_triplet(g, v[0], &l, 0.3))
}

fn op_npair(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (x, l) = features(&mut r);
    check(seed, &[x], |g, v| npair(g, v[0], &l))
}

fn op_supcon(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (n, d) = (r.random_range(2..=6), r.random_range(1..=4));
    // Unit-scale embeddings keep exp(x.y / 0.1) moderate.
    let x = rt(&[n, d], &mut r, 0.5);
    let l = labels(n, &mut r);
    check(seed, &[x], |g, v| supcon(g, v[0], &l, 0.1))
}

/// Every registered check, each op exactly once.
pub fn registry() -> Vec<CheckCase> {
    macro_rules! entries {
        ($($module:literal => [$($name:literal: $f:ident),* $(,)?]),* $(,)?) => {
            vec![$($(CheckCase { module: $module, name: $name, run: $f }),*),*]
        };
    }
    entries! {
        "diffcore" => [
            "add": op_add, "sub": op_sub, "mul": op_mul, "div": op_div,
            "scale": op_scale, "add_scalar": op_add_scalar, "neg": op_neg,
            "abs": op_abs, "square": op_square, "exp": op_exp, "log": op_log,
            "sqrt": op_sqrt, "tanh": op_tanh, "relu": op_relu, "gelu": op_gelu,
            "hinge": op_hinge, "matmul": op_matmul, "transpose": op_transpose,
            "permute": op_permute, "reshape": op_reshape, "concat": op_concat,
            "slice": op_slice, "sum": op_sum, "mean": op_mean, "sum_all": op_sum_all,
            "mean_all": op_mean_all, "max": op_max, "softmax": op_softmax,
            "log_softmax": op_log_softmax, "logsumexp": op_logsumexp,
            "logsumexp_masked": op_logsumexp_masked, "layer_norm": op_layer_norm,
            "l2_normalize": op_l2_normalize,
        ],
        "moae" => [
            "multi_head_attention": op_attention, "soft_dispatch": op_soft_dispatch,
            "apply_experts": op_experts, "soft_combine": op_soft_combine,
            "moae_layer": op_moae_layer, "softmoe_layer": op_softmoe_layer, "block": op_block,
        ],
        "encoder" => [
            "encode_image": op_encoder, "similarity": op_similarity,
            "class_ce": op_class_ce, "contrastive_ce": op_contrastive_ce,
        ],
        "crloss" => [
            "class_centers": op_class_centers, "dm_loss": op_dm_loss,
            "attraction_loss": op_attraction_loss, "repulsion_loss": op_repulsion_loss,
            "cdm_loss": op_cdm_loss, "total_loss": op_total_loss,
            "triplet": op_triplet, "hard_triplet": op_hard_triplet,
            "npair": op_npair, "supcon": op_supcon,
        ],
    }
}

/// A square op whose backward rule returns `3x` instead of `2x`.
pub fn corrupted_square(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let x = rt(&shape3(&mut r), &mut r, 1.0);
    check(seed, &[x], |g, v| {
        let value = g.value(v[0]).map(|a| a * a);
        let backward: moaecr_core::diffcore::BackwardFn<f64> = Box::new(|inputs, _, grad| {
            let data = inputs[0].data().iter().zip(grad.data()).map(|(a, g)| 3.0 * a * g).collect();
            vec![Tensor::new(grad.shape().to_vec(), data).expect("same shape")]
        });
        Ok(g.custom("corrupted_square", &[v[0]], value, backward))
    })
}
