//! Class-regularization losses on pooled image features and the metric
//! learning baselines they are compared against.
//!
//! With `X [n, p]` features, labels `y` and class centers `C [2, p]`:
//!
//! ```text
//! R_c  = C C^T / sqrt(p)          R_or = R_c with zero diagonal
//! Q    = max(R_or - t, 0)         L_dm  = mean_i (LSE_{j != i} Q_ij)^2
//! R'_i = |x_i - C_{y_i}|          L_att = mean_i (LSE_k R'_ik)^2
//! R''  = softmax(X C^T)           L_rep = mean_i (LSE_{j != y_i} R''_ij)^2
//! L_cdm = L_att + L_rep           L_total = L_ce + L_dm + L_cdm
//! ```
//!
//! Every LSE is max-shifted with the maximum added back. All three penalties
//! are nonnegative and vanish when the classes are separated and tight.
//!
//! Baselines (`d` = squared Euclidean distance, `margin` default 0.3):
//!
//! - [`triplet`]: mean of `max(d(a,p) - d(a,n) + margin, 0)` over every
//!   anchor/positive/negative triple with `a != p`.
//! - [`hard_triplet`]: per anchor, the farthest same-class sample (the anchor
//!   itself when it is alone in its class) and the nearest other-class sample.
//! - [`npair`]: per anchor, the positive is the next same-class sample in batch
//!   order (cyclic) and the negatives are all other-class samples;
//!   `log(1 + sum_n exp(f_a.f_n - f_a.f_p))`, averaged over anchors.
//! - [`supcon`]: supervised contrastive loss on L2-normalized features with
//!   temperature `tau` (default 0.1), averaged over anchors with a positive.
//!
//! A baseline with no valid term returns 0 and logs a warning.

use crate::diffcore::{Graph, Tensor, Var};
use crate::encoder::one_hot;
use crate::error::{Error, Result};
use crate::label::{class_counts, Label};
use crate::scalar::Scalar;

/// Default relation threshold `t`.
pub const RELATION_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MARGIN: f64 = 0.3;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Per-class mean features `[2, p]` (row 0 live, row 1 fake).
#[derive(Clone, Copy, Debug)]
pub struct ClassCenters {
    pub centers: Var,
    pub counts: [usize; 2],
}

/// Relation matrices between the two class centers, all `[2, 2]`.
#[derive(Clone, Copy, Debug)]
pub struct RelationMatrix {
    pub rc: Var,
    pub ror: Var,
    pub q: Var,
    pub t: f64,
}

/// Scalar values of every loss term of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub l_ce: f64,
    pub l_dm: f64,
    pub l_att: f64,
    pub l_rep: f64,
    pub l_cdm: f64,
    pub l_total: f64,
}

impl LossBundle {
    pub fn new(l_ce: f64, l_dm: f64, l_att: f64, l_rep: f64) -> Self {
        let l_cdm = l_att + l_rep;
        Self {
            l_ce,
            l_dm,
            l_att,
            l_rep,
            l_cdm,
            l_total: l_ce + l_dm + l_cdm,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_ce, self.l_dm, self.l_att, self.l_rep, self.l_cdm, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Graph nodes of every loss term of one step.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub ce: Var,
    pub dm: Var,
    pub att: Var,
    pub rep: Var,
    pub cdm: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn bundle<T: Scalar>(&self, g: &Graph<T>) -> LossBundle {
        let v = |x: Var| g.value(x).item().as_f64();
        LossBundle {
            l_ce: v(self.ce),
            l_dm: v(self.dm),
            l_att: v(self.att),
            l_rep: v(self.rep),
            l_cdm: v(self.cdm),
            l_total: v(self.total),
        }
    }
}

fn check_rows<T: Scalar>(g: &Graph<T>, op: &'static str, x: Var, labels: &[Label]) -> Result<(usize, usize)> {
    let shape = g.shape(x);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Dimension {
            op,
            lhs: shape.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    Ok((shape[0], shape[1]))
}

/// Per-class means of `x [n, p]`, differentiable through `x`.
pub fn class_centers<T: Scalar>(g: &mut Graph<T>, x: Var, labels: &[Label]) -> Result<ClassCenters> {
    let (n, _) = check_rows(g, "class_centers", x, labels)?;
    let counts = class_counts(labels);
    if counts.contains(&0) {
        return Err(Error::DegenerateBatch(format!(
            "class centers need both classes, got {} live and {} fake",
            counts[0], counts[1]
        )));
    }
    let weights = Tensor::from_fn(&[Label::COUNT, n], |k| {
        let (c, i) = (k / n, k % n);
        if labels[i].index() == c {
            T::one() / T::of(counts[c] as f64)
        } else {
            T::zero()
        }
    });
    let w = g.constant(weights);
    Ok(ClassCenters {
        centers: g.matmul(w, x)?,
        counts,
    })
}

fn off_diagonal<T: Scalar>(k: usize) -> Tensor<T> {
    Tensor::from_fn(&[k, k], |i| if i / k == i % k { T::zero() } else { T::one() })
}

pub fn center_relation<T: Scalar>(g: &mut Graph<T>, c: &ClassCenters, t: f64) -> Result<RelationMatrix> {
    let p = g.shape(c.centers)[1];
    let ct = g.transpose(c.centers)?;
    let rc = g.matmul(c.centers, ct)?;
    let rc = g.scale(rc, T::one() / T::of(p as f64).sqrt());
    let mask = g.constant(off_diagonal(Label::COUNT));
    let ror = g.mul(rc, mask)?;
    let q = g.hinge(ror, T::of(t));
    Ok(RelationMatrix { rc, ror, q, t })
}

/// `mean_i (LSE_{j != i} Q_ij)^2` over the class rows of `Q`.
pub fn dm_loss<T: Scalar>(g: &mut Graph<T>, rel: &RelationMatrix) -> Result<Var> {
    let k = g.shape(rel.q)[0];
    let mask: Vec<bool> = (0..k * k).map(|i| i / k != i % k).collect();
    let lse = g.logsumexp_masked(rel.q, 1, &mask)?;
    let sq = g.square(lse);
    Ok(g.mean_all(sq))
}

/// The center of each sample's own class, `[n, p]`.
fn own_centers<T: Scalar>(g: &mut Graph<T>, c: &ClassCenters, labels: &[Label]) -> Result<Var> {
    let sel = g.constant(one_hot(labels));
    g.matmul(sel, c.centers)
}

pub fn attraction_loss<T: Scalar>(g: &mut Graph<T>, x: Var, c: &ClassCenters, labels: &[Label]) -> Result<Var> {
    check_rows(g, "attraction_loss", x, labels)?;
    let own = own_centers(g, c, labels)?;
    let diff = g.sub(x, own)?;
    let r = g.abs(diff);
    let lse = g.logsumexp(r, 1)?;
    let sq = g.square(lse);
    Ok(g.mean_all(sq))
}

/// Class-similarity probabilities `softmax(X C^T)`, `[n, 2]`.
pub fn center_affinity<T: Scalar>(g: &mut Graph<T>, x: Var, c: &ClassCenters) -> Result<Var> {
    let ct = g.transpose(c.centers)?;
    let logits = g.matmul(x, ct)?;
    g.softmax(logits, 1)
}

pub fn repulsion_loss<T: Scalar>(g: &mut Graph<T>, x: Var, c: &ClassCenters, labels: &[Label]) -> Result<Var> {
    check_rows(g, "repulsion_loss", x, labels)?;
    let r = center_affinity(g, x, c)?;
    let wrong: Vec<bool> = (0..labels.len() * Label::COUNT)
        .map(|k| labels[k / Label::COUNT].index() != k % Label::COUNT)
        .collect();
    let lse = g.logsumexp_masked(r, 1, &wrong)?;
    let sq = g.square(lse);
    Ok(g.mean_all(sq))
}

/// `(L_att, L_rep, L_att + L_rep)`.
pub fn cdm_loss<T: Scalar>(g: &mut Graph<T>, x: Var, c: &ClassCenters, labels: &[Label]) -> Result<(Var, Var, Var)> {
    let att = attraction_loss(g, x, c, labels)?;
    let rep = repulsion_loss(g, x, c, labels)?;
    let sum = g.add(att, rep)?;
    Ok((att, rep, sum))
}

pub fn total_loss<T: Scalar>(g: &mut Graph<T>, l_ce: Var, l_dm: Var, l_cdm: Var) -> Result<Var> {
    let s = g.add(l_ce, l_dm)?;
    g.add(s, l_cdm)
}

/// Which regularizers join the cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizerConfig {
    pub dm: bool,
    pub cdm: bool,
    pub t: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            dm: true,
            cdm: true,
            t: RELATION_THRESHOLD,
        }
    }
}

/// Assembles `L_ce + L_dm + L_cdm` from a precomputed cross-entropy and the
/// pooled features. Disabled terms are constant zeros.
pub fn objective<T: Scalar>(
    g: &mut Graph<T>,
    ce: Var,
    features: Var,
    labels: &[Label],
    cfg: &RegularizerConfig,
) -> Result<LossTerms> {
    let zero = || Tensor::scalar(T::zero());
    let centers = if cfg.dm || cfg.cdm {
        Some(class_centers(g, features, labels)?)
    } else {
        None
    };
    let dm = match (&centers, cfg.dm) {
        (Some(c), true) => {
            let rel = center_relation(g, c, cfg.t)?;
            dm_loss(g, &rel)?
        }
        _ => g.constant(zero()),
    };
    let (att, rep, cdm) = match (&centers, cfg.cdm) {
        (Some(c), true) => cdm_loss(g, features, c, labels)?,
        _ => {
            let z = g.constant(zero());
            (z, z, z)
        }
    };
    let total = total_loss(g, ce, dm, cdm)?;
    Ok(LossTerms {
        ce,
        dm,
        att,
        rep,
        cdm,
        total,
    })
}

// ---- baselines -------------------------------------------------------------

/// Squared Euclidean distances between rows, `[n, n]`.
pub fn pairwise_sq_dists<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (n, p) = (g.shape(x)[0], g.shape(x)[1]);
    let a = g.reshape(x, &[n, 1, p])?;
    let b = g.reshape(x, &[1, n, p])?;
    let diff = g.sub(a, b)?;
    let sq = g.square(diff);
    g.sum(sq, 2)
}

fn zero_with_warning<T: Scalar>(g: &mut Graph<T>, what: &str) -> Var {
    log::warn!("{what}: batch has no valid term, returning 0");
    g.constant(Tensor::scalar(T::zero()))
}

/// Sum of `values * weights` divided by `count`.
fn masked_mean<T: Scalar>(g: &mut Graph<T>, values: Var, weights: Tensor<T>, count: usize) -> Result<Var> {
    let w = g.constant(weights);
    let m = g.mul(values, w)?;
    let s = g.sum_all(m);
    Ok(g.scale(s, T::one() / T::of(count as f64)))
}

pub fn triplet<T: Scalar>(g: &mut Graph<T>, x: Var, labels: &[Label], margin: f64) -> Result<Var> {
    let (n, _) = check_rows(g, "triplet", x, labels)?;
    let mut mask = vec![T::zero(); n * n * n];
    let mut count = 0;
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] != labels[a] {
                    mask[(a * n + p) * n + q] = T::one();
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Ok(zero_with_warning(g, "triplet"));
    }
    let d = pairwise_sq_dists(g, x)?;
    let dap = g.reshape(d, &[n, n, 1])?;
    let dan = g.reshape(d, &[n, 1, n])?;
    let diff = g.sub(dap, dan)?;
    let h = g.hinge(diff, T::of(-margin));
    masked_mean(g, h, Tensor::new(vec![n, n, n], mask)?, count)
}

pub fn hard_triplet<T: Scalar>(g: &mut Graph<T>, x: Var, labels: &[Label], margin: f64) -> Result<Var> {
    let (n, _) = check_rows(g, "hard_triplet", x, labels)?;
    let counts = class_counts(labels);
    let valid: Vec<bool> = labels.iter().map(|l| counts[l.flipped().index()] > 0).collect();
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Ok(zero_with_warning(g, "hard_triplet"));
    }
    let d = pairwise_sq_dists(g, x)?;
    let same: Vec<bool> = (0..n * n).map(|k| labels[k / n] == labels[k % n]).collect();
    // Lanes without a negative are masked out below; keep them non-empty.
    let other: Vec<bool> = (0..n * n).map(|k| labels[k / n] != labels[k % n] || !valid[k / n]).collect();
    let pos = max_masked(g, d, &same)?;
    let neg_d = g.neg(d);
    let neg = max_masked(g, neg_d, &other)?;
    // pos - min(d) + margin = pos + max(-d) + margin
    let gap = g.add(pos, neg)?;
    let h = g.hinge(gap, T::of(-margin));
    let w = Tensor::from_fn(&[n], |i| if valid[i] { T::one() } else { T::zero() });
    masked_mean(g, h, w, count)
}

/// Row-wise maximum over the entries of `x [n, n]` where `mask` is set.
fn max_masked<T: Scalar>(g: &mut Graph<T>, x: Var, mask: &[bool]) -> Result<Var> {
    let big = T::of(1e30);
    let penalty = Tensor::from_fn(g.shape(x), |i| if mask[i] { T::zero() } else { -big });
    let pen = g.constant(penalty);
    let shifted = g.add(x, pen)?;
    g.max(shifted, 1)
}

pub fn npair<T: Scalar>(g: &mut Graph<T>, x: Var, labels: &[Label]) -> Result<Var> {
    let (n, _) = check_rows(g, "npair", x, labels)?;
    let positive: Vec<Option<usize>> = (0..n)
        .map(|a| (1..n).map(|k| (a + k) % n).find(|&j| labels[j] == labels[a]))
        .collect();
    let valid: Vec<bool> = (0..n)
        .map(|a| positive[a].is_some() && labels.iter().any(|l| *l != labels[a]))
        .collect();
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Ok(zero_with_warning(g, "npair"));
    }
    let xt = g.transpose(x)?;
    let gram = g.matmul(x, xt)?;
    let sel = Tensor::from_fn(&[n, n], |k| if positive[k / n] == Some(k % n) { T::one() } else { T::zero() });
    let sel = g.constant(sel);
    let picked = g.mul(gram, sel)?;
    let fp = g.sum(picked, 1)?;
    let fp = g.reshape(fp, &[n, 1])?;
    let rel = g.sub(gram, fp)?;
    let zeros = g.constant(Tensor::zeros(&[n, 1]));
    let z = g.concat(&[zeros, rel], 1)?;
    let mask: Vec<bool> = (0..n * (n + 1))
        .map(|k| {
            let (a, j) = (k / (n + 1), k % (n + 1));
            j == 0 || labels[j - 1] != labels[a]
        })
        .collect();
    let lse = g.logsumexp_masked(z, 1, &mask)?;
    let w = Tensor::from_fn(&[n], |i| if valid[i] { T::one() } else { T::zero() });
    masked_mean(g, lse, w, count)
}

pub fn supcon<T: Scalar>(g: &mut Graph<T>, x: Var, labels: &[Label], temperature: f64) -> Result<Var> {
    let (n, _) = check_rows(g, "supcon", x, labels)?;
    let counts = class_counts(labels);
    let positives: Vec<usize> = labels.iter().map(|l| counts[l.index()] - 1).collect();
    let count = positives.iter().filter(|&&c| c > 0).count();
    if count == 0 || n < 2 {
        return Ok(zero_with_warning(g, "supcon"));
    }
    let z = g.l2_normalize(x)?;
    let zt = g.transpose(z)?;
    let sim = g.matmul(z, zt)?;
    let sim = g.scale(sim, T::one() / T::of(temperature));
    let others: Vec<bool> = (0..n * n).map(|k| k / n != k % n).collect();
    let lse = g.logsumexp_masked(sim, 1, &others)?;
    let lse = g.reshape(lse, &[n, 1])?;
    let log_prob = g.sub(sim, lse)?;
    let w = Tensor::from_fn(&[n, n], |k| {
        let (a, j) = (k / n, k % n);
        if a != j && labels[a] == labels[j] {
            T::one() / T::of(positives[a] as f64)
        } else {
            T::zero()
        }
    });
    let m = masked_mean(g, log_prob, w, count)?;
    Ok(g.neg(m))
}

/// Selectable metric-learning loss added to the cross-entropy in place of DM/CDM.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BaselineLoss {
    Triplet { margin: f64 },
    HardTriplet { margin: f64 },
    NPair,
    SupCon { temperature: f64 },
}

impl BaselineLoss {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineLoss::Triplet { .. } => "triplet",
            BaselineLoss::HardTriplet { .. } => "hard_triplet",
            BaselineLoss::NPair => "npair",
            BaselineLoss::SupCon { .. } => "supcon",
        }
    }

    /// Parses a loss name with its default hyperparameter.
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "triplet" => BaselineLoss::Triplet { margin: DEFAULT_MARGIN },
            "hard_triplet" => BaselineLoss::HardTriplet { margin: DEFAULT_MARGIN },
            "npair" => BaselineLoss::NPair,
            "supcon" => BaselineLoss::SupCon {
                temperature: DEFAULT_TEMPERATURE,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown baseline loss {other:?} (triplet|hard_triplet|npair|supcon)"
                )))
            }
        })
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var, labels: &[Label]) -> Result<Var> {
        match *self {
            BaselineLoss::Triplet { margin } => triplet(g, x, labels, margin),
            BaselineLoss::HardTriplet { margin } => hard_triplet(g, x, labels, margin),
            BaselineLoss::NPair => npair(g, x, labels),
            BaselineLoss::SupCon { temperature } => supcon(g, x, labels, temperature),
        }
    }
}

#[cfg(test)]
mod tests;
