use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{gradcheck, gradcheck_many, GradcheckConfig};

const L: Label = Label::Live;
const F: Label = Label::Fake;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rows(x: &Tensor<f64>) -> Vec<Vec<f64>> {
    x.data().chunks(x.shape()[1]).map(<[f64]>::to_vec).collect()
}

fn rand_tensor(shape: &[usize], r: &mut impl Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-scale..scale))
}

/// Random labels with both classes present.
fn rand_labels(n: usize, r: &mut impl Rng) -> Vec<Label> {
    let mut labels: Vec<Label> = (0..n).map(|_| if r.random::<bool>() { L } else { F }).collect();
    labels[0] = L;
    labels[n - 1] = F;
    labels
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn brute_centers(x: &[Vec<f64>], labels: &[Label]) -> [Vec<f64>; 2] {
    let p = x[0].len();
    let mut c = [vec![0.0; p], vec![0.0; p]];
    let counts = class_counts(labels);
    for (row, l) in x.iter().zip(labels) {
        for k in 0..p {
            c[l.index()][k] += row[k] / counts[l.index()] as f64;
        }
    }
    c
}

/// Value of `f(X)` with centers computed from `X`.
fn with_centers(
    x: &Tensor<f64>,
    labels: &[Label],
    f: impl FnOnce(&mut Graph<f64>, Var, &ClassCenters) -> Result<Var>,
) -> f64 {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let c = class_centers(&mut g, xv, labels).unwrap();
    let out = f(&mut g, xv, &c).unwrap();
    g.value(out).item()
}

/// Value of `f(X)` with fixed, explicitly given centers.
fn with_fixed_centers(
    x: &Tensor<f64>,
    centers: &Tensor<f64>,
    f: impl FnOnce(&mut Graph<f64>, Var, &ClassCenters) -> Result<Var>,
) -> f64 {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let c = ClassCenters {
        centers: g.constant(centers.clone()),
        counts: [1, 1],
    };
    let out = f(&mut g, xv, &c).unwrap();
    g.value(out).item()
}

fn relation_of(centers: &Tensor<f64>, th: f64) -> (Graph<f64>, RelationMatrix, Var) {
    let mut g = Graph::new();
    let c = ClassCenters {
        centers: g.param(centers.clone()),
        counts: [1, 1],
    };
    let rel = center_relation(&mut g, &c, th).unwrap();
    (g, rel, c.centers)
}

// ---- centers and relations -------------------------------------------------

#[test]
fn class_center_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 2], &[1.0, 1.0, 3.0, 3.0]));
    let c = class_centers(&mut g, x, &[L, F]).unwrap();
    assert_eq!(g.value(c.centers).data(), &[1.0, 1.0, 3.0, 3.0]);
    let x = g.constant(t(&[4, 2], &[0.0, 0.0, 2.0, 2.0, 5.0, 5.0, 7.0, 7.0]));
    let c = class_centers(&mut g, x, &[L, L, F, F]).unwrap();
    assert_eq!(g.value(c.centers).data(), &[1.0, 1.0, 6.0, 6.0]);
    assert_eq!(c.counts, [2, 2]);
    assert!(matches!(class_centers(&mut g, x, &[L, L, L, L]), Err(Error::DegenerateBatch(_))));
}

#[test]
fn class_centers_match_brute_force_means() {
    let mut r = rng(1);
    for _ in 0..20 {
        let x = rand_tensor(&[9, 4], &mut r, 3.0);
        let labels = rand_labels(9, &mut r);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let c = class_centers(&mut g, xv, &labels).unwrap();
        let want = brute_centers(&rows(&x), &labels);
        for (got, w) in g.value(c.centers).data().iter().zip(want.concat()) {
            assert!((got - w).abs() < 1e-12);
        }
    }
}

#[test]
fn relation_examples() {
    let (g, rel, _) = relation_of(&t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]), 0.5);
    assert!(g.value(rel.q).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.value(rel.rc).at(&[0, 1]), 0.0);

    let (g, rel, _) = relation_of(&t(&[2, 1], &[0.7, 1.0]), 0.5);
    assert!((g.value(rel.ror).at(&[0, 1]) - 0.7).abs() < 1e-15);
    let q = g.value(rel.q);
    assert!((q.at(&[0, 1]) - 0.2).abs() < 1e-12 && (q.at(&[1, 0]) - 0.2).abs() < 1e-12);
    assert_eq!(q.at(&[0, 0]), 0.0);
    assert_eq!(g.value(rel.ror).at(&[1, 1]), 0.0);
}

#[test]
fn relation_matches_direct_evaluation() {
    let mut r = rng(2);
    for _ in 0..20 {
        let c = rand_tensor(&[2, 5], &mut r, 2.0);
        let (g, rel, _) = relation_of(&c, 0.5);
        let cr = rows(&c);
        for i in 0..2 {
            for j in 0..2 {
                let rc = dot(&cr[i], &cr[j]) / 5f64.sqrt();
                let ror = if i == j { 0.0 } else { rc };
                assert!((g.value(rel.rc).at(&[i, j]) - rc).abs() < 1e-12);
                assert!((g.value(rel.ror).at(&[i, j]) - ror).abs() < 1e-12);
                assert!((g.value(rel.q).at(&[i, j]) - (ror - 0.5).max(0.0)).abs() < 1e-12);
                assert!(g.value(rel.q).at(&[i, j]) >= 0.0);
            }
        }
    }
}

// ---- DM ----------------------------------------------------------------------

fn dm_of(centers: &Tensor<f64>) -> f64 {
    let (mut g, rel, _) = relation_of(centers, 0.5);
    let l = dm_loss(&mut g, &rel).unwrap();
    g.value(l).item()
}

#[test]
fn dm_examples() {
    assert_eq!(dm_of(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])), 0.0);
    assert!((dm_of(&t(&[2, 1], &[0.7, 1.0])) - 0.04).abs() < 1e-12);
}

#[test]
fn dm_gradcheck() {
    for seed in 0..10 {
        let c = rand_tensor(&[2, 3], &mut rng(10 + seed), 2.0);
        let rep = gradcheck(
            |g, v| {
                let rel = center_relation(g, &ClassCenters { centers: v, counts: [1, 1] }, 0.5)?;
                dm_loss(g, &rel)
            },
            &c,
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert!(rep.passed, "{}", rep.summary());
    }
}

/// One descent step on the centers never raises a Q entry and strictly
/// lowers every positive one.
fn dm_step_check(c: &Tensor<f64>) -> std::result::Result<(), String> {
    let (mut g, rel, cv) = relation_of(c, 0.5);
    let l = dm_loss(&mut g, &rel).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(cv).unwrap().clone();
    let q0 = g.value(rel.q).clone();
    let ror0 = g.value(rel.ror).clone();
    let stepped = Tensor::from_fn(c.shape(), |i| c.data()[i] - 1e-3 * grad.data()[i]);
    let (g1, rel1, _) = relation_of(&stepped, 0.5);
    for k in 0..4 {
        let (qa, qb) = (q0.data()[k], g1.value(rel1.q).data()[k]);
        if qb > qa {
            return Err(format!("Q[{k}] rose from {qa} to {qb}"));
        }
        if qa > 0.0 && g1.value(rel1.ror).data()[k] >= ror0.data()[k] {
            return Err(format!("R_or[{k}] did not fall"));
        }
    }
    Ok(())
}

#[test]
fn dm_descent_does_not_raise_relations() {
    let mut r = rng(3);
    for _ in 0..100 {
        // Positively aligned centers so that most cases have Q > 0.
        let base: Vec<f64> = (0..4).map(|_| r.random_range(-2.0..2.0)).collect();
        let c = Tensor::from_fn(&[2, 4], |i| base[i % 4] + r.random_range(-0.5..0.5));
        dm_step_check(&c).unwrap();
    }
}

// ---- CDM ---------------------------------------------------------------------

#[test]
fn attraction_examples() {
    let x = t(&[2, 1], &[1.5, -2.0]);
    let c = t(&[2, 1], &[1.5, -2.0]);
    assert_eq!(with_fixed_centers(&x, &c, |g, x, c| attraction_loss(g, x, c, &[L, F])), 0.0);
    let x = t(&[1, 1], &[2.5]);
    let c = t(&[2, 1], &[2.0, 9.0]);
    assert!((with_fixed_centers(&x, &c, |g, x, c| attraction_loss(g, x, c, &[L])) - 0.25).abs() < 1e-15);
}

fn attraction_reference(x: &[Vec<f64>], c: &[Vec<f64>], labels: &[Label]) -> f64 {
    x.iter()
        .zip(labels)
        .map(|(row, l)| {
            let r: Vec<f64> = row.iter().zip(&c[l.index()]).map(|(a, b)| (a - b).abs()).collect();
            lse(&r).powi(2)
        })
        .sum::<f64>()
        / x.len() as f64
}

fn repulsion_reference(x: &[Vec<f64>], c: &[Vec<f64>], labels: &[Label]) -> f64 {
    x.iter()
        .zip(labels)
        .map(|(row, l)| {
            let logits = [dot(row, &c[0]), dot(row, &c[1])];
            let z = lse(&logits);
            let wrong = (logits[l.flipped().index()] - z).exp();
            wrong * wrong
        })
        .sum::<f64>()
        / x.len() as f64
}

#[test]
fn cdm_terms_match_direct_evaluation() {
    let mut r = rng(4);
    for _ in 0..20 {
        let x = rand_tensor(&[8, 3], &mut r, 2.0);
        let labels = rand_labels(8, &mut r);
        let c = brute_centers(&rows(&x), &labels);
        let att = with_centers(&x, &labels, |g, x, c| attraction_loss(g, x, c, &labels));
        let rep = with_centers(&x, &labels, |g, x, c| repulsion_loss(g, x, c, &labels));
        assert!((att - attraction_reference(&rows(&x), &c, &labels)).abs() < 1e-12);
        assert!((rep - repulsion_reference(&rows(&x), &c, &labels)).abs() < 1e-12);
    }
}

#[test]
fn repulsion_examples() {
    // x . c = [50, -50] for a live sample.
    let x = t(&[1, 1], &[5.0]);
    let c = t(&[2, 1], &[10.0, -10.0]);
    assert!(with_fixed_centers(&x, &c, |g, x, c| repulsion_loss(g, x, c, &[L])) < 1e-40);
    let c = t(&[2, 1], &[3.0, 3.0]);
    assert!((with_fixed_centers(&x, &c, |g, x, c| repulsion_loss(g, x, c, &[F])) - 0.25).abs() < 1e-15);
}

#[test]
fn cdm_is_the_sum_of_its_parts() {
    let mut r = rng(5);
    for _ in 0..50 {
        let x = rand_tensor(&[6, 4], &mut r, 2.0);
        let labels = rand_labels(6, &mut r);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let c = class_centers(&mut g, xv, &labels).unwrap();
        let (att, rep, sum) = cdm_loss(&mut g, xv, &c, &labels).unwrap();
        let a = attraction_loss(&mut g, xv, &c, &labels).unwrap();
        let b = repulsion_loss(&mut g, xv, &c, &labels).unwrap();
        let (va, vb) = (g.value(a).item(), g.value(b).item());
        assert_eq!((g.value(att).item(), g.value(rep).item()), (va, vb));
        assert!((g.value(sum).item() - (va + vb)).abs() < 1e-12);
    }
}

#[test]
fn cdm_gradcheck_through_centers() {
    for seed in 0..10 {
        let mut r = rng(20 + seed);
        let x = rand_tensor(&[6, 3], &mut r, 2.0);
        let labels = rand_labels(6, &mut r);
        let rep = gradcheck(
            |g, v| {
                let c = class_centers(g, v, &labels)?;
                let rel = center_relation(g, &c, 0.5)?;
                let dm = dm_loss(g, &rel)?;
                let (_, _, cdm) = cdm_loss(g, v, &c, &labels)?;
                g.add(dm, cdm)
            },
            &x,
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert!(rep.passed, "{}", rep.summary());
    }
}

#[test]
fn zero_at_optimum() {
    // One feature, samples on their centers, logits [100, -100] / [-100, 100].
    let x = t(&[4, 1], &[10.0, 10.0, -10.0, -10.0]);
    let labels = [L, L, F, F];
    let att = with_centers(&x, &labels, |g, x, c| attraction_loss(g, x, c, &labels));
    let rep = with_centers(&x, &labels, |g, x, c| repulsion_loss(g, x, c, &labels));
    assert!(att < 1e-6 && rep < 1e-6, "{att} {rep}");
}

#[test]
fn attraction_floor_with_wide_features() {
    // With p features the LSE of an all-zero deviation is ln p, not 0.
    let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0]);
    let att = with_centers(&x, &[L, F], |g, x, c| attraction_loss(g, x, c, &[L, F]));
    assert!((att - 4f64.ln().powi(2)).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn attraction_grows_radially(seed in 0u64..1_000_000, alpha in prop::sample::select(vec![1.5, 2.0])) {
        let mut r = rng(seed);
        let x = rand_tensor(&[6, 3], &mut r, 2.0);
        let labels = rand_labels(6, &mut r);
        let c = brute_centers(&rows(&x), &labels);
        let ct = Tensor::from_fn(&[2, 3], |i| c[i / 3][i % 3]);
        let scaled = Tensor::from_fn(&[6, 3], |i| {
            let own = c[labels[i / 3].index()][i % 3];
            own + alpha * (x.data()[i] - own)
        });
        let before = with_fixed_centers(&x, &ct, |g, x, c| attraction_loss(g, x, c, &labels));
        let after = with_fixed_centers(&scaled, &ct, |g, x, c| attraction_loss(g, x, c, &labels));
        prop_assert!(after > before);
    }

    #[test]
    fn repulsion_grows_with_the_wrong_logit(seed in 0u64..1_000_000, bump in 0.01f64..2.0) {
        let mut r = rng(seed);
        let x = rand_tensor(&[5, 2], &mut r, 2.0);
        let labels = rand_labels(5, &mut r);
        let k = r.random_range(0..5);
        // Centers e0, e1: logits are the two coordinates of x.
        let c = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let mut bumped = x.clone();
        bumped.data_mut()[k * 2 + labels[k].flipped().index()] += bump;
        let before = with_fixed_centers(&x, &c, |g, x, c| repulsion_loss(g, x, c, &labels));
        let after = with_fixed_centers(&bumped, &c, |g, x, c| repulsion_loss(g, x, c, &labels));
        prop_assert!(after > before);
    }

    #[test]
    fn dm_step_property(seed in 0u64..1_000_000) {
        let mut r = rng(seed);
        let c = rand_tensor(&[2, 3], &mut r, 3.0);
        prop_assert!(dm_step_check(&c).is_ok());
    }
}

// ---- total -------------------------------------------------------------------

#[test]
fn total_loss_examples() {
    let b = LossBundle::new(1.0, 0.0, 0.0, 0.0);
    assert_eq!(b.l_total, 1.0);
    let b = LossBundle::new(0.5, 0.04, 0.25, 0.04);
    assert!((b.l_cdm - 0.29).abs() < 1e-15 && (b.l_total - 0.83).abs() < 1e-15);

    let mut g = Graph::<f64>::new();
    let v: Vec<Var> = [0.5, 0.04, 0.29].iter().map(|&x| g.constant(Tensor::scalar(x))).collect();
    let tot = total_loss(&mut g, v[0], v[1], v[2]).unwrap();
    assert!((g.value(tot).item() - 0.83).abs() < 1e-15);
}

#[test]
fn objective_gradient_reaches_every_term() {
    let mut r = rng(6);
    // Strongly aligned classes so that Q > 0 and L_dm has a gradient.
    let x = Tensor::from_fn(&[6, 3], |_| 2.0 + r.random_range(-0.3..0.3));
    let labels = [L, F, L, F, L, F];
    let s = rand_tensor(&[6, 2], &mut r, 1.0);
    let terms: [(&str, fn(&LossTerms) -> Var); 4] = [
        ("ce", |t: &LossTerms| t.ce),
        ("dm", |t: &LossTerms| t.dm),
        ("att", |t: &LossTerms| t.att),
        ("rep", |t: &LossTerms| t.rep),
    ];
    for (name, pick) in terms {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let sv = g.param(s.clone());
        let ce = crate::encoder::class_ce(&mut g, sv, &labels).unwrap();
        let all = objective(&mut g, ce, xv, &labels, &RegularizerConfig::default()).unwrap();
        let b = all.bundle(&g);
        assert!((b.l_total - (b.l_ce + b.l_dm + b.l_cdm)).abs() < 1e-12);
        assert!((b.l_cdm - (b.l_att + b.l_rep)).abs() < 1e-12);
        g.backward(pick(&all)).unwrap();
        let gx = g.grad(xv).map(|t| t.data().iter().map(|v| v.abs()).sum::<f64>()).unwrap_or(0.0);
        let gs = g.grad(sv).map(|t| t.data().iter().map(|v| v.abs()).sum::<f64>()).unwrap_or(0.0);
        assert!(gx + gs > 0.0, "{name} has no gradient");
    }
}

#[test]
fn disabled_regularizers_are_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand_tensor(&[4, 3], &mut rng(7), 1.0));
    let ce = g.constant(Tensor::scalar(0.7));
    let cfg = RegularizerConfig {
        dm: false,
        cdm: false,
        ..Default::default()
    };
    // A single-class batch is fine when no center is needed.
    let terms = objective(&mut g, ce, x, &[L, L, L, L], &cfg).unwrap();
    assert_eq!(terms.bundle(&g), LossBundle::new(0.7, 0.0, 0.0, 0.0));
}

// ---- baselines ---------------------------------------------------------------

fn baseline(x: &Tensor<f64>, labels: &[Label], loss: BaselineLoss) -> f64 {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = loss.apply(&mut g, xv, labels).unwrap();
    g.value(out).item()
}

fn triplet_reference(x: &[Vec<f64>], labels: &[Label], margin: f64) -> f64 {
    let n = x.len();
    let (mut total, mut count) = (0.0, 0);
    for a in 0..n {
        for p in 0..n {
            for q in 0..n {
                if p != a && labels[p] == labels[a] && labels[q] != labels[a] {
                    total += (sq_dist(&x[a], &x[p]) - sq_dist(&x[a], &x[q]) + margin).max(0.0);
                    count += 1;
                }
            }
        }
    }
    total / count as f64
}

fn hard_triplet_reference(x: &[Vec<f64>], labels: &[Label], margin: f64) -> f64 {
    let n = x.len();
    let terms: Vec<f64> = (0..n)
        .map(|a| {
            let pos = (0..n).filter(|&j| labels[j] == labels[a]).map(|j| sq_dist(&x[a], &x[j])).fold(0.0, f64::max);
            let neg = (0..n)
                .filter(|&j| labels[j] != labels[a])
                .map(|j| sq_dist(&x[a], &x[j]))
                .fold(f64::INFINITY, f64::min);
            (pos - neg + margin).max(0.0)
        })
        .collect();
    terms.iter().sum::<f64>() / n as f64
}

fn npair_reference(x: &[Vec<f64>], labels: &[Label]) -> f64 {
    let n = x.len();
    let (mut total, mut count) = (0.0, 0);
    for a in 0..n {
        let Some(p) = (1..n).map(|k| (a + k) % n).find(|&j| labels[j] == labels[a]) else {
            continue;
        };
        let s: f64 = (0..n)
            .filter(|&j| labels[j] != labels[a])
            .map(|j| (dot(&x[a], &x[j]) - dot(&x[a], &x[p])).exp())
            .sum();
        total += (1.0 + s).ln();
        count += 1;
    }
    total / count as f64
}

fn supcon_reference(x: &[Vec<f64>], labels: &[Label], tau: f64) -> f64 {
    let n = x.len();
    let z: Vec<Vec<f64>> = x
        .iter()
        .map(|r| {
            let norm = dot(r, r).sqrt();
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let (mut total, mut count) = (0.0, 0);
    for a in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != a && labels[j] == labels[a]).collect();
        if pos.is_empty() {
            continue;
        }
        let denom = lse(&(0..n).filter(|&j| j != a).map(|j| dot(&z[a], &z[j]) / tau).collect::<Vec<_>>());
        let s: f64 = pos.iter().map(|&p| dot(&z[a], &z[p]) / tau - denom).sum();
        total += -s / pos.len() as f64;
        count += 1;
    }
    total / count as f64
}

#[test]
fn baseline_examples() {
    // Two tight clusters far apart: every triplet satisfies the margin.
    let x = t(&[4, 2], &[0.0, 0.0, 0.1, 0.0, 5.0, 5.0, 5.1, 5.0]);
    let labels = [L, L, F, F];
    assert_eq!(baseline(&x, &labels, BaselineLoss::Triplet { margin: 0.3 }), 0.0);
    assert_eq!(baseline(&x, &labels, BaselineLoss::HardTriplet { margin: 0.3 }), 0.0);

    let x = t(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    let h = baseline(&x, &[L, F], BaselineLoss::HardTriplet { margin: 0.3 });
    assert!((h - 0.3).abs() < 1e-15);
}

#[test]
fn baselines_without_valid_terms_return_zero() {
    let x = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    for loss in ["triplet", "hard_triplet", "npair", "supcon"] {
        let loss = BaselineLoss::parse(loss).unwrap();
        assert_eq!(baseline(&x, &[L, L], loss), 0.0, "{}", loss.name());
    }
    // Singleton classes: no positive for triplet, npair and supcon.
    assert_eq!(baseline(&x, &[L, F], BaselineLoss::NPair), 0.0);
    assert_eq!(baseline(&x, &[L, F], BaselineLoss::Triplet { margin: 0.3 }), 0.0);
    assert!(BaselineLoss::parse("arcface").is_err());
}

#[test]
fn baselines_match_brute_force() {
    let mut r = rng(8);
    for _ in 0..20 {
        let x = rand_tensor(&[8, 3], &mut r, 1.5);
        let labels = rand_labels(8, &mut r);
        let xr = rows(&x);
        let cases = [
            (BaselineLoss::Triplet { margin: 0.3 }, triplet_reference(&xr, &labels, 0.3)),
            (BaselineLoss::HardTriplet { margin: 0.3 }, hard_triplet_reference(&xr, &labels, 0.3)),
            (BaselineLoss::NPair, npair_reference(&xr, &labels)),
            (BaselineLoss::SupCon { temperature: 0.1 }, supcon_reference(&xr, &labels, 0.1)),
        ];
        for (loss, want) in cases {
            let got = baseline(&x, &labels, loss);
            assert!((got - want).abs() < 1e-12, "{}: {got} vs {want}", loss.name());
        }
    }
}

#[test]
fn baselines_gradcheck() {
    for seed in 0..5 {
        let mut r = rng(30 + seed);
        let x = rand_tensor(&[6, 3], &mut r, 1.5);
        let labels = [L, F, L, F, L, F];
        for name in ["triplet", "hard_triplet", "npair", "supcon"] {
            let loss = BaselineLoss::parse(name).unwrap();
            let rep = gradcheck_many(|g, v| loss.apply(g, v[0], &labels), std::slice::from_ref(&x), &GradcheckConfig::default()).unwrap();
            assert!(rep.passed, "{name}: {}", rep.summary());
        }
    }
}
