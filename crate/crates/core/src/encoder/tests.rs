use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{probe, GradcheckConfig};
use crate::params::gradcheck_params;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], r: &mut impl Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(-scale..scale))
}

fn unit_rows(n: usize, e: usize, r: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..e).map(|_| r.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn small_cfg() -> EncoderConfig {
    EncoderConfig {
        image_side: 8,
        patch_side: 4,
        channels: 1,
        d: 4,
        blocks: 1,
        attn_heads: 2,
        mlp_hidden: 6,
        sublayer: SublayerKind::Moae,
        moae: MoaeConfig {
            expert_hidden: 3,
            experts: 2,
            ..MoaeConfig::new(4, 5)
        },
        embed_dim: 3,
    }
}

fn randomize(store: &mut ParamStore<f64>, r: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = rand_tensor(&shape, r, 0.5);
    }
}

#[test]
fn embeddings_have_unit_norm_and_are_deterministic() {
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::new(EncoderConfig::default(), &mut store, &mut rng(1)).unwrap();
    let img = rand_tensor(&[2, 1, 16, 16], &mut rng(2), 1.0);
    let pair = Tensor::from_fn(&[2, 1, 16, 16], |i| img.data()[i % 256]);
    let (pooled, emb) = encode_image(&enc, &store, pair).unwrap();
    assert_eq!(pooled.shape(), &[2, 32]);
    assert_eq!(emb.shape(), &[2, 16]);
    for row in emb.data().chunks(16) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
    assert_eq!(emb.data()[..16], emb.data()[16..]);
    let (_, again) = encode_image(&enc, &store, img.clone()).unwrap();
    let (_, again2) = encode_image(&enc, &store, img).unwrap();
    assert_eq!(again, again2);
}

#[test]
fn indivisible_patch_size_is_rejected() {
    let cfg = EncoderConfig {
        image_side: 10,
        ..EncoderConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    assert!(matches!(Encoder::new(cfg, &mut store, &mut rng(0)), Err(Error::Config(_))));
}

#[test]
fn patchify_orders_patches_row_major() {
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::new(small_cfg(), &mut store, &mut rng(3)).unwrap();
    let img = Tensor::from_fn(&[1, 1, 8, 8], |i| i as f64);
    let mut g = Graph::new();
    let x = g.constant(img);
    let p = enc.patchify(&mut g, x).unwrap();
    let v = g.value(p);
    assert_eq!(v.shape(), &[1, 4, 16]);
    // Patch 1 is the top-right 4x4 block; its first row is pixels 4..8.
    assert_eq!(&v.data()[16..20], &[4.0, 5.0, 6.0, 7.0]);
    // Patch 2 starts at row 4, column 0.
    assert_eq!(v.at(&[0, 2, 0]), 32.0);
    assert_eq!(v.at(&[0, 3, 15]), 63.0);
}

#[test]
fn encoder_gradcheck() {
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::new(small_cfg(), &mut store, &mut rng(4)).unwrap();
    randomize(&mut store, &mut rng(5));
    let img = rand_tensor(&[2, 1, 8, 8], &mut rng(6), 1.0);
    let rep = gradcheck_params(
        &store,
        &[img],
        |g, xs, b| {
            let out = enc.encode(g, b, xs[0])?;
            let s = similarity_matrix(g, b, out.embedding, &enc.text)?;
            let both = g.concat(&[out.pooled, s], 1)?;
            probe(g, both, 7)
        },
        &GradcheckConfig::default(),
    )
    .unwrap();
    assert!(rep.passed, "{}", rep.summary());
    assert!(rep.checked > 100);
}

#[test]
fn variants_share_initialization_outside_the_sublayer() {
    let mut a = ParamStore::<f64>::new();
    Encoder::new(
        EncoderConfig {
            sublayer: SublayerKind::None,
            ..EncoderConfig::default()
        },
        &mut a,
        &mut rng(8),
    )
    .unwrap();
    let mut b = ParamStore::<f64>::new();
    Encoder::new(EncoderConfig::default(), &mut b, &mut rng(8)).unwrap();
    for (name, t) in a.iter() {
        assert_eq!(b.get(b.find(name).unwrap()), t, "{name}");
    }
}

// ---- similarity ------------------------------------------------------------

fn sim(img: &[Vec<f64>], txt: &[Vec<f64>], scale: f64) -> Tensor<f64> {
    let e = img[0].len();
    let mut g = Graph::new();
    let i = g.constant(Tensor::from_fn(&[img.len(), e], |k| img[k / e][k % e]));
    let t = g.constant(Tensor::from_fn(&[txt.len(), e], |k| txt[k / e][k % e]));
    let s = g.constant(Tensor::scalar(scale));
    let out = similarity(&mut g, i, t, s).unwrap();
    g.value(out).clone()
}

#[test]
fn similarity_examples() {
    let txt = unit_rows(2, 4, &mut rng(9));
    let cos: f64 = txt[0].iter().zip(&txt[1]).map(|(a, b)| a * b).sum();
    let s = sim(&txt[..1], &txt, 1.0);
    assert!((s.data()[0] - 1.0).abs() < 1e-15 && (s.data()[1] - cos).abs() < 1e-15);

    let ortho = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
    let s = sim(&ortho[1..], &ortho, 14.3);
    assert_eq!(s.data(), &[0.0, 14.3]);
}

#[test]
fn similarity_matches_direct_dot_products() {
    let mut r = rng(10);
    let img = unit_rows(7, 5, &mut r);
    let txt = unit_rows(2, 5, &mut r);
    let s = sim(&img, &txt, 14.3);
    for i in 0..7 {
        for j in 0..2 {
            let want = 14.3 * img[i].iter().zip(&txt[j]).map(|(a, b)| a * b).sum::<f64>();
            assert!((s.at(&[i, j]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn text_embeddings_start_at_the_configured_scale() {
    let mut store = ParamStore::<f64>::new();
    let text = ClassTextEmbeddings::new(&mut store, "t", 4, &mut rng(11));
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let s = text.logit_scale(&mut g, &p);
    assert!((g.value(s).item() - 14.3).abs() < 1e-12);
    let v = text.normalized(&mut g, &p).unwrap();
    for row in g.value(v).data().chunks(4) {
        assert!((row.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

// ---- cross-entropies ---------------------------------------------------------

fn eval(f: impl FnOnce(&mut Graph<f64>, Var) -> Result<Var>, s: Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(s);
    let out = f(&mut g, v)?;
    Ok(g.value(out).item())
}

fn contrastive_reference(s: &[Vec<f64>]) -> f64 {
    let n = s.len();
    let lse = |v: &[f64]| {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let mut total = 0.0;
    for i in 0..n {
        let col: Vec<f64> = (0..n).map(|k| s[k][i]).collect();
        total += (s[i][i] - lse(&s[i])) + (s[i][i] - lse(&col));
    }
    -total / (2.0 * n as f64)
}

#[test]
fn contrastive_ce_examples() {
    let single = eval(contrastive_ce, Tensor::from_f64(&[1, 1], &[3.7]).unwrap()).unwrap();
    assert_eq!(single, 0.0);
    let sat = eval(contrastive_ce, Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 50.0 } else { 0.0 })).unwrap();
    assert!(sat < 1e-20);
    assert!(matches!(
        eval(contrastive_ce, Tensor::zeros(&[2, 3])),
        Err(Error::Usage(_))
    ));
}

#[test]
fn contrastive_ce_matches_hand_evaluation() {
    let mut r = rng(12);
    for _ in 0..20 {
        let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| r.random_range(-5.0..5.0)).collect()).collect();
        let got = eval(contrastive_ce, Tensor::from_fn(&[3, 3], |i| rows[i / 3][i % 3])).unwrap();
        assert!((got - contrastive_reference(&rows)).abs() < 1e-12);
    }
}

#[test]
fn contrastive_ce_is_nonnegative_and_decreases_with_the_diagonal() {
    let base = rand_tensor(&[5, 5], &mut rng(13), 2.0);
    let mut prev = f64::INFINITY;
    for step in 0..30 {
        let boost = step as f64 * 0.5;
        let s = Tensor::from_fn(&[5, 5], |i| base.data()[i] + if i % 6 == 0 { boost } else { 0.0 });
        let l = eval(contrastive_ce, s).unwrap();
        assert!(l >= 0.0 && l < prev, "step {step}: {l} vs {prev}");
        prev = l;
    }
}

#[test]
fn class_ce_examples() {
    let l = eval(|g, s| class_ce(g, s, &[Label::Live]), Tensor::from_f64(&[1, 2], &[10.0, -10.0]).unwrap()).unwrap();
    assert!(l < 1e-8);
    let l = eval(|g, s| class_ce(g, s, &[Label::Live, Label::Fake, Label::Fake]), Tensor::zeros(&[3, 2])).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-15);
    assert!(Label::from_index(2).is_err());
}

#[test]
fn class_ce_matches_direct_evaluation_and_is_shift_invariant() {
    let mut r = rng(14);
    let labels: Vec<Label> = (0..9).map(|i| if i % 3 == 0 { Label::Live } else { Label::Fake }).collect();
    for _ in 0..20 {
        let s = rand_tensor(&[9, 2], &mut r, 6.0);
        let want: f64 = (0..9)
            .map(|i| {
                let (a, b) = (s.at(&[i, 0]), s.at(&[i, 1]));
                let m = a.max(b);
                let lse = m + ((a - m).exp() + (b - m).exp()).ln();
                lse - s.at(&[i, labels[i].index()])
            })
            .sum::<f64>()
            / 9.0;
        let got = eval(|g, v| class_ce(g, v, &labels), s.clone()).unwrap();
        assert!((got - want).abs() < 1e-12);
        let shifted = Tensor::from_fn(&[9, 2], |i| s.data()[i] + 3.0 * (i / 2) as f64 - 7.0);
        let again = eval(|g, v| class_ce(g, v, &labels), shifted).unwrap();
        assert!((got - again).abs() < 1e-9);
    }
}

#[test]
fn cross_entropies_gradcheck() {
    let labels = [Label::Live, Label::Fake, Label::Fake, Label::Live];
    for seed in 0..5 {
        let s = rand_tensor(&[4, 2], &mut rng(20 + seed), 3.0);
        let rep = crate::diffcore::gradcheck(|g, x| class_ce(g, x, &labels), &s, &GradcheckConfig::default()).unwrap();
        assert!(rep.passed, "{}", rep.summary());
        let s = rand_tensor(&[4, 4], &mut rng(30 + seed), 3.0);
        let rep = crate::diffcore::gradcheck(contrastive_ce, &s, &GradcheckConfig::default()).unwrap();
        assert!(rep.passed, "{}", rep.summary());
    }
}

#[test]
fn liveness_score_is_live_minus_fake() {
    let s = Tensor::<f64>::from_f64(&[2, 2], &[3.0, 1.0, -1.0, 2.0]).unwrap();
    assert_eq!(liveness_scores(&s), vec![2.0, -3.0]);
}
