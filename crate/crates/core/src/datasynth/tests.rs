use std::collections::BTreeSet;

use super::*;
use crate::label::class_counts;
use crate::metrics::{auc, ScoredSet};

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_live: 60,
        n_per_type: 20,
        n_rare: 20,
        seed,
        ..SyntheticSpec::default()
    }
}

/// Logistic regression by full-batch gradient descent; returns the weights
/// with the bias last.
fn fit_linear_probe(x: &[&[f64]], y: &[Label], steps: usize) -> Vec<f64> {
    let d = x[0].len();
    let mut w = vec![0.0; d + 1];
    let n = x.len() as f64;
    for _ in 0..steps {
        let mut grad = vec![0.0; d + 1];
        for (row, label) in x.iter().zip(y) {
            let z: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d];
            let target = if *label == Label::Live { 1.0 } else { 0.0 };
            let err = 1.0 / (1.0 + (-z).exp()) - target;
            for j in 0..d {
                grad[j] += err * row[j] / n;
            }
            grad[d] += err / n;
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= 0.5 * gi;
        }
    }
    w
}

fn probe_scores(w: &[f64], x: &[&[f64]]) -> Vec<f64> {
    let d = w.len() - 1;
    x.iter().map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + w[d]).collect()
}

/// Held-out AUC of a linear probe trained on the intra-protocol train split.
fn linear_probe_auc(spec: &SyntheticSpec) -> (f64, f64) {
    let ds = generate(spec).unwrap();
    let split = intra_split(&ds, TEST_FRACTION, DEV_FRACTION, spec.seed);
    let rows = |ids: &[usize]| -> (Vec<&[f64]>, Vec<Label>) {
        (
            ids.iter().map(|&i| ds.samples[i].features.as_slice()).collect(),
            ids.iter().map(|&i| ds.samples[i].label).collect(),
        )
    };
    let (xt, yt) = rows(&split.train);
    let w = fit_linear_probe(&xt, &yt, 1500);
    let train_acc = probe_scores(&w, &xt)
        .iter()
        .zip(&yt)
        .filter(|(s, l)| (**s >= 0.0) == (**l == Label::Live))
        .count() as f64
        / yt.len() as f64;
    let (xs, ys) = rows(&split.test);
    let set = ScoredSet::new(probe_scores(&w, &xs), ys).unwrap();
    (auc(&set).unwrap(), train_acc)
}

#[test]
fn default_spec_is_hard_for_a_linear_probe() {
    for seed in 0..3 {
        let (a, _) = linear_probe_auc(&SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        });
        assert!((a - 0.85).abs() <= 0.05, "seed {seed}: linear probe AUC {a:.4}");
    }
}

#[test]
fn wide_gap_is_linearly_separable() {
    let spec = SyntheticSpec {
        gap: 10.0,
        rare_offset: -10.0,
        rare_spread: 1.0,
        ..small_spec(1)
    };
    let (_, acc) = linear_probe_auc(&spec);
    assert_eq!(acc, 1.0);
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(generate(&small_spec(7)).unwrap(), generate(&small_spec(7)).unwrap());
    assert_ne!(generate(&small_spec(7)).unwrap(), generate(&small_spec(8)).unwrap());
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        SyntheticSpec {
            attack_types: 1,
            ..SyntheticSpec::default()
        },
        SyntheticSpec {
            live_spread: 0.0,
            ..SyntheticSpec::default()
        },
        SyntheticSpec {
            dims: 2,
            ..SyntheticSpec::default()
        },
    ];
    for spec in bad {
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }
}

#[test]
fn type_means_concentrate() {
    let spec = SyntheticSpec::default();
    let ds = generate(&spec).unwrap();
    for t in spec.types() {
        let members: Vec<&Sample> = ds.samples.iter().filter(|s| s.attack_type == t).collect();
        let n = members.len() as f64;
        let bound = 3.0 * spec.spread(t) / n.sqrt();
        // Root-mean-square deviation over coordinates; its expectation is spread / sqrt(n).
        let sq: f64 = spec
            .mean(t)
            .iter()
            .enumerate()
            .map(|(j, want)| (members.iter().map(|s| s.features[j]).sum::<f64>() / n - want).powi(2))
            .sum();
        let rms = (sq / spec.dims as f64).sqrt();
        assert!(rms < bound, "type {}: rms deviation {rms} vs bound {bound}", t.0);
    }
}

#[test]
fn rare_type_is_farthest_from_the_attack_centroid() {
    let spec = SyntheticSpec::default();
    let attacks: Vec<AttackType> = spec.types().skip(1).collect();
    let centroid: Vec<f64> = (0..spec.dims)
        .map(|j| attacks.iter().map(|&t| spec.mean(t)[j]).sum::<f64>() / attacks.len() as f64)
        .collect();
    let dist = |t: AttackType| spec.mean(t).iter().zip(&centroid).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let rare = dist(spec.rare_type());
    for &t in &attacks[..attacks.len() - 1] {
        assert!(rare > dist(t));
    }
}

#[test]
fn labels_follow_attack_types() {
    for s in generate(&small_spec(2)).unwrap().samples {
        assert_eq!(s.label == Label::Fake, s.attack_type.0 >= 1);
    }
}

fn assert_partition(ds: &Dataset, split: &Split) {
    let all: BTreeSet<usize> = split.train.iter().chain(&split.dev).chain(&split.test).copied().collect();
    assert_eq!(all.len(), split.train.len() + split.dev.len() + split.test.len(), "parts overlap");
    assert_eq!(all, (0..ds.samples.len()).collect());
}

#[test]
fn intra_split_is_a_stratified_partition() {
    let ds = generate(&small_spec(3)).unwrap();
    let split = intra_split(&ds, 0.3, 0.1, 3);
    assert_partition(&ds, &split);
    assert_eq!(split.test.len(), 18 + 4 * 6);
    assert_eq!(split, intra_split(&ds, 0.3, 0.1, 3));
}

#[test]
fn leave_one_type_out_contract() {
    let spec = SyntheticSpec {
        attack_types: 3,
        ..small_spec(4)
    };
    let ds = generate(&spec).unwrap();
    let split = leave_one_type_out(&ds, AttackType(2), 0.3, 0.1, 4).unwrap();
    assert_partition(&ds, &split);
    let types = |ids: &[usize]| -> BTreeSet<usize> { ids.iter().map(|&i| ds.samples[i].attack_type.0).collect() };
    assert_eq!(types(&split.train), BTreeSet::from([0, 1, 3]));
    assert!(!types(&split.dev).contains(&2));
    assert_eq!(types(&split.test), BTreeSet::from([0, 2]));
    for &i in &split.test {
        let s = &ds.samples[i];
        assert!(s.label == Label::Live || s.attack_type == AttackType(2));
    }
    assert!(leave_one_type_out(&ds, AttackType(0), 0.3, 0.1, 4).is_err());
    assert!(leave_one_type_out(&ds, AttackType(4), 0.3, 0.1, 4).is_err());
}

fn sampler_for(ds: &Dataset, ids: &[usize], batch: usize, seed: u64) -> Result<BatchSampler> {
    let labels: Vec<Label> = ids.iter().map(|&i| ds.samples[i].label).collect();
    BatchSampler::new(ids, &labels, batch, seed)
}

#[test]
fn batches_always_hold_both_classes() {
    let ds = generate(&SyntheticSpec::default()).unwrap();
    let split = intra_split(&ds, TEST_FRACTION, DEV_FRACTION, 0);
    let mut sampler = sampler_for(&ds, &split.train, 32, 5).unwrap();
    for _ in 0..3 {
        for batch in sampler.next_epoch() {
            assert_eq!(batch.len(), 32);
            let labels: Vec<Label> = batch.iter().map(|&i| ds.samples[i].label).collect();
            assert!(!class_counts(&labels).contains(&0));
        }
    }
    // Heavily skewed split: still at least one of each class.
    let skewed: Vec<usize> = (0..40).chain([900]).collect();
    let mut sampler = sampler_for(&ds, &skewed, 8, 1).unwrap();
    for batch in sampler.next_epoch() {
        let labels: Vec<Label> = batch.iter().map(|&i| ds.samples[i].label).collect();
        assert!(!class_counts(&labels).contains(&0));
    }
}

#[test]
fn batch_order_is_deterministic() {
    let ds = generate(&small_spec(5)).unwrap();
    let ids: Vec<usize> = (0..ds.samples.len()).collect();
    let mut a = sampler_for(&ds, &ids, 16, 9).unwrap();
    let mut b = sampler_for(&ds, &ids, 16, 9).unwrap();
    for _ in 0..2 {
        assert_eq!(a.next_epoch(), b.next_epoch());
    }
    let stream: Vec<Vec<usize>> = BatchStream::new(sampler_for(&ds, &ids, 16, 9).unwrap()).take(20).collect();
    let mut c = sampler_for(&ds, &ids, 16, 9).unwrap();
    let direct: Vec<Vec<usize>> = (0..4).flat_map(|_| c.next_epoch()).take(20).collect();
    assert_eq!(stream, direct);
}

#[test]
fn epoch_histogram_matches_split_up_to_padding() {
    let ds = generate(&small_spec(6)).unwrap();
    let ids: Vec<usize> = (0..ds.samples.len()).collect();
    let mut sampler = sampler_for(&ds, &ids, 32, 2).unwrap();
    let epoch = sampler.next_epoch();
    let flat: Vec<usize> = epoch.concat();
    let padding = flat.len() - ids.len();
    let split_counts = class_counts(&ds.samples.iter().map(|s| s.label).collect::<Vec<_>>());
    let epoch_counts = class_counts(&flat.iter().map(|&i| ds.samples[i].label).collect::<Vec<_>>());
    for c in 0..2 {
        assert!(epoch_counts[c] >= split_counts[c] && epoch_counts[c] <= split_counts[c] + padding);
    }
    // Each sample appears once, repeats come only from padding.
    let distinct: BTreeSet<usize> = flat.iter().copied().collect();
    assert_eq!(distinct.len(), ids.len());
}

#[test]
fn batch_errors() {
    let ds = generate(&small_spec(0)).unwrap();
    assert!(matches!(sampler_for(&ds, &[0, 1, 2], 4, 0), Err(Error::Data(_))));
    assert!(matches!(sampler_for(&ds, &[0, 100], 3, 0), Err(Error::Config(_))));
}

#[test]
fn rendering_places_features_in_their_patch() {
    let f: Vec<f64> = (1..=16).map(f64::from).collect();
    let img = render(&f, 4).unwrap();
    assert_eq!(img.len(), 256);
    // Patch 5 is grid row 1, column 1: pixel (4, 4) has full texture weight.
    assert_eq!(img[4 * 16 + 4], 6.0);
    assert_eq!(img[4 * 16 + 5], 3.0);
    assert!(render(&[1.0; 15], 4).is_err());
    let ds = generate(&small_spec(0)).unwrap();
    let refs: Vec<&Sample> = ds.samples.iter().take(3).collect();
    let t = images(&refs, 4).unwrap();
    assert_eq!(t.shape(), &[3, 1, 16, 16]);
    assert_eq!(images(&refs, 4).unwrap(), t);
}

#[test]
fn csv_round_trips() {
    let ds = generate(&small_spec(11)).unwrap();
    let mut buf = Vec::new();
    write_csv(&mut buf, ds.dims, &ds.samples).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("f0,f1,"));
    assert!(text.lines().next().unwrap().ends_with("f15,label,attack_type"));
    let back = read_csv(buf.as_slice()).unwrap();
    assert_eq!(back, ds);
    assert!(read_csv("a,b\n1,2\n".as_bytes()).is_err());
    assert!(read_csv("f0,label,attack_type\n1.0,0,2\n".as_bytes()).is_err());
}
