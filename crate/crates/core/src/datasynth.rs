//! Seeded Gaussian-mixture liveness data with several attack types.
//!
//! Live samples come from `N(0, live_spread^2 I)`. Attack types `1..K-1` are
//! the common ones: type `k` is centered at `gap * e_{k-1}` with spread
//! `type_spread`. Type `K` is the rare one: it sits on the far side of the
//! live cluster at `-rare_offset * u`, where `u` is the unit vector along the
//! common-type centroid, with the wider `rare_spread`. The live cluster thus
//! lies inside the hull of the attack means, which no single hyperplane
//! separates well, while a radial boundary does.
//!
//! Feature vectors render to single-channel images: feature `j` fills patch
//! `j` (row-major on a `sqrt(D) x sqrt(D)` grid) with a fixed texture scaled
//! by the feature value.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::label::Label;

/// Attack type tag; 0 is live, `1..=K` are attacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttackType(pub usize);

impl AttackType {
    pub const LIVE: AttackType = AttackType(0);

    pub fn label(self) -> Label {
        if self.0 == 0 {
            Label::Live
        } else {
            Label::Fake
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub dims: usize,
    /// Number of attack types `K`; the last one is the rare type.
    pub attack_types: usize,
    pub live_spread: f64,
    pub type_spread: f64,
    pub rare_spread: f64,
    /// Distance of each common attack mean from the live mean.
    pub gap: f64,
    /// Distance of the rare attack mean from the live mean, on the side away
    /// from the common types (negative values put it on their side).
    pub rare_offset: f64,
    pub n_live: usize,
    /// Samples per common attack type.
    pub n_per_type: usize,
    /// Samples of the rare attack type.
    pub n_rare: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dims: 16,
            attack_types: 4,
            live_spread: 1.0,
            type_spread: 1.0,
            rare_spread: 3.0,
            gap: 6.0,
            rare_offset: 4.0,
            n_live: 800,
            n_per_type: 200,
            n_rare: 100,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.attack_types < 2 {
            return Err(Error::Config(format!("need at least 2 attack types, got {}", self.attack_types)));
        }
        if self.attack_types - 1 > self.dims {
            return Err(Error::Config(format!(
                "{} common attack types do not fit in {} dimensions",
                self.attack_types - 1,
                self.dims
            )));
        }
        for (name, v) in [
            ("live_spread", self.live_spread),
            ("type_spread", self.type_spread),
            ("rare_spread", self.rare_spread),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.gap.is_finite() || !self.rare_offset.is_finite() {
            return Err(Error::Config("gap and rare_offset must be finite".into()));
        }
        if self.n_live == 0 || self.n_per_type == 0 || self.n_rare == 0 {
            return Err(Error::Config("n_live, n_per_type and n_rare must be >= 1".into()));
        }
        Ok(())
    }

    pub fn rare_type(&self) -> AttackType {
        AttackType(self.attack_types)
    }

    /// Mean of attack type `t` (type 0 is live).
    pub fn mean(&self, t: AttackType) -> Vec<f64> {
        let mut m = vec![0.0; self.dims];
        let common = self.attack_types - 1;
        match t.0 {
            0 => {}
            k if k <= common => m[k - 1] = self.gap,
            _ => m[..common].fill(-self.rare_offset / (common as f64).sqrt()),
        }
        m
    }

    pub fn spread(&self, t: AttackType) -> f64 {
        match t.0 {
            0 => self.live_spread,
            k if k == self.attack_types => self.rare_spread,
            _ => self.type_spread,
        }
    }

    pub fn count(&self, t: AttackType) -> usize {
        match t.0 {
            0 => self.n_live,
            k if k == self.attack_types => self.n_rare,
            _ => self.n_per_type,
        }
    }

    pub fn types(&self) -> impl Iterator<Item = AttackType> {
        (0..=self.attack_types).map(AttackType)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Position in the generated dataset.
    pub id: usize,
    pub features: Vec<f64>,
    pub label: Label,
    pub attack_type: AttackType,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: usize,
    pub samples: Vec<Sample>,
}

/// Draws every sample of `spec`, type by type, from a single seeded stream.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::new();
    for t in spec.types() {
        let mean = spec.mean(t);
        let spread = spec.spread(t);
        for _ in 0..spec.count(t) {
            let features = mean
                .iter()
                .map(|m| m + spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            samples.push(Sample {
                id: samples.len(),
                features,
                label: t.label(),
                attack_type: t,
            });
        }
    }
    Ok(Dataset { dims: spec.dims, samples })
}

// ---- images ----------------------------------------------------------------

/// Side length of the rendered image for `dims` features and `patch_side` patches.
pub fn image_side(dims: usize, patch_side: usize) -> Result<usize> {
    let grid = (dims as f64).sqrt().round() as usize;
    if grid * grid != dims {
        return Err(Error::Config(format!("{dims} features do not form a square patch grid")));
    }
    Ok(grid * patch_side)
}

fn texture(r: usize, c: usize) -> f64 {
    if (r + c).is_multiple_of(2) {
        1.0
    } else {
        0.5
    }
}

/// Renders one feature vector into a row-major `side x side` image.
pub fn render(features: &[f64], patch_side: usize) -> Result<Vec<f64>> {
    let side = image_side(features.len(), patch_side)?;
    let grid = side / patch_side;
    let mut img = vec![0.0; side * side];
    for (i, px) in img.iter_mut().enumerate() {
        let (r, c) = (i / side, i % side);
        let patch = (r / patch_side) * grid + c / patch_side;
        *px = features[patch] * texture(r % patch_side, c % patch_side);
    }
    Ok(img)
}

/// Stacks rendered samples into `[n, 1, side, side]`.
pub fn images(samples: &[&Sample], patch_side: usize) -> Result<Tensor<f64>> {
    let dims = samples.first().map_or(0, |s| s.features.len());
    let side = image_side(dims, patch_side)?;
    let mut data = Vec::with_capacity(samples.len() * side * side);
    for s in samples {
        data.extend(render(&s.features, patch_side)?);
    }
    Tensor::new(vec![samples.len(), 1, side, side], data)
}

// ---- splits ----------------------------------------------------------------

/// Disjoint train/dev/test partitions, as dataset sample ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

/// Default fraction of each stratum sent to test.
pub const TEST_FRACTION: f64 = 0.3;
/// Default fraction of the non-test remainder held out as dev.
pub const DEV_FRACTION: f64 = 0.1;

fn ids_of(ds: &Dataset, t: AttackType) -> Vec<usize> {
    ds.samples.iter().filter(|s| s.attack_type == t).map(|s| s.id).collect()
}

fn take_fraction(ids: &mut Vec<usize>, fraction: f64) -> Vec<usize> {
    let k = ((ids.len() as f64) * fraction).round() as usize;
    ids.drain(..k.min(ids.len())).collect()
}

fn attack_types_in(ds: &Dataset) -> Vec<AttackType> {
    let mut types: Vec<AttackType> = ds.samples.iter().map(|s| s.attack_type).collect();
    types.sort();
    types.dedup();
    types
}

/// Stratified split: per attack type, `test_fraction` goes to test and
/// `dev_fraction` of the rest to dev.
pub fn intra_split(ds: &Dataset, test_fraction: f64, dev_fraction: f64, seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for t in attack_types_in(ds) {
        let mut ids = ids_of(ds, t);
        ids.shuffle(&mut rng);
        split.test.extend(take_fraction(&mut ids, test_fraction));
        split.dev.extend(take_fraction(&mut ids, dev_fraction));
        split.train.extend(ids);
    }
    for part in [&mut split.train, &mut split.dev, &mut split.test] {
        part.sort_unstable();
    }
    split
}

/// Holds `held` out entirely: test gets all of it plus `test_fraction` of the
/// live samples; the remaining types are split into train and dev.
pub fn leave_one_type_out(ds: &Dataset, held: AttackType, test_fraction: f64, dev_fraction: f64, seed: u64) -> Result<Split> {
    let types = attack_types_in(ds);
    if held.0 == 0 || !types.contains(&held) {
        return Err(Error::Config(format!(
            "held-out type {} is not an attack type of this dataset",
            held.0
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for t in types {
        let mut ids = ids_of(ds, t);
        ids.shuffle(&mut rng);
        if t == held {
            split.test.extend(ids);
            continue;
        }
        if t == AttackType::LIVE {
            split.test.extend(take_fraction(&mut ids, test_fraction));
        }
        split.dev.extend(take_fraction(&mut ids, dev_fraction));
        split.train.extend(ids);
    }
    for part in [&mut split.train, &mut split.dev, &mut split.test] {
        part.sort_unstable();
    }
    Ok(split)
}

// ---- batching --------------------------------------------------------------

/// Epochs of fixed-size batches that always hold both classes.
///
/// An epoch has `ceil(n / batch_size)` batches. Live slots are spread over the
/// batches in proportion to the live share (at least one of each class per
/// batch); each sample appears once, and a class with more slots than
/// samples is padded by cycling through its shuffled order again.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    live: Vec<usize>,
    fake: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    /// `ids` and `labels` are parallel; batches contain entries of `ids`.
    pub fn new(ids: &[usize], labels: &[Label], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 || !batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!("batch size must be even and >= 2, got {batch_size}")));
        }
        let pick = |want: Label| -> Vec<usize> {
            ids.iter().zip(labels).filter(|(_, l)| **l == want).map(|(i, _)| *i).collect()
        };
        let (live, fake) = (pick(Label::Live), pick(Label::Fake));
        if live.is_empty() || fake.is_empty() {
            return Err(Error::Data(format!(
                "split needs both classes for balanced batches, got {} live and {} fake",
                live.len(),
                fake.len()
            )));
        }
        Ok(Self {
            live,
            fake,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        (self.live.len() + self.fake.len()).div_ceil(self.batch_size)
    }

    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        let b = self.batch_size;
        let nb = self.batches_per_epoch();
        let n = self.live.len() + self.fake.len();
        let slots = nb * b;
        let live_total = ((slots as f64) * self.live.len() as f64 / n as f64).round() as usize;
        let live_total = live_total.clamp(nb, nb * (b - 1));
        let mut live = self.live.clone();
        let mut fake = self.fake.clone();
        live.shuffle(&mut self.rng);
        fake.shuffle(&mut self.rng);
        let (mut li, mut fi) = (0usize, 0usize);
        let mut out = Vec::with_capacity(nb);
        for k in 0..nb {
            let quota = (k + 1) * live_total / nb - k * live_total / nb;
            let mut batch = Vec::with_capacity(b);
            for _ in 0..quota {
                batch.push(live[li % live.len()]);
                li += 1;
            }
            for _ in quota..b {
                batch.push(fake[fi % fake.len()]);
                fi += 1;
            }
            batch.shuffle(&mut self.rng);
            out.push(batch);
        }
        out
    }
}

/// Endless batch stream over successive epochs.
pub struct BatchStream {
    sampler: BatchSampler,
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl BatchStream {
    pub fn new(sampler: BatchSampler) -> Self {
        Self {
            sampler,
            pending: Vec::new().into_iter(),
        }
    }
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if let Some(b) = self.pending.next() {
            return Some(b);
        }
        self.pending = self.sampler.next_epoch().into_iter();
        self.pending.next()
    }
}

// ---- CSV -------------------------------------------------------------------

/// Writes `f0,..,f{D-1},label,attack_type` rows.
pub fn write_csv<'a>(mut w: impl Write, dims: usize, samples: impl IntoIterator<Item = &'a Sample>) -> Result<()> {
    let mut header: Vec<String> = (0..dims).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    header.push("attack_type".into());
    writeln!(w, "{}", header.join(","))?;
    for s in samples {
        let mut line = String::new();
        for v in &s.features {
            write!(line, "{v},").expect("writing to a String");
        }
        writeln!(w, "{line}{},{}", s.label, s.attack_type.0)?;
    }
    Ok(())
}

/// Reads rows written by [`write_csv`]; ids are row positions.
pub fn read_csv(r: impl BufRead) -> Result<Dataset> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "label" || cols[cols.len() - 1] != "attack_type" {
        return Err(Error::Format("CSV header must end with label,attack_type".into()));
    }
    let dims = cols.len() - 2;
    let mut samples = Vec::new();
    for (row, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dims + 2 {
            return Err(Error::Format(format!("row {}: expected {} fields, got {}", row + 1, dims + 2, fields.len())));
        }
        let bad = |what: &str| Error::Format(format!("row {}: bad {what}", row + 1));
        let features = fields[..dims]
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|_| bad("feature")))
            .collect::<Result<Vec<_>>>()?;
        let label: Label = fields[dims].parse().map_err(|_| bad("label"))?;
        let attack_type = AttackType(fields[dims + 1].trim().parse().map_err(|_| bad("attack_type"))?);
        if attack_type.label() != label {
            return Err(Error::Format(format!("row {}: label disagrees with attack type", row + 1)));
        }
        samples.push(Sample {
            id: samples.len(),
            features,
            label,
            attack_type,
        });
    }
    Ok(Dataset { dims, samples })
}

#[cfg(test)]
mod tests;
