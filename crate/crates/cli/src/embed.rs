//! Embedding export and 2-D PCA projection with an SVG scatter plot.

use std::fmt::Write as _;

use moaecr_core::datasynth::{read_csv, write_csv, AttackType, Dataset, Sample};
use moaecr_core::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, CliResult};
use crate::train::{Benchmark, Model};

/// Which partition to export.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(SplitName::Train),
            "dev" => Ok(SplitName::Dev),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split {other:?} (train|dev|test)")),
        }
    }
}

impl Benchmark {
    pub fn ids(&self, which: SplitName) -> &[usize] {
        match which {
            SplitName::Train => &self.split.train,
            SplitName::Dev => &self.split.dev,
            SplitName::Test => &self.split.test,
        }
    }
}

/// Pooled features of every sample in `which`, keeping id, label and attack type.
pub fn export_embeddings(model: &Model, bench: &Benchmark, which: SplitName) -> CliResult<Dataset> {
    let samples = bench.samples(bench.ids(which));
    let features = model.features(&samples)?;
    Ok(Dataset {
        dims: model.encoder.cfg.d,
        samples: samples
            .iter()
            .zip(features)
            .map(|(s, f)| Sample {
                features: f,
                ..(*s).clone()
            })
            .collect(),
    })
}

/// Dataset CSV with a leading `id` column, so rows keep their sample ids.
pub fn embeddings_to_csv(ds: &Dataset) -> CliResult<String> {
    let mut buf = Vec::new();
    write_csv(&mut buf, ds.dims, &ds.samples)?;
    let body = String::from_utf8(buf).expect("csv is ascii");
    let mut out = String::with_capacity(body.len() + 8 * ds.samples.len());
    let mut lines = body.lines();
    let _ = writeln!(out, "id,{}", lines.next().unwrap_or_default());
    for (s, line) in ds.samples.iter().zip(lines) {
        let _ = writeln!(out, "{},{line}", s.id);
    }
    Ok(out)
}

pub fn embeddings_from_csv(text: &str) -> CliResult<Dataset> {
    let mut ids = Vec::new();
    let mut rest = String::with_capacity(text.len());
    for (row, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (first, tail) = line
            .split_once(',')
            .ok_or_else(|| CliError::Usage(format!("embeddings row {row}: missing id column")))?;
        if row == 0 {
            if first != "id" {
                return Err(CliError::Usage("embeddings CSV must start with an id column".into()));
            }
        } else {
            ids.push(first.trim().parse::<usize>().map_err(|_| CliError::Usage(format!("embeddings row {row}: bad id")))?);
        }
        rest.push_str(tail);
        rest.push('\n');
    }
    let mut ds = read_csv(rest.as_bytes())?;
    for (s, id) in ds.samples.iter_mut().zip(ids) {
        s.id = id;
    }
    Ok(ds)
}

/// Power-iteration settings.
pub const PCA_TOL: f64 = 1e-10;
const PCA_MAX_ITERS: usize = 100_000;
const PCA_SEED: u64 = 0x9ca;

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub mean: Vec<f64>,
    /// Unit principal directions.
    pub components: [Vec<f64>; 2],
    /// Variance along each component (divisor `n - 1`).
    pub variances: [f64; 2],
    /// One `[pc1, pc2]` row per input row.
    pub points: Vec<[f64; 2]>,
}

/// Top-2 principal components by power iteration with deflation, started
/// from a fixed pseudo-random vector.
pub fn pca2(rows: &[Vec<f64>]) -> CliResult<Projection> {
    let n = rows.len();
    if n < 2 {
        return Err(CliError::Usage(format!("projection needs at least 2 samples, got {n}")));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(CliError::Usage("rows must share a nonzero width".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += r[a] * r[b];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);

    let mut rng = ChaCha8Rng::seed_from_u64(PCA_SEED);
    let mut components: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
    let mut variances = [0.0; 2];
    for k in 0..2 {
        let start: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (v, lambda) = dominant_eigenpair(&cov, d, start, &components[..k]);
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] -= lambda * v[a] * v[b];
            }
        }
        components[k] = v;
        variances[k] = lambda;
    }
    let points = centered
        .iter()
        .map(|r| [dot(r, &components[0]), dot(r, &components[1])])
        .collect();
    Ok(Projection {
        mean,
        components,
        variances,
        points,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn orthonormalize(v: &mut [f64], against: &[Vec<f64>]) -> f64 {
    for u in against {
        let c = dot(v, u);
        v.iter_mut().zip(u).for_each(|(x, y)| *x -= c * y);
    }
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Power iteration on a symmetric PSD matrix, kept orthogonal to `found`.
fn dominant_eigenpair(cov: &[f64], d: usize, mut v: Vec<f64>, found: &[Vec<f64>]) -> (Vec<f64>, f64) {
    if orthonormalize(&mut v, found) == 0.0 {
        v = (0..d).map(|j| if j == found.len() { 1.0 } else { 0.0 }).collect();
        orthonormalize(&mut v, found);
    }
    let apply = |v: &[f64]| -> Vec<f64> { (0..d).map(|a| dot(&cov[a * d..(a + 1) * d], v)).collect() };
    for _ in 0..PCA_MAX_ITERS {
        let mut w = apply(&v);
        if orthonormalize(&mut w, found) <= f64::MIN_POSITIVE {
            // The remaining spectrum is zero; any orthogonal direction will do.
            break;
        }
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        if delta < PCA_TOL {
            break;
        }
    }
    let lambda = dot(&v, &apply(&v)).max(0.0);
    (v, lambda)
}

pub fn projection_csv(ds: &Dataset, proj: &Projection) -> String {
    let mut out = String::from("id,label,attack_type,pc1,pc2\n");
    for (s, p) in ds.samples.iter().zip(&proj.points) {
        let _ = writeln!(out, "{},{},{},{},{}", s.id, s.label, s.attack_type.0, p[0], p[1]);
    }
    out
}

const PALETTE: [&str; 8] = ["#2b8a3e", "#c92a2a", "#1864ab", "#e67700", "#862e9c", "#0b7285", "#5c940d", "#a61e4d"];

/// Scatter plot: fill color by attack type, circles for live and squares for fake.
pub fn projection_svg(ds: &Dataset, proj: &Projection) -> String {
    let (w, h, pad) = (640.0, 480.0, 40.0);
    let range = |k: usize| {
        let lo = proj.points.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = proj.points.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let ((x0, xs), (y0, ys)) = (range(0), range(1));
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{pad}" y="24" font-family="sans-serif" font-size="14">PC1 var {:.4} / PC2 var {:.4}</text>"#,
        proj.variances[0], proj.variances[1]
    );
    for (s, p) in ds.samples.iter().zip(&proj.points) {
        let cx = pad + (p[0] - x0) / xs * (w - 2.0 * pad);
        let cy = h - pad - (p[1] - y0) / ys * (h - 2.0 * pad);
        let color = PALETTE[s.attack_type.0 % PALETTE.len()];
        match s.label {
            Label::Live => {
                let _ = writeln!(out, r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="3" fill="{color}" fill-opacity="0.7"/>"#);
            }
            Label::Fake => {
                let _ = writeln!(
                    out,
                    r#"<rect x="{:.2}" y="{:.2}" width="6" height="6" fill="{color}" fill-opacity="0.7"/>"#,
                    cx - 3.0,
                    cy - 3.0
                );
            }
        }
    }
    let mut types: Vec<AttackType> = ds.samples.iter().map(|s| s.attack_type).collect();
    types.sort();
    types.dedup();
    for (i, t) in types.iter().enumerate() {
        let y = 44.0 + 16.0 * i as f64;
        let name = if *t == AttackType::LIVE { "live".to_string() } else { format!("attack {}", t.0) };
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}" font-family="sans-serif" font-size="12">{name}</text>"#,
            w - 110.0,
            y,
            PALETTE[t.0 % PALETTE.len()],
            w - 94.0,
            y + 9.0
        );
    }
    out.push_str("</svg>\n");
    out
}
