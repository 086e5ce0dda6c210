//! ROC-based liveness metrics. Scores are oriented so that higher means more
//! live, and a sample is accepted as live when `score >= threshold`.

use crate::error::{Error, Result};
use crate::label::{class_counts, Label};

/// Liveness scores with their ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<Label>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Metric(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Metric(format!("score {i} is not finite")));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn require_both(&self, op: &str) -> Result<[usize; 2]> {
        let counts = class_counts(&self.labels);
        if counts.contains(&0) {
            return Err(Error::Metric(format!(
                "{op} needs both classes, got {} live and {} fake",
                counts[0], counts[1]
            )));
        }
        Ok(counts)
    }
}

/// Probability that a random live sample outscores a random fake one, ties
/// counting one half.
pub fn auc(s: &ScoredSet) -> Result<f64> {
    let [live, fake] = s.require_both("auc")?;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    // Mann-Whitney: sum of live midranks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && s.scores[order[j + 1]] == s.scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| s.labels[k] == Label::Live).count() as f64;
        i = j + 1;
    }
    let (nl, nf) = (live as f64, fake as f64);
    Ok((rank_sum - nl * (nl + 1.0) / 2.0) / (nl * nf))
}

/// One ROC vertex: error rates when accepting `score >= threshold`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    /// Fraction of fakes accepted.
    pub far: f64,
    /// Fraction of lives rejected.
    pub frr: f64,
}

/// ROC vertices at every distinct score in increasing order, followed by a
/// reject-all vertex one unit above the highest score.
pub fn roc(s: &ScoredSet) -> Result<Vec<RocPoint>> {
    let [live, fake] = s.require_both("roc")?;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    let (mut rejected_live, mut rejected_fake) = (0usize, 0usize);
    let mut points = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let threshold = s.scores[order[i]];
        points.push(RocPoint {
            threshold,
            far: (fake - rejected_fake) as f64 / fake as f64,
            frr: rejected_live as f64 / live as f64,
        });
        while i < order.len() && s.scores[order[i]] == threshold {
            match s.labels[order[i]] {
                Label::Live => rejected_live += 1,
                Label::Fake => rejected_fake += 1,
            }
            i += 1;
        }
    }
    let top = s.scores[*order.last().expect("non-empty")];
    points.push(RocPoint {
        threshold: top + 1.0,
        far: 0.0,
        frr: 1.0,
    });
    Ok(points)
}

/// Equal error rate and its threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eer {
    /// Fraction in `[0, 1]`.
    pub rate: f64,
    /// The ROC vertex closest to the crossing (the higher one on a tie).
    pub threshold: f64,
}

/// Crossing of FAR and FRR on the ROC polyline, interpolated linearly
/// between the two vertices that bracket it.
pub fn eer(s: &ScoredSet) -> Result<Eer> {
    let points = roc(s)?;
    let diff = |p: &RocPoint| p.far - p.frr;
    // diff is +1 at the first vertex and -1 at the last, and non-increasing.
    let k = points.iter().position(|p| diff(p) <= 0.0).expect("last vertex has far < frr");
    let (a, b) = (points[k - 1], points[k]);
    let t = diff(&a) / (diff(&a) - diff(&b));
    Ok(Eer {
        rate: a.far + t * (b.far - a.far),
        threshold: if t < 0.5 { a.threshold } else { b.threshold },
    })
}

/// Confusion counts at a fixed threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub live_accepted: usize,
    pub live_rejected: usize,
    pub fake_accepted: usize,
    pub fake_rejected: usize,
}

impl Confusion {
    pub fn at(s: &ScoredSet, threshold: f64) -> Self {
        let mut c = Self::default();
        for (&score, label) in s.scores.iter().zip(&s.labels) {
            match (label, score >= threshold) {
                (Label::Live, true) => c.live_accepted += 1,
                (Label::Live, false) => c.live_rejected += 1,
                (Label::Fake, true) => c.fake_accepted += 1,
                (Label::Fake, false) => c.fake_rejected += 1,
            }
        }
        c
    }

    /// Percentage of fakes accepted.
    pub fn apcer(&self) -> f64 {
        100.0 * self.fake_accepted as f64 / (self.fake_accepted + self.fake_rejected) as f64
    }

    /// Percentage of lives rejected.
    pub fn bpcer(&self) -> f64 {
        100.0 * self.live_rejected as f64 / (self.live_accepted + self.live_rejected) as f64
    }

    pub fn acc(&self) -> f64 {
        let total = self.live_accepted + self.live_rejected + self.fake_accepted + self.fake_rejected;
        100.0 * (self.live_accepted + self.fake_rejected) as f64 / total as f64
    }
}

/// Test-set metrics at a threshold chosen on a development set. All rates
/// are percentages.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub acer: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acc: f64,
    pub auc: f64,
    pub eer: f64,
    pub threshold: f64,
    pub threshold_source: String,
}

/// Source tag of thresholds picked by [`acer_at`].
pub const DEV_EER_SOURCE: &str = "dev-eer";

impl EvalReport {
    /// `{"acer":..,"acc":..,"auc":..,"eer":..,"threshold":..}` with four decimals.
    pub fn to_json(&self) -> String {
        format!(
            "{{\"acer\":{:.4},\"acc\":{:.4},\"auc\":{:.4},\"eer\":{:.4},\"threshold\":{:.4}}}",
            self.acer, self.acc, self.auc, self.eer, self.threshold
        )
    }
}

/// Applies the dev-set EER threshold to `test`.
pub fn acer_at(dev: &ScoredSet, test: &ScoredSet) -> Result<EvalReport> {
    let threshold = eer(dev)?.threshold;
    report_at(test, threshold, DEV_EER_SOURCE)
}

/// Metrics of `test` at a given threshold.
pub fn report_at(test: &ScoredSet, threshold: f64, source: &str) -> Result<EvalReport> {
    let c = Confusion::at(test, threshold);
    let (apcer, bpcer) = (c.apcer(), c.bpcer());
    Ok(EvalReport {
        acer: (apcer + bpcer) / 2.0,
        apcer,
        bpcer,
        acc: c.acc(),
        auc: 100.0 * auc(test)?,
        eer: 100.0 * eer(test)?.rate,
        threshold,
        threshold_source: source.to_string(),
    })
}
