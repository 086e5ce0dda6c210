//! Training loop, evaluation and the run record.

use std::time::Instant;

use moaecr_core::crloss::{objective, LossBundle, LossTerms};
use moaecr_core::datasynth::{
    generate, images, intra_split, leave_one_type_out, BatchSampler, BatchStream, Dataset, Sample, Split, DEV_FRACTION,
    TEST_FRACTION,
};
use moaecr_core::diffcore::{Graph, Tensor};
use moaecr_core::encoder::{class_ce, liveness_scores, similarity_matrix, Encoder};
use moaecr_core::metrics::{acer_at, EvalReport, ScoredSet};
use moaecr_core::optim::Adam;
use moaecr_core::params::ParamStore;
use moaecr_core::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Protocol, RunConfig};
use crate::error::{CliError, CliResult};

/// Rows per forward pass when scoring or exporting.
const EVAL_CHUNK: usize = 256;

/// Synthetic dataset with its partition for one config.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub data: Dataset,
    pub split: Split,
}

impl Benchmark {
    /// The split is seeded by the data seed, so every training seed sees the same partition.
    pub fn new(cfg: &RunConfig) -> CliResult<Self> {
        let spec = &cfg.data.spec;
        let data = generate(spec)?;
        let split = match cfg.data.protocol {
            Protocol::Intra => intra_split(&data, TEST_FRACTION, DEV_FRACTION, spec.seed),
            Protocol::Loto => leave_one_type_out(&data, cfg.data.held(), TEST_FRACTION, DEV_FRACTION, spec.seed)?,
        };
        Ok(Self { data, split })
    }

    pub fn samples(&self, ids: &[usize]) -> Vec<&Sample> {
        ids.iter().map(|&i| &self.data.samples[i]).collect()
    }
}

/// Encoder architecture plus its parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Encoder,
    pub store: ParamStore<f64>,
}

impl Model {
    pub fn init(cfg: &RunConfig, rng: &mut impl Rng) -> CliResult<Self> {
        let mut store = ParamStore::new();
        let encoder = Encoder::new(cfg.encoder.clone(), &mut store, rng)?;
        Ok(Self { encoder, store })
    }

    fn images(&self, samples: &[&Sample]) -> CliResult<Tensor<f64>> {
        Ok(images(samples, self.encoder.cfg.patch_side)?)
    }

    /// Liveness scores (live minus fake similarity), higher means live.
    pub fn scores(&self, samples: &[&Sample]) -> CliResult<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let p = self.store.bind_frozen(&mut g);
            let x = g.constant(self.images(chunk)?);
            let enc = self.encoder.encode(&mut g, &p, x)?;
            let s = similarity_matrix(&mut g, &p, enc.embedding, &self.encoder.text)?;
            out.extend(liveness_scores(g.value(s)));
        }
        Ok(out)
    }

    /// Pooled pre-normalization features, one row per sample.
    pub fn features(&self, samples: &[&Sample]) -> CliResult<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let p = self.store.bind_frozen(&mut g);
            let x = g.constant(self.images(chunk)?);
            let enc = self.encoder.encode(&mut g, &p, x)?;
            out.extend(g.value(enc.pooled).data().chunks(self.encoder.cfg.d).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    pub fn evaluate(&self, bench: &Benchmark) -> CliResult<EvalReport> {
        let scored = |ids: &[usize]| -> CliResult<ScoredSet> {
            let samples = bench.samples(ids);
            let labels = samples.iter().map(|s| s.label).collect();
            Ok(ScoredSet::new(self.scores(&samples)?, labels)?)
        };
        Ok(acer_at(&scored(&bench.split.dev)?, &scored(&bench.split.test)?)?)
    }
}

/// Loss values of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub ce: f64,
    pub dm: f64,
    pub att: f64,
    pub rep: f64,
    pub cdm: f64,
    /// Metric-learning baseline term, zero when none is selected.
    pub baseline: f64,
    pub total: f64,
}

impl StepLosses {
    fn new(b: &LossBundle, baseline: f64) -> Self {
        Self {
            ce: b.l_ce,
            dm: b.l_dm,
            att: b.l_att,
            rep: b.l_rep,
            cdm: b.l_cdm,
            baseline,
            total: b.l_total + baseline,
        }
    }
}

/// Serializable copy of an [`EvalReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub acer: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acc: f64,
    pub auc: f64,
    pub eer: f64,
    pub threshold: f64,
    pub threshold_source: String,
}

impl From<&EvalReport> for ReportRecord {
    fn from(r: &EvalReport) -> Self {
        Self {
            acer: r.acer,
            apcer: r.apcer,
            bpcer: r.bpcer,
            acc: r.acc,
            auc: r.auc,
            eer: r.eer,
            threshold: r.threshold,
            threshold_source: r.threshold_source.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// The full config in its text form.
    pub config: String,
    pub variant: String,
    pub history: Vec<StepLosses>,
    pub report: ReportRecord,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    pub fn to_json(&self) -> CliResult<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// JSON with the wall-clock field zeroed: equal for equal config and seed.
    pub fn canonical_json(&self) -> CliResult<String> {
        Self {
            wall_clock_seconds: 0.0,
            ..self.clone()
        }
        .to_json()
    }
}

pub struct TrainedRun {
    pub model: Model,
    pub initial: Model,
    pub bench: Benchmark,
    pub report: EvalReport,
    pub record: RunRecord,
}

/// Initializes from `cfg.optim.seed` and runs `iterations` Adam steps on
/// balanced batches from the training split.
pub fn train(cfg: &RunConfig) -> CliResult<TrainedRun> {
    let started = Instant::now();
    let bench = Benchmark::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.optim.seed);
    let mut model = Model::init(cfg, &mut rng)?;
    let initial = model.clone();
    let train_labels: Vec<Label> = bench.split.train.iter().map(|&i| bench.data.samples[i].label).collect();
    let sampler = BatchSampler::new(&bench.split.train, &train_labels, cfg.optim.batch_size, rng.random())?;
    let mut batches = BatchStream::new(sampler);
    let mut adam = Adam::new(cfg.optim.adam.clone(), &model.store);
    let mut history = Vec::with_capacity(cfg.optim.iterations);
    for iteration in 0..cfg.optim.iterations {
        let ids = batches.next().expect("batch stream is endless");
        let samples = bench.samples(&ids);
        let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
        let mut g = Graph::new();
        let p = model.store.bind(&mut g);
        let x = g.constant(model.images(&samples)?);
        let enc = model.encoder.encode(&mut g, &p, x)?;
        let s = similarity_matrix(&mut g, &p, enc.embedding, &model.encoder.text)?;
        let ce = class_ce(&mut g, s, &labels)?;
        let (terms, baseline) = match cfg.baseline {
            None => (objective(&mut g, ce, enc.pooled, &labels, &cfg.regularizer)?, None),
            Some(b) => {
                let off = moaecr_core::crloss::RegularizerConfig {
                    dm: false,
                    cdm: false,
                    ..cfg.regularizer
                };
                let terms = objective(&mut g, ce, enc.pooled, &labels, &off)?;
                let extra = b.apply(&mut g, enc.pooled, &labels)?;
                let total = g.add(terms.total, extra)?;
                (LossTerms { total, ..terms }, Some(extra))
            }
        };
        let bundle = terms.bundle(&g);
        let extra = baseline.map_or(0.0, |v| g.value(v).data()[0]);
        let losses = StepLosses::new(&bundle, extra);
        let finite = [losses.ce, losses.dm, losses.att, losses.rep, losses.cdm, losses.baseline, losses.total]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            let last = history.last().copied();
            return Err(CliError::NonFinite { iteration, last });
        }
        g.backward(terms.total)?;
        adam.step(&mut model.store, &g, &p);
        if iteration % 250 == 0 {
            log::info!("iter {iteration}: total {:.5} ce {:.5}", losses.total, losses.ce);
        }
        history.push(losses);
    }
    let report = model.evaluate(&bench)?;
    let record = RunRecord {
        config: cfg.to_text(),
        variant: cfg.variant_label(),
        history,
        report: ReportRecord::from(&report),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(TrainedRun {
        model,
        initial,
        bench,
        report,
        record,
    })
}
