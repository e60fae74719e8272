//! Gradient descent with a scaled value-matrix step, held-out 0-1
//! evaluation, and per-epoch metric logging.

use std::io::Write;

use ndarray::Array2;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::concept_space::{ConceptBasis, Dictionary, DEFAULT_ANCHOR};
use crate::datagen::{Sample, SampleKind, SampleSpec};
use crate::diagnostics::{self, ProbeStats};
use crate::error::{Error, Result};
use crate::grads::{self, GradTriple};
use crate::model::{self, ModelParams};
use crate::rng;

/// Common directions included in the logged projection tables.
pub const PROBE_COMMON: usize = 10;
/// A step whose training loss rises by more than this is recorded.
pub const LOSS_INCREASE_TOL: f64 = 1e-6;
/// Held-out sets above this size are regenerated on every evaluation
/// instead of kept in memory.
pub const EVAL_STORE_BYTES: usize = 256 << 20;
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    Full,
    Minibatch(usize),
}

fn default_anchor() -> f64 {
    DEFAULT_ANCHOR
}
fn default_true() -> bool {
    true
}
fn default_log_every() -> usize {
    10
}
fn default_eval_size() -> usize {
    1000
}
fn default_probe_size() -> usize {
    200
}
fn default_batch() -> BatchMode {
    BatchMode::Full
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub d: usize,
    pub num_tasks: usize,
    pub num_common: usize,
    pub prefix_len: usize,
    /// Demonstration pairs per ICL prompt.
    pub num_demos: usize,
    /// Demonstration pairs per ICL test prompt; defaults to `num_demos`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_num_demos: Option<usize>,
    /// QA demonstrations per QA-ICL prompt; defaults to the largest count
    /// whose prompt is no longer than an ICL test prompt (at least 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qaicl_num_demos: Option<usize>,
    pub num_train: usize,
    pub sigma0: f64,
    pub sigma1: f64,
    pub noise_sd: f64,
    /// Test-time noise; defaults to `noise_sd`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_noise_sd: Option<f64>,
    #[serde(default = "default_anchor")]
    pub anchor: f64,
    pub eta: f64,
    pub q_v: f64,
    #[serde(default)]
    pub lambda: f64,
    pub epochs: usize,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_true")]
    pub early_stop: bool,
    pub seed: u64,
    pub train_dist: SampleKind,
    pub test_dists: Vec<SampleKind>,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_batch")]
    pub batch: BatchMode,
    #[serde(default = "default_eval_size")]
    pub eval_size: usize,
    #[serde(default = "default_probe_size")]
    pub probe_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl TrainConfig {
    /// The desk-scale setup: d=512, K=2, K'=50, M=10, N=200, J=10.
    pub fn desk(train_dist: SampleKind, seed: u64) -> Self {
        TrainConfig {
            d: 512,
            num_tasks: 2,
            num_common: 50,
            prefix_len: 10,
            num_demos: 10,
            test_num_demos: None,
            qaicl_num_demos: None,
            num_train: 200,
            sigma0: 1e-3,
            sigma1: 5e-3,
            noise_sd: 1e-2,
            test_noise_sd: None,
            anchor: DEFAULT_ANCHOR,
            eta: 5.0,
            q_v: 1e-4,
            lambda: 0.0,
            epochs: 3000,
            epsilon: 0.0,
            early_stop: false,
            seed,
            train_dist,
            test_dists: SampleKind::ALL.to_vec(),
            log_every: 50,
            batch: BatchMode::Full,
            eval_size: 1000,
            probe_size: 200,
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(field, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        positive("d", self.d)?;
        positive("num_tasks", self.num_tasks)?;
        positive("num_common", self.num_common)?;
        positive("prefix_len", self.prefix_len)?;
        positive("num_demos", self.num_demos)?;
        positive("num_train", self.num_train)?;
        positive("log_every", self.log_every)?;
        positive("eval_size", self.eval_size)?;
        positive("probe_size", self.probe_size)?;
        if let Some(j) = self.test_num_demos {
            positive("test_num_demos", j)?;
        }
        if let Some(j) = self.qaicl_num_demos {
            positive("qaicl_num_demos", j)?;
        }
        if let Some(t) = self.threads {
            positive("threads", t)?;
        }
        let needed = 2 * self.num_tasks + self.num_common;
        if self.d < needed {
            return Err(Error::config(
                "d",
                format!("needs at least 2K + K' = {needed} dimensions, got {}", self.d),
            ));
        }
        let non_negative = |field: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be finite and non-negative, got {v}")))
            }
        };
        non_negative("sigma0", self.sigma0)?;
        non_negative("sigma1", self.sigma1)?;
        non_negative("noise_sd", self.noise_sd)?;
        if let Some(s) = self.test_noise_sd {
            non_negative("test_noise_sd", s)?;
        }
        non_negative("anchor", self.anchor)?;
        non_negative("eta", self.eta)?;
        non_negative("lambda", self.lambda)?;
        if !(self.q_v > 0.0 && self.q_v.is_finite()) {
            return Err(Error::config("q_v", format!("must be positive, got {}", self.q_v)));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config("epsilon", format!("must lie in [0, 1], got {}", self.epsilon)));
        }
        if self.test_dists.is_empty() {
            return Err(Error::config("test_dists", "needs at least one test distribution"));
        }
        if let BatchMode::Minibatch(b) = self.batch {
            if b == 0 || b > self.num_train {
                return Err(Error::config(
                    "batch",
                    format!("minibatch size must lie in 1..={}, got {b}", self.num_train),
                ));
            }
        }
        Ok(())
    }

    pub fn test_noise(&self) -> f64 {
        self.test_noise_sd.unwrap_or(self.noise_sd)
    }

    pub fn icl_test_demos(&self) -> usize {
        self.test_num_demos.unwrap_or(self.num_demos)
    }

    pub fn qaicl_demos(&self) -> usize {
        self.qaicl_num_demos.unwrap_or_else(|| {
            let budget = 2 * self.icl_test_demos() + 2;
            (budget / (self.prefix_len + 2)).saturating_sub(1).max(1)
        })
    }

    fn demos_for(&self, kind: SampleKind, test: bool) -> usize {
        match kind {
            SampleKind::Icl if test => self.icl_test_demos(),
            SampleKind::Icl => self.num_demos,
            SampleKind::QaIcl => self.qaicl_demos(),
            SampleKind::Qa => 0,
        }
    }

    pub fn train_spec(&self) -> SampleSpec {
        SampleSpec {
            kind: self.train_dist,
            num_demos: self.demos_for(self.train_dist, false),
            prefix_len: self.prefix_len,
            noise_sd: self.noise_sd,
            anchor: self.anchor,
        }
    }

    pub fn test_spec(&self, kind: SampleKind) -> SampleSpec {
        SampleSpec {
            kind,
            num_demos: self.demos_for(kind, true),
            prefix_len: self.prefix_len,
            noise_sd: self.test_noise(),
            anchor: self.anchor,
        }
    }
}

/// Stream for the held-out set of one test distribution.
pub fn eval_stream(kind: SampleKind) -> u64 {
    let slot = SampleKind::ALL.iter().position(|&k| k == kind).unwrap_or(0) as u64;
    rng::STREAM_EVAL_DATA + ((slot + 1) << 8)
}

/// A fixed held-out set, either materialized or regenerated per use.
/// Both forms yield identical samples.
#[derive(Debug, Clone)]
pub enum EvalSet {
    Stored(Vec<Sample>),
    Virtual { spec: SampleSpec, seed: u64, stream: u64, len: usize },
}

impl EvalSet {
    pub fn build(spec: SampleSpec, basis: &ConceptBasis, seed: u64, stream: u64, len: usize) -> Result<Self> {
        let bytes = len * spec.seq_len() * basis.dim() * std::mem::size_of::<f64>();
        if bytes <= EVAL_STORE_BYTES {
            Ok(EvalSet::Stored(spec.generate(basis, seed, stream, len)?))
        } else {
            Ok(EvalSet::Virtual { spec, seed, stream, len })
        }
    }

    pub fn len(&self) -> usize {
        match self {
            EvalSet::Stored(v) => v.len(),
            EvalSet::Virtual { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Visit the set in order, `EVAL_CHUNK` samples at a time.
    pub fn for_each_chunk(&self, basis: &ConceptBasis, mut f: impl FnMut(usize, &[&Sample]) -> Result<()>) -> Result<()> {
        match self {
            EvalSet::Stored(v) => {
                for (c, chunk) in v.chunks(EVAL_CHUNK).enumerate() {
                    let refs: Vec<&Sample> = chunk.iter().collect();
                    f(c * EVAL_CHUNK, &refs)?;
                }
            }
            EvalSet::Virtual { spec, seed, stream, len } => {
                for start in (0..*len).step_by(EVAL_CHUNK) {
                    let end = (start + EVAL_CHUNK).min(*len);
                    let chunk = spec.generate_range(basis, *seed, *stream, start..end)?;
                    let refs: Vec<&Sample> = chunk.iter().collect();
                    f(start, &refs)?;
                }
            }
        }
        Ok(())
    }

    pub fn zero_one_loss(&self, params: &ModelParams, basis: &ConceptBasis, dict: &Dictionary) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut errors = 0usize;
        self.for_each_chunk(basis, |start, chunk| {
            errors += diagnostics::count_errors(params, chunk, dict).map_err(|e| model::offset_sample(e, start))?;
            Ok(())
        })?;
        Ok(errors as f64 / self.len() as f64)
    }
}

/// Everything a run needs besides the parameters.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub basis: ConceptBasis,
    pub dict: Dictionary,
    pub train: Vec<Sample>,
    pub eval: Vec<(SampleKind, EvalSet)>,
    /// ICL test prompts for the cosine diagnostics.
    pub probe: Vec<Sample>,
}

impl TrainSetup {
    pub fn build(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let basis = ConceptBasis::build(config.d, config.num_tasks, config.num_common, config.seed)?;
        let dict = Dictionary::build(&basis, config.anchor)?;
        Self::with_basis(config, basis, dict)
    }

    pub fn with_basis(config: &TrainConfig, basis: ConceptBasis, dict: Dictionary) -> Result<Self> {
        let train = config
            .train_spec()
            .generate(&basis, config.seed, rng::STREAM_TRAIN_DATA, config.num_train)?;
        let mut eval = Vec::new();
        for &kind in &config.test_dists {
            if eval.iter().any(|(k, _)| *k == kind) {
                continue;
            }
            let set = EvalSet::build(config.test_spec(kind), &basis, config.seed, eval_stream(kind), config.eval_size)?;
            eval.push((kind, set));
        }
        let probe = config
            .test_spec(SampleKind::Icl)
            .generate(&basis, config.seed, rng::STREAM_PROBE_DATA, config.probe_size)?;
        Ok(TrainSetup {
            basis,
            dict,
            train,
            eval,
            probe,
        })
    }
}

/// Metrics at one logged epoch, measured at the parameters before that
/// epoch's update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub train_ce: f64,
    pub test01_icl: Option<f64>,
    pub test01_qa: Option<f64>,
    pub test01_qaicl: Option<f64>,
    /// `a_k^T W_V a_k` per task.
    pub a_v_a: Vec<f64>,
    /// `b_k^T W_V b_k` per task.
    pub b_v_b: Vec<f64>,
    /// `a_k^T W_K^T W_Q a_k` per task.
    pub a_kq_a: Vec<f64>,
    pub v_cross_max: f64,
    pub kq_cross_max: f64,
    pub attn_max: f64,
    pub cos_task: f64,
    pub cos_other_max: f64,
    pub cos_b_max: f64,
}

impl LogRow {
    pub fn test01(&self, kind: SampleKind) -> Option<f64> {
        match kind {
            SampleKind::Icl => self.test01_icl,
            SampleKind::Qa => self.test01_qa,
            SampleKind::QaIcl => self.test01_qaicl,
        }
    }

    fn set_test01(&mut self, kind: SampleKind, v: f64) {
        match kind {
            SampleKind::Icl => self.test01_icl = Some(v),
            SampleKind::Qa => self.test01_qa = Some(v),
            SampleKind::QaIcl => self.test01_qaicl = Some(v),
        }
    }

    /// Smallest test loss over the evaluated distributions.
    pub fn min_test01(&self) -> Option<f64> {
        SampleKind::ALL
            .iter()
            .filter_map(|&k| self.test01(k))
            .reduce(f64::min)
    }

    pub fn is_finite(&self) -> bool {
        let scalars = [
            self.train_ce,
            self.v_cross_max,
            self.kq_cross_max,
            self.attn_max,
            self.cos_task,
            self.cos_other_max,
            self.cos_b_max,
        ];
        scalars
            .iter()
            .chain(&self.a_v_a)
            .chain(&self.b_v_b)
            .chain(&self.a_kq_a)
            .chain([self.test01_icl, self.test01_qa, self.test01_qaicl].iter().flatten())
            .all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossIncrease {
    pub epoch: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub num_tasks: usize,
    pub rows: Vec<LogRow>,
    /// Full-batch steps whose training loss went up by more than
    /// [`LOSS_INCREASE_TOL`].
    pub loss_increases: Vec<LossIncrease>,
    /// Number of parameter updates applied.
    pub updates: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn empty(num_tasks: usize) -> Self {
        TrainLog {
            num_tasks,
            rows: Vec::new(),
            loss_increases: Vec::new(),
            updates: 0,
            stopped_early: false,
        }
    }

    pub fn csv_header(num_tasks: usize) -> Vec<String> {
        let mut h: Vec<String> = ["epoch", "train_ce", "test01_icl", "test01_qa", "test01_qaicl"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for prefix in ["aVa", "bVb", "aKQa"] {
            h.extend((0..num_tasks).map(|k| format!("{prefix}_{k}")));
        }
        h.extend(
            ["v_cross_max", "kq_cross_max", "attn_max", "cos_task", "cos_other_max", "cos_b_max"]
                .iter()
                .map(|s| s.to_string()),
        );
        h
    }

    /// Metrics table: one row per logged epoch, shortest round-trip
    /// decimal floats, empty cells for distributions not evaluated.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::csv_header(self.num_tasks))?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![
                r.epoch.to_string(),
                r.train_ce.to_string(),
                opt(r.test01_icl),
                opt(r.test01_qa),
                opt(r.test01_qaicl),
            ];
            for col in [&r.a_v_a, &r.b_v_b, &r.a_kq_a] {
                rec.extend(col.iter().map(f64::to_string));
            }
            rec.extend(
                [r.v_cross_max, r.kq_cross_max, r.attn_max, r.cos_task, r.cos_other_max, r.cos_b_max]
                    .iter()
                    .map(f64::to_string),
            );
            w.write_record(rec)?;
        }
        w.flush().map_err(|e| Error::io("<metrics>", e))?;
        Ok(())
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }
}

/// Probe values at the current parameters.
pub fn measure(
    params: &ModelParams,
    setup: &TrainSetup,
    epoch: usize,
    train_ce: f64,
) -> Result<LogRow> {
    let proj = diagnostics::projection_probe(params, &setup.basis, PROBE_COMMON);
    let k = setup.basis.num_tasks();
    let probe_refs: Vec<&Sample> = setup.probe.iter().collect();
    let ProbeStats {
        cos_task,
        cos_other_max,
        cos_b_max,
        attn_max,
    } = diagnostics::probe_statistics(params, &probe_refs, &setup.basis, &setup.dict)?;
    let mut row = LogRow {
        epoch,
        train_ce,
        test01_icl: None,
        test01_qa: None,
        test01_qaicl: None,
        a_v_a: (0..k).map(|i| proj.task_value(i)).collect(),
        b_v_b: (0..k).map(|i| proj.label_value(i)).collect(),
        a_kq_a: (0..k).map(|i| proj.task_key_query(i)).collect(),
        v_cross_max: proj.value_cross_max(),
        kq_cross_max: proj.key_query_cross_max(),
        attn_max,
        cos_task,
        cos_other_max,
        cos_b_max,
    };
    for (kind, set) in &setup.eval {
        row.set_test01(*kind, set.zero_one_loss(params, &setup.basis, &setup.dict)?);
    }
    Ok(row)
}

/// `W <- W - step * (g + lambda W)`.
fn descend(w: &mut Array2<f64>, g: &Array2<f64>, step: f64, lambda: f64) {
    if lambda > 0.0 {
        let decay = 1.0 - step * lambda;
        w.zip_mut_with(g, |x, &gi| *x = decay * *x - step * gi);
    } else {
        w.scaled_add(-step, g);
    }
}

/// One update: `W_K, W_Q` step `eta`, `W_V` steps `eta * q_V`.
pub fn apply_update(params: &mut ModelParams, g: &GradTriple, eta: f64, q_v: f64, lambda: f64) {
    descend(&mut params.w_k, &g.g_k, eta, lambda);
    descend(&mut params.w_q, &g.g_q, eta, lambda);
    descend(&mut params.w_v, &g.g_v, eta * q_v, lambda);
}

/// Run on a thread pool of the configured size, or the ambient pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("cannot build a {n}-thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

pub fn train(config: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    with_threads(config.threads, || {
        let setup = TrainSetup::build(config)?;
        let params = model::init_params(config.d, config.sigma0, config.sigma1, config.seed)?;
        train_from(config, &setup, params)
    })?
}

/// Train from given parameters on a prepared setup. Callers pick the
/// thread pool.
pub fn train_from(config: &TrainConfig, setup: &TrainSetup, mut params: ModelParams) -> Result<(ModelParams, TrainLog)> {
    let mut log = TrainLog::empty(config.num_tasks);
    train_into(config, setup, &mut params, &mut log)?;
    Ok((params, log))
}

/// As [`train_from`], but `params` and `log` hold whatever was reached
/// when an error is returned.
pub fn train_into(config: &TrainConfig, setup: &TrainSetup, params: &mut ModelParams, log: &mut TrainLog) -> Result<()> {
    config.validate()?;
    if params.dim() != config.d {
        return Err(Error::config(
            "d",
            format!("parameters have dimension {}, config says {}", params.dim(), config.d),
        ));
    }
    let train_refs: Vec<&Sample> = setup.train.iter().collect();
    *log = TrainLog::empty(config.num_tasks);
    let mut batch_rng = rng::stream(config.seed, rng::STREAM_MINIBATCH);
    let mut prev_loss: Option<f64> = None;
    for epoch in 0..=config.epochs {
        let last = epoch == config.epochs;
        let logged = last || epoch % config.log_every == 0;
        let (full_loss, grads) = match config.batch {
            BatchMode::Full if !last => {
                let (l, g) = grads::batch_loss_and_grads(params, &train_refs, &setup.dict).map_err(|e| e.at_epoch(epoch))?;
                (Some(l), Some(g))
            }
            BatchMode::Full => (Some(grads::batch_loss(params, &train_refs, &setup.dict).map_err(|e| e.at_epoch(epoch))?), None),
            BatchMode::Minibatch(b) => {
                let loss = if logged {
                    Some(grads::batch_loss(params, &train_refs, &setup.dict).map_err(|e| e.at_epoch(epoch))?)
                } else {
                    None
                };
                let grads = if last {
                    None
                } else {
                    let picked: Vec<&Sample> = index::sample(&mut batch_rng, train_refs.len(), b)
                        .into_iter()
                        .map(|i| train_refs[i])
                        .collect();
                    Some(grads::batch_grads(params, &picked, &setup.dict).map_err(|e| e.at_epoch(epoch))?)
                };
                (loss, grads)
            }
        };
        if let Some(l) = full_loss {
            if !l.is_finite() {
                return Err(Error::Diverged {
                    what: format!("training loss {l}"),
                }
                .at_epoch(epoch));
            }
            if matches!(config.batch, BatchMode::Full) {
                if let Some(p) = prev_loss {
                    if l > p + LOSS_INCREASE_TOL {
                        log.loss_increases.push(LossIncrease {
                            epoch,
                            before: p,
                            after: l,
                        });
                    }
                }
                prev_loss = Some(l);
            }
        }
        if logged {
            let train_ce = full_loss.expect("loss is computed at logged epochs");
            let row = measure(params, setup, epoch, train_ce).map_err(|e| e.at_epoch(epoch))?;
            let stop = config.early_stop && row.min_test01().is_some_and(|l| l <= config.epsilon);
            log.rows.push(row);
            if stop {
                log.stopped_early = !last;
                break;
            }
        }
        if let Some(g) = grads {
            apply_update(params, &g, config.eta, config.q_v, config.lambda);
            if !params.is_finite() {
                return Err(Error::Diverged {
                    what: "parameters".into(),
                }
                .at_epoch(epoch));
            }
            log.updates += 1;
        }
    }
    Ok(())
}
