//! Out-of-distribution probes for a trained model: shifted dictionaries,
//! prompts mixing several co-tasks, task vectors read from demonstrations
//! alone, and task-vector transfer onto external queries.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::concept_space::{ConceptBasis, Dictionary};
use crate::datagen::{self, make_label, make_word, random_sign_of, ActiveConcept, Sample, SampleKind, SampleSpec};
use crate::diagnostics::{self, BasisCosines};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams, MIN_NORM};
use crate::rng::{self, SimRng};
use crate::trainer::EvalSet;

/// Longest prompt accepted by the multi-concept sampler.
pub const MAX_PROMPT_DEMOS: usize = 512;
/// At most `J / EXTRA_CONCEPT_DIVISOR` extra (non-co-task) concepts across
/// all words of a prompt, and separately across all labels.
pub const EXTRA_CONCEPT_DIVISOR: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// `b_k` of the original basis, one per new task.
    Original,
    /// Signed coordinate directions unused by the original basis.
    Fresh,
    /// Normalized combinations of the original `b_k`, one row per new task.
    Combination(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommonSource {
    Original,
    /// This many fresh directions unused by the original basis.
    Fresh(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftedDictionarySpec {
    /// One row per new task: non-negative weights over the original `a_k`.
    pub task_weights: Vec<Vec<f64>>,
    pub labels: LabelSource,
    pub common: CommonSource,
}

impl ShiftedDictionarySpec {
    /// Every task mapped to itself.
    pub fn identity(num_tasks: usize) -> Self {
        ShiftedDictionarySpec {
            task_weights: (0..num_tasks)
                .map(|k| (0..num_tasks).map(|i| if i == k { 1.0 } else { 0.0 }).collect())
                .collect(),
            labels: LabelSource::Original,
            common: CommonSource::Original,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedDictionary {
    pub basis: ConceptBasis,
    pub dict: Dictionary,
}

fn infeasible(msg: impl Into<String>) -> Error {
    Error::InfeasibleShift(msg.into())
}

fn normalized_combination(weights: &[f64], family: ArrayView2<'_, f64>, what: &str) -> Result<Array1<f64>> {
    if weights.len() != family.nrows() {
        return Err(infeasible(format!(
            "{what} weights have {} entries, expected {}",
            weights.len(),
            family.nrows()
        )));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(infeasible(format!("{what} weights must be finite")));
    }
    let v = family.t().dot(&ArrayView1::from(weights));
    let n = v.dot(&v).sqrt();
    if !(n > 1e-12) {
        return Err(infeasible(format!("{what} weights combine to the zero vector")));
    }
    Ok(v / n)
}

/// New task directions as unit-normalized conic combinations of the
/// trained `a_k`, with label and common families taken from the original
/// basis, fresh unused directions, or combinations of the original `b_k`.
pub fn build_shifted_dictionary(
    basis: &ConceptBasis,
    spec: &ShiftedDictionarySpec,
    anchor: f64,
    seed: u64,
) -> Result<ShiftedDictionary> {
    let k = basis.num_tasks();
    let ka = spec.task_weights.len();
    if ka == 0 || ka > k {
        return Err(infeasible(format!("need between 1 and {k} new tasks, got {ka}")));
    }
    let d = basis.dim();
    let mut task = Array2::zeros((ka, d));
    for (i, w) in spec.task_weights.iter().enumerate() {
        if w.iter().any(|&x| x < 0.0) {
            return Err(infeasible(format!("task {i} has a negative weight")));
        }
        if !w.iter().any(|&x| x > 0.0) {
            return Err(infeasible(format!("task {i} needs at least one positive weight")));
        }
        task.row_mut(i)
            .assign(&normalized_combination(w, basis.task_vectors(), "task")?);
    }

    let mut free = basis.free_coordinates();
    let fresh_needed = matches!(spec.labels, LabelSource::Fresh) as usize * ka
        + match spec.common {
            CommonSource::Fresh(n) => n,
            CommonSource::Original => 0,
        };
    if fresh_needed > free.len() {
        return Err(infeasible(format!(
            "{fresh_needed} fresh directions requested, {} unused coordinates available",
            free.len()
        )));
    }
    let mut r = rng::stream(seed, rng::STREAM_OOD);
    free.shuffle(&mut r);
    let mut fresh = free.into_iter();
    let mut take_fresh = |n: usize, r: &mut SimRng| {
        let mut m = Array2::zeros((n, d));
        for i in 0..n {
            let c = fresh.next().expect("counted above");
            m[[i, c]] = rng::random_sign(r);
        }
        m
    };

    let label = match &spec.labels {
        LabelSource::Original => basis.label_vectors().slice(s![..ka, ..]).to_owned(),
        LabelSource::Fresh => take_fresh(ka, &mut r),
        LabelSource::Combination(rows) => {
            if rows.len() != ka {
                return Err(infeasible(format!("{} label combinations for {ka} tasks", rows.len())));
            }
            let mut m = Array2::zeros((ka, d));
            for (i, w) in rows.iter().enumerate() {
                m.row_mut(i)
                    .assign(&normalized_combination(w, basis.label_vectors(), "label")?);
            }
            m
        }
    };
    let common = match spec.common {
        CommonSource::Original => basis.common_vectors().to_owned(),
        CommonSource::Fresh(n) => take_fresh(n, &mut r),
    };
    let shifted = ConceptBasis::from_families(task, label, common).map_err(|e| infeasible(e.to_string()))?;
    let dict = Dictionary::build(&shifted, anchor)?;
    Ok(ShiftedDictionary { basis: shifted, dict })
}

/// 0-1 loss on `n_test` prompts drawn from the shifted families and
/// scored against the shifted dictionary.
pub fn evaluate_dictionary_shift(
    params: &ModelParams,
    shifted: &ShiftedDictionary,
    spec: SampleSpec,
    n_test: usize,
    seed: u64,
) -> Result<f64> {
    let set = EvalSet::build(spec, &shifted.basis, seed, rng::STREAM_OOD, n_test)?;
    set.zero_one_loss(params, &shifted.basis, &shifted.dict)
}

fn check_task_set(basis: &ConceptBasis, tasks: &[usize]) -> Result<()> {
    if tasks.is_empty() || tasks.len() > 3 {
        return Err(Error::InvalidArgument(format!(
            "a prompt mixes 1 to 3 co-tasks, got {}",
            tasks.len()
        )));
    }
    for (i, &t) in tasks.iter().enumerate() {
        basis.check_task(t)?;
        if tasks[..i].contains(&t) {
            return Err(Error::InvalidArgument(format!("task {t} listed twice")));
        }
    }
    Ok(())
}

/// Co-task plus extra tasks, each with probability `1/K`, while the
/// prompt-wide extra budget lasts.
fn capped_concepts<R: Rng + ?Sized>(co_task: usize, num_tasks: usize, budget: &mut usize, rng: &mut R) -> Vec<usize> {
    let mut set = vec![co_task];
    let p = 1.0 / num_tasks as f64;
    for i in 0..num_tasks {
        if i != co_task && rng.random_bool(p) && *budget > 0 {
            set.push(i);
            *budget -= 1;
        }
    }
    set
}

/// An ICL prompt whose demonstration pairs cycle through the co-tasks in
/// `tasks` (balanced, in shuffled order). The query's co-task is drawn
/// uniformly from `tasks` and sets the target.
pub fn sample_multi_concept_prompt(
    basis: &ConceptBasis,
    tasks: &[usize],
    num_demos: usize,
    noise_sd: f64,
    anchor: f64,
    rng: &mut SimRng,
) -> Result<Sample> {
    check_task_set(basis, tasks)?;
    if num_demos == 0 || num_demos > MAX_PROMPT_DEMOS {
        return Err(Error::InvalidArgument(format!(
            "prompt length must lie in 1..={MAX_PROMPT_DEMOS}, got {num_demos}"
        )));
    }
    let k = basis.num_tasks();
    let mut order: Vec<usize> = (0..num_demos).map(|l| tasks[l % tasks.len()]).collect();
    order.shuffle(rng);
    let cap = num_demos / EXTRA_CONCEPT_DIVISOR;
    let (mut x_budget, mut y_budget) = (cap, cap);
    let mut rows = Vec::with_capacity(2 * num_demos + 1);
    let mut sets = Vec::with_capacity(2 * num_demos + 1);
    for &co in &order {
        let xs = capped_concepts(co, k, &mut x_budget, rng);
        let ys = capped_concepts(co, k, &mut y_budget, rng);
        let signs: Vec<_> = (0..k).map(|_| random_sign_of(rng)).collect();
        let tag = |set: Vec<usize>| -> Vec<ActiveConcept> {
            set.into_iter().map(|task| ActiveConcept { task, sign: signs[task] }).collect()
        };
        let (xs, ys) = (tag(xs), tag(ys));
        rows.push(make_word(basis, &xs, anchor, noise_sd, rng)?);
        rows.push(make_label(basis, &ys, noise_sd, rng)?);
        sets.push(xs);
        sets.push(ys);
    }
    let co_task = tasks[rng.random_range(0..tasks.len())];
    let query: Vec<ActiveConcept> = capped_concepts(co_task, k, &mut x_budget, rng)
        .into_iter()
        .map(|task| ActiveConcept {
            task,
            sign: random_sign_of(rng),
        })
        .collect();
    rows.push(make_word(basis, &query, anchor, noise_sd, rng)?);
    let label_sign = query[0].sign;
    sets.push(query);
    datagen::finish(basis, rows, SampleKind::Icl, co_task, label_sign, Vec::new(), sets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridWeights {
    pub tasks: Vec<usize>,
    /// Non-negative, summing to 1.
    pub weights: Vec<f64>,
    /// Raw projections of `LN(h0)` on each `a_k`.
    pub projections: Vec<f64>,
    /// Norm of the part of `LN(h0)` outside `span{a_k : k in tasks}`.
    pub residual_norm: f64,
    /// True when no projection was positive and the weights fell back to uniform.
    pub degenerate: bool,
}

/// Decompose a vector over the task directions in `tasks`.
pub fn hybrid_weights_of(h0: ArrayView1<'_, f64>, basis: &ConceptBasis, tasks: &[usize]) -> Result<HybridWeights> {
    check_task_set(basis, tasks)?;
    let norm = h0.dot(&h0).sqrt();
    if !(norm >= MIN_NORM) {
        return Err(Error::DegenerateNorm { norm });
    }
    let unit = &h0 / norm;
    let projections: Vec<f64> = tasks.iter().map(|&t| basis.task(t).dot(&unit)).collect();
    let mut residual = unit.clone();
    for (&t, &c) in tasks.iter().zip(&projections) {
        residual.scaled_add(-c, &basis.task(t));
    }
    let clipped: Vec<f64> = projections.iter().map(|&c| c.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    let degenerate = !(total > 0.0);
    let weights = if degenerate {
        vec![1.0 / tasks.len() as f64; tasks.len()]
    } else {
        clipped.iter().map(|c| c / total).collect()
    };
    Ok(HybridWeights {
        tasks: tasks.to_vec(),
        weights,
        projections,
        residual_norm: residual.dot(&residual).sqrt(),
        degenerate,
    })
}

pub fn hybrid_vector_decomposition(
    params: &ModelParams,
    prompt: &Sample,
    basis: &ConceptBasis,
    tasks: &[usize],
) -> Result<HybridWeights> {
    let (_, _, h0) = model::attend(params, prompt.tokens.view())?;
    hybrid_weights_of(h0.view(), basis, tasks)
}

/// Drop the query so the last demonstration answer acts as the query:
/// the final word of an ICL prompt, or the final QA segment of a QA-ICL
/// prompt.
pub fn strip_query(prompt: &Sample, prefix_len: usize) -> Result<Array2<f64>> {
    let drop = match prompt.kind {
        SampleKind::Icl => 1,
        SampleKind::QaIcl => prefix_len + 1,
        SampleKind::Qa => {
            return Err(Error::InvalidArgument("a QA sentence has no demonstrations".into()));
        }
    };
    let l = prompt.len();
    if l < drop + 2 {
        return Err(Error::InvalidArgument(format!(
            "{} tokens leave no demonstration pair after removing the query",
            l
        )));
    }
    Ok(prompt.tokens.slice(s![..l - drop, ..]).to_owned())
}

/// Cosines of `h0` computed from demonstrations only.
pub fn demo_only_task_vector(params: &ModelParams, demos: ArrayView2<'_, f64>, basis: &ConceptBasis) -> Result<BasisCosines> {
    if demos.nrows() < 2 {
        return Err(Error::InvalidArgument("demonstrations need at least two tokens".into()));
    }
    let (_, _, h0) = model::attend(params, demos)?;
    diagnostics::cosines_of(h0.view(), basis)
}

/// Index predicted for `LN(task_vector) + query`.
pub fn transfer_with_vector(task_vector: ArrayView1<'_, f64>, query: ArrayView1<'_, f64>, dict: &Dictionary) -> Result<usize> {
    let r = model::readout(task_vector, query, dict)?;
    Ok(model::argmax(r.logits.view()))
}

/// Add the task vector of `source` to an external query and predict.
pub fn arithmetic_transfer(
    params: &ModelParams,
    source: &Sample,
    external_query: ArrayView1<'_, f64>,
    dict: &Dictionary,
) -> Result<usize> {
    let (_, _, h0) = model::attend(params, source.tokens.view())?;
    transfer_with_vector(h0.view(), external_query, dict)
}

/// One transfer case: a test prompt and a fresh word sharing its co-task.
#[derive(Debug, Clone)]
pub struct TransferCase {
    pub source: Sample,
    pub query: Array1<f64>,
    pub target_index: usize,
}

pub fn sample_transfer_case(basis: &ConceptBasis, spec: &SampleSpec, rng: &mut SimRng) -> Result<TransferCase> {
    let source = spec.sample(basis, rng)?;
    let (query, concepts) = datagen::sample_word_for_task(basis, source.co_task, spec.noise_sd, spec.anchor, rng)?;
    let target_index = crate::concept_space::label_token_index(source.co_task, concepts[0].sign, basis.num_tasks())?;
    Ok(TransferCase {
        source,
        query,
        target_index,
    })
}

/// Fraction of `n` transfers predicting the external query's label.
pub fn transfer_accuracy(
    params: &ModelParams,
    basis: &ConceptBasis,
    dict: &Dictionary,
    spec: &SampleSpec,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut correct = 0usize;
    for i in 0..n {
        let mut r = rng::indexed(seed, rng::STREAM_OOD + (1 << 8), i as u64);
        let case = sample_transfer_case(basis, spec, &mut r)?;
        let pred = arithmetic_transfer(params, &case.source, case.query.view(), dict).map_err(|e| e.in_sample(i))?;
        correct += usize::from(pred == case.target_index);
    }
    Ok(correct as f64 / n as f64)
}

/// Which out-of-distribution probes to run after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OodExperiment {
    DictionaryShift {
        name: String,
        spec: ShiftedDictionarySpec,
        #[serde(default = "default_count")]
        n_test: usize,
    },
    MultiConcept {
        name: String,
        tasks: Vec<usize>,
        num_demos: usize,
        #[serde(default = "default_prompts")]
        prompts: usize,
        #[serde(default = "default_residual")]
        residual_max: f64,
    },
    DemoOnly {
        name: String,
        #[serde(default = "default_prompts")]
        prompts: usize,
        /// Demonstrations per prompt; QA-ICL and ICL prompts are both used.
        num_demos: usize,
    },
    Arithmetic {
        name: String,
        #[serde(default = "default_count")]
        transfers: usize,
    },
}

fn default_count() -> usize {
    1000
}
fn default_prompts() -> usize {
    200
}
fn default_residual() -> f64 {
    0.3
}

impl OodExperiment {
    pub fn name(&self) -> &str {
        match self {
            OodExperiment::DictionaryShift { name, .. }
            | OodExperiment::MultiConcept { name, .. }
            | OodExperiment::DemoOnly { name, .. }
            | OodExperiment::Arithmetic { name, .. } => name,
        }
    }

    /// The default suite: conic shift with fresh labels and commons,
    /// two-task prompts, demo-only retrieval and transfer.
    pub fn standard_suite(num_tasks: usize, num_demos: usize) -> Vec<OodExperiment> {
        let mut v = vec![];
        let conic: Vec<Vec<f64>> = if num_tasks >= 2 {
            let mut rows = vec![vec![0.0; num_tasks]; num_tasks];
            for (k, row) in rows.iter_mut().enumerate() {
                row[k] = 1.0;
                row[(k + 1) % num_tasks] = 0.5;
            }
            rows
        } else {
            vec![vec![1.0]]
        };
        v.push(OodExperiment::DictionaryShift {
            name: "dictionary_shift".into(),
            spec: ShiftedDictionarySpec {
                task_weights: conic,
                labels: LabelSource::Fresh,
                common: CommonSource::Original,
            },
            n_test: default_count(),
        });
        if num_tasks >= 2 {
            v.push(OodExperiment::MultiConcept {
                name: "multi_concept".into(),
                tasks: vec![0, 1],
                num_demos: num_demos.max(2),
                prompts: default_prompts(),
                residual_max: default_residual(),
            });
        }
        v.push(OodExperiment::DemoOnly {
            name: "demo_only".into(),
            prompts: default_prompts(),
            num_demos: 3,
        });
        v.push(OodExperiment::Arithmetic {
            name: "arithmetic".into(),
            transfers: default_count(),
        });
        v
    }
}

/// Shared sampling settings for OOD probes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OodContext {
    pub prefix_len: usize,
    pub icl_demos: usize,
    pub qaicl_demos: usize,
    pub noise_sd: f64,
    pub anchor: f64,
    pub seed: u64,
}

impl OodContext {
    fn spec(&self, kind: SampleKind, num_demos: usize) -> SampleSpec {
        SampleSpec {
            kind,
            num_demos,
            prefix_len: self.prefix_len,
            noise_sd: self.noise_sd,
            anchor: self.anchor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoOnlyStats {
    /// Mean `cos(h0, a_{co-task})` over QA-ICL demo-only prompts.
    pub qa_demos_cos_task: f64,
    /// Same over ICL demo-only prompts.
    pub icl_demos_cos_task: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiConceptStats {
    pub prompts: usize,
    pub mean_residual: f64,
    pub fraction_below_residual_max: f64,
    pub weights_valid: bool,
    pub mean_weights: Vec<f64>,
    pub zero_one_loss: f64,
}

pub fn demo_only_stats(
    params: &ModelParams,
    basis: &ConceptBasis,
    ctx: &OodContext,
    prompts: usize,
    num_demos: usize,
) -> Result<DemoOnlyStats> {
    if prompts == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut means = [0.0f64; 2];
    for (slot, kind) in [SampleKind::QaIcl, SampleKind::Icl].into_iter().enumerate() {
        let spec = ctx.spec(kind, num_demos);
        let stream = rng::STREAM_OOD + ((2 + slot as u64) << 8);
        for i in 0..prompts {
            let prompt = spec.sample_at(basis, ctx.seed, stream, i)?;
            let demos = strip_query(&prompt, ctx.prefix_len)?;
            let cos = demo_only_task_vector(params, demos.view(), basis).map_err(|e| e.in_sample(i))?;
            means[slot] += cos.task[prompt.co_task];
        }
        means[slot] /= prompts as f64;
    }
    Ok(DemoOnlyStats {
        qa_demos_cos_task: means[0],
        icl_demos_cos_task: means[1],
    })
}

#[allow(clippy::too_many_arguments)]
pub fn multi_concept_stats(
    params: &ModelParams,
    basis: &ConceptBasis,
    dict: &Dictionary,
    ctx: &OodContext,
    tasks: &[usize],
    num_demos: usize,
    prompts: usize,
    residual_max: f64,
) -> Result<MultiConceptStats> {
    if prompts == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut below = 0usize;
    let mut residual = 0.0;
    let mut valid = true;
    let mut mean_w = vec![0.0; tasks.len()];
    let mut errors = 0usize;
    for i in 0..prompts {
        let mut r = rng::indexed(ctx.seed, rng::STREAM_OOD + (4 << 8), i as u64);
        let prompt = sample_multi_concept_prompt(basis, tasks, num_demos, ctx.noise_sd, ctx.anchor, &mut r)?;
        let hw = hybrid_vector_decomposition(params, &prompt, basis, tasks).map_err(|e| e.in_sample(i))?;
        let sum: f64 = hw.weights.iter().sum();
        valid &= hw.weights.iter().all(|&w| w >= 0.0) && (sum - 1.0).abs() < 1e-12;
        below += usize::from(hw.residual_norm <= residual_max);
        residual += hw.residual_norm;
        for (m, w) in mean_w.iter_mut().zip(&hw.weights) {
            *m += w;
        }
        let trace = model::forward(params, &prompt, dict).map_err(|e| e.in_sample(i))?;
        errors += usize::from(model::predict(&trace) != prompt.target_index);
    }
    let n = prompts as f64;
    Ok(MultiConceptStats {
        prompts,
        mean_residual: residual / n,
        fraction_below_residual_max: below as f64 / n,
        weights_valid: valid,
        mean_weights: mean_w.into_iter().map(|w| w / n).collect(),
        zero_one_loss: errors as f64 / n,
    })
}

/// Run one probe and return its JSON record.
pub fn run_experiment(
    params: &ModelParams,
    basis: &ConceptBasis,
    dict: &Dictionary,
    ctx: &OodContext,
    exp: &OodExperiment,
) -> Result<serde_json::Value> {
    Ok(match exp {
        OodExperiment::DictionaryShift { spec, n_test, .. } => {
            let shifted = build_shifted_dictionary(basis, spec, ctx.anchor, ctx.seed)?;
            let icl = evaluate_dictionary_shift(params, &shifted, ctx.spec(SampleKind::Icl, ctx.icl_demos), *n_test, ctx.seed)?;
            let qaicl = evaluate_dictionary_shift(
                params,
                &shifted,
                ctx.spec(SampleKind::QaIcl, ctx.qaicl_demos),
                *n_test,
                ctx.seed,
            )?;
            serde_json::json!({ "test01_icl": icl, "test01_qaicl": qaicl })
        }
        OodExperiment::MultiConcept {
            tasks,
            num_demos,
            prompts,
            residual_max,
            ..
        } => serde_json::to_value(multi_concept_stats(
            params,
            basis,
            dict,
            ctx,
            tasks,
            *num_demos,
            *prompts,
            *residual_max,
        )?)?,
        OodExperiment::DemoOnly { prompts, num_demos, .. } => {
            serde_json::to_value(demo_only_stats(params, basis, ctx, *prompts, *num_demos)?)?
        }
        OodExperiment::Arithmetic { transfers, .. } => {
            let icl = transfer_accuracy(params, basis, dict, &ctx.spec(SampleKind::Icl, ctx.icl_demos), *transfers, ctx.seed)?;
            let qaicl = transfer_accuracy(
                params,
                basis,
                dict,
                &ctx.spec(SampleKind::QaIcl, ctx.qaicl_demos),
                *transfers,
                ctx.seed,
            )?;
            serde_json::json!({ "accuracy_icl": icl, "accuracy_qaicl": qaicl })
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept_space::Sign;
    use crate::model::init_params;
    use proptest::prelude::*;

    fn basis() -> ConceptBasis {
        ConceptBasis::build(40, 3, 6, 5).unwrap()
    }

    fn gram_ok(b: &ConceptBasis) -> bool {
        let fams = [b.task_vectors(), b.label_vectors(), b.common_vectors()];
        let unit = fams.iter().all(|f| f.rows().into_iter().all(|r| (r.dot(&r) - 1.0).abs() < 1e-12));
        let mut ortho = true;
        for (i, f) in fams.iter().enumerate() {
            for (j, g) in fams.iter().enumerate() {
                let prod = f.dot(&g.t());
                for ((r, c), &x) in prod.indexed_iter() {
                    let same = i == j && r == c;
                    let task_pair = i == 0 && j == 0;
                    if !same && !task_pair && x.abs() > 1e-12 {
                        ortho = false;
                    }
                }
            }
        }
        unit && ortho
    }

    #[test]
    fn identity_shift_reproduces_dictionary() {
        let b = basis();
        let dict = Dictionary::build(&b, 0.1).unwrap();
        let s = build_shifted_dictionary(&b, &ShiftedDictionarySpec::identity(3), 0.1, 0).unwrap();
        assert_eq!(s.dict, dict);
        assert_eq!(s.basis, b);
    }

    #[test]
    fn conic_pair_geometry() {
        let b = ConceptBasis::build(20, 2, 4, 1).unwrap();
        let spec = ShiftedDictionarySpec {
            task_weights: vec![vec![1.0, 1.0]],
            labels: LabelSource::Fresh,
            common: CommonSource::Fresh(3),
        };
        let s = build_shifted_dictionary(&b, &spec, 0.1, 2).unwrap();
        let a = s.basis.task(0);
        assert!((a.dot(&a) - 1.0).abs() < 1e-15);
        assert!((a.dot(&b.task(0)) - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(gram_ok(&s.basis));
        // fresh labels are orthogonal to every original direction
        let orig = b.stacked();
        assert!(orig.dot(&s.basis.label(0)).iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn composite_low_level_direction_accepted() {
        let b = basis();
        let spec = ShiftedDictionarySpec {
            task_weights: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0]],
            labels: LabelSource::Combination(vec![vec![0.0, 1.0, -1.0], vec![0.0, 1.0, 1.0]]),
            common: CommonSource::Original,
        };
        let s = build_shifted_dictionary(&b, &spec, 0.1, 0).unwrap();
        let expect = (&b.label(1) - &b.label(2)) / 2f64.sqrt();
        assert!((&s.basis.label(0) - &expect).iter().all(|x| x.abs() < 1e-15));
        assert!(gram_ok(&s.basis));
    }

    #[test]
    fn infeasible_specs_rejected() {
        let b = basis();
        let mut spec = ShiftedDictionarySpec::identity(3);
        spec.task_weights[0][1] = -0.5;
        assert!(matches!(build_shifted_dictionary(&b, &spec, 0.1, 0), Err(Error::InfeasibleShift(_))));
        let mut spec = ShiftedDictionarySpec::identity(3);
        spec.task_weights.push(vec![1.0, 0.0, 0.0]);
        assert!(build_shifted_dictionary(&b, &spec, 0.1, 0).is_err());
        let mut spec = ShiftedDictionarySpec::identity(3);
        spec.common = CommonSource::Fresh(1000);
        assert!(matches!(build_shifted_dictionary(&b, &spec, 0.1, 0), Err(Error::InfeasibleShift(_))));
        let mut spec = ShiftedDictionarySpec::identity(2);
        spec.labels = LabelSource::Combination(vec![vec![1.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]);
        assert!(matches!(build_shifted_dictionary(&b, &spec, 0.1, 0), Err(Error::InfeasibleShift(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn shifted_families_pass_gram_check(
            w in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 3), 1..=3),
            fresh_labels in any::<bool>(),
            fresh_common in 0usize..8,
            seed in 0u64..1000,
        ) {
            prop_assume!(w.iter().all(|r| r.iter().any(|&x| x > 1e-3)));
            let spec = ShiftedDictionarySpec {
                task_weights: w,
                labels: if fresh_labels { LabelSource::Fresh } else { LabelSource::Original },
                common: if fresh_common == 0 { CommonSource::Original } else { CommonSource::Fresh(fresh_common) },
            };
            let s = build_shifted_dictionary(&basis(), &spec, 0.1, seed).unwrap();
            prop_assert!(gram_ok(&s.basis));
        }
    }

    #[test]
    fn untrained_model_is_near_chance_under_shift() {
        let b = ConceptBasis::build(64, 2, 10, 3).unwrap();
        let spec = ShiftedDictionarySpec {
            task_weights: vec![vec![1.0, 1.0], vec![1.0, 0.2]],
            labels: LabelSource::Fresh,
            common: CommonSource::Fresh(10),
        };
        let s = build_shifted_dictionary(&b, &spec, 0.1, 0).unwrap();
        let p = init_params(64, 1e-3, 5e-3, 0).unwrap();
        let sample = SampleSpec {
            kind: SampleKind::Icl,
            num_demos: 4,
            prefix_len: 3,
            noise_sd: 0.01,
            anchor: 0.1,
        };
        let loss = evaluate_dictionary_shift(&p, &s, sample, 400, 1).unwrap();
        assert!(loss > 0.7, "{loss}");
    }

    #[test]
    fn identity_shift_matches_in_distribution_loss() {
        let b = ConceptBasis::build(32, 2, 5, 3).unwrap();
        let dict = Dictionary::build(&b, 0.1).unwrap();
        let s = build_shifted_dictionary(&b, &ShiftedDictionarySpec::identity(2), 0.1, 0).unwrap();
        let p = init_params(32, 0.3, 0.3, 4).unwrap();
        let spec = SampleSpec {
            kind: SampleKind::Qa,
            num_demos: 0,
            prefix_len: 3,
            noise_sd: 0.01,
            anchor: 0.1,
        };
        let shifted = evaluate_dictionary_shift(&p, &s, spec, 300, 8).unwrap();
        let direct = EvalSet::build(spec, &b, 8, rng::STREAM_OOD, 300)
            .unwrap()
            .zero_one_loss(&p, &b, &dict)
            .unwrap();
        assert_eq!(shifted, direct);
    }

    #[test]
    fn single_task_prompt_has_icl_shape() {
        let b = basis();
        let mut r = rng::stream(0, 0);
        let p = sample_multi_concept_prompt(&b, &[2], 6, 0.0, 0.1, &mut r).unwrap();
        assert_eq!(p.len(), 13);
        assert_eq!(p.co_task, 2);
        assert!(p.concept_sets.iter().all(|s| s[0].task == 2));
        assert_eq!(p.kind, SampleKind::Icl);
    }

    #[test]
    fn two_task_prompts_are_balanced() {
        let b = ConceptBasis::build(40, 2, 6, 5).unwrap();
        for seed in 0..200 {
            let mut r = rng::stream(seed, 9);
            let p = sample_multi_concept_prompt(&b, &[0, 1], 40, 0.01, 0.1, &mut r).unwrap();
            for t in [0, 1] {
                let n = (0..40).filter(|&l| p.concept_sets[2 * l][0].task == t).count();
                assert!(n >= 10, "seed {seed}: task {t} appears {n} times");
            }
        }
    }

    #[test]
    fn extra_concepts_respect_cap() {
        let b = ConceptBasis::build(40, 3, 6, 5).unwrap();
        for seed in 0..50 {
            let mut r = rng::stream(seed, 3);
            let p = sample_multi_concept_prompt(&b, &[0, 2], 100, 0.01, 0.1, &mut r).unwrap();
            let extras = |parity: usize| -> usize {
                p.concept_sets
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| i % 2 == parity)
                    .map(|(_, s)| s.len() - 1)
                    .sum()
            };
            assert!(extras(0) <= 100 / EXTRA_CONCEPT_DIVISOR);
            assert!(extras(1) <= 100 / EXTRA_CONCEPT_DIVISOR);
        }
        let mut r = rng::stream(0, 0);
        assert!(sample_multi_concept_prompt(&b, &[0, 1, 2, 0], 5, 0.0, 0.1, &mut r).is_err());
        assert!(sample_multi_concept_prompt(&b, &[], 5, 0.0, 0.1, &mut r).is_err());
        assert!(sample_multi_concept_prompt(&b, &[0], 513, 0.0, 0.1, &mut r).is_err());
    }

    #[test]
    fn forced_hybrid_vector_decomposes_exactly() {
        let b = basis();
        let h = &(0.7 * &b.task(0)) + &(0.3 * &b.task(1));
        let w = hybrid_weights_of(h.view(), &b, &[0, 1]).unwrap();
        assert!((w.weights[0] - 0.7).abs() < 1e-15 && (w.weights[1] - 0.3).abs() < 1e-15);
        assert!(w.residual_norm < 1e-15);
        let single = hybrid_weights_of(b.task(2), &b, &[2]).unwrap();
        assert_eq!(single.weights, vec![1.0]);
        let off = hybrid_weights_of(b.label(0), &b, &[0, 1]).unwrap();
        assert!(off.degenerate && (off.residual_norm - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ideal_task_vector_transfers_exactly() {
        let b = basis();
        let dict = Dictionary::build(&b, 0.1).unwrap();
        for k in 0..3 {
            for y in [Sign::Pos, Sign::Neg] {
                let q = &(0.1 * &b.task(k)) + &(y.value() * &b.label(k));
                let pred = transfer_with_vector(b.task(k), q.view(), &dict).unwrap();
                assert_eq!(pred, dict.label_index(k, y).unwrap());
                // brute force over the dictionary
                let h = &b.task(k) + &q;
                let best = (0..dict.len())
                    .max_by(|&i, &j| dict.token(i).dot(&h).total_cmp(&dict.token(j).dot(&h)))
                    .unwrap();
                assert_eq!(pred, best);
            }
        }
    }

    #[test]
    fn own_query_transfer_matches_forward() {
        let b = basis();
        let dict = Dictionary::build(&b, 0.1).unwrap();
        let p = init_params(40, 0.2, 0.2, 3).unwrap();
        let mut r = rng::stream(2, 2);
        for _ in 0..20 {
            let s = datagen::sample_icl_prompt(&b, 3, 0.01, 0.1, &mut r).unwrap();
            let t = model::forward(&p, &s, &dict).unwrap();
            assert_eq!(arithmetic_transfer(&p, &s, s.query(), &dict).unwrap(), model::predict(&t));
        }
    }

    #[test]
    fn demo_only_ignores_order_of_earlier_pairs() {
        let b = basis();
        let p = init_params(40, 0.2, 0.2, 3).unwrap();
        let mut r = rng::stream(5, 5);
        let s = datagen::sample_icl_prompt(&b, 4, 0.01, 0.1, &mut r).unwrap();
        let demos = strip_query(&s, 0).unwrap();
        assert_eq!(demos.nrows(), 8);
        let mut swapped = demos.clone();
        for i in 0..2 {
            swapped.row_mut(i).assign(&demos.row(i + 4));
            swapped.row_mut(i + 4).assign(&demos.row(i));
        }
        let a = demo_only_task_vector(&p, demos.view(), &b).unwrap();
        let c = demo_only_task_vector(&p, swapped.view(), &b).unwrap();
        for (x, y) in a.task.iter().zip(&c.task) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn strip_query_lengths() {
        let b = basis();
        let mut r = rng::stream(1, 1);
        let qaicl = datagen::sample_qa_icl_prompt(&b, 2, 3, 0.0, 0.1, &mut r).unwrap();
        let demos = strip_query(&qaicl, 3).unwrap();
        assert_eq!(demos.nrows(), 2 * 5);
        // ends on the noiseless answer of the last demonstration
        let last = demos.row(demos.nrows() - 1);
        let expect = qaicl.target_vector(&b);
        let _ = expect;
        assert!((last.dot(&last) - 2.0).abs() < 1e-12);
        let qa = datagen::sample_qa_sentence(&b, 3, 0.0, 0.1, &mut r).unwrap();
        assert!(strip_query(&qa, 3).is_err());
    }

    #[test]
    fn experiment_list_serde() {
        let suite = OodExperiment::standard_suite(2, 10);
        let s = serde_json::to_string(&suite).unwrap();
        let back: Vec<OodExperiment> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, suite);
        assert_eq!(suite.iter().map(|e| e.name()).collect::<Vec<_>>(), ["dictionary_shift", "multi_concept", "demo_only", "arithmetic"]);
    }
}
