//! Samplers for word-label ICL prompts, QA sentences and QA-ICL prompts.
//!
//! Tokens are stored one position per row (`L x d`); the last row is the
//! query the model attends from.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concept_space::{label_token_index, ConceptBasis, Sign};
use crate::error::{Error, Result};
use crate::rng::{self, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleKind {
    #[serde(rename = "ICL")]
    Icl,
    #[serde(rename = "QA")]
    Qa,
    #[serde(rename = "QA_ICL")]
    QaIcl,
}

impl SampleKind {
    pub const ALL: [SampleKind; 3] = [SampleKind::Icl, SampleKind::Qa, SampleKind::QaIcl];

    pub fn tag(self) -> &'static str {
        match self {
            SampleKind::Icl => "icl",
            SampleKind::Qa => "qa",
            SampleKind::QaIcl => "qaicl",
        }
    }
}

impl std::fmt::Display for SampleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SampleKind::Icl => "ICL",
            SampleKind::Qa => "QA",
            SampleKind::QaIcl => "QA_ICL",
        })
    }
}

/// One task concept active at a position, with its low-level sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveConcept {
    pub task: usize,
    pub sign: Sign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `L x d`; row `L-1` is the query.
    pub tokens: Array2<f64>,
    pub kind: SampleKind,
    pub co_task: usize,
    pub label_sign: Sign,
    pub target_index: usize,
    /// Positions holding a noisy task vector in QA-style prefixes.
    pub anchor_positions: Vec<usize>,
    /// Active concepts per position. Common-token and anchor positions are empty.
    pub concept_sets: Vec<Vec<ActiveConcept>>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn query(&self) -> ArrayView1<'_, f64> {
        self.tokens.row(self.tokens.nrows() - 1)
    }

    /// Noiseless answer `a_k + y b_k` for the query.
    pub fn target_vector(&self, basis: &ConceptBasis) -> Array1<f64> {
        &basis.task(self.co_task) + &(&basis.label(self.co_task) * self.label_sign.value())
    }
}

/// Everything needed to draw samples of one kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub kind: SampleKind,
    /// Demonstration pairs `J` (ICL and QA-ICL).
    pub num_demos: usize,
    /// Prefix length `M` (QA and QA-ICL).
    pub prefix_len: usize,
    pub noise_sd: f64,
    pub anchor: f64,
}

impl SampleSpec {
    /// Number of model input positions.
    pub fn seq_len(&self) -> usize {
        match self.kind {
            SampleKind::Icl => 2 * self.num_demos + 1,
            SampleKind::Qa => self.prefix_len + 1,
            SampleKind::QaIcl => (self.num_demos + 1) * (self.prefix_len + 2) - 1,
        }
    }

    pub fn sample(&self, basis: &ConceptBasis, rng: &mut SimRng) -> Result<Sample> {
        match self.kind {
            SampleKind::Icl => sample_icl_prompt(basis, self.num_demos, self.noise_sd, self.anchor, rng),
            SampleKind::Qa => sample_qa_sentence(basis, self.prefix_len, self.noise_sd, self.anchor, rng),
            SampleKind::QaIcl => {
                sample_qa_icl_prompt(basis, self.num_demos, self.prefix_len, self.noise_sd, self.anchor, rng)
            }
        }
    }

    /// Sample `index` of a virtual dataset keyed by `(seed, stream)`.
    /// Each index has its own random stream, so any subset can be
    /// regenerated independently and in any order.
    pub fn sample_at(&self, basis: &ConceptBasis, seed: u64, stream: u64, index: usize) -> Result<Sample> {
        let mut rng = rng::indexed(seed, stream, index as u64);
        self.sample(basis, &mut rng)
    }

    pub fn generate(&self, basis: &ConceptBasis, seed: u64, stream: u64, n: usize) -> Result<Vec<Sample>> {
        self.generate_range(basis, seed, stream, 0..n)
    }

    /// Items `range` of the virtual dataset, generated in parallel.
    pub fn generate_range(
        &self,
        basis: &ConceptBasis,
        seed: u64,
        stream: u64,
        range: std::ops::Range<usize>,
    ) -> Result<Vec<Sample>> {
        range
            .into_par_iter()
            .map(|i| self.sample_at(basis, seed, stream, i))
            .collect()
    }
}

/// `sum_k (x_a a_k + y_k b_k) + xi`.
pub fn make_word<R: Rng + ?Sized>(
    basis: &ConceptBasis,
    concepts: &[ActiveConcept],
    anchor: f64,
    noise_sd: f64,
    rng: &mut R,
) -> Result<Array1<f64>> {
    combine(basis, concepts, anchor, noise_sd, rng)
}

/// `sum_k (a_k + y_k b_k) + xi`.
pub fn make_label<R: Rng + ?Sized>(
    basis: &ConceptBasis,
    concepts: &[ActiveConcept],
    noise_sd: f64,
    rng: &mut R,
) -> Result<Array1<f64>> {
    combine(basis, concepts, 1.0, noise_sd, rng)
}

fn combine<R: Rng + ?Sized>(
    basis: &ConceptBasis,
    concepts: &[ActiveConcept],
    task_coef: f64,
    noise_sd: f64,
    rng: &mut R,
) -> Result<Array1<f64>> {
    if concepts.is_empty() {
        return Err(Error::InvalidArgument("a word or label needs at least one concept".into()));
    }
    let mut v = rng::gaussian_vector(basis.dim(), noise_sd, rng);
    for c in concepts {
        basis.check_task(c.task)?;
        v.scaled_add(task_coef, &basis.task(c.task));
        v.scaled_add(c.sign.value(), &basis.label(c.task));
    }
    Ok(v)
}

pub(crate) fn random_sign_of<R: Rng + ?Sized>(rng: &mut R) -> Sign {
    if rng.random_bool(0.5) {
        Sign::Pos
    } else {
        Sign::Neg
    }
}

/// Co-task first, then every other task independently with probability `1/K`.
fn concept_set<R: Rng + ?Sized>(co_task: usize, num_tasks: usize, rng: &mut R) -> Vec<usize> {
    let mut set = vec![co_task];
    let p = 1.0 / num_tasks as f64;
    for i in 0..num_tasks {
        if i != co_task && rng.random_bool(p) {
            set.push(i);
        }
    }
    set
}

/// Word and label concept sets for one demonstration pair. A concept active
/// in both members carries the same sign `y_{k,l}`.
fn pair_concepts<R: Rng + ?Sized>(
    co_task: usize,
    num_tasks: usize,
    rng: &mut R,
) -> (Vec<ActiveConcept>, Vec<ActiveConcept>) {
    let xs = concept_set(co_task, num_tasks, rng);
    let ys = concept_set(co_task, num_tasks, rng);
    let signs: Vec<Sign> = (0..num_tasks).map(|_| random_sign_of(rng)).collect();
    let tag = |set: Vec<usize>| {
        set.into_iter()
            .map(|task| ActiveConcept { task, sign: signs[task] })
            .collect::<Vec<_>>()
    };
    (tag(xs), tag(ys))
}

fn word_concepts<R: Rng + ?Sized>(co_task: usize, num_tasks: usize, rng: &mut R) -> Vec<ActiveConcept> {
    concept_set(co_task, num_tasks, rng)
        .into_iter()
        .map(|task| ActiveConcept {
            task,
            sign: random_sign_of(rng),
        })
        .collect()
}

fn stack_rows(rows: &[Array1<f64>], d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    out
}

pub(crate) fn finish(
    basis: &ConceptBasis,
    rows: Vec<Array1<f64>>,
    kind: SampleKind,
    co_task: usize,
    label_sign: Sign,
    anchor_positions: Vec<usize>,
    concept_sets: Vec<Vec<ActiveConcept>>,
) -> Result<Sample> {
    Ok(Sample {
        tokens: stack_rows(&rows, basis.dim()),
        kind,
        co_task,
        label_sign,
        target_index: label_token_index(co_task, label_sign, basis.num_tasks())?,
        anchor_positions,
        concept_sets,
    })
}

/// A standalone word for `co_task`; other tasks join with probability
/// `1/K`, each with its own sign. The first concept is the co-task.
pub fn sample_word_for_task<R: Rng + ?Sized>(
    basis: &ConceptBasis,
    co_task: usize,
    noise_sd: f64,
    anchor: f64,
    rng: &mut R,
) -> Result<(Array1<f64>, Vec<ActiveConcept>)> {
    basis.check_task(co_task)?;
    let concepts = word_concepts(co_task, basis.num_tasks(), rng);
    Ok((make_word(basis, &concepts, anchor, noise_sd, rng)?, concepts))
}

/// `x_1, y_1, ..., x_J, y_J, x_{J+1}` with a uniformly drawn co-task.
pub fn sample_icl_prompt(
    basis: &ConceptBasis,
    num_demos: usize,
    noise_sd: f64,
    anchor: f64,
    rng: &mut SimRng,
) -> Result<Sample> {
    let co_task = rng.random_range(0..basis.num_tasks());
    sample_icl_prompt_for_task(basis, co_task, num_demos, noise_sd, anchor, rng)
}

pub fn sample_icl_prompt_for_task(
    basis: &ConceptBasis,
    co_task: usize,
    num_demos: usize,
    noise_sd: f64,
    anchor: f64,
    rng: &mut SimRng,
) -> Result<Sample> {
    if num_demos == 0 {
        return Err(Error::InvalidArgument("ICL prompts need at least one demonstration".into()));
    }
    basis.check_task(co_task)?;
    let k = basis.num_tasks();
    let mut rows = Vec::with_capacity(2 * num_demos + 1);
    let mut sets = Vec::with_capacity(2 * num_demos + 1);
    for _ in 0..num_demos {
        let (xs, ys) = pair_concepts(co_task, k, rng);
        rows.push(make_word(basis, &xs, anchor, noise_sd, rng)?);
        rows.push(make_label(basis, &ys, noise_sd, rng)?);
        sets.push(xs);
        sets.push(ys);
    }
    let query = word_concepts(co_task, k, rng);
    rows.push(make_word(basis, &query, anchor, noise_sd, rng)?);
    let label_sign = query[0].sign;
    sets.push(query);
    finish(basis, rows, SampleKind::Icl, co_task, label_sign, Vec::new(), sets)
}

struct QaSegment {
    rows: Vec<Array1<f64>>,
    sets: Vec<Vec<ActiveConcept>>,
    anchor_offset: usize,
    sign: Sign,
}

fn qa_segment(
    basis: &ConceptBasis,
    co_task: usize,
    prefix_len: usize,
    noise_sd: f64,
    anchor: f64,
    rng: &mut SimRng,
) -> Result<QaSegment> {
    if prefix_len == 0 {
        return Err(Error::InvalidArgument("QA sentences need a prefix of at least one token".into()));
    }
    if basis.num_common() == 0 {
        return Err(Error::InvalidArgument("QA sentences need at least one common token".into()));
    }
    let d = basis.dim();
    let anchor_offset = rng.random_range(0..prefix_len);
    let mut rows = Vec::with_capacity(prefix_len + 1);
    let mut sets = Vec::with_capacity(prefix_len + 1);
    for m in 0..prefix_len {
        let base = if m == anchor_offset {
            basis.task(co_task)
        } else {
            basis.common(rng.random_range(0..basis.num_common()))
        };
        rows.push(&rng::gaussian_vector(d, noise_sd, rng) + &base);
        sets.push(Vec::new());
    }
    let word = word_concepts(co_task, basis.num_tasks(), rng);
    rows.push(make_word(basis, &word, anchor, noise_sd, rng)?);
    let sign = word[0].sign;
    sets.push(word);
    Ok(QaSegment {
        rows,
        sets,
        anchor_offset,
        sign,
    })
}

/// `M` prefix tokens (common tokens with one noisy task vector at a uniform
/// position), then the word. The answer is the target, not an input.
pub fn sample_qa_sentence(
    basis: &ConceptBasis,
    prefix_len: usize,
    noise_sd: f64,
    anchor: f64,
    rng: &mut SimRng,
) -> Result<Sample> {
    let co_task = rng.random_range(0..basis.num_tasks());
    let seg = qa_segment(basis, co_task, prefix_len, noise_sd, anchor, rng)?;
    finish(
        basis,
        seg.rows,
        SampleKind::Qa,
        co_task,
        seg.sign,
        vec![seg.anchor_offset],
        seg.sets,
    )
}

/// `J` complete QA segments (prefix, word, noiseless answer) followed by a
/// query segment whose answer is withheld.
pub fn sample_qa_icl_prompt(
    basis: &ConceptBasis,
    num_demos: usize,
    prefix_len: usize,
    noise_sd: f64,
    anchor: f64,
    rng: &mut SimRng,
) -> Result<Sample> {
    if num_demos == 0 {
        return Err(Error::InvalidArgument("QA-ICL prompts need at least one demonstration".into()));
    }
    let co_task = rng.random_range(0..basis.num_tasks());
    let mut rows = Vec::with_capacity((num_demos + 1) * (prefix_len + 2));
    let mut sets = Vec::with_capacity(rows.capacity());
    let mut anchors = Vec::with_capacity(num_demos + 1);
    for j in 0..=num_demos {
        let seg = qa_segment(basis, co_task, prefix_len, noise_sd, anchor, rng)?;
        anchors.push(rows.len() + seg.anchor_offset);
        rows.extend(seg.rows);
        sets.extend(seg.sets);
        if j == num_demos {
            return finish(basis, rows, SampleKind::QaIcl, co_task, seg.sign, anchors, sets);
        }
        let answer = ActiveConcept {
            task: co_task,
            sign: seg.sign,
        };
        rows.push(make_label(basis, &[answer], 0.0, rng)?);
        sets.push(vec![answer]);
    }
    unreachable!("loop returns on the query segment")
}
