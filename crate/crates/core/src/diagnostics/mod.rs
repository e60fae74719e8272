//! Test losses, task-vector cosines, projection probes, theory-condition
//! checks, surrogate-flow bounds, and trajectory assertions.

pub mod conditions;
pub mod flows;
pub mod trajectory;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::concept_space::{ConceptBasis, Dictionary};
use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::model::{self, ModelParams, MIN_NORM};

/// Fraction of samples whose argmax token differs from the target.
pub fn zero_one_loss(params: &ModelParams, samples: &[Sample], dict: &Dictionary) -> Result<f64> {
    let refs: Vec<&Sample> = samples.iter().collect();
    zero_one_loss_refs(params, &refs, dict)
}

pub fn zero_one_loss_refs(params: &ModelParams, samples: &[&Sample], dict: &Dictionary) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(count_errors(params, samples, dict)? as f64 / samples.len() as f64)
}

pub(crate) fn count_errors(params: &ModelParams, samples: &[&Sample], dict: &Dictionary) -> Result<usize> {
    let preds = model::predict_batch(params, samples, dict)?;
    Ok(preds
        .iter()
        .zip(samples)
        .filter(|(&p, s)| p != s.target_index)
        .count())
}

/// Cosine of one vector with every basis direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisCosines {
    pub task: Vec<f64>,
    pub label: Vec<f64>,
    pub common: Vec<f64>,
}

impl BasisCosines {
    /// Largest `|cos|` over every direction except task `k`.
    pub fn max_abs_excluding_task(&self, k: usize) -> f64 {
        self.task
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .map(|(_, c)| c.abs())
            .chain(self.label.iter().chain(self.common.iter()).map(|c| c.abs()))
            .fold(0.0, f64::max)
    }

    pub fn max_abs_label(&self) -> f64 {
        self.label.iter().fold(0.0f64, |m, c| m.max(c.abs()))
    }
}

pub fn cosines_of(v: ArrayView1<'_, f64>, basis: &ConceptBasis) -> Result<BasisCosines> {
    let norm = v.dot(&v).sqrt();
    if !(norm >= MIN_NORM) {
        return Err(Error::DegenerateNorm { norm });
    }
    // basis vectors are unit norm
    let fam = |m: ndarray::ArrayView2<'_, f64>| m.dot(&v).mapv(|x| x / norm).to_vec();
    Ok(BasisCosines {
        task: fam(basis.task_vectors()),
        label: fam(basis.label_vectors()),
        common: fam(basis.common_vectors()),
    })
}

/// `cos(h0, v)` for every basis vector `v`.
pub fn h0_cosines(params: &ModelParams, sample: &Sample, basis: &ConceptBasis) -> Result<BasisCosines> {
    let (_, _, h0) = model::attend(params, sample.tokens.view())?;
    cosines_of(h0.view(), basis)
}

/// Bilinear probes over a list of latent directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    /// Row/column labels: `a_k`, then `b_k`, then sampled `nu_m`.
    pub labels: Vec<String>,
    /// `value[i][j] = u_i^T W_V u_j`.
    pub value: Vec<Vec<f64>>,
    /// `key_query[i][j] = u_i^T W_K^T W_Q u_j`, the attention score of key
    /// `u_i` under query `u_j`.
    pub key_query: Vec<Vec<f64>>,
    pub num_tasks: usize,
}

impl ProjectionReport {
    pub fn task_value(&self, k: usize) -> f64 {
        self.value[k][k]
    }

    pub fn label_value(&self, k: usize) -> f64 {
        let i = self.num_tasks + k;
        self.value[i][i]
    }

    pub fn task_key_query(&self, k: usize) -> f64 {
        self.key_query[k][k]
    }

    /// Largest `|u^T W_V u|` over label directions.
    pub fn max_abs_label_value(&self) -> f64 {
        (0..self.num_tasks).map(|k| self.label_value(k).abs()).fold(0.0, f64::max)
    }

    pub fn min_task_value(&self) -> f64 {
        (0..self.num_tasks).map(|k| self.task_value(k)).fold(f64::INFINITY, f64::min)
    }

    /// Largest `|entry|` excluding the `a_k`-diagonal of a table.
    fn max_off_task_diagonal(table: &[Vec<f64>], num_tasks: usize) -> f64 {
        let mut m = 0.0f64;
        for (i, row) in table.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                if !(i == j && i < num_tasks) {
                    m = m.max(x.abs());
                }
            }
        }
        m
    }

    pub fn value_cross_max(&self) -> f64 {
        Self::max_off_task_diagonal(&self.value, self.num_tasks)
    }

    pub fn key_query_cross_max(&self) -> f64 {
        Self::max_off_task_diagonal(&self.key_query, self.num_tasks)
    }
}

/// Projection tables over every `a_k`, `b_k` and the first `num_common`
/// common directions.
pub fn projection_probe(params: &ModelParams, basis: &ConceptBasis, num_common: usize) -> ProjectionReport {
    let k = basis.num_tasks();
    let nc = num_common.min(basis.num_common());
    let mut labels: Vec<String> = (0..k).map(|i| format!("a_{i}")).collect();
    labels.extend((0..k).map(|i| format!("b_{i}")));
    labels.extend((0..nc).map(|i| format!("nu_{i}")));
    let mut dirs = Array2::zeros((2 * k + nc, basis.dim()));
    for i in 0..k {
        dirs.row_mut(i).assign(&basis.task(i));
        dirs.row_mut(k + i).assign(&basis.label(i));
    }
    for i in 0..nc {
        dirs.row_mut(2 * k + i).assign(&basis.common(i));
    }
    let value = dirs.dot(&params.w_v.dot(&dirs.t()));
    let keys = params.w_k.dot(&dirs.t());
    let queries = params.w_q.dot(&dirs.t());
    let key_query = keys.t().dot(&queries);
    let rows = |m: Array2<f64>| m.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
    ProjectionReport {
        labels,
        value: rows(value),
        key_query: rows(key_query),
        num_tasks: k,
    }
}

/// Task-vector statistics over a probe set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    /// Mean `cos(h0, a_{co-task})`.
    pub cos_task: f64,
    /// Mean over samples of the largest `|cos|` with any other basis vector.
    pub cos_other_max: f64,
    /// Mean over samples of `max_k |cos(h0, b_k)|`.
    pub cos_b_max: f64,
    /// Mean over samples of the largest attention weight.
    pub attn_max: f64,
}

pub fn probe_statistics(
    params: &ModelParams,
    samples: &[&Sample],
    basis: &ConceptBasis,
    dict: &Dictionary,
) -> Result<ProbeStats> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut acc = [0.0f64; 4];
    for chunk in samples.chunks(256) {
        let fwd = model::forward_batch(params, chunk, dict)?;
        for (n, s) in chunk.iter().enumerate() {
            let c = cosines_of(fwd.h0.column(n), basis)?;
            acc[0] += c.task[s.co_task];
            acc[1] += c.max_abs_excluding_task(s.co_task);
            acc[2] += c.max_abs_label();
            acc[3] += fwd.pi[n].fold(0.0f64, |m, &x| m.max(x));
        }
    }
    let n = samples.len() as f64;
    Ok(ProbeStats {
        cos_task: acc[0] / n,
        cos_other_max: acc[1] / n,
        cos_b_max: acc[2] / n,
        attn_max: acc[3] / n,
    })
}

/// Per-sample cosine records, for criteria that look at distributions
/// rather than means.
pub fn sample_cosines(params: &ModelParams, samples: &[&Sample], basis: &ConceptBasis) -> Result<Vec<BasisCosines>> {
    samples
        .iter()
        .enumerate()
        .map(|(n, s)| h0_cosines(params, s, basis).map_err(|e| e.in_sample(n)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{sample_icl_prompt, SampleSpec, SampleKind};
    use crate::model::init_params;
    use crate::rng;

    #[test]
    fn forced_task_vector_cosines() {
        let b = ConceptBasis::build(20, 2, 3, 0).unwrap();
        let c = cosines_of(b.task(1), &b).unwrap();
        assert_eq!(c.task, vec![0.0, 1.0]);
        assert!(c.label.iter().chain(c.common.iter()).all(|&x| x == 0.0));
        assert_eq!(c.max_abs_excluding_task(1), 0.0);
    }

    #[test]
    fn zero_params_give_zero_tables() {
        let b = ConceptBasis::build(20, 2, 3, 0).unwrap();
        let r = projection_probe(&ModelParams::zeros(20), &b, 2);
        assert_eq!(r.labels.len(), 6);
        assert!(r.value.iter().flatten().chain(r.key_query.iter().flatten()).all(|&x| x == 0.0));
    }

    #[test]
    fn projection_entries_by_hand() {
        let b = ConceptBasis::build(12, 2, 2, 4).unwrap();
        let p = init_params(12, 0.5, 0.5, 4).unwrap();
        let r = projection_probe(&p, &b, 2);
        let a0 = b.task(0);
        let b1 = b.label(1);
        assert!((r.value[0][3] - a0.dot(&p.w_v.dot(&b1))).abs() < 1e-14);
        let kq = p.w_k.dot(&b1).dot(&p.w_q.dot(&a0));
        assert!((r.key_query[3][0] - kq).abs() < 1e-14);
        assert!((r.task_key_query(1) - p.w_k.dot(&b.task(1)).dot(&p.w_q.dot(&b.task(1)))).abs() < 1e-14);
    }

    #[test]
    fn init_value_diagonal_is_small() {
        let sigma1 = 5e-3;
        let mut within = 0;
        for seed in 0..200 {
            let b = ConceptBasis::build(64, 2, 4, seed).unwrap();
            let p = init_params(64, 1e-3, sigma1, seed).unwrap();
            let r = projection_probe(&p, &b, 0);
            if (0..2).all(|k| r.task_value(k).abs() <= 5.0 * sigma1) {
                within += 1;
            }
        }
        assert!(within as f64 / 200.0 >= 0.99);
    }

    #[test]
    fn random_init_is_near_chance() {
        let b = ConceptBasis::build(256, 2, 20, 1).unwrap();
        let dict = Dictionary::build(&b, 0.1).unwrap();
        let p = init_params(256, 1e-3, 5e-3, 1).unwrap();
        let spec = SampleSpec {
            kind: SampleKind::Icl,
            num_demos: 5,
            prefix_len: 0,
            noise_sd: 0.01,
            anchor: 0.1,
        };
        let samples = spec.generate(&b, 1, 0, 1000).unwrap();
        let loss = zero_one_loss(&p, &samples, &dict).unwrap();
        assert!(loss >= 0.9, "loss {loss}");
        assert!(zero_one_loss(&p, &[], &dict).is_err());
    }

    #[test]
    fn ideal_probe_stats() {
        let b = ConceptBasis::build(16, 1, 2, 2).unwrap();
        let dict = Dictionary::build(&b, 0.1).unwrap();
        // W_V projecting onto a_0 turns every h0 into a multiple of a_0
        let a = b.task(0);
        let mut p = ModelParams::zeros(16);
        for i in 0..16 {
            for j in 0..16 {
                p.w_v[[i, j]] = a[i] * a[j];
            }
        }
        let mut r = rng::stream(0, 0);
        let s = sample_icl_prompt(&b, 3, 0.0, 0.1, &mut r).unwrap();
        let stats = probe_statistics(&p, &[&s], &b, &dict).unwrap();
        assert!((stats.cos_task - 1.0).abs() < 1e-12);
        assert!(stats.cos_other_max < 1e-12);
        assert!((stats.attn_max - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(zero_one_loss(&p, &[s], &dict).unwrap(), 0.0);
    }
}
