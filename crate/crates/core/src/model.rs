//! Single-layer softmax attention with layer-normalized output, residual
//! query, and readout against the fixed dictionary.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::concept_space::Dictionary;
use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::rng;

/// Attention outputs with norm below this cannot be layer-normalized.
pub const MIN_NORM: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w_k: Array2<f64>,
    pub w_q: Array2<f64>,
    pub w_v: Array2<f64>,
}

impl ModelParams {
    pub fn zeros(d: usize) -> Self {
        ModelParams {
            w_k: Array2::zeros((d, d)),
            w_q: Array2::zeros((d, d)),
            w_v: Array2::zeros((d, d)),
        }
    }

    pub fn from_matrices(w_k: Array2<f64>, w_q: Array2<f64>, w_v: Array2<f64>) -> Result<Self> {
        let d = w_k.nrows();
        for (name, m) in [("W_K", &w_k), ("W_Q", &w_q), ("W_V", &w_v)] {
            if m.dim() != (d, d) {
                return Err(Error::InvalidArgument(format!(
                    "{name} has shape {:?}, expected ({d}, {d})",
                    m.dim()
                )));
            }
            if !m.iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} has non-finite entries")));
            }
        }
        Ok(ModelParams { w_k, w_q, w_v })
    }

    pub fn dim(&self) -> usize {
        self.w_k.nrows()
    }

    pub fn is_finite(&self) -> bool {
        [&self.w_k, &self.w_q, &self.w_v]
            .iter()
            .all(|m| m.iter().all(|x| x.is_finite()))
    }
}

/// `W_Q, W_K ~ N(0, sigma0^2)` and `W_V ~ N(0, sigma1^2)` entrywise.
pub fn init_params(d: usize, sigma0: f64, sigma1: f64, seed: u64) -> Result<ModelParams> {
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    for (name, s) in [("sigma0", sigma0), ("sigma1", sigma1)] {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::InvalidArgument(format!("{name} must be a finite non-negative number, got {s}")));
        }
    }
    let mut r = rng::stream(seed, rng::STREAM_INIT);
    let w_q = rng::gaussian_matrix(d, d, sigma0, &mut r);
    let w_k = rng::gaussian_matrix(d, d, sigma0, &mut r);
    let w_v = rng::gaussian_matrix(d, d, sigma1, &mut r);
    Ok(ModelParams { w_k, w_q, w_v })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Attention over the `L-1` key positions.
    pub pi: Array1<f64>,
    /// `S pi`, the attention-pooled input.
    pub pooled: Array1<f64>,
    pub h0: Array1<f64>,
    pub h: Array1<f64>,
    pub logits: Array1<f64>,
    pub omega: Array1<f64>,
}

/// Max-subtracted softmax.
pub fn softmax(x: ArrayView1<'_, f64>) -> Array1<f64> {
    let m = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut e = x.mapv(|v| (v - m).exp());
    let z = e.sum();
    e /= z;
    e
}

pub fn log_sum_exp(x: ArrayView1<'_, f64>) -> f64 {
    let m = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + x.fold(0.0, |acc, &v| acc + (v - m).exp()).ln()
}

/// Lowest index of the maximum.
pub fn argmax(x: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn check_tokens(params: &ModelParams, tokens: ArrayView2<'_, f64>) -> Result<()> {
    if tokens.nrows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "attention needs at least one key before the query (L = {})",
            tokens.nrows()
        )));
    }
    if tokens.ncols() != params.dim() {
        return Err(Error::InvalidArgument(format!(
            "token dimension {} does not match model dimension {}",
            tokens.ncols(),
            params.dim()
        )));
    }
    Ok(())
}

/// Attention logits `(W_K t_j)^T (W_Q t_L)` for every key `j < L`.
pub fn attention_scores(params: &ModelParams, tokens: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    check_tokens(params, tokens)?;
    let l = tokens.nrows();
    let query = params.w_q.dot(&tokens.row(l - 1));
    let kq = params.w_k.t().dot(&query);
    Ok(tokens.slice(s![..l - 1, ..]).dot(&kq))
}

pub fn attention_weights(params: &ModelParams, sample: &Sample) -> Result<Array1<f64>> {
    Ok(softmax(attention_scores(params, sample.tokens.view())?.view()))
}

pub struct Readout {
    pub h: Array1<f64>,
    pub logits: Array1<f64>,
    pub omega: Array1<f64>,
}

/// `h = h0/|h0| + query`, logits `U h`, and their softmax.
pub fn readout(h0: ArrayView1<'_, f64>, query: ArrayView1<'_, f64>, dict: &Dictionary) -> Result<Readout> {
    let norm = h0.dot(&h0).sqrt();
    if !(norm >= MIN_NORM) {
        return Err(Error::DegenerateNorm { norm });
    }
    let h = &h0 / norm + query;
    let logits = dict.tokens().dot(&h);
    let omega = softmax(logits.view());
    Ok(Readout { h, logits, omega })
}

/// Attention weights, pooled input `S pi`, and `h0 = W_V S pi`.
pub fn attend(
    params: &ModelParams,
    tokens: ArrayView2<'_, f64>,
) -> Result<(Array1<f64>, Array1<f64>, Array1<f64>)> {
    let scores = attention_scores(params, tokens)?;
    let pi = softmax(scores.view());
    let l = tokens.nrows();
    let pooled = tokens.slice(s![..l - 1, ..]).t().dot(&pi);
    let h0 = params.w_v.dot(&pooled);
    Ok((pi, pooled, h0))
}

pub fn forward_tokens(params: &ModelParams, tokens: ArrayView2<'_, f64>, dict: &Dictionary) -> Result<ForwardTrace> {
    let (pi, pooled, h0) = attend(params, tokens)?;
    let l = tokens.nrows();
    let Readout { h, logits, omega } = readout(h0.view(), tokens.row(l - 1), dict)?;
    Ok(ForwardTrace {
        pi,
        pooled,
        h0,
        h,
        logits,
        omega,
    })
}

pub fn forward(params: &ModelParams, sample: &Sample, dict: &Dictionary) -> Result<ForwardTrace> {
    forward_tokens(params, sample.tokens.view(), dict)
}

pub fn predict(trace: &ForwardTrace) -> usize {
    argmax(trace.logits.view())
}

/// `-log omega_target`, evaluated from logits via log-sum-exp.
pub fn cross_entropy(trace: &ForwardTrace, target: usize) -> Result<f64> {
    if target >= trace.logits.len() {
        return Err(Error::InvalidArgument(format!(
            "target index {target} outside dictionary of {} tokens",
            trace.logits.len()
        )));
    }
    Ok(log_sum_exp(trace.logits.view()) - trace.logits[target])
}

/// Forward quantities for a batch, one column per sample.
#[derive(Debug, Clone)]
pub struct BatchForward {
    /// Queries `t_L`, `d x N`.
    pub queries: Array2<f64>,
    /// `W_Q t_L`, `d x N`.
    pub q: Array2<f64>,
    pub pi: Vec<Array1<f64>>,
    /// `S pi`, `d x N`.
    pub pooled: Array2<f64>,
    /// `h0 = W_V S pi`, `d x N`.
    pub h0: Array2<f64>,
    pub norms: Array1<f64>,
    /// `|U| x N`.
    pub logits: Array2<f64>,
}

pub(crate) fn stack_queries(samples: &[&Sample], d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((d, samples.len()));
    for (n, s) in samples.iter().enumerate() {
        out.column_mut(n).assign(&s.query());
    }
    out
}

/// Same computation as [`forward`] for many samples, with the shared
/// matrix products done as GEMMs.
pub fn forward_batch(params: &ModelParams, samples: &[&Sample], dict: &Dictionary) -> Result<BatchForward> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let d = params.dim();
    for (n, s) in samples.iter().enumerate() {
        check_tokens(params, s.tokens.view()).map_err(|e| e.in_sample(n))?;
    }
    let queries = stack_queries(samples, d);
    let q = params.w_q.dot(&queries);
    let kq = params.w_k.t().dot(&q);
    let per: Vec<(Array1<f64>, Array1<f64>)> = samples
        .par_iter()
        .enumerate()
        .map(|(n, s)| {
            let l = s.tokens.nrows();
            let keys = s.tokens.slice(s![..l - 1, ..]);
            let pi = softmax(keys.dot(&kq.column(n)).view());
            let pooled = keys.t().dot(&pi);
            (pi, pooled)
        })
        .collect();
    let mut pooled = Array2::zeros((d, samples.len()));
    let mut pi = Vec::with_capacity(samples.len());
    for (n, (p, sp)) in per.into_iter().enumerate() {
        pooled.column_mut(n).assign(&sp);
        pi.push(p);
    }
    let h0 = params.w_v.dot(&pooled);
    let norms = h0.map_axis(Axis(0), |c| c.dot(&c).sqrt());
    if let Some((n, &norm)) = norms.iter().enumerate().find(|(_, &x)| !(x >= MIN_NORM)) {
        return Err(Error::DegenerateNorm { norm }.in_sample(n));
    }
    let mut h = h0.clone();
    Zip::from(h.columns_mut())
        .and(&norms)
        .and(queries.columns())
        .for_each(|mut col, &norm, query| {
            col /= norm;
            col += &query;
        });
    let logits = dict.tokens().dot(&h);
    Ok(BatchForward {
        queries,
        q,
        pi,
        pooled,
        h0,
        norms,
        logits,
    })
}

/// Argmax predictions for many samples, evaluated in chunks.
pub fn predict_batch(params: &ModelParams, samples: &[&Sample], dict: &Dictionary) -> Result<Vec<usize>> {
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(samples.len());
    for (c, chunk) in samples.chunks(CHUNK).enumerate() {
        let fwd = forward_batch(params, chunk, dict).map_err(|e| offset_sample(e, c * CHUNK))?;
        out.extend(fwd.logits.columns().into_iter().map(argmax));
    }
    Ok(out)
}

pub(crate) fn offset_sample(e: Error, offset: usize) -> Error {
    match e {
        Error::InSample { sample, source } => Error::InSample {
            sample: sample + offset,
            source,
        },
        other => other,
    }
}
