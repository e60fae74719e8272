//! Closed-form cross-entropy gradients in `W_K`, `W_Q`, `W_V` and a
//! central-difference oracle.
//!
//! Per sample, with `r = u_y - U^T omega`, `v = W_V S pi` and
//! `p = (I - v v^T/|v|^2) r / |v|`:
//!
//! ```text
//! g_V = -p (S pi)^T
//! iota_j = pi_j (t_j - S pi)^T W_V^T p
//! g_K = -(W_Q t_L) (sum_j iota_j t_j)^T
//! g_Q = -(W_K sum_j iota_j t_j) t_L^T
//! ```

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};
use rayon::prelude::*;

use crate::concept_space::Dictionary;
use crate::datagen::Sample;
use crate::dd::Dd;
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct GradTriple {
    pub g_k: Array2<f64>,
    pub g_q: Array2<f64>,
    pub g_v: Array2<f64>,
}

impl GradTriple {
    pub fn zeros(d: usize) -> Self {
        GradTriple {
            g_k: Array2::zeros((d, d)),
            g_q: Array2::zeros((d, d)),
            g_v: Array2::zeros((d, d)),
        }
    }

    pub fn is_finite(&self) -> bool {
        [&self.g_k, &self.g_q, &self.g_v]
            .iter()
            .all(|m| m.iter().all(|x| x.is_finite()))
    }

    /// Largest absolute entry across all three matrices.
    pub fn max_abs(&self) -> f64 {
        [&self.g_k, &self.g_q, &self.g_v]
            .iter()
            .flat_map(|m| m.iter())
            .fold(0.0f64, |a, &b| a.max(b.abs()))
    }
}

/// Scalar coefficients of one sample's gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCoefficients {
    /// Per key position; `g_K = -(W_Q t_L) (sum_j iota_j t_j)^T`.
    pub iota: Array1<f64>,
    pub omega: Array1<f64>,
    pub pi: Array1<f64>,
}

/// `u_y - sum_k omega_k u_k`, as one GEMV.
pub fn readout_residual(dict: &Dictionary, target: usize, omega: ArrayView1<'_, f64>) -> Array1<f64> {
    let mut r = dict.tokens().t().dot(&omega);
    r.mapv_inplace(|x| -x);
    r += &dict.token(target);
    r
}

/// `(1 - omega_y) u_y - sum_{k != y} omega_k u_k`, accumulated token by token.
pub fn readout_residual_split(dict: &Dictionary, target: usize, omega: ArrayView1<'_, f64>) -> Array1<f64> {
    let mut r = &dict.token(target) * (1.0 - omega[target]);
    for k in 0..dict.len() {
        if k != target {
            r.scaled_add(-omega[k], &dict.token(k));
        }
    }
    r
}

/// `p = (r - (r.v_hat) v_hat) / |v|`.
fn normalized_projection(r: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>, norm: f64) -> Array1<f64> {
    let v_hat = &v / norm;
    let along = r.dot(&v_hat);
    let mut p = r.to_owned();
    p.scaled_add(-along, &v_hat);
    p /= norm;
    p
}

/// Gradient of `-log omega_target` for one sample, with its coefficients.
pub fn analytic_grads_with_coefficients(
    params: &ModelParams,
    sample: &Sample,
    dict: &Dictionary,
) -> Result<(GradTriple, GradCoefficients)> {
    check_target(sample, dict)?;
    let tr = model::forward(params, sample, dict)?;
    let l = sample.tokens.nrows();
    let keys = sample.tokens.slice(s![..l - 1, ..]);
    let query = sample.query();
    let norm = tr.h0.dot(&tr.h0).sqrt();
    let r = readout_residual(dict, sample.target_index, tr.omega.view());
    let p = normalized_projection(r.view(), tr.h0.view(), norm);
    let w = params.w_v.t().dot(&p);
    let centred = &keys.dot(&w) - tr.pooled.dot(&w);
    let iota = &tr.pi * &centred;
    let m = keys.t().dot(&iota);

    let g_v = outer(p.view(), tr.pooled.view(), -1.0);
    let g_k = outer(params.w_q.dot(&query).view(), m.view(), -1.0);
    let g_q = outer(params.w_k.dot(&m).view(), query, -1.0);
    Ok((
        GradTriple { g_k, g_q, g_v },
        GradCoefficients {
            iota,
            omega: tr.omega,
            pi: tr.pi,
        },
    ))
}

pub fn analytic_grads(params: &ModelParams, sample: &Sample, dict: &Dictionary) -> Result<GradTriple> {
    analytic_grads_with_coefficients(params, sample, dict).map(|(g, _)| g)
}

fn outer(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>, scale: f64) -> Array2<f64> {
    let mut out = Array2::zeros((u.len(), v.len()));
    Zip::from(out.rows_mut()).and(&u).for_each(|mut row, &ui| {
        row.scaled_add(scale * ui, &v);
    });
    out
}

fn check_target(sample: &Sample, dict: &Dictionary) -> Result<()> {
    if sample.target_index >= dict.len() {
        return Err(Error::InvalidArgument(format!(
            "target index {} outside dictionary of {} tokens",
            sample.target_index,
            dict.len()
        )));
    }
    Ok(())
}

/// Mean gradient over a batch.
pub fn batch_grads(params: &ModelParams, samples: &[&Sample], dict: &Dictionary) -> Result<GradTriple> {
    batch_loss_and_grads(params, samples, dict).map(|(_, g)| g)
}

/// Mean cross-entropy and mean gradient over a batch.
///
/// All `d x d x N` products run as GEMMs on `d x N` column stacks; the
/// per-sample parts (attention, pooled inputs, key-side coefficients) are
/// mapped over samples and collected in order, so the result does not
/// depend on the worker count.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    samples: &[&Sample],
    dict: &Dictionary,
) -> Result<(f64, GradTriple)> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for (n, s) in samples.iter().enumerate() {
        check_target(s, dict).map_err(|e| e.in_sample(n))?;
    }
    let n_samples = samples.len();
    let inv_n = 1.0 / n_samples as f64;
    let fwd = model::forward_batch(params, samples, dict)?;

    let mut loss = 0.0;
    let mut omega = Array2::zeros(fwd.logits.raw_dim());
    for (n, s) in samples.iter().enumerate() {
        let logits = fwd.logits.column(n);
        loss += model::log_sum_exp(logits) - logits[s.target_index];
        omega.column_mut(n).assign(&model::softmax(logits));
    }
    loss *= inv_n;

    let mut resid = dict.tokens().t().dot(&omega);
    resid.mapv_inplace(|x| -x);
    for (n, s) in samples.iter().enumerate() {
        let mut col = resid.column_mut(n);
        col += &dict.token(s.target_index);
    }
    let mut p = Array2::zeros(resid.raw_dim());
    Zip::from(p.columns_mut())
        .and(resid.columns())
        .and(fwd.h0.columns())
        .and(&fwd.norms)
        .for_each(|mut out, r, v, &norm| out.assign(&normalized_projection(r, v, norm)));

    let mut g_v = p.dot(&fwd.pooled.t());
    g_v *= -inv_n;

    let w = params.w_v.t().dot(&p);
    let m_cols: Vec<Array1<f64>> = samples
        .par_iter()
        .enumerate()
        .map(|(n, s)| {
            let l = s.tokens.nrows();
            let keys = s.tokens.slice(s![..l - 1, ..]);
            let wn = w.column(n);
            let centred = &keys.dot(&wn) - fwd.pooled.column(n).dot(&wn);
            let iota = &fwd.pi[n] * &centred;
            keys.t().dot(&iota)
        })
        .collect();
    let mut m = Array2::zeros((params.dim(), n_samples));
    for (n, col) in m_cols.iter().enumerate() {
        m.column_mut(n).assign(col);
    }

    let mut g_k = fwd.q.dot(&m.t());
    g_k *= -inv_n;
    let mut g_q = params.w_k.dot(&m).dot(&fwd.queries.t());
    g_q *= -inv_n;
    Ok((loss, GradTriple { g_k, g_q, g_v }))
}

/// Mean cross-entropy over a batch.
pub fn batch_loss(params: &ModelParams, samples: &[&Sample], dict: &Dictionary) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let fwd = model::forward_batch(params, samples, dict)?;
    let total: f64 = samples
        .iter()
        .enumerate()
        .map(|(n, s)| {
            let logits = fwd.logits.column(n);
            model::log_sum_exp(logits) - logits[s.target_index]
        })
        .sum();
    Ok(total / samples.len() as f64)
}

/// Central-difference gradient of the single-sample cross-entropy in every
/// entry of `W_K`, `W_Q`, `W_V`.
///
/// Each loss is evaluated in double-double arithmetic, so the difference
/// quotient carries only truncation error, not f64 roundoff over `2 step`.
pub fn fd_grads(params: &ModelParams, sample: &Sample, dict: &Dictionary, step: f64) -> Result<GradTriple> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    check_target(sample, dict)?;
    if sample.tokens.nrows() < 2 || sample.tokens.ncols() != params.dim() {
        return Err(Error::InvalidArgument("sample shape does not fit the model".into()));
    }
    let d = params.dim();
    let mut out = GradTriple::zeros(d);
    for which in [Matrix::K, Matrix::Q, Matrix::V] {
        for i in 0..d {
            for j in 0..d {
                let up = extended_loss(params, sample, dict, Perturb { which, i, j, delta: step })?;
                let down = extended_loss(params, sample, dict, Perturb { which, i, j, delta: -step })?;
                let g = match which {
                    Matrix::K => &mut out.g_k,
                    Matrix::Q => &mut out.g_q,
                    Matrix::V => &mut out.g_v,
                };
                g[[i, j]] = ((up - down) / Dd::new(2.0 * step)).to_f64();
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, PartialEq)]
enum Matrix {
    K,
    Q,
    V,
}

#[derive(Clone, Copy)]
struct Perturb {
    which: Matrix,
    i: usize,
    j: usize,
    delta: f64,
}

/// `M x` with entry `(i, j)` of `M` shifted by `delta` when `m` is the perturbed matrix.
fn matvec_dd(mat: &Array2<f64>, m: Matrix, x: &[Dd], pert: Perturb, transpose: bool) -> Vec<Dd> {
    let d = mat.nrows();
    (0..d)
        .map(|r| {
            let mut acc = Dd::ZERO;
            for (c, &xc) in x.iter().enumerate() {
                let (a, b) = if transpose { (c, r) } else { (r, c) };
                let mut e = Dd::new(mat[[a, b]]);
                if pert.which == m && pert.i == a && pert.j == b {
                    e = e + Dd::new(pert.delta);
                }
                acc = acc + e * xc;
            }
            acc
        })
        .collect()
}

fn dot_dd(a: &[Dd], b: ArrayView1<'_, f64>) -> Dd {
    a.iter().zip(b.iter()).fold(Dd::ZERO, |acc, (&x, &y)| acc + x * Dd::new(y))
}

fn log_sum_exp_dd(x: &[Dd]) -> Dd {
    let m = x.iter().copied().fold(x[0], Dd::max);
    m + x.iter().fold(Dd::ZERO, |acc, &v| acc + (v - m).exp()).ln()
}

fn extended_loss(params: &ModelParams, sample: &Sample, dict: &Dictionary, pert: Perturb) -> Result<Dd> {
    let l = sample.tokens.nrows();
    let d = params.dim();
    let query: Vec<Dd> = sample.query().iter().map(|&x| Dd::new(x)).collect();
    let q = matvec_dd(&params.w_q, Matrix::Q, &query, pert, false);
    let kq = matvec_dd(&params.w_k, Matrix::K, &q, pert, true);
    let scores: Vec<Dd> = (0..l - 1).map(|j| dot_dd(&kq, sample.tokens.row(j))).collect();
    let lse = log_sum_exp_dd(&scores);
    let mut pooled = vec![Dd::ZERO; d];
    for (j, &s) in scores.iter().enumerate() {
        let pj = (s - lse).exp();
        for (c, acc) in pooled.iter_mut().enumerate() {
            *acc = *acc + pj * Dd::new(sample.tokens[[j, c]]);
        }
    }
    let h0 = matvec_dd(&params.w_v, Matrix::V, &pooled, pert, false);
    let norm = h0.iter().fold(Dd::ZERO, |acc, &x| acc + x * x).sqrt();
    if !(norm.hi >= model::MIN_NORM) {
        return Err(Error::DegenerateNorm { norm: norm.hi });
    }
    let h: Vec<Dd> = h0.iter().zip(query.iter()).map(|(&x, &t)| x / norm + t).collect();
    let logits: Vec<Dd> = (0..dict.len()).map(|k| dot_dd(&h, dict.token(k))).collect();
    Ok(log_sum_exp_dd(&logits) - logits[sample.target_index])
}

/// Mean of per-sample gradients, summed in sample order.
pub fn mean_of_sample_grads(params: &ModelParams, samples: &[&Sample], dict: &Dictionary) -> Result<GradTriple> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut acc = GradTriple::zeros(params.dim());
    for (n, s) in samples.iter().enumerate() {
        let g = analytic_grads(params, s, dict).map_err(|e| e.in_sample(n))?;
        acc.g_k += &g.g_k;
        acc.g_q += &g.g_q;
        acc.g_v += &g.g_v;
    }
    let inv = 1.0 / samples.len() as f64;
    acc.g_k *= inv;
    acc.g_q *= inv;
    acc.g_v *= inv;
    Ok(acc)
}

/// Sum of the column-wise `iota` weights; zero by construction.
pub fn iota_total(c: &GradCoefficients) -> f64 {
    c.iota.sum_axis(Axis(0)).into_scalar()
}
