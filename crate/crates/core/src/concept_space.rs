//! Hierarchical concept vectors and the fixed output dictionary.
//!
//! The latent space carries three orthonormal families: task concepts
//! `a_k`, their bi-label low-level concepts `b_k`, and task-irrelevant
//! common tokens `nu_m`. The dictionary holds seven normalized tokens per
//! task followed by the common tokens.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Tokens per task block in the dictionary.
pub const TOKENS_PER_TASK: usize = 7;

/// Default weight of the task direction inside word vectors.
pub const DEFAULT_ANCHOR: f64 = 0.1;

/// Label sign of a low-level concept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    #[serde(rename = "+")]
    Pos,
    #[serde(rename = "-")]
    Neg,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Pos => 1.0,
            Sign::Neg => -1.0,
        }
    }

    pub fn from_value(y: f64) -> Self {
        if y >= 0.0 {
            Sign::Pos
        } else {
            Sign::Neg
        }
    }
}

/// Orthonormal task (`a`), label (`b`) and common (`nu`) directions, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBasis {
    task: Array2<f64>,
    label: Array2<f64>,
    common: Array2<f64>,
}

impl ConceptBasis {
    /// Random signed permutation of the standard basis: the first `2K + K'`
    /// permuted coordinates become `a_1..a_K, b_1..b_K, nu_1..nu_K'`.
    pub fn build(d: usize, num_tasks: usize, num_common: usize, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("dimension d must be at least 1".into()));
        }
        if num_tasks == 0 {
            return Err(Error::InvalidArgument("task count K must be at least 1".into()));
        }
        let needed = 2 * num_tasks + num_common;
        if needed > d {
            return Err(Error::DimensionTooSmall { needed, d });
        }
        let mut rng = rng::stream(seed, rng::STREAM_BASIS);
        let mut coords: Vec<usize> = (0..d).collect();
        coords.shuffle(&mut rng);
        let mut all = Array2::zeros((needed, d));
        for (row, &coord) in coords.iter().take(needed).enumerate() {
            all[[row, coord]] = rng::random_sign(&mut rng);
        }
        Ok(ConceptBasis {
            task: all.slice(s![..num_tasks, ..]).to_owned(),
            label: all.slice(s![num_tasks..2 * num_tasks, ..]).to_owned(),
            common: all.slice(s![2 * num_tasks.., ..]).to_owned(),
        })
    }

    /// Assemble a basis from explicit families.
    ///
    /// Every vector must be unit norm. Label and common vectors must be
    /// orthogonal to all other vectors; task vectors only need to be
    /// orthogonal to the other two families (shifted dictionaries use
    /// overlapping conic combinations of task directions).
    pub fn from_families(task: Array2<f64>, label: Array2<f64>, common: Array2<f64>) -> Result<Self> {
        let d = task.ncols();
        if label.ncols() != d || common.ncols() != d {
            return Err(Error::InvalidArgument("concept families disagree on dimension".into()));
        }
        if task.nrows() == 0 || task.nrows() != label.nrows() {
            return Err(Error::InvalidArgument(format!(
                "need one label direction per task direction (got {} task, {} label)",
                task.nrows(),
                label.nrows()
            )));
        }
        const TOL: f64 = 1e-10;
        for (name, fam) in [("task", &task), ("label", &label), ("common", &common)] {
            for (i, row) in fam.outer_iter().enumerate() {
                let n = row.dot(&row).sqrt();
                if (n - 1.0).abs() > TOL {
                    return Err(Error::InvalidArgument(format!("{name} vector {i} has norm {n}")));
                }
            }
        }
        let all = ndarray::concatenate(Axis(0), &[task.view(), label.view(), common.view()])
            .expect("shapes checked");
        let k = task.nrows();
        let gram = all.dot(&all.t());
        for i in 0..all.nrows() {
            for j in (i + 1)..all.nrows() {
                if i < k && j < k {
                    continue;
                }
                if gram[[i, j]].abs() > TOL {
                    return Err(Error::InvalidArgument(format!(
                        "concept vectors {i} and {j} are not orthogonal (dot = {})",
                        gram[[i, j]]
                    )));
                }
            }
        }
        Ok(ConceptBasis { task, label, common })
    }

    pub fn dim(&self) -> usize {
        self.task.ncols()
    }

    pub fn num_tasks(&self) -> usize {
        self.task.nrows()
    }

    pub fn num_common(&self) -> usize {
        self.common.nrows()
    }

    pub fn task(&self, k: usize) -> ArrayView1<'_, f64> {
        self.task.row(k)
    }

    pub fn label(&self, k: usize) -> ArrayView1<'_, f64> {
        self.label.row(k)
    }

    pub fn common(&self, m: usize) -> ArrayView1<'_, f64> {
        self.common.row(m)
    }

    pub fn task_vectors(&self) -> ArrayView2<'_, f64> {
        self.task.view()
    }

    pub fn label_vectors(&self) -> ArrayView2<'_, f64> {
        self.label.view()
    }

    pub fn common_vectors(&self) -> ArrayView2<'_, f64> {
        self.common.view()
    }

    /// All `2K + K'` vectors stacked in the order a, b, nu.
    pub fn stacked(&self) -> Array2<f64> {
        ndarray::concatenate(Axis(0), &[self.task.view(), self.label.view(), self.common.view()])
            .expect("families share a dimension")
    }

    /// Coordinates of the ambient space untouched by every basis vector.
    /// For a permutation-built basis these span its orthogonal complement.
    pub fn free_coordinates(&self) -> Vec<usize> {
        let all = self.stacked();
        (0..self.dim())
            .filter(|&c| all.column(c).iter().all(|&x| x == 0.0))
            .collect()
    }

    pub fn check_task(&self, k: usize) -> Result<()> {
        if k >= self.num_tasks() {
            return Err(Error::TaskOutOfRange {
                task: k,
                num_tasks: self.num_tasks(),
            });
        }
        Ok(())
    }
}

/// Fixed unit-norm output tokens `u_1..u_{7K+K'}`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    tokens: Array2<f64>,
    anchor: f64,
    num_tasks: usize,
}

impl Dictionary {
    /// Per task `k` the block is the normalization of
    /// `[a+b, a-b, x_a a+b, x_a a-b, a, b, -b]`, followed by every `nu`.
    pub fn build(basis: &ConceptBasis, anchor: f64) -> Result<Self> {
        if !(anchor > 0.0 && anchor.is_finite()) {
            return Err(Error::InvalidArgument(format!("anchor coefficient must be positive, got {anchor}")));
        }
        let k_count = basis.num_tasks();
        let d = basis.dim();
        let mut tokens = Array2::zeros((TOKENS_PER_TASK * k_count + basis.num_common(), d));
        for k in 0..k_count {
            let a = basis.task(k);
            let b = basis.label(k);
            let block: [Array1<f64>; TOKENS_PER_TASK] = [
                &a + &b,
                &a - &b,
                &a * anchor + b,
                &a * anchor - b,
                a.to_owned(),
                b.to_owned(),
                -&b,
            ];
            for (slot, v) in block.iter().enumerate() {
                tokens.row_mut(TOKENS_PER_TASK * k + slot).assign(&normalized(v.view()));
            }
        }
        for m in 0..basis.num_common() {
            tokens
                .row_mut(TOKENS_PER_TASK * k_count + m)
                .assign(&normalized(basis.common(m)));
        }
        Ok(Dictionary {
            tokens,
            anchor,
            num_tasks: k_count,
        })
    }

    pub(crate) fn from_tokens(tokens: Array2<f64>, anchor: f64, num_tasks: usize) -> Result<Self> {
        if tokens.nrows() < TOKENS_PER_TASK * num_tasks {
            return Err(Error::InvalidArgument("dictionary has fewer rows than its task blocks".into()));
        }
        Ok(Dictionary {
            tokens,
            anchor,
            num_tasks,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn anchor(&self) -> f64 {
        self.anchor
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn tokens(&self) -> ArrayView2<'_, f64> {
        self.tokens.view()
    }

    pub fn token(&self, index: usize) -> ArrayView1<'_, f64> {
        self.tokens.row(index)
    }

    /// Index of the label token `LN(a_k + y b_k)`: slot 0 (`y = +1`) or
    /// slot 1 (`y = -1`) of block `k`.
    pub fn label_index(&self, k: usize, y: Sign) -> Result<usize> {
        label_token_index(k, y, self.num_tasks)
    }
}

pub fn label_token_index(k: usize, y: Sign, num_tasks: usize) -> Result<usize> {
    if k >= num_tasks {
        return Err(Error::TaskOutOfRange { task: k, num_tasks });
    }
    Ok(TOKENS_PER_TASK * k + usize::from(y == Sign::Neg))
}

fn normalized(v: ArrayView1<'_, f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    &v / n
}
