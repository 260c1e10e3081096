//! Soft correspondence between two graphs: affinity layer, positivity
//! normalization, Sinkhorn.
//!
//! Two Sinkhorn routes exist. [`sinkhorn`] runs on plain matrices until the
//! marginals are within tolerance and is used for evaluation. The tape route
//! ([`sinkhorn_on_tape`]) unrolls a fixed number of iterations so the result
//! is differentiable.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::{col_normalize, row_normalize, DenseMatrix, Tape, Var};
use crate::error::{Error, Result};
use crate::gcn::{gcn_embed, gcn_on_tape, GcnParams};
use crate::graphs::{Graph, GraphVar};

/// Variance floor of the z-score in [`positive_normalize`].
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Soft matching with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMatrix {
    values: DenseMatrix,
}

impl CorrespondenceMatrix {
    pub fn new(values: DenseMatrix) -> Result<Self> {
        if let Some(i) = values.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(
                "CorrespondenceMatrix",
                format!("entry {i} = {} outside [0, 1]", values.data()[i]),
            ));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DenseMatrix {
        &self.values
    }

    pub fn into_values(self) -> DenseMatrix {
        self.values
    }

    /// Largest deviation of any row or column sum from one.
    pub fn marginal_deviation(&self) -> f64 {
        marginal_deviation(&self.values)
    }
}

fn marginal_deviation(m: &DenseMatrix) -> f64 {
    m.row_sums()
        .into_iter()
        .chain(m.col_sums())
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Bilinear affinity weight `M` in `S = A·M·Bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityParams {
    bilinear: DenseMatrix,
}

impl AffinityParams {
    pub fn new(bilinear: DenseMatrix) -> Result<Self> {
        if bilinear.rows() != bilinear.cols() {
            return Err(Error::invalid(
                "AffinityParams",
                "bilinear weight must be square",
            ));
        }
        Ok(Self { bilinear })
    }

    pub fn identity(width: usize) -> Self {
        Self {
            bilinear: DenseMatrix::identity(width),
        }
    }

    /// Identity plus a small seeded perturbation.
    pub fn init<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        let noise = DenseMatrix::uniform(width, width, 0.1 / (width as f64).sqrt(), rng);
        Self {
            bilinear: DenseMatrix::identity(width)
                .add(&noise)
                .expect("same shape"),
        }
    }

    pub fn width(&self) -> usize {
        self.bilinear.rows()
    }

    pub fn bilinear(&self) -> &DenseMatrix {
        &self.bilinear
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut DenseMatrix; 1] {
        [&mut self.bilinear]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Var<'t> {
        tape.leaf(self.bilinear.clone(), trainable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl SinkhornConfig {
    /// Fixed unrolled iterations for training.
    pub fn differentiable() -> Self {
        Self {
            max_iterations: 10,
            tolerance: 1e-6,
        }
    }

    /// Iterate-to-tolerance setting for evaluation.
    pub fn forward() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid(
                "SinkhornConfig",
                "max_iterations must be at least 1",
            ));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::invalid(
                "SinkhornConfig",
                "tolerance must be positive",
            ));
        }
        Ok(())
    }
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self::forward()
    }
}

pub fn affinity(
    a_nodes: &DenseMatrix,
    b_nodes: &DenseMatrix,
    params: &AffinityParams,
) -> Result<DenseMatrix> {
    if a_nodes.cols() != b_nodes.cols() {
        return Err(Error::mismatch(
            "affinity",
            a_nodes.shape(),
            b_nodes.shape(),
        ));
    }
    if a_nodes.cols() != params.width() {
        return Err(Error::mismatch(
            "affinity",
            a_nodes.shape(),
            params.bilinear.shape(),
        ));
    }
    a_nodes
        .matmul(&params.bilinear)?
        .matmul(&b_nodes.transpose())
}

pub fn affinity_on_tape<'t>(a_nodes: Var<'t>, b_nodes: Var<'t>, bilinear: Var<'t>) -> Var<'t> {
    a_nodes.matmul(bilinear).matmul(b_nodes.t())
}

/// Z-score over all entries (variance floored at [`VARIANCE_FLOOR`]) followed
/// by `exp`, so every output is strictly positive.
pub fn positive_normalize(s: &DenseMatrix) -> Result<DenseMatrix> {
    if s.len() < 2 {
        return Err(Error::invalid(
            "positive_normalize",
            "needs at least two entries",
        ));
    }
    let tape = Tape::new();
    let v = tape.constant(s.clone());
    Ok(positive_normalize_on_tape(v).value().as_ref().clone())
}

pub fn positive_normalize_on_tape(s: Var<'_>) -> Var<'_> {
    let centered = s - s.mean();
    let variance = (centered * centered).mean();
    let std = variance.clamp(VARIANCE_FLOOR, f64::INFINITY).sqrt();
    (centered / std).exp()
}

/// Result of an iterate-to-tolerance Sinkhorn run.
#[derive(Debug, Clone)]
pub struct SinkhornOutcome {
    pub matrix: CorrespondenceMatrix,
    pub iterations: usize,
    /// Marginal deviation after each full row+column sweep.
    pub deviations: Vec<f64>,
    pub converged: bool,
}

fn check_sinkhorn_input(k: &DenseMatrix, config: &SinkhornConfig) -> Result<()> {
    config.validate()?;
    if k.rows() != k.cols() {
        return Err(Error::invalid(
            "sinkhorn",
            format!("matrix must be square, got {}x{}", k.rows(), k.cols()),
        ));
    }
    if let Some(i) = k.data().iter().position(|v| *v <= 0.0 || !v.is_finite()) {
        return Err(Error::invalid(
            "sinkhorn",
            format!("entry {i} = {} is not strictly positive", k.data()[i]),
        ));
    }
    Ok(())
}

/// Alternating row/column normalization until the marginal deviation drops
/// below `config.tolerance` or `config.max_iterations` sweeps have run.
pub fn sinkhorn_trace(k: &DenseMatrix, config: &SinkhornConfig) -> Result<SinkhornOutcome> {
    check_sinkhorn_input(k, config)?;
    let n = k.cols();
    let mut m = k.clone();
    let mut deviations = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_iterations {
        for row in m.data_mut().chunks_mut(n) {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
        }
        let sums = m.col_sums();
        for row in m.data_mut().chunks_mut(n) {
            for (v, s) in row.iter_mut().zip(&sums) {
                *v /= s;
            }
        }
        let dev = marginal_deviation(&m);
        deviations.push(dev);
        if dev < config.tolerance {
            converged = true;
            break;
        }
    }
    Ok(SinkhornOutcome {
        iterations: deviations.len(),
        matrix: CorrespondenceMatrix::new(m)?,
        deviations,
        converged,
    })
}

pub fn sinkhorn(k: &DenseMatrix, config: &SinkhornConfig) -> Result<CorrespondenceMatrix> {
    Ok(sinkhorn_trace(k, config)?.matrix)
}

/// Exactly `iterations` unrolled row-then-column sweeps.
pub fn sinkhorn_on_tape(k: Var<'_>, iterations: usize) -> Var<'_> {
    let mut m = k;
    for _ in 0..iterations {
        m = col_normalize(row_normalize(m));
    }
    m
}

/// Affinity, positivity and Sinkhorn applied to GCN-embedded graphs.
pub fn ais_on_tape<'t>(
    graph_a: &GraphVar<'t>,
    graph_b: &GraphVar<'t>,
    gcn_weight: Var<'t>,
    bilinear: Var<'t>,
    iterations: usize,
) -> Var<'t> {
    let a = gcn_on_tape(graph_a, gcn_weight);
    let b = gcn_on_tape(graph_b, gcn_weight);
    let s = affinity_on_tape(a, b, bilinear);
    sinkhorn_on_tape(positive_normalize_on_tape(s), iterations)
}

/// Forward-only correspondence between two graphs of equal size; Sinkhorn
/// runs to `config.tolerance`.
pub fn ais(
    graph_a: &Graph,
    graph_b: &Graph,
    gcn_params: &GcnParams,
    aff_params: &AffinityParams,
    config: &SinkhornConfig,
) -> Result<CorrespondenceMatrix> {
    if graph_a.node_count() != graph_b.node_count() {
        return Err(Error::invalid(
            "ais",
            format!(
                "unequal node counts {} and {}",
                graph_a.node_count(),
                graph_b.node_count()
            ),
        ));
    }
    let a = gcn_embed(graph_a, gcn_params)?;
    let b = gcn_embed(graph_b, gcn_params)?;
    if graph_a.node_count() == 1 {
        config.validate()?;
        return CorrespondenceMatrix::new(DenseMatrix::scalar(1.0));
    }
    let s = affinity(&a, &b, aff_params)?;
    sinkhorn(&positive_normalize(&s)?, config)
}
