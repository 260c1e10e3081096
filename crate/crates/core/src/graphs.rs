//! Graph construction over node feature sets.
//!
//! Soft edges come from a single-head dot-product attention map,
//! `row_softmax((X·Wq)(X·Wk)ᵀ / √d)`, so every adjacency row is a
//! probability distribution over the nodes.

use rand::Rng;

use crate::diffnum::{DenseMatrix, Tape, Var};
use crate::error::{Error, Result};

/// Node features with a row-stochastic soft adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub nodes: DenseMatrix,
    pub adjacency: DenseMatrix,
}

impl Graph {
    pub fn node_count(&self) -> usize {
        self.nodes.rows()
    }

    pub fn feature_width(&self) -> usize {
        self.nodes.cols()
    }
}

/// A graph whose nodes and edges live on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct GraphVar<'t> {
    pub nodes: Var<'t>,
    pub adjacency: Var<'t>,
}

/// Query/key projections of the edge generator, both `D×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeGeneratorParams {
    query_weights: DenseMatrix,
    key_weights: DenseMatrix,
}

impl EdgeGeneratorParams {
    pub fn new(query_weights: DenseMatrix, key_weights: DenseMatrix) -> Result<Self> {
        if query_weights.shape() != key_weights.shape() {
            return Err(Error::mismatch(
                "EdgeGeneratorParams",
                query_weights.shape(),
                key_weights.shape(),
            ));
        }
        if !query_weights.is_finite() || !key_weights.is_finite() {
            return Err(Error::invalid("EdgeGeneratorParams", "non-finite weights"));
        }
        Ok(Self {
            query_weights,
            key_weights,
        })
    }

    /// Seeded fan-in initialization, entries uniform on `[−1/√D, 1/√D]`.
    pub fn init<R: Rng + ?Sized>(
        feature_width: usize,
        projection_width: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (feature_width as f64).sqrt();
        Self {
            query_weights: DenseMatrix::uniform(feature_width, projection_width, bound, rng),
            key_weights: DenseMatrix::uniform(feature_width, projection_width, bound, rng),
        }
    }

    pub fn feature_width(&self) -> usize {
        self.query_weights.rows()
    }

    pub fn projection_width(&self) -> usize {
        self.query_weights.cols()
    }

    pub fn query_weights(&self) -> &DenseMatrix {
        &self.query_weights
    }

    pub fn key_weights(&self) -> &DenseMatrix {
        &self.key_weights
    }

    pub fn tensors(&self) -> [&DenseMatrix; 2] {
        [&self.query_weights, &self.key_weights]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut DenseMatrix; 2] {
        [&mut self.query_weights, &mut self.key_weights]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> EdgeVars<'t> {
        EdgeVars {
            query: tape.leaf(self.query_weights.clone(), trainable),
            key: tape.leaf(self.key_weights.clone(), trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EdgeVars<'t> {
    pub query: Var<'t>,
    pub key: Var<'t>,
}

impl<'t> EdgeVars<'t> {
    pub fn vars(&self) -> [Var<'t>; 2] {
        [self.query, self.key]
    }
}

/// Soft adjacency for `features` on the tape.
pub fn edges_on_tape<'t>(features: Var<'t>, params: &EdgeVars<'t>) -> Var<'t> {
    let d = params.query.shape().1 as f64;
    let q = features.matmul(params.query);
    let k = features.matmul(params.key);
    q.matmul(k.t()).scale(1.0 / d.sqrt()).row_softmax()
}

pub fn graph_on_tape<'t>(features: Var<'t>, params: &EdgeVars<'t>) -> GraphVar<'t> {
    GraphVar {
        nodes: features,
        adjacency: edges_on_tape(features, params),
    }
}

fn check_width(
    op: &'static str,
    features: &DenseMatrix,
    params: &EdgeGeneratorParams,
) -> Result<()> {
    if features.cols() != params.feature_width() {
        return Err(Error::mismatch(
            op,
            features.shape(),
            params.query_weights.shape(),
        ));
    }
    Ok(())
}

/// `row_softmax((X·Wq)(X·Wk)ᵀ / √d)`, an `N×N` row-stochastic matrix.
pub fn generate_edges(features: &DenseMatrix, params: &EdgeGeneratorParams) -> Result<DenseMatrix> {
    check_width("generate_edges", features, params)?;
    let tape = Tape::new();
    let x = tape.constant(features.clone());
    let vars = params.bind(&tape, false);
    Ok(edges_on_tape(x, &vars).value().as_ref().clone())
}

pub fn build_graph(features: &DenseMatrix, params: &EdgeGeneratorParams) -> Result<Graph> {
    check_width("build_graph", features, params)?;
    Ok(Graph {
        nodes: features.clone(),
        adjacency: generate_edges(features, params)?,
    })
}
