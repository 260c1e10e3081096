//! One graph-convolution layer with a residual connection:
//! `X′ = ReLU(A·X·W) + X`.

use rand::Rng;

use crate::diffnum::{DenseMatrix, Tape, Var};
use crate::error::{Error, Result};
use crate::graphs::{Graph, GraphVar};

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    weight: DenseMatrix,
}

impl GcnParams {
    pub fn new(weight: DenseMatrix) -> Result<Self> {
        if weight.rows() != weight.cols() {
            return Err(Error::invalid(
                "GcnParams",
                format!(
                    "weight must be square, got {}x{}",
                    weight.rows(),
                    weight.cols()
                ),
            ));
        }
        Ok(Self { weight })
    }

    pub fn init<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (width as f64).sqrt();
        Self {
            weight: DenseMatrix::uniform(width, width, bound, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &DenseMatrix {
        &self.weight
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut DenseMatrix; 1] {
        [&mut self.weight]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Var<'t> {
        tape.leaf(self.weight.clone(), trainable)
    }
}

pub fn gcn_on_tape<'t>(graph: &GraphVar<'t>, weight: Var<'t>) -> Var<'t> {
    graph.adjacency.matmul(graph.nodes).matmul(weight).relu() + graph.nodes
}

pub fn gcn_embed(graph: &Graph, params: &GcnParams) -> Result<DenseMatrix> {
    if graph.feature_width() != params.width() {
        return Err(Error::mismatch(
            "gcn_embed",
            graph.nodes.shape(),
            params.weight.shape(),
        ));
    }
    let n = graph.node_count();
    if graph.adjacency.shape() != (n, n) {
        return Err(Error::mismatch(
            "gcn_embed",
            graph.nodes.shape(),
            graph.adjacency.shape(),
        ));
    }
    let tape = Tape::new();
    let g = GraphVar {
        nodes: tape.constant(graph.nodes.clone()),
        adjacency: tape.constant(graph.adjacency.clone()),
    };
    let w = params.bind(&tape, false);
    Ok(gcn_on_tape(&g, w).value().as_ref().clone())
}
