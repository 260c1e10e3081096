//! Alignment loss families, selectable by name.

use crate::diffnum::Var;
use crate::error::{Error, Result};
use crate::features::Branch;
use crate::graphs::graph_on_tape;
use crate::losses::{
    branch_loss_on_tape, contrastive_on_tape, CorrespondenceTerm, GtCorrespondence,
};
use crate::matching::ais_on_tape;

use super::params::LevelVars;

/// Inputs to one alignment term: vision rows matched against text rows at
/// one level.
pub struct AlignmentInputs<'t, 'a> {
    pub vision: Var<'t>,
    pub text: Var<'t>,
    pub gt: &'a GtCorrespondence,
    pub level: &'a LevelVars<'t>,
    pub branch: Branch,
    pub sinkhorn_iterations: usize,
    pub temperature: f64,
}

pub trait AlignmentStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the encoder step runs at all.
    fn trains_encoders(&self) -> bool {
        true
    }

    /// Alignment loss for one level, or `None` when the strategy has none.
    fn alignment_loss<'t>(&self, inputs: &AlignmentInputs<'t, '_>) -> Option<Var<'t>>;
}

/// Segmentation loss only; encoders stay at their initial values.
pub struct DiceOnly;

impl AlignmentStrategy for DiceOnly {
    fn name(&self) -> &'static str {
        "dice"
    }

    fn trains_encoders(&self) -> bool {
        false
    }

    fn alignment_loss<'t>(&self, _: &AlignmentInputs<'t, '_>) -> Option<Var<'t>> {
        None
    }
}

/// Graph matching: soft edges, GCN, AIS, then cross-entropy (ground-truth
/// branch) or L1 (predicted branch) plus the structural term.
pub struct GraphMatching;

impl AlignmentStrategy for GraphMatching {
    fn name(&self) -> &'static str {
        "full"
    }

    fn alignment_loss<'t>(&self, x: &AlignmentInputs<'t, '_>) -> Option<Var<'t>> {
        let vision = graph_on_tape(x.vision, &x.level.vision_edges);
        let text = graph_on_tape(x.text, &x.level.text_edges);
        let pred = ais_on_tape(
            &vision,
            &text,
            x.level.gcn,
            x.level.affinity,
            x.sinkhorn_iterations,
        );
        let term = match x.branch {
            Branch::Gt => CorrespondenceTerm::CrossEntropy,
            Branch::Predicted => CorrespondenceTerm::L1,
        };
        Some(branch_loss_on_tape(
            term,
            pred,
            vision.adjacency,
            text.adjacency,
            x.gt,
        ))
    }
}

/// Symmetric InfoNCE between vision and text rows; ground-truth ones mark
/// the positives.
pub struct Contrastive;

impl AlignmentStrategy for Contrastive {
    fn name(&self) -> &'static str {
        "contrastive"
    }

    fn alignment_loss<'t>(&self, x: &AlignmentInputs<'t, '_>) -> Option<Var<'t>> {
        Some(contrastive_on_tape(x.vision, x.text, x.gt, x.temperature))
    }
}

/// Names accepted by [`strategy_by_name`].
pub fn strategy_names() -> Vec<&'static str> {
    registry().iter().map(|s| s.name()).collect()
}

fn registry() -> Vec<Box<dyn AlignmentStrategy>> {
    vec![
        Box::new(DiceOnly),
        Box::new(GraphMatching),
        Box::new(Contrastive),
    ]
}

pub fn strategy_by_name(name: &str) -> Result<Box<dyn AlignmentStrategy>> {
    registry()
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| {
            Error::invalid(
                "strategy",
                format!(
                    "unknown loss family {name:?}, expected one of {:?}",
                    strategy_names()
                ),
            )
        })
}
