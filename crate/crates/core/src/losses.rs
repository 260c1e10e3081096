//! Correspondence, structural, segmentation and contrastive losses.
//!
//! Every loss has a tape form (`*_on_tape`) used during training and a plain
//! form on [`DenseMatrix`] values that builds a throwaway tape.

use serde::{Deserialize, Serialize};

use crate::diffnum::{DenseMatrix, Tape, Var, LOG_CLAMP};
use crate::error::{Error, Result};
use crate::matching::CorrespondenceMatrix;
use crate::synthdata::Volume;

/// Smoothing constant of the Dice loss.
pub const DICE_SMOOTHING: f64 = 1.0;

/// Default InfoNCE temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Binary ground-truth correspondence.
#[derive(Debug, Clone, PartialEq)]
pub struct GtCorrespondence {
    values: DenseMatrix,
}

impl GtCorrespondence {
    pub fn new(values: DenseMatrix) -> Result<Self> {
        if let Some(i) = values.data().iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(
                "GtCorrespondence",
                format!("entry {i} = {} is not binary", values.data()[i]),
            ));
        }
        Ok(Self { values })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            values: DenseMatrix::identity(n),
        }
    }

    pub fn values(&self) -> &DenseMatrix {
        &self.values
    }
}

/// Weights of the encoder objective (`a`, `b`) and segmenter objective
/// (`c`, `d`, `e`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub lambda_e: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_a: 0.5,
            lambda_b: 0.5,
            lambda_c: 1.0,
            lambda_d: 0.5,
            lambda_e: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_a,
            self.lambda_b,
            self.lambda_c,
            self.lambda_d,
            self.lambda_e,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(
                "LossWeights",
                "weights must be finite and nonnegative",
            ));
        }
        Ok(())
    }

    /// Only the Dice term of the segmenter objective.
    pub fn dice_only(self) -> Self {
        Self {
            lambda_d: 0.0,
            lambda_e: 0.0,
            ..self
        }
    }
}

fn same_shape(op: &'static str, a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Summed binary cross-entropy `−Σ g·log p + (1−g)·log(1−p)`, with `p`
/// clamped to `[ε, 1−ε]`.
pub fn ce_corr_on_tape<'t>(pred: Var<'t>, gt: &GtCorrespondence) -> Var<'t> {
    let tape = pred.tape();
    let g = tape.constant(gt.values.clone());
    let not_g = tape.constant(gt.values.map(|v| 1.0 - v));
    let p = pred.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
    let q = p.scale(-1.0).offset(1.0);
    -(g * p.ln() + not_g * q.ln()).sum()
}

/// Mean elementwise `|E_a·X − X·E_b|`.
pub fn qc_on_tape<'t>(edges_a: Var<'t>, edges_b: Var<'t>, pred: Var<'t>) -> Var<'t> {
    (edges_a.matmul(pred) - pred.matmul(edges_b)).abs().mean()
}

/// Mean `|X − X_gt|`.
pub fn l1_corr_on_tape<'t>(pred: Var<'t>, gt: &GtCorrespondence) -> Var<'t> {
    let g = pred.tape().constant(gt.values.clone());
    (pred - g).abs().mean()
}

/// Dice loss over pixel-major masks (`HW×C`), averaged over channels.
pub fn dice_on_tape<'t>(pred: Var<'t>, gt: Var<'t>) -> Var<'t> {
    let inter = (pred * gt).col_sum().scale(2.0).offset(DICE_SMOOTHING);
    let denom = (pred.col_sum() + gt.col_sum()).offset(DICE_SMOOTHING);
    (inter / denom).scale(-1.0).offset(1.0).mean()
}

fn row_unit<'t>(x: Var<'t>) -> Var<'t> {
    x / (x * x).row_sum().offset(1e-12).sqrt()
}

/// Symmetric InfoNCE over cosine similarities; rows without positives are
/// skipped.
pub fn contrastive_on_tape<'t>(
    a_feats: Var<'t>,
    b_feats: Var<'t>,
    positives: &GtCorrespondence,
    temperature: f64,
) -> Var<'t> {
    let tape = a_feats.tape();
    let logits = row_unit(a_feats)
        .matmul(row_unit(b_feats).t())
        .scale(1.0 / temperature);
    let one_side = |logits: Var<'t>, mask: &DenseMatrix| {
        // weight each positive by 1/|positives in its row|
        let weights = DenseMatrix::from_fn(mask.rows(), mask.cols(), |r, c| {
            let count: f64 = mask.row(r).iter().sum();
            if count > 0.0 {
                mask.get(r, c) / count
            } else {
                0.0
            }
        });
        let active = mask.row_sums().iter().filter(|&&s| s > 0.0).count().max(1);
        let w = tape.constant(weights);
        -(w * logits.row_log_softmax())
            .sum()
            .scale(1.0 / active as f64)
    };
    let forward = one_side(logits, &positives.values);
    let backward = one_side(logits.t(), &positives.values.transpose());
    (forward + backward).scale(0.5)
}

/// Which correspondence term a branch uses alongside the structural term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrespondenceTerm {
    CrossEntropy,
    L1,
}

/// `term(X, X_gt) + qc(E_a, E_b, X)`.
pub fn branch_loss_on_tape<'t>(
    term: CorrespondenceTerm,
    pred: Var<'t>,
    edges_a: Var<'t>,
    edges_b: Var<'t>,
    gt: &GtCorrespondence,
) -> Var<'t> {
    let corr = match term {
        CorrespondenceTerm::CrossEntropy => ce_corr_on_tape(pred, gt),
        CorrespondenceTerm::L1 => l1_corr_on_tape(pred, gt),
    };
    corr + qc_on_tape(edges_a, edges_b, pred)
}

// Plain-value forms.

pub fn ce_corr(pred: &CorrespondenceMatrix, gt: &GtCorrespondence) -> Result<f64> {
    same_shape("ce_corr", pred.values(), &gt.values)?;
    let tape = Tape::new();
    Ok(ce_corr_on_tape(tape.constant(pred.values().clone()), gt).scalar())
}

pub fn qc(
    edges_a: &DenseMatrix,
    edges_b: &DenseMatrix,
    pred: &CorrespondenceMatrix,
) -> Result<f64> {
    let (n, m) = pred.values().shape();
    if edges_a.shape() != (n, n) {
        return Err(Error::mismatch(
            "qc",
            edges_a.shape(),
            pred.values().shape(),
        ));
    }
    if edges_b.shape() != (m, m) {
        return Err(Error::mismatch(
            "qc",
            pred.values().shape(),
            edges_b.shape(),
        ));
    }
    let tape = Tape::new();
    let v = qc_on_tape(
        tape.constant(edges_a.clone()),
        tape.constant(edges_b.clone()),
        tape.constant(pred.values().clone()),
    );
    Ok(v.scalar())
}

pub fn l1_corr(pred: &CorrespondenceMatrix, gt: &GtCorrespondence) -> Result<f64> {
    same_shape("l1_corr", pred.values(), &gt.values)?;
    let tape = Tape::new();
    Ok(l1_corr_on_tape(tape.constant(pred.values().clone()), gt).scalar())
}

fn branch_loss(
    term: CorrespondenceTerm,
    pred: &CorrespondenceMatrix,
    edges_a: &DenseMatrix,
    edges_b: &DenseMatrix,
    gt: &GtCorrespondence,
) -> Result<f64> {
    let corr = match term {
        CorrespondenceTerm::CrossEntropy => ce_corr(pred, gt)?,
        CorrespondenceTerm::L1 => l1_corr(pred, gt)?,
    };
    Ok(corr + qc(edges_a, edges_b, pred)?)
}

/// Word-level loss on ground-truth masks: cross-entropy plus structure.
pub fn local_gt_loss(
    pred: &CorrespondenceMatrix,
    edges_vision: &DenseMatrix,
    edges_text: &DenseMatrix,
    gt: &GtCorrespondence,
) -> Result<f64> {
    branch_loss(
        CorrespondenceTerm::CrossEntropy,
        pred,
        edges_vision,
        edges_text,
        gt,
    )
}

/// Word-level loss on predicted masks: L1 plus structure.
pub fn local_pred_loss(
    pred: &CorrespondenceMatrix,
    edges_vision: &DenseMatrix,
    edges_text: &DenseMatrix,
    gt: &GtCorrespondence,
) -> Result<f64> {
    branch_loss(CorrespondenceTerm::L1, pred, edges_vision, edges_text, gt)
}

/// Sentence-level loss on ground-truth masks: cross-entropy plus structure.
pub fn global_gt_loss(
    pred: &CorrespondenceMatrix,
    edges_vision: &DenseMatrix,
    edges_text: &DenseMatrix,
    gt: &GtCorrespondence,
) -> Result<f64> {
    branch_loss(
        CorrespondenceTerm::CrossEntropy,
        pred,
        edges_vision,
        edges_text,
        gt,
    )
}

/// Sentence-level loss on predicted masks: L1 plus structure.
pub fn global_pred_loss(
    pred: &CorrespondenceMatrix,
    edges_vision: &DenseMatrix,
    edges_text: &DenseMatrix,
    gt: &GtCorrespondence,
) -> Result<f64> {
    branch_loss(CorrespondenceTerm::L1, pred, edges_vision, edges_text, gt)
}

/// Mean over channels of `1 − (2Σpg + 1) / (Σp + Σg + 1)`.
pub fn dice_loss(pred_mask: &Volume, gt_mask: &Volume) -> Result<f64> {
    if pred_mask.dims() != gt_mask.dims() {
        let (pc, ph, pw) = pred_mask.dims();
        let (gc, gh, gw) = gt_mask.dims();
        return Err(Error::mismatch("dice_loss", (pc, ph * pw), (gc, gh * gw)));
    }
    let tape = Tape::new();
    let p = tape.constant(pred_mask.to_pixel_major());
    let g = tape.constant(gt_mask.to_pixel_major());
    Ok(dice_on_tape(p, g).scalar())
}

/// `λ_a·L_local + λ_b·L_global` on ground-truth masks.
pub fn encoder_loss(l_local_gt: f64, l_global_gt: f64, w: &LossWeights) -> f64 {
    w.lambda_a * l_local_gt + w.lambda_b * l_global_gt
}

/// `λ_c·Dice + λ_d·L_local + λ_e·L_global` on predicted masks.
pub fn generator_loss(l_dice: f64, l_local_p: f64, l_global_p: f64, w: &LossWeights) -> f64 {
    w.lambda_c * l_dice + w.lambda_d * l_local_p + w.lambda_e * l_global_p
}

pub fn contrastive_loss(
    a_feats: &DenseMatrix,
    b_feats: &DenseMatrix,
    positives: &GtCorrespondence,
    temperature: f64,
) -> Result<f64> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::invalid(
            "contrastive_loss",
            "temperature must be positive",
        ));
    }
    if a_feats.cols() != b_feats.cols() {
        return Err(Error::mismatch(
            "contrastive_loss",
            a_feats.shape(),
            b_feats.shape(),
        ));
    }
    if positives.values.shape() != (a_feats.rows(), b_feats.rows()) {
        return Err(Error::mismatch(
            "contrastive_loss",
            (a_feats.rows(), b_feats.rows()),
            positives.values.shape(),
        ));
    }
    let tape = Tape::new();
    let v = contrastive_on_tape(
        tape.constant(a_feats.clone()),
        tape.constant(b_feats.clone()),
        positives,
        temperature,
    );
    Ok(v.scalar())
}
