//! Mask-weighted pooling of pixel features and the image/text encoders.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::{DenseMatrix, Tape, Var};
use crate::error::{Error, Result};
use crate::prompts::LesionClass;
use crate::synthdata::Volume;

/// Lower bound on the mask area used to normalize pooled features.
pub const AREA_FLOOR: f64 = 1e-6;

/// Pixel features stored pixel-major: `HW×D`, pixel `(r, c)` at row `r·W + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    values: DenseMatrix,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, values: DenseMatrix) -> Result<Self> {
        if values.rows() != height * width {
            return Err(Error::invalid(
                "FeatureMap::new",
                format!("{} rows for a {height}x{width} canvas", values.rows()),
            ));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &DenseMatrix {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Gt,
    Predicted,
}

/// One encoded feature row per present class, in canonical class order.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatures {
    pub values: DenseMatrix,
    pub classes: Vec<LesionClass>,
    pub branch: Branch,
}

fn class_indices(op: &'static str, present: &[LesionClass], channels: usize) -> Result<Vec<usize>> {
    if present.is_empty() {
        return Err(Error::invalid(op, "no present classes"));
    }
    present
        .iter()
        .map(|c| {
            if c.index() < channels {
                Ok(c.index())
            } else {
                Err(Error::invalid(op, format!("mask has no channel for {c}")))
            }
        })
        .collect()
}

/// Area-normalized pooling on the tape: `mask` is `HW×C`, `feat` is `HW×D`,
/// result is `|present|×D`.
pub fn masked_pool_on_tape<'t>(mask: Var<'t>, feat: Var<'t>, channels: &[usize]) -> Var<'t> {
    let selected = mask.t().select_rows(channels);
    let area = selected.row_sum().clamp(AREA_FLOOR, f64::INFINITY);
    selected.matmul(feat) / area
}

/// For each present class `c`: `Σ_p mask_c(p)·f(p) / max(Σ_p mask_c(p), ε)`.
pub fn masked_pool(
    mask: &Volume,
    feat: &FeatureMap,
    present: &[LesionClass],
) -> Result<DenseMatrix> {
    if (mask.height(), mask.width()) != (feat.height, feat.width) {
        return Err(Error::mismatch(
            "masked_pool",
            (mask.height(), mask.width()),
            (feat.height, feat.width),
        ));
    }
    let channels = class_indices("masked_pool", present, mask.channels())?;
    let tape = Tape::new();
    let pooled = masked_pool_on_tape(
        tape.constant(mask.to_pixel_major()),
        tape.constant(feat.values.clone()),
        &channels,
    );
    Ok(pooled.value().as_ref().clone())
}

/// Two-layer perceptron `D → 2D → D` with a ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    w1: DenseMatrix,
    b1: DenseMatrix,
    w2: DenseMatrix,
    b2: DenseMatrix,
}

pub struct EncoderVars<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

impl<'t> EncoderVars<'t> {
    pub fn vars(&self) -> [Var<'t>; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

impl EncoderParams {
    pub fn new(w1: DenseMatrix, b1: DenseMatrix, w2: DenseMatrix, b2: DenseMatrix) -> Result<Self> {
        let d = w1.rows();
        let hidden = w1.cols();
        if b1.shape() != (1, hidden) {
            return Err(Error::mismatch("EncoderParams", w1.shape(), b1.shape()));
        }
        if w2.shape() != (hidden, d) {
            return Err(Error::mismatch("EncoderParams", w1.shape(), w2.shape()));
        }
        if b2.shape() != (1, d) {
            return Err(Error::mismatch("EncoderParams", w2.shape(), b2.shape()));
        }
        if ![&w1, &b1, &w2, &b2].iter().all(|m| m.is_finite()) {
            return Err(Error::invalid("EncoderParams", "non-finite parameter"));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    /// Uniform weights on `±1/√fan_in`, zero biases.
    pub fn init<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        let hidden = 2 * width;
        Self {
            w1: DenseMatrix::uniform(width, hidden, 1.0 / (width as f64).sqrt(), rng),
            b1: DenseMatrix::zeros(1, hidden),
            w2: DenseMatrix::uniform(hidden, width, 1.0 / (hidden as f64).sqrt(), rng),
            b2: DenseMatrix::zeros(1, width),
        }
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            w1: DenseMatrix::zeros(width, 2 * width),
            b1: DenseMatrix::zeros(1, 2 * width),
            w2: DenseMatrix::zeros(2 * width, width),
            b2: DenseMatrix::zeros(1, width),
        }
    }

    /// Routes the input through the first `D` hidden units unchanged, so
    /// nonnegative rows map to themselves.
    pub fn passthrough(width: usize) -> Self {
        let mut p = Self::zeros(width);
        for i in 0..width {
            p.w1.set(i, i, 1.0);
            p.w2.set(i, i, 1.0);
        }
        p
    }

    pub fn width(&self) -> usize {
        self.w1.rows()
    }

    pub fn tensors(&self) -> [&DenseMatrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut DenseMatrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> EncoderVars<'t> {
        EncoderVars {
            w1: tape.leaf(self.w1.clone(), trainable),
            b1: tape.leaf(self.b1.clone(), trainable),
            w2: tape.leaf(self.w2.clone(), trainable),
            b2: tape.leaf(self.b2.clone(), trainable),
        }
    }
}

pub fn encode_on_tape<'t>(x: Var<'t>, params: &EncoderVars<'t>) -> Var<'t> {
    let hidden = (x.matmul(params.w1) + params.b1).relu();
    hidden.matmul(params.w2) + params.b2
}

fn encode(op: &'static str, x: &DenseMatrix, params: &EncoderParams) -> Result<DenseMatrix> {
    if x.cols() != params.width() {
        return Err(Error::mismatch(op, x.shape(), params.w1.shape()));
    }
    let tape = Tape::new();
    let out = encode_on_tape(tape.constant(x.clone()), &params.bind(&tape, false));
    Ok(out.value().as_ref().clone())
}

/// Applies the image encoder row-wise to pooled class features.
pub fn encode_local(
    pooled: &DenseMatrix,
    classes: &[LesionClass],
    branch: Branch,
    params: &EncoderParams,
) -> Result<LocalFeatures> {
    if pooled.rows() != classes.len() {
        return Err(Error::invalid(
            "encode_local",
            format!("{} rows for {} classes", pooled.rows(), classes.len()),
        ));
    }
    Ok(LocalFeatures {
        values: encode("encode_local", pooled, params)?,
        classes: classes.to_vec(),
        branch,
    })
}

/// Applies the text encoder row-wise to prompt embeddings.
pub fn encode_text(embedding: &DenseMatrix, params: &EncoderParams) -> Result<DenseMatrix> {
    encode("encode_text", embedding, params)
}

/// `mean_rows(local · proj)` as a `1×D` row.
pub fn global_project_on_tape<'t>(local: Var<'t>, proj: Var<'t>) -> Var<'t> {
    local.matmul(proj).col_mean()
}

pub fn global_project(local: &LocalFeatures, proj: &DenseMatrix) -> Result<DenseMatrix> {
    if local.classes.is_empty() || local.values.rows() != local.classes.len() {
        return Err(Error::invalid("global_project", "no local features"));
    }
    if proj.shape() != (local.values.cols(), local.values.cols()) {
        return Err(Error::mismatch(
            "global_project",
            local.values.shape(),
            proj.shape(),
        ));
    }
    let tape = Tape::new();
    let out = global_project_on_tape(
        tape.constant(local.values.clone()),
        tape.constant(proj.clone()),
    );
    Ok(out.value().as_ref().clone())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn map(h: usize, w: usize, d: usize, f: impl FnMut(usize, usize) -> f64) -> FeatureMap {
        FeatureMap::new(h, w, DenseMatrix::from_fn(h * w, d, f)).unwrap()
    }

    #[test]
    fn constant_features_pool_to_constant() {
        let feat = map(4, 4, 3, |_, _| 2.5);
        let mut mask = Volume::zeros(4, 4, 4);
        mask.set(1, 0, 0, 1.0);
        mask.set(1, 2, 3, 0.4);
        let pooled = masked_pool(&mask, &feat, &[LesionClass::Hemorrhages]).unwrap();
        for v in pooled.data() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn two_pixel_mean() {
        let feat = map(4, 4, 2, |p, d| (p * 10 + d) as f64);
        let mut mask = Volume::zeros(1, 4, 4);
        mask.set(0, 0, 1, 1.0); // pixel 1
        mask.set(0, 1, 2, 1.0); // pixel 6
        let pooled = masked_pool(&mask, &feat, &[LesionClass::HardExudates]).unwrap();
        assert_eq!(pooled, DenseMatrix::from_rows(&[[35.0, 36.0]]).unwrap());
    }

    #[test]
    fn pool_ignores_features_outside_mask() {
        let mut mask = Volume::zeros(1, 4, 4);
        mask.set(0, 3, 3, 1.0);
        let a = map(4, 4, 2, |p, _| if p == 15 { 1.0 } else { 0.0 });
        let b = map(4, 4, 2, |p, _| if p == 15 { 1.0 } else { 99.0 });
        let present = [LesionClass::HardExudates];
        assert_eq!(
            masked_pool(&mask, &a, &present).unwrap(),
            masked_pool(&mask, &b, &present).unwrap()
        );
    }

    #[test]
    fn pool_rejects_bad_input() {
        let feat = map(4, 4, 2, |_, _| 0.0);
        let mask = Volume::zeros(4, 4, 5);
        assert!(masked_pool(&mask, &feat, &[LesionClass::HardExudates]).is_err());
        let mask = Volume::zeros(1, 4, 4);
        assert!(masked_pool(&mask, &feat, &[]).is_err());
        assert!(masked_pool(&mask, &feat, &[LesionClass::Microaneurysms]).is_err());
    }

    #[test]
    fn encoder_cases() {
        let x = DenseMatrix::from_rows(&[[0.5, 0.0, 2.0], [1.0, 3.0, 0.25]]).unwrap();
        let classes = [LesionClass::HardExudates, LesionClass::SoftExudates];
        let zero = encode_local(&x, &classes, Branch::Gt, &EncoderParams::zeros(3)).unwrap();
        assert_eq!(zero.values, DenseMatrix::zeros(2, 3));
        let pass = encode_local(&x, &classes, Branch::Gt, &EncoderParams::passthrough(3)).unwrap();
        assert_eq!(pass.values, x);
        let p = EncoderParams::init(3, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(encode_text(&x, &p).unwrap(), encode_text(&x, &p).unwrap());
        assert!(encode_text(&DenseMatrix::zeros(2, 4), &p).is_err());
        assert!(encode_local(&x, &classes[..1], Branch::Gt, &p).is_err());
    }

    #[test]
    fn global_projection_cases() {
        let u = [1.0, 2.0];
        let w = [3.0, -4.0];
        let local = LocalFeatures {
            values: DenseMatrix::from_rows(&[u, w]).unwrap(),
            classes: vec![LesionClass::HardExudates, LesionClass::Hemorrhages],
            branch: Branch::Predicted,
        };
        let g = global_project(&local, &DenseMatrix::identity(2)).unwrap();
        assert_eq!(g, DenseMatrix::from_rows(&[[2.0, -1.0]]).unwrap());
        let proj = DenseMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let one = LocalFeatures {
            values: DenseMatrix::from_rows(&[u]).unwrap(),
            classes: vec![LesionClass::HardExudates],
            branch: Branch::Gt,
        };
        assert_eq!(
            global_project(&one, &proj).unwrap(),
            DenseMatrix::from_rows(&[[2.0, 1.0]]).unwrap()
        );
        let scaled = LocalFeatures {
            values: local.values.scale(3.0),
            ..local.clone()
        };
        let gs = global_project(&scaled, &proj).unwrap();
        assert!(gs.max_abs_diff(&global_project(&local, &proj).unwrap().scale(3.0)) < 1e-12);
        let empty = LocalFeatures {
            values: DenseMatrix::zeros(1, 2),
            classes: vec![],
            branch: Branch::Gt,
        };
        assert!(global_project(&empty, &proj).is_err());
    }
}
