//! Small per-pixel lesion scorer standing in for the segmentation network.

use rand::Rng;

use crate::diffnum::{stable_sigmoid, DenseMatrix, Tape, Var};
use crate::error::{Error, Result};
use crate::synthdata::Volume;

/// Neighbourhood dilations, one per blur scale.
const DILATIONS: [isize; 3] = [1, 2, 4];
/// Number of patch inputs per pixel.
pub const PATCH_WIDTH: usize = 27;

/// Pixel-major patch matrix (`HW×27`): 3×3 neighbourhoods of the image at
/// three blur scales, centered and rescaled.
pub fn patch_features(image: &Volume) -> Result<DenseMatrix> {
    let (c, h, w) = image.dims();
    if c != 1 {
        return Err(Error::invalid(
            "patch_features",
            format!("expected one channel, got {c}"),
        ));
    }
    let once = image.box_blur();
    let twice = once.box_blur().box_blur();
    let scales = [image, &once, &twice];
    let mut data = Vec::with_capacity(h * w * PATCH_WIDTH);
    for r in 0..h as isize {
        for col in 0..w as isize {
            for (scale, dil) in scales.iter().zip(DILATIONS) {
                let src = scale.channel(0);
                for dr in [-dil, 0, dil] {
                    for dc in [-dil, 0, dil] {
                        let rr = (r + dr).clamp(0, h as isize - 1) as usize;
                        let cc = (col + dc).clamp(0, w as isize - 1) as usize;
                        data.push((src[rr * w + cc] - 0.5) * 4.0);
                    }
                }
            }
        }
    }
    DenseMatrix::new(h * w, PATCH_WIDTH, data)
}

/// `f = tanh(P·W1 + b1)` is the exposed feature map and
/// `mask = sigmoid(f·W2 + b2)` the predicted lesion mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterParams {
    w1: DenseMatrix,
    b1: DenseMatrix,
    w2: DenseMatrix,
    b2: DenseMatrix,
}

#[derive(Debug, Clone, Copy)]
pub struct SegmenterVars<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

impl<'t> SegmenterVars<'t> {
    pub fn vars(&self) -> [Var<'t>; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Initial output bias: lesions are rare, so masks start near 0.12.
const INITIAL_MASK_BIAS: f64 = -2.0;

impl SegmenterParams {
    pub fn init<R: Rng + ?Sized>(feature_width: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            w1: DenseMatrix::uniform(
                PATCH_WIDTH,
                feature_width,
                1.0 / (PATCH_WIDTH as f64).sqrt(),
                rng,
            ),
            b1: DenseMatrix::zeros(1, feature_width),
            w2: DenseMatrix::uniform(
                feature_width,
                classes,
                1.0 / (feature_width as f64).sqrt(),
                rng,
            ),
            b2: DenseMatrix::filled(1, classes, INITIAL_MASK_BIAS),
        }
    }

    pub fn feature_width(&self) -> usize {
        self.w1.cols()
    }

    pub fn classes(&self) -> usize {
        self.w2.cols()
    }

    pub fn tensors(&self) -> [&DenseMatrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut DenseMatrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> SegmenterVars<'t> {
        SegmenterVars {
            w1: tape.leaf(self.w1.clone(), trainable),
            b1: tape.leaf(self.b1.clone(), trainable),
            w2: tape.leaf(self.w2.clone(), trainable),
            b2: tape.leaf(self.b2.clone(), trainable),
        }
    }

    /// Feature map and mask without recording a tape.
    pub fn forward(&self, patches: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        if patches.cols() != PATCH_WIDTH {
            return Err(Error::mismatch(
                "segmenter",
                patches.shape(),
                self.w1.shape(),
            ));
        }
        let mut f = patches.matmul(&self.w1)?;
        let d = f.cols();
        for (i, v) in f.data_mut().iter_mut().enumerate() {
            *v = (*v + self.b1.data()[i % d]).tanh();
        }
        let mut mask = f.matmul(&self.w2)?;
        let c = mask.cols();
        for (i, v) in mask.data_mut().iter_mut().enumerate() {
            *v = stable_sigmoid(*v + self.b2.data()[i % c]);
        }
        Ok((f, mask))
    }

    pub fn predict(&self, patches: &DenseMatrix, height: usize, width: usize) -> Result<Volume> {
        let (_, mask) = self.forward(patches)?;
        Volume::from_pixel_major(&mask, height, width)
    }
}

/// Feature map (`HW×D`) and mask (`HW×C`) on the tape.
pub fn segment_on_tape<'t>(patches: Var<'t>, params: &SegmenterVars<'t>) -> (Var<'t>, Var<'t>) {
    let f = (patches.matmul(params.w1) + params.b1).tanh();
    let mask = (f.matmul(params.w2) + params.b2).sigmoid();
    (f, mask)
}
