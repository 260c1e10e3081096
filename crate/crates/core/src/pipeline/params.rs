//! Encoder-side parameters: encoders, edge generators, GCN layers,
//! affinities and the global projection.

use rand::Rng;

use crate::diffnum::{DenseMatrix, Tape, Var};
use crate::features::{EncoderParams, EncoderVars};
use crate::gcn::GcnParams;
use crate::graphs::{EdgeGeneratorParams, EdgeVars};
use crate::matching::AffinityParams;

/// Graph and matching parameters for one matching level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelParams {
    pub vision_edges: EdgeGeneratorParams,
    pub text_edges: EdgeGeneratorParams,
    pub gcn: GcnParams,
    pub affinity: AffinityParams,
}

#[derive(Debug, Clone, Copy)]
pub struct LevelVars<'t> {
    pub vision_edges: EdgeVars<'t>,
    pub text_edges: EdgeVars<'t>,
    pub gcn: Var<'t>,
    pub affinity: Var<'t>,
}

impl LevelParams {
    pub fn init<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        Self {
            vision_edges: EdgeGeneratorParams::init(width, width, rng),
            text_edges: EdgeGeneratorParams::init(width, width, rng),
            gcn: GcnParams::init(width, rng),
            affinity: AffinityParams::init(width, rng),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out: Vec<&mut DenseMatrix> = Vec::new();
        out.extend(self.vision_edges.tensors_mut());
        out.extend(self.text_edges.tensors_mut());
        out.extend(self.gcn.tensors_mut());
        out.extend(self.affinity.tensors_mut());
        out
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> LevelVars<'t> {
        LevelVars {
            vision_edges: self.vision_edges.bind(tape, trainable),
            text_edges: self.text_edges.bind(tape, trainable),
            gcn: self.gcn.bind(tape, trainable),
            affinity: self.affinity.bind(tape, trainable),
        }
    }
}

impl<'t> LevelVars<'t> {
    fn vars(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        out.extend(self.vision_edges.vars());
        out.extend(self.text_edges.vars());
        out.push(self.gcn);
        out.push(self.affinity);
        out
    }
}

/// Everything trained by the encoder step.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentParams {
    pub image_encoder: EncoderParams,
    pub text_encoder: EncoderParams,
    pub word: LevelParams,
    pub sentence: LevelParams,
    pub global_projection: DenseMatrix,
}

pub struct AlignmentVars<'t> {
    pub image_encoder: EncoderVars<'t>,
    pub text_encoder: EncoderVars<'t>,
    pub word: LevelVars<'t>,
    pub sentence: LevelVars<'t>,
    pub global_projection: Var<'t>,
}

impl AlignmentParams {
    pub fn init<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        Self {
            image_encoder: EncoderParams::init(width, rng),
            text_encoder: EncoderParams::init(width, rng),
            word: LevelParams::init(width, rng),
            sentence: LevelParams::init(width, rng),
            global_projection: DenseMatrix::identity(width),
        }
    }

    pub fn width(&self) -> usize {
        self.image_encoder.width()
    }

    /// Same order as [`AlignmentVars::vars`].
    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out: Vec<&mut DenseMatrix> = Vec::new();
        out.extend(self.image_encoder.tensors_mut());
        out.extend(self.text_encoder.tensors_mut());
        out.extend(self.word.tensors_mut());
        out.extend(self.sentence.tensors_mut());
        out.push(&mut self.global_projection);
        out
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> AlignmentVars<'t> {
        self.bind_each(|_, m| tape.leaf(m.clone(), trainable))
    }

    /// Every tensor in [`AlignmentVars::vars`] order.
    pub fn tensors(&self) -> Vec<&DenseMatrix> {
        let mut out = Vec::new();
        for enc in [&self.image_encoder, &self.text_encoder] {
            out.extend(enc.tensors());
        }
        for level in [&self.word, &self.sentence] {
            out.extend(level.vision_edges.tensors());
            out.extend(level.text_edges.tensors());
            out.push(level.gcn.weight());
            out.push(level.affinity.bilinear());
        }
        out.push(&self.global_projection);
        out
    }

    /// Binds tensor `i` (in [`Self::tensors`] order) to `leaf(i, tensor)`.
    pub fn bind_each<'t>(
        &self,
        mut leaf: impl FnMut(usize, &DenseMatrix) -> Var<'t>,
    ) -> AlignmentVars<'t> {
        let tensors = self.tensors();
        let mut vars = tensors.iter().enumerate().map(|(i, m)| leaf(i, m));
        let mut next = || vars.next().expect("one var per tensor");
        let mut encoder = || EncoderVars {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        let image_encoder = encoder();
        let text_encoder = encoder();
        let mut level = || LevelVars {
            vision_edges: EdgeVars {
                query: next(),
                key: next(),
            },
            text_edges: EdgeVars {
                query: next(),
                key: next(),
            },
            gcn: next(),
            affinity: next(),
        };
        let word = level();
        let sentence = level();
        AlignmentVars {
            image_encoder,
            text_encoder,
            word,
            sentence,
            global_projection: next(),
        }
    }
}

impl<'t> AlignmentVars<'t> {
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        out.extend(self.image_encoder.vars());
        out.extend(self.text_encoder.vars());
        out.extend(self.word.vars());
        out.extend(self.sentence.vars());
        out.push(self.global_projection);
        out
    }
}
