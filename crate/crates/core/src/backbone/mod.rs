//! Per-plane 2D segmenters.
//!
//! [`Segmenter`] is what the fusion and co-training code consume; any model
//! producing a per-pixel class distribution can sit behind it. [`Backbone`]
//! is the matching trainer. The reference implementation is
//! [`SoftmaxBackbone`], a per-pixel softmax classifier over local patch
//! features trained by mini-batch SGD on mean pixelwise cross-entropy.

mod features;
mod softmax;

pub use features::{featurize, FeatureMap, PatchFeatureSpec};
pub use softmax::{
    decode_state, encode_state, load_state, save_state, SegmenterState, SoftmaxBackbone,
    TrainConfig, PROB_FLOOR,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planar::{Plane, Slice2D};
use crate::volume::ChannelizedSlice;

/// Per-pixel class probabilities (K+1 per pixel, pixel-major).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    classes: usize,
    probs: Vec<f32>,
}

impl ProbMap {
    pub fn new(width: usize, height: usize, classes: usize, probs: Vec<f32>) -> Result<Self> {
        if classes == 0 || probs.len() != width * height * classes {
            return Err(Error::DimsMismatch(format!(
                "prob map {width}x{height} with {classes} classes and {} values",
                probs.len()
            )));
        }
        Ok(ProbMap {
            width,
            height,
            classes,
            probs,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// K+1, including background.
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn pixel(&self, p: usize) -> &[f32] {
        &self.probs[p * self.classes..(p + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.probs.chunks_exact(self.classes)
    }
}

/// Hard labels (argmax, ties to the lowest class) and their confidences
/// (the max probability).
#[derive(Debug, Clone, PartialEq)]
pub struct HardPrediction {
    pub labels: Slice2D<u8>,
    pub confidence: Slice2D<f32>,
}

/// Argmax over one probability row; ties go to the lowest class index.
#[inline]
pub fn argmax(row: &[f32]) -> (u8, f32) {
    let mut best = 0usize;
    for (k, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = k;
        }
    }
    (best as u8, row[best])
}

pub fn predict_hard(probs: &ProbMap) -> HardPrediction {
    let (labels, confidence): (Vec<u8>, Vec<f32>) = probs.rows().map(argmax).unzip();
    HardPrediction {
        labels: Slice2D {
            width: probs.width,
            height: probs.height,
            data: labels,
        },
        confidence: Slice2D {
            width: probs.width,
            height: probs.height,
            data: confidence,
        },
    }
}

/// A trained per-plane model.
pub trait Segmenter: Send + Sync {
    /// K, organ classes excluding background.
    fn num_classes(&self) -> u8;

    fn forward(&self, slice: &ChannelizedSlice) -> ProbMap;

    fn predict_hard(&self, slice: &ChannelizedSlice) -> HardPrediction {
        predict_hard(&self.forward(slice))
    }
}

/// One training example: a channelized slice and its label slice.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub image: &'a ChannelizedSlice,
    pub labels: &'a Slice2D<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub epoch_losses: Vec<f64>,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
}

pub struct Trained<M> {
    pub model: M,
    pub summary: TrainSummary,
}

/// Trains one plane's model.
pub trait Backbone: Send + Sync {
    type Model: Segmenter + Clone;

    fn num_classes(&self) -> u8;

    /// Run `iterations` optimisation steps on `samples`, starting from
    /// `init` if given, otherwise from a fresh state seeded by `seed`.
    fn train(
        &self,
        plane: Plane,
        samples: &[Sample<'_>],
        iterations: usize,
        seed: u64,
        init: Option<&Self::Model>,
    ) -> Result<Trained<Self::Model>>;
}
