//! Reference segmenter: per-pixel softmax over patch features, optionally
//! through one tanh hidden layer, trained with mini-batch SGD.
//!
//! Raw patch features pass through a fixed per-feature affine map (by
//! default the standardization fitted on the first training set) before the
//! model. Parameters live in one flat `f32` vector. Linear layout:
//! `W[(K+1) x F]` row-major then `b[K+1]`. Hidden layout (width `H`):
//! `W1[H x F]`, `b1[H]`, `W2[(K+1) x H]`, `b2[K+1]`.

use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{FeatureMap, PatchFeatureSpec};
use super::{Backbone, ProbMap, Sample, Segmenter, TrainSummary, Trained};
use crate::error::{Error, Result};
use crate::planar::{Plane, Slice2D};
use crate::volume::ChannelizedSlice;

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_slices: usize,
    /// Pixels sampled per slice per step; 0 means every pixel.
    pub pixels_per_slice: usize,
    pub learning_rate: f64,
    /// Hidden tanh units; 0 selects the linear model.
    pub hidden_units: usize,
    pub init_scale: f64,
    /// Standardize features with statistics of the initial training set.
    pub standardize: bool,
    /// Heavy-ball momentum used by `train` (0 = plain SGD).
    pub momentum: f64,
    /// Decay the step size linearly to zero over the run.
    pub lr_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_slices: 4,
            pixels_per_slice: 512,
            learning_rate: 0.5,
            hidden_units: 0,
            init_scale: 0.05,
            standardize: true,
            momentum: 0.9,
            lr_decay: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    classes: usize,
    dim: usize,
    hidden: usize,
}

impl Layout {
    fn len(&self) -> usize {
        if self.hidden == 0 {
            self.classes * (self.dim + 1)
        } else {
            self.hidden * (self.dim + 1) + self.classes * (self.hidden + 1)
        }
    }

    /// Offsets of (W1, b1, W2, b2); for the linear model W1/b1 are empty.
    fn offsets(&self) -> (usize, usize, usize, usize) {
        if self.hidden == 0 {
            (0, 0, 0, self.classes * self.dim)
        } else {
            let b1 = self.hidden * self.dim;
            let w2 = b1 + self.hidden;
            (0, b1, w2, w2 + self.classes * self.hidden)
        }
    }

    /// Width of the layer feeding the output logits.
    fn top_in(&self) -> usize {
        if self.hidden == 0 {
            self.dim
        } else {
            self.hidden
        }
    }
}

/// Parameters and bookkeeping of one trained plane model.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterState {
    plane: Plane,
    num_classes: u8,
    feature_spec: PatchFeatureSpec,
    hidden: usize,
    /// Per-feature affine input map `(f - shift) * scale`.
    shift: Vec<f32>,
    scale: Vec<f32>,
    params: Vec<f32>,
    rng_seed: u64,
    step_count: u64,
}

/// Scratch buffers for one forward/backward pass.
struct Scratch {
    feat: Vec<f64>,
    hid: Vec<f64>,
    logits: Vec<f64>,
}

impl SegmenterState {
    /// Fresh parameters: zeros for the linear model, seeded uniform
    /// `±init_scale` weights (zero biases) with a hidden layer.
    pub fn initial(
        plane: Plane,
        num_classes: u8,
        feature_spec: PatchFeatureSpec,
        hidden: usize,
        init_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        feature_spec.validate()?;
        let layout = Layout {
            classes: num_classes as usize + 1,
            dim: feature_spec.feature_dim(),
            hidden,
        };
        let mut params = vec![0.0f32; layout.len()];
        if hidden > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w1, b1, w2, b2) = layout.offsets();
            for range in [w1..b1, w2..b2] {
                for p in &mut params[range] {
                    *p = rng.random_range(-init_scale..=init_scale) as f32;
                }
            }
        }
        let dim = feature_spec.feature_dim();
        Ok(SegmenterState {
            plane,
            num_classes,
            feature_spec,
            hidden,
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
            params,
            rng_seed: seed,
            step_count: 0,
        })
    }

    /// Linear model with explicit weights (row-major `(K+1) x F`) and bias.
    pub fn linear(
        plane: Plane,
        num_classes: u8,
        feature_spec: PatchFeatureSpec,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        let classes = num_classes as usize + 1;
        if weights.len() != classes * feature_spec.feature_dim() || bias.len() != classes {
            return Err(Error::DimsMismatch(format!(
                "linear model needs {}x{} weights and {} biases",
                classes,
                feature_spec.feature_dim(),
                classes
            )));
        }
        let mut params = weights;
        params.extend(bias);
        let dim = feature_spec.feature_dim();
        SegmenterState::from_parts(
            plane,
            num_classes,
            feature_spec,
            0,
            (vec![0.0; dim], vec![1.0; dim]),
            params,
            0,
            0,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn from_parts(
        plane: Plane,
        num_classes: u8,
        feature_spec: PatchFeatureSpec,
        hidden: usize,
        (shift, scale): (Vec<f32>, Vec<f32>),
        params: Vec<f32>,
        rng_seed: u64,
        step_count: u64,
    ) -> Result<Self> {
        feature_spec.validate()?;
        let dim = feature_spec.feature_dim();
        if shift.len() != dim || scale.len() != dim {
            return Err(Error::DimsMismatch(format!(
                "input map needs {dim} shifts and scales, got {} and {}",
                shift.len(),
                scale.len()
            )));
        }
        if shift.iter().chain(&scale).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite input map".into()));
        }
        let layout = Layout {
            classes: num_classes as usize + 1,
            dim: feature_spec.feature_dim(),
            hidden,
        };
        if params.len() != layout.len() {
            return Err(Error::DimsMismatch(format!(
                "expected {} parameters, got {}",
                layout.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite model parameter".into()));
        }
        Ok(SegmenterState {
            plane,
            num_classes,
            feature_spec,
            hidden,
            shift,
            scale,
            params,
            rng_seed,
            step_count,
        })
    }

    /// Replace the input map; `scale` must be non-zero and finite.
    pub fn with_input_map(mut self, shift: Vec<f32>, scale: Vec<f32>) -> Result<Self> {
        let dim = self.feature_spec.feature_dim();
        if shift.len() != dim || scale.len() != dim {
            return Err(Error::DimsMismatch(format!("input map must have {dim} entries")));
        }
        if shift.iter().chain(&scale).any(|v| !v.is_finite()) || scale.contains(&0.0) {
            return Err(Error::InvalidArgument("input map must be finite with non-zero scale".into()));
        }
        self.shift = shift;
        self.scale = scale;
        Ok(self)
    }

    /// Same model with a replacement flat parameter vector.
    pub fn with_params(mut self, params: Vec<f32>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::DimsMismatch(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameters".into()));
        }
        self.params = params;
        Ok(self)
    }

    /// Input map `(shift, scale)` applied to raw features.
    pub fn input_map(&self) -> (&[f32], &[f32]) {
        (&self.shift, &self.scale)
    }

    /// Raw features to model inputs, in place.
    #[inline]
    pub fn map_inputs(&self, feat: &mut [f64]) {
        for ((f, &m), &s) in feat.iter_mut().zip(&self.shift).zip(&self.scale) {
            *f = (*f - f64::from(m)) * f64::from(s);
        }
    }

    fn layout(&self) -> Layout {
        Layout {
            classes: self.num_classes as usize + 1,
            dim: self.feature_spec.feature_dim(),
            hidden: self.hidden,
        }
    }

    pub fn plane(&self) -> Plane {
        self.plane
    }

    pub fn feature_spec(&self) -> &PatchFeatureSpec {
        &self.feature_spec
    }

    pub fn hidden_units(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    /// Output-layer weights, row-major `(K+1) x in`.
    pub fn weights(&self) -> &[f32] {
        let (_, _, w2, b2) = self.layout().offsets();
        &self.params[w2..b2]
    }

    pub fn bias(&self) -> &[f32] {
        let (_, _, _, b2) = self.layout().offsets();
        &self.params[b2..]
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    fn scratch(&self) -> Scratch {
        let l = self.layout();
        Scratch {
            feat: vec![0.0; l.dim],
            hid: vec![0.0; l.hidden],
            logits: vec![0.0; l.classes],
        }
    }

    /// Softmax probabilities into `s.logits` for the features in `s.feat`.
    fn probs_in_place(&self, s: &mut Scratch) {
        let l = self.layout();
        let (w1, b1, w2, b2) = l.offsets();
        let p = &self.params;
        let input: &[f64] = if l.hidden > 0 {
            for j in 0..l.hidden {
                let row = &p[w1 + j * l.dim..w1 + (j + 1) * l.dim];
                let a = f64::from(p[b1 + j])
                    + row.iter().zip(&s.feat).map(|(&w, &x)| f64::from(w) * x).sum::<f64>();
                s.hid[j] = a.tanh();
            }
            &s.hid
        } else {
            &s.feat
        };
        let n_in = l.top_in();
        for k in 0..l.classes {
            let row = &p[w2 + k * n_in..w2 + (k + 1) * n_in];
            s.logits[k] = f64::from(p[b2 + k])
                + row.iter().zip(input).map(|(&w, &x)| f64::from(w) * x).sum::<f64>();
        }
        softmax_in_place(&mut s.logits);
    }

    /// Mean pixelwise cross-entropy against `labels` (natural log, floored).
    pub fn loss(&self, slice: &ChannelizedSlice, labels: &Slice2D<u8>) -> Result<f64> {
        check_sample(self, slice, labels)?;
        let map = FeatureMap::new(slice, &self.feature_spec)?;
        let mut s = self.scratch();
        let mut total = 0.0;
        for v in 0..slice.height() {
            for u in 0..slice.width() {
                map.write(u, v, &mut s.feat);
                self.map_inputs(&mut s.feat);
                self.probs_in_place(&mut s);
                let y = labels.get(u, v) as usize;
                total -= s.logits[y].max(PROB_FLOOR).ln();
            }
        }
        Ok(total / slice.pixels() as f64)
    }

    /// Loss and analytic gradient (flat, same layout as the parameters) of
    /// the batch-mean loss over every pixel of every sample.
    pub fn gradient(&self, batch: &[Sample<'_>]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::EmptyTrainingSet("gradient of an empty batch".into()));
        }
        let mut acc = GradAcc::new(self.layout());
        let slice_weight = 1.0 / batch.len() as f64;
        for sample in batch {
            check_sample(self, sample.image, sample.labels)?;
            let map = FeatureMap::new(sample.image, &self.feature_spec)?;
            let (w, h) = (sample.image.width(), sample.image.height());
            let wt = slice_weight / (w * h) as f64;
            let mut s = self.scratch();
            for v in 0..h {
                for u in 0..w {
                    map.write(u, v, &mut s.feat);
                    self.map_inputs(&mut s.feat);
                    acc.add(self, &mut s, sample.labels.get(u, v), wt);
                }
            }
        }
        Ok((acc.loss, acc.grad))
    }

    /// One SGD step on the batch-mean loss over all pixels.
    pub fn sgd_step(&self, batch: &[Sample<'_>], learning_rate: f64) -> Result<SegmenterState> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be a finite non-negative number, got {learning_rate}"
            )));
        }
        if learning_rate == 0.0 {
            return Ok(self.clone());
        }
        let (loss, grad) = self.gradient(batch)?;
        let mut next = self.clone();
        next.apply(&grad, loss, learning_rate)?;
        Ok(next)
    }

    fn apply(&mut self, grad: &[f64], loss: f64, learning_rate: f64) -> Result<()> {
        self.check_finite(grad, loss)?;
        let updated: Vec<f32> = self
            .params
            .iter()
            .zip(grad)
            .map(|(&p, &g)| (f64::from(p) - learning_rate * g) as f32)
            .collect();
        if updated.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteGradient {
                step: self.step_count,
                loss,
            });
        }
        self.params = updated;
        self.step_count += 1;
        Ok(())
    }

    fn check_finite(&self, grad: &[f64], loss: f64) -> Result<()> {
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                step: self.step_count,
                loss,
            });
        }
        Ok(())
    }

    /// Seeded SGD: shuffled slice order per epoch, `batch_slices` slices per
    /// step and `pixels_per_slice` pixels drawn without replacement from
    /// each slice. Steps use heavy-ball momentum and, with `lr_decay`, the
    /// rate `lr * (1 - step / iterations)`.
    pub fn train(
        mut self,
        samples: &[Sample<'_>],
        iterations: usize,
        config: &TrainConfig,
        seed: u64,
    ) -> Result<(SegmenterState, TrainSummary)> {
        if samples.is_empty() {
            return Err(Error::EmptyTrainingSet(format!(
                "no {} slices to train on",
                self.plane
            )));
        }
        if config.batch_slices == 0 {
            return Err(Error::InvalidArgument("batch_slices must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::InvalidArgument("momentum must be in [0, 1)".into()));
        }
        for s in samples {
            check_sample(&self, s.image, s.labels)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if config.standardize && self.step_count == 0 {
            let (shift, scale) = feature_statistics(samples, &self.feature_spec, &mut rng)?;
            self = self.with_input_map(shift, scale)?;
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut summary = TrainSummary::default();
        let layout = self.layout();
        let mut s = self.scratch();
        let mut velocity = vec![0.0f64; layout.len()];
        let mut step = 0usize;
        while step < iterations {
            order.shuffle(&mut rng);
            let (mut epoch_sum, mut epoch_steps) = (0.0, 0usize);
            for chunk in order.chunks(config.batch_slices) {
                if step == iterations {
                    break;
                }
                let mut acc = GradAcc::new(layout);
                let slice_weight = 1.0 / chunk.len() as f64;
                for &i in chunk {
                    let sample = samples[i];
                    let map = FeatureMap::new(sample.image, &self.feature_spec)?;
                    let (w, n) = (sample.image.width(), sample.image.pixels());
                    let picks: Vec<usize> =
                        if config.pixels_per_slice == 0 || config.pixels_per_slice >= n {
                            (0..n).collect()
                        } else {
                            index::sample(&mut rng, n, config.pixels_per_slice).into_vec()
                        };
                    let wt = slice_weight / picks.len() as f64;
                    for p in picks {
                        let (u, v) = (p % w, p / w);
                        map.write(u, v, &mut s.feat);
                        self.map_inputs(&mut s.feat);
                        acc.add(&self, &mut s, sample.labels.data[p], wt);
                    }
                }
                for (v, g) in velocity.iter_mut().zip(&acc.grad) {
                    *v = config.momentum * *v + g;
                }
                let lr = if config.lr_decay {
                    config.learning_rate * (1.0 - step as f64 / iterations as f64)
                } else {
                    config.learning_rate
                };
                self.check_finite(&acc.grad, acc.loss)?;
                self.apply(&velocity, acc.loss, lr)?;
                summary.first_loss.get_or_insert(acc.loss);
                summary.last_loss = Some(acc.loss);
                epoch_sum += acc.loss;
                epoch_steps += 1;
                step += 1;
            }
            if epoch_steps > 0 {
                summary.epoch_losses.push(epoch_sum / epoch_steps as f64);
            }
        }
        summary.steps = step as u64;
        Ok((self, summary))
    }
}

const STAT_PIXELS_PER_SLICE: usize = 64;
const MIN_FEATURE_STD: f64 = 1e-3;

/// Per-feature mean and inverse std over a seeded pixel subsample.
fn feature_statistics(
    samples: &[Sample<'_>],
    spec: &PatchFeatureSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let dim = spec.feature_dim();
    let mut sum = vec![0.0f64; dim];
    let mut sq = vec![0.0f64; dim];
    let mut feat = vec![0.0f64; dim];
    let mut n = 0usize;
    for sample in samples {
        let map = FeatureMap::new(sample.image, spec)?;
        let (w, px) = (sample.image.width(), sample.image.pixels());
        for p in index::sample(rng, px, STAT_PIXELS_PER_SLICE.min(px)) {
            map.write(p % w, p / w, &mut feat);
            for ((s, q), &f) in sum.iter_mut().zip(&mut sq).zip(&feat) {
                *s += f;
                *q += f * f;
            }
            n += 1;
        }
    }
    let nf = n as f64;
    let shift = sum.iter().map(|s| (s / nf) as f32).collect();
    let scale = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| {
            let var = (q / nf - (s / nf) * (s / nf)).max(0.0);
            (1.0 / var.sqrt().max(MIN_FEATURE_STD)) as f32
        })
        .collect();
    Ok((shift, scale))
}

struct GradAcc {
    layout: Layout,
    loss: f64,
    grad: Vec<f64>,
    dz: Vec<f64>,
}

impl GradAcc {
    fn new(layout: Layout) -> Self {
        GradAcc {
            layout,
            loss: 0.0,
            grad: vec![0.0; layout.len()],
            dz: vec![0.0; layout.classes],
        }
    }

    /// Accumulate weight `wt` times the loss and gradient of one pixel whose
    /// features are already in `s.feat`.
    fn add(&mut self, state: &SegmenterState, s: &mut Scratch, label: u8, wt: f64) {
        state.probs_in_place(s);
        let l = self.layout;
        let y = label as usize;
        self.loss -= wt * s.logits[y].max(PROB_FLOOR).ln();
        for k in 0..l.classes {
            self.dz[k] = wt * (s.logits[k] - if k == y { 1.0 } else { 0.0 });
        }
        let (w1, b1, w2, b2) = l.offsets();
        let n_in = l.top_in();
        let input: &[f64] = if l.hidden > 0 { &s.hid } else { &s.feat };
        for k in 0..l.classes {
            let dz = self.dz[k];
            let row = &mut self.grad[w2 + k * n_in..w2 + (k + 1) * n_in];
            for (g, &x) in row.iter_mut().zip(input) {
                *g += dz * x;
            }
            self.grad[b2 + k] += dz;
        }
        if l.hidden > 0 {
            let p = &state.params;
            for j in 0..l.hidden {
                let mut dh = 0.0;
                for k in 0..l.classes {
                    dh += f64::from(p[w2 + k * l.hidden + j]) * self.dz[k];
                }
                let da = dh * (1.0 - s.hid[j] * s.hid[j]);
                let row = &mut self.grad[w1 + j * l.dim..w1 + (j + 1) * l.dim];
                for (g, &x) in row.iter_mut().zip(&s.feat) {
                    *g += da * x;
                }
                self.grad[b1 + j] += da;
            }
        }
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn check_sample(state: &SegmenterState, image: &ChannelizedSlice, labels: &Slice2D<u8>) -> Result<()> {
    if image.width() != labels.width || image.height() != labels.height {
        return Err(Error::DimsMismatch(format!(
            "image {}x{} vs labels {}x{}",
            image.width(),
            image.height(),
            labels.width,
            labels.height
        )));
    }
    if let Some(&value) = labels.data.iter().find(|&&l| l > state.num_classes) {
        return Err(Error::LabelRange {
            value,
            num_classes: state.num_classes as u16,
        });
    }
    Ok(())
}

impl Segmenter for SegmenterState {
    fn num_classes(&self) -> u8 {
        self.num_classes
    }

    fn forward(&self, slice: &ChannelizedSlice) -> ProbMap {
        let map = FeatureMap::new(slice, &self.feature_spec)
            .expect("slice channel count matches the model's feature spec");
        let classes = self.num_classes as usize + 1;
        let mut s = self.scratch();
        let mut probs = Vec::with_capacity(slice.pixels() * classes);
        for v in 0..slice.height() {
            for u in 0..slice.width() {
                map.write(u, v, &mut s.feat);
                self.map_inputs(&mut s.feat);
                self.probs_in_place(&mut s);
                probs.extend(s.logits.iter().map(|&p| p as f32));
            }
        }
        ProbMap::new(slice.width(), slice.height(), classes, probs).expect("consistent shape")
    }
}

/// The reference backbone: trains a [`SegmenterState`] per plane.
#[derive(Debug, Clone)]
pub struct SoftmaxBackbone {
    pub num_classes: u8,
    pub feature_spec: PatchFeatureSpec,
    pub config: TrainConfig,
}

impl SoftmaxBackbone {
    pub fn new(num_classes: u8, config: TrainConfig) -> Self {
        SoftmaxBackbone {
            num_classes,
            feature_spec: PatchFeatureSpec::default(),
            config,
        }
    }
}

impl Backbone for SoftmaxBackbone {
    type Model = SegmenterState;

    fn num_classes(&self) -> u8 {
        self.num_classes
    }

    fn train(
        &self,
        plane: Plane,
        samples: &[Sample<'_>],
        iterations: usize,
        seed: u64,
        init: Option<&SegmenterState>,
    ) -> Result<Trained<SegmenterState>> {
        let start = match init {
            Some(state) => {
                if state.num_classes != self.num_classes {
                    return Err(Error::ClassMismatch(format!(
                        "warm-start model has K={}, backbone K={}",
                        state.num_classes, self.num_classes
                    )));
                }
                let mut s = state.clone();
                s.plane = plane;
                s
            }
            None => SegmenterState::initial(
                plane,
                self.num_classes,
                self.feature_spec.clone(),
                self.config.hidden_units,
                self.config.init_scale,
                seed,
            )?,
        };
        let (model, summary) = start.train(samples, iterations, &self.config, seed)?;
        Ok(Trained { model, summary })
    }
}

// ── DMPW serialization ──────────────────────────────────────────────────────
//
// "DMPW" | u16 version=1 | u8 plane tag | u16 K | u16 channels | u16 n_radii
// | u32 radius x n_radii | u8 include_coords | u32 hidden
// | f32 input shift x F | f32 input scale x F | u64 rng_seed
// | u64 step_count | u32 n_params | f32 params (weights row-major, then bias)

const STATE_MAGIC: &[u8; 4] = b"DMPW";
const STATE_VERSION: u16 = 1;

pub fn encode_state(state: &SegmenterState) -> Vec<u8> {
    let spec = &state.feature_spec;
    let mut out = Vec::with_capacity(48 + 4 * (spec.pooling_radii.len() + state.params.len()));
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&STATE_VERSION.to_le_bytes());
    out.push(state.plane.tag());
    out.extend_from_slice(&u16::from(state.num_classes).to_le_bytes());
    out.extend_from_slice(&(spec.channels as u16).to_le_bytes());
    out.extend_from_slice(&(spec.pooling_radii.len() as u16).to_le_bytes());
    for r in &spec.pooling_radii {
        out.extend_from_slice(&r.to_le_bytes());
    }
    out.push(u8::from(spec.include_coords));
    out.extend_from_slice(&(state.hidden as u32).to_le_bytes());
    for v in state.shift.iter().chain(&state.scale) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&state.rng_seed.to_le_bytes());
    out.extend_from_slice(&state.step_count.to_le_bytes());
    out.extend_from_slice(&(state.params.len() as u32).to_le_bytes());
    for p in &state.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_state(buf: &[u8]) -> Result<SegmenterState> {
    use crate::volume::io::Reader;
    let mut r = Reader::new(buf);
    r.magic(STATE_MAGIC)?;
    let version = r.u16()?;
    if version != STATE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let tag = r.u8()?;
    let plane = Plane::from_tag(tag)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown plane tag {tag}")))?;
    let k = r.u16()?;
    let num_classes =
        u8::try_from(k).map_err(|_| Error::InvalidArgument(format!("class count {k} exceeds 255")))?;
    let channels = r.u16()? as usize;
    let n_radii = r.u16()? as usize;
    let pooling_radii = (0..n_radii).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let include_coords = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(Error::InvalidArgument(format!("bad include_coords byte {b}"))),
    };
    let hidden = r.u32()? as usize;
    let dim = channels * (1 + n_radii) + if include_coords { 2 } else { 0 };
    let shift = r.f32_vec(dim)?;
    let scale = r.f32_vec(dim)?;
    let rng_seed = r.u64()?;
    let step_count = r.u64()?;
    let n = r.u32()? as usize;
    let params = r.f32_vec(n)?;
    r.finish()?;
    SegmenterState::from_parts(
        plane,
        num_classes,
        PatchFeatureSpec {
            channels,
            pooling_radii,
            include_coords,
        },
        hidden,
        (shift, scale),
        params,
        rng_seed,
        step_count,
    )
}

pub fn save_state(state: &SegmenterState, path: impl AsRef<Path>) -> Result<()> {
    crate::volume::io::write_file(path.as_ref(), &encode_state(state))
}

pub fn load_state(path: impl AsRef<Path>) -> Result<SegmenterState> {
    decode_state(&crate::volume::io::read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::featurize;

    fn spec() -> PatchFeatureSpec {
        PatchFeatureSpec::default()
    }

    fn random_slice(w: usize, h: usize, rng: &mut ChaCha8Rng) -> ChannelizedSlice {
        let data = (0..w * h * 3).map(|_| rng.random::<f32>()).collect();
        ChannelizedSlice::new(w, h, 3, data).unwrap()
    }

    fn random_labels(w: usize, h: usize, k: u8, rng: &mut ChaCha8Rng) -> Slice2D<u8> {
        Slice2D::new(w, h, (0..w * h).map(|_| rng.random_range(0..=k)).collect()).unwrap()
    }

    fn zero_linear(k: u8) -> SegmenterState {
        let f = spec().feature_dim();
        let c = k as usize + 1;
        SegmenterState::linear(Plane::Axial, k, spec(), vec![0.0; c * f], vec![0.0; c]).unwrap()
    }

    /// Cross-entropy recomputed from `featurize` and f64 parameters.
    fn oracle_loss(state: &SegmenterState, params: &[f64], batch: &[Sample<'_>]) -> f64 {
        let k = state.num_classes as usize + 1;
        let f = state.feature_spec.feature_dim();
        let h = state.hidden;
        let (shift, scale) = state.input_map();
        let mut total = 0.0;
        for s in batch {
            let (w, ht) = (s.image.width(), s.image.height());
            let mut sum = 0.0;
            for v in 0..ht {
                for u in 0..w {
                    let x: Vec<f64> = featurize(s.image, &state.feature_spec, (u, v))
                        .unwrap()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| (x - f64::from(shift[i])) * f64::from(scale[i]))
                        .collect();
                    let (input, top) = if h == 0 {
                        (x, 0)
                    } else {
                        let hid = (0..h)
                            .map(|j| {
                                let a: f64 = (0..f).map(|i| params[j * f + i] * x[i]).sum();
                                (a + params[h * f + j]).tanh()
                            })
                            .collect();
                        (hid, h * f + h)
                    };
                    let n = input.len();
                    let z: Vec<f64> = (0..k)
                        .map(|c| {
                            params[top + k * n + c]
                                + (0..n).map(|i| params[top + c * n + i] * input[i]).sum::<f64>()
                        })
                        .collect();
                    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    sum += lse - z[s.labels.get(u, v) as usize];
                }
            }
            total += sum / (w * ht) as f64;
        }
        total / batch.len() as f64
    }

    #[test]
    fn zero_model_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_slice(5, 4, &mut rng);
        let m = zero_linear(2).forward(&img);
        for row in m.rows() {
            for &p in row {
                assert!((p - 1.0 / 3.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn large_background_bias_dominates() {
        let f = spec().feature_dim();
        let state =
            SegmenterState::linear(Plane::Sagittal, 2, spec(), vec![0.0; 3 * f], vec![10.0, 0.0, 0.0])
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = state.forward(&random_slice(6, 6, &mut rng));
        for row in m.rows() {
            assert!(row[0] > 0.9999);
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn rows_sum_to_one_for_random_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for hidden in [0, 5] {
            let state = SegmenterState::initial(Plane::Coronal, 3, spec(), hidden, 2.0, 9).unwrap();
            let state = if hidden == 0 {
                let n = state.params.len();
                let p: Vec<f32> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
                SegmenterState { params: p, ..state }
            } else {
                state
            };
            let m = state.forward(&random_slice(7, 3, &mut rng));
            for row in m.rows() {
                assert!((row.iter().map(|&p| f64::from(p)).sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn uniform_prediction_loss_is_ln_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_slice(4, 4, &mut rng);
        let labels = random_labels(4, 4, 2, &mut rng);
        let loss = zero_linear(2).loss(&img, &labels).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let f = spec().feature_dim();
        let state =
            SegmenterState::linear(Plane::Axial, 1, spec(), vec![0.0; 2 * f], vec![40.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_slice(3, 3, &mut rng);
        let labels = Slice2D::new(3, 3, vec![0u8; 9]).unwrap();
        assert!(state.loss(&img, &labels).unwrap() < 1e-12);
    }

    #[test]
    fn loss_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for hidden in [0, 4] {
            let state = SegmenterState::initial(Plane::Axial, 2, spec(), hidden, 0.7, 11).unwrap();
            let n = state.params.len();
            let p: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let state = SegmenterState { params: p, ..state };
            let img = random_slice(6, 5, &mut rng);
            let labels = random_labels(6, 5, 2, &mut rng);
            let params: Vec<f64> = state.params.iter().map(|&p| f64::from(p)).collect();
            let expect = oracle_loss(&state, &params, &[Sample { image: &img, labels: &labels }]);
            assert!((state.loss(&img, &labels).unwrap() - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn single_pixel_gradient_by_hand() {
        // K=1, zero model: p = (1/2, 1/2), label 1 gives dz = (1/2, -1/2).
        let img = ChannelizedSlice::new(1, 1, 3, vec![0.2, 0.4, 0.6]).unwrap();
        let labels = Slice2D::new(1, 1, vec![1u8]).unwrap();
        let state = zero_linear(1);
        let (loss, grad) = state.gradient(&[Sample { image: &img, labels: &labels }]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        let x = featurize(&img, &spec(), (0, 0)).unwrap();
        assert_eq!(x[..3], [0.2f32 as f64, 0.4f32 as f64, 0.6f32 as f64]);
        let f = x.len();
        for i in 0..f {
            assert!((grad[i] - 0.5 * x[i]).abs() < 1e-12);
            assert!((grad[f + i] + 0.5 * x[i]).abs() < 1e-12);
        }
        assert!((grad[2 * f] - 0.5).abs() < 1e-12);
        assert!((grad[2 * f + 1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (hidden, k) in [(0, 1), (0, 3), (3, 2)] {
            let state = SegmenterState::initial(Plane::Coronal, k, spec(), hidden, 0.5, 13).unwrap();
            let n = state.params.len();
            let p: Vec<f32> = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
            let dim = spec().feature_dim();
            let shift: Vec<f32> = (0..dim).map(|_| rng.random_range(0.0..0.5)).collect();
            let scale: Vec<f32> = (0..dim).map(|_| rng.random_range(0.5..2.0)).collect();
            let state = SegmenterState { params: p, ..state }.with_input_map(shift, scale).unwrap();
            let imgs: Vec<_> = (0..2).map(|_| random_slice(5, 4, &mut rng)).collect();
            let labs: Vec<_> = (0..2).map(|_| random_labels(5, 4, k, &mut rng)).collect();
            let batch: Vec<Sample<'_>> =
                imgs.iter().zip(&labs).map(|(image, labels)| Sample { image, labels }).collect();
            let (loss, grad) = state.gradient(&batch).unwrap();
            let base: Vec<f64> = state.params.iter().map(|&p| f64::from(p)).collect();
            assert!((loss - oracle_loss(&state, &base, &batch)).abs() < 1e-10);
            let eps = 1e-5;
            for i in 0..n {
                let mut plus = base.clone();
                plus[i] += eps;
                let mut minus = base.clone();
                minus[i] -= eps;
                let fd = (oracle_loss(&state, &plus, &batch) - oracle_loss(&state, &minus, &batch))
                    / (2.0 * eps);
                let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-7);
                assert!(rel <= 1e-4, "coord {i}: analytic {} fd {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_slice(4, 4, &mut rng);
        let labels = random_labels(4, 4, 2, &mut rng);
        let state = zero_linear(2);
        let next = state.sgd_step(&[Sample { image: &img, labels: &labels }], 0.0).unwrap();
        assert_eq!(next, state);
        assert!(state.sgd_step(&[Sample { image: &img, labels: &labels }], -1.0).is_err());
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = random_slice(4, 4, &mut rng);
        let labels = random_labels(4, 4, 2, &mut rng);
        let batch = [Sample { image: &img, labels: &labels }];
        let state = zero_linear(2);
        let (l0, grad) = state.gradient(&batch).unwrap();
        let next = state.sgd_step(&batch, 0.1).unwrap();
        for (p, g) in next.params.iter().zip(&grad) {
            assert!((f64::from(*p) + 0.1 * g).abs() < 1e-6);
        }
        assert!(next.loss(&img, &labels).unwrap() < l0);
        assert_eq!(next.step_count(), 1);
    }

    fn blob_data(n: usize, rng: &mut ChaCha8Rng) -> Vec<(ChannelizedSlice, Slice2D<u8>)> {
        (0..n)
            .map(|_| {
                let (w, h) = (12, 12);
                let labels: Vec<u8> = (0..w * h)
                    .map(|p| {
                        let (u, v) = ((p % w) as f64 - 5.5, (p / w) as f64 - 5.5);
                        u8::from(u * u + v * v < 12.0)
                    })
                    .collect();
                let mut data = Vec::with_capacity(w * h * 3);
                for _ in 0..3 {
                    for &l in &labels {
                        data.push(0.3 + 0.4 * f32::from(l) + rng.random_range(-0.1..0.1));
                    }
                }
                (ChannelizedSlice::new(w, h, 3, data).unwrap(), Slice2D::new(w, h, labels).unwrap())
            })
            .collect()
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data = blob_data(6, &mut rng);
        let samples: Vec<Sample<'_>> =
            data.iter().map(|(image, labels)| Sample { image, labels }).collect();
        let cfg = TrainConfig {
            batch_slices: 2,
            pixels_per_slice: 64,
            ..TrainConfig::default()
        };
        let (a, sa) = zero_linear(1).train(&samples, 60, &cfg, 5).unwrap();
        let (b, _) = zero_linear(1).train(&samples, 60, &cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa.steps, 60);
        assert_eq!(sa.epoch_losses.len(), 20);
        assert!(sa.epoch_losses.last().unwrap() < &(0.5 * sa.epoch_losses[0]));
        let (c, _) = zero_linear(1).train(&samples, 60, &cfg, 6).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn zero_iterations_returns_initial_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = blob_data(2, &mut rng);
        let samples: Vec<Sample<'_>> =
            data.iter().map(|(image, labels)| Sample { image, labels }).collect();
        let bb = SoftmaxBackbone::new(1, TrainConfig { hidden_units: 3, ..TrainConfig::default() });
        let t = bb.train(Plane::Axial, &samples, 0, 42, None).unwrap();
        let init = SegmenterState::initial(Plane::Axial, 1, spec(), 3, bb.config.init_scale, 42).unwrap();
        assert_eq!(t.model.params(), init.params());
        assert_eq!(t.summary.steps, 0);
    }

    #[test]
    fn training_rejects_bad_input() {
        let cfg = TrainConfig::default();
        assert!(matches!(
            zero_linear(1).train(&[], 5, &cfg, 0),
            Err(Error::EmptyTrainingSet(_))
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let img = random_slice(3, 3, &mut rng);
        let labels = Slice2D::new(3, 3, vec![2u8; 9]).unwrap();
        let r = zero_linear(1).train(&[Sample { image: &img, labels: &labels }], 5, &cfg, 0);
        assert!(matches!(r, Err(Error::LabelRange { value: 2, .. })));
        let short = Slice2D::new(2, 3, vec![0u8; 6]).unwrap();
        let r = zero_linear(1).train(&[Sample { image: &img, labels: &short }], 5, &cfg, 0);
        assert!(matches!(r, Err(Error::DimsMismatch(_))));
    }

    #[test]
    fn diverging_training_reports_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let data = blob_data(2, &mut rng);
        let samples: Vec<Sample<'_>> =
            data.iter().map(|(image, labels)| Sample { image, labels }).collect();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            ..TrainConfig::default()
        };
        let r = zero_linear(1).train(&samples, 10, &cfg, 0);
        assert!(matches!(r, Err(Error::NonFiniteGradient { .. })), "{r:?}");
    }

    #[test]
    fn state_round_trips_through_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let data = blob_data(2, &mut rng);
        let samples: Vec<Sample<'_>> =
            data.iter().map(|(image, labels)| Sample { image, labels }).collect();
        for hidden in [0, 4] {
            let bb = SoftmaxBackbone::new(1, TrainConfig { hidden_units: hidden, ..TrainConfig::default() });
            let t = bb.train(Plane::Coronal, &samples, 7, 3, None).unwrap();
            let bytes = encode_state(&t.model);
            let back = decode_state(&bytes).unwrap();
            assert_eq!(back, t.model);
            assert_eq!(back.forward(&data[0].0), t.model.forward(&data[0].0));
        }
    }

    #[test]
    fn decode_rejects_corruption() {
        let bytes = encode_state(&zero_linear(2));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_state(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_state(&bytes[..bytes.len() - 2]), Err(Error::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_state(&long), Err(Error::TrailingBytes { .. })));
    }

    #[test]
    fn warm_start_continues_from_given_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let data = blob_data(3, &mut rng);
        let samples: Vec<Sample<'_>> =
            data.iter().map(|(image, labels)| Sample { image, labels }).collect();
        let bb = SoftmaxBackbone::new(1, TrainConfig::default());
        let first = bb.train(Plane::Axial, &samples, 20, 1, None).unwrap().model;
        let warm = bb.train(Plane::Axial, &samples, 0, 2, Some(&first)).unwrap().model;
        assert_eq!(warm.params(), first.params());
        assert_eq!(warm.input_map(), first.input_map());
        let other = SoftmaxBackbone::new(2, TrainConfig::default());
        assert!(matches!(
            other.train(Plane::Axial, &samples, 1, 2, Some(&first)),
            Err(Error::ClassMismatch(_))
        ));
    }
}
