//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use dmpct::backbone::{featurize, Backbone, ProbMap, Sample, SegmenterState, Segmenter, TrainSummary, Trained};
use dmpct::config::ExperimentConfig;
use dmpct::phantom::{generate_dataset, GeneratedDataset};
use dmpct::{ChannelizedSlice, Plane, Result};

// ── fusion ──────────────────────────────────────────────────────────────────

/// Majority label if any label has two votes, else the most confident
/// plane's label, earliest plane (S, C, A) on exact ties.
pub fn fuse_oracle(labels: [u8; 3], conf: [f32; 3]) -> u8 {
    let mut votes: BTreeMap<u8, usize> = BTreeMap::new();
    for l in labels {
        *votes.entry(l).or_default() += 1;
    }
    if let Some((&l, _)) = votes.iter().find(|(_, &n)| n >= 2) {
        return l;
    }
    let top = conf.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let first = conf.iter().position(|&c| c == top).unwrap();
    labels[first]
}

// ── DSC ─────────────────────────────────────────────────────────────────────

pub fn dsc_oracle(pred: &[u8], truth: &[u8], organ: u8) -> f64 {
    let z: HashSet<usize> = (0..pred.len()).filter(|&i| pred[i] == organ).collect();
    let y: HashSet<usize> = (0..truth.len()).filter(|&i| truth[i] == organ).collect();
    if z.is_empty() && y.is_empty() {
        return 1.0;
    }
    2.0 * z.intersection(&y).count() as f64 / (z.len() + y.len()) as f64
}

// ── Wilcoxon ────────────────────────────────────────────────────────────────

/// Upper tail of the standard normal by composite Simpson integration.
fn normal_sf(z: f64) -> f64 {
    let (a, b, n) = (z, z + 40.0, 400_000usize);
    let h = (b - a) / n as f64;
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(a) + pdf(b);
    for i in 1..n {
        s += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Two-sided signed-rank p-value: drops zeros, midranks for exactly equal
/// |d|, brute-force sign enumeration below 10 pairs, otherwise the
/// tie-corrected normal approximation without continuity correction.
pub fn wilcoxon_oracle(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).filter(|d| *d != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return 1.0;
    }
    let rank = |v: f64| {
        let less = d.iter().filter(|x| x.abs() < v.abs()).count() as f64;
        let equal = d.iter().filter(|x| x.abs() == v.abs()).count() as f64;
        less + (equal + 1.0) / 2.0
    };
    let ranks: Vec<f64> = d.iter().map(|&v| rank(v)).collect();
    let w: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total: f64 = ranks.iter().sum();
    let mean = total / 2.0;
    if n < 10 {
        let mut extreme = 0u64;
        for mask in 0u64..(1 << n) {
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if (s - mean).abs() >= (w - mean).abs() - 1e-9 {
                extreme += 1;
            }
        }
        return (extreme as f64 / (1u64 << n) as f64).min(1.0);
    }
    let var: f64 = ranks.iter().map(|r| r * r).sum::<f64>() / 4.0;
    let z = (w - mean).abs() / var.sqrt();
    (2.0 * normal_sf(z)).min(1.0)
}

// ── softmax loss ────────────────────────────────────────────────────────────

/// Batch-mean cross-entropy of `state` with its parameters replaced by the
/// f64 vector `params`, recomputed pixel by pixel from [`featurize`].
pub fn loss_oracle(state: &SegmenterState, params: &[f64], batch: &[Sample<'_>]) -> f64 {
    let k = state.num_classes() as usize + 1;
    let spec = state.feature_spec();
    let f = spec.feature_dim();
    let h = state.hidden_units();
    let (shift, scale) = state.input_map();
    let mut total = 0.0;
    for s in batch {
        let (w, ht) = (s.image.width(), s.image.height());
        let mut sum = 0.0;
        for v in 0..ht {
            for u in 0..w {
                let raw = featurize(s.image, spec, (u, v)).unwrap();
                let x: Vec<f64> = (0..f)
                    .map(|i| (raw[i] - f64::from(shift[i])) * f64::from(scale[i]))
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
                    .map(|c| params[top + k * n + c] + (0..n).map(|i| params[top + c * n + i] * input[i]).sum::<f64>())
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

/// Largest per-coordinate relative error between the analytic gradient and
/// central differences of [`loss_oracle`].
pub fn max_gradient_error(state: &SegmenterState, batch: &[Sample<'_>]) -> f64 {
    let (_, grad) = state.gradient(batch).unwrap();
    let base: Vec<f64> = state.params().iter().map(|&p| f64::from(p)).collect();
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + eps;
        let up = loss_oracle(state, &p, batch);
        p[i] = base[i] - eps;
        let down = loss_oracle(state, &p, batch);
        let fd = (up - down) / (2.0 * eps);
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-7);
        worst = worst.max(rel);
    }
    worst
}

// ── mock backbone ───────────────────────────────────────────────────────────

/// Predicts one label everywhere. The label is the round index (training
/// calls / 3) modulo K+1, so every round's models differ.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstModel {
    pub k: u8,
    pub label: u8,
    pub plane: Plane,
}

impl Segmenter for ConstModel {
    fn num_classes(&self) -> u8 {
        self.k
    }

    fn forward(&self, slice: &ChannelizedSlice) -> ProbMap {
        let c = self.k as usize + 1;
        let mut probs = Vec::with_capacity(slice.pixels() * c);
        for _ in 0..slice.pixels() {
            for j in 0..c {
                probs.push(if j == self.label as usize { 1.0 } else { 0.0 });
            }
        }
        ProbMap::new(slice.width(), slice.height(), c, probs).unwrap()
    }
}

/// What one training call saw.
#[derive(Debug, Clone)]
pub struct TrainCall {
    pub plane: Plane,
    pub slices: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Label histogram over all training pixels.
    pub histogram: Vec<usize>,
}

#[derive(Debug, Default)]
pub struct MockBackbone {
    pub k: u8,
    calls: AtomicUsize,
    pub log: Mutex<Vec<TrainCall>>,
}

impl MockBackbone {
    pub fn new(k: u8) -> Self {
        MockBackbone {
            k,
            ..Default::default()
        }
    }

    pub fn calls(&self) -> Vec<TrainCall> {
        let mut v = self.log.lock().unwrap().clone();
        v.sort_by_key(|c| (c.seed, c.plane));
        v
    }
}

impl Backbone for MockBackbone {
    type Model = ConstModel;

    fn num_classes(&self) -> u8 {
        self.k
    }

    fn train(
        &self,
        plane: Plane,
        samples: &[Sample<'_>],
        iterations: usize,
        seed: u64,
        _init: Option<&ConstModel>,
    ) -> Result<Trained<ConstModel>> {
        let round = self.calls.fetch_add(1, Ordering::SeqCst) / 3;
        let mut histogram = vec![0usize; self.k as usize + 1];
        for s in samples {
            for &l in &s.labels.data {
                histogram[l as usize] += 1;
            }
        }
        self.log.lock().unwrap().push(TrainCall {
            plane,
            slices: samples.len(),
            iterations,
            seed,
            histogram,
        });
        Ok(Trained {
            model: ConstModel {
                k: self.k,
                label: (round % (self.k as usize + 1)) as u8,
                plane,
            },
            summary: TrainSummary::default(),
        })
    }
}

// ── fixtures ────────────────────────────────────────────────────────────────

/// A small phantom dataset (organs scaled with the volume).
pub fn small_dataset(size: usize, k: u8, counts: (usize, usize, usize), seed: u64) -> GeneratedDataset {
    let cfg = ExperimentConfig {
        volume_size: size,
        num_classes: k,
        labeled: counts.0,
        unlabeled: counts.1,
        test: counts.2,
        ..ExperimentConfig::default()
    };
    generate_dataset(&cfg.phantom_spec(), cfg.split_counts(), seed).unwrap()
}
