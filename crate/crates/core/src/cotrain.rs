//! Teacher/student co-training over the three planes, plus the baselines.
//!
//! [`run_dmpct`] follows the reference loop exactly:
//!
//! ```text
//! S <- S_L
//! for t in 1..=T:
//!     train M_S, M_C, M_A on the sagittal/coronal/axial slices of S
//!     pseudo-label every unlabeled volume by fused multi-planar inference
//!     S <- S_L ∪ pseudo-labeled S_U
//! train M_S, M_C, M_A on the final S
//! ```
//!
//! Round `t` in logs and checkpoints counts training passes, so the final
//! students belong to round `T + 1`.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ProbMap, Sample, Segmenter, TrainSummary, Trained};
use crate::error::{Error, Result};
use crate::fusion::{fuse_volume, PlanePrediction};
use crate::planar::{self, Plane, Slice2D};
use crate::seed::derive;
use crate::volume::{ChannelizedSlice, Dims, LabelMask, Volume, WindowSpec, DEFAULT_WINDOWS};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCase {
    pub id: String,
    pub volume: Volume,
    pub mask: LabelMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledCase {
    pub id: String,
    pub volume: Volume,
}

/// Manually labeled, unlabeled and held-out test volumes.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub labeled: Vec<LabeledCase>,
    pub unlabeled: Vec<UnlabeledCase>,
    pub test: Vec<LabeledCase>,
}

impl Dataset {
    /// Shared K of every mask; errors on disagreement or dims mismatch.
    pub fn num_classes(&self) -> Result<u8> {
        let mut k = None;
        for case in self.labeled.iter().chain(&self.test) {
            if case.mask.dims() != case.volume.dims() {
                return Err(Error::DimsMismatch(format!(
                    "case {}: volume {} vs mask {}",
                    case.id,
                    case.volume.dims(),
                    case.mask.dims()
                )));
            }
            match k {
                None => k = Some(case.mask.num_classes()),
                Some(k0) if k0 != case.mask.num_classes() => {
                    return Err(Error::ClassMismatch(format!(
                        "case {} has K={}, expected K={k0}",
                        case.id,
                        case.mask.num_classes()
                    )))
                }
                _ => {}
            }
        }
        k.ok_or_else(|| Error::EmptyTrainingSet("dataset has no labeled cases".into()))
    }
}

/// One model per plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneModelBundle<M> {
    models: [M; 3],
}

impl<M: Segmenter> PlaneModelBundle<M> {
    /// Models in sagittal, coronal, axial order; all must share K.
    pub fn new(models: [M; 3]) -> Result<Self> {
        let k = models[0].num_classes();
        if models.iter().any(|m| m.num_classes() != k) {
            return Err(Error::ClassMismatch("plane models disagree on K".into()));
        }
        Ok(PlaneModelBundle { models })
    }

    pub fn get(&self, plane: Plane) -> &M {
        &self.models[plane.index()]
    }

    pub fn num_classes(&self) -> u8 {
        self.models[0].num_classes()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Plane, &M)> {
        Plane::ALL.into_iter().zip(self.models.iter())
    }

    pub fn into_models(self) -> [M; 3] {
        self.models
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Supervised teacher only, fused at inference.
    Fcn,
    /// Per-plane self-training without cross-plane fusion during training.
    Spsl,
    /// Multi-planar co-training.
    Dmpct,
    /// Co-training that adds only the most confident pseudo-labeled slices.
    DmpctConfident,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Fcn, Mode::Spsl, Mode::Dmpct, Mode::DmpctConfident];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Fcn => "fcn",
            Mode::Spsl => "spsl",
            Mode::Dmpct => "dmpct",
            Mode::DmpctConfident => "dmpct-confident",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CotrainConfig {
    pub rounds: usize,
    pub teacher_iters: usize,
    pub student_iters: usize,
    pub windows: Vec<WindowSpec>,
    pub warm_start: bool,
    /// Slices kept per plane per round in [`Mode::DmpctConfident`].
    pub top_n: usize,
    pub seed: u64,
}

impl Default for CotrainConfig {
    fn default() -> Self {
        CotrainConfig {
            rounds: 2,
            teacher_iters: 1000,
            student_iters: 2000,
            windows: DEFAULT_WINDOWS.to_vec(),
            warm_start: false,
            top_n: 5000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Train,
    PseudoLabel,
    Fuse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub steps: u64,
    pub first: Option<f64>,
    pub last: Option<f64>,
    pub epochs: usize,
}

impl From<&TrainSummary> for LossSummary {
    fn from(s: &TrainSummary) -> Self {
        LossSummary {
            steps: s.steps,
            first: s.first_loss,
            last: s.last_loss,
            epochs: s.epoch_losses.len(),
        }
    }
}

/// One line of `runlog.json-lines`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub round: usize,
    pub plane: Option<Plane>,
    pub action: Action,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<LossSummary>,
    /// Training slices (train) or volumes/slices produced (pseudo-label).
    pub items: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub events: Vec<RunEvent>,
}

impl RunLog {
    fn push(&mut self, event: RunEvent) {
        self.events.push(event);
    }

    pub fn count(&self, action: Action, plane: Option<Plane>) -> usize {
        self.events
            .iter()
            .filter(|e| e.action == action && e.plane == plane)
            .count()
    }

    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Snapshot handed to the round observer (for checkpointing).
pub struct RoundRecord<'a, M> {
    pub round: usize,
    pub models: &'a PlaneModelBundle<M>,
    /// Pseudo-labels produced by this round's models, in unlabeled order.
    pub pseudo: Option<&'a [LabelMask]>,
    /// Masks of the labeled cases as used for this round's training.
    pub labeled: &'a [LabelMask],
}

#[derive(Debug)]
pub struct RunOutput<M> {
    pub bundle: PlaneModelBundle<M>,
    pub log: RunLog,
    /// Pseudo-labels of the last labeling pass (empty for supervised runs).
    pub pseudo_labels: Vec<LabelMask>,
}

pub type Observer<'o, M> = &'o mut dyn FnMut(&RoundRecord<'_, M>) -> Result<()>;

/// Channelized slices of one volume along each plane.
struct CaseImages {
    dims: Dims,
    planes: [Vec<ChannelizedSlice>; 3],
}

impl CaseImages {
    fn new(volume: &Volume, windows: &[WindowSpec]) -> Result<Self> {
        let mut planes: [Vec<ChannelizedSlice>; 3] = Default::default();
        for p in Plane::ALL {
            planes[p.index()] = crate::volume::channelize_plane(volume, windows, p)?;
        }
        Ok(CaseImages {
            dims: volume.dims(),
            planes,
        })
    }
}

type PlaneLabels = [Vec<Slice2D<u8>>; 3];

fn plane_labels(mask: &LabelMask) -> PlaneLabels {
    Plane::ALL.map(|p| planar::slice(mask, p).slices)
}

struct Workspace {
    k: u8,
    labeled_images: Vec<CaseImages>,
    labeled_labels: Vec<PlaneLabels>,
    labeled_masks: Vec<LabelMask>,
    unlabeled_images: Vec<CaseImages>,
}

impl Workspace {
    fn new(dataset: &Dataset, config: &CotrainConfig, need_unlabeled: bool) -> Result<Self> {
        if dataset.labeled.is_empty() {
            return Err(Error::EmptyTrainingSet("labeled set is empty".into()));
        }
        let k = dataset.num_classes()?;
        let labeled_images = dataset
            .labeled
            .par_iter()
            .map(|c| CaseImages::new(&c.volume, &config.windows))
            .collect::<Result<Vec<_>>>()?;
        let unlabeled_images = if need_unlabeled {
            dataset
                .unlabeled
                .par_iter()
                .map(|c| CaseImages::new(&c.volume, &config.windows))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Workspace {
            k,
            labeled_labels: dataset.labeled.iter().map(|c| plane_labels(&c.mask)).collect(),
            labeled_masks: dataset.labeled.iter().map(|c| c.mask.clone()).collect(),
            labeled_images,
            unlabeled_images,
        })
    }

    /// Training samples for `plane`: every labeled slice plus every slice of
    /// the extra (image, labels) pairs.
    fn samples<'a>(&'a self, plane: Plane, extra: &[(&'a ChannelizedSlice, &'a Slice2D<u8>)]) -> Vec<Sample<'a>> {
        let p = plane.index();
        let mut out: Vec<Sample<'a>> = self
            .labeled_images
            .iter()
            .zip(&self.labeled_labels)
            .flat_map(|(img, lab)| {
                img.planes[p]
                    .iter()
                    .zip(&lab[p])
                    .map(|(image, labels)| Sample { image, labels })
            })
            .collect();
        out.extend(extra.iter().map(|&(image, labels)| Sample { image, labels }));
        out
    }
}

fn train_seed(master: u64, plane: Plane, round: usize) -> u64 {
    derive(master, &format!("train/{}", plane.name()), round as u64)
}

fn budget(config: &CotrainConfig, round: usize) -> usize {
    if round <= 1 {
        config.teacher_iters
    } else {
        config.student_iters
    }
}

/// Train all three planes (in parallel), logging in plane order.
fn train_round<'a, B: Backbone>(
    backbone: &B,
    config: &CotrainConfig,
    round: usize,
    per_plane: [Vec<Sample<'a>>; 3],
    previous: Option<&PlaneModelBundle<B::Model>>,
    log: &mut RunLog,
) -> Result<PlaneModelBundle<B::Model>> {
    let results: Vec<(Result<Trained<B::Model>>, f64)> = Plane::ALL
        .par_iter()
        .map(|&plane| {
            let start = Instant::now();
            let init = previous.filter(|_| config.warm_start).map(|b| b.get(plane));
            let r = backbone.train(
                plane,
                &per_plane[plane.index()],
                budget(config, round),
                train_seed(config.seed, plane, round),
                init,
            );
            (r, start.elapsed().as_secs_f64() * 1e3)
        })
        .collect();
    let mut models = Vec::with_capacity(3);
    for ((res, ms), plane) in results.into_iter().zip(Plane::ALL) {
        let trained = res?;
        log.push(RunEvent {
            round,
            plane: Some(plane),
            action: Action::Train,
            loss: Some(LossSummary::from(&trained.summary)),
            items: per_plane[plane.index()].len(),
            wall_ms: ms,
        });
        models.push(trained.model);
    }
    let models: [B::Model; 3] = models
        .try_into()
        .unwrap_or_else(|_| unreachable!("three planes"));
    PlaneModelBundle::new(models)
}

fn infer(model: &impl Segmenter, slices: &[ChannelizedSlice]) -> Vec<ProbMap> {
    slices.par_iter().map(|s| model.forward(s)).collect()
}

fn plane_predictions<M: Segmenter>(bundle: &PlaneModelBundle<M>, images: &CaseImages) -> Result<Vec<(PlanePrediction, Vec<ProbMap>)>> {
    Plane::ALL
        .iter()
        .map(|&p| {
            let maps = infer(bundle.get(p), &images.planes[p.index()]);
            let pred = PlanePrediction::from_prob_maps(p, images.dims, &maps)?;
            Ok((pred, maps))
        })
        .collect()
}

/// Fused pseudo-labels for every unlabeled case.
fn fused_labels<M: Segmenter>(
    bundle: &PlaneModelBundle<M>,
    images: &[CaseImages],
    keep_maps: bool,
) -> Result<Vec<(LabelMask, Vec<Vec<ProbMap>>)>> {
    images
        .par_iter()
        .map(|img| {
            let preds = plane_predictions(bundle, img)?;
            let (preds, maps): (Vec<_>, Vec<_>) = preds.into_iter().unzip();
            let fused = fuse_volume(&preds, bundle.num_classes(), false)?;
            Ok((fused.labels, if keep_maps { maps } else { Vec::new() }))
        })
        .collect()
}

fn wrap<T>(r: Result<T>, log: &RunLog) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::RunAborted { .. } => e,
        e => Error::RunAborted {
            source: Box::new(e),
            log: Box::new(log.clone()),
        },
    })
}

/// Train the three plane models on the labeled set only.
pub fn train_teacher<B: Backbone>(
    backbone: &B,
    dataset: &Dataset,
    config: &CotrainConfig,
) -> Result<(PlaneModelBundle<B::Model>, RunLog)> {
    let out = run_supervised(backbone, dataset, config, None)?;
    Ok((out.bundle, out.log))
}

/// Pseudo-label unlabeled volumes by fused inference with `bundle`.
pub fn generate_pseudo_labels<M: Segmenter>(
    bundle: &PlaneModelBundle<M>,
    unlabeled: &[UnlabeledCase],
    windows: &[WindowSpec],
) -> Result<Vec<LabelMask>> {
    unlabeled
        .par_iter()
        .map(|c| {
            crate::fusion::predict_volume(bundle, &c.volume, windows, false).map(|(f, _)| f.labels)
        })
        .collect()
}

/// Supervised baseline: the teacher is the final model.
pub fn run_supervised<B: Backbone>(
    backbone: &B,
    dataset: &Dataset,
    config: &CotrainConfig,
    observer: Option<Observer<'_, B::Model>>,
) -> Result<RunOutput<B::Model>> {
    let ws = Workspace::new(dataset, config, false)?;
    check_backbone(backbone, ws.k)?;
    let mut log = RunLog::default();
    let per_plane = Plane::ALL.map(|p| ws.samples(p, &[]));
    let bundle = wrap(train_round(backbone, config, 1, per_plane, None, &mut log), &log)?;
    if let Some(obs) = observer {
        obs(&RoundRecord {
            round: 1,
            models: &bundle,
            pseudo: None,
            labeled: &ws.labeled_masks,
        })?;
    }
    Ok(RunOutput {
        bundle,
        log,
        pseudo_labels: Vec::new(),
    })
}

fn check_backbone<B: Backbone>(backbone: &B, k: u8) -> Result<()> {
    if backbone.num_classes() != k {
        return Err(Error::ClassMismatch(format!(
            "backbone K={} but dataset K={k}",
            backbone.num_classes()
        )));
    }
    Ok(())
}

fn check_rounds(config: &CotrainConfig) -> Result<()> {
    if config.rounds == 0 {
        return Err(Error::InvalidArgument("T must be ≥ 1".into()));
    }
    Ok(())
}

/// Multi-planar co-training (fused pseudo-labels, students retrained on
/// S_L ∪ pseudo-labeled S_U each round).
pub fn run_dmpct<B: Backbone>(
    backbone: &B,
    dataset: &Dataset,
    config: &CotrainConfig,
    mut observer: Option<Observer<'_, B::Model>>,
) -> Result<RunOutput<B::Model>> {
    check_rounds(config)?;
    let ws = Workspace::new(dataset, config, true)?;
    check_backbone(backbone, ws.k)?;
    let mut log = RunLog::default();
    let mut pseudo: Vec<LabelMask> = Vec::new();
    let mut pseudo_slices: Vec<PlaneLabels> = Vec::new();
    let mut bundle: Option<PlaneModelBundle<B::Model>> = None;

    for round in 1..=config.rounds + 1 {
        let extra = Plane::ALL.map(|p| {
            ws.unlabeled_images
                .iter()
                .zip(&pseudo_slices)
                .flat_map(|(img, lab)| img.planes[p.index()].iter().zip(&lab[p.index()]))
                .collect::<Vec<_>>()
        });
        let per_plane = Plane::ALL.map(|p| ws.samples(p, &extra[p.index()]));
        let trained = wrap(
            train_round(backbone, config, round, per_plane, bundle.as_ref(), &mut log),
            &log,
        )?;

        if round <= config.rounds {
            let start = Instant::now();
            let fused = wrap(fused_labels(&trained, &ws.unlabeled_images, false), &log)?;
            pseudo = fused.into_iter().map(|(m, _)| m).collect();
            let ms = start.elapsed().as_secs_f64() * 1e3;
            log.push(RunEvent {
                round,
                plane: None,
                action: Action::PseudoLabel,
                loss: None,
                items: pseudo.len(),
                wall_ms: ms,
            });
            log.push(RunEvent {
                round,
                plane: None,
                action: Action::Fuse,
                loss: None,
                items: pseudo.len(),
                wall_ms: 0.0,
            });
            pseudo_slices = pseudo.iter().map(plane_labels).collect();
        }
        if let Some(obs) = observer.as_deref_mut() {
            obs(&RoundRecord {
                round,
                models: &trained,
                pseudo: (round <= config.rounds).then_some(pseudo.as_slice()),
                labeled: &ws.labeled_masks,
            })?;
        }
        bundle = Some(trained);
    }
    Ok(RunOutput {
        bundle: bundle.expect("at least one round"),
        log,
        pseudo_labels: pseudo,
    })
}

/// Single-plane self-training: each plane relabels S_U from its own stacked
/// predictions only. The returned bundle is fused at inference as usual.
pub fn run_spsl<B: Backbone>(
    backbone: &B,
    dataset: &Dataset,
    config: &CotrainConfig,
    mut observer: Option<Observer<'_, B::Model>>,
) -> Result<RunOutput<B::Model>> {
    check_rounds(config)?;
    let ws = Workspace::new(dataset, config, true)?;
    check_backbone(backbone, ws.k)?;
    let mut log = RunLog::default();
    // pseudo[plane][case]: that plane's own stacked labels, re-sliced along it
    let mut pseudo_slices: [Vec<Vec<Slice2D<u8>>>; 3] = Default::default();
    let mut last_masks: Vec<LabelMask> = Vec::new();
    let mut bundle: Option<PlaneModelBundle<B::Model>> = None;

    for round in 1..=config.rounds + 1 {
        let per_plane = Plane::ALL.map(|p| {
            let extra: Vec<_> = ws
                .unlabeled_images
                .iter()
                .zip(&pseudo_slices[p.index()])
                .flat_map(|(img, lab)| img.planes[p.index()].iter().zip(lab))
                .collect();
            ws.samples(p, &extra)
        });
        let trained = wrap(
            train_round(backbone, config, round, per_plane, bundle.as_ref(), &mut log),
            &log,
        )?;

        let mut round_masks = Vec::new();
        if round <= config.rounds {
            for plane in Plane::ALL {
                let start = Instant::now();
                let model = trained.get(plane);
                let labels: Vec<Vec<Slice2D<u8>>> = ws
                    .unlabeled_images
                    .par_iter()
                    .map(|img| {
                        infer(model, &img.planes[plane.index()])
                            .iter()
                            .map(|m| crate::backbone::predict_hard(m).labels)
                            .collect()
                    })
                    .collect();
                log.push(RunEvent {
                    round,
                    plane: Some(plane),
                    action: Action::PseudoLabel,
                    loss: None,
                    items: labels.len(),
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                });
                pseudo_slices[plane.index()] = labels;
            }
            // Per-plane masks reported to the observer are the sagittal
            // model's; every plane keeps its own labels for training.
            round_masks = ws
                .unlabeled_images
                .iter()
                .zip(&pseudo_slices[0])
                .map(|(img, lab)| {
                    crate::fusion::stack_labels(Plane::Sagittal, img.dims, lab.clone(), ws.k)
                })
                .collect::<Result<Vec<_>>>()?;
            last_masks = round_masks.clone();
        }
        if let Some(obs) = observer.as_deref_mut() {
            obs(&RoundRecord {
                round,
                models: &trained,
                pseudo: (round <= config.rounds).then_some(round_masks.as_slice()),
                labeled: &ws.labeled_masks,
            })?;
        }
        bundle = Some(trained);
    }
    Ok(RunOutput {
        bundle: bundle.expect("at least one round"),
        log,
        pseudo_labels: last_masks,
    })
}

/// Outcome of confidence-based slice selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    /// Selected indices, most confident first.
    pub indices: Vec<usize>,
    /// Set when fewer than `top_n` slices were available.
    pub truncated: bool,
}

/// Mean per-pixel entropy (natural log) of a probability map.
pub fn mean_entropy(map: &ProbMap) -> f64 {
    let total: f64 = map
        .rows()
        .map(|row| {
            row.iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| {
                    let p = f64::from(p);
                    -p * p.ln()
                })
                .sum::<f64>()
        })
        .sum();
    total / map.pixels() as f64
}

/// Indices of the `top_n` slices with the lowest mean pixel entropy; ties
/// go to the lower index.
pub fn select_confident_slices(maps: &[ProbMap], top_n: usize) -> Result<Selection> {
    if top_n == 0 {
        return Err(Error::InvalidArgument("top_n must be ≥ 1".into()));
    }
    let mut scored: Vec<(usize, f64)> = maps
        .iter()
        .enumerate()
        .map(|(i, m)| (i, -mean_entropy(m)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let truncated = top_n > maps.len();
    scored.truncate(top_n);
    Ok(Selection {
        indices: scored.into_iter().map(|(i, _)| i).collect(),
        truncated,
    })
}

/// Co-training variant that adds only the `top_n` most confident unlabeled
/// slices per plane each round (confidence from that plane's own
/// probabilities, labels from the fused mask).
pub fn run_dmpct_confident<B: Backbone>(
    backbone: &B,
    dataset: &Dataset,
    config: &CotrainConfig,
    mut observer: Option<Observer<'_, B::Model>>,
) -> Result<RunOutput<B::Model>> {
    check_rounds(config)?;
    let ws = Workspace::new(dataset, config, true)?;
    check_backbone(backbone, ws.k)?;
    let mut log = RunLog::default();
    let mut pseudo: Vec<LabelMask> = Vec::new();
    let mut pseudo_slices: Vec<PlaneLabels> = Vec::new();
    // (case, slice) pairs chosen per plane
    let mut chosen: [Vec<(usize, usize)>; 3] = Default::default();
    let mut bundle: Option<PlaneModelBundle<B::Model>> = None;

    for round in 1..=config.rounds + 1 {
        let per_plane = Plane::ALL.map(|p| {
            let pi = p.index();
            let extra: Vec<_> = chosen[pi]
                .iter()
                .map(|&(c, s)| (&ws.unlabeled_images[c].planes[pi][s], &pseudo_slices[c][pi][s]))
                .collect();
            ws.samples(p, &extra)
        });
        let trained = wrap(
            train_round(backbone, config, round, per_plane, bundle.as_ref(), &mut log),
            &log,
        )?;

        if round <= config.rounds {
            let start = Instant::now();
            let fused = wrap(fused_labels(&trained, &ws.unlabeled_images, true), &log)?;
            let (masks, maps): (Vec<_>, Vec<_>) = fused.into_iter().unzip();
            pseudo = masks;
            pseudo_slices = pseudo.iter().map(plane_labels).collect();
            let mut selected = 0;
            for plane in Plane::ALL {
                let pi = plane.index();
                let index: Vec<(usize, usize)> = maps
                    .iter()
                    .enumerate()
                    .flat_map(|(c, m)| (0..m[pi].len()).map(move |s| (c, s)))
                    .collect();
                let flat: Vec<ProbMap> = maps.iter().flat_map(|m| m[pi].iter().cloned()).collect();
                chosen[pi] = if flat.is_empty() {
                    Vec::new()
                } else {
                    let sel = select_confident_slices(&flat, config.top_n)?;
                    if sel.truncated {
                        log::debug!(
                            "{plane}: top_n={} exceeds {} available slices",
                            config.top_n,
                            flat.len()
                        );
                    }
                    sel.indices.into_iter().map(|i| index[i]).collect()
                };
                selected += chosen[pi].len();
            }
            let ms = start.elapsed().as_secs_f64() * 1e3;
            log.push(RunEvent {
                round,
                plane: None,
                action: Action::PseudoLabel,
                loss: None,
                items: selected,
                wall_ms: ms,
            });
            log.push(RunEvent {
                round,
                plane: None,
                action: Action::Fuse,
                loss: None,
                items: pseudo.len(),
                wall_ms: 0.0,
            });
        }
        if let Some(obs) = observer.as_deref_mut() {
            obs(&RoundRecord {
                round,
                models: &trained,
                pseudo: (round <= config.rounds).then_some(pseudo.as_slice()),
                labeled: &ws.labeled_masks,
            })?;
        }
        bundle = Some(trained);
    }
    Ok(RunOutput {
        bundle: bundle.expect("at least one round"),
        log,
        pseudo_labels: pseudo,
    })
}

/// Dispatch on `mode`.
pub fn run_mode<B: Backbone>(
    mode: Mode,
    backbone: &B,
    dataset: &Dataset,
    config: &CotrainConfig,
    observer: Option<Observer<'_, B::Model>>,
) -> Result<RunOutput<B::Model>> {
    match mode {
        Mode::Fcn => run_supervised(backbone, dataset, config, observer),
        Mode::Spsl => run_spsl(backbone, dataset, config, observer),
        Mode::Dmpct => run_dmpct(backbone, dataset, config, observer),
        Mode::DmpctConfident => run_dmpct_confident(backbone, dataset, config, observer),
    }
}

/// Run `f` on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
