//! Multi-planar fusion of per-plane hard predictions.
//!
//! Per voxel: if any two planes agree, their label wins; otherwise the label
//! of the plane with the highest confidence (max class probability) wins,
//! with exact confidence ties going to sagittal, then coronal, then axial.

use rayon::prelude::*;

use crate::backbone::{predict_hard, ProbMap, Segmenter};
use crate::cotrain::PlaneModelBundle;
use crate::error::{Error, Result};
use crate::planar::{self, Plane, Slice2D, SliceStack};
use crate::volume::{channelize_plane, Dims, LabelMask, Volume, WindowSpec};

/// Which rule decided a voxel, and which plane supplied the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Agreement(Plane),
    Fallback(Plane),
}

/// Largest provenance byte; used as K when provenance is stored as DMPL.
pub const PROVENANCE_MAX: u8 = 6;

impl Provenance {
    /// Agreement codes 0..=2, fallback codes 4..=6 (plane tag in the low bits).
    pub fn code(self) -> u8 {
        match self {
            Provenance::Agreement(p) => p.tag(),
            Provenance::Fallback(p) => 4 | p.tag(),
        }
    }

    pub fn from_code(code: u8) -> Option<Provenance> {
        let plane = Plane::from_tag(code & 3)?;
        match code >> 2 {
            0 => Some(Provenance::Agreement(plane)),
            1 => Some(Provenance::Fallback(plane)),
            _ => None,
        }
    }

    pub fn is_agreement(self) -> bool {
        matches!(self, Provenance::Agreement(_))
    }
}

/// Fuse one voxel. Inputs are ordered sagittal, coronal, axial.
#[inline]
pub fn fuse_voxel(labels: [u8; 3], confidences: [f32; 3]) -> (u8, Provenance) {
    let [s, c, a] = labels;
    if s == c || s == a {
        return (s, Provenance::Agreement(Plane::Sagittal));
    }
    if c == a {
        return (c, Provenance::Agreement(Plane::Coronal));
    }
    let mut best = 0;
    for v in 1..3 {
        if confidences[v] > confidences[best] {
            best = v;
        }
    }
    (labels[best], Provenance::Fallback(Plane::ALL[best]))
}

/// One plane's hard labels and confidences, stacked back into 3D.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanePrediction {
    pub plane: Plane,
    pub dims: Dims,
    pub labels: Vec<u8>,
    pub confidence: Vec<f32>,
}

impl PlanePrediction {
    pub fn new(plane: Plane, dims: Dims, labels: Vec<u8>, confidence: Vec<f32>) -> Result<Self> {
        if labels.len() != dims.len() || confidence.len() != dims.len() {
            return Err(Error::DimsMismatch(format!(
                "{plane} prediction for {dims} has {} labels and {} confidences",
                labels.len(),
                confidence.len()
            )));
        }
        Ok(PlanePrediction {
            plane,
            dims,
            labels,
            confidence,
        })
    }

    /// Stack per-slice probability maps from `plane` into a 3D prediction.
    pub fn from_prob_maps(plane: Plane, dims: Dims, maps: &[ProbMap]) -> Result<Self> {
        let (labels, confidence): (Vec<_>, Vec<_>) = maps
            .iter()
            .map(|m| {
                let h = predict_hard(m);
                (h.labels, h.confidence)
            })
            .unzip();
        let labels = planar::stack(
            &SliceStack {
                plane,
                slices: labels,
            },
            dims,
        )?;
        let confidence = planar::stack(
            &SliceStack {
                plane,
                slices: confidence,
            },
            dims,
        )?;
        PlanePrediction::new(plane, dims, labels, confidence)
    }

    pub fn to_mask(&self, num_classes: u8) -> Result<LabelMask> {
        LabelMask::new(self.dims, num_classes, self.labels.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedMask {
    pub labels: LabelMask,
    pub provenance: Option<LabelMask>,
}

impl FusedMask {
    /// Voxel counts per provenance code (index = code).
    pub fn provenance_counts(&self) -> Option<[usize; PROVENANCE_MAX as usize + 1]> {
        self.provenance.as_ref().map(|p| {
            let mut counts = [0usize; PROVENANCE_MAX as usize + 1];
            for &c in p.labels() {
                counts[c as usize] += 1;
            }
            counts
        })
    }
}

const CHUNK: usize = 4096;

/// Voxelwise fusion of the three plane predictions (any order).
pub fn fuse_volume(
    predictions: &[PlanePrediction],
    num_classes: u8,
    record_provenance: bool,
) -> Result<FusedMask> {
    let mut ordered: [Option<&PlanePrediction>; 3] = [None; 3];
    for p in predictions {
        if ordered[p.plane.index()].replace(p).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate {} prediction", p.plane)));
        }
    }
    let [Some(s), Some(c), Some(a)] = ordered else {
        let missing: Vec<_> = Plane::ALL
            .iter()
            .filter(|p| ordered[p.index()].is_none())
            .map(|p| p.name())
            .collect();
        return Err(Error::InvalidArgument(format!(
            "missing prediction for {}",
            missing.join(", ")
        )));
    };
    let dims = s.dims;
    for p in [c, a] {
        if p.dims != dims {
            return Err(Error::DimsMismatch(format!(
                "{} prediction is {}, sagittal is {dims}",
                p.plane, p.dims
            )));
        }
    }
    for p in [s, c, a] {
        if p.labels.len() != dims.len() || p.confidence.len() != dims.len() {
            return Err(Error::DimsMismatch(format!("{} prediction is malformed", p.plane)));
        }
    }

    let n = dims.len();
    let mut labels = vec![0u8; n];
    let mut prov = vec![0u8; if record_provenance { n } else { 0 }];
    let fuse_chunk = |start: usize, out: &mut [u8], pout: Option<&mut [u8]>| {
        let mut pout = pout;
        for (j, o) in out.iter_mut().enumerate() {
            let i = start + j;
            let (label, how) = fuse_voxel(
                [s.labels[i], c.labels[i], a.labels[i]],
                [s.confidence[i], c.confidence[i], a.confidence[i]],
            );
            *o = label;
            if let Some(p) = pout.as_deref_mut() {
                p[j] = how.code();
            }
        }
    };
    if record_provenance {
        labels
            .par_chunks_mut(CHUNK)
            .zip(prov.par_chunks_mut(CHUNK))
            .enumerate()
            .for_each(|(ci, (out, pout))| fuse_chunk(ci * CHUNK, out, Some(pout)));
    } else {
        labels
            .par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(ci, out)| fuse_chunk(ci * CHUNK, out, None));
    }
    Ok(FusedMask {
        labels: LabelMask::new(dims, num_classes, labels)?,
        provenance: if record_provenance {
            Some(LabelMask::new(dims, PROVENANCE_MAX, prov)?)
        } else {
            None
        },
    })
}

/// Probability maps for every slice of `volume` along `plane`.
pub fn plane_prob_maps<M: Segmenter>(
    model: &M,
    volume: &Volume,
    windows: &[WindowSpec],
    plane: Plane,
) -> Result<Vec<ProbMap>> {
    let slices = channelize_plane(volume, windows, plane)?;
    Ok(slices.par_iter().map(|s| model.forward(s)).collect())
}

/// Run one plane model over a whole volume.
pub fn predict_plane<M: Segmenter>(
    model: &M,
    volume: &Volume,
    windows: &[WindowSpec],
    plane: Plane,
) -> Result<PlanePrediction> {
    let maps = plane_prob_maps(model, volume, windows, plane)?;
    PlanePrediction::from_prob_maps(plane, volume.dims(), &maps)
}

/// Full inference: per-plane slice predictions, stacked, then fused.
pub fn predict_volume<M: Segmenter>(
    models: &PlaneModelBundle<M>,
    volume: &Volume,
    windows: &[WindowSpec],
    record_provenance: bool,
) -> Result<(FusedMask, Vec<PlanePrediction>)> {
    let preds = Plane::ALL
        .iter()
        .map(|&p| predict_plane(models.get(p), volume, windows, p))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_volume(&preds, models.num_classes(), record_provenance)?;
    Ok((fused, preds))
}

/// Stack a plane's hard labels into a mask, without fusion.
pub fn stack_labels(plane: Plane, dims: Dims, slices: Vec<Slice2D<u8>>, num_classes: u8) -> Result<LabelMask> {
    let labels = planar::stack(&SliceStack { plane, slices }, dims)?;
    LabelMask::new(dims, num_classes, labels)
}
