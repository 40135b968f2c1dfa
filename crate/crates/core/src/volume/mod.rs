//! Volume and label-mask containers plus Hounsfield windowing.
//!
//! Voxels are stored x-fastest: `index = x + W * (y + H * z)`.

pub(crate) mod io;

pub use io::{
    decode_mask, decode_volume, encode_mask, encode_volume, load_mask, load_volume, save_mask,
    save_volume,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planar::{self, Plane};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
}

impl Dims {
    pub const fn new(width: usize, height: usize, depth: usize) -> Self {
        Dims {
            width,
            height,
            depth,
        }
    }

    pub const fn cube(side: usize) -> Self {
        Dims::new(side, side, side)
    }

    /// Voxel count, `None` on overflow.
    pub fn checked_len(&self) -> Option<usize> {
        self.width
            .checked_mul(self.height)
            .and_then(|n| n.checked_mul(self.depth))
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.depth
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.width * (y + self.height * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let x = index % self.width;
        let rest = index / self.width;
        (x, rest % self.height, rest / self.height)
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.depth == 0 || self.checked_len().is_none() {
            return Err(Error::BadDims(
                self.width as u32,
                self.height as u32,
                self.depth as u32,
            ));
        }
        Ok(())
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.depth)
    }
}

/// A 3D scalar field of raw intensities in Hounsfield-like units.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: [f32; 3],
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: [f32; 3], voxels: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        if voxels.len() != dims.len() {
            return Err(Error::DimsMismatch(format!(
                "volume {dims} needs {} voxels, got {}",
                dims.len(),
                voxels.len()
            )));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Volume {
            dims,
            spacing,
            voxels,
        })
    }

    pub fn filled(dims: Dims, value: f32) -> Result<Self> {
        dims.validate()?;
        Volume::new(dims, [1.0; 3], vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.dims.index(x, y, z)]
    }
}

/// Organ labels `0..=K` per voxel; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    dims: Dims,
    num_classes: u8,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(dims: Dims, num_classes: u8, labels: Vec<u8>) -> Result<Self> {
        dims.validate()?;
        if labels.len() != dims.len() {
            return Err(Error::DimsMismatch(format!(
                "mask {dims} needs {} labels, got {}",
                dims.len(),
                labels.len()
            )));
        }
        if let Some(&value) = labels.iter().find(|&&l| l > num_classes) {
            return Err(Error::LabelRange {
                value,
                num_classes: num_classes as u16,
            });
        }
        Ok(LabelMask {
            dims,
            num_classes,
            labels,
        })
    }

    pub fn background(dims: Dims, num_classes: u8) -> Result<Self> {
        dims.validate()?;
        LabelMask::new(dims, num_classes, vec![0; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// K, the organ count (background excluded).
    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.dims.index(x, y, z)]
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    lo: f32,
    hi: f32,
}

/// Abdominal, soft-tissue and wide windows, in that channel order.
pub const DEFAULT_WINDOWS: [WindowSpec; 3] = [
    WindowSpec {
        lo: -125.0,
        hi: 275.0,
    },
    WindowSpec {
        lo: -160.0,
        hi: 240.0,
    },
    WindowSpec {
        lo: -1000.0,
        hi: 1000.0,
    },
];

impl WindowSpec {
    pub fn new(lo: f32, hi: f32) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::InvalidWindow { lo, hi });
        }
        Ok(WindowSpec { lo, hi })
    }

    pub fn lo(&self) -> f32 {
        self.lo
    }

    pub fn hi(&self) -> f32 {
        self.hi
    }
}

/// Clamp `raw` to the window and map it affinely onto `[0, 1]`.
pub fn window_rescale(raw: f32, window: WindowSpec) -> f32 {
    if raw <= window.lo {
        0.0
    } else if raw >= window.hi {
        1.0
    } else {
        let t = (f64::from(raw) - f64::from(window.lo)) / (f64::from(window.hi) - f64::from(window.lo));
        (t as f32).clamp(0.0, 1.0)
    }
}

/// A 2D slice with one `[0, 1]` channel per window. Channel-major storage,
/// pixel `(u, v)` of channel `c` at `c * width * height + u + width * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelizedSlice {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ChannelizedSlice {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 || data.len() != width * height * channels {
            return Err(Error::DimsMismatch(format!(
                "channelized slice {width}x{height}x{channels} with {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "channelized values must lie in [0, 1]".into(),
            ));
        }
        Ok(ChannelizedSlice {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_raw(raw: &[f32], width: usize, height: usize, windows: &[WindowSpec]) -> Self {
        debug_assert_eq!(raw.len(), width * height);
        let mut data = Vec::with_capacity(raw.len() * windows.len());
        for &w in windows {
            data.extend(raw.iter().map(|&v| window_rescale(v, w)));
        }
        ChannelizedSlice {
            width,
            height,
            channels: windows.len(),
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn value(&self, c: usize, u: usize, v: usize) -> f32 {
        self.data[c * self.pixels() + u + self.width * v]
    }
}

/// Extract slice `index` along `plane` and window it into channels.
pub fn channelize(
    volume: &Volume,
    windows: &[WindowSpec],
    plane: Plane,
    index: usize,
) -> Result<ChannelizedSlice> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument("at least one window required".into()));
    }
    let raw = planar::extract(volume.dims(), volume.voxels(), plane, index)?;
    Ok(ChannelizedSlice::from_raw(
        &raw.data,
        raw.width,
        raw.height,
        windows,
    ))
}

/// All slices of `volume` along `plane`, channelized.
pub fn channelize_plane(
    volume: &Volume,
    windows: &[WindowSpec],
    plane: Plane,
) -> Result<Vec<ChannelizedSlice>> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument("at least one window required".into()));
    }
    let stack = planar::slice(volume, plane);
    Ok(stack
        .slices
        .iter()
        .map(|s| ChannelizedSlice::from_raw(&s.data, s.width, s.height, windows))
        .collect())
}
