//! Slicing volumes into 2D stacks along the three anatomical planes and
//! stacking per-slice results back into 3D fields.
//!
//! Axis convention (x-fastest storage): sagittal slices index x and span
//! (y, z); coronal slices index y and span (x, z); axial slices index z and
//! span (x, y). Within a slice, pixel `(u, v)` sits at `u + width * v`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelMask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Sagittal,
    Coronal,
    Axial,
}

impl Plane {
    /// All planes in priority order; earlier planes win confidence ties.
    pub const ALL: [Plane; 3] = [Plane::Sagittal, Plane::Coronal, Plane::Axial];

    pub fn name(self) -> &'static str {
        match self {
            Plane::Sagittal => "sagittal",
            Plane::Coronal => "coronal",
            Plane::Axial => "axial",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Plane::Sagittal => 0,
            Plane::Coronal => 1,
            Plane::Axial => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Plane> {
        Plane::ALL.get(tag as usize).copied()
    }

    pub fn index(self) -> usize {
        self.tag() as usize
    }

    /// Number of slices along this plane's normal axis.
    pub fn extent(self, dims: Dims) -> usize {
        match self {
            Plane::Sagittal => dims.width,
            Plane::Coronal => dims.height,
            Plane::Axial => dims.depth,
        }
    }

    /// (width, height) of one slice.
    pub fn slice_dims(self, dims: Dims) -> (usize, usize) {
        match self {
            Plane::Sagittal => (dims.height, dims.depth),
            Plane::Coronal => (dims.width, dims.depth),
            Plane::Axial => (dims.width, dims.height),
        }
    }

    /// Voxel coordinates of pixel `(u, v)` on slice `index`.
    #[inline]
    pub fn voxel(self, index: usize, u: usize, v: usize) -> (usize, usize, usize) {
        match self {
            Plane::Sagittal => (index, u, v),
            Plane::Coronal => (u, index, v),
            Plane::Axial => (u, v, index),
        }
    }
}

impl std::fmt::Display for Plane {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sagittal" | "S" => Ok(Plane::Sagittal),
            "coronal" | "C" => Ok(Plane::Coronal),
            "axial" | "A" => Ok(Plane::Axial),
            other => Err(Error::InvalidArgument(format!("unknown plane {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Slice2D<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimsMismatch(format!(
                "slice {width}x{height} with {} values",
                data.len()
            )));
        }
        Ok(Slice2D {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> T {
        self.data[u + self.width * v]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack<T> {
    pub plane: Plane,
    pub slices: Vec<Slice2D<T>>,
}

impl<T> SliceStack<T> {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// Anything stored as a dense 3D field in x-fastest order.
pub trait Field3D {
    type Elem: Copy;
    fn dims(&self) -> Dims;
    fn values(&self) -> &[Self::Elem];
}

impl Field3D for Volume {
    type Elem = f32;
    fn dims(&self) -> Dims {
        Volume::dims(self)
    }
    fn values(&self) -> &[f32] {
        self.voxels()
    }
}

impl Field3D for LabelMask {
    type Elem = u8;
    fn dims(&self) -> Dims {
        LabelMask::dims(self)
    }
    fn values(&self) -> &[u8] {
        self.labels()
    }
}

/// Copy out slice `index` of a raw field.
pub fn extract<T: Copy>(dims: Dims, values: &[T], plane: Plane, index: usize) -> Result<Slice2D<T>> {
    let extent = plane.extent(dims);
    if index >= extent {
        return Err(Error::SliceIndex {
            plane,
            index,
            extent,
        });
    }
    debug_assert_eq!(values.len(), dims.len());
    let (w, h) = plane.slice_dims(dims);
    let mut data = Vec::with_capacity(w * h);
    match plane {
        Plane::Axial => {
            let start = dims.index(0, 0, index);
            data.extend_from_slice(&values[start..start + w * h]);
        }
        Plane::Coronal => {
            for z in 0..h {
                let start = dims.index(0, index, z);
                data.extend_from_slice(&values[start..start + w]);
            }
        }
        Plane::Sagittal => {
            for z in 0..h {
                for y in 0..w {
                    data.push(values[dims.index(index, y, z)]);
                }
            }
        }
    }
    Ok(Slice2D {
        width: w,
        height: h,
        data,
    })
}

pub fn slice_values<T: Copy>(dims: Dims, values: &[T], plane: Plane) -> SliceStack<T> {
    let slices = (0..plane.extent(dims))
        .map(|i| extract(dims, values, plane, i).expect("index within extent"))
        .collect();
    SliceStack { plane, slices }
}

/// Split a volume or mask into its slices along `plane`.
pub fn slice<F: Field3D>(field: &F, plane: Plane) -> SliceStack<F::Elem> {
    slice_values(field.dims(), field.values(), plane)
}

/// Reassemble a 3D field of `target` dims from a slice stack.
pub fn stack<T: Copy + Default>(stack: &SliceStack<T>, target: Dims) -> Result<Vec<T>> {
    let plane = stack.plane;
    let extent = plane.extent(target);
    let (w, h) = plane.slice_dims(target);
    let mismatch = |found: String| Error::Reconstruction {
        plane,
        expected: format!("{extent} slices of {w}x{h} for {target}"),
        found,
    };
    if stack.slices.len() != extent {
        return Err(mismatch(format!("{} slices", stack.slices.len())));
    }
    if let Some(bad) = stack
        .slices
        .iter()
        .find(|s| s.width != w || s.height != h || s.data.len() != w * h)
    {
        return Err(mismatch(format!("a {}x{} slice", bad.width, bad.height)));
    }
    let mut out = vec![T::default(); target.len()];
    for (index, s) in stack.slices.iter().enumerate() {
        for v in 0..h {
            for u in 0..w {
                let (x, y, z) = plane.voxel(index, u, v);
                out[target.index(x, y, z)] = s.data[u + w * v];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_mask(dims: Dims, k: u8, seed: u64) -> LabelMask {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let labels = (0..dims.len()).map(|_| rng.random_range(0..=k)).collect();
        LabelMask::new(dims, k, labels).unwrap()
    }

    #[test]
    fn slice_dims_bookkeeping() {
        let vol = Volume::filled(Dims::new(4, 5, 6), 0.0).unwrap();
        let axial = slice(&vol, Plane::Axial);
        assert_eq!(axial.len(), 6);
        assert!(axial.slices.iter().all(|s| (s.width, s.height) == (4, 5)));
        let sag = slice(&vol, Plane::Sagittal);
        assert_eq!(sag.len(), 4);
        assert!(sag.slices.iter().all(|s| (s.width, s.height) == (5, 6)));
        let cor = slice(&vol, Plane::Coronal);
        assert_eq!(cor.len(), 5);
        assert!(cor.slices.iter().all(|s| (s.width, s.height) == (4, 6)));

        let one = Volume::filled(Dims::cube(1), 3.0).unwrap();
        for p in Plane::ALL {
            let s = slice(&one, p);
            assert_eq!((s.len(), s.slices[0].width, s.slices[0].height), (1, 1, 1));
        }
    }

    #[test]
    fn short_stack_rejected() {
        let dims = Dims::new(2, 2, 4);
        let mask = random_mask(Dims::new(2, 2, 3), 2, 1);
        let s = slice(&mask, Plane::Axial);
        let err = stack(&s, dims).unwrap_err();
        assert!(matches!(err, Error::Reconstruction { plane: Plane::Axial, .. }));
        assert!(err.to_string().contains("2x2x4"));
    }

    #[test]
    fn ragged_slice_rejected() {
        let mask = random_mask(Dims::new(3, 3, 3), 2, 2);
        let mut s = slice(&mask, Plane::Coronal);
        s.slices[1] = Slice2D::new(2, 3, vec![0; 6]).unwrap();
        assert!(stack(&s, mask.dims()).is_err());
    }

    #[test]
    fn roundtrip_7x3x5_mask() {
        let mask = random_mask(Dims::new(7, 3, 5), 4, 9);
        for p in Plane::ALL {
            assert_eq!(stack(&slice(&mask, p), mask.dims()).unwrap(), mask.labels());
        }
    }

    #[test]
    fn plane_ordering_and_tags() {
        assert!(Plane::Sagittal < Plane::Coronal && Plane::Coronal < Plane::Axial);
        for p in Plane::ALL {
            assert_eq!(Plane::from_tag(p.tag()), Some(p));
            assert_eq!(p.name().parse::<Plane>().unwrap(), p);
        }
        assert_eq!(Plane::from_tag(3), None);
    }

    proptest! {
        #[test]
        fn stack_inverts_slice(
            w in 1usize..9, h in 1usize..9, d in 1usize..9, seed in any::<u64>()
        ) {
            let dims = Dims::new(w, h, d);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let voxels: Vec<f32> = (0..dims.len()).map(|_| rng.random_range(-500f32..500.0)).collect();
            let vol = Volume::new(dims, [1.0; 3], voxels).unwrap();
            for p in Plane::ALL {
                let back = stack(&slice(&vol, p), dims).unwrap();
                prop_assert!(back.iter().zip(vol.voxels()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }

        #[test]
        fn slices_agree_with_direct_indexing(
            w in 1usize..9, h in 1usize..9, d in 1usize..9, seed in any::<u64>()
        ) {
            let dims = Dims::new(w, h, d);
            let mask = random_mask(dims, 5, seed);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            for p in Plane::ALL {
                let s = slice(&mask, p);
                for _ in 0..16 {
                    let i = rng.random_range(0..p.extent(dims));
                    let (sw, sh) = p.slice_dims(dims);
                    let (u, v) = (rng.random_range(0..sw), rng.random_range(0..sh));
                    let (x, y, z) = p.voxel(i, u, v);
                    prop_assert_eq!(s.slices[i].get(u, v), mask.get(x, y, z));
                }
            }
        }
    }
}
