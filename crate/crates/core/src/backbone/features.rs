//! Local patch features for the reference segmenter.
//!
//! Per pixel, in order: the raw channel values, then for each pooling radius
//! the per-channel mean over the `(2r+1)^2` square patch (edge-clamped), then
//! optionally the normalized pixel centre `((u + 0.5) / width, (v + 0.5) / height)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::ChannelizedSlice;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchFeatureSpec {
    pub channels: usize,
    pub pooling_radii: Vec<u32>,
    pub include_coords: bool,
}

impl Default for PatchFeatureSpec {
    fn default() -> Self {
        PatchFeatureSpec {
            channels: 3,
            pooling_radii: vec![1, 2, 4],
            include_coords: true,
        }
    }
}

impl PatchFeatureSpec {
    pub fn feature_dim(&self) -> usize {
        self.channels * (1 + self.pooling_radii.len()) + if self.include_coords { 2 } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::InvalidArgument("feature spec needs ≥1 channel".into()));
        }
        Ok(())
    }

    fn max_radius(&self) -> usize {
        self.pooling_radii.iter().copied().max().unwrap_or(0) as usize
    }
}

/// Summed-area tables of an edge-padded slice, one per channel, so every
/// patch mean is an O(1) lookup.
pub struct FeatureMap<'a> {
    spec: &'a PatchFeatureSpec,
    slice: &'a ChannelizedSlice,
    pad: usize,
    stride: usize,
    tables: Vec<Vec<f64>>,
}

impl<'a> FeatureMap<'a> {
    pub fn new(slice: &'a ChannelizedSlice, spec: &'a PatchFeatureSpec) -> Result<Self> {
        if slice.channels() != spec.channels {
            return Err(Error::DimsMismatch(format!(
                "slice has {} channels, feature spec expects {}",
                slice.channels(),
                spec.channels
            )));
        }
        let (w, h) = (slice.width(), slice.height());
        let pad = spec.max_radius();
        let pw = w + 2 * pad;
        let ph = h + 2 * pad;
        let stride = pw + 1;
        let tables = if spec.pooling_radii.is_empty() {
            Vec::new()
        } else {
            (0..spec.channels)
                .map(|c| {
                    let mut t = vec![0.0f64; stride * (ph + 1)];
                    for j in 0..ph {
                        let v = (j as isize - pad as isize).clamp(0, h as isize - 1) as usize;
                        let mut row = 0.0f64;
                        for i in 0..pw {
                            let u = (i as isize - pad as isize).clamp(0, w as isize - 1) as usize;
                            row += f64::from(slice.value(c, u, v));
                            t[(j + 1) * stride + i + 1] = t[j * stride + i + 1] + row;
                        }
                    }
                    t
                })
                .collect()
        };
        Ok(FeatureMap {
            spec,
            slice,
            pad,
            stride,
            tables,
        })
    }

    fn patch_mean(&self, c: usize, u: usize, v: usize, r: usize) -> f64 {
        let t = &self.tables[c];
        // padded coordinates of the patch corners, half-open on the far side
        let (i0, j0) = (u + self.pad - r, v + self.pad - r);
        let (i1, j1) = (u + self.pad + r + 1, v + self.pad + r + 1);
        let s = self.stride;
        let sum = t[j1 * s + i1] - t[j0 * s + i1] - t[j1 * s + i0] + t[j0 * s + i0];
        let side = (2 * r + 1) as f64;
        sum / (side * side)
    }

    /// Write the feature vector of pixel `(u, v)` into `out`.
    pub fn write(&self, u: usize, v: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.spec.feature_dim());
        let channels = self.spec.channels;
        for c in 0..channels {
            out[c] = f64::from(self.slice.value(c, u, v));
        }
        let mut k = channels;
        for &r in &self.spec.pooling_radii {
            for c in 0..channels {
                out[k] = self.patch_mean(c, u, v, r as usize);
                k += 1;
            }
        }
        if self.spec.include_coords {
            out[k] = (u as f64 + 0.5) / self.slice.width() as f64;
            out[k + 1] = (v as f64 + 0.5) / self.slice.height() as f64;
        }
    }

    /// Feature rows for every pixel, pixel-major.
    pub fn all(&self) -> Vec<f64> {
        let dim = self.spec.feature_dim();
        let (w, h) = (self.slice.width(), self.slice.height());
        let mut out = vec![0.0; w * h * dim];
        for v in 0..h {
            for u in 0..w {
                let p = u + w * v;
                self.write(u, v, &mut out[p * dim..(p + 1) * dim]);
            }
        }
        out
    }
}

/// Feature vector of a single pixel.
pub fn featurize(slice: &ChannelizedSlice, spec: &PatchFeatureSpec, pixel: (usize, usize)) -> Result<Vec<f64>> {
    let (u, v) = pixel;
    if u >= slice.width() || v >= slice.height() {
        return Err(Error::InvalidArgument(format!(
            "pixel ({u}, {v}) outside {}x{} slice",
            slice.width(),
            slice.height()
        )));
    }
    let map = FeatureMap::new(slice, spec)?;
    let mut out = vec![0.0; spec.feature_dim()];
    map.write(u, v, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_slice(w: usize, h: usize, seed: u64) -> ChannelizedSlice {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * 3).map(|_| rng.random::<f32>()).collect();
        ChannelizedSlice::new(w, h, 3, data).unwrap()
    }

    /// Direct clamped-patch average, no summed-area table.
    fn naive_mean(s: &ChannelizedSlice, c: usize, u: usize, v: usize, r: isize) -> f64 {
        let mut sum = 0.0;
        for dv in -r..=r {
            for du in -r..=r {
                let uu = (u as isize + du).clamp(0, s.width() as isize - 1) as usize;
                let vv = (v as isize + dv).clamp(0, s.height() as isize - 1) as usize;
                sum += f64::from(s.value(c, uu, vv));
            }
        }
        sum / ((2 * r + 1) * (2 * r + 1)) as f64
    }

    #[test]
    fn default_dim_is_14() {
        assert_eq!(PatchFeatureSpec::default().feature_dim(), 14);
    }

    #[test]
    fn constant_slice() {
        let s = ChannelizedSlice::new(9, 7, 3, vec![0.5; 9 * 7 * 3]).unwrap();
        let f = featurize(&s, &PatchFeatureSpec::default(), (4, 3)).unwrap();
        for &x in &f[..12] {
            assert!((x - 0.5).abs() < 1e-12);
        }
        assert!((f[12] - 4.5 / 9.0).abs() < 1e-12);
        assert!((f[13] - 3.5 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn single_pixel_slice() {
        let s = ChannelizedSlice::new(1, 1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let f = featurize(&s, &PatchFeatureSpec::default(), (0, 0)).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                assert!((f[r * 3 + c] - [0.1, 0.2, 0.3][c]).abs() < 1e-7);
            }
        }
        assert_eq!(&f[12..], &[0.5, 0.5]);
    }

    #[test]
    fn corner_radius_one_uses_four_distinct_values() {
        let s = random_slice(5, 4, 11);
        let f = featurize(&s, &PatchFeatureSpec::default(), (0, 0)).unwrap();
        for c in 0..3 {
            let (a, b) = (f64::from(s.value(c, 0, 0)), f64::from(s.value(c, 1, 0)));
            let (d, e) = (f64::from(s.value(c, 0, 1)), f64::from(s.value(c, 1, 1)));
            // clamped 3x3 at the corner: a appears 4x, b and d 2x, e once
            let expected = (4.0 * a + 2.0 * b + 2.0 * d + e) / 9.0;
            assert!((f[3 + c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn summed_area_matches_naive_everywhere() {
        let s = random_slice(7, 5, 5);
        let spec = PatchFeatureSpec::default();
        let map = FeatureMap::new(&s, &spec).unwrap();
        let mut out = vec![0.0; 14];
        for v in 0..5 {
            for u in 0..7 {
                map.write(u, v, &mut out);
                for (ri, &r) in spec.pooling_radii.iter().enumerate() {
                    for c in 0..3 {
                        let naive = naive_mean(&s, c, u, v, r as isize);
                        assert!((out[3 + ri * 3 + c] - naive).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_pixel() {
        let s = random_slice(3, 3, 1);
        assert!(featurize(&s, &PatchFeatureSpec::default(), (3, 0)).is_err());
    }
}
