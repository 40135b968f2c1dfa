//! Seeded synthetic phantoms: geometric "organs" in a noisy background.
//!
//! Organs are placed in index order around per-organ anchor positions; a
//! voxel claimed by an earlier organ is never overwritten. Intensities are
//! the region mean plus per-case, per-region and per-voxel Gaussian terms,
//! quantized to 1/256 HU so that an integer HU offset shifts every voxel
//! exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cotrain::{Dataset, LabeledCase, UnlabeledCase};
use crate::error::{Error, Result};
use crate::seed::{derive, fnv1a};
use crate::volume::{Dims, LabelMask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Ellipsoid,
    /// A segment of length `2 * semi_axes[0]` along a random axis, swept by
    /// a sphere of radius `semi_axes[1]`.
    Capsule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub shape: Shape,
    /// Semi-axes in voxels (x, y, z) before jitter and scaling.
    pub semi_axes: [f64; 3],
    /// Preferred centre as a fraction of each dimension.
    pub anchor: [f64; 3],
    pub hu_mean: f64,
    pub hu_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub organs: Vec<OrganSpec>,
    pub background_mean: f64,
    pub background_std: f64,
    /// Per-voxel acquisition noise.
    pub noise_sigma: f64,
    /// Std of a per-case offset added to every region's mean.
    pub case_hu_jitter: f64,
    /// Uniform centre jitter around the anchor, as a fraction of each dim.
    pub position_jitter: f64,
    /// Uniform relative jitter of each semi-axis.
    pub size_jitter: f64,
    /// Domain shift: added to every voxel.
    pub hu_offset: f64,
    /// Domain shift: multiplies every semi-axis.
    pub size_scale: f64,
}

/// Default HU step between consecutive organ means.
pub const DEFAULT_CONTRAST: f64 = 45.0;

impl Default for PhantomSpec {
    fn default() -> Self {
        let organ = |shape, semi_axes, anchor, k: usize| OrganSpec {
            shape,
            semi_axes,
            anchor,
            hu_mean: -20.0 + DEFAULT_CONTRAST * k as f64,
            hu_std: 12.0,
        };
        PhantomSpec {
            dims: Dims::cube(48),
            organs: vec![
                organ(Shape::Ellipsoid, [11.0, 8.0, 9.0], [0.32, 0.40, 0.50], 1),
                organ(Shape::Capsule, [8.0, 3.5, 3.5], [0.66, 0.58, 0.48], 2),
                organ(Shape::Ellipsoid, [6.0, 5.0, 7.0], [0.70, 0.28, 0.52], 3),
                organ(Shape::Ellipsoid, [3.0, 3.0, 3.0], [0.42, 0.74, 0.55], 4),
            ],
            background_mean: -60.0,
            background_std: 15.0,
            noise_sigma: 20.0,
            case_hu_jitter: 0.0,
            position_jitter: 0.08,
            size_jitter: 0.15,
            hu_offset: 0.0,
            size_scale: 1.0,
        }
    }
}

impl PhantomSpec {
    pub fn num_classes(&self) -> u8 {
        self.organs.len() as u8
    }

    /// Space organ means `step` HU apart: `mean_k = -20 + step * k`.
    pub fn with_contrast(mut self, step: f64) -> Self {
        for (i, o) in self.organs.iter_mut().enumerate() {
            o.hu_mean = -20.0 + step * (i + 1) as f64;
        }
        self
    }

    /// A shifted domain: `offset` HU added everywhere, organs scaled.
    pub fn shifted(mut self, offset: f64, scale: f64) -> Self {
        self.hu_offset += offset;
        self.size_scale *= scale;
        self
    }

    /// Only the first `k` organs.
    pub fn with_organs(mut self, k: usize) -> Self {
        self.organs.truncate(k);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.organs.is_empty() || self.organs.len() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "phantom needs 1..=255 organs, got {}",
                self.organs.len()
            )));
        }
        if self.dims.is_empty() {
            return Err(Error::InvalidArgument("phantom dims must be positive".into()));
        }
        let nonneg = [
            self.background_std,
            self.noise_sigma,
            self.case_hu_jitter,
            self.position_jitter,
            self.size_jitter,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0))
            || self.organs.iter().any(|o| !(o.hu_std.is_finite() && o.hu_std >= 0.0))
        {
            return Err(Error::InvalidArgument("phantom stds and jitters must be ≥ 0".into()));
        }
        if !(self.size_scale.is_finite() && self.size_scale > 0.0) || self.size_jitter >= 1.0 {
            return Err(Error::InvalidArgument("invalid phantom size parameters".into()));
        }
        Ok(())
    }

    /// Stable hash of the spec, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        format!("{:016x}", fnv1a(json.as_bytes()))
    }
}

/// One placed organ, in voxel coordinates.
#[derive(Debug, Clone, Copy)]
struct Placement {
    shape: Shape,
    center: [f64; 3],
    semi: [f64; 3],
    /// Capsule axis.
    axis: usize,
}

impl Placement {
    fn contains(&self, p: [f64; 3]) -> bool {
        match self.shape {
            Shape::Ellipsoid => {
                (0..3)
                    .map(|i| {
                        let t = (p[i] - self.center[i]) / self.semi[i];
                        t * t
                    })
                    .sum::<f64>()
                    <= 1.0
            }
            Shape::Capsule => {
                let (half, r) = (self.semi[0], self.semi[1]);
                let mut d2 = 0.0;
                for i in 0..3 {
                    let mut t = p[i] - self.center[i];
                    if i == self.axis {
                        t = (t.abs() - half).max(0.0);
                    }
                    d2 += t * t;
                }
                d2 <= r * r
            }
        }
    }

    /// Half-extent along each axis.
    fn extent(&self) -> [f64; 3] {
        match self.shape {
            Shape::Ellipsoid => self.semi,
            Shape::Capsule => {
                let mut e = [self.semi[1]; 3];
                e[self.axis] += self.semi[0];
                e
            }
        }
    }

    fn bounds(&self, dims: Dims) -> [(usize, usize); 3] {
        let ext = self.extent();
        let size = [dims.width, dims.height, dims.depth];
        std::array::from_fn(|i| {
            let lo = (self.center[i] - ext[i]).floor().max(0.0) as usize;
            let hi = ((self.center[i] + ext[i]).ceil() as usize).min(size[i] - 1);
            (lo, hi)
        })
    }
}

const PLACEMENT_TRIES: usize = 32;

fn place_organ(
    spec: &PhantomSpec,
    organ: &OrganSpec,
    index: usize,
    rng: &mut ChaCha8Rng,
    labels: &[u8],
) -> Result<Placement> {
    let size = [spec.dims.width, spec.dims.height, spec.dims.depth];
    let axis = rng.random_range(0..3usize);
    let semi: [f64; 3] = std::array::from_fn(|i| {
        let j = if spec.size_jitter > 0.0 {
            rng.random_range(-spec.size_jitter..=spec.size_jitter)
        } else {
            0.0
        };
        organ.semi_axes[i] * spec.size_scale * (1.0 + j)
    });
    let mut best: Option<(usize, Placement)> = None;
    for _ in 0..PLACEMENT_TRIES {
        let mut center = [0.0; 3];
        let probe = Placement {
            shape: organ.shape,
            center,
            semi,
            axis,
        };
        let ext = probe.extent();
        for i in 0..3 {
            let lo = ext[i];
            let hi = size[i] as f64 - 1.0 - ext[i];
            if lo > hi {
                return Err(Error::Generation(format!(
                    "organ {} (extent {:.1}) cannot fit along axis {i} of {}",
                    index + 1,
                    2.0 * ext[i],
                    spec.dims
                )));
            }
            let jitter = if spec.position_jitter > 0.0 {
                rng.random_range(-spec.position_jitter..=spec.position_jitter)
            } else {
                0.0
            };
            center[i] = ((organ.anchor[i] + jitter) * (size[i] as f64 - 1.0)).clamp(lo, hi);
        }
        let candidate = Placement { center, ..probe };
        let overlap = count_overlap(&candidate, spec.dims, labels);
        if best.as_ref().is_none_or(|(o, _)| overlap < *o) {
            best = Some((overlap, candidate));
        }
        if overlap == 0 {
            break;
        }
    }
    Ok(best.expect("at least one try").1)
}

fn count_overlap(p: &Placement, dims: Dims, labels: &[u8]) -> usize {
    let [(x0, x1), (y0, y1), (z0, z1)] = p.bounds(dims);
    let mut n = 0;
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                if labels[dims.index(x, y, z)] != 0 && p.contains([x as f64, y as f64, z as f64]) {
                    n += 1;
                }
            }
        }
    }
    n
}

fn quantize(v: f64) -> f64 {
    (v * 256.0).round() / 256.0
}

/// Generate one labeled case.
pub fn generate_case(spec: &PhantomSpec, case_seed: u64) -> Result<(Volume, LabelMask)> {
    spec.validate()?;
    let dims = spec.dims;
    let mut labels = vec![0u8; dims.len()];
    let mut shape_rng = ChaCha8Rng::seed_from_u64(derive(case_seed, "phantom/shape", 0));
    for (i, organ) in spec.organs.iter().enumerate() {
        let placement = place_organ(spec, organ, i, &mut shape_rng, &labels)?;
        let [(x0, x1), (y0, y1), (z0, z1)] = placement.bounds(dims);
        for z in z0..=z1 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let idx = dims.index(x, y, z);
                    if labels[idx] == 0 && placement.contains([x as f64, y as f64, z as f64]) {
                        labels[idx] = i as u8 + 1;
                    }
                }
            }
        }
    }

    let mut int_rng = ChaCha8Rng::seed_from_u64(derive(case_seed, "phantom/intensity", 0));
    let case_offset = gaussian(&mut int_rng, spec.case_hu_jitter);
    let region_mean: Vec<f64> = std::iter::once(spec.background_mean)
        .chain(spec.organs.iter().map(|o| o.hu_mean))
        .map(|m| m + case_offset)
        .collect();
    let region_std: Vec<f64> = std::iter::once(spec.background_std)
        .chain(spec.organs.iter().map(|o| o.hu_std))
        .collect();
    let tissue = Normal::new(0.0, 1.0).expect("unit normal");
    let voxels: Vec<f32> = labels
        .iter()
        .map(|&l| {
            let l = l as usize;
            let texture = region_std[l] * tissue.sample(&mut int_rng);
            let noise = spec.noise_sigma * tissue.sample(&mut int_rng);
            (quantize(region_mean[l] + texture + noise) + spec.hu_offset) as f32
        })
        .collect();
    Ok((
        Volume::new(dims, [1.0; 3], voxels)?,
        LabelMask::new(dims, spec.num_classes(), labels)?,
    ))
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        Normal::new(0.0, std).expect("finite std").sample(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
}

/// One line of `manifest.json-lines`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub split: Split,
    pub seed: u64,
    pub spec_hash: String,
}

pub struct GeneratedDataset {
    pub dataset: Dataset,
    /// True masks of the unlabeled cases; diagnostics only.
    pub hidden_masks: Vec<LabelMask>,
    pub manifest: Vec<ManifestEntry>,
}

pub fn case_seed(master_seed: u64, split: Split, index: usize) -> u64 {
    derive(master_seed, &format!("case/{}", split.name()), index as u64)
}

pub fn case_id(split: Split, index: usize) -> String {
    format!("{}_{index:03}", split.name())
}

/// Generate the labeled, unlabeled and test splits.
pub fn generate_dataset(spec: &PhantomSpec, counts: SplitCounts, master_seed: u64) -> Result<GeneratedDataset> {
    spec.validate()?;
    if counts.labeled == 0 {
        return Err(Error::InvalidArgument("at least one labeled case required".into()));
    }
    let hash = spec.hash();
    let mut manifest = Vec::new();
    for (split, n) in [
        (Split::Labeled, counts.labeled),
        (Split::Unlabeled, counts.unlabeled),
        (Split::Test, counts.test),
    ] {
        for i in 0..n {
            manifest.push(ManifestEntry {
                case_id: case_id(split, i),
                split,
                seed: case_seed(master_seed, split, i),
                spec_hash: hash.clone(),
            });
        }
    }
    let mut seeds: Vec<u64> = manifest.iter().map(|m| m.seed).collect();
    seeds.sort_unstable();
    if seeds.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Generation("case seed collision".into()));
    }
    let cases = manifest
        .par_iter()
        .map(|m| generate_case(spec, m.seed))
        .collect::<Result<Vec<_>>>()?;

    let mut dataset = Dataset::default();
    let mut hidden_masks = Vec::new();
    for (m, (volume, mask)) in manifest.iter().zip(cases) {
        let id = m.case_id.clone();
        match m.split {
            Split::Labeled => dataset.labeled.push(LabeledCase { id, volume, mask }),
            Split::Test => dataset.test.push(LabeledCase { id, volume, mask }),
            Split::Unlabeled => {
                dataset.unlabeled.push(UnlabeledCase { id, volume });
                hidden_masks.push(mask);
            }
        }
    }
    Ok(GeneratedDataset {
        dataset,
        hidden_masks,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(spec: PhantomSpec) -> PhantomSpec {
        let mut s = spec;
        s.noise_sigma = 0.0;
        s.background_std = 0.0;
        for o in &mut s.organs {
            o.hu_std = 0.0;
        }
        s
    }

    #[test]
    fn centered_ellipsoid_matches_brute_force_count() {
        let mut spec = quiet(PhantomSpec::default().with_organs(1));
        spec.dims = Dims::cube(24);
        spec.position_jitter = 0.0;
        spec.size_jitter = 0.0;
        spec.organs[0].anchor = [0.5; 3];
        spec.organs[0].semi_axes = [6.0, 4.5, 3.5];
        let (_, mask) = generate_case(&spec, 5).unwrap();
        let c = 0.5 * 23.0;
        let mut expected = 0;
        for z in 0..24 {
            for y in 0..24 {
                for x in 0..24 {
                    let (dx, dy, dz) = ((x as f64 - c) / 6.0, (y as f64 - c) / 4.5, (z as f64 - c) / 3.5);
                    if dx * dx + dy * dy + dz * dz <= 1.0 {
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(mask.count(1), expected);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = PhantomSpec::default();
        let a = generate_case(&spec, 42).unwrap();
        let b = generate_case(&spec, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_case(&spec, 43).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn hu_offset_shifts_exactly() {
        let spec = PhantomSpec::default();
        let shifted = spec.clone().shifted(100.0, 1.0);
        let (v0, m0) = generate_case(&spec, 7).unwrap();
        let (v1, m1) = generate_case(&shifted, 7).unwrap();
        assert_eq!(m0, m1);
        assert!(v0.voxels().iter().zip(v1.voxels()).all(|(a, b)| b - a == 100.0));
    }

    #[test]
    fn quiet_phantom_regions_are_constant() {
        let spec = quiet(PhantomSpec::default());
        let (vol, mask) = generate_case(&spec, 3).unwrap();
        for k in 0..=spec.num_classes() {
            let vals: Vec<f32> = vol
                .voxels()
                .iter()
                .zip(mask.labels())
                .filter(|(_, &l)| l == k)
                .map(|(v, _)| *v)
                .collect();
            assert!(!vals.is_empty(), "organ {k} vanished");
            assert!(vals.iter().all(|&v| v == vals[0]));
        }
    }

    #[test]
    fn organ_that_cannot_fit_errors() {
        let mut spec = PhantomSpec::default().with_organs(1);
        spec.dims = Dims::cube(8);
        spec.organs[0].semi_axes = [6.0, 2.0, 2.0];
        spec.size_jitter = 0.0;
        spec.organs[0].shape = Shape::Ellipsoid;
        assert!(matches!(generate_case(&spec, 1), Err(Error::Generation(_))));
    }

    #[test]
    fn dataset_seed_contract() {
        let mut spec = PhantomSpec::default();
        spec.dims = Dims::cube(24);
        for o in &mut spec.organs {
            for a in &mut o.semi_axes {
                *a *= 0.5;
            }
        }
        let counts = SplitCounts {
            labeled: 4,
            unlabeled: 16,
            test: 10,
        };
        let g = generate_dataset(&spec, counts, 11).unwrap();
        assert_eq!(g.manifest.len(), 30);
        let seeds: std::collections::HashSet<_> = g.manifest.iter().map(|m| m.seed).collect();
        assert_eq!(seeds.len(), 30);
        assert_eq!(g.hidden_masks.len(), 16);
        for (i, hidden) in g.hidden_masks.iter().enumerate() {
            let (_, mask) = generate_case(&spec, case_seed(11, Split::Unlabeled, i)).unwrap();
            assert_eq!(&mask, hidden);
        }

        let minimal = generate_dataset(
            &spec,
            SplitCounts {
                labeled: 1,
                unlabeled: 0,
                test: 1,
            },
            11,
        )
        .unwrap();
        assert_eq!(minimal.dataset.labeled.len(), 1);
        assert_eq!(minimal.dataset.test.len(), 1);
        assert!(generate_dataset(&spec, SplitCounts { labeled: 0, unlabeled: 1, test: 1 }, 1).is_err());
    }
}
