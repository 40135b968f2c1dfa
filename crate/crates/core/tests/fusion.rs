mod support;

use dmpct::fusion::{fuse_volume, fuse_voxel, PlanePrediction, Provenance, PROVENANCE_MAX};
use dmpct::volume::Dims;
use dmpct::{Error, Plane};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::fuse_oracle;

fn random_predictions(dims: Dims, k: u8, rng: &mut ChaCha8Rng) -> Vec<PlanePrediction> {
    Plane::ALL
        .iter()
        .map(|&p| {
            let labels = (0..dims.len()).map(|_| rng.random_range(0..=k)).collect();
            // coarse confidences so exact ties occur
            let conf = (0..dims.len()).map(|_| rng.random_range(0..4u8) as f32 / 4.0).collect();
            PlanePrediction::new(p, dims, labels, conf).unwrap()
        })
        .collect()
}

#[test]
fn volume_fusion_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for k in 1..=4u8 {
        let dims = Dims::new(7, 5, 6);
        let preds = random_predictions(dims, k, &mut rng);
        let fused = fuse_volume(&preds, k, true).unwrap();
        let prov = fused.provenance.as_ref().unwrap();
        for i in 0..dims.len() {
            let labels = [preds[0].labels[i], preds[1].labels[i], preds[2].labels[i]];
            let conf = [preds[0].confidence[i], preds[1].confidence[i], preds[2].confidence[i]];
            assert_eq!(fused.labels.labels()[i], fuse_oracle(labels, conf));
            let p = Provenance::from_code(prov.labels()[i]).unwrap();
            let agree = labels[0] == labels[1] || labels[0] == labels[2] || labels[1] == labels[2];
            assert_eq!(p.is_agreement(), agree);
        }
    }
}

#[test]
fn plane_order_of_inputs_is_irrelevant() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let dims = Dims::new(4, 6, 3);
    let preds = random_predictions(dims, 3, &mut rng);
    let a = fuse_volume(&preds, 3, true).unwrap();
    let rev: Vec<_> = preds.iter().rev().cloned().collect();
    assert_eq!(fuse_volume(&rev, 3, true).unwrap(), a);
}

#[test]
fn provenance_counts_cover_every_voxel() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let dims = Dims::new(9, 9, 9);
    let fused = fuse_volume(&random_predictions(dims, 2, &mut rng), 2, true).unwrap();
    let counts = fused.provenance_counts().unwrap();
    assert_eq!(counts.iter().sum::<usize>(), dims.len());
    assert_eq!(counts[3], 0);
    assert_eq!(fused.provenance.unwrap().num_classes(), PROVENANCE_MAX);
    let quiet = fuse_volume(&random_predictions(dims, 2, &mut rng), 2, false).unwrap();
    assert!(quiet.provenance.is_none());
}

#[test]
fn missing_or_duplicate_planes_are_named() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let dims = Dims::new(3, 3, 3);
    let preds = random_predictions(dims, 1, &mut rng);
    let err = fuse_volume(&preds[..2], 1, false).unwrap_err();
    assert!(err.to_string().contains("axial"), "{err}");
    let dup = vec![preds[0].clone(), preds[0].clone(), preds[2].clone()];
    assert!(matches!(fuse_volume(&dup, 1, false), Err(Error::InvalidArgument(_))));
    let mut odd = preds.clone();
    odd[1] = random_predictions(Dims::new(3, 3, 4), 1, &mut rng).remove(1);
    let err = fuse_volume(&odd, 1, false).unwrap_err();
    assert!(err.to_string().contains("coronal"), "{err}");
}

#[test]
fn fallback_tie_prefers_sagittal_then_coronal() {
    assert_eq!(fuse_voxel([1, 2, 3], [0.5, 0.5, 0.5]), (1, Provenance::Fallback(Plane::Sagittal)));
    assert_eq!(fuse_voxel([1, 2, 3], [0.4, 0.5, 0.5]), (2, Provenance::Fallback(Plane::Coronal)));
    assert_eq!(fuse_voxel([1, 2, 3], [0.4, 0.5, 0.6]), (3, Provenance::Fallback(Plane::Axial)));
}

proptest! {
    #[test]
    fn voxel_rule_matches_oracle(
        labels in prop::array::uniform3(0u8..=4),
        conf in prop::array::uniform3(0u8..=3),
    ) {
        let conf = conf.map(|c| f32::from(c) / 3.0);
        let (label, prov) = fuse_voxel(labels, conf);
        prop_assert_eq!(label, fuse_oracle(labels, conf));
        prop_assert_eq!(Provenance::from_code(prov.code()), Some(prov));
        // the fused label always comes from some plane
        prop_assert!(labels.contains(&label));
    }

    #[test]
    fn unanimous_planes_win_regardless_of_confidence(
        l in 0u8..=4,
        conf in prop::array::uniform3(0.0f32..=1.0),
    ) {
        prop_assert_eq!(fuse_voxel([l, l, l], conf), (l, Provenance::Agreement(Plane::Sagittal)));
    }
}
