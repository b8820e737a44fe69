//! Windowing, resampling, patch sampling and stitching.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volseg::model::{Network, NetworkConfig};
use volseg::preprocess::{
    clamp_and_window, crop_patch, extract_patches, resample, resample_labels, stitch_patches, tile_origins, Interp,
    PatchMode, PreprocessConfig,
};
use volseg::tensor::Tensor;
use volseg::volume::{Geometry, LabelVolume, Volume};

fn cfg(patch: usize, overlap: usize) -> PreprocessConfig {
    PreprocessConfig { patch_size: patch, patch_overlap: overlap, ..Default::default() }
}

#[test]
fn window_endpoints() {
    let g = Geometry::new([1, 1, 4], [1.0; 3]).unwrap();
    let v = Volume::new(g, vec![-500.0, 1000.0, 300.0, -200.0]).unwrap();
    assert_eq!(clamp_and_window(&v, &PreprocessConfig::default()).data, vec![0.0, 1.0, 0.5, 0.0]);
}

#[test]
fn foreground_biased_sampler_hits_sparse_foreground() {
    // 64³ with a 5% foreground slab
    let g = Geometry::new([64; 3], [1.0; 3]).unwrap();
    let label = LabelVolume::from_fn(g, |[z, _, x]| (30..34).contains(&z) && x < 51);
    let frac = label.foreground_count() as f64 / g.len() as f64;
    assert!((0.04..0.06).contains(&frac), "{frac}");
    let image = Volume::filled(g, 0.0);
    let hits = extract_patches(&image, Some(&label), &cfg(16, 0), 3, PatchMode::Training)
        .unwrap()
        .take(1000)
        .filter(|p| p.label.as_ref().unwrap().foreground_count() > 0)
        .count();
    assert!(hits > 500, "{hits} of 1000");
}

#[test]
fn sampler_without_foreground_still_yields() {
    let g = Geometry::new([24; 3], [1.0; 3]).unwrap();
    let label = LabelVolume::empty(g);
    let image = Volume::filled(g, 0.0);
    let n = extract_patches(&image, Some(&label), &cfg(16, 0), 1, PatchMode::Training).unwrap().take(20).count();
    assert_eq!(n, 20);
}

#[test]
fn sampler_is_seeded() {
    let g = Geometry::new([40; 3], [1.0; 3]).unwrap();
    let label = LabelVolume::from_fn(g, |[z, y, x]| z * y * x % 7 == 0);
    let image = Volume::new(g, (0..g.len()).map(|i| i as f32).collect()).unwrap();
    let origins = |seed| -> Vec<[usize; 3]> {
        extract_patches(&image, Some(&label), &cfg(16, 0), seed, PatchMode::Training).unwrap().take(30).map(|p| p.origin).collect()
    };
    assert_eq!(origins(4), origins(4));
    assert_ne!(origins(4), origins(5));
}

#[test]
fn inference_tiling_of_64_cube() {
    let o = tile_origins([64; 3], 32, 0).unwrap();
    assert_eq!(o.len(), 8);
    let mut cover = vec![0u8; 64 * 64 * 64];
    for t in &o {
        for z in 0..32 {
            for y in 0..32 {
                for x in 0..32 {
                    cover[((t[0] + z) * 64 + t[1] + y) * 64 + t[2] + x] += 1;
                }
            }
        }
    }
    assert!(cover.iter().all(|&c| c == 1));
}

#[test]
fn volume_smaller_than_patch_suggests_padding() {
    let g = Geometry::new([8, 40, 40], [1.0; 3]).unwrap();
    let image = Volume::filled(g, 0.0);
    let err = extract_patches(&image, None, &cfg(16, 0), 0, PatchMode::Inference).err().unwrap();
    assert!(err.to_string().contains("pad"), "{err}");
}

#[test]
fn half_overlapping_constant_patches_average() {
    let a = Tensor::from_fn(&[1, 2, 4, 4, 4], |i| if i < 64 { 0.8 } else { 0.2 });
    let b = Tensor::from_fn(&[1, 2, 4, 4, 4], |i| if i < 64 { 0.4 } else { 0.6 });
    let s = stitch_patches(&[a, b], &[[0, 0, 0], [0, 0, 2]], [4, 4, 6]).unwrap();
    let fg = |x: usize| s.data()[96 + x];
    assert!((fg(0) - 0.2).abs() < 1e-6);
    assert!((fg(2) - 0.4).abs() < 1e-6 && (fg(3) - 0.4).abs() < 1e-6);
    assert!((fg(5) - 0.6).abs() < 1e-6);
}

#[test]
fn stitch_rejects_uncovered_voxels() {
    let a = Tensor::zeros(&[1, 2, 2, 2, 2]);
    assert!(stitch_patches(&[a], &[[0, 0, 0]], [2, 2, 3]).is_err());
}

#[test]
fn single_patch_prediction_equals_whole_volume_forward() {
    let net = Network::new(NetworkConfig { base_width: 2, ..Default::default() }, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::rand_uniform(&[1, 1, 16, 16, 16], 0.0, 1.0, &mut rng);
    let whole = net.predict(&x).unwrap();
    let origins = tile_origins([16; 3], 16, 0).unwrap();
    let stitched = stitch_patches(std::slice::from_ref(&whole), &origins, [16; 3]).unwrap();
    assert_eq!(stitched, whole);
}

#[test]
fn resample_extent_and_constant_field() {
    let g = Geometry::new([16, 4, 5], [1.0, 1.0, 1.0]).unwrap();
    let v = Volume::filled(g, 0.37);
    let r = resample(&v, [0.8, 1.0, 0.6], Interp::Trilinear).unwrap();
    assert_eq!(r.extents(), [20, 4, 8]);
    assert!(r.data.iter().all(|&x| (x - 0.37).abs() < 1e-6));
    assert_eq!(resample(&v, [1.0; 3], Interp::Trilinear).unwrap(), v);
    assert!(resample(&v, [0.0, 1.0, 1.0], Interp::Trilinear).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn windowing_is_idempotent_and_monotone(values in prop::collection::vec(-3000.0f32..3000.0, 2..64)) {
        let g = Geometry::new([1, 1, values.len()], [1.0; 3]).unwrap();
        let c = PreprocessConfig::default();
        let once = clamp_and_window(&Volume::new(g, values.clone()).unwrap(), &c);
        // the output is in [0,1], inside the window, so a second pass with a
        // window containing [0,1] changes nothing
        let unit = PreprocessConfig { hu_min: 0.0, hu_max: 1.0, ..c.clone() };
        prop_assert_eq!(&clamp_and_window(&once, &unit), &once);
        prop_assert_eq!(&clamp_and_window(&Volume::new(g, values.clone()).unwrap(), &c), &once);
        for i in 0..values.len() {
            for j in 0..values.len() {
                if values[i] <= values[j] {
                    prop_assert!(once.data[i] <= once.data[j]);
                }
            }
        }
    }

    #[test]
    fn nearest_resampling_keeps_labels_binary(
        extents in prop::array::uniform3(2usize..9),
        spacing in prop::array::uniform3(0.4f64..2.0),
        target in prop::array::uniform3(0.4f64..2.0),
        all_fg in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Geometry::new(extents, spacing).unwrap();
        let labels: Vec<u8> = (0..g.len()).map(|_| if all_fg { 1 } else { rng.gen_range(0..2) }).collect();
        let m = LabelVolume::new(g, labels.clone()).unwrap();
        let r = resample_labels(&m, target).unwrap();
        for &l in r.labels() {
            prop_assert!(labels.contains(&l));
        }
        let f = resample(&Volume::new(g, m.to_f32()).unwrap(), target, Interp::Nearest).unwrap();
        prop_assert!(f.data.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn tiles_cover_every_voxel(
        extents in prop::array::uniform3(16usize..40),
        overlap in 0usize..12,
    ) {
        let origins = tile_origins(extents, 16, overlap).unwrap();
        let preds: Vec<Tensor> = origins.iter().map(|_| Tensor::full(&[1, 1, 16, 16, 16], 1.0)).collect();
        let s = stitch_patches(&preds, &origins, extents).unwrap();
        prop_assert!(s.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn stitching_crops_of_a_field_reproduces_it(
        extents in prop::array::uniform3(8usize..20),
        overlap in 0usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Geometry::new(extents, [1.0; 3]).unwrap();
        let field = Volume::new(g, (0..g.len()).map(|_| rng.gen()).collect()).unwrap();
        let origins = tile_origins(extents, 8, overlap).unwrap();
        let preds: Vec<Tensor> = origins
            .iter()
            .map(|&o| crop_patch(&field, None, o, 8).unwrap().image_tensor())
            .collect();
        let s = stitch_patches(&preds, &origins, extents).unwrap();
        for (a, b) in s.data().iter().zip(&field.data) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
