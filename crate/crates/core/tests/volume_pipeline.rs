use mna_core::volume::codec::{decode_volume, encode_volume};
use mna_core::volume::patch::{extract_patch, make_patch_grid};
use mna_core::volume::preprocess::{normalize_intensity, temporal_average, FrameSequence};
use mna_core::volume::{Modality, Volume};
use proptest::prelude::*;
use std::path::Path;

fn vol(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f32) -> Volume {
    let mut v = Volume::filled(dims, 0.0, Modality::Mri, "s");
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = v.index(x, y, z);
                v.voxels_mut()[i] = f(x, y, z);
            }
        }
    }
    v
}

#[test]
fn weighted_frame_average() {
    let a = Volume::filled([2, 2, 2], 1.0, Modality::Pet, "s");
    let b = Volume::filled([2, 2, 2], 4.0, Modality::Pet, "s");
    let avg = temporal_average(&FrameSequence::new(vec![a, b], vec![5.0, 20.0]).unwrap()).unwrap();
    assert!(avg.voxels().iter().all(|&v| (v - 3.4).abs() < 1e-6));
}

#[test]
fn mismatched_frames_are_rejected() {
    let a = Volume::filled([2, 2, 2], 1.0, Modality::Pet, "s");
    let b = Volume::filled([2, 2, 3], 1.0, Modality::Pet, "s");
    assert!(FrameSequence::new(vec![a, b], vec![1.0, 1.0]).is_err());
}

#[test]
fn two_point_zscore_and_zero_volume() {
    let v = vol([2, 1, 1], |x, _, _| if x == 0 { 2.0 } else { 4.0 });
    assert_eq!(normalize_intensity(&v).unwrap().voxels(), &[-1.0, 1.0]);
    assert!(normalize_intensity(&Volume::filled([2, 2, 2], 0.0, Modality::Mri, "s")).is_err());
}

#[test]
fn ramp_patch_matches_index_arithmetic() {
    let dims = [9, 11, 7];
    let v = vol(dims, |x, y, z| (x + 100 * y + 10000 * z) as f32);
    let (start, p) = ([2, 3, 1], [4, 5, 3]);
    let t = extract_patch(&v, start, p).unwrap();
    assert_eq!(t.numel(), 60);
    let mut expected: Vec<f32> = Vec::new();
    for z in 0..p[2] {
        for y in 0..p[1] {
            for x in 0..p[0] {
                expected.push(v.get(start[0] + x, start[1] + y, start[2] + z));
            }
        }
    }
    let mut got = t.data().to_vec();
    let mut want = expected.clone();
    got.sort_by(f32::total_cmp);
    want.sort_by(f32::total_cmp);
    assert_eq!(got, want);
    assert!(extract_patch(&v, [6, 0, 0], p).is_err());
}

#[test]
fn small_even_grid() {
    let g = make_patch_grid([4, 4, 4], [2, 2, 2]).unwrap();
    for a in 0..3 {
        assert_eq!(g.axis_starts(a), [0, 1, 2]);
    }
    assert!(make_patch_grid([20, 20, 20], [4, 4, 4]).is_err());
    assert!(make_patch_grid([4, 4, 4], [5, 2, 2]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn legal_grids_cover_every_voxel(p in prop::array::uniform3(2usize..20), extra in prop::array::uniform3(0usize..100)) {
        let dims: [usize; 3] = std::array::from_fn(|a| p[a] + extra[a] % (p[a] / 2 + 1));
        let g = make_patch_grid(dims, p).unwrap();
        let mut hit = vec![false; dims.iter().product()];
        for s in g.starts() {
            for z in s[2]..s[2] + p[2] {
                for y in s[1]..s[1] + p[1] {
                    for x in s[0]..s[0] + p[0] {
                        hit[x + dims[0] * (y + dims[1] * z)] = true;
                    }
                }
            }
        }
        prop_assert_eq!(g.starts().len(), 27);
        prop_assert!(hit.iter().all(|&h| h));
        for a in 0..3 {
            let s = g.axis_starts(a);
            prop_assert!(s[2] + p[a] == dims[a]);
            for w in s.windows(2) {
                let overlap = (w[0] + p[a]).saturating_sub(w[1]);
                prop_assert!(overlap + 8 >= p[a] / 2);
            }
        }
    }

    #[test]
    fn normalized_mask_has_unit_moments(data in prop::collection::vec(1.0f32..50.0, 27)) {
        prop_assume!(data.iter().any(|&x| (x - data[0]).abs() > 1e-2));
        let v = Volume::new([3, 3, 3], data, Modality::Pet, "s").unwrap();
        let n = normalize_intensity(&v).unwrap();
        let xs: Vec<f64> = n.voxels().iter().map(|&x| x as f64).collect();
        let mean = xs.iter().sum::<f64>() / 27.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 27.0;
        prop_assert!(mean.abs() < 1e-5);
        prop_assert!((var.sqrt() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn codec_round_trips(data in prop::collection::vec(-1e3f32..1e3, 24)) {
        let v = Volume::new([2, 3, 4], data, Modality::Mri, "s").unwrap();
        let back = decode_volume(&encode_volume(&v), Path::new("mem"), Modality::Mri, "s").unwrap();
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert_eq!(back.voxels(), v.voxels());
    }
}
