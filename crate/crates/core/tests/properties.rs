use proptest::prelude::*;
use qsm_core::classical::tkd_invert;
use qsm_core::classical::TkdParams;
use qsm_core::config::parse_key_values;
use qsm_core::losses::mask_input;
use qsm_core::metrics::{psnr, rmse, roi_regression, ssim3, RegressionMode, RoiSet, SsimParams};
use qsm_core::nn::Tensor;
use qsm_core::training::{augment, coverage_counts, window_origins, Augmentation, PatchGroup};
use qsm_core::volume::io::{decode_volume, encode_volume};
use qsm_core::{
    build_dipole, div3, fft3, forward_field, grad3, ifft3, Mask, RealVolume, VolumeMeta,
};
use std::path::Path;

fn meta_strategy() -> impl Strategy<Value = VolumeMeta> {
    (
        prop::array::uniform3(2usize..9),
        prop::array::uniform3(0.5f64..2.0),
        prop::array::uniform3(-1.0f64..1.0),
    )
        .prop_filter_map("b0 must be non-zero", |(dims, vs, b0)| {
            let n = (b0[0] * b0[0] + b0[1] * b0[1] + b0[2] * b0[2]).sqrt();
            (n > 0.1).then(|| VolumeMeta::new(dims, vs, b0.map(|c| c / n)).unwrap())
        })
}

fn volume_for(meta: VolumeMeta) -> impl Strategy<Value = RealVolume> {
    prop::collection::vec(-1.0f64..1.0, meta.len())
        .prop_map(move |d| RealVolume::new(meta, d).unwrap())
}

fn meta_and_volumes(k: usize) -> impl Strategy<Value = (VolumeMeta, Vec<RealVolume>)> {
    meta_strategy().prop_flat_map(move |m| (Just(m), prop::collection::vec(volume_for(m), k)))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dipole_spectrum_bounded_and_even(meta in meta_strategy()) {
        let k = build_dipole(meta).unwrap();
        let [nx, ny, nz] = meta.dims;
        prop_assert_eq!(k.spectrum[0], 0.0);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let d = k.spectrum[meta.index(x, y, z)];
                    prop_assert!((-2.0 / 3.0..=1.0 / 3.0).contains(&d));
                    let m = k.spectrum[meta.index((nx - x) % nx, (ny - y) % ny, (nz - z) % nz)];
                    prop_assert!((d - m).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_is_linear_and_self_adjoint((meta, v) in meta_and_volumes(2), a in -3.0f64..3.0) {
        let k = build_dipole(meta).unwrap();
        let (x, y) = (&v[0], &v[1]);
        let hx = forward_field(x, &k).unwrap();
        let hy = forward_field(y, &k).unwrap();
        prop_assert!((hx.dot(y) - x.dot(&hy)).abs() <= 1e-10 * (x.norm2() * y.norm2()).max(1e-300));
        let combo = forward_field(&x.zip_map(y, |p, q| a * p + q), &k).unwrap();
        let expect = hx.zip_map(&hy, |p, q| a * p + q);
        let err = combo.zip_map(&expect, |p, q| p - q).norm2();
        prop_assert!(err <= 1e-10 * (x.norm2() + y.norm2()));
    }

    #[test]
    fn forward_never_amplifies((meta, v) in meta_and_volumes(1)) {
        // |d| <= 2/3 everywhere, so the operator norm is at most 2/3.
        let b = forward_field(&v[0], &build_dipole(meta).unwrap()).unwrap();
        prop_assert!(b.norm2() <= 2.0 / 3.0 * v[0].norm2() * (1.0 + 1e-12));
    }

    #[test]
    fn tkd_inverts_off_the_cone((meta, v) in meta_and_volumes(1), a in 0.05f64..0.3) {
        let k = build_dipole(meta).unwrap();
        let mut spec = fft3(&v[0]).unwrap();
        for (c, &d) in spec.data.iter_mut().zip(&k.spectrum) {
            if d.abs() <= a {
                *c = 0.0.into();
            }
        }
        let chi = ifft3(&spec).unwrap().real();
        prop_assume!(chi.norm2() > 1e-6);
        let back = tkd_invert(&forward_field(&chi, &k).unwrap(), &k, TkdParams { a }).unwrap();
        let err = back.zip_map(&chi, |p, q| p - q).norm2() / chi.norm2();
        prop_assert!(err < 1e-9, "{}", err);
    }

    #[test]
    fn div_is_negative_adjoint_of_grad((_meta, v) in meta_and_volumes(4)) {
        let g = grad3(&v[0]);
        let lhs: f64 = (0..3).map(|a| g[a].dot(&v[a + 1])).sum();
        let rhs = -v[0].dot(&div3(&v[1], &v[2], &v[3]).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn metrics_ignore_voxel_order(
        (meta, v) in meta_and_volumes(2),
        keep in prop::collection::vec(any::<bool>(), 512),
        shift in 1usize..500,
    ) {
        let n = meta.len();
        let mut m: Vec<bool> = (0..n).map(|i| keep[i % keep.len()]).collect();
        m[0] = true;
        let truth = v[0].map(|x| x + 2.0);
        let recon = &v[1];
        let mask = Mask::new(meta, m.clone()).unwrap();
        // A cyclic shift of every voxel list is a permutation of the evaluated set.
        let rot = |d: &[f64]| { let mut d = d.to_vec(); d.rotate_left(shift % n); d };
        let mut mr = m.clone();
        mr.rotate_left(shift % n);
        let truth_r = RealVolume::new(meta, rot(&truth.data)).unwrap();
        let recon_r = RealVolume::new(meta, rot(&recon.data)).unwrap();
        let mask_r = Mask::new(meta, mr).unwrap();
        prop_assert!(close(rmse(&truth, recon, &mask).unwrap(), rmse(&truth_r, &recon_r, &mask_r).unwrap(), 1e-12));
        prop_assert!(close(
            psnr(&truth, recon, Some(&mask), None).unwrap(),
            psnr(&truth_r, &recon_r, Some(&mask_r), None).unwrap(),
            1e-12
        ));
    }

    #[test]
    fn regression_ignores_roi_order((meta, v) in meta_and_volumes(2)) {
        let n = meta.len();
        prop_assume!(n >= 6);
        let roi = |lo: usize, hi: usize| Mask::new(meta, (0..n).map(|i| i >= lo && i < hi).collect()).unwrap();
        let parts = vec![("a".to_string(), roi(0, n / 3)), ("b".to_string(), roi(n / 3, 2 * n / 3)), ("c".to_string(), roi(2 * n / 3, n))];
        let mut reversed = parts.clone();
        reversed.reverse();
        for mode in [RegressionMode::Pooled, RegressionMode::Means] {
            let a = roi_regression(&v[0], &v[1], &RoiSet::new(parts.clone()).unwrap(), mode);
            let b = roi_regression(&v[0], &v[1], &RoiSet::new(reversed.clone()).unwrap(), mode);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    prop_assert!((a.slope - b.slope).abs() <= 1e-9 * (1.0 + a.slope.abs()));
                    prop_assert!((a.intercept - b.intercept).abs() <= 1e-9 * (1.0 + a.intercept.abs()));
                    prop_assert_eq!(a.points, b.points);
                }
                (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
            }
        }
    }

    #[test]
    fn ssim_is_one_on_identity_and_at_most_one((meta, v) in meta_and_volumes(2)) {
        let p = SsimParams { window: 3, ..SsimParams::default() };
        let truth = &v[0];
        prop_assume!(meta.dims.iter().all(|&d| d >= 3));
        let same = ssim3(truth, truth, None, p).unwrap();
        prop_assert!((same - 1.0).abs() <= 1e-12);
        let other = ssim3(truth, &v[1], None, p).unwrap();
        prop_assert!(other <= 1.0 + 1e-12);
    }

    #[test]
    fn augmentations_invert(
        n in 2usize..6,
        depth in 1usize..5,
        axis in 0usize..3,
        flips in prop::array::uniform3(any::<bool>()),
        turns in 0u8..4,
    ) {
        let mut dims = [n; 3];
        dims[axis] = depth;
        let len = dims.iter().product();
        // Distinct values per channel make every voxel traceable.
        let ch = |k: f64| (0..len).map(|i| i as f64 + k).collect::<Vec<_>>();
        let group = PatchGroup { dims, channels: vec![ch(0.0), ch(0.5)] };
        let aug = Augmentation { flips, quarter_turns: turns };
        let once = augment(&group, aug, Some(axis)).unwrap();
        // Values move but none are created or lost, and channels stay co-registered.
        let mut a = once.channels[0].clone();
        let mut b = group.channels[0].clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
        let pos = |g: &PatchGroup, c: usize, v: f64| g.channels[c].iter().position(|&x| x == v);
        for i in 0..len {
            let j = pos(&once, 0, group.channels[0][i]);
            prop_assert_eq!(j.map(|j| once.channels[1][j]), Some(group.channels[1][i]));
        }
        // Four quarter turns and a double flip are the identity.
        let mut g = group.clone();
        for _ in 0..4 {
            g = augment(&g, Augmentation { flips: [false; 3], quarter_turns: 1 }, Some(axis)).unwrap();
        }
        prop_assert_eq!(&g, &group);
        let f = Augmentation { flips, quarter_turns: 0 };
        prop_assert_eq!(&augment(&augment(&group, f, Some(axis)).unwrap(), f, Some(axis)).unwrap(), &group);
    }

    #[test]
    fn windows_cover_every_voxel(dims in prop::array::uniform3(1usize..24), p in 1usize..12, s_frac in 0.1f64..1.0) {
        let s = ((p as f64 * s_frac).ceil() as usize).clamp(1, p);
        for &n in &dims {
            let n = n.max(p);
            let o = window_origins(n, p, s);
            prop_assert_eq!(o[0], 0);
            prop_assert_eq!(*o.last().unwrap(), n - p);
            prop_assert!(o.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= s));
        }
        let counts = coverage_counts(dims, p, s);
        prop_assert!(counts.iter().all(|&c| c >= 1));
    }

    #[test]
    fn volume_files_round_trip(meta in meta_strategy(), bits in prop::collection::vec(any::<f32>(), 512)) {
        let data: Vec<f64> = (0..meta.len()).map(|i| {
            let v = bits[i % bits.len()];
            if v.is_finite() { v as f64 } else { 0.5 }
        }).collect();
        let v = RealVolume::new(meta, data).unwrap();
        let bytes = encode_volume(&v);
        let back = decode_volume(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.meta, v.meta);
        prop_assert!(back.data.iter().zip(&v.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(encode_volume(&back), bytes);
    }

    #[test]
    fn masking_hides_everything_outside(
        vals in prop::collection::vec(-10.0f32..10.0, 27),
        junk in prop::collection::vec(prop_oneof![-1e6f32..1e6, Just(f32::INFINITY), Just(f32::NEG_INFINITY), Just(f32::NAN)], 27),
        keep in prop::collection::vec(any::<bool>(), 27),
    ) {
        let mask: Vec<f32> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        let poisoned: Vec<f32> = vals.iter().zip(&junk).zip(&keep).map(|((&v, &j), &k)| if k { v } else { j }).collect();
        let a = mask_input(&Tensor::new(vec![1, 3, 3, 3], vals).unwrap(), &mask).unwrap();
        let b = mask_input(&Tensor::new(vec![1, 3, 3, 3], poisoned).unwrap(), &mask).unwrap();
        prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn key_values_round_trip(pairs in prop::collection::vec(("[a-z][a-z_]{0,8}", "[A-Za-z0-9.+-]{1,10}( [A-Za-z0-9.+-]{1,10}){0,2}"), 0..8)) {
        let mut text = String::from("# generated\n\n");
        for (k, v) in &pairs {
            text.push_str(&format!("  {k} =  {v}  # trailing\n"));
        }
        let kv = parse_key_values(&text).unwrap();
        prop_assert_eq!(kv.entries().len(), pairs.len());
        for (e, (k, v)) in kv.entries().iter().zip(&pairs) {
            prop_assert_eq!(&e.key, k);
            prop_assert_eq!(&e.value, v);
        }
    }
}
