use liteflow::checkpoint;
use liteflow::flowio::{decode_flo, encode_flo, kitti_decode, kitti_encode, read_kitti_png, write_kitti_png, KITTI_SCALE, KITTI_ZERO};
use liteflow::metrics::{aee, fl_all, is_fl_outlier, out_noc, EvalReport};
use liteflow_tensor::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_mask(h: usize, w: usize, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn([1, 1, h, w], |_, _, _, _| if r.gen_bool(0.6) { 1.0 } else { 0.0 })
}

fn epe(est: &Tensor, gt: &Tensor, y: usize, x: usize) -> f64 {
    (est.at(0, 0, y, x) - gt.at(0, 0, y, x)).hypot(est.at(0, 1, y, x) - gt.at(0, 1, y, x))
}

/// Masked pixels recomputed by a plain loop: `(Σ epe, outliers, epe > 3, count)`.
fn tally(est: &Tensor, gt: &Tensor, mask: &Tensor) -> (f64, f64, f64, f64) {
    let s = gt.shape();
    let mut t = (0.0, 0.0, 0.0, 0.0);
    for y in 0..s.h {
        for x in 0..s.w {
            if mask.at(0, 0, y, x) == 0.0 {
                continue;
            }
            let e = epe(est, gt, y, x);
            let mag = gt.at(0, 0, y, x).hypot(gt.at(0, 1, y, x));
            t.0 += e;
            t.1 += f64::from(u8::from(e >= 3.0 && e >= 0.05 * mag));
            t.2 += f64::from(u8::from(e > 3.0));
            t.3 += 1.0;
        }
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_respect_the_mask(seed in any::<u64>(), h in 1usize..9, w in 1usize..9, ty in 0usize..9, tx in 0usize..9) {
        let mut r = rng(seed);
        let gt = Tensor::uniform([1, 2, h, w], -20.0, 20.0, &mut r);
        let est = Tensor::uniform([1, 2, h, w], -20.0, 20.0, &mut r);
        let mut mask = random_mask(h, w, &mut r);
        for _ in 0..2 {
            let (sum, outliers, bad, count) = tally(&est, &gt, &mask);
            if count == 0.0 {
                prop_assert!(aee(&est, &gt, Some(&mask)).is_err());
            } else {
                prop_assert!((aee(&est, &gt, Some(&mask)).unwrap() - sum / count).abs() < 1e-12);
                prop_assert!((fl_all(&est, &gt, Some(&mask)).unwrap() - 100.0 * outliers / count).abs() < 1e-12);
                prop_assert!((out_noc(&est, &gt, &mask).unwrap() - 100.0 * bad / count).abs() < 1e-12);
            }
            // Toggle one pixel and recompute against the loop.
            let (y, x) = (ty % h, tx % w);
            let v = mask.at(0, 0, y, x);
            mask.set(0, 0, y, x, 1.0 - v);
        }
    }

    #[test]
    fn report_values_are_in_range(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
        let mut r = rng(seed);
        let gt = Tensor::uniform([1, 2, h, w], -20.0, 20.0, &mut r);
        let est = Tensor::uniform([1, 2, h, w], -20.0, 20.0, &mut r);
        let rep = EvalReport::compute(&est, &gt, None, Some(&Tensor::full([1, 1, h, w], 1.0))).unwrap();
        prop_assert!(rep.aee >= 0.0);
        prop_assert!((0.0..=100.0).contains(&rep.fl_all));
        prop_assert!((0.0..=100.0).contains(&rep.out_noc.unwrap()));
    }

    #[test]
    fn outlier_needs_both_thresholds(e in 0.0f64..10.0, mag in 0.0f64..200.0) {
        prop_assert_eq!(is_fl_outlier(e, mag), e >= 3.0 && e >= 0.05 * mag);
    }

    #[test]
    fn flo_round_trip_is_byte_exact(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let f = Tensor::uniform([1, 2, h, w], -500.0, 500.0, &mut rng(seed)).map(|v| v as f32 as f64);
        let bytes = encode_flo(&f).unwrap();
        let back = decode_flo(&bytes).unwrap();
        prop_assert_eq!(back.data(), f.data());
        prop_assert_eq!(encode_flo(&back).unwrap(), bytes);
    }

    #[test]
    fn kitti_codes_round_trip(raw in any::<u16>()) {
        prop_assert_eq!(kitti_encode(kitti_decode(raw)), raw);
        prop_assert_eq!(kitti_decode(raw), (raw as f64 - KITTI_ZERO) / KITTI_SCALE);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn kitti_png_round_trip_is_byte_exact(seed in any::<u64>(), h in 1usize..10, w in 1usize..10) {
        let mut r = rng(seed);
        let flow = Tensor::from_fn([1, 2, h, w], |_, _, _, _| kitti_decode(r.gen()));
        let valid = random_mask(h, w, &mut r);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        write_kitti_png(&a, &flow, Some(&valid)).unwrap();
        let (f2, v2) = read_kitti_png(&a).unwrap();
        prop_assert_eq!(v2.data(), valid.data());
        for y in 0..h {
            for x in 0..w {
                if valid.at(0, 0, y, x) != 0.0 {
                    prop_assert_eq!(f2.at(0, 0, y, x), flow.at(0, 0, y, x));
                    prop_assert_eq!(f2.at(0, 1, y, x), flow.at(0, 1, y, x));
                }
            }
        }
        write_kitti_png(&b, &f2, Some(&v2)).unwrap();
        prop_assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact(seed in any::<u64>(), count in 1usize..6) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        for i in 0..count {
            let dims = [r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4)];
            store.add(format!("layer{i}/weight"), Tensor::uniform(dims, -1.0, 1.0, &mut r).map(|v| v as f32 as f64)).unwrap();
        }
        let bytes = checkpoint::encode(&store);
        let mut fresh = ParamStore::new();
        for p in store.sorted() {
            fresh.add(p.name.clone(), p.value.map(|_| 0.0)).unwrap();
        }
        checkpoint::load_into(&mut fresh, &bytes).unwrap();
        prop_assert_eq!(checkpoint::encode(&fresh), bytes);
        for p in store.sorted() {
            prop_assert_eq!(fresh.by_name(&p.name).unwrap().value.data(), p.value.data());
        }
    }
}
