use cmgan::imageio::{byte_to_unit, procedural_sample, unit_to_byte};
use cmgan::maskgen::{dilate, exclude_instances, overlap_ratio, InstanceMap, Mask};
use cmgan::tensor::{irfft2_plane, rfft2_plane};
use cmgan::Prng;
use proptest::prelude::*;

fn mask_from(bits: &[bool], w: usize, h: usize) -> Mask {
    Mask::from_vec(w, h, bits.iter().map(|&b| b as u8).collect()).unwrap()
}

proptest! {
    #[test]
    fn rfft_roundtrip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let mut rng = Prng::new(seed);
        let x: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
        let back = irfft2_plane(&rfft2_plane(&x, h, w), h, w);
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn byte_unit_roundtrip(v in any::<u8>()) {
        let x = byte_to_unit(v);
        prop_assert!((-1.0..=1.0).contains(&x));
        prop_assert_eq!(unit_to_byte(x), v);
    }

    #[test]
    fn dilation_is_extensive_and_monotone(
        bits in proptest::collection::vec(any::<bool>(), 100),
        r in 0usize..4,
    ) {
        let m = mask_from(&bits, 10, 10);
        let d = dilate(&m, r);
        let d1 = dilate(&m, r + 1);
        for i in 0..100 {
            let (x, y) = (i % 10, i / 10);
            prop_assert!(!m.get(x, y) || d.get(x, y));
            prop_assert!(!d.get(x, y) || d1.get(x, y));
        }
    }

    #[test]
    fn exclusion_removes_every_covered_instance(
        seed in any::<u64>(),
        bits in proptest::collection::vec(any::<bool>(), 32 * 32),
        tau in 0.1f64..0.9,
        r in 0usize..3,
    ) {
        let sample = procedural_sample(&mut Prng::new(seed), 32, 4);
        let inst: &InstanceMap = &sample.instances;
        let hole = mask_from(&bits, 32, 32);
        let (out, excluded) = exclude_instances(&hole, inst, tau, r).unwrap();
        for id in 1..=inst.num_instances() {
            let s = inst.instance(id);
            let covered = overlap_ratio(&hole, &s).unwrap() > tau;
            prop_assert_eq!(covered, excluded.contains(&id));
            if covered {
                prop_assert_eq!(out.intersection_area(&dilate(&s, r)), 0);
            }
        }
        // nothing is added to the hole
        prop_assert_eq!(out.intersection_area(&hole), out.area());
    }
}
