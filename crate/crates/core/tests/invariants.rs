use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tpmamba_core::adapter::{plane_flatten, plane_unflatten, ConvMode, Plane, TpMambaConfig};
use tpmamba_core::checkpoint::Checkpoint;
use tpmamba_core::encoder::ViTConfig;
use tpmamba_core::loss::{dice_score, Labels};
use tpmamba_core::selfcheck::{adapter_is_transparent, encoder_is_transparent, scan_suite, tri_plane_sum_error};
use tpmamba_core::volume::normalize_hu;
use tpmamba_core::{ParamStore, Tensor};

#[test]
fn production_scan_matches_recurrence() {
    for c in scan_suite(11).unwrap() {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
}

#[test]
fn tri_plane_is_sum_of_single_planes() {
    for conv_mode in [ConvMode::MultiScale, ConvMode::Single] {
        let cfg = TpMambaConfig { conv_mode, d_state: 4, ..TpMambaConfig::new(12, 8) };
        let err = tri_plane_sum_error(&cfg, [2, 8, 4, 3, 5], 3).unwrap();
        assert!(err < 1e-6, "{conv_mode:?}: {err}");
    }
}

#[test]
fn fresh_model_is_frozen_backbone() {
    assert!(adapter_is_transparent(&TpMambaConfig::new(96, 24), [4, 96, 2, 2], 0).unwrap());
    assert!(encoder_is_transparent(ViTConfig::toy(32), 4, 5, 1).unwrap());
}

fn dims5() -> impl Strategy<Value = [usize; 5]> {
    prop::array::uniform5(1usize..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plane_round_trip_is_bit_exact(dims in dims5(), seed in any::<u64>()) {
        let x = Tensor::<f32>::randn(&dims, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        for plane in Plane::ALL {
            let seq = plane_flatten(&x, plane).unwrap();
            prop_assert_eq!(seq.numel(), x.numel());
            prop_assert_eq!(*seq.shape().last().unwrap(), dims[1]);
            let back = plane_unflatten(&seq, plane, dims).unwrap();
            prop_assert!(back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 1..5), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f32>::new();
        for (i, s) in shapes.iter().enumerate() {
            store.add(format!("t{i}"), Tensor::randn(s, 1.0, &mut rng), i % 2 == 0);
        }
        let bytes = Checkpoint::from_store(&store, vec![("k".into(), "v".into())], seed).to_bytes().unwrap();
        let again = Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap();
        prop_assert_eq!(bytes, again);
    }

    #[test]
    fn dice_is_bounded_and_reflexive(data in prop::collection::vec(0u8..3, 27), other in prop::collection::vec(0u8..3, 27)) {
        let a = Labels::new(&[1, 3, 3, 3], data).unwrap();
        let b = Labels::new(&[1, 3, 3, 3], other).unwrap();
        prop_assert_eq!(dice_score(&a, &a, 3).unwrap().mean, 1.0);
        let r = dice_score(&a, &b, 3).unwrap();
        prop_assert!(r.per_class.iter().all(|d| (0.0..=1.0).contains(d)));
    }

    #[test]
    fn hu_window_is_monotone(a in -2000f32..3000.0, b in -2000f32..3000.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(normalize_hu(lo) <= normalize_hu(hi));
        prop_assert!((0.0..=1.0).contains(&normalize_hu(lo)));
    }
}
