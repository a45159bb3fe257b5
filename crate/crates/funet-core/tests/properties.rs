//! Randomized invariants over the core operations.

use proptest::prelude::*;

use funet_core::evaluation::dice;
use funet_core::flow::{flow_magnitude, read_flo, write_flo, FlowField};
use funet_core::imageio::{Frame, MaskImage};
use funet_core::motionmask::threshold_mask;
use funet_core::tensorops::{concat_channels, split_channels, Tensor};

fn mask_strategy(w: usize, h: usize) -> impl Strategy<Value = MaskImage> {
    prop::collection::vec(0u8..=1, w * h)
        .prop_map(move |data| MaskImage::new(w, h, data).unwrap())
}

fn flow_strategy(w: usize, h: usize) -> impl Strategy<Value = FlowField> {
    let coords = prop::collection::vec(-10.0f32..10.0, w * h);
    (coords.clone(), coords).prop_map(move |(u, v)| FlowField { width: w, height: h, u, v })
}

proptest! {
    #[test]
    fn dice_is_symmetric_and_bounded(a in mask_strategy(5, 4), b in mask_strategy(5, 4)) {
        let ab = dice(&a, &b).unwrap();
        let ba = dice(&b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn threshold_is_monotone_in_alpha(
        mags in prop::collection::vec(0.0f64..5.0, 24),
        lo in 0.0f64..2.0,
        delta in 0.0f64..2.0,
    ) {
        let mag = Tensor::from_vec(&[4, 6], mags).unwrap();
        let loose = threshold_mask(&mag, lo).unwrap();
        let tight = threshold_mask(&mag, lo + delta).unwrap();
        // Raising the threshold can only turn pixels off.
        for (l, t) in loose.data.iter().zip(&tight.data) {
            prop_assert!(t <= l);
        }
    }

    #[test]
    fn flo_round_trip_preserves_fields(flow in flow_strategy(6, 5)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");
        write_flo(&flow, &path).unwrap();
        prop_assert_eq!(read_flo(&path).unwrap(), flow);
    }

    #[test]
    fn magnitude_dominates_components(flow in flow_strategy(4, 4)) {
        let mag = flow_magnitude(&flow);
        for i in 0..flow.u.len() {
            prop_assert!(mag.data[i] + 1e-9 >= flow.u[i].abs() as f64);
            prop_assert!(mag.data[i] + 1e-9 >= flow.v[i].abs() as f64);
        }
    }

    #[test]
    fn split_inverts_concat(
        a_data in prop::collection::vec(-1.0f64..1.0, 2 * 3 * 4),
        b_data in prop::collection::vec(-1.0f64..1.0, 2 * 3 * 4),
    ) {
        let a = Tensor::from_vec(&[1, 2, 3, 4], a_data).unwrap();
        let b = Tensor::from_vec(&[1, 2, 3, 4], b_data).unwrap();
        let cat = concat_channels(&a, &b).unwrap();
        let (a2, b2) = split_channels(&cat, 2).unwrap();
        prop_assert_eq!(a2, a);
        prop_assert_eq!(b2, b);
    }

    #[test]
    fn grayscale_of_gray_pixels_is_identity(values in prop::collection::vec(0.0f32..=1.0, 12)) {
        let data: Vec<f32> = values.iter().flat_map(|&v| [v, v, v]).collect();
        let frame = Frame::new(4, 3, 3, data).unwrap();
        let gray = funet_core::imageio::to_grayscale(&frame);
        for (g, &v) in gray.data.iter().zip(&values) {
            prop_assert!((g - v).abs() < 1e-5);
        }
    }
}
