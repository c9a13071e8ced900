use ndarray::Array2;
use proptest::prelude::*;
use selfdistill::distill::compression_ratio;
use selfdistill::encoder::{mask_spans, EncoderConfig, MaskSpec};
use selfdistill::features::frame_count;
use selfdistill::io;
use selfdistill::probes::{ctc_loss, edit_distance, greedy_decode};
use selfdistill::quantizer::{nearest, sq_dist};

proptest! {
    #[test]
    fn cnn_frames_follow_receptive_field(n in 400usize..200_000) {
        let cfg = EncoderConfig::tiny_large(8);
        let frames = cfg.output_frames(n).unwrap();
        prop_assert_eq!(frames, (n - 400) / 320 + 1);
        prop_assert_eq!(frames, frame_count(n, 400, 320));
    }

    #[test]
    fn masks_have_requested_length_and_repeat(t in 1usize..300, p in 0.0f64..1.0, span in 1usize..12, seed in any::<u64>()) {
        let spec = MaskSpec::new(p, span, seed);
        let m = mask_spans(t, &spec);
        prop_assert_eq!(m.len(), t);
        prop_assert_eq!(m, mask_spans(t, &spec));
    }

    #[test]
    fn nearest_centroid_is_minimal(vals in prop::collection::vec(-5.0f64..5.0, 3 * 7), x in prop::collection::vec(-5.0f64..5.0, 3)) {
        let c = Array2::from_shape_vec((7, 3), vals).unwrap();
        let x = ndarray::Array1::from(x);
        let (i, d) = nearest(c.view(), x.view());
        for r in c.rows() {
            prop_assert!(d <= sq_dist(r, x.view()));
        }
        prop_assert_eq!(d, sq_dist(c.row(i), x.view()));
    }

    #[test]
    fn ctc_loss_is_nonnegative_with_balanced_gradient(
        vals in prop::collection::vec(-3.0f64..3.0, 6 * 4),
        target in prop::collection::vec(0usize..3, 0..3),
    ) {
        let logits = Array2::from_shape_vec((6, 4), vals).unwrap();
        let out = ctc_loss(logits.view(), &target).unwrap();
        prop_assert!(out.loss >= -1e-12);
        for row in out.grad.rows() {
            prop_assert!(row.sum().abs() < 1e-9);
        }
    }

    #[test]
    fn greedy_output_is_blank_free_and_no_longer_than_input(
        vals in prop::collection::vec(-3.0f64..3.0, 10 * 4),
    ) {
        let logits = Array2::from_shape_vec((10, 4), vals).unwrap();
        let hyp = greedy_decode(logits.view());
        prop_assert!(hyp.iter().all(|&v| v < 3));
        prop_assert!(hyp.len() <= 10);
    }

    #[test]
    fn edit_distance_triangle(a in prop::collection::vec(0u8..4, 0..8), b in prop::collection::vec(0u8..4, 0..8), c in prop::collection::vec(0u8..4, 0..8)) {
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        prop_assert_eq!(edit_distance(&a, &a), 0);
    }

    #[test]
    fn container_round_trip(header in "[a-z]{0,12}", payload in prop::collection::vec(any::<u8>(), 0..64)) {
        let bytes = io::encode_container(&header, &payload).unwrap();
        let (h, p): (String, &[u8]) = io::decode_container(&bytes).unwrap();
        prop_assert_eq!(h, header);
        prop_assert_eq!(p, &payload[..]);
    }

    #[test]
    fn f32_payload_round_trip(v in prop::collection::vec(-1e6f32..1e6, 0..32)) {
        let back = io::f32_from_le(&io::f32_le_bytes(v.iter().map(|&x| x as f64))).unwrap();
        prop_assert_eq!(back, v.iter().map(|&x| x as f64).collect::<Vec<_>>());
    }

    #[test]
    fn compression_ratio_bounds(t in 1usize..1_000_000, s in 1usize..1_000_000) {
        let r = compression_ratio(t, s).unwrap();
        prop_assert!(r < 100.0);
        prop_assert_eq!(r >= 0.0, s <= t);
    }
}
