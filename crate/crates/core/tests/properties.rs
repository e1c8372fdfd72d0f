use cefgl::compress::{
    decode_payload, dequantize, encode_payload, quantize, quantize_stochastic, CodecConfig,
    CompressedPayload, Sparsifier,
};
use cefgl::graphdata::{partition_clients, synth_generate, PartitionMode, SynthSpec};
use cefgl::linalg::{truncate_matrix, Matrix, ThresholdMode};
use cefgl::rng;
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |v| Matrix::from_vec(r, c, v))
    })
}

fn codec() -> impl Strategy<Value = CodecConfig> {
    prop_oneof![
        Just(CodecConfig::dense()),
        (1u8..=32).prop_map(CodecConfig::quantized),
        (1u8..=32, 0.0f64..1.0).prop_map(|(b, t)| CodecConfig::low_rank(b, t)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn payload_bytes_roundtrip(
        mats in prop::collection::vec(matrix(6, 6), 1..5),
        zero in any::<bool>(),
        cfg in codec(),
    ) {
        let mut mats = mats;
        if zero {
            mats[0] = Matrix::zeros(mats[0].rows(), mats[0].cols());
        }
        let names: Vec<String> = (0..mats.len()).map(|i| format!("t{i}")).collect();
        let p = encode_payload(names.iter().map(String::as_str).zip(&mats), &cfg).unwrap();
        let bytes = p.to_bytes();
        prop_assert_eq!(bytes.len() as u64 * 8, p.bits());
        let back = CompressedPayload::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &p);
        let decoded = decode_payload(&bytes).unwrap();
        prop_assert_eq!(decoded, p.reconstruct());
        for ((n, m), orig) in p.reconstruct().iter().zip(&mats) {
            prop_assert_eq!(m.shape(), orig.shape(), "{}", n);
            if orig.is_zero() {
                prop_assert!(m.is_zero());
            }
        }
    }

    #[test]
    fn truncated_payload_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = CompressedPayload::from_bytes(&bytes);
    }

    #[test]
    fn quantizer_bound_holds(x in prop::collection::vec(-1e3f64..1e3, 1..64), bits in 1u8..=32) {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y = dequantize(&quantize(&x, bits).unwrap());
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a - b).abs() <= norm / f64::powi(2.0, i32::from(bits) + 1) + 1e-9 * norm.max(1.0));
        }
    }

    #[test]
    fn stochastic_levels_are_adjacent(x in prop::collection::vec(-5.0f64..5.0, 1..32), bits in 1u8..=8, seed in any::<u64>()) {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let step = norm / f64::powi(2.0, i32::from(bits));
        let y = dequantize(&quantize_stochastic(&x, bits, &mut rng::stream(seed, "prop", &[])).unwrap());
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a - b).abs() <= step * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn truncation_rank_and_error(m in matrix(7, 7), tau in 0.0f64..1.0) {
        let (t, rank) = truncate_matrix(&m, ThresholdMode::Relative, tau).unwrap();
        prop_assert!(rank <= m.rows().min(m.cols()));
        prop_assert!(m.sub(&t).unwrap().frobenius_norm() <= m.frobenius_norm() + 1e-9);
        let (again, rank2) = truncate_matrix(&t, ThresholdMode::Relative, 0.0).unwrap();
        prop_assert!(rank2 <= rank.max(1));
        prop_assert!(again.sub(&t).unwrap().frobenius_norm() <= 1e-8 * (1.0 + t.frobenius_norm()));
    }

    #[test]
    fn topk_keeps_at_most_budget(mats in prop::collection::vec(matrix(5, 5), 1..4), beta in 0.0f64..=1.0) {
        let mut mats = mats;
        let total: usize = mats.iter().map(Matrix::len).sum();
        let s = Sparsifier::TopK { beta };
        let mut refs: Vec<&mut Matrix> = mats.iter_mut().collect();
        s.apply_many(&mut refs);
        let nnz: usize = mats.iter().map(Matrix::count_nonzero).sum();
        prop_assert!(nnz <= s.budget(total).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn partitions_cover_every_graph_once(
        n in 20usize..80,
        k in 1usize..6,
        skew in 0.05f64..5.0,
        iid in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let pool = vec![synth_generate(&SynthSpec::preset(n, 3, 0.8), seed).unwrap()];
        let mode = if iid {
            PartitionMode::Iid
        } else {
            PartitionMode::LabelSkew { skew, min_per_client: 1 }
        };
        let part = match partition_clients(&pool, k, mode, seed) {
            Ok(p) => p,
            Err(_) => return Ok(()),
        };
        prop_assert_eq!(part.num_clients(), k);
        let mut seen: Vec<usize> = part.assignments.values().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(partition_clients(&pool, k, mode, seed).unwrap(), part);
    }
}
