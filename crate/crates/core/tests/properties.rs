use proptest::prelude::*;

use ulbsc::assign;

use ulbsc::channel::{bpsk_detect, bpsk_modulate, normalize_power, pam_amplitude, pam_decide};
use ulbsc::dataset::{generate_pair, SaliencyMap, SceneSpec, ShapeKind};
use ulbsc::metrics::{self, f_measure, mae, score_map, ThresholdPolicy, BETA2};
use ulbsc::pgm;
use ulbsc::saliency::Latent;
use ulbsc::text::model::argmax;
use ulbsc::text::vocab::{Vocabulary, UNK};
use ulbsc::vq::{self, Codebook, IndexGrid};

fn map_strategy(h: usize, w: usize) -> impl Strategy<Value = SaliencyMap> {
    prop::collection::vec(0.0f32..=1.0, h * w).prop_map(move |v| SaliencyMap::new(h, w, v).unwrap())
}

fn codebook_strategy(n: usize, g: usize, c: usize) -> impl Strategy<Value = Codebook> {
    prop::collection::vec(-2.0f32..2.0, n * g * g * c).prop_map(move |w| Codebook::new(g, c, w).unwrap())
}

fn spec_strategy() -> impl Strategy<Value = SceneSpec> {
    (0usize..3, 0.05f64..0.95, 0.05f64..0.95, 0.05f64..0.95, 0.0f64..3.0, any::<u64>()).prop_map(
        |(k, r, c, size, blur, seed)| SceneSpec {
            shape: ShapeKind::ALL[k],
            center: (r, c),
            size,
            blur,
            seed,
        },
    )
}

/// Exhaustive F over thresholds k/255, k = 1..=255, counting pixels directly.
fn brute_max_f(pred: &SaliencyMap, gt: &SaliencyMap) -> f64 {
    (1..=255)
        .map(|k| {
            let tau = k as f64 / 255.0;
            let (p, r) = metrics::precision_recall(pred, gt, tau, 0.5).unwrap();
            f_measure(p, r, BETA2)
        })
        .fold(0.0, f64::max)
}

/// Points on a random curve; their pairwise distances are what the assignment sees.
fn decoded_strategy() -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(0.0f32..1.0, 3), 2..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantize_is_idempotent(cb in codebook_strategy(16, 2, 3), z in prop::collection::vec(-3.0f32..3.0, 4 * 4 * 3)) {
        let latent = Latent::new(4, 4, 3, z).unwrap();
        let (grid, q) = vq::quantize(&latent, &cb).unwrap();
        let (grid2, q2) = vq::quantize(&q, &cb).unwrap();
        prop_assert_eq!(grid, grid2);
        prop_assert_eq!(q, q2);
    }

    #[test]
    fn dequantize_then_quantize_recovers_indices(cb in codebook_strategy(16, 2, 3), idx in prop::collection::vec(0usize..16, 4)) {
        prop_assume!(cb.min_distance() > 0.0);
        let grid = IndexGrid::new(2, 2, idx).unwrap();
        let latent = vq::dequantize(&grid, &cb).unwrap();
        prop_assert_eq!(vq::reproject(&latent, &cb).unwrap(), grid);
    }

    #[test]
    fn perturbations_inside_half_distance_are_recovered(
        cb in codebook_strategy(16, 1, 4),
        i in 0usize..16,
        dir in prop::collection::vec(-1.0f64..1.0, 4),
        frac in 0.0f64..0.49,
    ) {
        let d_min = cb.min_distance();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(d_min > 1e-3 && norm > 1e-6);
        let v: Vec<f32> = cb.word(i).iter().zip(&dir).map(|(&w, d)| (w as f64 + d / norm * frac * d_min) as f32).collect();
        prop_assert_eq!(cb.nearest(&v), i);
    }

    #[test]
    fn packed_indices_round_trip(n_idx in 1usize..1000, raw in prop::collection::vec(any::<usize>(), 0..40)) {
        let idx: Vec<usize> = raw.iter().map(|v| v % n_idx).collect();
        let bytes = vq::pack_indices(&idx, n_idx).unwrap();
        prop_assert_eq!(bytes.len(), vq::payload_bytes(idx.len(), n_idx));
        prop_assert_eq!(vq::unpack_indices(&bytes, idx.len(), n_idx).unwrap(), idx);
    }

    #[test]
    fn payload_bits_are_exact(cells in 1usize..100, n_idx in 1usize..5000) {
        let bits = cells * vq::bits_per_index(n_idx) as usize;
        prop_assert_eq!(vq::payload_bytes(cells, n_idx), bits.div_ceil(8));
    }

    #[test]
    fn pgm_round_trip_is_within_half_a_level(m in map_strategy(5, 7)) {
        let back = pgm::decode(&pgm::encode(&m)).unwrap();
        for (a, b) in m.values().iter().zip(back.values()) {
            prop_assert!((a - b).abs() as f64 <= 1.0 / 510.0 + 1e-7);
        }
    }

    #[test]
    fn pgm_decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = pgm::decode(&bytes);
        let mut with_header = b"P5\n3 2\n255\n".to_vec();
        with_header.extend(bytes);
        let _ = pgm::decode(&with_header);
    }

    #[test]
    fn mae_is_a_symmetric_bounded_distance(a in map_strategy(4, 4), b in map_strategy(4, 4)) {
        let ab = mae(&a, &b).unwrap();
        prop_assert_eq!(ab, mae(&b, &a).unwrap());
        prop_assert_eq!(mae(&a, &a).unwrap(), 0.0);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn f_measure_is_monotone(p in 0.0f64..=1.0, r in 0.0f64..=1.0, dp in 0.0f64..=1.0, dr in 0.0f64..=1.0) {
        let p2 = (p + dp).min(1.0);
        let r2 = (r + dr).min(1.0);
        prop_assert!(f_measure(p2, r, BETA2) >= f_measure(p, r, BETA2) - 1e-12);
        prop_assert!(f_measure(p, r2, BETA2) >= f_measure(p, r, BETA2) - 1e-12);
    }

    #[test]
    fn max_f_matches_brute_force_and_dominates_adaptive(pred in map_strategy(6, 6), gt in map_strategy(6, 6)) {
        let best = score_map(&pred, &gt, ThresholdPolicy::MaxF).unwrap();
        prop_assert_eq!(best.f_measure, brute_max_f(&pred, &gt));
        let adaptive = score_map(&pred, &gt, ThresholdPolicy::Adaptive).unwrap();
        prop_assert!(best.f_measure >= adaptive.f_measure);
        let (p, r) = metrics::precision_recall(&pred, &gt, adaptive.threshold, 0.5).unwrap();
        prop_assert_eq!((p, r), (adaptive.precision, adaptive.recall));
    }

    #[test]
    fn generated_pairs_are_valid_and_tokenizable(spec in spec_strategy()) {
        let (map, caption) = generate_pair(&spec).unwrap();
        prop_assert!(map.values().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(map.max() > 0.5);
        let vocab = Vocabulary::template();
        let tokens = vocab.tokenize(caption.as_str(), 16).unwrap();
        prop_assert!(!tokens.ids.contains(&UNK));
        prop_assert_eq!(vocab.detokenize(&tokens.ids), caption.0);
    }

    #[test]
    fn greedy_choice_ignores_logit_shift(row in prop::collection::vec(-10.0f64..10.0, 1..20), shift in -100.0f64..100.0) {
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let i = argmax(&row);
        let j = argmax(&shifted);
        // a shift can only merge values by rounding; the pick stays a maximum
        prop_assert!(i == j || (row[i] - row[j]).abs() < 1e-12);
    }

    #[test]
    fn bpsk_round_trips_without_noise(bytes in prop::collection::vec(any::<u8>(), 1..16)) {
        let n_bits = bytes.len() * 8;
        prop_assert_eq!(bpsk_detect(&bpsk_modulate(&bytes, n_bits)), bytes);
    }

    #[test]
    fn pam_levels_decide_back(n in 2usize..300, i in any::<usize>()) {
        let i = i % n;
        prop_assert_eq!(pam_decide(pam_amplitude(i, n), n), (i, false));
    }

    #[test]
    fn normalized_signal_has_unit_power(x in prop::collection::vec(-5.0f64..5.0, 1..64)) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-3));
        let y = normalize_power(&x).unwrap();
        let p = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
        prop_assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn index_assignment_is_a_permutation_that_never_costs_more(rows in decoded_strategy(), snr in -5.0f64..20.0) {
        let n = rows.len();
        let a = assign::assign(&rows, &[snr]).unwrap();
        let mut sorted = a.order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());

        let dist = assign::mae_matrix(&rows);
        let trans = assign::pam_transitions(n, 10f64.powf(-snr / 10.0));
        let start = assign::principal_order(&rows);
        let before = assign::expected_cost(&dist, &trans, &start);
        let after = assign::expected_cost(&dist, &trans, &assign::binary_switching(&dist, &trans, start));
        prop_assert!(after <= before + 1e-12, "{after} > {before}");
    }

    #[test]
    fn permuted_codebooks_relabel_quantization(cb in codebook_strategy(6, 1, 2), z in prop::collection::vec(-3.0f32..3.0, 2)) {
        let order = [3usize, 0, 5, 1, 4, 2];
        let p = cb.permuted(&order).unwrap();
        let latent = Latent::new(1, 1, 2, z).unwrap();
        let (before, _) = vq::quantize(&latent, &cb).unwrap();
        let (after, zq) = vq::quantize(&latent, &p).unwrap();
        prop_assert_eq!(order[after.indices[0]], before.indices[0]);
        prop_assert_eq!(vq::dequantize(&before, &cb).unwrap(), zq);
        prop_assert!(cb.permuted(&[0, 0, 1, 2, 3, 4]).is_err());
        prop_assert!(cb.permuted(&[0, 1, 2]).is_err());
    }
}
