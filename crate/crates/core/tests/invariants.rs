use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use rgp::analysis::mi_attack;
use rgp::carriers::{power_decompose, project_out, CarrierConfig};
use rgp::data::{parse_csv, Dataset};
use rgp::experiment::{decode_model, encode_model};
use rgp::matrix::{gram_schmidt_columns, norm2, orthonormality_error, stable_rank, GS_TOL};
use rgp::net::{Network, NetworkSpec};
use rgp::privacy::{calibrate_sigma, clip_per_sample, epsilon_for};
use rgp::Matrix;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gram_schmidt_is_orthonormal(m in matrix(24, 8), seed in any::<u64>()) {
        prop_assume!(m.cols() <= m.rows());
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let q = gram_schmidt_columns(&m, GS_TOL, &mut rng).unwrap();
        prop_assert_eq!(q.shape(), m.shape());
        prop_assert!(orthonormality_error(&q) < 1e-9);
    }

    #[test]
    fn stable_rank_between_one_and_rank(m in matrix(12, 12)) {
        prop_assume!(m.frobenius_norm() > 1e-6);
        let s = stable_rank(&m).unwrap();
        prop_assert!(s >= 1.0 - 1e-6);
        prop_assert!(s <= m.rows().min(m.cols()) as f64 + 1e-6);
    }

    #[test]
    fn carriers_are_orthonormal_and_projection_shrinks(m in matrix(16, 16), r in 1usize..6, seed in any::<u64>()) {
        let rank = r.min(m.rows()).min(m.cols());
        let c = power_decompose(&m, &CarrierConfig::new(rank, 2, seed)).unwrap();
        prop_assert_eq!(c.left.shape(), (m.rows(), rank));
        prop_assert_eq!(c.right.shape(), (rank, m.cols()));
        prop_assert!(orthonormality_error(&c.left) < 1e-8);
        prop_assert!(orthonormality_error(&c.right.transpose()) < 1e-8);
        prop_assert!(project_out(&m, &c).unwrap().frobenius_norm() <= m.frobenius_norm() * (1.0 + 1e-12));
    }

    #[test]
    fn clipped_norms_bounded(vs in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 5), 1..10), c in 0.01f64..10.0) {
        let (clipped, norms) = clip_per_sample(&vs, c).unwrap();
        for ((v, orig), n) in clipped.iter().zip(&vs).zip(&norms) {
            prop_assert!(norm2(v) <= c * (1.0 + 1e-12));
            prop_assert!((norm2(orig) - n).abs() <= 1e-9 * n.max(1.0));
            if *n <= c {
                prop_assert_eq!(v, orig);
            }
        }
    }

    #[test]
    fn epsilon_monotone_in_steps(q in 0.001f64..0.2, sigma in 0.6f64..4.0, t in 1u64..500) {
        let a = epsilon_for(q, sigma, t, 1e-5).unwrap();
        let b = epsilon_for(q, sigma, t + 50, 1e-5).unwrap();
        prop_assert!(b >= a);
    }

    #[test]
    fn mi_rate_in_unit_interval(a in prop::collection::vec(0.0f64..5.0, 2..40), b in prop::collection::vec(0.0f64..5.0, 2..40)) {
        let out = mi_attack(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&out.success_rate));
        prop_assert!((0.0..=1.0).contains(&out.selection_rate));
    }

    #[test]
    fn csv_round_trip(rows in prop::collection::vec((0usize..5, prop::collection::vec(-1e3f64..1e3, 3)), 1..20)) {
        let labels: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let x = Matrix::from_rows(&rows.iter().map(|r| r.1.clone()).collect::<Vec<_>>()).unwrap();
        let data = Dataset::new(x, labels).unwrap();
        let back = parse_csv(&data.to_csv()).unwrap();
        prop_assert_eq!(back.labels, data.labels);
        prop_assert_eq!(back.x.as_slice(), data.x.as_slice());
    }

    #[test]
    fn model_round_trip(input in 1usize..8, hidden in 1usize..8, classes in 2usize..5, seed in any::<u64>()) {
        let spec = NetworkSpec { input_dim: input, image_shape: None, conv: vec![], hidden: vec![hidden], classes, zero_head: false };
        let net = Network::init(&spec, seed).unwrap();
        let bytes = encode_model(&net);
        prop_assert_eq!(bytes.len(), 12 + 16 + 8 * (hidden * input + hidden + classes * hidden + classes));
        let layers = decode_model(&bytes).unwrap();
        prop_assert_eq!(layers.len(), 2);
        for ((w, b), core) in layers.iter().zip(net.weight_cores()) {
            let eff = core.effective_weight();
            prop_assert_eq!(w.as_slice(), eff.as_slice());
            prop_assert_eq!(b, &core.bias);
        }
    }
}

#[test]
fn calibration_hits_target() {
    let sigma = calibrate_sigma(0.01, 1000, 2.0, 1e-5).unwrap();
    let eps = epsilon_for(0.01, sigma, 1000, 1e-5).unwrap();
    assert!(eps <= 2.0 && eps > 1.9, "{eps}");
}
