use gcdm::gcpnet::{denoiser_forward, scalar_message_attention, GcpNet, GcpNetConfig};
use gcdm::geometry::{centralize, random_rotation};
use gcdm::moldata::FEATURE_DIM;
use gcdm::tape::Mat;
use proptest::prelude::*;

fn config(frames: bool, sma: bool) -> GcpNetConfig {
    GcpNetConfig {
        num_layers: 2,
        node_scalar_dim: 8,
        node_vector_dim: 3,
        edge_scalar_dim: 6,
        edge_vector_dim: 2,
        use_frames: frames,
        use_sma: sma,
        zero_init_heads: false,
        ..Default::default()
    }
}

fn inputs() -> impl Strategy<Value = (Mat, Mat)> {
    (2usize..=8).prop_flat_map(|n| {
        (
            prop::collection::vec(-2.0f64..2.0, n * 3),
            prop::collection::vec(-1.0f64..1.0, n * FEATURE_DIM),
        )
            .prop_map(move |(x, h)| {
                let x = Mat::from_shape_vec((n, 3), x).unwrap();
                (centralize(&x).0, Mat::from_shape_vec((n, FEATURE_DIM), h).unwrap())
            })
    })
}

fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn denoiser_is_rotation_equivariant(
        (x, h) in inputs(),
        seed in any::<u64>(),
        t in 0usize..=1000,
        frames in any::<bool>(),
        sma in any::<bool>(),
    ) {
        let net = GcpNet::new(config(frames, sma), seed % 97).unwrap();
        let q = random_rotation(seed).rotation_only();
        let (ex, eh) = denoiser_forward(&net, &x, &h, t, 1000).unwrap();
        let (rx, rh) = denoiser_forward(&net, &q.apply(&x), &h, t, 1000).unwrap();
        prop_assert!(max_abs(&(&q.apply(&ex) - &rx)) <= 1e-5 * (1.0 + max_abs(&ex)));
        prop_assert!(max_abs(&(&eh - &rh)) <= 1e-5 * (1.0 + max_abs(&eh)));
        let sums = ex.sum_axis(ndarray::Axis(0));
        prop_assert!(sums.iter().all(|s| s.abs() < 1e-9 * x.nrows() as f64));
    }

    #[test]
    fn denoiser_is_permutation_equivariant((x, h) in inputs(), seed in any::<u64>(), t in 0usize..=1000) {
        let n = x.nrows();
        let mut order: Vec<usize> = (0..n).collect();
        order.rotate_left((seed % n as u64) as usize);
        order.swap(0, n - 1);
        let net = GcpNet::new(config(true, true), seed % 89).unwrap();
        let (ex, eh) = denoiser_forward(&net, &x, &h, t, 1000).unwrap();
        let (px, ph) = denoiser_forward(&net, &x.select(ndarray::Axis(0), &order), &h.select(ndarray::Axis(0), &order), t, 1000).unwrap();
        prop_assert!(max_abs(&(&ex.select(ndarray::Axis(0), &order) - &px)) < 1e-9 * (1.0 + max_abs(&ex)));
        prop_assert!(max_abs(&(&eh.select(ndarray::Axis(0), &order) - &ph)) < 1e-9 * (1.0 + max_abs(&eh)));
    }

    #[test]
    fn message_attention_only_shrinks(
        m in prop::collection::vec(-5.0f64..5.0, 12),
        w in prop::collection::vec(-2.0f64..2.0, 4),
        b in -3.0f64..3.0,
    ) {
        let m = Mat::from_shape_vec((3, 4), m).unwrap();
        let w = Mat::from_shape_vec((4, 1), w).unwrap();
        let out = scalar_message_attention(&m, &w, &Mat::from_elem((1, 1), b));
        for (o, i) in out.iter().zip(&m) {
            prop_assert!(o.abs() <= i.abs());
            prop_assert!(o * i >= 0.0);
        }
    }
}
