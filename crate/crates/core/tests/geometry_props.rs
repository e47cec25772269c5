use gcdm::geometry::{centralize, compute_frames, random_rotation, row, RigidTransform, FRAME_EPS};
use gcdm::tape::Mat;
use proptest::prelude::*;

fn coords(max_atoms: usize) -> impl Strategy<Value = Mat> {
    (1..=max_atoms).prop_flat_map(|n| {
        prop::collection::vec(-20.0f64..20.0, n * 3).prop_map(move |v| Mat::from_shape_vec((n, 3), v).unwrap())
    })
}

fn point() -> impl Strategy<Value = [f64; 3]> {
    [-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0]
}

fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
    a.iter().zip(&b).all(|(x, y)| (x - y).abs() < tol)
}

fn mirror(v: [f64; 3]) -> [f64; 3] {
    [v[0], v[1], -v[2]]
}

proptest! {
    #[test]
    fn centering_is_idempotent(x in coords(30)) {
        let (once, _) = centralize(&x);
        let (twice, cog) = centralize(&once);
        prop_assert!(cog.iter().all(|c| c.abs() < 1e-12));
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn centering_removes_translation(x in coords(20), seed in any::<u64>()) {
        let shift = RigidTransform::translation_only(random_rotation(seed).translation());
        let (a, _) = centralize(&x);
        let (b, _) = centralize(&shift.apply(&x));
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn frames_rotate_with_their_inputs(xi in point(), xj in point(), seed in any::<u64>()) {
        prop_assume!(gcdm::geometry::norm(gcdm::geometry::cross(xi, xj)) > 1e-3);
        let q = random_rotation(seed).rotation_only();
        let f = compute_frames(xi, xj, FRAME_EPS);
        let g = compute_frames(q.rotate(xi), q.rotate(xj), FRAME_EPS);
        for (axis, rotated) in f.axes().iter().zip(g.axes()) {
            prop_assert!(close(q.rotate(*axis), rotated, 1e-10));
        }
    }

    #[test]
    fn reflection_flips_only_the_cross_axis(xi in point(), xj in point()) {
        prop_assume!(gcdm::geometry::norm(gcdm::geometry::cross(xi, xj)) > 1e-3);
        let f = compute_frames(xi, xj, FRAME_EPS);
        let g = compute_frames(mirror(xi), mirror(xj), FRAME_EPS);
        prop_assert!(close(g.a, mirror(f.a), 1e-12));
        let minus_b = mirror(f.b).map(|v| -v);
        prop_assert!(close(g.b, minus_b, 1e-12));
        prop_assert!(close(g.c, mirror(f.c), 1e-12));
    }

    #[test]
    fn rotations_preserve_pairwise_distances(x in coords(12), seed in any::<u64>()) {
        let y = random_rotation(seed).apply(&x);
        for i in 0..x.nrows() {
            for j in 0..i {
                let d = |m: &Mat| gcdm::geometry::norm(gcdm::geometry::sub(row(m, i), row(m, j)));
                prop_assert!((d(&x) - d(&y)).abs() < 1e-9);
            }
        }
    }
}
