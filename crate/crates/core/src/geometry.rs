//! Rigid motions, zero center-of-gravity handling and local edge frames.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Default norm below which a frame axis is treated as degenerate.
pub const FRAME_EPS: f64 = 1e-8;

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// `a / ‖a‖`, or the zero vector when `‖a‖ < eps`.
pub fn normalize_or_zero(a: Vec3, eps: f64) -> Vec3 {
    let n = norm(a);
    if n < eps {
        [0.0; 3]
    } else {
        [a[0] / n, a[1] / n, a[2] / n]
    }
}

pub fn row(coords: &Array2<f64>, i: usize) -> Vec3 {
    [coords[[i, 0]], coords[[i, 1]], coords[[i, 2]]]
}

/// Subtracts the column means. Returns the centered coordinates and the
/// center of gravity that was removed.
pub fn centralize(coords: &Array2<f64>) -> (Array2<f64>, Vec3) {
    let n = coords.nrows().max(1) as f64;
    let sums = coords.sum_axis(Axis(0));
    let cog = [sums[0] / n, sums[1] / n, sums[2] / n];
    let mut centered = coords.clone();
    for mut r in centered.rows_mut() {
        for k in 0..3 {
            r[k] -= cog[k];
        }
    }
    (centered, cog)
}

/// Largest per-axis |Σ_i x_i| of a coordinate block.
pub fn cog_offset(coords: &Array2<f64>) -> f64 {
    coords
        .sum_axis(Axis(0))
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Projects each graph of a stacked coordinate block onto the zero-CoG
/// subspace. `sizes` lists the atom count of each consecutive graph.
pub fn centralize_segments(coords: &mut Array2<f64>, sizes: &[usize]) {
    let mut start = 0;
    for &n in sizes {
        let mut block = coords.slice_mut(ndarray::s![start..start + n, ..]);
        let means = block.mean_axis(Axis(0)).expect("non-empty graph");
        for mut r in block.rows_mut() {
            r -= &means;
        }
        start += n;
    }
}

/// Per-edge orthonormal-by-construction direction triple `(a, b, c)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTriple {
    pub a: Vec3,
    pub b: Vec3,
    pub c: Vec3,
}

impl FrameTriple {
    pub fn axes(&self) -> [Vec3; 3] {
        [self.a, self.b, self.c]
    }

    /// Projections `(a·v, b·v, c·v)`.
    pub fn project(&self, v: Vec3) -> Vec3 {
        [dot(self.a, v), dot(self.b, v), dot(self.c, v)]
    }
}

/// Frame for the edge from `x_j` to `x_i` on centralized coordinates:
/// `a = (x_i − x_j)/‖·‖`, `b = (x_i × x_j)/‖·‖`, `c = a × b`.
///
/// A denominator below `eps` yields a zero axis (and `c` is recomputed from
/// whatever remains), so collinear or coincident points never produce NaN.
pub fn compute_frames(x_i: Vec3, x_j: Vec3, eps: f64) -> FrameTriple {
    let a = normalize_or_zero(sub(x_i, x_j), eps);
    let b = normalize_or_zero(cross(x_i, x_j), eps);
    let c = cross(a, b);
    FrameTriple { a, b, c }
}

/// A proper rigid motion `x ↦ Q·x + g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: [[f64; 3]; 3],
    translation: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0; 3],
    };

    /// Checks QᵀQ = I and det Q = +1 to 1e-10.
    pub fn new(rotation: [[f64; 3]; 3], translation: Vec3) -> Result<Self> {
        let t = RigidTransform {
            rotation,
            translation,
        };
        let det = t.determinant();
        if (det - 1.0).abs() > 1e-10 || t.orthogonality_error() > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "rotation is not proper orthogonal (det = {det}, |QᵀQ − I| = {:e})",
                t.orthogonality_error()
            )));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("translation is not finite".into()));
        }
        Ok(t)
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn rotation_only(&self) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation,
            translation: [0.0; 3],
        }
    }

    pub fn translation_only(translation: Vec3) -> RigidTransform {
        RigidTransform {
            translation,
            ..RigidTransform::IDENTITY
        }
    }

    pub fn determinant(&self) -> f64 {
        let q = &self.rotation;
        q[0][0] * (q[1][1] * q[2][2] - q[1][2] * q[2][1]) - q[0][1] * (q[1][0] * q[2][2] - q[1][2] * q[2][0])
            + q[0][2] * (q[1][0] * q[2][1] - q[1][1] * q[2][0])
    }

    /// Max-abs entry of QᵀQ − I.
    pub fn orthogonality_error(&self) -> f64 {
        let q = &self.rotation;
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| q[k][i] * q[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let q = &self.rotation;
        [dot(q[0], v), dot(q[1], v), dot(q[2], v)]
    }

    pub fn apply_point(&self, v: Vec3) -> Vec3 {
        let r = self.rotate(v);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    /// Row-wise `Q·x + g`.
    pub fn apply(&self, coords: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(coords.raw_dim());
        for (i, r) in coords.rows().into_iter().enumerate() {
            let p = self.apply_point([r[0], r[1], r[2]]);
            out.row_mut(i).assign(&ArrayView1::from(&p));
        }
        out
    }

    /// Row-wise `Q·x` (no translation), for direction-like quantities.
    pub fn rotate_rows(&self, vectors: &Array2<f64>) -> Array2<f64> {
        self.rotation_only().apply(vectors)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut rotation = [[0.0; 3]; 3];
        for (i, out_row) in rotation.iter_mut().enumerate() {
            for (j, slot) in out_row.iter_mut().enumerate() {
                *slot = (0..3).map(|k| self.rotation[i][k] * other.rotation[k][j]).sum();
            }
        }
        let moved = self.rotate(other.translation);
        RigidTransform {
            rotation,
            translation: [
                moved[0] + self.translation[0],
                moved[1] + self.translation[1],
                moved[2] + self.translation[2],
            ],
        }
    }
}

/// Uniform random rotation (normalized Gaussian quaternion) with a
/// translation drawn uniformly from `[-translation_box, translation_box]³`.
pub fn random_rotation_with(rng: &mut impl Rng, translation_box: f64) -> RigidTransform {
    let (w, x, y, z) = loop {
        let q: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
        if n > 1e-12 {
            break (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        }
    };
    let rotation = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ];
    let translation = if translation_box > 0.0 {
        [
            rng.random_range(-translation_box..=translation_box),
            rng.random_range(-translation_box..=translation_box),
            rng.random_range(-translation_box..=translation_box),
        ]
    } else {
        [0.0; 3]
    };
    RigidTransform {
        rotation,
        translation,
    }
}

/// Seeded convenience wrapper over [`random_rotation_with`] (translation box 10 Å).
pub fn random_rotation(seed: u64) -> RigidTransform {
    random_rotation_with(&mut ChaCha8Rng::seed_from_u64(seed), 10.0)
}

/// Mirror image through the xy-plane (z ↦ −z), an improper transform.
pub fn reflect_z(coords: &Array2<f64>) -> Array2<f64> {
    let mut out = coords.clone();
    out.column_mut(2).mapv_inplace(|v| -v);
    out
}

pub fn to_array(v: Vec3) -> Array1<f64> {
    Array1::from(v.to_vec())
}
