//! Rigid motions for tests and audits. A transform maps `r -> Q r + t`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensorcore::Tensor;

pub type Mat3 = [[f64; 3]; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub q: Mat3,
    pub t: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            q: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            t: [0.0; 3],
        }
    }

    /// Random orthogonal `Q` (reflections with probability 1/2, or forced
    /// by `reflect`) and translation with entries in `[-scale, scale]`.
    pub fn random<R: Rng>(rng: &mut R, scale: f64, reflect: Option<bool>) -> Self {
        let mut q = random_rotation(rng);
        let flip = reflect.unwrap_or_else(|| rng.random_bool(0.5));
        if flip {
            for row in &mut q {
                row[0] = -row[0];
            }
        }
        let t = [0; 3].map(|_| rng.random_range(-scale..=scale));
        RigidTransform { q, t }
    }

    pub fn apply(&self, r: [f64; 3]) -> [f64; 3] {
        let mut o = self.t;
        for (a, oa) in o.iter_mut().enumerate() {
            *oa += self.q[a][0] * r[0] + self.q[a][1] * r[1] + self.q[a][2] * r[2];
        }
        o
    }

    /// Inverse map `r -> Q^T (r - t)`.
    pub fn apply_inverse(&self, r: [f64; 3]) -> [f64; 3] {
        let d = [r[0] - self.t[0], r[1] - self.t[1], r[2] - self.t[2]];
        let mut o = [0.0; 3];
        for (a, oa) in o.iter_mut().enumerate() {
            *oa = self.q[0][a] * d[0] + self.q[1][a] * d[1] + self.q[2][a] * d[2];
        }
        o
    }

    pub fn det(&self) -> f64 {
        det3(&self.q)
    }
}

pub fn det3(q: &Mat3) -> f64 {
    q[0][0] * (q[1][1] * q[2][2] - q[1][2] * q[2][1])
        - q[0][1] * (q[1][0] * q[2][2] - q[1][2] * q[2][0])
        + q[0][2] * (q[1][0] * q[2][1] - q[1][1] * q[2][0])
}

/// Uniform proper rotation from a normalised Gaussian quaternion.
pub fn random_rotation<R: Rng>(rng: &mut R) -> Mat3 {
    let mut w: [f64; 4] = [0.0; 4];
    let mut n = 0.0;
    while n < 1e-6 {
        w = [0; 4].map(|_| StandardNormal.sample(rng));
        n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    let [a, b, c, d] = w.map(|x| x / n);
    [
        [
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
        ],
        [
            2.0 * (b * c + a * d),
            a * a - b * b + c * c - d * d,
            2.0 * (c * d - a * b),
        ],
        [
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a - b * b - c * c + d * d,
        ],
    ]
}

/// Rotates an `[N, 3]` coordinate tensor or an `[N, 3, C]` vector-feature
/// tensor along its spatial axis: `x[n, :, c] -> Q x[n, :, c]`.
pub fn rotate_spatial(x: &Tensor, q: &Mat3) -> Tensor {
    let shape = x.shape().to_vec();
    assert!(
        shape.len() >= 2 && shape[1] == 3,
        "spatial axis must be axis 1 of length 3"
    );
    let inner: usize = shape[2..].iter().product();
    let mut out = x.clone();
    let src = x.data();
    let dst = out.data_mut();
    for n in 0..shape[0] {
        let base = n * 3 * inner;
        for c in 0..inner {
            for a in 0..3 {
                dst[base + a * inner + c] =
                    (0..3).map(|b| q[a][b] * src[base + b * inner + c]).sum();
            }
        }
    }
    out
}

/// Adds `t` to every row of an `[N, 3]` tensor.
pub fn translate_rows(x: &Tensor, t: [f64; 3]) -> Tensor {
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(3) {
        for a in 0..3 {
            row[a] += t[a];
        }
    }
    out
}

pub fn coords_tensor(coords: &[[f64; 3]]) -> Tensor {
    Tensor::new(
        vec![coords.len(), 3],
        coords.iter().flatten().copied().collect(),
    )
    .expect("coordinate list is non-empty")
}
