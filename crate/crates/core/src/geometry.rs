//! Pitch/yaw conditions, the rotations they induce, and angular metrics.
//!
//! A rotation is built as `R = R_yaw(φ) · R_pitch(θ)` with
//!
//! ```text
//! R_yaw   = [[ cos φ, 0, sin φ], [0, 1, 0], [-sin φ, 0, cos φ]]
//! R_pitch = [[1, 0, 0], [0, cos θ, -sin θ], [0, sin θ, cos θ]]
//! ```
//!
//! and a condition maps to the unit direction
//! `(cos θ · sin φ, sin θ, cos θ · cos φ)`.

use thiserror::Error;

use crate::tensor::{self, Graph, Real, Tensor, Var};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("angular distance of a zero-norm vector")]
    ZeroNorm,
}

/// Pitch and yaw of one attribute, in radians.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Condition {
    pub pitch: f32,
    pub yaw: f32,
}

impl Condition {
    pub const ZERO: Condition = Condition { pitch: 0.0, yaw: 0.0 };

    pub fn new(pitch: f32, yaw: f32) -> Self {
        Self { pitch, yaw }
    }

    pub fn offset(self, d: Condition) -> Condition {
        Condition::new(self.pitch + d.pitch, self.yaw + d.yaw)
    }

    pub fn to_tensor<T: Real>(self) -> Tensor<T> {
        Tensor::from_vec(vec![T::of(self.pitch as f64), T::of(self.yaw as f64)])
    }

    /// Reads a `[2]`-shaped (or any two-element) tensor.
    pub fn from_slice<T: Real>(xs: &[T]) -> Self {
        Condition::new(xs[0].f64() as f32, xs[1].f64() as f32)
    }
}

/// 3×3 rotation matrix, row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation3(pub [[f32; 3]; 3]);

impl Rotation3 {
    pub const IDENTITY: Rotation3 = Rotation3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn transpose(&self) -> Rotation3 {
        let m = &self.0;
        Rotation3(std::array::from_fn(|i| std::array::from_fn(|j| m[j][i])))
    }

    pub fn mul(&self, other: &Rotation3) -> Rotation3 {
        let (a, b) = (&self.0, &other.0);
        Rotation3(std::array::from_fn(|i| {
            std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum())
        }))
    }

    pub fn det(&self) -> f32 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Largest entry of `|RᵀR − I|`.
    pub fn orthonormality_error(&self) -> f32 {
        let p = self.transpose().mul(self);
        let mut worst = 0.0f32;
        for (i, row) in p.0.iter().enumerate() {
            for (j, &x) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((x - target).abs());
            }
        }
        worst
    }

    /// Left-multiplies a 3×16 embedding.
    pub fn apply(&self, z: &Embedding) -> Embedding {
        let m = &self.0;
        let mut out = [[0.0f32; 16]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (0..3).map(|k| m[i][k] * z.0[k][j]).sum();
            }
        }
        Embedding(out)
    }
}

/// A 3×16 attribute embedding; rotations act on the 3-row side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Embedding(pub [[f32; 16]; 3]);

impl Embedding {
    pub fn from_slice(xs: &[f32]) -> Self {
        Embedding(std::array::from_fn(|i| std::array::from_fn(|j| xs[i * 16 + j])))
    }

    pub fn flatten(&self) -> Vec<f32> {
        self.0.iter().flatten().copied().collect()
    }

    pub fn frobenius(&self) -> f32 {
        self.0.iter().flatten().map(|x| x * x).sum::<f32>().sqrt()
    }
}

pub fn rotation_from_condition(c: Condition) -> Rotation3 {
    let (sp, cp) = c.pitch.sin_cos();
    let (sy, cy) = c.yaw.sin_cos();
    Rotation3([[cy, sy * sp, sy * cp], [0.0, cp, -sp], [-sy, cy * sp, cy * cp]])
}

pub fn condition_to_vector(c: Condition) -> [f32; 3] {
    let (sp, cp) = c.pitch.sin_cos();
    let (sy, cy) = c.yaw.sin_cos();
    [cp * sy, sp, cp * cy]
}

/// `arccos(u·v / (‖u‖‖v‖))`, accumulated in `f64`.
///
/// The cosine is formed as `1 − ‖û − v̂‖²/2` from the unit vectors, which
/// is exactly 1 for parallel inputs, so identical directions give 0.
pub fn angular_distance(u: &[f32], v: &[f32]) -> Result<f32, GeometryError> {
    let norm = |x: &[f32]| x.iter().map(|&a| a as f64 * a as f64).sum::<f64>().sqrt();
    let (nu, nv) = (norm(u), norm(v));
    if nu <= 1e-8 || nv <= 1e-8 {
        return Err(GeometryError::ZeroNorm);
    }
    let d2: f64 = u.iter().zip(v).map(|(&a, &b)| (a as f64 / nu - b as f64 / nv).powi(2)).sum();
    Ok((1.0 - 0.5 * d2).clamp(-1.0, 1.0).acos() as f32)
}

pub fn condition_angular_error(a: Condition, b: Condition) -> f32 {
    angular_distance(&condition_to_vector(a), &condition_to_vector(b)).expect("unit vectors")
}

// Differentiable counterparts. A condition lives in the graph as a tensor
// whose last axis holds (pitch, yaw).

fn pitch_yaw<T: Real>(g: &mut Graph<T>, c: Var) -> tensor::Result<(Var, Var)> {
    let axis = g.shape(c).len() - 1;
    Ok((g.slice(c, axis, 0, 1)?, g.slice(c, axis, 1, 2)?))
}

/// `[3, 3]` rotation for a `[2]` condition node.
pub fn rotation_var<T: Real>(g: &mut Graph<T>, c: Var) -> tensor::Result<Var> {
    let (pitch, yaw) = pitch_yaw(g, c)?;
    let (sp, cp) = (g.sin(pitch)?, g.cos(pitch)?);
    let (sy, cy) = (g.sin(yaw)?, g.cos(yaw)?);
    let zero = g.scalar(0.0);
    let sysp = g.mul(sy, sp)?;
    let sycp = g.mul(sy, cp)?;
    let nsp = g.neg(sp)?;
    let nsy = g.neg(sy)?;
    let cysp = g.mul(cy, sp)?;
    let cycp = g.mul(cy, cp)?;
    let flat = g.concat(&[cy, sysp, sycp, zero, cp, nsp, nsy, cysp, cycp], 0)?;
    g.reshape(flat, &[3, 3])
}

/// Unit directions for condition rows: `[.., 2]` in, `[.., 3]` out.
pub fn condition_vector_var<T: Real>(g: &mut Graph<T>, c: Var) -> tensor::Result<Var> {
    let (pitch, yaw) = pitch_yaw(g, c)?;
    let (sp, cp) = (g.sin(pitch)?, g.cos(pitch)?);
    let (sy, cy) = (g.sin(yaw)?, g.cos(yaw)?);
    let x = g.mul(cp, sy)?;
    let z = g.mul(cp, cy)?;
    let axis = g.shape(c).len() - 1;
    g.concat(&[x, sp, z], axis)
}

/// Angle between `u` and `v` along the last axis, same cosine form as
/// [`angular_distance`].
pub fn angular_distance_var<T: Real>(g: &mut Graph<T>, u: Var, v: Var) -> tensor::Result<Var> {
    let un = g.normalize(u)?;
    let vn = g.normalize(v)?;
    let d = g.sub(un, vn)?;
    let d2 = g.mul(d, d)?;
    let d2 = g.sum_last(d2)?;
    let half = g.scale(d2, -0.5)?;
    let one = g.scalar(1.0);
    let cos = g.add(half, one)?;
    g.acos(cos)
}

pub fn condition_angular_error_var<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> tensor::Result<Var> {
    let u = condition_vector_var(g, a)?;
    let v = condition_vector_var(g, b)?;
    angular_distance_var(g, u, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f32::consts::FRAC_PI_2;

    fn close(a: &Rotation3, b: [[f32; 3]; 3], tol: f32) -> bool {
        a.0.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn printed_quarter_turns() {
        assert_eq!(rotation_from_condition(Condition::ZERO), Rotation3::IDENTITY);
        let yaw = rotation_from_condition(Condition::new(0.0, FRAC_PI_2));
        assert!(close(&yaw, [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]], 1e-6));
        let pitch = rotation_from_condition(Condition::new(FRAC_PI_2, 0.0));
        assert!(close(&pitch, [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]], 1e-6));
    }

    #[test]
    fn canonical_directions() {
        let v = condition_to_vector(Condition::ZERO);
        assert_eq!(v, [0.0, 0.0, 1.0]);
        let up = condition_to_vector(Condition::new(FRAC_PI_2, 0.0));
        assert!((up[1] - 1.0).abs() < 1e-6 && up[0].abs() < 1e-6 && up[2].abs() < 1e-6);
        let right = condition_to_vector(Condition::new(0.0, FRAC_PI_2));
        assert!((right[0] - 1.0).abs() < 1e-6 && right[2].abs() < 1e-6);
    }

    #[test]
    fn angular_distance_cases() {
        assert_eq!(angular_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(angular_distance(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 0.0);
        assert!((angular_distance(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap() - FRAC_PI_2).abs() < 1e-6);
        let anti = angular_distance(&[0.0, 0.0, 1.0], &[0.0, 0.0, -1.0]).unwrap();
        assert!((anti - std::f32::consts::PI).abs() < 1e-6);
        assert!(matches!(
            angular_distance(&[0.0; 3], &[1.0, 0.0, 0.0]),
            Err(GeometryError::ZeroNorm)
        ));
    }

    #[test]
    fn equatorial_arc() {
        let e = condition_angular_error(Condition::ZERO, Condition::new(0.0, 0.1));
        assert!((e - 0.1).abs() < 1e-5, "{e}");
        assert_eq!(condition_angular_error(Condition::new(0.2, -0.3), Condition::new(0.2, -0.3)), 0.0);
    }

    #[test]
    fn graph_rotation_matches_plain() {
        let c = Condition::new(0.3, -0.7);
        let mut g = Graph::<f64>::new();
        let cv = g.constant(c.to_tensor());
        let r = rotation_var(&mut g, cv).unwrap();
        let plain = rotation_from_condition(c);
        for (a, b) in g.value(r).data().iter().zip(plain.0.iter().flatten()) {
            assert!((*a as f32 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn graph_angle_is_zero_for_identical_rows() {
        let mut g = Graph::<f32>::new();
        let c = g.constant(Tensor::new(&[2, 2], vec![0.1, -0.2, 0.3, 0.25]).unwrap());
        let e = condition_angular_error_var(&mut g, c, c).unwrap();
        assert_eq!(g.shape(e), &[2]);
        assert_eq!(g.value(e).data(), &[0.0, 0.0]);
    }

    #[test]
    fn graph_angle_matches_plain() {
        let (a, b) = (Condition::new(0.1, 0.3), Condition::new(-0.2, 0.05));
        let mut g = Graph::<f64>::new();
        let (av, bv) = (g.constant(a.to_tensor()), g.constant(b.to_tensor()));
        let e = condition_angular_error_var(&mut g, av, bv).unwrap();
        assert!((g.value(e).item() - condition_angular_error(a, b) as f64).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn rotations_are_proper(p in -3.0f32..3.0, y in -3.0f32..3.0) {
            let r = rotation_from_condition(Condition::new(p, y));
            prop_assert!(r.orthonormality_error() < 1e-6);
            prop_assert!((r.det() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn condition_error_matches_f64_oracle(
            a in -1.5f32..1.5, b in -1.5f32..1.5, c in -1.5f32..1.5, d in -1.5f32..1.5
        ) {
            let v = |p: f64, y: f64| [p.cos() * y.sin(), p.sin(), p.cos() * y.cos()];
            let (u, w) = (v(a as f64, b as f64), v(c as f64, d as f64));
            let dot: f64 = u.iter().zip(&w).map(|(x, y)| x * y).sum();
            let oracle = dot.clamp(-1.0, 1.0).acos();
            let got = condition_angular_error(Condition::new(a, b), Condition::new(c, d)) as f64;
            prop_assert!((got - oracle).abs() < 1e-5, "{got} vs {oracle}");
        }
    }
}
