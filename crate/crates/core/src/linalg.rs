//! Small dense linear algebra: 2-vectors and 2x2 matrices with closed-form
//! eigenvalue and singular-value routines. Everything here is exact at desk
//! scale; no iterative decompositions are needed.

use crate::scalar::{real, Real};
use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};

/// A 2-vector. `x` is the d-axis component, `y` the q-axis component when the
/// vector carries dq-frame quantities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vec2<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Vec2<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero())
    }

    pub fn dot(self, other: Self) -> T {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 2-D cross product.
    pub fn cross(self, other: Self) -> T {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> T {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> T {
        self.dot(self)
    }

    pub fn scale(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Outer product `self * other^T`.
    pub fn outer(self, other: Self) -> Mat2<T> {
        Mat2::new(
            self.x * other.x,
            self.x * other.y,
            self.y * other.x,
            self.y * other.y,
        )
    }
}

impl<T: Real> Add for Vec2<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl<T: Real> Sub for Vec2<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl<T: Real> Neg for Vec2<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y)
    }
}

/// A dense 2x2 matrix, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mat2<T> {
    pub m: [[T; 2]; 2],
}

impl<T: Real> Mat2<T> {
    pub fn new(a11: T, a12: T, a21: T, a22: T) -> Self {
        Self {
            m: [[a11, a12], [a21, a22]],
        }
    }

    pub fn identity() -> Self {
        Self::new(T::one(), T::zero(), T::zero(), T::one())
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero(), T::zero())
    }

    pub fn diag(d1: T, d2: T) -> Self {
        Self::new(d1, T::zero(), T::zero(), d2)
    }

    /// Counter-clockwise rotation by `angle`.
    pub fn rotation(angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c, -s, s, c)
    }

    pub fn transpose(self) -> Self {
        Self::new(self.m[0][0], self.m[1][0], self.m[0][1], self.m[1][1])
    }

    pub fn trace(self) -> T {
        self.m[0][0] + self.m[1][1]
    }

    pub fn det(self) -> T {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn scale(self, s: T) -> Self {
        Self::new(
            self.m[0][0] * s,
            self.m[0][1] * s,
            self.m[1][0] * s,
            self.m[1][1] * s,
        )
    }

    pub fn inverse(self) -> Option<Self> {
        let d = self.det();
        if d == T::zero() || !d.is_finite() {
            return None;
        }
        Some(Self::new(self.m[1][1], -self.m[0][1], -self.m[1][0], self.m[0][0]).scale(d.recip()))
    }

    pub fn frobenius_norm(self) -> T {
        let mut s = T::zero();
        for r in &self.m {
            for &v in r {
                s += v * v;
            }
        }
        s.sqrt()
    }

    pub fn max_abs(self) -> T {
        let mut s = T::zero();
        for r in &self.m {
            for &v in r {
                s = s.max(v.abs());
            }
        }
        s
    }

    pub fn is_finite(self) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite())
    }

    /// Gram matrix `M^T M` (symmetric PSD).
    pub fn gram(self) -> Self {
        self.transpose() * self
    }

    /// Eigenvalues of a symmetric 2x2 matrix, returned as (min, max).
    /// The off-diagonal entries are averaged, so slight asymmetry from
    /// rounding is tolerated.
    pub fn sym_eigenvalues(self) -> (T, T) {
        let half = real::<T>(0.5);
        let b = (self.m[0][1] + self.m[1][0]) * half;
        let mean = self.trace() * half;
        let d = (self.m[0][0] - self.m[1][1]) * half;
        let r = d.hypot(b);
        (mean - r, mean + r)
    }

    /// Largest singular value, via the closed-form eigenvalues of `M^T M`.
    pub fn spectral_norm(self) -> T {
        let (_, lmax) = self.gram().sym_eigenvalues();
        lmax.max(T::zero()).sqrt()
    }

    /// Closed-form 2x2 SVD, `M = U * diag(s) * V^T` with `s[0] >= |s[1]|`.
    /// `s[1]` may be negative (it carries the sign of `det M`); the singular
    /// values proper are the absolute values.
    pub fn svd(self) -> Svd2<T> {
        let half = real::<T>(0.5);
        let [[a, b], [c, d]] = self.m;
        let e = (a + d) * half;
        let f = (a - d) * half;
        let g = (c + b) * half;
        let h = (c - b) * half;
        let q = e.hypot(h);
        let r = f.hypot(g);
        let s1 = q + r;
        let s2 = q - r;
        let a1 = g.atan2(f);
        let a2 = h.atan2(e);
        let theta = (a2 - a1) * half;
        let phi = (a2 + a1) * half;
        Svd2 {
            u: Self::rotation(phi),
            s: [s1, s2],
            v: Self::rotation(-theta),
        }
    }

    /// Project onto the spectral-norm ball of the given radius: singular
    /// values are clipped at `radius`, the factors are kept.
    pub fn clip_spectral_norm(self, radius: T) -> Self {
        if self.spectral_norm() <= radius {
            return self;
        }
        let Svd2 { u, s, v } = self.svd();
        let s1 = s[0].min(radius).max(-radius);
        let s2 = s[1].min(radius).max(-radius);
        u * Self::diag(s1, s2) * v.transpose()
    }
}

impl<T: Real> Add for Mat2<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(
            self.m[0][0] + rhs.m[0][0],
            self.m[0][1] + rhs.m[0][1],
            self.m[1][0] + rhs.m[1][0],
            self.m[1][1] + rhs.m[1][1],
        )
    }
}

impl<T: Real> Sub for Mat2<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(
            self.m[0][0] - rhs.m[0][0],
            self.m[0][1] - rhs.m[0][1],
            self.m[1][0] - rhs.m[1][0],
            self.m[1][1] - rhs.m[1][1],
        )
    }
}

impl<T: Real> Neg for Mat2<T> {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-T::one())
    }
}

impl<T: Real> Mul for Mat2<T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut out = [[T::zero(); 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.m[i][0] * rhs.m[0][j] + self.m[i][1] * rhs.m[1][j];
            }
        }
        Self { m: out }
    }
}

impl<T: Real> Mul<Vec2<T>> for Mat2<T> {
    type Output = Vec2<T>;
    fn mul(self, rhs: Vec2<T>) -> Vec2<T> {
        Vec2::new(
            self.m[0][0] * rhs.x + self.m[0][1] * rhs.y,
            self.m[1][0] * rhs.x + self.m[1][1] * rhs.y,
        )
    }
}

/// Result of [`Mat2::svd`].
#[derive(Clone, Copy, Debug)]
pub struct Svd2<T> {
    pub u: Mat2<T>,
    pub s: [T; 2],
    pub v: Mat2<T>,
}

/// Strict positive-definiteness of a symmetric 4x4 matrix via Cholesky.
pub fn posdef4<T: Real>(m: &[[T; 4]; 4]) -> bool {
    let mut l = [[T::zero(); 4]; 4];
    for i in 0..4 {
        for j in 0..=i {
            let mut s = m[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= T::zero() {
                    return false;
                }
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    true
}
