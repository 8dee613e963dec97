//! Plain 2-vectors and 2×2 tensors. Fixed-size arrays keep the per-element
//! kernels allocation free.

pub type Vec2 = [f64; 2];
pub type Tensor2 = [[f64; 2]; 2];

pub const ZERO2: Vec2 = [0.0, 0.0];
pub const ZERO_T: Tensor2 = [[0.0, 0.0], [0.0, 0.0]];
pub const IDENTITY: Tensor2 = [[1.0, 0.0], [0.0, 1.0]];

#[inline]
pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn norm(a: Vec2) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn scale(s: f64, a: Vec2) -> Vec2 {
    [s * a[0], s * a[1]]
}

#[inline]
pub fn mat_vec(m: &Tensor2, v: Vec2) -> Vec2 {
    [
        m[0][0] * v[0] + m[0][1] * v[1],
        m[1][0] * v[0] + m[1][1] * v[1],
    ]
}

#[inline]
pub fn mat_add(a: &Tensor2, b: &Tensor2) -> Tensor2 {
    [
        [a[0][0] + b[0][0], a[0][1] + b[0][1]],
        [a[1][0] + b[1][0], a[1][1] + b[1][1]],
    ]
}

#[inline]
pub fn mat_scale(s: f64, a: &Tensor2) -> Tensor2 {
    [[s * a[0][0], s * a[0][1]], [s * a[1][0], s * a[1][1]]]
}

/// Rotation by +90°: maps ∇a to curl(a e_z) = (∂y a, −∂x a).
#[inline]
pub fn rot(g: Vec2) -> Vec2 {
    [g[1], -g[0]]
}

/// Frobenius norm.
pub fn fro(a: &Tensor2) -> f64 {
    (a[0][0].powi(2) + a[0][1].powi(2) + a[1][0].powi(2) + a[1][1].powi(2)).sqrt()
}

pub fn is_finite(a: Vec2) -> bool {
    a[0].is_finite() && a[1].is_finite()
}
