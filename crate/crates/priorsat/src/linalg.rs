//! Tiny fixed-size helpers used throughout; state vectors are `[f64; 2]`
//! and cotangent vectors `[f64; 4]`, matrices are row-major `[[f64; 2]; 2]`.

pub type Vec2 = [f64; 2];
pub type Vec4 = [f64; 4];
pub type Mat2 = [[f64; 2]; 2];

/// det(a, b) with a the first column: a1*b2 - a2*b1.
#[inline]
pub fn det2(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
pub fn dot2(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn norm2(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

#[inline]
pub fn add2(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn sub2(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn scale2(a: Vec2, c: f64) -> Vec2 {
    [c * a[0], c * a[1]]
}

/// Matrix-vector product A v.
#[inline]
pub fn matvec(a: Mat2, v: Vec2) -> Vec2 {
    [
        a[0][0] * v[0] + a[0][1] * v[1],
        a[1][0] * v[0] + a[1][1] * v[1],
    ]
}

/// Transpose-matrix-vector product A^T v.
#[inline]
pub fn mattvec(a: Mat2, v: Vec2) -> Vec2 {
    [
        a[0][0] * v[0] + a[1][0] * v[1],
        a[0][1] * v[0] + a[1][1] * v[1],
    ]
}

#[inline]
pub fn matmul(a: Mat2, b: Mat2) -> Mat2 {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

/// Solve the 2x2 system A x = b; returns None when A is singular to working
/// precision.
pub fn solve2(a: Mat2, b: Vec2) -> Option<Vec2> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let scale = a[0][0]
        .abs()
        .max(a[0][1].abs())
        .max(a[1][0].abs())
        .max(a[1][1].abs());
    if det.abs() <= 1e-14 * (1.0 + scale * scale) {
        return None;
    }
    Some([
        (b[0] * a[1][1] - b[1] * a[0][1]) / det,
        (b[1] * a[0][0] - b[0] * a[1][0]) / det,
    ])
}

#[inline]
pub fn sub4(a: Vec4, b: Vec4) -> Vec4 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]]
}

#[inline]
pub fn norm4(a: Vec4) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2] + a[3] * a[3]).sqrt()
}

#[inline]
pub fn dot4(a: Vec4, b: Vec4) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

/// Angle in radians between two nonzero vectors of R^4.
pub fn angle4(a: Vec4, b: Vec4) -> f64 {
    let c = dot4(a, b) / (norm4(a) * norm4(b));
    c.clamp(-1.0, 1.0).acos()
}

/// Angle in radians between two nonzero vectors of R^2.
pub fn angle2(a: Vec2, b: Vec2) -> f64 {
    let c = dot2(a, b) / (norm2(a) * norm2(b));
    c.clamp(-1.0, 1.0).acos()
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn two_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
