//! Small fixed-size vector and quaternion helpers, generic over [`Real`].
//!
//! Quaternions are stored scalar-first as `[w, x, y, z]`.

use crate::scalar::Real;

pub type Vec3 = [f64; 3];
/// Column-major 3x3 matrix: `m[c]` is column `c`.
pub type Mat3 = [[f64; 3]; 3];

#[inline]
pub fn dot<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn sub<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale<T: Real>(a: [T; 3], s: T) -> [T; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn cross<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn lift<T: Real>(a: Vec3) -> [T; 3] {
    [T::cst(a[0]), T::cst(a[1]), T::cst(a[2])]
}

/// Hamilton product.
#[inline]
pub fn qmul<T: Real>(a: [T; 4], b: [T; 4]) -> [T; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

#[inline]
pub fn qconj<T: Real>(q: [T; 4]) -> [T; 4] {
    [q[0], -q[1], -q[2], -q[3]]
}

#[inline]
pub fn qnorm2<T: Real>(q: [T; 4]) -> T {
    q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]
}

/// Columns of `q (.) q*` applied to the basis, i.e. the rotation matrix of
/// `q` scaled by `|q|^2`.
pub fn scaled_rotation_columns<T: Real>(q: [T; 4]) -> [[T; 3]; 3] {
    let [w, x, y, z] = q;
    let two = 2.0;
    [
        [w * w + x * x - y * y - z * z, (x * y + w * z) * two, (x * z - w * y) * two],
        [(x * y - w * z) * two, w * w - x * x + y * y - z * z, (y * z + w * x) * two],
        [(x * z + w * y) * two, (y * z - w * x) * two, w * w - x * x - y * y + z * z],
    ]
}

/// Rotate `v` by the unit quaternion `q`.
pub fn rotate<T: Real>(q: [T; 4], v: [T; 3]) -> [T; 3] {
    let c = scaled_rotation_columns(q);
    [
        c[0][0] * v[0] + c[1][0] * v[1] + c[2][0] * v[2],
        c[0][1] * v[0] + c[1][1] * v[1] + c[2][1] * v[2],
        c[0][2] * v[0] + c[1][2] * v[1] + c[2][2] * v[2],
    ]
}

/// Shortest-arc unit quaternion taking the x axis onto `dir`.
pub fn quat_from_x_to(dir: Vec3) -> [f64; 4] {
    let n = norm(dir);
    if n == 0.0 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    let d = [dir[0] / n, dir[1] / n, dir[2] / n];
    let c = d[0];
    if c < -1.0 + 1e-12 {
        // antiparallel: half-turn about z
        return [0.0, 0.0, 0.0, 1.0];
    }
    // axis = x × d = (0, -d_z, d_y)
    let w = 1.0 + c;
    let q = [w, 0.0, -d[2], d[1]];
    let qn = qnorm2(q).sqrt();
    [q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn]
}

pub fn qnormalize(q: [f64; 4]) -> [f64; 4] {
    let n = qnorm2(q).sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

pub fn qdot(a: [f64; 4], b: [f64; 4]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

/// Spherical linear interpolation along the shorter arc.
pub fn slerp(a: [f64; 4], b: [f64; 4], t: f64) -> [f64; 4] {
    let mut b = b;
    let mut c = qdot(a, b);
    if c < 0.0 {
        b = [-b[0], -b[1], -b[2], -b[3]];
        c = -c;
    }
    if c > 1.0 - 1e-12 {
        let q = [
            a[0] + t * (b[0] - a[0]),
            a[1] + t * (b[1] - a[1]),
            a[2] + t * (b[2] - a[2]),
            a[3] + t * (b[3] - a[3]),
        ];
        return qnormalize(q);
    }
    let theta = c.acos();
    let s = theta.sin();
    let wa = ((1.0 - t) * theta).sin() / s;
    let wb = (t * theta).sin() / s;
    [
        wa * a[0] + wb * b[0],
        wa * a[1] + wb * b[1],
        wa * a[2] + wb * b[2],
        wa * a[3] + wb * b[3],
    ]
}
