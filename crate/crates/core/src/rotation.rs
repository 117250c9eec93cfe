//! Axis-angle and rotation-matrix helpers for 3x3 joint blocks stored row-major.

pub type Mat3 = [f64; 9];

/// Rotation matrix for the rotation vector `r` (axis times angle), by Rodrigues' formula.
pub fn rodrigues(r: [f64; 3]) -> Mat3 {
    let theta = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if theta < 1e-12 {
        return [1.0, -r[2], r[1], r[2], 1.0, -r[0], -r[1], r[0], 1.0];
    }
    let (x, y, z) = (r[0] / theta, r[1] / theta, r[2] / theta);
    let (s, c) = theta.sin_cos();
    let t = 1.0 - c;
    [
        c + x * x * t,
        x * y * t - z * s,
        x * z * t + y * s,
        y * x * t + z * s,
        c + y * y * t,
        y * z * t - x * s,
        z * x * t - y * s,
        z * y * t + x * s,
        c + z * z * t,
    ]
}

/// Rotation vector of a rotation matrix with angle below pi.
pub fn log_map(m: &[f64]) -> [f64; 3] {
    let cos = ((m[0] + m[4] + m[8] - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let w = [m[7] - m[5], m[2] - m[6], m[3] - m[1]];
    let k = if theta < 1e-8 { 0.5 } else { theta / (2.0 * theta.sin()) };
    [w[0] * k, w[1] * k, w[2] * k]
}

/// `max |R Rᵀ − I|` over entries.
pub fn orthonormality_residual(m: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| m[i * 3 + k] * m[j * 3 + k]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

pub fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn normalize3(a: [f64; 3]) -> [f64; 3] {
    let n = dot3(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}
