//! Real spherical-harmonic basis up to degree 3.
//!
//! Coefficients are stored coefficient-major: `coeffs[k * 3 + channel]`.
//! No DC offset is added to the evaluated color.

use crate::math::Vec3;

pub const MAX_DEGREE: usize = 3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of basis functions for a degree.
pub const fn basis_len(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Number of stored coefficients (three channels) for a degree.
pub const fn coeff_len(degree: usize) -> usize {
    3 * basis_len(degree)
}

/// Basis values and their gradients w.r.t. the (unnormalized) direction components.
pub struct Basis {
    pub values: [f64; 16],
    pub grads: [Vec3; 16],
    pub len: usize,
}

pub fn basis(degree: usize, dir: Vec3) -> Basis {
    let [x, y, z] = dir;
    let mut values = [0.0; 16];
    let mut grads = [[0.0; 3]; 16];
    values[0] = SH_C0;
    if degree >= 1 {
        values[1] = -SH_C1 * y;
        grads[1] = [0.0, -SH_C1, 0.0];
        values[2] = SH_C1 * z;
        grads[2] = [0.0, 0.0, SH_C1];
        values[3] = -SH_C1 * x;
        grads[3] = [-SH_C1, 0.0, 0.0];
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let c = SH_C2;
        values[4] = c[0] * x * y;
        grads[4] = [c[0] * y, c[0] * x, 0.0];
        values[5] = c[1] * y * z;
        grads[5] = [0.0, c[1] * z, c[1] * y];
        values[6] = c[2] * (2.0 * zz - xx - yy);
        grads[6] = [-2.0 * c[2] * x, -2.0 * c[2] * y, 4.0 * c[2] * z];
        values[7] = c[3] * x * z;
        grads[7] = [c[3] * z, 0.0, c[3] * x];
        values[8] = c[4] * (xx - yy);
        grads[8] = [2.0 * c[4] * x, -2.0 * c[4] * y, 0.0];
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let c = SH_C3;
        values[9] = c[0] * y * (3.0 * xx - yy);
        grads[9] = [6.0 * c[0] * x * y, c[0] * (3.0 * xx - 3.0 * yy), 0.0];
        values[10] = c[1] * x * y * z;
        grads[10] = [c[1] * y * z, c[1] * x * z, c[1] * x * y];
        values[11] = c[2] * y * (4.0 * zz - xx - yy);
        grads[11] = [
            -2.0 * c[2] * x * y,
            c[2] * (4.0 * zz - xx - 3.0 * yy),
            8.0 * c[2] * y * z,
        ];
        values[12] = c[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        grads[12] = [
            -6.0 * c[3] * x * z,
            -6.0 * c[3] * y * z,
            c[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ];
        values[13] = c[4] * x * (4.0 * zz - xx - yy);
        grads[13] = [
            c[4] * (4.0 * zz - 3.0 * xx - yy),
            -2.0 * c[4] * x * y,
            8.0 * c[4] * x * z,
        ];
        values[14] = c[5] * z * (xx - yy);
        grads[14] = [2.0 * c[5] * x * z, -2.0 * c[5] * y * z, c[5] * (xx - yy)];
        values[15] = c[6] * x * (xx - 3.0 * yy);
        grads[15] = [c[6] * (3.0 * xx - 3.0 * yy), -6.0 * c[6] * x * y, 0.0];
    }
    Basis {
        values,
        grads,
        len: basis_len(degree),
    }
}

/// Raw (unclamped) per-channel SH color.
pub fn eval_raw(coeffs: &[f64], degree: usize, dir: Vec3) -> Vec3 {
    let b = basis(degree, dir);
    let mut rgb = [0.0; 3];
    for k in 0..b.len {
        for (c, out) in rgb.iter_mut().enumerate() {
            *out += b.values[k] * coeffs[k * 3 + c];
        }
    }
    rgb
}

/// View-dependent color: basis expansion clamped to be non-negative.
pub fn evaluate_sh(coeffs: &[f64], degree: usize, view_dir: Vec3) -> Vec3 {
    debug_assert_eq!(coeffs.len(), coeff_len(degree));
    eval_raw(coeffs, degree, view_dir).map(|v| v.max(0.0))
}

/// Backward of [`evaluate_sh`]: accumulates coefficient gradients into `d_coeffs`
/// and returns the gradient w.r.t. the direction.
pub fn evaluate_sh_backward(
    coeffs: &[f64],
    degree: usize,
    view_dir: Vec3,
    d_rgb: Vec3,
    d_coeffs: &mut [f64],
) -> Vec3 {
    let b = basis(degree, view_dir);
    let mut raw = [0.0; 3];
    for k in 0..b.len {
        for (c, out) in raw.iter_mut().enumerate() {
            *out += b.values[k] * coeffs[k * 3 + c];
        }
    }
    let mut g = d_rgb;
    for c in 0..3 {
        if raw[c] < 0.0 {
            g[c] = 0.0;
        }
    }
    let mut d_dir = [0.0; 3];
    for k in 0..b.len {
        let mut s = 0.0;
        for c in 0..3 {
            d_coeffs[k * 3 + c] += b.values[k] * g[c];
            s += coeffs[k * 3 + c] * g[c];
        }
        for a in 0..3 {
            d_dir[a] += s * b.grads[k][a];
        }
    }
    d_dir
}

/// Coefficients encoding a constant RGB color at degree `degree`.
pub fn coeffs_from_rgb(rgb: Vec3, degree: usize) -> Vec<f64> {
    let mut c = vec![0.0; coeff_len(degree)];
    for ch in 0..3 {
        c[ch] = rgb[ch] / SH_C0;
    }
    c
}
