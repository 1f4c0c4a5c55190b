//! Sinusoidal positional encoding shared by the deformation and appearance networks.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::math::Vec3;

/// Frequency-band counts for the spatial coordinates and for time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub spatial_bands: usize,
    pub temporal_bands: usize,
}

impl EncodingConfig {
    /// Bands used for synthetic scenes.
    pub const SYNTHETIC: Self = Self {
        spatial_bands: 10,
        temporal_bands: 6,
    };
    /// Bands used for real captures.
    pub const REAL: Self = Self {
        spatial_bands: 10,
        temporal_bands: 10,
    };

    pub fn output_len(&self) -> usize {
        6 * self.spatial_bands + 2 * self.temporal_bands
    }

    pub fn is_valid(&self) -> bool {
        self.spatial_bands >= 1 && self.temporal_bands >= 1
    }
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self::SYNTHETIC
    }
}

/// `(sin(2ᵏπp), cos(2ᵏπp))` for `k = 0..bands`, interleaved.
pub fn encode_scalar(p: f64, bands: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * bands];
    encode_scalar_into(p, bands, &mut out);
    out
}

// One compiled copy keeps every caller bit-identical; inlined copies may
// lower sin/cos differently.
#[inline(never)]
pub fn encode_scalar_into(p: f64, bands: usize, out: &mut [f64]) {
    let mut freq = PI;
    for k in 0..bands {
        let (s, c) = (freq * p).sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
        freq *= 2.0;
    }
}

/// Derivative of `encode_scalar` output, contracted with `d_out`.
pub fn encode_scalar_backward(p: f64, bands: usize, d_out: &[f64]) -> f64 {
    let mut freq = PI;
    let mut d = 0.0;
    for k in 0..bands {
        let (s, c) = (freq * p).sin_cos();
        d += d_out[2 * k] * freq * c - d_out[2 * k + 1] * freq * s;
        freq *= 2.0;
    }
    d
}

/// `[γ(μx), γ(μy), γ(μz), γ(t)]`.
pub fn encode_input(mu: Vec3, t: f64, cfg: &EncodingConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.output_len()];
    encode_input_into(mu, t, cfg, &mut out);
    out
}

pub fn encode_input_into(mu: Vec3, t: f64, cfg: &EncodingConfig, out: &mut [f64]) {
    let s = 2 * cfg.spatial_bands;
    for (axis, &p) in mu.iter().enumerate() {
        encode_scalar_into(p, cfg.spatial_bands, &mut out[axis * s..(axis + 1) * s]);
    }
    encode_scalar_into(t, cfg.temporal_bands, &mut out[3 * s..]);
}

/// Gradient of the encoded vector w.r.t. the center `mu`.
pub fn encode_input_backward_mu(mu: Vec3, cfg: &EncodingConfig, d_out: &[f64]) -> Vec3 {
    let s = 2 * cfg.spatial_bands;
    let mut d = [0.0; 3];
    for axis in 0..3 {
        d[axis] = encode_scalar_backward(mu[axis], cfg.spatial_bands, &d_out[axis * s..(axis + 1) * s]);
    }
    d
}
