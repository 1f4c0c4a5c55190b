//! The Gaussian primitive and its derived quantities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};
use crate::sh;

/// Unit quaternion stored as `(w, x, y, z)`.
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

/// One anisotropic 3D Gaussian.
///
/// Scale is stored as a log and opacity as a logit so that unconstrained
/// optimizer steps always produce a valid primitive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub center: Vec3,
    pub rotation: Quat,
    pub log_scale: Vec3,
    pub opacity_logit: f64,
    pub sh_coeffs: Vec<f64>,
    pub sh_degree: usize,
}

impl GaussianPrimitive {
    pub fn new(
        center: Vec3,
        rotation: Quat,
        log_scale: Vec3,
        opacity_logit: f64,
        sh_coeffs: Vec<f64>,
        sh_degree: usize,
    ) -> Result<Self> {
        if sh_degree > sh::MAX_DEGREE {
            return Err(Error::InvalidParameter(format!(
                "sh_degree {sh_degree} exceeds {}",
                sh::MAX_DEGREE
            )));
        }
        if sh_coeffs.len() != sh::coeff_len(sh_degree) {
            return Err(Error::InvalidParameter(format!(
                "expected {} SH coefficients for degree {sh_degree}, got {}",
                sh::coeff_len(sh_degree),
                sh_coeffs.len()
            )));
        }
        let finite = center
            .iter()
            .chain(rotation.iter())
            .chain(log_scale.iter())
            .chain(sh_coeffs.iter())
            .all(|v| v.is_finite())
            && opacity_logit.is_finite();
        if !finite {
            return Err(Error::InvalidParameter("non-finite gaussian parameter".into()));
        }
        let rotation = normalize_quat(rotation)
            .ok_or_else(|| Error::InvalidParameter("zero-length rotation quaternion".into()))?;
        Ok(Self {
            center,
            rotation,
            log_scale,
            opacity_logit,
            sh_coeffs,
            sh_degree,
        })
    }

    /// An isotropic Gaussian with a constant color.
    pub fn isotropic(center: Vec3, sigma: f64, opacity: f64, rgb: Vec3, sh_degree: usize) -> Self {
        let ls = sigma.ln();
        Self {
            center,
            rotation: IDENTITY_QUAT,
            log_scale: [ls; 3],
            opacity_logit: math::logit(opacity),
            sh_coeffs: sh::coeffs_from_rgb(rgb, sh_degree),
            sh_degree,
        }
    }

    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        math::sigmoid(self.opacity_logit)
    }

    pub fn covariance(&self) -> Result<Covariance3> {
        let q = normalize_quat(self.rotation)
            .ok_or_else(|| Error::InvalidParameter("zero-length rotation quaternion".into()))?;
        assemble_covariance(q, self.scale())
    }
}

/// Symmetric positive semi-definite 3×3 covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance3(pub Mat3);

pub fn normalize_quat(q: Quat) -> Option<Quat> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n < 1e-12 || !n.is_finite() {
        return None;
    }
    Some([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_matrix(q: Quat) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Pulls a gradient on the rotation matrix back onto the quaternion entries
/// (treating them as free variables, i.e. before any normalization).
pub fn quat_to_matrix_backward(q: Quat, d_r: &Mat3) -> Quat {
    let [w, x, y, z] = q;
    let g = d_r;
    let dw = 2.0
        * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let dx = 2.0
        * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0 * x * g[1][1] - w * g[1][2]
            + z * g[2][0]
            + w * g[2][1]
            - 2.0 * x * g[2][2]);
    let dy = 2.0
        * (-2.0 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2]
            - w * g[2][0]
            + z * g[2][1]
            - 2.0 * y * g[2][2]);
    let dz = 2.0
        * (-2.0 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2.0 * z * g[1][1]
            + y * g[1][2]
            + x * g[2][0]
            + y * g[2][1]);
    [dw, dx, dy, dz]
}

/// Backward of quaternion normalization.
pub fn normalize_quat_backward(q: Quat, d_qn: Quat) -> Quat {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let qn = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let proj = qn[0] * d_qn[0] + qn[1] * d_qn[1] + qn[2] * d_qn[2] + qn[3] * d_qn[3];
    [
        (d_qn[0] - qn[0] * proj) / n,
        (d_qn[1] - qn[1] * proj) / n,
        (d_qn[2] - qn[2] * proj) / n,
        (d_qn[3] - qn[3] * proj) / n,
    ]
}

/// `Σ = R S Sᵀ Rᵀ` for a unit quaternion and linear per-axis scales.
pub fn assemble_covariance(rotation: Quat, scale: Vec3) -> Result<Covariance3> {
    if !rotation.iter().chain(scale.iter()).all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter(
            "non-finite rotation or scale".into(),
        ));
    }
    let r = quat_to_matrix(rotation);
    let s2 = [scale[0] * scale[0], scale[1] * scale[1], scale[2] * scale[2]];
    let mut cov = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            let v = r[i][0] * s2[0] * r[j][0] + r[i][1] * s2[1] * r[j][1] + r[i][2] * s2[2] * r[j][2];
            cov[i][j] = v;
            cov[j][i] = v;
        }
    }
    Ok(Covariance3(cov))
}

/// Backward of [`assemble_covariance`]. `d_cov` is the gradient w.r.t. the full
/// (symmetric) matrix. Returns gradients w.r.t. the unit quaternion entries and
/// the linear scales.
pub fn assemble_covariance_backward(rotation: Quat, scale: Vec3, d_cov: &Mat3) -> (Quat, Vec3) {
    let r = quat_to_matrix(rotation);
    // Σ = M Mᵀ with M = R diag(s); dL/dM = (G + Gᵀ) M
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j] * scale[j];
        }
    }
    let mut gs = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            gs[i][j] = d_cov[i][j] + d_cov[j][i];
        }
    }
    let d_m = math::mat_mul(&gs, &m);
    let mut d_r = [[0.0; 3]; 3];
    let mut d_s = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            d_r[i][j] = d_m[i][j] * scale[j];
            d_s[j] += d_m[i][j] * r[i][j];
        }
    }
    (quat_to_matrix_backward(rotation, &d_r), d_s)
}

const REGULARIZE_CONDITION: f64 = 1e12;
const REGULARIZE_EPS: f64 = 1e-9;

/// Unnormalized Gaussian density `exp(-½ xᵀ Σ⁻¹ x)` at `offset` from the center.
pub fn evaluate_density(cov: &Covariance3, offset: Vec3) -> Result<f64> {
    let mut m = cov.0;
    let eig = math::sym_eigenvalues3(&m);
    let (lo, hi) = (eig[0], eig[2]);
    if lo <= 0.0 || hi / lo > REGULARIZE_CONDITION {
        for (i, row) in m.iter_mut().enumerate() {
            row[i] += REGULARIZE_EPS;
        }
    }
    let inv = math::inverse3(&m)
        .ok_or_else(|| Error::DegenerateGaussian("covariance is singular".into()))?;
    let q = math::dot(offset, math::mat_vec(&inv, offset));
    if !q.is_finite() {
        return Err(Error::DegenerateGaussian(
            "non-finite Mahalanobis distance".into(),
        ));
    }
    Ok((-0.5 * q).exp())
}
