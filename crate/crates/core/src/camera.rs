//! Pinhole camera, world-to-camera transform and screen-space covariance projection.
//!
//! Conventions: camera looks down +z, image y grows downward, pixel (0, 0) is the
//! top-left corner and pixel centers sit at half-integer coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::Covariance3;
use crate::math::{self, Mat3, Sym2, Vec2, Vec3};

/// Default anti-aliasing dilation added to projected covariances, in px².
pub const DEFAULT_DILATION: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Rigid 4×4 world-to-camera transform (row-major).
    pub world_to_camera: [[f64; 4]; 4],
    pub near: f64,
    pub far: f64,
}

/// 2×3 Jacobian of the perspective projection.
pub type Jacobian = [[f64; 3]; 2];

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        world_to_camera: [[f64; 4]; 4],
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_camera,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let z = math::normalize(math::sub(target, eye));
        let x = math::normalize(math::cross(z, up));
        let y = math::cross(z, x);
        let rot = [x, y, z];
        let t = math::scale(math::mat_vec(&rot, eye), -1.0);
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&rot[i]);
            m[i][3] = t[i];
        }
        m[3][3] = 1.0;
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            m,
            0.01,
            100.0,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidConfig("focal lengths must be positive".into()));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::InvalidConfig("require 0 < near < far".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("image size must be non-zero".into()));
        }
        let r = self.rotation();
        let rrt = math::mat_mul(&r, &math::transpose(&r));
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (rrt[i][j] - want).abs() > 1e-6 {
                    return Err(Error::InvalidConfig(
                        "world_to_camera rotation block is not orthonormal".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn rotation(&self) -> Mat3 {
        let m = &self.world_to_camera;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn translation(&self) -> Vec3 {
        let m = &self.world_to_camera;
        [m[0][3], m[1][3], m[2][3]]
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vec3 {
        math::scale(math::mat_t_vec(&self.rotation(), self.translation()), -1.0)
    }

    pub fn world_to_cam(&self, p: Vec3) -> Vec3 {
        math::add(math::mat_vec(&self.rotation(), p), self.translation())
    }

    pub fn cam_to_screen(&self, p: Vec3) -> Vec2 {
        [
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        ]
    }
}

/// A projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub screen: Vec2,
    pub depth: f64,
}

/// Projects a world point. `None` signals the point is at or behind the near
/// plane and must be culled by the caller.
pub fn project_point(cam: &Camera, p_world: Vec3) -> Option<Projected> {
    let p = cam.world_to_cam(p_world);
    if !(p[2] > cam.near) {
        return None;
    }
    Some(Projected {
        screen: cam.cam_to_screen(p),
        depth: p[2],
    })
}

pub fn projection_jacobian(cam: &Camera, p_cam: Vec3) -> Result<Jacobian> {
    let [x, y, z] = p_cam;
    if !(z > 0.0) {
        return Err(Error::InvalidDepth(z));
    }
    let z2 = z * z;
    Ok([
        [cam.fx / z, 0.0, -cam.fx * x / z2],
        [0.0, cam.fy / z, -cam.fy * y / z2],
    ])
}

/// `Σ' = J W Σ Wᵀ Jᵀ + dilation·I`, returned as `[a, b, c]`.
pub fn project_covariance(
    cam: &Camera,
    p_world: Vec3,
    cov: &Covariance3,
    dilation: f64,
) -> Result<Sym2> {
    let p_cam = cam.world_to_cam(p_world);
    project_covariance_cam(cam, p_cam, &cov.0, dilation)
}

pub(crate) fn project_covariance_cam(
    cam: &Camera,
    p_cam: Vec3,
    cov: &Mat3,
    dilation: f64,
) -> Result<Sym2> {
    let j = projection_jacobian(cam, p_cam)?;
    let w = cam.rotation();
    let m = math::mat_mul(&math::mat_mul(&w, cov), &math::transpose(&w));
    // T = J M (2×3)
    let mut t = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            t[r][c] = j[r][0] * m[0][c] + j[r][1] * m[1][c] + j[r][2] * m[2][c];
        }
    }
    let a = math::dot(t[0], j[0]) + dilation;
    let b = math::dot(t[0], j[1]);
    let c = math::dot(t[1], j[1]) + dilation;
    Ok([a, b, c])
}

/// Backward of the covariance projection. `d_cov2` holds gradients w.r.t. the
/// independent entries `[a, b, c]`. Returns gradients w.r.t. the camera-space
/// point and the full world covariance matrix.
pub(crate) fn project_covariance_cam_backward(
    cam: &Camera,
    p_cam: Vec3,
    cov: &Mat3,
    d_cov2: Sym2,
) -> (Vec3, Mat3) {
    let [x, y, z] = p_cam;
    let j = projection_jacobian(cam, p_cam).expect("backward called on culled point");
    let w = cam.rotation();
    let m = math::mat_mul(&math::mat_mul(&w, cov), &math::transpose(&w));
    let g = [[d_cov2[0], 0.5 * d_cov2[1]], [0.5 * d_cov2[1], d_cov2[2]]];

    // dL/dM = Jᵀ G J
    let mut gj = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            gj[r][c] = g[r][0] * j[0][c] + g[r][1] * j[1][c];
        }
    }
    let mut d_m = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            d_m[r][c] = j[0][r] * gj[0][c] + j[1][r] * gj[1][c];
        }
    }
    let d_cov = math::mat_mul(&math::mat_mul(&math::transpose(&w), &d_m), &w);

    // dL/dJ = 2 G J M
    let mut d_j = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            d_j[r][c] = 2.0 * (gj[r][0] * m[0][c] + gj[r][1] * m[1][c] + gj[r][2] * m[2][c]);
        }
    }
    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let dx = d_j[0][2] * (-fx / z2);
    let dy = d_j[1][2] * (-fy / z2);
    let dz = d_j[0][0] * (-fx / z2)
        + d_j[0][2] * (2.0 * fx * x / z3)
        + d_j[1][1] * (-fy / z2)
        + d_j[1][2] * (2.0 * fy * y / z3);
    ([dx, dy, dz], d_cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{assemble_covariance, normalize_quat};

    fn identity_cam(f: f64, c: f64, size: usize) -> Camera {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Camera::new(f, f, c, c, size, size, m, 0.1, 100.0).unwrap()
    }

    #[test]
    fn principal_point_and_similar_triangles() {
        let cam = identity_cam(100.0, 32.0, 64);
        let p = project_point(&cam, [0.0, 0.0, 5.0]).unwrap();
        assert_eq!(p.screen, [32.0, 32.0]);
        assert_eq!(p.depth, 5.0);
        let cam0 = identity_cam(100.0, 0.0, 64);
        let p = project_point(&cam0, [1.0, 0.0, 2.0]).unwrap();
        assert_eq!(p.screen[0], 50.0);
        assert!(project_point(&cam, [0.0, 0.0, cam.near / 2.0]).is_none());
    }

    #[test]
    fn jacobian_on_axis_and_scaling() {
        let cam = identity_cam(100.0, 32.0, 64);
        let j = projection_jacobian(&cam, [0.0, 0.0, 2.0]).unwrap();
        assert_eq!(j, [[50.0, 0.0, 0.0], [0.0, 50.0, 0.0]]);
        let j2 = projection_jacobian(&cam, [0.0, 0.0, 4.0]).unwrap();
        assert_eq!(j2[0][0], 25.0);
        assert_eq!(j2[1][1], 25.0);
        assert!(matches!(
            projection_jacobian(&cam, [0.0, 0.0, 0.0]),
            Err(Error::InvalidDepth(_))
        ));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let cam = Camera::look_at([0.3, -0.2, -3.0], [0.0, 0.1, 0.0], [0.0, 1.0, 0.0], 80.0, 64, 48)
            .unwrap();
        let pw = [0.4, 0.25, 0.3];
        let pc = cam.world_to_cam(pw);
        let j = projection_jacobian(&cam, pc).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut a = pc;
            let mut b = pc;
            a[k] += h;
            b[k] -= h;
            let sa = cam.cam_to_screen(a);
            let sb = cam.cam_to_screen(b);
            for r in 0..2 {
                let fd = (sa[r] - sb[r]) / (2.0 * h);
                assert!((fd - j[r][k]).abs() < 1e-4, "J[{r}][{k}]");
            }
        }
    }

    #[test]
    fn on_axis_isotropic_projection() {
        let cam = identity_cam(80.0, 32.0, 64);
        let d = 4.0;
        let cov = Covariance3(math::IDENTITY3);
        let s = project_covariance(&cam, [0.0, 0.0, d], &cov, 0.0).unwrap();
        let want = (80.0 / d) * (80.0 / d);
        assert!((s[0] - want).abs() < 1e-12);
        assert!(s[1].abs() < 1e-12);
        assert!((s[2] - want).abs() < 1e-12);
        let s2 = project_covariance(&cam, [0.0, 0.0, d], &cov, 0.3).unwrap();
        assert!((s2[0] - s[0] - 0.3).abs() < 1e-12);
        assert!((s2[2] - s[2] - 0.3).abs() < 1e-12);
        assert_eq!(s2[1], s[1]);
    }

    #[test]
    fn translation_in_camera_plane_is_invariant() {
        let base = Camera::look_at([0.0, 0.0, -3.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 60.0, 64, 64)
            .unwrap();
        let q = normalize_quat([0.9, 0.2, -0.1, 0.3]).unwrap();
        let cov = assemble_covariance(q, [0.3, 0.1, 0.2]).unwrap();
        let p = [0.2, -0.1, 0.5];
        let a = project_covariance(&base, p, &cov, 0.3).unwrap();
        // shift camera and point together along the camera's x axis
        let shift = [0.7, 0.0, 0.0];
        let moved = Camera::look_at(
            math::add([0.0, 0.0, -3.0], shift),
            shift,
            [0.0, 1.0, 0.0],
            60.0,
            64,
            64,
        )
        .unwrap();
        let b = project_covariance(&moved, math::add(p, shift), &cov, 0.3).unwrap();
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-9);
        }
        assert!((a[1] - a[1]).abs() < 1e-12);
        assert!(math::sym2_det(a) > 0.0 && a[0] > 0.0);
    }

    #[test]
    fn covariance_projection_backward_matches_finite_differences() {
        let cam = Camera::look_at([0.3, -0.2, -3.0], [0.0, 0.1, 0.0], [0.0, 1.0, 0.0], 80.0, 64, 48)
            .unwrap();
        let q = normalize_quat([0.7, 0.2, -0.5, 0.3]).unwrap();
        let cov = assemble_covariance(q, [0.3, 0.15, 0.22]).unwrap().0;
        let pc = cam.world_to_cam([0.3, -0.4, 0.2]);
        let wts = [0.4, -1.3, 0.8];
        let f = |p: Vec3, c: &Mat3| {
            let s = project_covariance_cam(&cam, p, c, 0.3).unwrap();
            s[0] * wts[0] + s[1] * wts[1] + s[2] * wts[2]
        };
        let (dp, dc) = project_covariance_cam_backward(&cam, pc, &cov, wts);
        let h = 1e-6;
        for k in 0..3 {
            let mut a = pc;
            let mut b = pc;
            a[k] += h;
            b[k] -= h;
            let fd = (f(a, &cov) - f(b, &cov)) / (2.0 * h);
            assert!((fd - dp[k]).abs() < 1e-5 * fd.abs().max(1.0), "p{k}: {fd} vs {}", dp[k]);
        }
        // perturb symmetric pairs so the covariance stays symmetric
        for r in 0..3 {
            for c in r..3 {
                let mut a = cov;
                let mut b = cov;
                a[r][c] += h;
                b[r][c] -= h;
                if r != c {
                    a[c][r] += h;
                    b[c][r] -= h;
                }
                let fd = (f(pc, &a) - f(pc, &b)) / (2.0 * h);
                let an = if r == c { dc[r][c] } else { dc[r][c] + dc[c][r] };
                assert!((fd - an).abs() < 1e-5 * fd.abs().max(1.0), "cov[{r}][{c}]");
            }
        }
    }

    #[test]
    fn invalid_cameras_rejected() {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        assert!(Camera::new(-1.0, 1.0, 0.0, 0.0, 8, 8, m, 0.1, 10.0).is_err());
        assert!(Camera::new(1.0, 1.0, 0.0, 0.0, 8, 8, m, 0.1, 0.05).is_err());
        m[0][0] = 2.0;
        assert!(Camera::new(1.0, 1.0, 0.0, 0.0, 8, 8, m, 0.1, 10.0).is_err());
    }
}
