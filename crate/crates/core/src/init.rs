//! Building the initial scene from a dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::project_point;
use crate::dataio::{Dataset, InitPoint};
use crate::error::{Error, Result};
use crate::gaussian::GaussianPrimitive;
use crate::math::{self, Vec3};
use crate::scene::{Scene, SceneConfig};

/// Opacity every initial Gaussian starts with.
pub const INITIAL_OPACITY: f64 = 0.1;
/// Points without init data are scattered this many at random.
pub const RANDOM_POINTS: usize = 2000;
/// A point must sit this much nearer than the frame-0 depth to count as dynamic.
const DEPTH_MARGIN: f64 = 0.02;

/// Mean distance from each point to its `k` nearest neighbours (brute force).
pub fn knn_mean_distance(points: &[Vec3], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.len());
    let mut best = Vec::with_capacity(k + 1);
    for (i, p) in points.iter().enumerate() {
        best.clear();
        for (j, q) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = math::norm(math::sub(*p, *q));
            if best.len() < k {
                best.push(d);
                best.sort_by(f64::total_cmp);
            } else if d < best[k - 1] {
                best[k - 1] = d;
                best.sort_by(f64::total_cmp);
            }
        }
        let mean = if best.is_empty() {
            0.1
        } else {
            best.iter().sum::<f64>() / best.len() as f64
        };
        out.push(mean.max(1e-4));
    }
    out
}

/// Uniform points in the box spanned by the cameras and what they see.
fn random_points(data: &Dataset, seed: u64) -> Vec<InitPoint> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut grow = |p: Vec3| {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    };
    for f in &data.frames {
        let cam = &f.camera;
        let depth = f
            .depth
            .as_ref()
            .map(|d| {
                let mut v: Vec<f64> = d.data.iter().copied().filter(|x| *x < cam.far).collect();
                v.sort_by(f64::total_cmp);
                v.get(v.len() / 2).copied().unwrap_or(5.0)
            })
            .unwrap_or(5.0)
            .min(cam.far);
        grow(cam.position());
        let r = cam.rotation();
        for (u, v) in [(0.0, 0.0), (cam.width as f64, 0.0), (0.0, cam.height as f64), (cam.width as f64, cam.height as f64)] {
            let dir = [(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth];
            grow(math::mat_t_vec(&r, math::sub(dir, cam.translation())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..RANDOM_POINTS)
        .map(|_| InitPoint {
            position: [0, 1, 2].map(|k| rng.random_range(lo[k]..=hi[k])),
            color: [rng.random(), rng.random(), rng.random()],
        })
        .collect()
}

/// Whether a point seeds the dynamic set: in some frame it projects into the
/// dynamic region and, when that frame has depth, lies in front of the surface.
fn is_dynamic(data: &Dataset, p: Vec3) -> bool {
    data.frames.iter().any(|f| {
        let Some(proj) = project_point(&f.camera, p) else {
            return false;
        };
        let [x, y] = proj.screen;
        if !(x >= 0.0 && y >= 0.0 && x < f.camera.width as f64 && y < f.camera.height as f64) {
            return false;
        }
        let px = y as usize * f.camera.width + x as usize;
        if f.mask.data[px] != 0.0 {
            return false;
        }
        match &f.depth {
            Some(d) => proj.depth < d.data[px] * (1.0 - DEPTH_MARGIN),
            None => true,
        }
    })
}

/// One isotropic Gaussian per init point (or per random point when the
/// dataset has none), split into static and dynamic sets.
pub fn init_scene(data: &Dataset, config: SceneConfig) -> Result<Scene> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("dataset has no frames".into()));
    }
    let points = match &data.init_points {
        Some(p) if !p.is_empty() => p.clone(),
        _ => {
            log::warn!("no init points; scattering {RANDOM_POINTS} random points");
            random_points(data, config.seed)
        }
    };
    let positions: Vec<Vec3> = points.iter().map(|p| p.position).collect();
    let scales = knn_mean_distance(&positions, 3);
    let mut st = Vec::new();
    let mut dy = Vec::new();
    for (p, s) in points.iter().zip(scales) {
        let g = GaussianPrimitive::isotropic(p.position, s, INITIAL_OPACITY, p.color, config.sh_degree);
        if is_dynamic(data, p.position) {
            dy.push(g);
        } else {
            st.push(g);
        }
    }
    log::info!("initial scene: {} static, {} dynamic Gaussians", st.len(), dy.len());
    let mut config = config;
    config.background = data.background;
    Scene::new(st, dy, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knn_on_a_line() {
        let pts: Vec<Vec3> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        let d = knn_mean_distance(&pts, 3);
        assert!((d[0] - 2.0).abs() < 1e-12);
        assert!((d[2] - 4.0 / 3.0).abs() < 1e-12);
    }
}
