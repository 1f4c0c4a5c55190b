//! Tile-binned forward/backward rasterization of projected Gaussians.
//!
//! Splats are depth sorted once (ties broken by source id), binned into
//! square tiles by the bounding box of their 3σ ellipse, and composited front
//! to back per pixel. The backward pass re-walks each pixel's splat list and
//! accumulates gradients into per-tile buffers which are merged in tile order,
//! so results do not depend on thread scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::math::{Sym2, Vec2, Vec3};

/// Which set a splat came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SetKind {
    Static,
    Dynamic,
}

/// Identifies the primitive a splat was produced from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SourceId {
    pub set: SetKind,
    pub index: usize,
}

impl SourceId {
    pub fn new(set: SetKind, index: usize) -> Self {
        Self { set, index }
    }
}

/// A Gaussian after projection into a specific camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderReadyGaussian {
    /// Screen-space center in pixels.
    pub mean: Vec2,
    /// Screen-space covariance `[a, b, c]` of `[[a, b], [b, c]]`, px².
    pub cov: Sym2,
    pub depth: f64,
    pub rgb: Vec3,
    pub opacity: f64,
    pub source: SourceId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub tile_size: usize,
    /// Upper bound on a splat's per-pixel weight; keeps `1 - w` away from zero.
    pub max_weight: f64,
    /// Compositing stops once transmittance drops below this value.
    pub min_transmittance: f64,
    /// A splat counts as rendered at a pixel when its compositing weight reaches this.
    pub visibility_eps: f64,
    /// Process tiles sequentially on the calling thread.
    pub deterministic: bool,
    /// Keep the per-tile lists needed by [`render_backward`].
    pub retain_state: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            tile_size: 16,
            max_weight: 0.99,
            min_transmittance: 1e-4,
            visibility_eps: 1e-4,
            deterministic: true,
            retain_state: true,
        }
    }
}

/// Per-splat visibility statistics gathered during a forward render.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplatVisibility {
    pub rendered: bool,
    pub max_weight: f64,
    pub coverage: u32,
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major `H × W × 3`.
    pub color: Vec<f64>,
    /// Expected depth per pixel; `far` where nothing was accumulated.
    pub depth: Vec<f64>,
    pub accum_alpha: Vec<f64>,
    /// One entry per input splat, in input order.
    pub per_gaussian: Vec<SplatVisibility>,
}

/// Data retained from the forward pass for [`render_backward`].
#[derive(Clone, Debug)]
pub struct ForwardState {
    width: usize,
    height: usize,
    tile_size: usize,
    tiles_x: usize,
    background: Vec3,
    max_weight: f64,
    min_transmittance: f64,
    conics: Vec<Sym2>,
    tile_lists: Vec<Vec<u32>>,
    accum_alpha: Vec<f64>,
    depth_numerator: Vec<f64>,
}

/// Forward render plus (optionally) the state needed for the backward pass.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub output: RenderOutput,
    pub state: Option<ForwardState>,
}

/// Gradients w.r.t. one [`RenderReadyGaussian`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplatGrad {
    pub mean: Vec2,
    pub cov: Sym2,
    pub depth: f64,
    pub rgb: Vec3,
    pub opacity: f64,
}

/// Front-to-back compositing of an ordered stack of `(color, alpha)` pairs.
pub fn composite_pixel(splats: &[(Vec3, f64)], background: Vec3) -> Vec3 {
    composite_pixel_with(splats, background, 1e-4)
}

pub(crate) fn composite_pixel_with(
    splats: &[(Vec3, f64)],
    background: Vec3,
    min_transmittance: f64,
) -> Vec3 {
    let mut out = [0.0; 3];
    let mut t = 1.0;
    for &(c, a) in splats {
        if t < min_transmittance {
            break;
        }
        let w = a * t;
        for k in 0..3 {
            out[k] += c[k] * w;
        }
        t *= 1.0 - a;
    }
    for k in 0..3 {
        out[k] += background[k] * t;
    }
    out
}

#[inline]
fn gaussian_weight(conic: Sym2, mean: Vec2, px: f64, py: f64) -> (f64, f64, f64) {
    let dx = px - mean[0];
    let dy = py - mean[1];
    let power = -0.5 * (conic[0] * dx * dx + 2.0 * conic[1] * dx * dy + conic[2] * dy * dy);
    (power.exp(), dx, dy)
}

struct TileForward {
    color: Vec<f64>,
    accum: Vec<f64>,
    numer: Vec<f64>,
    vis: Vec<(u32, f64, u32)>,
}

fn tile_rect(state_w: usize, state_h: usize, tile: usize, tiles_x: usize, ts: usize) -> (usize, usize, usize, usize) {
    let tx = tile % tiles_x;
    let ty = tile / tiles_x;
    let x0 = tx * ts;
    let y0 = ty * ts;
    (x0, y0, (x0 + ts).min(state_w), (y0 + ts).min(state_h))
}

/// Renders `gaussians` into `cam`'s image plane.
pub fn render(
    gaussians: &[RenderReadyGaussian],
    cam: &Camera,
    background: Vec3,
    options: &RenderOptions,
) -> Result<Rendered> {
    let (width, height) = (cam.width, cam.height);
    if width == 0 || height == 0 {
        return Err(Error::InvalidConfig("zero-sized image".into()));
    }
    if options.tile_size == 0 {
        return Err(Error::InvalidConfig("tile_size must be positive".into()));
    }
    let ts = options.tile_size;
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);

    let mut conics = Vec::with_capacity(gaussians.len());
    for g in gaussians {
        let conic = crate::math::sym2_inverse(g.cov).ok_or_else(|| {
            Error::Contract(format!("splat {:?} has a non positive-definite covariance", g.source))
        })?;
        conics.push(conic);
    }

    let mut order: Vec<u32> = (0..gaussians.len() as u32).collect();
    order.sort_by(|&a, &b| {
        let ga = &gaussians[a as usize];
        let gb = &gaussians[b as usize];
        ga.depth
            .total_cmp(&gb.depth)
            .then_with(|| ga.source.cmp(&gb.source))
    });

    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        let g = &gaussians[i as usize];
        let ex = 3.0 * g.cov[0].sqrt();
        let ey = 3.0 * g.cov[2].sqrt();
        let xmin = g.mean[0] - ex;
        let xmax = g.mean[0] + ex;
        let ymin = g.mean[1] - ey;
        let ymax = g.mean[1] + ey;
        if xmax < 0.0 || ymax < 0.0 || xmin > width as f64 || ymin > height as f64 {
            continue;
        }
        let tx0 = (xmin.max(0.0) as usize / ts).min(tiles_x - 1);
        let ty0 = (ymin.max(0.0) as usize / ts).min(tiles_y - 1);
        let tx1 = ((xmax.min(width as f64 - 1e-9)).max(0.0) as usize / ts).min(tiles_x - 1);
        let ty1 = ((ymax.min(height as f64 - 1e-9)).max(0.0) as usize / ts).min(tiles_y - 1);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tile_lists[ty * tiles_x + tx].push(i);
            }
        }
    }

    let run_tile = |tile: usize| -> TileForward {
        let (x0, y0, x1, y1) = tile_rect(width, height, tile, tiles_x, ts);
        let list = &tile_lists[tile];
        let npx = (x1 - x0) * (y1 - y0);
        let mut out = TileForward {
            color: vec![0.0; npx * 3],
            accum: vec![0.0; npx],
            numer: vec![0.0; npx],
            vis: Vec::new(),
        };
        let mut stats = vec![(0.0f64, 0u32); list.len()];
        for y in y0..y1 {
            for x in x0..x1 {
                let p = (y - y0) * (x1 - x0) + (x - x0);
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut t = 1.0;
                let mut c = [0.0; 3];
                let mut numer = 0.0;
                // Σ w·T equals 1 − T but keeps its relative precision on faint pixels
                let mut accum = 0.0;
                for (slot, &gi) in list.iter().enumerate() {
                    if t < options.min_transmittance {
                        break;
                    }
                    let g = &gaussians[gi as usize];
                    let (gw, _, _) = gaussian_weight(conics[gi as usize], g.mean, px, py);
                    let w = (g.opacity * gw).min(options.max_weight);
                    let contrib = w * t;
                    for k in 0..3 {
                        c[k] += g.rgb[k] * contrib;
                    }
                    numer += g.depth * contrib;
                    accum += contrib;
                    let st = &mut stats[slot];
                    if contrib > st.0 {
                        st.0 = contrib;
                    }
                    if contrib >= options.visibility_eps {
                        st.1 += 1;
                    }
                    t *= 1.0 - w;
                }
                for k in 0..3 {
                    out.color[p * 3 + k] = c[k] + background[k] * t;
                }
                out.accum[p] = accum;
                out.numer[p] = numer;
            }
        }
        out.vis = list
            .iter()
            .zip(stats)
            .map(|(&gi, (m, cnt))| (gi, m, cnt))
            .collect();
        out
    };

    let n_tiles = tiles_x * tiles_y;
    let tiles: Vec<TileForward> = if options.deterministic {
        (0..n_tiles).map(run_tile).collect()
    } else {
        (0..n_tiles).into_par_iter().map(run_tile).collect()
    };

    let mut color = vec![0.0; width * height * 3];
    let mut accum_alpha = vec![0.0; width * height];
    let mut numer = vec![0.0; width * height];
    let mut per_gaussian = vec![SplatVisibility::default(); gaussians.len()];
    for (tile, tf) in tiles.into_iter().enumerate() {
        let (x0, y0, x1, y1) = tile_rect(width, height, tile, tiles_x, ts);
        for y in y0..y1 {
            for x in x0..x1 {
                let p = (y - y0) * (x1 - x0) + (x - x0);
                let q = y * width + x;
                color[q * 3..q * 3 + 3].copy_from_slice(&tf.color[p * 3..p * 3 + 3]);
                accum_alpha[q] = tf.accum[p];
                numer[q] = tf.numer[p];
            }
        }
        for (gi, m, cnt) in tf.vis {
            let v = &mut per_gaussian[gi as usize];
            v.max_weight = v.max_weight.max(m);
            v.coverage += cnt;
            v.rendered |= cnt > 0;
        }
    }
    let depth = accum_alpha
        .iter()
        .zip(&numer)
        .map(|(&a, &n)| if a > options.min_transmittance { n / a } else { cam.far })
        .collect();

    let state = options.retain_state.then(|| ForwardState {
        width,
        height,
        tile_size: ts,
        tiles_x,
        background,
        max_weight: options.max_weight,
        min_transmittance: options.min_transmittance,
        conics,
        tile_lists,
        accum_alpha: accum_alpha.clone(),
        depth_numerator: numer,
    });

    Ok(Rendered {
        output: RenderOutput {
            width,
            height,
            color,
            depth,
            accum_alpha,
            per_gaussian,
        },
        state,
    })
}

/// Analytic gradients of the forward render.
///
/// `d_color` is `H × W × 3`; `d_depth`, when given, is `H × W` and refers to the
/// normalized expected depth.
pub fn render_backward(
    gaussians: &[RenderReadyGaussian],
    rendered: &Rendered,
    d_color: &[f64],
    d_depth: Option<&[f64]>,
    deterministic: bool,
) -> Result<Vec<SplatGrad>> {
    let state = rendered
        .state
        .as_ref()
        .ok_or_else(|| Error::Contract("render_backward needs a retained forward state".into()))?;
    let (width, height) = (state.width, state.height);
    if d_color.len() != width * height * 3 {
        return Err(Error::Contract(format!(
            "color adjoint has {} entries, expected {}",
            d_color.len(),
            width * height * 3
        )));
    }
    if let Some(dd) = d_depth {
        if dd.len() != width * height {
            return Err(Error::Contract("depth adjoint has the wrong size".into()));
        }
    }
    if state.conics.len() != gaussians.len() {
        return Err(Error::Contract(
            "forward state was built for a different splat list".into(),
        ));
    }
    let ts = state.tile_size;
    let tiles_x = state.tiles_x;
    let n_tiles = state.tile_lists.len();

    struct Local {
        mean: Vec2,
        conic: Sym2,
        rgb: Vec3,
        opacity: f64,
        depth: f64,
    }

    let run_tile = |tile: usize| -> Vec<Local> {
        let list = &state.tile_lists[tile];
        let mut acc: Vec<Local> = (0..list.len())
            .map(|_| Local {
                mean: [0.0; 2],
                conic: [0.0; 3],
                rgb: [0.0; 3],
                opacity: 0.0,
                depth: 0.0,
            })
            .collect();
        if list.is_empty() {
            return acc;
        }
        let (x0, y0, x1, y1) = tile_rect(width, height, tile, tiles_x, ts);
        // (slot, w, T, gaussian weight, clamped)
        let mut walk: Vec<(usize, f64, f64, f64, bool)> = Vec::with_capacity(list.len());
        for y in y0..y1 {
            for x in x0..x1 {
                let q = y * width + x;
                let dc = [d_color[q * 3], d_color[q * 3 + 1], d_color[q * 3 + 2]];
                let (mut d_numer, mut d_accum) = (0.0, 0.0);
                if let Some(dd) = d_depth {
                    let a = state.accum_alpha[q];
                    if a > state.min_transmittance {
                        d_numer = dd[q] / a;
                        d_accum = -dd[q] * state.depth_numerator[q] / (a * a);
                    }
                }
                if dc == [0.0; 3] && d_numer == 0.0 && d_accum == 0.0 {
                    continue;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                walk.clear();
                let mut t = 1.0;
                for (slot, &gi) in list.iter().enumerate() {
                    if t < state.min_transmittance {
                        break;
                    }
                    let g = &gaussians[gi as usize];
                    let (gw, _, _) = gaussian_weight(state.conics[gi as usize], g.mean, px, py);
                    let raw = g.opacity * gw;
                    let clamped = raw > state.max_weight;
                    let w = if clamped { state.max_weight } else { raw };
                    walk.push((slot, w, t, gw, clamped));
                    t *= 1.0 - w;
                }
                let mut after_c = [
                    state.background[0] * t,
                    state.background[1] * t,
                    state.background[2] * t,
                ];
                let mut after_n = 0.0;
                let mut after_a = 0.0;
                for &(slot, w, ti, gw, clamped) in walk.iter().rev() {
                    let gi = list[slot] as usize;
                    let g = &gaussians[gi];
                    let contrib = w * ti;
                    let l = &mut acc[slot];
                    for k in 0..3 {
                        l.rgb[k] += dc[k] * contrib;
                    }
                    l.depth += d_numer * contrib;
                    let inv = 1.0 / (1.0 - w);
                    let mut d_w = 0.0;
                    for k in 0..3 {
                        d_w += dc[k] * (g.rgb[k] * ti - after_c[k] * inv);
                    }
                    d_w += d_numer * (g.depth * ti - after_n * inv);
                    d_w += d_accum * (ti - after_a * inv);
                    for k in 0..3 {
                        after_c[k] += g.rgb[k] * contrib;
                    }
                    after_n += g.depth * contrib;
                    after_a += contrib;
                    if clamped {
                        continue;
                    }
                    l.opacity += d_w * gw;
                    let d_power = d_w * g.opacity * gw;
                    let conic = state.conics[gi];
                    let dx = px - g.mean[0];
                    let dy = py - g.mean[1];
                    l.mean[0] += d_power * (conic[0] * dx + conic[1] * dy);
                    l.mean[1] += d_power * (conic[1] * dx + conic[2] * dy);
                    l.conic[0] += d_power * (-0.5 * dx * dx);
                    l.conic[1] += d_power * (-dx * dy);
                    l.conic[2] += d_power * (-0.5 * dy * dy);
                }
            }
        }
        acc
    };

    let tiles: Vec<Vec<Local>> = if deterministic {
        (0..n_tiles).map(run_tile).collect()
    } else {
        (0..n_tiles).into_par_iter().map(run_tile).collect()
    };

    let mut grads = vec![SplatGrad::default(); gaussians.len()];
    let mut d_conic = vec![[0.0; 3]; gaussians.len()];
    for (tile, acc) in tiles.into_iter().enumerate() {
        for (slot, l) in acc.into_iter().enumerate() {
            let gi = state.tile_lists[tile][slot] as usize;
            let g = &mut grads[gi];
            g.mean[0] += l.mean[0];
            g.mean[1] += l.mean[1];
            for k in 0..3 {
                g.rgb[k] += l.rgb[k];
                d_conic[gi][k] += l.conic[k];
            }
            g.opacity += l.opacity;
            g.depth += l.depth;
        }
    }
    // conic = Σ'⁻¹  ⇒  dL/dΣ' = −Q G_Q Q  (full symmetric matrices)
    for (gi, g) in grads.iter_mut().enumerate() {
        let q = state.conics[gi];
        let dq = d_conic[gi];
        let gq = [[dq[0], 0.5 * dq[1]], [0.5 * dq[1], dq[2]]];
        let qm = [[q[0], q[1]], [q[1], q[2]]];
        let mut tmp = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                tmp[i][j] = qm[i][0] * gq[0][j] + qm[i][1] * gq[1][j];
            }
        }
        let mut full = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                full[i][j] = -(tmp[i][0] * qm[0][j] + tmp[i][1] * qm[1][j]);
            }
        }
        g.cov = [full[0][0], full[0][1] + full[1][0], full[1][1]];
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(size: usize) -> Camera {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Camera::new(
            size as f64,
            size as f64,
            size as f64 / 2.0,
            size as f64 / 2.0,
            size,
            size,
            m,
            0.1,
            50.0,
        )
        .unwrap()
    }

    fn splat(mean: Vec2, sigma: f64, depth: f64, rgb: Vec3, opacity: f64, idx: usize) -> RenderReadyGaussian {
        RenderReadyGaussian {
            mean,
            cov: [sigma * sigma, 0.0, sigma * sigma],
            depth,
            rgb,
            opacity,
            source: SourceId::new(SetKind::Static, idx),
        }
    }

    #[test]
    fn composite_examples() {
        let c = composite_pixel(&[([0.3, 0.6, 0.9], 1.0)], [0.5, 0.5, 0.5]);
        assert_eq!(c, [0.3, 0.6, 0.9]);
        let c = composite_pixel(
            &[([1.0, 0.0, 0.0], 0.5), ([0.0, 1.0, 0.0], 0.5)],
            [0.0, 0.0, 0.0],
        );
        assert_eq!(c, [0.5, 0.25, 0.0]);
    }

    #[test]
    fn empty_scene_is_background() {
        let c = cam(20);
        let r = render(&[], &c, [0.1, 0.2, 0.3], &RenderOptions::default()).unwrap();
        for p in 0..400 {
            assert_eq!(&r.output.color[p * 3..p * 3 + 3], &[0.1, 0.2, 0.3]);
            assert_eq!(r.output.depth[p], c.far);
            assert_eq!(r.output.accum_alpha[p], 0.0);
        }
    }

    #[test]
    fn zero_sized_image_is_rejected() {
        let mut c = cam(8);
        c.width = 0;
        assert!(matches!(
            render(&[], &c, [0.0; 3], &RenderOptions::default()),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn opaque_wide_splat_matches_composite() {
        let c = cam(32);
        let s = splat([10.5, 12.5], 40.0, 2.0, [0.2, 0.7, 0.4], 1.0, 0);
        let r = render(&[s], &c, [0.0; 3], &RenderOptions::default()).unwrap();
        let q = 12 * 32 + 10;
        // weight clamps at 0.99 at the splat center
        let want = composite_pixel(&[(s.rgb, 0.99)], [0.0; 3]);
        for k in 0..3 {
            assert!((r.output.color[q * 3 + k] - want[k]).abs() < 1e-6);
        }
        assert!((r.output.depth[q] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn offscreen_splat_not_rendered() {
        let c = cam(32);
        let s = splat([-100.0, 16.0], 2.0, 2.0, [1.0; 3], 0.9, 0);
        let on = splat([16.0, 16.0], 2.0, 3.0, [1.0; 3], 0.9, 1);
        let r = render(&[s, on], &c, [0.0; 3], &RenderOptions::default()).unwrap();
        assert!(!r.output.per_gaussian[0].rendered);
        assert_eq!(r.output.per_gaussian[0].coverage, 0);
        assert!(r.output.per_gaussian[1].rendered);
        assert!(r.output.per_gaussian[1].coverage > 0);
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize, size: f64) -> Vec<RenderReadyGaussian> {
        (0..n)
            .map(|i| {
                let sx = rng.random_range(1.0..4.0);
                let sy = rng.random_range(1.0..4.0);
                let rho: f64 = rng.random_range(-0.6..0.6);
                RenderReadyGaussian {
                    mean: [rng.random_range(0.0..size), rng.random_range(0.0..size)],
                    cov: [sx * sx, rho * sx * sy, sy * sy],
                    depth: rng.random_range(1.0..10.0),
                    rgb: [rng.random(), rng.random(), rng.random()],
                    opacity: rng.random_range(0.05..0.95),
                    source: SourceId::new(SetKind::Static, i),
                }
            })
            .collect()
    }

    #[test]
    fn partition_of_unity_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cam(24);
        let scene = random_scene(&mut rng, 30, 24.0);
        let a = render(&scene, &c, [0.0; 3], &RenderOptions::default()).unwrap();
        let mut shuffled = scene.clone();
        shuffled.reverse();
        shuffled.swap(0, 7);
        let b = render(&shuffled, &c, [0.0; 3], &RenderOptions::default()).unwrap();
        for (x, y) in a.output.color.iter().zip(&b.output.color) {
            assert!((x - y).abs() <= 1e-12);
        }
        // white background: colors of an all-white scene equal 1 everywhere
        let white: Vec<_> = scene.iter().map(|g| RenderReadyGaussian { rgb: [1.0; 3], ..*g }).collect();
        let w = render(&white, &c, [1.0; 3], &RenderOptions::default()).unwrap();
        for v in &w.output.color {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = cam(40);
        let scene = random_scene(&mut rng, 60, 40.0);
        let seq = render(&scene, &c, [0.0; 3], &RenderOptions::default()).unwrap();
        let par = render(
            &scene,
            &c,
            [0.0; 3],
            &RenderOptions {
                deterministic: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(seq.output.color, par.output.color);
    }

    #[test]
    fn zero_adjoint_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = cam(16);
        let scene = random_scene(&mut rng, 10, 16.0);
        let r = render(&scene, &c, [0.0; 3], &RenderOptions::default()).unwrap();
        let g = render_backward(&scene, &r, &vec![0.0; 16 * 16 * 3], Some(&vec![0.0; 256]), true).unwrap();
        assert!(g.iter().all(|g| *g == SplatGrad::default()));
    }

    #[test]
    fn backward_without_state_is_a_contract_error() {
        let c = cam(8);
        let opts = RenderOptions {
            retain_state: false,
            ..Default::default()
        };
        let r = render(&[], &c, [0.0; 3], &opts).unwrap();
        assert!(matches!(
            render_backward(&[], &r, &vec![0.0; 8 * 8 * 3], None, true),
            Err(Error::Contract(_))
        ));
    }
}
