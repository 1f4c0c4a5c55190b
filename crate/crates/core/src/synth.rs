//! Synthetic dynamic scene with exact ground truth.
//!
//! A textured wall and floor made of flat Gaussians, plus a cluster of round
//! Gaussians travelling on a closed loop in front of the wall. Everything is
//! rendered with this crate's own rasterizer, so masks, depth and clean plates
//! are exact.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, DEFAULT_DILATION};
use crate::dataio::{
    self, load_dataset, write_mask_png, write_pfm, write_png_rgb, write_points, DepthKind, InitPoint,
    Manifest, ManifestFrame, MANIFEST_VERSION,
};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianPrimitive, Quat};
use crate::img::{Image, Mask};
use crate::math::{self, Vec3};
use crate::raster::{render, RenderOptions, SetKind};
use crate::scene::splats_of;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub seed: u64,
    pub focal: f64,
    /// Half-angle of the camera arc, degrees.
    pub arc_degrees: f64,
    pub surface_spacing: f64,
    pub blob_count: usize,
    pub blob_radius: f64,
    /// Semi-axes of the blob's loop in x and y.
    pub path_radii: [f64; 2],
    pub init_surface_points: usize,
    pub init_blob_points: usize,
    /// Accumulated blob alpha at which a pixel becomes dynamic.
    pub mask_threshold: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            frames: 60,
            seed: 0,
            focal: 70.0,
            arc_degrees: 10.0,
            surface_spacing: 0.1,
            blob_count: 40,
            blob_radius: 0.22,
            path_radii: [0.6, 0.3],
            init_surface_points: 1500,
            init_blob_points: 60,
            mask_threshold: 1e-3,
        }
    }
}

const WALL_Z: f64 = 3.0;
const WALL_X: [f64; 2] = [-2.6, 2.6];
const WALL_Y: [f64; 2] = [-2.2, 1.0];
const FLOOR_Y: f64 = 1.0;
const FLOOR_Z: [f64; 2] = [1.4, 3.0];
const BLOB_DEPTH: f64 = 2.2;
const TARGET: Vec3 = [0.0, -0.2, 3.0];
const EYE_DISTANCE: f64 = 4.0;

/// Ground-truth geometry of a synthetic scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub spec: SynthSpec,
    pub surfaces: Vec<GaussianPrimitive>,
    /// Blob members relative to the blob center.
    pub blob: Vec<GaussianPrimitive>,
    pub texture: Texture,
}

/// Smooth procedural color field: a few random plane waves per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    waves: Vec<[f64; 5]>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..9)
            .map(|i| {
                [
                    (i % 3) as f64,
                    rng.random_range(-2.5..2.5),
                    rng.random_range(-2.5..2.5),
                    rng.random_range(0.0..TAU),
                    rng.random_range(0.08..0.18),
                ]
            })
            .collect();
        Self { waves }
    }

    /// Color at surface coordinates `(u, v)`, with a per-surface base tint.
    pub fn color(&self, u: f64, v: f64, base: Vec3) -> Vec3 {
        let mut c = base;
        for w in &self.waves {
            c[w[0] as usize] += w[4] * (w[1] * u + w[2] * v + w[3]).sin();
        }
        c.map(|x| x.clamp(0.05, 0.95))
    }
}

const WALL_TINT: Vec3 = [0.45, 0.55, 0.6];
const FLOOR_TINT: Vec3 = [0.55, 0.45, 0.35];

fn wall_color(t: &Texture, p: Vec3) -> Vec3 {
    t.color(p[0], p[1], WALL_TINT)
}

fn floor_color(t: &Texture, p: Vec3) -> Vec3 {
    t.color(p[0] + 7.0, p[2] * 1.3, FLOOR_TINT)
}

/// Rotation taking the local z axis to the world y axis (floor normal).
const FLOOR_ROT: Quat = [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2, 0.0, 0.0];

fn flat(center: Vec3, rotation: Quat, in_plane: f64, color: Vec3) -> GaussianPrimitive {
    let mut g = GaussianPrimitive::isotropic(center, in_plane, 0.95, color, 0);
    g.rotation = rotation;
    g.log_scale[2] = (in_plane * 0.15).ln();
    g
}

impl SynthScene {
    pub fn new(spec: &SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let texture = Texture::new(&mut rng);
        let h = spec.surface_spacing;
        let sigma = 0.6 * h;
        let mut surfaces = Vec::new();
        let steps = |r: [f64; 2]| ((r[1] - r[0]) / h).round() as usize + 1;
        for j in 0..steps(WALL_Y) {
            for i in 0..steps(WALL_X) {
                let p = [WALL_X[0] + i as f64 * h, WALL_Y[0] + j as f64 * h, WALL_Z];
                surfaces.push(flat(p, [1.0, 0.0, 0.0, 0.0], sigma, wall_color(&texture, p)));
            }
        }
        for j in 0..steps(FLOOR_Z) {
            for i in 0..steps(WALL_X) {
                let p = [WALL_X[0] + i as f64 * h, FLOOR_Y, FLOOR_Z[0] + j as f64 * h];
                surfaces.push(flat(p, FLOOR_ROT, sigma, floor_color(&texture, p)));
            }
        }
        let blob = (0..spec.blob_count)
            .map(|_| {
                let off = sample_ball(&mut rng, spec.blob_radius);
                let color = [0.9, rng.random_range(0.15..0.55), rng.random_range(0.05..0.2)];
                GaussianPrimitive::isotropic(off, 0.07, 0.9, color, 0)
            })
            .collect();
        Self {
            spec: spec.clone(),
            surfaces,
            blob,
            texture,
        }
    }

    pub fn blob_center(&self, t: f64) -> Vec3 {
        let a = TAU * t;
        let [rx, ry] = self.spec.path_radii;
        [rx * a.cos(), -0.45 + ry * a.sin(), BLOB_DEPTH]
    }

    pub fn blob_at(&self, t: f64) -> Vec<GaussianPrimitive> {
        let c = self.blob_center(t);
        self.blob
            .iter()
            .map(|g| {
                let mut g = g.clone();
                g.center = math::add(g.center, c);
                g
            })
            .collect()
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let s = &self.spec;
        (0..s.frames)
            .map(|i| {
                let u = if s.frames > 1 {
                    2.0 * i as f64 / (s.frames - 1) as f64 - 1.0
                } else {
                    0.0
                };
                let th = (u * s.arc_degrees).to_radians();
                let eye = [
                    TARGET[0] + EYE_DISTANCE * th.sin(),
                    -0.5,
                    TARGET[2] - EYE_DISTANCE * th.cos(),
                ];
                let mut cam = Camera::look_at(eye, TARGET, [0.0, -1.0, 0.0], s.focal, s.width, s.height)?;
                cam.near = 0.1;
                cam.far = 20.0;
                Ok(cam)
            })
            .collect()
    }

    /// Points sampled on the surfaces plus the blob at `t = 0`.
    pub fn init_points(&self) -> Vec<InitPoint> {
        let s = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x5eed_0001);
        let wall_area = (WALL_X[1] - WALL_X[0]) * (WALL_Y[1] - WALL_Y[0]);
        let floor_area = (WALL_X[1] - WALL_X[0]) * (FLOOR_Z[1] - FLOOR_Z[0]);
        let mut out = Vec::with_capacity(s.init_surface_points + s.init_blob_points);
        for _ in 0..s.init_surface_points {
            let x = rng.random_range(WALL_X[0]..WALL_X[1]);
            let (p, c) = if rng.random_bool(wall_area / (wall_area + floor_area)) {
                let p = [x, rng.random_range(WALL_Y[0]..WALL_Y[1]), WALL_Z];
                (p, wall_color(&self.texture, p))
            } else {
                let p = [x, FLOOR_Y, rng.random_range(FLOOR_Z[0]..FLOOR_Z[1])];
                (p, floor_color(&self.texture, p))
            };
            out.push(InitPoint { position: p, color: c });
        }
        let c0 = self.blob_center(0.0);
        for _ in 0..s.init_blob_points {
            let member = &self.blob[rng.random_range(0..self.blob.len())];
            let p = math::add(math::add(c0, member.center), sample_ball(&mut rng, 0.05));
            out.push(InitPoint {
                position: p,
                color: crate::sh::evaluate_sh(&member.sh_coeffs, 0, [0.0, 0.0, 1.0]),
            });
        }
        out
    }
}

fn sample_ball(rng: &mut ChaCha8Rng, r: f64) -> Vec3 {
    loop {
        let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        if math::dot(p, p) <= 1.0 {
            return math::scale(p, r);
        }
    }
}

/// One rendered ground-truth frame.
#[derive(Clone, Debug)]
pub struct SynthFrame {
    pub camera: Camera,
    pub time: f64,
    pub image: Image,
    pub mask: Mask,
    pub depth: Image,
    pub plate: Image,
}

fn to_image(w: usize, h: usize, color: Vec<f64>) -> Image {
    Image::new(w, h, 3, color).expect("render size matches")
}

/// Renders every frame of the sequence in memory.
pub fn render_frames(scene: &SynthScene) -> Result<Vec<SynthFrame>> {
    let s = &scene.spec;
    let opts = RenderOptions {
        retain_state: false,
        ..Default::default()
    };
    let bg = [0.0; 3];
    scene
        .cameras()?
        .into_iter()
        .enumerate()
        .map(|(i, cam)| {
            let t = dataio::normalized_time(i, s.frames);
            let stat = splats_of(&scene.surfaces, SetKind::Static, &cam, DEFAULT_DILATION)?;
            let blob = splats_of(&scene.blob_at(t), SetKind::Dynamic, &cam, DEFAULT_DILATION)?;
            let mut both = stat.clone();
            both.extend_from_slice(&blob);
            let full = render(&both, &cam, bg, &opts)?.output;
            let plate = render(&stat, &cam, bg, &opts)?.output;
            let blob_only = render(&blob, &cam, bg, &opts)?.output;
            let mask = Mask::new(
                s.width,
                s.height,
                blob_only
                    .accum_alpha
                    .iter()
                    .map(|a| if *a >= s.mask_threshold { 0.0 } else { 1.0 })
                    .collect(),
            )?;
            Ok(SynthFrame {
                time: t,
                image: to_image(s.width, s.height, full.color),
                mask,
                depth: Image::new(s.width, s.height, 1, plate.depth)?,
                plate: to_image(s.width, s.height, plate.color),
                camera: cam,
            })
        })
        .collect()
}

/// Generates the dataset on disk and returns it as loaded back from `dir`.
pub fn synth_scene(spec: &SynthSpec, dir: &Path) -> Result<dataio::Dataset> {
    if spec.frames == 0 || spec.width == 0 || spec.height == 0 {
        return Err(Error::InvalidConfig("synthetic scene needs frames and a non-empty image".into()));
    }
    let scene = SynthScene::new(spec);
    let frames = render_frames(&scene)?;
    for sub in ["frames", "masks", "depth", "plates"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut manifest_frames = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let name = format!("{i:04}");
        let entry = ManifestFrame {
            image: format!("frames/{name}.png"),
            mask: format!("masks/{name}.png"),
            depth: Some(format!("depth/{name}.pfm")),
            plate: Some(format!("plates/{name}.png")),
            camera: f.camera.clone(),
        };
        write_png_rgb(&dir.join(&entry.image), &f.image)?;
        write_mask_png(&dir.join(&entry.mask), &f.mask)?;
        write_pfm(&dir.join(entry.depth.as_ref().unwrap()), &f.depth)?;
        write_png_rgb(&dir.join(entry.plate.as_ref().unwrap()), &f.plate)?;
        manifest_frames.push(entry);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        width: spec.width,
        height: spec.height,
        sequence_length: frames.len(),
        depth_kind: DepthKind::Metric,
        background: [0.0; 3],
        frames: manifest_frames,
    };
    dataio::atomic_write(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    write_points(&dir.join("init_points.txt"), &scene.init_points())?;
    load_dataset(dir)
}
