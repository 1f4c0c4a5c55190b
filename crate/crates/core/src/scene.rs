//! Static/dynamic scene decomposition and its resolution into render-ready splats.
//!
//! Static Gaussians keep their geometry at every time and only get an additive
//! appearance residual predicted from `[γ(μ), γ(t)]`. Dynamic Gaussians live in
//! a canonical configuration and are displaced by a deformation network fed the
//! same encoding. [`resolve`] evaluates both sets at a time `t` for a camera and
//! keeps a tape so that [`Resolved::backward`] can pull splat gradients back onto
//! every trainable parameter.

use serde::{Deserialize, Serialize};

use crate::camera::{self, Camera};
use crate::encoding::{self, EncodingConfig};
use crate::error::{Error, Result};
use crate::gaussian::{
    assemble_covariance, assemble_covariance_backward, normalize_quat, normalize_quat_backward,
    Covariance3, GaussianPrimitive, Quat,
};
use crate::math::{self, Mat3, Vec2, Vec3};
use crate::raster::{RenderReadyGaussian, SetKind, SourceId, SplatGrad};
use crate::sh;
use crate::tinynet::{Mlp, MlpCache, MlpShape};

/// Number of deformation outputs: position (3), rotation (4), log-scale (3).
pub const DEFORM_OUTPUTS: usize = 10;

/// Static Gaussians with frozen geometry and a residual appearance network.
///
/// The primitives' own SH coefficients and opacity logits are the base
/// appearance `w⁰`; the residual network output is added on top of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticSet {
    pub gaussians: Vec<GaussianPrimitive>,
    pub app_mlp: Mlp,
    pub appearance_enabled: bool,
}

/// Canonical dynamic Gaussians plus the deformation network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicSet {
    pub gaussians: Vec<GaussianPrimitive>,
    pub deform_mlp: Mlp,
    pub app_mlp: Mlp,
    pub appearance_enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub encoding: EncodingConfig,
    pub mlp: MlpShape,
    pub sh_degree: usize,
    pub background: Vec3,
    pub dilation: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            encoding: EncodingConfig::SYNTHETIC,
            mlp: MlpShape::DESK,
            sh_degree: 1,
            background: [0.0; 3],
            dilation: camera::DEFAULT_DILATION,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub static_set: StaticSet,
    pub dynamic_set: DynamicSet,
    pub config: SceneConfig,
}

/// Which part of the scene to resolve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    StaticOnly,
    DynamicOnly,
    Both,
}

impl Which {
    fn includes(self, set: SetKind) -> bool {
        matches!(
            (self, set),
            (Which::Both, _) | (Which::StaticOnly, SetKind::Static) | (Which::DynamicOnly, SetKind::Dynamic)
        )
    }
}

impl std::str::FromStr for Which {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Which::Both),
            "static" | "static_only" => Ok(Which::StaticOnly),
            "dynamic" | "dynamic_only" => Ok(Which::DynamicOnly),
            other => Err(Error::InvalidParameter(format!("unknown scene part '{other}'"))),
        }
    }
}

impl Scene {
    pub fn new(
        static_gaussians: Vec<GaussianPrimitive>,
        dynamic_gaussians: Vec<GaussianPrimitive>,
        config: SceneConfig,
    ) -> Result<Self> {
        if !config.encoding.is_valid() {
            return Err(Error::InvalidConfig("encoding band counts must be ≥ 1".into()));
        }
        for g in static_gaussians.iter().chain(&dynamic_gaussians) {
            if g.sh_degree != config.sh_degree {
                return Err(Error::InvalidParameter(format!(
                    "gaussian has SH degree {}, scene uses {}",
                    g.sh_degree, config.sh_degree
                )));
            }
        }
        let enc_len = config.encoding.output_len();
        let app_out = sh::coeff_len(config.sh_degree) + 1;
        Ok(Self {
            static_set: StaticSet {
                gaussians: static_gaussians,
                app_mlp: Mlp::new(enc_len, config.mlp, app_out, config.seed.wrapping_add(1)),
                appearance_enabled: false,
            },
            dynamic_set: DynamicSet {
                gaussians: dynamic_gaussians,
                deform_mlp: Mlp::new(enc_len, config.mlp, DEFORM_OUTPUTS, config.seed.wrapping_add(2)),
                app_mlp: Mlp::new(enc_len, config.mlp, app_out, config.seed.wrapping_add(3)),
                appearance_enabled: false,
            },
            config,
        })
    }

    pub fn num_static(&self) -> usize {
        self.static_set.gaussians.len()
    }

    pub fn num_dynamic(&self) -> usize {
        self.dynamic_set.gaussians.len()
    }

    pub fn sh_len(&self) -> usize {
        sh::coeff_len(self.config.sh_degree)
    }
}

/// Appearance `(SH coefficients, opacity logit)` of one Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct Appearance {
    pub sh_coeffs: Vec<f64>,
    pub opacity_logit: f64,
}

fn encode_batch(gaussians: &[GaussianPrimitive], t: f64, cfg: &EncodingConfig) -> Vec<f64> {
    let len = cfg.output_len();
    let mut out = vec![0.0; gaussians.len() * len];
    for (g, chunk) in gaussians.iter().zip(out.chunks_mut(len)) {
        encoding::encode_input_into(g.center, t, cfg, chunk);
    }
    out
}

/// Effective static appearance `w(t) = w⁰ + MLP_app([γ(μ), γ(t)])`.
pub fn static_appearance_at(
    set: &StaticSet,
    t: f64,
    enc: &EncodingConfig,
) -> Result<Vec<Appearance>> {
    let base = set.gaussians.iter().map(|g| Appearance {
        sh_coeffs: g.sh_coeffs.clone(),
        opacity_logit: g.opacity_logit,
    });
    if !set.appearance_enabled || set.gaussians.is_empty() {
        return Ok(base.collect());
    }
    let inputs = encode_batch(&set.gaussians, t, enc);
    let (delta, _) = set.app_mlp.forward_batch(&inputs, set.gaussians.len())?;
    let out_len = set.app_mlp.output_len();
    Ok(base
        .zip(delta.chunks(out_len))
        .map(|(mut a, d)| {
            let n = a.sh_coeffs.len();
            for (c, dc) in a.sh_coeffs.iter_mut().zip(&d[..n]) {
                *c += dc;
            }
            a.opacity_logit += d[n];
            a
        })
        .collect())
}

/// Deformed geometry of a dynamic Gaussian at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformedGeometry {
    pub center: Vec3,
    pub rotation: Quat,
    pub scale: Vec3,
    pub covariance: Covariance3,
}

fn deformed_rotation(canonical: Quat, delta: &[f64]) -> (Quat, bool) {
    let q = [
        canonical[0] + delta[0],
        canonical[1] + delta[1],
        canonical[2] + delta[2],
        canonical[3] + delta[3],
    ];
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n < 1e-8 || !n.is_finite() {
        log::warn!("degenerate deformed rotation (norm {n:e}); falling back to canonical");
        (canonical, true)
    } else {
        (q, false)
    }
}

/// Geometry of every dynamic Gaussian at time `t`.
pub fn deform_at(set: &DynamicSet, t: f64, enc: &EncodingConfig) -> Result<Vec<DeformedGeometry>> {
    if set.gaussians.is_empty() {
        return Ok(Vec::new());
    }
    let inputs = encode_batch(&set.gaussians, t, enc);
    let (delta, _) = set.deform_mlp.forward_batch(&inputs, set.gaussians.len())?;
    set.gaussians
        .iter()
        .zip(delta.chunks(DEFORM_OUTPUTS))
        .map(|(g, d)| {
            let center = math::add(g.center, [d[0], d[1], d[2]]);
            let (raw, _) = deformed_rotation(g.rotation, &d[3..7]);
            let rotation = normalize_quat(raw).expect("checked above");
            let scale = [
                (g.log_scale[0] + d[7]).exp(),
                (g.log_scale[1] + d[8]).exp(),
                (g.log_scale[2] + d[9]).exp(),
            ];
            let covariance = assemble_covariance(rotation, scale)?;
            Ok(DeformedGeometry {
                center,
                rotation,
                scale,
                covariance,
            })
        })
        .collect()
}

/// Parameters of a primitive after time-dependent residuals are applied.
#[derive(Clone, Debug)]
struct Effective {
    center: Vec3,
    rotation: Quat,
    log_scale: Vec3,
    sh: Vec<f64>,
    opacity_logit: f64,
}

#[derive(Clone, Debug)]
struct SetTape {
    effective: Vec<Effective>,
    app_cache: Option<MlpCache>,
    deform_cache: Option<MlpCache>,
    rotation_fallback: Vec<bool>,
}

/// Splats for one `(t, camera)` plus everything needed to backpropagate.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub splats: Vec<RenderReadyGaussian>,
    /// Activated opacity of every static Gaussian at `t` (empty when statics were not resolved).
    pub static_opacity: Vec<f64>,
    /// For each static Gaussian, the index of its splat (None when culled or excluded).
    pub static_splat: Vec<Option<usize>>,
    pub dynamic_splat: Vec<Option<usize>>,
    time: f64,
    camera: Camera,
    static_tape: Option<SetTape>,
    dynamic_tape: Option<SetTape>,
}

/// Gradients for the parameters of one Gaussian set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SetGrads {
    pub centers: Vec<Vec3>,
    pub rotations: Vec<Quat>,
    pub log_scales: Vec<Vec3>,
    pub opacity_logits: Vec<f64>,
    /// Flat, `n × sh_len`.
    pub sh: Vec<f64>,
    /// Gradient w.r.t. each splat's screen-space center (pixels), zero if culled.
    pub screen: Vec<Vec2>,
}

impl SetGrads {
    pub fn zeros(n: usize, sh_len: usize) -> Self {
        Self {
            centers: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
            sh: vec![0.0; n * sh_len],
            screen: vec![[0.0; 2]; n],
        }
    }

    pub fn add_assign(&mut self, other: &SetGrads) {
        fn add<const N: usize>(a: &mut [[f64; N]], b: &[[f64; N]]) {
            for (x, y) in a.iter_mut().zip(b) {
                for k in 0..N {
                    x[k] += y[k];
                }
            }
        }
        add(&mut self.centers, &other.centers);
        add(&mut self.rotations, &other.rotations);
        add(&mut self.log_scales, &other.log_scales);
        add(&mut self.screen, &other.screen);
        for (x, y) in self.opacity_logits.iter_mut().zip(&other.opacity_logits) {
            *x += y;
        }
        for (x, y) in self.sh.iter_mut().zip(&other.sh) {
            *x += y;
        }
    }
}

/// Gradients for every trainable parameter of a [`Scene`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneGrads {
    pub static_set: SetGrads,
    pub dynamic_set: SetGrads,
    pub static_app: Vec<f64>,
    pub deform: Vec<f64>,
    pub dynamic_app: Vec<f64>,
}

impl SceneGrads {
    pub fn zeros(scene: &Scene) -> Self {
        let sh_len = scene.sh_len();
        Self {
            static_set: SetGrads::zeros(scene.num_static(), sh_len),
            dynamic_set: SetGrads::zeros(scene.num_dynamic(), sh_len),
            static_app: vec![0.0; scene.static_set.app_mlp.params().len()],
            deform: vec![0.0; scene.dynamic_set.deform_mlp.params().len()],
            dynamic_app: vec![0.0; scene.dynamic_set.app_mlp.params().len()],
        }
    }

    pub fn add_assign(&mut self, other: &SceneGrads) {
        self.static_set.add_assign(&other.static_set);
        self.dynamic_set.add_assign(&other.dynamic_set);
        for (a, b) in [
            (&mut self.static_app, &other.static_app),
            (&mut self.deform, &other.deform),
            (&mut self.dynamic_app, &other.dynamic_app),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

fn apply_appearance(base: &GaussianPrimitive, delta: Option<&[f64]>) -> (Vec<f64>, f64) {
    let mut sh = base.sh_coeffs.clone();
    let mut logit = base.opacity_logit;
    if let Some(d) = delta {
        let n = sh.len();
        for (c, dc) in sh.iter_mut().zip(&d[..n]) {
            *c += dc;
        }
        logit += d[n];
    }
    (sh, logit)
}

fn static_tape(set: &StaticSet, t: f64, enc: &EncodingConfig) -> Result<SetTape> {
    let n = set.gaussians.len();
    let (deltas, cache) = if set.appearance_enabled && n > 0 {
        let inputs = encode_batch(&set.gaussians, t, enc);
        let (d, c) = set.app_mlp.forward_batch(&inputs, n)?;
        (Some(d), Some(c))
    } else {
        (None, None)
    };
    let out_len = set.app_mlp.output_len();
    let effective = set
        .gaussians
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let (sh, opacity_logit) =
                apply_appearance(g, deltas.as_ref().map(|d| &d[i * out_len..(i + 1) * out_len]));
            Effective {
                center: g.center,
                rotation: g.rotation,
                log_scale: g.log_scale,
                sh,
                opacity_logit,
            }
        })
        .collect();
    Ok(SetTape {
        effective,
        app_cache: cache,
        deform_cache: None,
        rotation_fallback: vec![false; n],
    })
}

fn dynamic_tape(set: &DynamicSet, t: f64, enc: &EncodingConfig) -> Result<SetTape> {
    let n = set.gaussians.len();
    if n == 0 {
        return Ok(SetTape {
            effective: Vec::new(),
            app_cache: None,
            deform_cache: None,
            rotation_fallback: Vec::new(),
        });
    }
    let inputs = encode_batch(&set.gaussians, t, enc);
    let (deltas, deform_cache) = set.deform_mlp.forward_batch(&inputs, n)?;
    let (app, app_cache) = if set.appearance_enabled {
        let (d, c) = set.app_mlp.forward_batch(&inputs, n)?;
        (Some(d), Some(c))
    } else {
        (None, None)
    };
    let out_len = set.app_mlp.output_len();
    let mut fallback = vec![false; n];
    let effective = set
        .gaussians
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let d = &deltas[i * DEFORM_OUTPUTS..(i + 1) * DEFORM_OUTPUTS];
            let (rotation, fb) = deformed_rotation(g.rotation, &d[3..7]);
            fallback[i] = fb;
            let (sh, opacity_logit) =
                apply_appearance(g, app.as_ref().map(|a| &a[i * out_len..(i + 1) * out_len]));
            Effective {
                center: math::add(g.center, [d[0], d[1], d[2]]),
                rotation,
                log_scale: math::add(g.log_scale, [d[7], d[8], d[9]]),
                sh,
                opacity_logit,
            }
        })
        .collect();
    Ok(SetTape {
        effective,
        app_cache,
        deform_cache: Some(deform_cache),
        rotation_fallback: fallback,
    })
}

/// Intermediate values of one projected primitive.
struct Projection {
    qn: Quat,
    scale: Vec3,
    cov: Mat3,
    p_cam: Vec3,
    view: Vec3,
    view_len: f64,
}

fn project(
    e: &Effective,
    cam: &Camera,
    degree: usize,
    dilation: f64,
    source: SourceId,
) -> Result<Option<(RenderReadyGaussian, Projection)>> {
    let qn = normalize_quat(e.rotation)
        .ok_or_else(|| Error::InvalidParameter(format!("zero rotation for {source:?}")))?;
    let scale = e.log_scale.map(f64::exp);
    let cov = assemble_covariance(qn, scale)?.0;
    let p_cam = cam.world_to_cam(e.center);
    if !(p_cam[2] > cam.near && p_cam[2] < cam.far) {
        return Ok(None);
    }
    let cov2 = camera::project_covariance_cam(cam, p_cam, &cov, dilation)?;
    if !(math::sym2_det(cov2) > 0.0 && cov2[0] > 0.0) {
        return Ok(None);
    }
    let mean = cam.cam_to_screen(p_cam);
    let ex = 3.0 * cov2[0].sqrt();
    let ey = 3.0 * cov2[2].sqrt();
    if mean[0] + ex < 0.0
        || mean[1] + ey < 0.0
        || mean[0] - ex > cam.width as f64
        || mean[1] - ey > cam.height as f64
    {
        return Ok(None);
    }
    let view = math::sub(e.center, cam.position());
    let view_len = math::norm(view);
    let dir = math::scale(view, 1.0 / view_len);
    let rgb = sh::evaluate_sh(&e.sh, degree, dir);
    Ok(Some((
        RenderReadyGaussian {
            mean,
            cov: cov2,
            depth: p_cam[2],
            rgb,
            opacity: math::sigmoid(e.opacity_logit),
            source,
        },
        Projection {
            qn,
            scale,
            cov,
            p_cam,
            view,
            view_len,
        },
    )))
}

/// Gradients of one effective primitive.
struct EffectiveGrad {
    center: Vec3,
    rotation: Quat,
    log_scale: Vec3,
    opacity_logit: f64,
}

fn project_backward(
    e: &Effective,
    splat: &RenderReadyGaussian,
    cam: &Camera,
    degree: usize,
    g: &SplatGrad,
    d_sh: &mut [f64],
) -> EffectiveGrad {
    // recompute the forward intermediates
    let qn = normalize_quat(e.rotation).expect("resolved primitive has a valid rotation");
    let scale = e.log_scale.map(f64::exp);
    let cov = assemble_covariance(qn, scale).expect("finite").0;
    let p_cam = cam.world_to_cam(e.center);
    let view = math::sub(e.center, cam.position());
    let view_len = math::norm(view);
    let proj = Projection {
        qn,
        scale,
        cov,
        p_cam,
        view,
        view_len,
    };

    let a = splat.opacity;
    let d_logit = g.opacity * a * (1.0 - a);

    let dir = math::scale(proj.view, 1.0 / proj.view_len);
    let d_dir = sh::evaluate_sh_backward(&e.sh, degree, dir, g.rgb, d_sh);
    let radial = math::dot(dir, d_dir);
    let mut d_center = math::scale(math::sub(d_dir, math::scale(dir, radial)), 1.0 / proj.view_len);

    let j = camera::projection_jacobian(cam, proj.p_cam).expect("resolved splat lies in front");
    let mut d_pcam = [
        j[0][0] * g.mean[0] + j[1][0] * g.mean[1],
        j[0][1] * g.mean[0] + j[1][1] * g.mean[1],
        j[0][2] * g.mean[0] + j[1][2] * g.mean[1] + g.depth,
    ];
    let (d_pcam_cov, d_cov) =
        camera::project_covariance_cam_backward(cam, proj.p_cam, &proj.cov, g.cov);
    d_pcam = math::add(d_pcam, d_pcam_cov);
    d_center = math::add(d_center, math::mat_t_vec(&cam.rotation(), d_pcam));

    let (d_qn, d_s) = assemble_covariance_backward(proj.qn, proj.scale, &d_cov);
    let d_rot = normalize_quat_backward(e.rotation, d_qn);
    let d_ls = [d_s[0] * proj.scale[0], d_s[1] * proj.scale[1], d_s[2] * proj.scale[2]];
    EffectiveGrad {
        center: d_center,
        rotation: d_rot,
        log_scale: d_ls,
        opacity_logit: d_logit,
    }
}

/// Resolves the scene at time `t` for `cam`.
pub fn resolve(scene: &Scene, t: f64, cam: &Camera, which: Which) -> Result<Resolved> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidParameter(format!("time {t} outside [0, 1]")));
    }
    let cfg = &scene.config;
    let static_tape = if which.includes(SetKind::Static) {
        Some(static_tape(&scene.static_set, t, &cfg.encoding)?)
    } else {
        None
    };
    let dynamic_tape = if which.includes(SetKind::Dynamic) {
        Some(dynamic_tape(&scene.dynamic_set, t, &cfg.encoding)?)
    } else {
        None
    };
    let mut splats = Vec::new();
    let mut static_splat = vec![None; scene.num_static()];
    let mut dynamic_splat = vec![None; scene.num_dynamic()];
    let mut static_opacity = Vec::new();
    for (kind, tape, map) in [
        (SetKind::Static, &static_tape, &mut static_splat),
        (SetKind::Dynamic, &dynamic_tape, &mut dynamic_splat),
    ] {
        let Some(tape) = tape else { continue };
        for (i, e) in tape.effective.iter().enumerate() {
            if kind == SetKind::Static {
                static_opacity.push(math::sigmoid(e.opacity_logit));
            }
            if let Some((splat, _)) =
                project(e, cam, cfg.sh_degree, cfg.dilation, SourceId::new(kind, i))?
            {
                map[i] = Some(splats.len());
                splats.push(splat);
            }
        }
    }
    Ok(Resolved {
        splats,
        static_opacity,
        static_splat,
        dynamic_splat,
        time: t,
        camera: cam.clone(),
        static_tape,
        dynamic_tape,
    })
}

/// Projects plain primitives (no networks involved), tagging them with `kind`.
pub fn splats_of(
    gaussians: &[GaussianPrimitive],
    kind: SetKind,
    cam: &Camera,
    dilation: f64,
) -> Result<Vec<RenderReadyGaussian>> {
    let mut out = Vec::with_capacity(gaussians.len());
    for (i, g) in gaussians.iter().enumerate() {
        let e = Effective {
            center: g.center,
            rotation: g.rotation,
            log_scale: g.log_scale,
            sh: g.sh_coeffs.clone(),
            opacity_logit: g.opacity_logit,
        };
        if let Some((s, _)) = project(&e, cam, g.sh_degree, dilation, SourceId::new(kind, i))? {
            out.push(s);
        }
    }
    Ok(out)
}

/// The render-ready splat list of the scene at time `t`.
pub fn scene_at(scene: &Scene, t: f64, cam: &Camera, which: Which) -> Result<Vec<RenderReadyGaussian>> {
    Ok(resolve(scene, t, cam, which)?.splats)
}

impl Resolved {
    pub fn time(&self) -> f64 {
        self.time
    }

    /// Pulls per-splat gradients back onto the scene parameters, accumulating
    /// into `grads`.
    pub fn backward(&self, scene: &Scene, splat_grads: &[SplatGrad], grads: &mut SceneGrads) -> Result<()> {
        if splat_grads.len() != self.splats.len() {
            return Err(Error::Contract(format!(
                "{} splat gradients for {} splats",
                splat_grads.len(),
                self.splats.len()
            )));
        }
        let cfg = &scene.config;
        let enc_len = cfg.encoding.output_len();
        let sh_len = scene.sh_len();
        let app_out = sh_len + 1;
        let cam = &self.camera;

        if let Some(tape) = &self.static_tape {
            let n = scene.num_static();
            if tape.effective.len() != n || grads.static_set.centers.len() != n {
                return Err(Error::Contract("static set changed since resolve".into()));
            }
            let set_grads = &mut grads.static_set;
            let mut d_app_out = tape.app_cache.as_ref().map(|_| vec![0.0; n * app_out]);
            for (i, slot) in self.static_splat.iter().enumerate() {
                let Some(s) = *slot else { continue };
                let e = &tape.effective[i];
                let mut d_sh = vec![0.0; sh_len];
                let eg = project_backward(e, &self.splats[s], cam, cfg.sh_degree, &splat_grads[s], &mut d_sh);
                accumulate_geometry(set_grads, i, &eg, &splat_grads[s]);
                set_grads.opacity_logits[i] += eg.opacity_logit;
                for (k, v) in d_sh.iter().enumerate() {
                    set_grads.sh[i * sh_len + k] += v;
                }
                if let Some(d) = d_app_out.as_mut() {
                    d[i * app_out..i * app_out + sh_len].copy_from_slice(&d_sh);
                    d[i * app_out + sh_len] = eg.opacity_logit;
                }
            }
            if let (Some(cache), Some(d_out)) = (&tape.app_cache, d_app_out) {
                let d_in = scene
                    .static_set
                    .app_mlp
                    .backward_batch(cache, &d_out, &mut grads.static_app)?;
                for (i, g) in scene.static_set.gaussians.iter().enumerate() {
                    let d = encoding::encode_input_backward_mu(g.center, &cfg.encoding, &d_in[i * enc_len..(i + 1) * enc_len]);
                    grads.static_set.centers[i] = math::add(grads.static_set.centers[i], d);
                }
            }
        }

        if let Some(tape) = &self.dynamic_tape {
            let n = scene.num_dynamic();
            if tape.effective.len() != n || grads.dynamic_set.centers.len() != n {
                return Err(Error::Contract("dynamic set changed since resolve".into()));
            }
            if n == 0 {
                return Ok(());
            }
            let set_grads = &mut grads.dynamic_set;
            let mut d_deform = vec![0.0; n * DEFORM_OUTPUTS];
            let mut d_app_out = tape.app_cache.as_ref().map(|_| vec![0.0; n * app_out]);
            for (i, slot) in self.dynamic_splat.iter().enumerate() {
                let Some(s) = *slot else { continue };
                let e = &tape.effective[i];
                let mut d_sh = vec![0.0; sh_len];
                let eg = project_backward(e, &self.splats[s], cam, cfg.sh_degree, &splat_grads[s], &mut d_sh);
                accumulate_geometry(set_grads, i, &eg, &splat_grads[s]);
                set_grads.opacity_logits[i] += eg.opacity_logit;
                for (k, v) in d_sh.iter().enumerate() {
                    set_grads.sh[i * sh_len + k] += v;
                }
                let dd = &mut d_deform[i * DEFORM_OUTPUTS..(i + 1) * DEFORM_OUTPUTS];
                dd[..3].copy_from_slice(&eg.center);
                if !tape.rotation_fallback[i] {
                    dd[3..7].copy_from_slice(&eg.rotation);
                }
                dd[7..10].copy_from_slice(&eg.log_scale);
                if let Some(d) = d_app_out.as_mut() {
                    d[i * app_out..i * app_out + sh_len].copy_from_slice(&d_sh);
                    d[i * app_out + sh_len] = eg.opacity_logit;
                }
            }
            let cache = tape.deform_cache.as_ref().expect("dynamic tape has a deform cache");
            let mut d_in = scene
                .dynamic_set
                .deform_mlp
                .backward_batch(cache, &d_deform, &mut grads.deform)?;
            if let (Some(cache), Some(d_out)) = (&tape.app_cache, d_app_out) {
                let d_in_app = scene
                    .dynamic_set
                    .app_mlp
                    .backward_batch(cache, &d_out, &mut grads.dynamic_app)?;
                for (a, b) in d_in.iter_mut().zip(d_in_app) {
                    *a += b;
                }
            }
            for (i, g) in scene.dynamic_set.gaussians.iter().enumerate() {
                let d = encoding::encode_input_backward_mu(g.center, &cfg.encoding, &d_in[i * enc_len..(i + 1) * enc_len]);
                grads.dynamic_set.centers[i] = math::add(grads.dynamic_set.centers[i], d);
            }
        }
        Ok(())
    }
}

fn accumulate_geometry(set_grads: &mut SetGrads, i: usize, eg: &EffectiveGrad, sg: &SplatGrad) {
    set_grads.centers[i] = math::add(set_grads.centers[i], eg.center);
    for k in 0..4 {
        set_grads.rotations[i][k] += eg.rotation[k];
    }
    set_grads.log_scales[i] = math::add(set_grads.log_scales[i], eg.log_scale);
    set_grads.screen[i][0] += sg.mean[0];
    set_grads.screen[i][1] += sg.mean[1];
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{render, RenderOptions};

    fn test_scene() -> Scene {
        let st: Vec<_> = (0..6)
            .map(|i| {
                GaussianPrimitive::isotropic(
                    [i as f64 * 0.2 - 0.5, 0.1 * i as f64 - 0.2, 1.0],
                    0.15,
                    0.7,
                    [0.2 + 0.1 * i as f64, 0.5, 0.3],
                    1,
                )
            })
            .collect();
        let dy: Vec<_> = (0..3)
            .map(|i| GaussianPrimitive::isotropic([0.1 * i as f64, 0.0, 0.5], 0.1, 0.8, [0.9, 0.1, 0.1], 1))
            .collect();
        let cfg = SceneConfig {
            mlp: MlpShape { depth: 2, width: 16 },
            ..Default::default()
        };
        Scene::new(st, dy, cfg).unwrap()
    }

    fn cam() -> Camera {
        Camera::look_at([0.0, 0.0, -2.0], [0.0, 0.0, 0.5], [0.0, 1.0, 0.0], 32.0, 32, 32).unwrap()
    }

    #[test]
    fn identity_networks_leave_parameters_unchanged() {
        let mut s = test_scene();
        s.static_set.appearance_enabled = true;
        s.dynamic_set.appearance_enabled = true;
        let app = static_appearance_at(&s.static_set, 0.7, &s.config.encoding).unwrap();
        for (a, g) in app.iter().zip(&s.static_set.gaussians) {
            assert_eq!(a.sh_coeffs, g.sh_coeffs);
            assert_eq!(a.opacity_logit, g.opacity_logit);
        }
        let geo = deform_at(&s.dynamic_set, 0.3, &s.config.encoding).unwrap();
        for (d, g) in geo.iter().zip(&s.dynamic_set.gaussians) {
            assert_eq!(d.center, g.center);
            assert_eq!(d.covariance, g.covariance().unwrap());
        }
        let a = scene_at(&s, 0.0, &cam(), Which::Both).unwrap();
        let b = scene_at(&s, 0.9, &cam(), Which::Both).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 9);
    }

    #[test]
    fn forced_translation_offset() {
        let mut s = test_scene();
        let n = s.dynamic_set.deform_mlp.num_layers();
        let (_, b) = s.dynamic_set.deform_mlp.layer_ranges(n - 1);
        s.dynamic_set.deform_mlp.params_mut()[b.start] = 0.1;
        let geo = deform_at(&s.dynamic_set, 0.5, &s.config.encoding).unwrap();
        for (d, g) in geo.iter().zip(&s.dynamic_set.gaussians) {
            assert!((d.center[0] - g.center[0] - 0.1).abs() < 1e-15);
            assert_eq!(d.center[1], g.center[1]);
            assert_eq!(d.covariance, g.covariance().unwrap());
        }
    }

    #[test]
    fn static_geometry_does_not_depend_on_time() {
        let mut s = test_scene();
        s.static_set.appearance_enabled = true;
        let (w, _) = s.static_set.app_mlp.layer_ranges(s.static_set.app_mlp.num_layers() - 1);
        for (k, v) in s.static_set.app_mlp.params_mut()[w].iter_mut().enumerate() {
            *v = ((k as f64) * 0.77).sin() * 0.3;
        }
        let a = resolve(&s, 0.1, &cam(), Which::StaticOnly).unwrap();
        let b = resolve(&s, 0.8, &cam(), Which::StaticOnly).unwrap();
        assert_eq!(a.splats.len(), b.splats.len());
        let mut color_differs = false;
        for (x, y) in a.splats.iter().zip(&b.splats) {
            assert_eq!(x.mean, y.mean);
            assert_eq!(x.cov, y.cov);
            assert_eq!(x.depth, y.depth);
            color_differs |= x.rgb != y.rgb || x.opacity != y.opacity;
        }
        assert!(color_differs);
    }

    #[test]
    fn transparent_dynamics_match_static_render() {
        let mut s = test_scene();
        for g in &mut s.dynamic_set.gaussians {
            g.opacity_logit = -800.0;
        }
        let c = cam();
        let opts = RenderOptions::default();
        let both = render(&scene_at(&s, 0.4, &c, Which::Both).unwrap(), &c, [0.0; 3], &opts).unwrap();
        let st = render(&scene_at(&s, 0.4, &c, Which::StaticOnly).unwrap(), &c, [0.0; 3], &opts).unwrap();
        for (a, b) in both.output.color.iter().zip(&st.output.color) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn which_parses() {
        assert_eq!("static".parse::<Which>().unwrap(), Which::StaticOnly);
        assert_eq!("both".parse::<Which>().unwrap(), Which::Both);
        assert!("everything".parse::<Which>().is_err());
    }

    #[test]
    fn time_outside_unit_interval_rejected() {
        let s = test_scene();
        assert!(resolve(&s, 1.5, &cam(), Which::Both).is_err());
    }
}
