//! Depth-aware pretraining, the two training stages and evaluation.
//!
//! [`Trainer`] is a step-wise state machine: every piece of state that
//! influences the next iteration lives in it and is serializable, so a run
//! resumed from a checkpoint continues bit-for-bit.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, DepthKind, Frame};
use crate::encoding::EncodingConfig;
use crate::error::{Error, Result};
use crate::gaussian::GaussianPrimitive;
use crate::img::{Image, Mask};
use crate::lifecycle::{
    accumulate_visibility, densify, prune_static, DensifyConfig, GradStats, PruneConfig, VisibilityStats,
};
use crate::objectives::{
    self, align_depth_many, depth_loss, dynamic_loss, photometric_loss, static_loss, Loss, LossWeights,
};
use crate::raster::{render, render_backward, RenderOptions, RenderReadyGaussian, Rendered, SetKind, SplatGrad};
use crate::scene::{resolve, Resolved, Scene, SceneConfig, SceneGrads, SetGrads, Which};
use crate::tinynet::{adam_step, AdamHyper, AdamState, LrSchedule, MlpShape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

/// Learning rates of the per-primitive parameters. Positions follow the
/// exponential schedule scaled by `position_scale`; the rest are constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParamRates {
    pub position_scale: f64,
    pub sh: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    /// Multiplier on the scheduled rate for the deformation network.
    pub deform_scale: f64,
}

impl Default for ParamRates {
    fn default() -> Self {
        Self {
            position_scale: 1.0,
            sh: 2.5e-3,
            opacity: 0.05,
            scale: 5e-3,
            rotation: 1e-3,
            deform_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dap_iterations: usize,
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub rates: ParamRates,
    pub adam: AdamHyper,
    pub loss: LossWeights,
    pub prune: PruneConfig,
    pub densify: DensifyConfig,
    pub encoding: EncodingConfig,
    pub mlp: MlpShape,
    pub sh_degree: usize,
    pub seed: u64,
    pub precision: Precision,
    pub deterministic: bool,
    pub use_dap: bool,
    pub use_vdp: bool,
    /// Static residual appearance network during stage II.
    pub static_appearance: bool,
    /// Dynamic residual appearance network during stage II.
    pub dynamic_appearance: bool,
    /// Emit a progress line every this many iterations (0 = never).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dap_iterations: 500,
            stage1_iterations: 2000,
            stage2_iterations: 3000,
            lr_initial: 8e-4,
            lr_final: 1.6e-6,
            rates: ParamRates::default(),
            adam: AdamHyper::default(),
            loss: LossWeights::default(),
            prune: PruneConfig::default(),
            densify: DensifyConfig::default(),
            encoding: EncodingConfig::SYNTHETIC,
            mlp: MlpShape::DESK,
            sh_degree: 1,
            seed: 0,
            precision: Precision::Double,
            deterministic: true,
            use_dap: true,
            use_vdp: true,
            static_appearance: true,
            dynamic_appearance: true,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    /// Iteration counts used in the paper-scale experiments.
    pub fn paper_scale() -> Self {
        Self {
            stage1_iterations: 30_000,
            stage2_iterations: 40_000,
            mlp: MlpShape::FULL,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lr_final > 0.0 && self.lr_initial >= self.lr_final) {
            return bad("need lr_initial ≥ lr_final > 0");
        }
        if !self.loss.is_valid() {
            return bad("loss weights must be finite and non-negative");
        }
        if !self.prune.is_valid() {
            return bad("prune thresholds must lie in [0, 1] and the interval be positive");
        }
        if !self.encoding.is_valid() {
            return bad("encoding band counts must be ≥ 1");
        }
        if self.sh_degree > crate::sh::MAX_DEGREE {
            return bad("SH degree above 3");
        }
        if self.densify.interval == 0 {
            return bad("densify interval must be positive");
        }
        let r = &self.rates;
        if [r.position_scale, r.sh, r.opacity, r.scale, r.rotation, r.deform_scale].iter().any(|v| !(*v >= 0.0)) {
            return bad("learning rates must be non-negative");
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.lr_initial, self.lr_final, self.stage1_iterations + self.stage2_iterations)
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            encoding: self.encoding,
            mlp: self.mlp,
            sh_degree: self.sh_degree,
            seed: self.seed,
            ..Default::default()
        }
    }

    fn render_options(&self) -> RenderOptions {
        RenderOptions {
            deterministic: self.deterministic,
            ..Default::default()
        }
    }
}

/// Trainable parameter groups of a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Centers(SetKind),
    Rotations(SetKind),
    LogScales(SetKind),
    Opacity(SetKind),
    Sh(SetKind),
    StaticApp,
    Deform,
    DynamicApp,
}

const GROUPS: [Group; 13] = [
    Group::Centers(SetKind::Static),
    Group::Rotations(SetKind::Static),
    Group::LogScales(SetKind::Static),
    Group::Opacity(SetKind::Static),
    Group::Sh(SetKind::Static),
    Group::Centers(SetKind::Dynamic),
    Group::Rotations(SetKind::Dynamic),
    Group::LogScales(SetKind::Dynamic),
    Group::Opacity(SetKind::Dynamic),
    Group::Sh(SetKind::Dynamic),
    Group::StaticApp,
    Group::Deform,
    Group::DynamicApp,
];

fn group_index(g: Group) -> usize {
    GROUPS.iter().position(|x| *x == g).expect("every group is listed")
}

fn set_groups(set: SetKind) -> [Group; 5] {
    [
        Group::Centers(set),
        Group::Rotations(set),
        Group::LogScales(set),
        Group::Opacity(set),
        Group::Sh(set),
    ]
}

fn gaussians(scene: &Scene, set: SetKind) -> &[GaussianPrimitive] {
    match set {
        SetKind::Static => &scene.static_set.gaussians,
        SetKind::Dynamic => &scene.dynamic_set.gaussians,
    }
}

fn gaussians_mut(scene: &mut Scene, set: SetKind) -> &mut Vec<GaussianPrimitive> {
    match set {
        SetKind::Static => &mut scene.static_set.gaussians,
        SetKind::Dynamic => &mut scene.dynamic_set.gaussians,
    }
}

fn row_width(g: Group, sh_len: usize) -> usize {
    match g {
        Group::Centers(_) | Group::LogScales(_) => 3,
        Group::Rotations(_) => 4,
        Group::Opacity(_) => 1,
        Group::Sh(_) => sh_len,
        _ => 0,
    }
}

fn gather(gs: &[GaussianPrimitive], g: Group) -> Vec<f64> {
    let mut out = Vec::new();
    for p in gs {
        match g {
            Group::Centers(_) => out.extend_from_slice(&p.center),
            Group::Rotations(_) => out.extend_from_slice(&p.rotation),
            Group::LogScales(_) => out.extend_from_slice(&p.log_scale),
            Group::Opacity(_) => out.push(p.opacity_logit),
            Group::Sh(_) => out.extend_from_slice(&p.sh_coeffs),
            _ => unreachable!("not a per-primitive group"),
        }
    }
    out
}

fn scatter(gs: &mut [GaussianPrimitive], g: Group, vals: &[f64]) {
    let w = vals.len() / gs.len().max(1);
    for (p, v) in gs.iter_mut().zip(vals.chunks(w.max(1))) {
        match g {
            Group::Centers(_) => p.center.copy_from_slice(v),
            Group::Rotations(_) => p.rotation.copy_from_slice(v),
            Group::LogScales(_) => p.log_scale.copy_from_slice(v),
            Group::Opacity(_) => p.opacity_logit = v[0],
            Group::Sh(_) => p.sh_coeffs.copy_from_slice(v),
            _ => unreachable!("not a per-primitive group"),
        }
    }
}

fn flat_grads(sg: &SetGrads, g: Group) -> Vec<f64> {
    match g {
        Group::Centers(_) => sg.centers.iter().flatten().copied().collect(),
        Group::Rotations(_) => sg.rotations.iter().flatten().copied().collect(),
        Group::LogScales(_) => sg.log_scales.iter().flatten().copied().collect(),
        Group::Opacity(_) => sg.opacity_logits.clone(),
        Group::Sh(_) => sg.sh.clone(),
        _ => unreachable!("not a per-primitive group"),
    }
}

/// One Adam state per parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub hyper: AdamHyper,
    pub states: Vec<AdamState>,
}

impl Optimizer {
    pub fn new(scene: &Scene, hyper: AdamHyper) -> Self {
        let sh_len = scene.sh_len();
        let states = GROUPS
            .iter()
            .map(|g| {
                let len = match g {
                    Group::StaticApp => scene.static_set.app_mlp.params().len(),
                    Group::Deform => scene.dynamic_set.deform_mlp.params().len(),
                    Group::DynamicApp => scene.dynamic_set.app_mlp.params().len(),
                    Group::Centers(s) | Group::Rotations(s) | Group::LogScales(s) | Group::Opacity(s) | Group::Sh(s) => {
                        gaussians(scene, *s).len() * row_width(*g, sh_len)
                    }
                };
                AdamState::new(len)
            })
            .collect();
        Self { hyper, states }
    }

    fn state(&mut self, g: Group) -> &mut AdamState {
        &mut self.states[group_index(g)]
    }

    /// Keeps the moment rows of surviving primitives of `set`.
    pub fn retain_rows(&mut self, set: SetKind, keep: &[bool], sh_len: usize) {
        for g in set_groups(set) {
            self.state(g).retain_rows(row_width(g, sh_len), keep);
        }
    }

    pub fn push_rows(&mut self, set: SetKind, rows: usize, sh_len: usize) {
        for g in set_groups(set) {
            self.state(g).push_rows(row_width(g, sh_len), rows);
        }
    }

    /// Applies one Adam step to `groups`. All gradients are checked for
    /// finiteness before anything is modified.
    fn apply(
        &mut self,
        scene: &mut Scene,
        grads: &SceneGrads,
        groups: &[(Group, f64)],
        precision: Precision,
    ) -> Result<()> {
        let mut staged = Vec::with_capacity(groups.len());
        for &(g, lr) in groups {
            let grad = match g {
                Group::StaticApp => grads.static_app.clone(),
                Group::Deform => grads.deform.clone(),
                Group::DynamicApp => grads.dynamic_app.clone(),
                Group::Centers(s) | Group::Rotations(s) | Group::LogScales(s) | Group::Opacity(s) | Group::Sh(s) => {
                    let sg = match s {
                        SetKind::Static => &grads.static_set,
                        SetKind::Dynamic => &grads.dynamic_set,
                    };
                    flat_grads(sg, g)
                }
            };
            if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    phase: String::new(),
                    iteration: 0,
                    detail: format!("{g:?} gradient entry {i} is {}", grad[i]),
                });
            }
            staged.push((g, lr, grad));
        }
        let hyper = self.hyper;
        for (g, lr, grad) in staged {
            let round = |v: &mut [f64]| {
                if precision == Precision::Single {
                    for x in v {
                        *x = *x as f32 as f64;
                    }
                }
            };
            match g {
                Group::StaticApp | Group::Deform | Group::DynamicApp => {
                    let net = match g {
                        Group::StaticApp => &mut scene.static_set.app_mlp,
                        Group::Deform => &mut scene.dynamic_set.deform_mlp,
                        _ => &mut scene.dynamic_set.app_mlp,
                    };
                    let state = &mut self.states[group_index(g)];
                    adam_step(net.params_mut(), &grad, state, lr, &hyper)?;
                    round(net.params_mut());
                }
                Group::Centers(s) | Group::Rotations(s) | Group::LogScales(s) | Group::Opacity(s) | Group::Sh(s) => {
                    let gs = gaussians_mut(scene, s);
                    let mut p = gather(gs, g);
                    adam_step(&mut p, &grad, &mut self.states[group_index(g)], lr, &hyper)?;
                    round(&mut p);
                    scatter(gs, g, &p);
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Dap,
    Stage1,
    Stage2,
    Done,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Dap => "dap",
            Phase::Stage1 => "stage1",
            Phase::Stage2 => "stage2",
            Phase::Done => "done",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub static_term: f64,
    pub dynamic_term: f64,
    pub depth: f64,
    pub joint: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub static_gaussians: usize,
    pub dynamic_gaussians: usize,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    pub phase: Phase,
    pub frame: usize,
    pub losses: LossBreakdown,
    pub counts: Counts,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub iter: usize,
    pub removed: Vec<usize>,
    pub remaining: usize,
    /// Mean absolute change of the first frame's static render caused by the prune.
    pub render_change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensifyEvent {
    pub iter: usize,
    pub set: SetKind,
    pub cloned: usize,
    pub split: usize,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub prune_events: Vec<PruneEvent>,
    pub densify_events: Vec<DensifyEvent>,
    pub notices: Vec<String>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// Everything except the wall clock.
    pub fn same_trace(&self, other: &TrainReport) -> bool {
        self.records == other.records
            && self.prune_events == other.prune_events
            && self.densify_events == other.densify_events
            && self.notices == other.notices
    }
}

fn frame_image(out: &crate::raster::RenderOutput) -> Image {
    Image::new(out.width, out.height, 3, out.color.clone()).expect("render output is H×W×3")
}

fn depth_image(out: &crate::raster::RenderOutput) -> Image {
    Image::new(out.width, out.height, 1, out.depth.clone()).expect("render depth is H×W")
}

/// Training state for all phases.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trainer {
    pub config: TrainConfig,
    pub scene: Scene,
    pub optimizer: Optimizer,
    rng: ChaCha8Rng,
    pub phase: Phase,
    /// Iterations completed in the current phase.
    pub phase_iter: usize,
    /// Iterations completed over all phases.
    pub global_iter: usize,
    pub visibility: VisibilityStats,
    grad_static: GradStats,
    grad_dynamic: GradStats,
    /// `(a, b)` with target depth `(D_gt − b)/a`, fixed at the start of pretraining.
    depth_alignment: Option<(f64, f64)>,
    pub extent: f64,
    pub report: TrainReport,
    #[serde(skip)]
    started: Option<Instant>,
}

impl PartialEq for Trainer {
    fn eq(&self, o: &Self) -> bool {
        self.config == o.config
            && self.scene == o.scene
            && self.optimizer == o.optimizer
            && self.rng == o.rng
            && self.phase == o.phase
            && self.phase_iter == o.phase_iter
            && self.global_iter == o.global_iter
            && self.visibility == o.visibility
            && self.grad_static == o.grad_static
            && self.grad_dynamic == o.grad_dynamic
            && self.depth_alignment == o.depth_alignment
            && self.extent == o.extent
            && self.report.same_trace(&o.report)
    }
}

/// Half the diagonal of the primitives' bounding box.
fn scene_extent(scene: &Scene) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for g in scene.static_set.gaussians.iter().chain(&scene.dynamic_set.gaussians) {
        for k in 0..3 {
            lo[k] = lo[k].min(g.center[k]);
            hi[k] = hi[k].max(g.center[k]);
        }
    }
    if lo[0] > hi[0] {
        return 1.0;
    }
    (0.5 * crate::math::norm(crate::math::sub(hi, lo))).max(1e-3)
}

/// Renders of one training frame sharing a single scene resolution.
struct FrameRenders {
    resolved: Resolved,
    n_static: usize,
}

impl FrameRenders {
    fn new(scene: &Scene, frame: &Frame, which: Which) -> Result<Self> {
        let resolved = resolve(scene, frame.time, &frame.camera, which)?;
        let n_static = resolved
            .splats
            .iter()
            .take_while(|s| s.source.set == SetKind::Static)
            .count();
        Ok(Self { resolved, n_static })
    }

    fn subset(&self, set: Option<SetKind>) -> &[RenderReadyGaussian] {
        match set {
            Some(SetKind::Static) => &self.resolved.splats[..self.n_static],
            Some(SetKind::Dynamic) => &self.resolved.splats[self.n_static..],
            None => &self.resolved.splats,
        }
    }

    fn offset(&self, set: Option<SetKind>) -> usize {
        if set == Some(SetKind::Dynamic) {
            self.n_static
        } else {
            0
        }
    }
}

fn add_splat_grads(total: &mut [SplatGrad], offset: usize, part: &[SplatGrad]) {
    for (t, p) in total[offset..].iter_mut().zip(part) {
        t.mean[0] += p.mean[0];
        t.mean[1] += p.mean[1];
        for k in 0..3 {
            t.cov[k] += p.cov[k];
            t.rgb[k] += p.rgb[k];
        }
        t.depth += p.depth;
        t.opacity += p.opacity;
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, scene: Scene) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(&scene, config.adam);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let extent = scene_extent(&scene);
        let mut t = Self {
            visibility: VisibilityStats::new(scene.num_static()),
            grad_static: GradStats::new(scene.num_static()),
            grad_dynamic: GradStats::new(scene.num_dynamic()),
            optimizer,
            rng,
            phase: Phase::Dap,
            phase_iter: 0,
            global_iter: 0,
            depth_alignment: None,
            extent,
            report: TrainReport::default(),
            started: None,
            config,
            scene,
        };
        t.scene.static_set.appearance_enabled = false;
        t.scene.dynamic_set.appearance_enabled = false;
        Ok(t)
    }

    fn phase_len(&self, phase: Phase) -> usize {
        match phase {
            Phase::Dap => self.config.dap_iterations,
            Phase::Stage1 => self.config.stage1_iterations,
            Phase::Stage2 => self.config.stage2_iterations,
            Phase::Done => 0,
        }
    }

    fn notice(&mut self, msg: String) {
        log::info!("{msg}");
        self.report.notices.push(msg);
    }

    /// Moves past finished or skipped phases.
    pub fn settle(&mut self, data: &Dataset) {
        loop {
            if self.phase == Phase::Dap && self.phase_iter == 0 && self.config.dap_iterations > 0 {
                if !self.config.use_dap {
                    self.notice("depth-aware pretraining disabled".into());
                    self.phase = Phase::Stage1;
                    continue;
                }
                if !data.has_depth() {
                    self.notice("dataset has no depth maps; skipping depth-aware pretraining".into());
                    self.phase = Phase::Stage1;
                    continue;
                }
            }
            if self.phase == Phase::Done || self.phase_iter < self.phase_len(self.phase) {
                return;
            }
            self.phase = match self.phase {
                Phase::Dap => Phase::Stage1,
                Phase::Stage1 => Phase::Stage2,
                _ => Phase::Done,
            };
            self.phase_iter = 0;
            if self.phase == Phase::Stage2 && self.config.stage2_iterations > 0 {
                self.scene.static_set.appearance_enabled = self.config.static_appearance;
                self.scene.dynamic_set.appearance_enabled = self.config.dynamic_appearance;
            }
        }
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    /// Runs one iteration of whichever phase is current. Returns `None` once
    /// training is complete.
    pub fn step(&mut self, data: &Dataset) -> Result<Option<StepRecord>> {
        self.settle(data);
        if self.phase == Phase::Done {
            return Ok(None);
        }
        let started = *self.started.get_or_insert_with(Instant::now);
        let record = match self.phase {
            Phase::Dap => self.step_dap(data)?,
            Phase::Stage1 => self.step_stage(data, false)?,
            Phase::Stage2 => self.step_stage(data, true)?,
            Phase::Done => unreachable!(),
        };
        self.phase_iter += 1;
        self.global_iter += 1;
        if self.phase == Phase::Stage1 {
            self.after_stage1_step(data)?;
        }
        if matches!(self.phase, Phase::Stage1 | Phase::Stage2) {
            self.maybe_densify()?;
        }
        if self.config.log_every > 0 && self.global_iter % self.config.log_every == 0 {
            log::info!("{}", serde_json::to_string(&record)?);
        }
        self.report.records.push(record.clone());
        self.report.wall_clock_secs += started.elapsed().as_secs_f64();
        self.started = Some(Instant::now());
        self.settle(data);
        Ok(Some(record))
    }

    /// Runs until the current phase changes or training ends.
    pub fn run_phase(&mut self, data: &Dataset) -> Result<()> {
        self.settle(data);
        let phase = self.phase;
        while self.phase == phase && self.phase != Phase::Done {
            self.step(data)?;
        }
        Ok(())
    }

    pub fn run(&mut self, data: &Dataset) -> Result<()> {
        while self.step(data)?.is_some() {}
        Ok(())
    }

    fn counts(&self) -> Counts {
        Counts {
            static_gaussians: self.scene.num_static(),
            dynamic_gaussians: self.scene.num_dynamic(),
        }
    }

    fn diverged(&self, detail: String) -> Error {
        Error::Diverged {
            phase: self.phase.name().into(),
            iteration: self.phase_iter,
            detail,
        }
    }

    /// Adam update; a non-finite gradient aborts before anything changes.
    fn update(&mut self, grads: &SceneGrads, groups: &[(Group, f64)]) -> Result<()> {
        let precision = self.config.precision;
        match self.optimizer.apply(&mut self.scene, grads, groups, precision) {
            Err(Error::Diverged { detail, .. }) => Err(self.diverged(detail)),
            r => r,
        }
    }

    fn compute_alignment(&mut self, data: &Dataset) -> Result<()> {
        if self.depth_alignment.is_some() {
            return Ok(());
        }
        if data.depth_kind == DepthKind::Metric {
            self.depth_alignment = Some((1.0, 0.0));
            return Ok(());
        }
        let opts = self.config.render_options();
        let mut renders = Vec::new();
        for f in data.frames.iter().filter(|f| f.depth.is_some()) {
            let r = resolve(&self.scene, f.time, &f.camera, Which::StaticOnly)?;
            let out = render(&r.splats, &f.camera, self.scene.config.background, &opts)?;
            renders.push((depth_image(&out.output), f));
        }
        let pairs: Vec<(&Image, &Image, &Mask)> = renders
            .iter()
            .map(|(d, f)| (d, f.depth.as_ref().unwrap(), &f.mask))
            .collect();
        let (a, b) = align_depth_many(&pairs)?;
        let a = if a.abs() < 1e-6 { 1.0 } else { a };
        self.notice(format!("depth alignment: scale {a}, offset {b}"));
        self.depth_alignment = Some((a, b));
        Ok(())
    }

    fn step_dap(&mut self, data: &Dataset) -> Result<StepRecord> {
        self.compute_alignment(data)?;
        let with_depth: Vec<usize> = (0..data.len()).filter(|i| data.frames[*i].depth.is_some()).collect();
        let mut rng = self.rng.clone();
        let fi = with_depth[rng.random_range(0..with_depth.len())];
        let frame = &data.frames[fi];
        let cfg = self.config.clone();
        let fr = FrameRenders::new(&self.scene, frame, Which::StaticOnly)?;
        let rendered = render(fr.subset(None), &frame.camera, self.scene.config.background, &cfg.render_options())?;
        let pred = frame_image(&rendered.output);
        let sl = static_loss(&pred, &frame.image, &frame.mask, &cfg.loss)?;
        let (a, b) = self.depth_alignment.unwrap_or((1.0, 0.0));
        let target = frame.depth.as_ref().unwrap().map(|d| (d - b) / a);
        let lambda = cfg.loss.depth_lambda(self.phase_iter, cfg.dap_iterations);
        let dl = depth_loss(&depth_image(&rendered.output), &target, &frame.mask, lambda)?;
        let total = sl.value + dl.value;
        if !total.is_finite() {
            return Err(self.diverged(format!("loss is {total}")));
        }
        let sg = render_backward(fr.subset(None), &rendered, &sl.grad.data, Some(&dl.grad.data), cfg.deterministic)?;
        let mut grads = SceneGrads::zeros(&self.scene);
        fr.resolved.backward(&self.scene, &sg, &mut grads)?;
        let r = cfg.rates;
        let lr_pos = cfg.lr_initial * r.position_scale;
        let groups = [
            (Group::Centers(SetKind::Static), lr_pos),
            (Group::Rotations(SetKind::Static), r.rotation),
            (Group::LogScales(SetKind::Static), r.scale),
            (Group::Opacity(SetKind::Static), r.opacity),
            (Group::Sh(SetKind::Static), r.sh),
        ];
        self.update(&grads, &groups)?;
        self.rng = rng;
        Ok(StepRecord {
            iter: self.global_iter,
            phase: Phase::Dap,
            frame: fi,
            losses: LossBreakdown {
                total,
                static_term: sl.value,
                depth: dl.value,
                ..Default::default()
            },
            counts: self.counts(),
            lr: lr_pos,
        })
    }

    fn render_part(
        &self,
        fr: &FrameRenders,
        frame: &Frame,
        set: Option<SetKind>,
    ) -> Result<Rendered> {
        // branch renders of the dynamic set composite over black
        let bg = if set == Some(SetKind::Dynamic) {
            [0.0; 3]
        } else {
            self.scene.config.background
        };
        render(fr.subset(set), &frame.camera, bg, &self.config.render_options())
    }

    fn backprop_part(
        &self,
        fr: &FrameRenders,
        set: Option<SetKind>,
        rendered: &Rendered,
        loss: &Loss,
        weight: f64,
        total: &mut [SplatGrad],
    ) -> Result<()> {
        if weight == 0.0 {
            return Ok(());
        }
        let d: Vec<f64> = loss.grad.data.iter().map(|v| v * weight).collect();
        let sg = render_backward(fr.subset(set), rendered, &d, None, self.config.deterministic)?;
        add_splat_grads(total, fr.offset(set), &sg);
        Ok(())
    }

    fn step_stage(&mut self, data: &Dataset, joint: bool) -> Result<StepRecord> {
        let mut rng = self.rng.clone();
        let fi = rng.random_range(0..data.len());
        let frame = &data.frames[fi];
        let cfg = self.config.clone();
        let fr = FrameRenders::new(&self.scene, frame, Which::Both)?;
        let mut splat_grads = vec![SplatGrad::default(); fr.resolved.splats.len()];
        let (ws, wd) = if joint {
            (cfg.loss.static_term, cfg.loss.dynamic_term)
        } else {
            (1.0, 1.0)
        };

        let st = self.render_part(&fr, frame, Some(SetKind::Static))?;
        let sl = static_loss(&frame_image(&st.output), &frame.image, &frame.mask, &cfg.loss)?;
        let dy = self.render_part(&fr, frame, Some(SetKind::Dynamic))?;
        let dl = dynamic_loss(&frame_image(&dy.output), &frame.image, &frame.mask, &cfg.loss)?;
        let mut losses = LossBreakdown {
            static_term: sl.value,
            dynamic_term: dl.value,
            ..Default::default()
        };
        losses.total = ws * sl.value + wd * dl.value;
        let jt = if joint {
            let jr = self.render_part(&fr, frame, None)?;
            let jl = photometric_loss(&frame_image(&jr.output), &frame.image, &cfg.loss)?;
            losses.joint = jl.value;
            losses.total += cfg.loss.joint * jl.value;
            Some((jr, jl))
        } else {
            None
        };
        if !losses.total.is_finite() {
            return Err(self.diverged(format!("loss is {}", losses.total)));
        }
        self.backprop_part(&fr, Some(SetKind::Static), &st, &sl, ws, &mut splat_grads)?;
        self.backprop_part(&fr, Some(SetKind::Dynamic), &dy, &dl, wd, &mut splat_grads)?;
        if let Some((jr, jl)) = &jt {
            self.backprop_part(&fr, None, jr, jl, cfg.loss.joint, &mut splat_grads)?;
        }
        let mut grads = SceneGrads::zeros(&self.scene);
        fr.resolved.backward(&self.scene, &splat_grads, &mut grads)?;

        let step = if joint { cfg.stage1_iterations + self.phase_iter } else { self.phase_iter };
        let lr = cfg.schedule().lr_at(step);
        let r = cfg.rates;
        let mut groups = Vec::with_capacity(13);
        if !joint {
            groups.extend([
                (Group::Centers(SetKind::Static), lr * r.position_scale),
                (Group::Rotations(SetKind::Static), r.rotation),
                (Group::LogScales(SetKind::Static), r.scale),
                (Group::Opacity(SetKind::Static), r.opacity),
                (Group::Sh(SetKind::Static), r.sh),
            ]);
        }
        groups.extend([
            (Group::Centers(SetKind::Dynamic), lr * r.position_scale),
            (Group::Rotations(SetKind::Dynamic), r.rotation),
            (Group::LogScales(SetKind::Dynamic), r.scale),
            (Group::Opacity(SetKind::Dynamic), r.opacity),
            (Group::Sh(SetKind::Dynamic), r.sh),
            (Group::Deform, lr * r.deform_scale),
        ]);
        if joint && self.scene.static_set.appearance_enabled {
            groups.push((Group::StaticApp, lr));
        }
        if joint && self.scene.dynamic_set.appearance_enabled {
            groups.push((Group::DynamicApp, lr));
        }
        self.update(&grads, &groups)?;
        self.rng = rng;
        if !joint {
            accumulate_visibility(
                &mut self.visibility,
                &st.output,
                &fr.resolved.static_splat,
                &fr.resolved.static_opacity,
            )?;
        }
        let (w, h) = (frame.camera.width as f64 / 2.0, frame.camera.height as f64 / 2.0);
        let ndc = |g: [f64; 2]| ((g[0] * w).powi(2) + (g[1] * h).powi(2)).sqrt();
        for (i, s) in fr.resolved.static_splat.iter().enumerate() {
            if s.is_some() && !joint {
                self.grad_static.add(i, ndc(grads.static_set.screen[i]));
            }
        }
        for (i, s) in fr.resolved.dynamic_splat.iter().enumerate() {
            if s.is_some() {
                self.grad_dynamic.add(i, ndc(grads.dynamic_set.screen[i]));
            }
        }
        Ok(StepRecord {
            iter: self.global_iter,
            phase: self.phase,
            frame: fi,
            losses,
            counts: self.counts(),
            lr,
        })
    }

    fn after_stage1_step(&mut self, data: &Dataset) -> Result<()> {
        let p = self.config.prune;
        if !self.config.use_vdp {
            return Ok(());
        }
        let c = self.phase_iter;
        if c == p.warmup {
            self.visibility.reset();
        }
        let last = c == self.config.stage1_iterations;
        if c > p.warmup && (c % p.interval == 0 || last) && self.visibility.frames > 0 {
            self.prune(data)?;
        }
        Ok(())
    }

    /// Visibility-driven pruning of the static set, then a stats reset.
    pub fn prune(&mut self, data: &Dataset) -> Result<Option<PruneEvent>> {
        let frame = &data.frames[0];
        let before = self.static_render(frame)?;
        let mut gs = std::mem::take(&mut self.scene.static_set.gaussians);
        let result = prune_static(&mut gs, &mut self.visibility, &self.config.prune);
        self.scene.static_set.gaussians = gs;
        let report = match result {
            Ok(r) => r,
            Err(Error::PruneEverything { removed, total }) => {
                self.notice(format!(
                    "pruning skipped at iteration {}: it would remove {removed} of {total}",
                    self.global_iter
                ));
                self.visibility.reset();
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let sh_len = self.scene.sh_len();
        self.optimizer.retain_rows(SetKind::Static, &report.keep, sh_len);
        self.grad_static.retain(&report.keep);
        self.visibility.reset();
        let after = self.static_render(frame)?;
        let change = after
            .data
            .iter()
            .zip(&before.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / after.data.len() as f64;
        let event = PruneEvent {
            iter: self.global_iter,
            removed: report.removed.clone(),
            remaining: self.scene.num_static(),
            render_change: change,
        };
        log::info!(
            "pruned {} static Gaussians at iteration {} ({} remain)",
            event.removed.len(),
            event.iter,
            event.remaining
        );
        self.report.prune_events.push(event.clone());
        Ok(Some(event))
    }

    fn static_render(&self, frame: &Frame) -> Result<Image> {
        let r = resolve(&self.scene, frame.time, &frame.camera, Which::StaticOnly)?;
        let opts = RenderOptions {
            retain_state: false,
            ..self.config.render_options()
        };
        Ok(frame_image(&render(&r.splats, &frame.camera, self.scene.config.background, &opts)?.output))
    }

    fn maybe_densify(&mut self) -> Result<()> {
        let d = self.config.densify;
        let c = self.phase_iter;
        let len = self.phase_len(self.phase);
        if !d.enabled || c < d.start || c % d.interval != 0 || c as f64 > d.stop_fraction * len as f64 {
            return Ok(());
        }
        let sets: &[SetKind] = if self.phase == Phase::Stage1 {
            &[SetKind::Static, SetKind::Dynamic]
        } else {
            &[SetKind::Dynamic]
        };
        let sh_len = self.scene.sh_len();
        for &set in sets {
            let stats = match set {
                SetKind::Static => &self.grad_static,
                SetKind::Dynamic => &self.grad_dynamic,
            };
            let mut gs = std::mem::take(gaussians_mut(&mut self.scene, set));
            let result = densify(&mut gs, stats, &d, self.extent, &mut self.rng);
            *gaussians_mut(&mut self.scene, set) = gs;
            let rep = result?;
            let stats = match set {
                SetKind::Static => &mut self.grad_static,
                SetKind::Dynamic => &mut self.grad_dynamic,
            };
            if !rep.is_noop() {
                self.optimizer.push_rows(set, rep.appended, sh_len);
                self.optimizer.retain_rows(set, &rep.keep, sh_len);
                if set == SetKind::Static {
                    self.visibility.extend(rep.appended);
                    self.visibility.retain(&rep.keep);
                }
                let event = DensifyEvent {
                    iter: self.global_iter,
                    set,
                    cloned: rep.cloned.len(),
                    split: rep.split.len(),
                    count: gaussians(&self.scene, set).len(),
                };
                self.report.densify_events.push(event);
            }
            *stats = GradStats::new(gaussians(&self.scene, set).len());
        }
        Ok(())
    }
}

/// Runs depth-aware pretraining alone on `scene`.
pub fn pretrain_dap(scene: Scene, data: &Dataset, cfg: &TrainConfig) -> Result<(Scene, TrainReport)> {
    let mut t = Trainer::new(cfg.clone(), scene)?;
    t.settle(data);
    if t.phase == Phase::Dap {
        t.run_phase(data)?;
    }
    Ok((t.scene, t.report))
}

fn run_single_phase(scene: Scene, data: &Dataset, cfg: &TrainConfig, phase: Phase) -> Result<(Scene, TrainReport)> {
    let mut t = Trainer::new(cfg.clone(), scene)?;
    t.phase = phase;
    if phase == Phase::Stage2 {
        t.scene.static_set.appearance_enabled = cfg.static_appearance;
        t.scene.dynamic_set.appearance_enabled = cfg.dynamic_appearance;
    }
    t.settle(data);
    if t.phase == phase {
        t.run_phase(data)?;
    }
    Ok((t.scene, t.report))
}

/// Runs stage I (separate region-specific supervision) alone.
pub fn train_stage1(scene: Scene, data: &Dataset, cfg: &TrainConfig) -> Result<(Scene, TrainReport)> {
    run_single_phase(scene, data, cfg, Phase::Stage1)
}

/// Runs stage II (joint optimization, frozen static geometry) alone.
pub fn train_stage2(scene: Scene, data: &Dataset, cfg: &TrainConfig) -> Result<(Scene, TrainReport)> {
    run_single_phase(scene, data, cfg, Phase::Stage2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub index: usize,
    pub time: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub which: Which,
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Renders one view of the scene.
pub fn render_view(scene: &Scene, t: f64, cam: &crate::camera::Camera, which: Which, deterministic: bool) -> Result<crate::raster::RenderOutput> {
    let splats = crate::scene::scene_at(scene, t, cam, which)?;
    let bg = if which == Which::DynamicOnly {
        [0.0; 3]
    } else {
        scene.config.background
    };
    let opts = RenderOptions {
        deterministic,
        retain_state: false,
        ..Default::default()
    };
    Ok(render(&splats, cam, bg, &opts)?.output)
}

pub fn render_image(scene: &Scene, t: f64, cam: &crate::camera::Camera, which: Which) -> Result<Image> {
    Ok(frame_image(&render_view(scene, t, cam, which, true)?))
}

/// PSNR/SSIM of `which`-renders against each frame's ground truth.
pub fn evaluate(scene: &Scene, data: &Dataset, which: Which) -> Result<EvalReport> {
    let frames = data
        .frames
        .iter()
        .map(|f| {
            let img = render_image(scene, f.time, &f.camera, which)?;
            Ok(FrameMetrics {
                index: f.index,
                time: f.time,
                psnr: objectives::psnr(&img, &f.image)?,
                ssim: objectives::ssim(&img, &f.image)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = frames.len().max(1) as f64;
    Ok(EvalReport {
        which,
        mean_psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
        mean_ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
        frames,
    })
}
