//! Visibility statistics, visibility-driven pruning of static Gaussians and
//! gradient-driven densification.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{quat_to_matrix, GaussianPrimitive};
use crate::math;
use crate::raster::RenderOutput;

/// Per static Gaussian: frames rendered, summed transparency, frames seen.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VisibilityStats {
    pub rendered_count: Vec<u32>,
    pub transparency_sum: Vec<f64>,
    pub frames: u32,
}

impl VisibilityStats {
    pub fn new(n: usize) -> Self {
        Self {
            rendered_count: vec![0; n],
            transparency_sum: vec![0.0; n],
            frames: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.rendered_count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rendered_count.is_empty()
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.len());
    }

    pub fn retain(&mut self, keep: &[bool]) {
        self.rendered_count = filter(&self.rendered_count, keep);
        self.transparency_sum = filter(&self.transparency_sum, keep);
    }

    pub fn extend(&mut self, rows: usize) {
        self.rendered_count.resize(self.len() + rows, 0);
        self.transparency_sum.resize(self.rendered_count.len(), 0.0);
    }

    /// Records one frame. `rendered[i]` tells whether Gaussian `i` contributed
    /// and `opacity[i]` is its activated opacity at that frame's time.
    pub fn record(&mut self, rendered: &[bool], opacity: &[f64]) -> Result<()> {
        if rendered.len() != self.len() || opacity.len() != self.len() {
            return Err(Error::Contract(format!(
                "visibility update for {}/{} Gaussians, stats track {}",
                rendered.len(),
                opacity.len(),
                self.len()
            )));
        }
        for i in 0..self.len() {
            if rendered[i] {
                self.rendered_count[i] += 1;
                self.transparency_sum[i] += 1.0 - opacity[i];
            }
        }
        self.frames += 1;
        Ok(())
    }
}

fn filter<T: Copy>(v: &[T], keep: &[bool]) -> Vec<T> {
    v.iter().zip(keep).filter(|(_, k)| **k).map(|(x, _)| *x).collect()
}

/// Accumulates one training render. `splat_of[i]` maps static Gaussian `i` to
/// its splat in `output` (None when culled).
pub fn accumulate_visibility(
    stats: &mut VisibilityStats,
    output: &RenderOutput,
    splat_of: &[Option<usize>],
    opacity: &[f64],
) -> Result<()> {
    let rendered: Vec<bool> = splat_of
        .iter()
        .map(|s| s.is_some_and(|k| output.per_gaussian.get(k).is_some_and(|v| v.rendered)))
        .collect();
    stats.record(&rendered, opacity)
}

/// `(V̄, freq)` of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisibilityScore {
    /// Mean of `𝟙·(1−α)` over all frames.
    pub score: f64,
    /// Fraction of frames in which the Gaussian was rendered.
    pub frequency: f64,
}

pub fn visibility_score(stats: &VisibilityStats) -> Vec<VisibilityScore> {
    if stats.frames == 0 {
        return Vec::new();
    }
    let t = stats.frames as f64;
    stats
        .rendered_count
        .iter()
        .zip(&stats.transparency_sum)
        .map(|(c, s)| VisibilityScore {
            score: s / t,
            frequency: *c as f64 / t,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub min_frequency: f64,
    /// Upper bound on mean transparency over the frames a Gaussian was rendered in.
    pub max_transparency: f64,
    pub use_frequency: bool,
    pub use_transparency: bool,
    /// Pruning aborts if fewer than this fraction of Gaussians would survive.
    pub min_keep_fraction: f64,
    pub interval: usize,
    pub warmup: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            min_frequency: 0.05,
            max_transparency: 0.98,
            use_frequency: true,
            use_transparency: true,
            min_keep_fraction: 0.01,
            interval: 1000,
            warmup: 500,
        }
    }
}

impl PruneConfig {
    pub fn is_valid(&self) -> bool {
        [self.min_frequency, self.max_transparency, self.min_keep_fraction]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
            && self.interval > 0
    }

    pub fn should_remove(&self, s: &VisibilityScore) -> bool {
        if s.frequency < self.min_frequency {
            return self.use_frequency;
        }
        self.use_transparency && s.frequency > 0.0 && s.score / s.frequency > self.max_transparency
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub index: usize,
    pub score: f64,
    pub frequency: f64,
    pub pruned: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub records: Vec<PruneRecord>,
    pub removed: Vec<usize>,
    /// Survivor flags over the pre-prune indices.
    pub keep: Vec<bool>,
}

/// Which Gaussians the rule would remove, without mutating anything.
pub fn prune_plan(stats: &VisibilityStats, cfg: &PruneConfig) -> PruneReport {
    let scores = visibility_score(stats);
    if scores.is_empty() {
        return PruneReport {
            keep: vec![true; stats.len()],
            ..Default::default()
        };
    }
    let records: Vec<PruneRecord> = scores
        .iter()
        .enumerate()
        .map(|(index, s)| PruneRecord {
            index,
            score: s.score,
            frequency: s.frequency,
            pruned: cfg.should_remove(s),
        })
        .collect();
    let removed = records.iter().filter(|r| r.pruned).map(|r| r.index).collect();
    let keep = records.iter().map(|r| !r.pruned).collect();
    PruneReport {
        records,
        removed,
        keep,
    }
}

/// Removes static Gaussians per the two-criterion rule and filters `stats`
/// in lockstep. Survivors are left untouched.
pub fn prune_static(
    gaussians: &mut Vec<GaussianPrimitive>,
    stats: &mut VisibilityStats,
    cfg: &PruneConfig,
) -> Result<PruneReport> {
    if stats.len() != gaussians.len() {
        return Err(Error::Contract(format!(
            "stats cover {} Gaussians, set has {}",
            stats.len(),
            gaussians.len()
        )));
    }
    let report = prune_plan(stats, cfg);
    let total = gaussians.len();
    let survivors = total - report.removed.len();
    let floor = ((total as f64 * cfg.min_keep_fraction).ceil() as usize).max(1).min(total);
    if total > 0 && survivors < floor {
        return Err(Error::PruneEverything {
            removed: report.removed.len(),
            total,
        });
    }
    let mut k = report.keep.iter();
    gaussians.retain(|_| *k.next().unwrap());
    stats.retain(&report.keep);
    Ok(report)
}

/// Running mean of each Gaussian's screen-space positional gradient norm.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradStats {
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sum.is_empty()
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.len());
    }

    pub fn retain(&mut self, keep: &[bool]) {
        self.sum = filter(&self.sum, keep);
        self.count = filter(&self.count, keep);
    }

    pub fn extend(&mut self, rows: usize) {
        self.sum.resize(self.len() + rows, 0.0);
        self.count.resize(self.sum.len(), 0);
    }

    pub fn add(&mut self, i: usize, norm: f64) {
        self.sum[i] += norm;
        self.count[i] += 1;
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub enabled: bool,
    /// Threshold on the mean positional gradient in normalized device coordinates.
    pub grad_threshold: f64,
    /// Largest scale, as a fraction of the scene extent, that still counts as small.
    pub percent_dense: f64,
    pub split_factor: f64,
    pub max_gaussians: usize,
    pub interval: usize,
    pub start: usize,
    /// Densification stops after this fraction of each phase.
    pub stop_fraction: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            grad_threshold: 2e-3,
            percent_dense: 0.01,
            split_factor: 1.6,
            max_gaussians: 20_000,
            interval: 100,
            start: 200,
            stop_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DensifyReport {
    pub cloned: Vec<usize>,
    pub split: Vec<usize>,
    /// Rows appended at the end of the set (clones then split children).
    pub appended: usize,
    /// Survivor flags over the set after appending.
    pub keep: Vec<bool>,
}

impl DensifyReport {
    pub fn is_noop(&self) -> bool {
        self.appended == 0
    }
}

/// Clones small Gaussians and splits large ones whose mean gradient exceeds
/// the threshold. New rows go to the end; split parents are removed.
pub fn densify<R: Rng>(
    gaussians: &mut Vec<GaussianPrimitive>,
    stats: &GradStats,
    cfg: &DensifyConfig,
    extent: f64,
    rng: &mut R,
) -> Result<DensifyReport> {
    if stats.len() != gaussians.len() {
        return Err(Error::Contract("gradient stats do not match the set".into()));
    }
    let n = gaussians.len();
    let size_limit = cfg.percent_dense * extent;
    let mut cloned = Vec::new();
    let mut split = Vec::new();
    for (i, g) in gaussians.iter().enumerate() {
        if stats.mean(i) <= cfg.grad_threshold {
            continue;
        }
        let s = g.scale();
        if s[0].max(s[1]).max(s[2]) <= size_limit {
            cloned.push(i);
        } else {
            split.push(i);
        }
    }
    let growth = cloned.len() + split.len();
    if growth == 0 {
        return Ok(DensifyReport {
            keep: vec![true; n],
            ..Default::default()
        });
    }
    if n + growth > cfg.max_gaussians {
        log::warn!(
            "densification skipped: {n} + {growth} Gaussians would exceed the budget of {}",
            cfg.max_gaussians
        );
        return Ok(DensifyReport {
            keep: vec![true; n],
            ..Default::default()
        });
    }
    for &i in &cloned {
        gaussians.push(gaussians[i].clone());
    }
    let shrink = cfg.split_factor.ln();
    for &i in &split {
        let parent = gaussians[i].clone();
        let r = quat_to_matrix(
            crate::gaussian::normalize_quat(parent.rotation).unwrap_or(crate::gaussian::IDENTITY_QUAT),
        );
        let s = parent.scale();
        for _ in 0..2 {
            let z: [f64; 3] = [
                rng.sample::<f64, _>(StandardNormal) * s[0],
                rng.sample::<f64, _>(StandardNormal) * s[1],
                rng.sample::<f64, _>(StandardNormal) * s[2],
            ];
            let mut child = parent.clone();
            child.center = math::add(parent.center, math::mat_vec(&r, z));
            for l in &mut child.log_scale {
                *l -= shrink;
            }
            gaussians.push(child);
        }
    }
    let mut keep = vec![true; gaussians.len()];
    for &i in &split {
        keep[i] = false;
    }
    let mut k = keep.iter();
    gaussians.retain(|_| *k.next().unwrap());
    Ok(DensifyReport {
        cloned,
        appended: growth + split.len(),
        split,
        keep,
    })
}

/// Caps every opacity at `max_alpha`.
pub fn reset_opacity(gaussians: &mut [GaussianPrimitive], max_alpha: f64) {
    let cap = math::logit(max_alpha);
    for g in gaussians {
        g.opacity_logit = g.opacity_logit.min(cap);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(n: usize) -> Vec<GaussianPrimitive> {
        (0..n)
            .map(|i| GaussianPrimitive::isotropic([i as f64, 0.0, 2.0], 0.05, 0.5, [0.5; 3], 0))
            .collect()
    }

    #[test]
    fn hand_traces() {
        let mut s = VisibilityStats::new(3);
        for t in 0..4 {
            let rendered = [false, true, t % 2 == 0];
            s.record(&rendered, &[0.3, 0.75, 0.5]).unwrap();
        }
        let v = visibility_score(&s);
        assert_eq!(v[0], VisibilityScore { score: 0.0, frequency: 0.0 });
        assert_eq!(v[1].score, 0.25);
        assert_eq!(v[1].frequency, 1.0);
        assert_eq!(v[2], VisibilityScore { score: 0.25, frequency: 0.5 });

        let mut z = VisibilityStats::new(1);
        z.record(&[true], &[0.0]).unwrap();
        assert_eq!(visibility_score(&z)[0].score, 1.0);
        assert!(visibility_score(&VisibilityStats::new(2)).is_empty());
        assert!(z.record(&[true, true], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn pruning_rules() {
        let mut g = set(4);
        let mut s = VisibilityStats::new(4);
        for _ in 0..10 {
            // 0: opaque contributor, 1: never rendered, 2: nearly invisible, 3: opaque
            s.record(&[true, false, true, true], &[0.9, 0.9, 0.01, 0.9]).unwrap();
        }
        let before = g.clone();
        let r = prune_static(&mut g, &mut s, &PruneConfig::default()).unwrap();
        assert_eq!(r.removed, vec![1, 2]);
        assert_eq!(g, vec![before[0].clone(), before[3].clone()]);
        let again = prune_static(&mut g, &mut s, &PruneConfig::default()).unwrap();
        assert!(again.removed.is_empty());
    }

    #[test]
    fn nothing_pruned_for_opaque_always_visible() {
        let mut g = set(5);
        let mut s = VisibilityStats::new(5);
        for _ in 0..7 {
            s.record(&[true; 5], &[0.9; 5]).unwrap();
        }
        assert!(prune_static(&mut g, &mut s, &PruneConfig::default()).unwrap().removed.is_empty());
    }

    #[test]
    fn pruning_everything_is_refused() {
        let mut g = set(3);
        let mut s = VisibilityStats::new(3);
        s.record(&[false; 3], &[0.5; 3]).unwrap();
        let err = prune_static(&mut g, &mut s, &PruneConfig::default()).unwrap_err();
        assert!(matches!(err, Error::PruneEverything { removed: 3, total: 3 }));
        assert_eq!(g.len(), 3);
    }

    #[test]
    fn densify_clone_and_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DensifyConfig::default();
        let mut g = set(3);
        g[2].log_scale = [0.2f64.ln(); 3];
        let orig = g.clone();

        let quiet = GradStats::new(3);
        assert!(densify(&mut g, &quiet, &cfg, 10.0, &mut rng).unwrap().is_noop());
        assert_eq!(g, orig);

        let mut st = GradStats::new(3);
        st.add(0, 5.0 * cfg.grad_threshold);
        let r = densify(&mut g, &st, &cfg, 10.0, &mut rng).unwrap();
        assert_eq!(r.cloned, vec![0]);
        assert_eq!(g.len(), 4);
        assert_eq!(g[3], g[0]);

        let mut g = orig.clone();
        let mut st = GradStats::new(3);
        st.add(2, 5.0 * cfg.grad_threshold);
        let r = densify(&mut g, &st, &cfg, 10.0, &mut rng).unwrap();
        assert_eq!(r.split, vec![2]);
        assert_eq!(g.len(), 4);
        assert_eq!(&g[..2], &orig[..2]);
        for child in &g[2..] {
            for k in 0..3 {
                assert!((child.scale()[k] - 0.2 / 1.6).abs() < 1e-12);
            }
            assert_eq!(child.sh_coeffs, orig[2].sh_coeffs);
        }
    }

    #[test]
    fn densify_respects_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DensifyConfig {
            max_gaussians: 3,
            ..Default::default()
        };
        let mut g = set(3);
        let mut st = GradStats::new(3);
        st.add(1, 1.0);
        assert!(densify(&mut g, &st, &cfg, 10.0, &mut rng).unwrap().is_noop());
        assert_eq!(g.len(), 3);
    }
}
