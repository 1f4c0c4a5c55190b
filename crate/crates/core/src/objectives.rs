//! Loss terms and image-quality metrics.
//!
//! Every loss returns its value together with the gradient w.r.t. the
//! prediction, since that is all the training loop needs.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::img::{Image, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ssim: f64,
    pub depth_initial: f64,
    /// Fraction of `depth_initial` left at the last pretraining step.
    pub depth_final_fraction: f64,
    pub joint: f64,
    pub static_term: f64,
    pub dynamic_term: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ssim: 0.2,
            // the depth term is a per-pixel mean; 0.05 is too weak to move
            // geometry against the photometric term within pretraining
            depth_initial: 0.5,
            depth_final_fraction: 0.01,
            joint: 1.0,
            static_term: 0.1,
            dynamic_term: 0.1,
        }
    }
}

impl LossWeights {
    pub fn is_valid(&self) -> bool {
        [self.ssim, self.depth_initial, self.joint, self.static_term, self.dynamic_term]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
            && self.depth_final_fraction > 0.0
            && self.depth_final_fraction <= 1.0
    }

    /// `λ₀·exp(−k·step)` with `k` chosen so the weight reaches
    /// `depth_final_fraction·λ₀` at `step = total_steps`.
    pub fn depth_lambda(&self, step: usize, total_steps: usize) -> f64 {
        if total_steps == 0 {
            return self.depth_initial;
        }
        let k = -self.depth_final_fraction.ln() / total_steps as f64;
        self.depth_initial * (-k * step as f64).exp()
    }
}

/// A scalar loss and its gradient w.r.t. the prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Loss {
    pub value: f64,
    pub grad: Image,
}

impl Loss {
    fn zero(like: &Image) -> Self {
        Self {
            value: 0.0,
            grad: like.zeros_like(),
        }
    }

    /// `self += w · other`.
    pub fn add_scaled(&mut self, other: &Loss, w: f64) {
        self.value += w * other.value;
        for (a, b) in self.grad.data.iter_mut().zip(&other.grad.data) {
            *a += w * b;
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Masked L1.
///
/// With `mask_pred` the mean runs over masked pixels only; otherwise over all
/// pixels against the masked ground truth.
pub fn l1_masked(pred: &Image, gt: &Image, mask: &Mask, mask_pred: bool) -> Result<Loss> {
    pred.check_shape(gt)?;
    mask.check_shape(pred)?;
    let ch = pred.channels;
    let mut out = Loss::zero(pred);
    if mask_pred {
        let n = mask.count();
        if n == 0 {
            log::warn!("l1 over an empty mask; returning 0");
            return Ok(out);
        }
        let norm = 1.0 / (n * ch) as f64;
        for (p, m) in mask.data.iter().enumerate() {
            if *m == 0.0 {
                continue;
            }
            for c in 0..ch {
                let i = p * ch + c;
                let d = pred.data[i] - gt.data[i];
                out.value += d.abs() * norm;
                out.grad.data[i] = sign(d) * norm;
            }
        }
    } else {
        let norm = 1.0 / pred.data.len() as f64;
        for (p, m) in mask.data.iter().enumerate() {
            for c in 0..ch {
                let i = p * ch + c;
                let d = pred.data[i] - gt.data[i] * m;
                out.value += d.abs() * norm;
                out.grad.data[i] = sign(d) * norm;
            }
        }
    }
    Ok(out)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian window; shrinks for images narrower than the default.
fn ssim_kernel(width: usize, height: usize) -> Vec<f64> {
    let mut size = SSIM_WINDOW.min(width).min(height);
    if size % 2 == 0 {
        size -= 1;
    }
    let sigma = SSIM_SIGMA * size as f64 / SSIM_WINDOW as f64;
    let half = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - half;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Valid-region separable filtering of a single-channel plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + j) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `ow × oh` map back to `w × h`.
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for (j, kv) in k.iter().enumerate() {
                tmp[(y + j) * ow + x] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                out[y * w + x + i] += kv * v;
            }
        }
    }
    out
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(img.channels).copied().collect()
}

/// Mean local SSIM and, when requested, its gradient w.r.t. `a`.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    a.check_shape(b)?;
    let (w, h) = (a.width, a.height);
    let k = ssim_kernel(w, h);
    let n = k.len();
    let valid = ((w + 1 - n) * (h + 1 - n)) as f64;
    let norm = 1.0 / (valid * a.channels as f64);
    let mut total = 0.0;
    let mut grad = want_grad.then(|| a.zeros_like());
    for c in 0..a.channels {
        let x = channel(a, c);
        let y = channel(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, w, h, &k);
        let my = filter_valid(&y, w, h, &k);
        let sxx = filter_valid(&xx, w, h, &k);
        let syy = filter_valid(&yy, w, h, &k);
        let sxy = filter_valid(&xy, w, h, &k);
        let m = mx.len();
        let mut d_mx = vec![0.0; m];
        let mut d_sxx = vec![0.0; m];
        let mut d_sxy = vec![0.0; m];
        for i in 0..m {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            let a1 = 2.0 * ux * uy + C1;
            let a2 = 2.0 * cxy + C2;
            let b1 = ux * ux + uy * uy + C1;
            let b2 = vx + vy + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s * norm;
            if want_grad {
                // partials w.r.t. (ux, vx, cxy) holding the others fixed
                let ds_dux = (2.0 * uy * a2) / (b1 * b2) - s * 2.0 * ux / b1;
                let ds_dvx = -s / b2;
                let ds_dcxy = 2.0 * a1 / (b1 * b2);
                // vx = sxx − ux², cxy = sxy − ux·uy
                d_sxx[i] = ds_dvx * norm;
                d_sxy[i] = ds_dcxy * norm;
                d_mx[i] = (ds_dux - 2.0 * ux * ds_dvx - uy * ds_dcxy) * norm;
            }
        }
        if let Some(g) = grad.as_mut() {
            let gm = filter_valid_adjoint(&d_mx, w, h, &k);
            let gs = filter_valid_adjoint(&d_sxx, w, h, &k);
            let gc = filter_valid_adjoint(&d_sxy, w, h, &k);
            for p in 0..w * h {
                g.data[p * a.channels + c] = gm[p] + 2.0 * x[p] * gs[p] + y[p] * gc[p];
            }
        }
    }
    Ok((total, grad))
}

/// Mean SSIM over valid windows and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient w.r.t. the first argument.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (v, g) = ssim_impl(a, b, true)?;
    Ok((v, g.expect("requested")))
}

/// `(1 − SSIM)/2` with its gradient w.r.t. `a`.
pub fn dssim(a: &Image, b: &Image) -> Result<Loss> {
    let (s, mut g) = ssim_with_grad(a, b)?;
    for v in &mut g.data {
        *v *= -0.5;
    }
    Ok(Loss {
        value: (1.0 - s) / 2.0,
        grad: g,
    })
}

/// Masked L1 on the static region plus D-SSIM of both images masked by `M`.
pub fn static_loss(pred: &Image, gt: &Image, mask: &Mask, w: &LossWeights) -> Result<Loss> {
    let mut out = l1_masked(pred, gt, mask, true)?;
    if w.ssim > 0.0 {
        let mut d = dssim(&pred.masked(mask), &gt.masked(mask))?;
        d.grad = d.grad.masked(mask);
        out.add_scaled(&d, w.ssim);
    }
    Ok(out)
}

/// Asymmetric dynamic loss: the prediction stays unmasked, the ground truth
/// keeps only the dynamic region.
pub fn dynamic_loss(pred: &Image, gt: &Image, mask: &Mask, w: &LossWeights) -> Result<Loss> {
    let dyn_mask = mask.inverted();
    let mut out = l1_masked(pred, gt, &dyn_mask, false)?;
    if w.ssim > 0.0 {
        let d = dssim(pred, &gt.masked(&dyn_mask))?;
        out.add_scaled(&d, w.ssim);
    }
    Ok(out)
}

/// Unmasked L1 + D-SSIM against the full frame.
pub fn photometric_loss(pred: &Image, gt: &Image, w: &LossWeights) -> Result<Loss> {
    let full = Mask::full(pred.width, pred.height);
    let mut out = l1_masked(pred, gt, &full, true)?;
    if w.ssim > 0.0 {
        out.add_scaled(&dssim(pred, gt)?, w.ssim);
    }
    Ok(out)
}

/// `λ · mean over M of |D̂ − D_gt|`.
pub fn depth_loss(pred: &Image, gt: &Image, mask: &Mask, lambda: f64) -> Result<Loss> {
    let mut l = l1_masked(pred, gt, mask, true)?;
    l.value *= lambda;
    for v in &mut l.grad.data {
        *v *= lambda;
    }
    Ok(l)
}

/// Least-squares `(a, b)` minimizing `Σ_M (a·D̂ + b − D_gt)²`.
pub fn align_depth(pred: &Image, gt: &Image, mask: &Mask) -> Result<(f64, f64)> {
    align_depth_many(&[(pred, gt, mask)])
}

/// [`align_depth`] pooled over several frames.
pub fn align_depth_many(frames: &[(&Image, &Image, &Mask)]) -> Result<(f64, f64)> {
    let (mut n, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (pred, gt, mask) in frames {
        pred.check_shape(gt)?;
        mask.check_shape(pred)?;
        for (p, m) in mask.data.iter().enumerate() {
            if *m == 0.0 {
                continue;
            }
            let (x, y) = (pred.data[p], gt.data[p]);
            n += 1.0;
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
        }
    }
    if n == 0.0 {
        return Ok((1.0, 0.0));
    }
    let var = sxx / n - (sx / n) * (sx / n);
    let spread = (sxx / n).abs().max(1.0);
    if n < 2.0 || var <= 1e-12 * spread {
        return Ok((1.0, (sy - sx) / n));
    }
    let a = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let b = (sy - a * sx) / n;
    Ok((a, b))
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_shape(b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64)
}

/// Peak signal-to-noise ratio for images in `[0, 1]`, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        100.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(100.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize, f: impl Fn(usize, usize, usize) -> f64) -> Image {
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data.push(f(x, y, c));
                }
            }
        }
        Image::new(w, h, 3, data).unwrap()
    }

    fn half_mask(w: usize, h: usize) -> Mask {
        Mask::new(w, h, (0..w * h).map(|p| if p % w < w / 2 { 1.0 } else { 0.0 }).collect()).unwrap()
    }

    #[test]
    fn l1_examples() {
        let a = img(8, 8, |x, y, c| ((x * 3 + y * 5 + c) % 7) as f64 / 7.0);
        assert_eq!(l1_masked(&a, &a, &half_mask(8, 8), true).unwrap().value, 0.0);
        let ones = Image::filled(8, 8, 3, 1.0);
        let zeros = Image::filled(8, 8, 3, 0.0);
        let l = l1_masked(&ones, &zeros, &half_mask(8, 8), false).unwrap();
        assert!((l.value - 1.0).abs() < 1e-12);
        assert_eq!(l1_masked(&ones, &zeros, &Mask::empty(8, 8), true).unwrap().value, 0.0);
    }

    #[test]
    fn ssim_identical_and_constant() {
        let a = img(20, 17, |x, y, c| ((x * 7 + y * 3 + c * 5) % 11) as f64 / 11.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let p = Image::filled(16, 16, 3, 0.5);
        let q = Image::filled(16, 16, 3, 0.6);
        let want = (2.0 * 0.5 * 0.6 + C1) / (0.25 + 0.36 + C1);
        assert!((ssim(&p, &q).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_inverted_texture_is_low() {
        let a = img(24, 24, |x, y, c| (((x / 3 + y / 2 + c) % 4) as f64) / 3.0);
        let b = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &b).unwrap() < 0.5);
    }

    #[test]
    fn ssim_small_image_uses_shrunken_window() {
        let a = img(6, 9, |x, y, c| ((x + 2 * y + c) % 5) as f64 / 5.0);
        let b = a.map(|v| v * 0.9);
        let s = ssim(&a, &b).unwrap();
        assert!(s.is_finite() && s < 1.0 && s > 0.5);
    }

    #[test]
    fn loss_zero_cases() {
        let w = LossWeights::default();
        let g = img(16, 16, |x, y, c| ((x * y + c) % 9) as f64 / 9.0);
        let m = half_mask(16, 16);
        assert!(static_loss(&g, &g, &m, &w).unwrap().value.abs() < 1e-15);
        let other = g.map(|v| 1.0 - v);
        assert!(static_loss(&other, &g, &Mask::empty(16, 16), &w).unwrap().value.abs() < 1e-15);
        let target = g.masked(&m.inverted());
        assert!(dynamic_loss(&target, &g, &m, &w).unwrap().value.abs() < 1e-15);
        // matching the ground truth inside the static region is still penalized
        assert!(dynamic_loss(&g, &g, &m, &w).unwrap().value > 0.0);
    }

    #[test]
    fn depth_schedule_and_offset() {
        let w = LossWeights::default();
        assert_eq!(w.depth_lambda(0, 500), w.depth_initial);
        assert!((w.depth_lambda(500, 500) - 0.01 * w.depth_initial).abs() < 1e-9);
        let d = Image::filled(4, 4, 1, 2.0);
        let e = Image::filled(4, 4, 1, 3.0);
        let l = depth_loss(&d, &e, &Mask::full(4, 4), w.depth_lambda(0, 500)).unwrap();
        assert!((l.value - w.depth_initial).abs() < 1e-15);
        assert_eq!(depth_loss(&d, &e, &Mask::empty(4, 4), 1.0).unwrap().value, 0.0);
    }

    #[test]
    fn align_examples() {
        let d = Image::new(3, 2, 1, vec![1.0, 2.0, 4.0, 5.0, 7.5, 9.0]).unwrap();
        let m = Mask::full(3, 2);
        let (a, b) = align_depth(&d, &d, &m).unwrap();
        assert!((a - 1.0).abs() < 1e-12 && b.abs() < 1e-12);
        let pred = d.map(|v| 2.0 * v - 3.0);
        let (a, b) = align_depth(&pred, &d, &m).unwrap();
        assert!((a - 0.5).abs() < 1e-12 && (b - 1.5).abs() < 1e-12);
        let flat = Image::filled(3, 2, 1, 4.0);
        let (a, b) = align_depth(&flat, &d, &m).unwrap();
        assert_eq!(a, 1.0);
        assert!((b - (28.5 / 6.0 - 4.0)).abs() < 1e-12);
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, 3, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }
}
