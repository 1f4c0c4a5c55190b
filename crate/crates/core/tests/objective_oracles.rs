use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitgs::img::{Image, Mask};
use splitgs::objectives::{
    align_depth, depth_loss, dynamic_loss, l1_masked, photometric_loss, psnr, ssim, static_loss,
    Loss, LossWeights,
};

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, ch: usize) -> Image {
    Image::new(w, h, ch, (0..w * h * ch).map(|_| rng.random()).collect()).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Mask {
    Mask::new(w, h, (0..w * h).map(|_| if rng.random_bool(0.6) { 1.0 } else { 0.0 }).collect()).unwrap()
}

/// Plain 2-D windowed SSIM with an explicit (non-separable) kernel.
fn reference_ssim(a: &Image, b: &Image) -> f64 {
    let n = 11usize.min(a.width).min(a.height);
    let n = if n % 2 == 0 { n - 1 } else { n };
    let sigma = 1.5 * n as f64 / 11.0;
    let half = (n / 2) as f64;
    let mut k2 = vec![vec![0.0; n]; n];
    let mut s = 0.0;
    for (i, row) in k2.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - half, j as f64 - half);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            s += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let mut count = 0;
    for c in 0..a.channels {
        for y0 in 0..=a.height - n {
            for x0 in 0..=a.width - n {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..n {
                    for i in 0..n {
                        let wgt = k2[j][i] / s;
                        let p = a.at(x0 + i, y0 + j, c);
                        let q = b.at(x0 + i, y0 + j, c);
                        mx += wgt * p;
                        my += wgt * q;
                        xx += wgt * p * p;
                        yy += wgt * q * q;
                        xy += wgt * p * q;
                    }
                }
                let vx = xx - mx * mx;
                let vy = yy - my * my;
                let cv = xy - mx * my;
                total += (2.0 * mx * my + c1) * (2.0 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_direct_windowed_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (w, h) in [(16, 16), (23, 14), (7, 9)] {
        let a = random_image(&mut rng, w, h, 3);
        let b = a.map(|v| (v * 0.7 + 0.1).min(1.0));
        let got = ssim(&a, &b).unwrap();
        let want = reference_ssim(&a, &b);
        assert!((got - want).abs() < 1e-12, "{w}×{h}: {got} vs {want}");
    }
}

#[test]
fn l1_matches_elementwise_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_image(&mut rng, 13, 9, 3);
    let b = random_image(&mut rng, 13, 9, 3);
    let m = random_mask(&mut rng, 13, 9);
    let (mut s, mut n) = (0.0, 0);
    let mut all = 0.0;
    for p in 0..13 * 9 {
        for c in 0..3 {
            let i = p * 3 + c;
            if m.data[p] == 1.0 {
                s += (a.data[i] - b.data[i]).abs();
                n += 1;
            }
            all += (a.data[i] - b.data[i] * m.data[p]).abs();
        }
    }
    assert!((l1_masked(&a, &b, &m, true).unwrap().value - s / n as f64).abs() < 1e-12);
    assert!((l1_masked(&a, &b, &m, false).unwrap().value - all / (13.0 * 9.0 * 3.0)).abs() < 1e-12);
}

#[test]
fn dynamic_loss_matches_elementwise_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w = LossWeights::default();
    let pred = random_image(&mut rng, 16, 12, 3);
    let gt = random_image(&mut rng, 16, 12, 3);
    let m = random_mask(&mut rng, 16, 12);
    let target = gt.masked(&m.inverted());
    let l1: f64 = pred.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum::<f64>()
        / pred.data.len() as f64;
    let want = l1 + w.ssim * (1.0 - reference_ssim(&pred, &target)) / 2.0;
    assert!((dynamic_loss(&pred, &gt, &m, &w).unwrap().value - want).abs() < 1e-12);
}

#[test]
fn handcrafted_static_loss() {
    // 8×8 checkerboard against a shifted copy, left half masked in
    let w = LossWeights::default();
    let board = |off: usize| {
        let data = (0..64)
            .flat_map(|p| {
                let v = if ((p % 8) + (p / 8) + off) % 2 == 0 { 0.8 } else { 0.2 };
                [v, v, v]
            })
            .collect();
        Image::new(8, 8, 3, data).unwrap()
    };
    let pred = board(0);
    let gt = board(1);
    let m = Mask::new(8, 8, (0..64).map(|p| if p % 8 < 4 { 1.0 } else { 0.0 }).collect()).unwrap();
    let l1 = 0.6; // every masked pixel differs by exactly 0.6
    let want = l1 + w.ssim * (1.0 - reference_ssim(&pred.masked(&m), &gt.masked(&m))) / 2.0;
    assert!((static_loss(&pred, &gt, &m, &w).unwrap().value - want).abs() < 1e-12);
}

fn check_gradient(f: impl Fn(&Image) -> Loss, x: &Image) {
    let an = f(x);
    let h = 1e-6;
    let mut checked = 0;
    for i in (0..x.data.len()).step_by(3) {
        let mut p = x.clone();
        let mut m = x.clone();
        p.data[i] += h;
        m.data[i] -= h;
        let fd = (f(&p).value - f(&m).value) / (2.0 * h);
        let a = an.grad.data[i];
        if a.abs() > 1e-8 {
            let rel = (fd - a).abs() / a.abs();
            assert!(rel < 1e-4, "entry {i}: fd {fd} analytic {a}");
            checked += 1;
        } else {
            assert!(fd.abs() < 1e-7, "entry {i}: fd {fd} analytic {a}");
        }
    }
    assert!(checked > 10);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = LossWeights {
        ssim: 0.7,
        ..Default::default()
    };
    let pred = random_image(&mut rng, 14, 13, 3);
    let gt = random_image(&mut rng, 14, 13, 3);
    let m = random_mask(&mut rng, 14, 13);
    check_gradient(|x| static_loss(x, &gt, &m, &w).unwrap(), &pred);
    check_gradient(|x| dynamic_loss(x, &gt, &m, &w).unwrap(), &pred);
    check_gradient(|x| photometric_loss(x, &gt, &w).unwrap(), &pred);
    let d = random_image(&mut rng, 14, 13, 1).map(|v| v * 5.0 + 1.0);
    let dg = random_image(&mut rng, 14, 13, 1).map(|v| v * 5.0 + 1.0);
    check_gradient(|x| depth_loss(x, &dg, &m, 0.3).unwrap(), &d);
}

#[test]
fn alignment_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pred = random_image(&mut rng, 10, 10, 1).map(|v| v * 4.0 + 1.0);
    let gt = Image::new(
        10,
        10,
        1,
        pred.data.iter().map(|v| 1.7 * v - 0.4 + rng.random_range(-0.05..0.05)).collect(),
    )
    .unwrap();
    let m = random_mask(&mut rng, 10, 10);
    // solve the 2×2 system [Σx² Σx; Σx n][a b]ᵀ = [Σxy Σy]ᵀ by Cramer's rule
    let pts: Vec<(f64, f64)> = (0..100).filter(|p| m.data[*p] == 1.0).map(|p| (pred.data[p], gt.data[p])).collect();
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let det = sxx * n - sx * sx;
    let a_ref = (sxy * n - sx * sy) / det;
    let b_ref = (sxx * sy - sx * sxy) / det;
    let (a, b) = align_depth(&pred, &gt, &m).unwrap();
    assert!((a - a_ref).abs() < 1e-9 && (b - b_ref).abs() < 1e-9);
}

#[test]
fn psnr_matches_direct_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_image(&mut rng, 9, 7, 3);
    let b = random_image(&mut rng, 9, 7, 3);
    let mse: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64;
    assert!((psnr(&a, &b).unwrap() - (-10.0 * mse.log10())).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn losses_are_non_negative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = LossWeights::default();
        let a = random_image(&mut rng, 12, 12, 3);
        let b = random_image(&mut rng, 12, 12, 3);
        let m = random_mask(&mut rng, 12, 12);
        prop_assert!(static_loss(&a, &b, &m, &w).unwrap().value >= 0.0);
        prop_assert!(dynamic_loss(&a, &b, &m, &w).unwrap().value >= 0.0);
        prop_assert!(photometric_loss(&a, &b, &w).unwrap().value >= 0.0);
    }

    #[test]
    fn masking_the_dynamic_prediction_lowers_its_loss(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = LossWeights { ssim: 0.0, ..Default::default() };
        let a = random_image(&mut rng, 12, 12, 3).map(|v| v * 0.9 + 0.05);
        let b = random_image(&mut rng, 12, 12, 3);
        let m = random_mask(&mut rng, 12, 12);
        prop_assume!(m.count() > 0);
        let raw = dynamic_loss(&a, &b, &m, &w).unwrap().value;
        let masked = dynamic_loss(&a.masked(&m.inverted()), &b, &m, &w).unwrap().value;
        prop_assert!(masked < raw);
    }
}
