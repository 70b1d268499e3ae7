#![allow(clippy::needless_range_loop)]
use splatfix::metrics::{psnr, reports_csv, ssim, ssim_backward, MetricReport};
use splatfix::rng::{normal, rng_for, uniform};
use splatfix::AttributeImage;

fn random_image(seed: u64, w: usize, h: usize, c: usize) -> AttributeImage {
    let mut rng = rng_for(seed, 31);
    let data = (0..w * h * c).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
    AttributeImage::from_data(w, h, c, data).unwrap()
}

/// Direct evaluation: explicit 2-D window, explicit variances, one window at a time.
fn reference_ssim(a: &AttributeImage, b: &AttributeImage) -> f64 {
    let k = 11usize;
    let mut win = vec![vec![0.0; k]; k];
    let mut total_w = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total_w += *v;
        }
    }
    let (c1, c2) = (0.0001, 0.0009);
    let mut sum = 0.0;
    let mut n = 0.0;
    for c in 0..a.channels() {
        for y0 in 0..=a.height() - k {
            for x0 in 0..=a.width() - k {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wgt = win[i][j] / total_w;
                        mx += wgt * a.get(x0 + j, y0 + i, c);
                        my += wgt * b.get(x0 + j, y0 + i, c);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wgt = win[i][j] / total_w;
                        let dx = a.get(x0 + j, y0 + i, c) - mx;
                        let dy = b.get(x0 + j, y0 + i, c) - my;
                        vx += wgt * dx * dx;
                        vy += wgt * dy * dy;
                        cxy += wgt * dx * dy;
                    }
                }
                sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1.0;
            }
        }
    }
    sum / n
}

#[test]
fn ssim_matches_direct_formula() {
    for seed in 0..5 {
        let a = random_image(seed, 19, 14, 3);
        let b = a.zip_map(&random_image(seed + 100, 19, 14, 3), |x, y| 0.7 * x + 0.3 * y).unwrap();
        let fast = ssim(&a, &b).unwrap();
        let slow = reference_ssim(&a, &b);
        assert!((fast - slow).abs() < 1e-6, "seed {seed}: {fast} vs {slow}");
    }
}

#[test]
fn ssim_identity_symmetry_and_inversion() {
    for seed in 0..5 {
        let a = random_image(seed, 16, 16, 3);
        let b = random_image(seed + 50, 16, 16, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-7);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < ssim(&a, &a).unwrap());
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }
}

#[test]
fn psnr_decreases_with_noise() {
    let a = random_image(1, 24, 24, 3);
    let mut rng = rng_for(2, 2);
    let eps: Vec<f64> = (0..a.len()).map(|_| normal(&mut rng)).collect();
    let mut last = f64::INFINITY;
    for scale in [0.001, 0.01, 0.03, 0.1, 0.3] {
        let b = a.with_data(a.data().iter().zip(&eps).map(|(x, e)| x + scale * e).collect());
        let p = psnr(&a, &b).unwrap();
        assert!(p < last);
        last = p;
    }
}

#[test]
fn ssim_gradient_matches_central_differences() {
    let h = 1e-5;
    for seed in 0..3 {
        let a = random_image(seed, 16, 16, 3);
        let b = random_image(seed + 7, 16, 16, 3);
        let (value, grad) = ssim_backward(&a, &b).unwrap();
        assert!((value - ssim(&a, &b).unwrap()).abs() < 1e-14);
        let mut worst: f64 = 0.0;
        for i in (0..a.len()).step_by(7) {
            let mut p = a.clone();
            p.data_mut()[i] += h;
            let mut m = a.clone();
            m.data_mut()[i] -= h;
            let fd = (ssim(&p, &b).unwrap() - ssim(&m, &b).unwrap()) / (2.0 * h);
            let an = grad.data()[i];
            worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-8));
        }
        assert!(worst < 1e-4, "seed {seed}: {worst:e}");
    }
}

#[test]
fn report_aggregates_and_csv() {
    let a = random_image(3, 12, 12, 3);
    let b = a.map(|v| (v + 0.1).min(1.0));
    let r = MetricReport::evaluate("wall", "full", 4, &[a.clone(), a.clone()], &[a.clone(), b]).unwrap();
    assert_eq!(r.views[0].psnr, 99.0);
    assert!((r.views[0].ssim - 1.0).abs() < 1e-12);
    assert!(r.mean_psnr < 99.0 && r.median_psnr == r.mean_psnr);
    let csv = reports_csv(&[r]);
    assert!(csv.starts_with("scene,variant,seed,view,psnr,ssim\nwall,full,4,0,99.000000,1.000000\n"));
}
