//! PSNR, SSIM and table emitters.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5), constants `(0.01)^2` and
//! `(0.03)^2` for a unit dynamic range, and only windows that lie fully inside the
//! image. The value is averaged over windows and channels. `ssim_backward` gives
//! its exact gradient with respect to the first image.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::AttributeImage;

pub const PSNR_SENTINEL: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(a: &AttributeImage, b: &AttributeImage) -> Result<f64> {
    a.check_shape(b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub fn psnr(a: &AttributeImage, b: &AttributeImage) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m < 1e-10 { PSNR_SENTINEL } else { -10.0 * m.log10() })
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Plane of one channel, row-major.
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn of(img: &AttributeImage, c: usize, f: impl Fn(f64) -> f64) -> Plane {
        let ch = img.channels();
        Plane {
            w: img.width(),
            h: img.height(),
            v: img.data().iter().skip(c).step_by(ch).map(|&x| f(x)).collect(),
        }
    }

    fn product(a: &AttributeImage, b: &AttributeImage, c: usize) -> Plane {
        let ch = a.channels();
        Plane {
            w: a.width(),
            h: a.height(),
            v: a.data()
                .iter()
                .zip(b.data())
                .skip(c)
                .step_by(ch)
                .map(|(x, y)| x * y)
                .collect(),
        }
    }
}

/// Windowed weighted sums over every fully-contained window.
fn filter_valid(p: &Plane, g: &[f64; SSIM_WINDOW]) -> Plane {
    let k = SSIM_WINDOW;
    let (ow, oh) = (p.w + 1 - k, p.h + 1 - k);
    let mut tmp = vec![0.0; ow * p.h];
    for y in 0..p.h {
        let row = &p.v[y * p.w..(y + 1) * p.w];
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| g[i] * row[x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    Plane { w: ow, h: oh, v: out }
}

/// Adjoint of `filter_valid`: spreads each window value back over its footprint.
fn filter_adjoint(m: &Plane, w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let mut tmp = vec![0.0; m.w * h];
    for y in 0..m.h {
        for x in 0..m.w {
            let v = m.v[y * m.w + x];
            for i in 0..k {
                tmp[(y + i) * m.w + x] += g[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..m.w {
            let v = tmp[y * m.w + x];
            for i in 0..k {
                out[y * w + x + i] += g[i] * v;
            }
        }
    }
    out
}

fn check_ssim_inputs(a: &AttributeImage, b: &AttributeImage) -> Result<()> {
    a.check_shape(b)?;
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width(),
            a.height()
        )));
    }
    Ok(())
}

struct Moments {
    mx: Plane,
    my: Plane,
    exx: Plane,
    eyy: Plane,
    exy: Plane,
}

fn moments(a: &AttributeImage, b: &AttributeImage, c: usize, g: &[f64; SSIM_WINDOW]) -> Moments {
    Moments {
        mx: filter_valid(&Plane::of(a, c, |v| v), g),
        my: filter_valid(&Plane::of(b, c, |v| v), g),
        exx: filter_valid(&Plane::of(a, c, |v| v * v), g),
        eyy: filter_valid(&Plane::of(b, c, |v| v * v), g),
        exy: filter_valid(&Plane::product(a, b, c), g),
    }
}

struct WindowTerms {
    s: f64,
    a1: f64,
    a2: f64,
    b1: f64,
    b2: f64,
}

fn window_terms(mx: f64, my: f64, exx: f64, eyy: f64, exy: f64) -> WindowTerms {
    let a1 = 2.0 * mx * my + SSIM_C1;
    let a2 = 2.0 * (exy - mx * my) + SSIM_C2;
    let b1 = mx * mx + my * my + SSIM_C1;
    let b2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2;
    WindowTerms {
        s: a1 * a2 / (b1 * b2),
        a1,
        a2,
        b1,
        b2,
    }
}

pub fn ssim(a: &AttributeImage, b: &AttributeImage) -> Result<f64> {
    check_ssim_inputs(a, b)?;
    let g = gaussian_taps();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels() {
        let m = moments(a, b, c, &g);
        for i in 0..m.mx.v.len() {
            total += window_terms(m.mx.v[i], m.my.v[i], m.exx.v[i], m.eyy.v[i], m.exy.v[i]).s;
        }
        count += m.mx.v.len();
    }
    Ok(total / count as f64)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_backward(a: &AttributeImage, b: &AttributeImage) -> Result<(f64, AttributeImage)> {
    check_ssim_inputs(a, b)?;
    let g = gaussian_taps();
    let (w, h, ch) = a.shape();
    let windows = (w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW);
    let norm = 1.0 / (windows * ch) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; a.len()];
    for c in 0..ch {
        let m = moments(a, b, c, &g);
        let n = m.mx.v.len();
        let mut g_mu = vec![0.0; n];
        let mut g_exx = vec![0.0; n];
        let mut g_exy = vec![0.0; n];
        for i in 0..n {
            let (mx, my) = (m.mx.v[i], m.my.v[i]);
            let t = window_terms(mx, my, m.exx.v[i], m.eyy.v[i], m.exy.v[i]);
            total += t.s;
            // derivatives of S with respect to the raw moments mu_x, E[x^2], E[xy]
            g_mu[i] = norm * t.s * (2.0 * my / t.a1 - 2.0 * my / t.a2 - 2.0 * mx / t.b1 + 2.0 * mx / t.b2);
            g_exx[i] = -norm * t.s / t.b2;
            g_exy[i] = norm * t.s * 2.0 / t.a2;
        }
        let plane = |v: Vec<f64>| Plane {
            w: m.mx.w,
            h: m.mx.h,
            v,
        };
        let d_mu = filter_adjoint(&plane(g_mu), w, h, &g);
        let d_exx = filter_adjoint(&plane(g_exx), w, h, &g);
        let d_exy = filter_adjoint(&plane(g_exy), w, h, &g);
        for p in 0..w * h {
            let x = a.data()[p * ch + c];
            let y = b.data()[p * ch + c];
            grad[p * ch + c] = d_mu[p] + 2.0 * x * d_exx[p] + y * d_exy[p];
        }
    }
    Ok((total * norm, a.with_data(grad)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetric {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scene: String,
    pub variant: String,
    pub seed: u64,
    pub views: Vec<ViewMetric>,
    pub mean_psnr: f64,
    pub median_psnr: f64,
    pub mean_ssim: f64,
    pub median_ssim: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

impl MetricReport {
    /// Scores `predicted[i]` against `reference[i]` for every view.
    pub fn evaluate(
        scene: impl Into<String>,
        variant: impl Into<String>,
        seed: u64,
        predicted: &[AttributeImage],
        reference: &[AttributeImage],
    ) -> Result<Self> {
        if predicted.len() != reference.len() {
            return Err(Error::shape(
                format!("{} reference images", reference.len()),
                format!("{} predicted images", predicted.len()),
            ));
        }
        let views = predicted
            .iter()
            .zip(reference)
            .enumerate()
            .map(|(view, (p, r))| {
                Ok(ViewMetric {
                    view,
                    psnr: psnr(p, r)?,
                    ssim: ssim(p, r)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_views(scene, variant, seed, views))
    }

    pub fn from_views(scene: impl Into<String>, variant: impl Into<String>, seed: u64, views: Vec<ViewMetric>) -> Self {
        let p: Vec<f64> = views.iter().map(|v| v.psnr).collect();
        let s: Vec<f64> = views.iter().map(|v| v.ssim).collect();
        Self {
            scene: scene.into(),
            variant: variant.into(),
            seed,
            mean_psnr: mean(&p),
            median_psnr: median(&p),
            mean_ssim: mean(&s),
            median_ssim: median(&s),
            views,
        }
    }
}

/// One row per view of every report.
pub fn reports_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("scene,variant,seed,view,psnr,ssim\n");
    for r in reports {
        for v in &r.views {
            writeln!(out, "{},{},{},{},{:.6},{:.6}", r.scene, r.variant, r.seed, v.view, v.psnr, v.ssim)
                .expect("string write");
        }
    }
    out
}

/// Generic CSV table; cells are written as given.
pub fn table_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

pub fn table_markdown(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = format!("| {} |\n", header.join(" | "));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for r in rows {
        out.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    out
}
