//! Depth-sorted splatting of Gaussian scenes and its analytic derivatives.
//!
//! Every Gaussian is projected with the local affine (EWA) approximation of the
//! pinhole camera, giving a 2D mean and covariance per fragment. Pixels then
//! composite fragments front to back:
//!
//! ```text
//! alpha_i = min(eta_i * k(m_i), ALPHA_MAX),   m_i = (p - mean_i)^T cov_i^-1 (p - mean_i)
//! out(p)  = sum_i alpha_i * v_i * prod_{j<i} (1 - alpha_j)
//! ```
//!
//! `k(m)` is `exp(-m/2)` truncated at the 3-sigma ellipse (`m = 9`). The last
//! half-sigma before the cutoff is rolled off with a quintic smoothstep so that
//! `k` stays twice differentiable; without it the finite-difference gradient
//! checks would see jumps wherever a pixel crosses the ellipse boundary.
//!
//! Work is split into fixed blocks of rows. Gradients are reduced block by block
//! in block order, so results do not depend on the worker count.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::AttributeImage;
use crate::scene::{quat_norm, quat_to_matrix, CameraView, GaussianScene};

/// Added to every projected covariance, in pixels squared.
pub const AA_FLOOR: f64 = 0.3;
/// Compositing stops once transmittance falls below this.
pub const T_MIN: f64 = 1e-4;
pub const ALPHA_MAX: f64 = 0.999;
/// Squared Mahalanobis radius of the truncation ellipse (3 sigma).
pub const CUTOFF_M: f64 = 9.0;
/// Start of the smooth roll-off (2.5 sigma).
pub const TAPER_M: f64 = 6.25;

const ROW_BLOCK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SplatFragment {
    pub index: usize,
    pub eta: f64,
    pub depth: f64,
    pub mean: [f64; 2],
    /// Projected covariance `[xx, xy, yy]` including the anti-alias floor.
    pub cov: [f64; 3],
    /// Inverse covariance `[xx, xy, yy]`.
    pub conic: [f64; 3],
    /// Inclusive pixel bounds `[x0, x1, y0, y1]` of the 3-sigma ellipse, clipped to the image.
    pub bounds: [usize; 4],
}

/// Kernel value and its derivative with respect to `m`.
#[inline]
pub fn kernel(m: f64) -> (f64, f64) {
    if m >= CUTOFF_M {
        return (0.0, 0.0);
    }
    let e = (-0.5 * m).exp();
    if m <= TAPER_M {
        return (e, -0.5 * e);
    }
    let width = CUTOFF_M - TAPER_M;
    let u = (m - TAPER_M) / width;
    let u2 = u * u;
    let u3 = u2 * u;
    let w = 1.0 - u3 * (10.0 - 15.0 * u + 6.0 * u2);
    let dw = -30.0 * u2 * (1.0 - u) * (1.0 - u) / width;
    (e * w, e * (dw - 0.5 * w))
}

struct Camera {
    w: Matrix3<f64>,
    t: Vector3<f64>,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl Camera {
    fn new(view: &CameraView) -> Self {
        Self {
            w: view.rotation_matrix(),
            t: Vector3::from(view.translation),
            fx: view.fx,
            fy: view.fy,
            cx: view.cx,
            cy: view.cy,
        }
    }
}

/// Intermediate projection state of one Gaussian.
struct Projected {
    pc: Vector3<f64>,
    jac: Matrix2x3<f64>,
    m_cam: Matrix3<f64>,
    rot: Matrix3<f64>,
    qhat: [f64; 4],
    qnorm: f64,
    mean: [f64; 2],
    cov: Matrix2<f64>,
    conic: Matrix2<f64>,
}

fn project_one(cam: &Camera, mu: [f64; 3], q: [f64; 4], s: [f64; 3]) -> Option<Projected> {
    let pc = cam.w * Vector3::from(mu) + cam.t;
    let z = pc.z;
    let qnorm = quat_norm(&q);
    let qhat = [q[0] / qnorm, q[1] / qnorm, q[2] / qnorm, q[3] / qnorm];
    let rot = quat_to_matrix(qhat);
    let d = Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]));
    let sigma3 = rot * d * rot.transpose();
    let m_cam = cam.w * sigma3 * cam.w.transpose();
    let jac = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * pc.x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * pc.y / (z * z),
    );
    let cov = jac * m_cam * jac.transpose() + Matrix2::identity() * AA_FLOOR;
    let conic = cov.try_inverse()?;
    let mean = [cam.fx * pc.x / z + cam.cx, cam.fy * pc.y / z + cam.cy];
    Some(Projected {
        pc,
        jac,
        m_cam,
        rot,
        qhat,
        qnorm,
        mean,
        cov,
        conic,
    })
}

/// Projects the scene into `view`, keeping Gaussians between the clip planes whose
/// 3-sigma footprint touches the image. Sorted by depth, ties by primitive index.
pub fn project(view: &CameraView, scene: &GaussianScene) -> Vec<SplatFragment> {
    let cam = Camera::new(view);
    let mut frags = Vec::new();
    for (index, g) in scene.primitives.iter().enumerate() {
        let z = (cam.w * Vector3::from(g.mu) + cam.t).z;
        if z <= view.near || z >= view.far {
            continue;
        }
        let Some(p) = project_one(&cam, g.mu, g.q, g.s) else {
            continue;
        };
        let rx = (CUTOFF_M * p.cov[(0, 0)]).sqrt();
        let ry = (CUTOFF_M * p.cov[(1, 1)]).sqrt();
        let x0 = (p.mean[0] - rx).ceil().max(0.0);
        let x1 = (p.mean[0] + rx).floor().min(view.width as f64 - 1.0);
        let y0 = (p.mean[1] - ry).ceil().max(0.0);
        let y1 = (p.mean[1] + ry).floor().min(view.height as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            continue;
        }
        frags.push(SplatFragment {
            index,
            eta: g.eta,
            depth: z,
            mean: p.mean,
            cov: [p.cov[(0, 0)], p.cov[(0, 1)], p.cov[(1, 1)]],
            conic: [p.conic[(0, 0)], p.conic[(0, 1)], p.conic[(1, 1)]],
            bounds: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
        });
    }
    frags.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    frags
}

/// Per-row lists of fragment positions (depth order preserved).
fn row_lists(frags: &[SplatFragment], height: usize) -> Vec<Vec<u32>> {
    let mut rows = vec![Vec::new(); height];
    for (k, f) in frags.iter().enumerate() {
        for row in &mut rows[f.bounds[2]..=f.bounds[3]] {
            row.push(k as u32);
        }
    }
    rows
}

/// One fragment's contribution at one pixel.
#[derive(Clone, Copy)]
struct Hit {
    frag: u32,
    alpha: f64,
    trans: f64,
    k: f64,
    dk: f64,
    dx: f64,
    dy: f64,
    clamped: bool,
}

/// Front-to-back walk over the fragments covering pixel `(x, y)`.
#[inline]
fn walk_pixel(frags: &[SplatFragment], row: &[u32], x: usize, y: usize, mut visit: impl FnMut(Hit)) {
    let mut trans = 1.0;
    for &k in row {
        let f = &frags[k as usize];
        if x < f.bounds[0] || x > f.bounds[1] {
            continue;
        }
        let dx = x as f64 - f.mean[0];
        let dy = y as f64 - f.mean[1];
        let m = f.conic[0] * dx * dx + 2.0 * f.conic[1] * dx * dy + f.conic[2] * dy * dy;
        if m >= CUTOFF_M {
            continue;
        }
        let (kv, dk) = kernel(m);
        let raw = f.eta * kv;
        let clamped = raw > ALPHA_MAX;
        let alpha = raw.min(ALPHA_MAX);
        visit(Hit {
            frag: k,
            alpha,
            trans,
            k: kv,
            dk,
            dx,
            dy,
            clamped,
        });
        trans *= 1.0 - alpha;
        if trans < T_MIN {
            break;
        }
    }
}

fn check_values(scene: &GaussianScene, values: &[f64], channels: usize) -> Result<()> {
    if channels == 0 || values.len() != scene.len() * channels {
        return Err(Error::shape(
            format!("{} primitives x {} channels", scene.len(), channels),
            format!("{} values", values.len()),
        ));
    }
    Ok(())
}

/// Renders an arbitrary per-Gaussian attribute. `values` is primitive-major with
/// `channels` entries per primitive.
pub fn render_attribute(
    view: &CameraView,
    scene: &GaussianScene,
    values: &[f64],
    channels: usize,
) -> Result<AttributeImage> {
    check_values(scene, values, channels)?;
    let frags = project(view, scene);
    Ok(composite(view, &frags, values, channels))
}

fn composite(view: &CameraView, frags: &[SplatFragment], values: &[f64], channels: usize) -> AttributeImage {
    let (w, h) = (view.width, view.height);
    let rows = row_lists(frags, h);
    let mut data = vec![0.0; w * h * channels];
    data.par_chunks_mut(w * channels)
        .enumerate()
        .for_each(|(y, out)| {
            for x in 0..w {
                let px = &mut out[x * channels..(x + 1) * channels];
                walk_pixel(frags, &rows[y], x, y, |hit| {
                    let wgt = hit.alpha * hit.trans;
                    let v = &values[frags[hit.frag as usize].index * channels..][..channels];
                    for c in 0..channels {
                        px[c] += wgt * v[c];
                    }
                });
            }
        });
    AttributeImage::from_data(w, h, channels, data).expect("finite render")
}

pub fn render_color(view: &CameraView, scene: &GaussianScene) -> AttributeImage {
    let values: Vec<f64> = scene.primitives.iter().flat_map(|g| g.rgb).collect();
    render_attribute(view, scene, &values, 3).expect("color channels")
}

/// Depth map: each Gaussian carries its camera-space depth.
pub fn render_depth(view: &CameraView, scene: &GaussianScene) -> AttributeImage {
    let rot = view.rotation_matrix();
    let t = Vector3::from(view.translation);
    let values: Vec<f64> = scene
        .primitives
        .iter()
        .map(|g| (rot * Vector3::from(g.mu) + t).z)
        .collect();
    render_attribute(view, scene, &values, 1).expect("depth channel")
}

/// Accumulated opacity: each Gaussian carries the value 1.
pub fn render_opacity(view: &CameraView, scene: &GaussianScene) -> AttributeImage {
    render_attribute(view, scene, &vec![1.0; scene.len()], 1).expect("opacity channel")
}

/// Gradient of a scalar objective with respect to one primitive's parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GaussianGrad {
    pub mu: [f64; 3],
    pub q: [f64; 4],
    pub s: [f64; 3],
    pub eta: f64,
    pub rgb: [f64; 3],
}

impl GaussianGrad {
    /// Flattened as `mu, q, s, eta, rgb`.
    pub fn to_array(&self) -> [f64; 14] {
        let mut out = [0.0; 14];
        out[..3].copy_from_slice(&self.mu);
        out[3..7].copy_from_slice(&self.q);
        out[7..10].copy_from_slice(&self.s);
        out[10] = self.eta;
        out[11..].copy_from_slice(&self.rgb);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamGradients {
    pub grads: Vec<GaussianGrad>,
}

impl ParamGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            grads: vec![GaussianGrad::default(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.to_array().iter().all(|v| v.is_finite()))
    }
}

/// Derivative of `(mean_x, mean_y, conic_xx, conic_xy, conic_yy)` with respect to
/// `(mu[0..3], q[0..4], s[0..3])`, computed column by column in forward mode.
fn projection_jacobian(cam: &Camera, p: &Projected, s: [f64; 3]) -> [[f64; 10]; 5] {
    let mut out = [[0.0; 10]; 5];
    let z = p.pc.z;
    let (x, y) = (p.pc.x, p.pc.y);
    let (fx, fy) = (cam.fx, cam.fy);
    let d_diag = Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]));
    let mut put = |col: usize, dmean: [f64; 2], dcov: Matrix2<f64>| {
        let dq = -p.conic * dcov * p.conic;
        let v = [dmean[0], dmean[1], dq[(0, 0)], dq[(0, 1)], dq[(1, 1)]];
        for r in 0..5 {
            out[r][col] = v[r];
        }
    };

    for k in 0..3 {
        let dpc = cam.w.column(k).into_owned();
        let (ddx, ddy, ddz) = (dpc.x, dpc.y, dpc.z);
        let dj = Matrix2x3::new(
            -fx * ddz / (z * z),
            0.0,
            -fx * (ddx / (z * z) - 2.0 * x * ddz / (z * z * z)),
            0.0,
            -fy * ddz / (z * z),
            -fy * (ddy / (z * z) - 2.0 * y * ddz / (z * z * z)),
        );
        let a = dj * p.m_cam * p.jac.transpose();
        let dcov = a + a.transpose();
        let dmean = [
            fx * (ddx / z - x * ddz / (z * z)),
            fy * (ddy / z - y * ddz / (z * z)),
        ];
        put(k, dmean, dcov);
    }

    let dr = rotation_derivatives(p.qhat);
    let project_sigma = |ds3: Matrix3<f64>| p.jac * (cam.w * ds3 * cam.w.transpose()) * p.jac.transpose();
    for k in 0..4 {
        // tangent of the normalization q -> q/|q|
        let mut drot = Matrix3::zeros();
        for (j, drj) in dr.iter().enumerate() {
            let e = if j == k { 1.0 } else { 0.0 };
            let dqhat = (e - p.qhat[j] * p.qhat[k]) / p.qnorm;
            drot += drj * dqhat;
        }
        let a = drot * d_diag * p.rot.transpose();
        put(3 + k, [0.0, 0.0], project_sigma(a + a.transpose()));
    }
    for k in 0..3 {
        let mut dd = Matrix3::zeros();
        dd[(k, k)] = 2.0 * s[k];
        put(7 + k, [0.0, 0.0], project_sigma(p.rot * dd * p.rot.transpose()));
    }
    out
}

/// Partial derivatives of the rotation matrix with respect to `(w, x, y, z)`.
fn rotation_derivatives(q: [f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = q;
    let t = 2.0;
    [
        Matrix3::new(0.0, -t * z, t * y, t * z, 0.0, -t * x, -t * y, t * x, 0.0),
        Matrix3::new(0.0, t * y, t * z, t * y, -2.0 * t * x, -t * w, t * z, t * w, -2.0 * t * x),
        Matrix3::new(-2.0 * t * y, t * x, t * w, t * x, 0.0, t * z, -t * w, t * z, -2.0 * t * y),
        Matrix3::new(-2.0 * t * z, -t * w, t * x, t * w, -2.0 * t * z, t * y, t * x, t * y, 0.0),
    ]
}

/// Projection data needed by the backward passes.
struct Prepared {
    frags: Vec<SplatFragment>,
    rows: Vec<Vec<u32>>,
    jacobians: Vec<[[f64; 10]; 5]>,
}

fn prepare(view: &CameraView, scene: &GaussianScene) -> Prepared {
    let cam = Camera::new(view);
    let frags = project(view, scene);
    let jacobians = frags
        .iter()
        .map(|f| {
            let g = &scene.primitives[f.index];
            let p = project_one(&cam, g.mu, g.q, g.s).expect("projected before");
            projection_jacobian(&cam, &p, g.s)
        })
        .collect();
    let rows = row_lists(&frags, view.height);
    Prepared {
        frags,
        rows,
        jacobians,
    }
}

/// Per-fragment accumulator layout: 5 projection adjoints, eta, then `channels` value adjoints.
const PROJ: usize = 5;

/// Vector-Jacobian product of [`render_attribute`]: gradients of
/// `sum_p <upstream(p), rendered(p)>` with respect to geometry and opacity, plus the
/// per-primitive value adjoints (primitive-major, `channels` wide). Values are treated as
/// constants of the geometry.
pub fn backprop_attribute(
    view: &CameraView,
    scene: &GaussianScene,
    values: &[f64],
    channels: usize,
    upstream: &AttributeImage,
) -> Result<(ParamGradients, Vec<f64>)> {
    check_values(scene, values, channels)?;
    if upstream.shape() != (view.width, view.height, channels) {
        return Err(Error::shape(
            format!("{}x{}x{}", view.width, view.height, channels),
            format!("{:?}", upstream.shape()),
        ));
    }
    let prep = prepare(view, scene);
    let nf = prep.frags.len();
    let stride = PROJ + 1 + channels;
    let (w, h) = (view.width, view.height);

    let blocks: Vec<Vec<f64>> = (0..h.div_ceil(ROW_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![0.0; nf * stride];
            let mut hits: Vec<Hit> = Vec::new();
            let mut suffix = vec![0.0; channels];
            for y in b * ROW_BLOCK..((b + 1) * ROW_BLOCK).min(h) {
                for x in 0..w {
                    let g = upstream.pixel(x, y);
                    if g.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    hits.clear();
                    walk_pixel(&prep.frags, &prep.rows[y], x, y, |hit| hits.push(hit));
                    suffix.iter_mut().for_each(|v| *v = 0.0);
                    for hit in hits.iter().rev() {
                        let f = &prep.frags[hit.frag as usize];
                        let v = &values[f.index * channels..][..channels];
                        let wgt = hit.alpha * hit.trans;
                        let mut gv = 0.0;
                        let mut gs = 0.0;
                        for c in 0..channels {
                            gv += g[c] * v[c];
                            gs += g[c] * suffix[c];
                        }
                        let d_alpha = hit.trans * gv - gs / (1.0 - hit.alpha);
                        for c in 0..channels {
                            suffix[c] += wgt * v[c];
                        }
                        let a = &mut acc[hit.frag as usize * stride..][..stride];
                        for c in 0..channels {
                            a[PROJ + 1 + c] += wgt * g[c];
                        }
                        if hit.clamped {
                            continue;
                        }
                        a[PROJ] += d_alpha * hit.k;
                        let dm = d_alpha * f.eta * hit.dk;
                        let (c0, c1, c2) = (f.conic[0], f.conic[1], f.conic[2]);
                        a[0] += dm * -2.0 * (c0 * hit.dx + c1 * hit.dy);
                        a[1] += dm * -2.0 * (c1 * hit.dx + c2 * hit.dy);
                        a[2] += dm * hit.dx * hit.dx;
                        a[3] += dm * 2.0 * hit.dx * hit.dy;
                        a[4] += dm * hit.dy * hit.dy;
                    }
                }
            }
            acc
        })
        .collect();

    let mut total = vec![0.0; nf * stride];
    for block in &blocks {
        for (t, v) in total.iter_mut().zip(block) {
            *t += v;
        }
    }

    let mut grads = ParamGradients::zeros(scene.len());
    let mut value_grads = vec![0.0; scene.len() * channels];
    for (k, f) in prep.frags.iter().enumerate() {
        let a = &total[k * stride..][..stride];
        let jac = &prep.jacobians[k];
        let mut geo = [0.0; 10];
        for (col, gv) in geo.iter_mut().enumerate() {
            *gv = (0..PROJ).map(|r| a[r] * jac[r][col]).sum();
        }
        let gg = &mut grads.grads[f.index];
        gg.mu = [geo[0], geo[1], geo[2]];
        gg.q = [geo[3], geo[4], geo[5], geo[6]];
        gg.s = [geo[7], geo[8], geo[9]];
        gg.eta = a[PROJ];
        value_grads[f.index * channels..][..channels].copy_from_slice(&a[PROJ + 1..]);
    }
    Ok((grads, value_grads))
}

/// Gradient of `sum_p <upstream(p), render_color(p)>` with respect to every parameter.
pub fn backprop(view: &CameraView, scene: &GaussianScene, upstream: &AttributeImage) -> Result<ParamGradients> {
    let values: Vec<f64> = scene.primitives.iter().flat_map(|g| g.rgb).collect();
    let (mut grads, vg) = backprop_attribute(view, scene, &values, 3, upstream)?;
    for (i, g) in grads.grads.iter_mut().enumerate() {
        g.rgb = [vg[3 * i], vg[3 * i + 1], vg[3 * i + 2]];
    }
    Ok(grads)
}

/// Selects parameter groups: those entering a squared-Jacobian sum, or those a refinement trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamMask {
    pub mu: bool,
    pub q: bool,
    pub s: bool,
    pub eta: bool,
    pub rgb: bool,
}

impl ParamMask {
    pub const ALL: ParamMask = ParamMask {
        mu: true,
        q: true,
        s: true,
        eta: true,
        rgb: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.mu || self.q || self.s || self.eta || self.rgb)
    }

    fn geo_columns(&self) -> Vec<usize> {
        let mut cols = Vec::new();
        if self.mu {
            cols.extend(0..3);
        }
        if self.q {
            cols.extend(3..7);
        }
        if self.s {
            cols.extend(7..10);
        }
        cols
    }
}

impl Default for ParamMask {
    fn default() -> Self {
        ParamMask {
            mu: true,
            q: false,
            s: false,
            eta: true,
            rgb: true,
        }
    }
}

/// For every primitive, the sum over pixels, color channels and masked parameters of
/// the squared partial derivative of the color render. Zero for primitives outside the view.
pub fn per_gaussian_squared_jacobian(
    view: &CameraView,
    scene: &GaussianScene,
    mask: ParamMask,
) -> Result<Vec<f64>> {
    if mask.is_empty() {
        return Err(Error::InvalidArgument("parameter mask is empty".into()));
    }
    let prep = prepare(view, scene);
    let nf = prep.frags.len();
    let cols = mask.geo_columns();
    let (w, h) = (view.width, view.height);

    let blocks: Vec<Vec<f64>> = (0..h.div_ceil(ROW_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![0.0; nf];
            let mut hits: Vec<Hit> = Vec::new();
            for y in b * ROW_BLOCK..((b + 1) * ROW_BLOCK).min(h) {
                for x in 0..w {
                    hits.clear();
                    walk_pixel(&prep.frags, &prep.rows[y], x, y, |hit| hits.push(hit));
                    let mut suffix = [0.0; 3];
                    for hit in hits.iter().rev() {
                        let f = &prep.frags[hit.frag as usize];
                        let rgb = scene.primitives[f.index].rgb;
                        let wgt = hit.alpha * hit.trans;
                        // d pixel_c / d alpha, squared and summed over channels
                        let mut da2 = 0.0;
                        for c in 0..3 {
                            let d = hit.trans * rgb[c] - suffix[c] / (1.0 - hit.alpha);
                            da2 += d * d;
                            suffix[c] += wgt * rgb[c];
                        }
                        let mut sum = 0.0;
                        if mask.rgb {
                            sum += 3.0 * wgt * wgt;
                        }
                        if !hit.clamped {
                            let mut dalpha2 = 0.0;
                            if mask.eta {
                                dalpha2 += hit.k * hit.k;
                            }
                            if !cols.is_empty() {
                                let dm = f.eta * hit.dk;
                                let (c0, c1, c2) = (f.conic[0], f.conic[1], f.conic[2]);
                                let dm5 = [
                                    -2.0 * (c0 * hit.dx + c1 * hit.dy),
                                    -2.0 * (c1 * hit.dx + c2 * hit.dy),
                                    hit.dx * hit.dx,
                                    2.0 * hit.dx * hit.dy,
                                    hit.dy * hit.dy,
                                ];
                                let jac = &prep.jacobians[hit.frag as usize];
                                for &col in &cols {
                                    let d: f64 = (0..PROJ).map(|r| dm5[r] * jac[r][col]).sum::<f64>() * dm;
                                    dalpha2 += d * d;
                                }
                            }
                            sum += da2 * dalpha2;
                        }
                        acc[hit.frag as usize] += sum;
                    }
                }
            }
            acc
        })
        .collect();

    let mut out = vec![0.0; scene.len()];
    for block in &blocks {
        for (k, v) in block.iter().enumerate() {
            out[prep.frags[k].index] += v;
        }
    }
    Ok(out)
}
