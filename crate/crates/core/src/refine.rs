//! 3D refinement against fixed images and training views.
//!
//! Each step renders one sampled view, maps the render through the per-view color
//! affine when the target is a generated image, scores it with
//! `(1 - lambda) * L1 + lambda * (1 - SSIM)`, backpropagates and takes one Adam
//! step per parameter group. Generated targets are down-weighted by `w_g`.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::AttributeImage;
use crate::metrics::{psnr, ssim, ssim_backward};
use crate::render::{backprop, render_color, ParamGradients, ParamMask};
use crate::rng::{rng_for, streams, SplatRng};
use crate::scene::{CameraView, GaussianScene, ViewSet};

/// Color correction `A_f * rgb + A_b` owned by one generated view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineColor {
    pub a_f: [[f64; 3]; 3],
    pub a_b: [f64; 3],
}

impl Default for AffineColor {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl AffineColor {
    pub const IDENTITY: AffineColor = AffineColor {
        a_f: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        a_b: [0.0; 3],
    };

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Row-major `A_f` followed by `A_b`.
    pub fn to_array(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            out[r * 3..r * 3 + 3].copy_from_slice(&self.a_f[r]);
        }
        out[9..].copy_from_slice(&self.a_b);
        out
    }

    pub fn from_array(v: &[f64; 12]) -> Self {
        let mut a = Self::IDENTITY;
        for r in 0..3 {
            a.a_f[r].copy_from_slice(&v[r * 3..r * 3 + 3]);
        }
        a.a_b.copy_from_slice(&v[9..]);
        a
    }
}

fn check_rgb(img: &AttributeImage) -> Result<()> {
    if img.channels() == 3 {
        Ok(())
    } else {
        Err(Error::shape("3 channels", format!("{} channels", img.channels())))
    }
}

/// Per-pixel `A_f * rgb + A_b`, unclamped.
pub fn affine_apply(img: &AttributeImage, aff: &AffineColor) -> Result<AttributeImage> {
    check_rgb(img)?;
    let mut out = img.data().to_vec();
    for px in out.chunks_exact_mut(3) {
        let v = [px[0], px[1], px[2]];
        for (o, (row, b)) in px.iter_mut().zip(aff.a_f.iter().zip(aff.a_b)) {
            *o = row[0] * v[0] + row[1] * v[1] + row[2] * v[2] + b;
        }
    }
    Ok(img.with_data(out))
}

/// Pulls an adjoint on the affine output back to the affine parameters and to the input image.
pub fn affine_backward(
    input: &AttributeImage,
    aff: &AffineColor,
    upstream: &AttributeImage,
) -> Result<([f64; 12], AttributeImage)> {
    check_rgb(input)?;
    input.check_shape(upstream)?;
    let mut g = [0.0; 12];
    let mut back = vec![0.0; input.len()];
    for ((x, u), b) in input
        .data()
        .chunks_exact(3)
        .zip(upstream.data().chunks_exact(3))
        .zip(back.chunks_exact_mut(3))
    {
        for r in 0..3 {
            for c in 0..3 {
                g[r * 3 + c] += u[r] * x[c];
                b[c] += aff.a_f[r][c] * u[r];
            }
            g[9 + r] += u[r];
        }
    }
    Ok((g, input.with_data(back)))
}

/// Pixel differences below this count as equality. Adam normalizes gradient
/// scale away, so round-off in a re-render, or targets stored as 32-bit PFM,
/// would otherwise drive full-size steps away from an exact fit.
pub const DEAD_ZONE: f64 = 1e-6;

/// `(1 - lambda) * mean|pred - target| + lambda * (1 - SSIM)` and its gradient
/// with respect to `pred`. The L1 subgradient is zero within [`DEAD_ZONE`], and
/// the whole adjoint is zero when every pixel is.
pub fn photometric_loss(
    pred: &AttributeImage,
    target: &AttributeImage,
    lambda_s: f64,
) -> Result<(f64, AttributeImage)> {
    pred.check_shape(target)?;
    if !(0.0..=1.0).contains(&lambda_s) {
        return Err(Error::InvalidArgument(format!("lambda_s {lambda_s} outside [0, 1]")));
    }
    let n = pred.len().max(1) as f64;
    let mut l1 = 0.0;
    let mut grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            l1 += d.abs();
            if d > DEAD_ZONE {
                (1.0 - lambda_s) / n
            } else if d < -DEAD_ZONE {
                -(1.0 - lambda_s) / n
            } else {
                0.0
            }
        })
        .collect();
    let mut loss = (1.0 - lambda_s) * l1 / n;
    let matched = pred.data().iter().zip(target.data()).all(|(p, t)| (p - t).abs() <= DEAD_ZONE);
    if matched {
        if lambda_s > 0.0 {
            loss += lambda_s * (1.0 - ssim(pred, target)?);
        }
        return Ok((loss, pred.with_data(vec![0.0; pred.len()])));
    }
    if lambda_s > 0.0 {
        let (s, ds) = ssim_backward(pred, target)?;
        loss += lambda_s * (1.0 - s);
        for (g, d) in grad.iter_mut().zip(ds.data()) {
            *g -= lambda_s * d;
        }
    }
    Ok((loss, pred.with_data(grad)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    /// Position rate per unit of scene extent.
    pub mu: f64,
    pub q: f64,
    pub s: f64,
    pub eta: f64,
    pub rgb: f64,
    pub affine: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            mu: 2e-4,
            q: 1e-3,
            s: 5e-3,
            eta: 5e-2,
            rgb: 2.5e-2,
            affine: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub steps: usize,
    pub lambda_s: f64,
    pub lr: LearningRates,
    /// Loss weight of generated (fixed and current) views; training views weigh 1.
    pub w_g: f64,
    /// Probability of drawing a previously fixed view on a non-current step.
    pub p_f: f64,
    /// Optimize the per-view color affine of generated targets.
    pub affine: bool,
    /// Primitive parameter groups that receive updates.
    pub trainable: ParamMask,
    pub min_scale: f64,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lambda_s: 0.2,
            lr: LearningRates::default(),
            w_g: 0.5,
            p_f: 0.25,
            affine: true,
            trainable: ParamMask::ALL,
            min_scale: 1e-4,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn check(&self) -> Result<()> {
        let lr = &self.lr;
        if [lr.mu, lr.q, lr.s, lr.eta, lr.rgb, lr.affine]
            .iter()
            .any(|v| !(*v > 0.0 && v.is_finite()))
        {
            return Err(Error::Config(format!("learning rates must be positive: {lr:?}")));
        }
        if !(0.0..=1.0).contains(&self.lambda_s) {
            return Err(Error::Config(format!("lambda_s must be in [0, 1], got {}", self.lambda_s)));
        }
        if !(self.w_g > 0.0 && self.w_g <= 1.0) {
            return Err(Error::Config(format!("w_g must be in (0, 1], got {}", self.w_g)));
        }
        if !(self.p_f > 0.0 && self.p_f < 1.0) {
            return Err(Error::Config(format!("p_f must be in (0, 1), got {}", self.p_f)));
        }
        if !(self.min_scale > 0.0) {
            return Err(Error::Config("min_scale must be positive".into()));
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Returns the update to add to the parameters; `rate(i)` scales entry `i`.
    fn step(&mut self, grad: &[f64], rate: impl Fn(usize) -> f64) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        grad.iter()
            .enumerate()
            .map(|(i, &g)| {
                self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
                self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
                let mh = self.m[i] / c1;
                let vh = self.v[i] / c2;
                -rate(i) * mh / (vh.sqrt() + ADAM_EPS)
            })
            .collect()
    }
}

/// A generated image with its color affine and the affine's optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedEntry {
    /// Trajectory index of the view this image fixes.
    pub id: usize,
    pub view: CameraView,
    pub image: AttributeImage,
    pub affine: AffineColor,
    opt: Adam,
}

/// Append-only set of generated supervision images.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FixedViewSet {
    entries: Vec<FixedEntry>,
}

impl FixedViewSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry with identity affine and returns its index.
    pub fn push(&mut self, id: usize, view: CameraView, image: AttributeImage) -> Result<usize> {
        check_rgb(&image)?;
        if (image.width(), image.height()) != (view.width, view.height) {
            return Err(Error::shape(
                format!("{}x{} image", view.width, view.height),
                format!("{}x{}", image.width(), image.height()),
            ));
        }
        self.entries.push(FixedEntry {
            id,
            view,
            image,
            affine: AffineColor::IDENTITY,
            opt: Adam::new(12),
        });
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[FixedEntry] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> Option<&FixedEntry> {
        self.entries.get(i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Current,
    Fixed,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Current => "current",
            Role::Fixed => "fixed",
        })
    }
}

/// Index into the training set (role `Train`) or the fixed set (other roles).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewChoice {
    pub role: Role,
    pub index: usize,
}

/// Whether `step` is reserved for the current view: every 3rd step in the first
/// third of the stage, every 5th in the second, every 8th in the last.
pub fn is_current_step(step: usize, total: usize) -> bool {
    let (b1, b2) = (total / 3, 2 * total / 3);
    let period = if step < b1 {
        3
    } else if step < b2 {
        5
    } else {
        8
    };
    step.is_multiple_of(period)
}

/// Picks the supervision view for one step. Off the current cadence, a fixed view
/// other than the current one is drawn with probability `p_f`, otherwise a
/// training view; an empty pool hands its mass to the other.
pub fn sample_view(
    step: usize,
    total: usize,
    train_len: usize,
    fixed_len: usize,
    current: Option<usize>,
    p_f: f64,
    rng: &mut SplatRng,
) -> Option<ViewChoice> {
    if let Some(c) = current {
        if is_current_step(step, total) {
            return Some(ViewChoice {
                role: Role::Current,
                index: c,
            });
        }
    }
    let others = fixed_len - usize::from(current.is_some());
    let pick_fixed = match (train_len, others) {
        (0, 0) => {
            return current.map(|c| ViewChoice {
                role: Role::Current,
                index: c,
            })
        }
        (0, _) => true,
        (_, 0) => false,
        _ => rng.random::<f64>() < p_f,
    };
    if pick_fixed {
        let mut k = rng.random_range(0..others);
        if let Some(c) = current {
            if k >= c {
                k += 1;
            }
        }
        Some(ViewChoice {
            role: Role::Fixed,
            index: k,
        })
    } else {
        Some(ViewChoice {
            role: Role::Train,
            index: rng.random_range(0..train_len),
        })
    }
}

/// Moments for all primitive parameters, laid out 14 per primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneOptimizer {
    adam: Adam,
    mu_rate: f64,
}

impl SceneOptimizer {
    pub fn new(scene: &GaussianScene, lr: &LearningRates) -> Self {
        Self {
            adam: Adam::new(scene.len() * 14),
            mu_rate: lr.mu * scene.extent().max(1e-6),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineStepReport {
    pub step: usize,
    pub role: Role,
    pub view: usize,
    /// Weighted loss that was minimized.
    pub loss: f64,
    /// PSNR of the (affine-mapped) render against the target.
    pub psnr: f64,
    pub grad_norm_mu: f64,
    pub grad_norm_q: f64,
    pub grad_norm_s: f64,
    pub grad_norm_eta: f64,
    pub grad_norm_rgb: f64,
    pub grad_norm_affine: f64,
}

fn group_norms(grads: &ParamGradients) -> [f64; 5] {
    let mut n = [0.0; 5];
    for g in &grads.grads {
        n[0] += g.mu.iter().map(|v| v * v).sum::<f64>();
        n[1] += g.q.iter().map(|v| v * v).sum::<f64>();
        n[2] += g.s.iter().map(|v| v * v).sum::<f64>();
        n[3] += g.eta * g.eta;
        n[4] += g.rgb.iter().map(|v| v * v).sum::<f64>();
    }
    n.map(f64::sqrt)
}

/// One optimizer step on a single view. With `affine` given, the render passes
/// through it and the affine is updated too. On a non-finite loss or update the
/// scene and affine are left as they were.
#[allow(clippy::too_many_arguments)]
pub fn refine_step(
    scene: &mut GaussianScene,
    opt: &mut SceneOptimizer,
    view: &CameraView,
    target: &AttributeImage,
    role: Role,
    view_index: usize,
    mut affine: Option<(&mut AffineColor, &mut Adam)>,
    config: &RefineConfig,
    step: usize,
) -> Result<RefineStepReport> {
    let render = render_color(view, scene);
    let pred = match &affine {
        Some((a, _)) => affine_apply(&render, a)?,
        None => render.clone(),
    };
    let (loss, g_pred) = photometric_loss(&pred, target, config.lambda_s)?;
    let weight = if role == Role::Train { 1.0 } else { config.w_g };
    let loss = weight * loss;
    let non_finite = || Error::NonFiniteLoss {
        step,
        role: role.to_string(),
        view: view_index,
    };
    if !loss.is_finite() {
        return Err(non_finite());
    }
    let g_pred = g_pred.map(|v| v * weight);

    let (g_affine, g_render) = match &affine {
        Some((a, _)) => {
            let (ga, gr) = affine_backward(&render, a, &g_pred)?;
            (Some(ga), gr)
        }
        None => (None, g_pred),
    };
    let grads = backprop(view, scene, &g_render)?;
    if !grads.is_finite() {
        return Err(non_finite());
    }

    let t = &config.trainable;
    let keep = [t.mu, t.q, t.s, t.eta, t.rgb];
    let group = |i: usize| match i % 14 {
        0..=2 => 0,
        3..=6 => 1,
        7..=9 => 2,
        10 => 3,
        _ => 4,
    };
    let flat: Vec<f64> = grads
        .grads
        .iter()
        .flat_map(|g| g.to_array())
        .enumerate()
        .map(|(i, v)| if keep[group(i)] { v } else { 0.0 })
        .collect();
    let lr = &config.lr;
    let mu_rate = opt.mu_rate;
    let rate = |i: usize| [mu_rate, lr.q, lr.s, lr.eta, lr.rgb][group(i)];
    let saved_opt = opt.adam.clone();
    let delta = opt.adam.step(&flat, rate);
    let mut next = scene.primitives.clone();
    for (p, d) in next.iter_mut().zip(delta.chunks_exact(14)) {
        for k in 0..3 {
            p.mu[k] += d[k];
            p.s[k] += d[7 + k];
            p.rgb[k] += d[11 + k];
        }
        for k in 0..4 {
            p.q[k] += d[3 + k];
        }
        p.eta += d[10];
        p.clamp_in_place(config.min_scale);
    }
    let finite = next.iter().enumerate().all(|(i, p)| p.check(i).is_ok());

    let mut next_affine = None;
    if let (Some((a, aopt)), Some(ga)) = (&mut affine, g_affine) {
        let saved = aopt.clone();
        let d = aopt.step(&ga, |_| lr.affine);
        let mut v = a.to_array();
        for (x, dx) in v.iter_mut().zip(&d) {
            *x += dx;
        }
        let cand = AffineColor::from_array(&v);
        if cand.is_finite() && finite {
            next_affine = Some(cand);
        } else {
            **aopt = saved;
        }
    }
    if !finite {
        opt.adam = saved_opt;
        return Err(non_finite());
    }
    scene.primitives = next;
    if let (Some((a, _)), Some(cand)) = (&mut affine, next_affine) {
        **a = cand;
    }

    let n = group_norms(&grads);
    Ok(RefineStepReport {
        step,
        role,
        view: view_index,
        loss,
        psnr: psnr(&pred, target)?,
        grad_norm_mu: n[0],
        grad_norm_q: n[1],
        grad_norm_s: n[2],
        grad_norm_eta: n[3],
        grad_norm_rgb: n[4],
        grad_norm_affine: g_affine.map_or(0.0, |g| g.iter().map(|v| v * v).sum::<f64>().sqrt()),
    })
}

/// Runs `config.steps` sampled refinement steps and returns the refined scene.
/// `current` indexes the fixed entry being folded in, if any. Affines of the
/// fixed entries are updated in place and persist with the set.
pub fn refine_3d(
    scene: &GaussianScene,
    train: &ViewSet,
    fixed: &mut FixedViewSet,
    current: Option<usize>,
    config: &RefineConfig,
) -> Result<(GaussianScene, Vec<RefineStepReport>)> {
    config.check()?;
    let mut out = scene.clone();
    let mut reports = Vec::with_capacity(config.steps);
    if config.steps == 0 {
        return Ok((out, reports));
    }
    let train_images = match &train.images {
        Some(imgs) => imgs.as_slice(),
        None if train.is_empty() => &[],
        None => return Err(Error::InvalidArgument("training views carry no images".into())),
    };
    if let Some(c) = current {
        if c >= fixed.len() {
            return Err(Error::InvalidArgument(format!(
                "current entry {c} outside fixed set of {}",
                fixed.len()
            )));
        }
    }
    let mut opt = SceneOptimizer::new(&out, &config.lr);
    let mut rng = rng_for(config.seed, streams::SAMPLER);
    for step in 0..config.steps {
        let Some(choice) = sample_view(step, config.steps, train.len(), fixed.len(), current, config.p_f, &mut rng)
        else {
            break;
        };
        let report = match choice.role {
            Role::Train => refine_step(
                &mut out,
                &mut opt,
                &train.views[choice.index],
                &train_images[choice.index],
                Role::Train,
                choice.index,
                None,
                config,
                step,
            )?,
            role => {
                let entry = &mut fixed.entries[choice.index];
                let affine = if config.affine {
                    Some((&mut entry.affine, &mut entry.opt))
                } else {
                    None
                };
                refine_step(
                    &mut out,
                    &mut opt,
                    &entry.view,
                    &entry.image,
                    role,
                    entry.id,
                    affine,
                    config,
                    step,
                )?
            }
        };
        reports.push(report);
    }
    Ok((out, reports))
}

/// Per-stage log: step, role, view id, loss, PSNR to target.
pub fn refine_log_csv(reports: &[RefineStepReport]) -> String {
    let mut out = String::from("step,role,view,loss,psnr\n");
    for r in reports {
        writeln!(out, "{},{},{},{:.8},{:.4}", r.step, r.role, r.view, r.loss, r.psnr).expect("string write");
    }
    out
}
