//! Flow-matching noise schedule, the denoiser contract and the confidence-guided
//! sampling loop.
//!
//! Latents are pixel images (identity encoder). When `GuidanceConfig::latent` asks
//! for a different size, the render and masks are resampled into it and the result
//! is resampled back.
//!
//! Noising is `x_t = (1 - sigma) x_0 + sigma * eps`; a denoiser returns a velocity
//! `F` with `x0_hat = x_t - sigma F`. Each step blends the prediction with the
//! rendered reference under the confidence map and takes the Euler step
//! `x_prev = x0_g + sigma_prev (x_t - x0_g) / sigma`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::confidence::{gamma_for_step, resize_image, ConfidenceMap, GammaLevels};
use crate::error::{Error, Result};
use crate::image::AttributeImage;
use crate::rng::{child_seed, normal, rng_for, streams};

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSchedule {
    /// Descending noise levels, first `sigma_start`, last exactly 0.
    pub sigmas: Vec<f64>,
}

impl SigmaSchedule {
    /// Number of denoising steps.
    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn id(&self) -> String {
        format!("linear-T{}-s{}", self.steps(), self.sigmas[0])
    }
}

pub fn make_schedule(steps: usize, sigma_start: f64) -> Result<SigmaSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("need at least 2 denoising steps, got {steps}")));
    }
    if !(sigma_start > 0.0 && sigma_start <= 1.0) {
        return Err(Error::Config(format!("sigma_start must be in (0, 1], got {sigma_start}")));
    }
    let sigmas = (0..=steps)
        .rev()
        .map(|k| sigma_start * k as f64 / steps as f64)
        .collect();
    Ok(SigmaSchedule { sigmas })
}

pub fn add_noise(x0: &AttributeImage, sigma: f64, seed: u64) -> Result<AttributeImage> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::InvalidArgument(format!("noise level {sigma} outside [0, 1]")));
    }
    let mut rng = rng_for(seed, streams::NOISE);
    Ok(x0.with_data(
        x0.data()
            .iter()
            .map(|&v| {
                let eps = normal(&mut rng);
                (1.0 - sigma) * v + sigma * eps
            })
            .collect(),
    ))
}

pub fn predict_x0(x_t: &AttributeImage, velocity: &AttributeImage, sigma: f64) -> Result<AttributeImage> {
    x_t.zip_map(velocity, |x, f| x - sigma * f)
}

fn check_mask(mask: &AttributeImage, like: &AttributeImage, name: &str) -> Result<()> {
    if mask.channels() != 1 || mask.width() != like.width() || mask.height() != like.height() {
        return Err(Error::shape(
            format!("{}x{}x1 {name}", like.width(), like.height()),
            format!("{:?}", mask.shape()),
        ));
    }
    if let Some(v) = mask.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("{name} value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Blends the prediction with the rendered reference. Masks are single-channel
/// and broadcast across image channels. During the overall phase, the part not
/// trusted by `confidence` is additionally pulled towards the reference by
/// `beta * opacity`.
pub fn guided_x0(
    prediction: &AttributeImage,
    reference: &AttributeImage,
    confidence: &AttributeImage,
    opacity: &AttributeImage,
    beta: f64,
    overall: bool,
) -> Result<AttributeImage> {
    prediction.check_shape(reference)?;
    check_mask(confidence, prediction, "confidence")?;
    check_mask(opacity, prediction, "opacity")?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta {beta} outside [0, 1]")));
    }
    let c = prediction.channels();
    let mc = confidence.data();
    let ma = opacity.data();
    let out = prediction
        .data()
        .iter()
        .zip(reference.data())
        .enumerate()
        .map(|(i, (&p, &r))| {
            let m = mc[i / c];
            let rest = if overall {
                let b = beta * ma[i / c];
                b * r + (1.0 - b) * p
            } else {
                p
            };
            m * r + (1.0 - m) * rest
        })
        .collect();
    Ok(prediction.with_data(out))
}

/// One Euler step of the probability-flow ODE towards the guided prediction.
pub fn guided_step(
    x_t: &AttributeImage,
    guided: &AttributeImage,
    sigma: f64,
    sigma_prev: f64,
) -> Result<AttributeImage> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("step from sigma {sigma}, expected > 0")));
    }
    if !(sigma_prev < sigma) {
        return Err(Error::InvalidArgument(format!(
            "sigma must decrease, got {sigma} -> {sigma_prev}"
        )));
    }
    let a = sigma_prev / sigma;
    let b = (sigma_prev - sigma) / sigma;
    x_t.zip_map(guided, |x, g| a * x - b * g)
}

/// What a denoiser learns about the run before the first query.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseContext {
    pub schedule_id: String,
    pub steps: usize,
    /// Index of the trajectory view being fixed.
    pub view: usize,
    pub shape: (usize, usize, usize),
}

/// A velocity predictor. Output must have the shape of `x_t` and be finite.
pub trait Denoiser {
    fn begin(&mut self, _ctx: &DenoiseContext) -> Result<()> {
        Ok(())
    }

    fn velocity(&mut self, x_t: &AttributeImage, step: usize, sigma: f64) -> Result<AttributeImage>;
}

fn reject_zero_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("denoiser queried at sigma {sigma}")))
    }
}

fn velocity_towards(x_t: &AttributeImage, target: &AttributeImage, sigma: f64) -> Result<AttributeImage> {
    reject_zero_sigma(sigma)?;
    x_t.zip_map(target, |x, y| (x - y) / sigma)
}

/// Targets keyed by trajectory view; a single target serves every view.
#[derive(Debug, Clone)]
struct Targets {
    images: Vec<AttributeImage>,
    current: usize,
}

impl Targets {
    fn new(images: Vec<AttributeImage>) -> Self {
        assert!(!images.is_empty(), "denoiser needs at least one target");
        Self { images, current: 0 }
    }

    fn select(&mut self, ctx: &DenoiseContext) -> Result<()> {
        let i = if self.images.len() == 1 { 0 } else { ctx.view };
        let img = self.images.get(i).ok_or_else(|| {
            Error::InvalidArgument(format!("no denoiser target for view {}", ctx.view))
        })?;
        if img.shape() != ctx.shape {
            return Err(Error::shape(format!("{:?}", ctx.shape), format!("{:?} target", img.shape())));
        }
        self.current = i;
        Ok(())
    }

    fn get(&self) -> &AttributeImage {
        &self.images[self.current]
    }
}

/// Exact velocity towards a known clean image.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    targets: Targets,
}

impl OracleDenoiser {
    pub fn new(target: AttributeImage) -> Self {
        Self::per_view(vec![target])
    }

    pub fn per_view(targets: Vec<AttributeImage>) -> Self {
        Self {
            targets: Targets::new(targets),
        }
    }
}

impl Denoiser for OracleDenoiser {
    fn begin(&mut self, ctx: &DenoiseContext) -> Result<()> {
        self.targets.select(ctx)
    }

    fn velocity(&mut self, x_t: &AttributeImage, _step: usize, sigma: f64) -> Result<AttributeImage> {
        velocity_towards(x_t, self.targets.get(), sigma)
    }
}

/// Oracle whose target carries a fixed seeded perturbation of scale `spread`,
/// standing in for a model that hallucinates consistently within a run.
#[derive(Debug, Clone)]
pub struct NoisyOracleDenoiser {
    clean: Targets,
    spread: f64,
    seed: u64,
    perturbed: Option<AttributeImage>,
}

impl NoisyOracleDenoiser {
    pub fn new(target: AttributeImage, spread: f64, seed: u64) -> Self {
        Self::per_view(vec![target], spread, seed)
    }

    pub fn per_view(targets: Vec<AttributeImage>, spread: f64, seed: u64) -> Self {
        let mut d = Self {
            clean: Targets::new(targets),
            spread,
            seed,
            perturbed: None,
        };
        d.perturb(0);
        d
    }

    fn perturb(&mut self, view: usize) {
        let target = self.clean.get();
        if self.spread == 0.0 {
            self.perturbed = Some(target.clone());
            return;
        }
        let mut rng = rng_for(child_seed(self.seed, view as u64), streams::DENOISER);
        let spread = self.spread;
        self.perturbed = Some(target.map(|v| v + spread * normal(&mut rng)));
    }

    /// The image this denoiser currently predicts.
    pub fn perturbed_target(&self) -> &AttributeImage {
        self.perturbed.as_ref().expect("perturbed target")
    }
}

impl Denoiser for NoisyOracleDenoiser {
    fn begin(&mut self, ctx: &DenoiseContext) -> Result<()> {
        self.clean.select(ctx)?;
        self.perturb(ctx.view);
        Ok(())
    }

    fn velocity(&mut self, x_t: &AttributeImage, _step: usize, sigma: f64) -> Result<AttributeImage> {
        velocity_towards(x_t, self.perturbed_target(), sigma)
    }
}

/// Returns a zero velocity, so the prediction is always `x_t` itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDenoiser;

impl Denoiser for IdentityDenoiser {
    fn velocity(&mut self, x_t: &AttributeImage, _step: usize, sigma: f64) -> Result<AttributeImage> {
        reject_zero_sigma(sigma)?;
        Ok(x_t.map(|_| 0.0))
    }
}

/// Posterior-mean denoiser for an independent Gaussian prior per element,
/// `x_0 ~ N(mean, spread^2)`. Unlike the oracles, its prediction depends on
/// `x_t`, so guidance applied in early steps changes what it predicts later.
#[derive(Debug, Clone)]
pub struct PriorDenoiser {
    means: Targets,
    spread: f64,
}

impl PriorDenoiser {
    pub fn new(mean: AttributeImage, spread: f64) -> Self {
        Self::per_view(vec![mean], spread)
    }

    pub fn per_view(means: Vec<AttributeImage>, spread: f64) -> Self {
        Self {
            means: Targets::new(means),
            spread,
        }
    }
}

impl Denoiser for PriorDenoiser {
    fn begin(&mut self, ctx: &DenoiseContext) -> Result<()> {
        self.means.select(ctx)
    }

    fn velocity(&mut self, x_t: &AttributeImage, _step: usize, sigma: f64) -> Result<AttributeImage> {
        reject_zero_sigma(sigma)?;
        let a = 1.0 - sigma;
        let v = self.spread * self.spread;
        let gain = a * v / (a * a * v + sigma * sigma);
        x_t.zip_map(self.means.get(), |x, m| {
            let x0 = m + gain * (x - a * m);
            (x - x0) / sigma
        })
    }
}

/// Request sidecar written next to `req_<n>.pfm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeRequest {
    pub t: usize,
    pub sigma_t: f64,
    /// `[height, width, channels]`
    pub shape: [usize; 3],
    pub schedule_id: String,
}

/// Exchanges requests and responses with an external process through files.
///
/// Each query writes `req_<n>.pfm` (the noisy latent) and then `req_<n>.json`; the
/// JSON appearing is the signal that the request is complete. The responder
/// writes `res_<n>.pfm` with the velocity. Consumed files are deleted.
#[derive(Debug, Clone)]
pub struct BridgeDenoiser {
    dir: PathBuf,
    timeout: Duration,
    poll: Duration,
    counter: usize,
    schedule_id: String,
    steps: usize,
}

pub fn external_denoiser_bridge(dir: impl Into<PathBuf>, timeout: Duration) -> Result<BridgeDenoiser> {
    let dir = dir.into();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(BridgeDenoiser {
        dir,
        timeout,
        poll: Duration::from_millis(5),
        counter: 0,
        schedule_id: String::new(),
        steps: 0,
    })
}

impl BridgeDenoiser {
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write_atomic(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let tmp = self.dir.join(format!(".{name}.tmp"));
        let path = self.dir.join(name);
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

impl Denoiser for BridgeDenoiser {
    fn begin(&mut self, ctx: &DenoiseContext) -> Result<()> {
        self.schedule_id = ctx.schedule_id.clone();
        self.steps = ctx.steps;
        Ok(())
    }

    fn velocity(&mut self, x_t: &AttributeImage, step: usize, sigma: f64) -> Result<AttributeImage> {
        reject_zero_sigma(sigma)?;
        let n = self.counter;
        self.counter += 1;
        let req = BridgeRequest {
            t: self.steps.saturating_sub(step),
            sigma_t: sigma,
            shape: [x_t.height(), x_t.width(), x_t.channels()],
            schedule_id: self.schedule_id.clone(),
        };
        let req_pfm = self.dir.join(format!("req_{n}.pfm"));
        let req_json = self.dir.join(format!("req_{n}.json"));
        let res_pfm = self.dir.join(format!("res_{n}.pfm"));
        self.write_atomic(&format!("req_{n}.pfm"), &x_t.to_pfm_bytes()?)?;
        let json = serde_json::to_vec_pretty(&req).expect("request serializes");
        self.write_atomic(&format!("req_{n}.json"), &json)?;

        let deadline = Instant::now() + self.timeout;
        loop {
            if res_pfm.exists() {
                // the responder may still be writing; retry until the file parses
                if let Ok(res) = AttributeImage::read_pfm(&res_pfm) {
                    for p in [&req_pfm, &req_json, &res_pfm] {
                        let _ = fs::remove_file(p);
                    }
                    if res.shape() != x_t.shape() {
                        return Err(Error::Denoiser {
                            step,
                            sigma,
                            message: format!(
                                "bridge response {} has shape {:?}, expected {:?}",
                                res_pfm.display(),
                                res.shape(),
                                x_t.shape()
                            ),
                        });
                    }
                    return Ok(res);
                }
            }
            if Instant::now() >= deadline {
                let _ = fs::remove_file(&req_pfm);
                let _ = fs::remove_file(&req_json);
                return Err(Error::BridgeTimeout(res_pfm));
            }
            std::thread::sleep(self.poll);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub steps: usize,
    pub sigma_start: f64,
    pub gamma: GammaLevels,
    /// Strength of the early opacity-weighted pull towards the render.
    pub beta: f64,
    /// Fraction of steps, from the start, that use the overall pull.
    pub rho: f64,
    /// Latent `[width, height]`; `None` keeps the render size.
    pub latent: Option<[usize; 2]>,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            sigma_start: 1.0,
            gamma: GammaLevels::default(),
            beta: 0.5,
            rho: 0.2,
            latent: None,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn check(&self) -> Result<()> {
        make_schedule(self.steps, self.sigma_start)?;
        self.gamma.check()?;
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must be in [0, 1], got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must be in [0, 1], got {}", self.rho)));
        }
        if let Some([w, h]) = self.latent {
            if w == 0 || h == 0 {
                return Err(Error::Config("latent dims must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn in_overall_phase(&self, step: usize) -> bool {
        (step as f64) < self.rho * self.steps as f64
    }
}

/// Snapshot of the loop after the guided prediction of one step.
#[derive(Debug, Clone)]
pub struct DiffusionState<'a> {
    pub step: usize,
    pub sigma: f64,
    pub x_t: &'a AttributeImage,
    pub reference: &'a AttributeImage,
    pub prediction: &'a AttributeImage,
    pub guided: &'a AttributeImage,
}

pub fn denoise_with_guidance(
    render: &AttributeImage,
    maps: &[ConfidenceMap],
    opacity: &AttributeImage,
    denoiser: &mut dyn Denoiser,
    config: &GuidanceConfig,
    view: usize,
) -> Result<AttributeImage> {
    denoise_observed(render, maps, opacity, denoiser, config, view, &mut |_| {})
}

/// `denoise_with_guidance` with a callback after every step.
pub fn denoise_observed(
    render: &AttributeImage,
    maps: &[ConfidenceMap],
    opacity: &AttributeImage,
    denoiser: &mut dyn Denoiser,
    config: &GuidanceConfig,
    view: usize,
    observe: &mut dyn FnMut(&DiffusionState),
) -> Result<AttributeImage> {
    config.check()?;
    let schedule = make_schedule(config.steps, config.sigma_start)?;
    let (w, h, _) = render.shape();
    let [lw, lh] = config.latent.unwrap_or([w, h]);

    let mut levels = Vec::with_capacity(3);
    for gamma in config.gamma.as_array() {
        let map = maps
            .iter()
            .find(|m| m.gamma == gamma)
            .ok_or_else(|| Error::InvalidArgument(format!("no confidence map for gamma {gamma}")))?;
        if (map.image.width(), map.image.height()) != (w, h) {
            return Err(Error::shape(format!("{w}x{h} confidence"), format!("{:?}", map.image.shape())));
        }
        levels.push((gamma, resize_image(&map.image, lw, lh)?.clamp01()));
    }
    let reference = resize_image(render, lw, lh)?;
    let alpha = resize_image(opacity, lw, lh)?.clamp01();

    denoiser.begin(&DenoiseContext {
        schedule_id: schedule.id(),
        steps: schedule.steps(),
        view,
        shape: reference.shape(),
    })?;

    let mut x = add_noise(&reference, schedule.sigmas[0], config.seed)?;
    for step in 0..schedule.steps() {
        let (sigma, sigma_prev) = (schedule.sigmas[step], schedule.sigmas[step + 1]);
        let velocity = denoiser.velocity(&x, step, sigma).map_err(|e| match e {
            Error::BridgeTimeout(_) | Error::Denoiser { .. } => e,
            other => Error::Denoiser {
                step,
                sigma,
                message: other.to_string(),
            },
        })?;
        if velocity.shape() != x.shape() || velocity.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Denoiser {
                step,
                sigma,
                message: format!("velocity must be finite with shape {:?}", x.shape()),
            });
        }
        let prediction = predict_x0(&x, &velocity, sigma)?;
        let gamma = gamma_for_step(&config.gamma, step, schedule.steps())?;
        let mask = &levels.iter().find(|(g, _)| *g == gamma).expect("level present").1;
        let guided = guided_x0(
            &prediction,
            &reference,
            mask,
            &alpha,
            config.beta,
            config.in_overall_phase(step),
        )?;
        observe(&DiffusionState {
            step,
            sigma,
            x_t: &x,
            reference: &reference,
            prediction: &prediction,
            guided: &guided,
        });
        x = if sigma_prev == 0.0 {
            guided
        } else {
            guided_step(&x, &guided, sigma, sigma_prev)?
        };
    }
    Ok(resize_image(&x, w, h)?.clamp01())
}
