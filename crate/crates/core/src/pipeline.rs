//! The interleaved per-view loop and the ablation harness.
//!
//! For each trajectory view in order: render the current scene, refresh the Fisher
//! information, build one confidence map per γ level, denoise with guidance, append
//! the result to the fixed set and refine the scene against training and fixed views.
//! With interleaving off, every view is fixed against the initial scene first and a
//! single joint refinement follows.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::confidence::{
    accumulate_training_fisher, certainty_attribute, render_confidence_map, uncertainty_attribute, ConfidenceMap,
    FisherAccumulator, UncertaintyMode,
};
use crate::error::{Error, Result};
use crate::guidance::{denoise_with_guidance, Denoiser, GuidanceConfig};
use crate::image::AttributeImage;
use crate::metrics::{psnr, table_csv, table_markdown, MetricReport};
use crate::refine::{refine_3d, refine_log_csv, FixedViewSet, RefineConfig, RefineStepReport};
use crate::render::{render_color, render_opacity, ParamMask};
use crate::rng::child_seed;
use crate::scene::{save_scene, GaussianScene, ViewSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FisherRefresh {
    /// Recompute the information on the current scene before every stage.
    #[default]
    PerStage,
    /// Compute it once on the initial scene.
    Once,
}

impl std::str::FromStr for FisherRefresh {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-stage" => Ok(Self::PerStage),
            "once" => Ok(Self::Once),
            other => Err(Error::UnknownKind(format!("fisher refresh policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub guidance: GuidanceConfig,
    pub refine: RefineConfig,
    /// Parameter groups entering the Fisher information.
    pub mask: ParamMask,
    pub mode: UncertaintyMode,
    pub fisher_refresh: FisherRefresh,
    /// Use confidence maps as the trust mask; off replaces them with the rendered opacity.
    pub confidence_guidance: bool,
    /// Alternate one 2D fix and one 3D refinement per view; off fixes every view
    /// against the initial scene and refines once at the end.
    pub interleave: bool,
    /// Warn when successive trajectory camera centers are farther apart than this.
    pub max_view_gap: Option<f64>,
    pub out_dir: Option<PathBuf>,
    /// Per-stage denoising and sampling seeds derive from this; the seeds inside
    /// `guidance` and `refine` are overwritten.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            guidance: GuidanceConfig::default(),
            refine: RefineConfig::default(),
            mask: ParamMask::default(),
            mode: UncertaintyMode::default(),
            fisher_refresh: FisherRefresh::default(),
            confidence_guidance: true,
            interleave: true,
            max_view_gap: None,
            out_dir: None,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn check(&self) -> Result<()> {
        self.guidance.check()?;
        self.refine.check()?;
        if self.mask.is_empty() {
            return Err(Error::Config("fisher parameter mask selects nothing".into()));
        }
        if let Some(gap) = self.max_view_gap {
            if !(gap > 0.0) {
                return Err(Error::Config(format!("max_view_gap must be positive, got {gap}")));
            }
        }
        Ok(())
    }

    fn stage_guidance(&self, stage: usize) -> GuidanceConfig {
        GuidanceConfig {
            seed: child_seed(child_seed(self.seed, 1), stage as u64),
            ..self.guidance.clone()
        }
    }

    fn stage_refine(&self, stage: usize) -> RefineConfig {
        RefineConfig {
            seed: child_seed(child_seed(self.seed, 2), stage as u64),
            ..self.refine.clone()
        }
    }
}

/// One trajectory view's pass through the pipeline. Images are kept in memory and
/// written to the stage directory; only the summary fields go to `records.json`.
#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub stage: usize,
    pub view: usize,
    #[serde(skip)]
    pub render: AttributeImage,
    #[serde(skip)]
    pub confidence: Vec<ConfidenceMap>,
    #[serde(skip)]
    pub fixed: AttributeImage,
    /// Mean of each confidence map, in γ order.
    pub confidence_mean: Vec<f64>,
    /// PSNR of the pre-fix render against the fixed image.
    pub render_psnr: f64,
    /// After this stage's refinement: PSNR of every fixed view so far against its fixed image.
    pub fixed_psnr: Vec<f64>,
    /// After this stage's refinement: mean PSNR over training views.
    pub train_psnr: f64,
    /// Final loss of this stage's refinement, when one ran.
    pub refine_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub scene: GaussianScene,
    pub records: Vec<StageRecord>,
    pub fixed: FixedViewSet,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn mean_train_psnr(scene: &GaussianScene, train: &ViewSet) -> Result<f64> {
    let Some(images) = &train.images else {
        return Ok(f64::NAN);
    };
    if train.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for (v, img) in train.views.iter().zip(images) {
        total += psnr(&render_color(v, scene), img)?;
    }
    Ok(total / train.len() as f64)
}

fn fixed_psnrs(scene: &GaussianScene, fixed: &FixedViewSet) -> Result<Vec<f64>> {
    fixed
        .entries()
        .iter()
        .map(|e| psnr(&render_color(&e.view, scene), &e.image))
        .collect()
}

/// Confidence maps for every γ level at one view, or opacity stand-ins when
/// confidence guidance is off.
pub fn stage_confidence(
    scene: &GaussianScene,
    acc: &FisherAccumulator,
    view: &crate::scene::CameraView,
    view_id: usize,
    config: &PipelineConfig,
) -> Result<Vec<ConfidenceMap>> {
    let gammas = config.guidance.gamma.as_array();
    if !config.confidence_guidance {
        let alpha = render_opacity(view, scene);
        return Ok(gammas
            .iter()
            .map(|&gamma| ConfidenceMap {
                image: alpha.clone(),
                gamma,
                view_id: Some(view_id),
            })
            .collect());
    }
    let u = uncertainty_attribute(acc, config.mode, Some(view), scene)?;
    gammas
        .iter()
        .map(|&gamma| {
            let attrs = certainty_attribute(&u, gamma)?;
            let mut map = render_confidence_map(view, scene, &attrs)?;
            map.view_id = Some(view_id);
            Ok(map)
        })
        .collect()
}

fn gamma_tag(gamma: f64) -> String {
    format!("{gamma}")
}

fn write_stage(dir: &Path, record: &StageRecord, log: Option<&[RefineStepReport]>) -> Result<()> {
    let stage_dir = dir.join(format!("stage_{}", record.stage));
    create_dir(&stage_dir)?;
    record.render.write_pfm(stage_dir.join("render.pfm"))?;
    record.render.write_png(stage_dir.join("render.png"))?;
    for map in &record.confidence {
        map.image.write_pfm(stage_dir.join(format!("conf_{}.pfm", gamma_tag(map.gamma))))?;
    }
    record.fixed.write_pfm(stage_dir.join("fixed.pfm"))?;
    record.fixed.write_png(stage_dir.join("fixed.png"))?;
    if let Some(log) = log {
        write_text(&stage_dir.join("refine_log.csv"), &refine_log_csv(log))?;
    }
    Ok(())
}

fn records_json(records: &[StageRecord]) -> String {
    serde_json::to_string_pretty(records).expect("records serialize")
}

fn persist_failure(dir: Option<&Path>, records: &[StageRecord], scene: &GaussianScene) {
    if let Some(dir) = dir {
        // best effort: the stage error is what the caller needs to see
        let _ = write_text(&dir.join("records.json"), &records_json(records));
        let _ = save_scene(scene, dir.join("scene_last_good.json"));
    }
}

fn warn_on_gaps(trajectory: &ViewSet, max_gap: Option<f64>) {
    let Some(gap) = max_gap else { return };
    for (i, pair) in trajectory.views.windows(2).enumerate() {
        let (a, b) = (pair[0].center(), pair[1].center());
        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        if d > gap {
            log::warn!("trajectory views {i} and {} are {d:.3} apart (limit {gap})", i + 1);
        }
    }
}

/// Fixes every view of `trajectory` in order and folds each result back into the
/// scene. Deterministic for a given config. On a stage failure the records so far
/// and the last good scene are written to the output directory (when set) and the
/// error is returned wrapped with its stage index.
pub fn fix_trajectory(
    init: &GaussianScene,
    train: &ViewSet,
    trajectory: &ViewSet,
    config: &PipelineConfig,
    denoiser: &mut dyn Denoiser,
) -> Result<PipelineOutput> {
    config.check()?;
    warn_on_gaps(trajectory, config.max_view_gap);
    let out_dir = config.out_dir.as_deref();
    if let Some(dir) = out_dir {
        create_dir(dir)?;
    }
    let mut scene = init.clone();
    scene.fisher = None;
    let mut fixed = FixedViewSet::new();
    let mut records: Vec<StageRecord> = Vec::with_capacity(trajectory.len());
    let mut once: Option<FisherAccumulator> = None;

    for (i, view) in trajectory.views.iter().enumerate() {
        let fix_scene = if config.interleave { &scene } else { init };
        let stage = (|| -> Result<(StageRecord, Option<Vec<RefineStepReport>>, Option<GaussianScene>)> {
            let acc = match (config.fisher_refresh, &once) {
                (FisherRefresh::Once, Some(acc)) => acc.clone(),
                _ => {
                    let acc = accumulate_training_fisher(fix_scene, train, config.mask)?;
                    if config.fisher_refresh == FisherRefresh::Once {
                        once = Some(acc.clone());
                    }
                    acc
                }
            };
            let render = render_color(view, fix_scene);
            let alpha = render_opacity(view, fix_scene);
            let maps = stage_confidence(fix_scene, &acc, view, i, config)?;
            let fixed_img = denoise_with_guidance(&render, &maps, &alpha, denoiser, &config.stage_guidance(i), i)?;
            let index = fixed.push(i, *view, fixed_img.clone())?;

            let (refined, log) = if config.interleave {
                let (s, log) = refine_3d(&scene, train, &mut fixed, Some(index), &config.stage_refine(i))?;
                (Some(s), Some(log))
            } else {
                (None, None)
            };
            let after = refined.as_ref().unwrap_or(&scene);
            let record = StageRecord {
                stage: i,
                view: i,
                confidence_mean: maps.iter().map(|m| m.image.mean()).collect(),
                render_psnr: psnr(&render, &fixed_img)?,
                fixed_psnr: fixed_psnrs(after, &fixed)?,
                train_psnr: mean_train_psnr(after, train)?,
                refine_loss: log.as_ref().and_then(|l| l.last()).map(|r| r.loss),
                render,
                confidence: maps,
                fixed: fixed_img,
            };
            Ok((record, log, refined))
        })();
        match stage {
            Ok((record, log, refined)) => {
                if let Some(dir) = out_dir {
                    write_stage(dir, &record, log.as_deref())?;
                }
                if let Some(s) = refined {
                    scene = s;
                }
                records.push(record);
            }
            Err(e) => {
                persist_failure(out_dir, &records, &scene);
                return Err(Error::Stage {
                    stage: i,
                    source: Box::new(e),
                });
            }
        }
    }

    if !config.interleave && !trajectory.is_empty() {
        let stage = trajectory.len();
        let joint = RefineConfig {
            steps: config.refine.steps * trajectory.len(),
            ..config.stage_refine(stage)
        };
        match refine_3d(&scene, train, &mut fixed, None, &joint) {
            Ok((s, log)) => {
                scene = s;
                let fixed_after = fixed_psnrs(&scene, &fixed)?;
                let train_after = mean_train_psnr(&scene, train)?;
                for r in &mut records {
                    r.fixed_psnr = fixed_after[..=r.stage].to_vec();
                    r.train_psnr = train_after;
                    r.refine_loss = log.last().map(|x| x.loss);
                }
                if let Some(dir) = out_dir {
                    write_text(&dir.join("refine_log.csv"), &refine_log_csv(&log))?;
                }
            }
            Err(e) => {
                persist_failure(out_dir, &records, &scene);
                return Err(Error::Stage {
                    stage,
                    source: Box::new(e),
                });
            }
        }
    }

    if let Some(dir) = out_dir {
        write_text(&dir.join("records.json"), &records_json(&records))?;
        save_scene(&scene, dir.join("scene_final.json"))?;
    }
    Ok(PipelineOutput { scene, records, fixed })
}

/// Module switches compared by the ablation harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub confidence_guidance: bool,
    pub interleave: bool,
    pub overall_guidance: bool,
    pub affine: bool,
}

impl Toggles {
    pub const ALL_ON: Toggles = Toggles {
        confidence_guidance: true,
        interleave: true,
        overall_guidance: true,
        affine: true,
    };
    pub const ALL_OFF: Toggles = Toggles {
        confidence_guidance: false,
        interleave: false,
        overall_guidance: false,
        affine: false,
    };

    /// `base` with these switches applied; overall guidance off sets `rho` to zero.
    pub fn apply(&self, base: &PipelineConfig) -> PipelineConfig {
        let mut c = base.clone();
        c.confidence_guidance = self.confidence_guidance;
        c.interleave = self.interleave;
        if !self.overall_guidance {
            c.guidance.rho = 0.0;
        }
        c.refine.affine = self.affine;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub toggles: Toggles,
}

/// The full method, each single switch turned off, and everything off.
pub fn standard_variants() -> Vec<Variant> {
    let on = Toggles::ALL_ON;
    let v = |name: &str, toggles: Toggles| Variant {
        name: name.into(),
        toggles,
    };
    vec![
        v("full", on),
        v(
            "no-confidence-guidance",
            Toggles {
                confidence_guidance: false,
                ..on
            },
        ),
        v(
            "no-interleave",
            Toggles {
                interleave: false,
                ..on
            },
        ),
        v(
            "no-overall-guidance",
            Toggles {
                overall_guidance: false,
                ..on
            },
        ),
        v("no-affine", Toggles { affine: false, ..on }),
        v("all-off", Toggles::ALL_OFF),
    ]
}

/// One scene to run every variant on. `trajectory` must carry ground-truth images.
#[derive(Debug, Clone)]
pub struct AblationCase {
    pub name: String,
    pub seed: u64,
    pub scene: GaussianScene,
    pub train: ViewSet,
    pub trajectory: ViewSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    /// One report per (variant, case), variants in input order, plus `init` rows
    /// for the unrefined scenes first.
    pub reports: Vec<MetricReport>,
}

pub const BASELINE_VARIANT: &str = "init";

impl AblationTable {
    pub fn variants(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.reports {
            if !names.contains(&r.variant) {
                names.push(r.variant.clone());
            }
        }
        names
    }

    /// Per-case mean PSNR for one variant, in case order.
    pub fn psnr_by_case(&self, variant: &str) -> Vec<f64> {
        self.reports
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.mean_psnr)
            .collect()
    }

    fn summary_rows(&self) -> Vec<Vec<String>> {
        self.variants()
            .into_iter()
            .map(|v| {
                let rows: Vec<&MetricReport> = self.reports.iter().filter(|r| r.variant == v).collect();
                let n = rows.len().max(1) as f64;
                let p = rows.iter().map(|r| r.mean_psnr).sum::<f64>() / n;
                let s = rows.iter().map(|r| r.mean_ssim).sum::<f64>() / n;
                vec![v, rows.len().to_string(), format!("{p:.4}"), format!("{s:.4}")]
            })
            .collect()
    }

    const HEADER: [&'static str; 4] = ["variant", "cases", "mean_psnr", "mean_ssim"];

    pub fn to_csv(&self) -> String {
        table_csv(&Self::HEADER, &self.summary_rows())
    }

    pub fn to_markdown(&self) -> String {
        table_markdown(&Self::HEADER, &self.summary_rows())
    }
}

fn evaluate(case: &AblationCase, variant: &str, scene: &GaussianScene) -> Result<MetricReport> {
    let truth = case
        .trajectory
        .images
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("case {} has no ground-truth images", case.name)))?;
    let renders: Vec<AttributeImage> = case.trajectory.views.iter().map(|v| render_color(v, scene)).collect();
    MetricReport::evaluate(case.name.clone(), variant, case.seed, &renders, truth)
}

/// Runs every variant on every case and scores the refined scenes on the
/// trajectory views. `make_denoiser` is called once per (variant, case) run so
/// stateful denoisers start fresh.
pub fn run_ablation(
    base: &PipelineConfig,
    variants: &[Variant],
    cases: &[AblationCase],
    make_denoiser: &mut dyn FnMut(&AblationCase) -> Result<Box<dyn Denoiser>>,
) -> Result<AblationTable> {
    let mut reports = Vec::with_capacity((variants.len() + 1) * cases.len());
    for case in cases {
        reports.push(evaluate(case, BASELINE_VARIANT, &case.scene)?);
    }
    for variant in variants {
        for case in cases {
            let mut config = variant.toggles.apply(base);
            config.out_dir = None;
            config.seed = case.seed;
            let mut denoiser = make_denoiser(case)?;
            let out = fix_trajectory(&case.scene, &case.train, &case.trajectory, &config, denoiser.as_mut())?;
            reports.push(evaluate(case, &variant.name, &out.scene)?);
        }
    }
    Ok(AblationTable { reports })
}
