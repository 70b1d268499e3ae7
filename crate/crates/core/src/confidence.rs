//! Per-Gaussian information, certainty attributes and rendered confidence maps.
//!
//! Information is accumulated over training views only. A Gaussian that no
//! training view constrains keeps the floor `EPSILON_H`, so its uncertainty
//! `s_H / H` is the largest in the scene and its certainty `exp(-gamma * U)` the
//! smallest. Confidence at a pixel is the composited certainty times the
//! rendered opacity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::AttributeImage;
use crate::render::{per_gaussian_squared_jacobian, render_attribute, render_opacity, ParamMask};
use crate::scene::{CameraView, GaussianScene, ViewSet};

/// Absolute information floor added to every Gaussian.
pub const EPSILON_H: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FisherAccumulator {
    /// Accumulated squared-Jacobian sums, floor included.
    pub information: Vec<f64>,
    pub views_seen: usize,
    pub mask: ParamMask,
    pub epsilon: f64,
}

impl FisherAccumulator {
    pub fn new(len: usize, mask: ParamMask) -> Self {
        Self {
            information: vec![EPSILON_H; len],
            views_seen: 0,
            mask,
            epsilon: EPSILON_H,
        }
    }

    pub fn add_view(&mut self, view: &CameraView, scene: &GaussianScene) -> Result<()> {
        if scene.len() != self.information.len() {
            return Err(Error::shape(
                format!("{} primitives", self.information.len()),
                format!("{} primitives", scene.len()),
            ));
        }
        let sq = per_gaussian_squared_jacobian(view, scene, self.mask)?;
        for (h, v) in self.information.iter_mut().zip(sq) {
            *h += v;
        }
        self.views_seen += 1;
        Ok(())
    }

    /// Median of the information values, used to normalize uncertainties.
    pub fn scale(&self) -> f64 {
        median(&self.information).unwrap_or(1.0)
    }
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn accumulate_training_fisher(
    scene: &GaussianScene,
    train: &ViewSet,
    mask: ParamMask,
) -> Result<FisherAccumulator> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training views to accumulate".into()));
    }
    let mut acc = FisherAccumulator::new(scene.len(), mask);
    for view in &train.views {
        acc.add_view(view, scene)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyMode {
    /// `s_H / H_i`: large where training views carry little information.
    #[default]
    InverseInformation,
    /// Squared Jacobian at the query view, normalized by `s_H`.
    LiteralAtView,
}

impl std::str::FromStr for UncertaintyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse-information" => Ok(Self::InverseInformation),
            "literal-at-view" => Ok(Self::LiteralAtView),
            other => Err(Error::UnknownKind(format!("uncertainty mode `{other}`"))),
        }
    }
}

pub fn uncertainty_attribute(
    acc: &FisherAccumulator,
    mode: UncertaintyMode,
    view: Option<&CameraView>,
    scene: &GaussianScene,
) -> Result<Vec<f64>> {
    if acc.information.len() != scene.len() {
        return Err(Error::shape(
            format!("{} primitives", scene.len()),
            format!("{} information entries", acc.information.len()),
        ));
    }
    let s_h = acc.scale();
    match mode {
        UncertaintyMode::InverseInformation => Ok(acc.information.iter().map(|h| s_h / h).collect()),
        UncertaintyMode::LiteralAtView => {
            let view = view.ok_or_else(|| {
                Error::InvalidArgument("literal-at-view uncertainty needs a view".into())
            })?;
            let sq = per_gaussian_squared_jacobian(view, scene, acc.mask)?;
            Ok(sq.into_iter().map(|v| v / s_h).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertaintyAttributes {
    pub uncertainty: Vec<f64>,
    pub certainty: Vec<f64>,
    pub gamma: f64,
}

/// `exp(-gamma * U)`, floored at the smallest positive normal float so certainty
/// of unobserved Gaussians stays positive instead of underflowing to zero.
pub fn certainty_attribute(uncertainty: &[f64], gamma: f64) -> Result<CertaintyAttributes> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    if let Some(i) = uncertainty.iter().position(|u| !(*u >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "uncertainty {i} is {}, expected >= 0",
            uncertainty[i]
        )));
    }
    Ok(CertaintyAttributes {
        uncertainty: uncertainty.to_vec(),
        certainty: uncertainty
            .iter()
            .map(|u| (-gamma * u).exp().max(f64::MIN_POSITIVE))
            .collect(),
        gamma,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    pub image: AttributeImage,
    pub gamma: f64,
    pub view_id: Option<usize>,
}

pub fn render_confidence_map(
    view: &CameraView,
    scene: &GaussianScene,
    attrs: &CertaintyAttributes,
) -> Result<ConfidenceMap> {
    if let Some(i) = attrs.certainty.iter().position(|c| !(*c > 0.0 && *c <= 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "certainty {i} is {}, expected (0, 1]",
            attrs.certainty[i]
        )));
    }
    let cert = render_attribute(view, scene, &attrs.certainty, 1)?;
    let alpha = render_opacity(view, scene);
    let image = cert.zip_map(&alpha, |c, a| (c * a).clamp(0.0, 1.0))?;
    Ok(ConfidenceMap {
        image,
        gamma: attrs.gamma,
        view_id: None,
    })
}

/// Composited raw uncertainty. Unbounded; kept for diagnostics and comparison.
pub fn render_uncertainty_map(
    view: &CameraView,
    scene: &GaussianScene,
    uncertainty: &[f64],
) -> Result<AttributeImage> {
    render_attribute(view, scene, uncertainty, 1)
}

/// Certainty sharpness levels for the early, middle and late thirds of denoising.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaLevels {
    pub lo: f64,
    pub mid: f64,
    pub hi: f64,
}

impl Default for GammaLevels {
    fn default() -> Self {
        Self {
            lo: 0.001,
            mid: 0.01,
            hi: 0.1,
        }
    }
}

impl GammaLevels {
    pub fn check(&self) -> Result<()> {
        let ok = self.lo > 0.0 && self.lo <= self.mid && self.mid <= self.hi && self.hi.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "gamma levels must be positive and non-decreasing, got ({}, {}, {})",
                self.lo, self.mid, self.hi
            )))
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.lo, self.mid, self.hi]
    }
}

pub fn gamma_for_step(levels: &GammaLevels, step: usize, total: usize) -> Result<f64> {
    levels.check()?;
    if step >= total {
        return Err(Error::InvalidArgument(format!("step {step} out of range for {total} steps")));
    }
    Ok(if 3 * step < total {
        levels.lo
    } else if 3 * step < 2 * total {
        levels.mid
    } else {
        levels.hi
    })
}

/// Resamples every channel to `width x height`: box-filter average on axes that
/// shrink, bilinear interpolation on axes that grow.
pub fn resize_image(img: &AttributeImage, width: usize, height: usize) -> Result<AttributeImage> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("resize target must be at least 1x1".into()));
    }
    let (w, h, c) = img.shape();
    if (w, h) == (width, height) {
        return Ok(img.clone());
    }
    let wx = axis_weights(w, width);
    let wy = axis_weights(h, height);
    let mut out = vec![0.0; width * height * c];
    for (oy, row_w) in wy.iter().enumerate() {
        for (ox, col_w) in wx.iter().enumerate() {
            for &(sy, ay) in row_w {
                for &(sx, ax) in col_w {
                    let px = img.pixel(sx, sy);
                    let o = (oy * width + ox) * c;
                    for k in 0..c {
                        out[o + k] += ay * ax * px[k];
                    }
                }
            }
        }
    }
    AttributeImage::from_data(width, height, c, out)
}

/// Source taps and weights for each output sample along one axis.
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    if dst <= src {
        let ratio = src as f64 / dst as f64;
        (0..dst)
            .map(|o| {
                let (a, b) = (o as f64 * ratio, (o + 1) as f64 * ratio);
                let mut taps = Vec::new();
                let mut i = a.floor() as usize;
                while (i as f64) < b && i < src {
                    let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((i, overlap / ratio));
                    }
                    i += 1;
                }
                taps
            })
            .collect()
    } else {
        let ratio = src as f64 / dst as f64;
        (0..dst)
            .map(|o| {
                let x = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                let t = x - i0 as f64;
                if i1 == i0 || t == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - t), (i1, t)]
                }
            })
            .collect()
    }
}

pub fn resize_to_latent(map: &ConfidenceMap, width: usize, height: usize) -> Result<ConfidenceMap> {
    let image = resize_image(&map.image, width, height)?.clamp01();
    Ok(ConfidenceMap {
        image,
        gamma: map.gamma,
        view_id: map.view_id,
    })
}
