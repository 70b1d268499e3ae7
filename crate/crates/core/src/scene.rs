//! Gaussian scenes, pinhole cameras and their JSON files.
//!
//! Conventions: quaternions are `(w, x, y, z)`. Cameras are right-handed with
//! `x` right, `y` down and `z` forward; the stored rotation and translation map
//! world points into camera space (`p_cam = R p_world + t`). Pixel `(col, row)`
//! has its center at image coordinate `(col, row)`.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::confidence::FisherAccumulator;
use crate::error::{Error, Result};
use crate::image::AttributeImage;

const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianPrimitive {
    pub mu: [f64; 3],
    pub q: [f64; 4],
    pub s: [f64; 3],
    pub eta: f64,
    pub rgb: [f64; 3],
}

impl GaussianPrimitive {
    pub fn isotropic(mu: [f64; 3], scale: f64, eta: f64, rgb: [f64; 3]) -> Self {
        Self {
            mu,
            q: [1.0, 0.0, 0.0, 0.0],
            s: [scale; 3],
            eta,
            rgb,
        }
    }

    /// Checks finiteness and ranges. `q` must be nonzero; it is not required to be unit here.
    pub fn check(&self, index: usize) -> Result<()> {
        let bad = |message: String| Error::InvalidPrimitive { index, message };
        let all = self
            .mu
            .iter()
            .chain(&self.q)
            .chain(&self.s)
            .chain(std::iter::once(&self.eta))
            .chain(&self.rgb);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(bad("non-finite field".into()));
        }
        if quat_norm(&self.q) < 1e-12 {
            return Err(bad("zero quaternion".into()));
        }
        if self.s.iter().any(|&v| v <= 0.0) {
            return Err(bad(format!("scale must be positive, got {:?}", self.s)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(bad(format!("opacity {} outside [0, 1]", self.eta)));
        }
        if self.rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(bad(format!("color {:?} outside [0, 1]", self.rgb)));
        }
        Ok(())
    }

    pub fn normalize_rotation(&mut self) {
        let n = quat_norm(&self.q);
        for v in &mut self.q {
            *v /= n;
        }
    }

    /// Restores the parameter ranges after an optimizer step.
    pub fn clamp_in_place(&mut self, min_scale: f64) {
        self.normalize_rotation();
        for v in &mut self.s {
            *v = v.max(min_scale);
        }
        self.eta = self.eta.clamp(0.0, 1.0);
        for v in &mut self.rgb {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

pub fn quat_norm(q: &[f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMeta {
    #[serde(default)]
    pub name: String,
    #[serde(default = "one")]
    pub unit_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl Default for SceneMeta {
    fn default() -> Self {
        Self {
            name: String::new(),
            unit_scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianScene {
    pub primitives: Vec<GaussianPrimitive>,
    pub fisher: Option<FisherAccumulator>,
    pub meta: SceneMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    #[serde(default)]
    meta: SceneMeta,
    gaussians: Vec<GaussianPrimitive>,
}

impl GaussianScene {
    pub fn new(primitives: Vec<GaussianPrimitive>) -> Self {
        Self {
            primitives,
            fisher: None,
            meta: SceneMeta::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Validates every primitive and renormalizes quaternions.
    pub fn validated(mut self) -> Result<Self> {
        for (i, p) in self.primitives.iter_mut().enumerate() {
            p.check(i)?;
            p.normalize_rotation();
        }
        if let Some(acc) = &self.fisher {
            if acc.information.len() != self.primitives.len() {
                return Err(Error::InvalidArgument(format!(
                    "fisher accumulator has {} entries for {} primitives",
                    acc.information.len(),
                    self.primitives.len()
                )));
            }
        }
        Ok(self)
    }

    /// Axis-aligned extent (largest side of the bounding box of the means).
    pub fn extent(&self) -> f64 {
        if self.primitives.is_empty() {
            return 1.0;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.primitives {
            for k in 0..3 {
                lo[k] = lo[k].min(p.mu[k]);
                hi[k] = hi[k].max(p.mu[k]);
            }
        }
        (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max).max(1e-6)
    }

    pub fn to_json(&self) -> String {
        let file = SceneFile {
            meta: self.meta.clone(),
            gaussians: self.primitives.clone(),
        };
        serde_json::to_string_pretty(&file).expect("scene serializes")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let file: SceneFile = serde_json::from_str(text).map_err(|e| {
            Error::parse(origin, format!("line {} column {}: {e}", e.line(), e.column()))
        })?;
        GaussianScene {
            primitives: file.gaussians,
            fisher: None,
            meta: file.meta,
        }
        .validated()
    }
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<GaussianScene> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GaussianScene::from_json(&text, path)
}

pub fn save_scene(scene: &GaussianScene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, scene.to_json()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraView {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation as a unit quaternion `(w, x, y, z)`.
    #[serde(rename = "q")]
    pub rotation: [f64; 4],
    #[serde(rename = "t")]
    pub translation: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl CameraView {
    pub fn check(&self, index: usize) -> Result<()> {
        let bad = |message: String| Error::InvalidCamera { index, message };
        let reals = [self.fx, self.fy, self.cx, self.cy, self.near, self.far];
        if reals
            .iter()
            .chain(&self.rotation)
            .chain(&self.translation)
            .any(|v| !v.is_finite())
        {
            return Err(bad("non-finite field".into()));
        }
        if self.width < 8 || self.height < 8 {
            return Err(bad(format!("image {}x{} smaller than 8x8", self.width, self.height)));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(bad("focal lengths must be positive".into()));
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(bad(format!("need 0 < near < far, got {} {}", self.near, self.far)));
        }
        if (quat_norm(&self.rotation) - 1.0).abs() > 1e-3 {
            return Err(bad("rotation is not a unit quaternion".into()));
        }
        Ok(())
    }

    /// Pinhole camera at `eye` looking at `target`. `down` is the world direction that should
    /// appear as image-down (it only needs to be non-parallel to the viewing direction).
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        down: [f64; 3],
        width: usize,
        height: usize,
        fov_x_deg: f64,
    ) -> Self {
        let eye_v = Vector3::from(eye);
        let fwd = (Vector3::from(target) - eye_v).normalize();
        let right = Vector3::from(down).cross(&fwd).normalize();
        let down = fwd.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let rot = Rotation3::from_matrix_unchecked(r);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let t = -(r * eye_v);
        let fx = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self {
            fx,
            fy: fx,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            rotation: [q.w, q.i, q.j, q.k],
            translation: [t.x, t.y, t.z],
            near: 0.05,
            far: 100.0,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.rotation;
        let n = quat_norm(&self.rotation);
        quat_to_matrix([w / n, x / n, y / n, z / n])
    }

    pub fn to_camera(&self, p: [f64; 3]) -> Vector3<f64> {
        self.rotation_matrix() * Vector3::from(p) + Vector3::from(self.translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        let c = -(self.rotation_matrix().transpose() * Vector3::from(self.translation));
        [c.x, c.y, c.z]
    }

    /// Pixel coordinates of a world point, or `None` behind the near plane.
    pub fn project_point(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let pc = self.to_camera(p);
        if pc.z <= self.near {
            return None;
        }
        Some((self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy, pc.z))
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Training,
    Extrapolated,
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub views: Vec<CameraView>,
    pub images: Option<Vec<AttributeImage>>,
    pub kind: ViewKind,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    views: Vec<CameraView>,
    kind: ViewKind,
}

impl ViewSet {
    pub fn new(views: Vec<CameraView>, kind: ViewKind) -> Self {
        Self {
            views,
            images: None,
            kind,
        }
    }

    pub fn with_images(mut self, images: Vec<AttributeImage>) -> Result<Self> {
        if images.len() != self.views.len() {
            return Err(Error::shape(
                format!("{} images", self.views.len()),
                format!("{} images", images.len()),
            ));
        }
        self.images = Some(images);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn image(&self, i: usize) -> Option<&AttributeImage> {
        self.images.as_ref().map(|v| &v[i])
    }

    pub fn to_json(&self) -> String {
        let file = CameraFile {
            views: self.views.clone(),
            kind: self.kind,
        };
        serde_json::to_string_pretty(&file).expect("cameras serialize")
    }
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<ViewSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CameraFile = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path, format!("line {} column {}: {e}", e.line(), e.column())))?;
    let mut views = file.views;
    for (i, v) in views.iter_mut().enumerate() {
        v.check(i)?;
        let n = quat_norm(&v.rotation);
        v.rotation.iter_mut().for_each(|c| *c /= n);
    }
    Ok(ViewSet::new(views, file.kind))
}

pub fn save_cameras(set: &ViewSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, set.to_json()).map_err(|e| Error::io(path, e))
}

/// Checks the unit-quaternion invariant on every primitive.
pub fn rotations_normalized(scene: &GaussianScene) -> bool {
    scene
        .primitives
        .iter()
        .all(|p| (quat_norm(&p.q) - 1.0).abs() <= UNIT_TOL)
}
