//! Seeded synthetic scenes with a training arc and an extrapolated trajectory.
//!
//! World frame matches the camera convention: `y` points down, the scene sits
//! around `+z`. Training cameras lie on a horizontal arc of radius `radius`
//! around the look-at point; the extrapolated trajectory continues the arc
//! past its end (and a little below it), so its camera centers are at least
//! `d_min` away from every training center. Ground-truth images for both sets
//! are rendered from the generated scene.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{project, render_color};
use crate::rng::{normal, rng_for, streams, uniform, SplatRng};
use crate::scene::{CameraView, GaussianPrimitive, GaussianScene, SceneMeta, ViewKind, ViewSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    TexturedWall,
    BoxRoom,
    RandomBlobs,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "textured-wall" => Ok(SceneKind::TexturedWall),
            "box-room" => Ok(SceneKind::BoxRoom),
            "random-blobs" => Ok(SceneKind::RandomBlobs),
            other => Err(Error::UnknownKind(format!("scene kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub kind: SceneKind,
    pub seed: u64,
    pub primitives: usize,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub train_views: usize,
    pub extrap_views: usize,
    /// Minimum distance between any extrapolated and any training camera center.
    pub d_min: f64,
    /// Distance from the cameras to the look-at point.
    pub radius: f64,
    /// Half-angle of the training arc, degrees.
    pub train_arc_deg: f64,
    /// Angular step between successive extrapolated views, degrees.
    pub extrap_step_deg: f64,
    /// Vertical offset of the extrapolated trajectory (negative is up).
    pub extrap_lift: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: SceneKind::TexturedWall,
            seed: 0,
            primitives: 160,
            width: 48,
            height: 48,
            fov_deg: 60.0,
            train_views: 5,
            extrap_views: 3,
            d_min: 0.8,
            radius: 4.0,
            train_arc_deg: 10.0,
            extrap_step_deg: 4.0,
            extrap_lift: -0.2,
        }
    }
}

const DOWN: [f64; 3] = [0.0, 1.0, 0.0];

fn arc_position(spec: &SynthSpec, angle_deg: f64, lift: f64) -> [f64; 3] {
    let a = angle_deg.to_radians();
    [spec.radius * a.sin(), lift, spec.radius * (1.0 - a.cos())]
}

fn look_target(spec: &SynthSpec) -> [f64; 3] {
    [0.0, 0.0, spec.radius]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn training_views(spec: &SynthSpec) -> Vec<CameraView> {
    let n = spec.train_views.max(1);
    (0..n)
        .map(|i| {
            let f = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            let angle = -spec.train_arc_deg + 2.0 * spec.train_arc_deg * f;
            CameraView::look_at(
                arc_position(spec, angle, 0.0),
                look_target(spec),
                DOWN,
                spec.width,
                spec.height,
                spec.fov_deg,
            )
        })
        .collect()
}

/// The trajectory starts at the first arc angle whose center clears `d_min`.
pub fn extrapolated_views(spec: &SynthSpec) -> Vec<CameraView> {
    let train: Vec<[f64; 3]> = training_views(spec).iter().map(|v| v.center()).collect();
    let clears = |p: [f64; 3]| train.iter().all(|&c| dist(p, c) >= spec.d_min);
    let mut start = spec.train_arc_deg;
    while !clears(arc_position(spec, start, spec.extrap_lift)) {
        start += 0.25;
    }
    (0..spec.extrap_views)
        .map(|i| {
            let angle = start + i as f64 * spec.extrap_step_deg;
            CameraView::look_at(
                arc_position(spec, angle, spec.extrap_lift),
                look_target(spec),
                DOWN,
                spec.width,
                spec.height,
                spec.fov_deg,
            )
        })
        .collect()
}

/// Smooth procedural texture in [0, 1]^3 over wall coordinates.
fn texture(u: f64, v: f64, phase: [f64; 3]) -> [f64; 3] {
    let stripes = 0.5 + 0.5 * (3.1 * u + phase[0]).sin() * (2.3 * v + phase[1]).cos();
    let rings = 0.5 + 0.5 * (4.0 * (u * u + v * v).sqrt() + phase[2]).sin();
    let checker = if ((u * 1.5).floor() + (v * 1.5).floor()) as i64 % 2 == 0 { 0.8 } else { 0.2 };
    [
        (0.15 + 0.7 * stripes).clamp(0.0, 1.0),
        (0.1 + 0.45 * rings + 0.35 * checker).clamp(0.0, 1.0),
        (0.2 + 0.6 * (1.0 - stripes) * 0.5 + 0.3 * checker).clamp(0.0, 1.0),
    ]
}

fn random_unit_quat(rng: &mut SplatRng) -> [f64; 4] {
    let q = [normal(rng), normal(rng), normal(rng), normal(rng)];
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

fn seen_by_any(p: [f64; 3], views: &[CameraView], margin: f64) -> bool {
    views.iter().any(|v| {
        v.project_point(p).is_some_and(|(x, y, _)| {
            x >= margin && y >= margin && x <= v.width as f64 - 1.0 - margin && y <= v.height as f64 - 1.0 - margin
        })
    })
}

fn wall_points(spec: &SynthSpec, rng: &mut SplatRng, train: &[CameraView], z_of: impl Fn(f64, f64) -> f64) -> Vec<[f64; 3]> {
    let half = spec.radius * 1.2;
    let mut pts = Vec::with_capacity(spec.primitives);
    let mut tries = 0;
    while pts.len() < spec.primitives && tries < spec.primitives * 1000 {
        tries += 1;
        let x = uniform(rng, -half, half);
        let y = uniform(rng, -half, half);
        let p = [x, y, z_of(x, y)];
        if seen_by_any(p, train, 1.0) {
            pts.push(p);
        }
    }
    pts
}

/// Builds the ground-truth scene plus training and extrapolated view sets (with images).
pub fn make_synthetic_scene(spec: &SynthSpec) -> Result<(GaussianScene, ViewSet, ViewSet)> {
    let train = training_views(spec);
    let extrap = extrapolated_views(spec);
    let mut rng = rng_for(spec.seed, streams::SCENE);
    let phase = [(); 3].map(|_| uniform(&mut rng, 0.0, TAU));
    let wall_z = spec.radius;

    let primitives: Vec<GaussianPrimitive> = match spec.kind {
        SceneKind::TexturedWall => {
            let pts = wall_points(spec, &mut rng, &train, |_, _| wall_z);
            let area = visible_area(spec);
            let spacing = (area / spec.primitives.max(1) as f64).sqrt();
            pts.into_iter()
                .map(|mut p| {
                    p[2] += uniform(&mut rng, -0.02, 0.02);
                    let sxy = spacing * uniform(&mut rng, 0.55, 0.75);
                    GaussianPrimitive {
                        mu: p,
                        q: [1.0, 0.0, 0.0, 0.0],
                        s: [sxy, sxy * uniform(&mut rng, 0.8, 1.2), 0.01],
                        eta: uniform(&mut rng, 0.85, 0.95),
                        rgb: texture(p[0], p[1], phase),
                    }
                })
                .collect()
        }
        SceneKind::BoxRoom => {
            // back wall plus a floor slab and a side wall inside the training frusta
            let faces = 3;
            let per = spec.primitives / faces;
            let mut prims = Vec::with_capacity(spec.primitives);
            let spacing = (visible_area(spec) / spec.primitives.max(1) as f64).sqrt();
            for face in 0..faces {
                let count = if face + 1 == faces { spec.primitives - per * (faces - 1) } else { per };
                let mut placed = 0;
                let mut tries = 0;
                while placed < count && tries < count * 2000 {
                    tries += 1;
                    let (p, s) = match face {
                        0 => {
                            let x = uniform(&mut rng, -6.0, 6.0);
                            let y = uniform(&mut rng, -6.0, 6.0);
                            ([x, y, wall_z + 0.5], [spacing * 0.8, spacing * 0.8, 0.01])
                        }
                        1 => {
                            let x = uniform(&mut rng, -6.0, 6.0);
                            let z = uniform(&mut rng, 1.5, wall_z + 0.5);
                            ([x, 1.2, z], [spacing * 0.8, 0.01, spacing * 0.8])
                        }
                        _ => {
                            let y = uniform(&mut rng, -3.0, 1.2);
                            let z = uniform(&mut rng, 1.5, wall_z + 0.5);
                            ([-1.6, y, z], [0.01, spacing * 0.8, spacing * 0.8])
                        }
                    };
                    if !seen_by_any(p, &train, 1.0) {
                        continue;
                    }
                    placed += 1;
                    let tint = [0.25 * face as f64, 0.1, -0.15 * face as f64];
                    let base = texture(p[0] + p[2], p[1] + p[2], phase);
                    prims.push(GaussianPrimitive {
                        mu: p,
                        q: [1.0, 0.0, 0.0, 0.0],
                        s,
                        eta: uniform(&mut rng, 0.85, 0.95),
                        rgb: [
                            (base[0] + tint[0]).clamp(0.0, 1.0),
                            (base[1] + tint[1]).clamp(0.0, 1.0),
                            (base[2] + tint[2]).clamp(0.0, 1.0),
                        ],
                    });
                }
            }
            prims
        }
        SceneKind::RandomBlobs => {
            let mut prims = Vec::with_capacity(spec.primitives);
            let mut tries = 0;
            while prims.len() < spec.primitives && tries < spec.primitives * 1000 {
                tries += 1;
                let p = [
                    uniform(&mut rng, -2.0, 2.0),
                    uniform(&mut rng, -2.0, 2.0),
                    uniform(&mut rng, 0.6 * wall_z, 1.3 * wall_z),
                ];
                if !seen_by_any(p, &train, 2.0) {
                    continue;
                }
                let base = uniform(&mut rng, 0.08, 0.3);
                prims.push(GaussianPrimitive {
                    mu: p,
                    q: random_unit_quat(&mut rng),
                    s: [
                        base * uniform(&mut rng, 0.6, 1.4),
                        base * uniform(&mut rng, 0.6, 1.4),
                        base * uniform(&mut rng, 0.6, 1.4),
                    ],
                    eta: uniform(&mut rng, 0.3, 0.9),
                    rgb: [
                        uniform(&mut rng, 0.05, 0.95),
                        uniform(&mut rng, 0.05, 0.95),
                        uniform(&mut rng, 0.05, 0.95),
                    ],
                });
            }
            prims
        }
    };

    let mut scene = GaussianScene::new(primitives);
    scene.meta = SceneMeta {
        name: format!("{:?}", spec.kind).to_lowercase(),
        unit_scale: 1.0,
        seed: spec.seed,
    };
    let train_images = train.iter().map(|v| render_color(v, &scene)).collect();
    let extrap_images = extrap.iter().map(|v| render_color(v, &scene)).collect();
    let train_set = ViewSet::new(train, ViewKind::Training).with_images(train_images)?;
    let extrap_set = ViewSet::new(extrap, ViewKind::Extrapolated).with_images(extrap_images)?;
    Ok((scene, train_set, extrap_set))
}

/// Rough area of the wall seen by the central training camera.
fn visible_area(spec: &SynthSpec) -> f64 {
    let half_w = spec.radius * (0.5 * spec.fov_deg.to_radians()).tan();
    let half_h = half_w * spec.height as f64 / spec.width as f64;
    let arc = spec.radius * spec.train_arc_deg.to_radians();
    4.0 * (half_w + arc) * half_h
}

/// Floater corruption settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptSpec {
    pub count: usize,
    pub opacity: (f64, f64),
    pub scale: (f64, f64),
    /// Floater depth range, as a fraction of the camera-space depth of the scene centroid.
    /// Training frusta cover most of the space near the scene, so floaters sit close to the
    /// extrapolated camera.
    pub depth_fraction: (f64, f64),
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for CorruptSpec {
    fn default() -> Self {
        Self {
            count: 5,
            opacity: (0.5, 0.9),
            scale: (0.03, 0.08),
            depth_fraction: (0.08, 0.3),
            seed: 0,
            max_retries: 500,
        }
    }
}

/// Adds floaters that are visible from the extrapolated views but project to no
/// pixel of any training view. Returns the new scene and the floater indices.
pub fn corrupt_scene(
    scene: &GaussianScene,
    train: &ViewSet,
    extrapolated: &ViewSet,
    spec: &CorruptSpec,
) -> Result<(GaussianScene, Vec<usize>)> {
    let mut out = scene.clone();
    out.fisher = None;
    let mut floaters = Vec::with_capacity(spec.count);
    if spec.count == 0 {
        return Ok((out, floaters));
    }
    if extrapolated.is_empty() {
        return Err(Error::Placement {
            placed: 0,
            requested: spec.count,
        });
    }
    let mut rng = rng_for(spec.seed, streams::CORRUPT);
    let centroid = scene_centroid(scene);
    for f in 0..spec.count {
        let view = &extrapolated.views[f % extrapolated.len()];
        let center = view.center();
        let reach = view.to_camera(centroid).z.max(4.0 * view.near);
        let mut placed = None;
        for _ in 0..spec.max_retries {
            let px = uniform(&mut rng, 0.15, 0.85) * (view.width as f64 - 1.0);
            let py = uniform(&mut rng, 0.15, 0.85) * (view.height as f64 - 1.0);
            let depth = reach * uniform(&mut rng, spec.depth_fraction.0, spec.depth_fraction.1);
            let world = unproject(view, px, py, depth);
            let s = uniform(&mut rng, spec.scale.0, spec.scale.1);
            let g = GaussianPrimitive {
                mu: world,
                q: random_unit_quat(&mut rng),
                s: [s, s * uniform(&mut rng, 0.6, 1.0), s * uniform(&mut rng, 0.6, 1.0)],
                eta: uniform(&mut rng, spec.opacity.0, spec.opacity.1),
                rgb: floater_color(&mut rng),
            };
            let single = GaussianScene::new(vec![g]);
            let hidden = train.views.iter().all(|v| project(v, &single).is_empty());
            let shown = !project(view, &single).is_empty();
            if hidden && shown && dist(world, center) > view.near {
                placed = Some(g);
                break;
            }
        }
        match placed {
            Some(g) => {
                floaters.push(out.primitives.len());
                out.primitives.push(g);
            }
            None => {
                return Err(Error::Placement {
                    placed: floaters.len(),
                    requested: spec.count,
                })
            }
        }
    }
    Ok((out, floaters))
}

fn scene_centroid(scene: &GaussianScene) -> [f64; 3] {
    if scene.is_empty() {
        return [0.0, 0.0, 4.0];
    }
    let n = scene.len() as f64;
    let mut c = [0.0; 3];
    for p in &scene.primitives {
        for (ck, m) in c.iter_mut().zip(p.mu) {
            *ck += m / n;
        }
    }
    c
}

fn unproject(view: &CameraView, px: f64, py: f64, depth: f64) -> [f64; 3] {
    let xc = (px - view.cx) / view.fx * depth;
    let yc = (py - view.cy) / view.fy * depth;
    let r = view.rotation_matrix();
    let pc = nalgebra::Vector3::new(xc, yc, depth) - nalgebra::Vector3::from(view.translation);
    let w = r.transpose() * pc;
    [w.x, w.y, w.z]
}

fn floater_color(rng: &mut SplatRng) -> [f64; 3] {
    // saturated primaries stand out against the wall texture
    let palette = [[0.95, 0.1, 0.1], [0.1, 0.9, 0.15], [0.95, 0.9, 0.1], [0.9, 0.1, 0.9], [0.05, 0.05, 0.05], [1.0, 1.0, 1.0]];
    let i = (uniform(rng, 0.0, palette.len() as f64) as usize).min(palette.len() - 1);
    palette[i]
}

/// Small random scene in front of a single camera at the origin, used by gradient checks.
/// Opacities stay below the alpha cap so the render is smooth in every parameter.
pub fn blob_fixture(seed: u64, count: usize, size: usize) -> (GaussianScene, CameraView) {
    let view = CameraView::look_at([0.0; 3], [0.0, 0.0, 1.0], DOWN, size, size, 60.0);
    let mut rng = rng_for(seed, streams::SCENE);
    let prims = (0..count)
        .map(|_| {
            let z = uniform(&mut rng, 8.0, 14.0);
            let base = uniform(&mut rng, 0.8, 1.4);
            GaussianPrimitive {
                mu: [uniform(&mut rng, -0.4, 0.4) * z, uniform(&mut rng, -0.4, 0.4) * z, z],
                q: random_unit_quat(&mut rng),
                s: [
                    base * uniform(&mut rng, 0.75, 1.3),
                    base * uniform(&mut rng, 0.75, 1.3),
                    base * uniform(&mut rng, 0.75, 1.3),
                ],
                eta: uniform(&mut rng, 0.2, 0.8),
                rgb: [
                    uniform(&mut rng, 0.05, 0.95),
                    uniform(&mut rng, 0.05, 0.95),
                    uniform(&mut rng, 0.05, 0.95),
                ],
            }
        })
        .collect();
    (GaussianScene::new(prims), view)
}
