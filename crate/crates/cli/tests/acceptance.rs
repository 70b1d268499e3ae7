//! Acceptance gate. Each criterion prints one PASS/FAIL line and asserts it.
//! Criteria run one at a time so their wall-clock limits are measured alone.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use splatfix::confidence::{
    accumulate_training_fisher, certainty_attribute, render_confidence_map, render_uncertainty_map,
    uncertainty_attribute, ConfidenceMap, GammaLevels, UncertaintyMode,
};
use splatfix::guidance::{
    denoise_with_guidance, external_denoiser_bridge, guided_step, BridgeRequest, Denoiser, GuidanceConfig,
    NoisyOracleDenoiser, OracleDenoiser, PriorDenoiser,
};
use splatfix::metrics::psnr;
use splatfix::pipeline::{run_ablation, fix_trajectory, standard_variants, AblationCase, PipelineConfig};
use splatfix::ply::{export_ply_3dgs, import_ply_3dgs};
use splatfix::refine::{affine_apply, refine_3d, AffineColor, FixedViewSet, RefineConfig};
use splatfix::render::{backprop, render_attribute, render_color, render_opacity, ParamMask};
use splatfix::rng::{normal, rng_for, streams, uniform};
use splatfix::scene::{load_scene, save_scene};
use splatfix::synth::{blob_fixture, corrupt_scene, make_synthetic_scene, CorruptSpec, SceneKind, SynthSpec};
use splatfix::{AttributeImage, CameraView, GaussianPrimitive, GaussianScene, ViewKind, ViewSet};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes straight to stdout so the line shows even when test output is captured.
fn line(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
    let _ = out.flush();
}

fn report(n: u32, title: &str, pass: bool, detail: &str, started: Instant, limit_s: f64) {
    let secs = started.elapsed().as_secs_f64();
    let in_time = secs <= limit_s;
    let ok = pass && in_time;
    line(&format!(
        "criterion {n:>2} {}: {title}; {detail}; {secs:.1}s (limit {limit_s}s)",
        if ok { "PASS" } else { "FAIL" }
    ));
    assert!(pass, "criterion {n} failed: {detail}");
    assert!(in_time, "criterion {n} took {secs:.1}s, limit {limit_s}s");
}

fn max_abs_diff(a: &AttributeImage, b: &AttributeImage) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_image(seed: u64, w: usize, h: usize, c: usize) -> AttributeImage {
    let mut rng = rng_for(seed, 77);
    let data = (0..w * h * c).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
    AttributeImage::from_data(w, h, c, data).unwrap()
}

fn constant_maps(levels: &GammaLevels, w: usize, h: usize, value: f64) -> Vec<ConfidenceMap> {
    levels
        .as_array()
        .iter()
        .map(|&gamma| ConfidenceMap {
            image: AttributeImage::filled(w, h, 1, value),
            gamma,
            view_id: None,
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Corrupted textured wall shared by criteria 5, 6 and 10.
struct Case {
    corrupted: GaussianScene,
    train: ViewSet,
    extrap: ViewSet,
}

fn wall_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        seed,
        primitives: 120,
        width: 32,
        height: 32,
        ..SynthSpec::default()
    }
}

fn wall_corruption(seed: u64) -> CorruptSpec {
    CorruptSpec {
        count: 3,
        seed,
        ..CorruptSpec::default()
    }
}

fn wall_case(seed: u64) -> Case {
    let (truth, train, extrap) = make_synthetic_scene(&wall_spec(seed)).unwrap();
    let (corrupted, _) = corrupt_scene(&truth, &train, &extrap, &wall_corruption(seed)).unwrap();
    Case {
        corrupted,
        train,
        extrap,
    }
}

const REFINE_STEPS: usize = 100;
const SEEDS: u64 = 20;

fn pipeline_config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        refine: RefineConfig {
            steps: REFINE_STEPS,
            ..RefineConfig::default()
        },
        seed,
        ..PipelineConfig::default()
    }
}

fn extrap_psnr(scene: &GaussianScene, set: &ViewSet) -> f64 {
    let truth = set.images.as_ref().unwrap();
    let total: f64 = set
        .views
        .iter()
        .zip(truth)
        .map(|(v, t)| psnr(&render_color(v, scene), t).unwrap())
        .sum();
    total / set.len() as f64
}

// ---------------------------------------------------------------- 1

fn param_mut(g: &mut GaussianPrimitive, k: usize) -> &mut f64 {
    match k {
        0..=2 => &mut g.mu[k],
        3..=6 => &mut g.q[k - 3],
        7..=9 => &mut g.s[k - 7],
        10 => &mut g.eta,
        _ => &mut g.rgb[k - 11],
    }
}

#[test]
fn criterion_01_gradient_oracle() {
    let _g = serial();
    let t = Instant::now();
    const H: f64 = 1e-4;
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let (scene, view) = blob_fixture(seed, 10, 32);
        let mut rng = rng_for(seed, 99);
        let up_data = (0..32 * 32 * 3).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        let up = AttributeImage::from_data(32, 32, 3, up_data).unwrap();
        let grads = backprop(&view, &scene, &up).unwrap();
        for i in 0..scene.len() {
            let analytic = grads.grads[i].to_array();
            for (k, &a) in analytic.iter().enumerate() {
                let mut plus = scene.clone();
                *param_mut(&mut plus.primitives[i], k) += H;
                let mut minus = scene.clone();
                *param_mut(&mut minus.primitives[i], k) -= H;
                let (rp, rm) = (render_color(&view, &plus), render_color(&view, &minus));
                let fd: f64 = rp
                    .data()
                    .iter()
                    .zip(rm.data())
                    .zip(up.data())
                    .map(|((p, m), u)| (p - m) / (2.0 * H) * u)
                    .sum();
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
            }
        }
    }
    report(
        1,
        "renderer gradients vs central differences, 20 scenes, full mask",
        worst < 1e-4,
        &format!("worst relative error {worst:.2e} < 1e-4"),
        t,
        60.0,
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_guidance_algebra() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = rng_for(2, 5);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let s = uniform(&mut rng, 1e-3, 1.0);
        let sp = uniform(&mut rng, 0.0, s * 0.999);
        let x = random_image(uniform(&mut rng, 0.0, 1e9) as u64, 4, 4, 3);
        let g = random_image(uniform(&mut rng, 0.0, 1e9) as u64, 4, 4, 3);
        let out = guided_step(&x, &g, s, sp).unwrap();
        for ((o, xi), gi) in out.data().iter().zip(x.data()).zip(g.data()) {
            let sub = gi + sp * (xi - gi) / s;
            worst = worst.max((o - sub).abs() / sub.abs().max(1e-12));
        }
    }
    report(
        2,
        "guided Euler step equals the substitution form, 1000 draws",
        worst <= 1e-6,
        &format!("worst relative difference {worst:.2e} <= 1e-6"),
        t,
        5.0,
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_guidance_fixpoints() {
    let _g = serial();
    let t = Instant::now();
    let case = wall_case(3);
    let view = &case.extrap.views[0];
    let render = render_color(view, &case.corrupted);
    let alpha = render_opacity(view, &case.corrupted);
    let (w, h) = (render.width(), render.height());
    let target = case.extrap.images.as_ref().unwrap()[0].clone();

    let cfg = GuidanceConfig::default();
    let mut noisy = NoisyOracleDenoiser::new(target.clone(), 0.2, 3);
    let trusted = denoise_with_guidance(&render, &constant_maps(&cfg.gamma, w, h, 1.0), &alpha, &mut noisy, &cfg, 0)
        .unwrap();
    let d_render = max_abs_diff(&trusted, &render);

    let cfg = GuidanceConfig {
        beta: 0.0,
        ..GuidanceConfig::default()
    };
    let mut oracle = OracleDenoiser::new(target.clone());
    let free = denoise_with_guidance(&render, &constant_maps(&cfg.gamma, w, h, 0.0), &alpha, &mut oracle, &cfg, 0)
        .unwrap();
    let d_target = max_abs_diff(&free, &target);
    report(
        3,
        "M^c = 1 returns the render; oracle with M^c = 0, beta = 0 returns its target",
        d_render <= 1e-6 && d_target <= 1e-5,
        &format!("render diff {d_render:.2e} <= 1e-6, target diff {d_target:.2e} <= 1e-5"),
        t,
        10.0,
    );
}

// ---------------------------------------------------------------- 4

fn floater_share(view: &CameraView, scene: &GaussianScene, floaters: &[usize]) -> AttributeImage {
    let mark: Vec<f64> = (0..scene.len()).map(|i| if floaters.contains(&i) { 1.0 } else { 0.0 }).collect();
    render_attribute(view, scene, &mark, 1).unwrap()
}

#[test]
fn criterion_04_uncertainty_instability_and_bounded_confidence() {
    let _g = serial();
    let t = Instant::now();

    // instability: one faint, tiny floater seen at 64x64
    let spec = SynthSpec {
        width: 64,
        height: 64,
        ..wall_spec(9)
    };
    let (scene, train, extrap) = make_synthetic_scene(&spec).unwrap();
    let faint = CorruptSpec {
        count: 1,
        opacity: (0.05, 0.1),
        scale: (0.003, 0.006),
        seed: 9,
        ..CorruptSpec::default()
    };
    let (scene, floaters) = corrupt_scene(&scene, &train, &extrap, &faint).unwrap();
    let acc = accumulate_training_fisher(&scene, &train, ParamMask::default()).unwrap();
    let u = uncertainty_attribute(&acc, UncertaintyMode::InverseInformation, None, &scene).unwrap();
    let view = extrap
        .views
        .iter()
        .find(|v| floater_share(v, &scene, &floaters).min_max().1 > 0.0)
        .expect("a view that sees the floater");
    let raw = render_uncertainty_map(view, &scene, &u).unwrap();
    let mut sorted = raw.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let p99 = sorted[(sorted.len() * 99) / 100 - 1];
    let max = *sorted.last().unwrap();
    let mut bounded = true;
    for gamma in GammaLevels::default().as_array() {
        let map = render_confidence_map(view, &scene, &certainty_attribute(&u, gamma).unwrap()).unwrap();
        let (lo, hi) = map.image.min_max();
        bounded &= lo >= 0.0 && hi <= 1.0;
    }

    // ordering: floater footprints against clean covered pixels
    let mut comparisons = 0;
    let mut ordered = 0;
    for seed in [7u64, 8] {
        let (truth, train, extrap) = make_synthetic_scene(&wall_spec(seed)).unwrap();
        let (scene, floaters) = corrupt_scene(&truth, &train, &extrap, &wall_corruption(seed)).unwrap();
        let acc = accumulate_training_fisher(&scene, &train, ParamMask::default()).unwrap();
        let u = uncertainty_attribute(&acc, UncertaintyMode::InverseInformation, None, &scene).unwrap();
        for gamma in GammaLevels::default().as_array() {
            let attrs = certainty_attribute(&u, gamma).unwrap();
            for view in &extrap.views {
                let share = floater_share(view, &scene, &floaters);
                let alpha = render_opacity(view, &scene);
                let map = render_confidence_map(view, &scene, &attrs).unwrap();
                let (mut on, mut off) = (Vec::new(), Vec::new());
                for ((s, a), c) in share.data().iter().zip(alpha.data()).zip(map.image.data()) {
                    if *s > 0.3 * a && *a > 1e-3 {
                        on.push(*c);
                    } else if *s < 1e-6 && *a > 0.5 {
                        off.push(*c);
                    }
                }
                if on.is_empty() || off.is_empty() {
                    continue;
                }
                comparisons += 1;
                if median(on) < median(off) {
                    ordered += 1;
                }
            }
        }
    }
    let unstable = max > 10.0 * p99;
    report(
        4,
        "uncertainty map unstable, certainty bounded, floaters less confident",
        unstable && bounded && comparisons > 0 && ordered == comparisons,
        &format!(
            "max/p99 = {:.1} > 10, confidence in [0,1]: {bounded}, floater median below clean median in {ordered}/{comparisons} views",
            max / p99
        ),
        t,
        60.0,
    );
}

// ---------------------------------------------------------------- 5

/// Mean improvement over seeds 0..20, measured when the harness was calibrated.
const PINNED_MEAN_GAIN_DB: f64 = 6.4357;
const PIN_TOLERANCE_DB: f64 = 0.01;

#[test]
fn criterion_05_floater_suppression() {
    let _g = serial();
    let t = Instant::now();
    let mut gains = Vec::new();
    for seed in 0..SEEDS {
        let case = wall_case(seed);
        let truth = case.extrap.images.clone().unwrap();
        let mut den = NoisyOracleDenoiser::per_view(truth, 0.05, seed);
        let out = fix_trajectory(&case.corrupted, &case.train, &case.extrap, &pipeline_config(seed), &mut den).unwrap();
        gains.push(extrap_psnr(&out.scene, &case.extrap) - extrap_psnr(&case.corrupted, &case.extrap));
    }
    let wins = gains.iter().filter(|g| **g > 0.0).count();
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    let pinned = (mean - PINNED_MEAN_GAIN_DB).abs() <= PIN_TOLERANCE_DB;
    report(
        5,
        "refined beats initial extrapolated PSNR with a noisy oracle",
        wins >= 18 && mean > 0.0 && pinned,
        &format!(
            "wins {wins}/20 (need 18), mean gain {mean:.4} dB (pinned {PINNED_MEAN_GAIN_DB} +- {PIN_TOLERANCE_DB})"
        ),
        t,
        600.0,
    );
}

// ---------------------------------------------------------------- 6

/// One-sided sign test: P(X >= wins) for X ~ Binomial(n, 1/2).
fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut total = 0.0;
    for k in wins..=n {
        let mut c = 1.0;
        for j in 0..k {
            c = c * (n - j) as f64 / (j + 1) as f64;
        }
        total += c;
    }
    total / 2f64.powi(n as i32)
}

#[test]
fn criterion_06_ablation_directions() {
    let _g = serial();
    let t = Instant::now();
    let cases: Vec<AblationCase> = (0..SEEDS)
        .map(|seed| {
            let case = wall_case(seed);
            AblationCase {
                name: format!("wall-{seed}"),
                seed,
                scene: case.corrupted,
                train: case.train,
                trajectory: case.extrap,
            }
        })
        .collect();
    // posterior-mean denoiser whose prior mean is the truth plus an iid hallucination
    let mut make = |c: &AblationCase| -> splatfix::Result<Box<dyn Denoiser>> {
        let mut rng = rng_for(c.seed, streams::DENOISER);
        let means = c
            .trajectory
            .images
            .as_ref()
            .unwrap()
            .iter()
            .map(|g| g.map(|v| v + 0.05 * normal(&mut rng)))
            .collect();
        Ok(Box::new(PriorDenoiser::per_view(means, 0.05)))
    };
    let table = run_ablation(&pipeline_config(0), &standard_variants(), &cases, &mut make).unwrap();
    let full = table.psnr_by_case("full");
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut all = true;
    let mut parts = Vec::new();
    for (variant, asserted) in [
        ("no-confidence-guidance", true),
        ("no-interleave", true),
        ("no-overall-guidance", true),
        ("no-affine", false),
    ] {
        let other = table.psnr_by_case(variant);
        let wins = full.iter().zip(&other).filter(|(a, b)| a > b).count();
        let p = sign_test_p(wins, full.len());
        let ok = mean(&full) >= mean(&other) && p < 0.05;
        if asserted {
            all &= ok;
        }
        parts.push(format!(
            "{variant} {:.2} dB, full wins {wins}/{} p={p:.3}{}",
            mean(&other),
            full.len(),
            if asserted {
                if ok { " ok" } else { " MISS" }
            } else {
                " (reported only)"
            }
        ));
        line(&format!("    criterion 6 detail: {}", parts.last().unwrap()));
    }
    report(
        6,
        "full method vs module toggles, and confidence vs opacity-only guidance",
        all,
        &format!("full {:.2} dB; {}", mean(&full), parts.join("; ")),
        t,
        1800.0,
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_affine_recovery() {
    let _g = serial();
    let t = Instant::now();
    let planted = AffineColor {
        a_f: [[0.9, 0.05, 0.0], [0.0, 1.08, -0.04], [0.03, 0.0, 0.93]],
        a_b: [0.04, -0.03, 0.02],
    };
    let want = planted.to_array();
    let (mut affine_err, mut color_err): (f64, f64) = (0.0, 0.0);
    for seed in [6, 10] {
        let spec = SynthSpec {
            kind: SceneKind::RandomBlobs,
            seed,
            primitives: 60,
            width: 32,
            height: 32,
            ..SynthSpec::default()
        };
        let (truth, train, extrap) = make_synthetic_scene(&spec).unwrap();
        let mut fixed = FixedViewSet::new();
        for (i, v) in extrap.views.iter().enumerate() {
            fixed.push(i, *v, affine_apply(&render_color(v, &truth), &planted).unwrap()).unwrap();
        }
        let config = RefineConfig {
            steps: 2000,
            p_f: 0.5,
            trainable: ParamMask {
                mu: false,
                q: false,
                s: false,
                eta: false,
                rgb: true,
            },
            seed,
            ..RefineConfig::default()
        };
        let (out, _) = refine_3d(&truth, &train, &mut fixed, None, &config).unwrap();
        for e in fixed.entries() {
            for (g, w) in e.affine.to_array().iter().zip(&want) {
                affine_err = affine_err.max((g - w).abs());
            }
        }
        for (a, b) in out.primitives.iter().zip(&truth.primitives) {
            for c in 0..3 {
                color_err = color_err.max((a.rgb[c] - b.rgb[c]).abs());
            }
        }
    }
    report(
        7,
        "planted color transform recovered by the per-view affine",
        affine_err < 5e-2 && color_err < 5e-2,
        &format!("affine max error {affine_err:.4} < 0.05, color max drift {color_err:.4} < 0.05"),
        t,
        120.0,
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_fisher_additivity_and_monotonicity() {
    let _g = serial();
    let t = Instant::now();
    let mask = ParamMask::default();
    let mut worst: f64 = 0.0;
    let mut decreases = 0;
    for seed in 0..3 {
        let (scene, train, _) = make_synthetic_scene(&wall_spec(seed)).unwrap();
        let subset = |r: std::ops::Range<usize>| ViewSet::new(train.views[r].to_vec(), ViewKind::Training);
        let a = accumulate_training_fisher(&scene, &subset(0..2), mask).unwrap();
        let b = accumulate_training_fisher(&scene, &subset(2..train.len()), mask).unwrap();
        let union = accumulate_training_fisher(&scene, &train, mask).unwrap();
        let eps = splatfix::confidence::EPSILON_H;
        for i in 0..scene.len() {
            let sum = a.information[i] + b.information[i] - eps;
            worst = worst.max((union.information[i] - sum).abs() / sum.abs().max(eps));
        }
        let mut prev = accumulate_training_fisher(&scene, &subset(0..1), mask).unwrap();
        for k in 2..=train.len() {
            let next = accumulate_training_fisher(&scene, &subset(0..k), mask).unwrap();
            decreases += next.information.iter().zip(&prev.information).filter(|(n, p)| n < p).count();
            prev = next;
        }
    }
    report(
        8,
        "Fisher information adds over view sets and never decreases",
        worst <= 1e-6 && decreases == 0,
        &format!("worst relative additivity error {worst:.2e} <= 1e-6, decreases {decreases}"),
        t,
        30.0,
    );
}

// ---------------------------------------------------------------- 9

fn spawn_oracle_responder(dir: PathBuf, stop: Arc<AtomicBool>, target: AttributeImage) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        let mut served = 0;
        while !stop.load(Ordering::Relaxed) {
            let json = dir.join(format!("req_{served}.json"));
            match fs::read_to_string(&json) {
                Ok(text) => {
                    let req: BridgeRequest = serde_json::from_str(&text).unwrap();
                    let x = AttributeImage::read_pfm(dir.join(format!("req_{served}.pfm"))).unwrap();
                    let v = x.zip_map(&target, |a, b| (a - b) / req.sigma_t).unwrap();
                    let tmp = dir.join(format!("res_{served}.tmp"));
                    v.write_pfm(&tmp).unwrap();
                    fs::rename(&tmp, dir.join(format!("res_{served}.pfm"))).unwrap();
                    served += 1;
                }
                Err(_) => thread::sleep(Duration::from_millis(1)),
            }
        }
    })
}

/// Bridge images are 32-bit: per-step rounding of x_t and the velocity, over ten steps.
const PFM_LOOPBACK_TOL: f64 = 1e-5;

#[test]
fn criterion_09_interop() {
    let _g = serial();
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (scene, _, extrap) = make_synthetic_scene(&wall_spec(9)).unwrap();
    let ply = dir.path().join("scene.ply");
    export_ply_3dgs(&scene, &ply).unwrap();
    let imported = import_ply_3dgs(&ply).unwrap();
    let json = dir.path().join("scene.json");
    save_scene(&imported, &json).unwrap();
    let reloaded = load_scene(&json).unwrap();
    export_ply_3dgs(&reloaded, dir.path().join("again.ply")).unwrap();
    let again = import_ply_3dgs(dir.path().join("again.ply")).unwrap();
    let mut ply_err: f64 = 0.0;
    for ((o, r), a) in scene.primitives.iter().zip(&reloaded.primitives).zip(&again.primitives) {
        for p in [r, a] {
            ply_err = ply_err.max((o.eta - p.eta).abs());
            for c in 0..3 {
                ply_err = ply_err.max((o.s[c] - p.s[c]).abs()).max((o.rgb[c] - p.rgb[c]).abs());
            }
        }
    }

    let view = &extrap.views[0];
    let render = render_color(view, &scene);
    let alpha = render_opacity(view, &scene);
    let target = extrap.images.as_ref().unwrap()[1].clone();
    let cfg = GuidanceConfig {
        steps: 10,
        seed: 9,
        ..GuidanceConfig::default()
    };
    let acc = accumulate_training_fisher(&scene, &ViewSet::new(extrap.views.clone(), ViewKind::Training), ParamMask::default())
        .unwrap();
    let u = uncertainty_attribute(&acc, UncertaintyMode::InverseInformation, None, &scene).unwrap();
    let maps: Vec<ConfidenceMap> = cfg
        .gamma
        .as_array()
        .iter()
        .map(|&g| render_confidence_map(view, &scene, &certainty_attribute(&u, g).unwrap()).unwrap())
        .collect();
    let bridge_dir = dir.path().join("bridge");
    fs::create_dir(&bridge_dir).unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let handle = spawn_oracle_responder(bridge_dir.clone(), stop.clone(), target.clone());
    let mut bridge = external_denoiser_bridge(&bridge_dir, Duration::from_secs(30)).unwrap();
    let via_bridge = denoise_with_guidance(&render, &maps, &alpha, &mut bridge, &cfg, 0).unwrap();
    stop.store(true, Ordering::Relaxed);
    handle.join().unwrap();
    let direct = denoise_with_guidance(&render, &maps, &alpha, &mut OracleDenoiser::new(target), &cfg, 0).unwrap();
    let bridge_err = max_abs_diff(&via_bridge, &direct);
    report(
        9,
        "PLY to scene JSON round trip, and bridge loopback vs in-process oracle",
        ply_err < 1e-6 && bridge_err < PFM_LOOPBACK_TOL,
        &format!("eta/s/rgb max error {ply_err:.2e} < 1e-6, bridge max diff {bridge_err:.2e} < {PFM_LOOPBACK_TOL:e}"),
        t,
        30.0,
    );
}

// ---------------------------------------------------------------- 10

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_splatfix")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn criterion_10_determinism() {
    let _g = serial();
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("config.json");
    let text = serde_json::json!({
        "synth": {"primitives": 120, "width": 32, "height": 32},
        "corrupt": {"count": 3},
        "pipeline": {"refine": {"steps": REFINE_STEPS}},
    });
    fs::write(&cfg, text.to_string()).unwrap();
    run_cli(&["synth", "--config", p(&cfg), "--seed", "11", "--out", p(&d.join("gt"))]);
    run_cli(&[
        "corrupt",
        "--config",
        p(&cfg),
        "--seed",
        "11",
        "--scene",
        p(&d.join("gt/scene.json")),
        "--train",
        p(&d.join("gt/train.json")),
        "--trajectory",
        p(&d.join("gt/extrap.json")),
        "--out",
        p(&d.join("bad")),
    ]);
    for run in ["a", "b"] {
        run_cli(&[
            "refine",
            "--config",
            p(&cfg),
            "--seed",
            "11",
            "--denoiser",
            "noisy-oracle",
            "--scene",
            p(&d.join("bad/scene.json")),
            "--train",
            p(&d.join("gt/train.json")),
            "--train-images",
            p(&d.join("gt/train")),
            "--trajectory",
            p(&d.join("gt/extrap.json")),
            "--trajectory-images",
            p(&d.join("gt/extrap")),
            "--out",
            p(&d.join(run)),
        ]);
    }
    let mut identical = true;
    for name in ["records.json", "scene_final.json"] {
        identical &= fs::read(d.join("a").join(name)).unwrap() == fs::read(d.join("b").join(name)).unwrap();
    }
    report(
        10,
        "repeated CLI refine runs with one seed",
        identical,
        &format!("records.json and scene_final.json byte-identical: {identical}"),
        t,
        600.0,
    );
}
