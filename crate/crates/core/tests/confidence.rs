use proptest::prelude::*;

use splatfix::confidence::{
    accumulate_training_fisher, certainty_attribute, render_confidence_map, render_uncertainty_map,
    resize_to_latent, uncertainty_attribute, FisherAccumulator, UncertaintyMode, EPSILON_H,
};
use splatfix::render::{per_gaussian_squared_jacobian, render_attribute, render_opacity, ParamMask};
use splatfix::synth::{blob_fixture, corrupt_scene, make_synthetic_scene, CorruptSpec, SynthSpec};
use splatfix::{AttributeImage, CameraView, GaussianPrimitive, GaussianScene, ViewKind, ViewSet};

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        seed,
        primitives: 120,
        width: 32,
        height: 32,
        ..SynthSpec::default()
    }
}

fn corrupted(seed: u64) -> (GaussianScene, Vec<usize>, ViewSet, ViewSet) {
    let (scene, train, extrap) = make_synthetic_scene(&small_spec(seed)).unwrap();
    let spec = CorruptSpec {
        count: 3,
        seed,
        ..CorruptSpec::default()
    };
    let (bad, floaters) = corrupt_scene(&scene, &train, &extrap, &spec).unwrap();
    (bad, floaters, train, extrap)
}

#[test]
fn invisible_gaussian_keeps_the_floor() {
    let (mut scene, view) = blob_fixture(1, 4, 24);
    scene
        .primitives
        .push(GaussianPrimitive::isotropic([0.0, 0.0, -5.0], 0.3, 0.5, [0.5; 3]));
    let views = ViewSet::new(vec![view], ViewKind::Training);
    let acc = accumulate_training_fisher(&scene, &views, ParamMask::default()).unwrap();
    assert_eq!(acc.information[4], EPSILON_H);
    assert_eq!(acc.views_seen, 1);
}

#[test]
fn single_view_single_gaussian_matches_squared_jacobian() {
    let (mut scene, view) = blob_fixture(2, 1, 24);
    scene.primitives[0].mu = [0.0, 0.0, 10.0];
    let views = ViewSet::new(vec![view], ViewKind::Training);
    let acc = accumulate_training_fisher(&scene, &views, ParamMask::default()).unwrap();
    let sq = per_gaussian_squared_jacobian(&view, &scene, ParamMask::default()).unwrap();
    assert!(sq[0] > 0.0);
    assert_eq!(acc.information[0], sq[0] + EPSILON_H);
}

#[test]
fn accumulation_is_additive_and_order_independent() {
    let (scene, train, _) = make_synthetic_scene(&small_spec(3)).unwrap();
    let mask = ParamMask::default();
    let both = ViewSet::new(train.views[..2].to_vec(), ViewKind::Training);
    let h2 = accumulate_training_fisher(&scene, &both, mask).unwrap();
    let a = accumulate_training_fisher(&scene, &ViewSet::new(vec![train.views[0]], ViewKind::Training), mask)
        .unwrap();
    let b = accumulate_training_fisher(&scene, &ViewSet::new(vec![train.views[1]], ViewKind::Training), mask)
        .unwrap();
    for i in 0..scene.len() {
        let sum = a.information[i] + b.information[i] - EPSILON_H;
        assert!((h2.information[i] - sum).abs() <= 1e-6 * sum.abs().max(EPSILON_H), "gaussian {i}");
    }

    let full = accumulate_training_fisher(&scene, &train, mask).unwrap();
    let mut views = train.views.clone();
    views.reverse();
    views.rotate_left(2);
    let permuted = accumulate_training_fisher(&scene, &ViewSet::new(views, ViewKind::Training), mask).unwrap();
    for (x, y) in full.information.iter().zip(&permuted.information) {
        assert!((x - y).abs() <= 1e-6 * x.abs());
    }
}

#[test]
fn empty_training_set_is_rejected() {
    let (scene, _) = blob_fixture(0, 2, 16);
    let empty = ViewSet::new(Vec::new(), ViewKind::Training);
    assert!(accumulate_training_fisher(&scene, &empty, ParamMask::default()).is_err());
}

#[test]
fn inverse_information_is_median_normalized_and_scale_free() {
    let (scene, _) = blob_fixture(0, 3, 16);
    let mut acc = FisherAccumulator::new(3, ParamMask::default());
    acc.information = vec![2.0, 8.0, 4.0];
    let u = uncertainty_attribute(&acc, UncertaintyMode::InverseInformation, None, &scene).unwrap();
    assert_eq!(u, vec![2.0, 0.5, 1.0]);
    acc.information.iter_mut().for_each(|h| *h *= 1e5);
    let v = uncertainty_attribute(&acc, UncertaintyMode::InverseInformation, None, &scene).unwrap();
    for (a, b) in u.iter().zip(&v) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(uncertainty_attribute(&acc, UncertaintyMode::LiteralAtView, None, &scene).is_err());
}

#[test]
fn literal_mode_uses_the_query_view() {
    let (scene, view) = blob_fixture(4, 5, 20);
    let acc = accumulate_training_fisher(&scene, &ViewSet::new(vec![view], ViewKind::Training), ParamMask::default())
        .unwrap();
    let u = uncertainty_attribute(&acc, UncertaintyMode::LiteralAtView, Some(&view), &scene).unwrap();
    let s_h = acc.scale();
    for (ui, hi) in u.iter().zip(&acc.information) {
        assert!((ui * s_h - (hi - EPSILON_H)).abs() <= 1e-9 * hi);
    }
}

#[test]
fn floaters_get_the_largest_uncertainty() {
    let (scene, floaters, train, _) = corrupted(5);
    let acc = accumulate_training_fisher(&scene, &train, ParamMask::default()).unwrap();
    let u = uncertainty_attribute(&acc, UncertaintyMode::InverseInformation, None, &scene).unwrap();
    let max = u.iter().cloned().fold(0.0, f64::max);
    for &f in &floaters {
        assert_eq!(acc.information[f], EPSILON_H);
        assert_eq!(u[f], acc.scale() / EPSILON_H);
        assert_eq!(u[f], max);
    }
}

#[test]
fn unit_certainty_map_is_squared_opacity() {
    let (scene, view) = blob_fixture(6, 8, 24);
    let attrs = certainty_attribute(&vec![0.0; scene.len()], 0.01).unwrap();
    let map = render_confidence_map(&view, &scene, &attrs).unwrap();
    let alpha = render_opacity(&view, &scene);
    for (m, a) in map.image.data().iter().zip(alpha.data()) {
        assert!((m - a * a).abs() < 1e-12);
    }

    let empty = GaussianScene::default();
    let attrs = certainty_attribute(&[], 0.01).unwrap();
    let map = render_confidence_map(&view, &empty, &attrs).unwrap();
    assert!(map.image.data().iter().all(|&v| v == 0.0));
}

/// Composited weight of the floaters at every pixel.
fn floater_share(view: &CameraView, scene: &GaussianScene, floaters: &[usize]) -> AttributeImage {
    let mark: Vec<f64> = (0..scene.len()).map(|i| if floaters.contains(&i) { 1.0 } else { 0.0 }).collect();
    render_attribute(view, scene, &mark, 1).unwrap()
}

/// Pixels dominated by floaters, and covered pixels the floaters do not touch.
fn floater_pixels(view: &CameraView, scene: &GaussianScene, floaters: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let share = floater_share(view, scene, floaters);
    let alpha = render_opacity(view, scene);
    let mut on = Vec::new();
    let mut off = Vec::new();
    for (p, (s, a)) in share.data().iter().zip(alpha.data()).enumerate() {
        if *s > 0.3 * a && *a > 1e-3 {
            on.push(p);
        } else if *s < 1e-6 && *a > 0.5 {
            off.push(p);
        }
    }
    (on, off)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn floater_pixels_are_less_confident() {
    for seed in [7u64, 8] {
        let (scene, floaters, train, extrap) = corrupted(seed);
        let acc = accumulate_training_fisher(&scene, &train, ParamMask::default()).unwrap();
        let u = uncertainty_attribute(&acc, UncertaintyMode::InverseInformation, None, &scene).unwrap();
        for gamma in [0.001, 0.01, 0.1] {
            let attrs = certainty_attribute(&u, gamma).unwrap();
            for view in &extrap.views {
                let (on, off) = floater_pixels(view, &scene, &floaters);
                if on.is_empty() || off.is_empty() {
                    continue;
                }
                let map = render_confidence_map(view, &scene, &attrs).unwrap();
                let d = map.image.data();
                let m_on = median(on.iter().map(|&p| d[p]).collect());
                let m_off = median(off.iter().map(|&p| d[p]).collect());
                assert!(m_on < m_off, "seed {seed} gamma {gamma}: {m_on} vs {m_off}");
            }
        }
    }
}

#[test]
fn uncertainty_map_is_unstable_while_certainty_is_bounded() {
    let spec = SynthSpec {
        width: 64,
        height: 64,
        ..small_spec(9)
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
        .expect("a view that sees a floater");
    let raw = render_uncertainty_map(view, &scene, &u).unwrap();
    let mut sorted = raw.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let p99 = sorted[(sorted.len() * 99) / 100 - 1];
    let max = *sorted.last().unwrap();
    assert!(max > 10.0 * p99, "max {max} p99 {p99}");
    for gamma in [0.001, 0.01, 0.1] {
        let map = render_confidence_map(view, &scene, &certainty_attribute(&u, gamma).unwrap()).unwrap();
        let (lo, hi) = map.image.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }
}

#[test]
fn latent_resize_keeps_range_and_identity() {
    let (scene, view) = blob_fixture(3, 10, 24);
    let attrs = certainty_attribute(&vec![0.5; scene.len()], 0.1).unwrap();
    let map = render_confidence_map(&view, &scene, &attrs).unwrap();
    assert_eq!(resize_to_latent(&map, 24, 24).unwrap(), map);
    for (w, h) in [(6, 6), (48, 40), (7, 30)] {
        let r = resize_to_latent(&map, w, h).unwrap();
        assert_eq!(r.image.shape(), (w, h, 1));
        let (lo, hi) = r.image.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn confidence_is_non_increasing_in_gamma(
        seed in 0u64..1000,
        g1 in 1e-4f64..1.0,
        factor in 1.0f64..5.0,
        u in proptest::collection::vec(0.0f64..100.0, 6),
    ) {
        let (scene, view) = blob_fixture(seed, 6, 16);
        let c1 = certainty_attribute(&u, g1).unwrap();
        let c2 = certainty_attribute(&u, g1 * factor).unwrap();
        for (a, b) in c1.certainty.iter().zip(&c2.certainty) {
            prop_assert!(a >= b);
            prop_assert!(*b > 0.0);
        }
        let m1 = render_confidence_map(&view, &scene, &c1).unwrap();
        let m2 = render_confidence_map(&view, &scene, &c2).unwrap();
        for (a, b) in m1.image.data().iter().zip(m2.image.data()) {
            prop_assert!(a + 1e-15 >= *b);
            prop_assert!((0.0..=1.0).contains(b));
        }
    }
}
