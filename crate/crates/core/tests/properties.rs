use std::sync::Arc;

use nalgebra::DMatrix;
use proptest::prelude::*;

use spacefill::anchors::{filling_distance, grid_points, largest_empty_ball};
use spacefill::design::DesignProblem;
use spacefill::dynamics::{
    rollout, DiscreteSystem, LinearSystem, MassSpringDamper, MsdParams, Rk4System,
};
use spacefill::gp::{cost_v, seard_kernel, GpPosterior};
use spacefill::optimizer::{optimize, OptimizerConfig};
use spacefill::{
    AnchorSet, Bounds, InputFamily, InputSignal, KernelConfig, MetricWeight, Points,
    RegionOfInterest,
};

fn kernel_strategy(dim: usize) -> impl Strategy<Value = KernelConfig> {
    (0.1f64..10.0, prop::collection::vec(0.3f64..3.0, dim))
        .prop_map(|(s, l)| KernelConfig::new(s, l, 0.0).unwrap())
}

fn point(dim: usize, half: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-half..half, dim)
}

fn scaled_dist_sq(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(ls)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum()
}

/// Keeps points at least one lengthscale from every earlier point.
fn thin(points: Vec<Vec<f64>>, ls: &[f64]) -> Vec<Vec<f64>> {
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for p in points {
        if kept.iter().all(|q| scaled_dist_sq(&p, q, ls) >= 1.0) {
            kept.push(p);
        }
    }
    kept
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kernel_is_symmetric(
        (cfg, a, b) in (1usize..=4).prop_flat_map(|d| (kernel_strategy(d), point(d, 5.0), point(d, 5.0)))
    ) {
        prop_assert_eq!(seard_kernel(&a, &b, &cfg).unwrap(), seard_kernel(&b, &a, &cfg).unwrap());
    }

    #[test]
    fn variance_stays_within_prior(
        (cfg, pts, q) in (1usize..=4).prop_flat_map(|d| (
            kernel_strategy(d).prop_map(|c| c.with_jitter(1e-8 * c.signal_variance()).unwrap()),
            prop::collection::vec(point(d, 3.0), 1..20),
            point(d, 3.0),
        ))
    ) {
        let data = Points::from_rows(&pts).unwrap();
        let gp = GpPosterior::fit(&data, &cfg).unwrap();
        let sf2 = cfg.signal_variance();
        let raw = gp.raw_variance(&q).unwrap();
        prop_assert!(raw >= -1e-8 * sf2 && raw <= sf2 * (1.0 + 1e-8), "{}", raw);
        let v = gp.variance(&q).unwrap();
        prop_assert!((0.0..=sf2).contains(&v));
    }

    #[test]
    fn variance_vanishes_exactly_on_data(
        (cfg, pts, queries) in (1usize..=4).prop_flat_map(|d| (
            kernel_strategy(d),
            prop::collection::vec(point(d, 6.0), 1..30),
            prop::collection::vec(point(d, 6.0), 10),
        ))
    ) {
        let pts = thin(pts, cfg.lengthscales());
        prop_assume!(pts.len() <= 20);
        let data = Points::from_rows(&pts).unwrap();
        let gp = GpPosterior::fit(&data, &cfg).unwrap();
        let tol = 1e-10 * cfg.signal_variance();
        for p in &pts {
            prop_assert!(gp.raw_variance(p).unwrap().abs() <= tol);
        }
        for q in queries {
            if pts.iter().all(|p| scaled_dist_sq(&q, p, cfg.lengthscales()) >= 0.25) {
                prop_assert!(gp.raw_variance(&q).unwrap() > tol);
            }
        }
    }

    #[test]
    fn adding_data_never_raises_variance(
        (cfg, pts, extra, queries) in (1usize..=4).prop_flat_map(|d| (
            kernel_strategy(d).prop_map(|c| c.with_jitter(1e-8 * c.signal_variance()).unwrap()),
            prop::collection::vec(point(d, 2.0), 1..20),
            point(d, 2.0),
            prop::collection::vec(point(d, 2.0), 10),
        ))
    ) {
        let base = Points::from_rows(&pts).unwrap();
        let mut grown = base.clone();
        grown.push(&extra).unwrap();
        let before = GpPosterior::fit(&base, &cfg).unwrap();
        let after = GpPosterior::fit(&grown, &cfg).unwrap();
        for q in &queries {
            let (v0, v1) = (before.raw_variance(q).unwrap(), after.raw_variance(q).unwrap());
            prop_assert!(v1 <= v0 + 1e-9 * cfg.signal_variance(), "{} -> {}", v0, v1);
        }
    }

    #[test]
    fn zero_cost_means_anchors_are_covered(
        (cfg, pts, m) in (1usize..=3).prop_flat_map(|d| (
            kernel_strategy(d),
            prop::collection::vec(point(d, 4.0), 2..20),
            1usize..10,
        ))
    ) {
        let pts = thin(pts, cfg.lengthscales());
        let m = m.min(pts.len());
        let d = pts[0].len();
        let region = RegionOfInterest::symmetric(&vec![4.0; d]).unwrap();
        let q = MetricWeight::identity(d);
        let eval = [60, 30, 15][d - 1];
        let anchors = Points::from_rows(&pts[..m]).unwrap();
        let eps = filling_distance(&anchors, &region, &q, eval).unwrap();
        let set = AnchorSet { points: anchors, epsilon: eps };
        let data = Points::from_rows(&pts).unwrap();
        let v = cost_v(&data, &set, &cfg).unwrap();
        prop_assert!(v.abs() <= 1e-10 * cfg.signal_variance());
        prop_assert!(filling_distance(&data, &region, &q, eval).unwrap() <= eps);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn multisine_is_periodic(
        bins in prop::collection::btree_set(1usize..30, 1..6),
        amps in prop::collection::vec(-5.0f64..5.0, 6),
        phases in prop::collection::vec(0.0f64..6.3, 6),
        k in 0usize..64,
    ) {
        let bins: Vec<usize> = bins.into_iter().collect();
        let nf = bins.len();
        let mut theta = amps[..nf].to_vec();
        theta.extend_from_slice(&phases[..nf]);
        let period = 64;
        let sig = InputSignal::new(
            InputFamily::Multisine { bins, base_fraction: 1.0 / period as f64, horizon: 3 * period, shared_amplitude: false },
            theta,
            None,
        ).unwrap();
        let a = sig.evaluate(k).unwrap()[0];
        let b = sig.evaluate(k + period).unwrap()[0];
        prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
    }

    #[test]
    fn multisine_jacobian_is_bounded(
        amps in prop::collection::vec(-50.0f64..50.0, 4),
        phases in prop::collection::vec(0.0f64..6.3, 4),
    ) {
        let bound = amps.iter().fold(1.0f64, |m, a| m.max(a.abs()));
        let mut theta = amps.clone();
        theta.extend(phases);
        let sig = InputSignal::new(
            InputFamily::Multisine { bins: vec![1, 3, 4, 9], base_fraction: 1.0 / 32.0, horizon: 32, shared_amplitude: false },
            theta,
            None,
        ).unwrap();
        for k in 0..=32 {
            let j = sig.theta_jacobian(k).unwrap();
            prop_assert!(j.iter().all(|v| v.is_finite() && v.abs() <= bound + 1e-12));
        }
    }

    #[test]
    fn projection_is_idempotent_and_non_expansive(
        a in prop::collection::vec(-10.0f64..10.0, 6),
        b in prop::collection::vec(-10.0f64..10.0, 6),
        lo in prop::collection::vec(-5.0f64..0.0, 6),
        width in prop::collection::vec(0.0f64..5.0, 6),
    ) {
        let bounds = Bounds { lower: lo.clone(), upper: lo.iter().zip(&width).map(|(l, w)| l + w).collect() };
        let family = InputFamily::FreeForm { horizon: 6, channels: 1 };
        let pa = InputSignal::new(family.clone(), a.clone(), Some(bounds.clone())).unwrap().project();
        let pb = InputSignal::new(family, b.clone(), Some(bounds.clone())).unwrap().project();
        prop_assert!(bounds.contains(pa.theta()));
        let twice = pa.project();
        prop_assert_eq!(twice.theta(), pa.theta());
        for i in 0..6 {
            prop_assert!((pa.theta()[i] - pb.theta()[i]).abs() <= (a[i] - b[i]).abs());
        }
    }

    #[test]
    fn free_form_reproduces_any_sequence(target in prop::collection::vec(-100.0f64..100.0, 1..40)) {
        let sig = InputSignal::new(
            InputFamily::FreeForm { horizon: target.len(), channels: 1 },
            target.clone(),
            None,
        ).unwrap();
        for (k, t) in target.iter().enumerate() {
            prop_assert_eq!(sig.evaluate(k + 1).unwrap()[0], *t);
        }
    }

    #[test]
    fn lti_rollout_and_sensitivity_match_closed_form(
        a in prop::collection::vec(-0.6f64..0.6, 4),
        b in prop::collection::vec(-1.0f64..1.0, 2),
        x0 in prop::collection::vec(-1.0f64..1.0, 2),
        u0 in -1.0f64..1.0,
        theta in prop::collection::vec(-2.0f64..2.0, 1..15),
    ) {
        let am = DMatrix::from_row_slice(2, 2, &a);
        let bm = DMatrix::from_row_slice(2, 1, &b);
        let sys = LinearSystem::new("lti", am.clone(), bm.clone(), 1.0).unwrap();
        let n = theta.len();
        let sig = InputSignal::free_form(theta.clone()).unwrap();
        let r = rollout(&sys, &sig, &x0, &[u0], n, true).unwrap();
        let sens = r.trajectory.sensitivities.as_ref().unwrap();
        let u = |j: usize| if j == 0 { u0 } else { theta[j - 1] };
        let x0v = nalgebra::DVector::from_column_slice(&x0);
        for (k, sk) in sens.iter().enumerate().take(n + 1) {
            let mut x = am.pow(k as u32) * &x0v;
            let mut s = DMatrix::zeros(2, n);
            for j in 0..k {
                let g = am.pow((k - 1 - j) as u32) * &bm;
                x += &g * u(j);
                if j >= 1 {
                    s.set_column(j - 1, &g.column(0));
                }
            }
            for i in 0..2 {
                prop_assert!((r.trajectory.states[k][i] - x[i]).abs() < 1e-9);
            }
            prop_assert!((sk - s).amax() < 1e-10);
        }
    }

    #[test]
    fn adding_a_point_never_raises_rho(
        pts in prop::collection::vec(point(2, 1.0), 1..10),
        extra in point(2, 1.0),
    ) {
        let region = RegionOfInterest::symmetric(&[1.0, 1.0]).unwrap();
        let q = MetricWeight::new(vec![1.0, 4.0]).unwrap();
        let data = Points::from_rows(&pts).unwrap();
        let mut grown = data.clone();
        grown.push(&extra).unwrap();
        prop_assert!(
            filling_distance(&grown, &region, &q, 40).unwrap()
                <= filling_distance(&data, &region, &q, 40).unwrap()
        );
    }

    #[test]
    fn rho_is_scale_equivariant(
        pts in prop::collection::vec(point(2, 1.0), 1..8),
        s in 0.1f64..50.0,
    ) {
        let region = RegionOfInterest::symmetric(&[1.0, 1.0]).unwrap();
        let q = MetricWeight::new(vec![1.0, 0.5]).unwrap();
        let scaled_region = RegionOfInterest::symmetric(&[s, s]).unwrap();
        let scaled_q = MetricWeight::new(vec![1.0 / (s * s), 0.5 / (s * s)]).unwrap();
        let scaled: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|v| v * s).collect()).collect();
        let r0 = filling_distance(&Points::from_rows(&pts).unwrap(), &region, &q, 50).unwrap();
        let r1 = filling_distance(&Points::from_rows(&scaled).unwrap(), &scaled_region, &scaled_q, 50).unwrap();
        prop_assert!((r0 - r1).abs() <= 1e-12 * (1.0 + r0), "{} vs {}", r0, r1);
    }
}

fn scalar_problem(anchors: &[[f64; 2]], bounds: Bounds) -> DesignProblem {
    let sys = Arc::new(
        LinearSystem::new(
            "scalar",
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            1.0,
        )
        .unwrap(),
    );
    let sig = InputSignal::new(
        InputFamily::FreeForm {
            horizon: 5,
            channels: 1,
        },
        vec![0.0; 5],
        Some(bounds),
    )
    .unwrap();
    DesignProblem::builder(sys, sig, 5)
        .anchors(AnchorSet {
            points: Points::from_rows(anchors).unwrap(),
            epsilon: 0.0,
        })
        .kernel(KernelConfig::with_default_jitter(1.0, vec![0.7, 0.7]).unwrap())
        .build()
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn optimizer_contract(
        anchors in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0).prop_map(|(a, b)| [a, b]), 1..5),
        theta0 in prop::collection::vec(-2.0f64..2.0, 5),
        limit in 0.2f64..1.5,
    ) {
        let bounds = Bounds { lower: vec![-limit; 5], upper: vec![limit; 5] };
        let p = scalar_problem(&anchors, bounds.clone());
        let cfg = OptimizerConfig { max_iterations: 60, record_theta: true, ..OptimizerConfig::default() };
        let r = optimize(&theta0, &p, &cfg).unwrap();
        for w in r.trace.records.windows(2) {
            prop_assert!(w[1].cost <= w[0].cost);
        }
        for rec in &r.trace.records {
            prop_assert!(bounds.contains(rec.theta.as_ref().unwrap()));
            prop_assert!(r.cost <= rec.cost);
        }
        prop_assert!(bounds.contains(&r.theta_hat));
        let again = optimize(&theta0, &p, &cfg).unwrap();
        prop_assert_eq!(again.trace, r.trace);
    }
}

#[test]
fn grid_data_has_zero_rho_and_any_gap_is_positive() {
    let region = RegionOfInterest::symmetric(&[1.0, 2.0]).unwrap();
    let q = MetricWeight::identity(2);
    let grid = grid_points(&region, &[20, 20]).unwrap();
    assert_eq!(filling_distance(&grid, &region, &q, 20).unwrap(), 0.0);
    let rows: Vec<&[f64]> = grid.iter().skip(1).collect();
    let partial = Points::from_rows(&rows).unwrap();
    assert!(filling_distance(&partial, &region, &q, 20).unwrap() > 0.0);
}

#[test]
fn finer_evaluation_grid_changes_rho_by_less_than_one_cell() {
    let half = [2.0, 20.0, 400.0];
    let region = RegionOfInterest::symmetric(&half).unwrap();
    let q = MetricWeight::from_half_widths(&half).unwrap();
    let cell = 2.0 / 99.0;
    for c in [8, 6, 5] {
        let anchors = grid_points(&region, &[c, c, c]).unwrap();
        let coarse = filling_distance(&anchors, &region, &q, 100).unwrap();
        let fine = filling_distance(&anchors, &region, &q, 200).unwrap();
        assert!((fine - coarse).abs() < cell, "{c}: {coarse} vs {fine}");
    }
}

#[test]
fn largest_ball_center_is_in_region() {
    let region = RegionOfInterest::symmetric(&[1.0, 1.0]).unwrap();
    let data = Points::from_rows(&[[0.9, 0.9], [-0.5, 0.2]]).unwrap();
    let (c, r) = largest_empty_ball(&data, &region, &MetricWeight::identity(2), 50).unwrap();
    assert!(region.contains(&c));
    assert!(r > 0.0);
}

fn msd(dt: f64) -> Rk4System<MassSpringDamper> {
    Rk4System::new(
        "msd",
        MassSpringDamper::new(MsdParams::default()).unwrap(),
        dt,
    )
    .unwrap()
}

fn simulate(sys: &dyn DiscreteSystem, x0: [f64; 2], force: f64, steps: usize) -> Vec<f64> {
    let mut x = x0.to_vec();
    for _ in 0..steps {
        x = sys.step(&x, &[force]).unwrap();
    }
    x
}

#[test]
fn rk4_error_shrinks_sixteenfold_when_step_halves() {
    let (t, dt) = (1.0, 0.02);
    let x0 = [0.5, -3.0];
    let steps = |h: f64| (t / h).round() as usize;
    let reference = simulate(&msd(dt / 100.0), x0, 40.0, steps(dt / 100.0));
    let err = |h: f64| {
        let x = simulate(&msd(h), x0, 40.0, steps(h));
        x.iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    let ratio = err(dt) / err(dt / 2.0);
    assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn unforced_msd_settles_at_origin() {
    let sys = msd(0.01);
    for x0 in [[1.0, 0.0], [0.0, 1.0], [-0.6, 0.8], [0.3, -0.4]] {
        let x = simulate(&sys, x0, 0.0, 6100);
        assert!(x[0].hypot(x[1]) < 1e-3, "{x0:?} -> {x:?}");
    }
}
