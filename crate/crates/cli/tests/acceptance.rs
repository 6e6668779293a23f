//! End-to-end acceptance checks against the published numbers. Each test
//! prints a single `PASS`/`FAIL` line before asserting.

use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spacefill::anchors::{anchor_epsilon, filling_distance, grid_points};
use spacefill::experiment::{
    gradcheck_samples, run_experiment, schroeder_baseline, ExperimentConfig, RunOptions,
};
use spacefill::gp::{cost_v, GpPosterior};
use spacefill::{AnchorSet, KernelConfig, MetricWeight, Points, RegionOfInterest};

fn preset(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../presets")
        .join(name);
    ExperimentConfig::load(&path).unwrap()
}

fn report(id: u32, title: &str, pass: bool, elapsed: Duration, detail: &str) {
    println!(
        "criterion {id} [{title}]: {} ({:.1}s) {detail}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_1_anchor_epsilon() {
    let t = Instant::now();
    let region = RegionOfInterest::symmetric(&[2.0, 2.0]).unwrap();
    let q = MetricWeight::identity(2);
    let expected = [2.83, 1.41, 0.943];
    let got: Vec<f64> = [2, 3, 4]
        .iter()
        .map(|&c| {
            anchor_epsilon(&grid_points(&region, &[c, c]).unwrap(), &region, &q, 100).unwrap()
        })
        .collect();
    let elapsed = t.elapsed();
    let pass = got.iter().zip(expected).all(|(g, e)| (g - e).abs() <= 0.05)
        && elapsed < Duration::from_secs(1);
    report(
        1,
        "anchor epsilon",
        pass,
        elapsed,
        &format!("eps = {got:.4?}, expected {expected:?} ± 0.05"),
    );
    assert!(pass);
}

#[test]
fn criterion_2_anchor_rho_table() {
    let t = Instant::now();
    let cfg = preset("msd_table1.toml");
    let region = cfg.region().unwrap();
    let q = cfg.metric().unwrap();
    let expected = [0.2449, 0.3429, 0.4286];
    let got: Vec<f64> = [8, 6, 5]
        .iter()
        .map(|&c| {
            filling_distance(&grid_points(&region, &[c, c, c]).unwrap(), &region, &q, 100).unwrap()
        })
        .collect();
    let elapsed = t.elapsed();
    let pass = got.iter().zip(expected).all(|(g, e)| (g - e).abs() <= 0.01)
        && elapsed < Duration::from_secs(30);
    report(
        2,
        "anchor rho table",
        pass,
        elapsed,
        &format!("rho = {got:.4?}, expected {expected:?} ± 0.01"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_lti_monte_carlo() {
    let t = Instant::now();
    let cfg = preset("lti_fig1.toml");
    let r = run_experiment(&cfg, &RunOptions::default()).unwrap();
    let elapsed = t.elapsed();
    let mut pass = elapsed < Duration::from_secs(600) && r.groups.len() == 3;
    let mut detail = Vec::new();
    for g in &r.groups {
        let s = g.summary.final_rho.as_ref().unwrap();
        let frac = g.summary.below_epsilon as f64 / g.runs.len() as f64;
        let ok = g.runs.len() == 20 && frac >= 0.95 && s.median < 0.8 * g.epsilon;
        pass &= ok;
        detail.push(format!(
            "M={}: {}/{} below eps={:.3}, median {:.3} (0.8 eps = {:.3}) {}",
            g.anchors,
            g.summary.below_epsilon,
            g.runs.len(),
            g.epsilon,
            s.median,
            0.8 * g.epsilon,
            if ok { "ok" } else { "miss" }
        ));
    }
    report(3, "LTI Monte Carlo", pass, elapsed, &detail.join("; "));
    assert!(pass);
}

#[test]
fn criterion_4_msd_monte_carlo() {
    let t = Instant::now();
    let cfg = preset("msd_table1.toml");
    let r = run_experiment(&cfg, &RunOptions::default()).unwrap();
    let elapsed = t.elapsed();
    let bands = [(512, 0.24, 0.46), (216, 0.26, 0.46), (125, 0.28, 0.48)];
    let mut pass = elapsed < Duration::from_secs(3600) && r.groups.len() == 3;
    let mut detail = Vec::new();
    for (g, (m, lo, hi)) in r.groups.iter().zip(bands) {
        let init = g.summary.initial_rho.as_ref().map_or(f64::NAN, |s| s.mean);
        let fin = g.summary.final_rho.as_ref().map_or(f64::NAN, |s| s.mean);
        let ok = g.anchors == m
            && g.summary.completed == 10
            && (1.15..=1.40).contains(&init)
            && (lo..=hi).contains(&fin);
        pass &= ok;
        detail.push(format!(
            "M={}: mean rho0 {init:.4} (want [1.15, 1.40]), mean rho {fin:.4} (want [{lo}, {hi}]) {}",
            g.anchors,
            if ok { "ok" } else { "miss" }
        ));
    }
    report(4, "MSD Monte Carlo", pass, elapsed, &detail.join("; "));
    assert!(pass);
}

#[test]
fn criterion_5_schroeder_baseline() {
    let t = Instant::now();
    let cfg = preset("msd_table1.toml");
    let b = schroeder_baseline(&cfg, Some(100.0)).unwrap();
    let elapsed = t.elapsed();
    let pass = (1.03..=1.33).contains(&b.rho) && elapsed < Duration::from_secs(30);
    report(
        5,
        "Schroeder baseline",
        pass,
        elapsed,
        &format!("rho = {:.4} at amplitude 100, want [1.03, 1.33]", b.rho),
    );
    assert!(pass);
}

/// Points in a box scaled by the lengthscales, pairwise at least one
/// lengthscale apart.
fn separated_points(rng: &mut ChaCha8Rng, n: usize, ls: &[f64], half: &[f64]) -> Vec<Vec<f64>> {
    let mut pts: Vec<Vec<f64>> = Vec::new();
    while pts.len() < n {
        let p: Vec<f64> = half.iter().map(|h| rng.random_range(-h..*h)).collect();
        let far = pts.iter().all(|q| {
            p.iter()
                .zip(q)
                .zip(ls)
                .map(|((a, b), l)| ((a - b) / l).powi(2))
                .sum::<f64>()
                >= 1.0
        });
        if far {
            pts.push(p);
        }
    }
    pts
}

#[test]
fn criterion_6_lemma_properties() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut failures = Vec::new();
    for case in 0..200 {
        let d = rng.random_range(1..=4usize);
        let n = rng.random_range(1..=20usize);
        let sf2 = rng.random_range(0.1..10.0);
        let ls: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
        let spread = 1.5 * (n as f64).powf(1.0 / d as f64) + 1.0;
        let half: Vec<f64> = ls.iter().map(|l| l * spread).collect();
        let cfg = KernelConfig::new(sf2, ls.clone(), 0.0).unwrap();

        let pts = separated_points(&mut rng, n, &ls, &half);
        let data = Points::from_rows(&pts).unwrap();
        let gp = GpPosterior::fit(&data, &cfg).unwrap();
        for p in &pts {
            let v = gp.raw_variance(p).unwrap();
            if v.abs() > 1e-10 * sf2 {
                failures.push(format!("case {case}: training variance {v:e}"));
            }
        }
        for _ in 0..10 {
            let q: Vec<f64> = half.iter().map(|h| rng.random_range(-h..*h)).collect();
            let v = gp.raw_variance(&q).unwrap();
            if pts.iter().any(|p| p == &q) {
                continue;
            }
            if v <= 0.0 {
                failures.push(format!("case {case}: off-data variance {v:e}"));
            }
        }

        // Anchors inside the data: zero cost, so the data are at least as
        // dense as the anchors.
        let region =
            RegionOfInterest::new(half.iter().map(|h| -h).collect(), half.clone()).unwrap();
        let weight = MetricWeight::new(ls.iter().map(|l| 1.0 / (l * l)).collect()).unwrap();
        let m = rng.random_range(1..=n);
        let anchors = Points::from_rows(&pts[..m]).unwrap();
        let eval = [100, 60, 25, 12][d - 1];
        let eps = anchor_epsilon(&anchors, &region, &weight, eval).unwrap();
        let set = AnchorSet {
            points: anchors,
            epsilon: eps,
        };
        let v = cost_v(&data, &set, &cfg).unwrap();
        if v.abs() <= 1e-10 * sf2 {
            let rho = filling_distance(&data, &region, &weight, eval).unwrap();
            if rho > eps {
                failures.push(format!("case {case}: rho {rho} > eps {eps}"));
            }
        } else {
            failures.push(format!("case {case}: anchors-as-data cost {v:e}"));
        }
    }
    let elapsed = t.elapsed();
    let pass = failures.is_empty();
    report(
        6,
        "Lemma-1 properties",
        pass,
        elapsed,
        &format!(
            "200 instances, {} failures {:?}",
            failures.len(),
            failures.iter().take(3).collect::<Vec<_>>()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_gradient_check() {
    let t = Instant::now();
    let lti = gradcheck_samples(&preset("lti_fig1.toml"), 2, 20).unwrap();
    let msd = gradcheck_samples(&preset("msd_table1.toml"), 0, 20).unwrap();
    let elapsed = t.elapsed();
    let worst = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let pass = lti.len() == 20
        && msd.len() == 20
        && lti.iter().all(|e| *e < 1e-4)
        && msd.iter().all(|e| *e < 1e-3);
    report(
        7,
        "gradient check",
        pass,
        elapsed,
        &format!(
            "worst LTI {:.2e} (< 1e-4), worst MSD {:.2e} (< 1e-3)",
            worst(&lti),
            worst(&msd)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_variance_monotonicity() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures = Vec::new();
    for case in 0..200 {
        let d = rng.random_range(1..=4usize);
        let n = rng.random_range(1..=20usize);
        let sf2 = rng.random_range(0.1..10.0);
        let ls: Vec<f64> = (0..d).map(|_| rng.random_range(0.3..2.0)).collect();
        let cfg = KernelConfig::with_default_jitter(sf2, ls).unwrap();
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()
        };
        let rows: Vec<Vec<f64>> = (0..n).map(|_| draw(&mut rng)).collect();
        let base = Points::from_rows(&rows).unwrap();
        let mut grown = base.clone();
        grown.push(&draw(&mut rng)).unwrap();
        let before = GpPosterior::fit(&base, &cfg).unwrap();
        let after = GpPosterior::fit(&grown, &cfg).unwrap();
        for _ in 0..10 {
            let q = draw(&mut rng);
            let (v0, v1) = (
                before.raw_variance(&q).unwrap(),
                after.raw_variance(&q).unwrap(),
            );
            if v1 > v0 + 1e-9 * sf2 {
                failures.push(format!("case {case}: {v0:e} -> {v1:e}"));
            }
        }
    }
    let elapsed = t.elapsed();
    let pass = failures.is_empty();
    report(
        8,
        "variance monotonicity",
        pass,
        elapsed,
        &format!(
            "200 instances x 10 queries, {} failures {:?}",
            failures.len(),
            failures.iter().take(3).collect::<Vec<_>>()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_determinism() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../presets/lti_fig1.toml");
    let run = |out: &str, jobs: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_spacefill"))
            .arg("mc")
            .arg("--config")
            .arg(&cfg)
            .args(["--runs", "4", "--jobs", jobs, "--out"])
            .arg(dir.path().join(out))
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(dir.path().join(out).join("report.json")).unwrap()
    };
    let a = run("a", "1");
    let b = run("b", "1");
    let c = run("c", "3");
    let elapsed = t.elapsed();
    let pass = a == b && a == c;
    report(
        9,
        "determinism",
        pass,
        elapsed,
        &format!("report.json {} bytes, reruns identical: {}", a.len(), pass),
    );
    assert!(pass);
}
