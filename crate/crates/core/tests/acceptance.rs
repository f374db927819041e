//! Acceptance criteria 1-12. Each criterion prints one PASS/FAIL line; the
//! test fails if any criterion fails.

use hysreg::atlas::{random_point, Atlas, ChartId};
use hysreg::charts::{conservation_drift, ChartModel, FIELD_CHARTS};
use hysreg::grazing::{self, CanardSystem, SnConfig};
use hysreg::model::{FoldBranch, ModelParams};
use hysreg::pws::PwsSystem;
use hysreg::regfun::RegFun;
use hysreg::roots::linear_fit;
use hysreg::sliding::{self, Ray, RayKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// criterion 1
const C1_GRID: [(f64, f64); 3] = [(1e-2, 1e-2), (2.5e-3, 5e-3), (6.25e-4, 2.5e-3)];
const C1_BOUND: f64 = 5.0;
const C1_TINY_EPS: f64 = 1e-8;
const C1_ALPHAS: [f64; 4] = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
const C1_EXPONENT: (f64, f64) = (1.8, 2.2);
// criterion 2
const C2_EPS: f64 = 0.02;
const C2_ALPHA: f64 = 0.01;
const C2_SEEDS: [f64; 2] = [-0.05, 0.1];
const C2_SEED_TOL: f64 = 1e-6;
const C2_CURVE_TOL: f64 = 1e-10;
const C2_CURVE_STEPS: usize = 3;
// criterion 3
const C3_EPS: [f64; 3] = [1e-4, 1e-6, 1e-8];
const C3_BOUND: f64 = 0.02;
// criterion 4
const C4_POINTS: usize = 100;
const C4_TOL: f64 = 1e-12;
const C4_DRIFT: f64 = 1e-9;
// criterion 5
const C5_BAND: (f64, f64) = (0.7, 1.3);
// criterion 6
const C6_NEAR: (f64, f64) = (-1.0, -0.9);
const C6_FAR_MIN: f64 = -0.1;
// criterion 7
const C7_INPUTS: [f64; 3] = [-0.9, -0.5, -0.1];
const C7_TOL: f64 = 1e-6;
// criterion 8
const C8_TOL: f64 = 1e-6;
// criterion 9
const C9_RHO: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];
const C9_SLOPE: (f64, f64) = (0.35, 0.65);
const C9_MIN_ANGLE: f64 = 1e-3;
// criterion 10
const C10_MU: (f64, f64) = (-0.05, 0.05);
const C10_DERIV_TOL: f64 = 5e-2;
// criterion 12
const C12_TOL: f64 = 1e-6;

fn list(v: &[f64]) -> String {
    format!("[{}]", v.iter().map(|x| format!("{x:.4e}")).collect::<Vec<_>>().join(", "))
}

fn slider(e: f64, a: f64) -> ModelParams {
    ModelParams::new(e, a, RegFun::arctan(), PwsSystem::slider()).unwrap()
}

fn criterion_1() -> (bool, String) {
    let rays = vec![
        Ray { id: "grid".into(), kind: RayKind::Grid, points: C1_GRID.to_vec() },
        Ray { id: "alpha".into(), kind: RayKind::Alpha, points: C1_ALPHAS.iter().map(|&a| (C1_TINY_EPS, a)).collect() },
    ];
    let fit = sliding::scaling_study(RegFun::arctan(), &PwsSystem::slider(), &rays, 0.0).unwrap();
    let grid = &fit.rays[0];
    let cdx = grid.samples.iter().map(|s| s.err_dx / s.scale).fold(0.0, f64::max);
    let ct = grid.samples.iter().map(|s| s.err_t / s.scale).fold(0.0, f64::max);
    let ray = &fit.rays[1];
    let inside = |v: f64| (C1_EXPONENT.0..=C1_EXPONENT.1).contains(&v);
    let ok = cdx <= C1_BOUND && ct <= C1_BOUND && inside(ray.exponent_dx) && inside(ray.exponent_t);
    (
        ok,
        format!(
            "grid ratio dx {cdx:.3} T {ct:.3} (<= {C1_BOUND}); alpha exponent dx {:.4} T {:.4} (in [{}, {}])",
            ray.exponent_dx, ray.exponent_t, C1_EXPONENT.0, C1_EXPONENT.1
        ),
    )
}

fn criterion_2() -> (bool, String) {
    let m = slider(C2_EPS, C2_ALPHA);
    let a = sliding::return_map(&m, 0.0, C2_SEEDS[0]).unwrap();
    let b = sliding::return_map(&m, 0.0, C2_SEEDS[1]).unwrap();
    let d = (a.p_out - b.p_out).abs();
    let c = sliding::invariant_curve_point(&m, 0.0).unwrap();
    let it = c.iterations_to(C2_CURVE_TOL);
    let ok = d <= C2_SEED_TOL && it.is_some_and(|n| n <= C2_CURVE_STEPS);
    (ok, format!("seed spread {d:.3e} (<= {C2_SEED_TOL:e}); curve steps {it:?} (<= {C2_CURVE_STEPS})"))
}

fn criterion_3() -> (bool, String) {
    let errs: Vec<f64> = C3_EPS
        .iter()
        .map(|&e| {
            let f = slider(e, 1e-2).find_folds().unwrap();
            let up = f.iter().find(|f| f.branch == FoldBranch::NearOne).unwrap();
            // (p_f - 1)/eps^{1/2} + pi^{-1/2}
            (-up.end_gap / e.sqrt() + std::f64::consts::PI.powf(-0.5)).abs()
        })
        .collect();
    let mono = errs.windows(2).all(|w| w[1] < w[0]);
    let last = errs[errs.len() - 1];
    (mono && last <= C3_BOUND, format!("scaled errors {}; last <= {C3_BOUND}", list(&errs)))
}

fn criterion_4() -> (bool, String) {
    let survey = Atlas::new(1).residual_survey(C4_POINTS, 4).unwrap();
    let rt = survey.iter().map(|r| r.round_trip).fold(0.0, f64::max);
    let ov = survey.iter().filter(|r| !r.overlap.is_nan()).map(|r| r.overlap).fold(0.0, f64::max);
    let full = survey.iter().all(|r| r.overlap.is_nan() || r.overlap_samples == C4_POINTS);
    let charts = survey.iter().filter(|r| !r.mirrored).count();
    let model = ChartModel::new(RegFun::arctan(), PwsSystem::curved_slider());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut drift = 0.0f64;
    for chart in FIELD_CHARTS {
        for _ in 0..5 {
            let pt = random_point(chart, false, &mut rng);
            drift = drift.max(conservation_drift(&model, &pt, 1.0).unwrap().0);
        }
    }
    (
        charts == 13 && full && rt < C4_TOL && ov < C4_TOL && drift < C4_DRIFT,
        format!("{charts} charts; round trip {rt:.3e}, overlap {ov:.3e} (< {C4_TOL:e}); drift {drift:.3e} (< {C4_DRIFT:e})"),
    )
}

fn criterion_5() -> (bool, String) {
    let m = ChartModel::new(RegFun::arctan(), PwsSystem::slider());
    let k = m.reg.k as i32;
    let r = |c: ChartId, v: [f64; 5]| sliding::slow_manifold_residual(&m, c, 1, v).unwrap();
    let q1 = r(ChartId::C1, [0.0, 0.2, 0.0, 0.5, 1e-3]) / r(ChartId::C1, [0.0, 0.2, 0.0, 0.25, 1e-3]);
    let q22 = r(ChartId::C22, [0.0, 0.3, 0.0, 1e-3, 1e-3]) / r(ChartId::C22, [0.0, 0.3, 0.0, 5e-4, 1e-3]);
    let e1 = 2f64.powi(k + 1);
    let in_band = |q: f64, e: f64| (e * C5_BAND.0..=e * C5_BAND.1).contains(&q);
    (in_band(q1, e1) && in_band(q22, 4.0), format!("C1 ratio {q1:.4} (expect {e1}), C22 ratio {q22:.4} (expect 4)"))
}

fn criterion_6() -> (bool, String) {
    let beta = RegFun::arctan().beta();
    let xs = grazing::chini_grid(beta, grazing::CHINI_FAR, grazing::CHINI_NEAR_GAP, grazing::CHINI_N);
    let s = grazing::chini_samples(1, beta, grazing::CHINI_C3, &xs).unwrap();
    let d: Vec<f64> = s.iter().map(|c| c.deriv).collect();
    let in_range = d.iter().all(|v| -1.0 < *v && *v < 0.0);
    let concave = s.iter().filter(|c| !c.second_diff.is_nan()).all(|c| c.second_diff < 0.0);
    let near = d[d.len() - 1];
    let far = d[0];
    let ok = in_range && concave && (C6_NEAR.0..=C6_NEAR.1).contains(&near) && far >= C6_FAR_MIN;
    (ok, format!("derivs in (-1,0): {in_range}; concave: {concave}; near {near:.4}; far {far:.4}"))
}

fn criterion_7() -> (bool, String) {
    let e: Vec<f64> = C7_INPUTS
        .iter()
        .map(|&x| (grazing::reflection_map(x, grazing::CHINI_C3, grazing::REFLECTION_HORIZON).unwrap() + x).abs())
        .collect();
    (e.iter().all(|v| *v <= C7_TOL), format!("|out + in| = {} (<= {C7_TOL:e})", list(&e)))
}

fn criterion_8() -> (bool, String) {
    let beta = RegFun::arctan().beta();
    let mut worst = 0.0f64;
    let mut saddle = true;
    for k in [1u32, 2] {
        for a in [0.5, 1.0, 2.0] {
            let fs = grazing::folded_saddle(k, beta, a, 0.0).unwrap();
            let ev = fs.numerical_eigenvalues();
            worst = worst
                .max(((ev[0] - fs.lambda_minus) / fs.lambda_minus).abs())
                .max(((ev[1] - fs.lambda_plus) / fs.lambda_plus).abs());
            saddle &= fs.lambda_plus * fs.lambda_minus < 0.0;
        }
    }
    (worst <= C8_TOL && saddle, format!("relative error {worst:.3e} (<= {C8_TOL:e}); all saddles: {saddle}"))
}

fn criterion_9() -> (bool, String) {
    let mut unique = true;
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    let mut offsets = Vec::new();
    for rho in C9_RHO {
        let sys = CanardSystem::new(RegFun::arctan(), 0.0, 1.0, rho).unwrap();
        let c = grazing::canard_intersection(&sys, 9).unwrap();
        unique &= c.sign_changes == 1 && c.angle.abs() >= C9_MIN_ANGLE;
        lx.push(rho.ln());
        ly.push(c.offset.abs().ln());
        offsets.push(c.offset);
    }
    let (slope, _, _) = linear_fit(&lx, &ly);
    (
        unique && (C9_SLOPE.0..=C9_SLOPE.1).contains(&slope),
        format!("unique transverse roots: {unique}; offsets {}; slope {slope:.4} (in [{}, {}])", list(&offsets), C9_SLOPE.0, C9_SLOPE.1),
    )
}

fn criterion_10() -> (bool, String) {
    let cfg = SnConfig { mu_range: C10_MU, ..SnConfig::default() };
    let scan = grazing::saddle_node_scan(&cfg).unwrap();
    let hits: Vec<_> = scan.collisions().collect();
    match hits.as_slice() {
        [c] => {
            let d = (c.derivative - 1.0).abs();
            (d <= C10_DERIV_TOL, format!("mu* {:.6e}, x* {:.6}, |R' - 1| {d:.3e} (<= {C10_DERIV_TOL:e})", c.mu, c.x))
        }
        _ => (false, format!("{} collisions, expected 1", hits.len())),
    }
}

fn criterion_11() -> (bool, String) {
    let cfg = SnConfig { mu_range: C10_MU, ..SnConfig::w2() };
    let wedge = grazing::classify_regime(cfg.epsilon, cfg.alpha, 1, &grazing::RegimeConstants::default()).unwrap().wedge;
    let r = grazing::saddle_node_search(&cfg);
    let not_found = matches!(r, Err(grazing::GrazingError::NotFound(_)));
    (
        wedge == grazing::Wedge::W2 && not_found,
        format!("eps {} alpha {} in {}; not found: {not_found}", cfg.epsilon, cfg.alpha, wedge.as_str()),
    )
}

fn criterion_12() -> (bool, String) {
    let beta = RegFun::arctan().beta();
    let mut worst = 0.0f64;
    for k in [1u32, 2] {
        for x in [-1.0, 1.0] {
            let f11 = |z: &[f64]| grazing::g11_field(k, beta, 0.05, 0.3, [z[0], z[1], z[2]]).to_vec();
            let f121 = |z: &[f64]| grazing::g121_field(k, beta, 0.3, [z[0], z[1], z[2], z[3]]).to_vec();
            let mut w1 = grazing::eigval1(k, x).to_vec();
            let mut w2 = grazing::eigval2(k, x).to_vec();
            w1.sort_by(|a, b| a.total_cmp(b));
            w2.sort_by(|a, b| a.total_cmp(b));
            let g1 = grazing::fd_eigenvalues(&f11, &[x, 0.0, 0.0]);
            let g2 = grazing::fd_eigenvalues(&f121, &[x, 0.0, 0.0, 0.0]);
            for (a, b) in w1.iter().zip(&g1).chain(w2.iter().zip(&g2)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    (worst <= C12_TOL, format!("max mismatch {worst:.3e} (<= {C12_TOL:e})"))
}

type Criterion = fn() -> (bool, String);

#[test]
fn acceptance() {
    let criteria: [(&str, Criterion); 12] = [
        ("1 filippov return map", criterion_1),
        ("2 p-contraction", criterion_2),
        ("3 fold asymptotics", criterion_3),
        ("4 chart atlas", criterion_4),
        ("5 slow-manifold residual orders", criterion_5),
        ("6 chini map", criterion_6),
        ("7 reflection map", criterion_7),
        ("8 folded saddle", criterion_8),
        ("9 canard", criterion_9),
        ("10 W1 saddle-node", criterion_10),
        ("11 W2 exclusion", criterion_11),
        ("12 grazing-chart eigenvalues", criterion_12),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        let t = std::time::Instant::now();
        let (ok, detail) = f();
        println!("{} criterion {name}: {detail} [{:.1}s]", if ok { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
        if !ok {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
