//! Experiment runner behind the `hysreg` binary. Each subcommand writes one
//! CSV into the output directory, prints a summary and checks its criterion.
//!
//! Exit codes: 0 success, 1 configuration or I/O error, 2 criterion
//! violated, 3 numerical failure.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::atlas::{random_point, Atlas, ChartId};
use crate::charts::{conservation_drift, ChartModel, FIELD_CHARTS};
use crate::config::{ConfigError, ExperimentConfig};
use crate::flow;
use crate::grazing::{self, CanardSystem, SnConfig};
use crate::model::ModelParams;
use crate::pws::PwsSystem;
use crate::regfun::RegFun;
use crate::roots::linear_fit;
use crate::sliding::{self, Ray, RayKind};
use crate::sweep::par_map;

/// Output directory override.
pub const OUT_DIR_ENV: &str = "HYSREG_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "hysreg", version, about = "Hysteresis regularization experiments")]
pub struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides HYSREG_OUT_DIR and [output].directory).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub mu: Option<f64>,
    /// slider | curved | normal-form | benchmark
    #[arg(long)]
    pub system: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trajectory of the full model.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, allow_hyphen_values = true)]
        x0: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        y0: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        p0: Option<f64>,
        #[arg(long)]
        t_end: Option<f64>,
    },
    /// Fold points of the p-nullcline against the leading-order prediction.
    Folds {
        /// Comma-separated list.
        #[arg(long, value_delimiter = ',')]
        epsilon: Vec<f64>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Return-map samples, seed contraction and the invariant curve.
    Returnmap {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        p: Vec<f64>,
    },
    /// Filippov-limit scaling rays.
    SlidingVerify {
        #[arg(long)]
        system: Option<String>,
    },
    /// Chini transition table, or the reflection map.
    Chini {
        #[arg(long)]
        k: Option<u32>,
        #[arg(long)]
        reflection: bool,
    },
    /// Canard gap roots over rho, or the folded-saddle eigenvalues.
    Canard {
        #[arg(long, value_delimiter = ',')]
        rho: Vec<f64>,
        #[arg(long)]
        alpha213: Option<f64>,
        #[arg(long)]
        folded_saddle: bool,
    },
    /// Saddle-node search of the reduced return map over mu.
    GrazeSn {
        #[arg(long, value_enum, default_value = "w1")]
        regime: Regime,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Atlas residuals; slow-manifold residual orders or grazing-chart eigenvalues on request.
    ChartsCheck {
        #[arg(long, conflicts_with = "slow_manifolds")]
        eigenvalues: bool,
        #[arg(long)]
        slow_manifolds: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Regime {
    W1,
    W2,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Numerical(_) => 3,
        }
    }
}

fn num(e: impl Display) -> CliError {
    CliError::Numerical(e.to_string())
}

/// Outcome of the checks attached to a subcommand.
#[derive(Debug, Default)]
pub struct Report {
    pub lines: Vec<String>,
    pub violations: Vec<String>,
    pub files: Vec<PathBuf>,
}

impl Report {
    fn info(&mut self, s: impl Into<String>) {
        self.lines.push(s.into());
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        self.lines.push(format!("{} {what}", if ok { "PASS" } else { "FAIL" }));
        if !ok {
            self.violations.push(what);
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.violations.is_empty() {
            0
        } else {
            2
        }
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    digits: usize,
}

impl Ctx {
    fn f(&self, v: f64) -> String {
        format!("{:.*e}", self.digits - 1, v)
    }

    fn csv(&self, name: &str, header: &[&str], rows: &[Vec<String>], rep: &mut Report) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::Io(format!("{}: {e}", self.out.display())))?;
        let path = self.out.join(name);
        let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(&path).map_err(io)?;
        w.write_record(header).map_err(io)?;
        for r in rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::Io(e.to_string()))?;
        rep.files.push(path);
        Ok(())
    }

    fn system(&self, flag: Option<&str>, mu: f64) -> Result<PwsSystem, CliError> {
        let m = &self.cfg.model;
        let name = flag.or(m.system.as_deref()).unwrap_or("slider");
        Ok(match name {
            "slider" => PwsSystem::slider(),
            "curved" => PwsSystem::curved_slider(),
            "normal-form" => PwsSystem::normal_form(m.g0.unwrap_or(1.0), mu),
            "benchmark" => grazing::benchmark_system(mu, m.lambda.unwrap_or(0.5)).map_err(num)?,
            other => return Err(ConfigError::field("system", format!("unknown system `{other}`")).into()),
        })
    }

    fn model(&self, a: &ModelArgs, eps: f64, alpha: f64) -> Result<ModelParams, CliError> {
        let m = &self.cfg.model;
        let eps = a.epsilon.or(m.epsilon).unwrap_or(eps);
        let alpha = a.alpha.or(m.alpha).unwrap_or(alpha);
        let mu = a.mu.or(m.mu).unwrap_or(0.0);
        for (name, v) in [("epsilon", eps), ("alpha", alpha)] {
            if !(v > 0.0) {
                return Err(ConfigError::field(name, format!("{v} must be > 0")).into());
            }
        }
        let sys = self.system(a.system.as_deref(), mu)?;
        ModelParams::new(eps, alpha, RegFun::arctan(), sys).map_err(num)
    }

    fn k(&self, flag: Option<u32>) -> u32 {
        flag.or(self.cfg.model.k).unwrap_or(1)
    }
}

/// Output directory: flag, then environment, then config, then `out`.
pub fn output_dir(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_DIR_ENV) {
        return PathBuf::from(p);
    }
    cfg.output.directory.clone().unwrap_or_else(|| PathBuf::from("out"))
}

pub fn run(cli: &Cli) -> Result<Report, CliError> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let ctx = Ctx { out: output_dir(cli.out_dir.as_deref(), &cfg), digits: cfg.precision(), cfg };
    let mut rep = Report::default();
    match &cli.command {
        Command::Simulate { model, x0, y0, p0, t_end } => simulate(&ctx, model, [*x0, *y0, *p0], *t_end, &mut rep)?,
        Command::Folds { epsilon, alpha } => folds(&ctx, epsilon, *alpha, &mut rep)?,
        Command::Returnmap { model, x, p } => returnmap(&ctx, model, x, p, &mut rep)?,
        Command::SlidingVerify { system } => sliding_verify(&ctx, system.as_deref(), &mut rep)?,
        Command::Chini { k, reflection: false } => chini(&ctx, ctx.k(*k), &mut rep)?,
        Command::Chini { reflection: true, .. } => reflection(&ctx, &mut rep)?,
        Command::Canard { rho, alpha213, folded_saddle: false } => canard(&ctx, rho, *alpha213, &mut rep)?,
        Command::Canard { folded_saddle: true, .. } => folded_saddle(&ctx, &mut rep)?,
        Command::GrazeSn { regime, epsilon, alpha } => graze_sn(&ctx, *regime, *epsilon, *alpha, &mut rep)?,
        Command::ChartsCheck { eigenvalues: true, .. } => eigenvalues(&ctx, &mut rep)?,
        Command::ChartsCheck { slow_manifolds: true, .. } => slow_manifolds(&ctx, &mut rep)?,
        Command::ChartsCheck { .. } => charts_check(&ctx, &mut rep)?,
    }
    Ok(rep)
}

/// Parses arguments, runs, prints and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(rep) => {
            for l in &rep.lines {
                println!("{l}");
            }
            for f in &rep.files {
                println!("wrote {}", f.display());
            }
            rep.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn list_or(flag: &[f64], cfg: &Option<Vec<f64>>, default: &[f64]) -> Vec<f64> {
    if !flag.is_empty() {
        flag.to_vec()
    } else {
        cfg.clone().unwrap_or_else(|| default.to_vec())
    }
}

// ------------------------------------------------------------------ simulate

fn simulate(ctx: &Ctx, a: &ModelArgs, init: [Option<f64>; 3], t_end: Option<f64>, rep: &mut Report) -> Result<(), CliError> {
    let m = ctx.model(a, 1e-2, 1e-2)?;
    let e = &ctx.cfg.experiment;
    let x0 = init[0].or(e.x.as_ref().and_then(|v| v.first().copied())).unwrap_or(0.0);
    let y0 = init[1].or(e.y0).unwrap_or(0.5);
    let p0 = init[2].or(e.p.as_ref().and_then(|v| v.first().copied())).unwrap_or(1.0);
    let t_end = t_end.or(e.t_end).unwrap_or(2.0);
    if !(t_end > 0.0) {
        return Err(ConfigError::field("t_end", format!("{t_end} must be > 0")).into());
    }
    let cfg = flow::IntegratorConfig { store: true, ..ctx.cfg.integrator_config(sliding::model_config()) };
    let sol = flow::integrate(&m, 0.0, &[x0, y0, p0], t_end, &cfg, &[]).map_err(num)?;
    let tr = &sol.trajectory;
    let rows: Vec<Vec<String>> =
        tr.t.iter().zip(&tr.y).map(|(t, y)| vec![ctx.f(*t), ctx.f(y[0]), ctx.f(y[1]), ctx.f(y[2])]).collect();
    ctx.csv("trajectory.csv", &["t", "x", "y", "p"], &rows, rep)?;
    rep.info(format!("{} nodes, {} steps, final state {:?}", tr.t.len(), tr.steps, sol.y));
    Ok(())
}

// --------------------------------------------------------------------- folds

/// Bound on the scaled fold error at eps <= `FOLD_TINY`.
pub const FOLD_BOUND: f64 = 0.02;
pub const FOLD_TINY: f64 = 1e-8;

fn folds(ctx: &Ctx, eps: &[f64], alpha: Option<f64>, rep: &mut Report) -> Result<(), CliError> {
    let eps = list_or(eps, &ctx.cfg.experiment.epsilons, &[1e-4, 1e-6, 1e-8]);
    let alpha = alpha.or(ctx.cfg.model.alpha).unwrap_or(1e-2);
    let mut rows = Vec::new();
    let mut errs = Vec::new();
    for &e in &eps {
        let m = ModelParams::new(e, alpha, RegFun::arctan(), PwsSystem::slider())
            .map_err(|err| ConfigError::field("epsilon", err.to_string()))?;
        let f = m.find_folds().map_err(num)?;
        let pred = m.fold_asymptotics();
        let k = m.reg.k as f64;
        let up = f.iter().find(|f| f.branch == crate::model::FoldBranch::NearOne).expect("two folds");
        let lo = f.iter().find(|f| f.branch == crate::model::FoldBranch::NearZero).expect("two folds");
        let scaled = (-up.end_gap / e.powf(k / (k + 1.0)) - pred.p213_f).abs();
        errs.push((e, scaled));
        rep.info(format!("eps {e:e}: p_f+ {:.12}, predicted {:.12}, scaled error {scaled:.3e}", up.p_f, pred.p_plus));
        rows.push(vec![
            ctx.f(e),
            ctx.f(alpha),
            ctx.f(up.p_f),
            ctx.f(lo.p_f),
            ctx.f(pred.p_plus),
            ctx.f(scaled),
        ]);
    }
    ctx.csv("folds.csv", &["epsilon", "alpha", "p_f_plus", "p_f_minus", "predicted", "scaled_error"], &rows, rep)?;
    if errs.len() > 1 {
        let mut sorted = errs.clone();
        sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mono = sorted.windows(2).all(|w| w[1].1 < w[0].1);
        rep.check(mono, format!("scaled fold error decreases as eps decreases: {sorted:?}"));
    }
    for (e, s) in errs.iter().filter(|(e, _)| *e <= FOLD_TINY) {
        rep.check(*s <= FOLD_BOUND, format!("scaled fold error {s:.3e} <= {FOLD_BOUND} at eps = {e:e}"));
    }
    Ok(())
}

// ----------------------------------------------------------------- returnmap

pub const SECTION_TOL: f64 = 1e-12;
pub const CONTRACTION_TOL: f64 = 1e-6;
pub const CURVE_TOL: f64 = 1e-10;
pub const CURVE_STEPS: usize = 3;

fn returnmap(ctx: &Ctx, a: &ModelArgs, xs: &[f64], ps: &[f64], rep: &mut Report) -> Result<(), CliError> {
    let m = ctx.model(a, 0.02, 0.01)?;
    let xs = list_or(xs, &ctx.cfg.experiment.x, &[0.0]);
    let ps = list_or(ps, &ctx.cfg.experiment.p, &[-0.05, 0.1]);
    let (pred_dx, pred_t): (Vec<f64>, Vec<f64>) =
        xs.iter().map(|&x| sliding::filippov_prediction(&m, x)).collect::<Result<Vec<_>, _>>().map_err(num)?.into_iter().unzip();
    let jobs: Vec<(usize, f64)> = (0..xs.len()).flat_map(|i| ps.iter().map(move |&p| (i, p))).collect();
    let samples: Vec<_> = par_map(&jobs, |&(i, p)| sliding::return_map(&m, xs[i], p))
        .into_iter()
        .collect::<Result<_, _>>()
        .map_err(num)?;
    let mut rows = Vec::new();
    let mut worst_section = 0.0f64;
    for ((i, _), s) in jobs.iter().zip(&samples) {
        let err_dx = (s.x_out - s.x_in - pred_dx[*i]).abs();
        let err_t = (s.transit_time - pred_t[*i]).abs();
        worst_section = worst_section.max(s.residual_in).max(s.residual_out);
        rows.push(
            [s.x_in, s.p_in, s.x_out, s.p_out, s.transit_time, s.epsilon, s.alpha, pred_dx[*i], pred_t[*i], err_dx, err_t]
                .iter()
                .map(|v| ctx.f(*v))
                .collect(),
        );
    }
    ctx.csv(
        "returnmap.csv",
        &["x_in", "p_in", "x_out", "p_out", "T", "eps", "alpha", "pred_dx", "pred_T", "err_dx", "err_T"],
        &rows,
        rep,
    )?;
    rep.check(worst_section <= SECTION_TOL, format!("section residual {worst_section:.3e} <= {SECTION_TOL:e}"));
    if ps.len() > 1 {
        for (i, &x) in xs.iter().enumerate() {
            let outs: Vec<f64> = samples[i * ps.len()..(i + 1) * ps.len()].iter().map(|s| s.p_out).collect();
            let spread = outs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - outs.iter().cloned().fold(f64::INFINITY, f64::min);
            rep.check(spread <= CONTRACTION_TOL, format!("p_out spread {spread:.3e} <= {CONTRACTION_TOL:e} over seeds {ps:?} at x = {x}"));
        }
    }
    let curve = sliding::invariant_curve(&m, &xs).map_err(num)?;
    let mut crow = Vec::new();
    for c in &curve {
        let it = c.iterations_to(CURVE_TOL);
        crow.push(vec![
            ctx.f(c.x),
            ctx.f(c.p),
            it.map_or("none".into(), |n| n.to_string()),
            ctx.f(*c.increments.last().unwrap_or(&f64::NAN)),
        ]);
        rep.check(
            it.is_some_and(|n| n <= CURVE_STEPS),
            format!("invariant curve at x = {} reaches |dp| < {CURVE_TOL:e} in {it:?} <= {CURVE_STEPS} steps", c.x),
        );
    }
    ctx.csv("invariant.csv", &["x", "p", "iterations", "last_increment"], &crow, rep)?;
    Ok(())
}

// ------------------------------------------------------------ sliding-verify

/// Grid points of the boundedness check.
pub const SCALING_GRID: [(f64, f64); 3] = [(1e-2, 1e-2), (2.5e-3, 5e-3), (6.25e-4, 2.5e-3)];
/// eps on the alpha-refining ray.
pub const TINY_EPS: f64 = 1e-8;
pub const ALPHA_RAY: [f64; 4] = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
pub const EPS_RAY_ALPHA: f64 = 1e-2;
pub const EPS_RAY: [f64; 4] = [1e-4, 2.5e-5, 6.25e-6, 1.5625e-6];
pub const SCALING_BOUND: f64 = 5.0;
pub const ALPHA_EXPONENT: (f64, f64) = (1.8, 2.2);

pub fn scaling_rays() -> Vec<Ray> {
    vec![
        Ray { id: "grid".into(), kind: RayKind::Grid, points: SCALING_GRID.to_vec() },
        Ray { id: "alpha".into(), kind: RayKind::Alpha, points: ALPHA_RAY.iter().map(|&a| (TINY_EPS, a)).collect() },
        Ray { id: "eps".into(), kind: RayKind::Epsilon, points: EPS_RAY.iter().map(|&e| (e, EPS_RAY_ALPHA)).collect() },
    ]
}

fn sliding_verify(ctx: &Ctx, system: Option<&str>, rep: &mut Report) -> Result<(), CliError> {
    let sys = ctx.system(system, ctx.cfg.model.mu.unwrap_or(0.0))?;
    let x = ctx.cfg.experiment.x.as_ref().and_then(|v| v.first().copied()).unwrap_or(0.0);
    let fit = sliding::scaling_study(RegFun::arctan(), &sys, &scaling_rays(), x).map_err(num)?;
    let mut rows = Vec::new();
    for r in &fit.rays {
        for (tag, exp) in [("dx", r.exponent_dx), ("T", r.exponent_t)] {
            for s in &r.samples {
                let err = if tag == "dx" { s.err_dx } else { s.err_t };
                rows.push(vec![format!("{}/{tag}", r.id), ctx.f(s.sample.epsilon), ctx.f(s.sample.alpha), ctx.f(err), ctx.f(exp)]);
            }
        }
        rep.info(format!("ray {}: exponent dx {:.4}, T {:.4}", r.id, r.exponent_dx, r.exponent_t));
    }
    ctx.csv("scaling.csv", &["ray_id", "eps", "alpha", "err", "fit_exponent"], &rows, rep)?;
    let grid = &fit.rays[0];
    let cdx = grid.samples.iter().map(|s| s.err_dx / s.scale).fold(0.0, f64::max);
    let ct = grid.samples.iter().map(|s| s.err_t / s.scale).fold(0.0, f64::max);
    rep.check(cdx <= SCALING_BOUND, format!("grid |dx error|/scale max {cdx:.4} <= {SCALING_BOUND}"));
    rep.check(ct <= SCALING_BOUND, format!("grid |T error|/scale max {ct:.4} <= {SCALING_BOUND}"));
    let ray = &fit.rays[1];
    let (lo, hi) = ALPHA_EXPONENT;
    rep.check((lo..=hi).contains(&ray.exponent_dx), format!("alpha exponent of dx error {:.4} in [{lo}, {hi}]", ray.exponent_dx));
    rep.check((lo..=hi).contains(&ray.exponent_t), format!("alpha exponent of T error {:.4} in [{lo}, {hi}]", ray.exponent_t));
    Ok(())
}

// --------------------------------------------------------------------- chini

pub const CHINI_NEAR: (f64, f64) = (-1.0, -0.9);
pub const CHINI_FAR_MIN: f64 = -0.1;

fn chini(ctx: &Ctx, k: u32, rep: &mut Report) -> Result<(), CliError> {
    let beta = RegFun::arctan().beta();
    let xs = grazing::chini_grid(beta, grazing::CHINI_FAR, grazing::CHINI_NEAR_GAP, grazing::CHINI_N);
    let s = grazing::chini_samples(k, beta, grazing::CHINI_C3, &xs).map_err(num)?;
    let rows: Vec<Vec<String>> =
        s.iter().map(|c| vec![ctx.f(c.x_in), ctx.f(c.x_out), ctx.f(c.deriv), ctx.f(c.second_diff)]).collect();
    ctx.csv("chini.csv", &["x_in", "x_out", "deriv", "second_diff"], &rows, rep)?;
    let d: Vec<f64> = s.iter().map(|c| c.deriv).collect();
    rep.check(d.iter().all(|v| -1.0 < *v && *v < 0.0), "all derivatives in (-1, 0)");
    let sd: Vec<f64> = s.iter().map(|c| c.second_diff).filter(|v| !v.is_nan()).collect();
    rep.check(sd.iter().all(|v| *v < 0.0), format!("all {} second differences negative", sd.len()));
    // the grid runs from the far end towards the fold
    let (near, far) = (d[d.len() - 1], d[0]);
    rep.check(
        (CHINI_NEAR.0..=CHINI_NEAR.1).contains(&near),
        format!("near-fold derivative {near:.4} in [{}, {}]", CHINI_NEAR.0, CHINI_NEAR.1),
    );
    rep.check(far >= CHINI_FAR_MIN, format!("far derivative {far:.4} >= {CHINI_FAR_MIN}"));
    Ok(())
}

pub const REFLECTION_INPUTS: [f64; 3] = [-0.9, -0.5, -0.1];
pub const REFLECTION_TOL: f64 = 1e-6;

fn reflection(ctx: &Ctx, rep: &mut Report) -> Result<(), CliError> {
    let xs = ctx.cfg.experiment.x.clone().unwrap_or_else(|| REFLECTION_INPUTS.to_vec());
    let mut rows = Vec::new();
    for x in xs {
        let y = grazing::reflection_map(x, grazing::CHINI_C3, grazing::REFLECTION_HORIZON).map_err(num)?;
        rows.push(vec![ctx.f(x), ctx.f(y), ctx.f(x + y)]);
        rep.check((x + y).abs() <= REFLECTION_TOL, format!("|out + in| = {:.3e} <= {REFLECTION_TOL:e} at {x}", (x + y).abs()));
    }
    ctx.csv("reflection.csv", &["x_in", "x_out", "sum"], &rows, rep)?;
    Ok(())
}

// -------------------------------------------------------------------- canard

pub const CANARD_RHO: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];
pub const CANARD_SCAN: usize = 9;
/// Smallest angle between the traces counted as transverse, radians.
pub const CANARD_MIN_ANGLE: f64 = 1e-3;
pub const CANARD_SLOPE: (f64, f64) = (0.35, 0.65);

fn canard(ctx: &Ctx, rho: &[f64], alpha213: Option<f64>, rep: &mut Report) -> Result<(), CliError> {
    let rho = list_or(rho, &ctx.cfg.experiment.rho, &CANARD_RHO);
    let a = alpha213.or(ctx.cfg.experiment.alpha213).unwrap_or(1.0);
    let g0 = ctx.cfg.model.g0.unwrap_or(0.0);
    let mut rows = Vec::new();
    let mut pts = Vec::new();
    for &r in &rho {
        let sys = CanardSystem::new(RegFun::arctan(), g0, a, r).map_err(|e| ConfigError::field("rho", e.to_string()))?;
        let c = grazing::canard_intersection(&sys, CANARD_SCAN).map_err(num)?;
        rows.push(vec![ctx.f(r), ctx.f(a), ctx.f(c.x_star), ctx.f(c.angle), ctx.f(c.gap_slope)]);
        rep.info(format!("rho {r}: x* {:.6}, offset {:.6e}, angle {:.4e}", c.x_star, c.offset, c.angle));
        rep.check(c.sign_changes == 1, format!("rho {r}: {} gap sign change(s), expected 1", c.sign_changes));
        rep.check(c.angle.abs() >= CANARD_MIN_ANGLE, format!("rho {r}: |angle| {:.3e} >= {CANARD_MIN_ANGLE:e}", c.angle.abs()));
        pts.push((r.ln(), c.offset.abs().ln()));
    }
    ctx.csv("canard.csv", &["rho", "alpha213", "x_star", "angle", "gap_slope"], &rows, rep)?;
    if pts.len() > 1 {
        let (lx, ly): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        let (slope, _, _) = linear_fit(&lx, &ly);
        let (lo, hi) = CANARD_SLOPE;
        rep.check((lo..=hi).contains(&slope), format!("offset log-log slope {slope:.4} in [{lo}, {hi}]"));
    }
    Ok(())
}

pub const FS_TOL: f64 = 1e-6;

fn folded_saddle(ctx: &Ctx, rep: &mut Report) -> Result<(), CliError> {
    let g0 = ctx.cfg.model.g0.unwrap_or(0.0);
    let beta = RegFun::arctan().beta();
    let mut rows = Vec::new();
    for k in [1u32, 2] {
        for a in [0.5, 1.0, 2.0] {
            let fs = grazing::folded_saddle(k, beta, a, g0).map_err(num)?;
            let ev = fs.numerical_eigenvalues();
            let rel = ((ev[0] - fs.lambda_minus) / fs.lambda_minus).abs().max(((ev[1] - fs.lambda_plus) / fs.lambda_plus).abs());
            rows.push(vec![
                k.to_string(),
                ctx.f(a),
                ctx.f(fs.x_f),
                ctx.f(fs.nu_f),
                ctx.f(fs.lambda_minus),
                ctx.f(fs.lambda_plus),
                ctx.f(ev[0]),
                ctx.f(ev[1]),
                ctx.f(rel),
            ]);
            rep.check(rel <= FS_TOL, format!("k {k}, alpha213 {a}: relative eigenvalue error {rel:.3e} <= {FS_TOL:e}"));
            rep.check(fs.lambda_plus * fs.lambda_minus < 0.0, format!("k {k}, alpha213 {a}: saddle"));
        }
    }
    ctx.csv(
        "folded_saddle.csv",
        &["k", "alpha213", "x_f", "nu_f", "lambda_minus", "lambda_plus", "num_minus", "num_plus", "rel_err"],
        &rows,
        rep,
    )?;
    Ok(())
}

// ------------------------------------------------------------------ graze-sn

pub const SN_DERIVATIVE_TOL: f64 = 5e-2;

fn graze_sn(ctx: &Ctx, regime: Regime, eps: Option<f64>, alpha: Option<f64>, rep: &mut Report) -> Result<(), CliError> {
    let base = match regime {
        Regime::W1 => SnConfig::default(),
        Regime::W2 => SnConfig::w2(),
    };
    let m = &ctx.cfg.model;
    let cfg = SnConfig {
        epsilon: eps.or(m.epsilon).unwrap_or(base.epsilon),
        alpha: alpha.or(m.alpha).unwrap_or(base.alpha),
        lambda: m.lambda.unwrap_or(base.lambda),
        ..base
    };
    let class = grazing::classify_regime(cfg.epsilon, cfg.alpha, 1, &grazing::RegimeConstants::default())
        .map_err(|e| ConfigError::field("epsilon", e.to_string()))?;
    rep.info(format!("eps {}, alpha {}: wedge {}", cfg.epsilon, cfg.alpha, class.wedge.as_str()));
    let scan = grazing::saddle_node_scan(&cfg).map_err(num)?;
    let join = |v: &[f64]| v.iter().map(|x| ctx.f(*x)).collect::<Vec<_>>().join(";");
    let rows: Vec<Vec<String>> = scan
        .rows
        .iter()
        .map(|r| vec![ctx.f(r.mu), r.fp_x.len().to_string(), join(&r.fp_x), join(&r.det)])
        .collect();
    ctx.csv("sn.csv", &["mu", "fp_count", "fp_x_values", "det_DmapMinusI"], &rows, rep)?;
    for c in &scan.candidates {
        rep.info(format!(
            "candidate mu {:.8e}, x {:.6}, R' {:.6}, collision {}, fixed points below {:?} above {:?}",
            c.mu, c.x, c.derivative, c.collision, c.below, c.above
        ));
    }
    for f in &scan.failed {
        rep.info(format!("candidate failed: {f}"));
    }
    let hits: Vec<_> = scan.collisions().collect();
    let (lo, hi) = cfg.mu_range;
    match regime {
        Regime::W1 => {
            rep.check(hits.len() == 1, format!("{} fixed-point collision(s) for mu in [{lo}, {hi}], expected 1", hits.len()));
            if let Some(c) = hits.first() {
                let d = (c.derivative - 1.0).abs();
                rep.check(d <= SN_DERIVATIVE_TOL, format!("|R'(x*) - 1| = {d:.3e} <= {SN_DERIVATIVE_TOL:e} at mu* = {:.8e}", c.mu));
            }
        }
        Regime::W2 => {
            rep.check(hits.is_empty(), format!("no fixed-point collision for mu in [{lo}, {hi}] (found {})", hits.len()));
        }
    }
    Ok(())
}

// -------------------------------------------------------------- charts-check

pub const ATLAS_TOL: f64 = 1e-12;
pub const DRIFT_TOL: f64 = 1e-9;
pub const ATLAS_SAMPLES: usize = 100;
pub const DRIFT_SAMPLES: usize = 5;

fn charts_check(ctx: &Ctx, rep: &mut Report) -> Result<(), CliError> {
    let e = &ctx.cfg.experiment;
    let n = e.samples.unwrap_or(ATLAS_SAMPLES);
    let seed = e.seed.unwrap_or(1);
    let k = ctx.k(None);
    let survey = Atlas::new(k).residual_survey(n, seed).map_err(num)?;
    let model = ChartModel::new(RegFun::arctan(), PwsSystem::curved_slider());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drift = std::collections::BTreeMap::new();
    for chart in FIELD_CHARTS {
        let mut worst = 0.0f64;
        for _ in 0..DRIFT_SAMPLES {
            let pt = random_point(chart, false, &mut rng);
            let (d, _) = conservation_drift(&model, &pt, 1.0).map_err(num)?;
            worst = worst.max(d);
        }
        drift.insert(chart, worst);
    }
    let mut rows = Vec::new();
    for r in &survey {
        let d = if r.mirrored { None } else { drift.get(&r.chart).copied() };
        rows.push(vec![
            r.chart.name().to_string(),
            r.mirrored.to_string(),
            r.samples.to_string(),
            ctx.f(r.round_trip),
            ctx.f(r.overlap),
            r.overlap_samples.to_string(),
            d.map_or("NaN".into(), |v| ctx.f(v)),
        ]);
    }
    ctx.csv(
        "charts.csv",
        &["chart", "mirrored", "samples", "round_trip", "overlap", "overlap_samples", "drift"],
        &rows,
        rep,
    )?;
    let rt = survey.iter().map(|r| r.round_trip).fold(0.0, f64::max);
    let ov = survey.iter().filter(|r| !r.overlap.is_nan()).map(|r| r.overlap).fold(0.0, f64::max);
    let short = survey.iter().filter(|r| !r.overlap.is_nan() && r.overlap_samples < n).count();
    let dr = drift.values().cloned().fold(0.0, f64::max);
    let charts = survey.iter().filter(|r| !r.mirrored).count();
    rep.check(rt < ATLAS_TOL, format!("round-trip residual {rt:.3e} < {ATLAS_TOL:e} over {charts} charts x {n} points"));
    rep.check(ov < ATLAS_TOL && short == 0, format!("overlap commutation residual {ov:.3e} < {ATLAS_TOL:e}"));
    rep.check(dr < DRIFT_TOL, format!("eps/alpha drift {dr:.3e} < {DRIFT_TOL:e} along chart trajectories"));
    Ok(())
}

/// Halving ratios of the slow-manifold residuals must lie in
/// `[0.7, 1.3]` times the expected factor.
pub const RESIDUAL_BAND: (f64, f64) = (0.7, 1.3);

fn slow_manifolds(ctx: &Ctx, rep: &mut Report) -> Result<(), CliError> {
    let model = ChartModel::new(RegFun::arctan(), PwsSystem::slider());
    let k = model.reg.k;
    let res = |chart: ChartId, c: [f64; 5]| sliding::slow_manifold_residual(&model, chart, 1, c).map_err(num);
    let mut rows = Vec::new();
    // C1: eps alpha1 halves through alpha1
    let c1 = [res(ChartId::C1, [0.0, 0.2, 0.0, 0.5, 1e-3])?, res(ChartId::C1, [0.0, 0.2, 0.0, 0.25, 1e-3])?];
    // C22: eps halves
    let c22 = [res(ChartId::C22, [0.0, 0.3, 0.0, 1e-3, 1e-3])?, res(ChartId::C22, [0.0, 0.3, 0.0, 5e-4, 1e-3])?];
    let (lo, hi) = RESIDUAL_BAND;
    for (chart, r, par, expect) in [
        ("C1", c1, [5e-4, 2.5e-4], 2f64.powi(k as i32 + 1)),
        ("C22", c22, [1e-3, 5e-4], 4.0),
    ] {
        let q = r[0] / r[1];
        rows.push(vec![chart.to_string(), ctx.f(par[0]), ctx.f(r[0]), ctx.f(par[1]), ctx.f(r[1]), ctx.f(q)]);
        rep.check(
            (expect * lo..=expect * hi).contains(&q),
            format!("{chart} residual ratio {q:.4} in [{:.2}, {:.2}]", expect * lo, expect * hi),
        );
    }
    ctx.csv("slow_manifold.csv", &["chart", "param", "residual", "param_half", "residual_half", "ratio"], &rows, rep)?;
    Ok(())
}

pub const EIGEN_TOL: f64 = 1e-6;

fn eigenvalues(ctx: &Ctx, rep: &mut Report) -> Result<(), CliError> {
    let beta = RegFun::arctan().beta();
    let g0 = ctx.cfg.model.g0.unwrap_or(0.3);
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for k in [1u32, 2] {
        for x in [-1.0, 1.0] {
            let f11 = |z: &[f64]| grazing::g11_field(k, beta, 0.05, g0, [z[0], z[1], z[2]]).to_vec();
            let f121 = |z: &[f64]| grazing::g121_field(k, beta, g0, [z[0], z[1], z[2], z[3]]).to_vec();
            let cases: [(&str, Vec<f64>, Vec<f64>); 2] = [
                ("q11", grazing::eigval1(k, x).to_vec(), grazing::fd_eigenvalues(&f11, &[x, 0.0, 0.0])),
                ("z121", grazing::eigval2(k, x).to_vec(), grazing::fd_eigenvalues(&f121, &[x, 0.0, 0.0, 0.0])),
            ];
            for (name, mut want, got) in cases {
                want.sort_by(|a, b| a.total_cmp(b));
                for (w, g) in want.iter().zip(&got) {
                    let e = (w - g).abs();
                    worst = worst.max(e);
                    rows.push(vec![name.to_string(), k.to_string(), ctx.f(x), ctx.f(*w), ctx.f(*g), ctx.f(e)]);
                }
            }
        }
    }
    ctx.csv("eigenvalues.csv", &["point", "k", "x", "analytic", "numerical", "abs_err"], &rows, rep)?;
    rep.check(worst <= EIGEN_TOL, format!("eigenvalue mismatch {worst:.3e} <= {EIGEN_TOL:e}"));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_subcommands() {
        let c = Cli::try_parse_from(["hysreg", "folds", "--epsilon", "1e-4,1e-6", "--alpha", "1e-2"]).unwrap();
        assert!(matches!(c.command, Command::Folds { ref epsilon, alpha: Some(_) } if epsilon.len() == 2));
        let c = Cli::try_parse_from(["hysreg", "graze-sn", "--regime", "w2"]).unwrap();
        assert!(matches!(c.command, Command::GrazeSn { regime: Regime::W2, .. }));
        let c = Cli::try_parse_from(["hysreg", "returnmap", "--p", "-0.05,0.1", "--out-dir", "x"]).unwrap();
        assert_eq!(c.out_dir.as_deref(), Some(Path::new("x")));
        assert!(Cli::try_parse_from(["hysreg", "charts-check", "--eigenvalues", "--slow-manifolds"]).is_err());
    }

    #[test]
    fn flag_beats_config_for_output() {
        let mut cfg = ExperimentConfig::default();
        cfg.output.directory = Some("from_cfg".into());
        assert_eq!(output_dir(Some(Path::new("flag")), &cfg), PathBuf::from("flag"));
    }

    #[test]
    fn report_exit_codes() {
        let mut r = Report::default();
        r.check(true, "a");
        assert_eq!(r.exit_code(), 0);
        r.check(false, "b");
        assert_eq!(r.exit_code(), 2);
        assert_eq!(r.lines, vec!["PASS a", "FAIL b"]);
        assert_eq!(CliError::Numerical("x".into()).exit_code(), 3);
        assert_eq!(CliError::Config(ConfigError::field("a", "b")).exit_code(), 1);
    }
}
