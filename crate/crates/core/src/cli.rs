//! Batch front-end: one subcommand per experiment, a JSON run config, and
//! CSV/JSON artifacts listed in `manifest.json`.
//!
//! Exit codes: 0 success, 2 invalid configuration or arguments, 3 numerical
//! failure (with `error.json`), 4 region exit before `s2` under `--strict`.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::angular::{self, JlClass, Problem};
use crate::simulator::{
    self, EvolveOptions, FrameOptions, Model, ModelOptions, ShootOptions, SimGridOptions, Simulator, Trajectory,
};
use crate::spectral::Eigensystem;
use crate::stationary::{self, StationaryContext, StationaryOptions};
use crate::weighted_heat::{self, HeatGridOptions, RegularizedWeight, WeightedHeat};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_SCHEMA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_REGION: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "blowuplab", version, about = "Type-II blow-up laboratory for the half-space heat equation with boundary flux u^q")]
pub struct Cli {
    /// JSON run configuration; command-line values take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Exit with code 4 if the solution leaves the region before `s2`.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Worker threads (falls back to BLOWUPLAB_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ProblemArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub q: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// K, c_H and the JL class of (n, q).
    Classify(ProblemArgs),
    /// Angular profile V.
    Profile(ProblemArgs),
    /// Eigenvalue inventory of the linearized operator.
    Eigs {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Regular stationary solution U_alpha and its far-field coefficient.
    Stationary {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Volume doubling, kernel envelopes and smoothing of the weighted heat flow.
    KernelCheck(ProblemArgs),
    /// Evolve the rescaled flow from the constructed initial data.
    Simulate(ProblemArgs),
    /// Solve P(d; s2) = 0 and evolve the shot solution.
    Shoot(ProblemArgs),
    /// Fit the growth rate of a trajectory CSV.
    RateFit {
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Classification over an (n, q) grid.
    Scan,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Classify(_) => "classify",
            Command::Profile(_) => "profile",
            Command::Eigs { .. } => "eigs",
            Command::Stationary { .. } => "stationary",
            Command::KernelCheck(_) => "kernel-check",
            Command::Simulate(_) => "simulate",
            Command::Shoot(_) => "shoot",
            Command::RateFit { .. } => "rate-fit",
            Command::Scan => "scan",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Target radial node count; sets `h_max`.
    pub nr: Option<usize>,
    pub ntheta: Option<usize>,
    pub rmax: Option<f64>,
    pub h_core: Option<f64>,
    pub core: Option<f64>,
    pub ratio: Option<f64>,
    pub h_max: Option<f64>,
    pub theta_grading: Option<f64>,
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub epsilon: f64,
    /// Source positions `(r, theta)`.
    pub sources: Vec<(f64, f64)>,
    pub times: Vec<f64>,
    pub dt: f64,
    pub eps_hat: f64,
    pub c3: f64,
    pub smoothing_s: Vec<f64>,
    pub doubling_samples: usize,
    pub seed: u64,
    pub grid: HeatGridOptions,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            epsilon: 0.05,
            sources: vec![(0.0, 0.0), (0.3, 0.0), (1.0, FRAC_PI_2 / 2.0), (0.5, FRAC_PI_2), (2.0, FRAC_PI_2)],
            times: vec![0.1, 0.2, 0.5, 1.0],
            dt: 1e-3,
            eps_hat: 0.5,
            c3: 1.0,
            smoothing_s: vec![0.25, 0.5, 1.0, 2.0],
            doubling_samples: 50,
            seed: 7,
            grid: HeatGridOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub n: Vec<usize>,
    pub q: Vec<f64>,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig { n: (3..=21).step_by(2).collect(), q: (0..10).map(|k| 1.5 + 1.5 * k as f64).collect() }
    }
}

/// Run configuration. Every key is optional; missing keys take the module
/// defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n: Option<usize>,
    pub q: Option<f64>,
    pub ell: Option<usize>,
    pub s1: Option<f64>,
    pub a: Option<f64>,
    pub a_prime: Option<f64>,
    pub sigma_exp: Option<f64>,
    pub varrho: Option<f64>,
    pub grid: GridConfig,
    pub dt: Option<f64>,
    pub s2: Option<f64>,
    /// End of the evolution; `s2` when absent.
    pub s_end: Option<f64>,
    pub d: Option<Vec<f64>>,
    pub intervals: Option<usize>,
    pub count: Option<usize>,
    pub alpha: Option<f64>,
    pub stationary: Option<StationaryOptions>,
    pub evolve: Option<EvolveOptions>,
    pub shoot: Option<ShootOptions>,
    pub kernel: Option<KernelConfig>,
    pub scan: Option<ScanConfig>,
    pub trajectory: Option<PathBuf>,
    /// Shortest rate-fit window accepted as reliable when no frame is built.
    pub min_window: Option<f64>,
}

impl RunConfig {
    fn merge_problem(&mut self, args: &ProblemArgs) {
        if args.n.is_some() {
            self.n = args.n;
        }
        if args.q.is_some() {
            self.q = args.q;
        }
    }

    fn problem(&self) -> std::result::Result<Problem, Failure> {
        let n = self.n.ok_or_else(|| Failure::Schema("missing n".into()))?;
        let q = self.q.ok_or_else(|| Failure::Schema("missing q".into()))?;
        Problem::new(n, q).map_err(|e| Failure::Schema(e.to_string()))
    }

    fn validate(&self) -> std::result::Result<(), Failure> {
        let positive = |name: &str, v: Option<f64>| match v {
            Some(x) if !(x > 0.0 && x.is_finite()) => Err(Failure::Schema(format!("{name} must be positive, got {x}"))),
            _ => Ok(()),
        };
        if let Some(n) = self.n {
            if n < 3 {
                return Err(Failure::Schema(format!("n must be at least 3, got {n}")));
            }
        }
        if let Some(q) = self.q {
            if !(q > 1.0 && q.is_finite()) {
                return Err(Failure::Schema(format!("q must exceed 1, got {q}")));
            }
        }
        positive("s1", self.s1)?;
        positive("dt", self.dt)?;
        positive("alpha", self.alpha)?;
        positive("grid.rmax", self.grid.rmax)?;
        positive("grid.h_core", self.grid.h_core)?;
        positive("grid.h_max", self.grid.h_max)?;
        if let (Some(s1), Some(s2)) = (self.s1, self.s2) {
            if s2 < s1 {
                return Err(Failure::Schema(format!("s2 = {s2} precedes s1 = {s1}")));
            }
        }
        if self.count == Some(0) {
            return Err(Failure::Schema("count must be at least 1".into()));
        }
        Ok(())
    }

    fn model_options(&self) -> ModelOptions {
        let base = ModelOptions::default();
        let fd = FrameOptions::default();
        ModelOptions {
            intervals: self.intervals.unwrap_or(base.intervals),
            stationary: self.stationary.unwrap_or(base.stationary),
            frame: FrameOptions {
                ell: self.ell,
                s1: self.s1.unwrap_or(fd.s1),
                a: self.a.unwrap_or(fd.a),
                a_prime: self.a_prime.unwrap_or(fd.a_prime),
                sigma_exp: self.sigma_exp,
                varrho: self.varrho,
            },
        }
    }

    fn grid_options(&self, frame: &simulator::SpectralFrame) -> crate::Result<SimGridOptions> {
        let d = SimGridOptions::default();
        let g = &self.grid;
        let horizon = g.horizon.unwrap_or_else(|| (self.s_end_value(frame) - frame.s1).max(d.horizon));
        let opts = SimGridOptions {
            h_core: g.h_core.unwrap_or(d.h_core),
            core: g.core.unwrap_or(d.core),
            ratio: g.ratio.unwrap_or(d.ratio),
            h_max: g.h_max.unwrap_or(d.h_max),
            r_max: g.rmax,
            nt: g.ntheta.unwrap_or(d.nt),
            theta_grading: g.theta_grading.unwrap_or(d.theta_grading),
            horizon,
        };
        match g.nr {
            Some(nr) => opts.with_radial_count(frame, nr),
            None => Ok(opts),
        }
    }

    fn evolve_options(&self) -> EvolveOptions {
        let mut e = self.evolve.unwrap_or_default();
        if let Some(dt) = self.dt {
            e.dt = dt;
        }
        e
    }

    fn s2_value(&self, frame: &simulator::SpectralFrame) -> f64 {
        self.s2.unwrap_or(frame.s1 + 1.5)
    }

    fn s_end_value(&self, frame: &simulator::SpectralFrame) -> f64 {
        self.s_end.unwrap_or_else(|| self.s2_value(frame))
    }
}

/// Record of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub outputs: Vec<String>,
    pub version: String,
    pub wall_time_s: f64,
    pub status: String,
    pub exit_code: i32,
}

#[derive(Debug)]
pub enum Failure {
    Schema(String),
    Numerical(Error),
    Region { exit_s: f64, s2: f64 },
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Schema(_) => EXIT_SCHEMA,
            Failure::Numerical(_) => EXIT_NUMERICAL,
            Failure::Region { .. } => EXIT_REGION,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Schema(m),
            other => Failure::Numerical(other),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Schema(m) => write!(f, "invalid configuration: {m}"),
            Failure::Numerical(e) => write!(f, "numerical failure: {e}"),
            Failure::Region { exit_s, s2 } => write!(f, "left the region at s = {exit_s} before s2 = {s2}"),
        }
    }
}

/// SHA-256 of the canonical JSON of the effective configuration.
pub fn config_hash(cfg: &RunConfig) -> String {
    let text = serde_json::to_string(cfg).expect("configs serialize");
    Sha256::digest(text.as_bytes()).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Shortest round-trip text is at most 17 significant digits; fixed
/// scientific notation keeps every row the same shape.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_row(values: &[f64]) -> String {
    let mut s = values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn write(&mut self, name: &str, contents: &str) -> crate::Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        std::fs::write(self.dir.join(name), contents)?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> crate::Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.write(name, &(text + "\n"))
    }
}

fn load_config(path: Option<&Path>) -> std::result::Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Schema(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Schema(format!("{}: {e}", p.display())))
        }
    }
}

fn configure_threads(threads: Option<usize>) -> std::result::Result<(), Failure> {
    let n = match threads {
        Some(n) => Some(n),
        None => match std::env::var("BLOWUPLAB_THREADS") {
            Ok(v) => Some(v.trim().parse().map_err(|_| Failure::Schema(format!("BLOWUPLAB_THREADS = {v:?} is not a count")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Failure::Schema("thread count must be positive".into()));
        }
        // a second configuration in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parse arguments from the process and run.
pub fn main_entry() -> i32 {
    run(Cli::parse())
}

pub fn run(cli: Cli) -> i32 {
    let start = Instant::now();
    let command = cli.command.name();
    let prepared = (|| -> std::result::Result<RunConfig, Failure> {
        configure_threads(cli.threads)?;
        let mut cfg = load_config(cli.config.as_deref())?;
        match &cli.command {
            Command::Classify(p) | Command::Profile(p) | Command::KernelCheck(p) | Command::Simulate(p) | Command::Shoot(p) => {
                cfg.merge_problem(p)
            }
            Command::Eigs { problem, count } => {
                cfg.merge_problem(problem);
                if count.is_some() {
                    cfg.count = *count;
                }
            }
            Command::Stationary { problem, alpha } => {
                cfg.merge_problem(problem);
                if alpha.is_some() {
                    cfg.alpha = *alpha;
                }
            }
            Command::RateFit { problem, trajectory } => {
                cfg.merge_problem(problem);
                if trajectory.is_some() {
                    cfg.trajectory = trajectory.clone();
                }
            }
            Command::Scan => {}
        }
        cfg.validate()?;
        Ok(cfg)
    })();
    let cfg = match prepared {
        Ok(c) => c,
        Err(f) => {
            eprintln!("blowuplab {command}: {f}");
            return f.exit_code();
        }
    };
    let mut out = Outputs { dir: cli.out.clone(), files: Vec::new() };
    let result = dispatch(&cli.command, &cfg, &mut out, cli.strict);
    let (status, code) = match &result {
        Ok(()) => ("ok".to_string(), EXIT_OK),
        Err(f) => {
            eprintln!("blowuplab {command}: {f}");
            (
                match f {
                    Failure::Schema(_) => "invalid-config",
                    Failure::Numerical(_) => "numerical-failure",
                    Failure::Region { .. } => "region-exit",
                }
                .to_string(),
                f.exit_code(),
            )
        }
    };
    if code == EXIT_SCHEMA {
        return code;
    }
    if let Err(Failure::Numerical(e)) = &result {
        let diag = json!({ "command": command, "error": e.to_string(), "detail": format!("{e:?}") });
        if let Err(w) = out.json("error.json", &diag) {
            eprintln!("blowuplab {command}: cannot write diagnostics: {w}");
        }
    }
    let manifest = RunManifest {
        command: command.to_string(),
        config_hash: config_hash(&cfg),
        config: cfg,
        outputs: out.files.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_s: start.elapsed().as_secs_f64(),
        status,
        exit_code: code,
    };
    if let Err(e) = out.json("manifest.json", &manifest) {
        eprintln!("blowuplab {command}: cannot write manifest: {e}");
        return EXIT_NUMERICAL;
    }
    code
}

type Step = std::result::Result<(), Failure>;

fn dispatch(cmd: &Command, cfg: &RunConfig, out: &mut Outputs, strict: bool) -> Step {
    match cmd {
        Command::Classify(_) => classify(cfg, out),
        Command::Profile(_) => profile(cfg, out),
        Command::Eigs { .. } => eigs(cfg, out),
        Command::Stationary { .. } => stationary_cmd(cfg, out),
        Command::KernelCheck(_) => kernel_check(cfg, out),
        Command::Simulate(_) => simulate(cfg, out, strict),
        Command::Shoot(_) => shoot(cfg, out, strict),
        Command::RateFit { .. } => rate_fit_cmd(cfg, out),
        Command::Scan => scan(cfg, out),
    }
}

fn intervals(cfg: &RunConfig) -> usize {
    cfg.intervals.unwrap_or(ModelOptions::default().intervals)
}

fn classify(cfg: &RunConfig, out: &mut Outputs) -> Step {
    let p = cfg.problem()?;
    let cell = angular::classify_point(p.n, p.q, intervals(cfg));
    if let Some(e) = &cell.error {
        return Err(Failure::Numerical(Error::ProfileNotFound(e.clone())));
    }
    let m0 = (cell.class == Some(JlClass::Supercritical)).then(|| angular::m0(&p, cell.k, cell.c_h));
    out.json(
        "classify.json",
        &json!({
            "n": p.n, "q": p.q, "m": p.m, "K": cell.k, "cH": cell.c_h,
            "class": cell.class.map(|c| c.to_string()),
            "kappa1": cell.kappa1, "mu1": finite(cell.mu1), "gamma": finite(cell.gamma), "m0": m0,
        }),
    )?;
    Ok(())
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn profile(cfg: &RunConfig, out: &mut Outputs) -> Step {
    let p = cfg.problem()?;
    let prof = angular::solve_profile_v(&p, intervals(cfg))?;
    let mut csv = String::from("theta,V,dV\n");
    for (k, t) in prof.samples.theta.iter().enumerate() {
        csv.push_str(&csv_row(&[*t, prof.samples.values[k], prof.samples.derivs[k]]));
    }
    out.write("profile.csv", &csv)?;
    out.json(
        "profile.json",
        &json!({
            "n": p.n, "q": p.q, "V0": prof.v0, "V_boundary": prof.boundary_value(), "K": prof.k,
            "interior_residual": prof.interior_residual(), "boundary_residual": prof.boundary_residual(),
        }),
    )?;
    Ok(())
}

fn eigs(cfg: &RunConfig, out: &mut Outputs) -> Step {
    let p = cfg.problem()?;
    let count = cfg.count.unwrap_or(8);
    let es = Eigensystem::build(&p, intervals(cfg), None, count)?;
    let mut csv = String::from("i,j,kappa,lambda,radial_exponent,c_small,c_large\n");
    for md in es.modes.iter().take(count) {
        let _ = write!(csv, "{},{},", md.i, md.j);
        csv.push_str(&csv_row(&[md.kappa, md.lambda, md.exponent.value, md.c_small, md.c_large]));
    }
    out.write("eigs.csv", &csv)?;
    out.json(
        "eigs.json",
        &json!({
            "n": p.n, "q": p.q, "K": es.k(), "cH": es.c_h, "gamma": es.gamma(), "m": p.m,
            "lambda11": es.mode(1, 1).map(|m| m.lambda), "modes": es.modes.len().min(count),
        }),
    )?;
    Ok(())
}

fn stationary_cmd(cfg: &RunConfig, out: &mut Outputs) -> Step {
    let p = cfg.problem()?;
    let alpha = cfg.alpha.unwrap_or(1.0);
    let ctx = StationaryContext::new(p, intervals(cfg))?;
    let opts = cfg.stationary.unwrap_or_default();
    let (u, k) = stationary::solve_u_alpha_extrapolated(&ctx, alpha, &opts)?;
    let mut csv = String::from("r,U_axis,U_boundary,U_inf_boundary\n");
    let r_hi = 0.9 * u.grid.r[u.grid.nr() - 1];
    for i in 0..=200 {
        let r = 1e-3 * (r_hi / 1e-3f64).powf(i as f64 / 200.0);
        csv.push_str(&csv_row(&[r, u.eval(r, 0.0)?, u.eval(r, FRAC_PI_2)?, ctx.u_inf(r, FRAC_PI_2)]));
    }
    out.write("stationary.csv", &csv)?;
    out.json(
        "stationary.json",
        &json!({
            "n": p.n, "q": p.q, "alpha": alpha, "k_alpha": k.value, "k_coarse": k.coarse, "k_fine": k.fine,
            "k_error_estimate": k.error_estimate, "origin_value": u.origin_value(),
            "ordering_margin": u.ordering_margin(), "residual": u.residual,
            "newton_iterations": u.newton_iterations, "gamma": ctx.gamma(),
        }),
    )?;
    Ok(())
}

fn kernel_check(cfg: &RunConfig, out: &mut Outputs) -> Step {
    let p = cfg.problem()?;
    let kc = cfg.kernel.clone().unwrap_or_default();
    let es = Eigensystem::build(&p, intervals(cfg), None, 1)?;
    let e1 = es.angular_mode(1).clone();
    let exact = RegularizedWeight::exact(p.n, es.gamma(), e1.clone())?;
    let mut points = vec![(0.0, 0.0, 1.0)];
    points.extend(weighted_heat::doubling_samples(kc.doubling_samples, kc.seed));
    let doubling = weighted_heat::doubling_check(&exact, &points, 1e-8)?;
    let weight = RegularizedWeight::new(p.n, kc.epsilon, es.gamma(), e1)?;
    let grid = kc.grid.build(p.n, kc.epsilon)?;
    let heat = WeightedHeat::new(weight, &grid)?;
    let mut csv = String::from("source_r,source_theta,t,mass,leakage,c_upper,c_lower,max_violation\n");
    let mut reports = Vec::new();
    for &xi in &kc.sources {
        let rep = weighted_heat::kernel_probe(&heat, xi, &kc.times, kc.dt, kc.eps_hat, kc.c3)?;
        for c in &rep.columns {
            csv.push_str(&csv_row(&[rep.source.0, rep.source.1, c.t, c.mass, c.leakage, c.c_upper, c.c_lower, c.max_violation]));
        }
        reports.push(json!({
            "source": rep.source, "c_upper": rep.c_upper, "c_lower": rep.c_lower,
            "max_violation": rep.max_violation, "holds": rep.holds(),
        }));
    }
    out.write("kernel.csv", &csv)?;
    let z0 = weighted_heat::random_bounded_field(&grid, kc.seed);
    let run = heat.run(&z0, 1.0, kc.dt.max(1e-2), &[])?;
    out.write("heat.csv", &run.csv())?;
    let smoothing = weighted_heat::smoothing_check(&heat, &z0, &kc.smoothing_s, kc.dt.max(1e-2), 0.5 * (es.gamma() - p.m))?;
    let l2_monotone = run.diagnostics.windows(2).all(|w| w[1].l2 <= w[0].l2 * (1.0 + 1e-14));
    let mass0 = run.diagnostics[0].mass;
    let mass_drift = run.diagnostics.iter().map(|d| (d.mass - mass0).abs()).fold(0.0, f64::max) / mass0.abs();
    out.json(
        "kernel.json",
        &json!({
            "n": p.n, "q": p.q, "gamma": es.gamma(), "epsilon": kc.epsilon,
            "doubling_origin": doubling.samples[0].ratio, "doubling_exact": 2f64.powf(p.nf() - 2.0 * es.gamma()),
            "doubling_max": doubling.max_ratio, "c1": doubling.c1, "c2": doubling.c2,
            "kernels": reports, "mass_drift": mass_drift, "l2_monotone": l2_monotone,
            "energy_defect": run.energy_defect, "gradient_constant": run.gradient_constant(),
            "smoothing": smoothing,
        }),
    )?;
    Ok(())
}

fn frame_json(model: &Model) -> Value {
    let f = &model.frame;
    json!({
        "frame": f,
        "k1": model.k1,
        "radii": {
            "inner": f.inner_radius(), "k_radius_s1": f.k_radius(f.s1),
            "sigma_radius_s1": f.sigma_radius(f.s1), "varrho_radius": f.varrho_radius(),
        },
        "d_ball": f.d_ball(),
        "target_rate": f.target_rate(),
    })
}

fn trajectory_summary(traj: &Trajectory, frame: &simulator::SpectralFrame) -> Value {
    let fit = simulator::rate_fit_trajectory(traj, frame).ok();
    json!({
        "d": traj.d, "exit_s": traj.exit_s, "s_final": traj.final_state.s,
        "final_margins": traj.final_state.margins, "final_projection": traj.final_projection(),
        "rate_fit": fit, "target_rate": frame.target_rate(),
        "classification": simulator::type_classify(&simulator::rate_window(traj, frame, 0.5), &Default::default()),
        "fallback_steps": traj.fallback_steps, "newton_iterations": traj.newton_iterations,
        "factorizations": traj.factorizations,
    })
}

fn build_sim(cfg: &RunConfig) -> std::result::Result<Model, Failure> {
    let p = cfg.problem()?;
    Ok(Model::build(&p, &cfg.model_options())?)
}

fn check_region(traj: &Trajectory, s2: f64, strict: bool) -> Step {
    match traj.exit_s {
        Some(e) if strict && e < s2 => Err(Failure::Region { exit_s: e, s2 }),
        _ => Ok(()),
    }
}

fn simulate(cfg: &RunConfig, out: &mut Outputs, strict: bool) -> Step {
    let model = build_sim(cfg)?;
    let frame = &model.frame;
    let sim = Simulator::new(&model, &cfg.grid_options(frame)?, cfg.evolve_options())?;
    let d = cfg.d.clone().unwrap_or_else(|| vec![0.0; frame.pi.len()]);
    if d.len() != frame.pi.len() {
        return Err(Failure::Schema(format!("d has {} entries; Pi = {:?}", d.len(), frame.pi)));
    }
    let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm <= frame.d_ball()) {
        return Err(Failure::Schema(format!("|d| = {norm:.4e} exceeds the admissible radius {:.4e}", frame.d_ball())));
    }
    let state = sim.initial_state(&d)?;
    let traj = sim.evolve(&state, cfg.s_end_value(frame))?;
    out.json("frame.json", &frame_json(&model))?;
    out.write("trajectory.csv", &traj.csv(&frame.pi))?;
    out.json("simulate.json", &trajectory_summary(&traj, frame))?;
    check_region(&traj, cfg.s2_value(frame), strict)
}

fn shoot(cfg: &RunConfig, out: &mut Outputs, strict: bool) -> Step {
    let model = build_sim(cfg)?;
    let frame = &model.frame;
    let sim = Simulator::new(&model, &cfg.grid_options(frame)?, cfg.evolve_options())?;
    let s2 = cfg.s2_value(frame);
    let opts = ShootOptions { s2, ..cfg.shoot.unwrap_or_default() };
    let (report, _) = sim.shoot(&opts)?;
    out.json("frame.json", &frame_json(&model))?;
    out.json("shoot.json", &report)?;
    let state = sim.initial_state(&report.d_star)?;
    let traj = sim.evolve(&state, cfg.s_end_value(frame))?;
    out.write("trajectory.csv", &traj.csv(&frame.pi))?;
    out.json("simulate.json", &trajectory_summary(&traj, frame))?;
    check_region(&traj, s2, strict)
}

/// Columns of a trajectory CSV needed by the rate fit.
pub fn read_trajectory_csv(text: &str) -> crate::Result<Vec<(f64, f64, bool)>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Config("empty trajectory".into()))?.split(',').collect();
    let col = |name: &str| {
        header.iter().position(|h| *h == name).ok_or_else(|| Error::Config(format!("trajectory lacks column {name}")))
    };
    let (cs, cp) = (col("s")?, col("sup_phi")?);
    let margins = [col("margins_inner")?, col("margins_mid")?, col("margins_outer")?];
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |k: usize| -> crate::Result<f64> {
                f.get(k)
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| Error::Config(format!("malformed trajectory row {l:?}")))
            };
            let inside = margins.iter().map(|&k| num(k)).collect::<crate::Result<Vec<_>>>()?.iter().all(|m| *m > 0.0);
            Ok((num(cs)?, num(cp)?, inside))
        })
        .collect()
}

fn rate_fit_cmd(cfg: &RunConfig, out: &mut Outputs) -> Step {
    let path = cfg.trajectory.as_ref().ok_or_else(|| Failure::Schema("rate-fit needs a trajectory CSV".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Schema(format!("{}: {e}", path.display())))?;
    let rows = read_trajectory_csv(&text)?;
    let s0 = rows.first().map(|r| r.0).ok_or_else(|| Failure::Schema("trajectory has no rows".into()))?;
    let window: Vec<(f64, f64)> =
        rows.iter().take_while(|r| r.2).filter(|r| r.0 >= s0 + 0.5).map(|r| (r.0, r.1)).collect();
    let (target, min_window) = if cfg.n.is_some() && cfg.q.is_some() {
        let model = build_sim(cfg)?;
        (Some(model.frame.target_rate()), 1.0 / model.frame.omega)
    } else {
        (None, cfg.min_window.unwrap_or(0.0))
    };
    let fit = simulator::rate_fit(&window, min_window)?;
    out.json(
        "rate_fit.json",
        &json!({
            "fit": fit, "target_rate": target,
            "relative_deviation": target.map(|t| (fit.slope - t).abs() / t),
            "classification": simulator::type_classify(&window, &Default::default()),
        }),
    )?;
    Ok(())
}

fn scan(cfg: &RunConfig, out: &mut Outputs) -> Step {
    let sc = cfg.scan.clone().unwrap_or_default();
    if sc.n.iter().any(|n| *n < 3) || sc.q.iter().any(|q| !(*q > 1.0)) {
        return Err(Failure::Schema("scan needs n >= 3 and q > 1".into()));
    }
    let cells = angular::jl_scan(&sc.n, &sc.q, intervals(cfg));
    let mut csv = String::from(angular::ScanCell::csv_header());
    csv.push_str(",error\n");
    for c in &cells {
        let class = c.class.map(|k| k.to_string()).unwrap_or_default();
        let _ = write!(csv, "{},{},{},{},{},", c.n, fmt_f64(c.q), fmt_f64(c.k), fmt_f64(c.c_h), class);
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            fmt_f64(c.kappa1),
            fmt_f64(c.mu1),
            fmt_f64(c.gamma),
            c.error.as_deref().unwrap_or("").replace(',', ";")
        );
    }
    out.write("scan.csv", &csv)?;
    let thresholds: Vec<Value> = angular::empirical_thresholds(&cells)
        .into_iter()
        .map(|(n, q)| json!({ "n": n, "smallest_supercritical_q": q }))
        .collect();
    out.json("scan.json", &json!({ "cells": cells.len(), "thresholds": thresholds }))?;
    Ok(())
}
