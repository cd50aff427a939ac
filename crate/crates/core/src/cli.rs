//! Command-line front end: single solves, convergence sweeps, projections and
//! property diagnostics driven by a [`RunConfig`] file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use crate::analysis::{
    error_e1, error_e2, gradient_l1_error, l2_error, observed_order, ConvergenceReport, CosineSolution,
    ManufacturedData, ManufacturedSolution,
};
use crate::assembly::quadrature::QuadratureRule;
use crate::assembly::{ConstantFidelity, FluxParams, ProblemData};
use crate::config::{InitialData, MeshSource, Mode, RunConfig};
use crate::diagnostics::{run_all, DiagnoseSettings, RandomCosineField};
use crate::experiment::{convergence_sweep, ManufacturedCase};
use crate::gdm::{GradientDiscretisation, P1Conforming};
use crate::interpolator::{initial_field, project, projection_diagnostics, ProjectionProblem};
use crate::mesh::{Point, TriMesh};
use crate::solver::{run_time_loop, SchemeParams, SolveReport, TimeGrid};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PROPERTY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NONCONVERGENCE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "tvflow", version, about = "Regularised total variation flow solver")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one time-dependent solve.
    Solve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a manufactured-solution sweep over meshes.
    Convergence {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compute the nonlinear projection of cos(pi x) cos(pi y).
    Project {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the property suites.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
    },
    /// Mesh utilities.
    Mesh {
        #[command(subcommand)]
        command: MeshCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum MeshCommand {
    /// Write the structured n x n mesh of the unit square.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failure carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn other(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_PROPERTY,
            message: message.into(),
        }
    }
}

type CliResult = Result<i32, Failure>;

/// Runs a parsed command line and returns the exit code; messages go to stdout/stderr.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Solve { config } => load_config(&config, Mode::Solve).and_then(|c| run_solve(&c)),
        Command::Convergence { config } => load_config(&config, Mode::Convergence).and_then(|c| run_convergence(&c)),
        Command::Project { config } => load_config(&config, Mode::Project).and_then(|c| run_project(&c)),
        Command::Diagnose { config } => load_config(&config, Mode::Diagnose).and_then(|c| run_diagnose(&c)),
        Command::Mesh {
            command: MeshCommand::Gen { n, out },
        } => mesh_gen(n, &out),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn load_config(path: &Path, expected: Mode) -> Result<RunConfig, Failure> {
    let cfg = RunConfig::load(path).map_err(|e| Failure::config(e.to_string()))?;
    if cfg.mode != expected {
        return Err(Failure::config(format!(
            "config {} has mode {:?} but the {:?} command was invoked",
            path.display(),
            cfg.mode,
            expected
        )));
    }
    Ok(cfg)
}

fn mesh_gen(n: usize, out: &Path) -> CliResult {
    let mesh = TriMesh::generate_structured(n).map_err(|e| Failure::config(e.to_string()))?;
    mesh.save_file(out)
        .map_err(|e| Failure::other(format!("cannot write {}: {e}", out.display())))?;
    println!(
        "wrote {} ({} vertices, {} triangles)",
        out.display(),
        mesh.num_vertices(),
        mesh.num_cells()
    );
    Ok(EXIT_OK)
}

/// Formats a float with 16 significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.15e}")
}

/// Comma-separated table with a header row and LF line endings.
#[derive(Debug, Clone, PartialEq)]
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self {
            text: format!("{}\n", header.join(",")),
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        let _ = writeln!(self.text, "{}", fields.join(","));
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<PathBuf, Failure> {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::other(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(name);
        std::fs::write(&path, &self.text)
            .map_err(|e| Failure::other(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

fn single_mesh(cfg: &RunConfig) -> Result<(String, Arc<P1Conforming>), Failure> {
    match &cfg.mesh {
        MeshSource::Structured(n) => Ok((
            format!("n{n}"),
            Arc::new(P1Conforming::structured(*n).map_err(|e| Failure::config(e.to_string()))?),
        )),
        MeshSource::File(path) => {
            let mesh = TriMesh::load_file(path).map_err(|e| Failure::config(format!("mesh {}: {e}", path.display())))?;
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "mesh".into());
            Ok((id, Arc::new(P1Conforming::new(mesh))))
        }
        MeshSource::Sweep(_) => Err(Failure::config("this mode needs a single mesh (mesh.n or mesh.file)")),
    }
}

fn meshes(cfg: &RunConfig) -> Result<Vec<(String, Arc<P1Conforming>)>, Failure> {
    match &cfg.mesh {
        MeshSource::Sweep(ns) => ns
            .iter()
            .map(|&n| {
                P1Conforming::structured(n)
                    .map(|gd| (format!("n{n}"), Arc::new(gd)))
                    .map_err(|e| Failure::config(e.to_string()))
            })
            .collect(),
        _ => single_mesh(cfg).map(|m| vec![m]),
    }
}

fn nonconvergence(message: String) -> Failure {
    Failure {
        code: EXIT_NONCONVERGENCE,
        message,
    }
}

/// Initial datum and its gradient for a non-manufactured solve.
fn initial_datum(cfg: &RunConfig) -> (Box<dyn Fn(Point) -> f64>, Box<dyn Fn(Point) -> [f64; 2]>) {
    match cfg.u0 {
        InitialData::Cosine => {
            let ms = CosineSolution {
                amplitude: cfg.u0_value,
            };
            (Box::new(move |p| ms.value(p, 0.0)), Box::new(move |p| ms.gradient(p, 0.0)))
        }
        InitialData::Constant => {
            let c = cfg.u0_value;
            (Box::new(move |_| c), Box::new(|_| [0.0, 0.0]))
        }
        InitialData::Random => {
            use rand::SeedableRng;
            let field = RandomCosineField::sample(&mut rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed));
            let g = field.clone();
            (Box::new(move |p| field.value(p)), Box::new(move |p| g.gradient(p)))
        }
    }
}

fn summary_csv(grid: &TimeGrid, report: &SolveReport) -> Csv {
    let mut csv = Csv::new(&["step", "t", "l2_norm", "tv_energy", "newton_iters", "final_residual"]);
    for m in 0..=grid.num_steps() {
        let (its, res) = if m == 0 {
            ("0".to_string(), fmt_float(0.0))
        } else {
            (
                report.newton_iterations[m - 1].to_string(),
                fmt_float(report.final_residuals[m - 1]),
            )
        };
        csv.row(&[
            m.to_string(),
            fmt_float(grid.times()[m]),
            fmt_float(report.l2_norms[m]),
            fmt_float(report.tv_energies[m]),
            its,
            res,
        ]);
    }
    csv
}

pub fn run_solve(cfg: &RunConfig) -> CliResult {
    let (mesh_id, gd) = single_mesh(cfg)?;
    let h = gd.mesh().h_mesh();
    let flux = FluxParams::new(cfg.epsilon, cfg.lambda).map_err(|e| Failure::config(e.to_string()))?;
    let grid = TimeGrid::with_step(cfg.final_time, cfg.step.dt(h)).map_err(|e| Failure::config(e.to_string()))?;
    let ms = CosineSolution::default();
    let (u0, grad_u0) = if cfg.manufactured {
        (
            Box::new(move |p| ms.value(p, 0.0)) as Box<dyn Fn(Point) -> f64>,
            Box::new(move |p| ms.gradient(p, 0.0)) as Box<dyn Fn(Point) -> [f64; 2]>,
        )
    } else {
        initial_datum(cfg)
    };
    let u0 = initial_field(gd.clone(), cfg.initial, cfg.epsilon, u0, grad_u0, &cfg.newton)
        .map_err(|e| nonconvergence(format!("initial projection: {e}")))?;
    let manufactured = ManufacturedData { solution: &ms, params: flux };
    let fidelity = ConstantFidelity(cfg.g);
    let data: &dyn ProblemData = if cfg.manufactured { &manufactured } else { &fidelity };
    let params = SchemeParams {
        flux,
        grid,
        initial: cfg.initial,
    };
    let (trajectory, report) = run_time_loop(&u0, &params, data, &cfg.newton).map_err(|e| {
        let step = e.step_index().map(|s| format!(" at step {s}")).unwrap_or_default();
        if e.is_nonconvergence() {
            nonconvergence(format!("Newton did not converge{step}: {e}"))
        } else {
            Failure::other(e.to_string())
        }
    })?;
    let out = cfg.resolved_out_dir();
    let path = summary_csv(&params.grid, &report).write(&out, "summary.csv")?;
    println!(
        "{mesh_id}: {} steps, max {} Newton iterations, summary in {}",
        params.grid.num_steps(),
        report.max_newton_iterations(),
        path.display()
    );
    if cfg.manufactured {
        let rule = QuadratureRule::degree4();
        let mut csv = Csv::new(&["step", "t", "l2_error", "grad_l1_error"]);
        for (m, u) in trajectory.iter().enumerate() {
            let t = params.grid.times()[m];
            csv.row(&[
                m.to_string(),
                fmt_float(t),
                fmt_float(l2_error(u, |p| ms.value(p, t), &rule)),
                fmt_float(gradient_l1_error(u, |p| ms.gradient(p, t), &rule)),
            ]);
        }
        csv.write(&out, "errors.csv")?;
        let e1 = error_e1(&trajectory, &ms, &params.grid).map_err(|e| Failure::other(e.to_string()))?;
        let e2 = error_e2(&trajectory, &ms, &params.grid, cfg.e2_denominator).map_err(|e| Failure::other(e.to_string()))?;
        let mut norms = Csv::new(&["mesh_id", "h", "dt", "E1", "E2"]);
        norms.row(&[mesh_id, fmt_float(h), fmt_float(params.grid.dt_max()), fmt_float(e1), fmt_float(e2)]);
        norms.write(&out, "error_norms.csv")?;
        println!("E1 = {e1:.6e}, E2 = {e2:.6e}");
    }
    Ok(EXIT_OK)
}

fn optional(x: Option<&f64>) -> String {
    x.map(|v| fmt_float(*v)).unwrap_or_default()
}

/// Convergence table with the orders attached to the finer mesh of each pair.
pub fn convergence_csv(report: &ConvergenceReport, timing: bool) -> Csv {
    let mut csv = Csv::new(&[
        "mesh_id",
        "h",
        "dt",
        "E1",
        "E2",
        "order_E1",
        "order_E2",
        "max_newton_iters",
        "wall_seconds",
    ]);
    for (i, r) in report.rows.iter().enumerate() {
        let order = |o: &[f64]| if i == 0 { String::new() } else { optional(o.get(i - 1)) };
        csv.row(&[
            r.mesh_id.clone(),
            fmt_float(r.h),
            fmt_float(r.dt),
            fmt_float(r.e1),
            fmt_float(r.e2),
            order(&report.order_e1),
            order(&report.order_e2),
            r.max_newton_iterations.to_string(),
            fmt_float(if timing { r.wall_seconds } else { 0.0 }),
        ]);
    }
    csv
}

/// `(ln h, ln E1, ln E2)` per mesh for log-log plots.
pub fn loglog_csv(report: &ConvergenceReport) -> Csv {
    let mut csv = Csv::new(&["mesh_id", "ln_h", "ln_E1", "ln_E2"]);
    for r in &report.rows {
        csv.row(&[r.mesh_id.clone(), fmt_float(r.h.ln()), fmt_float(r.e1.ln()), fmt_float(r.e2.ln())]);
    }
    csv
}

pub fn run_convergence(cfg: &RunConfig) -> CliResult {
    if !cfg.manufactured {
        return Err(Failure::config("convergence mode needs manufactured = true"));
    }
    let meshes = meshes(cfg)?;
    let case = ManufacturedCase {
        epsilon: cfg.epsilon,
        lambda: cfg.lambda,
        final_time: cfg.final_time,
        step: cfg.step,
        initial: cfg.initial,
        newton: cfg.newton,
        e2_denominator: cfg.e2_denominator,
    };
    let out = cfg.resolved_out_dir();
    match convergence_sweep(meshes, &case, &CosineSolution::default()) {
        Ok((report, _)) => {
            let path = convergence_csv(&report, cfg.timing).write(&out, "convergence.csv")?;
            loglog_csv(&report).write(&out, "convergence_loglog.csv")?;
            print!("{}", convergence_csv(&report, cfg.timing).as_str());
            println!("written to {}", path.display());
            Ok(EXIT_OK)
        }
        Err((rows, e)) => {
            let mut csv = Csv::new(&["mesh_id", "h", "dt", "E1", "E2", "max_newton_iters", "status"]);
            for r in &rows {
                csv.row(&[
                    r.mesh_id.clone(),
                    fmt_float(r.h),
                    fmt_float(r.dt),
                    fmt_float(r.e1),
                    fmt_float(r.e2),
                    r.max_newton_iterations.to_string(),
                    "ok".into(),
                ]);
            }
            csv.row(&[
                "aborted".into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                format!("\"{}\"", e.to_string().replace('"', "'")),
            ]);
            csv.write(&out, "convergence_partial.csv")?;
            let step = e.failed_step().map(|s| format!(" (step {s})")).unwrap_or_default();
            let message = format!("sweep aborted{step}: {e}; partial results in convergence_partial.csv");
            Err(if e.is_nonconvergence() {
                nonconvergence(message)
            } else {
                Failure::other(message)
            })
        }
    }
}

pub fn run_project(cfg: &RunConfig) -> CliResult {
    let meshes = meshes(cfg)?;
    let ms = CosineSolution::default();
    let rule = QuadratureRule::degree4();
    let mut rows = Vec::new();
    for (id, gd) in meshes {
        let h = gd.mesh().h_mesh();
        let problem = ProjectionProblem::new(gd, cfg.epsilon, |p| ms.value(p, 0.0), |p| ms.gradient(p, 0.0), &rule)
            .map_err(|e| Failure::config(e.to_string()))?;
        let (field, stats) =
            project(&problem, &cfg.newton).map_err(|e| nonconvergence(format!("projection on {id}: {e}")))?;
        let d = projection_diagnostics(|p| ms.value(p, 0.0), |p| ms.gradient(p, 0.0), &field, &rule);
        rows.push((id, h, d, stats.iterations));
    }
    let orders = if rows.len() >= 2 {
        let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.1, r.2.grad_l2_error)).collect();
        observed_order(&pairs).map_err(|e| Failure::config(e.to_string()))?
    } else {
        Vec::new()
    };
    let mut csv = Csv::new(&[
        "mesh_id",
        "h",
        "grad_l2_error",
        "grad_l1_error",
        "value_l2_error",
        "max_cell_gradient",
        "newton_iters",
        "order_grad_l2",
    ]);
    for (i, (id, h, d, its)) in rows.iter().enumerate() {
        csv.row(&[
            id.clone(),
            fmt_float(*h),
            fmt_float(d.grad_l2_error),
            fmt_float(d.grad_l1_error),
            fmt_float(d.value_l2_error),
            fmt_float(d.max_cell_gradient),
            its.to_string(),
            if i == 0 { String::new() } else { optional(orders.get(i - 1)) },
        ]);
    }
    let path = csv.write(&cfg.resolved_out_dir(), "projection.csv")?;
    print!("{}", csv.as_str());
    println!("written to {}", path.display());
    Ok(EXIT_OK)
}

pub fn run_diagnose(cfg: &RunConfig) -> CliResult {
    let h = match &cfg.mesh {
        MeshSource::Structured(n) => std::f64::consts::SQRT_2 / *n as f64,
        _ => std::f64::consts::SQRT_2 / 4.0,
    };
    let settings = DiagnoseSettings {
        epsilon: cfg.epsilon,
        lambda: cfg.lambda,
        final_time: cfg.final_time,
        dt: cfg.step.dt(h),
        seed: cfg.seed,
        samples: cfg.diagnose.samples,
        pairs: cfg.diagnose.pairs,
        newton: cfg.newton,
        ..Default::default()
    };
    println!("seed {}", settings.seed);
    let results = run_all(&settings);
    let mut csv = Csv::new(&["suite", "passed", "checks", "violations", "margin"]);
    for r in &results {
        println!("{r}");
        csv.row(&[
            r.name.replace(' ', "_"),
            r.passed.to_string(),
            r.checks.to_string(),
            r.violations.to_string(),
            fmt_float(r.margin),
        ]);
    }
    csv.write(&cfg.resolved_out_dir(), "diagnose.csv")?;
    let failures: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failures.is_empty() {
        Ok(EXIT_OK)
    } else {
        println!("failed: {}", failures.join(", "));
        Ok(EXIT_PROPERTY)
    }
}
