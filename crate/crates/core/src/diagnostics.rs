//! Sampled property suites: pointwise flux inequalities, L2 contraction, energy
//! decay, steady states, Jacobian accuracy, Newton tails and projection rates.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{observed_order, CosineSolution, ManufacturedData, ManufacturedSolution};
use crate::assembly::quadrature::QuadratureRule;
use crate::assembly::{
    assemble_step_jacobian, assemble_step_residual, total_variation, ConstantFidelity, FluxParams, NoData, ProblemData,
};
use crate::experiment::{run_manufactured, ManufacturedCase, StepRule};
use crate::gdm::{DiscreteField, GradientDiscretisation, P1Conforming};
use crate::interpolator::{project, projection_diagnostics, ProjectionProblem};
use crate::mesh::Point;
use crate::newton::{classify_tail, NewtonConfig, TailVerdict};
use crate::solver::{run_time_loop, InitialPolicy, SchemeParams, TimeGrid};

/// Outcome of one property suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub checks: usize,
    pub violations: usize,
    /// Smallest slack observed (negative means violated), in the suite's own units.
    pub margin: f64,
    pub detail: String,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: {} checks, {} violations, margin {:.3e}; {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.checks,
            self.violations,
            self.margin,
            self.detail
        )
    }
}

/// Settings shared by the suites; the defaults reproduce the reference configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseSettings {
    pub epsilon: f64,
    pub lambda: f64,
    pub final_time: f64,
    pub dt: f64,
    pub seed: u64,
    pub samples: usize,
    pub pairs: usize,
    pub newton: NewtonConfig,
    /// Slack allowed in pointwise and per-step comparisons.
    pub tolerance: f64,
}

impl Default for DiagnoseSettings {
    fn default() -> Self {
        Self {
            epsilon: 2e-5,
            lambda: 1.0,
            final_time: 1e-2,
            dt: 2e-5,
            seed: 0,
            samples: 100_000,
            pairs: 20,
            newton: NewtonConfig::default(),
            tolerance: 1e-12,
        }
    }
}

impl DiagnoseSettings {
    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    fn grid(&self) -> Result<TimeGrid, String> {
        TimeGrid::with_step(self.final_time, self.dt).map_err(|e| e.to_string())
    }
}

/// A vector with log-uniform magnitude in `[1e-4, 1e2]` and uniform direction.
fn sample_vector(rng: &mut impl Rng) -> [f64; 2] {
    let r = 10f64.powf(rng.random_range(-4.0..2.0));
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    [r * a.cos(), r * a.sin()]
}

fn sample_epsilon(rng: &mut impl Rng) -> f64 {
    10f64.powf(rng.random_range(-5.0..0.0))
}

fn norm(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

fn pointwise_suite(
    name: &str,
    settings: &DiagnoseSettings,
    stream: u64,
    slack: impl Fn(&mut ChaCha8Rng) -> f64,
) -> SuiteResult {
    let mut rng = settings.rng(stream);
    let mut margin = f64::INFINITY;
    let mut violations = 0;
    for _ in 0..settings.samples {
        let s = slack(&mut rng);
        margin = margin.min(s);
        if s < -settings.tolerance {
            violations += 1;
        }
    }
    SuiteResult {
        name: name.into(),
        passed: violations == 0,
        checks: settings.samples,
        violations,
        margin,
        detail: format!("seed {}", settings.seed),
    }
}

/// `(flux(mu) - flux(nu)) . (mu - nu) >= (1 - |nu| / s_nu) |mu - nu|^2 / s_mu`.
pub fn flux_monotonicity(settings: &DiagnoseSettings) -> SuiteResult {
    pointwise_suite("flux monotonicity", settings, 1, |rng| {
        let (mu, nu, eps) = (sample_vector(rng), sample_vector(rng), sample_epsilon(rng));
        let p = FluxParams::new(eps, 0.0).expect("positive epsilon");
        let (fm, fn_) = (p.flux(mu), p.flux(nu));
        let d = [mu[0] - nu[0], mu[1] - nu[1]];
        let lhs = (fm[0] - fn_[0]) * d[0] + (fm[1] - fn_[1]) * d[1];
        let rhs = (1.0 - norm(nu) / p.density(nu)) * (d[0] * d[0] + d[1] * d[1]) / p.density(mu);
        lhs - rhs
    })
}

/// `|sqrt(eps^2 + |mu|^2) - sqrt(eps^2 + |nu|^2)| <= |mu - nu|`.
pub fn density_lipschitz(settings: &DiagnoseSettings) -> SuiteResult {
    pointwise_suite("density Lipschitz bound", settings, 2, |rng| {
        let (mu, nu, eps) = (sample_vector(rng), sample_vector(rng), sample_epsilon(rng));
        let p = FluxParams::new(eps, 0.0).expect("positive epsilon");
        norm([mu[0] - nu[0], mu[1] - nu[1]]) - (p.density(mu) - p.density(nu)).abs()
    })
}

/// `|mu|^2 / sqrt(eps^2 + |mu|^2) >= |mu| - eps`.
pub fn coercivity_relation(settings: &DiagnoseSettings) -> SuiteResult {
    pointwise_suite("coercivity relation", settings, 3, |rng| {
        let (mu, eps) = (sample_vector(rng), sample_epsilon(rng));
        let p = FluxParams::new(eps, 0.0).expect("positive epsilon");
        let m2 = mu[0] * mu[0] + mu[1] * mu[1];
        m2 / p.density(mu) - (m2.sqrt() - eps)
    })
}

/// Random smooth function `sum_{k,l <= 3} a_kl cos(k pi x) cos(l pi y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomCosineField {
    coefficients: [[f64; 4]; 4],
}

impl RandomCosineField {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut coefficients = [[0.0; 4]; 4];
        for (k, row) in coefficients.iter_mut().enumerate() {
            for (l, a) in row.iter_mut().enumerate() {
                *a = rng.random_range(-1.0..1.0) / (1 + k + l) as f64;
            }
        }
        Self { coefficients }
    }

    pub fn value(&self, p: Point) -> f64 {
        let pi = std::f64::consts::PI;
        let mut v = 0.0;
        for (k, row) in self.coefficients.iter().enumerate() {
            for (l, a) in row.iter().enumerate() {
                v += a * (k as f64 * pi * p[0]).cos() * (l as f64 * pi * p[1]).cos();
            }
        }
        v
    }

    pub fn gradient(&self, p: Point) -> [f64; 2] {
        let pi = std::f64::consts::PI;
        let mut g = [0.0; 2];
        for (k, row) in self.coefficients.iter().enumerate() {
            for (l, a) in row.iter().enumerate() {
                let (kx, ly) = (k as f64 * pi, l as f64 * pi);
                g[0] -= a * kx * (kx * p[0]).sin() * (ly * p[1]).cos();
                g[1] -= a * ly * (kx * p[0]).cos() * (ly * p[1]).sin();
            }
        }
        g
    }
}

fn l2_distance(gd: &P1Conforming, a: &DiscreteField, b: &DiscreteField) -> f64 {
    let d: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect();
    gd.mass_matrix().quadratic_form(&d).max(0.0).sqrt()
}

fn failed(name: &str, detail: String) -> SuiteResult {
    SuiteResult {
        name: name.into(),
        passed: false,
        checks: 0,
        violations: 1,
        margin: f64::NEG_INFINITY,
        detail,
    }
}

/// Runs with different initial data and the same forcing never move apart in L2.
pub fn l2_contraction(settings: &DiagnoseSettings, n: usize) -> SuiteResult {
    let name = "L2 contraction";
    let grid = match settings.grid() {
        Ok(g) => g,
        Err(e) => return failed(name, e),
    };
    let flux = match FluxParams::new(settings.epsilon, settings.lambda) {
        Ok(f) => f,
        Err(e) => return failed(name, e.to_string()),
    };
    let gd = Arc::new(P1Conforming::structured(n).expect("positive n"));
    let ms = CosineSolution::default();
    let data = ManufacturedData { solution: &ms, params: flux };
    let params = SchemeParams {
        flux,
        grid,
        initial: InitialPolicy::Nodal,
    };
    let mut rng = settings.rng(4);
    let (mut checks, mut violations, mut margin) = (0, 0, f64::INFINITY);
    for pair in 0..settings.pairs {
        let a = RandomCosineField::sample(&mut rng);
        let b = RandomCosineField::sample(&mut rng);
        let ua = DiscreteField::interpolate(gd.clone(), |p| a.value(p));
        let ub = DiscreteField::interpolate(gd.clone(), |p| b.value(p));
        let (ta, tb) = match (
            run_time_loop(&ua, &params, &data, &settings.newton),
            run_time_loop(&ub, &params, &data, &settings.newton),
        ) {
            (Ok((ta, _)), Ok((tb, _))) => (ta, tb),
            (Err(e), _) | (_, Err(e)) => return failed(name, format!("pair {pair}: {e}")),
        };
        let dist: Vec<f64> = ta.iter().zip(&tb).map(|(x, y)| l2_distance(&gd, x, y)).collect();
        for w in dist.windows(2) {
            let slack = w[0] - w[1];
            checks += 1;
            margin = margin.min(slack);
            if slack < -settings.tolerance {
                violations += 1;
            }
        }
    }
    SuiteResult {
        name: name.into(),
        passed: violations == 0,
        checks,
        violations,
        margin,
        detail: format!("{} pairs, n = {n}, seed {}", settings.pairs, settings.seed),
    }
}

/// Without fidelity and forcing the regularised total variation never increases.
pub fn energy_decay(settings: &DiagnoseSettings, n: usize) -> SuiteResult {
    let name = "TV energy decay";
    let grid = match settings.grid() {
        Ok(g) => g,
        Err(e) => return failed(name, e),
    };
    let flux = FluxParams::new(settings.epsilon, 0.0).expect("validated epsilon");
    let gd = Arc::new(P1Conforming::structured(n).expect("positive n"));
    let field = RandomCosineField::sample(&mut settings.rng(5));
    let u0 = DiscreteField::interpolate(gd.clone(), |p| field.value(p));
    let params = SchemeParams {
        flux,
        grid,
        initial: InitialPolicy::Nodal,
    };
    let traj = match run_time_loop(&u0, &params, &NoData, &settings.newton) {
        Ok((t, _)) => t,
        Err(e) => return failed(name, e.to_string()),
    };
    let energies: Vec<f64> = traj.iter().map(|u| total_variation(&gd, u.values(), flux)).collect();
    let (mut violations, mut margin) = (0, f64::INFINITY);
    for w in energies.windows(2) {
        margin = margin.min(w[0] - w[1]);
        if w[1] > w[0] + settings.tolerance {
            violations += 1;
        }
    }
    SuiteResult {
        name: name.into(),
        passed: violations == 0,
        checks: energies.len() - 1,
        violations,
        margin,
        detail: format!(
            "n = {n}, energy {:.6e} -> {:.6e}",
            energies[0],
            energies.last().copied().unwrap_or(f64::NAN)
        ),
    }
}

/// Constant data equal to the fidelity target is a fixed point of every step.
pub fn steady_state(settings: &DiagnoseSettings, n: usize, value: f64) -> SuiteResult {
    let name = "steady state";
    let grid = match settings.grid() {
        Ok(g) => g,
        Err(e) => return failed(name, e),
    };
    let flux = FluxParams::new(settings.epsilon, settings.lambda).expect("validated parameters");
    let gd = Arc::new(P1Conforming::structured(n).expect("positive n"));
    let u0 = DiscreteField::constant(gd, value);
    let params = SchemeParams {
        flux,
        grid,
        initial: InitialPolicy::Nodal,
    };
    let traj = match run_time_loop(&u0, &params, &ConstantFidelity(value), &settings.newton) {
        Ok((t, _)) => t,
        Err(e) => return failed(name, e.to_string()),
    };
    let drift = traj
        .iter()
        .flat_map(|u| u.values().iter().map(|v| (v - value).abs()))
        .fold(0.0, f64::max);
    SuiteResult {
        name: name.into(),
        passed: drift <= settings.tolerance,
        checks: traj.len() - 1,
        violations: usize::from(drift > settings.tolerance),
        margin: settings.tolerance - drift,
        detail: format!("max drift {drift:.3e} over {} steps", traj.len() - 1),
    }
}

/// Relative error of the assembled Jacobian against central differences of the residual.
pub fn jacobian_error(
    u: &DiscreteField,
    u_prev: &DiscreteField,
    dt: f64,
    params: FluxParams,
    data: &dyn ProblemData,
    t: f64,
) -> f64 {
    let j = assemble_step_jacobian(u, dt, params).expect("valid step");
    let dim = u.values().len();
    let mut worst: f64 = 0.0;
    let scale = j.values().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for k in 0..dim {
        let h = 1e-6 * (1.0 + u.values()[k].abs());
        let shifted = |s: f64| {
            let mut v = u.values().to_vec();
            v[k] += s;
            DiscreteField::new(u.discretisation().clone(), v).expect("finite values")
        };
        let rp = assemble_step_residual(&shifted(h), u_prev, dt, params, data, t).expect("valid step");
        let rm = assemble_step_residual(&shifted(-h), u_prev, dt, params, data, t).expect("valid step");
        for i in 0..dim {
            let fd = (rp[i] - rm[i]) / (2.0 * h);
            worst = worst.max((fd - j.get(i, k)).abs() / scale);
        }
    }
    worst
}

/// Assembled Jacobians agree with finite differences on random configurations.
pub fn jacobian_check(settings: &DiagnoseSettings, configurations: usize) -> SuiteResult {
    let mut rng = settings.rng(6);
    let (mut violations, mut margin) = (0, f64::INFINITY);
    for _ in 0..configurations {
        let n = rng.random_range(1..=3);
        let gd = Arc::new(P1Conforming::structured(n).expect("positive n"));
        let eps = 10f64.powf(rng.random_range(-2.0..0.0));
        let params = FluxParams::new(eps, rng.random_range(0.0..2.0)).expect("positive epsilon");
        let field = RandomCosineField::sample(&mut rng);
        let u = DiscreteField::interpolate(gd.clone(), |p| field.value(p));
        let prev = DiscreteField::interpolate(gd, |p| field.value([p[1], p[0]]));
        let dt = 10f64.powf(rng.random_range(-4.0..-1.0));
        let err = jacobian_error(&u, &prev, dt, params, &ConstantFidelity(0.2), dt);
        margin = margin.min(1e-5 - err);
        if err > 1e-5 {
            violations += 1;
        }
    }
    SuiteResult {
        name: "Jacobian finite differences".into(),
        passed: violations == 0,
        checks: configurations,
        violations,
        margin,
        detail: format!("relative tolerance 1e-5, seed {}", settings.seed),
    }
}

/// Counts of [`TailVerdict`]s over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TailCounts {
    pub quadratic: usize,
    pub undetermined: usize,
    pub not_quadratic: usize,
}

impl TailCounts {
    pub fn from_histories(histories: &[Vec<f64>], floors: &[f64]) -> Self {
        let mut c = Self::default();
        for (h, &floor) in histories.iter().zip(floors) {
            match classify_tail(h, floor, 3, TAIL_SPREAD) {
                TailVerdict::Quadratic => c.quadratic += 1,
                TailVerdict::Undetermined => c.undetermined += 1,
                TailVerdict::NotQuadratic => c.not_quadratic += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.quadratic + self.undetermined + self.not_quadratic
    }

    /// Fraction of steps not showing a non-quadratic tail.
    pub fn fraction_consistent(&self) -> f64 {
        1.0 - self.not_quadratic as f64 / self.total().max(1) as f64
    }

    /// Fraction of steps with a measurable tail that is quadratic.
    pub fn fraction_of_determined(&self) -> f64 {
        let determined = self.quadratic + self.not_quadratic;
        if determined == 0 {
            1.0
        } else {
            self.quadratic as f64 / determined as f64
        }
    }
}

/// Largest allowed ratio between the biggest and smallest `r_(k+1) / r_k^2` in a tail.
pub const TAIL_SPREAD: f64 = 100.0;

/// Newton tails of the manufactured run on an `n x n` mesh.
pub fn newton_tails(settings: &DiagnoseSettings, n: usize) -> SuiteResult {
    let name = "Newton quadratic tail";
    let case = ManufacturedCase {
        epsilon: settings.epsilon,
        lambda: settings.lambda,
        final_time: settings.final_time,
        step: StepRule::Fixed(settings.dt),
        initial: InitialPolicy::Nodal,
        newton: settings.newton,
        ..Default::default()
    };
    let gd = Arc::new(P1Conforming::structured(n).expect("positive n"));
    let result = match run_manufactured(gd, &case, &CosineSolution::default()) {
        Ok(r) => r,
        Err(e) => return failed(name, e.to_string()),
    };
    let c = TailCounts::from_histories(&result.report.residual_histories, &result.report.residual_floors);
    let frac = c.fraction_consistent().min(c.fraction_of_determined());
    SuiteResult {
        name: name.into(),
        passed: frac >= 0.9,
        checks: c.total(),
        violations: c.not_quadratic,
        margin: frac - 0.9,
        detail: format!(
            "{} quadratic, {} undetermined, {} not quadratic",
            c.quadratic, c.undetermined, c.not_quadratic
        ),
    }
}

/// Per-mesh measurements of the nonlinear projection of `cos(pi x) cos(pi y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionRate {
    pub n: usize,
    pub h: f64,
    pub grad_l2_error: f64,
    pub max_cell_gradient: f64,
    pub newton_iterations: usize,
}

pub fn projection_rates(
    epsilon: f64,
    sizes: &[usize],
    newton: &NewtonConfig,
) -> Result<Vec<ProjectionRate>, String> {
    let ms = CosineSolution::default();
    let rule = QuadratureRule::degree4();
    sizes
        .iter()
        .map(|&n| {
            let gd = Arc::new(P1Conforming::structured(n).map_err(|e| e.to_string())?);
            let h = gd.mesh().h_mesh();
            let problem = ProjectionProblem::new(gd, epsilon, |p| ms.value(p, 0.0), |p| ms.gradient(p, 0.0), &rule)
                .map_err(|e| e.to_string())?;
            let (field, stats) = project(&problem, newton).map_err(|e| e.to_string())?;
            let d = projection_diagnostics(|p| ms.value(p, 0.0), |p| ms.gradient(p, 0.0), &field, &rule);
            Ok(ProjectionRate {
                n,
                h,
                grad_l2_error: d.grad_l2_error,
                max_cell_gradient: d.max_cell_gradient,
                newton_iterations: stats.iterations,
            })
        })
        .collect()
}

/// Gradient error order of the projection is at least 0.8 and the largest cell gradient
/// grows by at most 10% per refinement.
pub fn projection_suite(epsilon: f64, sizes: &[usize], newton: &NewtonConfig) -> SuiteResult {
    let name = "projection rates";
    let rates = match projection_rates(epsilon, sizes, newton) {
        Ok(r) => r,
        Err(e) => return failed(name, e),
    };
    let rows: Vec<(f64, f64)> = rates.iter().map(|r| (r.h, r.grad_l2_error)).collect();
    let orders = match observed_order(&rows) {
        Ok(o) => o,
        Err(e) => return failed(name, e.to_string()),
    };
    let growth: Vec<f64> = rates
        .windows(2)
        .map(|w| w[1].max_cell_gradient / w[0].max_cell_gradient)
        .collect();
    let order_margin = orders.iter().map(|o| o - 0.8).fold(f64::INFINITY, f64::min);
    let growth_margin = growth.iter().map(|g| 1.1 - g).fold(f64::INFINITY, f64::min);
    let violations =
        orders.iter().filter(|&&o| o < 0.8).count() + growth.iter().filter(|&&g| g > 1.1).count();
    SuiteResult {
        name: name.into(),
        passed: violations == 0,
        checks: orders.len() + growth.len(),
        violations,
        margin: order_margin.min(growth_margin),
        detail: format!("eps = {epsilon:e}, gradient orders {orders:.3?}, max-gradient ratios {growth:.3?}"),
    }
}

/// All suites with the reference mesh sizes.
pub fn run_all(settings: &DiagnoseSettings) -> Vec<SuiteResult> {
    vec![
        flux_monotonicity(settings),
        density_lipschitz(settings),
        coercivity_relation(settings),
        jacobian_check(settings, 50),
        steady_state(settings, 4, 0.37),
        energy_decay(settings, 8),
        l2_contraction(settings, 4),
        newton_tails(settings, 8),
        projection_suite(settings.epsilon, &[8, 16, 32], &settings.newton),
    ]
}
