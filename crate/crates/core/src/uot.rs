//! Entropic unbalanced optimal transport between unit-mass objects and anchors.
//!
//! The objective minimized over `pi >= 0` is
//!
//! ```text
//! <C, pi> + eps * R(pi) + rho * KL(pi 1 | a) + rho * KL(pi^T 1 | b)
//! ```
//!
//! with `KL(x | y) = sum x log(x / y) - x + y` and `0 log 0 = 0`. The
//! regularizer `R` is either `KL(pi | a b^T)` (the default) or the plain
//! `sum pi (log pi - 1)`; see [`Regularizer`]. Setting `rho = inf` gives the
//! balanced problem, where both marginals are hard constraints and the
//! objective reduces to the first two terms.
//!
//! [`solve_uot`] runs log-domain generalized Sinkhorn on the dual potentials.
//! [`brute_force_uot`] is an unrelated primal solver (multi-start damped
//! Newton) for tiny problems and exists to check the first one.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cost assigned to excluded (object, anchor) pairs.
///
/// Entries at or above this value are treated as structural zeros of the
/// plan; `exp(-1e6 / eps)` underflows to zero for any practical `eps` anyway.
pub const SENTINEL_COST: f64 = 1e6;

/// Largest number of plan entries [`brute_force_uot`] accepts.
pub const BRUTE_FORCE_MAX_CELLS: usize = 9;

/// Entropic regularizer of the plan.
///
/// Both are strictly convex and give the same plan in the balanced problem.
/// With soft marginals, `Entropy` rewards spreading mass over many cells, so
/// the total transported mass can grow well past the object count.
/// `RelativeEntropy` measures the plan against the product of the marginals
/// and does not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    /// `KL(pi | a b^T)`.
    #[default]
    RelativeEntropy,
    /// `sum pi (log pi - 1)`.
    Entropy,
}

#[derive(Debug, Clone)]
pub struct TransportProblem {
    cost: Array2<f64>,
    a: Array1<f64>,
    b: Array1<f64>,
    epsilon: f64,
    rho: f64,
    regularizer: Regularizer,
}

impl TransportProblem {
    /// Problem with unit mass per object (row) and marginal weight `rho = 1`.
    pub fn new(cost: Array2<f64>, b: Array1<f64>, epsilon: f64) -> Result<Self> {
        let (m, n) = cost.dim();
        if m == 0 || n == 0 {
            return Err(Error::EmptyInput("transport problem needs m >= 1 and n >= 1"));
        }
        if b.len() != n {
            return Err(Error::Dimension {
                context: "anchor mass vector",
                expected: (n, 1),
                got: (b.len(), 1),
            });
        }
        if cost.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidProblem(
                "cost entries must be finite and nonnegative".into(),
            ));
        }
        if b.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidProblem(
                "anchor masses must be finite and nonnegative".into(),
            ));
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::InvalidProblem(format!("epsilon must be > 0, got {epsilon}")));
        }
        Ok(Self {
            cost,
            a: Array1::ones(m),
            b,
            epsilon,
            rho: 1.0,
            regularizer: Regularizer::default(),
        })
    }

    pub fn with_regularizer(mut self, regularizer: Regularizer) -> Self {
        self.regularizer = regularizer;
        self
    }

    /// Replace the KL marginal weight. `f64::INFINITY` selects the balanced problem.
    pub fn with_marginal_weight(mut self, rho: f64) -> Result<Self> {
        if rho.is_nan() || rho <= 0.0 {
            return Err(Error::InvalidProblem(format!("marginal weight must be > 0, got {rho}")));
        }
        self.rho = rho;
        Ok(self)
    }

    pub fn cost(&self) -> ArrayView2<'_, f64> {
        self.cost.view()
    }
    pub fn a(&self) -> &Array1<f64> {
        &self.a
    }
    pub fn b(&self) -> &Array1<f64> {
        &self.b
    }
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn rho(&self) -> f64 {
        self.rho
    }
    pub fn regularizer(&self) -> Regularizer {
        self.regularizer
    }
    pub fn is_balanced(&self) -> bool {
        self.rho.is_infinite()
    }
    pub fn shape(&self) -> (usize, usize) {
        self.cost.dim()
    }

    fn is_active(&self, i: usize, j: usize) -> bool {
        self.cost[[i, j]] < SENTINEL_COST && self.b[j] > 0.0
    }

    /// Cost seen by the `sum pi (log pi - 1)` form of the regularizer.
    fn shifted_cost(&self, i: usize, j: usize) -> f64 {
        match self.regularizer {
            Regularizer::Entropy => self.cost[[i, j]],
            Regularizer::RelativeEntropy => self.cost[[i, j]] - self.epsilon * (self.a[i] * self.b[j]).ln(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    pub max_iterations: usize,
    /// Max-norm bound on successive dual potential updates.
    pub tolerance: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub pi: Array2<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl TransportPlan {
    /// Mass leaving each object, `pi 1`.
    pub fn row_sums(&self) -> Array1<f64> {
        self.pi.sum_axis(ndarray::Axis(1))
    }

    /// Mass arriving at each anchor, `pi^T 1`.
    pub fn column_sums(&self) -> Array1<f64> {
        self.pi.sum_axis(ndarray::Axis(0))
    }
}

/// `sum x log(x / y) - x + y` with `0 log 0 = 0`; infinite where `y = 0 < x`.
pub fn generalized_kl(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&x, &y)| {
            if x == 0.0 {
                y
            } else if y == 0.0 {
                f64::INFINITY
            } else {
                x * (x / y).ln() - x + y
            }
        })
        .sum()
}

/// `sum pi (log pi - 1)` with `0 log 0 = 0`.
pub fn entropic_term(pi: ArrayView2<'_, f64>) -> f64 {
    pi.iter()
        .map(|&p| if p > 0.0 { p * (p.ln() - 1.0) } else { 0.0 })
        .sum()
}

/// `KL(pi | a b^T)`; infinite if `pi` puts mass where `a_i b_j = 0`.
pub fn relative_entropy_term(pi: ArrayView2<'_, f64>, a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let mut value = 0.0;
    for ((i, j), &p) in pi.indexed_iter() {
        let q = a[i] * b[j];
        value += if p == 0.0 {
            q
        } else if q == 0.0 {
            f64::INFINITY
        } else {
            p * (p / q).ln() - p + q
        };
    }
    value
}

/// Value of the problem's regularizer at `pi`.
pub fn regularizer_term(pi: ArrayView2<'_, f64>, problem: &TransportProblem) -> f64 {
    match problem.regularizer {
        Regularizer::Entropy => entropic_term(pi),
        Regularizer::RelativeEntropy => relative_entropy_term(pi, &problem.a, &problem.b),
    }
}

/// Value of the transport objective at `pi`.
pub fn uot_objective(pi: ArrayView2<'_, f64>, problem: &TransportProblem) -> Result<f64> {
    if pi.dim() != problem.shape() {
        return Err(Error::Dimension {
            context: "transport plan",
            expected: problem.shape(),
            got: pi.dim(),
        });
    }
    if pi.iter().any(|p| p.is_nan() || *p < 0.0) {
        return Err(Error::InvalidProblem("plan entries must be nonnegative".into()));
    }
    let transport: f64 = pi.iter().zip(problem.cost.iter()).map(|(p, c)| p * c).sum();
    let mut value = transport + problem.epsilon * regularizer_term(pi, problem);
    if !problem.is_balanced() {
        let rows = pi.sum_axis(ndarray::Axis(1));
        let cols = pi.sum_axis(ndarray::Axis(0));
        let (rows, cols) = (rows.to_vec(), cols.to_vec());
        value += problem.rho * generalized_kl(&rows, problem.a.as_slice().unwrap());
        value += problem.rho * generalized_kl(&cols, &problem.b.to_vec());
    }
    Ok(value)
}

/// Sparse view over the entries that can carry mass.
struct Support {
    row_ptr: Vec<usize>,
    row_idx: Vec<(u32, f64)>,
    col_ptr: Vec<usize>,
    col_idx: Vec<(u32, f64)>,
}

impl Support {
    fn build(problem: &TransportProblem) -> Self {
        let (m, n) = problem.shape();
        let mut row_ptr = Vec::with_capacity(m + 1);
        let mut row_idx = Vec::new();
        let mut col_count = vec![0usize; n];
        row_ptr.push(0);
        for i in 0..m {
            for j in 0..n {
                if problem.is_active(i, j) {
                    row_idx.push((j as u32, problem.shifted_cost(i, j)));
                    col_count[j] += 1;
                }
            }
            row_ptr.push(row_idx.len());
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        col_ptr.push(0);
        for c in &col_count {
            col_ptr.push(col_ptr.last().unwrap() + c);
        }
        let mut fill = col_ptr.clone();
        let mut col_idx = vec![(0u32, 0.0); row_idx.len()];
        for i in 0..m {
            for &(j, c) in &row_idx[row_ptr[i]..row_ptr[i + 1]] {
                col_idx[fill[j as usize]] = (i as u32, c);
                fill[j as usize] += 1;
            }
        }
        Self {
            row_ptr,
            row_idx,
            col_ptr,
            col_idx,
        }
    }
}

/// `log sum exp((pot[k] - c) / eps)` over a sparse slice; `-inf` when empty.
fn log_sum_exp(entries: &[(u32, f64)], pot: &[f64], eps: f64) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &(k, c) in entries {
        max = max.max((pot[k as usize] - c) / eps);
    }
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = entries
        .iter()
        .map(|&(k, c)| ((pot[k as usize] - c) / eps - max).exp())
        .sum();
    max + sum.ln()
}

/// Stepwise generalized Sinkhorn in the log domain.
///
/// Exposed so callers can observe the iterates; [`solve_uot`] is the usual
/// entry point.
pub struct SinkhornSolver<'a> {
    problem: &'a TransportProblem,
    support: Support,
    f: Vec<f64>,
    g: Vec<f64>,
    log_a: Vec<f64>,
    log_b: Vec<f64>,
    damping: f64,
    sweeps: usize,
}

impl<'a> SinkhornSolver<'a> {
    pub fn new(problem: &'a TransportProblem) -> Self {
        let (m, n) = problem.shape();
        let damping = if problem.is_balanced() {
            1.0
        } else {
            problem.rho / (problem.rho + problem.epsilon)
        };
        Self {
            problem,
            support: Support::build(problem),
            f: vec![0.0; m],
            g: vec![0.0; n],
            log_a: problem.a.iter().map(|v| v.ln()).collect(),
            log_b: problem.b.iter().map(|v| v.ln()).collect(),
            damping,
            sweeps: 0,
        }
    }

    /// One row update followed by one column update. Returns the max-norm change
    /// of the potentials.
    pub fn sweep(&mut self) -> f64 {
        let eps = self.problem.epsilon;
        let s = &self.support;
        let mut delta: f64 = 0.0;
        for i in 0..self.f.len() {
            let lse = log_sum_exp(&s.row_idx[s.row_ptr[i]..s.row_ptr[i + 1]], &self.g, eps);
            let next = if lse.is_finite() {
                self.damping * eps * (self.log_a[i] - lse)
            } else {
                0.0
            };
            delta = delta.max((next - self.f[i]).abs());
            self.f[i] = next;
        }
        for j in 0..self.g.len() {
            let lse = log_sum_exp(&s.col_idx[s.col_ptr[j]..s.col_ptr[j + 1]], &self.f, eps);
            let next = if lse.is_finite() {
                self.damping * eps * (self.log_b[j] - lse)
            } else {
                0.0
            };
            delta = delta.max((next - self.g[j]).abs());
            self.g[j] = next;
        }
        self.sweeps += 1;
        delta
    }

    pub fn sweeps(&self) -> usize {
        self.sweeps
    }

    /// Primal plan implied by the current potentials.
    pub fn plan_matrix(&self) -> Array2<f64> {
        let (m, n) = self.problem.shape();
        let eps = self.problem.epsilon;
        let s = &self.support;
        let mut pi = Array2::zeros((m, n));
        for i in 0..m {
            for &(j, c) in &s.row_idx[s.row_ptr[i]..s.row_ptr[i + 1]] {
                pi[[i, j as usize]] = ((self.f[i] + self.g[j as usize] - c) / eps).exp();
            }
        }
        pi
    }
}

/// Solve the entropic transport problem.
///
/// Hitting `max_iterations` is not an error: the plan comes back with
/// `converged = false`.
pub fn solve_uot(problem: &TransportProblem, opts: &SolveOptions) -> Result<TransportPlan> {
    let mut solver = SinkhornSolver::new(problem);
    let mut converged = false;
    while solver.sweeps() < opts.max_iterations {
        if solver.sweep() < opts.tolerance {
            converged = true;
            break;
        }
    }
    let pi = solver.plan_matrix();
    let objective = uot_objective(pi.view(), problem)?;
    Ok(TransportPlan {
        pi,
        objective,
        iterations: solver.sweeps(),
        converged,
    })
}

/// Exhaustive reference solver for problems with at most
/// [`BRUTE_FORCE_MAX_CELLS`] entries.
///
/// Runs [`brute_force_uot_runs`] from eight seeded starts and keeps the best.
pub fn brute_force_uot(problem: &TransportProblem) -> Result<TransportPlan> {
    let runs = brute_force_uot_runs(problem, 8, 0x5eed)?;
    Ok(runs
        .into_iter()
        .min_by(|x, y| x.objective.total_cmp(&y.objective))
        .expect("at least one start"))
}

/// Damped Newton descent on the primal objective from `starts` random
/// feasible points.
///
/// Entries whose anchor mass is zero are fixed at zero (any mass there makes
/// the objective infinite). Every other entry is kept strictly positive by a
/// fraction-to-boundary step rule; Armijo backtracking guarantees descent.
pub fn brute_force_uot_runs(
    problem: &TransportProblem,
    starts: usize,
    seed: u64,
) -> Result<Vec<TransportPlan>> {
    let (m, n) = problem.shape();
    if m * n > BRUTE_FORCE_MAX_CELLS {
        return Err(Error::TooLarge {
            cells: m * n,
            max: BRUTE_FORCE_MAX_CELLS,
        });
    }
    if problem.is_balanced() {
        return Err(Error::InvalidProblem(
            "exhaustive solver handles the unbalanced problem only".into(),
        ));
    }
    let vars: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(_, j)| problem.b[j] > 0.0)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(starts);
    for _ in 0..starts {
        let mut x: Vec<f64> = vars.iter().map(|_| rng.random_range(0.05..2.0)).collect();
        let mut iterations = 0;
        let mut converged = false;
        for _ in 0..500 {
            iterations += 1;
            let (grad, hess) = newton_system(problem, &vars, &x);
            let step = match solve_spd(&hess, &grad) {
                Some(s) => s.into_iter().map(|v| -v).collect::<Vec<f64>>(),
                None => grad.iter().map(|v| -v).collect(),
            };
            let decrement: f64 = -grad.iter().zip(&step).map(|(g, s)| g * s).sum::<f64>();
            if decrement < 1e-16 {
                converged = true;
                break;
            }
            let mut alpha: f64 = 1.0;
            for (xi, si) in x.iter().zip(&step) {
                if *si < 0.0 {
                    alpha = alpha.min(0.99 * xi / -si);
                }
            }
            let f0 = objective_at(problem, &vars, &x);
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = x
                    .iter()
                    .zip(&step)
                    .map(|(xi, si)| (xi + alpha * si).max(1e-300))
                    .collect();
                if objective_at(problem, &vars, &trial) < f0 - 1e-4 * alpha * decrement {
                    x = trial;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                converged = true;
                break;
            }
        }
        let pi = scatter(&vars, &x, m, n);
        let objective = uot_objective(pi.view(), problem)?;
        out.push(TransportPlan {
            pi,
            objective,
            iterations,
            converged,
        });
    }
    Ok(out)
}

fn scatter(vars: &[(usize, usize)], x: &[f64], m: usize, n: usize) -> Array2<f64> {
    let mut pi = Array2::zeros((m, n));
    for (&(i, j), &v) in vars.iter().zip(x) {
        pi[[i, j]] = v;
    }
    pi
}

fn objective_at(problem: &TransportProblem, vars: &[(usize, usize)], x: &[f64]) -> f64 {
    let (m, n) = problem.shape();
    uot_objective(scatter(vars, x, m, n).view(), problem).unwrap_or(f64::INFINITY)
}

fn newton_system(
    problem: &TransportProblem,
    vars: &[(usize, usize)],
    x: &[f64],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (m, n) = problem.shape();
    let (eps, rho) = (problem.epsilon, problem.rho);
    let mut rows = vec![0.0; m];
    let mut cols = vec![0.0; n];
    for (&(i, j), &v) in vars.iter().zip(x) {
        rows[i] += v;
        cols[j] += v;
    }
    let grad = vars
        .iter()
        .zip(x)
        .map(|(&(i, j), &v)| {
            problem.shifted_cost(i, j)
                + eps * v.ln()
                + rho * (rows[i] / problem.a[i]).ln()
                + rho * (cols[j] / problem.b[j]).ln()
        })
        .collect();
    let k = vars.len();
    let mut hess = vec![vec![0.0; k]; k];
    for (p, &(i, j)) in vars.iter().enumerate() {
        for (q, &(r, s)) in vars.iter().enumerate() {
            let mut h = 0.0;
            if p == q {
                h += eps / x[p];
            }
            if i == r {
                h += rho / rows[i];
            }
            if j == s {
                h += rho / cols[j];
            }
            hess[p][q] = h;
        }
    }
    (grad, hess)
}

/// Cholesky solve of `h z = g`; `None` if `h` is not numerically positive definite.
fn solve_spd(h: &[Vec<f64>], g: &[f64]) -> Option<Vec<f64>> {
    let k = g.len();
    let mut l = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..=i {
            let mut sum = h[i][j];
            for p in 0..j {
                sum -= l[i][p] * l[j][p];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l[i][i] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    let mut y = vec![0.0; k];
    for i in 0..k {
        let mut sum = g[i];
        for p in 0..i {
            sum -= l[i][p] * y[p];
        }
        y[i] = sum / l[i][i];
    }
    let mut z = vec![0.0; k];
    for i in (0..k).rev() {
        let mut sum = y[i];
        for p in i + 1..k {
            sum -= l[p][i] * z[p];
        }
        z[i] = sum / l[i][i];
    }
    Some(z)
}
