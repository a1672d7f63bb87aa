//! Log-barrier interior-point minimizer for small smooth convex programs.
//!
//! Minimizes `f0(x)` subject to `c_j(x) <= 0` and box bounds, starting from a
//! strictly feasible point. Each outer iteration centers
//! `t f0(x) - sum_j log(-c_j(x))` with damped Newton steps, then multiplies
//! `t` by `mu` until the duality-gap surrogate `m / t` drops below `ktol`.
//! Dense linear algebra: dimensions stay in the low hundreds.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A twice-differentiable scalar function of the decision vector.
pub trait SmoothFn: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;

    /// Pushes the non-zero partials as `(index, value)` pairs.
    fn gradient(&self, x: &[f64], out: &mut Vec<(usize, f64)>);

    /// Adds `scale * hess f(x)` into `hess`.
    ///
    /// The default uses central differences of [`SmoothFn::gradient`].
    fn add_hessian(&self, x: &[f64], scale: f64, hess: &mut DMatrix<f64>) {
        let n = x.len();
        let mut xp = x.to_vec();
        let mut gp = Vec::new();
        let mut gm = Vec::new();
        for j in 0..n {
            let h = 1e-6 * (1.0 + x[j].abs());
            xp[j] = x[j] + h;
            gp.clear();
            self.gradient(&xp, &mut gp);
            xp[j] = x[j] - h;
            gm.clear();
            self.gradient(&xp, &mut gm);
            xp[j] = x[j];
            for &(i, v) in &gp {
                hess[(i, j)] += 0.5 * scale * v / (2.0 * h);
                hess[(j, i)] += 0.5 * scale * v / (2.0 * h);
            }
            for &(i, v) in &gm {
                hess[(i, j)] -= 0.5 * scale * v / (2.0 * h);
                hess[(j, i)] -= 0.5 * scale * v / (2.0 * h);
            }
        }
    }
}

/// `sum_k a_k x_k - rhs`; as a constraint this reads `a . x <= rhs`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl SmoothFn for Linear {
    fn value(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(k, a)| a * x[k]).sum::<f64>() - self.rhs
    }

    fn gradient(&self, _x: &[f64], out: &mut Vec<(usize, f64)>) {
        out.extend_from_slice(&self.terms);
    }

    fn add_hessian(&self, _x: &[f64], _scale: f64, _hess: &mut DMatrix<f64>) {}
}

pub struct ConvexProgram {
    pub dim: usize,
    pub objective: Box<dyn SmoothFn>,
    pub constraints: Vec<Box<dyn SmoothFn>>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub start: Option<Vec<f64>>,
}

impl ConvexProgram {
    pub fn new(dim: usize, objective: Box<dyn SmoothFn>) -> Self {
        Self {
            dim,
            objective,
            constraints: Vec::new(),
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
            start: None,
        }
    }

    pub fn constrain(&mut self, c: impl SmoothFn + 'static) -> &mut Self {
        self.constraints.push(Box::new(c));
        self
    }

    pub fn bound(&mut self, k: usize, lower: f64, upper: f64) -> &mut Self {
        self.lower[k] = lower;
        self.upper[k] = upper;
        self
    }

    /// Number of inequality constraints including finite bounds.
    pub fn num_inequalities(&self) -> usize {
        self.constraints.len()
            + self.lower.iter().filter(|l| l.is_finite()).count()
            + self.upper.iter().filter(|u| u.is_finite()).count()
    }

    pub fn is_strictly_feasible(&self, x: &[f64]) -> bool {
        x.len() == self.dim
            && x.iter().all(|v| v.is_finite())
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&v, (&l, &u))| v > l && v < u)
            && self.constraints.iter().all(|c| c.value(x) < 0.0)
    }

    /// Largest constraint or bound violation at `x` (0 when feasible).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (k, &v) in x.iter().enumerate() {
            worst = worst.max(self.lower[k] - v).max(v - self.upper[k]);
        }
        for c in &self.constraints {
            worst = worst.max(c.value(x));
        }
        worst
    }

    /// Smallest midpoint-convexity margin `(q(x) + q(y)) / 2 - q((x + y) / 2)`
    /// over the objective and all constraints.
    pub fn midpoint_margin(&self, x: &[f64], y: &[f64]) -> f64 {
        let mid: Vec<f64> = x.iter().zip(y).map(|(a, b)| 0.5 * (a + b)).collect();
        let gap = |f: &dyn SmoothFn| 0.5 * (f.value(x) + f.value(y)) - f.value(&mid);
        self.constraints
            .iter()
            .map(|c| gap(c.as_ref()))
            .fold(gap(self.objective.as_ref()), f64::min)
    }
}

#[derive(Clone, Debug)]
pub struct SolverOptions {
    pub ktol: f64,
    pub t0: f64,
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub newton_tol: f64,
    pub max_newton: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            ktol: 1e-6,
            t0: 1.0,
            mu: 10.0,
            alpha: 0.25,
            beta: 0.5,
            newton_tol: 1e-11,
            max_newton: 2000,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SolveReport {
    pub outer_iterations: usize,
    pub newton_iterations: usize,
    /// Final `m / t`.
    pub gap: f64,
    /// Infinity norm of the Lagrangian gradient with `lambda_j = 1 / (t (-c_j))`,
    /// together with any primal violation.
    pub kkt_residual: f64,
    pub objective: f64,
    /// `f0` at the end of each centering step.
    pub objective_history: Vec<f64>,
}

struct Barrier<'a> {
    prog: &'a ConvexProgram,
    grad_buf: Vec<(usize, f64)>,
}

impl<'a> Barrier<'a> {
    fn phi(&self, x: &[f64], t: f64) -> f64 {
        let prog = self.prog;
        if !prog.is_strictly_feasible(x) {
            return f64::INFINITY;
        }
        let mut v = t * prog.objective.value(x);
        for (k, &xk) in x.iter().enumerate() {
            if prog.lower[k].is_finite() {
                v -= (xk - prog.lower[k]).ln();
            }
            if prog.upper[k].is_finite() {
                v -= (prog.upper[k] - xk).ln();
            }
        }
        for c in &prog.constraints {
            v -= (-c.value(x)).ln();
        }
        v
    }

    /// Gradient and Hessian of the barrier function at `x`.
    fn derivatives(&mut self, x: &[f64], t: f64, g: &mut DVector<f64>, h: &mut DMatrix<f64>) {
        let prog = self.prog;
        g.fill(0.0);
        h.fill(0.0);
        self.grad_buf.clear();
        prog.objective.gradient(x, &mut self.grad_buf);
        for &(k, v) in &self.grad_buf {
            g[k] += t * v;
        }
        prog.objective.add_hessian(x, t, h);
        for (k, &xk) in x.iter().enumerate() {
            if prog.lower[k].is_finite() {
                let s = xk - prog.lower[k];
                g[k] -= 1.0 / s;
                h[(k, k)] += 1.0 / (s * s);
            }
            if prog.upper[k].is_finite() {
                let s = prog.upper[k] - xk;
                g[k] += 1.0 / s;
                h[(k, k)] += 1.0 / (s * s);
            }
        }
        for c in &prog.constraints {
            let s = -c.value(x);
            self.grad_buf.clear();
            c.gradient(x, &mut self.grad_buf);
            for (a, &(i, gi)) in self.grad_buf.iter().enumerate() {
                g[i] += gi / s;
                for &(j, gj) in &self.grad_buf[..=a] {
                    let v = gi * gj / (s * s);
                    h[(i, j)] += v;
                    if i != j {
                        h[(j, i)] += v;
                    }
                }
            }
            c.add_hessian(x, 1.0 / s, h);
        }
    }

    /// Lagrangian stationarity residual at the end of a centering step.
    fn stationarity(&mut self, x: &[f64], t: f64) -> f64 {
        let n = x.len();
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        self.derivatives(x, t, &mut g, &mut h);
        g.amax() / t
    }
}

fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let scale = h.diagonal().amax().max(1.0);
    let mut ridge = 0.0;
    loop {
        let mut hr = h.clone();
        if ridge > 0.0 {
            for k in 0..hr.nrows() {
                hr[(k, k)] += ridge;
            }
        }
        if let Some(chol) = hr.cholesky() {
            return -chol.solve(g);
        }
        ridge = if ridge == 0.0 {
            1e-12 * scale
        } else {
            ridge * 10.0
        };
    }
}

/// Runs the barrier method on `prog`.
pub fn solve(prog: &ConvexProgram, opts: &SolverOptions) -> Result<(Vec<f64>, SolveReport)> {
    let n = prog.dim;
    let mut x = match &prog.start {
        Some(s) if s.len() == n => s.clone(),
        Some(s) => {
            return Err(Error::InfeasibleStart(format!(
                "start has {} entries, program has {n} variables",
                s.len()
            )))
        }
        None => return Err(Error::InfeasibleStart("no start point supplied".into())),
    };
    if !prog.is_strictly_feasible(&x) {
        return Err(Error::InfeasibleStart(format!(
            "start point not strictly feasible (max violation {:e})",
            prog.max_violation(&x)
        )));
    }
    let m = prog.num_inequalities();
    let mut report = SolveReport::default();
    if n == 0 {
        report.objective = prog.objective.value(&x);
        report.objective_history.push(report.objective);
        return Ok((x, report));
    }

    let mut barrier = Barrier {
        prog,
        grad_buf: Vec::new(),
    };
    let mut g = DVector::zeros(n);
    let mut h = DMatrix::zeros(n, n);
    let mut t = if m == 0 { 1.0 } else { opts.t0 };
    let mut trial = vec![0.0; n];
    loop {
        report.outer_iterations += 1;
        // centering
        loop {
            barrier.derivatives(&x, t, &mut g, &mut h);
            let dx = newton_direction(&h, &g);
            let slope = g.dot(&dx);
            let lambda2 = -slope;
            if !(lambda2 > 2.0 * opts.newton_tol) {
                break;
            }
            if report.newton_iterations >= opts.max_newton {
                return Err(Error::MaxIterations {
                    iterations: report.newton_iterations,
                    gap: m as f64 / t,
                    best: x,
                });
            }
            report.newton_iterations += 1;
            let phi0 = barrier.phi(&x, t);
            let slack = 4.0 * f64::EPSILON * phi0.abs().max(1.0);
            let mut s = 1.0;
            let mut accepted = false;
            while s > 1e-20 {
                for k in 0..n {
                    trial[k] = x[k] + s * dx[k];
                }
                let phi1 = barrier.phi(&trial, t);
                if phi1 <= phi0 + opts.alpha * s * slope + slack {
                    accepted = true;
                    break;
                }
                s *= opts.beta;
            }
            if !accepted {
                break;
            }
            x.copy_from_slice(&trial);
        }
        report.objective_history.push(prog.objective.value(&x));
        if m == 0 || m as f64 / t <= opts.ktol {
            break;
        }
        t *= opts.mu;
    }
    report.gap = if m == 0 { 0.0 } else { m as f64 / t };
    report.kkt_residual = barrier
        .stationarity(&x, t)
        .max(prog.max_violation(&x).max(0.0));
    report.objective = prog.objective.value(&x);
    Ok((x, report))
}

/// Largest relative error between the analytic gradient of `f` at `x` and
/// central finite differences.
pub fn gradient_check(f: &dyn SmoothFn, x: &[f64], step: f64) -> f64 {
    let n = x.len();
    let mut analytic = vec![0.0; n];
    let mut buf = Vec::new();
    f.gradient(x, &mut buf);
    for (k, v) in buf {
        analytic[k] += v;
    }
    let mut xp = x.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..n {
        xp[k] = x[k] + step;
        let fp = f.value(&xp);
        xp[k] = x[k] - step;
        let fm = f.value(&xp);
        xp[k] = x[k];
        let numeric = (fp - fm) / (2.0 * step);
        let denom = analytic[k].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[k] - numeric).abs() / denom);
    }
    worst
}
