//! Entropy-regularized optimal transport with forbidden entries.
//!
//! The solver minimizes `<P, C> + eps * KL(P || a ⊗ b)` over couplings `P`
//! with row marginal `a` and column marginal `b`, where forbidden entries are
//! pinned to zero mass. Iterations run on scaling vectors that are periodically
//! absorbed into log-domain dual potentials, so small `eps` does not underflow
//! the Gibbs kernel.
//!
//! The returned plan factorizes as
//!
//! ```text
//! log P[i][j] = u[i] + v[j] - C[i][j] / eps + log a[i] + log b[j]
//! ```
//!
//! on every allowed entry, with `u`, `v` the dimensionless potentials stored
//! on [`Coupling`].

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::matrix::{log_sum_exp, Matrix};

const HISTOGRAM_SUM_TOL: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum OtError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(&'static str),
    #[error("invalid histogram: {0}")]
    InvalidHistogram(&'static str),
    #[error("invalid cost matrix: {0}")]
    InvalidCost(&'static str),
    #[error("invalid sinkhorn configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("infeasible mask: {axis} {index} has no allowed entry")]
    InfeasibleMask { axis: &'static str, index: usize },
    #[error("sinkhorn did not converge: marginal error {:.3e} after {} iterations", .0.marginal_error, .0.iterations_used)]
    NotConverged(Box<Coupling>),
    #[error("numerical overflow: epsilon is too small for the cost scale")]
    NumericalOverflow,
    #[error("brute-force oracle supports 1 <= n <= {max}, got {n}")]
    TooLarge { n: usize, max: usize },
}

/// Probability vector: non-negative weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram(Vec<f64>);

impl Histogram {
    pub fn new(weights: Vec<f64>) -> Result<Self, OtError> {
        if weights.is_empty() {
            return Err(OtError::InvalidHistogram("empty"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(OtError::InvalidHistogram("weights must be finite and non-negative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > HISTOGRAM_SUM_TOL {
            return Err(OtError::InvalidHistogram("weights must sum to 1"));
        }
        Ok(Self(weights))
    }

    /// Rescales non-negative weights to sum to one.
    pub fn normalized(weights: Vec<f64>) -> Result<Self, OtError> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(OtError::InvalidHistogram("weights must have a positive finite sum"));
        }
        Self::new(weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform histogram needs at least one bin");
        Self(vec![1.0 / n as f64; n])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.0
    }
}

/// Ground cost with a mask of forbidden pairs (treated as infinite cost).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedCost {
    costs: Matrix,
    forbidden: Vec<bool>,
}

impl MaskedCost {
    pub fn new(costs: Matrix, forbidden: Vec<bool>) -> Result<Self, OtError> {
        if forbidden.len() != costs.rows() * costs.cols() {
            return Err(OtError::DimensionMismatch("mask size differs from cost size"));
        }
        for (c, f) in costs.as_slice().iter().zip(&forbidden) {
            if !f && !(c.is_finite() && *c >= 0.0) {
                return Err(OtError::InvalidCost("allowed costs must be finite and non-negative"));
            }
        }
        Ok(Self { costs, forbidden })
    }

    pub fn unmasked(costs: Matrix) -> Result<Self, OtError> {
        let len = costs.rows() * costs.cols();
        Self::new(costs, vec![false; len])
    }

    /// Square cost with the diagonal forbidden.
    pub fn with_forbidden_diagonal(costs: Matrix) -> Result<Self, OtError> {
        if costs.rows() != costs.cols() {
            return Err(OtError::DimensionMismatch("diagonal mask needs a square cost"));
        }
        let n = costs.rows();
        let forbidden = (0..n * n).map(|k| k / n == k % n).collect();
        Self::new(costs, forbidden)
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        self.costs.shape()
    }

    #[inline]
    pub fn costs(&self) -> &Matrix {
        &self.costs
    }

    #[inline]
    pub fn is_forbidden(&self, i: usize, j: usize) -> bool {
        self.forbidden[i * self.costs.cols() + j]
    }

    pub fn forbid(&mut self, i: usize, j: usize) {
        let cols = self.costs.cols();
        self.forbidden[i * cols + j] = true;
    }

    pub fn forbidden_mask(&self) -> &[bool] {
        &self.forbidden
    }

    /// Largest allowed cost, or 0 when everything is forbidden.
    pub fn max_cost(&self) -> f64 {
        self.costs
            .as_slice()
            .iter()
            .zip(&self.forbidden)
            .filter(|(_, f)| !**f)
            .fold(0.0, |m, (c, _)| f64::max(m, *c))
    }

    /// Every row and every column must keep at least one allowed entry.
    pub fn check_feasible(&self) -> Result<(), OtError> {
        let (n, m) = self.shape();
        if n == 0 || m == 0 {
            return Err(OtError::DimensionMismatch("empty cost matrix"));
        }
        for i in 0..n {
            if (0..m).all(|j| self.is_forbidden(i, j)) {
                return Err(OtError::InfeasibleMask { axis: "row", index: i });
            }
        }
        for j in 0..m {
            if (0..n).all(|i| self.is_forbidden(i, j)) {
                return Err(OtError::InfeasibleMask {
                    axis: "column",
                    index: j,
                });
            }
        }
        Ok(())
    }

    /// `sum(plan ∘ cost)` over allowed entries.
    pub fn transport_cost(&self, plan: &Matrix) -> f64 {
        assert_eq!(plan.shape(), self.shape());
        plan.as_slice()
            .iter()
            .zip(self.costs.as_slice())
            .zip(&self.forbidden)
            .filter(|(_, f)| !**f)
            .map(|((p, c), _)| p * c)
            .sum()
    }
}

/// Regularizer of the coupling towards the product of its marginals.
///
/// Only the Kullback-Leibler divergence is implemented.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[non_exhaustive]
pub enum Divergence {
    #[default]
    KullbackLeibler,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    /// Entropic regularization, in cost units.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Allowed L1 violation of each marginal.
    pub tolerance: f64,
    /// Scaling vectors are absorbed into the potentials once any
    /// `|log scaling|` exceeds this value.
    pub stabilization_threshold: f64,
    /// Switch to damped Newton steps on the log-domain duals when the
    /// scaling iterations stall.
    pub newton_polish: bool,
    pub divergence: Divergence,
}

impl SinkhornConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), OtError> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(OtError::InvalidConfig("epsilon must be positive and finite"));
        }
        if !(self.tolerance > 0.0) {
            return Err(OtError::InvalidConfig("tolerance must be positive"));
        }
        if self.max_iters == 0 {
            return Err(OtError::InvalidConfig("max_iters must be at least 1"));
        }
        if !(self.stabilization_threshold > 0.0) {
            return Err(OtError::InvalidConfig("stabilization_threshold must be positive"));
        }
        Ok(())
    }
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            max_iters: 10_000,
            tolerance: 1e-6,
            stabilization_threshold: 50.0,
            newton_polish: true,
            divergence: Divergence::KullbackLeibler,
        }
    }
}

/// Transport plan together with its Schrödinger potentials.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub plan: Matrix,
    /// Row potentials, dimensionless (already divided by `eps`).
    pub potentials_u: Vec<f64>,
    /// Column potentials, dimensionless.
    pub potentials_v: Vec<f64>,
    pub transport_cost: f64,
    /// `max(‖rows - a‖₁, ‖cols - b‖₁)`.
    pub marginal_error: f64,
    pub iterations_used: usize,
}

impl Coupling {
    /// Residual of the log-linear factorization over allowed entries with
    /// positive mass: `max |log P - (u + v - C/eps + log a + log b)|`.
    pub fn factorization_residual(&self, cost: &MaskedCost, a: &Histogram, b: &Histogram, epsilon: f64) -> f64 {
        let (n, m) = cost.shape();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..m {
                let p = self.plan[(i, j)];
                if cost.is_forbidden(i, j) || p <= 0.0 {
                    continue;
                }
                let model = self.potentials_u[i] + self.potentials_v[j] - cost.costs()[(i, j)] / epsilon
                    + libm::log(a.weights()[i])
                    + libm::log(b.weights()[j]);
                worst = worst.max((libm::log(p) - model).abs());
            }
        }
        worst
    }
}

fn marginal_errors(plan: &Matrix, a: &Histogram, b: &Histogram) -> f64 {
    let rows: f64 = plan
        .row_sums()
        .iter()
        .zip(a.weights())
        .map(|(r, w)| (r - w).abs())
        .sum();
    let cols: f64 = plan
        .col_sums()
        .iter()
        .zip(b.weights())
        .map(|(c, w)| (c - w).abs())
        .sum();
    rows.max(cols)
}

struct LogKernel<'a> {
    n: usize,
    m: usize,
    /// `-C/eps + log a_i + log b_j`, `-inf` where forbidden.
    log_k: Vec<f64>,
    log_a: Vec<f64>,
    log_b: Vec<f64>,
    a: &'a [f64],
    b: &'a [f64],
}

impl LogKernel<'_> {
    /// Exact log-domain row update: `alpha_i = log a_i - LSE_j(beta_j + L_ij)`.
    fn row_update(&self, alpha: &mut [f64], beta: &[f64]) -> Result<(), OtError> {
        for i in 0..self.n {
            if self.a[i] == 0.0 {
                alpha[i] = 0.0;
                continue;
            }
            let row = &self.log_k[i * self.m..(i + 1) * self.m];
            let lse = log_sum_exp(row.iter().zip(beta).map(|(l, b)| l + b));
            if lse == f64::NEG_INFINITY {
                return Err(OtError::InfeasibleMask { axis: "row", index: i });
            }
            let next = self.log_a[i] - lse;
            if !next.is_finite() {
                return Err(OtError::NumericalOverflow);
            }
            alpha[i] = next;
        }
        Ok(())
    }

    fn col_update(&self, alpha: &[f64], beta: &mut [f64]) -> Result<(), OtError> {
        for j in 0..self.m {
            if self.b[j] == 0.0 {
                beta[j] = 0.0;
                continue;
            }
            let lse = log_sum_exp((0..self.n).map(|i| self.log_k[i * self.m + j] + alpha[i]));
            if lse == f64::NEG_INFINITY {
                return Err(OtError::InfeasibleMask {
                    axis: "column",
                    index: j,
                });
            }
            let next = self.log_b[j] - lse;
            if !next.is_finite() {
                return Err(OtError::NumericalOverflow);
            }
            beta[j] = next;
        }
        Ok(())
    }

    fn stabilized_kernel(&self, alpha: &[f64], beta: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            for j in 0..self.m {
                let k = i * self.m + j;
                out[k] = libm::exp(alpha[i] + beta[j] + self.log_k[k]);
            }
        }
    }
}

/// Scaling iterations per stall check.
const STALL_WINDOW: usize = 50;
const NEWTON_MAX_STEPS: usize = 200;

impl LogKernel<'_> {
    fn plan_into(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            for j in 0..self.m {
                let k = i * self.m + j;
                out[k] = libm::exp(u[i] + v[j] + self.log_k[k]);
            }
        }
    }

    /// Gradient of the concave dual `sum a u + sum b v - sum P` and its value.
    fn dual(&self, u: &[f64], v: &[f64], plan: &[f64], grad: &mut [f64]) -> f64 {
        let (n, m) = (self.n, self.m);
        grad[..n].copy_from_slice(self.a);
        grad[n..].copy_from_slice(self.b);
        let mut mass = 0.0;
        for i in 0..n {
            for j in 0..m {
                let p = plan[i * m + j];
                grad[i] -= p;
                grad[n + j] -= p;
                mass += p;
            }
        }
        let lin: f64 = self
            .a
            .iter()
            .zip(u)
            .chain(self.b.iter().zip(v))
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, x)| w * x)
            .sum();
        lin - mass
    }

    /// Damped Newton ascent on the dual potentials. The Hessian
    /// `[diag(P1) P; P^T diag(P^T 1)]` is solved by Cholesky with the last
    /// column potential pinned (the dual is invariant to `u + c, v - c`).
    /// Returns the number of steps taken.
    fn newton(&self, u: &mut [f64], v: &mut [f64], tol: f64, budget: usize) -> usize {
        let (n, m) = (self.n, self.m);
        let dim = n + m - 1;
        let mut plan = vec![0.0; n * m];
        let mut grad = vec![0.0; n + m];
        let mut hess = vec![0.0; dim * dim];
        let mut step = vec![0.0; dim];
        let mut trial_u = u.to_vec();
        let mut trial_v = v.to_vec();
        let mut trial_plan = vec![0.0; n * m];
        let mut trial_grad = vec![0.0; n + m];

        self.plan_into(u, v, &mut plan);
        let mut value = self.dual(u, v, &plan, &mut grad);
        let mut taken = 0;
        while taken < budget.min(NEWTON_MAX_STEPS) {
            let err = grad[..n]
                .iter()
                .map(|g| g.abs())
                .sum::<f64>()
                .max(grad[n..].iter().map(|g| g.abs()).sum());
            if err <= tol * 0.5 {
                break;
            }
            taken += 1;

            hess.iter_mut().for_each(|h| *h = 0.0);
            for i in 0..n {
                for j in 0..m {
                    let p = plan[i * m + j];
                    hess[i * dim + i] += p;
                    if j < m - 1 {
                        let jj = n + j;
                        hess[jj * dim + jj] += p;
                        hess[i * dim + jj] = p;
                        hess[jj * dim + i] = p;
                    }
                }
            }
            // inactive (zero-weight) rows and columns have no curvature
            let max_diag = (0..dim).map(|k| hess[k * dim + k]).fold(0.0, f64::max);
            let mut ridge = 1e-13 * max_diag.max(1e-300);
            for k in 0..dim {
                if hess[k * dim + k] == 0.0 {
                    hess[k * dim + k] = 1.0;
                }
            }
            step[..n].copy_from_slice(&grad[..n]);
            step[n..].copy_from_slice(&grad[n..n + m - 1]);
            let mut factor = hess.clone();
            loop {
                for k in 0..dim {
                    factor[k * dim + k] = hess[k * dim + k] + ridge;
                }
                if cholesky_solve(&mut factor, dim, &mut step) {
                    break;
                }
                ridge *= 100.0;
                factor.copy_from_slice(&hess);
                step[..n].copy_from_slice(&grad[..n]);
                step[n..].copy_from_slice(&grad[n..n + m - 1]);
                if ridge > max_diag {
                    return taken;
                }
            }

            let slope: f64 = step.iter().zip(&grad).map(|(d, g)| d * g).sum();
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                for i in 0..n {
                    trial_u[i] = u[i] + t * step[i];
                }
                for j in 0..m - 1 {
                    trial_v[j] = v[j] + t * step[n + j];
                }
                trial_v[m - 1] = v[m - 1];
                self.plan_into(&trial_u, &trial_v, &mut trial_plan);
                let trial_value = self.dual(&trial_u, &trial_v, &trial_plan, &mut trial_grad);
                let trial_err = trial_grad[..n]
                    .iter()
                    .map(|g| g.abs())
                    .sum::<f64>()
                    .max(trial_grad[n..].iter().map(|g| g.abs()).sum());
                if trial_value.is_finite()
                    && (trial_value >= value + 1e-4 * t * slope || trial_err < (1.0 - 1e-4 * t) * err)
                {
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
            u.copy_from_slice(&trial_u);
            v.copy_from_slice(&trial_v);
            core::mem::swap(&mut plan, &mut trial_plan);
            core::mem::swap(&mut grad, &mut trial_grad);
            value = self.dual(u, v, &plan, &mut grad);
        }
        taken
    }
}

/// In-place Cholesky factorization and solve of the SPD system `A x = b`
/// (`a` is `dim x dim`, row-major; `b` is overwritten with `x`). Returns false
/// if `A` is not numerically positive definite.
fn cholesky_solve(a: &mut [f64], dim: usize, b: &mut [f64]) -> bool {
    for j in 0..dim {
        let mut d = a[j * dim + j];
        for k in 0..j {
            d -= a[j * dim + k] * a[j * dim + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = libm::sqrt(d);
        a[j * dim + j] = d;
        for i in j + 1..dim {
            let mut s = a[i * dim + j];
            for k in 0..j {
                s -= a[i * dim + k] * a[j * dim + k];
            }
            a[i * dim + j] = s / d;
        }
    }
    for i in 0..dim {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * dim + k] * b[k];
        }
        b[i] = s / a[i * dim + i];
    }
    for i in (0..dim).rev() {
        let mut s = b[i];
        for k in i + 1..dim {
            s -= a[k * dim + i] * b[k];
        }
        b[i] = s / a[i * dim + i];
    }
    true
}

fn absorb(alpha: &mut [f64], beta: &mut [f64], s: &mut [f64], t: &mut [f64]) {
    for (al, si) in alpha.iter_mut().zip(s.iter_mut()) {
        *al += libm::log(*si);
        *si = 1.0;
    }
    for (be, tj) in beta.iter_mut().zip(t.iter_mut()) {
        *be += libm::log(*tj);
        *tj = 1.0;
    }
}

/// Scaling update `target / kv`; `None` when any active entry leaves the
/// representable range.
fn scaling_update(target: &[f64], kv: &[f64], out: &mut [f64]) -> bool {
    for ((o, &w), &k) in out.iter_mut().zip(target).zip(kv) {
        if w == 0.0 {
            *o = 1.0;
            continue;
        }
        let s = w / k;
        if !s.is_normal() {
            return false;
        }
        *o = s;
    }
    true
}

/// Solves the entropic OT problem between `a` and `b` under `cost`.
///
/// On `NotConverged` the partial coupling is carried inside the error.
pub fn sinkhorn(cost: &MaskedCost, a: &Histogram, b: &Histogram, cfg: &SinkhornConfig) -> Result<Coupling, OtError> {
    cfg.validate()?;
    let (n, m) = cost.shape();
    if a.len() != n || b.len() != m {
        return Err(OtError::DimensionMismatch(
            "histogram lengths must match the cost shape",
        ));
    }
    cost.check_feasible()?;
    let eps = cfg.epsilon;

    let log_a: Vec<f64> = a.weights().iter().map(|w| libm::log(*w)).collect();
    let log_b: Vec<f64> = b.weights().iter().map(|w| libm::log(*w)).collect();
    let mut log_k = vec![f64::NEG_INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            if cost.is_forbidden(i, j) {
                continue;
            }
            let scaled = -cost.costs()[(i, j)] / eps;
            if !scaled.is_finite() {
                return Err(OtError::NumericalOverflow);
            }
            log_k[i * m + j] = scaled + log_a[i] + log_b[j];
        }
    }
    let lk = LogKernel {
        n,
        m,
        log_k,
        log_a,
        log_b,
        a: a.weights(),
        b: b.weights(),
    };

    let mut alpha = vec![0.0; n];
    let mut beta = vec![0.0; m];
    lk.row_update(&mut alpha, &beta)?;
    lk.col_update(&alpha, &mut beta)?;

    let mut kernel = vec![0.0; n * m];
    lk.stabilized_kernel(&alpha, &beta, &mut kernel);
    let mut s = vec![1.0; n];
    let mut t = vec![1.0; m];
    let mut next_s = vec![1.0; n];
    let mut next_t = vec![1.0; m];
    let mut kt = vec![0.0; n];
    let mut ks = vec![0.0; m];
    let upper = libm::exp(cfg.stabilization_threshold);
    let lower = 1.0 / upper;

    let matvec = |kernel: &[f64], t: &[f64], out: &mut [f64]| {
        for (i, o) in out.iter_mut().enumerate() {
            *o = kernel[i * m..(i + 1) * m].iter().zip(t).map(|(k, x)| k * x).sum();
        }
    };
    let matvec_t = |kernel: &[f64], s: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, si) in s.iter().enumerate() {
            for (o, k) in out.iter_mut().zip(&kernel[i * m..(i + 1) * m]) {
                *o += k * si;
            }
        }
    };

    matvec(&kernel, &t, &mut kt);
    let mut iterations = 0;
    let mut converged = false;
    let mut stall_reference = f64::INFINITY;
    for iter in 1..=cfg.max_iters {
        iterations = iter;

        if scaling_update(a.weights(), &kt, &mut next_s) {
            s.copy_from_slice(&next_s);
        } else {
            absorb(&mut alpha, &mut beta, &mut s, &mut t);
            lk.row_update(&mut alpha, &beta)?;
            lk.stabilized_kernel(&alpha, &beta, &mut kernel);
        }

        matvec_t(&kernel, &s, &mut ks);
        if scaling_update(b.weights(), &ks, &mut next_t) {
            t.copy_from_slice(&next_t);
        } else {
            absorb(&mut alpha, &mut beta, &mut s, &mut t);
            lk.col_update(&alpha, &mut beta)?;
            lk.stabilized_kernel(&alpha, &beta, &mut kernel);
        }

        let out_of_range = |x: &f64| *x > upper || *x < lower;
        if s.iter().any(out_of_range) || t.iter().any(out_of_range) {
            absorb(&mut alpha, &mut beta, &mut s, &mut t);
            lk.stabilized_kernel(&alpha, &beta, &mut kernel);
        }

        matvec(&kernel, &t, &mut kt);
        let row_err: f64 = s
            .iter()
            .zip(&kt)
            .zip(a.weights())
            .map(|((si, k), w)| (si * k - w).abs())
            .sum();
        if row_err.is_nan() {
            return Err(OtError::NumericalOverflow);
        }
        if row_err <= cfg.tolerance {
            converged = true;
            break;
        }
        if iter % STALL_WINDOW == 0 {
            if cfg.newton_polish && row_err > 0.5 * stall_reference {
                break;
            }
            stall_reference = row_err;
        }
    }

    let mut potentials_u: Vec<f64> = alpha.iter().zip(&s).map(|(al, si)| al + libm::log(*si)).collect();
    let mut potentials_v: Vec<f64> = beta.iter().zip(&t).map(|(be, tj)| be + libm::log(*tj)).collect();
    if !converged && cfg.newton_polish && iterations < cfg.max_iters {
        iterations += lk.newton(
            &mut potentials_u,
            &mut potentials_v,
            cfg.tolerance,
            cfg.max_iters - iterations,
        );
    }
    let plan = Matrix::from_fn(n, m, |i, j| {
        libm::exp(potentials_u[i] + potentials_v[j] + lk.log_k[i * m + j])
    });
    if plan.as_slice().iter().any(|p| !p.is_finite()) {
        return Err(OtError::NumericalOverflow);
    }
    let coupling = Coupling {
        transport_cost: cost.transport_cost(&plan),
        marginal_error: marginal_errors(&plan, a, b),
        plan,
        potentials_u,
        potentials_v,
        iterations_used: iterations,
    };
    if coupling.marginal_error <= cfg.tolerance {
        Ok(coupling)
    } else {
        Err(OtError::NotConverged(Box::new(coupling)))
    }
}

/// `KL(P || a ⊗ b)` summed over entries with positive mass.
pub fn kl_to_product(coupling: &Coupling, a: &Histogram, b: &Histogram) -> Result<f64, OtError> {
    let plan = &coupling.plan;
    if plan.shape() != (a.len(), b.len()) {
        return Err(OtError::DimensionMismatch("plan shape must match histogram lengths"));
    }
    let mut kl = 0.0;
    for (i, row) in plan.row_iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                kl += p * libm::log(p / (a.weights()[i] * b.weights()[j]));
            }
        }
    }
    // marginal round-off can push an exact zero slightly negative
    Ok(kl.max(0.0))
}

/// Regularized objective `<P, C> + eps * KL(P || a ⊗ b)`.
pub fn entropic_objective(coupling: &Coupling, a: &Histogram, b: &Histogram, epsilon: f64) -> Result<f64, OtError> {
    Ok(coupling.transport_cost + epsilon * kl_to_product(coupling, a, b)?)
}

/// The default coupling `a ⊗ b`. Potentials are zero and no cost is attached,
/// so `transport_cost` is 0; use [`MaskedCost::transport_cost`] to price it.
pub fn product_coupling(a: &Histogram, b: &Histogram) -> Coupling {
    let plan = Matrix::from_fn(a.len(), b.len(), |i, j| a.weights()[i] * b.weights()[j]);
    Coupling {
        plan,
        potentials_u: vec![0.0; a.len()],
        potentials_v: vec![0.0; b.len()],
        transport_cost: 0.0,
        marginal_error: 0.0,
        iterations_used: 0,
    }
}

pub const BRUTE_FORCE_MAX_N: usize = 8;

/// Exact unregularized OT for uniform marginals by enumerating permutation
/// plans. Returns the optimal value and the first minimizing permutation in
/// lexicographic order.
pub fn brute_force_assignment(cost: &MaskedCost) -> Result<(f64, Vec<usize>), OtError> {
    let (n, m) = cost.shape();
    if n != m {
        return Err(OtError::DimensionMismatch("brute force needs a square cost"));
    }
    if n == 0 || n > BRUTE_FORCE_MAX_N {
        return Err(OtError::TooLarge {
            n,
            max: BRUTE_FORCE_MAX_N,
        });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        if perm.iter().enumerate().all(|(i, &j)| !cost.is_forbidden(i, j)) {
            let value = perm.iter().enumerate().map(|(i, &j)| cost.costs()[(i, j)]).sum::<f64>() / n as f64;
            if best.as_ref().is_none_or(|(b, _)| value < *b) {
                best = Some((value, perm.clone()));
            }
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    best.ok_or(OtError::InfeasibleMask {
        axis: "permutation",
        index: 0,
    })
}

/// Optimal value of [`brute_force_assignment`]; `n` must equal the cost size.
pub fn brute_force_ot(cost: &MaskedCost, n: usize) -> Result<f64, OtError> {
    if cost.shape() != (n, n) {
        return Err(OtError::DimensionMismatch("n must equal the cost size"));
    }
    brute_force_assignment(cost).map(|(v, _)| v)
}

fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
