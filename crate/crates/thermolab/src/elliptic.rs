//! Semilinear elliptic solve for the conformal factor of a prescribed-
//! curvature problem on the quotient surface.
//!
//! Given a positive vertex function h and a nonpositive vertex function
//! D = det(q) (the determinant of a quadratic differential with respect to
//! the curvature -1 background), the solver finds the conformal exponent u
//! with
//!
//! ```text
//!     laplacian(u) = G(u),   G(u) = h^2 e^{2u} + D e^{-2u} - 1,
//! ```
//!
//! where `laplacian` is the curvature -1 metric Laplacian (div grad).  The
//! metric e^{2u} g_0 then has Gauss curvature K = -h^2 - e^{-4u} D, i.e. it
//! satisfies K + h^2 + det(q)_g = 0 for the rescaled differential.
//!
//! The nonlinearity G is strictly increasing in u (D <= 0), so the problem
//! has a unique solution squeezed between the constants
//!
//! ```text
//!     u_- = min_x u*(x),  u_+ = max_x u*(x),
//!     u*(x) = log(y_+(x))/2,   y_+ = (1 + sqrt(1 - 4 h^2 D)) / (2 h^2),
//! ```
//!
//! the pointwise roots of G.  The discretization uses the mesh's flat
//! cotangent stiffness S (the conformally invariant Dirichlet form) and
//! lumped curvature -1 weights W: residual R(u) = S u + W G(u), reported
//! pointwise as |R_i| / W_i.  A damped Newton iteration with a conjugate
//! gradient inner solve handles the (symmetric positive definite) Jacobian
//! S + diag(W G'(u)); every accepted iterate is checked against the bracket,
//! and a monotone fixed-point fallback starting from the constant u_- covers
//! the rare case of a stalled line search.  The iteration budget across both
//! phases is 10^4; exhausting it is reported as an error.

use std::sync::Arc;

use crate::fields::{QuadDiff, ScalarField};
use crate::mesh::{MeshField, SparseMatrix, SurfaceMesh};
use crate::{Error, Result};

/// Final pointwise residual demanded of a successful solve.
pub const RESIDUAL_TOL: f64 = 1e-11;

const MAX_NEWTON: usize = 60;
const TOTAL_ITERATION_BUDGET: usize = 10_000;
const MIN_STEP: f64 = 1e-8;

/// Which outer iteration to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    /// Damped Newton with the monotone fallback (default).
    Auto,
    /// Damped Newton only; errors if the line search stalls.
    NewtonOnly,
    /// Monotone fixed-point iteration from the lower bracket constant.
    PicardOnly,
}

/// Outcome of a successful solve.
#[derive(Debug, Clone, Copy)]
pub struct SolveReport {
    /// Final max_i |R_i| / W_i.
    pub residual: f64,
    pub newton_iterations: usize,
    pub picard_iterations: usize,
    /// Constant bracket [u_-, u_+] that contained every iterate.
    pub bracket: (f64, f64),
}

/// Discretized semilinear problem with its bracket and current iterate.
#[derive(Debug)]
pub struct PdeProblem {
    mesh: Arc<SurfaceMesh>,
    h_sq: Vec<f64>,
    det: Vec<f64>,
    bracket: (f64, f64),
    u: Vec<f64>,
}

impl PdeProblem {
    /// Set up the problem from a positive field h and a quadratic
    /// differential q, both sampled at dof representatives.
    pub fn new(mesh: Arc<SurfaceMesh>, h: &ScalarField, q: &QuadDiff) -> Result<Self> {
        let n = mesh.n_dofs();
        let mut h_vals = Vec::with_capacity(n);
        let mut det = Vec::with_capacity(n);
        for d in 0..n {
            let z = mesh.dof_position(d);
            h_vals.push(h.value(z));
            let s0 = 2.0 / (1.0 - z.norm_sqr());
            det.push(-q.w(z).norm_sqr() / s0.powi(4));
        }
        Self::from_dof_data(mesh, h_vals, det)
    }

    /// Set up the problem from raw per-dof data: h values (positive) and
    /// determinant values (nonpositive).
    pub fn from_dof_data(mesh: Arc<SurfaceMesh>, h: Vec<f64>, det: Vec<f64>) -> Result<Self> {
        let n = mesh.n_dofs();
        if h.len() != n || det.len() != n {
            return Err(Error::InvalidParameter(format!(
                "vertex data ({}, {}) does not match {} dofs",
                h.len(),
                det.len(),
                n
            )));
        }
        if let Some(bad) = h.iter().find(|&&v| !(v > 1e-12)) {
            return Err(Error::InvalidParameter(format!(
                "h must be positive everywhere (found {bad})"
            )));
        }
        if let Some(bad) = det.iter().find(|&&v| !(v <= 1e-14)) {
            return Err(Error::InvalidParameter(format!(
                "det(q) must be nonpositive (found {bad})"
            )));
        }
        let h_sq: Vec<f64> = h.iter().map(|v| v * v).collect();
        let det: Vec<f64> = det.iter().map(|&v| v.min(0.0)).collect();

        // pointwise roots of G give the bracket; widen until the sign
        // conditions G(u_-) <= 0 <= G(u_+) hold everywhere despite roundoff
        let mut lo = f64::MAX;
        let mut hi = f64::MIN;
        for i in 0..n {
            let y = (1.0 + (1.0 - 4.0 * h_sq[i] * det[i]).sqrt()) / (2.0 * h_sq[i]);
            let u_star = 0.5 * y.ln();
            lo = lo.min(u_star);
            hi = hi.max(u_star);
        }
        let g = |u: f64, i: usize| h_sq[i] * (2.0 * u).exp() + det[i] * (-2.0 * u).exp() - 1.0;
        for _ in 0..8 {
            let ok = (0..n).all(|i| g(lo, i) <= 1e-12 && g(hi, i) >= -1e-12);
            if ok {
                break;
            }
            let pad = 1e-12 + 1e-9 * (hi - lo).abs();
            lo -= pad;
            hi += pad;
        }
        if !(0..n).all(|i| g(lo, i) <= 1e-12 && g(hi, i) >= -1e-12) {
            return Err(Error::Numerical("could not establish a solution bracket".into()));
        }

        let mid = 0.5 * (lo + hi);
        Ok(Self { mesh, h_sq, det, bracket: (lo, hi), u: vec![mid; n] })
    }

    pub fn mesh(&self) -> &Arc<SurfaceMesh> {
        &self.mesh
    }

    /// Constant bracket [u_-, u_+] containing the solution.
    pub fn bracket(&self) -> (f64, f64) {
        self.bracket
    }

    /// Current iterate (the solution after a successful [`solve`](Self::solve)).
    pub fn solution(&self) -> &[f64] {
        &self.u
    }

    /// Wrap the current iterate as an interpolating mesh field.
    pub fn solution_field(&self) -> Result<MeshField> {
        MeshField::from_dof_values(self.mesh.clone(), self.u.clone())
    }

    fn g_value(&self, u: f64, i: usize) -> f64 {
        self.h_sq[i] * (2.0 * u).exp() + self.det[i] * (-2.0 * u).exp() - 1.0
    }

    fn g_prime(&self, u: f64, i: usize) -> f64 {
        2.0 * self.h_sq[i] * (2.0 * u).exp() - 2.0 * self.det[i] * (-2.0 * u).exp()
    }

    /// Pointwise residual (S u)_i / W_i + G(u_i) for a candidate iterate.
    fn pointwise_residual(&self, u: &[f64], scratch: &mut Vec<f64>) -> f64 {
        let n = u.len();
        scratch.resize(n, 0.0);
        self.mesh.stiffness().mul_vec(u, scratch);
        let w = self.mesh.weights();
        let mut worst = 0.0_f64;
        for i in 0..n {
            worst = worst.max((scratch[i] / w[i] + self.g_value(u[i], i)).abs());
        }
        worst
    }

    /// Pointwise residual of the current iterate.
    pub fn residual_norm(&self) -> f64 {
        let mut scratch = Vec::new();
        self.pointwise_residual(&self.u, &mut scratch)
    }

    fn within_bracket(&self, u: &[f64], slack: f64) -> bool {
        let (lo, hi) = self.bracket;
        u.iter().all(|&v| v >= lo - slack && v <= hi + slack)
    }

    /// Solve with the default strategy (Newton, monotone fallback).
    pub fn solve(&mut self) -> Result<SolveReport> {
        self.solve_with(SolveMethod::Auto)
    }

    pub fn solve_with(&mut self, method: SolveMethod) -> Result<SolveReport> {
        let (lo, hi) = self.bracket;
        let slack = 1e-12 + 1e-9 * (hi - lo).abs();
        let mut scratch = Vec::new();
        let mut newton_iterations = 0;
        let mut picard_iterations = 0;

        if method != SolveMethod::PicardOnly {
            let n = self.u.len();
            let mut u = vec![0.5 * (lo + hi); n];
            let w = self.mesh.weights().to_vec();
            let mut norm = self.pointwise_residual(&u, &mut scratch);
            let mut stalled = false;
            while norm > RESIDUAL_TOL && newton_iterations < MAX_NEWTON {
                // J delta = -(S u + W G(u)), J = S + diag(W G')
                let mut rhs = vec![0.0; n];
                self.mesh.stiffness().mul_vec(&u, &mut rhs);
                for i in 0..n {
                    rhs[i] = -(rhs[i] + w[i] * self.g_value(u[i], i));
                }
                let jac_diag: Vec<f64> =
                    (0..n).map(|i| w[i] * self.g_prime(u[i], i)).collect();
                let delta =
                    conjugate_gradient(self.mesh.stiffness(), &jac_diag, &rhs, 1e-12, 40 * n + 200);
                let mut alpha = 1.0;
                let mut accepted = false;
                while alpha >= MIN_STEP {
                    let cand: Vec<f64> =
                        u.iter().zip(&delta).map(|(a, d)| a + alpha * d).collect();
                    if self.within_bracket(&cand, slack) {
                        let cnorm = self.pointwise_residual(&cand, &mut scratch);
                        if cnorm <= (1.0 - 0.25 * alpha) * norm {
                            u = cand;
                            norm = cnorm;
                            accepted = true;
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
                if !accepted {
                    stalled = true;
                    break;
                }
                newton_iterations += 1;
            }
            if norm <= RESIDUAL_TOL {
                if !self.within_bracket(&u, slack) {
                    return Err(Error::Numerical("solution escaped the bracket".into()));
                }
                self.u = u;
                return Ok(SolveReport {
                    residual: norm,
                    newton_iterations,
                    picard_iterations,
                    bracket: self.bracket,
                });
            }
            if method == SolveMethod::NewtonOnly {
                return Err(Error::Numerical(format!(
                    "Newton iteration {} after {newton_iterations} steps (residual {norm:.3e})",
                    if stalled { "stalled" } else { "hit its budget" }
                )));
            }
        }

        // monotone fixed-point iteration from the lower bracket constant:
        // (S + diag(W mu)) u_{k+1} = W mu u_k - W G(u_k), with mu an upper
        // bound for G' on the bracket (G' is convex in u, so endpoint max)
        let n = self.u.len();
        let w = self.mesh.weights().to_vec();
        let mu: Vec<f64> = (0..n)
            .map(|i| w[i] * self.g_prime(lo, i).max(self.g_prime(hi, i)))
            .collect();
        let mut u = vec![lo; n];
        loop {
            if newton_iterations + picard_iterations >= TOTAL_ITERATION_BUDGET {
                return Err(Error::Numerical(format!(
                    "iteration budget of {TOTAL_ITERATION_BUDGET} exhausted (residual {:.3e})",
                    self.pointwise_residual(&u, &mut scratch)
                )));
            }
            let rhs: Vec<f64> = (0..n)
                .map(|i| mu[i] * u[i] - w[i] * self.g_value(u[i], i))
                .collect();
            let next = conjugate_gradient(self.mesh.stiffness(), &mu, &rhs, 1e-13, 40 * n + 200);
            if !self.within_bracket(&next, slack) {
                return Err(Error::Numerical(
                    "fixed-point iterate escaped the bracket".into(),
                ));
            }
            picard_iterations += 1;
            let norm = self.pointwise_residual(&next, &mut scratch);
            let step: f64 = next
                .iter()
                .zip(&u)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            u = next;
            if norm <= RESIDUAL_TOL || step < 1e-15 {
                if norm > 10.0 * RESIDUAL_TOL {
                    return Err(Error::Numerical(format!(
                        "fixed-point iteration stagnated at residual {norm:.3e}"
                    )));
                }
                self.u = u;
                return Ok(SolveReport {
                    residual: norm,
                    newton_iterations,
                    picard_iterations,
                    bracket: self.bracket,
                });
            }
        }
    }
}

/// Preconditioned conjugate gradients for (S + diag(extra)) x = b with the
/// Jacobi preconditioner; S positive semidefinite, extra positive.
fn conjugate_gradient(
    s: &SparseMatrix,
    extra_diag: &[f64],
    b: &[f64],
    tol_rel: f64,
    max_iter: usize,
) -> Vec<f64> {
    let n = b.len();
    let mut precond: Vec<f64> = s.diagonal();
    for i in 0..n {
        precond[i] = (precond[i] + extra_diag[i]).max(1e-300);
    }
    let apply = |x: &[f64], y: &mut Vec<f64>| {
        s.mul_vec(x, y);
        for i in 0..n {
            y[i] += extra_diag[i] * x[i];
        }
    };
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };

    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        return vec![0.0; n];
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&precond).map(|(v, m)| v / m).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for _ in 0..max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= tol_rel * bnorm {
            break;
        }
        for i in 0..n {
            z[i] = r[i] / precond[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    x
}
