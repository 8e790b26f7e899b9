//! Generating data of a thermostat flow and its differentiation.
//!
//! A thermostat on the unit tangent bundle SM is driven by the intensity
//! function lambda(x, v) = f(x) + <e(x), iv> + q_x(v, v), built from a scalar
//! field f, a vector field e and a trace-free symmetric 2-tensor q.  The flow
//! generator is F = X + lambda V, with X the geodesic spray and V the fiber
//! rotation field.
//!
//! Everything is evaluated in the Poincaré disk chart.  Scalar fields expose
//! *chart* partial derivatives (metric-independent); covariant objects
//! (gradients of potentials, divergences, Laplacians) are assembled from
//! those together with the conformal factor of the metric in force.  For a
//! state (z, phi) with unit tangent vector v = e^{i phi}/sigma:
//!
//! * lambda(z, phi)    = f + sigma Im(e_c e^{-i phi}) + Re(w e^{2 i phi})/sigma^2
//! * theta(z, phi)     = sigma Re(e_c e^{-i phi})          (the 1-form <e, v>)
//! * flow              : dz/dt = e^{i phi}/sigma,
//!                       dphi/dt = lambda + Im(gls e^{-i phi})/sigma
//! * transverse cocycle: xdot = y, ydot = V(lambda) y - kappa0 x with
//!                       kappa0 = K - H(lambda) + lambda^2
//!
//! where e_c are the chart components of e, w the holomorphic representative
//! of q, and gls the chart gradient of log sigma.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::geom::{self, UnitTangentState, C};

// ---------------------------------------------------------------------------
// Radial geometry: derivatives of the hyperbolic distance to a center point.
// ---------------------------------------------------------------------------

/// Chart derivatives of d(z) = hyperbolic distance (curvature -1) from a
/// fixed center.  `grad` is d_x + i d_y; `hess` is (d_xx, d_xy, d_yy).
struct RadialGeometry {
    d: f64,
    grad: C,
    hess: [f64; 3],
}

fn radial_geometry(z: C, center: C) -> RadialGeometry {
    let m = geom::MobiusTransform::to_origin(center);
    let zz = m.apply(z);
    let rho = zz.norm();
    let d = 2.0 * rho.atanh();
    if d < 1e-9 {
        // at the center: distance is not differentiable, but every radial
        // profile used here has vanishing slope there; callers special-case
        return RadialGeometry { d, grad: C::new(0.0, 0.0), hess: [0.0; 3] };
    }
    let sigma1 = 2.0 / (1.0 - z.norm_sqr()); // curvature -1 conformal factor
    // chart direction of the outward radial unit vector at z
    let theta_r = zz.arg() - m.derivative(z).arg();
    let grad = C::from_polar(sigma1, theta_r);

    // covariant Hessian of the distance function (curvature -1) is
    // diag(0, coth d) in the (radial, tangential) orthonormal frame;
    // convert to chart second partials through the conformal Christoffels
    // of sigma1: psi_xx = H11 + Lx psi_x - Ly psi_y, etc.
    let b_t = d.tanh().recip(); // coth d
    let (sn, cs) = theta_r.sin_cos();
    let s2 = sigma1 * sigma1;
    let h11 = s2 * b_t * sn * sn;
    let h12 = -s2 * b_t * sn * cs;
    let h22 = s2 * b_t * cs * cs;
    let lx = sigma1 * z.re; // d/dx log sigma1 = 2x/(1-|z|^2)
    let ly = sigma1 * z.im;
    let hess = [
        h11 + lx * grad.re - ly * grad.im,
        h12 + ly * grad.re + lx * grad.im,
        h22 - lx * grad.re + ly * grad.im,
    ];
    RadialGeometry { d, grad, hess }
}

// ---------------------------------------------------------------------------
// Scalar fields
// ---------------------------------------------------------------------------

/// Outer function composed with the scaled bump profile: field = F(a * bump(d)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterFn {
    /// F(p) = p
    Identity,
    /// F(p) = arcsin(p / c) — the compensating potential of the explicit
    /// smooth-foliation family.
    ArcsinRatio(f64),
    /// F(p) = sqrt(c^2 - p^2) — the "h" companion with F^2 + p^2 = c^2.
    SqrtCompensate(f64),
}

impl OuterFn {
    /// (F(p), F'(p), F''(p))
    fn eval(&self, p: f64) -> (f64, f64, f64) {
        match *self {
            OuterFn::Identity => (p, 1.0, 0.0),
            OuterFn::ArcsinRatio(c) => {
                let s = (c * c - p * p).sqrt();
                ((p / c).asin(), 1.0 / s, p / (s * s * s))
            }
            OuterFn::SqrtCompensate(c) => {
                let s = (c * c - p * p).sqrt();
                (s, -p / s, -c * c / (s * s * s))
            }
        }
    }
}

/// Smooth compactly supported radial profile composed with an outer function:
/// value(z) = F(amplitude * bump(d(z, center))) with the standard C-infinity
/// bump(d) = exp(1 - 1/(1 - (d/radius)^2)) for d < radius, 0 beyond.
/// Distances are hyperbolic with curvature -1; invariance under the surface
/// group is exact when `radius` stays below the fundamental-domain inradius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialField {
    pub center: C,
    pub radius: f64,
    pub amplitude: f64,
    pub outer: OuterFn,
}

impl RadialField {
    /// (P(d), P'(d), P''(d)) of the full composed radial profile.
    fn profile(&self, d: f64) -> (f64, f64, f64) {
        let (s, s1, s2) = bump_profile(d, self.radius);
        let p = self.amplitude * s;
        let p1 = self.amplitude * s1;
        let p2 = self.amplitude * s2;
        let (f, f1, f2) = self.outer.eval(p);
        (f, f1 * p1, f2 * p1 * p1 + f1 * p2)
    }
}

/// (bump, bump', bump'') with bump(d) = exp(1 - 1/(1 - (d/r)^2)).
fn bump_profile(d: f64, r: f64) -> (f64, f64, f64) {
    let t = d / r;
    if t >= 1.0 - 1e-12 {
        return (0.0, 0.0, 0.0);
    }
    let u = 1.0 - t * t;
    let s = (1.0 - 1.0 / u).exp();
    // g(t) = 1 - 1/(1-t^2); g' = -2t/u^2; g'' = -(2 + 6 t^2)/u^3
    let g1 = -2.0 * t / (u * u);
    let g2 = -(2.0 + 6.0 * t * t) / (u * u * u);
    let s1 = s * g1 / r;
    let s2 = s * (g1 * g1 + g2) / (r * r);
    (s, s1, s2)
}

/// Piecewise (e.g. mesh-interpolated) scalar data: value, chart gradient and
/// an interpolated flat Laplacian (psi_xx + psi_yy).  Implemented by the
/// finite-element module for conformal factors produced by the elliptic solve.
pub trait SampledScalar: Send + Sync + fmt::Debug {
    fn value(&self, z: C) -> f64;
    fn chart_gradient(&self, z: C) -> C;
    fn flat_laplacian(&self, z: C) -> f64;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarKind {
    Constant(f64),
    Radial(RadialField),
    /// Mesh-backed data cannot round-trip through JSON; scenarios regenerate
    /// it from the recorded solve parameters instead.
    #[serde(skip)]
    Sampled(Arc<dyn SampledScalar>),
}

/// Scalar field on the surface, exposing chart partial derivatives.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScalarField {
    pub kind: ScalarKind,
}

impl ScalarField {
    pub fn constant(v: f64) -> Self {
        Self { kind: ScalarKind::Constant(v) }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn radial(center: C, radius: f64, amplitude: f64, outer: OuterFn) -> Self {
        Self { kind: ScalarKind::Radial(RadialField { center, radius, amplitude, outer }) }
    }

    /// Centered bump with given peak value (the plain radial scalar).
    pub fn bump(center: C, radius: f64, amplitude: f64) -> Self {
        Self::radial(center, radius, amplitude, OuterFn::Identity)
    }

    pub fn sampled(data: Arc<dyn SampledScalar>) -> Self {
        Self { kind: ScalarKind::Sampled(data) }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.kind, ScalarKind::Constant(_))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, ScalarKind::Constant(v) if v == 0.0)
    }

    pub fn value(&self, z: C) -> f64 {
        match &self.kind {
            ScalarKind::Constant(v) => *v,
            ScalarKind::Radial(r) => {
                let g = radial_geometry(z, r.center);
                r.profile(g.d).0
            }
            ScalarKind::Sampled(m) => m.value(z),
        }
    }

    /// Chart gradient psi_x + i psi_y.
    pub fn chart_gradient(&self, z: C) -> C {
        match &self.kind {
            ScalarKind::Constant(_) => C::new(0.0, 0.0),
            ScalarKind::Radial(r) => {
                let g = radial_geometry(z, r.center);
                let (_, p1, _) = r.profile(g.d);
                g.grad * p1
            }
            ScalarKind::Sampled(m) => m.chart_gradient(z),
        }
    }

    /// Chart second partials (psi_xx, psi_xy, psi_yy).  Piecewise-linear
    /// sampled fields report zero (their curvature information lives in
    /// `flat_laplacian`).
    pub fn chart_hessian(&self, z: C) -> [f64; 3] {
        match &self.kind {
            ScalarKind::Constant(_) => [0.0; 3],
            ScalarKind::Radial(r) => {
                let g = radial_geometry(z, r.center);
                let (_, p1, p2) = r.profile(g.d);
                if g.d < 1e-9 {
                    // isotropic limit at the center
                    return [p2, 0.0, p2];
                }
                [
                    p2 * g.grad.re * g.grad.re + p1 * g.hess[0],
                    p2 * g.grad.re * g.grad.im + p1 * g.hess[1],
                    p2 * g.grad.im * g.grad.im + p1 * g.hess[2],
                ]
            }
            ScalarKind::Sampled(_) => [0.0; 3],
        }
    }

    /// psi_xx + psi_yy, valid for every kind (sampled fields interpolate it).
    pub fn flat_laplacian(&self, z: C) -> f64 {
        match &self.kind {
            ScalarKind::Sampled(m) => m.flat_laplacian(z),
            _ => {
                let h = self.chart_hessian(z);
                h[0] + h[2]
            }
        }
    }

    /// Bundled (value, gradient, hessian) sharing one distance computation.
    fn chart_jet(&self, z: C) -> (f64, C, [f64; 3]) {
        match &self.kind {
            ScalarKind::Constant(v) => (*v, C::new(0.0, 0.0), [0.0; 3]),
            ScalarKind::Radial(r) => {
                let g = radial_geometry(z, r.center);
                let (p0, p1, p2) = r.profile(g.d);
                if g.d < 1e-9 {
                    return (p0, C::new(0.0, 0.0), [p2, 0.0, p2]);
                }
                let grad = g.grad * p1;
                let hess = [
                    p2 * g.grad.re * g.grad.re + p1 * g.hess[0],
                    p2 * g.grad.re * g.grad.im + p1 * g.hess[1],
                    p2 * g.grad.im * g.grad.im + p1 * g.hess[2],
                ];
                (p0, grad, hess)
            }
            ScalarKind::Sampled(m) => (m.value(z), m.chart_gradient(z), [0.0; 3]),
        }
    }
}

// ---------------------------------------------------------------------------
// Vector fields
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorKind {
    Zero,
    /// e = grad U in the spec's metric.
    Gradient(ScalarField),
    /// e = i grad U (rotation by +90 degrees): divergence-free.
    SkewGradient(ScalarField),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VectorField {
    pub kind: VectorKind,
}

impl VectorField {
    pub fn zero() -> Self {
        Self { kind: VectorKind::Zero }
    }

    pub fn gradient(potential: ScalarField) -> Self {
        Self { kind: VectorKind::Gradient(potential) }
    }

    pub fn skew_gradient(potential: ScalarField) -> Self {
        Self { kind: VectorKind::SkewGradient(potential) }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, VectorKind::Zero)
    }

    fn potential(&self) -> Option<(&ScalarField, bool)> {
        match &self.kind {
            VectorKind::Zero => None,
            VectorKind::Gradient(u) => Some((u, false)),
            VectorKind::SkewGradient(u) => Some((u, true)),
        }
    }

    /// Chart components e_c (the tangent vector is e_c * d/dz).
    pub fn chart_components(&self, metric: &Metric, z: C) -> C {
        match self.potential() {
            None => C::new(0.0, 0.0),
            Some((u, rot)) => {
                let sigma = metric.sigma(z);
                let g = u.chart_gradient(z) / (sigma * sigma);
                if rot {
                    g * C::new(0.0, 1.0)
                } else {
                    g
                }
            }
        }
    }

    /// Chart Jacobian (d e_c / dx, d e_c / dy) of the chart components.
    pub fn chart_jacobian(&self, metric: &Metric, z: C) -> (C, C) {
        match self.potential() {
            None => (C::new(0.0, 0.0), C::new(0.0, 0.0)),
            Some((u, rot)) => {
                let sigma = metric.sigma(z);
                let gls = metric.grad_log_sigma(z);
                let grad = u.chart_gradient(z);
                let h = u.chart_hessian(z);
                let s2 = sigma * sigma;
                let dx = (C::new(h[0], h[1]) - grad * (2.0 * gls.re)) / s2;
                let dy = (C::new(h[1], h[2]) - grad * (2.0 * gls.im)) / s2;
                if rot {
                    (dx * C::new(0.0, 1.0), dy * C::new(0.0, 1.0))
                } else {
                    (dx, dy)
                }
            }
        }
    }

    /// Metric divergence.  Exactly zero for rotated gradients; the Laplacian
    /// of the potential for gradients.
    pub fn divergence(&self, metric: &Metric, z: C) -> f64 {
        match &self.kind {
            VectorKind::Zero | VectorKind::SkewGradient(_) => 0.0,
            VectorKind::Gradient(u) => {
                let sigma = metric.sigma(z);
                u.flat_laplacian(z) / (sigma * sigma)
            }
        }
    }

    /// Squared metric norm |e|^2 = sigma^2 |e_c|^2.
    pub fn norm_sqr(&self, metric: &Metric, z: C) -> f64 {
        let ec = self.chart_components(metric, z);
        let sigma = metric.sigma(z);
        sigma * sigma * ec.norm_sqr()
    }
}

// ---------------------------------------------------------------------------
// Quadratic differentials
// ---------------------------------------------------------------------------

/// Trace-free symmetric 2-tensor represented through a holomorphic function
/// w(z) (a polynomial; truncated automorphic series compress to one):
/// q_x(v, v) = Re(w(z) e^{2 i phi}) / sigma(z)^2 for the unit vector at chart
/// angle phi.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuadDiff {
    /// Polynomial coefficients of w, lowest degree first.  Empty means q = 0.
    pub coeffs: Vec<C>,
}

impl QuadDiff {
    pub fn zero() -> Self {
        Self { coeffs: Vec::new() }
    }

    pub fn polynomial(coeffs: Vec<C>) -> Self {
        Self { coeffs }
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.norm_sqr() == 0.0)
    }

    /// w(z) by Horner evaluation.
    pub fn w(&self, z: C) -> C {
        let mut acc = C::new(0.0, 0.0);
        for c in self.coeffs.iter().rev() {
            acc = acc * z + c;
        }
        acc
    }

    /// Complex derivative w'(z).
    pub fn w_prime(&self, z: C) -> C {
        let mut acc = C::new(0.0, 0.0);
        for (k, c) in self.coeffs.iter().enumerate().skip(1).rev() {
            acc = acc * z + c * (k as f64);
        }
        acc
    }

    /// Determinant of q with respect to the metric of conformal factor sigma:
    /// the symmetric matrix of q in an orthonormal frame has eigenvalues
    /// +-|w|/sigma^2, so det = -|w|^2 / sigma^4.
    pub fn det(&self, sigma: f64) -> impl Fn(C) -> f64 + '_ {
        move |z| -self.w(z).norm_sqr() / (sigma * sigma * sigma * sigma)
    }
}

// ---------------------------------------------------------------------------
// Metric
// ---------------------------------------------------------------------------

/// Riemannian metric on the surface: the constant-curvature -c^2 background
/// (chart factor 2/(c(1-|z|^2))), optionally deformed conformally to
/// e^{2u} g_0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metric {
    /// Curvature scale: background curvature is -c^2.
    pub c: f64,
    /// Optional conformal exponent u (metric e^{2u} g_0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conformal: Option<ScalarField>,
}

impl Metric {
    pub fn hyperbolic(c: f64) -> Self {
        Self { c, conformal: None }
    }

    pub fn conformal(c: f64, u: ScalarField) -> Self {
        Self { c, conformal: Some(u) }
    }

    pub fn sigma0(&self, z: C) -> f64 {
        2.0 / (self.c * (1.0 - z.norm_sqr()))
    }

    pub fn sigma(&self, z: C) -> f64 {
        let s0 = self.sigma0(z);
        match &self.conformal {
            None => s0,
            Some(u) => u.value(z).exp() * s0,
        }
    }

    /// Chart gradient of log sigma as a complex number (d_x + i d_y).
    pub fn grad_log_sigma(&self, z: C) -> C {
        let base = z * (2.0 / (1.0 - z.norm_sqr()));
        match &self.conformal {
            None => base,
            Some(u) => base + u.chart_gradient(z),
        }
    }

    /// Gauss curvature.  Background: -c^2; conformal deformation:
    /// K = e^{-2u} (-c^2 - flat_laplacian(u)/sigma0^2).
    pub fn gauss_curvature(&self, z: C) -> f64 {
        match &self.conformal {
            None => -self.c * self.c,
            Some(u) => {
                let s0 = self.sigma0(z);
                let lap = u.flat_laplacian(z) / (s0 * s0);
                (-2.0 * u.value(z)).exp() * (-self.c * self.c - lap)
            }
        }
    }

    /// Laplace-Beltrami operator (div grad, negative spectrum) applied to a
    /// scalar field.
    pub fn laplacian(&self, field: &ScalarField, z: C) -> f64 {
        let s = self.sigma(z);
        field.flat_laplacian(z) / (s * s)
    }

    pub fn is_background(&self) -> bool {
        self.conformal.is_none()
    }
}

// ---------------------------------------------------------------------------
// Thermostat specification and bundled evaluation
// ---------------------------------------------------------------------------

/// How X- and H-derivatives of lambda are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    /// Chart-analytic partial derivatives (default).
    #[default]
    Analytic,
    /// 4th-order central differences of lambda along the geodesic and
    /// rotated-geodesic flows, step 1e-4 (cross-check path).
    FiniteDifference,
}

/// Complete description of a thermostat flow: metric plus the generating
/// fields of lambda = f + <e, iv> + q(v, v).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThermostatSpec {
    pub metric: Metric,
    pub f: ScalarField,
    pub e: VectorField,
    pub q: QuadDiff,
    #[serde(default)]
    pub derivative_mode: DerivativeMode,
}

/// Everything the integrators need at one (z, phi), assembled in one pass.
#[derive(Debug, Clone, Copy)]
pub struct FlowEval {
    /// Base velocity dz/dt.
    pub zdot: C,
    /// Fiber velocity dphi/dt (lambda plus the geodesic turning rate).
    pub phidot: f64,
    pub lambda: f64,
    pub v_lambda: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct CocycleEval {
    pub flow: FlowEval,
    /// kappa0 = K - H(lambda) + lambda^2, the transverse cocycle curvature.
    pub kappa0: f64,
}

/// Base-point data shared by all fiber angles at one z.
#[derive(Debug, Clone, Copy)]
pub struct BaseCache {
    pub z: C,
    pub sigma: f64,
    /// grad of log sigma (a + i b).
    pub gls: C,
    f_val: f64,
    f_grad: C,
    e_c: C,
    e_jac: (C, C),
    w: C,
    w_grad: (C, C),
    pub curvature: f64,
    analytic: bool,
}

impl ThermostatSpec {
    pub fn new(metric: Metric, f: ScalarField, e: VectorField, q: QuadDiff) -> Self {
        Self { metric, f, e, q, derivative_mode: DerivativeMode::Analytic }
    }

    /// Geodesic flow of the background metric of curvature -c^2.
    pub fn geodesic(c: f64) -> Self {
        Self::new(Metric::hyperbolic(c), ScalarField::zero(), VectorField::zero(), QuadDiff::zero())
    }

    /// Constant magnetic intensity f0 on curvature -c^2.
    pub fn constant_magnetic(c: f64, f0: f64) -> Self {
        Self::new(
            Metric::hyperbolic(c),
            ScalarField::constant(f0),
            VectorField::zero(),
            QuadDiff::zero(),
        )
    }

    pub fn with_derivative_mode(mut self, mode: DerivativeMode) -> Self {
        self.derivative_mode = mode;
        self
    }

    /// Precompute base-point data for repeated fiber evaluations.
    pub fn base_cache(&self, z: C) -> BaseCache {
        let sigma = self.metric.sigma(z);
        let gls = self.metric.grad_log_sigma(z);
        let analytic = self.derivative_mode == DerivativeMode::Analytic;
        let (f_val, f_grad) = match analytic {
            true => {
                let (v, g, _) = self.f.chart_jet(z);
                (v, g)
            }
            false => (self.f.value(z), C::new(0.0, 0.0)),
        };
        let e_c = self.e.chart_components(&self.metric, z);
        let e_jac = if analytic {
            self.e.chart_jacobian(&self.metric, z)
        } else {
            (C::new(0.0, 0.0), C::new(0.0, 0.0))
        };
        let w = self.q.w(z);
        let w_grad = if analytic {
            let wp = self.q.w_prime(z);
            (wp, wp * C::new(0.0, 1.0))
        } else {
            (C::new(0.0, 0.0), C::new(0.0, 0.0))
        };
        BaseCache {
            z,
            sigma,
            gls,
            f_val,
            f_grad,
            e_c,
            e_jac,
            w,
            w_grad,
            curvature: self.metric.gauss_curvature(z),
            analytic,
        }
    }

    pub fn lambda(&self, s: UnitTangentState) -> f64 {
        let c = self.base_cache(s.z);
        self.lambda_cached(&c, s.phi)
    }

    pub fn lambda_cached(&self, c: &BaseCache, phi: f64) -> f64 {
        let em = C::from_polar(1.0, -phi);
        let ep2 = (em * em).conj();
        let e_part = c.sigma * (c.e_c * em).im;
        let q_part = (c.w * ep2).re / (c.sigma * c.sigma);
        c.f_val + e_part + q_part
    }

    /// Fiber derivative V(lambda) = d lambda / d phi.
    pub fn v_lambda(&self, s: UnitTangentState) -> f64 {
        let c = self.base_cache(s.z);
        self.v_lambda_cached(&c, s.phi)
    }

    pub fn v_lambda_cached(&self, c: &BaseCache, phi: f64) -> f64 {
        let em = C::from_polar(1.0, -phi);
        let ep2 = (em * em).conj();
        -c.sigma * (c.e_c * em).re - 2.0 * (c.w * ep2).im / (c.sigma * c.sigma)
    }

    /// Second fiber derivative V^2(lambda).
    pub fn v2_lambda(&self, s: UnitTangentState) -> f64 {
        let c = self.base_cache(s.z);
        self.v2_lambda_cached(&c, s.phi)
    }

    pub fn v2_lambda_cached(&self, c: &BaseCache, phi: f64) -> f64 {
        let em = C::from_polar(1.0, -phi);
        let ep2 = (em * em).conj();
        -c.sigma * (c.e_c * em).im - 4.0 * (c.w * ep2).re / (c.sigma * c.sigma)
    }

    /// The dual 1-form of e evaluated on v: theta(v) = <e, v>.  Its fiber
    /// derivative V(theta) is the e-term of lambda.
    pub fn theta_form(&self, s: UnitTangentState) -> f64 {
        let c = self.base_cache(s.z);
        self.theta_form_cached(&c, s.phi)
    }

    pub fn theta_form_cached(&self, c: &BaseCache, phi: f64) -> f64 {
        let em = C::from_polar(1.0, -phi);
        c.sigma * (c.e_c * em).re
    }

    /// V(q)(v, v) = the fiber derivative of the quadratic term alone.
    pub fn v_q(&self, s: UnitTangentState) -> f64 {
        let c = self.base_cache(s.z);
        let em = C::from_polar(1.0, -s.phi);
        let ep2 = (em * em).conj();
        -2.0 * (c.w * ep2).im / (c.sigma * c.sigma)
    }

    /// q(v, v) alone.
    pub fn q_form(&self, s: UnitTangentState) -> f64 {
        let c = self.base_cache(s.z);
        let em = C::from_polar(1.0, -s.phi);
        let ep2 = (em * em).conj();
        (c.w * ep2).re / (c.sigma * c.sigma)
    }

    /// Chart partial derivatives (d lambda/dx, d lambda/dy) at fixed phi.
    fn lambda_chart_partials(&self, c: &BaseCache, phi: f64) -> (f64, f64) {
        let em = C::from_polar(1.0, -phi);
        let ep2 = (em * em).conj();
        let im_e = (c.e_c * em).im;
        let re_q = (c.w * ep2).re;
        let s2 = c.sigma * c.sigma;
        let lam_x = c.f_grad.re
            + c.sigma * (c.gls.re * im_e + (c.e_jac.0 * em).im)
            + ((c.w_grad.0 * ep2).re - 2.0 * c.gls.re * re_q) / s2;
        let lam_y = c.f_grad.im
            + c.sigma * (c.gls.im * im_e + (c.e_jac.1 * em).im)
            + ((c.w_grad.1 * ep2).re - 2.0 * c.gls.im * re_q) / s2;
        (lam_x, lam_y)
    }

    /// Horizontal derivatives (X(lambda), H(lambda)).
    pub fn lambda_horizontal_derivs(&self, s: UnitTangentState) -> (f64, f64) {
        let c = self.base_cache(s.z);
        self.lambda_horizontal_derivs_cached(&c, s.phi)
    }

    pub fn lambda_horizontal_derivs_cached(&self, c: &BaseCache, phi: f64) -> (f64, f64) {
        if !c.analytic {
            return (
                self.fd_derivative_along(c.z, phi, HorizontalKind::Geodesic),
                self.fd_derivative_along(c.z, phi, HorizontalKind::Rotated),
            );
        }
        let (lam_x, lam_y) = self.lambda_chart_partials(c, phi);
        let v_lam = self.v_lambda_cached(c, phi);
        let em = C::from_polar(1.0, -phi);
        let dir = em.conj() / c.sigma; // e^{i phi}/sigma
        // X: base motion dir, turning rate Im(gls e^{-i phi})/sigma
        let x_turn = (c.gls * em).im / c.sigma;
        let x_lam = lam_x * dir.re + lam_y * dir.im + v_lam * x_turn;
        // H: base motion i*dir, turning rate -Re(gls e^{-i phi})/sigma
        let h_turn = -(c.gls * em).re / c.sigma;
        let h_lam = -lam_x * dir.im + lam_y * dir.re + v_lam * h_turn;
        (x_lam, h_lam)
    }

    /// kappa0 = K - H(lambda) + lambda^2.
    pub fn kappa0(&self, s: UnitTangentState) -> f64 {
        let c = self.base_cache(s.z);
        self.kappa0_cached(&c, s.phi)
    }

    pub fn kappa0_cached(&self, c: &BaseCache, phi: f64) -> f64 {
        let (_, h_lam) = self.lambda_horizontal_derivs_cached(c, phi);
        let lam = self.lambda_cached(c, phi);
        c.curvature - h_lam + lam * lam
    }

    /// det_g(q + f g) = f^2 - q(v,v)^2 - V(q)(v,v)^2/4; a base-point
    /// function (independent of phi).
    pub fn det_shifted(&self, s: UnitTangentState) -> f64 {
        let c = self.base_cache(s.z);
        let em = C::from_polar(1.0, -s.phi);
        let ep2 = (em * em).conj();
        let qv = (c.w * ep2).re / (c.sigma * c.sigma);
        let vq = -2.0 * (c.w * ep2).im / (c.sigma * c.sigma);
        c.f_val * c.f_val - qv * qv - vq * vq / 4.0
    }

    /// Flow right-hand side at (z, phi).
    pub fn flow_eval(&self, s: UnitTangentState) -> FlowEval {
        let c = self.base_cache(s.z);
        self.flow_eval_cached(&c, s.phi)
    }

    pub fn flow_eval_cached(&self, c: &BaseCache, phi: f64) -> FlowEval {
        let em = C::from_polar(1.0, -phi);
        let zdot = em.conj() / c.sigma;
        let lambda = self.lambda_cached(c, phi);
        let v_lambda = self.v_lambda_cached(c, phi);
        let geo_turn = (c.gls * em).im / c.sigma;
        FlowEval { zdot, phidot: lambda + geo_turn, lambda, v_lambda }
    }

    /// Flow plus transverse-cocycle data at (z, phi).
    pub fn cocycle_eval(&self, s: UnitTangentState) -> CocycleEval {
        let c = self.base_cache(s.z);
        self.cocycle_eval_cached(&c, s.phi)
    }

    pub fn cocycle_eval_cached(&self, c: &BaseCache, phi: f64) -> CocycleEval {
        let flow = self.flow_eval_cached(c, phi);
        let kappa0 = if c.analytic {
            let (lam_x, lam_y) = self.lambda_chart_partials(c, phi);
            let em = C::from_polar(1.0, -phi);
            let dir = em.conj() / c.sigma;
            let h_turn = -(c.gls * em).re / c.sigma;
            let h_lam = -lam_x * dir.im + lam_y * dir.re + flow.v_lambda * h_turn;
            c.curvature - h_lam + flow.lambda * flow.lambda
        } else {
            let h_lam = self.fd_derivative_along(c.z, phi, HorizontalKind::Rotated);
            c.curvature - h_lam + flow.lambda * flow.lambda
        };
        CocycleEval { flow, kappa0 }
    }

    // -- finite-difference fallback -----------------------------------------

    /// lambda sampled along the X-flow (geodesic, vector carried along) or
    /// the H-flow (base geodesic in direction i v, vector parallel).
    fn lambda_on_horizontal_curve(&self, z: C, phi: f64, t: f64, kind: HorizontalKind) -> f64 {
        let (base_dir, back) = match kind {
            HorizontalKind::Geodesic => (phi, 0.0),
            HorizontalKind::Rotated => (phi + std::f64::consts::FRAC_PI_2, -std::f64::consts::FRAC_PI_2),
        };
        let moved = self.metric_geodesic_step(UnitTangentState::new(z, base_dir), t);
        self.lambda(UnitTangentState::new(moved.z, moved.phi + back))
    }

    /// Unit-speed geodesic of the spec's metric: exact Möbius transport on
    /// the constant-curvature background, short RK4 march for conformal
    /// deformations.
    pub fn metric_geodesic_step(&self, s: UnitTangentState, t: f64) -> UnitTangentState {
        if self.metric.is_background() {
            return geom::exact_geodesic_step(s, t, self.metric.c);
        }
        // RK4 on (z, phi) with lambda = 0; |t| is tiny (finite-difference
        // probes), a fixed substep keeps the truncation far below the probe.
        let n = (t.abs() / 5e-5).ceil().max(1.0) as usize;
        let h = t / n as f64;
        let mut cur = s;
        let rhs = |st: UnitTangentState| -> (C, f64) {
            let sigma = self.metric.sigma(st.z);
            let gls = self.metric.grad_log_sigma(st.z);
            let em = C::from_polar(1.0, -st.phi);
            (em.conj() / sigma, (gls * em).im / sigma)
        };
        for _ in 0..n {
            let k1 = rhs(cur);
            let s2 = UnitTangentState::new(cur.z + k1.0 * (h / 2.0), cur.phi + k1.1 * (h / 2.0));
            let k2 = rhs(s2);
            let s3 = UnitTangentState::new(cur.z + k2.0 * (h / 2.0), cur.phi + k2.1 * (h / 2.0));
            let k3 = rhs(s3);
            let s4 = UnitTangentState::new(cur.z + k3.0 * h, cur.phi + k3.1 * h);
            let k4 = rhs(s4);
            cur = UnitTangentState::new(
                cur.z + (k1.0 + (k2.0 + k3.0) * 2.0 + k4.0) * (h / 6.0),
                cur.phi + (k1.1 + 2.0 * (k2.1 + k3.1) + k4.1) * (h / 6.0),
            );
        }
        cur
    }

    fn fd_derivative_along(&self, z: C, phi: f64, kind: HorizontalKind) -> f64 {
        let h = 1e-4;
        let f = |t: f64| self.lambda_on_horizontal_curve(z, phi, t, kind);
        (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
    }
}

#[derive(Debug, Clone, Copy)]
enum HorizontalKind {
    Geodesic,
    Rotated,
}
