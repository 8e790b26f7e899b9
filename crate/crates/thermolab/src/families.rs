//! Explicit thermostat families with closed-form slope predictions, the
//! orbit-preserving time-change transform, and truncated automorphic
//! averaging of quadratic differentials.
//!
//! Three constructors produce `ThermostatSpec`s whose weak-foliation slopes
//! are known exactly:
//!
//! * [`constant_family`] — constant curvature and constant magnetic
//!   intensity; the slope fields are the constant Riccati roots
//!   `±sqrt(c² − f0²)`.
//! * [`compensated_family`] — a radial scalar `f = ε·bump` compensated by
//!   `h = sqrt(c² − f²)` and the divergence-free field
//!   `e = i∇ arcsin(f/c)`, which makes `r = h∘π − θ` an exact solution of
//!   the Riccati equation: one weak foliation is as smooth as the data while
//!   the other generically is not.
//! * [`conformal_family`] — a trace-free quadratic differential `q` and a
//!   nonzero constant `h` on the conformally corrected metric `e^{2u} g₀`,
//!   where `u` solves the prescribed-curvature equation
//!   `K = −h² − det_g q`; the slope fields are `±h + V(q)/2`.
//!
//! [`apply_time_change`] rewrites a spec under the reparametrization
//! attached to a scalar `U` (orbits are preserved as unparametrized curves),
//! and [`poincare_qd`] produces approximately group-equivariant holomorphic
//! data for the conformal family by word-length-truncated weight-4
//! averaging over the surface group.

use std::sync::Arc;

use num_complex::Complex64 as C;
use rayon::prelude::*;

use crate::elliptic::{PdeProblem, SolveReport};
use crate::fields::{
    Metric, OuterFn, QuadDiff, ScalarField, ScalarKind, ThermostatSpec, VectorField, VectorKind,
};
use crate::flow::Flow;
use crate::geom::{FuchsianGroup, GroupElement, MobiusTransform, UnitTangentState};
use crate::mesh::SurfaceMesh;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Constant-coefficient family
// ---------------------------------------------------------------------------

/// Constant-curvature, constant-magnetic-intensity flow together with its
/// exact slope data.
#[derive(Debug, Clone)]
pub struct ConstantFamily {
    pub spec: ThermostatSpec,
    /// Curvature scale: background curvature is -c^2.
    pub c: f64,
    /// Constant magnetic intensity.
    pub f0: f64,
}

impl ConstantFamily {
    /// (stable, unstable) slopes: the constant roots -+sqrt(c^2 - f0^2) of
    /// the Riccati equation r' = -r^2 - (K + f0^2) with r' = 0.
    pub fn slopes(&self) -> (f64, f64) {
        let root = (self.c * self.c - self.f0 * self.f0).sqrt();
        (-root, root)
    }
}

/// Builds the constant-coefficient magnetic flow, rejecting parameters
/// outside the hyperbolic regime f0^2 < c^2 (at f0^2 = c^2 the transverse
/// cocycle becomes parabolic and the weak foliations collapse).
pub fn constant_family(c: f64, f0: f64) -> Result<ConstantFamily> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "curvature scale must be positive and finite; got c = {c}"
        )));
    }
    if !(f0.is_finite() && f0 * f0 < c * c) {
        return Err(Error::InvalidParameter(format!(
            "constant family requires f0^2 < c^2 (hyperbolic regime); got c = {c}, f0 = {f0}"
        )));
    }
    Ok(ConstantFamily { spec: ThermostatSpec::constant_magnetic(c, f0), c, f0 })
}

// ---------------------------------------------------------------------------
// Compensated family (one smooth weak foliation)
// ---------------------------------------------------------------------------

/// Thermostat built from a radial profile f and its compensator
/// h = sqrt(c^2 - f^2), with e the rotated gradient of arcsin(f/c).
#[derive(Debug, Clone)]
pub struct CompensatedFamily {
    pub spec: ThermostatSpec,
    pub c: f64,
    pub epsilon: f64,
    pub rho0: f64,
    /// h = sqrt(c^2 - f^2), the compensating companion of f.
    pub h: ScalarField,
}

impl CompensatedFamily {
    /// r(x, v) = h(x) - theta_x(v): an exact solution of the Riccati
    /// equation along every orbit.  The unstable sweep relaxes onto it, so
    /// this is the smooth slope field of the family; the stable field has no
    /// such closed form and is generically only Hoelder transversally.
    pub fn predicted_smooth_slope(&self, s: UnitTangentState) -> f64 {
        self.h.value(s.z) - self.spec.theta_form(s)
    }
}

/// Builds the compensated family: f = epsilon * bump of hyperbolic radius
/// rho0 about the origin, h = sqrt(c^2 - f^2) (so h^2 + f^2 = c^2
/// pointwise), and e = i grad arcsin(f/c).  The chain rule turns the 1-form
/// identity c^2 theta = (f dh - h df) o i into d(arcsin(f/c)) o i, which is
/// what makes r = h - theta solve the Riccati equation exactly.
///
/// epsilon = 0 degenerates to the geodesic flow (f = 0, h = c, e = 0).
/// Requires epsilon < c (so h stays real) and rho0 below the octagon
/// inradius (so the radial profile is a function on the quotient).
pub fn compensated_family(c: f64, epsilon: f64, rho0: f64) -> Result<CompensatedFamily> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "curvature scale must be positive and finite; got c = {c}"
        )));
    }
    if !(epsilon.is_finite() && (0.0..c).contains(&epsilon)) {
        return Err(Error::InvalidParameter(format!(
            "compensated family requires 0 <= epsilon < c so h = sqrt(c^2 - f^2) stays \
             real and positive; got c = {c}, epsilon = {epsilon}"
        )));
    }
    let inradius = FuchsianGroup::genus2_octagon().inradius;
    if !(rho0.is_finite() && rho0 > 0.0 && rho0 < inradius) {
        return Err(Error::InvalidParameter(format!(
            "bump radius rho0 must lie in (0, {inradius:.4}) to keep the profile inside \
             the fundamental domain; got rho0 = {rho0}"
        )));
    }
    let origin = C::new(0.0, 0.0);
    let (f, h, e) = if epsilon == 0.0 {
        (ScalarField::zero(), ScalarField::constant(c), VectorField::zero())
    } else {
        (
            ScalarField::radial(origin, rho0, epsilon, OuterFn::Identity),
            ScalarField::radial(origin, rho0, epsilon, OuterFn::SqrtCompensate(c)),
            VectorField::skew_gradient(ScalarField::radial(
                origin,
                rho0,
                epsilon,
                OuterFn::ArcsinRatio(c),
            )),
        )
    };
    let spec = ThermostatSpec::new(Metric::hyperbolic(c), f, e, QuadDiff::zero());
    Ok(CompensatedFamily { spec, c, epsilon, rho0, h })
}

// ---------------------------------------------------------------------------
// Time change
// ---------------------------------------------------------------------------

/// Orbit-preserving time change attached to a scalar U: the reparametrized
/// flow is again a thermostat flow, with data
/// (e^{-2U} g, e^U f, e^{2U}(e + grad U), e^{-U} q).
///
/// The transform closes over the field algebra in three situations:
///
/// 1. **constant** U = kappa — every field rescales in place.  f must be
///    constant or a plain radial profile so e^kappa folds into its
///    amplitude; e keeps its potential because the rescaled metric supplies
///    the factor e^{2 kappa} through sigma^{-2}; q's coefficients absorb
///    e^{-kappa}.
/// 2. **absorption** — f = q = 0 on the background metric with e = grad(p)
///    and U = -p (structurally): the gradient field is absorbed into the
///    metric and the result is the geodesic spec of e^{2p} g.
/// 3. **emission** (inverse of 2) — f = q = 0, e = 0 on a conformal metric
///    whose exponent equals U structurally: the exponent is emitted back as
///    a gradient thermostat on the background metric.
///
/// Any other combination produces fields outside the closed algebra
/// (products of existing profiles) and is rejected as `InvalidParameter`.
pub fn apply_time_change(spec: &ThermostatSpec, u: &ScalarField) -> Result<ThermostatSpec> {
    if u.is_zero() {
        return Ok(spec.clone());
    }
    if let ScalarKind::Constant(kappa) = u.kind {
        return constant_time_change(spec, kappa);
    }
    if spec.f.is_zero() && spec.q.is_zero() {
        if spec.metric.is_background() {
            if let VectorKind::Gradient(pot) = &spec.e.kind {
                if scalars_match(u, pot, true) {
                    let metric = Metric::conformal(spec.metric.c, pot.clone());
                    return Ok(ThermostatSpec::new(
                        metric,
                        ScalarField::zero(),
                        VectorField::zero(),
                        QuadDiff::zero(),
                    )
                    .with_derivative_mode(spec.derivative_mode));
                }
            }
        }
        if spec.e.is_zero() {
            if let Some(v) = &spec.metric.conformal {
                if scalars_match(u, v, false) {
                    return Ok(ThermostatSpec::new(
                        Metric::hyperbolic(spec.metric.c),
                        ScalarField::zero(),
                        VectorField::gradient(v.clone()),
                        QuadDiff::zero(),
                    )
                    .with_derivative_mode(spec.derivative_mode));
                }
            }
        }
    }
    Err(Error::InvalidParameter(
        "time change not representable in the field algebra: supported are constant U, \
         absorption (f = q = 0, e = grad p, U = -p on the background metric) and its \
         inverse emission (f = q = e = 0, conformal exponent structurally equal to U)"
            .into(),
    ))
}

fn constant_time_change(spec: &ThermostatSpec, kappa: f64) -> Result<ThermostatSpec> {
    let scale = kappa.exp();
    let f = match &spec.f.kind {
        ScalarKind::Constant(v) => ScalarField::constant(v * scale),
        ScalarKind::Radial(r) if r.outer == OuterFn::Identity => {
            ScalarField::radial(r.center, r.radius, r.amplitude * scale, OuterFn::Identity)
        }
        _ => {
            return Err(Error::InvalidParameter(
                "constant time change cannot fold the rate factor into this f profile; \
                 only constant f and plain radial profiles rescale in place"
                    .into(),
            ))
        }
    };
    // sigma carries 1/c, so shrinking lengths by e^{-kappa} means raising c
    // to c e^{kappa}; the rescaled sigma^{-2} in the e-term then supplies the
    // required e^{2 kappa} without touching the potential.
    let metric = Metric { c: spec.metric.c * scale, conformal: spec.metric.conformal.clone() };
    let q = if spec.q.is_zero() {
        QuadDiff::zero()
    } else {
        QuadDiff::polynomial(spec.q.coeffs.iter().map(|w| w / scale).collect())
    };
    Ok(ThermostatSpec::new(metric, f, spec.e.clone(), q).with_derivative_mode(spec.derivative_mode))
}

/// Structural equality of scalar fields, with `flip` comparing a against -b.
/// Only shapes the time change can invert are accepted: constants and plain
/// radial profiles.
fn scalars_match(a: &ScalarField, b: &ScalarField, flip: bool) -> bool {
    let sign = if flip { -1.0 } else { 1.0 };
    match (&a.kind, &b.kind) {
        (ScalarKind::Constant(x), ScalarKind::Constant(y)) => close(*x, sign * *y),
        (ScalarKind::Radial(ra), ScalarKind::Radial(rb)) => {
            ra.outer == OuterFn::Identity
                && rb.outer == OuterFn::Identity
                && (ra.center - rb.center).norm() < 1e-12
                && close(ra.radius, rb.radius)
                && close(ra.amplitude, sign * rb.amplitude)
        }
        _ => false,
    }
}

fn close(x: f64, y: f64) -> bool {
    (x - y).abs() <= 1e-12 * (1.0 + x.abs().max(y.abs()))
}

// ---------------------------------------------------------------------------
// Orbit traces and polyline comparison
// ---------------------------------------------------------------------------

/// Fundamental-domain base points of the orbit of `s0`, sampled every `dt`
/// over [0, t_end].  Feeds [`trace_distance`] comparisons of flows expected
/// to share orbits as unparametrized curves.
pub fn orbit_trace(
    spec: &ThermostatSpec,
    group: &FuchsianGroup,
    s0: UnitTangentState,
    t_end: f64,
    dt: f64,
) -> Result<Vec<C>> {
    let flow = Flow::new(spec, group, dt)?;
    Ok(flow.orbit(s0, t_end, 1)?.iter().map(|o| o.state.z).collect())
}

/// One-sided distance from the points of `probe` to the polyline `path`.
/// Consecutive samples farther apart than `jump` mark a seam crossing of the
/// fundamental domain: such path segments are not interpolated (their
/// endpoints still count), and probe points within three samples of their
/// own crossing are skipped — at a seam the two traces may overshoot each
/// other by up to one sample before reduction pulls them to opposite sides,
/// which would otherwise dominate the supremum with pure bookkeeping noise.
pub fn trace_distance(probe: &[C], path: &[C], jump: f64) -> f64 {
    let n = probe.len();
    let mut near_jump = vec![false; n];
    for i in 1..n {
        if (probe[i] - probe[i - 1]).norm() > jump {
            for flag in near_jump.iter_mut().take((i + 2).min(n - 1) + 1).skip(i.saturating_sub(3))
            {
                *flag = true;
            }
        }
    }
    let mut worst = 0.0f64;
    for (i, &p) in probe.iter().enumerate() {
        if near_jump[i] {
            continue;
        }
        let mut best = f64::INFINITY;
        for &q in path {
            best = best.min((p - q).norm());
        }
        for w in path.windows(2) {
            if (w[1] - w[0]).norm() <= jump {
                best = best.min(segment_distance(p, w[0], w[1]));
            }
        }
        worst = worst.max(best);
    }
    worst
}

fn segment_distance(p: C, a: C, b: C) -> f64 {
    let ab = b - a;
    let denom = ab.norm_sqr();
    if denom == 0.0 {
        return (p - a).norm();
    }
    let t = (((p.re - a.re) * ab.re + (p.im - a.im) * ab.im) / denom).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

// ---------------------------------------------------------------------------
// Automorphic averaging of quadratic differentials
// ---------------------------------------------------------------------------

/// Word-length budget of the group enumeration.
const MAX_WORD_LENGTH: usize = 12;
/// Elements translating the origin farther than this contribute weight-4
/// terms below double-precision dust on the fundamental domain; they are
/// pruned from the average.
const CUTOFF_TRANSLATION: f64 = 17.5;
/// Degree of the compressed Taylor polynomial.  The fundamental domain
/// closes inside |z| <= 0.85, where the discarded tail of a function
/// holomorphic on the unit disk is below 1e-12 of its scale.
const TAYLOR_DEGREE: usize = 192;
/// Trailing Taylor coefficients below this relative size are trimmed.
const TAYLOR_TRIM: f64 = 1e-14;

/// Truncated weight-4 group average of a polynomial seed,
/// S(z) = sum over reduced words gamma up to the given length of
/// w0(gamma z) gamma'(z)^2, compressed to a Taylor polynomial about the
/// origin and packaged with its measured equivariance defect.
#[derive(Debug, Clone)]
pub struct PoincareSeries {
    /// Polynomial compression of the averaged series.
    pub qd: QuadDiff,
    /// max over the eight generators T and the fixed probe set of
    /// |S(T z) T'(z)^2 - S(z)| / scale: how far the truncation sits from
    /// exact equivariance, measured on the raw rational sums rather than on
    /// the polynomial compression.
    pub defect: f64,
    /// Normalization of the defect: max |S| over the probe set.
    pub scale: f64,
    /// Number of group elements retained in the average.
    pub n_elements: usize,
    /// Word-length truncation the average was built with.
    pub word_length: usize,
}

/// Averages the polynomial seed over all reduced words of length at most
/// `word_length` with the weight-4 cocycle gamma'(z)^2.  The average of an
/// even seed converges (absolutely, geometrically in the word length) to a
/// holomorphic group-invariant quadratic differential; the truncation error
/// shows up as the reported equivariance `defect`, which is data, not an
/// error condition.
///
/// Odd-degree seed monomials are rejected: the order-8 rotational symmetry
/// of the octagon acts on the 3-dimensional space of invariant weight-4
/// forms with characters i, -1, -i only, which annihilates every odd
/// monomial's average and would leave the defect quotient meaningless.
pub fn poincare_qd(
    group: &FuchsianGroup,
    seed: &QuadDiff,
    word_length: usize,
) -> Result<PoincareSeries> {
    if word_length > MAX_WORD_LENGTH {
        return Err(Error::InvalidParameter(format!(
            "word length {word_length} exceeds the enumeration budget {MAX_WORD_LENGTH}"
        )));
    }
    if seed.is_zero() {
        return Err(Error::InvalidParameter("averaging seed must be nonzero".into()));
    }
    if seed.coeffs.iter().enumerate().any(|(k, c)| k % 2 == 1 && c.norm_sqr() > 0.0) {
        return Err(Error::InvalidParameter(
            "odd-degree seed coefficients are annihilated by the octagon average; \
             use an even polynomial seed"
                .into(),
        ));
    }
    let elements = group.enumerate(word_length, Some(CUTOFF_TRANSLATION));
    let mut coeffs = taylor_average(&elements, &seed.coeffs);
    let max_coeff = coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let mut keep = coeffs.len();
    while keep > 1 && coeffs[keep - 1].norm() <= TAYLOR_TRIM * max_coeff {
        keep -= 1;
    }
    coeffs.truncate(keep);

    let probes = defect_probes();
    let base: Vec<C> = probes.iter().map(|&z| rational_sum(&elements, seed, z)).collect();
    let scale = base.iter().map(|s| s.norm()).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return Err(Error::Numerical(
            "averaged series vanished on the probe set; the seed has no invariant content"
                .into(),
        ));
    }
    let mut defect = 0.0f64;
    for (j, &z) in probes.iter().enumerate() {
        for g in group.generators.iter() {
            let mapped = rational_sum(&elements, seed, g.apply(z));
            let gp = g.derivative(z);
            defect = defect.max((mapped * gp * gp - base[j]).norm());
        }
    }
    Ok(PoincareSeries {
        qd: QuadDiff::polynomial(coeffs),
        defect: defect / scale,
        scale,
        n_elements: elements.len(),
        word_length,
    })
}

/// Eight fixed interior probe points, staggered in radius and angle so no
/// two are related by the octagon symmetries.
fn defect_probes() -> [C; 8] {
    let mut out = [C::new(0.0, 0.0); 8];
    for (j, slot) in out.iter_mut().enumerate() {
        let jf = j as f64;
        let r = 0.12 + 0.05 * jf;
        let a = 0.37 + std::f64::consts::TAU * jf / 8.0 + 0.11 * jf;
        *slot = C::from_polar(r, a);
    }
    out
}

/// Taylor coefficients about the origin of sum_m w0(m z) m'(z)^2 over the
/// element list.  Fixed-size chunks with a sequential in-order reduction
/// keep the summation order independent of the rayon thread count.
fn taylor_average(elements: &[GroupElement], seed: &[C]) -> Vec<C> {
    let zero = C::new(0.0, 0.0);
    let partials: Vec<Vec<C>> = elements
        .par_chunks(2048)
        .map(|chunk| {
            let mut acc = vec![zero; TAYLOR_DEGREE + 1];
            let mut dvec = vec![zero; TAYLOR_DEGREE + 1];
            let mut evec = vec![zero; seed.len()];
            for el in chunk {
                element_taylor(&mut acc, &mut dvec, &mut evec, &el.map, seed);
            }
            acc
        })
        .collect();
    let mut total = vec![zero; TAYLOR_DEGREE + 1];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    total
}

/// Accumulates the Taylor series of w0(m z) m'(z)^2 =
/// sum_k c_k (a z + b)^k (conj(b) z + conj(a))^{-(k+4)} into `acc`.
/// The inverse power expands geometrically in t = conj(b)/conj(a) (|t| < 1,
/// so the pole sits outside the closed disk), and the binomial factor is a
/// finite convolution.
fn element_taylor(acc: &mut [C], dvec: &mut [C], evec: &mut [C], m: &MobiusTransform, seed: &[C]) {
    let inv_abar = C::new(1.0, 0.0) / m.a.conj();
    let t = m.b.conj() * inv_abar;
    let top = acc.len() - 1;
    for (k, &ck) in seed.iter().enumerate() {
        if ck.re == 0.0 && ck.im == 0.0 {
            continue;
        }
        let mdeg = (k + 4) as f64;
        dvec[0] = inv_abar.powi((k + 4) as i32);
        for j in 0..top {
            dvec[j + 1] = dvec[j] * (-t) * ((mdeg + j as f64) / (j as f64 + 1.0));
        }
        let mut apow = C::new(1.0, 0.0);
        for (i, slot) in evec.iter_mut().enumerate().take(k + 1) {
            let mut term = apow * binomial(k, i);
            for _ in 0..(k - i) {
                term *= m.b;
            }
            *slot = term;
            apow *= m.a;
        }
        for (i, &ei) in evec.iter().enumerate().take(k + 1) {
            let w = ck * ei;
            if w.re == 0.0 && w.im == 0.0 {
                continue;
            }
            for j in 0..=(top - i) {
                acc[i + j] += w * dvec[j];
            }
        }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut b = 1.0;
    for i in 0..k {
        b = b * (n - i) as f64 / (i + 1) as f64;
    }
    b
}

/// Direct rational evaluation of the truncated average at one point, with
/// the same thread-count-independent reduction as the Taylor accumulation.
fn rational_sum(elements: &[GroupElement], seed: &QuadDiff, z: C) -> C {
    let partials: Vec<C> = elements
        .par_chunks(2048)
        .map(|chunk| {
            let mut s = C::new(0.0, 0.0);
            for el in chunk {
                let d = el.map.derivative(z);
                s += seed.w(el.map.apply(z)) * d * d;
            }
            s
        })
        .collect();
    partials.iter().sum()
}

// ---------------------------------------------------------------------------
// Conformal family
// ---------------------------------------------------------------------------

/// Thermostat of a trace-free quadratic differential on a conformally
/// corrected metric, with slope fields ±|h| + V(q)/2.
#[derive(Debug, Clone)]
pub struct ConformalFamily {
    /// f = 0, e = 0, the given q, and the solved metric e^{2u} g0.
    pub spec: ThermostatSpec,
    /// The prescribed constant h.
    pub h: f64,
    /// Mesh the conformal factor was solved on.
    pub mesh: Arc<SurfaceMesh>,
    /// Solver report of the conformal-factor solve.
    pub report: SolveReport,
}

impl ConformalFamily {
    /// Predicted (stable, unstable) slopes -+|h| + V(q)/2 at a state.
    pub fn predicted_slopes(&self, s: UnitTangentState) -> (f64, f64) {
        let half_vq = 0.5 * self.spec.v_q(s);
        (-self.h.abs() + half_vq, self.h.abs() + half_vq)
    }

    /// Residual of the prescribed-curvature identity K + h^2 + det_g q = 0
    /// at a base point; this is the a-posteriori error of the solved
    /// conformal factor.
    pub fn curvature_residual(&self, z: C) -> f64 {
        let sigma = self.spec.metric.sigma(z);
        let det = -self.spec.q.w(z).norm_sqr() / (sigma * sigma * sigma * sigma);
        self.spec.metric.gauss_curvature(z) + self.h * self.h + det
    }
}

/// Builds the conformal family: solves the prescribed-curvature equation
/// K_{e^{2u} g0} = -h^2 - det q for the exponent u on the quotient mesh
/// (g0 the curvature -1 background) and assembles the spec with zero f and
/// e.  The identity K + h^2 + det_g q = 0 is exactly what makes
/// ±h + V(q)/2 solutions of the Riccati equation along every orbit, so the
/// returned flow has both weak foliations as smooth as q and u.
pub fn conformal_family(q: &QuadDiff, h: f64, resolution: usize) -> Result<ConformalFamily> {
    if !(h.is_finite() && h != 0.0) {
        return Err(Error::InvalidParameter(format!(
            "conformal family requires a nonzero finite constant h; got {h}"
        )));
    }
    let mesh = Arc::new(SurfaceMesh::build(resolution)?);
    let mut problem = PdeProblem::new(mesh.clone(), &ScalarField::constant(h.abs()), q)?;
    let report = problem.solve()?;
    let u = problem.solution_field()?;
    let metric = Metric::conformal(1.0, ScalarField::sampled(Arc::new(u)));
    let spec = ThermostatSpec::new(metric, ScalarField::zero(), VectorField::zero(), q.clone());
    Ok(ConformalFamily { spec, h, mesh, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::{closed_coclosed_test, gk_apply};
    use crate::liouville::entropy_production;
    use crate::riccati::{riccati_residual_series, slope_at, slope_fiber_profile, SlopeParams};

    const TAU: f64 = std::f64::consts::TAU;

    fn group() -> FuchsianGroup {
        FuchsianGroup::genus2_octagon()
    }

    /// Deterministic low-discrepancy states spread over the fundamental
    /// domain and the fiber circle.
    fn probe_states(n: usize) -> Vec<UnitTangentState> {
        (0..n)
            .map(|j| {
                let jf = j as f64;
                let r = 0.05 + 0.50 * (0.37 + 0.61 * jf).fract();
                let ang = TAU * (0.18 + 0.377 * jf).fract();
                let phi = TAU * (0.51 + 0.733 * jf).fract();
                UnitTangentState::new(C::from_polar(r, ang), phi)
            })
            .collect()
    }

    #[test]
    fn constant_family_attaches_the_exact_riccati_roots() {
        let fam = constant_family(1.0, 0.5).unwrap();
        let (stable, unstable) = fam.slopes();
        let root = 0.75f64.sqrt();
        assert!((unstable - root).abs() < 1e-15);
        assert!((stable + root).abs() < 1e-15);
        let g = group();
        for s in probe_states(3) {
            let sl = slope_at(&fam.spec, &g, s, &SlopeParams::precise()).unwrap();
            assert!((sl.r_minus - unstable).abs() < 1e-8, "unstable {}", sl.r_minus);
            assert!((sl.r_plus - stable).abs() < 1e-8, "stable {}", sl.r_plus);
        }
        // c-scaling: (c, f0) = (2, 1) has roots +-sqrt(3)
        let fam2 = constant_family(2.0, 1.0).unwrap();
        let sl = slope_at(&fam2.spec, &g, probe_states(1)[0], &SlopeParams::precise()).unwrap();
        assert!((sl.r_minus - 3.0f64.sqrt()).abs() < 1e-8);
        assert!((sl.r_plus + 3.0f64.sqrt()).abs() < 1e-8);
        // outside the hyperbolic regime
        assert!(constant_family(1.0, 1.0).is_err());
        assert!(constant_family(1.0, -1.2).is_err());
        assert!(constant_family(0.0, 0.0).is_err());
        assert!(constant_family(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn compensated_family_satisfies_its_defining_algebra() {
        let c = 1.25;
        let fam = compensated_family(c, 0.4, 1.2).unwrap();
        // pointwise compensation h^2 + f^2 = c^2
        for s in probe_states(24) {
            let f = fam.spec.f.value(s.z);
            let h = fam.h.value(s.z);
            assert!((h * h + f * f - c * c).abs() < 1e-12, "compensation at {}", s.z);
        }
        // e is an exact rotated gradient: the analytic metric divergence
        // vanishes identically and the finite-difference coclosed residual
        // agrees; the closed residual stays visibly nonzero (e is not a
        // gradient once f is nonconstant).
        for s in probe_states(8) {
            assert_eq!(fam.spec.e.divergence(&fam.spec.metric, s.z), 0.0);
        }
        let states = probe_states(16);
        let (closed, coclosed) = closed_coclosed_test(&fam.spec, &states);
        assert!(coclosed < 1e-6, "coclosed residual {coclosed}");
        assert!(closed > 1e-3, "closed residual should be visible, got {closed}");
        // the 1-form identity c^2 theta(v) = f dh(iv) - h df(iv)
        for s in probe_states(32) {
            let sigma = fam.spec.metric.sigma(s.z);
            let rot = C::new(0.0, 1.0) * C::from_polar(1.0, s.phi);
            let df = (fam.spec.f.chart_gradient(s.z).conj() * rot).re / sigma;
            let dh = (fam.h.chart_gradient(s.z).conj() * rot).re / sigma;
            let f = fam.spec.f.value(s.z);
            let h = fam.h.value(s.z);
            let theta = fam.spec.theta_form(s);
            assert!(
                (c * c * theta - (f * dh - h * df)).abs() < 1e-10,
                "one-form identity at {} {}",
                s.z,
                s.phi
            );
        }
        // epsilon = 0 degenerates to the geodesic flow
        let geo = compensated_family(1.0, 0.0, 1.2).unwrap();
        assert!(geo.spec.e.is_zero() && geo.spec.f.is_zero());
        assert!(matches!(geo.h.kind, ScalarKind::Constant(v) if v == 1.0));
        // parameter validation
        assert!(compensated_family(1.0, 1.0, 1.2).is_err());
        assert!(compensated_family(1.0, -0.1, 1.2).is_err());
        assert!(compensated_family(1.0, 0.3, 1.6).is_err());
        assert!(compensated_family(-1.0, 0.3, 1.2).is_err());
    }

    #[test]
    fn compensated_family_prediction_solves_the_riccati_equation() {
        let fam = compensated_family(1.0, 0.3, 1.2).unwrap();
        let g = group();
        let dt = 0.002;
        let flow = Flow::new(&fam.spec, &g, dt).unwrap();
        let s0 = UnitTangentState::new(C::new(0.17, -0.08), 0.9);
        let samples = flow.orbit(s0, 8.0, 1).unwrap();
        let r: Vec<f64> = samples.iter().map(|o| fam.predicted_smooth_slope(o.state)).collect();
        let v_lambda: Vec<f64> = samples.iter().map(|o| o.v_lambda).collect();
        let kappa0: Vec<f64> = samples.iter().map(|o| o.kappa0).collect();
        let res = riccati_residual_series(&r, &v_lambda, &kappa0, dt);
        assert!(res < 1e-5, "riccati residual of the predicted slope: {res}");
        // the unstable sweep relaxes onto the prediction pointwise; the
        // stable sweep does not (the two fields differ by about 2c)
        for s in probe_states(6) {
            let sl = slope_at(&fam.spec, &g, s, &SlopeParams::precise()).unwrap();
            let pred = fam.predicted_smooth_slope(s);
            assert!((sl.r_minus - pred).abs() < 1e-4, "{} vs {}", sl.r_minus, pred);
            assert!((sl.r_plus - pred).abs() > 0.5, "stable side should differ");
        }
    }

    #[test]
    fn constant_time_change_rescales_the_data_and_retraces_orbits() {
        let g = group();
        let spec = ThermostatSpec::constant_magnetic(1.0, 0.5);
        let kappa = 0.3_f64;
        let scale = kappa.exp();
        let changed = apply_time_change(&spec, &ScalarField::constant(kappa)).unwrap();
        assert!((changed.metric.c - scale).abs() < 1e-15);
        assert!(matches!(changed.f.kind, ScalarKind::Constant(v) if (v - 0.5 * scale).abs() < 1e-15));
        assert!(changed.e.is_zero() && changed.q.is_zero());
        // same curve, traversed e^{kappa} times faster; the path side of each
        // comparison gets extra duration so endpoint truncation cannot leave
        // the probe's last sample unmatched
        let s0 = UnitTangentState::new(C::new(0.21, 0.1), 0.4);
        let t = 8.0;
        let a = orbit_trace(&spec, &g, s0, t, 0.002).unwrap();
        let b_long = orbit_trace(&changed, &g, s0, t * (-kappa).exp() + 0.3, 0.002).unwrap();
        let b = orbit_trace(&changed, &g, s0, t * (-kappa).exp(), 0.002).unwrap();
        let a_long = orbit_trace(&spec, &g, s0, t + 0.3, 0.002).unwrap();
        let d_ab = trace_distance(&a, &b_long, 0.05);
        let d_ba = trace_distance(&b, &a_long, 0.05);
        assert!(d_ab < 1e-6 && d_ba < 1e-6, "trace gaps {d_ab} / {d_ba}");
        // U = 0 is the identity transform
        let same = apply_time_change(&spec, &ScalarField::zero()).unwrap();
        assert!(matches!(same.f.kind, ScalarKind::Constant(v) if v == 0.5));
        assert_eq!(same.metric.c, 1.0);
        // kappa then -kappa returns the original data
        let back = apply_time_change(&changed, &ScalarField::constant(-kappa)).unwrap();
        assert!((back.metric.c - 1.0).abs() < 1e-14);
        assert!(matches!(back.f.kind, ScalarKind::Constant(v) if (v - 0.5).abs() < 1e-14));
        // a radial f rescales through its amplitude (the compensated family
        // carries one), and q coefficients absorb e^{-kappa}
        let fam = compensated_family(1.0, 0.3, 1.2).unwrap();
        let changed = apply_time_change(&fam.spec, &ScalarField::constant(kappa)).unwrap();
        match &changed.f.kind {
            ScalarKind::Radial(r) => assert!((r.amplitude - 0.3 * scale).abs() < 1e-15),
            other => panic!("expected a radial profile, got {other:?}"),
        }
        let a = orbit_trace(&fam.spec, &g, s0, t, 0.002).unwrap();
        let b_long = orbit_trace(&changed, &g, s0, t * (-kappa).exp() + 0.3, 0.002).unwrap();
        let b = orbit_trace(&changed, &g, s0, t * (-kappa).exp(), 0.002).unwrap();
        let a_long = orbit_trace(&fam.spec, &g, s0, t + 0.3, 0.002).unwrap();
        assert!(trace_distance(&a, &b_long, 0.05) < 1e-6);
        assert!(trace_distance(&b, &a_long, 0.05) < 1e-6);
        let with_q = ThermostatSpec::new(
            Metric::hyperbolic(1.0),
            ScalarField::constant(0.2),
            VectorField::zero(),
            QuadDiff::polynomial(vec![C::new(0.3, 0.1)]),
        );
        let changed = apply_time_change(&with_q, &ScalarField::constant(kappa)).unwrap();
        assert!((changed.q.coeffs[0] - C::new(0.3, 0.1) / scale).norm() < 1e-15);
        // a profile whose amplitude cannot absorb the factor is rejected
        let odd_f = ThermostatSpec::new(
            Metric::hyperbolic(1.0),
            fam.h.clone(),
            VectorField::zero(),
            QuadDiff::zero(),
        );
        assert!(apply_time_change(&odd_f, &ScalarField::constant(kappa)).is_err());
    }

    #[test]
    fn gradient_time_change_absorbs_into_the_metric_and_back() {
        let g = group();
        let origin = C::new(0.0, 0.0);
        let pot = ScalarField::bump(origin, 1.1, 0.25);
        let spec = ThermostatSpec::new(
            Metric::hyperbolic(1.0),
            ScalarField::zero(),
            VectorField::gradient(pot.clone()),
            QuadDiff::zero(),
        );
        let u = ScalarField::bump(origin, 1.1, -0.25);
        let absorbed = apply_time_change(&spec, &u).unwrap();
        assert!(absorbed.e.is_zero() && absorbed.f.is_zero() && absorbed.q.is_zero());
        let v = absorbed.metric.conformal.as_ref().expect("conformal exponent");
        assert!(matches!(&v.kind, ScalarKind::Radial(r) if r.amplitude == 0.25));
        // unparametrized orbits coincide: the absorbed flow is the geodesic
        // flow of e^{2 pot} g, run long enough to cover the original trace
        let s0 = UnitTangentState::new(C::new(0.12, -0.19), 2.1);
        let a = orbit_trace(&spec, &g, s0, 6.0, 0.002).unwrap();
        let b = orbit_trace(&absorbed, &g, s0, 6.0 * 0.25f64.exp() + 0.5, 0.002).unwrap();
        assert!(trace_distance(&a, &b, 0.05) < 1e-6);
        // emission inverts absorption exactly
        let emitted = apply_time_change(&absorbed, &pot).unwrap();
        assert!(emitted.metric.is_background() && emitted.metric.c == 1.0);
        match &emitted.e.kind {
            VectorKind::Gradient(p) => match &p.kind {
                ScalarKind::Radial(r) => {
                    assert_eq!(r.amplitude, 0.25);
                    assert_eq!(r.radius, 1.1);
                }
                other => panic!("expected a radial potential, got {other:?}"),
            },
            other => panic!("expected a gradient field, got {other:?}"),
        }
        // mismatched data is rejected
        assert!(apply_time_change(&spec, &ScalarField::bump(origin, 1.1, 0.3)).is_err());
        assert!(apply_time_change(&spec, &ScalarField::bump(origin, 0.9, -0.25)).is_err());
        let with_q = ThermostatSpec::new(
            Metric::hyperbolic(1.0),
            ScalarField::zero(),
            VectorField::gradient(pot),
            QuadDiff::polynomial(vec![C::new(0.1, 0.0)]),
        );
        assert!(apply_time_change(&with_q, &u).is_err());
    }

    #[test]
    fn automorphic_average_tightens_with_word_length() {
        let g = group();
        let seed = QuadDiff::polynomial(vec![C::new(1.0, 0.0)]);
        let p0 = poincare_qd(&g, &seed, 0).unwrap();
        assert_eq!(p0.n_elements, 1);
        assert_eq!(p0.qd.coeffs.len(), 1);
        assert!((p0.qd.coeffs[0] - C::new(1.0, 0.0)).norm() < 1e-15);
        assert!(p0.defect > 0.5, "identity-only truncation must be visibly non-equivariant");
        let p2 = poincare_qd(&g, &seed, 2).unwrap();
        let p4 = poincare_qd(&g, &seed, 4).unwrap();
        assert_eq!(p2.n_elements, 65);
        assert_eq!(p4.n_elements, 3193);
        assert!(p2.defect < p0.defect, "{} !< {}", p2.defect, p0.defect);
        assert!(p4.defect < p2.defect, "{} !< {}", p4.defect, p2.defect);
        // polynomial compression agrees with the raw rational sums away from
        // the origin
        let elements = g.enumerate(4, Some(17.5));
        for &z in &[C::new(0.31, 0.4), C::new(-0.52, 0.11), C::new(0.05, -0.58)] {
            let direct: C = elements
                .iter()
                .map(|el| {
                    let d = el.map.derivative(z);
                    seed.w(el.map.apply(z)) * d * d
                })
                .sum();
            assert!(
                (p4.qd.w(z) - direct).norm() < 1e-10 * p4.scale.max(1.0),
                "compression mismatch at {z}: {} vs {}",
                p4.qd.w(z),
                direct
            );
        }
        // input validation
        let odd = QuadDiff::polynomial(vec![C::new(0.0, 0.0), C::new(1.0, 0.0)]);
        assert!(poincare_qd(&g, &odd, 2).is_err());
        assert!(poincare_qd(&g, &QuadDiff::zero(), 2).is_err());
        assert!(poincare_qd(&g, &seed, 13).is_err());
    }

    #[test]
    fn automorphic_average_word_length_eight_tightens_further() {
        let g = group();
        let seed = QuadDiff::polynomial(vec![C::new(1.0, 0.0)]);
        let p4 = poincare_qd(&g, &seed, 4).unwrap();
        let p8 = poincare_qd(&g, &seed, 8).unwrap();
        assert!(
            p8.defect < p4.defect,
            "longer words must tighten equivariance: {} !< {}",
            p8.defect,
            p4.defect
        );
    }

    #[test]
    fn automorphic_average_is_holomorphic_to_truncation() {
        let g = group();
        let seed = QuadDiff::polynomial(vec![C::new(0.4, 0.0), C::new(0.0, 0.0), C::new(0.0, 0.3)]);
        let series = poincare_qd(&g, &seed, 3).unwrap();
        let spec = ThermostatSpec::geodesic(1.0);
        let w = series.qd.clone();
        let mode2 = |st: UnitTangentState| -> C {
            let sigma = 2.0 / (1.0 - st.z.norm_sqr());
            w.w(st.z) * C::from_polar(1.0, 2.0 * st.phi) / (sigma * sigma)
        };
        let mut worst = 0.0f64;
        for s in probe_states(20) {
            let (_, eta_minus) = gk_apply(&spec, s, mode2);
            worst = worst.max(eta_minus.norm());
        }
        assert!(worst < 1e-6, "eta_minus residual of a holomorphic average: {worst}");
        // teeth: conjugating the coefficient function breaks holomorphy and
        // the same residual becomes visible
        let broken = |st: UnitTangentState| -> C {
            let sigma = 2.0 / (1.0 - st.z.norm_sqr());
            w.w(st.z).conj() * C::from_polar(1.0, 2.0 * st.phi) / (sigma * sigma)
        };
        let mut broken_worst = 0.0f64;
        for s in probe_states(20) {
            let (_, eta_minus) = gk_apply(&spec, s, broken);
            broken_worst = broken_worst.max(eta_minus.norm());
        }
        assert!(broken_worst > 1e-3, "anti-holomorphic data must be detected: {broken_worst}");
    }

    #[test]
    fn conformal_family_reduces_to_geodesic_flows_without_q() {
        let g = group();
        let fam = conformal_family(&QuadDiff::zero(), 1.0, 12).unwrap();
        let exponent = fam.spec.metric.conformal.as_ref().expect("conformal exponent");
        for s in probe_states(10) {
            assert!(exponent.value(s.z).abs() < 1e-10, "h = 1 must give u = 0");
        }
        let s0 = UnitTangentState::new(C::new(0.2, 0.05), 1.2);
        let a = orbit_trace(&fam.spec, &g, s0, 6.0, 0.002).unwrap();
        let b = orbit_trace(&ThermostatSpec::geodesic(1.0), &g, s0, 6.0, 0.002).unwrap();
        assert!(trace_distance(&a, &b, 0.05) < 1e-6);
        // h = 0.8: the exponent is the constant ln(1/0.8) and the flow is the
        // geodesic flow of curvature -0.64, slopes +-0.8
        let fam8 = conformal_family(&QuadDiff::zero(), 0.8, 12).unwrap();
        let exponent = fam8.spec.metric.conformal.as_ref().expect("conformal exponent");
        for s in probe_states(10) {
            assert!(
                (exponent.value(s.z) - 0.22314355131420976).abs() < 1e-8,
                "constant-exponent solve: {}",
                exponent.value(s.z)
            );
        }
        let sl = slope_at(&fam8.spec, &g, probe_states(1)[0], &SlopeParams::precise()).unwrap();
        assert!((sl.r_minus - 0.8).abs() < 1e-6, "unstable {}", sl.r_minus);
        assert!((sl.r_plus + 0.8).abs() < 1e-6, "stable {}", sl.r_plus);
        assert!(fam8.curvature_residual(C::new(0.3, -0.2)).abs() < 1e-9);
        assert!(conformal_family(&QuadDiff::zero(), 0.0, 8).is_err());
    }

    #[test]
    fn conformal_family_with_a_small_quadratic_differential() {
        let g = group();
        let seed = QuadDiff::polynomial(vec![C::new(0.05, 0.0)]);
        let series = poincare_qd(&g, &seed, 4).unwrap();
        let fam = conformal_family(&series.qd, 1.0, 20).unwrap();
        // the prescribed-curvature identity holds at the mesh dofs through
        // the full metric plumbing (independent of the solver internals)
        let mut worst = 0.0f64;
        for d in (0..fam.mesh.n_dofs()).step_by(7) {
            worst = worst.max(fam.curvature_residual(fam.mesh.dof_position(d)).abs());
        }
        assert!(worst < 1e-4, "curvature residual at dofs: {worst}");
        // fiber structure: V(r - V(q)/2) vanishes, i.e. the computed slopes
        // are +-h + V(q)/2 with fiber-constant +-h
        let z = C::new(0.24, 0.13);
        let profile = slope_fiber_profile(&fam.spec, &g, z, 64, &SlopeParams::precise()).unwrap();
        let mut fiber_res = 0.0f64;
        let mut v_scale = 0.0f64;
        for (j, &phi) in profile.angles.iter().enumerate() {
            let st = UnitTangentState::new(z, phi);
            let v_correction = -2.0 * fam.spec.q_form(st); // V(V(q))/2 = -2 q(v,v)
            fiber_res = fiber_res.max((profile.v_r_plus[j] - v_correction).abs());
            fiber_res = fiber_res.max((profile.v_r_minus[j] - v_correction).abs());
            v_scale = v_scale.max(profile.v_r_plus[j].abs());
        }
        assert!(fiber_res < 1e-3, "fiber residual {fiber_res}");
        assert!(v_scale > 5.0 * fiber_res, "test must have teeth: scale {v_scale} vs {fiber_res}");
    }

    #[test]
    fn conformal_family_with_q_produces_entropy() {
        let g = group();
        let seed = QuadDiff::polynomial(vec![C::new(0.4, 0.0)]);
        let series = poincare_qd(&g, &seed, 4).unwrap();
        let fam = conformal_family(&series.qd, 1.0, 16).unwrap();
        let s0 = UnitTangentState::new(C::new(0.11, 0.07), 0.6);
        let ent = entropy_production(&fam.spec, &g, s0, 8000.0, 0.01).unwrap();
        assert!(
            ent.value > 5.0 * ent.stderr,
            "dissipation must be resolved: {} +- {}",
            ent.value,
            ent.stderr
        );
    }

    #[test]
    fn trace_distance_measures_one_sided_polyline_gaps() {
        let line: Vec<C> = (0..100).map(|i| C::new(i as f64 * 0.01, 0.0)).collect();
        assert_eq!(trace_distance(&line, &line, 0.05), 0.0);
        let shifted: Vec<C> = line.iter().map(|z| z + C::new(0.0, 3e-4)).collect();
        let d = trace_distance(&shifted, &line, 0.05);
        assert!((d - 3e-4).abs() < 1e-12);
        // a jump in the path is not interpolated across
        let mut jumped = line.clone();
        for z in jumped.iter_mut().skip(50) {
            *z += C::new(0.0, 0.7);
        }
        let probe = [C::new(0.495, 0.35)];
        let d = trace_distance(&probe, &jumped, 0.05);
        assert!(d > 0.3, "midpoint of a seam jump must not look covered: {d}");
        // probe points adjacent to their own jump are ignored
        let d = trace_distance(&jumped, &jumped, 0.05);
        assert_eq!(d, 0.0);
    }
}
