//! Orbit integration of thermostat flows on the quotient surface.
//!
//! States live in the fundamental octagon; after every Runge-Kutta step the
//! base point is reduced back into the domain by a deck transformation, so
//! long orbits never lose precision near the disk boundary.  Alongside the
//! base flow the integrator can carry the transverse linear cocycle
//!
//!   xdot = y,   ydot = V(lambda) y - kappa0 x,
//!
//! whose fundamental matrix drives slope fields, Lyapunov exponents and the
//! hyperbolicity certificate.  Matrices are renormalized every step and the
//! discarded scale is accumulated logarithmically.

use crate::fields::{FlowEval, ThermostatSpec};
use crate::geom::{FuchsianGroup, UnitTangentState};
use crate::util::pairwise_sum;
use crate::{Error, Result};

/// One recorded point of an orbit.
#[derive(Debug, Clone, Copy)]
pub struct OrbitSample {
    pub t: f64,
    pub state: UnitTangentState,
    pub lambda: f64,
    pub v_lambda: f64,
    pub kappa0: f64,
}

/// Transverse cocycle state: base state, 2x2 fundamental matrix (row-major
/// [m11, m12, m21, m22]) and the accumulated log of renormalization factors.
#[derive(Debug, Clone, Copy)]
pub struct CocycleState {
    pub state: UnitTangentState,
    pub m: [f64; 4],
    pub log_scale: f64,
}

impl CocycleState {
    pub fn identity(state: UnitTangentState) -> Self {
        Self { state, m: [1.0, 0.0, 0.0, 1.0], log_scale: 0.0 }
    }

    /// det of the full (unrenormalized) matrix is det(m) * exp(2 log_scale).
    pub fn log_abs_det(&self) -> f64 {
        let d = self.m[0] * self.m[3] - self.m[1] * self.m[2];
        d.abs().ln() + 2.0 * self.log_scale
    }
}

/// Lyapunov spectrum of the transverse cocycle along one orbit.
#[derive(Debug, Clone, Copy)]
pub struct LyapunovReport {
    /// Exponents sorted descending (the flow direction contributes a third,
    /// trivially zero, exponent not listed here).
    pub chi: [f64; 2],
    /// Largest wobble of the running estimates over the trailing 10% of the
    /// integration time.
    pub drift: f64,
    pub converged: bool,
}

/// Fixed-step integrator for a thermostat spec on the quotient by a Fuchsian
/// group.
pub struct Flow<'a> {
    pub spec: &'a ThermostatSpec,
    pub group: &'a FuchsianGroup,
    pub dt: f64,
}

const MAX_DT: f64 = 1e-2 * (1.0 + 1e-9);

impl<'a> Flow<'a> {
    pub fn new(spec: &'a ThermostatSpec, group: &'a FuchsianGroup, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || dt > MAX_DT {
            return Err(Error::InvalidParameter(format!(
                "flow step dt = {dt} outside (0, 1e-2]"
            )));
        }
        Ok(Self { spec, group, dt })
    }

    /// One Runge-Kutta step of the base flow (no reduction).
    fn rk4_flow(&self, s: UnitTangentState, h: f64) -> UnitTangentState {
        let spec = self.spec;
        let k1 = spec.flow_eval(s);
        let s2 = advance(s, &k1, h / 2.0);
        let k2 = spec.flow_eval(s2);
        let s3 = advance(s, &k2, h / 2.0);
        let k3 = spec.flow_eval(s3);
        let s4 = advance(s, &k3, h);
        let k4 = spec.flow_eval(s4);
        UnitTangentState::new(
            s.z + (k1.zdot + (k2.zdot + k3.zdot) * 2.0 + k4.zdot) * (h / 6.0),
            s.phi + (k1.phidot + 2.0 * (k2.phidot + k3.phidot) + k4.phidot) * (h / 6.0),
        )
    }

    /// One step with reduction back into the fundamental domain.
    pub fn step(&self, s: UnitTangentState) -> Result<UnitTangentState> {
        let next = self.rk4_flow(s, self.dt);
        let (reduced, _) = self.group.reduce_state(next)?;
        Ok(reduced)
    }

    /// Stream the orbit through a visitor: f(t, state, flow data at state).
    /// Returns the final state.
    pub fn visit<F>(&self, start: UnitTangentState, t_end: f64, mut f: F) -> Result<UnitTangentState>
    where
        F: FnMut(f64, UnitTangentState, &FlowEval),
    {
        let n = steps_for(t_end, self.dt)?;
        let mut s = start;
        for k in 0..n {
            let ev = self.spec.flow_eval(s);
            f(k as f64 * self.dt, s, &ev);
            s = self.rk4_flow(s, self.dt);
            let (r, _) = self.group.reduce_state(s)?;
            s = r;
        }
        let ev = self.spec.flow_eval(s);
        f(n as f64 * self.dt, s, &ev);
        Ok(s)
    }

    /// Sampled orbit: one record every `stride` steps (stride >= 1), always
    /// including t = 0 and the final time.
    pub fn orbit(
        &self,
        start: UnitTangentState,
        t_end: f64,
        stride: usize,
    ) -> Result<Vec<OrbitSample>> {
        let n = steps_for(t_end, self.dt)?;
        let stride = stride.max(1);
        let mut out = Vec::with_capacity(n / stride + 2);
        let mut s = start;
        for k in 0..=n {
            if k % stride == 0 || k == n {
                let cache = self.spec.base_cache(s.z);
                let ev = self.spec.cocycle_eval_cached(&cache, s.phi);
                out.push(OrbitSample {
                    t: k as f64 * self.dt,
                    state: s,
                    lambda: ev.flow.lambda,
                    v_lambda: ev.flow.v_lambda,
                    kappa0: ev.kappa0,
                });
            }
            if k < n {
                s = self.rk4_flow(s, self.dt);
                let (r, _) = self.group.reduce_state(s)?;
                s = r;
            }
        }
        Ok(out)
    }

    /// One coupled step of base flow + transverse cocycle, with per-step
    /// renormalization.  `h` may be negative (time-reversed sweep).
    pub fn step_cocycle(&self, cs: CocycleState, h: f64) -> Result<CocycleState> {
        let spec = self.spec;
        let eval = |s: UnitTangentState, m: &[f64; 4]| -> (FlowEval, [f64; 4], f64, f64) {
            let cache = spec.base_cache(s.z);
            let ev = spec.cocycle_eval_cached(&cache, s.phi);
            let md = [
                m[2],
                m[3],
                ev.flow.v_lambda * m[2] - ev.kappa0 * m[0],
                ev.flow.v_lambda * m[3] - ev.kappa0 * m[1],
            ];
            (ev.flow, md, ev.kappa0, ev.flow.v_lambda)
        };
        let s0 = cs.state;
        let m0 = cs.m;
        let (f1, d1, _, _) = eval(s0, &m0);
        let (s2, m2) = advance_full(s0, &m0, &f1, &d1, h / 2.0);
        let (f2, d2, _, _) = eval(s2, &m2);
        let (s3, m3) = advance_full(s0, &m0, &f2, &d2, h / 2.0);
        let (f3, d3, _, _) = eval(s3, &m3);
        let (s4, m4) = advance_full(s0, &m0, &f3, &d3, h);
        let (f4, d4, _, _) = eval(s4, &m4);

        let znew = s0.z + (f1.zdot + (f2.zdot + f3.zdot) * 2.0 + f4.zdot) * (h / 6.0);
        let pnew = s0.phi + (f1.phidot + 2.0 * (f2.phidot + f3.phidot) + f4.phidot) * (h / 6.0);
        let mut mnew = [0.0; 4];
        for i in 0..4 {
            mnew[i] = m0[i] + (d1[i] + 2.0 * (d2[i] + d3[i]) + d4[i]) * (h / 6.0);
        }
        let (reduced, _) = self.group.reduce_state(UnitTangentState::new(znew, pnew))?;

        // renormalize by the largest entry to keep the matrix O(1)
        let scale = mnew.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
        let mut log_scale = cs.log_scale;
        if scale > 0.0 && (scale > 1e3 || scale < 1e-3) {
            for v in &mut mnew {
                *v /= scale;
            }
            log_scale += scale.ln();
        }
        Ok(CocycleState { state: reduced, m: mnew, log_scale })
    }

    /// Fundamental matrix of the transverse cocycle over signed time `t`
    /// (renormalized; the true matrix is m * exp(log_scale)).
    pub fn propagate_matrix(&self, start: UnitTangentState, t: f64) -> Result<CocycleState> {
        let n = steps_for(t.abs(), self.dt)?;
        let h = if t < 0.0 { -self.dt } else { self.dt };
        let mut cs = CocycleState::identity(start);
        for _ in 0..n {
            cs = self.step_cocycle(cs, h)?;
        }
        Ok(cs)
    }

    /// Lyapunov exponents of the transverse cocycle by QR re-orthonormalization.
    pub fn lyapunov(&self, start: UnitTangentState, t_end: f64) -> Result<LyapunovReport> {
        let n = steps_for(t_end, self.dt)?;
        let mut cs = CocycleState::identity(start);
        let mut sum1 = 0.0_f64;
        let mut sum2 = 0.0_f64;
        let checkpoints = 100.min(n.max(1));
        let mut history: Vec<[f64; 2]> = Vec::with_capacity(checkpoints + 1);
        for k in 1..=n {
            cs = self.step_cocycle(cs, self.dt)?;
            // QR on columns: c1 = (m11, m21), c2 = (m12, m22)
            let c1 = [cs.m[0], cs.m[2]];
            let c2 = [cs.m[1], cs.m[3]];
            let r11 = (c1[0] * c1[0] + c1[1] * c1[1]).sqrt();
            let q1 = [c1[0] / r11, c1[1] / r11];
            let r12 = q1[0] * c2[0] + q1[1] * c2[1];
            let o2 = [c2[0] - r12 * q1[0], c2[1] - r12 * q1[1]];
            let r22 = (o2[0] * o2[0] + o2[1] * o2[1]).sqrt();
            sum1 += (r11 * cs.log_scale.exp()).ln();
            sum2 += r22.ln() + cs.log_scale;
            cs.m = [q1[0], o2[0] / r22, q1[1], o2[1] / r22];
            cs.log_scale = 0.0;
            if k % (n / checkpoints).max(1) == 0 || k == n {
                let t = k as f64 * self.dt;
                history.push([sum1 / t, sum2 / t]);
            }
        }
        let t_total = n as f64 * self.dt;
        let chi = [sum1 / t_total, sum2 / t_total];
        let tail = history.len().saturating_sub(history.len() / 10 + 1);
        let drift = history[tail..]
            .iter()
            .map(|h| (h[0] - chi[0]).abs().max((h[1] - chi[1]).abs()))
            .fold(0.0_f64, f64::max);
        Ok(LyapunovReport { chi, drift, converged: drift <= 1e-2 })
    }

    /// Time average of g(t, state, flow data) over one orbit, discarding the
    /// first 5% as burn-in.  Returns (mean, batch-means standard error).
    pub fn ergodic_average<G>(
        &self,
        start: UnitTangentState,
        t_end: f64,
        mut g: G,
    ) -> Result<(f64, f64)>
    where
        G: FnMut(f64, UnitTangentState, &FlowEval) -> f64,
    {
        let n = steps_for(t_end, self.dt)?;
        let burn = n / 20;
        let kept = n - burn;
        let n_batches = 20usize.min(kept.max(1));
        let batch_len = (kept / n_batches).max(1);
        let mut batches: Vec<Vec<f64>> = vec![Vec::with_capacity(batch_len); n_batches];
        let mut s = start;
        for k in 0..n {
            let ev = self.spec.flow_eval(s);
            if k >= burn {
                let idx = (((k - burn) / batch_len) as usize).min(n_batches - 1);
                batches[idx].push(g(k as f64 * self.dt, s, &ev));
            }
            s = self.rk4_flow(s, self.dt);
            let (r, _) = self.group.reduce_state(s)?;
            s = r;
        }
        let means: Vec<f64> = batches
            .iter()
            .filter(|b| !b.is_empty())
            .map(|b| pairwise_sum(b) / b.len() as f64)
            .collect();
        let mean = pairwise_sum(&means) / means.len() as f64;
        let var = means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>()
            / (means.len().saturating_sub(1).max(1)) as f64;
        Ok((mean, (var / means.len() as f64).sqrt()))
    }
}

fn advance(s: UnitTangentState, ev: &FlowEval, h: f64) -> UnitTangentState {
    UnitTangentState::new(s.z + ev.zdot * h, s.phi + ev.phidot * h)
}

fn advance_full(
    s: UnitTangentState,
    m: &[f64; 4],
    ev: &FlowEval,
    md: &[f64; 4],
    h: f64,
) -> (UnitTangentState, [f64; 4]) {
    let mut mn = [0.0; 4];
    for i in 0..4 {
        mn[i] = m[i] + md[i] * h;
    }
    (advance(s, ev, h), mn)
}

fn steps_for(t_end: f64, dt: f64) -> Result<usize> {
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidParameter(format!("bad integration time {t_end}")));
    }
    Ok((t_end / dt).round().max(0.0) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{Metric, QuadDiff, ScalarField, ThermostatSpec, VectorField};
    use crate::geom::{self, C};
    use once_cell::sync::Lazy;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    static GROUP: Lazy<FuchsianGroup> = Lazy::new(FuchsianGroup::genus2_octagon);

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn geodesic_orbit_matches_closed_form() {
        let spec = ThermostatSpec::geodesic(1.0);
        let flow = Flow::new(&spec, &GROUP, 0.005).unwrap();
        let mut rng = rng();
        for _ in 0..5 {
            let s = UnitTangentState::new(
                C::from_polar(0.4 * rng.gen::<f64>(), 2.0 * PI * rng.gen::<f64>()),
                2.0 * PI * rng.gen::<f64>(),
            );
            let t = 1.7;
            let exact = geom::exact_geodesic_step(s, t, 1.0);
            let (exact_red, _) = GROUP.reduce_state(exact).unwrap();
            let mut cur = s;
            for _ in 0..((t / 0.005).round() as usize) {
                cur = flow.step(cur).unwrap();
            }
            assert!((cur.z - exact_red.z).norm() < 1e-8, "{}", (cur.z - exact_red.z).norm());
            let dphi = (cur.phi - exact_red.phi).rem_euclid(2.0 * PI);
            let dphi = dphi.min(2.0 * PI - dphi);
            assert!(dphi < 1e-8);
        }
    }

    #[test]
    fn magnetic_orbit_has_constant_geodesic_curvature() {
        // circumcircle oracle: three consecutive orbit points, middle one
        // mapped to the origin, have Euclidean circumcircle curvature k_e
        // with geodesic curvature (c/2) k_e = f0
        for (c, f0) in [(1.0, 0.5), (2.0, 1.0)] {
            let spec = ThermostatSpec::constant_magnetic(c, f0);
            let flow = Flow::new(&spec, &GROUP, 0.002).unwrap();
            let mut pts = Vec::new();
            let mut s = UnitTangentState::new(C::new(0.1, -0.2), 0.7);
            for _ in 0..3 {
                pts.push(s);
                s = flow.step(s).unwrap();
            }
            let mid = pts[1];
            let m = geom::MobiusTransform::to_origin(mid.z);
            let p0 = m.apply(pts[0].z);
            let p2 = m.apply(pts[2].z);
            // circle through origin, p0, p2: center c with 2<c,p> = |p|^2
            let det = 4.0 * (p0.re * p2.im - p0.im * p2.re);
            let cx = 2.0 * (p0.norm_sqr() * p2.im - p2.norm_sqr() * p0.im) / det;
            let cy = 2.0 * (p0.re * p2.norm_sqr() - p2.re * p0.norm_sqr()) / det;
            let k_e = 1.0 / (cx * cx + cy * cy).sqrt();
            let orient = (-p0.re) * p2.im - (-p0.im) * p2.re;
            let k_g = 0.5 * c * k_e * orient.signum();
            assert!((k_g - f0).abs() < 1e-4, "k_g = {k_g}, f0 = {f0}");
        }
    }

    #[test]
    fn gaussian_thermostat_is_reversible_under_flip() {
        // with q = 0 the flip v -> -v conjugates the flow to its inverse
        let spec = ThermostatSpec::new(
            Metric::hyperbolic(1.0),
            ScalarField::zero(),
            VectorField::skew_gradient(ScalarField::bump(C::new(0.1, 0.0), 1.2, 0.3)),
            QuadDiff::zero(),
        );
        let flow = Flow::new(&spec, &GROUP, 0.005).unwrap();
        let start = UnitTangentState::new(C::new(0.15, -0.1), 1.1);
        let n = 400;
        let mut s = start;
        for _ in 0..n {
            s = flow.step(s).unwrap();
        }
        let mut back = s.flipped();
        for _ in 0..n {
            back = flow.step(back).unwrap();
        }
        let final_state = back.flipped();
        assert!((final_state.z - start.z).norm() < 1e-7);
        let dphi = (final_state.phi - start.phi).rem_euclid(2.0 * PI);
        assert!(dphi.min(2.0 * PI - dphi) < 1e-7);
    }

    #[test]
    fn geodesic_cocycle_matrix_is_hyperbolic_rotationless() {
        // kappa0 = -1, V(lambda) = 0: xddot = x, so Phi(1) has trace 2 cosh 1
        // and determinant 1
        let spec = ThermostatSpec::geodesic(1.0);
        let flow = Flow::new(&spec, &GROUP, 0.0025).unwrap();
        let cs = flow
            .propagate_matrix(UnitTangentState::new(C::new(0.2, 0.1), 0.4), 1.0)
            .unwrap();
        let scale = cs.log_scale.exp();
        let tr = (cs.m[0] + cs.m[3]) * scale;
        let det = (cs.m[0] * cs.m[3] - cs.m[1] * cs.m[2]) * scale * scale;
        assert!((tr - 2.0 * 1.0_f64.cosh()).abs() < 1e-6, "trace {tr}");
        assert!((det - 1.0).abs() < 1e-6, "det {det}");
    }

    #[test]
    fn wronskian_tracks_integrated_fiber_derivative() {
        // det Phi(T) = exp(int_0^T V(lambda) dt).  The generating fields must
        // be genuinely deck-invariant (compactly supported bumps) or the
        // integrand jumps at reductions and the quadrature degrades.
        let spec = ThermostatSpec::new(
            Metric::hyperbolic(1.0),
            ScalarField::bump(C::new(-0.1, 0.05), 1.1, 0.4),
            VectorField::skew_gradient(ScalarField::bump(C::new(0.05, 0.1), 1.2, 0.35)),
            QuadDiff::zero(),
        );
        let start = UnitTangentState::new(C::new(0.05, 0.12), 2.1);
        let t_end = 6.0;
        let defect = |dt: f64| -> f64 {
            let flow = Flow::new(&spec, &GROUP, dt).unwrap();
            let cs = flow.propagate_matrix(start, t_end).unwrap();
            // Simpson integral of V(lambda) along the same discrete orbit
            let samples = flow.orbit(start, t_end, 1).unwrap();
            let n = samples.len() - 1;
            let mut int = samples[0].v_lambda + samples[n].v_lambda;
            for (k, s) in samples.iter().enumerate().take(n).skip(1) {
                int += if k % 2 == 1 { 4.0 } else { 2.0 } * s.v_lambda;
            }
            int *= dt / 3.0;
            (cs.log_abs_det() - int).abs() / int.abs().max(1.0)
        };
        let d = defect(0.005);
        assert!(d < 1e-9, "relative defect {d}");
    }

    #[test]
    fn step_halving_shows_fourth_order_convergence() {
        let spec = ThermostatSpec::new(
            Metric::hyperbolic(1.0),
            ScalarField::bump(C::new(0.0, 0.0), 1.2, 0.5),
            VectorField::zero(),
            QuadDiff::zero(),
        );
        let start = UnitTangentState::new(C::new(0.21, -0.07), 0.9);
        let t = 1.0;
        let endpoint = |dt: f64| -> C {
            let flow = Flow::new(&spec, &GROUP, dt).unwrap();
            let mut s = start;
            for _ in 0..((t / dt).round() as usize) {
                s = flow.step(s).unwrap();
            }
            s.z
        };
        let z1 = endpoint(0.01);
        let z2 = endpoint(0.005);
        let z3 = endpoint(0.0025);
        let e1 = (z1 - z3).norm();
        let e2 = (z2 - z3).norm();
        // (e1 - e2)/e2 ~ 16 - 1 = 15 for a 4th-order scheme
        let ratio = e1 / e2;
        assert!(ratio > 10.0 && ratio < 24.0, "ratio {ratio}");
    }

    #[test]
    fn lyapunov_exponents_of_constant_curvature_flows() {
        let cases = [
            (ThermostatSpec::geodesic(1.0), 1.0),
            (ThermostatSpec::constant_magnetic(1.0, 0.5), 0.75_f64.sqrt()),
        ];
        for (spec, expected) in cases {
            let flow = Flow::new(&spec, &GROUP, 0.01).unwrap();
            let rep = flow
                .lyapunov(UnitTangentState::new(C::new(0.11, 0.23), 0.3), 2000.0)
                .unwrap();
            assert!(rep.converged, "drift {}", rep.drift);
            assert!((rep.chi[0] - expected).abs() < 1e-2, "{} vs {expected}", rep.chi[0]);
            assert!((rep.chi[1] + expected).abs() < 1e-2, "{} vs {expected}", rep.chi[1]);
        }
    }

    #[test]
    fn lyapunov_sum_matches_average_fiber_derivative() {
        // chi_+ + chi_- = time average of V(lambda) (trace of the cocycle)
        let spec = ThermostatSpec::new(
            Metric::hyperbolic(1.0),
            ScalarField::zero(),
            VectorField::skew_gradient(ScalarField::bump(C::new(0.1, -0.05), 1.2, 0.3)),
            QuadDiff::zero(),
        );
        let flow = Flow::new(&spec, &GROUP, 0.01).unwrap();
        let start = UnitTangentState::new(C::new(0.07, 0.19), 1.7);
        let t = 800.0;
        let rep = flow.lyapunov(start, t).unwrap();
        // same orbit, no burn-in mismatch concern: average over full window
        let mut acc = 0.0;
        let mut count = 0usize;
        flow.visit(start, t, |_, _, ev| {
            acc += ev.v_lambda;
            count += 1;
        })
        .unwrap();
        let avg = acc / count as f64;
        assert!(
            (rep.chi[0] + rep.chi[1] - avg).abs() < 2e-3,
            "{} vs {}",
            rep.chi[0] + rep.chi[1],
            avg
        );
    }

    #[test]
    fn ergodic_average_of_fiber_harmonics_vanishes() {
        // int sin(phi) d(Liouville) = 0; a long geodesic orbit approximates it
        let spec = ThermostatSpec::geodesic(1.0);
        let flow = Flow::new(&spec, &GROUP, 0.01).unwrap();
        let (mean, se) = flow
            .ergodic_average(UnitTangentState::new(C::new(0.13, 0.02), 0.9), 2000.0, |_, s, _| {
                s.phi.sin()
            })
            .unwrap();
        assert!(mean.abs() < 3.0 * se.max(5e-3), "mean {mean}, se {se}");
    }

    #[test]
    fn rejects_oversized_steps() {
        let spec = ThermostatSpec::geodesic(1.0);
        assert!(Flow::new(&spec, &GROUP, 0.02).is_err());
        assert!(Flow::new(&spec, &GROUP, -0.01).is_err());
    }
}
