//! Stable and unstable slope fields of the transverse cocycle.
//!
//! Along every orbit the transverse cocycle xdot = y, ydot = V(lambda) y -
//! kappa0 x has two distinguished solutions whose slopes r = y/x solve the
//! Riccati equation rdot = -r^2 + V(lambda) r - kappa0.  For an Anosov flow
//! they are the derivatives of the weak foliations: `r_minus` (unstable) is
//! the attractor of the forward Riccati flow, `r_plus` (stable) the attractor
//! of the time-reversed one.  Both are computed without shooting: the stable
//! direction at s is the image of a generic vector under the adjugate of the
//! forward fundamental matrix, adj(Phi_[0,T]) w, and the unstable one is the
//! same construction along the reversed flow.  Convergence is certified by
//! the sweep's trailing-half deviation, which decays exponentially in the
//! horizon for Anosov specs but stays order-one for precessing cocycles.

use rand::Rng;
use rayon::prelude::*;

use crate::fields::ThermostatSpec;
use crate::flow::{CocycleState, Flow, OrbitSample};
use crate::fourier::FiberModes;
use crate::geom::{FuchsianGroup, UnitTangentState, C};
use crate::util::central_derivative_4;
use crate::{Error, Result};

/// Numerical parameters of a slope computation.
#[derive(Debug, Clone, Copy)]
pub struct SlopeParams {
    /// Integration step of the cocycle sweeps.
    pub dt: f64,
    /// Sweep horizon; the slope error decays like exp(-spread * T).
    pub t_horizon: f64,
}

impl SlopeParams {
    /// High-precision settings for pointwise checks.
    pub fn precise() -> Self {
        Self { dt: 0.005, t_horizon: 40.0 }
    }

    /// Settings for slope fields feeding quadrature-level (percent-scale)
    /// invariants.
    pub fn field(c: f64) -> Self {
        Self { dt: 0.01, t_horizon: 8.0 / c }
    }
}

/// Slopes of the two weak foliations at one state.
#[derive(Debug, Clone, Copy)]
pub struct SlopeSample {
    /// Stable slope.
    pub r_plus: f64,
    /// Unstable slope.
    pub r_minus: f64,
    /// Max deviation of the stable sweep over its trailing half from the
    /// final value; decays exponentially in the horizon iff the sweep
    /// converges (an elliptic cocycle keeps precessing and cannot alias
    /// this to a small value).
    pub gap_plus: f64,
    /// Same for the unstable sweep.
    pub gap_minus: f64,
}

impl SlopeSample {
    pub fn convergence_gap(&self) -> f64 {
        self.gap_plus.max(self.gap_minus)
    }

    /// r_minus - r_plus, positive for Anosov specs.
    pub fn spread(&self) -> f64 {
        self.r_minus - self.r_plus
    }
}

/// Slope of the direction adj(M) (1, 0)^T = (m22, -m21)^T.
fn adjugate_slope(m: &[f64; 4]) -> f64 {
    -m[2] / m[3]
}

/// Stable and unstable slopes at `s` from two adjugate sweeps.
pub fn slope_at(
    spec: &ThermostatSpec,
    group: &FuchsianGroup,
    s: UnitTangentState,
    params: &SlopeParams,
) -> Result<SlopeSample> {
    let flow = Flow::new(spec, group, params.dt)?;
    let sweep = |sign: f64| -> Result<(f64, f64)> {
        let n = ((params.t_horizon / params.dt).round() as usize).max(2);
        let mut cs = CocycleState::identity(s);
        let mut tail = Vec::with_capacity(n - n / 2);
        for k in 0..n {
            cs = flow.step_cocycle(cs, sign * params.dt)?;
            if k + 1 >= n / 2 {
                tail.push(adjugate_slope(&cs.m));
            }
        }
        let r = *tail.last().unwrap();
        let gap = tail.iter().map(|t| (t - r).abs()).fold(0.0, f64::max);
        Ok((r, gap))
    };
    let (r_plus, gap_plus) = sweep(1.0)?;
    let (r_minus, gap_minus) = sweep(-1.0)?;
    Ok(SlopeSample { r_plus, r_minus, gap_plus, gap_minus })
}

/// Slope fields evaluated along one orbit.
#[derive(Debug, Clone)]
pub struct SlopeSeries {
    pub dt: f64,
    pub samples: Vec<OrbitSample>,
    pub r_plus: Vec<f64>,
    pub r_minus: Vec<f64>,
}

/// Both slope fields along the orbit of `s0` over [0, t_end].  One forward
/// sweep over [-W, t_end + W] records the one-step transition matrices; the
/// unstable direction is then a generic vector transported forward through
/// them (normalized each step) and the stable one a generic vector
/// transported backward through their adjugates.  Each transport follows an
/// attracting direction of the corresponding map composition, so the
/// relaxation length W = `t_horizon` controls the only systematic error and
/// roundoff stays at machine level for arbitrarily long orbits.
pub fn slopes_along_orbit(
    spec: &ThermostatSpec,
    group: &FuchsianGroup,
    s0: UnitTangentState,
    t_end: f64,
    params: &SlopeParams,
) -> Result<SlopeSeries> {
    let flow = Flow::new(spec, group, params.dt)?;
    let w_steps = (params.t_horizon / params.dt).round() as usize;
    let n_orbit = (t_end / params.dt).round() as usize;
    let total = n_orbit + 2 * w_steps;

    let start = flow.propagate_matrix(s0, -params.t_horizon)?.state;
    let mut states: Vec<UnitTangentState> = Vec::with_capacity(total + 1);
    let mut steps: Vec<[f64; 4]> = Vec::with_capacity(total);
    let mut s = start;
    states.push(s);
    for _ in 0..total {
        let cs = flow.step_cocycle(CocycleState::identity(s), params.dt)?;
        steps.push(cs.m);
        s = cs.state;
        states.push(s);
    }

    let c = spec.metric.c;
    let transport = |m: &[f64; 4], v: [f64; 2]| -> [f64; 2] {
        let w = [m[0] * v[0] + m[1] * v[1], m[2] * v[0] + m[3] * v[1]];
        let n = w[0].hypot(w[1]);
        [w[0] / n, w[1] / n]
    };
    let mut r_minus_all = vec![0.0; total + 1];
    let mut v = [1.0, c];
    r_minus_all[0] = v[1] / v[0];
    for k in 0..total {
        v = transport(&steps[k], v);
        r_minus_all[k + 1] = v[1] / v[0];
    }
    let mut r_plus_all = vec![0.0; total + 1];
    let mut v = [1.0, -c];
    r_plus_all[total] = v[1] / v[0];
    for k in (0..total).rev() {
        // adj(m) v is the direction of the backward-transported vector
        v = transport(&[steps[k][3], -steps[k][1], -steps[k][2], steps[k][0]], v);
        r_plus_all[k] = v[1] / v[0];
    }

    let mut samples = Vec::with_capacity(n_orbit + 1);
    for k in 0..=n_orbit {
        let st = states[k + w_steps];
        let cache = spec.base_cache(st.z);
        let ev = spec.cocycle_eval_cached(&cache, st.phi);
        samples.push(OrbitSample {
            t: k as f64 * params.dt,
            state: st,
            lambda: ev.flow.lambda,
            v_lambda: ev.flow.v_lambda,
            kappa0: ev.kappa0,
        });
    }
    Ok(SlopeSeries {
        dt: params.dt,
        samples,
        r_plus: r_plus_all[w_steps..=w_steps + n_orbit].to_vec(),
        r_minus: r_minus_all[w_steps..=w_steps + n_orbit].to_vec(),
    })
}

/// Sup of |F(r - V(lambda)) + r (r - V(lambda)) + kappa0 + F(V(lambda))|
/// over the interior of the series, with F evaluated by 4th-order central
/// differences in flow time.  Zero (to discretization error) exactly when
/// `r` solves the transverse Riccati equation along the orbit.
pub fn riccati_residual_series(
    r: &[f64],
    v_lambda: &[f64],
    kappa0: &[f64],
    dt: f64,
) -> f64 {
    let n = r.len();
    let u: Vec<f64> = r.iter().zip(v_lambda).map(|(a, b)| a - b).collect();
    let mut worst = 0.0_f64;
    for i in 2..n.saturating_sub(2) {
        let du = central_derivative_4(&u, i, dt).unwrap();
        let dv = central_derivative_4(v_lambda, i, dt).unwrap();
        let res = du + u[i] * r[i] + kappa0[i] + dv;
        worst = worst.max(res.abs());
    }
    worst
}

/// Residual of the volume derivative identity
/// d/dt log |r_minus - r_plus| = V(lambda) - (r_plus + r_minus).
pub fn volume_lemma_residual(series: &SlopeSeries) -> f64 {
    let w: Vec<f64> = series
        .r_minus
        .iter()
        .zip(&series.r_plus)
        .map(|(rm, rp)| (rm - rp).abs().ln())
        .collect();
    let mut worst = 0.0_f64;
    for i in 2..w.len().saturating_sub(2) {
        let dw = central_derivative_4(&w, i, series.dt).unwrap();
        let s = &series.samples[i];
        let res = dw - s.v_lambda + series.r_plus[i] + series.r_minus[i];
        worst = worst.max(res.abs());
    }
    worst
}

/// Slopes and their spectral fiber derivatives over the full fiber circle at
/// one base point.
#[derive(Debug, Clone)]
pub struct FiberSlopeProfile {
    pub z: C,
    pub angles: Vec<f64>,
    pub r_plus: Vec<f64>,
    pub r_minus: Vec<f64>,
    pub v_r_plus: Vec<f64>,
    pub v_r_minus: Vec<f64>,
    /// Worst convergence gap over the fiber.
    pub max_gap: f64,
}

impl FiberSlopeProfile {
    /// Fourier coefficients of the requested slope field on this fiber.
    pub fn modes(&self, stable: bool) -> Result<FiberModes> {
        FiberModes::analyze(if stable { &self.r_plus } else { &self.r_minus })
    }
}

/// Slope fields on the fiber over z, sampled at n_theta uniform angles
/// (power of two, >= 64 for production grids).
pub fn slope_fiber_profile(
    spec: &ThermostatSpec,
    group: &FuchsianGroup,
    z: C,
    n_theta: usize,
    params: &SlopeParams,
) -> Result<FiberSlopeProfile> {
    let angles: Vec<f64> =
        (0..n_theta).map(|j| 2.0 * std::f64::consts::PI * j as f64 / n_theta as f64).collect();
    let samples: Vec<SlopeSample> = angles
        .par_iter()
        .map(|&phi| slope_at(spec, group, UnitTangentState::new(z, phi), params))
        .collect::<Result<_>>()?;
    let r_plus: Vec<f64> = samples.iter().map(|s| s.r_plus).collect();
    let r_minus: Vec<f64> = samples.iter().map(|s| s.r_minus).collect();
    let max_gap = samples.iter().map(|s| s.convergence_gap()).fold(0.0, f64::max);
    let v_r_plus = FiberModes::analyze(&r_plus)?.v_derivative().synthesize();
    let v_r_minus = FiberModes::analyze(&r_minus)?.v_derivative().synthesize();
    Ok(FiberSlopeProfile { z, angles, r_plus, r_minus, v_r_plus, v_r_minus, max_gap })
}

/// Liouville-distributed random states: base point by rejection sampling of
/// the hyperbolic area measure on the fundamental octagon, fiber angle
/// uniform.
pub fn sample_liouville_states(
    group: &FuchsianGroup,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<UnitTangentState> {
    let rho_max = group.vertices()[0].norm();
    let floor = (1.0 - rho_max * rho_max) / 2.0;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let r = rho_max * rng.gen::<f64>().sqrt();
        let z = C::from_polar(r, 2.0 * std::f64::consts::PI * rng.gen::<f64>());
        // area density is sigma0^2 ~ (1 - |z|^2)^{-2}; accept proportionally
        let w = floor / (1.0 - z.norm_sqr());
        if rng.gen::<f64>() < w * w && group.in_domain(z) {
            out.push(UnitTangentState::new(z, 2.0 * std::f64::consts::PI * rng.gen::<f64>()));
        }
    }
    out
}

/// Outcome of sampling the slope gap over Liouville-random states.
#[derive(Debug, Clone, Copy)]
pub struct HyperbolicityCertificate {
    pub certified: bool,
    /// Smallest observed r_minus - r_plus.
    pub delta_min: f64,
    /// Largest observed convergence gap.
    pub max_gap: f64,
    pub n_samples: usize,
    /// Samples with non-finite or non-converged slopes.
    pub failures: usize,
}

/// Certify uniform transversality of the weak foliations by sampling: all
/// slopes must converge (gap well below the observed spread) and the spread
/// must be uniformly positive.
pub fn hyperbolicity_certificate(
    spec: &ThermostatSpec,
    group: &FuchsianGroup,
    params: &SlopeParams,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<HyperbolicityCertificate> {
    if n_samples < 100 {
        return Err(Error::InvalidParameter(format!(
            "certificate needs >= 100 samples, got {n_samples}"
        )));
    }
    let states = sample_liouville_states(group, n_samples, rng);
    let samples: Vec<SlopeSample> = states
        .par_iter()
        .map(|&s| slope_at(spec, group, s, params))
        .collect::<Result<_>>()?;
    let mut delta_min = f64::INFINITY;
    let mut max_gap = 0.0_f64;
    let mut failures = 0usize;
    for s in &samples {
        if !(s.r_plus.is_finite() && s.r_minus.is_finite()) {
            failures += 1;
            continue;
        }
        delta_min = delta_min.min(s.spread());
        max_gap = max_gap.max(s.convergence_gap());
    }
    let certified =
        failures == 0 && delta_min.is_finite() && delta_min > 1e-6 && max_gap < delta_min / 3.0;
    Ok(HyperbolicityCertificate { certified, delta_min, max_gap, n_samples, failures })
}
