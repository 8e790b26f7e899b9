//! Fourier analysis on the circle fibers of the unit tangent bundle.
//!
//! A function u on SM restricted to the fiber over z is a function of the
//! chart angle phi; its modes c_n (u = sum c_n e^{i n phi}) organize the
//! invariant-theory bookkeeping: the fiber rotation field V acts as
//! multiplication by i n, the thermostat intensity lambda has modes |n| <= 2,
//! and the Godbillon-Vey integrand can be reorganized mode by mode.  The
//! first-order operators eta_pm = (X -+ i H)/2 shift modes by one and detect
//! closedness/coclosedness of 1-forms and holomorphicity of quadratic
//! differentials.

use rustfft::{Fft, FftDirection, FftPlanner};
use std::io::Write as IoWrite;
use std::sync::{Arc, Mutex, OnceLock};

use crate::fields::ThermostatSpec;
use crate::geom::{UnitTangentState, C};
use crate::{Error, Result};

fn plan_fft(n: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();
    let planner = PLANNER.get_or_init(|| Mutex::new(FftPlanner::new()));
    planner.lock().unwrap().plan_fft(n, direction)
}

/// Fourier coefficients of a real (or complex) function on one fiber,
/// sampled at the uniform angles phi_j = 2 pi j / N.  Stored in FFT layout:
/// index j holds mode n = j for j <= N/2 and n = j - N beyond.
#[derive(Debug, Clone)]
pub struct FiberModes {
    pub coeffs: Vec<C>,
}

impl FiberModes {
    /// Decompose samples over the uniform fiber grid (length a power of two).
    pub fn analyze(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n == 0 || n & (n - 1) != 0 {
            return Err(Error::InvalidParameter(format!(
                "fiber grid size {n} is not a power of two"
            )));
        }
        let mut buf: Vec<C> = values.iter().map(|&v| C::new(v, 0.0)).collect();
        plan_fft(n, FftDirection::Forward).process(&mut buf);
        let scale = 1.0 / n as f64;
        for c in &mut buf {
            *c *= scale;
        }
        Ok(Self { coeffs: buf })
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Signed mode number at storage index j.
    pub fn mode_at(&self, j: usize) -> i64 {
        let n = self.len() as i64;
        let j = j as i64;
        if j <= n / 2 {
            j
        } else {
            j - n
        }
    }

    /// Coefficient of e^{i n phi}; zero outside the resolved band.
    pub fn coeff(&self, n: i64) -> C {
        let len = self.len() as i64;
        if n > len / 2 || n < -len / 2 {
            return C::new(0.0, 0.0);
        }
        let j = n.rem_euclid(len) as usize;
        self.coeffs[j]
    }

    /// Values back on the sample grid (real parts; imaginary parts are
    /// roundoff for conjugate-symmetric coefficients).
    pub fn synthesize(&self) -> Vec<f64> {
        let mut buf = self.coeffs.clone();
        plan_fft(self.len(), FftDirection::Inverse).process(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }

    /// Evaluate the trigonometric polynomial at an arbitrary angle.
    pub fn value_at(&self, phi: f64) -> f64 {
        let mut acc = C::new(0.0, 0.0);
        for (j, &c) in self.coeffs.iter().enumerate() {
            let n = self.mode_at(j);
            acc += c * C::from_polar(1.0, n as f64 * phi);
        }
        acc.re
    }

    /// Largest deviation from the reality condition c_{-n} = conj(c_n).
    pub fn reality_defect(&self) -> f64 {
        let len = self.len() as i64;
        let mut worst = 0.0_f64;
        for n in 1..len / 2 {
            worst = worst.max((self.coeff(-n) - self.coeff(n).conj()).norm());
        }
        worst
    }

    /// Sum of |c_n|^2 = fiber mean of |u|^2 (Parseval).
    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Energy in the mode pair +-k: |c_k|^2 + |c_{-k}|^2 (just |c_0|^2 for 0).
    pub fn pair_energy(&self, k: u32) -> f64 {
        let k = k as i64;
        if k == 0 {
            self.coeff(0).norm_sqr()
        } else {
            self.coeff(k).norm_sqr() + self.coeff(-k).norm_sqr()
        }
    }

    /// The real mode-pair function Q_k (projection onto modes +-k).
    pub fn mode_pair(&self, k: u32) -> FiberModes {
        let mut out = FiberModes { coeffs: vec![C::new(0.0, 0.0); self.len()] };
        let len = self.len() as i64;
        let k = k as i64;
        if k <= len / 2 {
            let jp = k.rem_euclid(len) as usize;
            out.coeffs[jp] = self.coeffs[jp];
            if k > 0 {
                let jm = (-k).rem_euclid(len) as usize;
                out.coeffs[jm] = self.coeffs[jm];
            }
        }
        out
    }

    /// Fiber derivative V: mode n multiplied by i n.  The unpaired Nyquist
    /// mode is dropped (it carries no consistent derivative for real data).
    pub fn v_derivative(&self) -> FiberModes {
        let mut out = self.clone();
        let half = self.len() / 2;
        for (j, c) in out.coeffs.iter_mut().enumerate() {
            if j == half {
                *c = C::new(0.0, 0.0);
            } else {
                let n = if j <= half { j as f64 } else { j as f64 - self.len() as f64 };
                *c *= C::new(0.0, n);
            }
        }
        out
    }

    /// Mode-k reorganization of the Godbillon-Vey integrand: P_0 = Q_0 and
    /// P_k = -(k^2+2)/(3k^2) V(Q_k) for k >= 1, assembled over all modes.
    pub fn p_transform(&self) -> FiberModes {
        let mut out = self.clone();
        let half = self.len() / 2;
        for (j, c) in out.coeffs.iter_mut().enumerate() {
            let n = if j <= half { j as i64 } else { j as i64 - self.len() as i64 };
            if n == 0 {
                continue;
            }
            if j == half {
                *c = C::new(0.0, 0.0);
                continue;
            }
            let k = n.unsigned_abs() as f64;
            let factor = -(k * k + 2.0) / (3.0 * k * k);
            *c *= C::new(0.0, n as f64) * factor;
        }
        out
    }

    /// Pointwise sum of two mode sets on the same grid.
    pub fn add(&self, other: &FiberModes) -> FiberModes {
        assert_eq!(self.len(), other.len(), "mode grids must match");
        FiberModes {
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    /// Weight of the k >= 3 tail in the Fourier form of the GV invariant:
    /// ((k^2+2)/3)^2 - k^2.
    pub fn tail_weight(k: u32) -> f64 {
        let k2 = (k as f64) * (k as f64);
        let a = (k2 + 2.0) / 3.0;
        a * a - k2
    }
}

/// Write modes as CSV lines: Re z, Im z, n, Re c_n, Im c_n.
pub fn dump_modes<W: IoWrite>(out: &mut W, z: C, modes: &FiberModes) -> Result<()> {
    for (j, c) in modes.coeffs.iter().enumerate() {
        writeln!(out, "{},{},{},{},{}", z.re, z.im, modes.mode_at(j), c.re, c.im)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Guillemin-Kazhdan operators
// ---------------------------------------------------------------------------

/// (X u, H u) of a complex-valued function on SM by 4th-order differences
/// along the geodesic and rotated-horizontal curves of the spec's metric.
pub fn horizontal_derivs_fd<F>(spec: &ThermostatSpec, s: UnitTangentState, u: F) -> (C, C)
where
    F: Fn(UnitTangentState) -> C,
{
    let h = 1e-4;
    let fd = |g: &dyn Fn(f64) -> C| -> C {
        (8.0 * (g(h) - g(-h)) - (g(2.0 * h) - g(-2.0 * h))) / (12.0 * h)
    };
    let xu = fd(&|t| u(spec.metric_geodesic_step(s, t)));
    let half_pi = std::f64::consts::FRAC_PI_2;
    let hu = fd(&|t| {
        let m = spec.metric_geodesic_step(UnitTangentState::new(s.z, s.phi + half_pi), t);
        u(UnitTangentState::new(m.z, m.phi - half_pi))
    });
    (xu, hu)
}

/// eta_+ u = (X - iH)(u)/2 and eta_- u = (X + iH)(u)/2.
pub fn gk_apply<F>(spec: &ThermostatSpec, s: UnitTangentState, u: F) -> (C, C)
where
    F: Fn(UnitTangentState) -> C,
{
    let (xu, hu) = horizontal_derivs_fd(spec, s, u);
    let i = C::new(0.0, 1.0);
    ((xu - i * hu) / 2.0, (xu + i * hu) / 2.0)
}

/// Mode +1 component of the dual 1-form theta of the spec's e-field:
/// theta_1 = (theta - i V(theta))/2.
pub fn theta_plus_one(spec: &ThermostatSpec, s: UnitTangentState) -> C {
    let theta = spec.theta_form(s);
    let vtheta = spec.lambda(s) - spec.f.value(s.z) - spec.q_form(s);
    C::new(theta / 2.0, -vtheta / 2.0)
}

/// Residuals of the closed/coclosed criteria for the dual 1-form of e over a
/// set of sample states: (max |Im eta_- theta_1|, max |Re eta_- theta_1|).
/// The form is closed iff the first vanishes, coclosed iff the second does.
pub fn closed_coclosed_test(
    spec: &ThermostatSpec,
    samples: &[UnitTangentState],
) -> (f64, f64) {
    let mut max_im = 0.0_f64;
    let mut max_re = 0.0_f64;
    for &s in samples {
        let (_, eta_minus) = gk_apply(spec, s, |st| theta_plus_one(spec, st));
        max_im = max_im.max(eta_minus.im.abs());
        max_re = max_re.max(eta_minus.re.abs());
    }
    (max_im, max_re)
}
