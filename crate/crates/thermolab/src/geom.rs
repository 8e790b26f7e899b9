//! Hyperbolic plane geometry and the genus-2 surface group.
//!
//! The surface is modelled on the Poincaré unit disk with the curvature -1
//! metric 4|dz|^2/(1-|z|^2)^2.  Orientation-preserving isometries are Möbius
//! maps z -> (a z + b)/(conj(b) z + conj(a)) with |a|^2 - |b|^2 = 1.  The
//! closed genus-2 surface is the quotient of the disk by the group generated
//! by the side pairings of a regular octagon:
//!
//! * vertices at angles k*pi/4 (one on the positive real axis), all interior
//!   angles pi/4, so the eight identified corners glue to a single smooth
//!   point (total angle 2*pi) and the area is 4*pi by Gauss-Bonnet;
//! * circumradius R with cosh R = cot^2(pi/8), inradius r with
//!   cosh r = cot(pi/8) (right-triangle trigonometry of the half-side
//!   decomposition);
//! * side k is paired with the opposite side k+4 by the hyperbolic
//!   translation T_k of length 2r through the midpoint of side k.
//!
//! Curvatures -c^2 are represented by the same group with all lengths read in
//! units of 1/c; the tessellation combinatorics are scale-free.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::{Error, Result};

pub type C = Complex64;

/// Numerical guard band: points must stay this far inside the unit circle,
/// and fundamental-domain membership tests treat a band of this width around
/// the boundary as "inside".
pub const DISK_GUARD: f64 = 1e-12;
const BOUNDARY_BAND: f64 = 1e-12;
const MAX_REDUCE_STEPS: usize = 128;

/// Hyperbolic distance between two points of the disk, curvature -1.
pub fn hyp_distance(z1: C, z2: C) -> f64 {
    let num = z1 - z2;
    let den = C::new(1.0, 0.0) - z2.conj() * z1;
    let t = (num / den).norm();
    2.0 * t.atanh()
}

/// A point and a unit tangent direction, stored in chart coordinates: `z` is
/// the base point (canonical representative in the fundamental octagon when
/// produced by the flow) and `phi` the chart angle of the unit vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitTangentState {
    pub z: C,
    pub phi: f64,
}

impl UnitTangentState {
    pub fn new(z: C, phi: f64) -> Self {
        Self { z, phi }
    }

    /// The flip (x, v) -> (x, -v).
    pub fn flipped(&self) -> Self {
        Self { z: self.z, phi: self.phi + std::f64::consts::PI }
    }
}

/// Orientation-preserving isometry of the disk in SU(1,1) form:
/// z -> (a z + b) / (conj(b) z + conj(a)), |a|^2 - |b|^2 = 1.
/// The pair (a, b) and (-a, -b) describe the same map.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MobiusTransform {
    pub a: C,
    pub b: C,
}

impl MobiusTransform {
    pub fn identity() -> Self {
        Self { a: C::new(1.0, 0.0), b: C::new(0.0, 0.0) }
    }

    /// Build and renormalize so that |a|^2 - |b|^2 = 1 exactly (up to
    /// rounding).  Products drift away from the group; callers compose many
    /// maps, so every constructor funnels through this.
    pub fn new(a: C, b: C) -> Self {
        let mut m = Self { a, b };
        m.renormalize();
        m
    }

    /// Rotation by `theta` about the origin.
    pub fn rotation(theta: f64) -> Self {
        Self::new(C::from_polar(1.0, theta / 2.0), C::new(0.0, 0.0))
    }

    /// Hyperbolic translation of length `length` along the geodesic through
    /// the origin in direction `direction` (curvature -1 units).
    pub fn translation(direction: f64, length: f64) -> Self {
        let r = Self::rotation(direction);
        let t = Self::new(C::new((length / 2.0).cosh(), 0.0), C::new((length / 2.0).sinh(), 0.0));
        r.compose(&t).compose(&r.inverse())
    }

    /// The isometry taking `z0` to the origin (with real positive derivative
    /// direction at z0 preserved up to the standard normalization).
    pub fn to_origin(z0: C) -> Self {
        let s = (1.0 - z0.norm_sqr()).sqrt();
        Self::new(C::new(1.0 / s, 0.0), -z0 / s)
    }

    pub fn renormalize(&mut self) {
        let det = self.a.norm_sqr() - self.b.norm_sqr();
        if det > 0.0 {
            let s = det.sqrt();
            self.a /= s;
            self.b /= s;
        }
    }

    pub fn apply(&self, z: C) -> C {
        (self.a * z + self.b) / (self.b.conj() * z + self.a.conj())
    }

    /// Complex derivative m'(z) = 1 / (conj(b) z + conj(a))^2.
    pub fn derivative(&self, z: C) -> C {
        let den = self.b.conj() * z + self.a.conj();
        1.0 / (den * den)
    }

    /// Push a unit tangent state forward: the base point maps by the map and
    /// the chart angle increases by arg m'(z).
    pub fn apply_tangent(&self, state: UnitTangentState) -> UnitTangentState {
        UnitTangentState {
            z: self.apply(state.z),
            phi: state.phi + self.derivative(state.z).arg(),
        }
    }

    /// self ∘ other (apply `other` first).
    pub fn compose(&self, other: &Self) -> Self {
        Self::new(
            self.a * other.a + self.b * other.b.conj(),
            self.a * other.b + self.b * other.a.conj(),
        )
    }

    pub fn inverse(&self) -> Self {
        Self { a: self.a.conj(), b: -self.b }
    }

    /// L-infinity distance to another map after aligning the projective sign.
    pub fn deviation_from(&self, other: &Self) -> f64 {
        let d_plus = (self.a - other.a).norm().max((self.b - other.b).norm());
        let d_minus = (self.a + other.a).norm().max((self.b + other.b).norm());
        d_plus.min(d_minus)
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        self.deviation_from(&Self::identity()) <= tol
    }
}

/// A group element together with the generator word that produced it.
/// Letters index `FuchsianGroup::generators` (0..8, letter k+4 inverse to k).
#[derive(Debug, Clone)]
pub struct GroupElement {
    pub word: Vec<u8>,
    pub map: MobiusTransform,
}

/// The genus-2 octagon group: eight side-pairing translations (four
/// generators and their inverses) plus the fundamental-domain geometry used
/// for membership tests and domain reduction.
#[derive(Debug, Clone)]
pub struct FuchsianGroup {
    /// T_0..T_7; T_{k+4} = T_k^{-1}.  T_k maps side k+4 onto side k.
    pub generators: [MobiusTransform; 8],
    /// Hyperbolic center-to-side distance (curvature -1).
    pub inradius: f64,
    /// Hyperbolic center-to-vertex distance.
    pub circumradius: f64,
    /// Octagon vertices in the chart, at angles k*pi/4.
    vertices: [C; 8],
    /// Chart centers of the eight geodesic side circles.
    side_centers: [C; 8],
    /// Common chart radius of the side circles.
    side_radius: f64,
}

impl FuchsianGroup {
    /// Construct the regular-octagon genus-2 group described in the module
    /// docs.
    pub fn genus2_octagon() -> Self {
        let cot8 = 1.0 / (std::f64::consts::PI / 8.0).tan();
        let circumradius = (cot8 * cot8).acosh();
        let inradius = cot8.acosh();

        let mut generators = [MobiusTransform::identity(); 8];
        for (k, g) in generators.iter_mut().enumerate() {
            let dir = std::f64::consts::PI / 8.0 + k as f64 * std::f64::consts::FRAC_PI_4;
            *g = MobiusTransform::translation(dir, 2.0 * inradius);
        }

        let rho_c = (circumradius / 2.0).tanh();
        let mut vertices = [C::new(0.0, 0.0); 8];
        for (k, v) in vertices.iter_mut().enumerate() {
            *v = C::from_polar(rho_c, k as f64 * std::f64::consts::FRAC_PI_4);
        }

        // A geodesic side is an arc of a circle orthogonal to the unit
        // circle; for the side with foot point at chart radius rho_i the
        // circle has center distance (rho_i + 1/rho_i)/2 and radius
        // (1/rho_i - rho_i)/2.
        let rho_i = (inradius / 2.0).tanh();
        let center_dist = 0.5 * (rho_i + 1.0 / rho_i);
        let side_radius = 0.5 * (1.0 / rho_i - rho_i);
        let mut side_centers = [C::new(0.0, 0.0); 8];
        for (k, c) in side_centers.iter_mut().enumerate() {
            let dir = std::f64::consts::PI / 8.0 + k as f64 * std::f64::consts::FRAC_PI_4;
            *c = C::from_polar(center_dist, dir);
        }

        Self { generators, inradius, circumradius, vertices, side_centers, side_radius }
    }

    /// Boundary word of the octagon gluing: the product of these generator
    /// letters (left to right) is the identity.  This is the single defining
    /// relation of the surface group.
    pub const RELATION_WORD: [u8; 8] = [0, 3, 6, 1, 4, 7, 2, 5];

    /// A generating quadruple (a1, b1, a2, b2), given as generator words,
    /// with [a1,b1][a2,b2] = identity: the commutator form of the defining
    /// relation for this presentation.
    pub const COMMUTATOR_QUADRUPLE: (&'static [u8], &'static [u8], &'static [u8], &'static [u8]) =
        (&[0], &[3], &[2, 5], &[0, 3, 5]);

    pub fn vertices(&self) -> &[C; 8] {
        &self.vertices
    }

    /// Chart circle carrying side k (the geodesic arc from vertex k to
    /// vertex k+1): (center, radius).
    pub fn side_circle(&self, k: usize) -> (C, f64) {
        (self.side_centers[k], self.side_radius)
    }

    /// Evaluate a generator word (left-to-right composition order: the word
    /// [i, j] is T_i ∘ T_j).
    pub fn word_map(&self, word: &[u8]) -> MobiusTransform {
        let mut m = MobiusTransform::identity();
        for &k in word {
            m = m.compose(&self.generators[k as usize]);
        }
        m
    }

    /// Signed penetration depth past side `k`: positive means the point lies
    /// beyond the side (outside the octagon across side k).
    fn side_depth(&self, z: C, k: usize) -> f64 {
        self.side_radius - (z - self.side_centers[k]).norm()
    }

    /// Fundamental-domain membership, with the guard band counting boundary
    /// points as inside.
    pub fn in_domain(&self, z: C) -> bool {
        (0..8).all(|k| self.side_depth(z, k) <= BOUNDARY_BAND)
    }

    /// Reduce a point of the disk to its canonical representative in the
    /// fundamental octagon.  Returns (representative, deck, steps) where
    /// `deck.apply(z) == representative`.  Greedy descent on the most
    /// violated side; ties broken by the smallest side index.
    pub fn reduce(&self, z: C) -> Result<(C, MobiusTransform, usize)> {
        if z.norm() >= 1.0 - DISK_GUARD {
            return Err(Error::OutsideDisk(z.norm()));
        }
        let mut cur = z;
        let mut deck = MobiusTransform::identity();
        for step in 0..MAX_REDUCE_STEPS {
            let mut worst: Option<(f64, usize)> = None;
            for k in 0..8 {
                let d = self.side_depth(cur, k);
                if d > BOUNDARY_BAND {
                    let better = match worst {
                        None => true,
                        Some((wd, _)) => d > wd + BOUNDARY_BAND,
                    };
                    if better {
                        worst = Some((d, k));
                    }
                }
            }
            match worst {
                None => return Ok((cur, deck, step)),
                Some((_, k)) => {
                    // Past side k means the point sits in the copy T_k(octagon);
                    // pull back with T_k^{-1} = generator (k+4) mod 8.
                    let g = &self.generators[(k + 4) % 8];
                    cur = g.apply(cur);
                    deck = g.compose(&deck);
                }
            }
        }
        Err(Error::ReductionFailed(MAX_REDUCE_STEPS))
    }

    /// Reduce a unit tangent state (base point to the octagon, chart angle
    /// transported by the deck map).
    pub fn reduce_state(&self, state: UnitTangentState) -> Result<(UnitTangentState, MobiusTransform)> {
        let (_, deck, _) = self.reduce(state.z)?;
        Ok((deck.apply_tangent(state), deck))
    }

    /// Enumerate group elements as reduced words up to length `max_len`,
    /// deduplicated by matrix (up to the projective sign).  `max_translate`
    /// optionally discards elements that move the origin further than the
    /// given hyperbolic distance; branches that cannot come back under the
    /// cutoff within the remaining letters are pruned.
    pub fn enumerate(&self, max_len: usize, max_translate: Option<f64>) -> Vec<GroupElement> {
        let step = 2.0 * self.inradius; // translation length of each generator
        let mut seen = MatrixSet::new();
        seen.insert(&MobiusTransform::identity());
        let mut out = vec![GroupElement { word: vec![], map: MobiusTransform::identity() }];
        let mut frontier = vec![GroupElement { word: vec![], map: MobiusTransform::identity() }];
        for len in 1..=max_len {
            let mut next = Vec::new();
            for el in &frontier {
                for k in 0u8..8 {
                    if let Some(&last) = el.word.last() {
                        if (k + 8 - last) % 8 == 4 {
                            continue; // immediate cancellation
                        }
                    }
                    let m = el.map.compose(&self.generators[k as usize]);
                    if let Some(dmax) = max_translate {
                        let d = hyp_distance(C::new(0.0, 0.0), m.apply(C::new(0.0, 0.0)));
                        let remaining = (max_len - len) as f64;
                        if d > dmax + step * remaining {
                            continue; // cannot re-enter the retained ball
                        }
                    }
                    if !seen.insert(&m) {
                        continue;
                    }
                    let mut word = el.word.clone();
                    word.push(k);
                    next.push(GroupElement { word, map: m });
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        if let Some(dmax) = max_translate {
            out.retain(|el| hyp_distance(C::new(0.0, 0.0), el.map.apply(C::new(0.0, 0.0))) <= dmax);
        }
        out
    }
}

/// Hash set of Möbius maps with sign normalization and a quantization grid;
/// nearby-cell probing keeps the dedup robust against boundary straddling.
struct MatrixSet {
    cells: HashMap<[i64; 4], Vec<[f64; 4]>>,
}

const KEY_SCALE: f64 = 1e6; // grid 1e-6 on the normalized matrix vector
const KEY_TOL: f64 = 1e-8;

impl MatrixSet {
    fn new() -> Self {
        Self { cells: HashMap::new() }
    }

    fn canonical_vec(m: &MobiusTransform) -> [f64; 4] {
        let mut v = [m.a.re, m.a.im, m.b.re, m.b.im];
        let norm = v.iter().fold(1.0f64, |acc, x| acc.max(x.abs()));
        for x in v.iter_mut() {
            *x /= norm;
        }
        let mut sign = 1.0;
        for x in v {
            if x.abs() > 1e-7 {
                sign = x.signum();
                break;
            }
        }
        for x in v.iter_mut() {
            *x *= sign;
        }
        v
    }

    /// Insert when not present; false if a projectively equal map exists.
    fn insert(&mut self, m: &MobiusTransform) -> bool {
        let v = Self::canonical_vec(m);
        let lo: Vec<i64> = v.iter().map(|x| ((x - KEY_TOL) * KEY_SCALE).floor() as i64).collect();
        let hi: Vec<i64> = v.iter().map(|x| ((x + KEY_TOL) * KEY_SCALE).floor() as i64).collect();
        let mut key = [0i64; 4];
        for k0 in lo[0]..=hi[0] {
            key[0] = k0;
            for k1 in lo[1]..=hi[1] {
                key[1] = k1;
                for k2 in lo[2]..=hi[2] {
                    key[2] = k2;
                    for k3 in lo[3]..=hi[3] {
                        key[3] = k3;
                        if let Some(bucket) = self.cells.get(&key) {
                            for w in bucket {
                                if v.iter().zip(w).all(|(x, y)| (x - y).abs() <= KEY_TOL) {
                                    return false;
                                }
                            }
                        }
                    }
                }
            }
        }
        let home: [i64; 4] = [
            (v[0] * KEY_SCALE).floor() as i64,
            (v[1] * KEY_SCALE).floor() as i64,
            (v[2] * KEY_SCALE).floor() as i64,
            (v[3] * KEY_SCALE).floor() as i64,
        ];
        self.cells.entry(home).or_default().push(v);
        true
    }
}

/// Exact unit-speed geodesic step in the constant-curvature -c^2 disk: move
/// hyperbolic time `t` from `state` along the geodesic flow.  (Conformally
/// deformed metrics integrate the chart ODE instead.)
pub fn exact_geodesic_step(state: UnitTangentState, t: f64, c: f64) -> UnitTangentState {
    let s = MobiusTransform::to_origin(state.z);
    let at0 = s.apply_tangent(state);
    let w = C::from_polar((c * t / 2.0).tanh(), at0.phi);
    let back = s.inverse();
    back.apply_tangent(UnitTangentState::new(w, at0.phi))
}
