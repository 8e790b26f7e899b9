//! Triangulated model of the quotient surface for finite-element work.
//!
//! The fundamental octagon is fan-triangulated from its center: sector k is
//! the cone over geodesic side k, with row i of the sector holding i+1 nodes
//! at (i/n) * arc(j/i).  Octagon sides are sampled compatibly: sides 0..3 get
//! an angle-uniform subdivision of their circular arc, and sides 4..7 carry
//! the image of the opposite side's subdivision under the pairing
//! translation, so the boundary identification s <-> 1-s matches mesh nodes
//! exactly.  A union-find over the paired boundary nodes then produces the
//! degrees of freedom of the closed surface; all eight octagon corners
//! collapse to a single vertex and the quotient complex satisfies
//! V - E + F = -2.
//!
//! On top of the combinatorics the mesh carries what the semilinear solver
//! needs:
//!
//! * the flat cotangent stiffness matrix — the 2d Dirichlet energy is
//!   conformally invariant, so flat element matrices represent the
//!   hyperbolic Dirichlet form exactly up to interpolation error;
//! * lumped vertex weights sigma0(z)^2 * (adjacent area)/3, the curvature -1
//!   area elements that turn nodal values of a density into integrals;
//! * point location through a uniform bucket grid, for interpolation at
//!   arbitrary chart points (evaluation reduces to the fundamental domain
//!   first, so interpolants are functions on the quotient).
//!
//! [`MeshField`] wraps a vertex vector as a [`SampledScalar`] with a
//! recovered (area-averaged) gradient and an interpolated Laplacian, so
//! finite-element output can serve as the conformal exponent of a
//! [`Metric`](crate::fields::Metric).

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use crate::fields::SampledScalar;
use crate::geom::{FuchsianGroup, C};
use crate::{Error, Result};

/// Chart conformal factor of the curvature -1 disk metric.
fn sigma0(z: C) -> f64 {
    2.0 / (1.0 - z.norm_sqr())
}

// ---------------------------------------------------------------------------
// Sparse matrices (compressed rows) and the assembly helper
// ---------------------------------------------------------------------------

/// Compressed-sparse-row matrix; rows and columns index mesh dofs.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    n: usize,
    row_start: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Build from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(u32, u32, f64)>) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_start = vec![0usize; n + 1];
        let mut cols: Vec<u32> = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(u32, u32)> = None;
        for &(r, c, v) in &triplets {
            if last == Some((r, c)) {
                *vals.last_mut().expect("entry exists") += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_start[r as usize + 1] = cols.len();
                last = Some((r, c));
            }
        }
        // rows with no entries inherit the previous offset
        for i in 1..=n {
            if row_start[i] < row_start[i - 1] {
                row_start[i] = row_start[i - 1];
            }
        }
        Self { n, row_start, cols, vals }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// y = A x.
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        for r in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_start[r]..self.row_start[r + 1] {
                acc += self.vals[k] * x[self.cols[k] as usize];
            }
            y[r] = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for r in 0..self.n {
            for k in self.row_start[r]..self.row_start[r + 1] {
                if self.cols[k] as usize == r {
                    d[r] += self.vals[k];
                }
            }
        }
        d
    }
}

// ---------------------------------------------------------------------------
// Node interning and union-find
// ---------------------------------------------------------------------------

/// Deduplicates chart points that coincide up to floating roundoff; probing
/// neighbor cells keeps the match robust against quantization straddles.
struct PointInterner {
    map: HashMap<(i64, i64), Vec<u32>>,
    points: Vec<C>,
}

const INTERN_SCALE: f64 = 1e9;
const INTERN_TOL: f64 = 1e-9;

impl PointInterner {
    fn new() -> Self {
        Self { map: HashMap::new(), points: Vec::new() }
    }

    fn intern(&mut self, p: C) -> u32 {
        let lo_x = ((p.re - INTERN_TOL) * INTERN_SCALE).floor() as i64;
        let hi_x = ((p.re + INTERN_TOL) * INTERN_SCALE).floor() as i64;
        let lo_y = ((p.im - INTERN_TOL) * INTERN_SCALE).floor() as i64;
        let hi_y = ((p.im + INTERN_TOL) * INTERN_SCALE).floor() as i64;
        for kx in lo_x..=hi_x {
            for ky in lo_y..=hi_y {
                if let Some(bucket) = self.map.get(&(kx, ky)) {
                    for &id in bucket {
                        if (self.points[id as usize] - p).norm() <= INTERN_TOL {
                            return id;
                        }
                    }
                }
            }
        }
        let id = self.points.len() as u32;
        self.points.push(p);
        let home = ((p.re * INTERN_SCALE).floor() as i64, (p.im * INTERN_SCALE).floor() as i64);
        self.map.entry(home).or_default().push(id);
        id
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n as u32).collect() }
    }

    fn find(&mut self, mut i: u32) -> u32 {
        while self.parent[i as usize] != i {
            let gp = self.parent[self.parent[i as usize] as usize];
            self.parent[i as usize] = gp;
            i = gp;
        }
        i
    }

    fn union(&mut self, a: u32, b: u32) {
        let ra = self.find(a);
        let rb = self.find(b);
        // smaller root wins: keeps dof numbering tied to low node ids
        if ra < rb {
            self.parent[rb as usize] = ra;
        } else if rb < ra {
            self.parent[ra as usize] = rb;
        }
    }
}

// ---------------------------------------------------------------------------
// Bucket grid for point location
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct BucketGrid {
    x0: f64,
    dx: f64,
    n: usize,
    cells: Vec<Vec<u32>>,
}

impl BucketGrid {
    fn build(points: &[C], triangles: &[[usize; 3]], n: usize) -> Self {
        let x0 = -0.9;
        let dx = 1.8 / n as f64;
        let mut cells = vec![Vec::new(); n * n];
        for (t, tri) in triangles.iter().enumerate() {
            let xs = tri.map(|v| points[v].re);
            let ys = tri.map(|v| points[v].im);
            let cl = |v: f64| (((v - x0) / dx).floor() as isize).clamp(0, n as isize - 1) as usize;
            let (ix0, ix1) = (cl(xs.iter().cloned().fold(f64::MAX, f64::min)), cl(xs.iter().cloned().fold(f64::MIN, f64::max)));
            let (iy0, iy1) = (cl(ys.iter().cloned().fold(f64::MAX, f64::min)), cl(ys.iter().cloned().fold(f64::MIN, f64::max)));
            for ix in ix0..=ix1 {
                for iy in iy0..=iy1 {
                    cells[ix * n + iy].push(t as u32);
                }
            }
        }
        Self { x0, dx, n, cells }
    }

    fn cell_of(&self, z: C) -> (isize, isize) {
        (
            ((z.re - self.x0) / self.dx).floor() as isize,
            ((z.im - self.x0) / self.dx).floor() as isize,
        )
    }
}

// ---------------------------------------------------------------------------
// The mesh
// ---------------------------------------------------------------------------

/// Fan-triangulated fundamental octagon with paired-boundary vertex
/// identification; carries stiffness, lumped weights and point location.
#[derive(Debug)]
pub struct SurfaceMesh {
    group: FuchsianGroup,
    resolution: usize,
    points: Vec<C>,
    node_dof: Vec<usize>,
    dof_node: Vec<usize>,
    triangles: Vec<[usize; 3]>,
    /// Identified boundary node pairs (side k in 0..4): `(a, b, k)` with the
    /// node `a` on side k, `b` on side k+4 and generator k mapping b to a.
    pairs: Vec<(u32, u32, u8)>,
    stiffness: SparseMatrix,
    /// Lumped curvature -1 area weight per dof.
    weight: Vec<f64>,
    /// Flat lumped area per node (for gradient recovery).
    node_area: Vec<f64>,
    euler: i64,
    buckets: BucketGrid,
}

impl SurfaceMesh {
    /// Build the mesh with `resolution` rows per octagon sector
    /// (8 * resolution^2 triangles).
    pub fn build(resolution: usize) -> Result<SurfaceMesh> {
        if resolution == 0 || resolution > 512 {
            return Err(Error::InvalidParameter(format!(
                "mesh resolution {resolution} outside 1..=512"
            )));
        }
        let group = FuchsianGroup::genus2_octagon();
        let n = resolution;

        // angle-uniform parametrization of sides 0..3; sides 4..7 are the
        // deck images of the opposite side, reversed, so paired boundary
        // nodes coincide exactly under the pairing translation
        let base_arc = |k: usize, t: f64| -> C {
            let (ctr, rad) = group.side_circle(k);
            let a0 = (group.vertices()[k] - ctr).arg();
            let mut a1 = (group.vertices()[(k + 1) % 8] - ctr).arg();
            if a1 - a0 > std::f64::consts::PI {
                a1 -= 2.0 * std::f64::consts::PI;
            } else if a0 - a1 > std::f64::consts::PI {
                a1 += 2.0 * std::f64::consts::PI;
            }
            ctr + C::from_polar(rad, a0 + (a1 - a0) * t)
        };
        let arc = |k: usize, t: f64| -> C {
            if k < 4 {
                base_arc(k, t)
            } else {
                group.generators[k].apply(base_arc(k - 4, 1.0 - t))
            }
        };

        let mut interner = PointInterner::new();
        let mut triangles: Vec<[usize; 3]> = Vec::with_capacity(8 * n * n);
        let mut side_nodes: Vec<Vec<u32>> = Vec::with_capacity(8);
        for k in 0..8 {
            let mut prev: Vec<u32> = vec![interner.intern(C::new(0.0, 0.0))];
            for i in 1..=n {
                let scale = i as f64 / n as f64;
                let cur: Vec<u32> = (0..=i)
                    .map(|j| interner.intern(arc(k, j as f64 / i as f64) * scale))
                    .collect();
                for j in 0..i {
                    triangles.push([cur[j] as usize, cur[j + 1] as usize, prev[j] as usize]);
                    if j + 1 < i {
                        triangles.push([
                            prev[j] as usize,
                            cur[j + 1] as usize,
                            prev[j + 1] as usize,
                        ]);
                    }
                }
                prev = cur;
            }
            side_nodes.push(prev);
        }

        // boundary identification: side k node (n-j) <-> side k+4 node j
        let mut pairs = Vec::with_capacity(4 * (n + 1));
        for k in 0..4 {
            for j in 0..=n {
                pairs.push((side_nodes[k][n - j], side_nodes[k + 4][j], k as u8));
            }
        }

        Self::finish(group, resolution, interner.points, triangles, pairs)
    }

    /// Assemble dof structure, stiffness, weights and location buckets from
    /// raw mesh data; validates the quotient combinatorics.
    fn finish(
        group: FuchsianGroup,
        resolution: usize,
        points: Vec<C>,
        triangles: Vec<[usize; 3]>,
        pairs: Vec<(u32, u32, u8)>,
    ) -> Result<SurfaceMesh> {
        let n_nodes = points.len();
        for tri in &triangles {
            if tri.iter().any(|&v| v >= n_nodes) {
                return Err(Error::InvalidParameter("triangle references missing node".into()));
            }
        }
        let mut uf = UnionFind::new(n_nodes);
        for &(a, b, _) in &pairs {
            if a as usize >= n_nodes || b as usize >= n_nodes {
                return Err(Error::InvalidParameter("pair references missing node".into()));
            }
            uf.union(a, b);
        }
        let mut node_dof = vec![usize::MAX; n_nodes];
        let mut dof_node = Vec::new();
        let mut root_dof: HashMap<u32, usize> = HashMap::new();
        for i in 0..n_nodes {
            let r = uf.find(i as u32);
            let d = *root_dof.entry(r).or_insert_with(|| {
                dof_node.push(i);
                dof_node.len() - 1
            });
            node_dof[i] = d;
        }
        let n_dofs = dof_node.len();

        // edge census: interior chart edges appear twice, boundary edges once
        // and glue in pairs
        let mut edge_count: HashMap<(usize, usize), u32> = HashMap::new();
        for tri in &triangles {
            for e in 0..3 {
                let a = tri[e];
                let b = tri[(e + 1) % 3];
                let key = (a.min(b), a.max(b));
                *edge_count.entry(key).or_insert(0) += 1;
            }
        }
        let mut interior = 0usize;
        let mut boundary = 0usize;
        for &c in edge_count.values() {
            match c {
                2 => interior += 1,
                1 => boundary += 1,
                _ => {
                    return Err(Error::Numerical(format!(
                        "mesh edge shared by {c} triangles"
                    )))
                }
            }
        }
        if boundary % 2 != 0 {
            return Err(Error::Numerical("odd number of boundary edges".into()));
        }
        let n_edges = interior + boundary / 2;
        let euler = n_dofs as i64 - n_edges as i64 + triangles.len() as i64;
        if euler != -2 {
            return Err(Error::Numerical(format!(
                "quotient complex has Euler characteristic {euler}, expected -2"
            )));
        }

        // stiffness and lumped weights
        let mut triplets: Vec<(u32, u32, f64)> = Vec::with_capacity(9 * triangles.len());
        let mut node_area = vec![0.0_f64; n_nodes];
        for tri in &triangles {
            let p = [points[tri[0]], points[tri[1]], points[tri[2]]];
            let e = [p[2] - p[1], p[0] - p[2], p[1] - p[0]];
            let cross = e[2].re * (-e[1].im) - e[2].im * (-e[1].re);
            let area = 0.5 * cross.abs();
            if area < 1e-14 {
                return Err(Error::Numerical("degenerate mesh triangle".into()));
            }
            for a in 0..3 {
                node_area[tri[a]] += area / 3.0;
                for b in 0..3 {
                    let s = (e[a].re * e[b].re + e[a].im * e[b].im) / (4.0 * area);
                    triplets.push((node_dof[tri[a]] as u32, node_dof[tri[b]] as u32, s));
                }
            }
        }
        let stiffness = SparseMatrix::from_triplets(n_dofs, triplets);
        let mut weight = vec![0.0_f64; n_dofs];
        for i in 0..n_nodes {
            let s = sigma0(points[i]);
            weight[node_dof[i]] += s * s * node_area[i];
        }

        let buckets = BucketGrid::build(&points, &triangles, (2 * resolution).clamp(8, 256));

        Ok(SurfaceMesh {
            group,
            resolution,
            points,
            node_dof,
            dof_node,
            triangles,
            pairs,
            stiffness,
            weight,
            node_area,
            euler,
            buckets,
        })
    }

    pub fn group(&self) -> &FuchsianGroup {
        &self.group
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn n_dofs(&self) -> usize {
        self.dof_node.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.points.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// V - E + F of the quotient complex (always -2; stored for reporting).
    pub fn euler_characteristic(&self) -> i64 {
        self.euler
    }

    pub fn node_position(&self, node: usize) -> C {
        self.points[node]
    }

    pub fn node_dof(&self, node: usize) -> usize {
        self.node_dof[node]
    }

    /// Chart position of the representative node of a dof.
    pub fn dof_position(&self, dof: usize) -> C {
        self.points[self.dof_node[dof]]
    }

    /// Identified boundary node pairs `(a, b, k)`: generator k maps node b
    /// onto node a.
    pub fn boundary_pairs(&self) -> &[(u32, u32, u8)] {
        &self.pairs
    }

    pub fn triangle_nodes(&self, t: usize) -> [usize; 3] {
        self.triangles[t]
    }

    /// Flat cotangent stiffness matrix over dofs (positive semidefinite;
    /// annihilates constants).
    pub fn stiffness(&self) -> &SparseMatrix {
        &self.stiffness
    }

    /// Lumped curvature -1 area weight per dof; sums approximately to the
    /// surface area 4 pi.
    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    /// Reduce into the fundamental domain (no-op when already inside).
    fn reduce_chart_point(&self, z: C) -> C {
        if self.group.in_domain(z) {
            return z;
        }
        let z = if z.norm() >= 1.0 - 1e-9 { z * ((1.0 - 1e-9) / z.norm()) } else { z };
        match self.group.reduce(z) {
            Ok((r, _, _)) => r,
            Err(_) => z,
        }
    }

    fn barycentric(&self, t: usize, z: C) -> [f64; 3] {
        let tri = self.triangles[t];
        let p0 = self.points[tri[0]];
        let u = self.points[tri[1]] - p0;
        let v = self.points[tri[2]] - p0;
        let w = z - p0;
        let det = u.re * v.im - u.im * v.re;
        let l1 = (w.re * v.im - w.im * v.re) / det;
        let l2 = (u.re * w.im - u.im * w.re) / det;
        [1.0 - l1 - l2, l1, l2]
    }

    /// Containing (or nearest) triangle of an in-domain chart point, with
    /// clamped barycentric coordinates.
    pub fn locate(&self, z: C) -> (usize, [f64; 3]) {
        let z = self.reduce_chart_point(z);
        let (cx, cy) = self.buckets.cell_of(z);
        let nb = self.buckets.n as isize;
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        let consider = |mesh: &Self, t: usize, best: &mut Option<(usize, [f64; 3], f64)>| {
            let b = mesh.barycentric(t, z);
            let worst = b[0].min(b[1]).min(b[2]);
            if best.map_or(true, |(_, _, w)| worst > w) {
                *best = Some((t, b, worst));
            }
        };
        for ring in 0..2 {
            let r = ring as isize;
            for ix in (cx - r).max(0)..=(cx + r).min(nb - 1) {
                for iy in (cy - r).max(0)..=(cy + r).min(nb - 1) {
                    if ring == 1 && (ix - cx).abs() < 1 && (iy - cy).abs() < 1 {
                        continue;
                    }
                    for &t in &self.buckets.cells[(ix * nb + iy) as usize] {
                        consider(self, t as usize, &mut best);
                    }
                }
            }
            if let Some((_, _, w)) = best {
                if w >= -1e-9 {
                    break;
                }
            }
        }
        if best.map_or(true, |(_, _, w)| w < -0.05) {
            // rare fallback for genuinely unresolved probes: scan everything
            // (points in the thin sliver between the outer chord row and the
            // true geodesic side clamp to the adjacent boundary triangle and
            // never get here)
            for t in 0..self.triangles.len() {
                consider(self, t, &mut best);
            }
        }
        let (t, mut b, _) = best.expect("mesh has triangles");
        for x in &mut b {
            *x = x.max(0.0);
        }
        let s = b[0] + b[1] + b[2];
        for x in &mut b {
            *x /= s;
        }
        (t, b)
    }

    /// Interpolate a dof vector at a chart point (piecewise linear).
    pub fn interpolate(&self, values: &[f64], z: C) -> f64 {
        let (t, b) = self.locate(z);
        let tri = self.triangles[t];
        (0..3).map(|a| b[a] * values[self.node_dof[tri[a]]]).sum()
    }

    // -- text serialization --------------------------------------------------

    /// Write the mesh in the plain text exchange format: a header with
    /// counts, one `v x y` line per node, one `t a b c` line per triangle and
    /// one `p a b k` line per boundary identification.
    pub fn write_text<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "surface-mesh 1 {}", self.resolution)?;
        writeln!(
            out,
            "counts {} {} {}",
            self.points.len(),
            self.triangles.len(),
            self.pairs.len()
        )?;
        for p in &self.points {
            writeln!(out, "v {:.17e} {:.17e}", p.re, p.im)?;
        }
        for t in &self.triangles {
            writeln!(out, "t {} {} {}", t[0], t[1], t[2])?;
        }
        for &(a, b, k) in &self.pairs {
            writeln!(out, "p {a} {b} {k}")?;
        }
        Ok(())
    }

    /// Parse the text exchange format written by [`write_text`](Self::write_text).
    pub fn read_text<R: BufRead>(input: &mut R) -> Result<SurfaceMesh> {
        let bad = |msg: &str| Error::InvalidParameter(format!("mesh text format: {msg}"));
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| bad("missing header"))??;
        let mut hp = header.split_whitespace();
        if hp.next() != Some("surface-mesh") || hp.next() != Some("1") {
            return Err(bad("unrecognized header"));
        }
        let resolution: usize =
            hp.next().ok_or_else(|| bad("missing resolution"))?.parse().map_err(|_| bad("resolution"))?;
        let counts = lines.next().ok_or_else(|| bad("missing counts"))??;
        let mut cp = counts.split_whitespace();
        if cp.next() != Some("counts") {
            return Err(bad("missing counts line"));
        }
        let nv: usize = cp.next().ok_or_else(|| bad("counts"))?.parse().map_err(|_| bad("counts"))?;
        let nt: usize = cp.next().ok_or_else(|| bad("counts"))?.parse().map_err(|_| bad("counts"))?;
        let np: usize = cp.next().ok_or_else(|| bad("counts"))?.parse().map_err(|_| bad("counts"))?;
        let mut points = Vec::with_capacity(nv);
        let mut triangles = Vec::with_capacity(nt);
        let mut pairs = Vec::with_capacity(np);
        for line in lines {
            let line = line?;
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let x: f64 = parts.next().ok_or_else(|| bad("v"))?.parse().map_err(|_| bad("v"))?;
                    let y: f64 = parts.next().ok_or_else(|| bad("v"))?.parse().map_err(|_| bad("v"))?;
                    points.push(C::new(x, y));
                }
                Some("t") => {
                    let mut tri = [0usize; 3];
                    for t in &mut tri {
                        *t = parts.next().ok_or_else(|| bad("t"))?.parse().map_err(|_| bad("t"))?;
                    }
                    triangles.push(tri);
                }
                Some("p") => {
                    let a: u32 = parts.next().ok_or_else(|| bad("p"))?.parse().map_err(|_| bad("p"))?;
                    let b: u32 = parts.next().ok_or_else(|| bad("p"))?.parse().map_err(|_| bad("p"))?;
                    let k: u8 = parts.next().ok_or_else(|| bad("p"))?.parse().map_err(|_| bad("p"))?;
                    pairs.push((a, b, k));
                }
                Some(other) => return Err(bad(&format!("unknown record '{other}'"))),
                None => {}
            }
        }
        if points.len() != nv || triangles.len() != nt || pairs.len() != np {
            return Err(bad("counts disagree with records"));
        }
        Self::finish(FuchsianGroup::genus2_octagon(), resolution, points, triangles, pairs)
    }
}

// ---------------------------------------------------------------------------
// Mesh-backed scalar fields
// ---------------------------------------------------------------------------

/// Piecewise-linear interpolant of a dof vector, exposed as a
/// [`SampledScalar`]: values interpolate directly, the chart gradient comes
/// from area-averaged triangle gradients (continuous across elements), and
/// the flat Laplacian interpolates the discrete metric Laplacian
/// -(S u)/W scaled back to chart units.
#[derive(Debug)]
pub struct MeshField {
    mesh: Arc<SurfaceMesh>,
    values: Vec<f64>,
    node_grad: Vec<C>,
    dof_laplacian: Vec<f64>,
}

impl MeshField {
    pub fn from_dof_values(mesh: Arc<SurfaceMesh>, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.n_dofs() {
            return Err(Error::InvalidParameter(format!(
                "field has {} values for {} dofs",
                values.len(),
                mesh.n_dofs()
            )));
        }
        // recovered gradient: area-weighted average of adjacent element
        // gradients, per chart node (paired nodes keep their own chart frame)
        let mut grad_sum = vec![C::new(0.0, 0.0); mesh.n_nodes()];
        for tri in &mesh.triangles {
            let p = [mesh.points[tri[0]], mesh.points[tri[1]], mesh.points[tri[2]]];
            let e = [p[2] - p[1], p[0] - p[2], p[1] - p[0]];
            let twice_signed = e[2].re * (-e[1].im) - e[2].im * (-e[1].re);
            let mut g = C::new(0.0, 0.0);
            for a in 0..3 {
                // grad of hat a = rot90(opposite edge) / (2 signed area)
                let rot = C::new(-e[a].im, e[a].re);
                g += rot * (values[mesh.node_dof[tri[a]]] / twice_signed);
            }
            let area = 0.5 * twice_signed.abs();
            for &v in tri {
                grad_sum[v] += g * (area / 3.0);
            }
        }
        let node_grad: Vec<C> = grad_sum
            .iter()
            .zip(&mesh.node_area)
            .map(|(g, &a)| g / a)
            .collect();
        // metric Laplacian at dofs: S u + W lap = 0 for the interpolant
        let mut su = vec![0.0; mesh.n_dofs()];
        mesh.stiffness.mul_vec(&values, &mut su);
        let dof_laplacian: Vec<f64> =
            su.iter().zip(&mesh.weight).map(|(s, &w)| -s / w).collect();
        Ok(Self { mesh, values, node_grad, dof_laplacian })
    }

    pub fn mesh(&self) -> &Arc<SurfaceMesh> {
        &self.mesh
    }

    pub fn dof_values(&self) -> &[f64] {
        &self.values
    }

    /// Curvature -1 metric Laplacian of the interpolant at each dof.
    pub fn dof_laplacian(&self) -> &[f64] {
        &self.dof_laplacian
    }

    fn interp_tri<F: Fn(usize, usize) -> f64>(&self, t: usize, b: [f64; 3], f: F) -> f64 {
        let tri = self.mesh.triangles[t];
        (0..3).map(|a| b[a] * f(tri[a], self.mesh.node_dof[tri[a]])).sum()
    }
}

impl MeshField {
    /// Reduce to the fundamental domain, keeping the deck map for chain
    /// rules (identity when already inside).
    fn reduce_with_deck(&self, z: C) -> (C, Option<crate::geom::MobiusTransform>) {
        if self.mesh.group.in_domain(z) {
            return (z, None);
        }
        let z = if z.norm() >= 1.0 - 1e-9 { z * ((1.0 - 1e-9) / z.norm()) } else { z };
        match self.mesh.group.reduce(z) {
            Ok((zr, deck, _)) => (zr, Some(deck)),
            Err(_) => (z, None),
        }
    }
}

impl SampledScalar for MeshField {
    fn value(&self, z: C) -> f64 {
        let (zr, _) = self.reduce_with_deck(z);
        let (t, b) = self.mesh.locate(zr);
        self.interp_tri(t, b, |_, d| self.values[d])
    }

    fn chart_gradient(&self, z: C) -> C {
        let (zr, deck) = self.reduce_with_deck(z);
        let (t, b) = self.mesh.locate(zr);
        let tri = self.mesh.triangles[t];
        let g: C = (0..3).map(|a| self.node_grad[tri[a]] * b[a]).sum();
        match deck {
            // gradient of the deck-invariant extension u(deck z)
            Some(d) => d.derivative(z).conj() * g,
            None => g,
        }
    }

    fn flat_laplacian(&self, z: C) -> f64 {
        let (zr, _) = self.reduce_with_deck(z);
        let (t, b) = self.mesh.locate(zr);
        // the metric Laplacian is deck-invariant; scale back to chart units
        // at the caller's own point
        let s = sigma0(z);
        s * s * self.interp_tri(t, b, |_, d| self.dof_laplacian[d])
    }
}
