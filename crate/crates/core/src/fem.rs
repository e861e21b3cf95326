//! P1 finite elements: sparse symmetric matrices, assembly, noise transfer
//! from square grids, loads, Jacobi-preconditioned conjugate gradients,
//! norms, prolongation and the Hilbert-Schmidt norm of the interpolated noise.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{Mesh, MeshFamily, Point2, UniformGrid};
use crate::kernels::{BoundaryCondition, KernelSpec};

/// Symmetric 7-point rule of degree 5 on a triangle: barycentric point and weight (weights sum to 1).
pub const DEGREE5_RULE: [([f64; 3], f64); 7] = {
    const A1: f64 = 0.797_426_985_353_087_3;
    const B1: f64 = 0.101_286_507_323_456_33;
    const W1: f64 = 0.125_939_180_544_827_17;
    const A2: f64 = 0.059_715_871_789_769_82;
    const B2: f64 = 0.470_142_064_105_115_1;
    const W2: f64 = 0.132_394_152_788_506_16;
    const C: f64 = 1.0 / 3.0;
    [
        ([C, C, C], 0.225),
        ([A1, B1, B1], W1),
        ([B1, A1, B1], W1),
        ([B1, B1, A1], W1),
        ([A2, B2, B2], W2),
        ([B2, A2, B2], W2),
        ([B2, B2, A2], W2),
    ]
};

/// Barycentric points of the 3-edge-midpoint rule (equal weights 1/3), ordered `ab, bc, ca`.
pub const MIDPOINT_RULE: [[f64; 3]; 3] = [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]];

/// Gradients of the barycentric coordinates of a triangle, and its area.
pub fn p1_gradients(v: &[Point2; 3]) -> ([[f64; 2]; 3], f64) {
    let a2 = (v[1].x - v[0].x) * (v[2].y - v[0].y) - (v[2].x - v[0].x) * (v[1].y - v[0].y);
    let mut g = [[0.0; 2]; 3];
    for i in 0..3 {
        let p = v[(i + 1) % 3];
        let q = v[(i + 2) % 3];
        g[i] = [(p.y - q.y) / a2, (q.x - p.x) / a2];
    }
    (g, 0.5 * a2)
}

fn bary_point(v: &[Point2; 3], l: &[f64; 3]) -> Point2 {
    Point2::new(
        l[0] * v[0].x + l[1] * v[1].x + l[2] * v[2].x,
        l[0] * v[0].y + l[1] * v[1].y + l[2] * v[2].y,
    )
}

/// Compressed sparse row storage of a symmetric matrix (both triangles stored).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSpd {
    n: usize,
    row_ptr: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
}

impl SparseSpd {
    /// Sums duplicate `(row, col, value)` triplets.
    pub fn from_triplets(n: usize, mut trips: Vec<(usize, usize, f64)>) -> Self {
        trips.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col = Vec::with_capacity(trips.len());
        let mut val: Vec<f64> = Vec::with_capacity(trips.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trips {
            if last == Some((r, c)) {
                *val.last_mut().expect("previous entry") += v;
            } else {
                col.push(c);
                val.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseSpd {
            n,
            row_ptr,
            col,
            val,
        }
    }

    pub fn identity(n: usize) -> Self {
        SparseSpd {
            n,
            row_ptr: (0..=n).collect(),
            col: (0..n).collect(),
            val: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let cols = &self.col[self.row_ptr[i]..self.row_ptr[i + 1]];
        match cols.binary_search(&j) {
            Ok(k) => self.val[self.row_ptr[i] + k],
            Err(_) => 0.0,
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// `y = A x`.
    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.val[k] * x[self.col[k]];
            }
            *yi = s;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    /// `x^T A x`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            let mut r = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                r += self.val[k] * x[self.col[k]];
            }
            s += x[i] * r;
        }
        s
    }

    /// `alpha A + beta B` for matrices with identical sparsity patterns.
    pub fn combine(alpha: f64, a: &SparseSpd, beta: f64, b: &SparseSpd) -> Result<SparseSpd> {
        if a.n != b.n || a.row_ptr != b.row_ptr || a.col != b.col {
            return Err(Error::config("matrices have different sparsity patterns"));
        }
        Ok(SparseSpd {
            n: a.n,
            row_ptr: a.row_ptr.clone(),
            col: a.col.clone(),
            val: a
                .val
                .iter()
                .zip(&b.val)
                .map(|(x, y)| alpha * x + beta * y)
                .collect(),
        })
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                row[self.col[k]] = self.val[k];
            }
        }
        d
    }

    /// Largest `|A_ij - A_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.val.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                worst = worst.max((self.val[k] - self.get(self.col[k], i)).abs());
            }
        }
        if scale > 0.0 {
            worst / scale
        } else {
            0.0
        }
    }

    /// Coordinate triplet text: header `# n nnz`, then `row col value` lines.
    pub fn to_triplet_string(&self) -> String {
        let mut s = format!("# {} {}\n", self.n, self.nnz());
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let _ = writeln!(s, "{} {} {}", i, self.col[k], self.val[k]);
            }
        }
        s
    }

    pub fn write_triplets(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_triplet_string()).map_err(|e| Error::io(path, e))
    }
}

/// Degrees of freedom: all nodes (Neumann) or interior nodes (Dirichlet).
#[derive(Debug, Clone, PartialEq)]
pub struct DofMap {
    bc: BoundaryCondition,
    free_nodes: Vec<usize>,
    node_to_dof: Vec<Option<usize>>,
}

impl DofMap {
    pub fn new(mesh: &Mesh, bc: BoundaryCondition) -> Self {
        let mut node_to_dof = vec![None; mesh.n_nodes()];
        let mut free_nodes = Vec::with_capacity(mesh.n_nodes());
        for (node, slot) in node_to_dof.iter_mut().enumerate() {
            if bc == BoundaryCondition::Neumann || !mesh.is_boundary(node) {
                *slot = Some(free_nodes.len());
                free_nodes.push(node);
            }
        }
        DofMap {
            bc,
            free_nodes,
            node_to_dof,
        }
    }

    pub fn bc(&self) -> BoundaryCondition {
        self.bc
    }

    pub fn n_dofs(&self) -> usize {
        self.free_nodes.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.node_to_dof.len()
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.free_nodes
    }

    pub fn dof(&self, node: usize) -> Option<usize> {
        self.node_to_dof[node]
    }

    /// Nodal values with zeros at eliminated Dirichlet nodes.
    pub fn to_nodal_into(&self, coeffs: &[f64], nodal: &mut [f64]) {
        nodal.iter_mut().for_each(|v| *v = 0.0);
        for (&node, &c) in self.free_nodes.iter().zip(coeffs) {
            nodal[node] = c;
        }
    }

    pub fn to_nodal(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut nodal = vec![0.0; self.n_nodes()];
        self.to_nodal_into(coeffs, &mut nodal);
        nodal
    }

    /// Restriction of nodal values to the free dofs.
    pub fn from_nodal(&self, nodal: &[f64]) -> Vec<f64> {
        self.free_nodes.iter().map(|&n| nodal[n]).collect()
    }
}

/// Coefficient vector of a P1 function over the free dofs of a [`FemSpace`].
#[derive(Debug, Clone, PartialEq)]
pub struct FemField {
    pub coeffs: Vec<f64>,
}

impl FemField {
    pub fn zeros(n: usize) -> Self {
        FemField {
            coeffs: vec![0.0; n],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|v| v.is_finite())
    }
}

pub type CoefficientFn = dyn Fn(Point2) -> ([[f64; 2]; 2], f64) + Send + Sync;

/// Coefficients `(a_ij, c)` of `a(u, v) = sum_ij int a_ij d_i u d_j v + int c u v`.
#[derive(Clone)]
pub enum EllipticCoefficients {
    Constant { a: [[f64; 2]; 2], c: f64 },
    Variable(Arc<CoefficientFn>),
}

impl std::fmt::Debug for EllipticCoefficients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EllipticCoefficients::Constant { a, c } => write!(f, "Constant {{ a: {a:?}, c: {c} }}"),
            EllipticCoefficients::Variable(_) => write!(f, "Variable(..)"),
        }
    }
}

impl EllipticCoefficients {
    /// `alpha (-Laplace) + c`.
    pub fn scaled_laplace(alpha: f64, c: f64) -> Self {
        EllipticCoefficients::Constant {
            a: [[alpha, 0.0], [0.0, alpha]],
            c,
        }
    }

    pub fn at(&self, p: Point2) -> ([[f64; 2]; 2], f64) {
        match self {
            EllipticCoefficients::Constant { a, c } => (*a, *c),
            EllipticCoefficients::Variable(f) => f(p),
        }
    }

    fn check(&self, p: Point2, bc: BoundaryCondition) -> Result<()> {
        let (a, c) = self.at(p);
        if (a[0][1] - a[1][0]).abs() > 1e-14 * (a[0][1].abs() + a[1][0].abs()).max(1.0) {
            return Err(Error::config(format!(
                "coefficient matrix not symmetric at {p:?}"
            )));
        }
        let tr = a[0][0] + a[1][1];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let lambda_min = 0.5 * tr - (0.25 * tr * tr - det).max(0.0).sqrt();
        if !(lambda_min > 0.0) {
            return Err(Error::config(format!(
                "coefficients not elliptic at {p:?} (smallest eigenvalue {lambda_min})"
            )));
        }
        if !(c >= 0.0) {
            return Err(Error::config(format!(
                "reaction coefficient c = {c} negative at {p:?}"
            )));
        }
        if bc == BoundaryCondition::Neumann && !(c > 0.0) {
            return Err(Error::config(format!(
                "Neumann problems need c > 0, got c = {c} at {p:?}"
            )));
        }
        Ok(())
    }
}

fn local_mass(area: f64) -> [[f64; 3]; 3] {
    let d = area / 6.0;
    let o = area / 12.0;
    [[d, o, o], [o, d, o], [o, o, d]]
}

fn assemble_local<F>(mesh: &Mesh, dofs: &DofMap, mut local: F) -> Result<SparseSpd>
where
    F: FnMut(&[Point2; 3]) -> Result<[[f64; 3]; 3]>,
{
    let mut trips = Vec::with_capacity(9 * mesh.n_triangles());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let k = local(&mesh.vertices(t))?;
        for i in 0..3 {
            let Some(di) = dofs.dof(tri[i]) else { continue };
            for j in 0..3 {
                if let Some(dj) = dofs.dof(tri[j]) {
                    trips.push((di, dj, k[i][j]));
                }
            }
        }
    }
    Ok(SparseSpd::from_triplets(dofs.n_dofs(), trips))
}

/// `M[k, l] = int phi_k phi_l`, exact.
pub fn assemble_mass(mesh: &Mesh, dofs: &DofMap) -> SparseSpd {
    assemble_local(mesh, dofs, |v| {
        let (_, area) = p1_gradients(v);
        Ok(local_mass(area))
    })
    .expect("mass assembly cannot fail")
}

/// `S[k, l] = a(phi_k, phi_l)`; variable coefficients use the edge-midpoint rule.
pub fn assemble_stiffness(
    mesh: &Mesh,
    dofs: &DofMap,
    coeffs: &EllipticCoefficients,
) -> Result<SparseSpd> {
    assemble_local(mesh, dofs, |v| {
        let (g, area) = p1_gradients(v);
        let mut k = [[0.0; 3]; 3];
        let mids: Vec<Point2> = MIDPOINT_RULE.iter().map(|l| bary_point(v, l)).collect();
        let (a, c_mass) = match coeffs {
            EllipticCoefficients::Constant { a, c } => {
                coeffs.check(mids[0], dofs.bc())?;
                let m = local_mass(area);
                let mut cm = [[0.0; 3]; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        cm[i][j] = c * m[i][j];
                    }
                }
                (*a, cm)
            }
            EllipticCoefficients::Variable(_) => {
                let mut a = [[0.0; 2]; 2];
                let mut cm = [[0.0; 3]; 3];
                for (l, &p) in MIDPOINT_RULE.iter().zip(&mids) {
                    coeffs.check(p, dofs.bc())?;
                    let (ap, cp) = coeffs.at(p);
                    for r in 0..2 {
                        for s in 0..2 {
                            a[r][s] += ap[r][s] / 3.0;
                        }
                    }
                    for i in 0..3 {
                        for j in 0..3 {
                            cm[i][j] += area / 3.0 * cp * l[i] * l[j];
                        }
                    }
                }
                (a, cm)
            }
        };
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for r in 0..2 {
                    for q in 0..2 {
                        s += a[r][q] * g[i][r] * g[j][q];
                    }
                }
                k[i][j] = area * s + c_mass[i][j];
            }
        }
        Ok(k)
    })
}

/// Interpolation weights taking square-grid nodal values to mesh nodal values.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTransfer {
    grid_level: u32,
    grid_nodes: usize,
    rows: Vec<[(usize, f64); 3]>,
}

impl NoiseTransfer {
    pub fn new(grid: &UniformGrid, mesh: &Mesh) -> Result<Self> {
        let rows = mesh
            .nodes()
            .iter()
            .map(|&p| {
                let loc = grid.locate(p)?;
                let tri = grid.triangle_nodes(loc.triangle);
                Ok([
                    (tri[0], loc.bary[0]),
                    (tri[1], loc.bary[1]),
                    (tri[2], loc.bary[2]),
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NoiseTransfer {
            grid_level: grid.level(),
            grid_nodes: grid.n_nodes(),
            rows,
        })
    }

    pub fn grid_level(&self) -> u32 {
        self.grid_level
    }

    pub fn grid_nodes(&self) -> usize {
        self.grid_nodes
    }

    /// Nonzero weights `(grid node, phi'_m(x_n))` for mesh node `n`.
    pub fn row(&self, node: usize) -> &[(usize, f64); 3] {
        &self.rows[node]
    }

    pub fn apply_into(&self, square_values: &[f64], out: &mut [f64]) -> Result<()> {
        if square_values.len() != self.grid_nodes {
            return Err(Error::config(format!(
                "expected {} grid values for level {}, got {}",
                self.grid_nodes,
                self.grid_level,
                square_values.len()
            )));
        }
        for (o, row) in out.iter_mut().zip(&self.rows) {
            *o = row.iter().map(|&(k, w)| w * square_values[k]).sum();
        }
        Ok(())
    }

    pub fn apply(&self, square_values: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.rows.len()];
        self.apply_into(square_values, &mut out)?;
        Ok(out)
    }
}

/// Nodal values of `I_h R I_h' w` on `mesh` for grid values `w`.
pub fn transfer_noise(square_values: &[f64], grid: &UniformGrid, mesh: &Mesh) -> Result<Vec<f64>> {
    NoiseTransfer::new(grid, mesh)?.apply(square_values)
}

/// Load `b_k = int G(x, u_h, w_h, grad u_h) phi_k` by the edge-midpoint rule over free dofs.
///
/// `integrand` receives the midpoint, the interpolated nodal values `u` and `w` there,
/// and the (constant) gradient of `u_h` on the triangle.
pub fn midpoint_load<F>(
    mesh: &Mesh,
    dofs: &DofMap,
    u_nodal: &[f64],
    w_nodal: Option<&[f64]>,
    need_gradient: bool,
    out: &mut [f64],
    mut integrand: F,
) where
    F: FnMut(Point2, f64, f64, [f64; 2]) -> f64,
{
    out.iter_mut().for_each(|v| *v = 0.0);
    let nodes = mesh.nodes();
    for tri in mesh.triangles() {
        let v = [nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]];
        let (grad, area) = if need_gradient {
            let (g, area) = p1_gradients(&v);
            let mut gu = [0.0; 2];
            for i in 0..3 {
                gu[0] += u_nodal[tri[i]] * g[i][0];
                gu[1] += u_nodal[tri[i]] * g[i][1];
            }
            (gu, area)
        } else {
            let a2 = (v[1].x - v[0].x) * (v[2].y - v[0].y) - (v[2].x - v[0].x) * (v[1].y - v[0].y);
            ([0.0; 2], 0.5 * a2)
        };
        let mut vals = [0.0; 3];
        for (e, val) in vals.iter_mut().enumerate() {
            let (i, j) = (e, (e + 1) % 3);
            let p = v[i].midpoint(v[j]);
            let u = 0.5 * (u_nodal[tri[i]] + u_nodal[tri[j]]);
            let w = w_nodal.map_or(1.0, |w| 0.5 * (w[tri[i]] + w[tri[j]]));
            *val = integrand(p, u, w, grad);
        }
        // vertex i touches midpoints of edges (i, i+1) and (i-1, i)
        let s = area / 6.0;
        for i in 0..3 {
            if let Some(d) = dofs.dof(tri[i]) {
                out[d] += s * (vals[i] + vals[(i + 2) % 3]);
            }
        }
    }
}

/// `b_k = int g(u_h, x) w_h phi_k` (w_h = 1 when absent).
pub fn load_semilinear<G>(
    mesh: &Mesh,
    dofs: &DofMap,
    u_nodal: &[f64],
    g: G,
    weight: Option<&[f64]>,
) -> Vec<f64>
where
    G: Fn(f64, Point2) -> f64,
{
    let mut out = vec![0.0; dofs.n_dofs()];
    midpoint_load(
        mesh,
        dofs,
        u_nodal,
        weight,
        false,
        &mut out,
        |p, u, w, _| g(u, p) * w,
    );
    out
}

/// `b_k = int (b . grad u_h) phi_k` for a constant advection field `b`.
pub fn load_advection(mesh: &Mesh, dofs: &DofMap, u_nodal: &[f64], b: [f64; 2]) -> Vec<f64> {
    let mut out = vec![0.0; dofs.n_dofs()];
    midpoint_load(mesh, dofs, u_nodal, None, true, &mut out, |_, _, _, gu| {
        b[0] * gu[0] + b[1] * gu[1]
    });
    out
}

pub const DEFAULT_CG_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgStats {
    pub iterations: usize,
    pub residual: f64,
}

/// Work vectors for [`pcg`].
#[derive(Debug, Clone, Default)]
pub struct CgWorkspace {
    r: Vec<f64>,
    z: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
}

/// Jacobi-preconditioned conjugate gradients, warm-started from `x`, to relative residual `tol`.
pub fn pcg(
    a: &SparseSpd,
    inv_diag: &[f64],
    rhs: &[f64],
    x: &mut [f64],
    tol: f64,
    ws: &mut CgWorkspace,
) -> Result<CgStats> {
    let n = a.dim();
    let bnorm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !bnorm.is_finite() {
        return Err(Error::Numeric(format!("right-hand side norm is {bnorm}")));
    }
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgStats {
            iterations: 0,
            residual: 0.0,
        });
    }
    for v in [&mut ws.r, &mut ws.z, &mut ws.p, &mut ws.q] {
        v.resize(n, 0.0);
    }
    a.matvec_into(x, &mut ws.q);
    for i in 0..n {
        ws.r[i] = rhs[i] - ws.q[i];
    }
    let mut rnorm = ws.r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if rnorm <= tol * bnorm {
        return Ok(CgStats {
            iterations: 0,
            residual: rnorm / bnorm,
        });
    }
    for i in 0..n {
        ws.z[i] = inv_diag[i] * ws.r[i];
        ws.p[i] = ws.z[i];
    }
    let mut rz: f64 = ws.r.iter().zip(&ws.z).map(|(a, b)| a * b).sum();
    let max_iter = 10 * n.max(1);
    for it in 1..=max_iter {
        a.matvec_into(&ws.p, &mut ws.q);
        let pq: f64 = ws.p.iter().zip(&ws.q).map(|(a, b)| a * b).sum();
        if !(pq > 0.0) {
            return Err(Error::Numeric(format!(
                "conjugate gradients broke down (p^T A p = {pq:e})"
            )));
        }
        let alpha = rz / pq;
        let mut rr = 0.0;
        for i in 0..n {
            x[i] += alpha * ws.p[i];
            ws.r[i] -= alpha * ws.q[i];
            rr += ws.r[i] * ws.r[i];
        }
        rnorm = rr.sqrt();
        if rnorm <= tol * bnorm {
            return Ok(CgStats {
                iterations: it,
                residual: rnorm / bnorm,
            });
        }
        let mut rz_new = 0.0;
        for i in 0..n {
            ws.z[i] = inv_diag[i] * ws.r[i];
            rz_new += ws.r[i] * ws.z[i];
        }
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            ws.p[i] = ws.z[i] + beta * ws.p[i];
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: rnorm / bnorm,
    })
}

pub fn inverse_diagonal(a: &SparseSpd) -> Result<Vec<f64>> {
    a.diag()
        .into_iter()
        .map(|d| {
            if d > 0.0 {
                Ok(1.0 / d)
            } else {
                Err(Error::Numeric(format!("non-positive diagonal entry {d:e}")))
            }
        })
        .collect()
}

/// Solves `A x = rhs` from a zero initial guess.
pub fn solve_spd(a: &SparseSpd, rhs: &[f64], tol: f64) -> Result<Vec<f64>> {
    let inv = inverse_diagonal(a)?;
    let mut x = vec![0.0; a.dim()];
    pcg(a, &inv, rhs, &mut x, tol, &mut CgWorkspace::default())?;
    Ok(x)
}

/// `sqrt(u^T M u)`.
pub fn l2_norm(coeffs: &[f64], mass: &SparseSpd) -> f64 {
    mass.quadratic_form(coeffs).max(0.0).sqrt()
}

/// P1 space on a mesh with its dof map and mass matrix.
#[derive(Debug, Clone)]
pub struct FemSpace {
    mesh: Arc<Mesh>,
    dofs: DofMap,
    mass: SparseSpd,
    mass_inv_diag: Vec<f64>,
}

impl FemSpace {
    pub fn new(mesh: Arc<Mesh>, bc: BoundaryCondition) -> Self {
        let dofs = DofMap::new(&mesh, bc);
        let mass = assemble_mass(&mesh, &dofs);
        let mass_inv_diag = inverse_diagonal(&mass).expect("mass diagonal is positive");
        FemSpace {
            mesh,
            dofs,
            mass,
            mass_inv_diag,
        }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn dofs(&self) -> &DofMap {
        &self.dofs
    }

    pub fn bc(&self) -> BoundaryCondition {
        self.dofs.bc()
    }

    pub fn mass(&self) -> &SparseSpd {
        &self.mass
    }

    pub fn n_dofs(&self) -> usize {
        self.dofs.n_dofs()
    }

    pub fn l2_norm(&self, field: &FemField) -> f64 {
        l2_norm(&field.coeffs, &self.mass)
    }

    /// Nodal interpolant restricted to the free dofs.
    pub fn interpolate<F: Fn(Point2) -> f64>(&self, f: F) -> FemField {
        FemField {
            coeffs: self
                .dofs
                .free_nodes()
                .iter()
                .map(|&n| f(self.mesh.nodes()[n]))
                .collect(),
        }
    }

    /// `L^2` projection with loads from the edge-midpoint rule.
    pub fn l2_project<F: Fn(Point2) -> f64>(&self, f: F) -> Result<FemField> {
        let zeros = vec![0.0; self.mesh.n_nodes()];
        let mut rhs = vec![0.0; self.n_dofs()];
        midpoint_load(
            &self.mesh,
            &self.dofs,
            &zeros,
            None,
            false,
            &mut rhs,
            |p, _, _, _| f(p),
        );
        if let Some(v) = rhs.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite projection load {v}")));
        }
        let mut x = vec![0.0; self.n_dofs()];
        pcg(
            &self.mass,
            &self.mass_inv_diag,
            &rhs,
            &mut x,
            DEFAULT_CG_TOL,
            &mut CgWorkspace::default(),
        )?;
        Ok(FemField { coeffs: x })
    }

    pub fn nodal(&self, field: &FemField) -> Vec<f64> {
        self.dofs.to_nodal(&field.coeffs)
    }

    /// Text dump: header `# level L bc NAME`, then `node_index value` lines over all nodes.
    pub fn field_dump_string(&self, field: &FemField) -> String {
        let mut s = format!("# level {} bc {}\n", self.mesh.level(), self.bc().name());
        for (i, v) in self.nodal(field).iter().enumerate() {
            let _ = writeln!(s, "{i} {v}");
        }
        s
    }

    pub fn write_field_dump(&self, path: &Path, field: &FemField) -> Result<()> {
        fs::write(path, self.field_dump_string(field)).map_err(|e| Error::io(path, e))
    }
}

/// Nodal values of a P1 function on level `from` evaluated at the nodes of level `to` of the same family.
pub fn prolong_nodal(family: &MeshFamily, from: u32, to: u32, nodal: &[f64]) -> Result<Vec<f64>> {
    if to < from {
        return Err(Error::config(format!(
            "cannot prolong from level {from} to coarser level {to}"
        )));
    }
    let mut cur = nodal.to_vec();
    if cur.len() != family.level(from)?.n_nodes() {
        return Err(Error::config("nodal vector does not match the source mesh"));
    }
    for l in from + 1..=to {
        let mesh = family.level(l)?;
        let r = mesh
            .refinement()
            .filter(|r| r.parent_nodes == cur.len())
            .ok_or_else(|| {
                Error::config(format!("level {l} is not a refinement of level {}", l - 1))
            })?;
        cur.reserve(r.midpoint_parents.len());
        for &[a, b] in &r.midpoint_parents {
            cur.push(0.5 * (cur[a] + cur[b]));
        }
    }
    Ok(cur)
}

/// Prolongs a field from `coarse` to `fine`, both spaces on meshes of `family`.
pub fn prolong(
    family: &MeshFamily,
    coarse: &FemSpace,
    field: &FemField,
    fine: &FemSpace,
) -> Result<FemField> {
    if coarse.bc() != fine.bc() {
        return Err(Error::config(
            "prolongation between different boundary conditions",
        ));
    }
    let nodal = prolong_nodal(
        family,
        coarse.mesh.level(),
        fine.mesh.level(),
        &coarse.nodal(field),
    )?;
    Ok(FemField {
        coeffs: fine.dofs.from_nodal(&nodal),
    })
}

/// `||B I_h R I_h'||_HS` for multiplication by the P1 function with nodal values `b_nodal`.
///
/// Evaluates `int b^2 sum_{l,n} phi_l phi_n (P Q P^T)[l, n]` with `P[n, m] = phi'_m(x_n)` and
/// `Q[k, m] = q(x'_k, x'_m)`, integrated exactly by the degree-5 rule.
pub fn hs_norm_interpolated(
    kernel: &KernelSpec,
    d_mesh: &Mesh,
    grid: &UniformGrid,
    b_nodal: &[f64],
) -> Result<f64> {
    if b_nodal.len() != d_mesh.n_nodes() {
        return Err(Error::config("b must be given by nodal values on the mesh"));
    }
    let transfer = NoiseTransfer::new(grid, d_mesh)?;
    let gn = grid.mesh().nodes();
    let pqp = |l: usize, n: usize| -> f64 {
        let mut s = 0.0;
        for &(k, wk) in transfer.row(l) {
            if wk == 0.0 {
                continue;
            }
            for &(m, wm) in transfer.row(n) {
                if wm != 0.0 {
                    s += wk * wm * kernel.eval(gn[k], gn[m]);
                }
            }
        }
        s
    };
    let mut total = 0.0;
    for (t, tri) in d_mesh.triangles().iter().enumerate() {
        let area = d_mesh.triangle_area(t);
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in i..3 {
                r[i][j] = pqp(tri[i], tri[j]);
                r[j][i] = r[i][j];
            }
        }
        for (lam, w) in DEGREE5_RULE {
            let b: f64 = (0..3).map(|i| lam[i] * b_nodal[tri[i]]).sum();
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += lam[i] * lam[j] * r[i][j];
                }
            }
            total += w * area * b * b * s;
        }
    }
    Ok(total.max(0.0).sqrt())
}
