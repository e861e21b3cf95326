//! Triangulations of the computational dodecagon and uniform grids on the unit square.
//!
//! Both families are nested: every refinement splits each triangle into four
//! congruent children through its edge midpoints and keeps the parent nodes as
//! a prefix of the child node list. Meshes are immutable once built.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::ops::{Add, Mul, Sub};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Largest refinement level accepted by the mesh constructors.
pub const MAX_LEVEL: u32 = 12;

/// Absolute tolerance for point-in-triangle and point-on-boundary tests.
pub const GEOMETRY_TOL: f64 = 1e-12;

pub const DODECAGON_CENTER: Point2 = Point2 { x: 0.5, y: 0.5 };
pub const DODECAGON_RADIUS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn midpoint(self, other: Point2) -> Point2 {
        Point2::new(0.5 * (self.x + other.x), 0.5 * (self.y + other.y))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<Point2> for f64 {
    type Output = Point2;
    fn mul(self, rhs: Point2) -> Point2 {
        Point2::new(self * rhs.x, self * rhs.y)
    }
}

/// Twice the signed area of the triangle (a, b, c); positive for counter-clockwise order.
pub fn signed_area2(a: Point2, b: Point2, c: Point2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y)
}

/// Barycentric coordinates of `p` with respect to the triangle (a, b, c).
pub fn barycentric(a: Point2, b: Point2, c: Point2, p: Point2) -> [f64; 3] {
    let det = signed_area2(a, b, c);
    let l1 = signed_area2(a, p, c) / det;
    let l2 = signed_area2(a, b, p) / det;
    [1.0 - l1 - l2, l1, l2]
}

/// The polygon a mesh covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Regular 12-gon centred at (0.5, 0.5) with circumradius 0.5.
    Dodecagon,
    UnitSquare,
    /// Anything else; boundary information is purely topological.
    Other,
}

impl Domain {
    pub fn dodecagon_vertices() -> [Point2; 12] {
        std::array::from_fn(|k| {
            let angle = 2.0 * PI * k as f64 / 12.0;
            Point2::new(
                DODECAGON_CENTER.x + DODECAGON_RADIUS * angle.cos(),
                DODECAGON_CENTER.y + DODECAGON_RADIUS * angle.sin(),
            )
        })
    }

    /// Area of the polygon; `None` for [`Domain::Other`].
    pub fn area(self) -> Option<f64> {
        match self {
            // (n/2) r^2 sin(2 pi / n) with n = 12
            Domain::Dodecagon => Some(3.0 * DODECAGON_RADIUS * DODECAGON_RADIUS),
            Domain::UnitSquare => Some(1.0),
            Domain::Other => None,
        }
    }

    /// Signed distance-like margin: nonnegative inside the closed polygon.
    fn margin(self, p: Point2) -> f64 {
        match self {
            Domain::Dodecagon => {
                let v = Self::dodecagon_vertices();
                (0..12)
                    .map(|k| {
                        let a = v[k];
                        let b = v[(k + 1) % 12];
                        signed_area2(a, b, p) / a.dist(b)
                    })
                    .fold(f64::INFINITY, f64::min)
            }
            Domain::UnitSquare => p.x.min(p.y).min(1.0 - p.x).min(1.0 - p.y),
            Domain::Other => f64::INFINITY,
        }
    }

    pub fn contains(self, p: Point2) -> bool {
        self.margin(p) >= -GEOMETRY_TOL
    }

    pub fn on_boundary(self, p: Point2) -> bool {
        match self {
            Domain::Other => false,
            _ => self.margin(p).abs() <= GEOMETRY_TOL,
        }
    }
}

/// Result of a point location query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub triangle: usize,
    pub bary: [f64; 3],
}

/// Record of how a mesh was obtained from its parent by regular refinement.
#[derive(Debug, Clone)]
pub struct Refinement {
    /// Number of nodes of the parent mesh (a prefix of this mesh's nodes).
    pub parent_nodes: usize,
    /// For every node beyond the prefix, the two parent nodes it bisects.
    pub midpoint_parents: Vec<[usize; 2]>,
}

/// Conforming triangulation with counter-clockwise triangles.
#[derive(Debug, Clone)]
pub struct Mesh {
    nodes: Vec<Point2>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<bool>,
    level: u32,
    h_max: f64,
    domain: Domain,
    refinement: Option<Refinement>,
}

impl Mesh {
    /// Builds a mesh, checking orientation and deriving the boundary from edge incidence.
    pub fn new(
        nodes: Vec<Point2>,
        triangles: Vec<[usize; 3]>,
        level: u32,
        domain: Domain,
    ) -> Result<Self> {
        if let Some(p) = nodes.iter().find(|p| !p.is_finite()) {
            return Err(Error::config(format!("non-finite node {p:?}")));
        }
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= nodes.len()) {
                return Err(Error::config(format!(
                    "triangle {t} references a missing node"
                )));
            }
            let a2 = signed_area2(nodes[tri[0]], nodes[tri[1]], nodes[tri[2]]);
            if !(a2 > 0.0) {
                return Err(Error::config(format!(
                    "triangle {t} has non-positive signed area {a2:e}"
                )));
            }
        }
        let mut boundary = vec![false; nodes.len()];
        let mut h_max: f64 = 0.0;
        for (&(a, b), &count) in edge_counts(&triangles).iter() {
            if count == 1 {
                boundary[a] = true;
                boundary[b] = true;
            }
            h_max = h_max.max(nodes[a].dist(nodes[b]));
        }
        Ok(Mesh {
            nodes,
            triangles,
            boundary,
            level,
            h_max,
            domain,
            refinement: None,
        })
    }

    pub fn nodes(&self) -> &[Point2] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.boundary[node]
    }

    pub fn boundary_flags(&self) -> &[bool] {
        &self.boundary
    }

    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.boundary[i])
            .collect()
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn h_max(&self) -> f64 {
        self.h_max
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn refinement(&self) -> Option<&Refinement> {
        self.refinement.as_ref()
    }

    pub fn vertices(&self, t: usize) -> [Point2; 3] {
        let [a, b, c] = self.triangles[t];
        [self.nodes[a], self.nodes[b], self.nodes[c]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.vertices(t);
        0.5 * signed_area2(a, b, c)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| self.triangle_area(t))
            .sum()
    }

    /// Smallest edge length over the mesh.
    pub fn h_min(&self) -> f64 {
        edge_counts(&self.triangles)
            .keys()
            .map(|&(a, b)| self.nodes[a].dist(self.nodes[b]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Locates `p` by scanning triangles in index order; the first containing triangle wins.
    pub fn locate(&self, p: Point2) -> Result<Location> {
        for (t, tri) in self.triangles.iter().enumerate() {
            let [a, b, c] = [self.nodes[tri[0]], self.nodes[tri[1]], self.nodes[tri[2]]];
            let lo_x = a.x.min(b.x).min(c.x) - GEOMETRY_TOL;
            let hi_x = a.x.max(b.x).max(c.x) + GEOMETRY_TOL;
            let lo_y = a.y.min(b.y).min(c.y) - GEOMETRY_TOL;
            let hi_y = a.y.max(b.y).max(c.y) + GEOMETRY_TOL;
            if p.x < lo_x || p.x > hi_x || p.y < lo_y || p.y > hi_y {
                continue;
            }
            let bary = barycentric(a, b, c, p);
            if bary.iter().all(|&l| l >= -GEOMETRY_TOL) {
                return Ok(Location { triangle: t, bary });
            }
        }
        Err(Error::Location { x: p.x, y: p.y })
    }

    /// Evaluates a P1 function given by nodal values at a located point.
    pub fn eval_at(&self, nodal: &[f64], loc: &Location) -> f64 {
        let tri = self.triangles[loc.triangle];
        (0..3).map(|k| loc.bary[k] * nodal[tri[k]]).sum()
    }

    /// Writes the plain-text dump: `nodes N triangles T`, node lines `x y flag`, triangle lines `i j k`.
    pub fn to_dump_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "nodes {} triangles {}",
            self.nodes.len(),
            self.triangles.len()
        );
        for (i, p) in self.nodes.iter().enumerate() {
            let _ = writeln!(out, "{} {} {}", p.x, p.y, u8::from(self.boundary[i]));
        }
        for t in &self.triangles {
            let _ = writeln!(out, "{} {} {}", t[0], t[1], t[2]);
        }
        out
    }

    pub fn write_dump(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_dump_string()).map_err(|e| Error::io(path, e))
    }
}

/// Number of triangles incident to each undirected edge, keyed by (min, max) node index.
pub fn edge_counts(triangles: &[[usize; 3]]) -> HashMap<(usize, usize), usize> {
    let mut counts = HashMap::with_capacity(triangles.len() * 2);
    for tri in triangles {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    counts
}

/// Regular refinement: each triangle is split into four through its edge midpoints.
pub fn refine(mesh: &Mesh) -> Mesh {
    let parent_nodes = mesh.nodes.len();
    let mut nodes = mesh.nodes.clone();
    let mut midpoint_parents = Vec::new();
    let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
    let mut triangles = Vec::with_capacity(4 * mesh.triangles.len());

    let mut midpoint = |a: usize, b: usize, nodes: &mut Vec<Point2>| -> usize {
        let key = (a.min(b), a.max(b));
        *midpoints.entry(key).or_insert_with(|| {
            nodes.push(nodes[a].midpoint(nodes[b]));
            midpoint_parents.push([key.0, key.1]);
            nodes.len() - 1
        })
    };

    for &[a, b, c] in &mesh.triangles {
        let ab = midpoint(a, b, &mut nodes);
        let bc = midpoint(b, c, &mut nodes);
        let ca = midpoint(c, a, &mut nodes);
        triangles.push([a, ab, ca]);
        triangles.push([ab, b, bc]);
        triangles.push([ca, bc, c]);
        triangles.push([ab, bc, ca]);
    }

    let mut boundary = vec![false; nodes.len()];
    for (&(a, b), &count) in edge_counts(&triangles).iter() {
        if count == 1 {
            boundary[a] = true;
            boundary[b] = true;
        }
    }

    Mesh {
        nodes,
        triangles,
        boundary,
        level: mesh.level + 1,
        h_max: 0.5 * mesh.h_max,
        domain: mesh.domain,
        refinement: Some(Refinement {
            parent_nodes,
            midpoint_parents,
        }),
    }
}

fn check_level(level: u32) -> Result<()> {
    if level > MAX_LEVEL {
        return Err(Error::config(format!(
            "mesh level {level} exceeds the maximum {MAX_LEVEL}"
        )));
    }
    Ok(())
}

/// Fan triangulation of the dodecagon from its centre, refined `level` times.
pub fn dodecagon_mesh(level: u32) -> Result<Mesh> {
    check_level(level)?;
    let mut mesh = dodecagon_base();
    for _ in 0..level {
        mesh = refine(&mesh);
    }
    Ok(mesh)
}

fn dodecagon_base() -> Mesh {
    let mut nodes = vec![DODECAGON_CENTER];
    nodes.extend(Domain::dodecagon_vertices());
    let triangles = (0..12).map(|k| [0, k + 1, (k + 1) % 12 + 1]).collect();
    Mesh::new(nodes, triangles, 0, Domain::Dodecagon).expect("fan triangulation is valid")
}

/// Mesh size of the dodecagon family at a level.
pub fn dodecagon_h(level: u32) -> f64 {
    0.5 * 0.5f64.powi(level as i32)
}

/// Grid spacing of the square family at a level.
pub fn square_h(level: u32) -> f64 {
    0.5f64.powi(level as i32)
}

/// A nested sequence of meshes, level 0 through `levels.len() - 1`.
#[derive(Debug, Clone)]
pub struct MeshFamily {
    levels: Vec<Arc<Mesh>>,
}

impl MeshFamily {
    pub fn dodecagon(max_level: u32) -> Result<Self> {
        check_level(max_level)?;
        Ok(Self::from_base(dodecagon_base(), max_level))
    }

    pub fn unit_square(max_level: u32) -> Result<Self> {
        check_level(max_level)?;
        Ok(Self::from_base(
            unit_square_grid(0)?.mesh().clone(),
            max_level,
        ))
    }

    fn from_base(base: Mesh, max_level: u32) -> Self {
        let mut levels = vec![Arc::new(base)];
        for _ in 0..max_level {
            let next = refine(levels.last().unwrap());
            levels.push(Arc::new(next));
        }
        MeshFamily { levels }
    }

    pub fn max_level(&self) -> u32 {
        (self.levels.len() - 1) as u32
    }

    pub fn level(&self, level: u32) -> Result<&Arc<Mesh>> {
        self.levels
            .get(level as usize)
            .ok_or_else(|| Error::config(format!("level {level} not in mesh family")))
    }
}

/// Uniform grid on the unit square with each cell split along its (0,0)-(1,1) diagonal.
#[derive(Debug, Clone)]
pub struct UniformGrid {
    level: u32,
    n_per_axis: usize,
    spacing: f64,
    mesh: Mesh,
}

/// Builds the uniform grid on [0,1]^2 with 2^level cells per axis.
pub fn unit_square_grid(level: u32) -> Result<UniformGrid> {
    check_level(level)?;
    let cells = 1usize << level;
    let n = cells + 1;
    let spacing = 1.0 / cells as f64;
    let nodes: Vec<Point2> = (0..n * n)
        .map(|idx| Point2::new((idx % n) as f64 * spacing, (idx / n) as f64 * spacing))
        .collect();
    let mut triangles = Vec::with_capacity(2 * cells * cells);
    for j in 0..cells {
        for i in 0..cells {
            let n00 = j * n + i;
            let n10 = n00 + 1;
            let n01 = n00 + n;
            let n11 = n01 + 1;
            triangles.push([n00, n10, n11]);
            triangles.push([n00, n11, n01]);
        }
    }
    let mut mesh = Mesh::new(nodes, triangles, level, Domain::UnitSquare)?;
    mesh.h_max = spacing * std::f64::consts::SQRT_2;
    Ok(UniformGrid {
        level,
        n_per_axis: n,
        spacing,
        mesh,
    })
}

impl UniformGrid {
    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn n_per_axis(&self) -> usize {
        self.n_per_axis
    }

    pub fn n_nodes(&self) -> usize {
        self.n_per_axis * self.n_per_axis
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * self.n_per_axis + i
    }

    pub fn node(&self, i: usize, j: usize) -> Point2 {
        Point2::new(i as f64 * self.spacing, j as f64 * self.spacing)
    }

    /// Constant-time location by index arithmetic.
    ///
    /// Points on shared edges go to the lowest-index containing triangle, which
    /// matches [`Mesh::locate`] on the underlying mesh.
    pub fn locate(&self, p: Point2) -> Result<Location> {
        if !p.is_finite() || !Domain::UnitSquare.contains(p) {
            return Err(Error::Location { x: p.x, y: p.y });
        }
        let cells = self.n_per_axis - 1;
        let cell_of = |v: f64| -> usize {
            let s = v / self.spacing;
            let c = s.ceil() as i64 - 1;
            c.clamp(0, cells as i64 - 1) as usize
        };
        let (ci, cj) = (cell_of(p.x), cell_of(p.y));
        let lx = p.x / self.spacing - ci as f64;
        let ly = p.y / self.spacing - cj as f64;
        let cell = cj * cells + ci;
        if ly <= lx {
            Ok(Location {
                triangle: 2 * cell,
                bary: [1.0 - lx, lx - ly, ly],
            })
        } else {
            Ok(Location {
                triangle: 2 * cell + 1,
                bary: [1.0 - ly, lx, ly - lx],
            })
        }
    }

    /// Grid node indices of the triangle returned by [`UniformGrid::locate`].
    pub fn triangle_nodes(&self, t: usize) -> [usize; 3] {
        self.mesh.triangles[t]
    }
}
