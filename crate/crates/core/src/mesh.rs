//! Structured periodic simplicial meshes of the unit cell Q = [-1/2, 1/2]^d and
//! their replication over the supercell Q_N = [-N-1/2, N+1/2]^d.
//!
//! Every square of the uniform grid is split into two triangles along the same
//! diagonal, so the unit triangulation tiles R^d by integer translations and
//! replication is exact. Periodic identification is done by hashing vertex
//! coordinates onto the wrapped grid.

use crate::small::SVec;
use serde::Serialize;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("dimension must be 1 or 2, got {0}")]
    InvalidDimension(usize),
    #[error("subdivisions must be at least 1, got {0}")]
    InvalidSubdivisions(usize),
    #[error("truncation radius must be non-negative, got {0}")]
    NegativeTruncation(i64),
    #[error("vertex {index} at {coords:?} does not lie on the grid (tolerance {tol:e})")]
    OffGrid { index: usize, coords: Vec<f64>, tol: f64 },
}

/// Integer lattice vector k in Z^d (unused components are zero).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct LatticeVec(pub [i64; 2]);

impl LatticeVec {
    pub const ZERO: LatticeVec = LatticeVec([0, 0]);

    pub fn new(k: &[i64]) -> Self {
        let mut v = [0; 2];
        v[..k.len()].copy_from_slice(k);
        LatticeVec(v)
    }

    pub fn sup_norm(&self) -> i64 {
        self.0[0].abs().max(self.0[1].abs())
    }

    pub fn as_svec(&self, dim: usize) -> SVec {
        SVec::from_slice(&[self.0[0] as f64, self.0[1] as f64][..dim])
    }

    /// Lattice cell containing x, i.e. the k with x - k in [-1/2, 1/2)^d.
    pub fn containing(x: &SVec) -> Self {
        let mut k = [0; 2];
        for (i, ki) in k.iter_mut().enumerate().take(x.dim) {
            *ki = (x.v[i] + 0.5).floor() as i64;
        }
        LatticeVec(k)
    }

    /// All k with |k|_inf <= n, first component fastest.
    pub fn cube(dim: usize, n: i64) -> Vec<LatticeVec> {
        let range: Vec<i64> = (-n..=n).collect();
        match dim {
            1 => range.iter().map(|&a| LatticeVec([a, 0])).collect(),
            _ => range
                .iter()
                .flat_map(|&b| range.iter().map(move |&a| LatticeVec([a, b])))
                .collect(),
        }
    }
}

impl std::ops::Add for LatticeVec {
    type Output = LatticeVec;
    fn add(self, rhs: LatticeVec) -> LatticeVec {
        LatticeVec([self.0[0] + rhs.0[0], self.0[1] + rhs.0[1]])
    }
}

/// Geometry shared by a base simplex and all of its lattice translates.
#[derive(Clone, Debug)]
pub struct SimplexGeometry {
    pub volume: f64,
    /// Barycenter in unit-cell coordinates.
    pub barycenter: SVec,
    /// Gradients of the d+1 barycentric (hat) functions, constant on the simplex.
    pub basis_gradients: Vec<SVec>,
}

fn simplex_geometry(coords: &[SVec]) -> SimplexGeometry {
    let dim = coords[0].dim;
    let n = coords.len() as f64;
    let bary = coords.iter().fold(SVec::zeros(dim), |acc, c| acc + *c).scale(1.0 / n);
    match dim {
        1 => {
            let len = coords[1].v[0] - coords[0].v[0];
            SimplexGeometry {
                volume: len.abs(),
                barycenter: bary,
                basis_gradients: vec![SVec::from_slice(&[-1.0 / len]), SVec::from_slice(&[1.0 / len])],
            }
        }
        _ => {
            let e1 = coords[1] - coords[0];
            let e2 = coords[2] - coords[0];
            let det = e1.v[0] * e2.v[1] - e1.v[1] * e2.v[0];
            // Rows of the inverse edge matrix are the gradients of lambda_1, lambda_2.
            let g1 = SVec::from_slice(&[e2.v[1] / det, -e2.v[0] / det]);
            let g2 = SVec::from_slice(&[-e1.v[1] / det, e1.v[0] / det]);
            let g0 = -(g1 + g2);
            SimplexGeometry { volume: 0.5 * det.abs(), barycenter: bary, basis_gradients: vec![g0, g1, g2] }
        }
    }
}

/// Periodic triangulation of the unit cell.
#[derive(Clone, Debug)]
pub struct UnitMesh {
    pub dim: usize,
    pub subdivisions: usize,
    pub h: f64,
    /// Grid points of the closed cell, first axis fastest; (s+1)^d entries.
    pub vertices: Vec<SVec>,
    cells: Vec<usize>,
    pub geometry: Vec<SimplexGeometry>,
    /// Periodic DOF of each vertex.
    pub dof_of_vertex: Vec<usize>,
    pub n_dofs: usize,
}

impl UnitMesh {
    pub fn n_cells(&self) -> usize {
        self.geometry.len()
    }

    pub fn cell(&self, c: usize) -> &[usize] {
        let n = self.dim + 1;
        &self.cells[c * n..(c + 1) * n]
    }

    /// Vertices sharing a DOF with `v`, excluding `v` itself.
    pub fn periodic_partners(&self, v: usize) -> Vec<usize> {
        let d = self.dof_of_vertex[v];
        (0..self.vertices.len()).filter(|&w| w != v && self.dof_of_vertex[w] == d).collect()
    }

    /// Integer grid coordinates of vertex `v`, each in 0..=s.
    fn grid_coords(&self, v: usize) -> [i64; 2] {
        let mut g = [0; 2];
        for (a, ga) in g.iter_mut().enumerate().take(self.dim) {
            *ga = ((self.vertices[v].v[a] + 0.5) / self.h).round() as i64;
        }
        g
    }
}

/// Builds the structured periodic mesh of Q with `subdivisions` intervals per axis.
pub fn build_unit_mesh(dim: usize, subdivisions: usize) -> Result<UnitMesh, MeshError> {
    if dim != 1 && dim != 2 {
        return Err(MeshError::InvalidDimension(dim));
    }
    if subdivisions < 1 {
        return Err(MeshError::InvalidSubdivisions(subdivisions));
    }
    let s = subdivisions;
    let h = 1.0 / s as f64;
    let coord = |i: usize| -0.5 + i as f64 * h;

    let mut vertices = Vec::new();
    let mut cells = Vec::new();
    match dim {
        1 => {
            for i in 0..=s {
                vertices.push(SVec::from_slice(&[coord(i)]));
            }
            for i in 0..s {
                cells.extend_from_slice(&[i, i + 1]);
            }
        }
        _ => {
            for j in 0..=s {
                for i in 0..=s {
                    vertices.push(SVec::from_slice(&[coord(i), coord(j)]));
                }
            }
            let idx = |i: usize, j: usize| j * (s + 1) + i;
            for j in 0..s {
                for i in 0..s {
                    let (v00, v10, v01, v11) = (idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1));
                    cells.extend_from_slice(&[v00, v10, v11]);
                    cells.extend_from_slice(&[v00, v11, v01]);
                }
            }
        }
    }

    let dof_of_vertex = periodic_dofs(&vertices, dim, h, s as i64)?;
    let n_dofs = dof_of_vertex.iter().max().map_or(0, |m| m + 1);
    let geometry = cells
        .chunks(dim + 1)
        .map(|c| simplex_geometry(&c.iter().map(|&v| vertices[v]).collect::<Vec<_>>()))
        .collect();

    Ok(UnitMesh { dim, subdivisions, h, vertices, cells, geometry, dof_of_vertex, n_dofs })
}

/// Identifies vertices modulo the period `period` (in grid steps of size `h`),
/// numbering DOFs in order of first appearance.
fn periodic_dofs(vertices: &[SVec], dim: usize, h: f64, period: i64) -> Result<Vec<usize>, MeshError> {
    let tol = 1e-12;
    let mut table: HashMap<[i64; 2], usize> = HashMap::new();
    let mut out = Vec::with_capacity(vertices.len());
    // Grid origin is the lower corner of the domain, recovered from the first vertex.
    let origin = vertices[0];
    for (index, x) in vertices.iter().enumerate() {
        let mut key = [0i64; 2];
        for a in 0..dim {
            let t = (x.v[a] - origin.v[a]) / h;
            let r = t.round();
            if (t - r).abs() > tol {
                return Err(MeshError::OffGrid { index, coords: x.as_slice().to_vec(), tol: tol * h });
            }
            key[a] = (r as i64).rem_euclid(period);
        }
        let next = table.len();
        out.push(*table.entry(key).or_insert(next));
    }
    Ok(out)
}

/// Where a supercell simplex comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CellOrigin {
    pub lattice: LatticeVec,
    pub base_cell: usize,
}

/// Replication of a unit mesh over Q_N with Q_N-periodic DOFs.
#[derive(Clone, Debug)]
pub struct SuperMesh {
    pub base: UnitMesh,
    pub truncation: usize,
    /// Grid points of the closed supercell, ((2N+1)s+1)^d entries.
    pub vertices: Vec<SVec>,
    cells: Vec<usize>,
    pub cell_origin: Vec<CellOrigin>,
    pub dof_of_vertex: Vec<usize>,
    pub n_dofs: usize,
    /// |Q_N| = (2N+1)^d.
    pub volume: f64,
    element_dofs: Vec<usize>,
}

impl SuperMesh {
    pub fn dim(&self) -> usize {
        self.base.dim
    }

    pub fn n_cells(&self) -> usize {
        self.cell_origin.len()
    }

    pub fn cell(&self, e: usize) -> &[usize] {
        let n = self.dim() + 1;
        &self.cells[e * n..(e + 1) * n]
    }

    /// Periodic DOFs of the vertices of simplex `e`.
    pub fn element_dofs(&self, e: usize) -> &[usize] {
        let n = self.dim() + 1;
        &self.element_dofs[e * n..(e + 1) * n]
    }

    pub fn geometry(&self, e: usize) -> &SimplexGeometry {
        &self.base.geometry[self.cell_origin[e].base_cell]
    }

    pub fn volume_of(&self, e: usize) -> f64 {
        self.geometry(e).volume
    }

    /// Barycenter in supercell coordinates.
    pub fn barycenter(&self, e: usize) -> SVec {
        let o = self.cell_origin[e];
        self.base.geometry[o.base_cell].barycenter + o.lattice.as_svec(self.dim())
    }

    /// Number of grid steps along one side of Q_N.
    pub fn period_steps(&self) -> usize {
        (2 * self.truncation + 1) * self.base.subdivisions
    }

    /// Permutation of DOFs induced by translating the mesh by the lattice vector
    /// `k` with periodic wrap: `out[dof]` is the DOF that `dof` is moved to.
    pub fn shift_dofs(&self, k: LatticeVec) -> Vec<usize> {
        let m = self.period_steps() as i64;
        let s = self.base.subdivisions as i64;
        let stride = m as usize + 1;
        let mut out = vec![usize::MAX; self.n_dofs];
        for (v, &dof) in self.dof_of_vertex.iter().enumerate() {
            let g = [(v % stride) as i64, (v / stride) as i64];
            let mut t = [0usize; 2];
            for a in 0..self.dim() {
                t[a] = (g[a] + k.0[a] * s).rem_euclid(m) as usize;
            }
            let target = t[1] * stride + t[0];
            out[dof] = self.dof_of_vertex[target];
        }
        out
    }

    pub fn dump(&self) -> MeshDump {
        MeshDump {
            dim: self.dim(),
            h: self.base.h,
            truncation: self.truncation,
            vertices: self.vertices.iter().map(|x| x.as_slice().to_vec()).collect(),
            cells: (0..self.n_cells()).map(|e| self.cell(e).to_vec()).collect(),
            dof_map: self.dof_of_vertex.clone(),
        }
    }
}

/// Replicates `base` over Q_N.
pub fn replicate(base: &UnitMesh, n: i64) -> Result<SuperMesh, MeshError> {
    if n < 0 {
        return Err(MeshError::NegativeTruncation(n));
    }
    let nu = n as usize;
    let dim = base.dim;
    let s = base.subdivisions;
    let m = (2 * nu + 1) * s;
    let stride = m + 1;
    let h = base.h;
    let lo = -(n as f64) - 0.5;

    let n_grid = if dim == 1 { stride } else { stride * stride };
    let vertices: Vec<SVec> = (0..n_grid)
        .map(|v| {
            let g = [v % stride, v / stride];
            let xs: Vec<f64> = (0..dim).map(|a| lo + g[a] as f64 * h).collect();
            SVec::from_slice(&xs)
        })
        .collect();

    let lattice = LatticeVec::cube(dim, n);
    let nb = base.n_cells();
    let mut cells = Vec::with_capacity(lattice.len() * nb * (dim + 1));
    let mut cell_origin = Vec::with_capacity(lattice.len() * nb);
    for k in &lattice {
        for c in 0..nb {
            for &bv in base.cell(c) {
                let g = base.grid_coords(bv);
                let mut gi = [0usize; 2];
                for a in 0..dim {
                    gi[a] = (g[a] + (k.0[a] + n) * s as i64) as usize;
                }
                cells.push(gi[1] * stride + gi[0]);
            }
            cell_origin.push(CellOrigin { lattice: *k, base_cell: c });
        }
    }

    let dof_of_vertex = periodic_dofs(&vertices, dim, h, m as i64)?;
    let n_dofs = dof_of_vertex.iter().max().map_or(0, |x| x + 1);
    let element_dofs = cells.iter().map(|&v| dof_of_vertex[v]).collect();
    let volume = ((2 * nu + 1) as f64).powi(dim as i32);

    Ok(SuperMesh {
        base: base.clone(),
        truncation: nu,
        vertices,
        cells,
        cell_origin,
        dof_of_vertex,
        n_dofs,
        volume,
        element_dofs,
    })
}

/// Debug dump of a mesh; not a stable format.
#[derive(Debug, Serialize)]
pub struct MeshDump {
    pub dim: usize,
    pub h: f64,
    pub truncation: usize,
    pub vertices: Vec<Vec<f64>>,
    pub cells: Vec<Vec<usize>>,
    pub dof_map: Vec<usize>,
}
