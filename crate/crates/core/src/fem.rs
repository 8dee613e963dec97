//! P1 kernel for the scalar potential `a_z`: element matrices, constraint
//! bookkeeping, sparse assembly and direct solves.

use std::sync::{Once, OnceLock};

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, Lu, SymbolicLlt};
use faer::sparse::{Argsort, Pair, SparseColMat, SymbolicSparseColMat, Triplet};
use faer::{Mat, Side};

use crate::error::{Error, Result};
use crate::mesh::{signed_area, Mesh2D, PeriodicPairing};
use crate::tensor::{Tensor2, Vec2};

/// Factorizations run single threaded; parallelism lives one level up,
/// across independent cell problems.
fn sequential_linalg() {
    static INIT: Once = Once::new();
    INIT.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
}

/// Area and constant gradients of the three hat functions.
pub fn p1_gradients(p: &[Vec2; 3]) -> Result<(f64, [Vec2; 3])> {
    let area = signed_area(p);
    if !(area > 0.0) || !area.is_finite() {
        return Err(Error::SingularElement { triangle: usize::MAX, area });
    }
    let inv = 0.5 / area;
    let mut g = [[0.0; 2]; 3];
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        g[i] = [(p[j][1] - p[k][1]) * inv, (p[k][0] - p[j][0]) * inv];
    }
    Ok((area, g))
}

/// `K_ij = ∫ (coeff ∇φ_i)·∇φ_j`.
pub fn element_stiffness(p: &[Vec2; 3], coeff: &Tensor2) -> Result<[[f64; 3]; 3]> {
    let (area, g) = p1_gradients(p)?;
    let mut k = [[0.0; 3]; 3];
    for i in 0..3 {
        let cg = crate::tensor::mat_vec(coeff, g[i]);
        for j in 0..3 {
            k[i][j] = area * crate::tensor::dot(cg, g[j]);
        }
    }
    Ok(k)
}

/// Consistent mass `coeff·A/12·[[2,1,1],[1,2,1],[1,1,2]]`.
pub fn element_mass(p: &[Vec2; 3], coeff: f64) -> Result<[[f64; 3]; 3]> {
    let area = signed_area(p);
    if !(area > 0.0) {
        return Err(Error::SingularElement { triangle: usize::MAX, area });
    }
    let d = coeff * area / 6.0;
    let o = coeff * area / 12.0;
    Ok([[d, o, o], [o, d, o], [o, o, d]])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dof {
    Free(usize),
    Fixed,
}

/// Node → unknown map with Dirichlet elimination and periodic aliasing.
#[derive(Clone, Debug, PartialEq)]
pub struct DofMap {
    node_dof: Vec<Dof>,
    fixed_value: Vec<f64>,
    n_free: usize,
    anchor: Option<usize>,
}

impl DofMap {
    pub fn all_free(n_nodes: usize) -> Self {
        DofMap::with_dirichlet(n_nodes, &[])
    }

    /// Homogeneous Dirichlet condition on `nodes`.
    pub fn with_dirichlet(n_nodes: usize, nodes: &[usize]) -> Self {
        let pairs: Vec<(usize, f64)> = nodes.iter().map(|&n| (n, 0.0)).collect();
        DofMap::with_dirichlet_values(n_nodes, &pairs)
    }

    pub fn with_dirichlet_values(n_nodes: usize, fixed: &[(usize, f64)]) -> Self {
        let mut is_fixed = vec![false; n_nodes];
        let mut fixed_value = vec![0.0; n_nodes];
        for &(n, v) in fixed {
            is_fixed[n] = true;
            fixed_value[n] = v;
        }
        let mut n_free = 0;
        let node_dof = is_fixed
            .iter()
            .map(|&f| {
                if f {
                    Dof::Fixed
                } else {
                    n_free += 1;
                    Dof::Free(n_free - 1)
                }
            })
            .collect();
        DofMap { node_dof, fixed_value, n_free, anchor: None }
    }

    pub fn n_free(&self) -> usize {
        self.n_free
    }

    pub fn n_nodes(&self) -> usize {
        self.node_dof.len()
    }

    pub fn dof(&self, node: usize) -> Dof {
        self.node_dof[node]
    }

    pub fn free_index(&self, node: usize) -> Option<usize> {
        match self.node_dof[node] {
            Dof::Free(i) => Some(i),
            Dof::Fixed => None,
        }
    }

    pub fn fixed_value(&self, node: usize) -> f64 {
        self.fixed_value[node]
    }

    /// Node pinned to remove the periodic constant mode, if any.
    pub fn anchor(&self) -> Option<usize> {
        self.anchor
    }

    /// Nodal values from free unknowns; constrained nodes get their fixed value.
    pub fn expand(&self, free: &[f64]) -> Vec<f64> {
        self.node_dof
            .iter()
            .enumerate()
            .map(|(n, d)| match d {
                Dof::Free(i) => free[*i],
                Dof::Fixed => self.fixed_value[n],
            })
            .collect()
    }

    /// Free unknowns from nodal values (last writer wins for aliased nodes).
    pub fn restrict(&self, nodal: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_free];
        for (n, d) in self.node_dof.iter().enumerate() {
            if let Dof::Free(i) = d {
                out[*i] = nodal[n];
            }
        }
        out
    }
}

/// Aliases slaves to masters and pins one anchor to zero. The anchor is the
/// master corner, or the first free node for an empty pairing.
pub fn apply_periodic(dofs: &DofMap, pairing: &PeriodicPairing) -> Result<DofMap> {
    let n = dofs.n_nodes();
    if pairing.master_slave_pairs.iter().any(|&(m, s)| m >= n || s >= n)
        || pairing.corner_group.iter().any(|&c| c >= n)
    {
        return Err(Error::Inconsistent("pairing references unknown nodes".into()));
    }
    let master = pairing.master_map(n);
    let anchor = match pairing.corner_group.first() {
        Some(&c) => Some(master[c]),
        None => (0..n).find(|&i| dofs.node_dof[i] != Dof::Fixed),
    };
    let mut node_dof = vec![Dof::Fixed; n];
    let mut fixed_value = vec![0.0; n];
    let mut rep_index = vec![usize::MAX; n];
    let mut n_free = 0;
    for node in 0..n {
        let rep = master[node];
        if dofs.node_dof[rep] == Dof::Fixed || Some(rep) == anchor {
            fixed_value[node] = if Some(rep) == anchor { 0.0 } else { dofs.fixed_value[rep] };
            continue;
        }
        if rep_index[rep] == usize::MAX {
            rep_index[rep] = n_free;
            n_free += 1;
        }
        node_dof[node] = Dof::Free(rep_index[rep]);
    }
    Ok(DofMap { node_dof, fixed_value, n_free, anchor })
}

/// Column-compressed sparse matrix.
#[derive(Clone, Debug)]
pub struct SparseMatrix {
    inner: SparseColMat<usize, f64>,
}

impl SparseMatrix {
    pub fn from_triplets(n: usize, entries: &[(usize, usize, f64)]) -> Result<Self> {
        let t: Vec<Triplet<usize, usize, f64>> =
            entries.iter().map(|&(r, c, v)| Triplet::new(r, c, v)).collect();
        let inner = SparseColMat::try_new_from_triplets(n, n, &t)
            .map_err(|e| Error::Inconsistent(format!("triplet assembly: {e:?}")))?;
        Ok(SparseMatrix { inner })
    }

    pub fn identity(n: usize) -> Self {
        let t: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        SparseMatrix::from_triplets(n, &t).expect("identity")
    }

    pub fn nrows(&self) -> usize {
        self.inner.nrows()
    }

    pub fn nnz(&self) -> usize {
        self.inner.val().len()
    }

    pub fn faer(&self) -> &SparseColMat<usize, f64> {
        &self.inner
    }

    /// Stored entries as `(row, col, value)`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let cp = self.inner.symbolic().col_ptr();
        let ri = self.inner.symbolic().row_idx();
        let v = self.inner.val();
        (0..self.inner.ncols()).flat_map(move |c| (cp[c]..cp[c + 1]).map(move |k| (ri[k], c, v[k])))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.inner.as_ref().get(r, c).copied().unwrap_or(0.0)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows()];
        for (r, c, v) in self.entries() {
            y[r] += v * x[c];
        }
        y
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.nrows();
        let mut d = vec![vec![0.0; n]; n];
        for (r, c, v) in self.entries() {
            d[r][c] += v;
        }
        d
    }

    pub fn max_abs(&self) -> f64 {
        self.inner.val().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Symmetry check relative to the largest entry.
    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        self.entries().all(|(r, c, v)| (v - self.get(c, r)).abs() <= rel_tol * scale)
    }

    fn diag_ratio(&self) -> f64 {
        let d: Vec<f64> = (0..self.nrows()).map(|i| self.get(i, i).abs()).collect();
        let max = d.iter().copied().fold(0.0, f64::max);
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        if min > 0.0 {
            max / min
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Clone, Debug)]
pub struct SparseSystem {
    pub matrix: SparseMatrix,
    pub rhs: Vec<f64>,
}

/// Unknowns touched by one element: three nodes plus an optional extra
/// unknown (a floating conductor potential). `None` marks a constrained node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElementDofs {
    pub idx: [Option<usize>; 4],
    pub len: usize,
}

impl ElementDofs {
    pub fn nodes(dofs: &DofMap, tri: &[usize; 3]) -> Self {
        ElementDofs {
            idx: [dofs.free_index(tri[0]), dofs.free_index(tri[1]), dofs.free_index(tri[2]), None],
            len: 3,
        }
    }

    pub fn with_extra(mut self, extra: Option<usize>) -> Self {
        if let Some(e) = extra {
            self.idx[3] = Some(e);
            self.len = 4;
        }
        self
    }
}

pub type Local4 = [[f64; 4]; 4];

/// Fixed sparsity of an element loop. Numeric values are scattered into a flat
/// buffer in element order and turned into a matrix without re-sorting; the
/// symbolic Cholesky factor is computed once and reused.
#[derive(Debug)]
pub struct AssemblyPattern {
    n: usize,
    elements: Vec<ElementDofs>,
    offsets: Vec<usize>,
    symbolic: SymbolicSparseColMat<usize>,
    argsort: Argsort<usize>,
    llt: OnceLock<std::result::Result<SymbolicLlt<usize>, String>>,
}

impl AssemblyPattern {
    pub fn new(n: usize, elements: Vec<ElementDofs>) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut offsets = Vec::with_capacity(elements.len() + 1);
        for e in &elements {
            offsets.push(pairs.len());
            for a in 0..e.len {
                for b in 0..e.len {
                    if let (Some(r), Some(c)) = (e.idx[a], e.idx[b]) {
                        pairs.push(Pair { row: r, col: c });
                    }
                }
            }
        }
        offsets.push(pairs.len());
        // Diagonal entries keep the pattern factorizable even for unknowns no
        // element touches.
        for i in 0..n {
            pairs.push(Pair { row: i, col: i });
        }
        let (symbolic, argsort) = SymbolicSparseColMat::try_new_from_indices(n, n, &pairs)
            .map_err(|e| Error::Inconsistent(format!("sparsity pattern: {e:?}")))?;
        Ok(AssemblyPattern { n, elements, offsets, symbolic, argsort, llt: OnceLock::new() })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn element(&self, e: usize) -> &ElementDofs {
        &self.elements[e]
    }

    pub fn element_count(&self) -> usize {
        self.elements.len()
    }

    /// Zeroed value buffer for [`Self::scatter`] and [`Self::build`].
    pub fn values(&self) -> Vec<f64> {
        vec![0.0; self.offsets[self.elements.len()] + self.n]
    }

    pub fn scatter(&self, values: &mut [f64], e: usize, local: &Local4) {
        let el = &self.elements[e];
        let mut pos = self.offsets[e];
        for a in 0..el.len {
            for b in 0..el.len {
                if el.idx[a].is_some() && el.idx[b].is_some() {
                    values[pos] += local[a][b];
                    pos += 1;
                }
            }
        }
    }

    /// Adds `d` to the diagonal slot of unknown `i`.
    pub fn add_diagonal(&self, values: &mut [f64], i: usize, d: f64) {
        values[self.offsets[self.elements.len()] + i] += d;
    }

    pub fn build(&self, values: &[f64]) -> Result<SparseMatrix> {
        let inner = SparseColMat::new_from_argsort(self.symbolic.clone(), &self.argsort, values)
            .map_err(|e| Error::Inconsistent(format!("numeric assembly: {e:?}")))?;
        Ok(SparseMatrix { inner })
    }

    /// Scatter-adds a local vector into a global one.
    pub fn scatter_vec(&self, global: &mut [f64], e: usize, local: &[f64; 4]) {
        let el = &self.elements[e];
        for a in 0..el.len {
            if let Some(i) = el.idx[a] {
                global[i] += local[a];
            }
        }
    }

    /// Cholesky with the cached symbolic factor, LU if the matrix is not SPD.
    pub fn factor(&self, m: &SparseMatrix) -> Result<Factorization> {
        sequential_linalg();
        let sym = self
            .llt
            .get_or_init(|| SymbolicLlt::try_new(self.symbolic.as_ref(), Side::Lower).map_err(|e| format!("{e:?}")));
        if let Ok(sym) = sym {
            if let Ok(llt) = Llt::try_new_with_symbolic(sym.clone(), m.inner.as_ref(), Side::Lower) {
                return Ok(Factorization { kind: FactorKind::Llt(llt), matrix: m.clone() });
            }
        }
        Factorization::lu(m)
    }
}

enum FactorKind {
    Llt(Llt<usize, f64>),
    Lu(Lu<usize, f64>),
}

/// A factorized matrix that verifies every solve against the residual bound
/// `‖Ax − b‖ ≤ 1e-10 (‖b‖ + 1)`, with up to three refinement sweeps.
pub struct Factorization {
    kind: FactorKind,
    matrix: SparseMatrix,
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.kind {
            FactorKind::Llt(_) => "llt",
            FactorKind::Lu(_) => "lu",
        };
        f.debug_struct("Factorization").field("kind", &kind).field("n", &self.matrix.nrows()).finish()
    }
}

impl Factorization {
    pub fn new(m: &SparseMatrix) -> Result<Self> {
        sequential_linalg();
        match m.inner.sp_cholesky(Side::Lower) {
            Ok(llt) => Ok(Factorization { kind: FactorKind::Llt(llt), matrix: m.clone() }),
            Err(_) => Factorization::lu(m),
        }
    }

    fn lu(m: &SparseMatrix) -> Result<Self> {
        sequential_linalg();
        let lu = m.inner.sp_lu().map_err(|e| Error::SolverFailure {
            reason: format!("sparse LU failed: {e:?}"),
            diag_ratio: m.diag_ratio(),
        })?;
        Ok(Factorization { kind: FactorKind::Lu(lu), matrix: m.clone() })
    }

    pub fn is_cholesky(&self) -> bool {
        matches!(self.kind, FactorKind::Llt(_))
    }

    fn raw_solve(&self, b: &[f64]) -> Vec<f64> {
        let mut rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        match &self.kind {
            FactorKind::Llt(f) => f.solve_in_place(rhs.as_mut()),
            FactorKind::Lu(f) => f.solve_in_place(rhs.as_mut()),
        }
        (0..b.len()).map(|i| rhs[(i, 0)]).collect()
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.matrix.nrows() {
            return Err(Error::Inconsistent(format!(
                "rhs length {} for a {}-dimensional system",
                b.len(),
                self.matrix.nrows()
            )));
        }
        let bound = 1e-10 * (l2(b) + 1.0);
        let mut x = self.raw_solve(b);
        for _ in 0..4 {
            let ax = self.matrix.mul_vec(&x);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            let rn = l2(&r);
            if !rn.is_finite() {
                break;
            }
            if rn <= bound {
                return Ok(x);
            }
            let dx = self.raw_solve(&r);
            x.iter_mut().zip(&dx).for_each(|(xi, di)| *xi += di);
        }
        Err(Error::SolverFailure {
            reason: "residual bound not met after refinement".into(),
            diag_ratio: self.matrix.diag_ratio(),
        })
    }
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Global system from per-triangle `(K_T, f_T)`. Slave rows and columns fold
/// into their masters; Dirichlet columns move to the right-hand side.
pub fn assemble<F>(mesh: &Mesh2D, dofs: &DofMap, element_cb: F) -> Result<SparseSystem>
where
    F: Fn(usize, &[Vec2; 3]) -> Result<([[f64; 3]; 3], [f64; 3])>,
{
    if dofs.n_nodes() != mesh.node_count() {
        return Err(Error::Inconsistent("dof map does not match mesh".into()));
    }
    let elements: Vec<ElementDofs> = mesh.triangles.iter().map(|t| ElementDofs::nodes(dofs, t)).collect();
    let pattern = AssemblyPattern::new(dofs.n_free(), elements)?;
    let mut values = pattern.values();
    let mut rhs = vec![0.0; dofs.n_free()];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let (k, f) = element_cb(t, &mesh.coords(t))
            .map_err(|e| Error::Element { triangle: t, source: Box::new(e) })?;
        let mut local = [[0.0; 4]; 4];
        for a in 0..3 {
            local[a][..3].copy_from_slice(&k[a]);
        }
        pattern.scatter(&mut values, t, &local);
        for a in 0..3 {
            if let Some(i) = dofs.free_index(tri[a]) {
                rhs[i] += f[a];
                for b in 0..3 {
                    if dofs.free_index(tri[b]).is_none() {
                        rhs[i] -= k[a][b] * dofs.fixed_value(tri[b]);
                    }
                }
            }
        }
    }
    Ok(SparseSystem { matrix: pattern.build(&values)?, rhs })
}

pub fn solve_linear(system: &SparseSystem) -> Result<Vec<f64>> {
    if system.matrix.nrows() != system.rhs.len() {
        return Err(Error::Inconsistent("matrix and rhs sizes differ".into()));
    }
    if system.matrix.nrows() == 0 {
        return Ok(Vec::new());
    }
    Factorization::new(&system.matrix)?.solve(&system.rhs)
}

/// Dense LU solve, used for the small fully coupled Newton system.
pub fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    sequential_linalg();
    let n = b.len();
    let m = Mat::from_fn(n, n, |i, j| a[i][j]);
    let lu = m.partial_piv_lu();
    let mut rhs = Mat::from_fn(n, 1, |i, _| b[i]);
    lu.solve_in_place(rhs.as_mut());
    let x: Vec<f64> = (0..n).map(|i| rhs[(i, 0)]).collect();
    let r: Vec<f64> = (0..n).map(|i| b[i] - (0..n).map(|j| a[i][j] * x[j]).sum::<f64>()).collect();
    let scale: f64 = a.iter().flatten().fold(0.0_f64, |s, v| s.max(v.abs())) * l2(&x) + l2(b);
    if !x.iter().all(|v| v.is_finite()) || l2(&r) > 1e-9 * scale.max(f64::MIN_POSITIVE) {
        let d: Vec<f64> = (0..n).map(|i| a[i][i].abs()).collect();
        let ratio = d.iter().copied().fold(0.0, f64::max) / d.iter().copied().fold(f64::INFINITY, f64::min);
        return Err(Error::SolverFailure { reason: "dense LU residual check failed".into(), diag_ratio: ratio });
    }
    Ok(x)
}
