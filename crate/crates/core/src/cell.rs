//! Mesoscale cell problems on the unit square.
//!
//! The physical cell of side `ℓ` is mapped to `[-1/2, 1/2]²`. With
//! `a_c = ℓ â` the correction flux `b_c = curl â` needs no rescaling, and the
//! eddy-current terms pick up `σ̂ = σ ℓ²`. The downscaled electric field is
//! `ê(y) = −∂t a_M / ℓ − κ (∂t b_x y₂ − ∂t b_y y₁)`.
//!
//! Each connected conducting region carries a floating potential `ξ` in
//! addition to the nodal unknowns, so that isolated grains carry no net
//! current (`e = −∂t(a + ξ)` inside the grain). Unknowns are laid out as
//! `[free nodal dofs..., ξ per conductor...]`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::{self, apply_periodic, AssemblyPattern, DofMap, ElementDofs, Local4};
use crate::material::{ConductivityField, MaterialLaw, NU0};
use crate::mesh::{generate_cell_mesh, CellLayout, Mesh2D, PeriodicPairing, RegionTag};
use crate::tensor::{self, Tensor2, Vec2};

/// Regularization of insulation conductivity in the conductivity cell problem,
/// relative to the grain conductivity.
pub const SIGMA_REG_FACTOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonOptions {
    /// Convergence when `‖R‖ ≤ tol·‖s‖`, `s` being the row-wise sum of
    /// absolute contributions to the residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Minimum number of updates, even if the first residual already passes.
    pub min_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tol: 1e-6, max_iter: 15, min_iter: 0 }
    }
}

/// Residual norms of a Newton solve, one per evaluated iterate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NewtonTrace {
    pub residuals: Vec<f64>,
    pub scales: Vec<f64>,
}

impl NewtonTrace {
    /// Number of Newton updates performed.
    pub fn updates(&self) -> usize {
        self.residuals.len().saturating_sub(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellMaterials {
    pub grain_law: MaterialLaw,
    pub insulation_law: MaterialLaw,
    pub sigma: ConductivityField,
    /// Give each connected conductor a floating potential (zero net current).
    pub floating_conductors: bool,
}

impl CellMaterials {
    /// Brauer grains, vacuum-like insulation with relative permeability `mu_r_ins`.
    pub fn smc(sigma_grain: f64, mu_r_ins: f64) -> Result<Self> {
        Ok(CellMaterials {
            grain_law: MaterialLaw::smc_grain(),
            insulation_law: MaterialLaw::linear(NU0 / mu_r_ins)?,
            sigma: ConductivityField::smc(sigma_grain)?,
            floating_conductors: true,
        })
    }

    /// Same law and conductivity in both phases.
    pub fn uniform(law: MaterialLaw, sigma: f64) -> Result<Self> {
        Ok(CellMaterials {
            grain_law: law,
            insulation_law: law,
            sigma: ConductivityField::zero()
                .with(RegionTag::ConductingGrain, sigma)?
                .with(RegionTag::Insulation, sigma)?,
            floating_conductors: true,
        })
    }

    pub fn law(&self, tag: RegionTag) -> MaterialLaw {
        match tag {
            RegionTag::ConductingGrain => self.grain_law,
            _ => self.insulation_law,
        }
    }
}

/// Downscaled macroscale data at one Gauss point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MacroSource {
    pub b_m: Vec2,
    pub db_m_dt: Vec2,
    pub da_m_dt: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpscaledLaw {
    pub h_m: Vec2,
    pub dh_m_db_m: Tensor2,
}

#[derive(Clone, Debug)]
struct CellElement {
    area: f64,
    /// `curl φ_i = R ∇φ_i`.
    curl: [Vec2; 3],
    coords: [Vec2; 3],
    law: MaterialLaw,
    sigma_hat: f64,
    /// `σ̂`-weighted mass over `(φ₁, φ₂, φ₃, 1)`; zero for non-conductors.
    mass: Local4,
}

/// Immutable data shared by every cell instance of one microstructure.
#[derive(Debug)]
pub struct CellModel {
    pub mesh: Mesh2D,
    pub pairing: PeriodicPairing,
    pub dofs: DofMap,
    pub materials: CellMaterials,
    pub layout: CellLayout,
    /// Physical cell side `ℓ` [m].
    pub period: f64,
    pub kappa: f64,
    n_groups: usize,
    elems: Vec<CellElement>,
    pattern: AssemblyPattern,
}

impl CellModel {
    pub fn new(
        layout: CellLayout,
        n_per_side: usize,
        materials: CellMaterials,
        period: f64,
        kappa: f64,
    ) -> Result<Arc<Self>> {
        if !(period > 0.0) || !(kappa > 0.0) {
            return Err(Error::Config(format!("cell period {period} and kappa {kappa} must be positive")));
        }
        let (mesh, pairing) = generate_cell_mesh(layout, n_per_side)?;
        let dofs = apply_periodic(&DofMap::all_free(mesh.node_count()), &pairing)?;
        let n_free = dofs.n_free();
        let sigma_of = |t: usize| materials.sigma.sigma(mesh.regions[t]);
        let (group_of, n_groups) = if materials.floating_conductors {
            conductor_groups(&mesh, &pairing, |t| sigma_of(t) > 0.0)
        } else {
            (vec![None; mesh.triangle_count()], 0)
        };
        let mut elems = Vec::with_capacity(mesh.triangle_count());
        let mut el_dofs = Vec::with_capacity(mesh.triangle_count());
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let coords = mesh.coords(t);
            let (area, grad) = fem::p1_gradients(&coords).map_err(|_| Error::SingularElement {
                triangle: t,
                area: mesh.signed_area(t),
            })?;
            let sigma_hat = sigma_of(t) * period * period;
            let group = group_of[t];
            let mut mass = [[0.0; 4]; 4];
            let m3 = fem::element_mass(&coords, sigma_hat)?;
            for a in 0..3 {
                mass[a][..3].copy_from_slice(&m3[a]);
                mass[a][3] = sigma_hat * area / 3.0;
                mass[3][a] = sigma_hat * area / 3.0;
            }
            mass[3][3] = sigma_hat * area;
            elems.push(CellElement {
                area,
                curl: grad.map(tensor::rot),
                coords,
                law: materials.law(mesh.regions[t]),
                sigma_hat,
                mass,
            });
            el_dofs.push(ElementDofs::nodes(&dofs, tri).with_extra(group.map(|g| n_free + g)));
        }
        let pattern = AssemblyPattern::new(n_free + n_groups, el_dofs)?;
        Ok(Arc::new(CellModel { mesh, pairing, dofs, materials, layout, period, kappa, n_groups, elems, pattern }))
    }

    pub fn n_free(&self) -> usize {
        self.dofs.n_free()
    }

    pub fn n_conductors(&self) -> usize {
        self.n_groups
    }

    /// Total unknowns: nodal dofs plus floating potentials.
    pub fn dim(&self) -> usize {
        self.pattern.dim()
    }

    pub fn zero_state(self: &Arc<Self>) -> CellState {
        CellState { model: Arc::clone(self), x: vec![0.0; self.dim()], time: 0.0 }
    }

    /// Nodal correction values (anchor and aliases filled in).
    pub fn nodal(&self, x: &[f64]) -> Vec<f64> {
        self.dofs.expand(&x[..self.n_free()])
    }

    fn local_values(&self, e: usize, x: &[f64]) -> [f64; 4] {
        let d = self.pattern.element(e);
        let mut v = [0.0; 4];
        for a in 0..d.len {
            if let Some(i) = d.idx[a] {
                v[a] = x[i];
            }
        }
        v
    }

    fn element_b_c(&self, e: usize, x: &[f64]) -> Vec2 {
        let v = self.local_values(e, x);
        let c = &self.elems[e].curl;
        [
            v[0] * c[0][0] + v[1] * c[1][0] + v[2] * c[2][0],
            v[0] * c[0][1] + v[1] * c[1][1] + v[2] * c[2][1],
        ]
    }

    /// Per-element correction flux `b_c = curl â`.
    pub fn b_c(&self, x: &[f64]) -> Vec<Vec2> {
        (0..self.elems.len()).map(|e| self.element_b_c(e, x)).collect()
    }

    /// `ê` at the three vertices of element `e`.
    fn e_hat(&self, e: usize, s: &MacroSource) -> [f64; 4] {
        let p = &self.elems[e].coords;
        let mut out = [0.0; 4];
        for a in 0..3 {
            out[a] = -s.da_m_dt / self.period - self.kappa * (s.db_m_dt[0] * p[a][1] - s.db_m_dt[1] * p[a][0]);
        }
        out
    }

    /// Residual of the backward-Euler step and its absolute-contribution scale.
    pub fn residual(
        &self,
        x: &[f64],
        x_prev: &[f64],
        source: &MacroSource,
        dt: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.dim();
        let mut r = vec![0.0; n];
        let mut s = vec![0.0; n];
        for (e, el) in self.elems.iter().enumerate() {
            let b = tensor::add(self.element_b_c(e, x), source.b_m);
            let h = el.law.h_of_b(b)?;
            let mut loc = [0.0; 4];
            let mut abs = [0.0; 4];
            for a in 0..3 {
                let f = el.area * tensor::dot(el.curl[a], h);
                loc[a] += f;
                abs[a] += f.abs();
            }
            if el.sigma_hat > 0.0 {
                let xv = self.local_values(e, x);
                let pv = self.local_values(e, x_prev);
                let ev = self.e_hat(e, source);
                let len = self.pattern.element(e).len;
                for a in 0..len {
                    let mut rate = 0.0;
                    let mut src = 0.0;
                    for b in 0..len {
                        rate += el.mass[a][b] * (xv[b] - pv[b]) / dt;
                        src += el.mass[a][b] * ev[b];
                    }
                    loc[a] += rate - src;
                    abs[a] += rate.abs() + src.abs();
                }
            }
            self.pattern.scatter_vec(&mut r, e, &loc);
            self.pattern.scatter_vec(&mut s, e, &abs);
        }
        Ok((r, s))
    }

    /// `M/dt + ∂F/∂x` at `x`.
    pub fn tangent(&self, x: &[f64], b_m: Vec2, dt: f64) -> Result<fem::SparseMatrix> {
        let mut values = self.pattern.values();
        for (e, el) in self.elems.iter().enumerate() {
            let d = el.law.dh_db(tensor::add(self.element_b_c(e, x), b_m))?;
            let mut loc = [[0.0; 4]; 4];
            for a in 0..3 {
                let dc = tensor::mat_vec(&d, el.curl[a]);
                for b in 0..3 {
                    loc[a][b] = el.area * tensor::dot(dc, el.curl[b]);
                }
            }
            if el.sigma_hat > 0.0 {
                for a in 0..4 {
                    for b in 0..4 {
                        loc[a][b] += el.mass[a][b] / dt;
                    }
                }
            }
            self.pattern.scatter(&mut values, e, &loc);
        }
        self.pattern.build(&values)
    }

    /// `∂R/∂b_M` as one 2-vector per unknown (also `∂h_M/∂x` by symmetry).
    pub fn flux_coupling(&self, x: &[f64], b_m: Vec2) -> Result<Vec<Vec2>> {
        let mut g = vec![[0.0; 2]; self.dim()];
        for (e, el) in self.elems.iter().enumerate() {
            let d = el.law.dh_db(tensor::add(self.element_b_c(e, x), b_m))?;
            for a in 0..3 {
                if let Some(i) = self.pattern.element(e).idx[a] {
                    let dc = tensor::mat_vec(&d, el.curl[a]);
                    g[i] = tensor::add(g[i], tensor::scale(el.area, dc));
                }
            }
        }
        Ok(g)
    }

    /// Assembled `∫σ̂ ê ψ` for unit drives: `(∂t a_M, ∂t b_x, ∂t b_y)`.
    pub fn unit_sources(&self) -> [Vec<f64>; 3] {
        let drives = [
            MacroSource { da_m_dt: 1.0, ..Default::default() },
            MacroSource { db_m_dt: [1.0, 0.0], ..Default::default() },
            MacroSource { db_m_dt: [0.0, 1.0], ..Default::default() },
        ];
        drives.map(|s| {
            let mut v = vec![0.0; self.dim()];
            for (e, el) in self.elems.iter().enumerate() {
                if el.sigma_hat == 0.0 {
                    continue;
                }
                let ev = self.e_hat(e, &s);
                let len = self.pattern.element(e).len;
                let mut loc = [0.0; 4];
                for a in 0..len {
                    loc[a] = (0..len).map(|b| el.mass[a][b] * ev[b]).sum();
                }
                self.pattern.scatter_vec(&mut v, e, &loc);
            }
            v
        })
    }

    pub fn factor(&self, m: &fem::SparseMatrix) -> Result<fem::Factorization> {
        self.pattern.factor(m)
    }

    /// Backward-Euler step from `x_prev`, Newton started at `guess`.
    pub fn solve_step(
        &self,
        x_prev: &[f64],
        guess: &[f64],
        source: &MacroSource,
        dt: f64,
        opts: &NewtonOptions,
    ) -> Result<(Vec<f64>, NewtonTrace)> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        let mut x = guess.to_vec();
        let mut trace = NewtonTrace::default();
        for it in 0..=opts.max_iter {
            let (r, s) = self.residual(&x, x_prev, source, dt)?;
            let (rn, sn) = (fem::l2(&r), fem::l2(&s));
            trace.residuals.push(rn);
            trace.scales.push(sn);
            if !rn.is_finite() {
                return Err(Error::NumericDomain("cell residual"));
            }
            if it >= opts.min_iter && rn <= opts.tol * sn {
                return Ok((x, trace));
            }
            if it == opts.max_iter {
                return Err(Error::NewtonDiverged { iterations: it, residual: rn, target: opts.tol * sn });
            }
            let j = self.tangent(&x, source.b_m, dt)?;
            let neg: Vec<f64> = r.iter().map(|v| -v).collect();
            let dx = self.factor(&j)?.solve(&neg)?;
            x = self.backtrack(&x, &dx, rn, x_prev, source, dt)?;
        }
        unreachable!()
    }

    /// Full Newton step unless it increases the residual; then the step is
    /// halved until it does not. The exponential saturation term makes full
    /// steps from a distant guess overshoot by orders of magnitude.
    fn backtrack(
        &self,
        x: &[f64],
        dx: &[f64],
        rn: f64,
        x_prev: &[f64],
        source: &MacroSource,
        dt: f64,
    ) -> Result<Vec<f64>> {
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = x.iter().zip(dx).map(|(a, d)| a + lambda * d).collect();
            if lambda < 1e-3 {
                return Ok(trial);
            }
            match self.residual(&trial, x_prev, source, dt) {
                Ok((r, _)) if fem::l2(&r) < rn => return Ok(trial),
                Ok(_) | Err(Error::NumericDomain(_)) => lambda *= 0.5,
                Err(e) => return Err(e),
            }
        }
    }

    /// Cell-averaged `H(b_c + b_M)`; the unit cell has area one.
    pub fn upscale_h(&self, x: &[f64], b_m: Vec2) -> Result<Vec2> {
        let mut h = [0.0; 2];
        for (e, el) in self.elems.iter().enumerate() {
            let he = el.law.h_of_b(tensor::add(self.element_b_c(e, x), b_m))?;
            h = tensor::add(h, tensor::scale(el.area, he));
        }
        Ok(h)
    }

    /// Cell-averaged `∂H/∂b` at `b_c + b_M` with `b_c` frozen.
    pub fn exact_jacobian(&self, x: &[f64], b_m: Vec2) -> Result<Tensor2> {
        let mut j = tensor::ZERO_T;
        for (e, el) in self.elems.iter().enumerate() {
            let d = el.law.dh_db(tensor::add(self.element_b_c(e, x), b_m))?;
            j = tensor::mat_add(&j, &tensor::mat_scale(el.area, &d));
        }
        Ok(j)
    }

    /// Cell-averaged magnetic energy density.
    pub fn energy_density(&self, x: &[f64], b_m: Vec2) -> Result<f64> {
        let mut w = 0.0;
        for (e, el) in self.elems.iter().enumerate() {
            w += el.area * el.law.coenergy_density(tensor::add(self.element_b_c(e, x), b_m))?;
        }
        Ok(w)
    }

    /// Cell-averaged Joule density `σ̂ |ê − ∂t(â + ξ)|²` over a step.
    pub fn joule_density(&self, x: &[f64], x_prev: &[f64], source: &MacroSource, dt: f64) -> f64 {
        let mut p = 0.0;
        for (e, el) in self.elems.iter().enumerate() {
            if el.sigma_hat == 0.0 {
                continue;
            }
            let xv = self.local_values(e, x);
            let pv = self.local_values(e, x_prev);
            let ev = self.e_hat(e, source);
            let xi = if self.pattern.element(e).len == 4 { (xv[3] - pv[3]) / dt } else { 0.0 };
            let w: [f64; 3] = std::array::from_fn(|a| ev[a] - (xv[a] - pv[a]) / dt - xi);
            for a in 0..3 {
                for b in 0..3 {
                    p += w[a] * el.mass[a][b] * w[b];
                }
            }
        }
        p
    }

    /// Periodic corrector `χ^j` of the conductivity cell problem, nodal.
    pub fn solve_conductivity_cell(&self, direction: usize) -> Result<Vec<f64>> {
        if direction > 1 {
            return Err(Error::Config(format!("direction must be 0 or 1, got {direction}")));
        }
        let sigma = self.regularized_sigma()?;
        let mesh = &self.mesh;
        let sys = fem::assemble(mesh, &self.dofs, |t, p| {
            let s = sigma.sigma(mesh.regions[t]);
            let (area, g) = fem::p1_gradients(p)?;
            let k = fem::element_stiffness(p, &tensor::mat_scale(s, &tensor::IDENTITY))?;
            let f = [0, 1, 2].map(|i| s * area * g[i][direction]);
            Ok((k, f))
        })?;
        let free = fem::solve_linear(&sys)?;
        Ok(self.dofs.expand(&free))
    }

    fn regularized_sigma(&self) -> Result<ConductivityField> {
        let grain = self.materials.sigma.max();
        if grain <= 0.0 {
            return Err(Error::Config("conductivity cell problem needs a conducting phase".into()));
        }
        Ok(self.materials.sigma.regularized(SIGMA_REG_FACTOR * grain))
    }

    /// `σ_M,ij = ⟨σ (δ_ij − ∂_i χ^j)⟩` with the regularized conductivity.
    pub fn homogenized_sigma(&self) -> Result<Tensor2> {
        let sigma = self.regularized_sigma()?;
        let chi = [self.solve_conductivity_cell(0)?, self.solve_conductivity_cell(1)?];
        let mut out = tensor::ZERO_T;
        for (t, tri) in self.mesh.triangles.iter().enumerate() {
            let s = sigma.sigma(self.mesh.regions[t]);
            let (area, g) = fem::p1_gradients(&self.mesh.coords(t))?;
            for j in 0..2 {
                let grad: Vec2 = (0..3).fold([0.0; 2], |acc, a| tensor::add(acc, tensor::scale(chi[j][tri[a]], g[a])));
                for i in 0..2 {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    out[i][j] += area * s * (delta - grad[i]);
                }
            }
        }
        Ok(out)
    }

    /// Text table `gauss_id time_index dof_index value`.
    pub fn write_waveform<W: std::io::Write>(
        mut w: W,
        gauss_id: usize,
        samples: &[Vec<f64>],
    ) -> Result<()> {
        for (k, x) in samples.iter().enumerate() {
            for (i, v) in x.iter().enumerate() {
                writeln!(w, "{gauss_id} {k} {i} {v:e}")?;
            }
        }
        Ok(())
    }
}

/// Connected components of the elements selected by `conducting`, with
/// periodic aliases treated as the same node.
fn conductor_groups(
    mesh: &Mesh2D,
    pairing: &PeriodicPairing,
    conducting: impl Fn(usize) -> bool,
) -> (Vec<Option<usize>>, usize) {
    let master = pairing.master_map(mesh.node_count());
    let nt = mesh.triangle_count();
    let mut parent: Vec<usize> = (0..nt).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut owner = vec![usize::MAX; mesh.node_count()];
    for t in (0..nt).filter(|&t| conducting(t)) {
        for &n in &mesh.triangles[t] {
            let m = master[n];
            if owner[m] == usize::MAX {
                owner[m] = t;
            } else {
                let (a, b) = (find(&mut parent, owner[m]), find(&mut parent, t));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut label = vec![usize::MAX; nt];
    let mut groups = vec![None; nt];
    let mut count = 0;
    for t in (0..nt).filter(|&t| conducting(t)) {
        let r = find(&mut parent, t);
        if label[r] == usize::MAX {
            label[r] = count;
            count += 1;
        }
        groups[t] = Some(label[r]);
    }
    (groups, count)
}

/// One cell instance: shared model plus its own unknowns.
#[derive(Clone, Debug)]
pub struct CellState {
    pub model: Arc<CellModel>,
    pub x: Vec<f64>,
    pub time: f64,
}

impl CellState {
    /// Nodal correction unknowns without the floating potentials.
    pub fn alpha_c(&self) -> &[f64] {
        &self.x[..self.model.n_free()]
    }

    pub fn b_c(&self) -> Vec<Vec2> {
        self.model.b_c(&self.x)
    }

    /// Area-weighted mean of `b_c`.
    pub fn mean_b_c(&self) -> Vec2 {
        let b = self.b_c();
        self.model.elems.iter().zip(&b).fold([0.0; 2], |acc, (el, be)| tensor::add(acc, tensor::scale(el.area, *be)))
    }
}

/// Backward-Euler step of the correction problem, Newton started from the
/// previous state.
pub fn meso_step(
    cell: &CellState,
    source: &MacroSource,
    dt: f64,
    newton: &NewtonOptions,
) -> Result<(CellState, NewtonTrace)> {
    meso_step_from(cell, &cell.x, source, dt, newton)
}

/// As [`meso_step`] with an explicit Newton initial guess.
pub fn meso_step_from(
    cell: &CellState,
    guess: &[f64],
    source: &MacroSource,
    dt: f64,
    newton: &NewtonOptions,
) -> Result<(CellState, NewtonTrace)> {
    let (x, trace) = cell.model.solve_step(&cell.x, guess, source, dt, newton)?;
    Ok((CellState { model: Arc::clone(&cell.model), x, time: cell.time + dt }, trace))
}

pub fn upscale_h(cell: &CellState, b_m: Vec2) -> Result<Vec2> {
    cell.model.upscale_h(&cell.x, b_m)
}

pub fn exact_jacobian(cell: &CellState, b_m: Vec2) -> Result<Tensor2> {
    cell.model.exact_jacobian(&cell.x, b_m)
}

/// Upscaled law from re-solved cells: nominal solve plus one perturbed solve
/// per field component.
#[derive(Clone, Debug)]
pub struct FdJacobian {
    pub law: UpscaledLaw,
    pub nominal: CellState,
    pub solve_count: usize,
    pub newton_updates: usize,
}

/// Iteration floor for cell sub-solves. Large source increments start far
/// from the solution and spend many damped steps before the quadratic phase.
pub const CELL_MIN_MAX_ITER: usize = 50;

/// Cell solves per finite-difference Jacobian in 2D: the nominal state and
/// one perturbation per flux component.
pub const FD_SOLVES: usize = 3;

/// Tolerance used for the three solves of a finite-difference Jacobian.
/// Differences of `h_M` are divided by `δ`, so the cell residual must sit
/// far below the perturbation.
pub const FD_NEWTON_TOL: f64 = 1e-12;

/// Forward differences of the upscaled field with the correction re-solved.
/// Perturbing `b_M` by `δ e_k` also perturbs `∂t b_M` by `δ e_k / dt`, which
/// is the total derivative through the backward difference of the macro
/// iterate.
pub fn fd_jacobian(
    cell_prev: &CellState,
    guess: Option<&[f64]>,
    source: &MacroSource,
    dt: f64,
    delta: f64,
    newton: &NewtonOptions,
) -> Result<FdJacobian> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!("fd step must be positive, got {delta}")));
    }
    let opts = NewtonOptions {
        tol: newton.tol.min(FD_NEWTON_TOL),
        max_iter: newton.max_iter.max(CELL_MIN_MAX_ITER),
        ..*newton
    };
    let model = &cell_prev.model;
    let guess = guess.unwrap_or(&cell_prev.x);
    let (x0, t0) = model.solve_step(&cell_prev.x, guess, source, dt, &opts)?;
    let h0 = model.upscale_h(&x0, source.b_m)?;
    let mut updates = t0.updates();
    let mut jac = tensor::ZERO_T;
    for k in 0..2 {
        let mut s = *source;
        s.b_m[k] += delta;
        s.db_m_dt[k] += delta / dt;
        let (xk, tk) = model.solve_step(&cell_prev.x, &x0, &s, dt, &NewtonOptions { min_iter: 1, ..opts })?;
        updates += tk.updates();
        let hk = model.upscale_h(&xk, s.b_m)?;
        for i in 0..2 {
            jac[i][k] = (hk[i] - h0[i]) / delta;
        }
    }
    Ok(FdJacobian {
        law: UpscaledLaw { h_m: h0, dh_m_db_m: jac },
        nominal: CellState { model: Arc::clone(model), x: x0, time: cell_prev.time + dt },
        solve_count: FD_SOLVES,
        newton_updates: updates,
    })
}

/// Default FD step `1e-6 · max(1, |b_M|)`.
pub fn default_fd_delta(b_m: Vec2) -> f64 {
    1e-6 * tensor::norm(b_m).max(1.0)
}
