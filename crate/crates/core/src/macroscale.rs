//! Macroscale transient solver on the quarter domain.
//!
//! Directly modelled regions (air, inductor, resolved grains) evaluate their
//! own law; homogenized triangles ask a [`MaterialProvider`] for `h_M` and its
//! tangent at their single Gauss point. Conducting direct regions may be
//! floating (zero net current), which adds one potential unknown per
//! connected conductor after the nodal unknowns.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::fem::{self, AssemblyPattern, DofMap, ElementDofs, Local4};
use crate::material::MaterialLaw;
use crate::mesh::{BoundaryTag, Mesh2D, RegionTag};
use crate::tensor::{self, Tensor2, Vec2};
use crate::waveform::{uniform_grid, Waveform};

pub use crate::cell::{NewtonOptions, NewtonTrace};

/// Smallest damping factor tried before a step is taken regardless of the residual.
const MIN_STEP_LENGTH: f64 = 1.0 / 64.0;

/// Inductor current density `j_s0 sin(2π f t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceSpec {
    pub j_s0: f64,
    pub f: f64,
}

impl SourceSpec {
    pub fn new(j_s0: f64, f: f64) -> Result<Self> {
        if !(f > 0.0) || !j_s0.is_finite() {
            return Err(Error::Config(format!("source needs f > 0 and finite amplitude, got ({j_s0}, {f})")));
        }
        Ok(SourceSpec { j_s0, f })
    }

    pub fn value(&self, t: f64) -> f64 {
        self.j_s0 * (2.0 * std::f64::consts::PI * self.f * t).sin()
    }

    pub fn period(&self) -> f64 {
        1.0 / self.f
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Exact,
    FiniteDifference,
    FrozenWaveform,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussPointLaw {
    pub h_m: Vec2,
    pub dh_m_db_m: Tensor2,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementMaterial {
    Direct { law: MaterialLaw, sigma: f64 },
    Homogenized { gauss_id: usize },
}

#[derive(Clone, Debug)]
struct MacroElement {
    area: f64,
    curl: [Vec2; 3],
    material: ElementMaterial,
    inductor: bool,
    sigma: f64,
    mass: Local4,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacroState {
    /// Free nodal unknowns followed by floating potentials.
    pub alpha: Vec<f64>,
    pub time: f64,
}

/// Per-Gauss-point macro data handed to the material provider.
#[derive(Clone, Debug)]
pub struct LawQuery<'a> {
    pub step: usize,
    pub iteration: usize,
    pub time: f64,
    pub dt: f64,
    pub b: &'a [Vec2],
    pub b_prev: &'a [Vec2],
    /// Element-mean `a_M`.
    pub a: &'a [f64],
    pub a_prev: &'a [f64],
}

impl LawQuery<'_> {
    /// Backward-difference source for Gauss point `g`.
    pub fn source(&self, g: usize) -> crate::cell::MacroSource {
        crate::cell::MacroSource {
            b_m: self.b[g],
            db_m_dt: tensor::scale(1.0 / self.dt, tensor::sub(self.b[g], self.b_prev[g])),
            da_m_dt: (self.a[g] - self.a_prev[g]) / self.dt,
        }
    }
}

/// Supplies homogenized laws during macro Newton iterations.
pub trait MaterialProvider {
    fn evaluate(&mut self, query: &LawQuery<'_>) -> Result<Vec<GaussPointLaw>>;

    /// Called once per converged step with the accepted state.
    fn accept(&mut self, _query: &LawQuery<'_>, _state: &MacroState) -> Result<()> {
        Ok(())
    }
}

/// Provider for problems without homogenized regions.
pub struct NoGaussPoints;

impl MaterialProvider for NoGaussPoints {
    fn evaluate(&mut self, _q: &LawQuery<'_>) -> Result<Vec<GaussPointLaw>> {
        Ok(Vec::new())
    }
}

/// Closed-form homogenized law, identical at every Gauss point.
pub struct UniformLaw(pub MaterialLaw);

impl MaterialProvider for UniformLaw {
    fn evaluate(&mut self, q: &LawQuery<'_>) -> Result<Vec<GaussPointLaw>> {
        q.b.iter()
            .map(|&b| {
                Ok(GaussPointLaw { h_m: self.0.h_of_b(b)?, dh_m_db_m: self.0.dh_db(b)?, provenance: Provenance::Exact })
            })
            .collect()
    }
}

#[derive(Debug)]
pub struct MacroProblem {
    pub mesh: Arc<Mesh2D>,
    pub dofs: DofMap,
    pub source: SourceSpec,
    elems: Vec<MacroElement>,
    gauss_elements: Vec<usize>,
    n_groups: usize,
    pattern: AssemblyPattern,
    assemble_ns: AtomicU64,
    solve_ns: AtomicU64,
}

impl MacroProblem {
    /// Quarter-domain problem with `a = 0` on the outer and bottom boundaries.
    /// `direct` gives `(law, σ)` for every non-homogenized region.
    pub fn quarter(
        mesh: Arc<Mesh2D>,
        direct: impl Fn(RegionTag) -> (MaterialLaw, f64),
        floating_conductors: bool,
        source: SourceSpec,
    ) -> Result<Self> {
        let mut dirichlet = mesh.boundary_nodes(BoundaryTag::GammaInf);
        dirichlet.extend(mesh.boundary_nodes(BoundaryTag::GammaH));
        let dofs = DofMap::with_dirichlet(mesh.node_count(), &dirichlet);
        let mut next_gp = 0;
        let materials = mesh
            .regions
            .iter()
            .map(|&tag| {
                if tag == RegionTag::Homogenized {
                    next_gp += 1;
                    ElementMaterial::Homogenized { gauss_id: next_gp - 1 }
                } else {
                    let (law, sigma) = direct(tag);
                    ElementMaterial::Direct { law, sigma }
                }
            })
            .collect();
        MacroProblem::from_parts(mesh, dofs, materials, floating_conductors, source)
    }

    pub fn from_parts(
        mesh: Arc<Mesh2D>,
        dofs: DofMap,
        materials: Vec<ElementMaterial>,
        floating_conductors: bool,
        source: SourceSpec,
    ) -> Result<Self> {
        mesh.validate()?;
        if materials.len() != mesh.triangle_count() || dofs.n_nodes() != mesh.node_count() {
            return Err(Error::Inconsistent("materials or dofs do not match the mesh".into()));
        }
        let sigma_of = |t: usize| match materials[t] {
            ElementMaterial::Direct { sigma, .. } => sigma,
            ElementMaterial::Homogenized { .. } => 0.0,
        };
        let (group_of, n_groups) = if floating_conductors {
            conductor_components(&mesh, |t| sigma_of(t) > 0.0)
        } else {
            (vec![None; mesh.triangle_count()], 0)
        };
        let n_free = dofs.n_free();
        let mut elems = Vec::with_capacity(mesh.triangle_count());
        let mut el_dofs = Vec::with_capacity(mesh.triangle_count());
        let mut gauss_elements = Vec::new();
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let coords = mesh.coords(t);
            let (area, grad) = fem::p1_gradients(&coords)
                .map_err(|_| Error::SingularElement { triangle: t, area: mesh.signed_area(t) })?;
            if let ElementMaterial::Homogenized { gauss_id } = materials[t] {
                if gauss_id != gauss_elements.len() {
                    return Err(Error::Inconsistent("gauss ids must be numbered in element order".into()));
                }
                gauss_elements.push(t);
            }
            let sigma = sigma_of(t);
            let mut mass = [[0.0; 4]; 4];
            let m3 = fem::element_mass(&coords, sigma)?;
            for a in 0..3 {
                mass[a][..3].copy_from_slice(&m3[a]);
                mass[a][3] = sigma * area / 3.0;
                mass[3][a] = sigma * area / 3.0;
            }
            mass[3][3] = sigma * area;
            elems.push(MacroElement {
                area,
                curl: grad.map(tensor::rot),
                material: materials[t],
                inductor: mesh.regions[t] == RegionTag::Inductor,
                sigma,
                mass,
            });
            el_dofs.push(ElementDofs::nodes(&dofs, tri).with_extra(group_of[t].map(|g| n_free + g)));
        }
        let pattern = AssemblyPattern::new(n_free + n_groups, el_dofs)?;
        Ok(MacroProblem {
            mesh,
            dofs,
            source,
            elems,
            gauss_elements,
            n_groups,
            pattern,
            assemble_ns: AtomicU64::new(0),
            solve_ns: AtomicU64::new(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.pattern.dim()
    }

    /// Accumulated `(assembly, linear solve)` wall time inside [`Self::solve_step`].
    pub fn clock(&self) -> (Duration, Duration) {
        (
            Duration::from_nanos(self.assemble_ns.load(Ordering::Relaxed)),
            Duration::from_nanos(self.solve_ns.load(Ordering::Relaxed)),
        )
    }

    pub fn reset_clock(&self) {
        self.assemble_ns.store(0, Ordering::Relaxed);
        self.solve_ns.store(0, Ordering::Relaxed);
    }

    fn tick(counter: &AtomicU64, since: Instant) {
        counter.fetch_add(since.elapsed().as_nanos() as u64, Ordering::Relaxed);
    }

    pub fn n_gauss(&self) -> usize {
        self.gauss_elements.len()
    }

    pub fn n_conductors(&self) -> usize {
        self.n_groups
    }

    /// Mesh triangle of each Gauss point.
    pub fn gauss_elements(&self) -> &[usize] {
        &self.gauss_elements
    }

    pub fn element_area(&self, t: usize) -> f64 {
        self.elems[t].area
    }

    /// `curl φ_i` of element `t`.
    pub fn element_curl(&self, t: usize) -> [Vec2; 3] {
        self.elems[t].curl
    }

    /// System indices of element `t`'s vertices (`None` when constrained).
    pub fn element_dofs(&self, t: usize) -> [Option<usize>; 3] {
        let d = self.pattern.element(t);
        [d.idx[0], d.idx[1], d.idx[2]]
    }

    pub fn zero_state(&self, time: f64) -> MacroState {
        MacroState { alpha: vec![0.0; self.dim()], time }
    }

    pub fn nodal(&self, alpha: &[f64]) -> Vec<f64> {
        self.dofs.expand(&alpha[..self.dofs.n_free()])
    }

    fn local_values(&self, t: usize, x: &[f64]) -> [f64; 4] {
        let d = self.pattern.element(t);
        let mut v = [0.0; 4];
        for a in 0..d.len {
            if let Some(i) = d.idx[a] {
                v[a] = x[i];
            }
        }
        v
    }

    pub fn element_b(&self, t: usize, x: &[f64]) -> Vec2 {
        let v = self.local_values(t, x);
        let c = &self.elems[t].curl;
        [
            v[0] * c[0][0] + v[1] * c[1][0] + v[2] * c[2][0],
            v[0] * c[0][1] + v[1] * c[1][1] + v[2] * c[2][1],
        ]
    }

    pub fn element_mean_a(&self, t: usize, x: &[f64]) -> f64 {
        let v = self.local_values(t, x);
        (v[0] + v[1] + v[2]) / 3.0
    }

    /// `b_M` at every triangle.
    pub fn all_b(&self, x: &[f64]) -> Vec<Vec2> {
        (0..self.elems.len()).map(|t| self.element_b(t, x)).collect()
    }

    pub fn gauss_b(&self, x: &[f64]) -> Vec<Vec2> {
        self.gauss_elements.iter().map(|&t| self.element_b(t, x)).collect()
    }

    pub fn gauss_a(&self, x: &[f64]) -> Vec<f64> {
        self.gauss_elements.iter().map(|&t| self.element_mean_a(t, x)).collect()
    }

    fn check_laws(&self, laws: &[GaussPointLaw]) -> Result<()> {
        if laws.len() < self.n_gauss() {
            return Err(Error::Coverage(laws.len()));
        }
        Ok(())
    }

    /// Residual of the backward-Euler step and its absolute-contribution scale.
    pub fn residual(
        &self,
        prev: &[f64],
        x: &[f64],
        laws: &[GaussPointLaw],
        dt: f64,
        t: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_laws(laws)?;
        let js = self.source.value(t);
        let mut r = vec![0.0; self.dim()];
        let mut s = vec![0.0; self.dim()];
        for (e, el) in self.elems.iter().enumerate() {
            let h = match el.material {
                ElementMaterial::Direct { law, .. } => law.h_of_b(self.element_b(e, x))?,
                ElementMaterial::Homogenized { gauss_id } => laws[gauss_id].h_m,
            };
            let mut loc = [0.0; 4];
            let mut abs = [0.0; 4];
            for a in 0..3 {
                let f = el.area * tensor::dot(el.curl[a], h);
                loc[a] += f;
                abs[a] += f.abs();
                if el.inductor {
                    let src = js * el.area / 3.0;
                    loc[a] -= src;
                    abs[a] += src.abs();
                }
            }
            if el.sigma > 0.0 {
                let xv = self.local_values(e, x);
                let pv = self.local_values(e, prev);
                let len = self.pattern.element(e).len;
                for a in 0..len {
                    let rate: f64 = (0..len).map(|b| el.mass[a][b] * (xv[b] - pv[b])).sum::<f64>() / dt;
                    loc[a] += rate;
                    abs[a] += rate.abs();
                }
            }
            self.pattern.scatter_vec(&mut r, e, &loc);
            self.pattern.scatter_vec(&mut s, e, &abs);
        }
        Ok((r, s))
    }

    pub fn tangent(&self, x: &[f64], laws: &[GaussPointLaw], dt: f64) -> Result<fem::SparseMatrix> {
        self.check_laws(laws)?;
        let mut values = self.pattern.values();
        for (e, el) in self.elems.iter().enumerate() {
            let d = match el.material {
                ElementMaterial::Direct { law, .. } => law.dh_db(self.element_b(e, x))?,
                ElementMaterial::Homogenized { gauss_id } => laws[gauss_id].dh_m_db_m,
            };
            let mut loc = [[0.0; 4]; 4];
            for a in 0..3 {
                let dc = tensor::mat_vec(&d, el.curl[a]);
                for b in 0..3 {
                    loc[a][b] = el.area * tensor::dot(dc, el.curl[b]);
                }
            }
            if el.sigma > 0.0 {
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

    /// One Newton update `x ← x − J⁻¹ R`; no damping.
    pub fn newton_update(
        &self,
        prev: &[f64],
        x: &[f64],
        laws: &[GaussPointLaw],
        jacobian_laws: &[GaussPointLaw],
        dt: f64,
        t: f64,
    ) -> Result<Vec<f64>> {
        let (r, _) = self.residual(prev, x, laws, dt, t)?;
        let j = self.tangent(x, jacobian_laws, dt)?;
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let dx = self.pattern.factor(&j)?.solve(&neg)?;
        Ok(x.iter().zip(&dx).map(|(a, b)| a + b).collect())
    }

    /// Solves one backward-Euler step by Newton, calling `provider` once per
    /// iteration at the current iterate.
    pub fn solve_step(
        &self,
        prev: &MacroState,
        step: usize,
        dt: f64,
        provider: &mut dyn MaterialProvider,
        opts: &NewtonOptions,
    ) -> Result<(MacroState, NewtonTrace)> {
        let t = prev.time + dt;
        let b_prev = self.gauss_b(&prev.alpha);
        let a_prev = self.gauss_a(&prev.alpha);
        let mut x = prev.alpha.clone();
        let mut trace = NewtonTrace::default();
        // Last linearization point, its update and residual norm, and the current step length.
        let mut base: Option<(Vec<f64>, Vec<f64>, f64, f64)> = None;
        for it in 0..=opts.max_iter {
            let b = self.gauss_b(&x);
            let a = self.gauss_a(&x);
            let q = LawQuery { step, iteration: it, time: t, dt, b: &b, b_prev: &b_prev, a: &a, a_prev: &a_prev };
            let laws = provider.evaluate(&q).map_err(|e| e.context(format!("step {step}, newton {it}")))?;
            let clock = Instant::now();
            let (r, s) = self.residual(&prev.alpha, &x, &laws, dt, t)?;
            Self::tick(&self.assemble_ns, clock);
            let (rn, sn) = (fem::l2(&r), fem::l2(&s));
            trace.residuals.push(rn);
            trace.scales.push(sn);
            if !rn.is_finite() {
                return Err(Error::NumericDomain("macro residual").context(format!("step {step}")));
            }
            if it >= opts.min_iter && rn <= opts.tol * sn {
                let state = MacroState { alpha: x, time: t };
                provider.accept(&q, &state)?;
                return Ok((state, trace));
            }
            if it == opts.max_iter {
                return Err(Error::NewtonDiverged { iterations: it, residual: rn, target: opts.tol * sn }
                    .context(format!("step {step}")));
            }
            // Backtrack when the full step increased the residual; every trial counts as an iteration.
            if let Some((x0, dx, r0, lambda)) = base.as_mut() {
                if rn > *r0 && *lambda > MIN_STEP_LENGTH {
                    *lambda *= 0.5;
                    x.iter_mut().zip(x0.iter().zip(dx.iter())).for_each(|(xi, (a, d))| *xi = a + *lambda * d);
                    continue;
                }
            }
            let clock = Instant::now();
            let j = self.tangent(&x, &laws, dt)?;
            Self::tick(&self.assemble_ns, clock);
            let clock = Instant::now();
            let neg: Vec<f64> = r.iter().map(|v| -v).collect();
            let dx = self.pattern.factor(&j)?.solve(&neg).map_err(|e| e.context(format!("step {step}, newton {it}")))?;
            Self::tick(&self.solve_ns, clock);
            let x0 = x.clone();
            x.iter_mut().zip(&dx).for_each(|(xi, d)| *xi += d);
            base = Some((x0, dx, rn, 1.0));
        }
        unreachable!()
    }

    /// Joule power of directly modelled conductors over one step [W per unit depth].
    pub fn joule_power(&self, prev: &[f64], x: &[f64], dt: f64) -> f64 {
        let mut p = 0.0;
        for (e, el) in self.elems.iter().enumerate() {
            if el.sigma == 0.0 {
                continue;
            }
            let xv = self.local_values(e, x);
            let pv = self.local_values(e, prev);
            let xi = if self.pattern.element(e).len == 4 { (xv[3] - pv[3]) / dt } else { 0.0 };
            let w: [f64; 3] = std::array::from_fn(|a| (xv[a] - pv[a]) / dt + xi);
            for a in 0..3 {
                for b in 0..3 {
                    p += w[a] * el.mass[a][b] * w[b];
                }
            }
        }
        p
    }

    /// Magnetic energy of directly modelled regions [J per unit depth].
    pub fn direct_energy(&self, x: &[f64]) -> Result<f64> {
        let mut w = 0.0;
        for (e, el) in self.elems.iter().enumerate() {
            if let ElementMaterial::Direct { law, .. } = el.material {
                w += el.area * law.coenergy_density(self.element_b(e, x))?;
            }
        }
        Ok(w)
    }
}

/// Connected components of selected triangles through shared nodes.
fn conductor_components(mesh: &Mesh2D, selected: impl Fn(usize) -> bool) -> (Vec<Option<usize>>, usize) {
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
    for t in (0..nt).filter(|&t| selected(t)) {
        for &n in &mesh.triangles[t] {
            if owner[n] == usize::MAX {
                owner[n] = t;
            } else {
                let (a, b) = (find(&mut parent, owner[n]), find(&mut parent, t));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut label = vec![usize::MAX; nt];
    let mut out = vec![None; nt];
    let mut count = 0;
    for t in (0..nt).filter(|&t| selected(t)) {
        let r = find(&mut parent, t);
        if label[r] == usize::MAX {
            label[r] = count;
            count += 1;
        }
        out[t] = Some(label[r]);
    }
    (out, count)
}

/// Result of a transient macro run.
#[derive(Clone, Debug)]
pub struct MacroRun {
    pub waveform: Waveform,
    /// Provider evaluations per step (Newton iterations including the
    /// converged one).
    pub newton_counts: Vec<usize>,
    pub traces: Vec<NewtonTrace>,
}

/// Backward Euler on the uniform grid of `n_steps` steps over `[t0, t_end]`,
/// starting from `initial` (zero when `None`).
pub fn backward_euler_run(
    problem: &MacroProblem,
    t0: f64,
    t_end: f64,
    n_steps: usize,
    initial: Option<&MacroState>,
    provider: &mut dyn MaterialProvider,
    opts: &NewtonOptions,
) -> Result<MacroRun> {
    if n_steps == 0 || !(t_end > t0) {
        return Err(Error::Config(format!("need n_steps >= 1 and t_end > t0, got {n_steps}, [{t0}, {t_end}]")));
    }
    let grid = uniform_grid(t0, t_end, n_steps);
    let mut state = initial.cloned().unwrap_or_else(|| problem.zero_state(t0));
    state.time = t0;
    let mut values = vec![state.alpha.clone()];
    let mut newton_counts = Vec::with_capacity(n_steps);
    let mut traces = Vec::with_capacity(n_steps);
    for k in 1..=n_steps {
        let dt = grid[k] - grid[k - 1];
        let (mut next, trace) = problem.solve_step(&state, k, dt, provider, opts)?;
        next.time = grid[k];
        newton_counts.push(trace.residuals.len());
        traces.push(trace);
        values.push(next.alpha.clone());
        state = next;
    }
    Ok(MacroRun { waveform: Waveform::new(grid, values)?, newton_counts, traces })
}
