//! Coupled macro–cell Newton on the full block system.
//!
//! With macro unknowns `α_M` and cell unknowns `x_g` the step Jacobian is
//!
//! ```text
//! [ A    B_1 … B_G ]
//! [ C_1  D_1       ]
//! [ ⋮        ⋱     ]
//! [ C_G        D_G ]
//! ```
//!
//! where `A = ∂R_M/∂α_M` with cells frozen, `B_g = ∂R_M/∂x_g`,
//! `C_g = ∂R_g/∂α_M` through `b_M` and the downscaled sources, and
//! `D_g = M/dt + ∂F_g/∂x_g`. The update is computed either from the dense
//! assembled system or by eliminating the cell blocks (Schur complement).

use std::sync::Arc;

use crate::analysis::LossSeries;
use crate::cell::{CellModel, CellState, MacroSource, NewtonOptions};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fem;
use crate::macroscale::{GaussPointLaw, LawQuery, MacroProblem, Provenance};
use crate::tensor::{self, Tensor2, Vec2};
use crate::waveform::{uniform_grid, Waveform};

/// Macro and cell iterate of one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledIterate {
    pub macro_x: Vec<f64>,
    pub cells: Vec<Vec<f64>>,
}

/// Newton increment of the coupled system.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledUpdate {
    pub macro_dx: Vec<f64>,
    pub cell_dx: Vec<Vec<f64>>,
}

/// Residuals and Jacobian blocks at one iterate.
pub struct CoupledBlocks {
    pub r_macro: Vec<f64>,
    pub s_macro: Vec<f64>,
    pub r_cells: Vec<Vec<f64>>,
    pub s_cells: Vec<Vec<f64>>,
    pub a: fem::SparseMatrix,
    /// `B_g` as `(macro row, cell column, value)` triplets.
    pub b: Vec<Vec<(usize, usize, f64)>>,
    /// `C_g` as `(cell row, macro column, value)` triplets.
    pub c: Vec<Vec<(usize, usize, f64)>>,
    pub d: Vec<fem::SparseMatrix>,
}

fn sources(problem: &MacroProblem, prev: &[f64], x: &[f64], dt: f64, t: f64) -> Vec<MacroSource> {
    let (b, bp) = (problem.gauss_b(x), problem.gauss_b(prev));
    let (a, ap) = (problem.gauss_a(x), problem.gauss_a(prev));
    let q = LawQuery { step: 0, iteration: 0, time: t, dt, b: &b, b_prev: &bp, a: &a, a_prev: &ap };
    (0..b.len()).map(|g| q.source(g)).collect()
}

/// Assembles residuals and blocks at `it` for the step `prev → it` ending at `t`.
pub fn assemble_blocks(
    problem: &MacroProblem,
    model: &CellModel,
    prev: &CoupledIterate,
    it: &CoupledIterate,
    dt: f64,
    t: f64,
) -> Result<CoupledBlocks> {
    let src = sources(problem, &prev.macro_x, &it.macro_x, dt, t);
    let units = model.unit_sources();
    let n_gp = problem.n_gauss();
    let mut laws = Vec::with_capacity(n_gp);
    let (mut r_cells, mut s_cells, mut b_blocks, mut c_blocks, mut d_blocks) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for g in 0..n_gp {
        let x = &it.cells[g];
        let b_m = src[g].b_m;
        laws.push(GaussPointLaw {
            h_m: model.upscale_h(x, b_m)?,
            dh_m_db_m: model.exact_jacobian(x, b_m)?,
            provenance: Provenance::Exact,
        });
        let (r, s) = model.residual(x, &prev.cells[g], &src[g], dt)?;
        r_cells.push(r);
        s_cells.push(s);
        let coupling = model.flux_coupling(x, b_m)?;
        let tri = problem.gauss_elements()[g];
        let area = problem.element_area(tri);
        let curl = problem.element_curl(tri);
        let dofs = problem.element_dofs(tri);
        let mut bg = Vec::new();
        let mut cg = Vec::new();
        for (a, dof) in dofs.iter().enumerate() {
            let Some(col) = *dof else { continue };
            for (i, gi) in coupling.iter().enumerate() {
                let flux = tensor::dot(*gi, curl[a]);
                bg.push((col, i, area * flux));
                let drive = units[0][i] / 3.0 + units[1][i] * curl[a][0] + units[2][i] * curl[a][1];
                cg.push((i, col, flux - drive / dt));
            }
        }
        b_blocks.push(bg);
        c_blocks.push(cg);
        d_blocks.push(model.tangent(x, b_m, dt)?);
    }
    let (r_macro, s_macro) = problem.residual(&prev.macro_x, &it.macro_x, &laws, dt, t)?;
    let a = problem.tangent(&it.macro_x, &laws, dt)?;
    Ok(CoupledBlocks { r_macro, s_macro, r_cells, s_cells, a, b: b_blocks, c: c_blocks, d: d_blocks })
}

/// Newton increment from the dense assembled system.
pub fn full_update(blocks: &CoupledBlocks) -> Result<CoupledUpdate> {
    let nm = blocks.a.nrows();
    let dims: Vec<usize> = blocks.d.iter().map(|d| d.nrows()).collect();
    let n = nm + dims.iter().sum::<usize>();
    let mut jac = vec![vec![0.0; n]; n];
    let mut rhs = vec![0.0; n];
    for (r, c, v) in blocks.a.entries() {
        jac[r][c] += v;
    }
    rhs[..nm].iter_mut().zip(&blocks.r_macro).for_each(|(o, r)| *o = -r);
    let mut off = nm;
    for g in 0..dims.len() {
        for &(r, c, v) in &blocks.b[g] {
            jac[r][off + c] += v;
        }
        for &(r, c, v) in &blocks.c[g] {
            jac[off + r][c] += v;
        }
        for (r, c, v) in blocks.d[g].entries() {
            jac[off + r][off + c] += v;
        }
        rhs[off..off + dims[g]].iter_mut().zip(&blocks.r_cells[g]).for_each(|(o, r)| *o = -r);
        off += dims[g];
    }
    let dx = fem::dense_solve(&jac, &rhs)?;
    let mut cell_dx = Vec::with_capacity(dims.len());
    let mut off = nm;
    for d in dims {
        cell_dx.push(dx[off..off + d].to_vec());
        off += d;
    }
    Ok(CoupledUpdate { macro_dx: dx[..nm].to_vec(), cell_dx })
}

/// Newton increment by eliminating the cell blocks:
/// `(A − Σ B D⁻¹ C) Δα = −R_M + Σ B D⁻¹ R_g`, then
/// `Δx_g = D⁻¹(−R_g − C Δα)`.
pub fn schur_update(blocks: &CoupledBlocks) -> Result<CoupledUpdate> {
    let nm = blocks.a.nrows();
    let mut schur = blocks.a.to_dense();
    let mut rhs: Vec<f64> = blocks.r_macro.iter().map(|r| -r).collect();
    let mut factors = Vec::with_capacity(blocks.d.len());
    for g in 0..blocks.d.len() {
        let f = fem::Factorization::new(&blocks.d[g])?;
        let dim = blocks.d[g].nrows();
        let mut cols: Vec<usize> = blocks.c[g].iter().map(|e| e.1).collect();
        cols.sort_unstable();
        cols.dedup();
        let dinv_r = f.solve(&blocks.r_cells[g])?;
        for &(row, i, v) in &blocks.b[g] {
            rhs[row] += v * dinv_r[i];
        }
        for &col in &cols {
            let mut c_col = vec![0.0; dim];
            for &(i, c, v) in &blocks.c[g] {
                if c == col {
                    c_col[i] += v;
                }
            }
            let y = f.solve(&c_col)?;
            for &(row, i, v) in &blocks.b[g] {
                schur[row][col] -= v * y[i];
            }
        }
        factors.push(f);
    }
    let macro_dx = fem::dense_solve(&schur, &rhs)?;
    let mut cell_dx = Vec::with_capacity(factors.len());
    for (g, f) in factors.iter().enumerate() {
        let mut r: Vec<f64> = blocks.r_cells[g].iter().map(|v| -v).collect();
        for &(i, c, v) in &blocks.c[g] {
            r[i] -= v * macro_dx[c];
        }
        cell_dx.push(f.solve(&r)?);
    }
    debug_assert_eq!(macro_dx.len(), nm);
    Ok(CoupledUpdate { macro_dx, cell_dx })
}

/// Consistent upscaled tangent `d h_M / d b_M` with the cell re-solved,
/// where a change of `b_M` also changes `∂t b_M` through the backward
/// difference over `dt`: `J − Gᵀ D⁻¹ (G − u_b / dt)`.
pub fn consistent_tangent(model: &CellModel, x: &[f64], b_m: Vec2, dt: f64) -> Result<Tensor2> {
    let j = model.exact_jacobian(x, b_m)?;
    let g = model.flux_coupling(x, b_m)?;
    let units = model.unit_sources();
    let f = model.factor(&model.tangent(x, b_m, dt)?)?;
    let mut out = j;
    for k in 0..2 {
        let c: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi[k] - units[1 + k][i] / dt).collect();
        let y = f.solve(&c)?;
        for (r, row) in out.iter_mut().enumerate() {
            row[k] -= g.iter().zip(&y).map(|(gi, yi)| gi[r] * yi).sum::<f64>();
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct FullNewtonReport {
    pub waveform: Waveform,
    pub newton_counts: Vec<usize>,
    /// Macro iterates of every step, starting with the previous state.
    pub macro_iterates: Vec<Vec<Vec<f64>>>,
    pub losses: LossSeries,
    pub final_cells: Vec<CellState>,
}

fn relative(r: &[f64], s: &[f64]) -> f64 {
    let (rn, sn) = (fem::l2(r), fem::l2(s));
    if rn == 0.0 {
        0.0
    } else {
        rn / sn
    }
}

/// Coupled Newton over `n_steps` equal steps of `[0, t_end]`; `schur`
/// selects the elimination path instead of the dense solve.
pub fn run_fullnewton_with(
    problem: &MacroProblem,
    model: &Arc<CellModel>,
    t_end: f64,
    n_steps: usize,
    newton: &NewtonOptions,
    dof_budget: usize,
    schur: bool,
) -> Result<FullNewtonReport> {
    let n_gp = problem.n_gauss();
    let dofs = problem.dim() + n_gp * model.dim();
    if dofs > dof_budget {
        return Err(Error::Budget { dofs, budget: dof_budget });
    }
    let grid = uniform_grid(0.0, t_end, n_steps);
    let mut state = CoupledIterate { macro_x: problem.zero_state(0.0).alpha, cells: vec![vec![0.0; model.dim()]; n_gp] };
    let mut values = vec![state.macro_x.clone()];
    let areas: Vec<f64> = problem.gauss_elements().iter().map(|&t| problem.element_area(t)).collect();
    let mut power = vec![0.0];
    let mut energy = vec![0.0];
    let mut newton_counts = Vec::with_capacity(n_steps);
    let mut macro_iterates = Vec::with_capacity(n_steps);
    for k in 1..=n_steps {
        let (dt, t) = (grid[k] - grid[k - 1], grid[k]);
        let mut it = state.clone();
        let mut history = vec![it.macro_x.clone()];
        let mut count = 0;
        loop {
            let blocks = assemble_blocks(problem, model, &state, &it, dt, t).map_err(|e| e.context(format!("step {k}")))?;
            count += 1;
            let mut worst = relative(&blocks.r_macro, &blocks.s_macro);
            for g in 0..n_gp {
                worst = worst.max(relative(&blocks.r_cells[g], &blocks.s_cells[g]));
            }
            if !worst.is_finite() {
                return Err(Error::NumericDomain("coupled residual").context(format!("step {k}")));
            }
            if count > newton.min_iter && worst <= newton.tol {
                break;
            }
            if count > newton.max_iter {
                return Err(Error::NewtonDiverged { iterations: count - 1, residual: worst, target: newton.tol }
                    .context(format!("step {k}")));
            }
            let upd = if schur { schur_update(&blocks)? } else { full_update(&blocks)? };
            it.macro_x.iter_mut().zip(&upd.macro_dx).for_each(|(x, d)| *x += d);
            for (c, d) in it.cells.iter_mut().zip(&upd.cell_dx) {
                c.iter_mut().zip(d).for_each(|(x, dd)| *x += dd);
            }
            history.push(it.macro_x.clone());
        }
        let src = sources(problem, &state.macro_x, &it.macro_x, dt, t);
        let mut p = 0.0;
        let mut w = problem.direct_energy(&it.macro_x)?;
        for g in 0..n_gp {
            p += areas[g] * model.joule_density(&it.cells[g], &state.cells[g], &src[g], dt);
            w += areas[g] * model.energy_density(&it.cells[g], src[g].b_m)?;
        }
        power.push(p);
        energy.push(w);
        newton_counts.push(count);
        macro_iterates.push(history);
        values.push(it.macro_x.clone());
        state = it;
    }
    let final_cells = state
        .cells
        .into_iter()
        .map(|x| CellState { model: Arc::clone(model), x, time: t_end })
        .collect();
    Ok(FullNewtonReport {
        waveform: Waveform::new(grid.clone(), values)?,
        newton_counts,
        macro_iterates,
        losses: LossSeries::new(grid, power, energy)?,
        final_cells,
    })
}

/// Coupled Newton with the dense full Jacobian; refuses instances above the
/// configured unknown budget.
pub fn run_monolithic_fullnewton(config: &RunConfig) -> Result<FullNewtonReport> {
    config.validate()?;
    let problem = config.macro_problem()?;
    let model = config.cell_model()?;
    run_fullnewton_with(
        &problem,
        &model,
        config.time.t_end,
        config.time.n_steps_macro,
        &config.newton(),
        config.solver.dof_budget,
        false,
    )
    .map_err(|e| e.context("coupled newton run"))
}
