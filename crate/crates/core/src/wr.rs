//! Waveform-relaxation HMM over time windows.
//!
//! Each window iterates a Gauss–Seidel exchange: all cells are integrated
//! over the window on the meso grid with the previous macro waveform frozen,
//! then the macro transient is solved with the cell corrections frozen and
//! exact upscaled Jacobians. The first iterate is the window start state
//! held constant.

use std::sync::Arc;
use std::time::Instant;

use crate::analysis::{l2_norm_nodal, relative_errors, ConvergenceRow, CostAudit, LossSeries};
use crate::cell::{CellModel, CellState, MacroSource, NewtonOptions, CELL_MIN_MAX_ITER, FD_NEWTON_TOL};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fem;
use crate::macroscale::{
    backward_euler_run, GaussPointLaw, LawQuery, MacroProblem, MacroState, MaterialProvider, Provenance,
};
use crate::monolithic::{emulate_communication, map_gauss, PhaseTimings};
use crate::tensor::{self, Vec2};
use crate::waveform::{uniform_grid, Waveform};

/// Window partition and iteration control.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowPlan {
    pub t0: f64,
    pub t_end: f64,
    pub n_windows: usize,
    /// Macro steps per window.
    pub macro_steps: usize,
    /// Meso steps per window, a multiple of `macro_steps`.
    pub meso_steps: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl WindowPlan {
    pub fn new(
        t0: f64,
        t_end: f64,
        n_windows: usize,
        macro_steps: usize,
        meso_steps: usize,
        max_iter: usize,
        tol: f64,
    ) -> Result<Self> {
        let plan = WindowPlan { t0, t_end, n_windows, macro_steps, meso_steps, max_iter, tol };
        plan.validate()?;
        Ok(plan)
    }

    pub fn from_config(c: &RunConfig) -> Result<Self> {
        let t = &c.time;
        if t.n_steps_macro % t.n_windows != 0 || t.n_steps_meso % t.n_windows != 0 {
            return Err(Error::Config("step counts must divide evenly into windows".into()));
        }
        WindowPlan::new(
            0.0,
            t.t_end,
            t.n_windows,
            t.n_steps_macro / t.n_windows,
            t.n_steps_meso / t.n_windows,
            c.solver.wr_max,
            c.solver.wr_tol,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_end > self.t0) || self.n_windows == 0 || self.macro_steps == 0 || self.max_iter == 0 {
            return Err(Error::Config(format!("invalid window plan {self:?}")));
        }
        if self.meso_steps == 0 || self.meso_steps % self.macro_steps != 0 {
            return Err(Error::GridMismatch(format!(
                "meso steps {} are not a multiple of macro steps {}",
                self.meso_steps, self.macro_steps
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("wr tolerance must be positive, got {}", self.tol)));
        }
        Ok(())
    }

    /// Meso steps per macro step.
    pub fn ratio(&self) -> usize {
        self.meso_steps / self.macro_steps
    }

    /// `(t_{n−1}, t_n)` of window `n` (zero based).
    pub fn window(&self, n: usize) -> (f64, f64) {
        let w = (self.t_end - self.t0) / self.n_windows as f64;
        let a = self.t0 + w * n as f64;
        let b = if n + 1 == self.n_windows { self.t_end } else { self.t0 + w * (n + 1) as f64 };
        (a, b)
    }
}

/// Backward differences `(∂t b_M, ∂t a_M)` of one Gauss point.
pub type Rates = (Vec2, f64);

/// Sources for Gauss point `gauss_id` on `meso_grid`, which must nest the
/// grid of `macro_wf`. `b_M` and the backward differences of the macro
/// waveform are interpolated linearly; `start_rates` is the difference
/// entering the first sample (defaults to that of the first step).
pub fn downscale_waveform(
    problem: &MacroProblem,
    macro_wf: &Waveform,
    gauss_id: usize,
    meso_grid: &[f64],
    start_rates: Option<Rates>,
) -> Result<Vec<MacroSource>> {
    let tm = macro_wf.times();
    let km = tm.len() - 1;
    let kn = meso_grid.len().saturating_sub(1);
    if km == 0 || kn == 0 || kn % km != 0 {
        return Err(Error::GridMismatch(format!("{kn} meso steps do not nest {km} macro steps")));
    }
    let r = kn / km;
    let tol = 1e-9 * (tm[km] - tm[0]).abs();
    for (k, &t) in tm.iter().enumerate() {
        if (meso_grid[k * r] - t).abs() > tol {
            return Err(Error::GridMismatch(format!("macro time {t:e} missing from the meso grid")));
        }
    }
    let t = problem.gauss_elements()[gauss_id];
    let b: Vec<Vec2> = macro_wf.values().iter().map(|x| problem.element_b(t, x)).collect();
    let a: Vec<f64> = macro_wf.values().iter().map(|x| problem.element_mean_a(t, x)).collect();
    let mut d: Vec<Rates> = vec![([0.0; 2], 0.0); km + 1];
    for k in 1..=km {
        let dt = tm[k] - tm[k - 1];
        d[k] = (tensor::scale(1.0 / dt, tensor::sub(b[k], b[k - 1])), (a[k] - a[k - 1]) / dt);
    }
    d[0] = start_rates.unwrap_or(d[1]);
    let mut out = Vec::with_capacity(kn + 1);
    for (j, &tau) in meso_grid.iter().enumerate() {
        let k = (j + r - 1) / r;
        let (lo, hi) = (k.saturating_sub(1), k);
        let w = if lo == hi { 1.0 } else { (tau - tm[lo]) / (tm[hi] - tm[lo]) };
        let mix = |u: Vec2, v: Vec2| tensor::add(tensor::scale(1.0 - w, u), tensor::scale(w, v));
        out.push(MacroSource {
            b_m: mix(b[lo], b[hi]),
            db_m_dt: mix(d[lo].0, d[hi].0),
            da_m_dt: (1.0 - w) * d[lo].1 + w * d[hi].1,
        });
    }
    Ok(out)
}

/// `max_t max_e |cur − prev| / max_t max_e |init|` over per-element field
/// samples. Falls back to `cur` as normalizer when `init` vanishes.
pub fn wr_error_metrics(prev: &Waveform, cur: &Waveform, init: &Waveform) -> Result<f64> {
    for w in [cur, init] {
        if w.times() != prev.times() || w.dim() != prev.dim() {
            return Err(Error::GridMismatch("field waveforms must share grid and dimension".into()));
        }
    }
    let sup = |w: &Waveform| w.values().iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
    let num = prev
        .values()
        .iter()
        .zip(cur.values())
        .flat_map(|(p, c)| p.iter().zip(c).map(|(a, b)| (a - b).abs()))
        .fold(0.0_f64, f64::max);
    let mut den = sup(init);
    if den == 0.0 {
        den = sup(cur);
    }
    if den == 0.0 {
        return if num == 0.0 { Ok(0.0) } else { Err(Error::UndefinedNorm("zero initial and current field")) };
    }
    Ok(num / den)
}

/// Per-element flux density of every sample, flattened `[b_x, b_y, ...]`.
pub fn flux_fields(problem: &MacroProblem, wf: &Waveform) -> Result<Waveform> {
    let values = wf.values().iter().map(|x| problem.all_b(x).into_iter().flatten().collect()).collect();
    Waveform::new(wf.times().to_vec(), values)
}

/// Per-element backward difference of the mean potential, on samples 1..
pub fn rate_fields(problem: &MacroProblem, wf: &Waveform) -> Result<Waveform> {
    let n = problem.mesh.triangle_count();
    let t = wf.times();
    let mut values = Vec::with_capacity(t.len() - 1);
    for k in 1..t.len() {
        let dt = t[k] - t[k - 1];
        values.push(
            (0..n)
                .map(|e| (problem.element_mean_a(e, wf.sample(k)) - problem.element_mean_a(e, wf.sample(k - 1))) / dt)
                .collect(),
        );
    }
    Waveform::new(t[1..].to_vec(), values)
}

/// One WR iteration of one window.
#[derive(Clone, Debug)]
pub struct WrIteration {
    pub window: usize,
    pub iteration: usize,
    /// Macro waveform over the window, first sample the window start.
    pub waveform: Waveform,
    pub losses: LossSeries,
    /// Gate quantity: relative L∞(time) L²(space) change of `a_M`.
    pub change: f64,
    pub err_b: f64,
    pub err_dta: f64,
    /// Loss and energy change against the previous iterate (NaN on the first).
    pub err_losses: f64,
    pub err_energy: f64,
    pub macro_newton: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct WrWindow {
    pub iterations: Vec<WrIteration>,
    pub converged: bool,
    pub meso_grid: Vec<f64>,
    /// Final cell unknowns per Gauss point per meso sample.
    pub cells: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug)]
pub struct WrRunReport {
    pub waveform: Waveform,
    pub losses: LossSeries,
    pub windows: Vec<WrWindow>,
    pub plan: WindowPlan,
    pub meso_solves: usize,
    pub communications: usize,
    pub n_gauss: usize,
    pub timings: PhaseTimings,
}

impl WrRunReport {
    /// Iteration counts per window.
    pub fn iterations(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.iterations.len()).collect()
    }

    pub fn converged(&self) -> bool {
        self.windows.iter().all(|w| w.converged)
    }

    pub fn convergence_rows(&self) -> Vec<ConvergenceRow> {
        self.windows
            .iter()
            .flat_map(|w| w.iterations.iter())
            .map(|it| ConvergenceRow {
                window: it.window,
                iteration: it.iteration,
                err_losses: it.err_losses,
                err_energy: it.err_energy,
                err_b: it.err_b,
                err_dta: it.err_dta,
            })
            .collect()
    }

    /// Loss series of iteration `l` (one based) of a single-window run.
    pub fn iteration_losses(&self, l: usize) -> Option<&LossSeries> {
        self.windows.first()?.iterations.get(l.checked_sub(1)?).map(|it| &it.losses)
    }

    /// Average macro Newton iterations per macro step.
    pub fn mean_macro_newton(&self) -> f64 {
        let (s, n) = self
            .windows
            .iter()
            .flat_map(|w| &w.iterations)
            .flat_map(|it| &it.macro_newton)
            .fold((0usize, 0usize), |(s, n), &c| (s + c, n + 1));
        s as f64 / n.max(1) as f64
    }
}

impl CostAudit for WrRunReport {
    fn counted(&self) -> (usize, usize) {
        (self.meso_solves, self.communications)
    }

    fn expected(&self) -> (usize, usize) {
        let iters: usize = self.iterations().iter().sum();
        (iters * self.n_gauss * self.plan.meso_steps, iters * self.n_gauss)
    }
}

/// Macro laws from frozen cell corrections.
struct FrozenProvider<'a> {
    cells: &'a [Vec<Vec<f64>>],
    model: &'a CellModel,
    ratio: usize,
}

impl MaterialProvider for FrozenProvider<'_> {
    fn evaluate(&mut self, q: &LawQuery<'_>) -> Result<Vec<GaussPointLaw>> {
        let j = q.step * self.ratio;
        q.b.iter()
            .enumerate()
            .map(|(g, &b)| {
                let x = &self.cells[g][j];
                Ok(GaussPointLaw {
                    h_m: self.model.upscale_h(x, b)?,
                    dh_m_db_m: self.model.exact_jacobian(x, b)?,
                    provenance: Provenance::FrozenWaveform,
                })
            })
            .collect()
    }
}

/// Losses and energy over a window from macro iterate `wf` and cell states
/// `cells`, on the macro samples. `p0` is the power carried into sample 0.
fn window_losses(
    problem: &MacroProblem,
    model: &CellModel,
    wf: &Waveform,
    cells: &[Vec<Vec<f64>>],
    meso_grid: &[f64],
    start_rates: Option<&[Rates]>,
    p0: f64,
) -> Result<LossSeries> {
    let km = wf.len() - 1;
    let r = (meso_grid.len() - 1) / km;
    let areas: Vec<f64> = problem.gauss_elements().iter().map(|&t| problem.element_area(t)).collect();
    let mut power = vec![0.0; km + 1];
    let mut energy = vec![0.0; km + 1];
    power[0] = p0;
    for (g, cell) in cells.iter().enumerate() {
        let src = downscale_waveform(problem, wf, g, meso_grid, start_rates.map(|s| s[g]))?;
        for k in 0..=km {
            let j = k * r;
            if k > 0 {
                let dt = meso_grid[j] - meso_grid[j - 1];
                power[k] += areas[g] * model.joule_density(&cell[j], &cell[j - 1], &src[j], dt);
            }
            energy[k] += areas[g] * model.energy_density(&cell[j], src[j].b_m)?;
        }
    }
    for (k, e) in energy.iter_mut().enumerate() {
        *e += problem.direct_energy(wf.sample(k))?;
    }
    LossSeries::new(wf.times().to_vec(), power, energy)
}

fn last_rates(problem: &MacroProblem, wf: &Waveform) -> Vec<Rates> {
    let k = wf.len() - 1;
    let dt = wf.times()[k] - wf.times()[k - 1];
    let (b1, b0) = (problem.gauss_b(wf.sample(k)), problem.gauss_b(wf.sample(k - 1)));
    let (a1, a0) = (problem.gauss_a(wf.sample(k)), problem.gauss_a(wf.sample(k - 1)));
    (0..b1.len())
        .map(|g| (tensor::scale(1.0 / dt, tensor::sub(b1[g], b0[g])), (a1[g] - a0[g]) / dt))
        .collect()
}

/// Relative L∞(time) L²(space) distance of two macro waveforms.
fn gate(problem: &MacroProblem, prev: &Waveform, cur: &Waveform) -> f64 {
    let mut num = 0.0_f64;
    let mut den = 0.0_f64;
    for (p, c) in prev.values().iter().zip(cur.values()) {
        let diff: Vec<f64> = p.iter().zip(c).map(|(a, b)| b - a).collect();
        num = num.max(l2_norm_nodal(&problem.mesh, &problem.nodal(&diff)));
        den = den.max(l2_norm_nodal(&problem.mesh, &problem.nodal(c)));
    }
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

/// Newton options for WR sub-solves. Macro and cell solves are tightened so
/// that solver noise stays well below the waveform gate.
fn wr_options(newton: &NewtonOptions, tol: f64) -> (NewtonOptions, NewtonOptions) {
    let macro_opts = NewtonOptions { tol: newton.tol.min(1e-2 * tol), ..*newton };
    let cell_opts = NewtonOptions {
        tol: newton.tol.min(FD_NEWTON_TOL),
        max_iter: newton.max_iter.max(CELL_MIN_MAX_ITER),
        ..*newton
    };
    (macro_opts, cell_opts)
}

pub fn run_wr_with(
    problem: &MacroProblem,
    model: &Arc<CellModel>,
    plan: &WindowPlan,
    newton: &NewtonOptions,
    parallel: bool,
    comm_sleep_us: u64,
) -> Result<WrRunReport> {
    plan.validate()?;
    let n_gp = problem.n_gauss();
    let (macro_opts, cell_opts) = wr_options(newton, plan.tol);
    let mut timings = PhaseTimings::default();
    problem.reset_clock();
    let mut state = problem.zero_state(plan.t0);
    let mut cell_start: Vec<Vec<f64>> = vec![vec![0.0; model.dim()]; n_gp];
    let mut rates: Option<Vec<Rates>> = None;
    let mut global_wf: Option<Waveform> = None;
    let mut global_losses = LossSeries::default();
    let mut windows = Vec::with_capacity(plan.n_windows);
    let (mut meso_solves, mut communications) = (0, 0);

    for n in 0..plan.n_windows {
        let (ta, tb) = plan.window(n);
        let macro_grid = uniform_grid(ta, tb, plan.macro_steps);
        let meso_grid = uniform_grid(ta, tb, plan.meso_steps);
        let init = Waveform::constant(macro_grid, state.alpha.clone())?;
        let (init_b, init_dta) = (flux_fields(problem, &init)?, rate_fields(problem, &init)?);
        let p0 = global_losses.power.last().copied().unwrap_or(0.0);
        let mut prev = init.clone();
        let mut prev_losses: Option<LossSeries> = None;
        let mut iterations = Vec::new();
        let mut cells: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut converged = false;
        for l in 1..=plan.max_iter {
            let ctx = |phase: &str| format!("window {n}, iteration {l}, {phase}");
            timings.communication += emulate_communication(n_gp, comm_sleep_us);
            communications += n_gp;
            let clock = Instant::now();
            cells = map_gauss(n_gp, parallel, |g| {
                let src = downscale_waveform(problem, &prev, g, &meso_grid, rates.as_ref().map(|r| r[g]))?;
                let mut xs = Vec::with_capacity(meso_grid.len());
                xs.push(cell_start[g].clone());
                for j in 1..meso_grid.len() {
                    let dt = meso_grid[j] - meso_grid[j - 1];
                    let last = &xs[j - 1];
                    let (x, _) = model
                        .solve_step(last, last, &src[j], dt, &cell_opts)
                        .map_err(|e| e.context(format!("gauss {g}, meso step {j}")))?;
                    xs.push(x);
                }
                Ok(xs)
            })
            .map_err(|e| e.context(ctx("cells")))?;
            timings.meso_solve += clock.elapsed();
            meso_solves += n_gp * plan.meso_steps;

            let mut provider = FrozenProvider { cells: &cells, model, ratio: plan.ratio() };
            let run = backward_euler_run(problem, ta, tb, plan.macro_steps, Some(&state), &mut provider, &macro_opts)
                .map_err(|e| e.context(ctx("macro")))?;
            let cur = run.waveform;
            let losses =
                window_losses(problem, model, &cur, &cells, &meso_grid, rates.as_deref(), p0).map_err(|e| e.context(ctx("losses")))?;
            let (err_losses, err_energy) = match &prev_losses {
                Some(pl) => window_errors(&losses, pl),
                None => (f64::NAN, f64::NAN),
            };
            let (cur_b, cur_dta) = (flux_fields(problem, &cur)?, rate_fields(problem, &cur)?);
            let (prev_b, prev_dta) = (flux_fields(problem, &prev)?, rate_fields(problem, &prev)?);
            let change = gate(problem, &prev, &cur);
            iterations.push(WrIteration {
                window: n,
                iteration: l,
                waveform: cur.clone(),
                losses: losses.clone(),
                change,
                err_b: wr_error_metrics(&prev_b, &cur_b, &init_b)?,
                err_dta: wr_error_metrics(&prev_dta, &cur_dta, &init_dta)?,
                err_losses,
                err_energy,
                macro_newton: run.newton_counts,
            });
            prev = cur;
            prev_losses = Some(losses);
            if change < plan.tol {
                converged = true;
                break;
            }
        }
        let last = iterations.last().expect("at least one iteration");
        rates = Some(last_rates(problem, &last.waveform));
        state = MacroState { alpha: last.waveform.last().to_vec(), time: tb };
        for (g, xs) in cells.iter().enumerate() {
            cell_start[g] = xs.last().expect("meso grid has samples").clone();
        }
        match &mut global_wf {
            Some(w) => w.extend(&last.waveform)?,
            None => global_wf = Some(last.waveform.clone()),
        }
        global_losses.extend(&last.losses);
        windows.push(WrWindow { iterations, converged, meso_grid, cells });
    }
    let (assemble, solve) = problem.clock();
    timings.macro_assemble = assemble;
    timings.macro_solve = solve;
    Ok(WrRunReport {
        waveform: global_wf.expect("at least one window"),
        losses: global_losses,
        windows,
        plan: *plan,
        meso_solves,
        communications,
        n_gauss: n_gp,
        timings,
    })
}

/// Loss and energy change over the window samples after the start.
fn window_errors(cur: &LossSeries, prev: &LossSeries) -> (f64, f64) {
    let tail = |s: &LossSeries| LossSeries { t: s.t[1..].to_vec(), power: s.power[1..].to_vec(), energy: s.energy[1..].to_vec() };
    relative_errors(&tail(prev), &tail(cur)).unwrap_or((f64::NAN, f64::NAN))
}

pub fn run_wr(config: &RunConfig) -> Result<WrRunReport> {
    config.validate()?;
    let plan = WindowPlan::from_config(config)?;
    let problem = config.macro_problem()?;
    let model = config.cell_model()?;
    run_wr_with(&problem, &model, &plan, &config.newton(), config.solver.parallel, config.solver.comm_sleep_us)
        .map_err(|e| e.context("wr run"))
}

/// Largest relative residual `‖R‖/‖s‖` of the monolithic macro and cell
/// equations evaluated on the converged WR waveforms. Needs matched grids.
pub fn fixed_point_residual(problem: &MacroProblem, model: &CellModel, report: &WrRunReport) -> Result<f64> {
    if report.plan.ratio() != 1 {
        return Err(Error::GridMismatch("fixed-point check needs matched macro and meso grids".into()));
    }
    let mut worst = 0.0_f64;
    for w in &report.windows {
        let wf = &w.iterations.last().expect("iterations").waveform;
        let t = wf.times();
        for k in 1..wf.len() {
            let dt = t[k] - t[k - 1];
            let (x, xp) = (wf.sample(k), wf.sample(k - 1));
            let (b, bp) = (problem.gauss_b(x), problem.gauss_b(xp));
            let (a, ap) = (problem.gauss_a(x), problem.gauss_a(xp));
            let q = LawQuery { step: k, iteration: 0, time: t[k], dt, b: &b, b_prev: &bp, a: &a, a_prev: &ap };
            let mut laws = Vec::with_capacity(b.len());
            for (g, cell) in w.cells.iter().enumerate() {
                let src = q.source(g);
                let (r, s) = model.residual(&cell[k], &cell[k - 1], &src, dt)?;
                worst = worst.max(ratio(&r, &s));
                laws.push(GaussPointLaw {
                    h_m: model.upscale_h(&cell[k], b[g])?,
                    dh_m_db_m: model.exact_jacobian(&cell[k], b[g])?,
                    provenance: Provenance::FrozenWaveform,
                });
            }
            let (r, s) = problem.residual(xp, x, &laws, dt, t[k])?;
            worst = worst.max(ratio(&r, &s));
        }
    }
    Ok(worst)
}

fn ratio(r: &[f64], s: &[f64]) -> f64 {
    let (rn, sn) = (fem::l2(r), fem::l2(s));
    if sn == 0.0 {
        if rn == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        rn / sn
    }
}

/// Cell states at the end of the run, one per Gauss point.
pub fn final_cells(model: &Arc<CellModel>, report: &WrRunReport) -> Vec<CellState> {
    let last = report.windows.last().expect("windows");
    let t = report.plan.t_end;
    last.cells
        .iter()
        .map(|xs| CellState { model: Arc::clone(model), x: xs.last().expect("samples").clone(), time: t })
        .collect()
}
