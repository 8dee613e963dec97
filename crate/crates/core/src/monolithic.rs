//! Monolithic HMM: every macro Newton iteration re-solves all cell problems
//! at the current iterate and upscales a finite-difference Jacobian.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::analysis::{CostAudit, LossSeries};
use crate::cell::{default_fd_delta, fd_jacobian, CellModel, CellState, MacroSource, NewtonOptions, FD_SOLVES};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::macroscale::{
    backward_euler_run, GaussPointLaw, LawQuery, MacroProblem, MacroState, MaterialProvider, Provenance,
};
use crate::waveform::Waveform;

/// Wall time per phase.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimings {
    pub meso_solve: Duration,
    pub communication: Duration,
    pub macro_assemble: Duration,
    pub macro_solve: Duration,
}

#[derive(Clone, Debug)]
pub struct MonolithicRunReport {
    pub waveform: Waveform,
    /// Macro Newton iterations per step, counting the converged evaluation.
    pub newton_counts: Vec<usize>,
    pub meso_solves: usize,
    pub communications: usize,
    pub meso_newton_updates: usize,
    pub n_gauss: usize,
    pub timings: PhaseTimings,
    pub losses: LossSeries,
    /// Cell states at every macro time, outer index = time sample.
    pub cell_history: Vec<Vec<CellState>>,
}

/// Runs `f` over Gauss points, in parallel when asked; results keep Gauss order.
pub(crate) fn map_gauss<T: Send>(
    n: usize,
    parallel: bool,
    f: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

pub(crate) fn emulate_communication(count: usize, sleep_us: u64) -> Duration {
    let start = Instant::now();
    if sleep_us > 0 {
        std::thread::sleep(Duration::from_micros(sleep_us * count as u64));
    }
    start.elapsed()
}

struct FdProvider<'a> {
    gauss_area: Vec<f64>,
    committed: Vec<CellState>,
    current: Vec<CellState>,
    opts: NewtonOptions,
    fd_delta: Option<f64>,
    parallel: bool,
    comm_sleep_us: u64,
    meso_solves: usize,
    communications: usize,
    meso_newton_updates: usize,
    timings: &'a mut PhaseTimings,
    power: Vec<f64>,
    cell_energy: Vec<f64>,
    history: Vec<Vec<CellState>>,
}

impl MaterialProvider for FdProvider<'_> {
    fn evaluate(&mut self, q: &LawQuery<'_>) -> Result<Vec<GaussPointLaw>> {
        let n = q.b.len();
        let start = Instant::now();
        let committed = &self.committed;
        let current = &self.current;
        let results = map_gauss(n, self.parallel, |g| {
            let src = q.source(g);
            let delta = self.fd_delta.unwrap_or_else(|| default_fd_delta(src.b_m));
            fd_jacobian(&committed[g], Some(&current[g].x), &src, q.dt, delta, &self.opts)
                .map_err(|e| e.context(format!("gauss {g}")))
        })?;
        self.timings.meso_solve += start.elapsed();
        self.timings.communication += emulate_communication(n, self.comm_sleep_us);
        self.communications += n;
        let mut laws = Vec::with_capacity(n);
        for (g, fd) in results.into_iter().enumerate() {
            self.meso_solves += fd.solve_count;
            self.meso_newton_updates += fd.newton_updates;
            laws.push(GaussPointLaw {
                h_m: fd.law.h_m,
                dh_m_db_m: fd.law.dh_m_db_m,
                provenance: Provenance::FiniteDifference,
            });
            self.current[g] = fd.nominal;
        }
        Ok(laws)
    }

    fn accept(&mut self, q: &LawQuery<'_>, _state: &MacroState) -> Result<()> {
        let mut p = 0.0;
        let mut w = 0.0;
        for g in 0..q.b.len() {
            let model = &self.current[g].model;
            let src: MacroSource = q.source(g);
            p += self.gauss_area[g] * model.joule_density(&self.current[g].x, &self.committed[g].x, &src, q.dt);
            w += self.gauss_area[g] * model.energy_density(&self.current[g].x, src.b_m)?;
        }
        self.power.push(p);
        self.cell_energy.push(w);
        self.committed = self.current.clone();
        self.history.push(self.committed.clone());
        Ok(())
    }
}

/// Monolithic run with explicit models, on `n_steps` equal steps of `[0, t_end]`.
pub fn run_monolithic_with(
    problem: &MacroProblem,
    model: &Arc<CellModel>,
    t_end: f64,
    n_steps: usize,
    opts: &NewtonOptions,
    fd_delta: Option<f64>,
    parallel: bool,
    comm_sleep_us: u64,
) -> Result<MonolithicRunReport> {
    let n_gp = problem.n_gauss();
    let zero: Vec<CellState> = (0..n_gp).map(|_| model.zero_state()).collect();
    let mut timings = PhaseTimings::default();
    problem.reset_clock();
    let mut provider = FdProvider {
        gauss_area: problem.gauss_elements().iter().map(|&t| problem.element_area(t)).collect(),
        committed: zero.clone(),
        current: zero.clone(),
        opts: *opts,
        fd_delta,
        parallel,
        comm_sleep_us,
        meso_solves: 0,
        communications: 0,
        meso_newton_updates: 0,
        timings: &mut timings,
        power: vec![0.0],
        cell_energy: vec![0.0],
        history: vec![zero],
    };
    let run = backward_euler_run(problem, 0.0, t_end, n_steps, None, &mut provider, opts)?;
    let mut energy = Vec::with_capacity(run.waveform.len());
    for (k, x) in run.waveform.values().iter().enumerate() {
        energy.push(provider.cell_energy[k] + problem.direct_energy(x)?);
    }
    let losses = LossSeries::new(run.waveform.times().to_vec(), provider.power.clone(), energy)?;
    let (meso_solves, communications, meso_newton_updates) =
        (provider.meso_solves, provider.communications, provider.meso_newton_updates);
    let cell_history = std::mem::take(&mut provider.history);
    drop(provider);
    let (assemble, solve) = problem.clock();
    timings.macro_assemble = assemble;
    timings.macro_solve = solve;
    Ok(MonolithicRunReport {
        waveform: run.waveform,
        newton_counts: run.newton_counts,
        meso_solves,
        communications,
        meso_newton_updates,
        n_gauss: n_gp,
        timings,
        losses,
        cell_history,
    })
}

pub fn run_monolithic(config: &RunConfig) -> Result<MonolithicRunReport> {
    config.validate()?;
    let problem = config.macro_problem()?;
    let model = config.cell_model()?;
    run_monolithic_with(
        &problem,
        &model,
        config.time.t_end,
        config.time.n_steps_macro,
        &config.newton(),
        config.solver.fd_delta,
        config.solver.parallel,
        config.solver.comm_sleep_us,
    )
    .map_err(|e: Error| e.context("monolithic run"))
}

impl CostAudit for MonolithicRunReport {
    fn counted(&self) -> (usize, usize) {
        (self.meso_solves, self.communications)
    }

    fn expected(&self) -> (usize, usize) {
        let iterations: usize = self.newton_counts.iter().sum();
        (iterations * self.n_gauss * FD_SOLVES, iterations * self.n_gauss)
    }
}
