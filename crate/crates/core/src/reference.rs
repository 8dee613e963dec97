//! Grain-resolved reference: the same transient solver on a mesh where every
//! grain and insulation gap is meshed.

use std::time::Instant;

use crate::analysis::LossSeries;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::macroscale::{backward_euler_run, MacroProblem, NewtonOptions, NoGaussPoints};
use crate::mesh::RegionTag;
use crate::waveform::Waveform;

#[derive(Clone, Debug)]
pub struct ReferenceRun {
    pub waveform: Waveform,
    pub losses: LossSeries,
    pub newton_counts: Vec<usize>,
    pub wall: std::time::Duration,
}

/// Transient run of a resolved problem on `n_steps` equal steps of `[0, t_end]`.
pub fn run_reference_with(problem: &MacroProblem, t_end: f64, n_steps: usize, newton: &NewtonOptions) -> Result<ReferenceRun> {
    if problem.mesh.has_region(RegionTag::Homogenized) {
        return Err(Error::Inconsistent("reference mesh must not contain homogenized triangles".into()));
    }
    let start = Instant::now();
    let run = backward_euler_run(problem, 0.0, t_end, n_steps, None, &mut NoGaussPoints, newton)?;
    let wf = run.waveform;
    let t = wf.times();
    let mut power = vec![0.0; wf.len()];
    let mut energy = vec![0.0; wf.len()];
    for k in 0..wf.len() {
        if k > 0 {
            power[k] = problem.joule_power(wf.sample(k - 1), wf.sample(k), t[k] - t[k - 1]);
        }
        energy[k] = problem.direct_energy(wf.sample(k))?;
    }
    let losses = LossSeries::new(t.to_vec(), power, energy)?;
    Ok(ReferenceRun { waveform: wf, losses, newton_counts: run.newton_counts, wall: start.elapsed() })
}

pub fn run_reference(config: &RunConfig) -> Result<ReferenceRun> {
    config.validate()?;
    let problem = config.reference_problem()?;
    if problem.dim() > config.solver.ref_dof_budget {
        return Err(Error::Budget { dofs: problem.dim(), budget: config.solver.ref_dof_budget });
    }
    run_reference_with(&problem, config.time.t_end, config.time.n_steps_macro, &config.newton())
        .map_err(|e| e.context("reference run"))
}
