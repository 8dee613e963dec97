//! Quantities of interest, error metrics, the cost model and CSV output.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::cell::{meso_step, CellMaterials, CellModel, MacroSource, FD_SOLVES};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::macroscale::{backward_euler_run, MacroProblem, UniformLaw};
use crate::material::{MaterialLaw, NU0};
use crate::mesh::{CellLayout, Mesh2D, RegionTag};
use crate::monolithic::MonolithicRunReport;
use crate::wr::WrRunReport;
use crate::tensor;
use crate::waveform::Waveform;

/// Eddy-current losses and magnetic energy per time sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossSeries {
    pub t: Vec<f64>,
    /// Joule power [W per unit depth].
    pub power: Vec<f64>,
    /// Magnetic coenergy [J per unit depth].
    pub energy: Vec<f64>,
}

impl LossSeries {
    pub fn new(t: Vec<f64>, power: Vec<f64>, energy: Vec<f64>) -> Result<Self> {
        if power.len() != t.len() || energy.len() != t.len() {
            return Err(Error::GridMismatch(format!(
                "{} samples, {} powers, {} energies",
                t.len(),
                power.len(),
                energy.len()
            )));
        }
        if let Some(p) = power.iter().find(|p| !(**p >= 0.0)) {
            return Err(Error::Inconsistent(format!("negative or non-finite loss {p:e}")));
        }
        Ok(LossSeries { t, power, energy })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Loss at `t` by linear interpolation.
    pub fn power_at(&self, t: f64) -> Result<f64> {
        interpolate(&self.t, &self.power, t)
    }

    pub fn energy_at(&self, t: f64) -> Result<f64> {
        interpolate(&self.t, &self.energy, t)
    }

    /// Appends `other`, dropping its first sample when it repeats our last time.
    pub fn extend(&mut self, other: &LossSeries) {
        let skip = match (self.t.last(), other.t.first()) {
            (Some(a), Some(b)) if (a - b).abs() <= 1e-12 * a.abs().max(b.abs()) => 1,
            _ => 0,
        };
        self.t.extend_from_slice(&other.t[skip..]);
        self.power.extend_from_slice(&other.power[skip..]);
        self.energy.extend_from_slice(&other.energy[skip..]);
    }
}

fn interpolate(ts: &[f64], vs: &[f64], t: f64) -> Result<f64> {
    let (t0, t1) = match (ts.first(), ts.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(Error::OutOfRange { t, t0: f64::NAN, t1: f64::NAN }),
    };
    let eps = 1e-12 * (t1 - t0).abs().max(f64::MIN_POSITIVE);
    if t < t0 - eps || t > t1 + eps {
        return Err(Error::OutOfRange { t, t0, t1 });
    }
    let k = ts.partition_point(|&s| s < t).min(ts.len() - 1);
    if k == 0 || (ts[k] - t).abs() <= eps {
        return Ok(vs[k]);
    }
    let w = (t - ts[k - 1]) / (ts[k] - ts[k - 1]);
    Ok((1.0 - w) * vs[k - 1] + w * vs[k])
}

/// Index of grid sample `t`, tolerant to rounding.
fn sample_index(ts: &[f64], t: f64) -> Result<usize> {
    let (t0, t1) = (ts[0], ts[ts.len() - 1]);
    let eps = 1e-9 * (t1 - t0).abs().max(f64::MIN_POSITIVE);
    ts.iter()
        .position(|&s| (s - t).abs() <= eps)
        .ok_or(Error::OutOfRange { t, t0, t1 })
}

/// Joule losses of the directly modelled conductors at grid time `t`,
/// with the time derivative taken as a backward difference.
pub fn eddy_losses(problem: &MacroProblem, wf: &Waveform, t: f64) -> Result<f64> {
    let k = sample_index(wf.times(), t)?;
    if k == 0 {
        return Ok(0.0);
    }
    let dt = wf.times()[k] - wf.times()[k - 1];
    Ok(problem.joule_power(wf.sample(k - 1), wf.sample(k), dt))
}

/// Magnetic coenergy of the directly modelled regions at grid time `t`.
pub fn magnetic_energy(problem: &MacroProblem, wf: &Waveform, t: f64) -> Result<f64> {
    let k = sample_index(wf.times(), t)?;
    problem.direct_energy(wf.sample(k))
}

/// `‖v − w‖∞ / ‖w‖∞` over time; `v` is resampled onto `w`'s grid when the
/// grids differ.
pub fn relative_error(v_t: &[f64], v: &[f64], w_t: &[f64], w: &[f64]) -> Result<f64> {
    if v_t.len() != v.len() || w_t.len() != w.len() {
        return Err(Error::GridMismatch("time and value lengths differ".into()));
    }
    let same = v_t.len() == w_t.len() && v_t.iter().zip(w_t).all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1e-300));
    let mut num = 0.0_f64;
    let mut den = 0.0_f64;
    for (k, (&t, &wk)) in w_t.iter().zip(w).enumerate() {
        let vk = if same { v[k] } else { interpolate(v_t, v, t)? };
        num = num.max((vk - wk).abs());
        den = den.max(wk.abs());
    }
    if den == 0.0 {
        return Err(Error::UndefinedNorm("reference series is identically zero"));
    }
    Ok(num / den)
}

/// `(Err_τP, Err_Wmag)` of `v` against `w`.
pub fn relative_errors(v: &LossSeries, w: &LossSeries) -> Result<(f64, f64)> {
    Ok((relative_error(&v.t, &v.power, &w.t, &w.power)?, relative_error(&v.t, &v.energy, &w.t, &w.energy)?))
}

/// L² norm of a nodal P1 field over `mesh`.
pub fn l2_norm_nodal(mesh: &Mesh2D, nodal: &[f64]) -> f64 {
    let mut s = 0.0;
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let v = tri.map(|n| nodal[n]);
        let sum = v[0] + v[1] + v[2];
        let sq = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        s += mesh.signed_area(t) / 12.0 * (sq + sum * sum);
    }
    s.max(0.0).sqrt()
}

/// Abstract per-step costs and iteration counts of the two couplings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostParams {
    pub n_ts: f64,
    pub n_tw: f64,
    pub n_wr: f64,
    pub n_nr: f64,
    pub n_gp: f64,
    pub n_dim: f64,
    pub c_sol: f64,
    pub c_com: f64,
    pub c_jac: f64,
    pub c_ass: f64,
    pub c_msol: f64,
    /// Ratio `(N_TW/N_TS)(N_NR C_jac + C_com) / C_sol`, the WR overhead beyond
    /// the cell solves.
    pub kappa: f64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.n_ts, self.n_tw, self.n_wr, self.n_nr, self.n_gp, self.n_dim];
        let costs = [self.c_sol, self.c_com, self.c_jac, self.c_ass, self.c_msol];
        if counts.iter().any(|c| !(*c >= 1.0)) || costs.iter().any(|c| !(*c >= 0.0)) {
            return Err(Error::Config("cost counts must be >= 1 and costs >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostReport {
    /// Approximate forms: meso work and communication only.
    pub mono_approx: f64,
    pub wr_approx: f64,
    /// Exact forms including macro assembly and solves.
    pub mono_exact: f64,
    pub wr_exact: f64,
    pub speedup_approx: f64,
    pub speedup_exact: f64,
    /// WR predicted cheaper: `N_WR < N_dim / (1 + κ) · N_NR`.
    pub wr_predicted_faster: bool,
}

pub fn cost_model(p: &CostParams) -> Result<CostReport> {
    p.validate()?;
    let mono_approx = p.n_ts * p.n_nr * p.n_gp * (p.n_dim * p.c_sol + p.c_com);
    let wr_approx = p.n_ts * p.n_wr * p.n_gp * (p.c_sol + (p.n_tw / p.n_ts) * (p.n_nr * p.c_jac + p.c_com));
    let macro_work = p.n_ts * p.n_nr * (p.c_ass + p.c_msol);
    let mono_exact = mono_approx + macro_work;
    let wr_exact = wr_approx + p.n_wr * macro_work;
    Ok(CostReport {
        mono_approx,
        wr_approx,
        mono_exact,
        wr_exact,
        speedup_approx: mono_approx / wr_approx,
        speedup_exact: mono_exact / wr_exact,
        wr_predicted_faster: p.n_wr < p.n_dim / (1.0 + p.kappa) * p.n_nr,
    })
}

/// Cost parameters realized by a monolithic and a WR run of the same
/// configuration. `unit` holds the measured `(C_sol, C_jac, C_com)` in
/// seconds; macro assembly and solve costs come from the monolithic timings.
pub fn realized_cost_params(mono: &MonolithicRunReport, wr: &WrRunReport, unit: (f64, f64, f64)) -> CostParams {
    let evaluations: usize = mono.newton_counts.iter().sum();
    let per_eval = |d: std::time::Duration| d.as_secs_f64() / evaluations.max(1) as f64;
    let iterations = wr.iterations();
    let mut p = CostParams {
        n_ts: (wr.plan.macro_steps * wr.plan.n_windows) as f64,
        n_tw: wr.plan.n_windows as f64,
        n_wr: iterations.iter().sum::<usize>() as f64 / iterations.len().max(1) as f64,
        n_nr: evaluations as f64 / mono.newton_counts.len().max(1) as f64,
        n_gp: mono.n_gauss as f64,
        n_dim: FD_SOLVES as f64,
        c_sol: unit.0,
        c_jac: unit.1,
        c_com: unit.2,
        c_ass: per_eval(mono.timings.macro_assemble),
        c_msol: per_eval(mono.timings.macro_solve),
        kappa: 0.0,
    };
    p.kappa = p.n_tw / p.n_ts * (p.n_nr * p.c_jac + p.c_com) / p.c_sol.max(f64::MIN_POSITIVE);
    p
}

/// Counters a driver reports, next to the counts its own iteration history
/// implies.
pub trait CostAudit {
    /// `(meso solves, communications)` as counted during the run.
    fn counted(&self) -> (usize, usize);
    /// The same pair rebuilt from the realized iteration counts.
    fn expected(&self) -> (usize, usize);
}

/// Counted minus expected `(meso solves, communications)`; both zero for a
/// consistent run.
pub fn audit_costs(report: &dyn CostAudit) -> (i64, i64) {
    let (cm, cc) = report.counted();
    let (em, ec) = report.expected();
    (cm as i64 - em as i64, cc as i64 - ec as i64)
}

/// Median wall time, in seconds, of a cell step, an exact upscaling and a
/// source exchange on the configured cell, over `samples` repetitions.
pub fn measure_unit_costs(config: &RunConfig, samples: usize) -> Result<(f64, f64, f64)> {
    let model = config.cell_model()?;
    let newton = config.newton();
    let src = MacroSource { b_m: [1.0, 0.3], db_m_dt: [2e4, 0.0], da_m_dt: 0.0 };
    let dt = config.dt_macro();
    let median = |mut v: Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let n = samples.max(1);
    let mut sol = Vec::with_capacity(n);
    let mut jac = Vec::with_capacity(n);
    let mut com = Vec::with_capacity(n);
    let zero = model.zero_state();
    for _ in 0..n {
        let start = Instant::now();
        let (state, _) = meso_step(&zero, &src, dt, &newton)?;
        sol.push(start.elapsed().as_secs_f64());
        let start = Instant::now();
        model.upscale_h(&state.x, src.b_m)?;
        model.exact_jacobian(&state.x, src.b_m)?;
        jac.push(start.elapsed().as_secs_f64());
        let start = Instant::now();
        let copy = std::hint::black_box(state.x.clone());
        drop(copy);
        if config.solver.comm_sleep_us > 0 {
            std::thread::sleep(std::time::Duration::from_micros(config.solver.comm_sleep_us));
        }
        com.push(start.elapsed().as_secs_f64());
    }
    Ok((median(sol), median(jac), median(com)))
}

/// Source amplitude giving a peak homogenized flux density of `target_b`
/// in a linear quasi-static pre-run. The cell is linearized at the initial
/// grain reluctivity, its static effective law is applied uniformly at the
/// macroscale, and the amplitude follows by proportional scaling.
pub fn calibrate_source_amplitude(config: &RunConfig, target_b: f64) -> Result<f64> {
    if !(target_b > 0.0) {
        return Err(Error::Config(format!("target flux density must be positive, got {target_b}")));
    }
    let materials = CellMaterials {
        grain_law: MaterialLaw::linear(config.grain_law().initial_nu())?,
        insulation_law: MaterialLaw::linear(NU0 / config.material.mu_r_ins)?,
        sigma: crate::material::ConductivityField::zero(),
        floating_conductors: false,
    };
    let cell = CellModel::new(
        CellLayout::SquareInclusion(config.geometry.fill_fraction),
        config.cell_n,
        materials,
        config.geometry.period(config.grains),
        config.solver.kappa,
    )?;
    let probe = MacroSource { b_m: [1.0, 0.0], ..Default::default() };
    let (state, _) = meso_step(&cell.zero_state(), &probe, 1.0, &config.newton())?;
    let nu_eff = cell.upscale_h(&state.x, probe.b_m)?[0];

    let mut unit = config.clone();
    unit.source.j_s0 = 1.0;
    let problem = unit.macro_problem()?;
    let quarter = 0.25 / unit.source.f;
    let run = backward_euler_run(
        &problem,
        0.0,
        quarter,
        1,
        None,
        &mut UniformLaw(MaterialLaw::linear(nu_eff)?),
        &unit.newton(),
    )?;
    let peak = problem.gauss_b(run.waveform.last()).iter().map(|&b| tensor::norm(b)).fold(0.0_f64, f64::max);
    if !(peak > 0.0) {
        return Err(Error::UndefinedNorm("calibration run produced no flux in the composite"));
    }
    Ok(target_b / peak)
}

fn create(dir: &Path, name: &str) -> Result<csv::Writer<fs::File>> {
    fs::create_dir_all(dir)?;
    Ok(csv::Writer::from_path(dir.join(name))?)
}

/// `losses.csv` (t,P) and `energy.csv` (t,W).
pub fn write_loss_csv(dir: &Path, series: &LossSeries) -> Result<()> {
    let mut w = create(dir, "losses.csv")?;
    w.write_record(["t", "P"])?;
    for (t, p) in series.t.iter().zip(&series.power) {
        w.write_record([t.to_string(), p.to_string()])?;
    }
    w.flush()?;
    let mut w = create(dir, "energy.csv")?;
    w.write_record(["t", "W"])?;
    for (t, e) in series.t.iter().zip(&series.energy) {
        w.write_record([t.to_string(), e.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the WR convergence table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceRow {
    pub window: usize,
    pub iteration: usize,
    pub err_losses: f64,
    pub err_energy: f64,
    pub err_b: f64,
    pub err_dta: f64,
}

pub fn write_convergence_csv(dir: &Path, rows: &[ConvergenceRow]) -> Result<()> {
    let mut w = create(dir, "wr_convergence.csv")?;
    w.write_record(["window", "l", "err_losses", "err_energy", "err_b", "err_dta"])?;
    for r in rows {
        w.write_record([
            r.window.to_string(),
            r.iteration.to_string(),
            r.err_losses.to_string(),
            r.err_energy.to_string(),
            r.err_b.to_string(),
            r.err_dta.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cost_csv(dir: &Path, params: &CostParams, report: &CostReport) -> Result<()> {
    let mut w = create(dir, "cost.csv")?;
    w.write_record(["quantity", "value"])?;
    let rows = [
        ("n_ts", params.n_ts),
        ("n_tw", params.n_tw),
        ("n_wr", params.n_wr),
        ("n_nr", params.n_nr),
        ("n_gp", params.n_gp),
        ("n_dim", params.n_dim),
        ("c_sol", params.c_sol),
        ("c_com", params.c_com),
        ("c_jac", params.c_jac),
        ("c_ass", params.c_ass),
        ("c_msol", params.c_msol),
        ("kappa", params.kappa),
        ("mono_approx", report.mono_approx),
        ("wr_approx", report.wr_approx),
        ("mono_exact", report.mono_exact),
        ("wr_exact", report.wr_exact),
        ("speedup_approx", report.speedup_approx),
        ("speedup_exact", report.speedup_exact),
        ("wr_predicted_faster", if report.wr_predicted_faster { 1.0 } else { 0.0 }),
    ];
    for (k, v) in rows {
        w.write_record([k.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `fields_<t>.csv` with nodal `a_z`.
pub fn write_fields_csv(dir: &Path, mesh: &Mesh2D, nodal: &[f64], t: f64) -> Result<()> {
    let mut w = create(dir, &format!("fields_{t:.6e}.csv"))?;
    w.write_record(["node", "x", "y", "a_z"])?;
    for (i, (p, a)) in mesh.nodes.iter().zip(nodal).enumerate() {
        w.write_record([i.to_string(), p[0].to_string(), p[1].to_string(), a.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Human-readable one-line summary appended to `summary.txt`.
pub fn append_summary(dir: &Path, line: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(dir.join("summary.txt"))?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Area of the composite in the macro mesh, for density normalizations.
pub fn homogenized_area(mesh: &Mesh2D) -> f64 {
    mesh.region_area(RegionTag::Homogenized)
}
