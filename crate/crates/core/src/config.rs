//! Run configuration: INI-style sections parsed with `rust-ini`, plus the
//! builders that turn a configuration into macro and cell models.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ini::Ini;

use crate::cell::{CellMaterials, CellModel, NewtonOptions};
use crate::error::{Error, Result};
use crate::macroscale::{MacroProblem, SourceSpec};
use crate::material::{ConductivityField, MaterialLaw, NU0};
use crate::mesh::{generate_macro_mesh, generate_reference_mesh, CellLayout, GeometryParams, RegionTag};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    Monolithic,
    Wr,
    Reference,
    Compare,
    Cost,
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "monolithic" => Ok(RunMode::Monolithic),
            "wr" => Ok(RunMode::Wr),
            "reference" => Ok(RunMode::Reference),
            "compare" => Ok(RunMode::Compare),
            "cost" => Ok(RunMode::Cost),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaterialConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub mu_r_ins: f64,
    /// Grains carry no net current.
    pub floating_grains: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeConfig {
    pub t_end: f64,
    /// Macro steps over the whole horizon.
    pub n_steps_macro: usize,
    /// Meso steps over the whole horizon, a multiple of `n_steps_macro`.
    pub n_steps_meso: usize,
    pub n_windows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub newton_tol: f64,
    pub newton_max: usize,
    pub wr_tol: f64,
    pub wr_max: usize,
    /// Fixed FD step; `None` selects `1e-6·max(1, |b_M|)`.
    pub fd_delta: Option<f64>,
    pub kappa: f64,
    pub parallel: bool,
    /// Upper bound on unknowns for the dense coupled solver.
    pub dof_budget: usize,
    /// Upper bound on unknowns of the resolved reference problem.
    pub ref_dof_budget: usize,
    /// Emulated latency per communication, microseconds.
    pub comm_sleep_us: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub geometry: GeometryParams,
    pub grains: usize,
    /// Cell subdivisions per side.
    pub cell_n: usize,
    /// Reference mesh refinement.
    pub ref_refinement: usize,
    pub material: MaterialConfig,
    pub source: SourceSpec,
    pub time: TimeConfig,
    pub solver: SolverConfig,
    pub mode: RunMode,
    pub out_dir: PathBuf,
}

/// Inductor amplitude giving a peak homogenized flux density of about 1.3 T
/// in the default benchmark (see [`calibrate_source_amplitude`]).
pub const DEFAULT_JS0: f64 = 1.06e10;

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            geometry: GeometryParams::default(),
            grains: 4,
            cell_n: 20,
            ref_refinement: 1,
            material: MaterialConfig {
                alpha: 388.0,
                beta: 0.3774,
                gamma: 2.97,
                sigma: 5e6,
                mu_r_ins: 1.0,
                floating_grains: true,
            },
            source: SourceSpec { j_s0: DEFAULT_JS0, f: 50e3 },
            time: TimeConfig { t_end: 2e-5, n_steps_macro: 20, n_steps_meso: 20, n_windows: 1 },
            solver: SolverConfig {
                newton_tol: 1e-6,
                newton_max: 15,
                wr_tol: 1e-8,
                wr_max: 30,
                fd_delta: None,
                kappa: 1.0,
                parallel: true,
                dof_budget: 4_000,
                ref_dof_budget: 60_000,
                comm_sleep_us: 0,
            },
            mode: RunMode::Compare,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn get<T: std::str::FromStr>(ini: &Ini, section: &str, key: &str, into: &mut T) -> Result<()> {
    if let Some(v) = ini.section(Some(section)).and_then(|s| s.get(key)) {
        *into = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("[{section}] {key} = '{v}' is not valid")))?;
    }
    Ok(())
}

/// Geometry length given in micrometres, stored in metres.
fn get_um(ini: &Ini, key: &str, into: &mut f64) -> Result<()> {
    if ini.section(Some("geometry")).is_some_and(|s| s.contains_key(key)) {
        let mut um = 0.0;
        get(ini, "geometry", key, &mut um)?;
        *into = um / 1e6;
    }
    Ok(())
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    /// Parses the INI text; missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut c = RunConfig::default();
        get(&ini, "geometry", "grains", &mut c.grains)?;
        get_um(&ini, "L_um", &mut c.geometry.l)?;
        get_um(&ini, "e_i_um", &mut c.geometry.e_i)?;
        get_um(&ini, "e_gap_um", &mut c.geometry.e_gap)?;
        get_um(&ini, "e_a_um", &mut c.geometry.e_a)?;
        get(&ini, "geometry", "fill_fraction", &mut c.geometry.fill_fraction)?;
        get(&ini, "geometry", "cell_n", &mut c.cell_n)?;
        get(&ini, "geometry", "ref_refinement", &mut c.ref_refinement)?;
        let m = &mut c.material;
        get(&ini, "material", "alpha", &mut m.alpha)?;
        get(&ini, "material", "beta", &mut m.beta)?;
        get(&ini, "material", "gamma", &mut m.gamma)?;
        get(&ini, "material", "sigma_S_per_m", &mut m.sigma)?;
        get(&ini, "material", "mu_r_ins", &mut m.mu_r_ins)?;
        get(&ini, "material", "floating_grains", &mut m.floating_grains)?;
        get(&ini, "source", "js0", &mut c.source.j_s0)?;
        get(&ini, "source", "f_hz", &mut c.source.f)?;
        let t = &mut c.time;
        get(&ini, "time", "t_end_s", &mut t.t_end)?;
        get(&ini, "time", "n_steps_macro", &mut t.n_steps_macro)?;
        t.n_steps_meso = t.n_steps_macro;
        get(&ini, "time", "n_steps_meso", &mut t.n_steps_meso)?;
        get(&ini, "time", "n_windows", &mut t.n_windows)?;
        let s = &mut c.solver;
        get(&ini, "solver", "newton_tol", &mut s.newton_tol)?;
        get(&ini, "solver", "newton_max", &mut s.newton_max)?;
        get(&ini, "solver", "wr_tol", &mut s.wr_tol)?;
        get(&ini, "solver", "wr_max", &mut s.wr_max)?;
        let mut fd = String::from("auto");
        get(&ini, "solver", "fd_delta", &mut fd)?;
        s.fd_delta = match fd.as_str() {
            "auto" => None,
            v => Some(v.parse().map_err(|_| Error::Config(format!("[solver] fd_delta = '{v}' is not valid")))?),
        };
        get(&ini, "solver", "kappa", &mut s.kappa)?;
        get(&ini, "solver", "parallel", &mut s.parallel)?;
        get(&ini, "solver", "dof_budget", &mut s.dof_budget)?;
        get(&ini, "solver", "ref_dof_budget", &mut s.ref_dof_budget)?;
        get(&ini, "solver", "comm_sleep_us", &mut s.comm_sleep_us)?;
        let mut mode = String::from("compare");
        get(&ini, "run", "mode", &mut mode)?;
        c.mode = mode.parse()?;
        let mut dir = c.out_dir.display().to_string();
        get(&ini, "output", "dir", &mut dir)?;
        c.out_dir = PathBuf::from(dir);
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let t = &self.time;
        if self.grains == 0 || self.cell_n < 3 || self.ref_refinement == 0 {
            return Err(Error::Config("grains >= 1, cell_n >= 3 and ref_refinement >= 1 required".into()));
        }
        if !(t.t_end > 0.0) || t.n_steps_macro == 0 || t.n_windows == 0 {
            return Err(Error::Config("time horizon, step count and window count must be positive".into()));
        }
        if t.n_steps_meso % t.n_steps_macro != 0 || t.n_steps_macro % t.n_windows != 0 {
            return Err(Error::Config(format!(
                "meso steps ({}) must be a multiple of macro steps ({}), which must be a multiple of windows ({})",
                t.n_steps_meso, t.n_steps_macro, t.n_windows
            )));
        }
        let s = &self.solver;
        if !(s.newton_tol > 0.0 && s.wr_tol > 0.0 && s.kappa > 0.0) || s.newton_max == 0 || s.wr_max == 0 {
            return Err(Error::Config("solver tolerances, iteration limits and kappa must be positive".into()));
        }
        SourceSpec::new(self.source.j_s0, self.source.f)?;
        MaterialLaw::brauer(self.material.alpha, self.material.beta, self.material.gamma)?;
        if !(self.material.mu_r_ins > 0.0) || !(self.material.sigma >= 0.0) {
            return Err(Error::Config("mu_r_ins must be positive and sigma non-negative".into()));
        }
        Ok(())
    }

    pub fn newton(&self) -> NewtonOptions {
        NewtonOptions { tol: self.solver.newton_tol, max_iter: self.solver.newton_max, min_iter: 0 }
    }

    pub fn grain_law(&self) -> MaterialLaw {
        MaterialLaw::Brauer { alpha: self.material.alpha, beta: self.material.beta, gamma: self.material.gamma }
    }

    pub fn cell_materials(&self) -> Result<CellMaterials> {
        Ok(CellMaterials {
            grain_law: self.grain_law(),
            insulation_law: MaterialLaw::linear(NU0 / self.material.mu_r_ins)?,
            sigma: ConductivityField::smc(self.material.sigma)?,
            floating_conductors: self.material.floating_grains,
        })
    }

    pub fn cell_model(&self) -> Result<Arc<CellModel>> {
        CellModel::new(
            CellLayout::SquareInclusion(self.geometry.fill_fraction),
            self.cell_n,
            self.cell_materials()?,
            self.geometry.period(self.grains),
            self.solver.kappa,
        )
    }

    /// Homogenized quarter-domain problem.
    pub fn macro_problem(&self) -> Result<MacroProblem> {
        let mesh = Arc::new(generate_macro_mesh(self.grains, &self.geometry)?);
        MacroProblem::quarter(mesh, |_| (MaterialLaw::vacuum(), 0.0), false, self.source)
    }

    /// Grain-resolved quarter-domain problem.
    pub fn reference_problem(&self) -> Result<MacroProblem> {
        let mesh = Arc::new(generate_reference_mesh(self.grains, self.ref_refinement, &self.geometry)?);
        let grain = self.grain_law();
        let ins = MaterialLaw::linear(NU0 / self.material.mu_r_ins)?;
        let sigma = self.material.sigma;
        MacroProblem::quarter(
            mesh,
            |tag| match tag {
                RegionTag::ConductingGrain => (grain, sigma),
                RegionTag::Insulation => (ins, 0.0),
                _ => (MaterialLaw::vacuum(), 0.0),
            },
            self.material.floating_grains,
            self.source,
        )
    }

    pub fn dt_macro(&self) -> f64 {
        self.time.t_end / self.time.n_steps_macro as f64
    }
}
