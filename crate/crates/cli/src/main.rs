//! `mqshmm run <config>`: runs the configured two-scale study and writes its
//! CSV outputs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use mqshmm::analysis::{
    append_summary, cost_model, measure_unit_costs, realized_cost_params, relative_errors, write_convergence_csv,
    write_cost_csv, write_fields_csv, write_loss_csv, LossSeries,
};
use mqshmm::config::{RunConfig, RunMode};
use mqshmm::macroscale::MacroProblem;
use mqshmm::monolithic::{run_monolithic, MonolithicRunReport};
use mqshmm::reference::run_reference;
use mqshmm::waveform::Waveform;
use mqshmm::wr::{run_wr, WrRunReport};
use mqshmm::Result;

#[derive(Parser)]
#[command(name = "mqshmm", version, about = "Two-scale eddy-current homogenization: monolithic and waveform-relaxation coupling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the study described by a configuration file.
    Run {
        config: PathBuf,
        /// Overrides `[run] mode`: monolithic, wr, reference, compare or cost.
        #[arg(long)]
        mode: Option<RunMode>,
        /// Overrides `[output] dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the per-sample field dumps.
        #[arg(long)]
        no_fields: bool,
    },
}

fn main() -> ExitCode {
    let Command::Run { config, mode, out, no_fields } = Cli::parse().command;
    match run(&config, mode, out, !no_fields) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(path: &Path, mode: Option<RunMode>, out: Option<PathBuf>, fields: bool) -> Result<()> {
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    if let Some(dir) = out {
        cfg.out_dir = dir;
    }
    cfg.validate()?;
    let dir = cfg.out_dir.clone();
    match cfg.mode {
        RunMode::Monolithic => {
            monolithic(&cfg, &dir, fields)?;
        }
        RunMode::Wr => {
            wr(&cfg, &dir, fields)?;
        }
        RunMode::Reference => {
            reference(&cfg, &dir, fields)?;
        }
        RunMode::Compare => {
            let r = reference(&cfg, &dir.join("reference"), fields)?;
            let m = monolithic(&cfg, &dir.join("monolithic"), fields)?;
            let w = wr(&cfg, &dir.join("wr"), fields)?;
            for (name, v, against) in
                [("monolithic vs reference", &m.losses, &r), ("wr vs monolithic", &w.losses, &m.losses), ("wr vs reference", &w.losses, &r)]
            {
                let (ep, ew) = relative_errors(v, against)?;
                let line = format!("{name}: err_losses {ep:.4e} err_energy {ew:.4e}");
                println!("{line}");
                append_summary(&dir, &line)?;
            }
            cost(&cfg, &dir, &m, &w)?;
        }
        RunMode::Cost => {
            let m = monolithic(&cfg, &dir.join("monolithic"), false)?;
            let w = wr(&cfg, &dir.join("wr"), false)?;
            cost(&cfg, &dir, &m, &w)?;
        }
    }
    println!("outputs in {}", dir.display());
    Ok(())
}

fn write_series(dir: &Path, problem: &MacroProblem, losses: &LossSeries, wf: &Waveform, fields: bool) -> Result<()> {
    write_loss_csv(dir, losses)?;
    if fields {
        for (t, x) in wf.times().iter().zip(wf.values()) {
            write_fields_csv(dir, &problem.mesh, &problem.nodal(x), *t)?;
        }
    }
    Ok(())
}

fn summarize(dir: &Path, line: String) -> Result<()> {
    println!("{line}");
    append_summary(dir, &line)
}

fn monolithic(cfg: &RunConfig, dir: &Path, fields: bool) -> Result<MonolithicRunReport> {
    let start = Instant::now();
    let r = run_monolithic(cfg)?;
    let problem = cfg.macro_problem()?;
    write_series(dir, &problem, &r.losses, &r.waveform, fields)?;
    let evals: usize = r.newton_counts.iter().sum();
    summarize(
        dir,
        format!(
            "monolithic: {} steps, {:.2} Newton evaluations per step, {} meso solves, {} communications, {:.2} s",
            r.newton_counts.len(),
            evals as f64 / r.newton_counts.len().max(1) as f64,
            r.meso_solves,
            r.communications,
            start.elapsed().as_secs_f64()
        ),
    )?;
    Ok(r)
}

fn wr(cfg: &RunConfig, dir: &Path, fields: bool) -> Result<WrRunReport> {
    let start = Instant::now();
    let r = run_wr(cfg)?;
    let problem = cfg.macro_problem()?;
    write_series(dir, &problem, &r.losses, &r.waveform, fields)?;
    write_convergence_csv(dir, &r.convergence_rows())?;
    summarize(
        dir,
        format!(
            "wr: iterations per window {:?}, converged {}, {} meso solves, {} communications, {:.2} s",
            r.iterations(),
            r.converged(),
            r.meso_solves,
            r.communications,
            start.elapsed().as_secs_f64()
        ),
    )?;
    Ok(r)
}

fn reference(cfg: &RunConfig, dir: &Path, fields: bool) -> Result<LossSeries> {
    let r = run_reference(cfg)?;
    let problem = cfg.reference_problem()?;
    write_series(dir, &problem, &r.losses, &r.waveform, fields)?;
    summarize(
        dir,
        format!(
            "reference: {} unknowns, {} steps, {:.2} s",
            problem.dim(),
            r.newton_counts.len(),
            r.wall.as_secs_f64()
        ),
    )?;
    Ok(r.losses)
}

fn cost(cfg: &RunConfig, dir: &Path, mono: &MonolithicRunReport, wr: &WrRunReport) -> Result<()> {
    let unit = measure_unit_costs(cfg, 5)?;
    let params = realized_cost_params(mono, wr, unit);
    let report = cost_model(&params)?;
    write_cost_csv(dir, &params, &report)?;
    summarize(
        dir,
        format!(
            "cost: N_NR {:.2}, N_WR {:.2}, kappa {:.3}, predicted speedup {:.3} (exact {:.3}), WR predicted faster {}",
            params.n_nr, params.n_wr, params.kappa, report.speedup_approx, report.speedup_exact, report.wr_predicted_faster
        ),
    )
}
