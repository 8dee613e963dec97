//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use mqshmm::analysis::{audit_costs, cost_model, relative_errors, CostAudit, CostParams, LossSeries};
use mqshmm::cell::{exact_jacobian, meso_step, upscale_h, CellMaterials, CellModel, CellState, MacroSource, NewtonOptions};
use mqshmm::config::RunConfig;
use mqshmm::coupled::run_fullnewton_with;
use mqshmm::material::{ConductivityField, MaterialLaw};
use mqshmm::mesh::{Axis, CellLayout, RegionTag};
use mqshmm::monolithic::run_monolithic;
use mqshmm::reference::run_reference;
use mqshmm::tensor::{self, Tensor2, Vec2};
use mqshmm::wr::{run_wr, WrRunReport};
use mqshmm::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Outcome { pass, detail }
    }
}

/// `(label, counted minus expected)` of every driver run, checked by the cost criterion.
type Audits = Vec<(String, (i64, i64))>;

fn record(audits: &mut Audits, label: &str, run: &dyn CostAudit) {
    audits.push((label.to_string(), audit_costs(run)));
}

fn fro_rel(a: &Tensor2, b: &Tensor2) -> f64 {
    let d = tensor::mat_add(a, &tensor::mat_scale(-1.0, b));
    tensor::fro(&d) / tensor::fro(b)
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// Loss samples of `s` on `grid`.
fn on_grid(s: &LossSeries, grid: &[f64]) -> Result<Vec<f64>> {
    grid.iter().map(|&t| s.power_at(t)).collect()
}

fn wr_config(steps: usize, meso_steps: usize, tol: f64) -> RunConfig {
    let mut c = RunConfig::default();
    c.time.n_steps_macro = steps;
    c.time.n_steps_meso = meso_steps;
    c.solver.wr_tol = tol;
    c
}

fn wr_convergence(audits: &mut Audits, matched: &mut Option<WrRunReport>) -> Result<Outcome> {
    let c = RunConfig::default();
    let problem = c.macro_problem()?;
    let n_hom = problem.mesh.regions.iter().filter(|&&r| r == RegionTag::Homogenized).count();
    let n_cell = c.cell_model()?.mesh.triangle_count();
    let mono = run_monolithic(&c)?;
    record(audits, "monolithic", &mono);
    let wr = run_wr(&c)?;
    record(audits, "wr matched", &wr);
    let reference = run_reference(&c)?;
    let (ref_p, ref_w) = relative_errors(&mono.losses, &reference.losses)?;

    let iters = wr.iterations()[0];
    let mut errs = Vec::new();
    for l in 1..=iters {
        let s = wr.iteration_losses(l).expect("iteration exists");
        errs.push(relative_errors(s, &mono.losses)?);
    }
    let mut pass = wr.converged() && iters >= 6;
    let mut detail = format!(
        "{n_hom} homogenized triangles, {n_cell} cell triangles, {iters} WR iterations; mono vs ref P {ref_p:.2e} W {ref_w:.2e};"
    );
    for (name, pick, reference_err) in [("P", 0usize, ref_p), ("W", 1usize, ref_w)] {
        let e: Vec<f64> = errs.iter().map(|pw| if pick == 0 { pw.0 } else { pw.1 }).collect();
        if e.len() < 6 {
            pass = false;
            continue;
        }
        let window = &e[1..6];
        let monotone = window.windows(2).all(|w| w[1] < w[0]);
        let mean_factor = (window[4] / window[0]).powf(0.25);
        let below = (1..=5).find(|&l| e[l - 1] < reference_err);
        pass &= monotone && mean_factor <= 0.5 && below.is_some();
        let seq: Vec<String> = e.iter().take(6).map(|v| format!("{v:.1e}")).collect();
        detail += &format!(
            " {name} [{}] monotone {monotone} decay {mean_factor:.3} below ref at l={}",
            seq.join(" "),
            below.map_or("none".into(), |l| l.to_string())
        );
    }
    *matched = Some(wr);
    Ok(Outcome::new(pass, detail))
}

fn schur_equivalence() -> Result<Outcome> {
    let mut c = RunConfig::default();
    c.grains = 1;
    c.cell_n = 5;
    c.time.n_steps_macro = 2;
    c.time.n_steps_meso = 2;
    c.time.t_end = 2e-6;
    let problem = c.macro_problem()?;
    let model = c.cell_model()?;
    let opts = NewtonOptions { tol: 1e-10, max_iter: 25, min_iter: 0 };
    let full = run_fullnewton_with(&problem, &model, c.time.t_end, 2, &opts, 10_000, false)?;
    let schur = run_fullnewton_with(&problem, &model, c.time.t_end, 2, &opts, 10_000, true)?;
    let mut worst = 0.0_f64;
    let mut compared = 0;
    for (fs, ss) in full.macro_iterates.iter().zip(&schur.macro_iterates) {
        for (f, s) in fs.iter().zip(ss).skip(1) {
            let den = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if den > 0.0 {
                worst = worst.max(rel_l2(s, f));
                compared += 1;
            }
        }
    }
    let same_counts = full.newton_counts == schur.newton_counts;
    let small = problem.n_gauss() <= 6 && model.mesh.triangle_count() <= 50;
    Ok(Outcome::new(
        same_counts && small && compared > 0 && worst <= 1e-9,
        format!(
            "{} Gauss points, {} cell triangles, {compared} iterates, max relative difference {worst:.2e}",
            problem.n_gauss(),
            model.mesh.triangle_count()
        ),
    ))
}

fn frozen_fd(cell: &CellState, b: Vec2, h: f64) -> Result<Tensor2> {
    let mut j = tensor::ZERO_T;
    for k in 0..2 {
        let (mut bp, mut bm) = (b, b);
        bp[k] += h;
        bm[k] -= h;
        let (hp, hm) = (upscale_h(cell, bp)?, upscale_h(cell, bm)?);
        for i in 0..2 {
            j[i][k] = (hp[i] - hm[i]) / (2.0 * h);
        }
    }
    Ok(j)
}

fn exact_jacobians() -> Result<Outcome> {
    let model = CellModel::new(CellLayout::SquareInclusion(0.64), 8, CellMaterials::smc(5e6, 1.0)?, 1e-4, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let newton = NewtonOptions { tol: 1e-10, max_iter: 50, min_iter: 0 };
    let mut worst_cell = 0.0_f64;
    for _ in 0..20 {
        let src = MacroSource {
            b_m: [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)],
            db_m_dt: [rng.gen_range(-2e6..2e6), rng.gen_range(-2e6..2e6)],
            da_m_dt: rng.gen_range(-5.0..5.0),
        };
        let (state, _) = meso_step(&model.zero_state(), &src, 1e-6, &newton)?;
        let b: Vec2 = [src.b_m[0] + rng.gen_range(-0.2..0.2), src.b_m[1] + rng.gen_range(-0.2..0.2)];
        let exact = exact_jacobian(&state, b)?;
        worst_cell = worst_cell.max(fro_rel(&frozen_fd(&state, b, 1e-5)?, &exact));
    }
    let law = MaterialLaw::smc_grain();
    let mut worst_law = 0.0_f64;
    for _ in 0..100 {
        let b: Vec2 = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let h = 1e-6 * tensor::norm(b).max(1.0);
        let mut fd = tensor::ZERO_T;
        for k in 0..2 {
            let (mut bp, mut bm) = (b, b);
            bp[k] += h;
            bm[k] -= h;
            let (hp, hm) = (law.h_of_b(bp)?, law.h_of_b(bm)?);
            for i in 0..2 {
                fd[i][k] = (hp[i] - hm[i]) / (2.0 * h);
            }
        }
        worst_law = worst_law.max(fro_rel(&fd, &law.dh_db(b)?));
    }
    Ok(Outcome::new(
        worst_cell <= 1e-8 && worst_law <= 1e-6,
        format!("cell max {worst_cell:.2e} over 20 states, material max {worst_law:.2e} over 100 states"),
    ))
}

fn homogenization_oracles() -> Result<Outcome> {
    let law = MaterialLaw::linear(1.0)?;
    let sigma = ConductivityField::zero().with(RegionTag::Insulation, 1.0)?.with(RegionTag::ConductingGrain, 3.0)?;
    let (harmonic, arithmetic) = (2.0 / (1.0 + 1.0 / 3.0), 2.0);
    let mut worst_sigma = 0.0_f64;
    for n in [4, 8, 12] {
        let mat = CellMaterials { grain_law: law, insulation_law: law, sigma: sigma.clone(), floating_conductors: true };
        let m = CellModel::new(CellLayout::Laminate(0.5, Axis::X), n, mat, 1e-4, 1.0)?;
        let s = m.homogenized_sigma()?;
        let d = [s[0][0] - harmonic, s[0][1], s[1][0], s[1][1] - arithmetic];
        worst_sigma = d.iter().fold(worst_sigma, |a, v| a.max(v.abs()));
    }

    let nu = 250.0;
    let m = CellModel::new(CellLayout::Homogeneous, 6, CellMaterials::uniform(MaterialLaw::linear(nu)?, 0.0)?, 1e-4, 1.0)?;
    let src = MacroSource { b_m: [0.7, -1.2], ..Default::default() };
    let (state, _) = meso_step(&m.zero_state(), &src, 1e-6, &NewtonOptions::default())?;
    let correction = state.x.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let h = upscale_h(&state, src.b_m)?;
    let h_err = ((h[0] - nu * src.b_m[0]).powi(2) + (h[1] - nu * src.b_m[1]).powi(2)).sqrt() / (nu * tensor::norm(src.b_m));
    let j_err = fro_rel(&exact_jacobian(&state, src.b_m)?, &[[nu, 0.0], [0.0, nu]]);
    Ok(Outcome::new(
        worst_sigma <= 1e-10 && correction <= 1e-14 && h_err <= 1e-10 && j_err <= 1e-10,
        format!("laminate sigma max deviation {worst_sigma:.1e}; homogeneous correction {correction:.1e}, h {h_err:.1e}, tangent {j_err:.1e}"),
    ))
}

/// Observed order and the loss difference between 20 and 40 steps on the 20-step grid.
struct StepStudy {
    order: f64,
    diff_20_40: f64,
}

fn time_step_convergence(audits: &mut Audits, study: &mut Option<StepStudy>) -> Result<Outcome> {
    let levels = [10usize, 20, 40, 80];
    let mut runs = Vec::new();
    for &n in &levels {
        let r = run_wr(&wr_config(n, n, 1e-6))?;
        record(audits, &format!("wr {n} steps"), &r);
        if !r.converged() {
            return Ok(Outcome::new(false, format!("WR at {n} steps did not converge")));
        }
        runs.push(r.losses);
    }
    let coarse = &runs[0].t;
    let mut diffs = Vec::new();
    for pair in runs.windows(2) {
        diffs.push(rel_l2(&on_grid(&pair[0], coarse)?, &on_grid(&pair[1], coarse)?));
    }
    // Least-squares slope of log(difference) against log(dt).
    let x: Vec<f64> = levels[..3].iter().map(|&n| (1.0 / n as f64).ln()).collect();
    let y: Vec<f64> = diffs.iter().map(|d| d.ln()).collect();
    let (mx, my) = (x.iter().sum::<f64>() / 3.0, y.iter().sum::<f64>() / 3.0);
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let order = sxy / sxx;
    let grid20 = &runs[1].t;
    let diff_20_40 = rel_l2(&on_grid(&runs[1], grid20)?, &on_grid(&runs[2], grid20)?);
    *study = Some(StepStudy { order, diff_20_40 });
    let pairwise: Vec<String> = diffs.windows(2).map(|d| format!("{:.2}", (d[0] / d[1]).log2())).collect();
    Ok(Outcome::new(
        (0.7..=1.3).contains(&order),
        format!(
            "differences {} (pairwise orders {}), fitted order {order:.3}",
            diffs.iter().map(|d| format!("{d:.3e}")).collect::<Vec<_>>().join(", "),
            pairwise.join(", ")
        ),
    ))
}

fn cost_model_statement(audits: &Audits) -> Result<Outcome> {
    let p = CostParams {
        n_ts: 20.0,
        n_tw: 1.0,
        n_wr: 2.0,
        n_nr: 3.0,
        n_gp: 25.0,
        n_dim: 3.0,
        c_sol: 1.0,
        c_com: 0.0,
        c_jac: 0.0,
        c_ass: 0.0,
        c_msol: 0.0,
        kappa: 0.0,
    };
    let speedup = cost_model(&p)?.speedup_approx;
    let bad: Vec<&String> = audits.iter().filter(|(_, d)| *d != (0, 0)).map(|(l, _)| l).collect();
    Ok(Outcome::new(
        (speedup - 4.5).abs() <= 1e-12 && bad.is_empty() && !audits.is_empty(),
        format!("speedup {speedup}; {} driver runs audited, discrepancies in {bad:?}", audits.len()),
    ))
}

fn multirate(audits: &mut Audits, matched: Option<&WrRunReport>, study: Option<&StepStudy>) -> Result<Outcome> {
    let (Some(matched), Some(study)) = (matched, study) else {
        return Ok(Outcome::new(false, "needs the matched run and the step study".into()));
    };
    let c = wr_config(20, 100, 1e-8);
    let fine = run_wr(&c)?;
    record(audits, "wr multirate", &fine);
    let grid = &matched.losses.t;
    let diff = rel_l2(&on_grid(&fine.losses, grid)?, &on_grid(&matched.losses, grid)?);
    let band = study.diff_20_40 / (1.0 - 2f64.powf(-study.order));
    Ok(Outcome::new(
        fine.converged() && diff <= band,
        format!(
            "{} WR iterations, converged {}; difference {diff:.3e} vs band {band:.3e}",
            fine.iterations()[0],
            fine.converged()
        ),
    ))
}

fn report(name: &str, outcome: &Result<Outcome>, elapsed: f64) -> bool {
    match outcome {
        Ok(o) => {
            println!("{} {name}: {} ({elapsed:.1} s)", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            o.pass
        }
        Err(e) => {
            println!("FAIL {name}: error {e} ({elapsed:.1} s)");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut audits = Audits::new();
    let mut matched = None;
    let mut study = None;
    let mut results: Vec<(&str, Result<Outcome>, f64)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Result<Outcome>| {
        eprintln!("running {name}");
        let start = Instant::now();
        let o = f();
        results.push((name, o, start.elapsed().as_secs_f64()));
    };

    run("1 WR iterates converge to the monolithic solution", &mut || wr_convergence(&mut audits, &mut matched));
    run("2 Schur and full Jacobian updates agree", &mut schur_equivalence);
    run("3 exact Jacobians match finite differences", &mut exact_jacobians);
    run("4 homogenization oracles", &mut homogenization_oracles);
    run("5 first-order time-step convergence", &mut || time_step_convergence(&mut audits, &mut study));
    // The multirate run is audited too, so the cost criterion goes last.
    run("7 multirate run stays within the step-size band", &mut || {
        multirate(&mut audits, matched.as_ref(), study.as_ref())
    });
    run("6 cost model speedup and run audits", &mut || cost_model_statement(&audits));

    results.sort_by_key(|r| r.0);
    let mut all = true;
    for (name, outcome, secs) in &results {
        all &= report(name, outcome, *secs);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
