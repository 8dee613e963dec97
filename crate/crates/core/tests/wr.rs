use std::sync::Arc;

use mqshmm::analysis::audit_costs;
use mqshmm::cell::{CellMaterials, CellModel, NewtonOptions};
use mqshmm::config::RunConfig;
use mqshmm::fem;
use mqshmm::material::{ConductivityField, MaterialLaw, NU0};
use mqshmm::mesh::CellLayout;
use mqshmm::monolithic::run_monolithic_with;
use mqshmm::waveform::{uniform_grid, Waveform};
use mqshmm::wr::{downscale_waveform, fixed_point_residual, run_wr, run_wr_with, wr_error_metrics, WindowPlan};
use mqshmm::tensor;

fn tiny(grains: usize, cell_n: usize, steps: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.grains = grains;
    c.cell_n = cell_n;
    c.time.n_steps_macro = steps;
    c.time.n_steps_meso = steps;
    c.solver.parallel = false;
    c
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    fem::l2(&d) / fem::l2(b).max(1e-300)
}

/// `max_k ‖a_k − b_k‖ / max_k ‖b_k‖`: samples near a zero crossing of the
/// source are not divided by their own small norm.
fn waveform_diff(a: &Waveform, b: &Waveform) -> f64 {
    let num = a.values().iter().zip(b.values()).map(|(x, y)| rel_diff(x, y) * fem::l2(y)).fold(0.0, f64::max);
    let den = b.values().iter().map(|y| fem::l2(y)).fold(0.0, f64::max);
    num / den
}

fn plan(c: &RunConfig, windows: usize, tol: f64) -> WindowPlan {
    let t = &c.time;
    WindowPlan::new(0.0, t.t_end, windows, t.n_steps_macro / windows, t.n_steps_meso / windows, 60, tol).unwrap()
}

#[test]
fn window_plan_validation() {
    assert!(WindowPlan::new(0.0, 1.0, 1, 4, 6, 10, 1e-8).is_err());
    assert!(WindowPlan::new(0.0, 1.0, 1, 4, 8, 10, 0.0).is_err());
    assert!(WindowPlan::new(1.0, 1.0, 1, 4, 8, 10, 1e-8).is_err());
    let p = WindowPlan::new(0.0, 1.0, 4, 5, 25, 10, 1e-8).unwrap();
    assert_eq!(p.ratio(), 5);
    assert_eq!(p.window(0), (0.0, 0.25));
    assert_eq!(p.window(3).1, 1.0);
}

#[test]
fn linear_materials_match_monolithic() {
    let c = tiny(2, 6, 5);
    let problem = c.macro_problem().unwrap();
    let mat = CellMaterials {
        grain_law: MaterialLaw::linear(400.0).unwrap(),
        insulation_law: MaterialLaw::linear(NU0).unwrap(),
        sigma: ConductivityField::smc(5e6).unwrap(),
        floating_conductors: true,
    };
    let model = CellModel::new(CellLayout::SquareInclusion(0.64), 6, mat, c.geometry.period(c.grains), 1.0).unwrap();
    let tight = NewtonOptions { tol: 1e-12, ..c.newton() };
    let wr = run_wr_with(&problem, &model, &plan(&c, 1, 1e-10), &tight, false, 0).unwrap();
    assert!(wr.converged());
    let mono = run_monolithic_with(&problem, &model, c.time.t_end, 5, &tight, None, false, 0).unwrap();
    let d = waveform_diff(&wr.waveform, &mono.waveform);
    assert!(d <= 1e-9, "{d}");
    assert_eq!(audit_costs(&wr), (0, 0));
}

#[test]
fn zero_source_converges_immediately() {
    let mut c = tiny(2, 5, 4);
    c.source.j_s0 = 0.0;
    let r = run_wr(&c).unwrap();
    assert_eq!(r.iterations(), vec![1]);
    assert!(r.waveform.values().iter().flatten().all(|&v| v == 0.0));
    assert!(r.windows[0].cells.iter().flatten().flatten().all(|&v| v == 0.0));
}

#[test]
fn windows_chain_and_start_from_constant_iterate() {
    let mut c = tiny(2, 5, 8);
    c.time.n_windows = 2;
    c.solver.wr_tol = 1e-8;
    let r = run_wr(&c).unwrap();
    assert_eq!(r.windows.len(), 2);
    let end0 = r.windows[0].iterations.last().unwrap().waveform.last().to_vec();
    for it in &r.windows[1].iterations {
        assert_eq!(it.waveform.sample(0), &end0[..]);
        assert_eq!(it.window, 1);
    }
    // The window-1 cells continue from the last window-0 cell state.
    for (c0, c1) in r.windows[0].cells.iter().zip(&r.windows[1].cells) {
        assert_eq!(c0.last().unwrap(), &c1[0]);
    }
    assert_eq!(r.waveform.len(), 9);
    assert_eq!(r.losses.len(), 9);
    let rows = r.convergence_rows();
    assert_eq!(rows.len(), r.iterations().iter().sum::<usize>());
    assert_eq!((rows[0].window, rows[0].iteration), (0, 1));
    assert_eq!(audit_costs(&r), (0, 0));
}

#[test]
fn windowed_and_single_window_agree_at_convergence() {
    let mut c = tiny(2, 5, 8);
    c.solver.wr_tol = 1e-10;
    let problem = c.macro_problem().unwrap();
    let model = c.cell_model().unwrap();
    let one = run_wr_with(&problem, &model, &plan(&c, 1, 1e-10), &c.newton(), false, 0).unwrap();
    let four = run_wr_with(&problem, &model, &plan(&c, 4, 1e-10), &c.newton(), false, 0).unwrap();
    assert!(one.converged() && four.converged());
    let d = waveform_diff(&four.waveform, &one.waveform);
    assert!(d <= 1e-8, "{d}");
}

#[test]
fn converged_waveforms_satisfy_monolithic_equations() {
    let mut c = tiny(2, 6, 6);
    c.solver.wr_tol = 1e-8;
    let problem = c.macro_problem().unwrap();
    let model = c.cell_model().unwrap();
    let r = run_wr_with(&problem, &model, &plan(&c, 1, 1e-8), &c.newton(), false, 0).unwrap();
    assert!(r.converged());
    let res = fixed_point_residual(&problem, &model, &r).unwrap();
    assert!(res <= 10.0 * 1e-8, "{res}");
    // Errors decrease from the second iteration on.
    let its = &r.windows[0].iterations;
    assert!(its.len() >= 3);
    for w in its.windows(2).skip(1) {
        assert!(w[1].err_b < w[0].err_b && w[1].change < w[0].change);
    }
}

#[test]
fn multirate_needs_matched_grids_for_fixed_point_check() {
    let mut c = tiny(1, 5, 2);
    c.time.n_steps_meso = 4;
    let problem = c.macro_problem().unwrap();
    let model = c.cell_model().unwrap();
    let r = run_wr_with(&problem, &model, &plan(&c, 1, 1e-6), &c.newton(), false, 0).unwrap();
    assert_eq!(r.meso_solves, r.iterations()[0] * problem.n_gauss() * 4);
    assert!(fixed_point_residual(&problem, &model, &r).is_err());
}

fn waveform(problem: &mqshmm::macroscale::MacroProblem, n: usize, f: impl Fn(f64) -> f64) -> (Waveform, Vec<f64>) {
    let t = uniform_grid(0.0, 1.0, n);
    let v: Vec<f64> = (0..problem.dim()).map(|i| 1.0 + (i % 5) as f64).collect();
    let values = t.iter().map(|&s| v.iter().map(|x| f(s) * x).collect()).collect();
    (Waveform::new(t, values).unwrap(), v)
}

#[test]
fn downscaling_constant_and_linear_waveforms() {
    let problem = tiny(1, 5, 2).macro_problem().unwrap();
    let meso = uniform_grid(0.0, 1.0, 12);
    let (flat, v) = waveform(&problem, 4, |_| 1.0);
    let tri = problem.gauss_elements()[1];
    let b0 = problem.element_b(tri, &v);
    for s in downscale_waveform(&problem, &flat, 1, &meso, None).unwrap() {
        assert_eq!(s.db_m_dt, [0.0, 0.0]);
        assert_eq!(s.da_m_dt, 0.0);
        assert!(tensor::norm(tensor::sub(s.b_m, b0)) <= 1e-14 * tensor::norm(b0));
    }
    let (lin, _) = waveform(&problem, 4, |t| 3.0 * t);
    let a0 = problem.element_mean_a(tri, &v);
    for (j, s) in downscale_waveform(&problem, &lin, 1, &meso, None).unwrap().iter().enumerate() {
        assert!(tensor::norm(tensor::sub(s.db_m_dt, tensor::scale(3.0, b0))) <= 1e-12 * tensor::norm(b0));
        assert!((s.da_m_dt - 3.0 * a0).abs() <= 1e-12 * a0.abs());
        let expect = tensor::scale(3.0 * meso[j], b0);
        assert!(tensor::norm(tensor::sub(s.b_m, expect)) <= 1e-12 * tensor::norm(b0));
    }
}

#[test]
fn downscaled_rates_converge_at_first_order() {
    let problem = tiny(1, 5, 2).macro_problem().unwrap();
    let meso = uniform_grid(0.0, 1.0, 100);
    let tri = problem.gauss_elements()[0];
    let err = |n: usize| {
        let (wf, v) = waveform(&problem, n, |t| (2.0 * t).sin());
        let b0 = problem.element_b(tri, &v);
        downscale_waveform(&problem, &wf, 0, &meso, None)
            .unwrap()
            .iter()
            .zip(&meso)
            .map(|(s, &t)| tensor::norm(tensor::sub(s.db_m_dt, tensor::scale(2.0 * (2.0 * t).cos(), b0))))
            .fold(0.0_f64, f64::max)
    };
    let ratio = err(10) / err(50);
    assert!((3.5..7.0).contains(&ratio), "{ratio}");
}

#[test]
fn downscaling_rejects_non_nested_grids() {
    let problem = tiny(1, 5, 2).macro_problem().unwrap();
    let (wf, _) = waveform(&problem, 4, |t| t);
    let err = downscale_waveform(&problem, &wf, 0, &uniform_grid(0.0, 1.0, 6), None).unwrap_err();
    assert!(matches!(err.root(), mqshmm::Error::GridMismatch(_)));
    assert!(downscale_waveform(&problem, &wf, 0, &uniform_grid(0.0, 2.0, 8), None).is_err());
}

#[test]
fn error_metric_properties() {
    let t = uniform_grid(0.0, 1.0, 3);
    let prev = Waveform::new(t.clone(), vec![vec![1.0, 2.0], vec![0.5, 1.0], vec![3.0, -1.0], vec![2.0, 2.0]]).unwrap();
    let init = Waveform::constant(t.clone(), vec![2.0, -2.0]).unwrap();
    assert_eq!(wr_error_metrics(&prev, &prev, &init).unwrap(), 0.0);
    let shifted = Waveform::new(
        t.clone(),
        prev.values().iter().map(|v| v.iter().zip(init.sample(0)).map(|(a, b)| a + 0.1 * b).collect()).collect(),
    )
    .unwrap();
    assert!((wr_error_metrics(&prev, &shifted, &init).unwrap() - 0.1).abs() < 1e-15);
    let zero = Waveform::constant(t.clone(), vec![0.0, 0.0]).unwrap();
    // Vanishing initial iterate: normalized by the current one.
    assert!((wr_error_metrics(&zero, &prev, &zero).unwrap() - 1.0).abs() < 1e-15);
    let short = Waveform::constant(uniform_grid(0.0, 1.0, 2), vec![0.0, 0.0]).unwrap();
    assert!(wr_error_metrics(&prev, &short, &init).is_err());
}

#[test]
fn model_construction_is_shared() {
    let c = tiny(1, 5, 2);
    let model = c.cell_model().unwrap();
    let state = model.zero_state();
    assert!(Arc::ptr_eq(&state.model, &model));
}
