use mqshmm::fem::{
    apply_periodic, assemble, element_mass, element_stiffness, solve_linear, DofMap, Factorization, SparseMatrix,
    SparseSystem,
};
use mqshmm::mesh::{generate_cell_mesh, BoundaryTag, CellLayout, Mesh2D, PeriodicPairing};
use mqshmm::tensor::{self, Tensor2, Vec2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const UNIT: [Vec2; 3] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];

fn laplace(_t: usize, p: &[Vec2; 3]) -> mqshmm::Result<([[f64; 3]; 3], [f64; 3])> {
    Ok((element_stiffness(p, &tensor::IDENTITY)?, [0.0; 3]))
}

fn cell(n: usize) -> (Mesh2D, PeriodicPairing) {
    generate_cell_mesh(CellLayout::Homogeneous, n).unwrap()
}

#[test]
fn unit_triangle_stiffness() {
    let k = element_stiffness(&UNIT, &tensor::IDENTITY).unwrap();
    let expect = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
    for i in 0..3 {
        for j in 0..3 {
            assert!((k[i][j] - expect[i][j]).abs() < 1e-15);
        }
    }
    let k2 = element_stiffness(&UNIT, &tensor::mat_scale(2.0, &tensor::IDENTITY)).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(k2[i][j], 2.0 * k[i][j]);
        }
    }
}

#[test]
fn unit_triangle_mass() {
    let m = element_mass(&UNIT, 1.0).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let e = if i == j { 1.0 / 12.0 } else { 1.0 / 24.0 };
            assert!((m[i][j] - e).abs() < 1e-16);
        }
    }
    assert!(element_mass(&UNIT, 0.0).unwrap().iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn degenerate_triangles_fail() {
    let flat = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
    assert!(element_stiffness(&flat, &tensor::IDENTITY).is_err());
    assert!(element_mass(&flat, 1.0).is_err());
}

#[test]
fn pinned_cell_laplacian_is_spd() {
    let (m, p) = cell(4);
    let dofs = apply_periodic(&DofMap::all_free(m.node_count()), &p).unwrap();
    let sys = assemble(&m, &dofs, laplace).unwrap();
    assert!(sys.matrix.is_symmetric(1e-12));
    assert!(Factorization::new(&sys.matrix).unwrap().is_cholesky());
}

#[test]
fn zero_callback_gives_zero_system() {
    let (m, _) = cell(3);
    let dofs = DofMap::all_free(m.node_count());
    let sys = assemble(&m, &dofs, |_, _| Ok(([[0.0; 3]; 3], [0.0; 3]))).unwrap();
    assert_eq!(sys.matrix.max_abs(), 0.0);
    assert!(sys.rhs.iter().all(|&v| v == 0.0));
}

#[test]
fn callback_errors_carry_triangle() {
    let (m, _) = cell(2);
    let dofs = DofMap::all_free(m.node_count());
    let err = assemble(&m, &dofs, |t, _| {
        if t == 5 {
            Err(mqshmm::Error::NumericDomain("test"))
        } else {
            Ok(([[0.0; 3]; 3], [0.0; 3]))
        }
    })
    .unwrap_err();
    assert!(matches!(err, mqshmm::Error::Element { triangle: 5, .. }));
}

/// Dirichlet data from a linear field on the whole cell boundary.
fn linear_dirichlet(m: &Mesh2D, c: [f64; 3]) -> DofMap {
    let f = |p: Vec2| c[0] + c[1] * p[0] + c[2] * p[1];
    let fixed: Vec<(usize, f64)> =
        m.boundary_nodes(BoundaryTag::CellBoundary).into_iter().map(|n| (n, f(m.nodes[n]))).collect();
    DofMap::with_dirichlet_values(m.node_count(), &fixed)
}

#[test]
fn renumbering_permutes_the_solution() {
    let (m, _) = generate_cell_mesh(CellLayout::SquareInclusion(0.5), 6).unwrap();
    let c = [0.3, -1.0, 2.0];
    let source = |_t: usize, p: &[Vec2; 3]| -> mqshmm::Result<([[f64; 3]; 3], [f64; 3])> {
        let a = mqshmm::mesh::signed_area(p);
        Ok((element_stiffness(p, &tensor::IDENTITY)?, [a / 3.0; 3]))
    };
    let dofs = linear_dirichlet(&m, c);
    let x = dofs.expand(&solve_linear(&assemble(&m, &dofs, source).unwrap()).unwrap());
    let n = m.node_count();
    let perm: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % n).collect();
    assert_eq!(n % 5, 4, "stride must be coprime with the node count");
    let mp = m.renumbered(&perm);
    let dp = linear_dirichlet(&mp, c);
    let xp = dp.expand(&solve_linear(&assemble(&mp, &dp, source).unwrap()).unwrap());
    for old in 0..n {
        assert!((x[old] - xp[perm[old]]).abs() < 1e-12);
    }
}

#[test]
fn trivial_solves() {
    let id = SparseSystem { matrix: SparseMatrix::identity(3), rhs: vec![1.0, -2.0, 3.5] };
    assert_eq!(solve_linear(&id).unwrap(), vec![1.0, -2.0, 3.5]);
    let diag = SparseSystem {
        matrix: SparseMatrix::from_triplets(2, &[(0, 0, 2.0), (1, 1, 4.0)]).unwrap(),
        rhs: vec![2.0, 8.0],
    };
    let x = solve_linear(&diag).unwrap();
    assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
}

#[test]
fn singular_system_reports_failure() {
    let (m, _) = cell(3);
    let sys = assemble(&m, &DofMap::all_free(m.node_count()), laplace).unwrap();
    let err = solve_linear(&SparseSystem { rhs: vec![1.0; sys.rhs.len()], ..sys }).unwrap_err();
    assert!(matches!(err, mqshmm::Error::SolverFailure { .. }), "{err:?}");
}

#[test]
fn random_spd_laplacian_residual() {
    let (m, _) = cell(8);
    let dofs = DofMap::with_dirichlet(m.node_count(), &m.boundary_nodes(BoundaryTag::CellBoundary));
    assert_eq!(dofs.n_free(), 49);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let k = assemble(&m, &dofs, laplace).unwrap().matrix;
    let rhs: Vec<f64> = (0..dofs.n_free()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = solve_linear(&SparseSystem { matrix: k.clone(), rhs: rhs.clone() }).unwrap();
    let r: Vec<f64> = k.mul_vec(&x).iter().zip(&rhs).map(|(a, b)| a - b).collect();
    assert!(mqshmm::fem::l2(&r) <= 1e-10 * (mqshmm::fem::l2(&rhs) + 1.0));
}

#[test]
fn periodic_dof_count_on_smallest_cell() {
    let (m, p) = cell(2);
    let dofs = apply_periodic(&DofMap::all_free(m.node_count()), &p).unwrap();
    // One interior node, two edge masters and one corner master, minus the anchor.
    assert_eq!(dofs.n_free(), 1 + 3 - 1);
    assert_eq!(dofs.free_index(dofs.anchor().unwrap()), None);
}

#[test]
fn empty_pairing_only_pins_anchor() {
    let (m, _) = cell(3);
    let base = DofMap::all_free(m.node_count());
    let d = apply_periodic(&base, &PeriodicPairing::empty()).unwrap();
    assert_eq!(d.n_free(), base.n_free() - 1);
    assert_eq!(d.anchor(), Some(0));
}

#[test]
fn pairing_with_unknown_nodes_is_rejected() {
    let (m, _) = cell(2);
    let bad = PeriodicPairing { master_slave_pairs: vec![(0, 99)], corner_group: vec![], period: 1.0 };
    assert!(apply_periodic(&DofMap::all_free(m.node_count()), &bad).is_err());
}

#[test]
fn periodic_solution_matches_on_paired_nodes() {
    let (m, p) = generate_cell_mesh(CellLayout::SquareInclusion(0.36), 9).unwrap();
    let dofs = apply_periodic(&DofMap::all_free(m.node_count()), &p).unwrap();
    // Zero-mean source: +1 in the inclusion, balanced outside.
    let inc = m.region_area(mqshmm::mesh::RegionTag::ConductingGrain);
    let sys = assemble(&m, &dofs, |t, pts| {
        let a = mqshmm::mesh::signed_area(pts);
        let s = if m.regions[t] == mqshmm::mesh::RegionTag::ConductingGrain { 1.0 } else { -inc / (1.0 - inc) };
        Ok((element_stiffness(pts, &tensor::IDENTITY)?, [s * a / 3.0; 3]))
    })
    .unwrap();
    let x = dofs.expand(&solve_linear(&sys).unwrap());
    for &(a, b) in &p.master_slave_pairs {
        assert_eq!(x[a], x[b]);
    }
}

fn spd() -> impl Strategy<Value = Tensor2> {
    (0.1..10.0_f64, 0.1..10.0_f64, -0.9..0.9_f64).prop_map(|(a, b, r)| {
        let off = r * (a * b).sqrt();
        [[a, off], [off, b]]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn stiffness_rows_sum_to_zero(p in prop::array::uniform3((-1.0..1.0_f64, -1.0..1.0_f64)), c in spd()) {
        let pts = p.map(|(x, y)| [x, y]);
        prop_assume!(mqshmm::mesh::signed_area(&pts) > 1e-3);
        let k = element_stiffness(&pts, &c).unwrap();
        for row in k {
            prop_assert!(row.iter().sum::<f64>().abs() <= 1e-12 * row.iter().map(|v| v.abs()).sum::<f64>());
        }
        let mass = element_mass(&pts, 2.5).unwrap();
        let total: f64 = mass.iter().flatten().sum();
        prop_assert!((total - 2.5 * mqshmm::mesh::signed_area(&pts)).abs() <= 1e-13);
    }

    #[test]
    fn dirichlet_stiffness_is_spd(c in spd(), n in 3usize..8) {
        let (m, _) = cell(n);
        let dofs = DofMap::with_dirichlet(m.node_count(), &[0]);
        let sys = assemble(&m, &dofs, |_, p| Ok((element_stiffness(p, &c)?, [0.0; 3]))).unwrap();
        prop_assert!(sys.matrix.is_symmetric(1e-12));
        prop_assert!(Factorization::new(&sys.matrix).unwrap().is_cholesky());
    }

    #[test]
    fn linear_fields_are_reproduced(c in prop::array::uniform3(-5.0..5.0_f64), n in 3usize..10) {
        let (m, _) = generate_cell_mesh(CellLayout::SquareInclusion(0.49), n).unwrap();
        let dofs = linear_dirichlet(&m, c);
        let x = dofs.expand(&solve_linear(&assemble(&m, &dofs, laplace).unwrap()).unwrap());
        for (i, p) in m.nodes.iter().enumerate() {
            prop_assert!((x[i] - (c[0] + c[1] * p[0] + c[2] * p[1])).abs() <= 1e-12);
        }
    }

    #[test]
    fn assembly_is_linear(c1 in spd(), c2 in spd(), f1 in -3.0..3.0_f64, f2 in -3.0..3.0_f64) {
        let (m, p) = cell(4);
        let dofs = apply_periodic(&DofMap::all_free(m.node_count()), &p).unwrap();
        let cb = |c: Tensor2, f: f64| move |_t: usize, pts: &[Vec2; 3]| Ok((element_stiffness(pts, &c)?, [f; 3]));
        let a = assemble(&m, &dofs, cb(c1, f1)).unwrap();
        let b = assemble(&m, &dofs, cb(c2, f2)).unwrap();
        let s = assemble(&m, &dofs, cb(tensor::mat_add(&c1, &c2), f1 + f2)).unwrap();
        let (da, db, ds) = (a.matrix.to_dense(), b.matrix.to_dense(), s.matrix.to_dense());
        for i in 0..ds.len() {
            for j in 0..ds.len() {
                prop_assert!((ds[i][j] - da[i][j] - db[i][j]).abs() <= 1e-12 * (1.0 + ds[i][j].abs()));
            }
            prop_assert!((s.rhs[i] - a.rhs[i] - b.rhs[i]).abs() <= 1e-12);
        }
    }
}
