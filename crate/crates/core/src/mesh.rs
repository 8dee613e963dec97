//! Structured triangular meshes: the homogenized quarter domain, the periodic
//! unit cell and the grain-resolved reference domain.
//!
//! Every mesh is a tensor grid of rectangles split along the same diagonal,
//! with all material interfaces on grid lines.

use std::collections::HashMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::Vec2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegionTag {
    ConductingGrain,
    Insulation,
    Air,
    Inductor,
    Homogenized,
}

impl RegionTag {
    pub const ALL: [RegionTag; 5] = [
        RegionTag::ConductingGrain,
        RegionTag::Insulation,
        RegionTag::Air,
        RegionTag::Inductor,
        RegionTag::Homogenized,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionTag::ConductingGrain => "grain",
            RegionTag::Insulation => "insulation",
            RegionTag::Air => "air",
            RegionTag::Inductor => "inductor",
            RegionTag::Homogenized => "homogenized",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BoundaryTag {
    /// Outer truncation boundary, `a = 0`.
    GammaInf,
    /// Bottom symmetry line `y = 0`, `a = 0`.
    GammaH,
    /// Left symmetry line `x = 0`, natural condition.
    GammaV,
    CellBoundary,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryEdge {
    pub nodes: [usize; 2],
    pub tag: BoundaryTag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh2D {
    pub nodes: Vec<Vec2>,
    /// Counter-clockwise node triples.
    pub triangles: Vec<[usize; 3]>,
    pub regions: Vec<RegionTag>,
    pub boundary: Vec<BoundaryEdge>,
}

impl Mesh2D {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn coords(&self, t: usize) -> [Vec2; 3] {
        let [a, b, c] = self.triangles[t];
        [self.nodes[a], self.nodes[b], self.nodes[c]]
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        signed_area(&self.coords(t))
    }

    pub fn centroid(&self, t: usize) -> Vec2 {
        let p = self.coords(t);
        [
            (p[0][0] + p[1][0] + p[2][0]) / 3.0,
            (p[0][1] + p[1][1] + p[2][1]) / 3.0,
        ]
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangle_count()).map(|t| self.signed_area(t)).sum()
    }

    pub fn region_area(&self, tag: RegionTag) -> f64 {
        self.triangles_in(tag).map(|t| self.signed_area(t)).sum()
    }

    pub fn triangles_in(&self, tag: RegionTag) -> impl Iterator<Item = usize> + '_ {
        (0..self.triangle_count()).filter(move |&t| self.regions[t] == tag)
    }

    pub fn has_region(&self, tag: RegionTag) -> bool {
        self.regions.contains(&tag)
    }

    /// Sorted, deduplicated nodes on edges carrying `tag`.
    pub fn boundary_nodes(&self, tag: BoundaryTag) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .boundary
            .iter()
            .filter(|e| e.tag == tag)
            .flat_map(|e| e.nodes)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Checks positivity of areas and that every tagged boundary edge is an
    /// edge of exactly one triangle.
    pub fn validate(&self) -> Result<()> {
        if self.regions.len() != self.triangles.len() {
            return Err(Error::Inconsistent("region tags do not cover triangles".into()));
        }
        let mut edge_use: HashMap<(usize, usize), usize> = HashMap::new();
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&n| n >= self.nodes.len()) {
                return Err(Error::Inconsistent(format!("triangle {t} references a missing node")));
            }
            let area = self.signed_area(t);
            if !(area > 0.0) {
                return Err(Error::SingularElement { triangle: t, area });
            }
            for k in 0..3 {
                *edge_use.entry(edge_key(tri[k], tri[(k + 1) % 3])).or_default() += 1;
            }
        }
        for e in &self.boundary {
            let uses = edge_use.get(&edge_key(e.nodes[0], e.nodes[1])).copied().unwrap_or(0);
            if uses != 1 {
                return Err(Error::Inconsistent(format!(
                    "boundary edge {:?} belongs to {uses} triangles",
                    e.nodes
                )));
            }
        }
        Ok(())
    }

    /// Renumbers nodes so that old node `i` becomes `perm[i]`.
    pub fn renumbered(&self, perm: &[usize]) -> Mesh2D {
        let mut nodes = vec![[0.0; 2]; self.nodes.len()];
        for (old, &new) in perm.iter().enumerate() {
            nodes[new] = self.nodes[old];
        }
        Mesh2D {
            nodes,
            triangles: self.triangles.iter().map(|t| t.map(|n| perm[n])).collect(),
            regions: self.regions.clone(),
            boundary: self
                .boundary
                .iter()
                .map(|e| BoundaryEdge { nodes: e.nodes.map(|n| perm[n]), tag: e.tag })
                .collect(),
        }
    }

    /// Text dump: `n id x y`, `t id n1 n2 n3 region`, `p master slave`.
    pub fn write_dump<W: Write>(&self, mut w: W, pairing: Option<&PeriodicPairing>) -> Result<()> {
        for (i, p) in self.nodes.iter().enumerate() {
            writeln!(w, "n {i} {:e} {:e}", p[0], p[1])?;
        }
        for (i, t) in self.triangles.iter().enumerate() {
            writeln!(w, "t {i} {} {} {} {}", t[0], t[1], t[2], self.regions[i].name())?;
        }
        if let Some(p) = pairing {
            for (m, s) in &p.master_slave_pairs {
                writeln!(w, "p {m} {s}")?;
            }
        }
        Ok(())
    }
}

pub fn signed_area(p: &[Vec2; 3]) -> f64 {
    0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]))
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Identification of opposite boundary nodes of the unit cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicPairing {
    pub master_slave_pairs: Vec<(usize, usize)>,
    /// The four corners; the first one is the master of the others.
    pub corner_group: Vec<usize>,
    pub period: f64,
}

impl PeriodicPairing {
    pub fn empty() -> Self {
        PeriodicPairing { master_slave_pairs: Vec::new(), corner_group: Vec::new(), period: 1.0 }
    }

    /// Node → master lookup (identity for unpaired nodes).
    pub fn master_map(&self, n_nodes: usize) -> Vec<usize> {
        let mut map: Vec<usize> = (0..n_nodes).collect();
        for &(m, s) in &self.master_slave_pairs {
            map[s] = m;
        }
        map
    }

    pub fn validate(&self, mesh: &Mesh2D) -> Result<()> {
        let n = mesh.node_count();
        let tol = 1e-12 * self.period;
        let mut is_slave = vec![false; n];
        let mut is_master = vec![false; n];
        for &(m, s) in &self.master_slave_pairs {
            if m >= n || s >= n {
                return Err(Error::Inconsistent(format!("pair ({m}, {s}) references unknown node")));
            }
            is_master[m] = true;
            is_slave[s] = true;
            let d = [mesh.nodes[s][0] - mesh.nodes[m][0], mesh.nodes[s][1] - mesh.nodes[m][1]];
            let shifted = d.map(|c| (c.abs() - self.period).abs() <= tol);
            let same = d.map(|c| c.abs() <= tol);
            let corner = self.corner_group.contains(&s);
            let ok = if corner {
                (shifted[0] || same[0]) && (shifted[1] || same[1]) && (shifted[0] || shifted[1])
            } else {
                (shifted[0] && same[1]) || (same[0] && shifted[1])
            };
            if !ok {
                return Err(Error::Inconsistent(format!("pair ({m}, {s}) is not one period apart")));
            }
        }
        if (0..n).any(|i| is_master[i] && is_slave[i]) {
            return Err(Error::Inconsistent("a node is both master and slave".into()));
        }
        Ok(())
    }
}

/// Dimensions of the benchmark, SI units.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryParams {
    /// Full SMC side length `L`.
    pub l: f64,
    /// Inductor thickness.
    pub e_i: f64,
    /// Gap between SMC and inductor.
    pub e_gap: f64,
    /// Inductor overhang past the SMC edge.
    pub e_a: f64,
    /// Grain area fraction of one period cell.
    pub fill_fraction: f64,
    /// Air margin as a multiple of the SMC half width.
    pub air_margin_factor: f64,
}

impl Default for GeometryParams {
    fn default() -> Self {
        GeometryParams {
            l: 1000e-6,
            e_i: 100e-6,
            e_gap: 100e-6,
            e_a: 150e-6 * std::f64::consts::SQRT_2 / 2.0,
            fill_fraction: 0.64,
            air_margin_factor: 2.0,
        }
    }
}

impl GeometryParams {
    pub fn half_width(&self) -> f64 {
        0.5 * self.l
    }

    /// Physical side of one periodic cell.
    pub fn period(&self, grains_per_side: usize) -> f64 {
        self.half_width() / grains_per_side as f64
    }

    pub fn grain_side(&self, grains_per_side: usize) -> f64 {
        self.fill_fraction.sqrt() * self.period(grains_per_side)
    }

    /// Side of the square quarter domain.
    pub fn box_extent(&self) -> f64 {
        self.half_width() + self.e_gap + self.e_i + self.air_margin_factor * self.half_width()
    }

    pub fn quarter_area(&self) -> f64 {
        self.box_extent().powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("L", self.l),
            ("e_i", self.e_i),
            ("e_gap", self.e_gap),
            ("e_a", self.e_a),
            ("air margin", self.air_margin_factor),
        ];
        for (name, v) in named {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidGeometry(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.fill_fraction > 0.0 && self.fill_fraction < 1.0) {
            return Err(Error::InvalidGeometry(format!(
                "fill fraction {} outside (0,1)",
                self.fill_fraction
            )));
        }
        if self.half_width() + self.e_a >= self.box_extent() {
            return Err(Error::InvalidGeometry("inductor overhang leaves the air box".into()));
        }
        Ok(())
    }

    fn x_breaks(&self) -> [f64; 3] {
        let h = self.half_width();
        [h, h + self.e_a, self.box_extent()]
    }

    fn y_breaks(&self) -> [f64; 4] {
        let h = self.half_width();
        [h, h + self.e_gap, h + self.e_gap + self.e_i, self.box_extent()]
    }

    fn outer_region(&self, x: f64, y: f64) -> RegionTag {
        let h = self.half_width();
        if y > h + self.e_gap && y < h + self.e_gap + self.e_i && x < h + self.e_a {
            RegionTag::Inductor
        } else {
            RegionTag::Air
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CellLayout {
    /// Centered square grain covering `fill` of the cell area.
    SquareInclusion(f64),
    /// Conducting layer of width `fraction` at the upper end of `axis`.
    Laminate(f64, Axis),
    /// Single material.
    Homogeneous,
}

/// Splits `total` subdivisions over segments proportionally to `lengths`,
/// at least one each (largest-remainder rounding).
pub fn distribute(lengths: &[f64], total: usize) -> Result<Vec<usize>> {
    let k = lengths.len();
    if total < k {
        return Err(Error::InvalidLayout(format!("{total} subdivisions cannot cover {k} segments")));
    }
    let sum: f64 = lengths.iter().sum();
    let ideal: Vec<f64> = lengths.iter().map(|l| total as f64 * l / sum).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|v| (v.floor() as usize).max(1)).collect();
    // Remove surplus from segments furthest above their ideal share.
    while counts.iter().sum::<usize>() > total {
        let i = (0..k)
            .filter(|&i| counts[i] > 1)
            .max_by(|&a, &b| {
                (counts[a] as f64 - ideal[a]).partial_cmp(&(counts[b] as f64 - ideal[b])).unwrap()
            })
            .expect("total >= k leaves a reducible segment");
        counts[i] -= 1;
    }
    // Hand out the deficit by largest remainder.
    while counts.iter().sum::<usize>() < total {
        let i = (0..k)
            .max_by(|&a, &b| {
                (ideal[a] - counts[a] as f64)
                    .partial_cmp(&(ideal[b] - counts[b] as f64))
                    .unwrap()
                    .then(b.cmp(&a))
            })
            .unwrap();
        counts[i] += 1;
    }
    Ok(counts)
}

/// Grid line coordinates from exact breakpoints and per-segment counts.
fn grid_lines(breaks: &[f64], counts: &[usize]) -> Vec<f64> {
    let mut out = vec![breaks[0]];
    for (s, &n) in counts.iter().enumerate() {
        let (a, b) = (breaks[s], breaks[s + 1]);
        for i in 1..n {
            out.push(a + (b - a) * i as f64 / n as f64);
        }
        out.push(b);
    }
    out
}

fn count_for(len: f64, h: f64, refinement: usize) -> usize {
    ((len / h).round() as usize).max(1) * refinement
}

/// Boundary tags in the order bottom, right, top, left.
fn tensor_mesh(
    xs: &[f64],
    ys: &[f64],
    region: impl Fn(f64, f64) -> RegionTag,
    sides: [BoundaryTag; 4],
) -> Mesh2D {
    let (nx, ny) = (xs.len() - 1, ys.len() - 1);
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for &y in ys {
        for &x in xs {
            nodes.push([x, y]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    let mut regions = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let tag = region(0.5 * (xs[i] + xs[i + 1]), 0.5 * (ys[j] + ys[j + 1]));
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
            regions.push(tag);
            regions.push(tag);
        }
    }
    let mut boundary = Vec::with_capacity(2 * (nx + ny));
    for i in 0..nx {
        boundary.push(BoundaryEdge { nodes: [id(i, 0), id(i + 1, 0)], tag: sides[0] });
        boundary.push(BoundaryEdge { nodes: [id(i + 1, ny), id(i, ny)], tag: sides[2] });
    }
    for j in 0..ny {
        boundary.push(BoundaryEdge { nodes: [id(nx, j), id(nx, j + 1)], tag: sides[1] });
        boundary.push(BoundaryEdge { nodes: [id(0, j + 1), id(0, j)], tag: sides[3] });
    }
    Mesh2D { nodes, triangles, regions, boundary }
}

const QUARTER_SIDES: [BoundaryTag; 4] =
    [BoundaryTag::GammaH, BoundaryTag::GammaInf, BoundaryTag::GammaInf, BoundaryTag::GammaV];

/// Quarter domain with a homogenized SMC block of `grains_per_side`² macro
/// squares; every homogenized triangle is one Gauss point.
pub fn generate_macro_mesh(grains_per_side: usize, geometry: &GeometryParams) -> Result<Mesh2D> {
    if grains_per_side == 0 {
        return Err(Error::InvalidGeometry("grains_per_side must be at least 1".into()));
    }
    geometry.validate()?;
    let g = grains_per_side;
    let h = geometry.period(g);
    let half = geometry.half_width();
    let xb = geometry.x_breaks();
    let yb = geometry.y_breaks();
    let mut xc = vec![g];
    xc.extend((0..2).map(|s| count_for(xb[s + 1] - xb[s], h, 1)));
    let mut yc = vec![g];
    yc.extend((0..3).map(|s| count_for(yb[s + 1] - yb[s], h, 1)));
    let xs = grid_lines(&[0.0, xb[0], xb[1], xb[2]], &xc);
    let ys = grid_lines(&[0.0, yb[0], yb[1], yb[2], yb[3]], &yc);
    let mesh = tensor_mesh(
        &xs,
        &ys,
        |x, y| {
            if x < half && y < half {
                RegionTag::Homogenized
            } else {
                geometry.outer_region(x, y)
            }
        },
        QUARTER_SIDES,
    );
    Ok(mesh)
}

/// Subdivisions of one period cell in the reference mesh before refinement.
pub const REFERENCE_BASE_PER_PERIOD: usize = 10;

/// Quarter domain with every grain and insulation gap meshed.
pub fn generate_reference_mesh(
    grains_per_side: usize,
    refinement: usize,
    geometry: &GeometryParams,
) -> Result<Mesh2D> {
    if grains_per_side == 0 || refinement == 0 {
        return Err(Error::InvalidGeometry("grains_per_side and refinement must be at least 1".into()));
    }
    geometry.validate()?;
    let g = grains_per_side;
    let p = geometry.period(g);
    let s = geometry.grain_side(g);
    let gap = 0.5 * (p - s);
    let per_cell: Vec<usize> = distribute(&[gap, s, gap], REFERENCE_BASE_PER_PERIOD)?
        .into_iter()
        .map(|c| c * refinement)
        .collect();
    let mut breaks = vec![0.0];
    let mut counts = Vec::new();
    for k in 0..g {
        let x0 = k as f64 * p;
        breaks.extend([x0 + gap, x0 + gap + s, if k + 1 == g { geometry.half_width() } else { x0 + p }]);
        counts.extend_from_slice(&per_cell);
    }
    let (mut xbreaks, mut xcounts) = (breaks.clone(), counts.clone());
    let (mut ybreaks, mut ycounts) = (breaks, counts);
    let xb = geometry.x_breaks();
    for w in xb.windows(2) {
        xcounts.push(count_for(w[1] - w[0], p, refinement));
    }
    xbreaks.extend(&xb[1..]);
    let yb = geometry.y_breaks();
    for w in yb.windows(2) {
        ycounts.push(count_for(w[1] - w[0], p, refinement));
    }
    ybreaks.extend(&yb[1..]);
    let xs = grid_lines(&xbreaks, &xcounts);
    let ys = grid_lines(&ybreaks, &ycounts);
    let half = geometry.half_width();
    let in_grain = |u: f64| {
        let local = u - (u / p).floor() * p;
        local > gap && local < gap + s
    };
    Ok(tensor_mesh(
        &xs,
        &ys,
        |x, y| {
            if x < half && y < half {
                if in_grain(x) && in_grain(y) {
                    RegionTag::ConductingGrain
                } else {
                    RegionTag::Insulation
                }
            } else {
                geometry.outer_region(x, y)
            }
        },
        QUARTER_SIDES,
    ))
}

/// Unit cell `[-1/2, 1/2]²` with periodic pairing.
pub fn generate_cell_mesh(layout: CellLayout, n_per_side: usize) -> Result<(Mesh2D, PeriodicPairing)> {
    if n_per_side < 2 {
        return Err(Error::InvalidLayout(format!("n_per_side must be at least 2, got {n_per_side}")));
    }
    let uniform = grid_lines(&[-0.5, 0.5], &[n_per_side]);
    let (xs, ys) = match layout {
        CellLayout::SquareInclusion(fill) => {
            check_fraction(fill)?;
            let s = fill.sqrt();
            let g = 0.5 * (1.0 - s);
            let lines = grid_lines(&[-0.5, -0.5 * s, 0.5 * s, 0.5], &distribute(&[g, s, g], n_per_side)?);
            (lines.clone(), lines)
        }
        CellLayout::Laminate(f, axis) => {
            check_fraction(f)?;
            let lines = grid_lines(&[-0.5, 0.5 - f, 0.5], &distribute(&[1.0 - f, f], n_per_side)?);
            match axis {
                Axis::X => (lines, uniform),
                Axis::Y => (uniform, lines),
            }
        }
        CellLayout::Homogeneous => (uniform.clone(), uniform),
    };
    let region = |x: f64, y: f64| {
        let conducting = match layout {
            CellLayout::SquareInclusion(fill) => {
                let h = 0.5 * fill.sqrt();
                x.abs() < h && y.abs() < h
            }
            CellLayout::Laminate(f, Axis::X) => x > 0.5 - f,
            CellLayout::Laminate(f, Axis::Y) => y > 0.5 - f,
            CellLayout::Homogeneous => true,
        };
        if conducting {
            RegionTag::ConductingGrain
        } else {
            RegionTag::Insulation
        }
    };
    let mesh = tensor_mesh(&xs, &ys, region, [BoundaryTag::CellBoundary; 4]);
    let (nx, ny) = (xs.len() - 1, ys.len() - 1);
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut pairs = Vec::new();
    for j in 1..ny {
        pairs.push((id(0, j), id(nx, j)));
    }
    for i in 1..nx {
        pairs.push((id(i, 0), id(i, ny)));
    }
    let corners = vec![id(0, 0), id(nx, 0), id(0, ny), id(nx, ny)];
    for &c in &corners[1..] {
        pairs.push((corners[0], c));
    }
    let pairing = PeriodicPairing { master_slave_pairs: pairs, corner_group: corners, period: 1.0 };
    Ok((mesh, pairing))
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidLayout(format!("fraction {f} outside (0,1)")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribute_respects_minimum_and_total() {
        assert_eq!(distribute(&[0.1, 0.8, 0.1], 10).unwrap(), vec![1, 8, 1]);
        assert_eq!(distribute(&[0.1, 0.8, 0.1], 3).unwrap(), vec![1, 1, 1]);
        assert_eq!(distribute(&[1.0, 1.0], 5).unwrap().iter().sum::<usize>(), 5);
        assert!(distribute(&[1.0, 1.0, 1.0], 2).is_err());
    }

    #[test]
    fn grid_lines_hit_breakpoints_exactly() {
        let l = grid_lines(&[0.0, 0.3, 1.0], &[3, 2]);
        assert_eq!(l.len(), 6);
        assert_eq!(l[3], 0.3);
        assert_eq!(l[5], 1.0);
    }

    #[test]
    fn tensor_mesh_is_valid() {
        let m = tensor_mesh(&[0.0, 1.0, 2.0], &[0.0, 1.0], |_, _| RegionTag::Air, QUARTER_SIDES);
        m.validate().unwrap();
        assert_eq!(m.triangle_count(), 4);
        assert_eq!(m.boundary.len(), 6);
        assert!((m.total_area() - 2.0).abs() < 1e-15);
    }
}
