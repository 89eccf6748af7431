//! Domains, their uniform lattice discretizations, and the inradius.
//!
//! Lattice nodes carry a [`NodeKind`]. Every node that is not `Interior` is
//! pinned to zero by grid functions, so the boundary index set of a [`Grid`]
//! is the complement of the interior set.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Relative tolerance for "h divides the side length".
const SIDE_TOL: f64 = 1e-12;

/// Cell-wise boolean description of a planar domain.
///
/// Cells are stored row-major with row 0 at the bottom (smallest y). The
/// domain is the union of the closed `true` cells, placed with its lower-left
/// corner at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    cells: Vec<bool>,
    cell_size: f64,
}

impl Mask {
    pub fn new(width: usize, height: usize, cells: Vec<bool>, cell_size: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidDomain("mask must have at least one cell".into()));
        }
        if cells.len() != width * height {
            return Err(Error::InvalidDomain(format!(
                "mask has {} cells, expected {}x{}",
                cells.len(),
                width,
                height
            )));
        }
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(Error::InvalidDomain(format!(
                "mask cell size must be positive, got {cell_size}"
            )));
        }
        let mask = Self {
            width,
            height,
            cells,
            cell_size,
        };
        if !mask.cells.iter().any(|&c| c) {
            return Err(Error::InvalidDomain("mask has no interior cell".into()));
        }
        if !mask.is_connected() {
            return Err(Error::DisconnectedMask);
        }
        Ok(mask)
    }

    /// Parses the text format: a header line `W H h`, then `H` rows of `W`
    /// characters, `#` for interior and `.` for exterior. The first row is
    /// the top of the domain.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty mask file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse(format!(
                "mask header must be `W H h`, got `{header}`"
            )));
        }
        let parse_count = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::Parse(format!("bad mask dimension `{s}`: {e}")))
        };
        let width = parse_count(fields[0])?;
        let height = parse_count(fields[1])?;
        let cell_size: f64 = fields[2]
            .parse()
            .map_err(|e| Error::Parse(format!("bad mask cell size `{}`: {e}", fields[2])))?;

        let rows: Vec<&str> = lines.map(str::trim_end).collect();
        if rows.len() != height {
            return Err(Error::Parse(format!(
                "mask declares {height} rows but has {}",
                rows.len()
            )));
        }
        let mut cells = vec![false; width * height];
        for (r, row) in rows.iter().enumerate() {
            let chars: Vec<char> = row.chars().collect();
            if chars.len() != width {
                return Err(Error::Parse(format!(
                    "mask row {} has {} characters, expected {width}",
                    r + 1,
                    chars.len()
                )));
            }
            let j = height - 1 - r;
            for (i, ch) in chars.into_iter().enumerate() {
                cells[j * width + i] = match ch {
                    '#' => true,
                    '.' => false,
                    other => {
                        return Err(Error::Parse(format!(
                            "unexpected character `{other}` in mask row {}",
                            r + 1
                        )))
                    }
                };
            }
        }
        Self::new(width, height, cells, cell_size)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    /// Whether cell `(i, j)` (column `i`, row `j` from the bottom) is interior.
    pub fn is_set(&self, i: usize, j: usize) -> bool {
        self.cells[j * self.width + i]
    }

    fn is_connected(&self) -> bool {
        let start = match self.cells.iter().position(|&c| c) {
            Some(s) => s,
            None => return false,
        };
        let mut seen = vec![false; self.cells.len()];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let mut count = 0;
        while let Some(idx) = queue.pop_front() {
            count += 1;
            let (i, j) = (idx % self.width, idx / self.width);
            let mut push = |ni: usize, nj: usize| {
                let nidx = nj * self.width + ni;
                if self.cells[nidx] && !seen[nidx] {
                    seen[nidx] = true;
                    queue.push_back(nidx);
                }
            };
            if i > 0 {
                push(i - 1, j);
            }
            if i + 1 < self.width {
                push(i + 1, j);
            }
            if j > 0 {
                push(i, j - 1);
            }
            if j + 1 < self.height {
                push(i, j + 1);
            }
        }
        count == self.cells.iter().filter(|&&c| c).count()
    }
}

impl fmt::Display for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} {} {}", self.width, self.height, self.cell_size)?;
        for j in (0..self.height).rev() {
            for i in 0..self.width {
                f.write_str(if self.is_set(i, j) { "#" } else { "." })?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Geometric description of the domain.
#[derive(Debug, Clone, PartialEq)]
pub enum DomainSpec {
    Interval { a: f64, b: f64 },
    Rectangle { ax: f64, bx: f64, ay: f64, by: f64 },
    Mask(Mask),
}

impl DomainSpec {
    pub fn interval(a: f64, b: f64) -> Result<Self> {
        let spec = DomainSpec::Interval { a, b };
        spec.validate()?;
        Ok(spec)
    }

    pub fn rectangle(ax: f64, bx: f64, ay: f64, by: f64) -> Result<Self> {
        let spec = DomainSpec::Rectangle { ax, bx, ay, by };
        spec.validate()?;
        Ok(spec)
    }

    pub fn unit_interval() -> Self {
        DomainSpec::Interval { a: 0.0, b: 1.0 }
    }

    pub fn unit_square() -> Self {
        DomainSpec::Rectangle {
            ax: 0.0,
            bx: 1.0,
            ay: 0.0,
            by: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo < hi;
        match self {
            DomainSpec::Interval { a, b } if !ordered(*a, *b) => Err(Error::InvalidDomain(
                format!("interval needs a < b, got ({a}, {b})"),
            )),
            DomainSpec::Rectangle { ax, bx, ay, by } if !ordered(*ax, *bx) || !ordered(*ay, *by) => {
                Err(Error::InvalidDomain(format!(
                    "rectangle needs ax < bx and ay < by, got ({ax}, {bx}) x ({ay}, {by})"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DomainSpec::Interval { .. } => 1,
            _ => 2,
        }
    }

    /// The image of the domain under `x -> c x`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "scale factor must be positive, got {c}"
            )));
        }
        Ok(match self {
            DomainSpec::Interval { a, b } => DomainSpec::Interval { a: c * a, b: c * b },
            DomainSpec::Rectangle { ax, bx, ay, by } => DomainSpec::Rectangle {
                ax: c * ax,
                bx: c * bx,
                ay: c * ay,
                by: c * by,
            },
            DomainSpec::Mask(m) => DomainSpec::Mask(Mask {
                cell_size: c * m.cell_size,
                ..m.clone()
            }),
        })
    }

    /// Lower-left and upper-right corners of the bounding box (y = 0 in 1D).
    pub fn bounding_box(&self) -> ([f64; 2], [f64; 2]) {
        match self {
            DomainSpec::Interval { a, b } => ([*a, 0.0], [*b, 0.0]),
            DomainSpec::Rectangle { ax, bx, ay, by } => ([*ax, *ay], [*bx, *by]),
            DomainSpec::Mask(m) => (
                [0.0, 0.0],
                [m.width as f64 * m.cell_size, m.height as f64 * m.cell_size],
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Interior,
    /// On the boundary of the domain.
    Boundary,
    /// Outside the closed domain (masks only).
    Exterior,
}

/// One lattice cell, addressed by the nodes its forward differences use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub base: usize,
    pub east: usize,
    /// `None` in 1D.
    pub north: Option<usize>,
}

/// Uniform lattice over the bounding box of a domain.
#[derive(Debug, Clone)]
pub struct Grid {
    dim: usize,
    h: f64,
    origin: [f64; 2],
    nx: usize,
    ny: usize,
    kinds: Vec<NodeKind>,
    interior: Vec<usize>,
    boundary: Vec<usize>,
    slot: Vec<Option<usize>>,
}

impl Grid {
    fn from_kinds(dim: usize, h: f64, origin: [f64; 2], nx: usize, ny: usize, kinds: Vec<NodeKind>) -> Self {
        let mut interior = Vec::new();
        let mut boundary = Vec::new();
        let mut slot = vec![None; kinds.len()];
        for (node, kind) in kinds.iter().enumerate() {
            if *kind == NodeKind::Interior {
                slot[node] = Some(interior.len());
                interior.push(node);
            } else {
                boundary.push(node);
            }
        }
        Self {
            dim,
            h,
            origin,
            nx,
            ny,
            kinds,
            interior,
            boundary,
            slot,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    /// Node counts along x and y (`ny == 1` in 1D).
    pub fn node_counts(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn num_nodes(&self) -> usize {
        self.kinds.len()
    }

    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    /// All nodes whose value is pinned to zero.
    pub fn boundary(&self) -> &[usize] {
        &self.boundary
    }

    pub fn num_interior(&self) -> usize {
        self.interior.len()
    }

    pub fn kind(&self, node: usize) -> NodeKind {
        self.kinds[node]
    }

    pub fn is_interior(&self, node: usize) -> bool {
        self.kinds[node] == NodeKind::Interior
    }

    /// Position of `node` in [`Grid::interior`], if it is interior.
    pub fn interior_slot(&self, node: usize) -> Option<usize> {
        self.slot[node]
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn node_ij(&self, node: usize) -> (usize, usize) {
        (node % self.nx, node / self.nx)
    }

    pub fn coords(&self, node: usize) -> [f64; 2] {
        let (i, j) = self.node_ij(node);
        let y = if self.dim == 1 {
            0.0
        } else {
            self.origin[1] + j as f64 * self.h
        };
        [self.origin[0] + i as f64 * self.h, y]
    }

    /// `h^dim`, the quadrature weight of a node or a cell.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    pub fn num_cells(&self) -> usize {
        if self.dim == 1 {
            self.nx - 1
        } else {
            (self.nx - 1) * (self.ny - 1)
        }
    }

    pub fn cell(&self, index: usize) -> Cell {
        if self.dim == 1 {
            Cell {
                base: index,
                east: index + 1,
                north: None,
            }
        } else {
            let (i, j) = (index % (self.nx - 1), index / (self.nx - 1));
            let base = self.node_index(i, j);
            Cell {
                base,
                east: base + 1,
                north: Some(base + self.nx),
            }
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + Clone + '_ {
        (0..self.num_cells()).map(move |c| self.cell(c))
    }

    /// Whether `node` lies in the closed domain.
    pub fn in_closure(&self, node: usize) -> bool {
        self.kinds[node] != NodeKind::Exterior
    }
}

/// Builds the lattice for `spec` at resolution `n`.
///
/// An interval gets `n` interior nodes. Rectangles and masks get spacing
/// chosen so that the shorter side spans `n` cells; for masks `n` must be a
/// multiple of the shorter mask dimension so that mask cells align with the
/// lattice.
pub fn build_grid(spec: &DomainSpec, n: usize) -> Result<Grid> {
    if n < 3 {
        return Err(Error::InvalidResolution(format!("n must be at least 3, got {n}")));
    }
    spec.validate()?;
    match spec {
        DomainSpec::Interval { a, b } => {
            let nx = n + 2;
            let h = (b - a) / (n + 1) as f64;
            let mut kinds = vec![NodeKind::Interior; nx];
            kinds[0] = NodeKind::Boundary;
            kinds[nx - 1] = NodeKind::Boundary;
            Ok(Grid::from_kinds(1, h, [*a, 0.0], nx, 1, kinds))
        }
        DomainSpec::Rectangle { ax, bx, ay, by } => {
            let (w, ht) = (bx - ax, by - ay);
            let h = w.min(ht) / n as f64;
            let cx = cells_along(w, h)?;
            let cy = cells_along(ht, h)?;
            let (nx, ny) = (cx + 1, cy + 1);
            let mut kinds = vec![NodeKind::Boundary; nx * ny];
            for j in 1..ny - 1 {
                for i in 1..nx - 1 {
                    kinds[j * nx + i] = NodeKind::Interior;
                }
            }
            Ok(Grid::from_kinds(2, h, [*ax, *ay], nx, ny, kinds))
        }
        DomainSpec::Mask(mask) => {
            let short = mask.width.min(mask.height);
            if n % short != 0 {
                return Err(Error::InvalidResolution(format!(
                    "n = {n} is not a multiple of the shorter mask dimension {short}"
                )));
            }
            let k = n / short;
            let h = mask.cell_size / k as f64;
            let (cx, cy) = (mask.width * k, mask.height * k);
            let (nx, ny) = (cx + 1, cy + 1);
            let inside = |ci: isize, cj: isize| {
                ci >= 0
                    && cj >= 0
                    && (ci as usize) < cx
                    && (cj as usize) < cy
                    && mask.is_set(ci as usize / k, cj as usize / k)
            };
            let mut kinds = vec![NodeKind::Exterior; nx * ny];
            for j in 0..ny {
                for i in 0..nx {
                    let (ii, jj) = (i as isize, j as isize);
                    let touching = [
                        inside(ii - 1, jj - 1),
                        inside(ii, jj - 1),
                        inside(ii - 1, jj),
                        inside(ii, jj),
                    ];
                    kinds[j * nx + i] = if touching.iter().all(|&t| t) {
                        NodeKind::Interior
                    } else if touching.iter().any(|&t| t) {
                        NodeKind::Boundary
                    } else {
                        NodeKind::Exterior
                    };
                }
            }
            let grid = Grid::from_kinds(2, h, [0.0, 0.0], nx, ny, kinds);
            if grid.interior.is_empty() {
                return Err(Error::InvalidResolution(format!(
                    "mask at n = {n} has no interior lattice node"
                )));
            }
            Ok(grid)
        }
    }
}

fn cells_along(length: f64, h: f64) -> Result<usize> {
    let ratio = length / h;
    let cells = ratio.round();
    if (ratio - cells).abs() > SIDE_TOL * ratio {
        return Err(Error::InvalidResolution(format!(
            "spacing {h} does not divide side length {length}"
        )));
    }
    Ok(cells as usize)
}

/// A domain together with its lattice.
#[derive(Debug, Clone)]
pub struct Domain {
    spec: DomainSpec,
    grid: Arc<Grid>,
}

impl Domain {
    pub fn new(spec: DomainSpec, n: usize) -> Result<Self> {
        let grid = Arc::new(build_grid(&spec, n)?);
        Ok(Self { spec, grid })
    }

    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn inradius(&self) -> f64 {
        inradius(&self.spec, &self.grid)
    }
}

/// Radius of the largest ball inside the domain.
///
/// Exact for intervals and rectangles. For masks this is the largest
/// Euclidean distance from an interior node to the nearest non-interior node,
/// which lies within `h` of the true value.
pub fn inradius(spec: &DomainSpec, grid: &Grid) -> f64 {
    match spec {
        DomainSpec::Interval { a, b } => 0.5 * (b - a),
        DomainSpec::Rectangle { ax, bx, ay, by } => 0.5 * (bx - ax).min(by - ay),
        DomainSpec::Mask(_) => distance_to_boundary(grid)
            .into_iter()
            .fold(0.0, f64::max),
    }
}

/// Euclidean distance from every node to the nearest non-interior node.
pub fn distance_to_boundary(grid: &Grid) -> Vec<f64> {
    let (nx, ny) = grid.node_counts();
    let features: Vec<bool> = (0..grid.num_nodes()).map(|n| !grid.is_interior(n)).collect();
    squared_distance_transform(&features, nx, ny)
        .into_iter()
        .map(|d2| d2.sqrt() * grid.spacing())
        .collect()
}

/// Exact squared Euclidean distance transform (in lattice units) of a binary
/// feature image, by separable lower envelopes of parabolas: one pass along
/// rows, then one along columns.
pub fn squared_distance_transform(features: &[bool], nx: usize, ny: usize) -> Vec<f64> {
    assert_eq!(features.len(), nx * ny);
    let mut grid: Vec<f64> = features
        .iter()
        .map(|&f| if f { 0.0 } else { f64::INFINITY })
        .collect();
    let mut line = vec![0.0; nx.max(ny)];
    let mut out = vec![0.0; nx.max(ny)];

    for j in 0..ny {
        line[..nx].copy_from_slice(&grid[j * nx..(j + 1) * nx]);
        lower_envelope(&line[..nx], &mut out[..nx]);
        grid[j * nx..(j + 1) * nx].copy_from_slice(&out[..nx]);
    }
    for i in 0..nx {
        for j in 0..ny {
            line[j] = grid[j * nx + i];
        }
        lower_envelope(&line[..ny], &mut out[..ny]);
        for j in 0..ny {
            grid[j * nx + i] = out[j];
        }
    }
    grid
}

/// `d[q] = min_v (q - v)^2 + f[v]` over finite `f[v]`.
fn lower_envelope(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut vertices: Vec<usize> = Vec::with_capacity(n);
    // boundaries[k] is where parabola k starts to be the minimum
    let mut boundaries: Vec<f64> = Vec::with_capacity(n);

    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        let mut start = f64::NEG_INFINITY;
        while let Some(&v) = vertices.last() {
            let fv = f[v] + (v * v) as f64;
            let s = (fq - fv) / (2.0 * (q as f64 - v as f64));
            if s <= *boundaries.last().unwrap() {
                vertices.pop();
                boundaries.pop();
            } else {
                start = s;
                break;
            }
        }
        vertices.push(q);
        boundaries.push(start);
    }

    if vertices.is_empty() {
        d.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, slot) in d.iter_mut().enumerate() {
        while k + 1 < vertices.len() && boundaries[k + 1] < q as f64 {
            k += 1;
        }
        let v = vertices[k];
        let dq = q as f64 - v as f64;
        *slot = dq * dq + f[v];
    }
}
