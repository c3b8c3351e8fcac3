//! Alternating least-squares fitting of chain values to a dense target.
//!
//! Every update solves one factor exactly while the others are held fixed.
//! With `L` the product of the factors to the left and `G` the product of
//! those to the right, the unknowns of `R_j` enter `L·R_j·G` linearly and the
//! normal equations read
//!
//! ```text
//! Σ_{(u',v') ∈ mask} (LᵀL)[u,u'] · (GGᵀ)[v',v] · R[u',v'] = (Lᵀ·T·Gᵀ)[u,v]
//! ```
//!
//! for every `(u, v)` in the mask. The coefficient of two unknowns is zero
//! unless their rows share a row of `L` (transitively) and their columns
//! share a column of `G`, so the system splits into independent cells that
//! depend only on the chain's structure. Cells are found once per fit and
//! solved with a small Cholesky each.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::chain::{DeButChain, InitScheme};
use crate::error::{DebutError, Result};

/// Pivot floor, relative to the largest diagonal entry, under which an
/// undamped system counts as singular.
const SINGULAR_PIVOT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_sweeps: usize,
    /// Stop once a sweep lowers the error by less than this fraction.
    pub rel_tol: f64,
    /// Diagonal damping, scaled by the mean diagonal of each cell.
    pub ridge: f64,
    /// Seed of the uniform fan-in warm start.
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_sweeps: 50,
            rel_tol: 1e-8,
            ridge: 1e-10,
            seed: 0,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_sweeps == 0 {
            return Err(DebutError::InvalidOption("max_sweeps must be at least 1".into()));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(DebutError::InvalidOption(format!(
                "ridge must be a finite nonnegative number, got {}",
                self.ridge
            )));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(DebutError::InvalidOption(format!(
                "rel_tol must be nonnegative, got {}",
                self.rel_tol
            )));
        }
        Ok(())
    }
}

/// Relative error after one factor update. The first entry of a trace is the
/// warm start, with `sweep == 0` and no factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub sweep: usize,
    /// 1-based factor index, counted from the right.
    pub factor: Option<usize>,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub trace: Vec<TraceEntry>,
    pub final_error: f64,
    pub sweeps_used: usize,
    /// Whether the sweep loop stopped on `rel_tol` (or an exact fit) rather
    /// than on `max_sweeps`.
    pub converged: bool,
}

impl FitReport {
    /// Every recorded error, warm start first.
    pub fn error_trace(&self) -> Vec<f64> {
        self.trace.iter().map(|e| e.error).collect()
    }

    /// Error at the warm start and at the end of each sweep.
    pub fn sweep_errors(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::with_capacity(self.sweeps_used + 1);
        for (i, e) in self.trace.iter().enumerate() {
            let last_of_sweep = self.trace.get(i + 1).map_or(true, |n| n.sweep != e.sweep);
            if last_of_sweep {
                out.push(e.error);
            }
        }
        out
    }

    /// Largest increase between consecutive trace entries (0 when the trace
    /// never goes up).
    pub fn max_increase(&self) -> f64 {
        self.trace
            .windows(2)
            .map(|w| w[1].error - w[0].error)
            .fold(0.0, f64::max)
    }
}

/// `‖target − expand(c)‖_F / ‖target‖_F`, with `0/0` read as 0 and `x/0` as
/// the absolute error.
pub fn fit_error(chain: &DeButChain, target: &DMatrix<f64>) -> Result<f64> {
    check_target(chain, target)?;
    let residual = (target - chain.expand()).norm();
    let scale = target.norm();
    Ok(if scale == 0.0 { residual } else { residual / scale })
}

/// Fits the values of `structure` (its own values are ignored) to `target`,
/// starting from the uniform fan-in initialization drawn with `opts.seed`.
///
/// ```
/// use debut::{als_fit, DeButChain, FitOptions, InitScheme};
///
/// let structure = DeButChain::from_block_shapes(&[(2, 3), (3, 3)]).unwrap();
/// let truth = structure.random_init(7, InitScheme::UniformFanin);
/// let (fitted, report) = als_fit(&structure, &truth.expand(), &FitOptions::default()).unwrap();
/// assert!(report.final_error < 1e-6);
/// assert_eq!(fitted.signatures(), structure.signatures());
/// ```
pub fn als_fit(
    structure: &DeButChain,
    target: &DMatrix<f64>,
    opts: &FitOptions,
) -> Result<(DeButChain, FitReport)> {
    opts.validate()?;
    check_target(structure, target)?;
    let start = structure.random_init(opts.seed, InitScheme::UniformFanin);
    als_fit_from(&start, target, opts)
}

/// Same as [`als_fit`] but starts from the values already in `initial`.
/// `opts.seed` is unused.
pub fn als_fit_from(
    initial: &DeButChain,
    target: &DMatrix<f64>,
    opts: &FitOptions,
) -> Result<(DeButChain, FitReport)> {
    opts.validate()?;
    check_target(initial, target)?;

    if target.norm() == 0.0 {
        let zero = initial.random_init(0, InitScheme::Zeros);
        let report = FitReport {
            trace: vec![TraceEntry {
                sweep: 0,
                factor: None,
                error: 0.0,
            }],
            final_error: 0.0,
            sweeps_used: 0,
            converged: true,
        };
        return Ok((zero, report));
    }

    let m = initial.len();
    let pattern = initial.random_init(0, InitScheme::Ones);
    let cells: Vec<Vec<Cell>> = (0..m).map(|j| factor_cells(&pattern, j)).collect();
    let order = sweep_order(m);

    let mut chain = initial.clone();
    let mut err = fit_error(&chain, target)?;
    let mut trace = vec![TraceEntry {
        sweep: 0,
        factor: None,
        error: err,
    }];
    let mut sweeps_used = 0;
    let mut converged = false;

    for sweep in 1..=opts.max_sweeps {
        let before = err;
        for &j in &order {
            let values = solve_factor(&chain, j, target, &cells[j], opts.ridge)?;
            chain = chain.with_factor_values(j, values)?;
            err = fit_error(&chain, target)?;
            trace.push(TraceEntry {
                sweep,
                factor: Some(j + 1),
                error: err,
            });
        }
        sweeps_used = sweep;
        if err == 0.0 || before - err <= opts.rel_tol * before {
            converged = true;
            break;
        }
    }

    let report = FitReport {
        trace,
        final_error: err,
        sweeps_used,
        converged,
    };
    Ok((chain, report))
}

fn check_target(chain: &DeButChain, target: &DMatrix<f64>) -> Result<()> {
    let shape = chain.shape();
    if target.shape() != shape {
        return Err(DebutError::shape(
            "fit target",
            format!("{}x{}", shape.0, shape.1),
            format!("{}x{}", target.nrows(), target.ncols()),
        ));
    }
    Ok(())
}

/// Right to left, then back, without repeating the turning factors.
fn sweep_order(m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..m).collect();
    if m > 2 {
        order.extend((1..m - 1).rev());
    }
    order
}

/// One independent block of a factor's normal equations.
#[derive(Debug, Clone)]
struct Cell {
    /// Value indices of the unknowns.
    unknowns: Vec<usize>,
    rows: Vec<usize>,
    cols: Vec<usize>,
    /// Per unknown, its position in `rows` and `cols`.
    local: Vec<(usize, usize)>,
}

fn factor_cells(pattern: &DeButChain, j: usize) -> Vec<Cell> {
    let m = pattern.len();
    let sig = *pattern.factors()[j].signature();

    let mut row_sets = UnionFind::<usize>::new(sig.p());
    if j + 1 < m {
        let left = pattern.expand_range(j + 1, m);
        for a in 0..left.nrows() {
            let mut first = None;
            for u in 0..left.ncols() {
                if left[(a, u)] != 0.0 {
                    match first {
                        None => first = Some(u),
                        Some(f) => {
                            row_sets.union(f, u);
                        }
                    }
                }
            }
        }
    }

    let mut col_sets = UnionFind::<usize>::new(sig.q());
    if j > 0 {
        let right = pattern.expand_range(0, j);
        for b in 0..right.ncols() {
            let mut first = None;
            for v in 0..right.nrows() {
                if right[(v, b)] != 0.0 {
                    match first {
                        None => first = Some(v),
                        Some(f) => {
                            col_sets.union(f, v);
                        }
                    }
                }
            }
        }
    }

    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for u in 0..sig.p() {
        for k in 0..sig.s() {
            let v = sig.column_of(u, k);
            groups
                .entry((row_sets.find(u), col_sets.find(v)))
                .or_default()
                .push(u * sig.s() + k);
        }
    }

    groups
        .into_values()
        .map(|unknowns| {
            let mut rows = Vec::new();
            let mut cols = Vec::new();
            let local = unknowns
                .iter()
                .map(|&idx| {
                    let u = idx / sig.s();
                    let v = sig.column_of(u, idx % sig.s());
                    (position(&mut rows, u), position(&mut cols, v))
                })
                .collect();
            Cell {
                unknowns,
                rows,
                cols,
                local,
            }
        })
        .collect()
}

fn position(list: &mut Vec<usize>, x: usize) -> usize {
    match list.iter().position(|&y| y == x) {
        Some(i) => i,
        None => {
            list.push(x);
            list.len() - 1
        }
    }
}

/// Gram matrix of the selected columns, or the identity block when `m` is an
/// implicit identity.
fn gram(m: Option<&DMatrix<f64>>, idx: &[usize]) -> DMatrix<f64> {
    let n = idx.len();
    match m {
        None => DMatrix::from_fn(n, n, |a, b| if idx[a] == idx[b] { 1.0 } else { 0.0 }),
        Some(m) => {
            let mut g = DMatrix::zeros(n, n);
            for a in 0..n {
                for b in a..n {
                    let d = m.column(idx[a]).dot(&m.column(idx[b]));
                    g[(a, b)] = d;
                    g[(b, a)] = d;
                }
            }
            g
        }
    }
}

fn solve_factor(
    chain: &DeButChain,
    j: usize,
    target: &DMatrix<f64>,
    cells: &[Cell],
    ridge: f64,
) -> Result<Vec<f64>> {
    let m = chain.len();
    let sig = *chain.factors()[j].signature();
    let left = (j + 1 < m).then(|| chain.expand_range(j + 1, m));
    // Stored transposed so each row of G is a contiguous column.
    let right_t = (j > 0).then(|| chain.expand_range(0, j).transpose());
    // W = T·Gᵀ, so the right-hand side is Lᵀ·W.
    let w = match &right_t {
        Some(gt) => target * gt,
        None => target.clone(),
    };

    let mut values = vec![0.0; sig.nnz()];
    for cell in cells {
        let lu = gram(left.as_ref(), &cell.rows);
        let gv = gram(right_t.as_ref(), &cell.cols);
        let n = cell.unknowns.len();
        let a = DMatrix::from_fn(n, n, |x, y| {
            let (ux, vx) = cell.local[x];
            let (uy, vy) = cell.local[y];
            lu[(ux, uy)] * gv[(vx, vy)]
        });
        let b = DVector::from_fn(n, |x, _| {
            let (ul, vl) = cell.local[x];
            let (u, v) = (cell.rows[ul], cell.cols[vl]);
            match &left {
                Some(l) => l.column(u).dot(&w.column(v)),
                None => w[(u, v)],
            }
        });
        let x = solve_cell(a, b, ridge, j + 1)?;
        for (slot, &idx) in x.iter().zip(&cell.unknowns) {
            values[idx] = *slot;
        }
    }
    Ok(values)
}

fn solve_cell(mut a: DMatrix<f64>, b: DVector<f64>, ridge: f64, factor: usize) -> Result<DVector<f64>> {
    let n = a.nrows();
    let max_diag = a.diagonal().max();
    if ridge == 0.0 {
        if max_diag <= 0.0 {
            return Err(DebutError::SingularSystem { factor });
        }
        let chol = a.cholesky().ok_or(DebutError::SingularSystem { factor })?;
        let min_pivot = chol.l_dirty().diagonal().min();
        if min_pivot * min_pivot <= SINGULAR_PIVOT * max_diag {
            return Err(DebutError::SingularSystem { factor });
        }
        return Ok(chol.solve(&b));
    }

    let damping = ridge * a.diagonal().sum() / n as f64;
    for i in 0..n {
        a[(i, i)] += damping;
    }
    if damping > 0.0 {
        if let Some(chol) = a.clone().cholesky() {
            return Ok(chol.solve(&b));
        }
    }
    // Rank-deficient even after damping: minimum-norm solution.
    let eps = f64::EPSILON * n as f64 * max_diag.max(0.0);
    a.svd(true, true)
        .solve(&b, eps)
        .map_err(|_| DebutError::SingularSystem { factor })
}
