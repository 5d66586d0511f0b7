//! Least-squares estimation of the lifted operator pair (A, B) for a FIXED
//! lifting: solves `min ‖[A B]·[G_x; U] − G_y‖_F` row by row through a
//! rank-revealing SVD, picking the minimum-norm solution under rank
//! deficiency.

use std::ops::Range;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::observables::Lifting;
use crate::sampling::TrajectoryDataset;

/// Result of an EDMD fit, with conditioning diagnostics for auditability.
#[derive(Debug, Clone)]
pub struct EdmdFit {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Frobenius norm of `[A B]·[G_x; U] − G_y`.
    pub residual: f64,
    /// Euclidean residual of each of the n+N rows separately.
    pub row_residuals: Vec<f64>,
    pub rank: usize,
    /// Rows of the regressor, n+N+p.
    pub regressor_rows: usize,
    /// Ratio of the largest to the smallest positive singular value.
    pub condition: f64,
    pub rank_deficient: bool,
}

/// Partial fit over a row range (least squares decouples by row).
#[derive(Debug, Clone)]
pub struct RowsFit {
    pub rows: DMatrix<f64>,
    pub residual: f64,
}

struct Assembled {
    /// Regressor `[G_x; U]`, shape (d+p) x M.
    regressor: DMatrix<f64>,
    /// Targets `G_y`, shape d x M.
    targets: DMatrix<f64>,
    d: usize,
    p: usize,
}

fn assemble(dataset: &TrajectoryDataset, lifting: &dyn Lifting) -> Result<Assembled> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset(
            "EDMD needs at least one triplet".to_string(),
        ));
    }
    if lifting.state_dim() != dataset.n {
        return Err(Error::DimensionMismatch {
            context: "lifting state dimension",
            expected: dataset.n,
            found: lifting.state_dim(),
        });
    }
    let d = lifting.lifted_dim();
    let p = dataset.p;
    let m = dataset.len();
    let mut regressor = DMatrix::zeros(d + p, m);
    let mut targets = DMatrix::zeros(d, m);
    for (k, t) in dataset.triplets.iter().enumerate() {
        let gx = lifting.lift(&t.x)?;
        let gy = lifting.lift(&t.y)?;
        for i in 0..d {
            regressor[(i, k)] = gx.values[i];
            targets[(i, k)] = gy.values[i];
        }
        for j in 0..p {
            regressor[(d + j, k)] = t.u[j];
        }
    }
    Ok(Assembled {
        regressor,
        targets,
        d,
        p,
    })
}

struct Solved {
    /// `[A B]` stacked horizontally, shape rows x (d+p).
    coeffs: DMatrix<f64>,
    rank: usize,
    condition: f64,
    residual: f64,
    row_residuals: Vec<f64>,
}

fn solve_rows(asm: &Assembled, rows: Range<usize>) -> Result<Solved> {
    let m = asm.regressor.ncols();
    let dim = asm.regressor.nrows();
    let zt = asm.regressor.transpose(); // M x (d+p)
    let svd = zt.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let cut = smax * (m.max(dim) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|s| **s > cut).count();
    let smin_pos = svd
        .singular_values
        .iter()
        .cloned()
        .filter(|s| *s > cut)
        .fold(f64::INFINITY, f64::min);
    let condition = if rank == 0 { f64::INFINITY } else { smax / smin_pos };

    // Minimum-norm least squares for each requested row of the targets.
    let rhs = asm
        .targets
        .rows(rows.start, rows.len())
        .transpose()
        .into_owned(); // M x rows
    let sol = svd
        .solve(&rhs, cut)
        .map_err(|e| Error::InvalidArgument(format!("SVD solve failed: {e}")))?; // (d+p) x rows
    let coeffs = sol.transpose(); // rows x (d+p)

    let prediction = &coeffs * &asm.regressor;
    let diff = prediction - asm.targets.rows(rows.start, rows.len());
    let residual = diff.norm();
    let row_residuals = (0..rows.len()).map(|i| diff.row(i).norm()).collect();

    Ok(Solved {
        coeffs,
        rank,
        condition,
        residual,
        row_residuals,
    })
}

/// Fits `[A B]` to a dataset under the given lifting.
pub fn fit(dataset: &TrajectoryDataset, lifting: &dyn Lifting) -> Result<EdmdFit> {
    let asm = assemble(dataset, lifting)?;
    let solved = solve_rows(&asm, 0..asm.d)?;
    let a = solved.coeffs.columns(0, asm.d).into_owned();
    let b = solved.coeffs.columns(asm.d, asm.p).into_owned();
    let regressor_rows = asm.d + asm.p;
    Ok(EdmdFit {
        a,
        b,
        residual: solved.residual,
        row_residuals: solved.row_residuals,
        rank: solved.rank,
        regressor_rows,
        condition: solved.condition,
        rank_deficient: solved.rank < regressor_rows,
    })
}

/// Fits only the requested rows of `[A B]`; identical to the corresponding
/// rows of the full fit because least squares decouples row-wise.
pub fn fit_rows(
    dataset: &TrajectoryDataset,
    lifting: &dyn Lifting,
    rows: Range<usize>,
) -> Result<RowsFit> {
    let asm = assemble(dataset, lifting)?;
    if rows.is_empty() {
        return Err(Error::InvalidArgument(
            "row range for a partial fit must be non-empty".to_string(),
        ));
    }
    if rows.end > asm.d {
        return Err(Error::InvalidArgument(format!(
            "row range {}..{} exceeds the lifted dimension {}",
            rows.start, rows.end, asm.d
        )));
    }
    let solved = solve_rows(&asm, rows)?;
    Ok(RowsFit {
        rows: solved.coeffs,
        residual: solved.residual,
    })
}
