//! Projection of a raw gradient onto zero-element constraint hyperplanes.
//!
//! A structural constraint fixes selected gain entries to zero and is
//! written as `G D H = 0` with selector matrices `G` (rows pick input
//! channels) and `H` (columns pick states). A single constraint projects in
//! closed form; several constraints couple through their Lagrange
//! multipliers, which this module solves as one dense linear system. For
//! plain elementwise patterns the projection collapses to masking the
//! constrained entries, kept here as the fast path with tested equivalence.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Set of (row, column) gain entries required to be zero. Indices are
/// zero-based and deduplicated.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ZeroPattern {
    entries: BTreeSet<(usize, usize)>,
}

impl ZeroPattern {
    pub fn new(entries: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        Ok(Self { entries: entries.into_iter().collect() })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.entries.contains(&(row, col))
    }

    /// Iterate entries in deterministic (row, col) order.
    pub fn entries(&self) -> impl Iterator<Item = &(usize, usize)> {
        self.entries.iter()
    }

    /// Check every index against a gain shape.
    pub fn validate_for(&self, input_dim: usize, state_dim: usize) -> Result<()> {
        for &(row, col) in &self.entries {
            if row >= input_dim || col >= state_dim {
                return Err(Error::InvalidArgument(format!(
                    "pattern entry ({row}, {col}) outside a {input_dim}x{state_dim} gain"
                )));
            }
        }
        Ok(())
    }
}

/// One linear constraint `G D H = 0` on an input-by-state matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorConstraint {
    g_matrix: DMatrix<f64>,
    h_matrix: DMatrix<f64>,
}

impl SelectorConstraint {
    /// `g_matrix` is p x m with full row rank, `h_matrix` is n x q with full
    /// column rank, so that `G G^T` and `H^T H` are invertible.
    pub fn new(g_matrix: DMatrix<f64>, h_matrix: DMatrix<f64>) -> Result<Self> {
        if g_matrix.nrows() == 0 || g_matrix.ncols() == 0 {
            return Err(Error::DimensionMismatch("selector G must be nonempty".into()));
        }
        if h_matrix.nrows() == 0 || h_matrix.ncols() == 0 {
            return Err(Error::DimensionMismatch("selector H must be nonempty".into()));
        }
        Ok(Self { g_matrix, h_matrix })
    }

    /// Constraint pinning the single entry (row, col) of an m x n matrix.
    pub fn element(row: usize, col: usize, input_dim: usize, state_dim: usize) -> Result<Self> {
        if row >= input_dim || col >= state_dim {
            return Err(Error::InvalidArgument(format!(
                "element selector ({row}, {col}) outside {input_dim}x{state_dim}"
            )));
        }
        let mut g = DMatrix::zeros(1, input_dim);
        g[(0, row)] = 1.0;
        let mut h = DMatrix::zeros(state_dim, 1);
        h[(col, 0)] = 1.0;
        Self::new(g, h)
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g_matrix
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h_matrix
    }

    /// Residual `G D H` of a candidate direction.
    pub fn residual(&self, d: &DMatrix<f64>) -> DMatrix<f64> {
        &self.g_matrix * d * &self.h_matrix
    }
}

/// Expand an elementwise pattern into one selector constraint per entry.
pub fn pattern_to_selectors(
    pattern: &ZeroPattern,
    input_dim: usize,
    state_dim: usize,
) -> Result<Vec<SelectorConstraint>> {
    pattern.validate_for(input_dim, state_dim)?;
    pattern
        .entries()
        .map(|&(row, col)| SelectorConstraint::element(row, col, input_dim, state_dim))
        .collect()
}

/// Project a gradient onto a single constraint hyperplane `G D H = 0`:
/// `D = g - G^T (G G^T)^{-1} G g H (H^T H)^{-1} H^T`.
pub fn project_single(grad: &DMatrix<f64>, c: &SelectorConstraint) -> Result<DMatrix<f64>> {
    check_selector_shape(grad, c, 0)?;
    let ggt = c.g() * c.g().transpose();
    let hth = c.h().transpose() * c.h();
    let ggt_lu = ggt.lu();
    let hth_lu = hth.lu();
    let left = ggt_lu
        .solve(&(c.g() * grad * c.h()))
        .ok_or_else(|| Error::SingularSystem("G G^T is singular".into()))?;
    let lambda = hth_lu
        .solve(&left.transpose())
        .ok_or_else(|| Error::SingularSystem("H^T H is singular".into()))?
        .transpose();
    Ok(grad - c.g().transpose() * lambda * c.h().transpose())
}

/// Project a gradient onto the intersection of several constraint
/// hyperplanes `G_i D H_i = 0`.
///
/// The multipliers solve the coupled equations
/// `G_l g H_l = sum_i G_l G_i^T Lambda_i H_i^T H_l` for every `l`; they are
/// flattened into one dense system and solved directly, which is robust for
/// the small constraint counts that gain structures produce.
pub fn project_multi(
    grad: &DMatrix<f64>,
    constraints: &[SelectorConstraint],
) -> Result<DMatrix<f64>> {
    if constraints.is_empty() {
        return Ok(grad.clone());
    }
    for (idx, c) in constraints.iter().enumerate() {
        check_selector_shape(grad, c, idx)?;
    }

    let sizes: Vec<usize> = constraints
        .iter()
        .map(|c| c.g().nrows() * c.h().ncols())
        .collect();
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, &s| {
            let off = *acc;
            *acc += s;
            Some(off)
        })
        .collect();
    let total: usize = sizes.iter().sum();

    let mut system = DMatrix::zeros(total, total);
    let mut rhs = DVector::zeros(total);

    for (l, cl) in constraints.iter().enumerate() {
        let rhs_block = cl.g() * grad * cl.h();
        for (r, &value) in rhs_block.iter().enumerate() {
            rhs[offsets[l] + r] = value;
        }
        for (i, ci) in constraints.iter().enumerate() {
            // vec(G_l G_i^T Lambda_i H_i^T H_l) =
            //   (H_l^T H_i kron G_l G_i^T) vec(Lambda_i)
            let ggt = cl.g() * ci.g().transpose();
            let hth = cl.h().transpose() * ci.h();
            let block = hth.kronecker(&ggt);
            system
                .view_mut((offsets[l], offsets[i]), (sizes[l], sizes[i]))
                .copy_from(&block);
        }
    }

    let solution = system.lu().solve(&rhs).ok_or_else(|| {
        let pair = find_duplicate_pair(constraints);
        match pair {
            Some((i, j)) => Error::SingularSystem(format!(
                "multiplier system is singular: constraints {i} and {j} are identical"
            )),
            None => Error::SingularSystem(format!(
                "multiplier system for {} constraints is singular",
                constraints.len()
            )),
        }
    })?;

    let mut projected = grad.clone();
    for (i, c) in constraints.iter().enumerate() {
        let rows = c.g().nrows();
        let cols = c.h().ncols();
        let lambda = DMatrix::from_column_slice(
            rows,
            cols,
            &solution.as_slice()[offsets[i]..offsets[i] + sizes[i]],
        );
        projected -= c.g().transpose() * lambda * c.h().transpose();
    }
    Ok(projected)
}

/// Zero out exactly the patterned entries of a gradient.
///
/// For elementwise patterns this equals the multi-constraint projection;
/// the equivalence is a tested property, not an assumption.
pub fn entrywise_mask(grad: &DMatrix<f64>, pattern: &ZeroPattern) -> Result<DMatrix<f64>> {
    pattern.validate_for(grad.nrows(), grad.ncols())?;
    let mut masked = grad.clone();
    for &(row, col) in pattern.entries() {
        masked[(row, col)] = 0.0;
    }
    Ok(masked)
}

fn check_selector_shape(
    grad: &DMatrix<f64>,
    c: &SelectorConstraint,
    index: usize,
) -> Result<()> {
    if c.g().ncols() != grad.nrows() || c.h().nrows() != grad.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "constraint {index}: G is {}x{} and H is {}x{}, gradient is {}x{}",
            c.g().nrows(),
            c.g().ncols(),
            c.h().nrows(),
            c.h().ncols(),
            grad.nrows(),
            grad.ncols()
        )));
    }
    Ok(())
}

fn find_duplicate_pair(constraints: &[SelectorConstraint]) -> Option<(usize, usize)> {
    for i in 0..constraints.len() {
        for j in i + 1..constraints.len() {
            if constraints[i] == constraints[j] {
                return Some((i, j));
            }
        }
    }
    None
}
