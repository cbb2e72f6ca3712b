//! Dense convex quadratic programming by a primal active-set method.
//!
//! Solves
//!
//! ```text
//! minimize   0.5 x' Q x + c' x
//! subject to A x <= b,   A_eq x = b_eq,   lo <= x <= hi
//! ```
//!
//! with `Q` symmetric positive semidefinite.  A zero `Q` turns the problem
//! into a linear program, which the same iteration handles: zero-curvature
//! directions with negative reduced gradient become rays that either hit a
//! blocking constraint or prove unboundedness.
//!
//! Equalities are eliminated up front (minimum-norm particular solution plus
//! a null-space basis), bounds are folded into inequality rows, and the
//! remaining inequality-only problem runs through a feasibility phase (a
//! single-slack LP solved by the same machinery) followed by the active-set
//! iteration.  All tie-breaking picks the lowest constraint index, so a given
//! problem always produces the same iterate sequence.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Tolerance for feasibility checks, relative to the constraint scale.
const FEAS_TOL: f64 = 1e-9;
/// A multiplier below this is treated as negative (constraint leaves).
const MULT_TOL: f64 = 1e-9;
/// Reduced curvature below this counts as flat (LP-like direction).
const CURV_TOL: f64 = 1e-11;
/// Step norms below this count as a stationary subproblem.
const STEP_TOL: f64 = 1e-12;

/// Problem data.  `q` must be symmetric PSD; emptiness encodes absence
/// (no rows = no inequalities, zero-length `b_eq` = no equalities).
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub lower: Option<DVector<f64>>,
    pub upper: Option<DVector<f64>>,
}

impl QpProblem {
    /// Inequality-constrained problem without bounds or equalities.
    pub fn new(q: DMatrix<f64>, c: DVector<f64>, a_ineq: DMatrix<f64>, b_ineq: DVector<f64>) -> Self {
        let n = c.len();
        QpProblem {
            q,
            c,
            a_ineq,
            b_ineq,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            lower: None,
            upper: None,
        }
    }

    /// Linear program: zero quadratic term.
    pub fn lp(c: DVector<f64>, a_ineq: DMatrix<f64>, b_ineq: DVector<f64>) -> Self {
        let n = c.len();
        QpProblem::new(DMatrix::zeros(n, n), c, a_ineq, b_ineq)
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = Some(lower);
        self.upper = Some(upper);
        self
    }

    pub fn with_equalities(mut self, a_eq: DMatrix<f64>, b_eq: DVector<f64>) -> Self {
        self.a_eq = a_eq;
        self.b_eq = b_eq;
        self
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.q * x)[(0, 0)] + self.c.dot(x)
    }
}

/// Solver output.  `active_set` indexes the folded inequality list: the
/// original rows first, then lower bounds, then upper bounds, each in
/// variable order.  `ineq_multipliers` matches that list.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub active_set: Vec<usize>,
    pub ineq_multipliers: DVector<f64>,
    pub iterations: usize,
}

/// Solves the problem; see the module docs for the method.
pub fn solve(problem: &QpProblem) -> Result<QpSolution> {
    let n = problem.c.len();

    // Fold bounds into plain inequality rows.
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for i in 0..problem.a_ineq.nrows() {
        rows.push(problem.a_ineq.row(i).transpose());
        rhs.push(problem.b_ineq[i]);
    }
    if let Some(lo) = &problem.lower {
        for j in 0..n {
            if lo[j].is_finite() {
                let mut r = DVector::zeros(n);
                r[j] = -1.0;
                rows.push(r);
                rhs.push(-lo[j]);
            }
        }
    }
    if let Some(hi) = &problem.upper {
        for j in 0..n {
            if hi[j].is_finite() {
                let mut r = DVector::zeros(n);
                r[j] = 1.0;
                rows.push(r);
                rhs.push(hi[j]);
            }
        }
    }
    let m = rows.len();
    let a = if m > 0 {
        DMatrix::from_rows(&rows.iter().map(|r| r.transpose()).collect::<Vec<_>>())
    } else {
        DMatrix::zeros(0, n)
    };
    let b = DVector::from_vec(rhs);

    // Eliminate equalities: x = x0 + N z.
    let (x0, nb) = if problem.b_eq.len() > 0 {
        let (x0, nb) = eliminate_equalities(&problem.a_eq, &problem.b_eq)?;
        (x0, nb)
    } else {
        (DVector::zeros(n), DMatrix::identity(n, n))
    };
    let nz = nb.ncols();

    let qz = nb.transpose() * &problem.q * &nb;
    let cz = nb.transpose() * (&problem.q * &x0 + &problem.c);
    let az = &a * &nb;
    let bz = &b - &a * &x0;

    let core = solve_inequality_qp(&qz, &cz, &az, &bz, nz)?;

    let x = &x0 + &nb * &core.z;
    let mut mult = DVector::zeros(m);
    for (&idx, &lam) in core.active.iter().zip(core.multipliers.iter()) {
        mult[idx] = lam;
    }
    let mut active_sorted = core.active.clone();
    active_sorted.sort_unstable();

    Ok(QpSolution {
        objective: problem.objective(&x),
        x,
        active_set: active_sorted,
        ineq_multipliers: mult,
        iterations: core.iterations,
    })
}

/// Minimum-norm particular solution and null-space basis of `A_eq x = b_eq`.
fn eliminate_equalities(a_eq: &DMatrix<f64>, b_eq: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = a_eq.ncols();
    let svd = a_eq.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    let smax = svd.singular_values.max();
    let tol = 1e-12 * smax.max(1.0);

    let mut x0 = DVector::zeros(n);
    let utb = u.transpose() * b_eq;
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            x0 += vt.row(k).transpose() * (utb[k] / s);
            rank += 1;
        }
    }
    let residual = (a_eq * &x0 - b_eq).amax();
    if residual > 1e-8 * (1.0 + b_eq.amax()) {
        return Err(Error::QpInfeasible { violation: residual });
    }
    let mut null_cols = Vec::new();
    for k in rank..n.min(vt.nrows()) {
        null_cols.push(vt.row(k).transpose());
    }
    // v_t from a thin SVD may omit the tail of the null space; complete it
    // by orthogonalizing the coordinate basis against the known rows.
    let mut basis: Vec<DVector<f64>> = (0..vt.nrows().min(rank)).map(|k| vt.row(k).transpose()).collect();
    let mut null_basis: Vec<DVector<f64>> = null_cols;
    for v in &null_basis {
        basis.push(v.clone());
    }
    let mut j = 0;
    while basis.len() < n && j < n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        for bvec in &basis {
            let d = bvec.dot(&e);
            e -= bvec * d;
        }
        let norm = e.norm();
        if norm > 1e-8 {
            let e = e / norm;
            basis.push(e.clone());
            null_basis.push(e);
        }
        j += 1;
    }
    let nb = if null_basis.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&null_basis)
    };
    Ok((x0, nb))
}

struct CoreSolution {
    z: DVector<f64>,
    active: Vec<usize>,
    multipliers: Vec<f64>,
    iterations: usize,
}

/// Active-set iteration for `min 0.5 z'Qz + c'z  s.t.  A z <= b`.
fn solve_inequality_qp(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    n: usize,
) -> Result<CoreSolution> {
    let m = a.nrows();
    if n == 0 {
        // Fully determined by equalities; only feasibility can fail.
        let viol = if m > 0 { (-b).amax().max(0.0) } else { 0.0 };
        if viol > FEAS_TOL * (1.0 + b.amax()) {
            return Err(Error::QpInfeasible { violation: viol });
        }
        return Ok(CoreSolution {
            z: DVector::zeros(0),
            active: vec![],
            multipliers: vec![],
            iterations: 0,
        });
    }

    let scale = 1.0 + b.amax().max(c.amax());
    let z0 = find_feasible_point(a, b, n)?;
    let (z, active, multipliers, iterations) =
        active_set_iterate(q, c, a, b, z0, Vec::new(), scale)?;
    Ok(CoreSolution {
        z,
        active,
        multipliers,
        iterations,
    })
}

/// Phase 1: a feasible point for `A z <= b`, or an infeasibility proof.
///
/// Runs `min t  s.t.  A z - t 1 <= b, -t <= 0` from the trivially feasible
/// start `(0, max(violation, 0))` using the same active-set iteration.
fn find_feasible_point(a: &DMatrix<f64>, b: &DVector<f64>, n: usize) -> Result<DVector<f64>> {
    let m = a.nrows();
    if m == 0 {
        return Ok(DVector::zeros(n));
    }
    let worst = (0..m).map(|i| -b[i]).fold(f64::NEG_INFINITY, f64::max);
    if worst <= FEAS_TOL * (1.0 + b.amax()) {
        return Ok(DVector::zeros(n));
    }

    // Augmented problem over (z, t).
    let na = n + 1;
    let mut aa = DMatrix::zeros(m + 1, na);
    let mut ba = DVector::zeros(m + 1);
    for i in 0..m {
        for j in 0..n {
            aa[(i, j)] = a[(i, j)];
        }
        aa[(i, n)] = -1.0;
        ba[i] = b[i];
    }
    aa[(m, n)] = -1.0;
    ba[m] = 0.0;

    let qa = DMatrix::zeros(na, na);
    let mut ca = DVector::zeros(na);
    ca[n] = 1.0;
    let mut z0 = DVector::zeros(na);
    z0[n] = worst * (1.0 + 1e-6) + 1e-6;

    let scale = 1.0 + ba.amax();
    let (zt, _, _, _) = active_set_iterate(&qa, &ca, &aa, &ba, z0, Vec::new(), scale)?;
    let t = zt[n];
    if t > 1e-7 * (1.0 + b.amax()) {
        return Err(Error::QpInfeasible { violation: t });
    }
    Ok(zt.rows(0, n).into_owned())
}

/// The shared primal iteration.  Returns `(z, active, multipliers, iters)`.
fn active_set_iterate(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    mut z: DVector<f64>,
    mut working: Vec<usize>,
    scale: f64,
) -> Result<(DVector<f64>, Vec<usize>, Vec<f64>, usize)> {
    let n = z.len();
    let m = a.nrows();
    let max_iter = 50 * (n + m) + 200;

    for iter in 0..max_iter {
        let grad = q * &z + c;
        let zbasis = null_space_of_rows(a, &working, n);
        let nz = zbasis.ncols();

        // Subproblem step in the working-set null space.
        let mut step: Option<(DVector<f64>, bool)> = None; // (direction, is_full_minimizer)
        if nz > 0 {
            let hr = zbasis.transpose() * q * &zbasis;
            let gr = zbasis.transpose() * &grad;
            let eig = SymmetricEigen::new(hr.clone());
            let lmax = eig.eigenvalues.amax().max(1.0);
            // Flat directions with usable slope become rays.
            let mut ray: Option<DVector<f64>> = None;
            for k in 0..nz {
                if eig.eigenvalues[k] < CURV_TOL * lmax {
                    let comp = eig.eigenvectors.column(k).dot(&gr);
                    if comp.abs() > 1e-10 * scale {
                        let dir = eig.eigenvectors.column(k).into_owned() * (-comp.signum());
                        ray = Some(&zbasis * dir);
                        break;
                    }
                }
            }
            if let Some(d) = ray {
                step = Some((d, false));
            } else {
                // Solve on the positive-curvature subspace.
                let mut pz = DVector::zeros(nz);
                for k in 0..nz {
                    if eig.eigenvalues[k] >= CURV_TOL * lmax {
                        let comp = eig.eigenvectors.column(k).dot(&gr);
                        pz -= eig.eigenvectors.column(k) * (comp / eig.eigenvalues[k]);
                    }
                }
                let p = &zbasis * pz;
                if p.amax() > STEP_TOL * (1.0 + z.amax()) {
                    step = Some((p, true));
                }
            }
        }

        match step {
            None => {
                // Stationary on the working set: check multipliers.
                let lam = working_multipliers(a, &working, &grad);
                let mut drop_idx: Option<usize> = None;
                let mut most_neg = -MULT_TOL * scale;
                for (k, &l) in lam.iter().enumerate() {
                    if l < most_neg {
                        most_neg = l;
                        drop_idx = Some(k);
                    }
                }
                match drop_idx {
                    None => return Ok((z, working, lam, iter)),
                    Some(k) => {
                        working.remove(k);
                    }
                }
            }
            Some((p, is_minimizer)) => {
                // Ratio test against rows outside the working set.
                let cap = if is_minimizer { 1.0 } else { f64::INFINITY };
                let mut alpha = cap;
                let mut blocker: Option<usize> = None;
                for i in 0..m {
                    if working.contains(&i) {
                        continue;
                    }
                    let ad = a.row(i).transpose().dot(&p);
                    if ad > 1e-12 * (1.0 + p.amax()) {
                        let slack = b[i] - a.row(i).transpose().dot(&z);
                        let ratio = (slack / ad).max(0.0);
                        if ratio < alpha - 1e-14 {
                            alpha = ratio;
                            blocker = Some(i);
                        } else if (ratio - alpha).abs() <= 1e-14 {
                            // Lowest index wins ties.
                            if let Some(bi) = blocker {
                                if i < bi {
                                    blocker = Some(i);
                                }
                            }
                        }
                    }
                }
                if !alpha.is_finite() {
                    return Err(Error::QpUnbounded);
                }
                z += &p * alpha;
                if let Some(bi) = blocker {
                    working.push(bi);
                }
            }
        }
    }

    Err(Error::NoConvergence {
        context: "active-set iteration".into(),
        residual: f64::NAN,
        iterations: max_iter,
    })
}

/// Orthonormal basis of the null space of the selected rows of `A`.
fn null_space_of_rows(a: &DMatrix<f64>, working: &[usize], n: usize) -> DMatrix<f64> {
    if working.is_empty() {
        return DMatrix::identity(n, n);
    }
    let rows: Vec<_> = working.iter().map(|&i| a.row(i)).collect();
    let aw = DMatrix::from_rows(&rows);
    let svd = aw.svd(false, true);
    let vt = svd.v_t.expect("svd with v_t");
    let smax = svd.singular_values.max().max(1.0);
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > 1e-12 * smax)
        .count();
    // Orthogonal complement of the row space.
    let mut basis: Vec<DVector<f64>> = (0..rank).map(|k| vt.row(k).transpose()).collect();
    let mut null_cols: Vec<DVector<f64>> = (rank..vt.nrows()).map(|k| vt.row(k).transpose()).collect();
    for v in &null_cols {
        basis.push(v.clone());
    }
    let mut j = 0;
    while basis.len() < n && j < n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        for bvec in &basis {
            let d = bvec.dot(&e);
            e -= bvec * d;
        }
        let norm = e.norm();
        if norm > 1e-8 {
            let e = e / norm;
            basis.push(e.clone());
            null_cols.push(e);
        }
        j += 1;
    }
    if null_cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&null_cols)
    }
}

/// Least-squares multipliers for the working rows from stationarity
/// `Q z + c + A_W' lambda = 0`.
fn working_multipliers(a: &DMatrix<f64>, working: &[usize], grad: &DVector<f64>) -> Vec<f64> {
    if working.is_empty() {
        return vec![];
    }
    let rows: Vec<_> = working.iter().map(|&i| a.row(i)).collect();
    let aw = DMatrix::from_rows(&rows);
    let awt = aw.transpose();
    let svd = awt.svd(true, true);
    let lam = svd.solve(&(-grad), 1e-12).expect("least-squares multipliers");
    lam.iter().copied().collect()
}
