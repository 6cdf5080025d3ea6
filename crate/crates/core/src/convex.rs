//! Small self-contained convex subsolvers shared by the planners: an
//! equality-and-box constrained QP solver based on operator splitting, and
//! the projections used by the attention subproblem.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConvexError {
    #[error("P is not symmetric positive semidefinite")]
    NotPsd,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("H^T has deficient column rank; polytope faces do not span")]
    RankDeficient,
}

/// `min 0.5 x^T P x + q^T x  s.t.  Aeq x = beq, lower <= x <= upper`.
///
/// `P` must be symmetric PSD. Entries of `lower`/`upper` may be infinite.
#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QuadraticProgram {
    /// Unconstrained-box program with the given objective and equalities.
    pub fn new(p: DMatrix<f64>, q: DVector<f64>, a_eq: DMatrix<f64>, b_eq: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            p,
            q,
            a_eq,
            b_eq,
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    fn validate(&self) -> Result<(), ConvexError> {
        let n = self.num_vars();
        if self.p.nrows() != n || self.p.ncols() != n {
            return Err(ConvexError::DimensionMismatch(format!(
                "P is {}x{}, expected {n}x{n}",
                self.p.nrows(),
                self.p.ncols()
            )));
        }
        if self.a_eq.ncols() != n && self.a_eq.nrows() > 0 {
            return Err(ConvexError::DimensionMismatch(format!(
                "Aeq has {} columns, expected {n}",
                self.a_eq.ncols()
            )));
        }
        if self.a_eq.nrows() != self.b_eq.len() {
            return Err(ConvexError::DimensionMismatch(format!(
                "Aeq has {} rows but beq has {}",
                self.a_eq.nrows(),
                self.b_eq.len()
            )));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(ConvexError::DimensionMismatch(
                "bound vectors must match variable count".into(),
            ));
        }
        // Symmetry within 1e-10, then PSD via a shifted Cholesky probe.
        let scale = self.p.amax().max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if (self.p[(i, j)] - self.p[(j, i)]).abs() > 1e-10 * scale {
                    return Err(ConvexError::NotPsd);
                }
            }
        }
        let shift = 1e-9 * scale;
        let mut probe = self.p.clone();
        for i in 0..n {
            probe[(i, i)] += shift;
        }
        if probe.cholesky().is_none() {
            return Err(ConvexError::NotPsd);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub solution: DVector<f64>,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub status: SolveStatus,
}

/// Warm-start data carried between related solves (previous solution plus
/// the splitting state).
#[derive(Debug, Clone, Default)]
pub struct QpWarmStart {
    pub z: Option<DVector<f64>>,
    pub w: Option<DVector<f64>>,
}

pub fn solve_qp(
    qp: &QuadraticProgram,
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport, ConvexError> {
    solve_qp_warm(qp, tol, max_iter, &QpWarmStart::default())
}

/// Operator-splitting iteration: alternate an equality-constrained linear
/// solve on the objective with clipping into the box, plus a scaled dual
/// update. The KKT system is factored once per call.
pub fn solve_qp_warm(
    qp: &QuadraticProgram,
    tol: f64,
    max_iter: usize,
    warm: &QpWarmStart,
) -> Result<SolveReport, ConvexError> {
    qp.validate()?;
    let n = qp.num_vars();
    let m = qp.a_eq.nrows();

    for i in 0..n {
        if qp.lower[i] > qp.upper[i] {
            return Ok(SolveReport {
                solution: DVector::zeros(n),
                primal_residual: f64::INFINITY,
                dual_residual: f64::INFINITY,
                iterations: 0,
                status: SolveStatus::Infeasible,
            });
        }
    }
    if m > 0 {
        // Inconsistent equality system: least-squares residual check.
        let svd = qp.a_eq.clone().svd(true, true);
        if let Ok(ls) = svd.solve(&qp.b_eq, 1e-12) {
            let resid = (&qp.a_eq * &ls - &qp.b_eq).amax();
            if resid > 1e-8 * (1.0 + qp.b_eq.amax()) {
                return Ok(SolveReport {
                    solution: DVector::zeros(n),
                    primal_residual: resid,
                    dual_residual: f64::INFINITY,
                    iterations: 0,
                    status: SolveStatus::Infeasible,
                });
            }
        }
    }

    let dim = n + m;
    let factor = |sigma: f64| -> nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn> {
        let mut kkt = DMatrix::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                kkt[(i, j)] = qp.p[(i, j)];
            }
            kkt[(i, i)] += sigma;
        }
        for r in 0..m {
            for c in 0..n {
                kkt[(n + r, c)] = qp.a_eq[(r, c)];
                kkt[(c, n + r)] = qp.a_eq[(r, c)];
            }
        }
        kkt.lu()
    };

    let mut sigma = 1.0;
    let mut lu = factor(sigma);

    let clip = |v: &DVector<f64>| -> DVector<f64> {
        DVector::from_fn(n, |i, _| v[i].clamp(qp.lower[i], qp.upper[i]))
    };

    let mut z = warm
        .z
        .clone()
        .filter(|v| v.len() == n)
        .map(|v| clip(&v))
        .unwrap_or_else(|| clip(&DVector::zeros(n)));
    let mut w = warm
        .w
        .clone()
        .filter(|v| v.len() == n)
        .unwrap_or_else(|| DVector::zeros(n));

    // Over-relaxation speeds up the splitting; the penalty sigma is
    // rebalanced whenever the primal and dual residuals drift apart, which
    // also breaks the stall where the box-violation direction lies in the
    // row space of Aeq and the x-update stops feeding back.
    let relax = 1.6;
    let mut rhs = DVector::zeros(dim);
    let mut primal = f64::INFINITY;
    let mut dual = f64::INFINITY;
    let mut iterations = 0;
    for iter in 1..=max_iter {
        iterations = iter;
        for i in 0..n {
            rhs[i] = sigma * (z[i] - w[i]) - qp.q[i];
        }
        for r in 0..m {
            rhs[n + r] = qp.b_eq[r];
        }
        let sol = match lu.solve(&rhs) {
            Some(s) => s,
            None => {
                return Err(ConvexError::DimensionMismatch(
                    "singular KKT system (dependent equality rows?)".into(),
                ))
            }
        };
        let x = sol.rows(0, n).into_owned();
        let x_relaxed = &x * relax + &z * (1.0 - relax);
        let z_prev = z.clone();
        z = clip(&(&x_relaxed + &w));
        w += &x_relaxed - &z;

        primal = (&x - &z).amax();
        if m > 0 {
            primal = primal.max((&qp.a_eq * &z - &qp.b_eq).amax());
        }
        dual = sigma * (&z - &z_prev).amax();
        if primal <= tol && dual <= tol {
            return Ok(SolveReport {
                solution: z,
                primal_residual: primal,
                dual_residual: dual,
                iterations,
                status: SolveStatus::Optimal,
            });
        }
        if iter % 100 == 0 {
            if primal > 10.0 * dual && sigma < 1e7 {
                sigma *= 5.0;
                w /= 5.0;
                lu = factor(sigma);
            } else if dual > 10.0 * primal && sigma > 1e-7 {
                sigma /= 5.0;
                w *= 5.0;
                lu = factor(sigma);
            }
        }
    }
    Ok(SolveReport {
        solution: z,
        primal_residual: primal,
        dual_residual: dual,
        iterations,
        status: SolveStatus::MaxIter,
    })
}

/// Componentwise projection onto the nonnegative orthant.
pub fn project_nonneg(v: &DVector<f64>) -> DVector<f64> {
    v.map(|x| x.max(0.0))
}

/// Euclidean projection of `lam` onto `{ lam : ||H^T lam||_2 <= 1 }`, where
/// `ht` is the `2 x l` matrix `H^T`.
///
/// The projection satisfies `lam* = (I + nu H H^T)^{-1} lam0` for the unique
/// multiplier `nu >= 0` that puts `H^T lam*` on the unit circle; `nu` is
/// found by a guarded 1-D Newton search.
pub fn project_ball_image(lam: &DVector<f64>, ht: &DMatrix<f64>) -> Result<DVector<f64>, ConvexError> {
    if ht.nrows() != 2 {
        return Err(ConvexError::DimensionMismatch(format!(
            "H^T must have 2 rows, got {}",
            ht.nrows()
        )));
    }
    if ht.ncols() != lam.len() {
        return Err(ConvexError::DimensionMismatch(format!(
            "H^T has {} columns but lam has {} entries",
            ht.ncols(),
            lam.len()
        )));
    }
    let w0 = ht * lam;
    if w0.norm_squared() <= 1.0 {
        return Ok(lam.clone());
    }

    // S = H^T H is 2x2 symmetric positive definite for spanning faces.
    let s = ht * ht.transpose();
    let (e1, e2, q) = sym2x2_eigen(s[(0, 0)], s[(0, 1)], s[(1, 1)]);
    if e1 <= 1e-12 * e2.max(1.0) {
        return Err(ConvexError::RankDeficient);
    }
    let wt = q.transpose() * &w0;
    let phi = |nu: f64| -> f64 {
        (wt[0] / (1.0 + nu * e1)).powi(2) + (wt[1] / (1.0 + nu * e2)).powi(2) - 1.0
    };
    let dphi = |nu: f64| -> f64 {
        -2.0 * (wt[0] * wt[0] * e1 / (1.0 + nu * e1).powi(3)
            + wt[1] * wt[1] * e2 / (1.0 + nu * e2).powi(3))
    };
    let mut nu = 0.0;
    for _ in 0..100 {
        let f = phi(nu);
        if f.abs() <= 1e-14 * (1.0 + w0.norm_squared()) {
            break;
        }
        let step = f / dphi(nu);
        nu -= step;
        if !nu.is_finite() || nu < 0.0 {
            nu = 0.0;
            break;
        }
    }

    // lam* = lam0 - nu H (I + nu S)^{-1} w0 via the Woodbury identity.
    let m = nalgebra::Matrix2::new(
        1.0 + nu * s[(0, 0)],
        nu * s[(0, 1)],
        nu * s[(1, 0)],
        1.0 + nu * s[(1, 1)],
    );
    let inv = m.try_inverse().ok_or(ConvexError::RankDeficient)?;
    let correction = ht.transpose() * (inv * w0) * nu;
    Ok(lam - correction)
}

/// Closed-form eigendecomposition of a symmetric 2x2 matrix
/// `[[a, b], [b, c]]`: returns (min eig, max eig, orthonormal Q).
fn sym2x2_eigen(a: f64, b: f64, c: f64) -> (f64, f64, nalgebra::Matrix2<f64>) {
    let tr = a + c;
    let det = a * c - b * b;
    let disc = ((tr * tr / 4.0) - det).max(0.0).sqrt();
    let l1 = tr / 2.0 - disc;
    let l2 = tr / 2.0 + disc;
    let v1 = if b.abs() > 1e-300 {
        nalgebra::Vector2::new(l1 - c, b).normalize()
    } else if a <= c {
        nalgebra::Vector2::new(1.0, 0.0)
    } else {
        nalgebra::Vector2::new(0.0, 1.0)
    };
    let v2 = nalgebra::Vector2::new(-v1.y, v1.x);
    (l1, l2, nalgebra::Matrix2::from_columns(&[v1, v2]))
}
