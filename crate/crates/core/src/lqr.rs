//! Infinite-horizon LQR geometry: DARE solution and derived matrices.
//!
//! Everything downstream (the controller, the task-aware loss, the
//! cost-gap analysis) consumes a [`SystemModel`]: the plant `(A, B)`,
//! the costs `(Q, R)`, the Riccati solution `P` and the derived
//! matrices
//!
//! ```text
//!   K = (R + BᵀPB)⁻¹ BᵀPA        feedback gain
//!   F = A − BK                    closed-loop matrix
//!   H = B (R + BᵀPB)⁻¹ Bᵀ        per-step excess-cost metric
//! ```
//!
//! The DARE is solved by damped fixed-point iteration on the Riccati
//! map with a plain backward value-iteration fallback; the solution is
//! certified a posteriori (residual below tolerance, spectral radius
//! of `F` below one) rather than by symbolic stabilizability tests.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const DEFAULT_DARE_TOL: f64 = 1e-10;
pub const DEFAULT_DARE_MAX_ITER: usize = 10_000;

/// LTI plant plus all LQR-derived matrices. Immutable after construction.
#[derive(Debug, Clone)]
pub struct SystemModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    p: DMatrix<f64>,
    k: DMatrix<f64>,
    f: DMatrix<f64>,
    h: DMatrix<f64>,
    w_bound: f64,
    rho_f: f64,
    n: usize,
    m: usize,
}

impl SystemModel {
    /// Build a model with default DARE tolerances.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        w_bound: f64,
    ) -> Result<Self> {
        Self::with_options(a, b, q, r, w_bound, DEFAULT_DARE_TOL, DEFAULT_DARE_MAX_ITER)
    }

    pub fn with_options(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        w_bound: f64,
        dare_tol: f64,
        max_iter: usize,
    ) -> Result<Self> {
        let n = check_square("A", &a)?;
        if b.nrows() != n {
            return Err(Error::Dimension {
                context: "SystemModel B",
                expected: format!("{n} rows"),
                found: format!("{} rows", b.nrows()),
            });
        }
        let m = b.ncols();
        if q.shape() != (n, n) {
            return Err(Error::Dimension {
                context: "SystemModel Q",
                expected: format!("{n}x{n}"),
                found: format!("{}x{}", q.nrows(), q.ncols()),
            });
        }
        if r.shape() != (m, m) {
            return Err(Error::Dimension {
                context: "SystemModel R",
                expected: format!("{m}x{m}"),
                found: format!("{}x{}", r.nrows(), r.ncols()),
            });
        }
        if !(w_bound > 0.0) {
            return Err(Error::Config(format!(
                "disturbance bound W must be positive, got {w_bound}"
            )));
        }

        let p = solve_dare(&a, &b, &q, &r, dare_tol, max_iter)?;
        let (k, f, h) = gain_matrices(&a, &b, &p, &r)?;
        let rho_f = spectral_radius(&f);
        if rho_f >= 1.0 {
            return Err(Error::UnstableClosedLoop {
                spectral_radius: rho_f,
            });
        }

        Ok(Self {
            a,
            b,
            q,
            r,
            p,
            k,
            f,
            h,
            w_bound,
            rho_f,
            n,
            m,
        })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }
    pub fn gain_k(&self) -> &DMatrix<f64> {
        &self.k
    }
    pub fn closed_loop_f(&self) -> &DMatrix<f64> {
        &self.f
    }
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }
    pub fn w_bound(&self) -> f64 {
        self.w_bound
    }
    /// Spectral radius of the closed loop `F`, recorded at construction.
    pub fn rho_f(&self) -> f64 {
        self.rho_f
    }
    pub fn state_dim(&self) -> usize {
        self.n
    }
    pub fn input_dim(&self) -> usize {
        self.m
    }

    /// Max-abs residual of the stored `P` in the Riccati equation.
    pub fn dare_residual(&self) -> f64 {
        let next = riccati_map(&self.a, &self.b, &self.q, &self.r, &self.p)
            .expect("R + BᵀPB stays invertible for a stored solution");
        max_abs_diff(&next, &self.p)
    }

    /// One-step stage cost `xᵀQx + uᵀRu`.
    pub fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (x.transpose() * &self.q * x)[(0, 0)] + (u.transpose() * &self.r * u)[(0, 0)]
    }

    /// Terminal cost `xᵀPx`.
    pub fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        (x.transpose() * &self.p * x)[(0, 0)]
    }
}

/// Solve `P = Q + AᵀPA − AᵀPB(R+BᵀPB)⁻¹BᵀPA` for the stabilizing `P`.
///
/// Damped fixed-point iteration starting from `P = Q`; the damping
/// factor is halved when the residual stops decreasing. If that stalls
/// a plain backward value-iteration pass is run as a fallback.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DMatrix<f64>> {
    let n = check_square("A", a)?;
    if b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::Dimension {
            context: "solve_dare",
            expected: format!("A {n}x{n}, B {n}xm, Q {n}x{n}, R mxm"),
            found: format!(
                "B {}x{}, Q {}x{}, R {}x{}",
                b.nrows(),
                b.ncols(),
                q.nrows(),
                q.ncols(),
                r.nrows(),
                r.ncols()
            ),
        });
    }
    check_symmetric("Q", q)?;
    check_symmetric("R", r)?;
    check_positive_semidefinite("Q", q)?;
    check_positive_definite("R", r)?;

    if let Some(p) = dare_fixed_point(a, b, q, r, tol, max_iter, true)? {
        return Ok(p);
    }
    // Fallback: plain backward value iteration, no damping.
    if let Some(p) = dare_fixed_point(a, b, q, r, tol, max_iter, false)? {
        return Ok(p);
    }
    let last = dare_fixed_point(a, b, q, r, tol, 1, false)?;
    let _ = last;
    Err(Error::DareNonConvergence {
        iterations: 2 * max_iter,
        residual: f64::NAN,
    })
}

fn dare_fixed_point(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
    damped: bool,
) -> Result<Option<DMatrix<f64>>> {
    let mut p = q.clone();
    let mut damping = 1.0_f64;
    let mut prev_residual = f64::INFINITY;
    let mut stalls = 0_usize;

    for _ in 0..max_iter {
        let next = match riccati_map(a, b, q, r, &p) {
            Ok(next) => next,
            Err(_) => return Ok(None),
        };
        let residual = max_abs_diff(&next, &p);
        if damped {
            if residual >= prev_residual {
                stalls += 1;
                if stalls >= 5 && damping > 0.25 {
                    damping *= 0.5;
                    stalls = 0;
                }
            } else {
                stalls = 0;
            }
            prev_residual = residual;
        }
        p = if damping < 1.0 {
            symmetrize(&(&p * (1.0 - damping) + &next * damping))
        } else {
            symmetrize(&next)
        };
        if residual <= tol {
            // Certify against the undamped map before accepting.
            let check = riccati_map(a, b, q, r, &p)
                .map_err(|e| Error::Numerical(format!("residual check failed: {e}")))?;
            if max_abs_diff(&check, &p) <= tol {
                check_positive_definite("P", &p)?;
                return Ok(Some(p));
            }
        }
    }
    Ok(None)
}

/// One application of the Riccati map `Q + AᵀPA − AᵀPB(R+BᵀPB)⁻¹BᵀPA`.
fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let btp = b.transpose() * p;
    let s = symmetrize(&(r + &btp * b));
    let chol = nalgebra::Cholesky::new(s)
        .ok_or_else(|| Error::Numerical("R + BᵀPB is not positive definite".into()))?;
    let btpa = &btp * a;
    let gain = chol.solve(&btpa); // (R+BᵀPB)⁻¹BᵀPA
    Ok(q + a.transpose() * p * a - btpa.transpose() * gain)
}

/// Derive `(K, F, H)` from a DARE solution.
///
/// The two algebraically equal forms of the closed loop, `A − BK` and
/// `A − HPA`, are both evaluated; disagreement beyond 1e-10 entrywise
/// is reported as a numerical failure.
pub fn gain_matrices(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    p: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let btp = b.transpose() * p;
    let s = symmetrize(&(r + &btp * b));
    let chol = nalgebra::Cholesky::new(s)
        .ok_or_else(|| Error::Numerical("R + BᵀPB is not positive definite".into()))?;

    let k = chol.solve(&(&btp * a));
    let s_inv = chol.inverse();
    let h = symmetrize(&(b * s_inv * b.transpose()));

    let f = a - b * &k;
    let f_alt = a - &h * p * a;
    let disagreement = max_abs_diff(&f, &f_alt);
    if disagreement > 1e-10 {
        return Err(Error::Numerical(format!(
            "closed-loop forms A-BK and A-HPA disagree by {disagreement:.3e}"
        )));
    }
    Ok((k, f, h))
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    assert_eq!(m.nrows(), m.ncols(), "spectral radius needs a square matrix");
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|ev| ev.norm())
        .fold(0.0, f64::max)
}

/// Operator 2-norm (largest singular value).
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Empirical decay envelope for powers of a stable matrix.
///
/// Fits the smallest `c_hat` with `‖Fᵏ‖₂ ≤ c_hat · rho_hat^k` over
/// `k ∈ {0, ..., kmax}` where `rho_hat = ρ(F) + 0.01`. The constants
/// are estimated, not derived; `fit_residual` is the max log-gap of the
/// envelope (zero or negative means the bound holds on the fitted range).
#[derive(Debug, Clone, Copy)]
pub struct GelfandFit {
    pub c_hat: f64,
    pub rho_hat: f64,
    pub fit_residual: f64,
}

pub fn gelfand_fit(f: &DMatrix<f64>, kmax: usize) -> GelfandFit {
    let rho_hat = spectral_radius(f) + 0.01;
    let n = f.nrows();
    let mut power = DMatrix::<f64>::identity(n, n);
    let mut c_hat = 0.0_f64;
    for k in 0..=kmax {
        let norm = operator_norm(&power);
        let envelope = rho_hat.powi(k as i32);
        c_hat = c_hat.max(norm / envelope);
        if k < kmax {
            power = &power * f;
        }
    }
    // By construction every ratio is <= c_hat; recompute the worst
    // log-gap as the reported residual.
    let mut power = DMatrix::<f64>::identity(n, n);
    let mut fit_residual = f64::NEG_INFINITY;
    for k in 0..=kmax {
        let norm = operator_norm(&power);
        if norm > 0.0 {
            let gap = norm.ln() - (c_hat.ln() + (k as f64) * rho_hat.ln());
            fit_residual = fit_residual.max(gap);
        }
        if k < kmax {
            power = &power * f;
        }
    }
    GelfandFit {
        c_hat,
        rho_hat,
        fit_residual,
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

fn check_square(name: &'static str, m: &DMatrix<f64>) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension {
            context: name,
            expected: "square matrix".into(),
            found: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    Ok(m.nrows())
}

fn check_symmetric(name: &'static str, m: &DMatrix<f64>) -> Result<()> {
    let asymmetry = max_abs_diff(m, &m.transpose());
    let scale = m.amax().max(1.0);
    if asymmetry > 1e-9 * scale {
        return Err(Error::NotSymmetric { name, asymmetry });
    }
    Ok(())
}

fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    nalgebra::SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn check_positive_definite(name: &'static str, m: &DMatrix<f64>) -> Result<()> {
    let min = min_symmetric_eigenvalue(m);
    if min <= 0.0 {
        return Err(Error::NotPositiveDefinite {
            name,
            min_eigenvalue: min,
        });
    }
    Ok(())
}

fn check_positive_semidefinite(name: &'static str, m: &DMatrix<f64>) -> Result<()> {
    let min = min_symmetric_eigenvalue(m);
    let scale = m.amax().max(1.0);
    if min < -1e-9 * scale {
        return Err(Error::NotPositiveDefinite {
            name,
            min_eigenvalue: min,
        });
    }
    Ok(())
}

/// The tracking testbed plant: double-integrator positions with
/// directly driven velocities, 0.2 time-unit period.
pub fn drone_matrices() -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let a = nalgebra::dmatrix![
        1.0, 0.0, 0.2, 0.0;
        0.0, 1.0, 0.0, 0.2;
        0.0, 0.0, 1.0, 0.0;
        0.0, 0.0, 0.0, 1.0
    ];
    let b = nalgebra::dmatrix![
        0.0, 0.0;
        0.0, 0.0;
        0.2, 0.0;
        0.0, 0.2
    ];
    let q = DMatrix::from_diagonal(&nalgebra::dvector![1.0, 1.0, 0.0, 0.0]);
    let r = DMatrix::from_diagonal(&nalgebra::dvector![1e-4, 1e-4]);
    (a, b, q, r)
}

/// Closed-form stabilizing DARE solution for the scalar system
/// `a = b = 1`: the positive root of `P² − qP − qr = 0`.
pub fn scalar_dare_closed_form(q: f64, r: f64) -> f64 {
    (q + (q * q + 4.0 * q * r).sqrt()) / 2.0
}
