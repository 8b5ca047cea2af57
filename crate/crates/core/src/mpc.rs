//! Prediction-augmented MPC action.
//!
//! Two routes to the same input: the explicit closed form
//!
//! ```text
//!   u_t = −(R+BᵀPB)⁻¹ Bᵀ (PA x_t + Σ_{τ=t}^{𝒯} (Fᵀ)^{τ−t} P ŵ_{τ|t})
//! ```
//!
//! and a batch quadratic program over the whole window solved by state
//! elimination (condensed dense least squares). The first element of
//! the batch solution must match the explicit form; the pair is kept
//! as a runtime cross-check, not just a test artifact.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::lqr::SystemModel;

/// Cache of `(Fᵀ)^i P` for `i ∈ [0, k)`, built once per `(model, k)`.
#[derive(Debug, Clone)]
pub struct FtPowers {
    ftp: Vec<DMatrix<f64>>,
}

impl FtPowers {
    pub fn new(model: &SystemModel, k: usize) -> Self {
        let ft = model.closed_loop_f().transpose();
        let mut ftp = Vec::with_capacity(k.max(1));
        let mut current = model.p().clone();
        for i in 0..k.max(1) {
            ftp.push(current.clone());
            if i + 1 < k.max(1) {
                current = &ft * current;
            }
        }
        Self { ftp }
    }

    /// `(Fᵀ)^i P`.
    pub fn get(&self, i: usize) -> &DMatrix<f64> {
        &self.ftp[i]
    }

    pub fn len(&self) -> usize {
        self.ftp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ftp.is_empty()
    }
}

/// Disturbance predictions `ŵ_{t..𝒯|t}`, each clipped to the W-ball
/// before use. The number of entries clipped is kept for reporting.
#[derive(Debug, Clone)]
pub struct PredictionWindow {
    t: usize,
    predictions: Vec<DVector<f64>>,
    clipped: usize,
}

impl PredictionWindow {
    pub fn new(t: usize, raw: Vec<DVector<f64>>, w_bound: f64) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Dimension {
                context: "PredictionWindow",
                expected: "at least one prediction".into(),
                found: "empty window".into(),
            });
        }
        let mut clipped = 0;
        let predictions = raw
            .into_iter()
            .map(|p| {
                let norm = p.norm();
                if norm > w_bound {
                    clipped += 1;
                    p * (w_bound / norm)
                } else {
                    p
                }
            })
            .collect();
        Ok(Self {
            t,
            predictions,
            clipped,
        })
    }

    pub fn start(&self) -> usize {
        self.t
    }

    /// Last predicted step `𝒯 = t + len − 1`.
    pub fn end(&self) -> usize {
        self.t + self.predictions.len() - 1
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn predictions(&self) -> &[DVector<f64>] {
        &self.predictions
    }

    pub fn clipped(&self) -> usize {
        self.clipped
    }
}

/// Stateless controller over an immutable model with the `(Fᵀ)^i P`
/// cache built at construction.
#[derive(Debug, Clone)]
pub struct MpcController {
    s_chol: Cholesky<f64, Dyn>,
    pa: DMatrix<f64>,
    bt: DMatrix<f64>,
    ftp: FtPowers,
    k: usize,
    n: usize,
}

impl MpcController {
    pub fn new(model: &SystemModel, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("prediction horizon k must be >= 1".into()));
        }
        let s = crate::lqr::symmetrize(
            &(model.r() + model.b().transpose() * model.p() * model.b()),
        );
        let s_chol = Cholesky::new(s)
            .ok_or_else(|| Error::Numerical("R + BᵀPB is not positive definite".into()))?;
        Ok(Self {
            s_chol,
            pa: model.p() * model.a(),
            bt: model.b().transpose(),
            ftp: FtPowers::new(model, k),
            k,
            n: model.state_dim(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.k
    }

    /// Explicit MPC action for the current state and window.
    pub fn action(&self, x: &DVector<f64>, window: &PredictionWindow) -> Result<DVector<f64>> {
        if x.len() != self.n {
            return Err(Error::Dimension {
                context: "mpc action state",
                expected: format!("{}", self.n),
                found: format!("{}", x.len()),
            });
        }
        if window.len() > self.k {
            return Err(Error::Dimension {
                context: "mpc action window",
                expected: format!("at most {} predictions", self.k),
                found: format!("{}", window.len()),
            });
        }
        let mut weighted = &self.pa * x;
        for (i, pred) in window.predictions().iter().enumerate() {
            if pred.len() != self.n {
                return Err(Error::Dimension {
                    context: "mpc action prediction",
                    expected: format!("{}", self.n),
                    found: format!("{}", pred.len()),
                });
            }
            weighted += self.ftp.get(i) * pred;
        }
        Ok(-self.s_chol.solve(&(&self.bt * weighted)))
    }
}

/// One-shot explicit action: builds the power cache for the window
/// length and evaluates the closed form.
pub fn mpc_action_explicit(
    model: &SystemModel,
    x: &DVector<f64>,
    window: &PredictionWindow,
) -> Result<DVector<f64>> {
    MpcController::new(model, window.len())?.action(x, window)
}

/// Full open-loop minimizer of the windowed quadratic program with
/// predicted dynamics and terminal weight `P`. Only the first element
/// is meant to be applied.
pub fn mpc_action_batch(
    model: &SystemModel,
    x: &DVector<f64>,
    window: &PredictionWindow,
) -> Result<Vec<DVector<f64>>> {
    let n = model.state_dim();
    let m = model.input_dim();
    if x.len() != n {
        return Err(Error::Dimension {
            context: "mpc batch state",
            expected: format!("{n}"),
            found: format!("{}", x.len()),
        });
    }
    let h = window.len();

    // Stack x_{t+1..T+1} = Phi x_t + Gamma U + Lambda What.
    let mut a_pow = vec![DMatrix::<f64>::identity(n, n)];
    for i in 0..h {
        a_pow.push(model.a() * &a_pow[i]);
    }
    let mut phi = DMatrix::<f64>::zeros(n * h, n);
    let mut gamma = DMatrix::<f64>::zeros(n * h, m * h);
    let mut lambda = DMatrix::<f64>::zeros(n * h, n * h);
    for i in 0..h {
        phi.view_mut((i * n, 0), (n, n)).copy_from(&a_pow[i + 1]);
        for j in 0..=i {
            let blk = &a_pow[i - j] * model.b();
            gamma.view_mut((i * n, j * m), (n, m)).copy_from(&blk);
            lambda
                .view_mut((i * n, j * n), (n, n))
                .copy_from(&a_pow[i - j]);
        }
    }
    let mut qbar = DMatrix::<f64>::zeros(n * h, n * h);
    for i in 0..h {
        let blk = if i + 1 == h { model.p() } else { model.q() };
        qbar.view_mut((i * n, i * n), (n, n)).copy_from(blk);
    }
    let mut rbar = DMatrix::<f64>::zeros(m * h, m * h);
    for i in 0..h {
        rbar.view_mut((i * m, i * m), (m, m)).copy_from(model.r());
    }
    let what = DVector::from_iterator(
        n * h,
        window.predictions().iter().flat_map(|p| p.iter().copied()),
    );
    let c = &phi * x + &lambda * &what;
    let kkt = gamma.transpose() * &qbar * &gamma + &rbar;
    let rhs = -(gamma.transpose() * &qbar * &c);
    let chol = Cholesky::new(crate::lqr::symmetrize(&kkt))
        .ok_or_else(|| Error::Numerical("condensed KKT system is singular".into()))?;
    let u = chol.solve(&rhs);

    Ok((0..h).map(|i| u.rows(i * m, m).into_owned()).collect())
}
