//! Surrogate losses for tuning the decoder: MSE, MAE, and the
//! task-aware quadratic built from the control geometry,
//!
//! ```text
//!   L(θ) = ψ̂(θ)ᵀ H ψ̂(θ),   ψ̂(θ) = Σ_τ (Fᵀ)^{τ−t} P (w_τ − g_θ(d_τ)),
//! ```
//!
//! all with analytic gradients with respect to the packed parameters.
//!
//! MSE and MAE are written with the window-gap normalizer `1/(𝒯 − t)`;
//! a single-entry window uses divisor one, and the alternative
//! `1/(𝒯 − t + 1)` is available as a switch.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::cdp::{DecoderParams, HypothesisSet, ParamLayout};
use crate::error::{Error, Result};
use crate::lqr::SystemModel;
use crate::mpc::FtPowers;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Mae,
    Special,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossKind::Mse => write!(f, "mse"),
            LossKind::Mae => write!(f, "mae"),
            LossKind::Special => write!(f, "special"),
        }
    }
}

/// Divisor convention for the MSE/MAE window average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalizer {
    /// `1/(𝒯 − t)`, clamped to one for a single-entry window.
    #[default]
    WindowGap,
    /// `1/(𝒯 − t + 1)` (the window length).
    WindowLen,
}

/// Control-geometry constants for the task-aware loss: `H` and the
/// cached `(Fᵀ)^i P` powers for window offsets `i < k`.
#[derive(Debug, Clone)]
pub struct SpecialContext {
    h: DMatrix<f64>,
    ftp: FtPowers,
}

impl SpecialContext {
    pub fn new(model: &SystemModel, k: usize) -> Self {
        Self {
            h: model.h().clone(),
            ftp: FtPowers::new(model, k),
        }
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn max_window(&self) -> usize {
        self.ftp.len()
    }

    /// `ψ̂(θ) = Σ_i (Fᵀ)^i P (w_i − g_θ(d_i))` over the window.
    pub fn psi_hat(&self, params: &DecoderParams, window: &LossWindow<'_>) -> Result<DVector<f64>> {
        let n = self.h.nrows();
        let mut psi = DVector::zeros(n);
        for i in 0..window.len() {
            let residual = &window.targets[i] - params.decode(&window.embeddings[i])?;
            psi += self.ftp.get(i) * residual;
        }
        Ok(psi)
    }

    /// `M = Σ_i (Fᵀ)^i P · ∂g/∂θ(d_i)`, so that `∂ψ̂/∂θ = −M`.
    pub fn sensitivity(&self, layout: &ParamLayout, window: &LossWindow<'_>) -> DMatrix<f64> {
        let n = self.h.nrows();
        let mut m = DMatrix::zeros(n, layout.dim());
        for i in 0..window.len() {
            m += self.ftp.get(i) * layout.jacobian(&window.embeddings[i]);
        }
        m
    }

    /// Gradient of `(ψ̂(θ) + offset)ᵀ H (ψ̂(θ) + offset)` with respect to
    /// packed `θ`: `−2 Mᵀ H (ψ̂ + offset)`. The offset is the part of a
    /// full-horizon residual that lies beyond the prediction window.
    pub fn gradient_with_offset(
        &self,
        params: &DecoderParams,
        window: &LossWindow<'_>,
        offset: Option<&DVector<f64>>,
    ) -> Result<DVector<f64>> {
        let mut psi = self.psi_hat(params, window)?;
        if let Some(off) = offset {
            psi += off;
        }
        let m = self.sensitivity(params.layout(), window);
        Ok(-2.0 * m.transpose() * &self.h * psi)
    }
}

/// Which surrogate to evaluate, with its precomputed constants.
#[derive(Debug, Clone)]
pub struct LossSpec {
    kind: LossKind,
    normalizer: Normalizer,
    special: Option<SpecialContext>,
}

impl LossSpec {
    pub fn mse() -> Self {
        Self {
            kind: LossKind::Mse,
            normalizer: Normalizer::default(),
            special: None,
        }
    }

    pub fn mae() -> Self {
        Self {
            kind: LossKind::Mae,
            normalizer: Normalizer::default(),
            special: None,
        }
    }

    pub fn special(model: &SystemModel, k: usize) -> Self {
        Self {
            kind: LossKind::Special,
            normalizer: Normalizer::default(),
            special: Some(SpecialContext::new(model, k)),
        }
    }

    pub fn with_normalizer(mut self, normalizer: Normalizer) -> Self {
        self.normalizer = normalizer;
        self
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn special_context(&self) -> Option<&SpecialContext> {
        self.special.as_ref()
    }

    fn divisor(&self, window_len: usize) -> f64 {
        match self.normalizer {
            Normalizer::WindowGap => window_len.saturating_sub(1).max(1) as f64,
            Normalizer::WindowLen => window_len.max(1) as f64,
        }
    }
}

/// A matured window: realized targets `w_τ` (already net of any known
/// feedforward) and the embeddings the predictions were decoded from.
#[derive(Debug, Clone, Copy)]
pub struct LossWindow<'a> {
    pub targets: &'a [DVector<f64>],
    pub embeddings: &'a [DVector<f64>],
}

impl<'a> LossWindow<'a> {
    pub fn new(targets: &'a [DVector<f64>], embeddings: &'a [DVector<f64>]) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Dimension {
                context: "LossWindow",
                expected: "nonempty window".into(),
                found: "empty".into(),
            });
        }
        if targets.len() != embeddings.len() {
            return Err(Error::Dimension {
                context: "LossWindow",
                expected: format!("{} embeddings", targets.len()),
                found: format!("{}", embeddings.len()),
            });
        }
        Ok(Self {
            targets,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

fn check_special_window(ctx: &SpecialContext, window: &LossWindow<'_>) -> Result<()> {
    if window.len() > ctx.max_window() {
        return Err(Error::Dimension {
            context: "special loss window",
            expected: format!("at most {} entries", ctx.max_window()),
            found: format!("{}", window.len()),
        });
    }
    Ok(())
}

pub fn loss_value(spec: &LossSpec, params: &DecoderParams, window: &LossWindow<'_>) -> Result<f64> {
    match spec.kind {
        LossKind::Mse => {
            let mut sum = 0.0;
            for i in 0..window.len() {
                let r = &window.targets[i] - params.decode(&window.embeddings[i])?;
                sum += r.norm_squared();
            }
            Ok(sum / spec.divisor(window.len()))
        }
        LossKind::Mae => {
            let mut sum = 0.0;
            for i in 0..window.len() {
                let r = &window.targets[i] - params.decode(&window.embeddings[i])?;
                sum += r.iter().map(|v| v.abs()).sum::<f64>();
            }
            Ok(sum / spec.divisor(window.len()))
        }
        LossKind::Special => {
            let ctx = spec
                .special
                .as_ref()
                .ok_or_else(|| Error::Config("special loss needs a system model".into()))?;
            check_special_window(ctx, window)?;
            let psi = ctx.psi_hat(params, window)?;
            Ok((psi.transpose() * &ctx.h * &psi)[(0, 0)])
        }
    }
}

/// Analytic gradient with respect to the packed parameters. The MAE
/// subgradient at an exactly zero residual coordinate is zero.
pub fn loss_gradient(
    spec: &LossSpec,
    params: &DecoderParams,
    window: &LossWindow<'_>,
) -> Result<DVector<f64>> {
    let layout = params.layout();
    match spec.kind {
        LossKind::Mse => {
            let mut grad = DVector::zeros(layout.dim());
            for i in 0..window.len() {
                let r = &window.targets[i] - params.decode(&window.embeddings[i])?;
                let j = layout.jacobian(&window.embeddings[i]);
                grad += j.transpose() * r * (-2.0);
            }
            Ok(grad / spec.divisor(window.len()))
        }
        LossKind::Mae => {
            let mut grad = DVector::zeros(layout.dim());
            for i in 0..window.len() {
                let r = &window.targets[i] - params.decode(&window.embeddings[i])?;
                let sign = r.map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                let j = layout.jacobian(&window.embeddings[i]);
                grad += j.transpose() * sign * (-1.0);
            }
            Ok(grad / spec.divisor(window.len()))
        }
        LossKind::Special => {
            let ctx = spec
                .special
                .as_ref()
                .ok_or_else(|| Error::Config("special loss needs a system model".into()))?;
            check_special_window(ctx, window)?;
            ctx.gradient_with_offset(params, window, None)
        }
    }
}

/// Draw a point uniformly from the hypothesis ball.
pub fn sample_in_ball(set: &HypothesisSet, rng: &mut impl Rng) -> DVector<f64> {
    let dim = set.center.len();
    let dir = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = dir.norm();
    if norm == 0.0 {
        return set.center.clone();
    }
    let u: f64 = rng.gen_range(0.0..1.0f64);
    let r = set.radius * u.powf(1.0 / dim as f64);
    &set.center + dir * (r / norm)
}

/// Empirical gradient bound: max `‖∇L‖` over sampled `(θ, window)`
/// pairs, inflated by `safety`. A non-positive estimate is rejected and
/// replaced by `floor`.
pub fn gradient_bound_estimate<S>(
    spec: &LossSpec,
    layout: &ParamLayout,
    set: &HypothesisSet,
    mut sample_window: S,
    samples: usize,
    seed: u64,
    safety: f64,
    floor: f64,
) -> Result<f64>
where
    S: FnMut(usize) -> (Vec<DVector<f64>>, Vec<DVector<f64>>),
{
    let mut rng = stream_rng(seed, Stream::Sampler);
    let mut worst = 0.0_f64;
    for i in 0..samples {
        let theta = sample_in_ball(set, &mut rng);
        let params = DecoderParams::new(layout.clone(), theta)?;
        let (targets, embeddings) = sample_window(i);
        let window = LossWindow::new(&targets, &embeddings)?;
        let grad = loss_gradient(spec, &params, &window)?;
        worst = worst.max(grad.norm());
    }
    let estimate = worst * safety;
    if estimate > 0.0 {
        Ok(estimate)
    } else {
        Ok(floor)
    }
}
