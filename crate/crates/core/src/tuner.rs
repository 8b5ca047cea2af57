//! Online decoder tuning: delayed projected gradient descent.
//!
//! At every step the loop records the prediction window and a by-value
//! snapshot of the parameters that produced it. Once the window
//! recorded at step `s = t − k + 1` has all of its disturbances
//! realized (which happens exactly at step `t`), the update
//!
//! ```text
//!   θ_{t+1} = Π_Θ( θ_t − η_t ∇L_s(θ_s) )
//! ```
//!
//! is applied: the gradient is evaluated at the snapshot `θ_s`, never
//! at the current iterate. No update happens while `t < k`.

use std::collections::VecDeque;

use nalgebra::DVector;

use crate::cdp::{project, DecoderParams, HypothesisSet};
use crate::error::{Error, Result};
use crate::losses::{loss_gradient, LossSpec, LossWindow};

/// Learning-rate schedule `η_t = D / (G √(2(2k−1)(t+1)))`, or an
/// explicit list (the last entry repeats).
#[derive(Debug, Clone)]
pub enum LearningRate {
    Formula { d: f64, g: f64, k: usize },
    Explicit(Vec<f64>),
}

impl LearningRate {
    pub fn formula(d: f64, g: f64, k: usize) -> Result<Self> {
        if !(d > 0.0) || !(g > 0.0) {
            return Err(Error::InvalidSchedule { d, g });
        }
        if k == 0 {
            return Err(Error::Config("schedule horizon k must be >= 1".into()));
        }
        Ok(LearningRate::Formula { d, g, k })
    }

    pub fn eta(&self, t: usize) -> f64 {
        match self {
            LearningRate::Formula { d, g, k } => learning_rate_formula(t, *d, *g, *k),
            LearningRate::Explicit(values) => {
                if values.is_empty() {
                    0.0
                } else {
                    values[t.min(values.len() - 1)]
                }
            }
        }
    }
}

fn learning_rate_formula(t: usize, d: f64, g: f64, k: usize) -> f64 {
    d / (g * (2.0 * (2.0 * k as f64 - 1.0) * (t as f64 + 1.0)).sqrt())
}

/// `η_t = D / (G √(2(2k−1)(t+1)))`, validated.
pub fn learning_rate(t: usize, d: f64, g: f64, k: usize) -> Result<f64> {
    if !(d > 0.0) || !(g > 0.0) {
        return Err(Error::InvalidSchedule { d, g });
    }
    if k == 0 {
        return Err(Error::Config("schedule horizon k must be >= 1".into()));
    }
    Ok(learning_rate_formula(t, d, g, k))
}

#[derive(Debug, Clone)]
struct PendingWindow {
    start: usize,
    theta_snapshot: DVector<f64>,
    embeddings: Vec<DVector<f64>>,
}

/// What one update did, for trace emission.
#[derive(Debug, Clone)]
pub struct UpdateReport {
    pub window_start: usize,
    pub eta: f64,
    pub grad_norm: f64,
}

/// Owner of the decoder parameters for one run (single writer).
#[derive(Debug, Clone)]
pub struct TunerState {
    params: DecoderParams,
    set: HypothesisSet,
    schedule: LearningRate,
    k: usize,
    pending: VecDeque<PendingWindow>,
    next_record: usize,
}

impl TunerState {
    /// The initial parameters are projected into the hypothesis set so
    /// the membership invariant holds from step zero.
    pub fn new(
        mut params: DecoderParams,
        set: HypothesisSet,
        schedule: LearningRate,
        k: usize,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("prediction horizon k must be >= 1".into()));
        }
        if set.center.len() != params.layout().dim() {
            return Err(Error::Dimension {
                context: "TunerState hypothesis set",
                expected: format!("{} parameters", params.layout().dim()),
                found: format!("{}", set.center.len()),
            });
        }
        let projected = project(params.theta(), &set);
        params.set_theta(projected)?;
        Ok(Self {
            params,
            set,
            schedule,
            k,
            pending: VecDeque::new(),
            next_record: 0,
        })
    }

    pub fn params(&self) -> &DecoderParams {
        &self.params
    }

    pub fn theta(&self) -> &DVector<f64> {
        self.params.theta()
    }

    pub fn hypothesis_set(&self) -> &HypothesisSet {
        &self.set
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn eta(&self, t: usize) -> f64 {
        self.schedule.eta(t)
    }

    /// Record the prediction made at step `t`: the window embeddings
    /// and a by-value snapshot of the current parameters. Must be
    /// called exactly once per step, in order.
    pub fn record_prediction(&mut self, t: usize, embeddings: Vec<DVector<f64>>) -> Result<()> {
        if t != self.next_record {
            return Err(Error::DoubleRecord { t });
        }
        self.pending.push_back(PendingWindow {
            start: t,
            theta_snapshot: self.params.theta().clone(),
            embeddings,
        });
        self.next_record = t + 1;
        // Windows that can no longer be consumed (their consume step
        // has passed; this only ever drops the very first window,
        // which the t < k convention skips) are pruned so the buffer
        // never exceeds k entries.
        let oldest_consumable = (t + 1).saturating_sub(self.k);
        while self
            .pending
            .front()
            .is_some_and(|front| front.start < oldest_consumable)
        {
            self.pending.pop_front();
        }
        debug_assert!(self.pending.len() <= self.k);
        Ok(())
    }

    /// Apply the update at step `t`, consuming the window recorded at
    /// `s = t − k + 1`. `realized` holds the target vectors for every
    /// step up to and including `t`, indexed by absolute step.
    ///
    /// Errors if `t < k` (the matured-window convention says no update
    /// yet) or if the window's targets are not all realized.
    pub fn apply_update(
        &mut self,
        t: usize,
        realized: &[DVector<f64>],
        spec: &LossSpec,
    ) -> Result<UpdateReport> {
        if t < self.k {
            return Err(Error::ImmatureWindow {
                start: (t + 1).saturating_sub(self.k),
            });
        }
        let s = t + 1 - self.k;
        // Retire anything older than the consumed window (the very
        // first window when t == k).
        while self
            .pending
            .front()
            .is_some_and(|front| front.start < s)
        {
            self.pending.pop_front();
        }
        let front = self
            .pending
            .front()
            .ok_or(Error::ImmatureWindow { start: s })?;
        if front.start != s {
            return Err(Error::ImmatureWindow { start: s });
        }
        let window_len = front.embeddings.len();
        if realized.len() < s + window_len {
            return Err(Error::ImmatureWindow { start: s });
        }
        let entry = self.pending.pop_front().expect("front checked above");

        let snapshot = DecoderParams::new(self.params.layout().clone(), entry.theta_snapshot)?;
        let window = LossWindow::new(&realized[s..s + window_len], &entry.embeddings)?;
        let grad = loss_gradient(spec, &snapshot, &window)?;
        let eta = self.schedule.eta(t);
        let stepped = self.params.theta() - &grad * eta;
        self.params.set_theta(project(&stepped, &self.set))?;

        Ok(UpdateReport {
            window_start: s,
            eta,
            grad_norm: grad.norm(),
        })
    }

    /// Loop helper: apply the update when a window has matured
    /// (`t ≥ k`), otherwise do nothing.
    pub fn update_if_ready(
        &mut self,
        t: usize,
        realized: &[DVector<f64>],
        spec: &LossSpec,
    ) -> Result<Option<UpdateReport>> {
        if t < self.k {
            return Ok(None);
        }
        self.apply_update(t, realized, spec).map(Some)
    }
}
