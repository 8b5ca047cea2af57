//! Plant simulation, realized cost, and disturbance generation.
//!
//! The plant is `x_{t+1} = A x_t + B u_t + w_t` with quadratic stage
//! cost `xᵀQx + uᵀRu` and terminal cost `xᵀPx`. Disturbances come from
//! a [`DisturbanceSource`]; identical seed and parameters always emit
//! a bit-identical sequence.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde_json::json;

use crate::error::{Error, Result};
use crate::lqr::SystemModel;
use crate::rng::{stream_rng, Stream};

/// One simulated control step: `Ax + Bu + w`.
pub fn step(
    model: &SystemModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = model.state_dim();
    let m = model.input_dim();
    if x.len() != n || w.len() != n || u.len() != m {
        return Err(Error::Dimension {
            context: "dynamics step",
            expected: format!("x,w of length {n}, u of length {m}"),
            found: format!("x {}, u {}, w {}", x.len(), u.len(), w.len()),
        });
    }
    Ok(model.a() * x + model.b() * u + w)
}

/// Per-step record of a closed-loop run.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub w: DVector<f64>,
    /// Predictions `ŵ_{t..𝒯|t}` exactly as used by the controller
    /// (after clipping to the W-ball).
    pub predicted: Vec<DVector<f64>>,
    /// Packed decoder parameters in effect when the action was computed.
    pub theta: DVector<f64>,
    pub stage_cost: f64,
    /// Learning rate of the update applied at the end of this step
    /// (zero when no update happened).
    pub eta: f64,
    pub grad_norm: f64,
    /// Number of window entries clipped to the W-ball this step.
    pub clipped: usize,
}

/// Full realized trajectory of one replica.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub seed: u64,
    pub config_digest: String,
    pub steps: Vec<StepRecord>,
    pub final_state: DVector<f64>,
    /// Packed decoder parameters after the last update (`θ_T`).
    pub final_theta: DVector<f64>,
    /// Exogenous per-step embeddings `d_τ` as seen by the decoder.
    pub embeddings: Vec<DVector<f64>>,
    /// Known feedforward part of each prediction (`ŵ_τ = base_τ + g_θ(d_τ)`).
    pub bases: Vec<DVector<f64>>,
}

impl RunTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn clip_count(&self) -> usize {
        self.steps.iter().map(|s| s.clipped).sum()
    }

    fn check_complete(&self) -> Result<()> {
        for (i, s) in self.steps.iter().enumerate() {
            if s.t != i {
                return Err(Error::IncompleteTrace(format!(
                    "step index {} found at position {}",
                    s.t, i
                )));
            }
        }
        Ok(())
    }

    /// CSV emission, one row per step. Column order:
    /// `t, x_0.., u_0.., w_0.., what_0.. (first prediction), theta_0..,
    /// stage_cost, eta, grad_norm, clipped`. The terminal state lives in
    /// the JSON summary, not in the CSV.
    pub fn to_csv(&self) -> String {
        let n = self.final_state.len();
        let m = self.steps.first().map_or(0, |s| s.u.len());
        let q = self.final_theta.len();
        let mut out = String::new();
        out.push('t');
        for i in 0..n {
            out.push_str(&format!(",x{i}"));
        }
        for i in 0..m {
            out.push_str(&format!(",u{i}"));
        }
        for i in 0..n {
            out.push_str(&format!(",w{i}"));
        }
        for i in 0..n {
            out.push_str(&format!(",what{i}"));
        }
        for i in 0..q {
            out.push_str(&format!(",theta{i}"));
        }
        out.push_str(",stage_cost,eta,grad_norm,clipped\n");
        for s in &self.steps {
            out.push_str(&format!("{}", s.t));
            for v in s.x.iter() {
                out.push_str(&format!(",{v}"));
            }
            for v in s.u.iter() {
                out.push_str(&format!(",{v}"));
            }
            for v in s.w.iter() {
                out.push_str(&format!(",{v}"));
            }
            let what = s.predicted.first();
            for i in 0..n {
                match what {
                    Some(p) => out.push_str(&format!(",{}", p[i])),
                    None => out.push(','),
                }
            }
            for v in s.theta.iter() {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(
                ",{},{},{},{}\n",
                s.stage_cost, s.eta, s.grad_norm, s.clipped
            ));
        }
        out
    }

    /// JSON summary: total cost, final decoder parameters, terminal
    /// state, and the identifiers needed to replay the run.
    pub fn summary(&self, model: &SystemModel) -> Result<serde_json::Value> {
        let total = total_cost(self, model)?;
        Ok(json!({
            "seed": self.seed,
            "config_digest": self.config_digest,
            "steps": self.steps.len(),
            "total_cost": total,
            "terminal_state": self.final_state.iter().copied().collect::<Vec<f64>>(),
            "final_theta": self.final_theta.iter().copied().collect::<Vec<f64>>(),
            "clip_count": self.clip_count(),
        }))
    }
}

/// Realized cost of a complete trace:
/// `Σ_t (x_tᵀQx_t + u_tᵀRu_t) + x_TᵀPx_T`.
///
/// An empty trace (zero-length run) has zero cost by convention.
pub fn total_cost(trace: &RunTrace, model: &SystemModel) -> Result<f64> {
    trace.check_complete()?;
    if trace.steps.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in &trace.steps {
        total += model.stage_cost(&s.x, &s.u);
    }
    total += model.terminal_cost(&trace.final_state);
    Ok(total)
}

/// Weighted disturbance tails `v_t = Σ_{τ=t}^{T-1} (Fᵀ)^{τ-t} P w_τ`,
/// computed by the backward recursion `v_t = P w_t + Fᵀ v_{t+1}`.
pub fn hindsight_weighted_tails(model: &SystemModel, w: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let n = model.state_dim();
    let ft = model.closed_loop_f().transpose();
    let mut tails = vec![DVector::zeros(n); w.len()];
    let mut next = DVector::zeros(n);
    for t in (0..w.len()).rev() {
        let v = model.p() * &w[t] + &ft * &next;
        tails[t] = v.clone();
        next = v;
    }
    tails
}

/// Cost of the hindsight-optimal controller
/// `u_t = −(R+BᵀPB)⁻¹Bᵀ(PAx_t + Σ_{τ=t}^{T-1}(Fᵀ)^{τ-t}Pw_τ)`
/// run against the full known disturbance sequence.
pub fn optimal_cost(model: &SystemModel, x0: &DVector<f64>, w: &[DVector<f64>]) -> Result<f64> {
    let n = model.state_dim();
    if x0.len() != n {
        return Err(Error::Dimension {
            context: "optimal_cost x0",
            expected: format!("{n}"),
            found: format!("{}", x0.len()),
        });
    }
    if w.is_empty() {
        return Ok(0.0);
    }
    for (i, wt) in w.iter().enumerate() {
        if wt.len() != n {
            return Err(Error::Dimension {
                context: "optimal_cost w",
                expected: format!("{n}"),
                found: format!("w[{i}] of length {}", wt.len()),
            });
        }
    }
    let tails = hindsight_weighted_tails(model, w);
    let s = crate::lqr::symmetrize(&(model.r() + model.b().transpose() * model.p() * model.b()));
    let chol = nalgebra::Cholesky::new(s)
        .ok_or_else(|| Error::Numerical("R + BᵀPB is not positive definite".into()))?;
    let pa = model.p() * model.a();

    let mut x = x0.clone();
    let mut total = 0.0;
    for t in 0..w.len() {
        let rhs = model.b().transpose() * (&pa * &x + &tails[t]);
        let u = -chol.solve(&rhs);
        total += model.stage_cost(&x, &u);
        x = step(model, &x, &u, &w[t])?;
    }
    total += model.terminal_cost(&x);
    Ok(total)
}

/// Seeded disturbance generator. Identical seed and parameters emit a
/// bit-identical sequence.
#[derive(Debug, Clone)]
pub enum DisturbanceSource {
    /// Explicit trace.
    Scripted(Vec<DVector<f64>>),
    /// Tracking-scenario composite: reference drift plus uniform wind
    /// in the two velocity rows of a 4-state plant,
    /// `w_t = A y_t − y_{t+1} + [0, 0, gain·z₁, gain·z₂]ᵀ`.
    UniformWindComposite {
        seed: u64,
        wind_lo: f64,
        wind_hi: f64,
        /// Scale applied to each wind draw before it enters a velocity row.
        wind_gain: f64,
        a: DMatrix<f64>,
        /// Reference states `y_0 ..= y_T` (length at least `T+1`).
        reference: Vec<DVector<f64>>,
    },
    /// Coordinatewise-uniform i.i.d. draws on `[mean − scale, mean + scale]`.
    IidUniform {
        seed: u64,
        mean: DVector<f64>,
        scale: DVector<f64>,
    },
}

/// Wind pair draws shared between the composite disturbance and the
/// context channel of the tracking scenario.
pub fn uniform_wind_draws(seed: u64, t_steps: usize, lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let mut rng = stream_rng(seed, Stream::Wind);
    (0..t_steps)
        .map(|_| (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)))
        .collect()
}

impl DisturbanceSource {
    pub fn generate(&self, t_steps: usize) -> Result<Vec<DVector<f64>>> {
        match self {
            DisturbanceSource::Scripted(values) => {
                if values.len() < t_steps {
                    return Err(Error::Config(format!(
                        "scripted disturbance trace has {} entries, need {t_steps}",
                        values.len()
                    )));
                }
                Ok(values[..t_steps].to_vec())
            }
            DisturbanceSource::UniformWindComposite {
                seed,
                wind_lo,
                wind_hi,
                wind_gain,
                a,
                reference,
            } => {
                if a.nrows() != 4 || a.ncols() != 4 {
                    return Err(Error::Config(
                        "uniform-wind composite assumes the 4-state tracking plant".into(),
                    ));
                }
                if reference.len() < t_steps + 1 {
                    return Err(Error::Config(format!(
                        "reference has {} samples, need {}",
                        reference.len(),
                        t_steps + 1
                    )));
                }
                let draws = uniform_wind_draws(*seed, t_steps, *wind_lo, *wind_hi);
                let mut out = Vec::with_capacity(t_steps);
                for t in 0..t_steps {
                    let mut w = a * &reference[t] - &reference[t + 1];
                    w[2] += wind_gain * draws[t].0;
                    w[3] += wind_gain * draws[t].1;
                    out.push(w);
                }
                Ok(out)
            }
            DisturbanceSource::IidUniform { seed, mean, scale } => {
                let mut rng = stream_rng(*seed, Stream::Noise);
                let mut out = Vec::with_capacity(t_steps);
                for _ in 0..t_steps {
                    let w = DVector::from_iterator(
                        mean.len(),
                        mean.iter().zip(scale.iter()).map(|(&mu, &s)| {
                            if s > 0.0 {
                                mu + rng.gen_range(-s..=s)
                            } else {
                                mu
                            }
                        }),
                    );
                    out.push(w);
                }
                Ok(out)
            }
        }
    }

    /// Analytic supremum of `‖w_t‖` over the generator's support; the
    /// value recorded as `W` in the model.
    pub fn norm_bound(&self, t_steps: usize) -> Result<f64> {
        match self {
            DisturbanceSource::Scripted(values) => Ok(values
                .iter()
                .take(t_steps)
                .map(|w| w.norm())
                .fold(0.0, f64::max)),
            DisturbanceSource::UniformWindComposite {
                wind_lo,
                wind_hi,
                wind_gain,
                a,
                reference,
                ..
            } => {
                let mut bound = 0.0_f64;
                let corners = [
                    (*wind_lo, *wind_lo),
                    (*wind_lo, *wind_hi),
                    (*wind_hi, *wind_lo),
                    (*wind_hi, *wind_hi),
                ];
                let upper = t_steps.min(reference.len().saturating_sub(1));
                for t in 0..upper {
                    let det = a * &reference[t] - &reference[t + 1];
                    for (z1, z2) in corners {
                        let mut w = det.clone();
                        w[2] += wind_gain * z1;
                        w[3] += wind_gain * z2;
                        bound = bound.max(w.norm());
                    }
                }
                Ok(bound)
            }
            DisturbanceSource::IidUniform { mean, scale, .. } => {
                let worst = DVector::from_iterator(
                    mean.len(),
                    mean.iter().zip(scale.iter()).map(|(&mu, &s)| mu.abs() + s),
                );
                Ok(worst.norm())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqr::drone_matrices;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn scalar_model(q: f64, r: f64) -> SystemModel {
        SystemModel::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
            10.0,
        )
        .unwrap()
    }

    fn empty_trace_with(
        steps: Vec<StepRecord>,
        final_state: DVector<f64>,
    ) -> RunTrace {
        RunTrace {
            seed: 0,
            config_digest: String::new(),
            steps,
            final_state,
            final_theta: DVector::zeros(0),
            embeddings: vec![],
            bases: vec![],
        }
    }

    fn record(t: usize, x: DVector<f64>, u: DVector<f64>, w: DVector<f64>, model: &SystemModel) -> StepRecord {
        let stage = model.stage_cost(&x, &u);
        StepRecord {
            t,
            x,
            u,
            w,
            predicted: vec![],
            theta: DVector::zeros(0),
            stage_cost: stage,
            eta: 0.0,
            grad_norm: 0.0,
            clipped: 0,
        }
    }

    #[test]
    fn step_zero_stays_zero() {
        let model = scalar_model(1.0, 1.0);
        let z = DVector::zeros(1);
        let next = step(&model, &z, &z, &z).unwrap();
        assert_eq!(next[0], 0.0);
    }

    #[test]
    fn step_scalar_affine() {
        let model = scalar_model(1.0, 1.0);
        let next = step(
            &model,
            &nalgebra::dvector![1.0],
            &nalgebra::dvector![-1.0],
            &nalgebra::dvector![0.5],
        )
        .unwrap();
        assert_relative_eq!(next[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn step_identity_probe_reads_a_column() {
        let (a, b, q, r) = drone_matrices();
        let model = SystemModel::new(a.clone(), b, q, r, 10.0).unwrap();
        let e1 = DVector::from_fn(4, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let next = step(&model, &e1, &DVector::zeros(2), &DVector::zeros(4)).unwrap();
        assert_eq!(next, a.column(0).into_owned());
    }

    #[test]
    fn step_rejects_dimension_mismatch() {
        let model = scalar_model(1.0, 1.0);
        let err = step(
            &model,
            &DVector::zeros(2),
            &DVector::zeros(1),
            &DVector::zeros(1),
        );
        assert!(err.is_err());
    }

    #[test]
    fn total_cost_zero_trace() {
        let model = scalar_model(1.0, 1.0);
        let trace = empty_trace_with(vec![], DVector::zeros(1));
        assert_eq!(total_cost(&trace, &model).unwrap(), 0.0);
    }

    #[test]
    fn total_cost_scalar_one_step() {
        // q=r=1, T=1, x0=1, u0=0, w0=0: stage 1 + terminal P.
        let model = scalar_model(1.0, 1.0);
        let x0 = nalgebra::dvector![1.0];
        let u0 = nalgebra::dvector![0.0];
        let w0 = nalgebra::dvector![0.0];
        let x1 = step(&model, &x0, &u0, &w0).unwrap();
        let trace = empty_trace_with(vec![record(0, x0, u0, w0, &model)], x1);
        let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
        assert_relative_eq!(total_cost(&trace, &model).unwrap(), 1.0 + phi, epsilon = 1e-9);
        assert_relative_eq!(total_cost(&trace, &model).unwrap(), 2.618034, epsilon = 1e-6);
    }

    #[test]
    fn total_cost_matches_naive_summation() {
        let model = scalar_model(0.7, 0.3);
        let mut rng = stream_rng(42, Stream::Instance);
        let mut x = nalgebra::dvector![0.3];
        let mut steps = Vec::new();
        let mut naive = 0.0;
        for t in 0..20 {
            let u = nalgebra::dvector![rng.gen_range(-1.0..1.0)];
            let w = nalgebra::dvector![rng.gen_range(-0.5..0.5)];
            naive += 0.7 * x[0] * x[0] + 0.3 * u[0] * u[0];
            let next = step(&model, &x, &u, &w).unwrap();
            steps.push(record(t, x.clone(), u, w, &model));
            x = next;
        }
        naive += model.p()[(0, 0)] * x[0] * x[0];
        let trace = empty_trace_with(steps, x);
        assert_relative_eq!(total_cost(&trace, &model).unwrap(), naive, epsilon = 1e-12);
    }

    #[test]
    fn total_cost_rejects_gapped_trace() {
        let model = scalar_model(1.0, 1.0);
        let z = nalgebra::dvector![0.0];
        let mut r0 = record(0, z.clone(), z.clone(), z.clone(), &model);
        r0.t = 1; // gap
        let trace = empty_trace_with(vec![r0], z);
        assert!(matches!(
            total_cost(&trace, &model),
            Err(Error::IncompleteTrace(_))
        ));
    }

    #[test]
    fn optimal_cost_zero_everything() {
        let model = scalar_model(1.0, 1.0);
        let w = vec![DVector::zeros(1); 6];
        let cost = optimal_cost(&model, &DVector::zeros(1), &w).unwrap();
        assert!(cost.abs() < 1e-15);
    }

    #[test]
    fn optimal_cost_no_disturbance_is_lqr_rollout() {
        // With w ≡ 0 the tail term vanishes and the controller is u = -Kx.
        let (a, b, q, r) = drone_matrices();
        let model = SystemModel::new(a, b, q, r, 10.0).unwrap();
        let x0 = nalgebra::dvector![1.0, -0.5, 0.2, 0.1];
        let w = vec![DVector::zeros(4); 12];
        let cost = optimal_cost(&model, &x0, &w).unwrap();

        let mut x = x0.clone();
        let mut direct = 0.0;
        for wt in &w {
            let u = -(model.gain_k() * &x);
            direct += model.stage_cost(&x, &u);
            x = step(&model, &x, &u, wt).unwrap();
        }
        direct += model.terminal_cost(&x);
        assert_relative_eq!(cost, direct, max_relative = 1e-12);
    }

    /// Dense least-squares oracle: minimize the batch quadratic cost
    /// over all stacked inputs directly.
    fn dense_qp_cost_oracle(model: &SystemModel, x0: &DVector<f64>, w: &[DVector<f64>]) -> f64 {
        let n = model.state_dim();
        let m = model.input_dim();
        let t_steps = w.len();
        // X = Phi x0 + Gamma U + Lambda Wstack, X = [x_1; ...; x_T].
        let mut phi = DMatrix::<f64>::zeros(n * t_steps, n);
        let mut gamma = DMatrix::<f64>::zeros(n * t_steps, m * t_steps);
        let mut lambda = DMatrix::<f64>::zeros(n * t_steps, n * t_steps);
        let mut a_pow = vec![DMatrix::<f64>::identity(n, n)];
        for i in 0..t_steps {
            a_pow.push(model.a() * &a_pow[i]);
        }
        for i in 0..t_steps {
            phi.view_mut((i * n, 0), (n, n)).copy_from(&a_pow[i + 1]);
            for j in 0..=i {
                let blk_b = &a_pow[i - j] * model.b();
                gamma.view_mut((i * n, j * m), (n, m)).copy_from(&blk_b);
                lambda
                    .view_mut((i * n, j * n), (n, n))
                    .copy_from(&a_pow[i - j]);
            }
        }
        let mut qbar = DMatrix::<f64>::zeros(n * t_steps, n * t_steps);
        for i in 0..t_steps {
            let blk = if i + 1 == t_steps { model.p() } else { model.q() };
            qbar.view_mut((i * n, i * n), (n, n)).copy_from(blk);
        }
        let mut rbar = DMatrix::<f64>::zeros(m * t_steps, m * t_steps);
        for i in 0..t_steps {
            rbar.view_mut((i * m, i * m), (m, m)).copy_from(model.r());
        }
        let wstack = DVector::from_iterator(
            n * t_steps,
            w.iter().flat_map(|wt| wt.iter().copied()),
        );
        let c = &phi * x0 + &lambda * &wstack;
        let hmat = gamma.transpose() * &qbar * &gamma + &rbar;
        let rhs = -(gamma.transpose() * &qbar * &c);
        let u = nalgebra::Cholesky::new(hmat.clone()).unwrap().solve(&rhs);
        let xfree = &c + &gamma * &u;
        let state_cost = (xfree.transpose() * &qbar * &xfree)[(0, 0)];
        let input_cost = (u.transpose() * &rbar * &u)[(0, 0)];
        (x0.transpose() * model.q() * x0)[(0, 0)] + state_cost + input_cost
    }

    #[test]
    fn optimal_cost_matches_dense_qp_oracle_scalar() {
        let model = scalar_model(1.0, 1.0);
        let mut rng = stream_rng(7, Stream::Instance);
        let w: Vec<DVector<f64>> = (0..5)
            .map(|_| nalgebra::dvector![rng.gen_range(-1.0..1.0)])
            .collect();
        let x0 = nalgebra::dvector![0.4];
        let ours = optimal_cost(&model, &x0, &w).unwrap();
        let oracle = dense_qp_cost_oracle(&model, &x0, &w);
        assert_relative_eq!(ours, oracle, epsilon = 1e-8);
    }

    #[test]
    fn optimal_cost_matches_dense_qp_oracle_random_instances() {
        let mut rng = stream_rng(99, Stream::Instance);
        for trial in 0..25 {
            let n = rng.gen_range(1..=3);
            let m = rng.gen_range(1..=n);
            let t_steps = rng.gen_range(1..=8);
            let mut a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let rho = crate::lqr::spectral_radius(&a);
            if rho > 0.0 {
                a *= rng.gen_range(0.3..0.95) / rho;
            }
            let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
            let mq = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let q = &mq * mq.transpose() + DMatrix::identity(n, n) * 0.2;
            let mr = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
            let r = &mr * mr.transpose() + DMatrix::identity(m, m) * 0.2;
            let model = SystemModel::new(a, b, q, r, 100.0).unwrap();
            let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let w: Vec<DVector<f64>> = (0..t_steps)
                .map(|_| DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            let ours = optimal_cost(&model, &x0, &w).unwrap();
            let oracle = dense_qp_cost_oracle(&model, &x0, &w);
            let denom = oracle.abs().max(1.0);
            assert!(
                (ours - oracle).abs() / denom < 1e-8,
                "trial {trial}: {ours} vs {oracle}"
            );
        }
    }

    #[test]
    fn disturbance_sources_are_deterministic() {
        let src = DisturbanceSource::IidUniform {
            seed: 5,
            mean: nalgebra::dvector![0.5],
            scale: nalgebra::dvector![0.5],
        };
        let a = src.generate(64).unwrap();
        let b = src.generate(64).unwrap();
        assert_eq!(a, b);
        for w in &a {
            assert!(w[0] >= 0.0 && w[0] <= 1.0);
            assert!(w.norm() <= src.norm_bound(64).unwrap() + 1e-12);
        }
    }

    #[test]
    fn wind_composite_respects_bound() {
        let (a, ..) = drone_matrices();
        let reference: Vec<DVector<f64>> = (0..65)
            .map(|t| nalgebra::dvector![t as f64 * 2.0, t as f64, 0.0, 0.0])
            .collect();
        let src = DisturbanceSource::UniformWindComposite {
            seed: 11,
            wind_lo: -20.0,
            wind_hi: 20.0,
            wind_gain: -0.2,
            a: a.clone(),
            reference,
        };
        let w = src.generate(64).unwrap();
        let bound = src.norm_bound(64).unwrap();
        for wt in &w {
            assert!(wt.norm() <= bound + 1e-12);
            // Wind components land in gain * [-20, 20].
            assert!(wt[2].abs() <= 0.2 * 20.0 + 2.0 + 1e-12);
        }
        let w2 = src.generate(64).unwrap();
        assert_eq!(w, w2);
    }
}
