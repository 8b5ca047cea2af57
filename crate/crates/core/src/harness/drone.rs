//! Trajectory-tracking scenario: a 4-state plant (position deviation
//! plus velocity, 0.2 time-unit period) follows a piecewise-linear
//! reference path under uniform random wind.
//!
//! The disturbance is `w_t = A y_t − y_{t+1} + Z_t` with the wind pair
//! entering the velocity rows scaled by −0.2; the context channel
//! carries the realized wind pair, so the decoder's two coefficients
//! `(θ₁, θ₂)` reproduce the wind term exactly at `(−0.2, −0.2)`.

use std::sync::Arc;

use nalgebra::DVector;

use super::config::{RunConfig, ScenarioSpec};
use super::{
    default_horizon, estimate_gradient_bound, loss_spec_from_config, resolve_schedule, Scenario,
    SeedData,
};
use crate::cdp::{ContextRecord, ContextSource, HypothesisSet, MetadataEncoder, ParamLayout, ParamSlot};
use crate::dynamics::{uniform_wind_draws, DisturbanceSource};
use crate::error::{Error, Result};
use crate::lqr::{drone_matrices, SystemModel};

/// Wind scale into the velocity rows.
pub const WIND_GAIN: f64 = -0.2;

/// Unit-scale inspection circuit, scaled to the configured total
/// length at build time.
const UNIT_WAYPOINTS: [(f64, f64); 9] = [
    (0.00, 0.00),
    (0.16, 0.05),
    (0.30, 0.01),
    (0.42, 0.12),
    (0.55, 0.08),
    (0.68, 0.18),
    (0.80, 0.12),
    (0.92, 0.22),
    (1.00, 0.17),
];

/// Piecewise-linear reference sampled at constant arc-length steps:
/// `count` positions covering the whole path, as 4-state vectors with
/// zero velocity reference.
pub fn reference_path(path_length: f64, count: usize) -> Vec<DVector<f64>> {
    let raw: Vec<(f64, f64)> = UNIT_WAYPOINTS.to_vec();
    let mut seg_lengths = Vec::with_capacity(raw.len() - 1);
    let mut total = 0.0;
    for pair in raw.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
        seg_lengths.push(len);
        total += len;
    }
    let scale = path_length / total;

    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return out;
    }
    let step = if count > 1 {
        path_length / (count - 1) as f64
    } else {
        0.0
    };
    let mut seg = 0usize;
    let mut seg_start = 0.0;
    for i in 0..count {
        let s = (i as f64 * step).min(path_length);
        while seg + 1 < seg_lengths.len() && s > seg_start + seg_lengths[seg] * scale {
            seg_start += seg_lengths[seg] * scale;
            seg += 1;
        }
        let seg_len = seg_lengths[seg] * scale;
        let frac = if seg_len > 0.0 {
            ((s - seg_start) / seg_len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (x0, y0) = raw[seg];
        let (x1, y1) = raw[seg + 1];
        let px = (x0 + (x1 - x0) * frac) * scale;
        let py = (y0 + (y1 - y0) * frac) * scale;
        out.push(nalgebra::dvector![px, py, 0.0, 0.0]);
    }
    out
}

/// Polyline length of a sampled reference (positions only).
pub fn sampled_path_length(reference: &[DVector<f64>]) -> f64 {
    reference
        .windows(2)
        .map(|pair| {
            let dx = pair[1][0] - pair[0][0];
            let dy = pair[1][1] - pair[0][1];
            (dx * dx + dy * dy).sqrt()
        })
        .sum()
}

pub fn build_drone_scenario(config: &RunConfig) -> Result<Scenario> {
    let ScenarioSpec::Drone {
        path_length,
        wind_lo,
        wind_hi,
        radius,
    } = &config.scenario
    else {
        return Err(Error::Config("not a drone scenario".into()));
    };
    if wind_hi < wind_lo {
        return Err(Error::Config("wind range is inverted".into()));
    }
    let t_steps = config.t_steps;
    let (a, b, q, r) = drone_matrices();
    let reference = Arc::new(reference_path(*path_length, t_steps + 2));

    // Analytic disturbance bound over the whole run (any seed: the
    // wind part is a corner maximum, the drift part is deterministic).
    let probe = DisturbanceSource::UniformWindComposite {
        seed: 0,
        wind_lo: *wind_lo,
        wind_hi: *wind_hi,
        wind_gain: WIND_GAIN,
        a: a.clone(),
        reference: reference.as_ref().clone(),
    };
    let w_bound = probe.norm_bound(t_steps)?.max(1e-6);
    let model = SystemModel::new(a.clone(), b, q, r, w_bound)?;

    let layout = ParamLayout::sparse(4, 2, vec![ParamSlot::C(2, 0), ParamSlot::C(3, 1)])?;
    let theta0 = DVector::zeros(2);
    let set = HypothesisSet::centered_at_zero(2, *radius)?;
    let k = config
        .k
        .unwrap_or_else(|| default_horizon(model.rho_f(), t_steps));
    let loss = loss_spec_from_config(config, &model, k);

    let wind_lo = *wind_lo;
    let wind_hi = *wind_hi;
    let model_a = a.clone();
    let reference_for_data = Arc::clone(&reference);
    let gen_data = Arc::new(move |seed: u64| -> Result<SeedData> {
        let source = DisturbanceSource::UniformWindComposite {
            seed,
            wind_lo,
            wind_hi,
            wind_gain: WIND_GAIN,
            a: model_a.clone(),
            reference: reference_for_data.as_ref().clone(),
        };
        let disturbances = source.generate(t_steps)?;
        // The same stream the composite consumed: the context channel
        // sees the realized wind pairs.
        let draws = uniform_wind_draws(seed, t_steps, wind_lo, wind_hi);
        let mut contexts = Vec::with_capacity(t_steps);
        let mut bases = Vec::with_capacity(t_steps);
        for tau in 0..t_steps {
            let mut ctx = ContextRecord::empty(tau);
            ctx.source = ContextSource::Scripted;
            ctx.description = format!(
                "wind gusts ({:.1}, {:.1}) expected at step {tau}",
                draws[tau].0, draws[tau].1
            );
            ctx.metadata.insert("z1".into(), draws[tau].0);
            ctx.metadata.insert("z2".into(), draws[tau].1);
            contexts.push(ctx);
            bases.push(&model_a * &reference_for_data[tau] - &reference_for_data[tau + 1]);
        }
        let encoder = Arc::new(MetadataEncoder::new(
            vec!["z1".into(), "z2".into()],
            vec![1.0, 1.0],
        )?);
        Ok(SeedData {
            disturbances,
            contexts,
            bases,
            encoder,
        })
    });

    // Gradient-bound estimation data: wind-only targets (w minus the
    // reference drift), wind-pair embeddings.
    let est_draws = uniform_wind_draws(super::ESTIMATION_SEED, t_steps.max(1), wind_lo, wind_hi);
    let est_targets: Vec<DVector<f64>> = est_draws
        .iter()
        .map(|&(z1, z2)| nalgebra::dvector![0.0, 0.0, WIND_GAIN * z1, WIND_GAIN * z2])
        .collect();
    let est_embeddings: Vec<DVector<f64>> = est_draws
        .iter()
        .map(|&(z1, z2)| nalgebra::dvector![z1, z2])
        .collect();
    let scenario_loss = crate::losses::LossSpec::special(&model, k);
    let startup = super::startup_region(&theta0, &set)?;
    let schedule = resolve_schedule(
        &config.learning_rate,
        &set,
        || {
            estimate_gradient_bound(
                &scenario_loss,
                &layout,
                &startup,
                &est_targets,
                &est_embeddings,
                k,
            )
        },
        k,
    )?;

    Ok(Scenario {
        model,
        t_steps,
        k,
        layout,
        theta0,
        hypothesis: set,
        loss,
        schedule,
        variant: super::RunVariant::Tuned,
        digest: config.digest(),
        seed_data: gen_data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{LossChoice, LearningRateConfig, NormalizerChoice, CONFIG_VERSION};
    use approx::assert_relative_eq;

    pub(crate) fn drone_config(t_steps: usize, seeds: Vec<u64>, loss: LossChoice) -> RunConfig {
        RunConfig {
            version: CONFIG_VERSION,
            scenario: ScenarioSpec::Drone {
                path_length: 16_320.0,
                wind_lo: -20.0,
                wind_hi: 20.0,
                radius: 1.0,
            },
            t_steps,
            k: Some(5),
            loss,
            normalizer: NormalizerChoice::WindowGap,
            learning_rate: LearningRateConfig::default(),
            seeds,
            output_dir: None,
        }
    }

    #[test]
    fn reference_covers_requested_length() {
        let reference = reference_path(16_320.0, 4001);
        assert_relative_eq!(sampled_path_length(&reference), 16_320.0, max_relative = 1e-3);
    }

    #[test]
    fn optimal_coefficients_make_predictions_exact() {
        let config = drone_config(60, vec![4], LossChoice::Special);
        let scenario = build_drone_scenario(&config).unwrap();
        let theta_star = nalgebra::dvector![-0.2, -0.2];
        let trace = scenario.run_seed_frozen(4, &theta_star).unwrap();
        // Every first prediction equals the realized disturbance.
        for step in &trace.steps {
            assert!(
                (step.predicted[0].clone() - step.w.clone()).amax() < 1e-10,
                "step {}",
                step.t
            );
        }
        assert_eq!(trace.clip_count(), 0);
    }

    #[test]
    fn zero_coefficients_cost_more_than_optimal() {
        let config = drone_config(120, vec![9], LossChoice::Special);
        let scenario = build_drone_scenario(&config).unwrap();
        let star = scenario
            .run_seed_frozen(9, &nalgebra::dvector![-0.2, -0.2])
            .unwrap();
        let zero = scenario
            .run_seed_frozen(9, &nalgebra::dvector![0.0, 0.0])
            .unwrap();
        let j_star = crate::dynamics::total_cost(&star, &scenario.model).unwrap();
        let j_zero = crate::dynamics::total_cost(&zero, &scenario.model).unwrap();
        assert!(j_zero > j_star, "{j_zero} <= {j_star}");
    }
}
