//! Scenario construction, the closed control loop, experiment
//! orchestration across seeds, and trace persistence.
//!
//! One step of the loop is: assemble the context window, encode,
//! decode with the current parameters, clip, take the explicit MPC
//! action, advance the plant, reveal the disturbance, then apply the
//! delayed tuner update. Replicas (seeds) are independent and fan out
//! to a worker pool; results merge in seed order.

pub mod battery;
pub mod config;
pub mod drone;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::cdp::{predict_window, ContextRecord, DecoderParams, Encoder, HypothesisSet, ParamLayout};
use crate::dynamics::{step, RunTrace, StepRecord};
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::lqr::SystemModel;
use crate::mpc::{MpcController, PredictionWindow};
use crate::tuner::{LearningRate, TunerState};

pub use config::{
    BatteryEncoderSource, LossChoice, LearningRateConfig, NormalizerChoice, PredictorVariant,
    RunConfig, ScenarioSpec, CONFIG_VERSION,
};

/// Seed used for the per-scenario gradient-bound estimate; independent
/// of the run seeds so the schedule never depends on the seed list.
const ESTIMATION_SEED: u64 = 0xE57;

/// Exogenous data for one replica.
pub struct SeedData {
    pub disturbances: Vec<DVector<f64>>,
    pub contexts: Vec<ContextRecord>,
    /// Known feedforward part of each prediction, zero when absent.
    pub bases: Vec<DVector<f64>>,
    pub encoder: Arc<dyn Encoder>,
}

/// How the predictor behaves over the run.
#[derive(Debug, Clone)]
pub enum RunVariant {
    /// Online-tuned decoder (the full loop).
    Tuned,
    /// Decoder frozen at the given packed parameters.
    Frozen(DVector<f64>),
    /// Constant prediction equal to the run-average disturbance;
    /// bypasses the tuner entirely.
    FixedAverage,
    /// Constant zero prediction; bypasses the tuner entirely.
    FixedZero,
}

type SeedDataFn = dyn Fn(u64) -> Result<SeedData> + Send + Sync;

/// Everything needed to run replicas of one experiment.
pub struct Scenario {
    pub model: SystemModel,
    pub t_steps: usize,
    pub k: usize,
    pub layout: ParamLayout,
    pub theta0: DVector<f64>,
    pub hypothesis: HypothesisSet,
    pub loss: LossSpec,
    pub schedule: LearningRate,
    pub variant: RunVariant,
    pub digest: String,
    seed_data: Arc<SeedDataFn>,
}

impl Scenario {
    pub fn seed_data(&self, seed: u64) -> Result<SeedData> {
        (self.seed_data)(seed)
    }

    /// Run one replica with the scenario's own variant.
    pub fn run_seed(&self, seed: u64) -> Result<RunTrace> {
        self.run_with(seed, &self.variant)
    }

    /// Replay one replica with the decoder frozen at `theta` (the
    /// identical disturbance and context realization).
    pub fn run_seed_frozen(&self, seed: u64, theta: &DVector<f64>) -> Result<RunTrace> {
        self.run_with(seed, &RunVariant::Frozen(theta.clone()))
    }

    fn run_with(&self, seed: u64, variant: &RunVariant) -> Result<RunTrace> {
        let data = self.seed_data(seed)?;
        let t_steps = self.t_steps;
        if data.disturbances.len() < t_steps
            || data.contexts.len() < t_steps
            || data.bases.len() < t_steps
        {
            return Err(Error::Config(format!(
                "seed data shorter than the {t_steps}-step horizon"
            )));
        }
        let controller = MpcController::new(&self.model, self.k)?;
        let n = self.model.state_dim();

        let mut tuner = match variant {
            RunVariant::Tuned => Some(TunerState::new(
                DecoderParams::new(self.layout.clone(), self.theta0.clone())?,
                self.hypothesis.clone(),
                self.schedule.clone(),
                self.k,
            )?),
            _ => None,
        };
        let frozen = match variant {
            RunVariant::Frozen(theta) => {
                Some(DecoderParams::new(self.layout.clone(), theta.clone())?)
            }
            _ => None,
        };
        let fixed_prediction = match variant {
            RunVariant::FixedAverage => {
                let mut mean = DVector::zeros(n);
                for w in data.disturbances.iter().take(t_steps) {
                    mean += w;
                }
                if t_steps > 0 {
                    mean /= t_steps as f64;
                }
                Some(mean)
            }
            RunVariant::FixedZero => Some(DVector::zeros(n)),
            _ => None,
        };

        let mut x = DVector::zeros(n);
        let mut steps: Vec<StepRecord> = Vec::with_capacity(t_steps);
        let mut embeddings_per_step: Vec<DVector<f64>> = Vec::with_capacity(t_steps);
        let mut realized_targets: Vec<DVector<f64>> = Vec::with_capacity(t_steps);

        for t in 0..t_steps {
            let end = (t + self.k).min(t_steps);
            let (window, window_embeddings) = match (&tuner, &frozen, &fixed_prediction) {
                (Some(state), _, _) => {
                    let wp = predict_window(
                        data.encoder.as_ref(),
                        state.params(),
                        &data.contexts[t..end],
                        Some(&data.bases[t..end]),
                        t,
                        self.model.w_bound(),
                    )?;
                    (wp.window, wp.embeddings)
                }
                (_, Some(params), _) => {
                    let wp = predict_window(
                        data.encoder.as_ref(),
                        params,
                        &data.contexts[t..end],
                        Some(&data.bases[t..end]),
                        t,
                        self.model.w_bound(),
                    )?;
                    (wp.window, wp.embeddings)
                }
                (_, _, Some(constant)) => {
                    let window = PredictionWindow::new(
                        t,
                        vec![constant.clone(); end - t],
                        self.model.w_bound(),
                    )?;
                    (window, vec![DVector::zeros(0); end - t])
                }
                _ => unreachable!("one predictor mode is always set"),
            };

            let theta_now = match (&tuner, &frozen) {
                (Some(state), _) => state.theta().clone(),
                (_, Some(params)) => params.theta().clone(),
                _ => DVector::zeros(0),
            };

            let u = controller.action(&x, &window)?;
            let stage = self.model.stage_cost(&x, &u);
            let w = data.disturbances[t].clone();
            let next = step(&self.model, &x, &u, &w)?;

            embeddings_per_step.push(window_embeddings.first().cloned().unwrap_or_else(|| {
                DVector::zeros(0)
            }));
            steps.push(StepRecord {
                t,
                x: x.clone(),
                u,
                w: w.clone(),
                predicted: window.predictions().to_vec(),
                theta: theta_now,
                stage_cost: stage,
                eta: 0.0,
                grad_norm: 0.0,
                clipped: window.clipped(),
            });
            x = next;
            realized_targets.push(&w - &data.bases[t]);

            if let Some(state) = tuner.as_mut() {
                state.record_prediction(t, window_embeddings)?;
                if let Some(report) = state.update_if_ready(t, &realized_targets, &self.loss)? {
                    let record = steps.last_mut().expect("step just pushed");
                    record.eta = report.eta;
                    record.grad_norm = report.grad_norm;
                }
            }
        }

        let final_theta = match (&tuner, &frozen) {
            (Some(state), _) => state.theta().clone(),
            (_, Some(params)) => params.theta().clone(),
            _ => DVector::zeros(0),
        };
        Ok(RunTrace {
            seed,
            config_digest: self.digest.clone(),
            steps,
            final_state: x,
            final_theta,
            embeddings: embeddings_per_step,
            bases: data.bases[..t_steps].to_vec(),
        })
    }
}

/// Default prediction horizon `ceil(log_{1/ρ̂} T)`, clamped to
/// `[1, min(64, T)]`.
pub fn default_horizon(rho: f64, t_steps: usize) -> usize {
    if t_steps <= 1 {
        return 1;
    }
    let upper = 64.min(t_steps);
    if rho <= 0.0 {
        return 1;
    }
    let k = ((t_steps as f64).ln() / (1.0 / rho).ln()).ceil();
    if !k.is_finite() || k < 1.0 {
        1
    } else {
        (k as usize).clamp(1, upper)
    }
}

/// Build the scenario described by a validated config.
pub fn build_scenario(config: &RunConfig) -> Result<Scenario> {
    config.validate()?;
    match &config.scenario {
        ScenarioSpec::Drone { .. } => drone::build_drone_scenario(config),
        ScenarioSpec::BatterySynthetic { .. } => battery::build_battery_scenario(config),
        ScenarioSpec::Custom { .. } => build_custom_scenario(config),
    }
}

/// Run every seed of the config; one trace per seed, in seed order.
pub fn run_scenario(config: &RunConfig) -> Result<Vec<RunTrace>> {
    let scenario = build_scenario(config)?;
    let traces: Result<Vec<RunTrace>> = config
        .seeds
        .par_iter()
        .map(|&seed| scenario.run_seed(seed))
        .collect();
    let traces = traces?;
    if let Some(dir) = &config.output_dir {
        write_outputs(config, &scenario, &traces, Path::new(dir))?;
    }
    Ok(traces)
}

/// Persist a run: `<out>/<digest>/config.json`, one CSV per seed, and
/// a JSON summary.
pub fn write_outputs(
    config: &RunConfig,
    scenario: &Scenario,
    traces: &[RunTrace],
    out_dir: &Path,
) -> Result<PathBuf> {
    let dir = out_dir.join(scenario.digest.as_str());
    std::fs::create_dir_all(&dir)?;
    std::fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(config)?,
    )?;
    let mut summaries = Vec::with_capacity(traces.len());
    let mut mean_cost = 0.0;
    for trace in traces {
        std::fs::write(dir.join(format!("seed-{}.csv", trace.seed)), trace.to_csv())?;
        let summary = trace.summary(&scenario.model)?;
        if let Some(cost) = summary.get("total_cost").and_then(|v| v.as_f64()) {
            mean_cost += cost;
        }
        summaries.push(summary);
    }
    if !traces.is_empty() {
        mean_cost /= traces.len() as f64;
    }
    let summary = serde_json::json!({
        "digest": scenario.digest,
        "t_steps": scenario.t_steps,
        "k": scenario.k,
        "seeds": traces.iter().map(|t| t.seed).collect::<Vec<u64>>(),
        "mean_total_cost": mean_cost,
        "per_seed": summaries,
    });
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(dir)
}

/// Replay a stored run directory and byte-compare every seed CSV.
pub fn replay_run_dir(run_dir: &Path) -> Result<bool> {
    let config = RunConfig::from_file(&run_dir.join("config.json"))?;
    let scenario = build_scenario(&config)?;
    let mut identical = true;
    for &seed in &config.seeds {
        let trace = scenario.run_seed(seed)?;
        let stored = std::fs::read(run_dir.join(format!("seed-{seed}.csv")))?;
        if stored != trace.to_csv().into_bytes() {
            identical = false;
        }
    }
    Ok(identical)
}

pub(crate) fn matrix_from_rows(name: &'static str, rows: &[Vec<f64>]) -> Result<nalgebra::DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Config(format!("{name}: empty matrix")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{name}: ragged or empty rows")));
    }
    Ok(nalgebra::DMatrix::from_row_slice(
        rows.len(),
        ncols,
        &rows.iter().flatten().copied().collect::<Vec<f64>>(),
    ))
}

/// Resolve the learning-rate schedule: explicit list if given, else
/// the formula with `D` defaulting to the set diameter and `G` to the
/// empirical gradient bound of the scenario's task-aware loss,
/// sampled over a small neighborhood of the initialization (the
/// startup calibration; the ball-sup bound overdamps every loss).
pub(crate) fn resolve_schedule(
    lr: &LearningRateConfig,
    set: &HypothesisSet,
    estimate_g: impl FnOnce() -> Result<f64>,
    k: usize,
) -> Result<LearningRate> {
    if let Some(values) = &lr.explicit {
        if values.is_empty() {
            return Err(Error::Config("explicit learning-rate list is empty".into()));
        }
        return Ok(LearningRate::Explicit(values.clone()));
    }
    let d = lr.d.unwrap_or_else(|| set.diameter());
    let g = match lr.g {
        Some(g) => g,
        None => estimate_g()?,
    };
    LearningRate::formula(d, g, k)
}

/// The neighborhood of the initialization used for the default
/// schedule calibration.
pub(crate) fn startup_region(theta0: &DVector<f64>, set: &HypothesisSet) -> Result<HypothesisSet> {
    HypothesisSet::new(theta0.clone(), 0.1 * set.radius)
}

/// Sample windows of the scenario's own data for the gradient-bound
/// estimate. The schedule is a property of the scenario, not of the
/// surrogate being tuned: callers pass the scenario's task-aware
/// (excess-cost) loss here so every surrogate shares one schedule.
pub(crate) fn estimate_gradient_bound(
    loss: &LossSpec,
    layout: &ParamLayout,
    set: &HypothesisSet,
    targets: &[DVector<f64>],
    embeddings: &[DVector<f64>],
    k: usize,
) -> Result<f64> {
    use rand::Rng;
    let t_steps = targets.len();
    if t_steps == 0 {
        return Ok(1.0);
    }
    let mut pick = crate::rng::stream_rng(ESTIMATION_SEED, crate::rng::Stream::Sampler);
    let targets = targets.to_vec();
    let embeddings = embeddings.to_vec();
    crate::losses::gradient_bound_estimate(
        loss,
        layout,
        set,
        move |_| {
            let len = k.min(t_steps);
            let start = if t_steps > len {
                pick.gen_range(0..t_steps - len)
            } else {
                0
            };
            (
                targets[start..start + len].to_vec(),
                embeddings[start..start + len].to_vec(),
            )
        },
        2000,
        ESTIMATION_SEED,
        1.5,
        1e-6,
    )
}

pub(crate) fn loss_spec_from_config(
    config: &RunConfig,
    model: &SystemModel,
    k: usize,
) -> LossSpec {
    let spec = match config.loss {
        LossChoice::Special => LossSpec::special(model, k),
        LossChoice::Mse => LossSpec::mse(),
        LossChoice::Mae => LossSpec::mae(),
    };
    match config.normalizer {
        NormalizerChoice::WindowGap => spec,
        NormalizerChoice::WindowLen => {
            spec.with_normalizer(crate::losses::Normalizer::WindowLen)
        }
    }
}

fn build_custom_scenario(config: &RunConfig) -> Result<Scenario> {
    let ScenarioSpec::Custom {
        a,
        b,
        q,
        r,
        disturbance_mean,
        disturbance_scale,
        embedding_dim,
        embedding_scale,
        theta0,
        radius,
    } = &config.scenario
    else {
        return Err(Error::Config("not a custom scenario".into()));
    };
    let a = matrix_from_rows("A", a)?;
    let b = matrix_from_rows("B", b)?;
    let q = matrix_from_rows("Q", q)?;
    let r = matrix_from_rows("R", r)?;
    let n = a.nrows();
    if disturbance_mean.len() != n || disturbance_scale.len() != n {
        return Err(Error::Config(
            "disturbance mean/scale must match the state dimension".into(),
        ));
    }
    let mean = DVector::from_vec(disturbance_mean.clone());
    let scale = DVector::from_vec(disturbance_scale.clone());
    let w_bound = {
        let worst = DVector::from_iterator(
            n,
            mean.iter().zip(scale.iter()).map(|(&m, &s)| m.abs() + s),
        );
        worst.norm().max(1e-9)
    };
    let model = SystemModel::new(a, b, q, r, w_bound)?;

    let p = *embedding_dim;
    let layout = ParamLayout::full(n, p);
    let theta0 = match theta0 {
        Some(values) => {
            if values.len() != layout.dim() {
                return Err(Error::Config(format!(
                    "theta0 has {} entries, layout needs {}",
                    values.len(),
                    layout.dim()
                )));
            }
            DVector::from_vec(values.clone())
        }
        None => DVector::zeros(layout.dim()),
    };
    let set = HypothesisSet::centered_at_zero(layout.dim(), *radius)?;
    let k = config
        .k
        .unwrap_or_else(|| default_horizon(model.rho_f(), config.t_steps));
    let loss = loss_spec_from_config(config, &model, k);

    let emb_scale = *embedding_scale;
    let t_steps = config.t_steps;
    let mean_c = mean.clone();
    let scale_c = scale.clone();
    let gen_data = Arc::new(move |seed: u64| -> Result<SeedData> {
        use rand::Rng;
        let source = crate::dynamics::DisturbanceSource::IidUniform {
            seed,
            mean: mean_c.clone(),
            scale: scale_c.clone(),
        };
        let disturbances = source.generate(t_steps)?;
        let mut rng = crate::rng::stream_rng(seed, crate::rng::Stream::Metadata);
        let mut contexts = Vec::with_capacity(t_steps);
        for tau in 0..t_steps {
            let mut ctx = ContextRecord::empty(tau);
            for j in 0..p {
                ctx.metadata.insert(
                    format!("e{j}"),
                    if emb_scale > 0.0 {
                        rng.gen_range(-emb_scale..=emb_scale)
                    } else {
                        0.0
                    },
                );
            }
            ctx.source = crate::cdp::ContextSource::Scripted;
            contexts.push(ctx);
        }
        let keys: Vec<String> = (0..p).map(|j| format!("e{j}")).collect();
        let encoder = Arc::new(crate::cdp::MetadataEncoder::new(keys, vec![1.0; p])?);
        Ok(SeedData {
            disturbances,
            contexts,
            bases: vec![DVector::zeros(n); t_steps],
            encoder,
        })
    });

    // Estimation data for the gradient bound.
    let est = gen_data(ESTIMATION_SEED)?;
    let est_embeddings: Vec<DVector<f64>> = est
        .contexts
        .iter()
        .map(|ctx| est.encoder.encode(ctx).map(|e| e.values))
        .collect::<Result<_>>()?;
    let scenario_loss = crate::losses::LossSpec::special(&model, k);
    let startup = startup_region(&theta0, &set)?;
    let schedule = resolve_schedule(
        &config.learning_rate,
        &set,
        || {
            estimate_gradient_bound(
                &scenario_loss,
                &layout,
                &startup,
                &est.disturbances,
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
        variant: RunVariant::Tuned,
        digest: config.digest(),
        seed_data: gen_data,
    })
}
