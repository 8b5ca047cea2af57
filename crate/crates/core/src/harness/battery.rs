//! Synthetic battery/state-of-charge scenario: a scalar plant tracks a
//! constant SoC target while compute jobs with text descriptions drive
//! the load.
//!
//! The generator plants per-channel load effects and an idle bias, so
//! the hindsight-optimal decoder coefficients are known by
//! construction and can be recovered; job descriptions are classified
//! into effort levels through the LLM client (fixture mode by
//! default), which yields the `{0,1,2,3}³` embedding the affine
//! predictor `ŵ = θ₀ + Σ_i θ_i d_i` consumes.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;

use super::config::{BatteryEncoderSource, PredictorVariant, RunConfig, ScenarioSpec};
use super::{
    default_horizon, estimate_gradient_bound, loss_spec_from_config, resolve_schedule,
    RunVariant, Scenario, SeedData,
};
use crate::cdp::{
    encode_categorical, ContextRecord, ContextSource, Embedding, Encoder, HypothesisSet,
    MetadataEncoder, NullEncoder, ParamLayout, ScriptedTableEncoder,
};
use crate::error::{Error, Result};
use crate::llm_client::{
    effort_word_from_level, ClassificationRequest, FixtureStore, LlmClient, MissPolicy,
    ResponseBody,
};
use crate::lqr::SystemModel;
use crate::rng::{stream_rng, Stream};

pub const CHANNELS: [&str; 3] = ["cpu-ws1", "cpu-ws2", "gpu-ws1"];
pub const TEMPLATE_ID: &str = "effort-v1";
pub const METADATA_KEYS: [&str; 4] = ["cpu1_files", "cpu2_cores", "gpu1_params", "gpu1_optimizer"];
pub const METADATA_SCALES: [f64; 4] = [100.0, 4.0, 40.0, 1.0];

/// Two-minute steps per day.
const STEPS_PER_DAY: usize = 720;

/// One scheduled compute job.
#[derive(Debug, Clone)]
pub struct Job {
    pub channel: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub level: u8,
    pub description: String,
    pub metadata: BTreeMap<String, f64>,
}

/// One seed's synthetic world.
pub struct BatteryData {
    pub jobs: Vec<Job>,
    /// Per-step true levels, one entry per channel.
    pub levels: Vec<[u8; 3]>,
    pub disturbances: Vec<DVector<f64>>,
    pub contexts: Vec<ContextRecord>,
}

#[derive(Debug, Clone)]
pub struct GeneratorParams {
    pub idle_bias: f64,
    pub channel_effects: [f64; 3],
    pub solar_amplitude: f64,
    pub noise_halfwidth: f64,
}

fn day_intensity(t: usize) -> f64 {
    // Light first day, busy afterwards: the slow regime drift an
    // adaptive bias can follow but a fixed average cannot.
    if t < STEPS_PER_DAY {
        0.15
    } else {
        1.2
    }
}

fn job_description(channel: usize, level: u8, rng: &mut impl Rng) -> (String, BTreeMap<String, f64>) {
    let mut metadata = BTreeMap::new();
    match channel {
        0 | 1 => {
            let files = (level as f64 * rng.gen_range(60.0..140.0)).round();
            let cores = 2 * level as u64 + rng.gen_range(0..=2);
            let ws = channel + 1;
            let description = match level {
                1 => format!(
                    "Shell command 'make -j{cores} lint' over {files} source files in folder tools/scripts (ws{ws})"
                ),
                2 => format!(
                    "Shell command 'ctest -j{cores}' over {files} test files in folder core/build (ws{ws})"
                ),
                _ => format!(
                    "Shell command 'b2 -j{cores} cxxflags=-O2' over {files} files in folder geometry/test (ws{ws})"
                ),
            };
            if channel == 0 {
                metadata.insert(METADATA_KEYS[0].to_string(), files);
            } else {
                metadata.insert(METADATA_KEYS[1].to_string(), cores as f64);
            }
            (description, metadata)
        }
        _ => {
            let params = (level as f64 * rng.gen_range(20.0..60.0)).round();
            let opt_code = (level as i64 + rng.gen_range(-1..=1)).clamp(1, 3);
            let opt_name = ["sgd", "adam", "lamb"][(opt_code - 1) as usize];
            let description = match level {
                1 => format!(
                    "Evaluate a {params}M-parameter model on the validation split with the {opt_name} optimizer (ws1 gpu)"
                ),
                2 => format!(
                    "Fine-tune a {params}M-parameter model for one epoch with the {opt_name} optimizer (ws1 gpu)"
                ),
                _ => format!(
                    "Train a {params}M-parameter model from scratch with the {opt_name} optimizer (ws1 gpu)"
                ),
            };
            metadata.insert(METADATA_KEYS[2].to_string(), params);
            metadata.insert(METADATA_KEYS[3].to_string(), opt_code as f64);
            (description, metadata)
        }
    }
}

/// Generate one seed's jobs, levels, disturbances, and contexts.
pub fn generate_battery_data(
    seed: u64,
    t_steps: usize,
    params: &GeneratorParams,
) -> BatteryData {
    let mut jobs = Vec::new();
    let mut rng_jobs = stream_rng(seed, Stream::Jobs);
    for channel in 0..3 {
        let mut cursor = rng_jobs.gen_range(0..40usize);
        while cursor < t_steps {
            let gap = (rng_jobs.gen_range(8.0..50.0) / day_intensity(cursor)) as usize;
            let start = cursor + gap.max(1);
            if start >= t_steps {
                break;
            }
            let duration = rng_jobs.gen_range(15..=75usize);
            let end = (start + duration).min(t_steps);
            let level = rng_jobs.gen_range(1..=3u8);
            let (description, metadata) = job_description(channel, level, &mut rng_jobs);
            jobs.push(Job {
                channel,
                start,
                end,
                level,
                description,
                metadata,
            });
            cursor = end;
        }
    }

    let mut levels = vec![[0u8; 3]; t_steps];
    for job in &jobs {
        for entry in levels.iter_mut().take(job.end).skip(job.start) {
            entry[job.channel] = job.level;
        }
    }

    let mut rng_noise = stream_rng(seed, Stream::Noise);
    let mut disturbances = Vec::with_capacity(t_steps);
    for (t, level) in levels.iter().enumerate() {
        let phase = (t % STEPS_PER_DAY) as f64 / STEPS_PER_DAY as f64;
        let solar = params.solar_amplitude * (std::f64::consts::TAU * phase).sin().max(0.0);
        let noise = if params.noise_halfwidth > 0.0 {
            rng_noise.gen_range(-params.noise_halfwidth..=params.noise_halfwidth)
        } else {
            0.0
        };
        let mut w = params.idle_bias + solar + noise;
        for c in 0..3 {
            w += params.channel_effects[c] * level[c] as f64;
        }
        disturbances.push(nalgebra::dvector![w]);
    }

    let mut contexts = Vec::with_capacity(t_steps);
    for (tau, _) in levels.iter().enumerate() {
        let mut ctx = ContextRecord::empty(tau);
        ctx.source = ContextSource::Log;
        for job in jobs.iter().filter(|j| j.covers(tau)) {
            for (key, value) in &job.metadata {
                ctx.metadata.insert(key.clone(), *value);
            }
        }
        contexts.push(ctx);
    }

    BatteryData {
        jobs,
        levels,
        disturbances,
        contexts,
    }
}

impl Job {
    pub fn covers(&self, tau: usize) -> bool {
        self.start <= tau && tau < self.end
    }

    pub fn classification_request(&self) -> ClassificationRequest {
        ClassificationRequest {
            template_id: TEMPLATE_ID.to_string(),
            channels: CHANNELS.iter().map(|c| c.to_string()).collect(),
            description: self.description.clone(),
        }
    }

    /// The fixture response for this job: its own channel gets the
    /// effort word, the others get "none".
    pub fn fixture_response(&self) -> ResponseBody {
        ResponseBody {
            levels: CHANNELS
                .iter()
                .enumerate()
                .map(|(c, name)| {
                    let word = if c == self.channel {
                        effort_word_from_level(self.level)
                    } else {
                        "none"
                    };
                    (name.to_string(), word.to_string())
                })
                .collect(),
        }
    }
}

/// Fixture store covering every generated job.
pub fn fixtures_for_jobs(jobs: &[Job]) -> FixtureStore {
    let mut store = FixtureStore::in_memory();
    for job in jobs {
        store
            .insert(&job.classification_request(), job.fixture_response())
            .expect("in-memory insert cannot fail");
    }
    store
}

/// Classification-backed encoder: per step, each channel's active job
/// description goes through the client; the embedding entry is the
/// returned effort level. Channels without a job stay at level zero.
pub struct JobLevelEncoder {
    jobs: Arc<Vec<Job>>,
    client: Arc<LlmClient>,
}

impl JobLevelEncoder {
    pub fn new(jobs: Arc<Vec<Job>>, client: Arc<LlmClient>) -> Self {
        Self { jobs, client }
    }
}

impl Encoder for JobLevelEncoder {
    fn encode(&self, ctx: &ContextRecord) -> Result<Embedding> {
        let tau = ctx.start;
        let mut values = DVector::zeros(3);
        let mut provenance = vec!["no-job".to_string(); 3];
        for job in self.jobs.iter().filter(|j| j.covers(tau)) {
            let request = job.classification_request();
            let result = self.client.classify_job(&request)?;
            let level = result
                .levels
                .get(CHANNELS[job.channel])
                .copied()
                .unwrap_or(0);
            values[job.channel] = level as f64;
            provenance[job.channel] = format!("classified:{}", CHANNELS[job.channel]);
        }
        Ok(Embedding { values, provenance })
    }

    fn dim(&self) -> usize {
        3
    }
}

/// True-level encoder: one-hot level probabilities through the
/// categorical weighted sum (no classification service involved).
pub struct LevelsEncoder {
    levels: Arc<Vec<[u8; 3]>>,
}

impl Encoder for LevelsEncoder {
    fn encode(&self, ctx: &ContextRecord) -> Result<Embedding> {
        let tau = ctx.start;
        let level = self
            .levels
            .get(tau)
            .copied()
            .ok_or_else(|| Error::Config(format!("no level entry for step {tau}")))?;
        let values = vec![vec![0.0, 1.0, 2.0, 3.0]; 3];
        let probs: Vec<Vec<f64>> = level
            .iter()
            .map(|&l| {
                let mut p = vec![0.0; 4];
                p[l as usize] = 1.0;
                p
            })
            .collect();
        let mut emb = encode_categorical(&probs, &values)?;
        emb.provenance = CHANNELS.iter().map(|c| format!("categorical:{c}")).collect();
        Ok(emb)
    }

    fn dim(&self) -> usize {
        3
    }
}

pub fn build_battery_scenario(config: &RunConfig) -> Result<Scenario> {
    let ScenarioSpec::BatterySynthetic {
        predictor,
        encoder,
        idle_bias,
        channel_effects,
        solar_amplitude,
        noise_halfwidth,
        state_weight,
        input_weight,
        radius,
        fixture_path,
        scripted_table_path,
    } = &config.scenario
    else {
        return Err(Error::Config("not a battery scenario".into()));
    };
    if !(*state_weight > 0.0) || !(*input_weight > 0.0) {
        return Err(Error::Config("battery cost weights must be positive".into()));
    }

    let gen_params = GeneratorParams {
        idle_bias: *idle_bias,
        channel_effects: *channel_effects,
        solar_amplitude: *solar_amplitude,
        noise_halfwidth: *noise_halfwidth,
    };
    let w_bound = idle_bias.abs()
        + channel_effects.iter().map(|e| 3.0 * e.abs()).sum::<f64>()
        + solar_amplitude.abs()
        + noise_halfwidth.abs()
        + 1.0;
    let model = SystemModel::new(
        nalgebra::dmatrix![1.0],
        nalgebra::dmatrix![1.0],
        nalgebra::dmatrix![*state_weight],
        nalgebra::dmatrix![*input_weight],
        w_bound,
    )?;

    let t_steps = config.t_steps;
    let k = config
        .k
        .unwrap_or_else(|| default_horizon(model.rho_f(), t_steps));
    let loss = loss_spec_from_config(config, &model, k);

    let (layout, variant) = match predictor {
        PredictorVariant::LlmEmbedding => (ParamLayout::bias_first(1, 3), RunVariant::Tuned),
        PredictorVariant::Metadata => (ParamLayout::bias_first(1, 4), RunVariant::Tuned),
        PredictorVariant::BiasOnly => (ParamLayout::bias_first(1, 0), RunVariant::Tuned),
        PredictorVariant::FixedAverage => {
            (ParamLayout::bias_first(1, 0), RunVariant::FixedAverage)
        }
        PredictorVariant::FixedZero => (ParamLayout::bias_first(1, 0), RunVariant::FixedZero),
    };
    let theta0 = DVector::zeros(layout.dim());
    let set = HypothesisSet::centered_at_zero(layout.dim(), *radius)?;

    let external_store: Option<Arc<std::sync::Mutex<FixtureStore>>> = match fixture_path {
        Some(path) => Some(Arc::new(std::sync::Mutex::new(FixtureStore::open(
            std::path::Path::new(path),
        )?))),
        None => None,
    };
    let scripted_table: Option<Arc<ScriptedTableEncoder>> = match encoder {
        BatteryEncoderSource::ScriptedTable => {
            let path = scripted_table_path.as_ref().ok_or_else(|| {
                Error::Config("scripted_table encoder needs scripted_table_path".into())
            })?;
            Some(Arc::new(ScriptedTableEncoder::from_file(
                std::path::Path::new(path),
                CHANNELS.iter().map(|c| c.to_string()).collect(),
                vec![0.0, 1.0, 2.0, 3.0],
            )?))
        }
        _ => None,
    };

    let encoder_source = *encoder;
    let predictor_kind = *predictor;
    let gen_for_data = gen_params.clone();
    let external_for_data = external_store.clone();
    let scripted_for_data = scripted_table.clone();
    let gen_data = Arc::new(move |seed: u64| -> Result<SeedData> {
        let data = generate_battery_data(seed, t_steps, &gen_for_data);
        let encoder: Arc<dyn Encoder> = match predictor_kind {
            PredictorVariant::Metadata => Arc::new(MetadataEncoder::new(
                METADATA_KEYS.iter().map(|k| k.to_string()).collect(),
                METADATA_SCALES.to_vec(),
            )?),
            PredictorVariant::BiasOnly
            | PredictorVariant::FixedAverage
            | PredictorVariant::FixedZero => Arc::new(NullEncoder),
            PredictorVariant::LlmEmbedding => match encoder_source {
                BatteryEncoderSource::Categorical => Arc::new(LevelsEncoder {
                    levels: Arc::new(data.levels.clone()),
                }),
                BatteryEncoderSource::ScriptedTable => scripted_for_data
                    .clone()
                    .map(|enc| enc as Arc<dyn Encoder>)
                    .ok_or_else(|| Error::Config("scripted table missing".into()))?,
                BatteryEncoderSource::LlmFixture => {
                    let client = match &external_for_data {
                        Some(shared) => {
                            // Hermetic mode with an external store:
                            // every generated job must be covered,
                            // checked up front so a miss fails the run
                            // instead of silently degrading mid-loop.
                            {
                                let guard = shared.lock().expect("fixture store lock");
                                for job in &data.jobs {
                                    let digest = crate::llm_client::request_digest(
                                        &job.classification_request(),
                                    );
                                    if guard.lookup(&digest).is_none() {
                                        return Err(Error::FixtureMiss { digest });
                                    }
                                }
                            }
                            Arc::new(LlmClient::fixture_shared(
                                Arc::clone(shared),
                                MissPolicy::Error,
                            ))
                        }
                        None => Arc::new(LlmClient::fixture(
                            fixtures_for_jobs(&data.jobs),
                            MissPolicy::Error,
                        )),
                    };
                    Arc::new(JobLevelEncoder::new(Arc::new(data.jobs.clone()), client))
                }
                BatteryEncoderSource::Llm => {
                    let client = Arc::new(LlmClient::live_from_env(None)?);
                    Arc::new(JobLevelEncoder::new(Arc::new(data.jobs.clone()), client))
                }
            },
        };
        Ok(SeedData {
            disturbances: data.disturbances,
            contexts: data.contexts,
            bases: vec![DVector::zeros(1); t_steps],
            encoder,
        })
    });

    // Gradient-bound estimate over the scenario's own embedding
    // distribution.
    let schedule = {
        let est = gen_data(super::ESTIMATION_SEED)?;
        let est_embeddings: Vec<DVector<f64>> = est
            .contexts
            .iter()
            .map(|ctx| {
                est.encoder
                    .encode(ctx)
                    .map(|e| e.values)
                    .unwrap_or_else(|_| DVector::zeros(est.encoder.dim()))
            })
            .collect();
        let scenario_loss = crate::losses::LossSpec::special(&model, k);
        let startup = super::startup_region(&theta0, &set)?;
        resolve_schedule(
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
        )?
    };

    Ok(Scenario {
        model,
        t_steps,
        k,
        layout,
        theta0,
        hypothesis: set,
        loss,
        schedule,
        variant,
        digest: config.digest(),
        seed_data: gen_data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{LossChoice, LearningRateConfig, NormalizerChoice, CONFIG_VERSION};

    pub(crate) fn battery_config(
        t_steps: usize,
        seeds: Vec<u64>,
        predictor: PredictorVariant,
    ) -> RunConfig {
        RunConfig {
            version: CONFIG_VERSION,
            scenario: ScenarioSpec::BatterySynthetic {
                predictor,
                encoder: BatteryEncoderSource::LlmFixture,
                idle_bias: -245.0,
                channel_effects: [-40.0, -45.0, -95.0],
                solar_amplitude: 120.0,
                noise_halfwidth: 10.0,
                state_weight: 1e-2,
                input_weight: 1e-4,
                radius: 600.0,
                fixture_path: None,
                scripted_table_path: None,
            },
            t_steps,
            k: None,
            loss: LossChoice::Special,
            normalizer: NormalizerChoice::WindowGap,
            learning_rate: LearningRateConfig::default(),
            seeds,
            output_dir: None,
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let params = GeneratorParams {
            idle_bias: -245.0,
            channel_effects: [-40.0, -45.0, -95.0],
            solar_amplitude: 120.0,
            noise_halfwidth: 10.0,
        };
        let a = generate_battery_data(3, 500, &params);
        let b = generate_battery_data(3, 500, &params);
        assert_eq!(a.disturbances, b.disturbances);
        assert_eq!(a.jobs.len(), b.jobs.len());
        for (x, y) in a.jobs.iter().zip(&b.jobs) {
            assert_eq!(x.description, y.description);
        }
    }

    #[test]
    fn jobs_are_well_ordered_per_channel() {
        let params = GeneratorParams {
            idle_bias: -245.0,
            channel_effects: [-40.0, -45.0, -95.0],
            solar_amplitude: 0.0,
            noise_halfwidth: 0.0,
        };
        let data = generate_battery_data(11, 2160, &params);
        for channel in 0..3 {
            let mut last_end = 0;
            for job in data.jobs.iter().filter(|j| j.channel == channel) {
                assert!(job.start >= last_end);
                assert!(job.end > job.start);
                last_end = job.end;
            }
        }
    }

    #[test]
    fn classification_matches_true_levels() {
        let params = GeneratorParams {
            idle_bias: -245.0,
            channel_effects: [-40.0, -45.0, -95.0],
            solar_amplitude: 120.0,
            noise_halfwidth: 10.0,
        };
        let data = generate_battery_data(7, 800, &params);
        let store = fixtures_for_jobs(&data.jobs);
        let client = Arc::new(LlmClient::fixture(store, MissPolicy::Error));
        let encoder = JobLevelEncoder::new(Arc::new(data.jobs.clone()), client);
        for tau in (0..800).step_by(37) {
            let emb = encoder.encode(&data.contexts[tau]).unwrap();
            for c in 0..3 {
                assert_eq!(emb.values[c], data.levels[tau][c] as f64, "tau={tau} c={c}");
            }
        }
    }

    #[test]
    fn all_zero_embeddings_collapse_to_bias_only() {
        // No jobs (empty schedule): the llm-embedding variant and the
        // bias-only variant see the identical loop.
        let params = GeneratorParams {
            idle_bias: -100.0,
            channel_effects: [-40.0, -45.0, -95.0],
            solar_amplitude: 50.0,
            noise_halfwidth: 5.0,
        };
        // Seed data with all levels zero: strip the jobs.
        let mut data = generate_battery_data(5, 300, &params);
        data.jobs.clear();
        let store = fixtures_for_jobs(&data.jobs);
        let client = Arc::new(LlmClient::fixture(store, MissPolicy::Error));
        let encoder = JobLevelEncoder::new(Arc::new(vec![]), client);
        for tau in 0..10 {
            let emb = encoder.encode(&data.contexts[tau]).unwrap();
            assert_eq!(emb.values.amax(), 0.0);
        }
        let _ = encoder;
    }

    #[test]
    fn battery_scenario_runs_end_to_end() {
        let config = battery_config(400, vec![2], PredictorVariant::LlmEmbedding);
        let scenario = build_battery_scenario(&config).unwrap();
        assert_eq!(scenario.k, 2); // log_{1/rho} T for the near-deadbeat loop
        let trace = scenario.run_seed(2).unwrap();
        assert_eq!(trace.len(), 400);
        // Levels pass through the fixture client into the embeddings.
        assert!(trace.embeddings.iter().any(|e| e.amax() > 0.0));
    }

    #[test]
    fn scripted_table_encoder_feeds_the_loop() {
        let dir = tempfile::tempdir().unwrap();
        let table_path = dir.path().join("levels.table");
        std::fs::write(
            &table_path,
            "# channel start end p0 p1 p2 p3\n\
             cpu-ws1 0 100 0.0 0.0 0.0 1.0\n\
             gpu-ws1 50 100 0.0 1.0 0.0 0.0\n",
        )
        .unwrap();
        let mut config = battery_config(100, vec![3], PredictorVariant::LlmEmbedding);
        if let ScenarioSpec::BatterySynthetic {
            encoder,
            scripted_table_path,
            ..
        } = &mut config.scenario
        {
            *encoder = BatteryEncoderSource::ScriptedTable;
            *scripted_table_path = Some(table_path.to_string_lossy().into_owned());
        }
        let scenario = build_battery_scenario(&config).unwrap();
        let trace = scenario.run_seed(3).unwrap();
        // Embedding comes from the table, not the generator's jobs.
        assert_eq!(trace.embeddings[10][0], 3.0);
        assert_eq!(trace.embeddings[10][2], 0.0);
        assert_eq!(trace.embeddings[60][2], 1.0);
    }

    #[test]
    fn fixed_variants_bypass_tuner() {
        for predictor in [PredictorVariant::FixedAverage, PredictorVariant::FixedZero] {
            let config = battery_config(200, vec![4], predictor);
            let scenario = build_battery_scenario(&config).unwrap();
            let trace = scenario.run_seed(4).unwrap();
            for record in &trace.steps {
                assert_eq!(record.eta, 0.0);
                assert_eq!(record.theta.len(), 0);
            }
        }
    }
}
