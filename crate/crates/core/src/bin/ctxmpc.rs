//! Command-line front end: run experiments from a declarative config,
//! analyze stored runs, and reproduce traces from their digest.
//!
//! Exit codes: 0 ok, 1 config error, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ctxmpc::analysis::{
    estimate_ld, fit_ld_decay, hindsight_theta, regret, robustness_diagnostics, truncation_tail,
    LdInstance,
};
use ctxmpc::error::Error;
use ctxmpc::harness::{build_scenario, replay_run_dir, run_scenario, RunConfig};
use ctxmpc::losses::LossSpec;

#[derive(Parser)]
#[command(name = "ctxmpc", version, about = "Prediction-augmented MPC simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a config: one trace per seed plus a JSON summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed list with 0..N.
        #[arg(long)]
        seeds: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Post-run regret analysis of a stored run directory: hindsight
    /// parameters, frozen replay, and the residual decomposition.
    Regret {
        #[arg(long)]
        run_dir: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Loss-discrepancy decay study across prediction horizons.
    SweepK {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 12)]
        kmax: usize,
        /// CSV of (k, ld) rows; the fitted slope always prints to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// No-signal robustness study: decoder gain and bias-vs-mean gap at
    /// dyadic checkpoints.
    Robustness {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run a stored config digest and verify the traces byte for
    /// byte.
    Replay {
        digest: String,
        /// Root directory holding `<digest>/` run directories.
        #[arg(long, default_value = "out")]
        root: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // Exit codes: 0 ok, 1 config/usage error, 2 runtime error.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) | Error::Json(_) | Error::InvalidRadius(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, seeds, out } => {
            let mut config = RunConfig::from_file(&config)?;
            if let Some(n) = seeds {
                config.seeds = (0..n).collect();
            }
            if let Some(out) = out {
                config.output_dir = Some(out.to_string_lossy().into_owned());
            }
            if config.output_dir.is_none() {
                config.output_dir = Some("out".to_string());
            }
            let digest = config.digest();
            let traces = run_scenario(&config)?;
            let dir =
                PathBuf::from(config.output_dir.as_deref().unwrap_or("out")).join(&digest);
            println!("digest {digest}");
            println!(
                "wrote {} trace(s) and summary.json under {}",
                traces.len(),
                dir.display()
            );
            Ok(())
        }
        Command::Regret { run_dir, out } => {
            let config = RunConfig::from_file(&run_dir.join("config.json"))?;
            let scenario = build_scenario(&config)?;
            let mut reports = Vec::new();
            for &seed in &config.seeds {
                let trace = scenario.run_seed(seed)?;
                let solution = hindsight_theta(
                    &trace,
                    &scenario.model,
                    &scenario.layout,
                    &scenario.hypothesis,
                )?;
                let report = regret(&trace, &scenario.model, &solution.theta, |theta| {
                    scenario.run_seed_frozen(seed, theta)
                })?;
                reports.push(serde_json::json!({
                    "seed": seed,
                    "degenerate_normal_system": solution.degenerate,
                    "report": report,
                }));
            }
            let rendered = serde_json::to_string_pretty(&reports)?;
            match out {
                Some(path) => std::fs::write(path, rendered)?,
                None => println!("{rendered}"),
            }
            Ok(())
        }
        Command::SweepK { config, kmax, out } => {
            if kmax == 0 {
                return Err(Error::Config("kmax must be >= 1".into()));
            }
            let config = RunConfig::from_file(&config)?;
            let scenario = build_scenario(&config)?;
            let seed = *config.seeds.first().expect("validated: nonempty");
            let data = scenario.seed_data(seed)?;
            let targets: Vec<nalgebra::DVector<f64>> = data
                .disturbances
                .iter()
                .zip(&data.bases)
                .map(|(w, b)| w - b)
                .collect();
            let embeddings: Vec<nalgebra::DVector<f64>> = data
                .contexts
                .iter()
                .map(|ctx| {
                    data.encoder
                        .encode(ctx)
                        .map(|e| e.values)
                        .unwrap_or_else(|_| nalgebra::DVector::zeros(data.encoder.dim()))
                })
                .collect();
            let raw_w = &data.disturbances;

            let mut rows = Vec::new();
            let mut ks = Vec::new();
            let mut lds = Vec::new();
            for k in 1..=kmax.min(scenario.t_steps.saturating_sub(1)) {
                let spec = LossSpec::special(&scenario.model, k);
                let instance = LdInstance {
                    window_targets: &targets[0..k],
                    window_embeddings: &embeddings[0..k],
                    tail: truncation_tail(&scenario.model, raw_w, 0, k),
                };
                let ld = estimate_ld(
                    &spec,
                    &scenario.model,
                    &scenario.layout,
                    &scenario.hypothesis,
                    &instance,
                    2000,
                    seed,
                )?;
                rows.push(format!("{k},{ld}"));
                if ld > 0.0 {
                    ks.push(k);
                    lds.push(ld);
                }
            }
            let csv = format!("k,ld\n{}\n", rows.join("\n"));
            match out {
                Some(path) => std::fs::write(path, &csv)?,
                None => print!("{csv}"),
            }
            if ks.len() >= 2 {
                let fit = fit_ld_decay(&ks, &lds)?;
                println!(
                    "{}",
                    serde_json::json!({
                        "slope": fit.slope,
                        "intercept": fit.intercept,
                        "log_rho_f": scenario.model.rho_f().ln(),
                    })
                );
            }
            Ok(())
        }
        Command::Robustness { config, out } => {
            let config = RunConfig::from_file(&config)?;
            let scenario = build_scenario(&config)?;
            let seed = *config.seeds.first().expect("validated: nonempty");
            let trace = scenario.run_seed(seed)?;
            let points = robustness_diagnostics(&trace, &scenario.layout)?;
            let mut csv = String::from("t,c_norm,b_gap\n");
            for point in &points {
                csv.push_str(&format!("{},{},{}\n", point.t, point.c_norm, point.b_gap));
            }
            match out {
                Some(path) => std::fs::write(path, &csv)?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Replay { digest, root } => {
            let run_dir = root.join(&digest);
            if !run_dir.join("config.json").exists() {
                return Err(Error::Config(format!(
                    "no stored run at {}",
                    run_dir.display()
                )));
            }
            if replay_run_dir(&run_dir)? {
                println!("replay of {digest}: byte-identical");
                Ok(())
            } else {
                Err(Error::Numerical(format!(
                    "replay of {digest} diverged from the stored traces"
                )))
            }
        }
    }
}
