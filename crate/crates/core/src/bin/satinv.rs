//! Command-line front end: certificates, gain synthesis, dataset generation,
//! MPC runs, full-order comparison and the end-to-end experiment.

use clap::{Args, Parser, Subcommand};
use satinv::certify::{certify_gain, Gain};
use satinv::fullorder::{
    compare_models, equilibrium_state, integrate_fullorder, reference_from_power, FullOrderParams,
};
use satinv::harness::{run_full_experiment, ExperimentConfig, GridSpec};
use satinv::linalg::{Mat2, Vec2};
use satinv::model::{build_plant, PlantParams};
use satinv::mpc::generate_dataset;
use satinv::synthesis::{fit_gain, lqr_gain, Dataset, LqrWeights};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "satinv",
    about = "Saturated-inverter control: simulate, certify, fit and compare controllers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ParamsArg {
    /// Plant parameter file (key=value; keys R_ohm, L_H, E_V,
    /// omega_nom_rad_s, V_nom_V, dt_s, I_max_A, S_nom_VA, I_nom_A)
    #[arg(long)]
    params: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Check the stability certificate of a gain; exit 0 iff feasible
    Certify {
        #[command(flatten)]
        params: ParamsArg,
        /// Gain JSON file with key "K" (2x2 row-major)
        #[arg(long)]
        gain: PathBuf,
    },
    /// Synthesize the LQR gain for given weights and print it as JSON
    Lqr {
        #[command(flatten)]
        params: ParamsArg,
        /// State cost Q, 4 row-major floats
        #[arg(long, num_args = 4, value_names = ["Q11", "Q12", "Q21", "Q22"])]
        q: Vec<f64>,
        /// Input cost: either the literal "5B" or 4 row-major floats
        #[arg(long, num_args = 1..=4)]
        rcost: Vec<String>,
        /// Write the gain JSON here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a certified gain to a dataset CSV and print it as JSON
    Fit {
        #[command(flatten)]
        params: ParamsArg,
        /// Dataset CSV (header traj_id,t,dx_d,dx_q,u_v,u_delta)
        #[arg(long)]
        dataset: PathBuf,
        /// Spectral margin: constrain sigma(A - BK) <= 1 - margin
        #[arg(long, default_value_t = 1e-6)]
        margin: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the MPC dataset over the experiment grid
    Dataset {
        #[command(flatten)]
        params: ParamsArg,
        /// Weights file (keys Q = 4 floats, R_cost = 4 floats or "5B");
        /// defaults to Q = diag(1, 0.1), R_cost = 5B when omitted
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Run rolling-horizon MPC for one case and write the trajectory CSV
    Mpc {
        #[command(flatten)]
        params: ParamsArg,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Initial state "d,q" in amperes
        #[arg(long, value_parser = parse_point)]
        x0: Vec2<f64>,
        /// Reference state "d,q" in amperes
        #[arg(long, value_parser = parse_point)]
        xref: Vec2<f64>,
        #[arg(long, default_value_t = 5)]
        horizon: usize,
        #[arg(long, default_value_t = 1e-5)]
        stop_tol: f64,
        #[arg(long, default_value_t = 200_000)]
        max_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Integrate the full-order 12-state model for a power step
    Fullorder {
        /// Full-order parameter file (missing keys fall back to defaults)
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        gain: PathBuf,
        /// Power step "P,Q" in watts / vars
        #[arg(long, value_parser = parse_point)]
        step: Vec2<f64>,
        #[arg(long, default_value_t = 0.05)]
        t_end: f64,
        #[arg(long, default_value_t = 1e-6)]
        dt_int: f64,
        /// Also run the simplified model and print a comparison report
        #[arg(long)]
        compare: bool,
        /// Simplified plant file for --compare (defaults to the built-ins)
        #[arg(long)]
        simplified_params: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full baseline-vs-fit experiment pipeline
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for report.json, cases.csv, gains and plot data
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: all cores)
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn parse_point(s: &str) -> Result<Vec2<f64>, String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected \"d,q\", got `{s}`"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<f64>()
            .map_err(|_| format!("bad number `{v}`"))
    };
    Ok(Vec2::new(parse(a)?, parse(b)?))
}

fn load_weights(
    path: &Option<PathBuf>,
    plant: &satinv::LinearPlant64,
) -> satinv::Result<LqrWeights<f64>> {
    match path {
        Some(p) => LqrWeights::load(p, plant),
        None => Ok(LqrWeights::experiment_defaults(plant)),
    }
}

fn emit_gain(gain: &Gain<f64>, out: &Option<PathBuf>) -> satinv::Result<()> {
    match out {
        Some(path) => gain.save(path),
        None => {
            println!("{}", serde_json::to_string_pretty(gain)?);
            Ok(())
        }
    }
}

fn run() -> satinv::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Certify { params, gain } => {
            let plant = build_plant(&PlantParams::load(&params.params)?)?;
            let gain = Gain::<f64>::load(&gain)?;
            let report = certify_gain(&plant, &gain.k);
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(if report.feasible {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Lqr {
            params,
            q,
            rcost,
            out,
        } => {
            let plant = build_plant(&PlantParams::load(&params.params)?)?;
            let q = Mat2::new(q[0], q[1], q[2], q[3]);
            let r_cost = if rcost.len() == 1 && rcost[0] == "5B" {
                plant.b.scale(5.0)
            } else if rcost.len() == 4 {
                let v: Vec<f64> = rcost
                    .iter()
                    .map(|s| {
                        s.parse()
                            .map_err(|_| satinv::Error::Config(format!("bad --rcost entry `{s}`")))
                    })
                    .collect::<satinv::Result<_>>()?;
                Mat2::new(v[0], v[1], v[2], v[3])
            } else {
                return Err(satinv::Error::Config(
                    "--rcost takes the literal 5B or 4 floats".into(),
                ));
            };
            let gain = lqr_gain(&plant, &LqrWeights::new(q, r_cost)?)?;
            emit_gain(&gain, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Fit {
            params,
            dataset,
            margin,
            out,
        } => {
            let plant = build_plant(&PlantParams::load(&params.params)?)?;
            let dataset = Dataset::<f64>::load(&dataset)?;
            let gain = fit_gain(&plant, &dataset, margin)?;
            emit_gain(&gain, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Dataset {
            params,
            weights,
            horizon,
            seed,
            out,
        } => {
            let p = PlantParams::load(&params.params)?;
            let plant = build_plant(&p)?;
            let weights = load_weights(&weights, &plant)?;
            let grid = satinv::harness::build_grid(&GridSpec::experiment_defaults(p.i_max))?;
            let (dataset, report) = generate_dataset(
                &plant, &weights, &grid, &grid, horizon, 1e-5, 10, 200_000, seed,
            )?;
            dataset.save(&out)?;
            eprintln!(
                "wrote {} samples from {} trajectories ({} failures)",
                dataset.len(),
                report.trajectories,
                report.failures.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Mpc {
            params,
            weights,
            x0,
            xref,
            horizon,
            stop_tol,
            max_steps,
            seed,
            out,
        } => {
            let plant = build_plant(&PlantParams::load(&params.params)?)?;
            let weights = load_weights(&weights, &plant)?;
            let traj = satinv::mpc::run_mpc(
                &plant, &weights, x0, xref, horizon, stop_tol, 10, max_steps, seed,
            )?;
            let mut buf = Vec::new();
            traj.write_csv(&mut buf)?;
            match out {
                Some(path) => std::fs::write(path, buf)?,
                None => print!("{}", String::from_utf8_lossy(&buf)),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Fullorder {
            params,
            gain,
            step,
            t_end,
            dt_int,
            compare,
            simplified_params,
            out,
        } => {
            let fo_params = match params {
                Some(p) => FullOrderParams::load(&p)?,
                None => FullOrderParams::defaults(),
            };
            let gain = Gain::<f64>::load(&gain)?;
            let simplified = match &simplified_params {
                Some(p) => PlantParams::load(p)?,
                None => PlantParams::table1(),
            };
            let (x0, _) = equilibrium_state(&fo_params, Vec2::zero())?;
            let refr = reference_from_power(step.x, step.y, &fo_params)?;
            let traj = integrate_fullorder(
                x0,
                &fo_params,
                &gain,
                &refr,
                t_end,
                dt_int,
                simplified.dt,
            )?;
            let mut buf = Vec::new();
            traj.write_csv(&mut buf)?;
            match &out {
                Some(path) => std::fs::write(path, buf)?,
                None => print!("{}", String::from_utf8_lossy(&buf)),
            }
            if compare {
                let report = compare_models(
                    &fo_params,
                    &simplified,
                    &gain,
                    step.x,
                    step.y,
                    t_end,
                    dt_int,
                )?;
                println!("{}", serde_json::to_string_pretty(&report)?);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Experiment {
            config,
            out,
            seed,
            jobs,
        } => {
            if let Some(n) = jobs {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| satinv::Error::Config(format!("thread pool: {e}")))?;
            }
            let mut cfg = ExperimentConfig::<f64>::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = run_full_experiment(&cfg, &out)?;
            eprintln!(
                "avg cost fit {:.3} vs base {:.3} (ratio {:.3}); stuck fit {} base {}",
                report.fit.aggregates.average_cost,
                report.base.aggregates.average_cost,
                report.cost_ratio_fit_over_base,
                report.fit.aggregates.stuck_count,
                report.base.aggregates.stuck_count
            );
            Ok(if report.fit_certified {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
