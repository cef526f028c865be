//! End-to-end experiment: polar grids, MPC dataset generation, gain fitting,
//! and the head-to-head closed-loop evaluation of the baseline vs the fitted
//! gain, with stuck-case detection and plot-data export.

use crate::certify::{certify_gain, Gain};
use crate::error::{Error, Result};
use crate::linalg::{Mat2, Vec2};
use crate::model::{
    build_plant, equilibrium_input, simulate, Input, LinearPlant, PlantParams, SimOptions, State,
    Trajectory,
};
use crate::mpc::{generate_dataset, run_mpc};
use crate::scalar::{real, Real};
use crate::synthesis::{fit_gain, lqr_gain, LqrWeights};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

/// Polar grid of states: all (r cos(theta+offset), r sin(theta+offset)).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSpec<T> {
    pub radii: Vec<T>,
    pub angles: Vec<T>,
    pub angle_offset: T,
    pub dedupe_origin: bool,
}

/// Evenly spaced points a + i (b - a) / (n - 1), i = 0..n-1.
pub fn linspace<T: Real>(a: T, b: T, n: usize) -> Vec<T> {
    assert!(n >= 2, "linspace needs n >= 2");
    let step = (b - a) / real::<T>((n - 1) as f64);
    (0..n).map(|i| a + step * real(i as f64)).collect()
}

impl<T: Real> GridSpec<T> {
    /// The experiment grid: radii linspace(0, i_max, 3), four angles a
    /// quarter turn apart starting at offset pi/4.
    pub fn experiment_defaults(i_max: T) -> Self {
        let three_quarters = real::<T>(2.0 * std::f64::consts::PI - std::f64::consts::FRAC_PI_2);
        Self {
            radii: linspace(T::zero(), i_max, 3),
            angles: linspace(T::zero(), three_quarters, 4),
            angle_offset: real(std::f64::consts::FRAC_PI_4),
            dedupe_origin: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.radii.is_empty() || self.angles.is_empty() {
            return Err(Error::Domain("grid needs at least one radius and angle".into()));
        }
        if self.radii.iter().any(|r| *r < T::zero()) {
            return Err(Error::Domain("grid radii must be >= 0".into()));
        }
        let two_pi = real::<T>(2.0 * std::f64::consts::PI);
        if self.angles.iter().any(|a| *a < T::zero() || *a >= two_pi) {
            return Err(Error::Domain("grid angles must lie in [0, 2pi)".into()));
        }
        Ok(())
    }
}

/// Materialize the grid points, optionally collapsing the r = 0 duplicates.
pub fn build_grid<T: Real>(spec: &GridSpec<T>) -> Result<Vec<State<T>>> {
    spec.validate()?;
    let mut points = Vec::with_capacity(spec.radii.len() * spec.angles.len());
    let mut seen_origin = false;
    for &r in &spec.radii {
        for &theta in &spec.angles {
            if spec.dedupe_origin && r == T::zero() {
                if seen_origin {
                    continue;
                }
                seen_origin = true;
                points.push(Vec2::zero());
                continue;
            }
            let phi = theta + spec.angle_offset;
            points.push(Vec2::new(r * phi.cos(), r * phi.sin()));
        }
    }
    Ok(points)
}

/// Closed-loop evaluation settings: the stop rule plus the stuck thresholds.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalOptions<T> {
    pub stop_tol: T,
    pub stop_window: usize,
    pub max_steps: usize,
    /// A run is stuck when it settles with error > stuck_err_factor * stop_tol
    /// while sitting within boundary_tol * i_max of the saturation circle.
    pub stuck_err_factor: T,
    pub boundary_tol: T,
}

impl<T: Real> Default for EvalOptions<T> {
    fn default() -> Self {
        Self {
            stop_tol: real(1e-5),
            stop_window: 10,
            max_steps: 200_000,
            stuck_err_factor: real(100.0),
            boundary_tol: real(1e-6),
        }
    }
}

/// One closed-loop case outcome.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CaseRecord<T> {
    pub case: usize,
    pub x_init: State<T>,
    pub x_ref: State<T>,
    pub converged: bool,
    pub stuck: bool,
    /// Accumulated stage cost over the realized horizon.
    pub cost: T,
    pub settle_steps: usize,
    pub final_error: T,
}

/// Aggregates over a case set.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Aggregates<T> {
    pub cases: usize,
    pub average_cost: T,
    pub stuck_count: usize,
    pub converged_count: usize,
}

/// Evaluation of one controller over a case list.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport<T> {
    pub controller: String,
    pub records: Vec<CaseRecord<T>>,
    pub aggregates: Aggregates<T>,
    /// Aggregates over unique (x_init, x_ref) pairs (duplicate grid points,
    /// e.g. the repeated origin, collapsed).
    pub aggregates_deduped: Aggregates<T>,
}

fn stage_cost<T: Real>(weights: &LqrWeights<T>, e: State<T>, u_dev: Input<T>) -> T {
    e.dot(weights.q * e) + u_dev.dot(weights.r_cost * u_dev)
}

/// Cost of a recorded trajectory under the experiment stage cost.
pub fn trajectory_cost<T: Real>(
    traj: &Trajectory<T>,
    x_ref: State<T>,
    u_ref: Input<T>,
    weights: &LqrWeights<T>,
) -> T {
    traj.records
        .iter()
        .map(|r| stage_cost(weights, r.state - x_ref, r.input - u_ref))
        .fold(T::zero(), |a, b| a + b)
}

fn aggregate<T: Real>(records: &[&CaseRecord<T>]) -> Aggregates<T> {
    let n = records.len();
    let total = records.iter().fold(T::zero(), |a, r| a + r.cost);
    Aggregates {
        cases: n,
        average_cost: if n == 0 { T::zero() } else { total / real(n as f64) },
        stuck_count: records.iter().filter(|r| r.stuck).count(),
        converged_count: records.iter().filter(|r| r.converged).count(),
    }
}

/// Simulate a gain over every case and report costs, convergence and stuck
/// detections. Cases evaluate in parallel; output order follows input order.
pub fn evaluate_controller<T: Real>(
    plant: &LinearPlant<T>,
    gain: &Gain<T>,
    cases: &[(State<T>, State<T>)],
    weights: &LqrWeights<T>,
    opts: &EvalOptions<T>,
) -> Result<ExperimentReport<T>> {
    if cases.is_empty() {
        return Err(Error::Domain("evaluate_controller: no cases".into()));
    }
    let sim_opts = SimOptions {
        max_steps: opts.max_steps,
        stop_tol: opts.stop_tol,
        stop_window: opts.stop_window,
        record_presat: false,
    };
    let records: Vec<CaseRecord<T>> = cases
        .par_iter()
        .enumerate()
        .map(|(case, &(x_init, x_ref))| {
            let u_ref = equilibrium_input(plant, x_ref);
            let traj = simulate(plant, gain, x_init, x_ref, u_ref, &sim_opts);
            let last = traj.last_state();
            let err = (last - x_ref).norm();
            let on_boundary =
                (last.norm() - plant.i_max).abs() <= opts.boundary_tol * plant.i_max;
            let stuck =
                traj.converged && on_boundary && err > opts.stuck_err_factor * opts.stop_tol;
            CaseRecord {
                case,
                x_init,
                x_ref,
                converged: traj.converged && !stuck,
                stuck,
                cost: trajectory_cost(&traj, x_ref, u_ref, weights),
                settle_steps: traj.len() - 1,
                final_error: err,
            }
        })
        .collect();
    let all: Vec<&CaseRecord<T>> = records.iter().collect();
    let mut seen: Vec<(State<T>, State<T>)> = Vec::new();
    let mut deduped: Vec<&CaseRecord<T>> = Vec::new();
    for r in &records {
        let key = (r.x_init, r.x_ref);
        if !seen.contains(&key) {
            seen.push(key);
            deduped.push(r);
        }
    }
    Ok(ExperimentReport {
        controller: String::new(),
        aggregates: aggregate(&all),
        aggregates_deduped: aggregate(&deduped),
        records,
    })
}

/// How the baseline gain is obtained.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub enum BaselineSpec<T> {
    /// A fixed matrix (the published baseline values).
    Explicit(Mat2<T>),
    /// Re-derive via the Riccati iteration from the experiment weights.
    Riccati,
}

/// Everything the experiment pipeline needs, parsed from an INI-style file
/// with sections [plant], [weights], [grid], [mpc], [fit], [thresholds],
/// [baseline].
#[derive(Clone, Debug)]
pub struct ExperimentConfig<T> {
    pub params: PlantParams<T>,
    pub weights: LqrWeights<T>,
    pub grid: GridSpec<T>,
    pub horizon: usize,
    pub mpc_stop_tol: T,
    pub mpc_stop_window: usize,
    pub mpc_max_steps: usize,
    pub fit_margin: T,
    pub eval: EvalOptions<T>,
    pub baseline: BaselineSpec<T>,
    pub seed: u64,
}

fn split_sections(text: &str) -> Result<HashMap<String, String>> {
    let mut sections: HashMap<String, String> = HashMap::new();
    let mut current = String::new();
    for line in text.lines() {
        let trimmed = line.split('#').next().unwrap_or("").trim();
        if trimmed.starts_with('[') && trimmed.ends_with(']') {
            current = trimmed[1..trimmed.len() - 1].trim().to_string();
            sections.entry(current.clone()).or_default();
        } else if !trimmed.is_empty() {
            if current.is_empty() {
                return Err(Error::Config(format!(
                    "config line outside any [section]: {trimmed}"
                )));
            }
            let s = sections.entry(current.clone()).or_default();
            s.push_str(trimmed);
            s.push('\n');
        }
    }
    Ok(sections)
}

impl<T: Real> ExperimentConfig<T> {
    pub fn from_str(text: &str) -> Result<Self> {
        let sections = split_sections(text)?;
        let section = |name: &str| sections.get(name).map(String::as_str).unwrap_or("");
        let params: PlantParams<T> = PlantParams::from_kv_str(
            sections
                .get("plant")
                .ok_or_else(|| Error::Config("missing [plant] section".into()))?,
        )?;
        let plant = build_plant(&params)?;
        let weights = if sections.contains_key("weights") {
            LqrWeights::from_kv_str(section("weights"), &plant)?
        } else {
            LqrWeights::experiment_defaults(&plant)
        };

        let kv = |name: &str| crate::model::parse_kv(section(name));
        let grid_kv = kv("grid")?;
        let get_f = |map: &HashMap<String, String>, key: &str, default: f64| -> Result<T> {
            match map.get(key) {
                Some(v) => crate::model::parse_scalar(v)
                    .ok_or_else(|| Error::Config(format!("bad number for `{key}`: {v}"))),
                None => Ok(real(default)),
            }
        };
        let get_u = |map: &HashMap<String, String>, key: &str, default: usize| -> Result<usize> {
            match map.get(key) {
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad integer for `{key}`: {v}"))),
                None => Ok(default),
            }
        };
        let defaults = GridSpec::experiment_defaults(params.i_max);
        let n_radii = get_u(&grid_kv, "n_radii", 3)?;
        let r_max = get_f(&grid_kv, "r_max", params.i_max.to_f64().unwrap_or(1.0))?;
        let n_angles = get_u(&grid_kv, "n_angles", 4)?;
        let angle_max = get_f(
            &grid_kv,
            "angle_max_rad",
            2.0 * std::f64::consts::PI - std::f64::consts::FRAC_PI_2,
        )?;
        let grid = GridSpec {
            radii: linspace(T::zero(), r_max, n_radii.max(2)),
            angles: linspace(T::zero(), angle_max, n_angles.max(2)),
            angle_offset: get_f(
                &grid_kv,
                "angle_offset_rad",
                std::f64::consts::FRAC_PI_4,
            )?,
            dedupe_origin: grid_kv
                .get("dedupe_origin")
                .map(|v| v == "true" || v == "1")
                .unwrap_or(defaults.dedupe_origin),
        };

        let mpc_kv = kv("mpc")?;
        let fit_kv = kv("fit")?;
        let th_kv = kv("thresholds")?;
        let eval = EvalOptions {
            stop_tol: get_f(&th_kv, "eval_stop_tol", 1e-5)?,
            stop_window: get_u(&th_kv, "eval_stop_window", 10)?,
            max_steps: get_u(&th_kv, "eval_max_steps", 200_000)?,
            stuck_err_factor: get_f(&th_kv, "stuck_err_factor", 100.0)?,
            boundary_tol: get_f(&th_kv, "boundary_tol", 1e-6)?,
        };

        let base_kv = kv("baseline")?;
        let baseline = match base_kv.get("mode").map(String::as_str) {
            Some("riccati") => BaselineSpec::Riccati,
            Some("explicit") | None => {
                let raw = base_kv
                    .get("K")
                    .cloned()
                    .unwrap_or_else(|| "1.206 0.0957 0.096 0.0671".to_string());
                let vals: Vec<T> = raw
                    .split_whitespace()
                    .map(|s| {
                        crate::model::parse_scalar(s)
                            .ok_or_else(|| Error::Config(format!("bad baseline K entry: {s}")))
                    })
                    .collect::<Result<_>>()?;
                if vals.len() != 4 {
                    return Err(Error::Config("baseline K needs 4 floats".into()));
                }
                BaselineSpec::Explicit(Mat2::new(vals[0], vals[1], vals[2], vals[3]))
            }
            Some(other) => {
                return Err(Error::Config(format!(
                    "baseline mode must be `explicit` or `riccati`, got `{other}`"
                )))
            }
        };

        Ok(Self {
            params,
            weights,
            grid,
            horizon: get_u(&mpc_kv, "horizon", 5)?,
            mpc_stop_tol: get_f(&mpc_kv, "stop_tol", 1e-5)?,
            mpc_stop_window: get_u(&mpc_kv, "stop_window", 10)?,
            mpc_max_steps: get_u(&mpc_kv, "max_steps", 200_000)?,
            fit_margin: get_f(&fit_kv, "margin", 1e-6)?,
            eval,
            baseline,
            seed: th_kv
                .get("seed")
                .map(|v| v.parse().map_err(|_| Error::Config("bad seed".into())))
                .transpose()?
                .unwrap_or(0),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }
}

/// Write per-figure CSVs for the head-to-head case: per-channel error
/// magnitudes over time (fig2) and input deviations over time (fig3).
/// Shorter trajectories hold their final value so every row is complete.
pub fn emit_plotdata<T: Real, W: Write>(
    trajectories: &[&Trajectory<T>],
    labels: &[&str],
    x_ref: State<T>,
    u_ref: Input<T>,
    dt: T,
    fig2: &mut W,
    fig3: &mut W,
) -> Result<()> {
    if trajectories.len() != labels.len() {
        return Err(Error::Domain("one label per trajectory required".into()));
    }
    let mut head2 = String::from("t");
    let mut head3 = String::from("t");
    for l in labels {
        head2.push_str(&format!(",{l}_err_d,{l}_err_q"));
        head3.push_str(&format!(",{l}_dv,{l}_ddelta"));
    }
    writeln!(fig2, "{head2}")?;
    writeln!(fig3, "{head3}")?;
    let rows = trajectories.iter().map(|t| t.len()).max().unwrap_or(0);
    for i in 0..rows {
        let t = dt * real::<T>(i as f64);
        let mut line2 = format!("{t}");
        let mut line3 = format!("{t}");
        for traj in trajectories {
            let r = traj
                .records
                .get(i)
                .or_else(|| traj.records.last())
                .expect("nonempty trajectory");
            let e = r.state - x_ref;
            let du = r.input - u_ref;
            line2.push_str(&format!(",{},{}", e.x.abs(), e.y.abs()));
            line3.push_str(&format!(",{},{}", du.x, du.y));
        }
        writeln!(fig2, "{line2}")?;
        writeln!(fig3, "{line3}")?;
    }
    Ok(())
}

/// Final report of [`run_full_experiment`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineReport<T> {
    pub grid_points: usize,
    pub cases: usize,
    pub dataset_samples: usize,
    pub dataset_failures: usize,
    pub gain_fit: Mat2<T>,
    pub gain_base: Mat2<T>,
    pub fit_certified: bool,
    pub base_certified: bool,
    pub sigma_fit: T,
    pub sigma_base: T,
    pub fit: ExperimentReport<T>,
    pub base: ExperimentReport<T>,
    pub cost_ratio_fit_over_base: T,
    pub seed: u64,
}

fn write_cases_csv<T: Real>(path: &Path, reports: &[&ExperimentReport<T>]) -> Result<()> {
    let mut buf = String::from(
        "controller,case,init_d,init_q,ref_d,ref_q,converged,stuck,cost,settle_steps,final_error\n",
    );
    for rep in reports {
        for r in &rep.records {
            buf.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                rep.controller,
                r.case,
                r.x_init.x,
                r.x_init.y,
                r.x_ref.x,
                r.x_ref.y,
                r.converged as u8,
                r.stuck as u8,
                r.cost,
                r.settle_steps,
                r.final_error
            ));
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// The complete pipeline: grid, MPC dataset, fit, baseline, head-to-head
/// evaluation, artifacts. Returns the report; artifacts are written into
/// `out_dir` as each stage completes so failures leave partial results.
pub fn run_full_experiment<T: Real + Serialize>(
    config: &ExperimentConfig<T>,
    out_dir: &Path,
) -> Result<PipelineReport<T>> {
    let stage = |name: &str, e: Error| Error::Solver(format!("stage `{name}` failed: {e}"));
    std::fs::create_dir_all(out_dir)?;
    let plant = build_plant(&config.params).map_err(|e| stage("build-plant", e))?;

    let grid = build_grid(&config.grid).map_err(|e| stage("build-grid", e))?;
    let cases: Vec<(State<T>, State<T>)> = grid
        .iter()
        .flat_map(|&x0| grid.iter().map(move |&xr| (x0, xr)))
        .collect();

    let (dataset, ds_report) = generate_dataset(
        &plant,
        &config.weights,
        &grid,
        &grid,
        config.horizon,
        config.mpc_stop_tol,
        config.mpc_stop_window,
        config.mpc_max_steps,
        config.seed,
    )
    .map_err(|e| stage("generate-dataset", e))?;
    dataset
        .save(&out_dir.join("dataset.csv"))
        .map_err(|e| stage("generate-dataset", e))?;

    let gain_fit = fit_gain(&plant, &dataset, config.fit_margin).map_err(|e| stage("fit", e))?;
    gain_fit
        .save(&out_dir.join("gain_fit.json"))
        .map_err(|e| stage("fit", e))?;

    let gain_base = match config.baseline {
        BaselineSpec::Explicit(k) => {
            let mut g = Gain::from_matrix(k);
            if let Ok(cert) = g.certified(&plant) {
                g = cert;
            }
            g
        }
        BaselineSpec::Riccati => lqr_gain(&plant, &config.weights).map_err(|e| stage("baseline", e))?,
    };
    gain_base
        .save(&out_dir.join("gain_base.json"))
        .map_err(|e| stage("baseline", e))?;

    let mut fit_report = evaluate_controller(&plant, &gain_fit, &cases, &config.weights, &config.eval)
        .map_err(|e| stage("evaluate", e))?;
    fit_report.controller = "fit".into();
    let mut base_report =
        evaluate_controller(&plant, &gain_base, &cases, &config.weights, &config.eval)
            .map_err(|e| stage("evaluate", e))?;
    base_report.controller = "base".into();
    write_cases_csv(&out_dir.join("cases.csv"), &[&base_report, &fit_report])
        .map_err(|e| stage("evaluate", e))?;

    // head-to-head plot case: origin -> the boundary point at pi/4
    let frac = real::<T>(std::f64::consts::FRAC_1_SQRT_2);
    let x_ref = Vec2::new(config.params.i_max * frac, config.params.i_max * frac);
    let u_ref = equilibrium_input(&plant, x_ref);
    let sim_opts = SimOptions {
        max_steps: config.eval.max_steps,
        stop_tol: config.eval.stop_tol,
        stop_window: config.eval.stop_window,
        record_presat: false,
    };
    let traj_base = simulate(&plant, &gain_base, Vec2::zero(), x_ref, u_ref, &sim_opts);
    let traj_fit = simulate(&plant, &gain_fit, Vec2::zero(), x_ref, u_ref, &sim_opts);
    let traj_mpc = run_mpc(
        &plant,
        &config.weights,
        Vec2::zero(),
        x_ref,
        config.horizon,
        config.eval.stop_tol,
        config.eval.stop_window,
        config.eval.max_steps,
        config.seed,
    )
    .map_err(|e| stage("plotdata", e))?;
    let mut fig2 = Vec::new();
    let mut fig3 = Vec::new();
    emit_plotdata(
        &[&traj_base, &traj_fit, &traj_mpc],
        &["base", "fit", "mpc"],
        x_ref,
        u_ref,
        config.params.dt,
        &mut fig2,
        &mut fig3,
    )
    .map_err(|e| stage("plotdata", e))?;
    std::fs::write(out_dir.join("fig2.csv"), fig2)?;
    std::fs::write(out_dir.join("fig3.csv"), fig3)?;

    let cert_fit = certify_gain(&plant, &gain_fit.k);
    let cert_base = certify_gain(&plant, &gain_base.k);
    let base_avg = base_report.aggregates.average_cost;
    let report = PipelineReport {
        grid_points: grid.len(),
        cases: cases.len(),
        dataset_samples: dataset.len(),
        dataset_failures: ds_report.failures.len(),
        gain_fit: gain_fit.k,
        gain_base: gain_base.k,
        fit_certified: cert_fit.feasible,
        base_certified: cert_base.feasible,
        sigma_fit: cert_fit.sigma_closed,
        sigma_base: cert_base.sigma_closed,
        cost_ratio_fit_over_base: fit_report.aggregates.average_cost
            / base_avg.max(real(1e-30)),
        fit: fit_report,
        base: base_report,
        seed: config.seed,
    };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    std::fs::write(out_dir.join("report.json"), json)?;
    Ok(report)
}
