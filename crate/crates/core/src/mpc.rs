//! Finite-horizon optimal control through the saturated dynamics, and the
//! rolling-horizon MPC loop that generates the fitting dataset.
//!
//! The problem is nonconvex because of the saturation, so it is solved by
//! direct shooting: gradients through the piecewise-smooth dynamics by
//! reverse accumulation, Armijo backtracking, and a handful of restarts
//! (warm start, zeros, a finite-horizon LQR rollout, and seeded random
//! perturbations); the best local optimum wins.

use crate::error::{Error, Result};
use crate::linalg::{Mat2, Vec2};
use crate::model::{
    clip, equilibrium_input, Input, LinearPlant, State, Trajectory, TrajectoryRecord,
};
use crate::scalar::{real, Real};
use crate::synthesis::{Dataset, LqrWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// A finite-horizon saturated optimal control problem:
/// minimize sum_{t=1..T} (x_t - x*)' Q (x_t - x*) + sum_{t=0..T-1} u_t' R u_t
/// over input deviations u, subject to the shifted saturated dynamics
/// z_{t+1} = A (x_t - x*) + B u_t, x_{t+1} = sat(z_{t+1} + x*), x_0 = x_init.
#[derive(Clone, Copy, Debug)]
pub struct OcpSpec<T> {
    pub plant: LinearPlant<T>,
    pub horizon: usize,
    pub weights: LqrWeights<T>,
    pub x_init: State<T>,
    pub x_ref: State<T>,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    /// Total gradient iterations summed over restarts.
    pub iterations: usize,
    /// Number of starting points tried.
    pub restarts: usize,
    /// Whether the winning restart reached the gradient tolerance.
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct OcpSolution<T> {
    /// Input deviations, length T.
    pub inputs: Vec<Input<T>>,
    /// States including x_init, length T + 1.
    pub states: Vec<State<T>>,
    pub objective: T,
    pub diagnostics: SolverDiagnostics,
}

/// Solver knobs; the defaults implement the documented contract.
#[derive(Clone, Debug)]
pub struct SolveOptions<T> {
    pub warm_start: Option<Vec<Input<T>>>,
    /// Seed for the random restarts (derived per case for reproducibility).
    pub seed: u64,
    pub grad_tol: T,
    pub max_iters_per_restart: usize,
    pub random_restarts: usize,
}

impl<T: Real> Default for SolveOptions<T> {
    fn default() -> Self {
        Self {
            warm_start: None,
            seed: 0,
            grad_tol: real(1e-8),
            max_iters_per_restart: 10_000,
            random_restarts: 3,
        }
    }
}

impl<T: Real> OcpSpec<T> {
    fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Domain("OCP horizon must be >= 1".into()));
        }
        self.weights.validate()?;
        if !(self.x_init.is_finite() && self.x_ref.is_finite()) {
            return Err(Error::Domain("OCP endpoints must be finite".into()));
        }
        Ok(())
    }
}

/// Saturation Jacobian at the pre-saturation point `z`: identity inside the
/// disk, `(limit/||z||)(I - zz'/||z||^2)` outside (one-sided limit on the
/// boundary itself).
fn sat_jacobian<T: Real>(z: Vec2<T>, limit: T) -> Mat2<T> {
    let n = z.norm();
    if n < limit {
        Mat2::identity()
    } else {
        let scale = limit / n;
        (Mat2::identity() - z.outer(z).scale((n * n).recip())).scale(scale)
    }
}

/// Forward rollout through the shifted saturated dynamics; returns states and
/// the objective.
pub fn rollout<T: Real>(spec: &OcpSpec<T>, inputs: &[Input<T>]) -> (Vec<State<T>>, T) {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(spec.x_init);
    let mut obj = T::zero();
    let mut x = spec.x_init;
    for &u in inputs {
        let e = x - spec.x_ref;
        let z = spec.plant.a * e + spec.plant.b * u + spec.x_ref;
        let (next, _) = clip(z, spec.plant.i_max);
        let en = next - spec.x_ref;
        obj += en.dot(spec.weights.q * en) + u.dot(spec.weights.r_cost * u);
        states.push(next);
        x = next;
    }
    (states, obj)
}

/// Objective gradient w.r.t. every input, by reverse accumulation.
pub fn gradient<T: Real>(spec: &OcpSpec<T>, inputs: &[Input<T>]) -> Vec<Input<T>> {
    let tn = inputs.len();
    let mut states = Vec::with_capacity(tn + 1);
    let mut jacobians = Vec::with_capacity(tn);
    states.push(spec.x_init);
    let mut x = spec.x_init;
    for &u in inputs {
        let e = x - spec.x_ref;
        let z = spec.plant.a * e + spec.plant.b * u + spec.x_ref;
        jacobians.push(sat_jacobian(z, spec.plant.i_max));
        let (next, _) = clip(z, spec.plant.i_max);
        states.push(next);
        x = next;
    }
    let two = real::<T>(2.0);
    let mut grads = vec![Vec2::zero(); tn];
    // adjoint a_t = dJ/dx_t, seeded at the terminal state
    let e_t = states[tn] - spec.x_ref;
    let mut a = (spec.weights.q * e_t).scale(two);
    for t in (0..tn).rev() {
        let sa = jacobians[t].transpose() * a;
        grads[t] = (spec.weights.r_cost * inputs[t]).scale(two) + spec.plant.b.transpose() * sa;
        if t > 0 {
            let e = states[t] - spec.x_ref;
            a = (spec.weights.q * e).scale(two) + spec.plant.a.transpose() * sa;
        }
    }
    grads
}

/// Time-varying finite-horizon LQR gains for the unsaturated problem
/// (backward Riccati pass with zero terminal cost), used as a restart.
fn lqr_rollout<T: Real>(spec: &OcpSpec<T>) -> Vec<Input<T>> {
    let (a, b) = (spec.plant.a, spec.plant.b);
    let (q, r) = (spec.weights.q, spec.weights.r_cost);
    let mut gains = vec![Mat2::zero(); spec.horizon];
    let mut p = Mat2::zero();
    for t in (0..spec.horizon).rev() {
        let w = q + p;
        let btw = b.transpose() * w;
        let s_inv = (r + btw * b).inverse().unwrap_or_else(Mat2::zero);
        let k = s_inv * (btw * a);
        gains[t] = k;
        p = a.transpose() * w * a - a.transpose() * (btw.transpose() * k);
    }
    let mut inputs = Vec::with_capacity(spec.horizon);
    let mut x = spec.x_init;
    for k in gains {
        let e = x - spec.x_ref;
        let u = -(k * e);
        let z = spec.plant.a * e + spec.plant.b * u + spec.x_ref;
        let (next, _) = clip(z, spec.plant.i_max);
        inputs.push(u);
        x = next;
    }
    inputs
}

fn grad_norm<T: Real>(g: &[Input<T>]) -> T {
    g.iter().fold(T::zero(), |s, v| s + v.norm_sq()).sqrt()
}

/// Diagonal preconditioner for the shooting descent: inverse of the
/// per-coordinate curvature bound 2 (R + T B'QB). The two input channels have
/// wildly different cost scales, so unscaled gradient steps crawl.
fn preconditioner<T: Real>(spec: &OcpSpec<T>) -> Vec2<T> {
    let btqb = spec.plant.b.transpose() * spec.weights.q * spec.plant.b;
    let h = real::<T>(spec.horizon as f64);
    let two = real::<T>(2.0);
    let floor = real::<T>(1e-12);
    Vec2::new(
        (two * (spec.weights.r_cost.m[0][0] + h * btqb.m[0][0])).max(floor).recip(),
        (two * (spec.weights.r_cost.m[1][1] + h * btqb.m[1][1])).max(floor).recip(),
    )
}

/// Minimize from one starting point: preconditioned gradient descent with
/// Armijo backtracking. Returns (inputs, objective, iterations, converged)
/// or None if the line search stalls immediately.
fn descend<T: Real>(
    spec: &OcpSpec<T>,
    mut inputs: Vec<Input<T>>,
    opts: &SolveOptions<T>,
) -> Option<(Vec<Input<T>>, T, usize, bool)> {
    let (_, mut obj) = rollout(spec, &inputs);
    let armijo = real::<T>(1e-4);
    let precond = preconditioner(spec);
    let mut alpha = T::one();
    let mut iters = 0usize;
    let mut converged = false;
    while iters < opts.max_iters_per_restart {
        iters += 1;
        let g = gradient(spec, &inputs);
        let gn = grad_norm(&g);
        if gn < opts.grad_tol {
            converged = true;
            break;
        }
        let dir: Vec<Input<T>> = g
            .iter()
            .map(|gi| Vec2::new(gi.x * precond.x, gi.y * precond.y))
            .collect();
        // descent measure g . dir (positive since the preconditioner is SPD)
        let gd = g
            .iter()
            .zip(&dir)
            .fold(T::zero(), |s, (gi, di)| s + gi.dot(*di));
        alpha = (alpha * real::<T>(2.0)).min(real(1e6));
        let mut improved = false;
        while alpha > real(1e-20) {
            let trial: Vec<Input<T>> = inputs
                .iter()
                .zip(&dir)
                .map(|(&u, &di)| u - di.scale(alpha))
                .collect();
            let (_, trial_obj) = rollout(spec, &trial);
            if trial_obj <= obj - armijo * alpha * gd {
                inputs = trial;
                obj = trial_obj;
                improved = true;
                break;
            }
            alpha *= real::<T>(0.5);
        }
        if !improved {
            if iters == 1 {
                return None; // line search failed from the start
            }
            break; // stalled at a numerically flat point
        }
    }
    Some((inputs, obj, iters, converged))
}

/// Solve the finite-horizon saturated OCP with default options.
pub fn solve_ocp<T: Real>(spec: &OcpSpec<T>) -> Result<OcpSolution<T>> {
    solve_ocp_with(spec, &SolveOptions::default())
}

/// Solve with explicit options (warm start, seed, tolerances).
pub fn solve_ocp_with<T: Real>(spec: &OcpSpec<T>, opts: &SolveOptions<T>) -> Result<OcpSolution<T>> {
    spec.validate()?;
    let tn = spec.horizon;
    let mut starts: Vec<Vec<Input<T>>> = Vec::new();
    if let Some(w) = &opts.warm_start {
        let mut w = w.clone();
        w.resize(tn, Vec2::zero());
        starts.push(w);
    }
    starts.push(vec![Vec2::zero(); tn]);
    starts.push(lqr_rollout(spec));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.random_restarts {
        starts.push(
            (0..tn)
                .map(|_| {
                    Vec2::new(
                        real(rng.gen_range(-5.0..5.0)),
                        real(rng.gen_range(-0.5..0.5)),
                    )
                })
                .collect(),
        );
    }
    let has_warm = opts.warm_start.is_some();
    let mut n_starts = 0usize;
    let mut best: Option<(Vec<Input<T>>, T, bool)> = None;
    let mut total_iters = 0usize;
    let mut failures = 0usize;
    let interior = spec.plant.i_max * (T::one() - real(1e-9));
    for (idx, start) in starts.into_iter().enumerate() {
        n_starts += 1;
        match descend(spec, start, opts) {
            Some((inputs, obj, iters, converged)) => {
                total_iters += iters;
                // Fast path for the rolling-horizon loop: a converged warm
                // start whose rollout stays strictly inside the limit sits at
                // the optimum of the locally smooth LQ problem. The remaining
                // restarts only exist to escape saturation-induced local
                // minima, so skip them.
                let shortcut = idx == 0 && has_warm && converged && {
                    let (states, _) = rollout(spec, &inputs);
                    states[1..].iter().all(|s| s.norm() < interior)
                };
                let better = match &best {
                    None => true,
                    Some((_, b_obj, _)) => obj < *b_obj,
                };
                if better {
                    best = Some((inputs, obj, converged));
                }
                if shortcut {
                    break;
                }
            }
            None => failures += 1,
        }
    }
    let Some((inputs, _, converged)) = best else {
        return Err(Error::Solver(format!(
            "all {failures} restarts failed the line search (horizon {tn})"
        )));
    };
    let (states, objective) = rollout(spec, &inputs);
    Ok(OcpSolution {
        inputs,
        states,
        objective,
        diagnostics: SolverDiagnostics {
            iterations: total_iters,
            restarts: n_starts,
            converged,
        },
    })
}

/// Rolling-horizon MPC: solve the OCP at each step, apply the first input,
/// warm-start the next solve with the shifted previous solution.
#[allow(clippy::too_many_arguments)]
pub fn run_mpc<T: Real>(
    plant: &LinearPlant<T>,
    weights: &LqrWeights<T>,
    x_init: State<T>,
    x_ref: State<T>,
    horizon: usize,
    stop_tol: T,
    stop_window: usize,
    max_steps: usize,
    seed: u64,
) -> Result<Trajectory<T>> {
    if horizon == 0 {
        return Err(Error::Domain("MPC horizon must be >= 1".into()));
    }
    let u_ref = equilibrium_input(plant, x_ref);
    let mut records = Vec::new();
    let mut x = x_init;
    let mut saturated = false;
    let mut quiet = 0usize;
    let mut converged = false;
    let mut warm: Option<Vec<Input<T>>> = None;
    for t in 0..=max_steps {
        if converged || t == max_steps {
            // terminal record with the held equilibrium input
            records.push(TrajectoryRecord {
                t,
                state: x,
                input: u_ref,
                saturated,
                lyapunov: (x - x_ref).norm_sq(),
            });
            break;
        }
        let spec = OcpSpec {
            plant: *plant,
            horizon,
            weights: *weights,
            x_init: x,
            x_ref,
        };
        let opts = SolveOptions {
            warm_start: warm.take(),
            seed: seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            ..SolveOptions::default()
        };
        let sol = solve_ocp_with(&spec, &opts)
            .map_err(|e| Error::Solver(format!("MPC step {t}: {e}")))?;
        let u_dev = sol.inputs[0];
        let u = u_ref + u_dev;
        records.push(TrajectoryRecord {
            t,
            state: x,
            input: u,
            saturated,
            lyapunov: (x - x_ref).norm_sq(),
        });
        let (next, clipped) = crate::model::step(plant, x, u);
        if (next - x).norm() < stop_tol {
            quiet += 1;
            if quiet >= stop_window {
                converged = true;
            }
        } else {
            quiet = 0;
        }
        // shift the solution for the next warm start, zero appended
        let mut shifted: Vec<Input<T>> = sol.inputs[1..].to_vec();
        shifted.push(Vec2::zero());
        warm = Some(shifted);
        x = next;
        saturated = clipped;
    }
    Ok(Trajectory {
        records,
        converged,
        presat: None,
    })
}

/// Failures collected by [`generate_dataset`] (case index, error text).
#[derive(Clone, Debug, Default)]
pub struct DatasetReport {
    pub failures: Vec<(usize, String)>,
    pub trajectories: usize,
}

/// Run MPC for every (x_init, x_ref) pair and collect (delta_x, input
/// deviation) samples. Cases run in parallel; output ordering follows grid
/// order regardless of completion order. Per-case seeds derive from the grid
/// indices so reruns are reproducible.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset<T: Real>(
    plant: &LinearPlant<T>,
    weights: &LqrWeights<T>,
    init_grid: &[State<T>],
    ref_grid: &[State<T>],
    horizon: usize,
    stop_tol: T,
    stop_window: usize,
    max_steps: usize,
    base_seed: u64,
) -> Result<(Dataset<T>, DatasetReport)> {
    if init_grid.is_empty() || ref_grid.is_empty() {
        return Err(Error::Domain("dataset grids must be nonempty".into()));
    }
    let cases: Vec<(usize, State<T>, State<T>)> = init_grid
        .iter()
        .enumerate()
        .flat_map(|(i, &x0)| {
            ref_grid
                .iter()
                .enumerate()
                .map(move |(j, &xr)| (i * ref_grid.len() + j, x0, xr))
        })
        .collect();
    let results: Vec<(usize, Result<Trajectory<T>>)> = cases
        .par_iter()
        .map(|&(case, x0, xr)| {
            let seed = base_seed
                ^ (case as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            (
                case,
                run_mpc(plant, weights, x0, xr, horizon, stop_tol, stop_window, max_steps, seed),
            )
        })
        .collect();
    let mut dataset = Dataset::default();
    let mut report = DatasetReport::default();
    for (case, result) in results {
        match result {
            Ok(traj) => {
                let xr = cases[case].2;
                let u_ref = equilibrium_input(plant, xr);
                for r in &traj.records {
                    dataset.push(case, r.t, r.state - xr, r.input - u_ref);
                }
                report.trajectories += 1;
            }
            Err(e) => report.failures.push((case, e.to_string())),
        }
    }
    Ok((dataset, report))
}
