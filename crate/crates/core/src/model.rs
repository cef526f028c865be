//! Simplified inverter model: plant parameters, radial current saturation,
//! discrete-time matrices, power/current conversions and closed-loop
//! simulation.
//!
//! The plant is the forward-Euler discretization of the dq-frame RL filter
//! dynamics with a magnitude limit on the current vector:
//! `x_{t+1} = sat(A x_t + B u_t)` where `sat` projects onto the disk of
//! radius `i_max` preserving direction.

use crate::certify::Gain;
use crate::error::{Error, Result};
use crate::linalg::{Mat2, Vec2};
use crate::scalar::{real, Real};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;

/// Current state in the dq frame. `x` is the d-axis current, `y` the q-axis
/// current, both in amperes.
pub type State<T> = Vec2<T>;

/// Control input: `x` is the inverter voltage magnitude deviation (V), `y`
/// the angle deviation (rad).
pub type Input<T> = Vec2<T>;

/// Physical constants of the simplified plant (Table-style SI units).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PlantParams<T> {
    /// Series resistance (Ohm).
    pub r: T,
    /// Series inductance (H).
    pub l: T,
    /// Grid voltage magnitude (V).
    pub e: T,
    /// Nominal angular frequency (rad/s).
    pub omega_nom: T,
    /// Nominal phase-neutral voltage (V).
    pub v_nom: T,
    /// Discretization step (s).
    pub dt: T,
    /// Current magnitude limit (A).
    pub i_max: T,
    /// Nominal apparent power (VA), informational.
    pub s_nom: T,
    /// Nominal current (A), informational.
    pub i_nom: T,
}

impl<T: Real> PlantParams<T> {
    /// The parameter set used throughout the experiments: 120 V / 1.5 kVA
    /// inverter behind a 1.3 Ohm / 3.5 mH filter, 10 us step.
    pub fn table1() -> Self {
        Self {
            r: real(1.3),
            l: real(3.5e-3),
            e: real(120.0),
            omega_nom: real(2.0 * std::f64::consts::PI * 60.0),
            v_nom: real(120.0),
            dt: real(1e-5),
            i_max: real(4.167),
            s_nom: real(1500.0),
            i_nom: real(4.167),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Err(Error::InvalidParameter { field, reason });
        if !(self.r >= T::zero() && self.r.is_finite()) {
            return bad("R_ohm", format!("must be >= 0, got {}", self.r));
        }
        if !(self.l > T::zero() && self.l.is_finite()) {
            return bad("L_H", format!("must be > 0, got {}", self.l));
        }
        if !(self.e > T::zero() && self.e.is_finite()) {
            return bad("E_V", format!("must be > 0, got {}", self.e));
        }
        if !(self.dt > T::zero() && self.dt.is_finite()) {
            return bad("dt_s", format!("must be > 0, got {}", self.dt));
        }
        if !(self.i_max > T::zero() && self.i_max.is_finite()) {
            return bad("I_max_A", format!("must be > 0, got {}", self.i_max));
        }
        if !(self.v_nom > T::zero() && self.v_nom.is_finite()) {
            return bad("V_nom_V", format!("must be > 0, got {}", self.v_nom));
        }
        if self.dt * self.r / self.l >= T::one() {
            return bad("dt_s", "dt*R/L >= 1 breaks the Euler discretization".into());
        }
        if self.dt * self.omega_nom >= T::one() {
            return bad(
                "dt_s",
                "dt*omega_nom >= 1 breaks the Euler discretization".into(),
            );
        }
        Ok(())
    }

    /// Parse from `key=value` lines. Keys: `R_ohm, L_H, E_V, omega_nom_rad_s,
    /// V_nom_V, dt_s, I_max_A, S_nom_VA, I_nom_A`. `#` starts a comment.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let get = |key: &str| -> Result<T> {
            let v = map
                .get(key)
                .ok_or_else(|| Error::Config(format!("missing key `{key}`")))?;
            parse_scalar(v).ok_or_else(|| Error::Config(format!("bad number for `{key}`: {v}")))
        };
        let params = Self {
            r: get("R_ohm")?,
            l: get("L_H")?,
            e: get("E_V")?,
            omega_nom: get("omega_nom_rad_s")?,
            v_nom: get("V_nom_V")?,
            dt: get("dt_s")?,
            i_max: get("I_max_A")?,
            s_nom: get("S_nom_VA")?,
            i_nom: get("I_nom_A")?,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_kv_str(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn parse_kv(text: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub(crate) fn parse_scalar<T: Real>(s: &str) -> Option<T> {
    s.parse::<f64>().ok().map(|v| real(v))
}

/// Discrete-time plant matrices with the saturation radius.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LinearPlant<T> {
    pub a: Mat2<T>,
    pub b: Mat2<T>,
    pub i_max: T,
}

/// Radial saturation: the identity inside the disk of radius `limit`,
/// projection onto its boundary outside. Direction is always preserved.
pub fn saturate<T: Real>(z: Vec2<T>, limit: T) -> Result<Vec2<T>> {
    if !z.is_finite() {
        return Err(Error::Domain(format!(
            "saturate: non-finite input ({}, {})",
            z.x, z.y
        )));
    }
    if !(limit > T::zero() && limit.is_finite()) {
        return Err(Error::Domain(format!("saturate: limit must be > 0, got {limit}")));
    }
    Ok(clip(z, limit).0)
}

/// Infallible saturation for hot loops; inputs are assumed finite.
/// Returns the clipped vector and whether clipping occurred.
#[inline]
pub(crate) fn clip<T: Real>(z: Vec2<T>, limit: T) -> (Vec2<T>, bool) {
    let n = z.norm();
    if n <= limit {
        (z, false)
    } else {
        (z.scale(limit / n), true)
    }
}

/// Build the discrete-time matrices from physical parameters:
/// `A = I - dt*[[R/L, w], [-w, R/L]]`, `B = dt*diag(sqrt2/L, sqrt2*E/L)`.
pub fn build_plant<T: Real>(params: &PlantParams<T>) -> Result<LinearPlant<T>> {
    params.validate()?;
    let rl = params.dt * params.r / params.l;
    let w = params.dt * params.omega_nom;
    let sqrt2 = real::<T>(std::f64::consts::SQRT_2);
    Ok(LinearPlant {
        a: Mat2::new(T::one() - rl, -w, w, T::one() - rl),
        b: Mat2::diag(
            params.dt * sqrt2 / params.l,
            params.dt * sqrt2 * params.e / params.l,
        ),
        i_max: params.i_max,
    })
}

/// Map a power setpoint to the equivalent current reference:
/// `I_d = P / ((3/sqrt2) V_nom)`, `I_q = -Q / ((3/sqrt2) V_nom)`.
pub fn power_to_current<T: Real>(p_ref: T, q_ref: T, params: &PlantParams<T>) -> State<T> {
    let scale = real::<T>(3.0) / real::<T>(std::f64::consts::SQRT_2) * params.v_nom;
    Vec2::new(p_ref / scale, -q_ref / scale)
}

/// Inverse of [`power_to_current`]: grid-side powers carried by a current.
pub fn current_to_power<T: Real>(i: State<T>, params: &PlantParams<T>) -> (T, T) {
    let scale = real::<T>(3.0) / real::<T>(std::f64::consts::SQRT_2) * params.v_nom;
    (scale * i.x, -(scale * i.y))
}

/// One step of the saturated dynamics. Returns the next state and whether the
/// saturation clipped.
pub fn step<T: Real>(plant: &LinearPlant<T>, x: State<T>, u: Input<T>) -> (State<T>, bool) {
    clip(plant.a * x + plant.b * u, plant.i_max)
}

/// Feed-forward input holding `x_ref` as a fixed point of the unsaturated
/// loop: `u* = B^-1 (I - A) x_ref`.
pub fn equilibrium_input<T: Real>(plant: &LinearPlant<T>, x_ref: State<T>) -> Input<T> {
    let b_inv = plant.b.inverse().expect("B is diagonal positive by construction");
    b_inv * ((Mat2::identity() - plant.a) * x_ref)
}

/// Options for [`simulate`].
#[derive(Clone, Copy, Debug)]
pub struct SimOptions<T> {
    pub max_steps: usize,
    /// Stop once the state change stays below this for `stop_window` steps.
    pub stop_tol: T,
    pub stop_window: usize,
    /// Record pre-saturation states so a Lyapunov audit can check the
    /// saturated-branch inequality.
    pub record_presat: bool,
}

impl<T: Real> Default for SimOptions<T> {
    fn default() -> Self {
        Self {
            max_steps: 200_000,
            stop_tol: real(1e-5),
            stop_window: 10,
            record_presat: false,
        }
    }
}

/// One time step of a recorded closed-loop run.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrajectoryRecord<T> {
    pub t: usize,
    pub state: State<T>,
    /// Input applied at step `t` (full input, feed-forward included).
    pub input: Input<T>,
    /// Whether the transition *into* this state clipped (false at t = 0).
    pub saturated: bool,
    /// Squared tracking error at this step.
    pub lyapunov: T,
}

/// A recorded closed-loop run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory<T> {
    pub records: Vec<TrajectoryRecord<T>>,
    /// Whether the stop rule fired before `max_steps`.
    pub converged: bool,
    /// Pre-saturation update for each record, when requested.
    /// `presat[t]` is the unclipped `A x_{t-1} + B u_{t-1}`; `None` at t = 0.
    pub presat: Option<Vec<Option<Vec2<T>>>>,
}

impl<T: Real> Trajectory<T> {
    pub fn last_state(&self) -> State<T> {
        self.records.last().expect("trajectory nonempty").state
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// CSV with header `t,i_d,i_q,v,delta,saturated,lyapunov`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,i_d,i_q,v,delta,saturated,lyapunov")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.t, r.state.x, r.state.y, r.input.x, r.input.y, r.saturated as u8, r.lyapunov
            )?;
        }
        Ok(())
    }
}

/// Closed-loop simulation of `u_t = u_ref - K (x_t - x_ref)` through the
/// saturated dynamics, with the consecutive-small-step stop rule.
pub fn simulate<T: Real>(
    plant: &LinearPlant<T>,
    gain: &Gain<T>,
    x0: State<T>,
    x_ref: State<T>,
    u_ref: Input<T>,
    opts: &SimOptions<T>,
) -> Trajectory<T> {
    assert!(opts.max_steps >= 1, "max_steps must be >= 1");
    assert!(opts.stop_tol > T::zero(), "stop_tol must be > 0");
    let k = gain.k;
    let mut records = Vec::new();
    let mut presat: Vec<Option<Vec2<T>>> = Vec::new();
    let mut x = x0;
    let mut saturated = false;
    let mut quiet = 0usize;
    let mut converged = false;
    for t in 0..=opts.max_steps {
        let u = u_ref - k * (x - x_ref);
        records.push(TrajectoryRecord {
            t,
            state: x,
            input: u,
            saturated,
            lyapunov: (x - x_ref).norm_sq(),
        });
        if converged || t == opts.max_steps {
            break;
        }
        let z = plant.a * x + plant.b * u;
        let (next, clipped) = clip(z, plant.i_max);
        if opts.record_presat {
            if presat.is_empty() {
                presat.push(None);
            }
            presat.push(Some(z));
        }
        if (next - x).norm() < opts.stop_tol {
            quiet += 1;
            if quiet >= opts.stop_window {
                converged = true;
            }
        } else {
            quiet = 0;
        }
        x = next;
        saturated = clipped;
    }
    Trajectory {
        records,
        converged,
        presat: opts.record_presat.then_some(presat),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TABLE1_A11: f64 = 0.996_285_714_285_714_3;
    const TABLE1_A12: f64 = -0.003_769_911_184_307_752;

    fn plant() -> LinearPlant<f64> {
        build_plant(&PlantParams::table1()).unwrap()
    }

    #[test]
    fn saturate_examples() {
        let s = |x: f64, y: f64, lim: f64| saturate(Vec2::new(x, y), lim).unwrap();
        assert_eq!(s(0.5, 0.0, 1.0), Vec2::new(0.5, 0.0));
        let v = s(3.0, 4.0, 1.0);
        assert!((v.x - 0.6).abs() < 1e-15 && (v.y - 0.8).abs() < 1e-15);
        assert_eq!(s(1.0, 0.0, 1.0), Vec2::new(1.0, 0.0));
        let v = s(5.0, 0.0, 4.167);
        assert!((v.x - 4.167).abs() < 1e-12 && v.y == 0.0);
    }

    #[test]
    fn saturate_rejects_bad_input() {
        assert!(saturate(Vec2::new(f64::NAN, 0.0), 1.0).is_err());
        assert!(saturate(Vec2::new(1.0, 0.0), 0.0).is_err());
        assert!(saturate(Vec2::new(1.0, 0.0), -1.0).is_err());
    }

    #[test]
    fn build_plant_table1() {
        let p = plant();
        assert!((p.a.m[0][0] - TABLE1_A11).abs() < 1e-12);
        assert!((p.a.m[0][1] - TABLE1_A12).abs() < 1e-12);
        assert!((p.a.m[1][0] + TABLE1_A12).abs() < 1e-12);
        assert!((p.a.m[1][1] - TABLE1_A11).abs() < 1e-12);
        assert!((p.b.m[0][0] - 4.040_610_178e-3).abs() < 1e-9);
        assert!((p.b.m[1][1] - 4.848_732_214e-1).abs() < 1e-7);
        assert_eq!(p.b.m[0][1], 0.0);
        assert_eq!(p.b.m[1][0], 0.0);
    }

    #[test]
    fn build_plant_lossless_limit() {
        let mut params = PlantParams::<f64>::table1();
        params.r = 0.0;
        params.omega_nom = 0.0;
        let p = build_plant(&params).unwrap();
        assert_eq!(p.a, Mat2::identity());
    }

    #[test]
    fn build_plant_rejects_bad_params() {
        let mut params = PlantParams::<f64>::table1();
        params.l = 0.0;
        let err = build_plant(&params).unwrap_err();
        assert!(err.to_string().contains("L_H"));
        let mut params = PlantParams::<f64>::table1();
        params.dt = 1.0; // dt*omega >> 1
        assert!(build_plant(&params).is_err());
    }

    #[test]
    fn open_loop_spectral_norm_closed_form() {
        let params = PlantParams::<f64>::table1();
        let p = plant();
        let rl = params.dt * params.r / params.l;
        let w = params.dt * params.omega_nom;
        let closed_form = ((1.0 - rl).powi(2) + w * w).sqrt();
        assert!((p.a.spectral_norm() - closed_form).abs() < 1e-12);
        assert!(closed_form < 1.0);
    }

    #[test]
    fn power_current_round_trip() {
        let params = PlantParams::<f64>::table1();
        let i = power_to_current(775.0, -775.0, &params);
        assert!((i.x - 3.044_487_530_108_746).abs() < 1e-12);
        assert!((i.y - 3.044_487_530_108_746).abs() < 1e-12);
        let (p, q) = current_to_power(i, &params);
        assert!((p - 775.0).abs() < 775.0 * 1e-12);
        assert!((q + 775.0).abs() < 775.0 * 1e-12);
        assert_eq!(power_to_current(0.0, 0.0, &params), Vec2::zero());
        let i = power_to_current(2.0 * 254.558_441_227_157, 0.0, &params);
        assert!((i.x - 2.0).abs() < 1e-10 && i.y == 0.0);
    }

    #[test]
    fn step_examples() {
        let p = plant();
        let (x, sat) = step(&p, Vec2::zero(), Vec2::zero());
        assert_eq!(x, Vec2::zero());
        assert!(!sat);
        let (x, sat) = step(&p, Vec2::new(1.0, 0.0), Vec2::zero());
        assert!((x.x - TABLE1_A11).abs() < 1e-12);
        assert!((x.y + TABLE1_A12).abs() < 1e-12);
        assert!(!sat);
        // forced far outside the disk
        let (x, sat) = step(&p, Vec2::zero(), Vec2::new(1e4, 0.0));
        assert!((x.norm() - p.i_max).abs() < 1e-12);
        assert!(sat);
    }

    #[test]
    fn equilibrium_input_examples() {
        let p = plant();
        assert_eq!(equilibrium_input(&p, Vec2::zero()), Vec2::zero());
        let u = equilibrium_input(&p, Vec2::new(1.0, 0.0));
        assert!((u.x - 0.919_238_815_542_5).abs() < 1e-10, "{}", u.x);
        assert!((u.y + 7.775_045_141_8e-3).abs() < 1e-10, "{}", u.y);
        // linearity
        let u2 = equilibrium_input(&p, Vec2::new(2.0, 0.0));
        assert!((u2.x - 2.0 * u.x).abs() < 1e-12 && (u2.y - 2.0 * u.y).abs() < 1e-12);
        // fixed point
        let xr = Vec2::new(1.7, -2.1);
        let ur = equilibrium_input(&p, xr);
        let (next, _) = step(&p, xr, ur);
        assert!((next - xr).norm() < 1e-12);
    }

    #[test]
    fn simulate_at_reference_converges_immediately() {
        let p = plant();
        let xr = Vec2::new(1.0, 1.0);
        let ur = equilibrium_input(&p, xr);
        let gain = Gain::from_matrix(Mat2::diag(0.5, 0.5));
        let traj = simulate(&p, &gain, xr, xr, ur, &SimOptions::default());
        assert!(traj.converged);
        for r in &traj.records {
            assert!((r.input - ur).norm() < 1e-12);
            assert!(r.lyapunov < 1e-20);
        }
    }

    #[test]
    fn trajectory_csv_format() {
        let p = plant();
        let gain = Gain::from_matrix(Mat2::zero());
        let traj = simulate(
            &p,
            &gain,
            Vec2::new(1.0, 0.0),
            Vec2::zero(),
            Vec2::zero(),
            &SimOptions {
                max_steps: 3,
                ..SimOptions::default()
            },
        );
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,i_d,i_q,v,delta,saturated,lyapunov"));
        assert!(lines.next().unwrap().starts_with("0,1,0,"));
    }

    #[test]
    fn params_kv_round_trip() {
        let text = "
            R_ohm = 1.3
            L_H = 3.5e-3
            E_V = 120
            omega_nom_rad_s = 376.99111843077515
            V_nom_V = 120
            dt_s = 1e-5   # ten microseconds
            I_max_A = 4.167
            S_nom_VA = 1500
            I_nom_A = 4.167
        ";
        let params = PlantParams::<f64>::from_kv_str(text).unwrap();
        assert_eq!(params.r, 1.3);
        assert_eq!(params.i_max, 4.167);
        assert!(PlantParams::<f64>::from_kv_str("R_ohm=1.3").is_err());
    }

    proptest! {
        #[test]
        fn saturate_contract(x in -50.0f64..50.0, y in -50.0f64..50.0, lim in 0.01f64..10.0) {
            let z = Vec2::new(x, y);
            let s = saturate(z, lim).unwrap();
            prop_assert!(s.norm() <= lim * (1.0 + 1e-15));
            // idempotent
            let s2 = saturate(s, lim).unwrap();
            prop_assert!((s2 - s).norm() <= 1e-12);
            // direction preserved
            if z.norm() > 1e-9 {
                prop_assert!(z.cross(s).abs() <= 1e-9 * z.norm());
                prop_assert!(z.dot(s) >= 0.0);
            }
        }

        #[test]
        fn saturate_positive_homogeneity_inside(
            x in -5.0f64..5.0, y in -5.0f64..5.0, alpha in 0.01f64..1.0,
        ) {
            // for ||z|| <= lim and 0 < alpha <= 1: sat(alpha z) = alpha sat(z)
            let lim = 6.0 * 2.0f64.sqrt();
            let z = Vec2::new(x, y);
            let lhs = saturate(z.scale(alpha), lim).unwrap();
            let rhs = saturate(z, lim).unwrap().scale(alpha);
            prop_assert!((lhs - rhs).norm() < 1e-12);
        }

        #[test]
        fn step_stays_in_disk(
            x in -10.0f64..10.0, y in -10.0f64..10.0,
            uv in -100.0f64..100.0, ud in -1.0f64..1.0,
        ) {
            let p = plant();
            let (next, _) = step(&p, Vec2::new(x, y), Vec2::new(uv, ud));
            prop_assert!(next.norm() <= p.i_max * (1.0 + 1e-14));
        }
    }
}
