//! Full-order 12-state inverter model: PLL, voltage and current control
//! loops, and the LCL filter, in the dq frame rotating at the nominal
//! frequency. Used to check that the 2-state simplified model is a faithful
//! reduction for grid-side current steps.
//!
//! The inner current-reference vector passes through the same radial
//! magnitude limiter as the simplified model.

use crate::certify::Gain;
use crate::error::{Error, Result};
use crate::linalg::Vec2;
use crate::model::{clip, parse_kv, parse_scalar, PlantParams};
use crate::scalar::{real, Real};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// The 12 states; field order is the serialization contract.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullOrderState<T> {
    /// PLL angle difference from the grid voltage (rad).
    pub delta_pll: T,
    /// PLL integrator.
    pub pi_pll: T,
    /// Voltage-loop integrators.
    pub phi_d: T,
    pub phi_q: T,
    /// Current-loop integrators.
    pub gamma_d: T,
    pub gamma_q: T,
    /// Inverter-side inductor currents (A).
    pub i_id: T,
    pub i_iq: T,
    /// Capacitor voltages (V).
    pub w_d: T,
    pub w_q: T,
    /// Grid-side inductor currents (A).
    pub i_gd: T,
    pub i_gq: T,
}

impl<T: Real> FullOrderState<T> {
    pub fn zero() -> Self {
        Self::from_array([T::zero(); 12])
    }

    pub fn to_array(self) -> [T; 12] {
        [
            self.delta_pll,
            self.pi_pll,
            self.phi_d,
            self.phi_q,
            self.gamma_d,
            self.gamma_q,
            self.i_id,
            self.i_iq,
            self.w_d,
            self.w_q,
            self.i_gd,
            self.i_gq,
        ]
    }

    pub fn from_array(a: [T; 12]) -> Self {
        Self {
            delta_pll: a[0],
            pi_pll: a[1],
            phi_d: a[2],
            phi_q: a[3],
            gamma_d: a[4],
            gamma_q: a[5],
            i_id: a[6],
            i_iq: a[7],
            w_d: a[8],
            w_q: a[9],
            i_gd: a[10],
            i_gq: a[11],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn i_g(&self) -> Vec2<T> {
        Vec2::new(self.i_gd, self.i_gq)
    }

    pub fn i_i(&self) -> Vec2<T> {
        Vec2::new(self.i_id, self.i_iq)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .fold(T::zero(), |m, (a, b)| m.max((*a - b).abs()))
    }
}

/// Physical and controller parameters of the full-order model.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FullOrderParams<T> {
    /// Inverter-side filter.
    pub r_i: T,
    pub l_i: T,
    /// Grid-side filter.
    pub r_g: T,
    pub l_g: T,
    /// Filter capacitance.
    pub c: T,
    pub e: T,
    pub omega_nom: T,
    pub v_nom: T,
    /// PLL gains.
    pub k_p_pll: T,
    pub k_i_pll: T,
    /// Voltage-loop gains.
    pub k_pv: T,
    pub k_iv: T,
    /// Current-loop gains.
    pub k_pi: T,
    pub k_ii: T,
    /// Inner current-reference saturation radius (A).
    pub i_max: T,
}

impl<T: Real> FullOrderParams<T> {
    /// Defaults with the passive split summing to the simplified plant
    /// (R_i + R_g = 1.3 Ohm, L_i + L_g = 3.5 mH) and loop-shaped controller
    /// gains: 2 kHz current loop (k_pi = L_i w_c, k_ii = R_i w_c), voltage
    /// loop an order of magnitude slower (k_iv = C w_v^2 at w_v = 2pi*100,
    /// k_pv tuned for damping while riding the current limit), second-order
    /// PLL at 20 Hz with damping 0.707 normalized by the grid voltage
    /// amplitude sqrt(2) E.
    pub fn defaults() -> Self {
        let two_pi = 2.0 * std::f64::consts::PI;
        let (r_i, l_i, c, e) = (1.0, 2.5e-3, 24e-6, 120.0);
        let w_c = two_pi * 2000.0;
        let w_v = two_pi * 100.0;
        let w_pll = two_pi * 20.0;
        let zeta = 0.707;
        let e_amp = std::f64::consts::SQRT_2 * e;
        Self {
            r_i: real(r_i),
            l_i: real(l_i),
            r_g: real(0.3),
            l_g: real(1.0e-3),
            c: real(c),
            e: real(e),
            omega_nom: real(two_pi * 60.0),
            v_nom: real(120.0),
            k_p_pll: real(2.0 * zeta * w_pll / e_amp),
            k_i_pll: real(w_pll * w_pll / e_amp),
            k_pv: real(0.2),
            k_iv: real(c * w_v * w_v),
            k_pi: real(l_i * w_c),
            k_ii: real(r_i * w_c),
            i_max: real(4.167),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Err(Error::InvalidParameter { field, reason });
        for (field, v) in [
            ("R_i_ohm", self.r_i),
            ("L_i_H", self.l_i),
            ("R_g_ohm", self.r_g),
            ("L_g_H", self.l_g),
            ("C_F", self.c),
            ("E_V", self.e),
            ("V_nom_V", self.v_nom),
            ("I_max_A", self.i_max),
        ] {
            if !(v > T::zero() && v.is_finite()) {
                return bad(field, format!("must be > 0, got {v}"));
            }
        }
        for (field, v) in [
            ("k_p_pll", self.k_p_pll),
            ("k_i_pll", self.k_i_pll),
            ("k_pv", self.k_pv),
            ("k_iv", self.k_iv),
            ("k_pi", self.k_pi),
            ("k_ii", self.k_ii),
        ] {
            if !(v >= T::zero() && v.is_finite()) {
                return bad(field, format!("must be >= 0, got {v}"));
            }
        }
        Ok(())
    }

    /// Check the passive split against a simplified parameter set:
    /// R_i + R_g must equal R and L_i + L_g must equal L.
    pub fn consistent_with(&self, simplified: &PlantParams<T>) -> Result<()> {
        let tol = real::<T>(1e-9);
        if ((self.r_i + self.r_g) - simplified.r).abs() > tol * (T::one() + simplified.r) {
            return Err(Error::Config(format!(
                "R_i + R_g = {} does not match simplified R = {}",
                self.r_i + self.r_g,
                simplified.r
            )));
        }
        if ((self.l_i + self.l_g) - simplified.l).abs() > tol * (T::one() + simplified.l) {
            return Err(Error::Config(format!(
                "L_i + L_g = {} does not match simplified L = {}",
                self.l_i + self.l_g,
                simplified.l
            )));
        }
        Ok(())
    }

    /// Parse from `key=value` lines; missing keys fall back to the defaults.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let mut p = Self::defaults();
        let set = |key: &str, target: &mut T| -> Result<()> {
            if let Some(v) = map.get(key) {
                *target = parse_scalar(v)
                    .ok_or_else(|| Error::Config(format!("bad number for `{key}`: {v}")))?;
            }
            Ok(())
        };
        set("R_i_ohm", &mut p.r_i)?;
        set("L_i_H", &mut p.l_i)?;
        set("R_g_ohm", &mut p.r_g)?;
        set("L_g_H", &mut p.l_g)?;
        set("C_F", &mut p.c)?;
        set("E_V", &mut p.e)?;
        set("omega_nom_rad_s", &mut p.omega_nom)?;
        set("V_nom_V", &mut p.v_nom)?;
        set("k_p_pll", &mut p.k_p_pll)?;
        set("k_i_pll", &mut p.k_i_pll)?;
        set("k_pv", &mut p.k_pv)?;
        set("k_iv", &mut p.k_iv)?;
        set("k_pi", &mut p.k_pi)?;
        set("k_ii", &mut p.k_ii)?;
        set("I_max_A", &mut p.i_max)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_kv_str(&std::fs::read_to_string(path)?)
    }
}

/// Reference bundle for the full-order loop: grid current targets and the
/// feed-forward voltage magnitude / angle.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FullOrderRef<T> {
    pub i_d_ref: T,
    pub i_q_ref: T,
    pub v_star: T,
    pub delta_star: T,
}

/// Time derivative of the 12 states.
///
/// Evaluation order: the outer feedback `u = -K (I_g - I*) + [V*; delta*]`,
/// then the algebraic relations for the inner current reference (radially
/// saturated as a vector), the inverter voltage commands and
/// `omega_ref = k_i_pll Pi + k_p_pll W_q`, then the 12 derivatives.
pub fn fullorder_derivative<T: Real>(
    state: &FullOrderState<T>,
    params: &FullOrderParams<T>,
    gain: &Gain<T>,
    refr: &FullOrderRef<T>,
) -> FullOrderState<T> {
    let s = state;
    let p = params;
    let sqrt2 = real::<T>(std::f64::consts::SQRT_2);

    let err = Vec2::new(s.i_gd - refr.i_d_ref, s.i_gq - refr.i_q_ref);
    let u = -(gain.k * err) + Vec2::new(refr.v_star, refr.delta_star);
    let (v, delta_i) = (u.x, u.y);

    let omega_ref = p.k_i_pll * s.pi_pll + p.k_p_pll * s.w_q;

    // voltage-loop tracking errors (also the Phi integrator drives)
    let ev_d = sqrt2 * v * delta_i.cos() - s.w_d;
    let ev_q = sqrt2 * v * delta_i.sin() - s.w_q;

    // inner current reference, radially limited as a vector
    let i_ref_raw = Vec2::new(
        -(p.c * p.omega_nom * s.w_q) + p.k_iv * s.phi_d + p.k_pv * ev_d + s.i_gd,
        p.c * p.omega_nom * s.w_d + p.k_iv * s.phi_q + p.k_pv * ev_q + s.i_gq,
    );
    let (i_ref, _) = clip(i_ref_raw, p.i_max);

    // inverter bridge voltage commands
    let v_d = -(p.l_i * p.omega_nom * s.i_iq)
        + p.k_ii * s.gamma_d
        + p.k_pi * (i_ref.x - s.i_id)
        + s.w_d;
    let v_q = p.l_i * p.omega_nom * s.i_id
        + p.k_ii * s.gamma_q
        + p.k_pi * (i_ref.y - s.i_iq)
        + s.w_q;

    FullOrderState {
        delta_pll: omega_ref,
        pi_pll: s.w_q,
        phi_d: ev_d,
        phi_q: ev_q,
        gamma_d: i_ref.x - s.i_id,
        gamma_q: i_ref.y - s.i_iq,
        i_id: omega_ref * s.i_iq - p.r_i * s.i_id / p.l_i + (v_d - s.w_d) / p.l_i,
        i_iq: -(omega_ref * s.i_id) - p.r_i * s.i_iq / p.l_i + (v_q - s.w_q) / p.l_i,
        w_d: omega_ref * s.w_q + (s.i_id - s.i_gd) / p.c,
        w_q: -(omega_ref * s.w_d) + (s.i_iq - s.i_gq) / p.c,
        i_gd: omega_ref * s.i_gq - p.r_g * s.i_gd / p.l_g
            + (s.w_d - sqrt2 * p.e * s.delta_pll.cos()) / p.l_g,
        i_gq: -(omega_ref * s.i_gd) - p.r_g * s.i_gq / p.l_g
            + (s.w_q + sqrt2 * p.e * s.delta_pll.sin()) / p.l_g,
    }
}

/// Steady-state power flow through the grid-side branch for a current
/// target: the PLL angle and the capacitor d-voltage that null the grid-side
/// current derivatives.
fn power_flow<T: Real>(params: &FullOrderParams<T>, i_g: Vec2<T>) -> Result<(T, T)> {
    let sqrt2 = real::<T>(std::f64::consts::SQRT_2);
    let sin_dpll = params.r_g * i_g.y / (sqrt2 * params.e);
    if sin_dpll.abs() >= T::one() {
        return Err(Error::Domain(
            "power flow has no solution (angle out of range)".into(),
        ));
    }
    let delta_pll = sin_dpll.asin();
    let w_d = params.r_g * i_g.x + sqrt2 * params.e * delta_pll.cos();
    Ok((delta_pll, w_d))
}

/// Closed-form equilibrium for a grid-current target inside the limit:
/// solves every derivative to zero (PLL at rest, frame rotating at nominal).
pub fn equilibrium_state<T: Real>(
    params: &FullOrderParams<T>,
    i_g: Vec2<T>,
) -> Result<(FullOrderState<T>, FullOrderRef<T>)> {
    let p = params;
    let sqrt2 = real::<T>(std::f64::consts::SQRT_2);
    if i_g.norm() > p.i_max {
        return Err(Error::Domain(format!(
            "grid-current target magnitude {} exceeds the limit {}",
            i_g.norm(),
            p.i_max
        )));
    }
    let (delta_pll, w_d) = power_flow(p, i_g)?;
    if p.k_iv <= T::zero() || p.k_ii <= T::zero() {
        return Err(Error::Domain("equilibrium needs strictly positive k_iv, k_ii".into()));
    }
    let state = FullOrderState {
        delta_pll,
        pi_pll: T::zero(),
        phi_d: T::zero(),
        phi_q: -(p.c * p.omega_nom * w_d) / p.k_iv,
        gamma_d: (p.r_i * i_g.x + p.l_i * p.omega_nom * i_g.y) / p.k_ii,
        gamma_q: (p.r_i * i_g.y - p.l_i * p.omega_nom * i_g.x) / p.k_ii,
        i_id: i_g.x,
        i_iq: i_g.y,
        w_d,
        w_q: T::zero(),
        i_gd: i_g.x,
        i_gq: i_g.y,
    };
    let refr = FullOrderRef {
        i_d_ref: i_g.x,
        i_q_ref: i_g.y,
        v_star: w_d / sqrt2,
        delta_star: T::zero(),
    };
    Ok((state, refr))
}

/// Map a power setpoint to the full-order reference bundle.
///
/// The current targets come from the power-to-current matrix normalized by
/// sqrt(2)/(3 V_nom V*) so that at zero line drop the result coincides with
/// the simplified model's power_to_current map; (V*, delta*) then solve the
/// steady-state power flow through the grid-side branch (delta* = 0 in this
/// frame, V* from the line drop).
/// Targets beyond the current limit are allowed: the closed loop then rides
/// the limiter instead of settling at the (infeasible) target.
pub fn reference_from_power<T: Real>(
    p_ref: T,
    q_ref: T,
    params: &FullOrderParams<T>,
) -> Result<FullOrderRef<T>> {
    let sqrt2 = real::<T>(std::f64::consts::SQRT_2);
    let scale = real::<T>(3.0) / sqrt2 * params.v_nom;
    let i_g = Vec2::new(p_ref / scale, -(q_ref / scale));
    let (_, w_d) = power_flow(params, i_g)?;
    Ok(FullOrderRef {
        i_d_ref: i_g.x,
        i_q_ref: i_g.y,
        v_star: w_d / sqrt2,
        delta_star: T::zero(),
    })
}

/// Sampled full-order run.
#[derive(Clone, Debug)]
pub struct FullOrderTrajectory<T> {
    /// Sample times (s), starting at 0.
    pub times: Vec<T>,
    pub states: Vec<FullOrderState<T>>,
}

impl<T: Real> FullOrderTrajectory<T> {
    /// CSV with header `t,i_gd,i_gq,i_id,i_iq,w_d,w_q,delta_pll,mag_ig`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,i_gd,i_gq,i_id,i_iq,w_d,w_q,delta_pll,mag_ig")?;
        for (t, s) in self.times.iter().zip(&self.states) {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                t,
                s.i_gd,
                s.i_gq,
                s.i_id,
                s.i_iq,
                s.w_d,
                s.w_q,
                s.delta_pll,
                s.i_g().norm()
            )?;
        }
        Ok(())
    }
}

/// Fixed-step classic RK4 over the full-order dynamics, sampled every
/// `sample_dt` (must be a near-integer multiple of `dt_int`).
pub fn integrate_fullorder<T: Real>(
    x0: FullOrderState<T>,
    params: &FullOrderParams<T>,
    gain: &Gain<T>,
    refr: &FullOrderRef<T>,
    t_end: T,
    dt_int: T,
    sample_dt: T,
) -> Result<FullOrderTrajectory<T>> {
    params.validate()?;
    if !(dt_int > T::zero() && t_end > T::zero()) {
        return Err(Error::Domain("t_end and dt_int must be > 0".into()));
    }
    let per_sample_f = (sample_dt / dt_int).round();
    if per_sample_f < T::one()
        || (sample_dt / dt_int - per_sample_f).abs() > real(1e-9)
    {
        return Err(Error::Domain(format!(
            "sample_dt ({sample_dt}) must be an integer multiple of dt_int ({dt_int})"
        )));
    }
    let per_sample = per_sample_f.to_usize().unwrap();
    let n_steps = (t_end / dt_int).round().to_usize().unwrap_or(0).max(1);

    let deriv = |s: &FullOrderState<T>| fullorder_derivative(s, params, gain, refr);
    let half = real::<T>(0.5);
    let sixth = real::<T>(6.0).recip();
    let mut state = x0;
    let mut times = Vec::with_capacity(n_steps / per_sample + 2);
    let mut states = Vec::with_capacity(n_steps / per_sample + 2);
    times.push(T::zero());
    states.push(state);
    for step in 1..=n_steps {
        let a = state.to_array();
        let k1 = deriv(&state).to_array();
        let mid1 = {
            let mut m = a;
            for i in 0..12 {
                m[i] += half * dt_int * k1[i];
            }
            FullOrderState::from_array(m)
        };
        let k2 = deriv(&mid1).to_array();
        let mid2 = {
            let mut m = a;
            for i in 0..12 {
                m[i] += half * dt_int * k2[i];
            }
            FullOrderState::from_array(m)
        };
        let k3 = deriv(&mid2).to_array();
        let end = {
            let mut m = a;
            for i in 0..12 {
                m[i] += dt_int * k3[i];
            }
            FullOrderState::from_array(m)
        };
        let k4 = deriv(&end).to_array();
        let mut next = a;
        for i in 0..12 {
            next[i] += dt_int * sixth
                * (k1[i] + real::<T>(2.0) * k2[i] + real::<T>(2.0) * k3[i] + k4[i]);
        }
        state = FullOrderState::from_array(next);
        if !state.is_finite() {
            return Err(Error::Diverged {
                time: (dt_int * real::<T>(step as f64)).to_f64().unwrap_or(f64::NAN),
            });
        }
        if step % per_sample == 0 {
            times.push(dt_int * real(step as f64));
            states.push(state);
        }
    }
    Ok(FullOrderTrajectory { times, states })
}

/// Side-by-side step response of the full-order and simplified models.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonReport<T> {
    pub target: Vec2<T>,
    pub ss_full: Vec2<T>,
    pub ss_simplified: Vec2<T>,
    /// ||ss_full - ss_simplified|| / ||ss_simplified||.
    pub ss_rel_diff: T,
    /// Settling times (s): last instant outside the 5%-of-magnitude band
    /// around the final value.
    pub settle_full_s: T,
    pub settle_simplified_s: T,
    pub max_mag_full: T,
    pub max_mag_simplified: T,
    /// Sampled (t, full-order i_g, simplified i) series for plotting.
    #[serde(skip)]
    pub series: Vec<(T, Vec2<T>, Vec2<T>)>,
}

/// Last time the current is outside the band `frac * ||final||` around its
/// final value; 0 if never.
fn settling_time<T: Real>(times: &[T], currents: &[Vec2<T>], frac: T) -> T {
    let last = *currents.last().expect("nonempty");
    let band = frac * last.norm().max(real(1e-9));
    times
        .iter()
        .zip(currents)
        .rev()
        .find(|(_, c)| (**c - last).norm() > band)
        .map(|(t, _)| *t)
        .unwrap_or_else(T::zero)
}

/// Run the power step `(0,0) -> (p_ref, q_ref)` on both models with the same
/// gain and report steady-state and settling discrepancies.
pub fn compare_models<T: Real>(
    params_full: &FullOrderParams<T>,
    params_simplified: &PlantParams<T>,
    gain: &Gain<T>,
    p_ref: T,
    q_ref: T,
    t_end: T,
    dt_int: T,
) -> Result<ComparisonReport<T>> {
    params_full.consistent_with(params_simplified)?;

    // full-order: start at the zero-power equilibrium, step the references
    let (x0, _) = equilibrium_state(params_full, Vec2::zero())?;
    let refr = reference_from_power(p_ref, q_ref, params_full)?;
    let full = integrate_fullorder(
        x0,
        params_full,
        gain,
        &refr,
        t_end,
        dt_int,
        params_simplified.dt,
    )?;
    let full_ig: Vec<Vec2<T>> = full.states.iter().map(|s| s.i_g()).collect();

    // simplified: same step from the origin
    let plant = crate::model::build_plant(params_simplified)?;
    let x_ref = crate::model::power_to_current(p_ref, q_ref, params_simplified);
    let u_ref = crate::model::equilibrium_input(&plant, x_ref);
    let n_samples = full.times.len();
    let opts = crate::model::SimOptions {
        max_steps: n_samples.max(2) - 1,
        stop_tol: real(1e-12), // run the full window; settling measured after
        ..crate::model::SimOptions::default()
    };
    let simp = crate::model::simulate(&plant, gain, Vec2::zero(), x_ref, u_ref, &opts);
    let simp_states: Vec<Vec2<T>> = simp.records.iter().map(|r| r.state).collect();

    let ss_full = *full_ig.last().expect("nonempty trajectory");
    let ss_simplified = *simp_states.last().expect("nonempty trajectory");
    let frac = real::<T>(0.05);
    let simp_times: Vec<T> = simp
        .records
        .iter()
        .map(|r| real::<T>(r.t as f64) * params_simplified.dt)
        .collect();
    let series = full
        .times
        .iter()
        .zip(&full_ig)
        .zip(&simp_states)
        .map(|((t, f), s)| (*t, *f, *s))
        .collect();
    Ok(ComparisonReport {
        target: x_ref,
        ss_full,
        ss_simplified,
        ss_rel_diff: (ss_full - ss_simplified).norm()
            / ss_simplified.norm().max(real(1e-12)),
        settle_full_s: settling_time(&full.times, &full_ig, frac),
        settle_simplified_s: settling_time(&simp_times, &simp_states, frac),
        max_mag_full: full_ig.iter().fold(T::zero(), |m, c| m.max(c.norm())),
        max_mag_simplified: simp_states.iter().fold(T::zero(), |m, c| m.max(c.norm())),
        series,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat2;

    const K_FIT: [[f64; 2]; 2] = [[0.608, 0.027], [0.012, 0.026]];

    fn gain() -> Gain<f64> {
        Gain::from_matrix(Mat2 { m: K_FIT })
    }

    #[test]
    fn equilibrium_has_zero_derivative() {
        let p = FullOrderParams::<f64>::defaults();
        for target in [
            Vec2::new(0.0, 0.0),
            Vec2::new(2.0, 1.0),
            Vec2::new(3.0444875301087464, 3.0444875301087464 * 0.9),
            Vec2::new(-1.5, 2.5),
        ] {
            let (eq, refr) = equilibrium_state(&p, target).unwrap();
            let d = fullorder_derivative(&eq, &p, &gain(), &refr);
            let max = d.to_array().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max < 1e-8, "target {target:?}: max |dx| = {max}");
        }
    }

    #[test]
    fn quiescent_system_is_at_rest() {
        // zero state, zero references, E = 0, V* = 0 -> every derivative zero
        let mut p = FullOrderParams::<f64>::defaults();
        p.e = 1e-300; // validate() wants > 0; physically zero
        let refr = FullOrderRef {
            i_d_ref: 0.0,
            i_q_ref: 0.0,
            v_star: 0.0,
            delta_star: 0.0,
        };
        let d = fullorder_derivative(&FullOrderState::zero(), &p, &gain(), &refr);
        let max = d.to_array().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-290, "max |dx| = {max}");
    }

    #[test]
    fn igq_perturbation_couples_as_written() {
        // raising i_gq lowers dot(i_gq) through the -R_g/L_g term and feeds
        // w_q through the capacitor; check the printed signs
        let p = FullOrderParams::<f64>::defaults();
        let (eq, refr) = equilibrium_state(&p, Vec2::new(1.0, 0.5)).unwrap();
        let mut pert = eq;
        pert.i_gq += 1e-4;
        let d0 = fullorder_derivative(&eq, &p, &gain(), &refr);
        let d1 = fullorder_derivative(&pert, &p, &gain(), &refr);
        let d_igq = (d1.i_gq - d0.i_gq) / 1e-4;
        assert!((d_igq + p.r_g / p.l_g).abs() / (p.r_g / p.l_g) < 0.2, "{d_igq}");
        let d_wq = (d1.w_q - d0.w_q) / 1e-4;
        assert!((d_wq + 1.0 / p.c).abs() / (1.0 / p.c) < 1e-6, "{d_wq}");
    }

    #[test]
    fn equilibrium_is_stationary_under_integration() {
        let p = FullOrderParams::<f64>::defaults();
        let (eq, refr) = equilibrium_state(&p, Vec2::new(2.0, -1.0)).unwrap();
        let traj = integrate_fullorder(eq, &p, &gain(), &refr, 0.1, 1e-5, 1e-4).unwrap();
        let drift = traj
            .states
            .iter()
            .fold(0.0f64, |m, s| m.max(s.max_abs_diff(&eq)));
        assert!(drift < 1e-6, "drift {drift}");
    }

    #[test]
    fn rk4_step_halving_fourth_order() {
        // smooth, non-saturating segment: halving the step should cut the
        // endpoint error ~16x
        let p = FullOrderParams::<f64>::defaults();
        let (x0, _) = equilibrium_state(&p, Vec2::zero()).unwrap();
        let refr = reference_from_power(200.0, -100.0, &p).unwrap();
        let run = |dt: f64| {
            integrate_fullorder(x0, &p, &gain(), &refr, 2e-3, dt, 2e-3)
                .unwrap()
                .states
                .last()
                .copied()
                .unwrap()
        };
        let coarse = run(4e-6);
        let mid = run(2e-6);
        let fine = run(1e-6);
        let finest = run(5e-7);
        let err_mid = mid.max_abs_diff(&finest);
        let err_coarse = coarse.max_abs_diff(&finest);
        assert!(err_coarse / err_mid.max(1e-16) > 8.0, "{err_coarse} / {err_mid}");
        assert!(fine.max_abs_diff(&finest) < 1e-7);
    }

    #[test]
    fn reference_matches_simplified_power_map() {
        let p = FullOrderParams::<f64>::defaults();
        let r = reference_from_power(775.0, -775.0, &p).unwrap();
        let expected = 775.0 / (3.0 / std::f64::consts::SQRT_2 * 120.0);
        assert!((r.i_d_ref - expected).abs() < 1e-12);
        assert!((r.i_q_ref - expected).abs() < 1e-12);
        assert!(r.v_star > 0.0);
        assert_eq!(r.delta_star, 0.0);
        let zero = reference_from_power(0.0, 0.0, &p).unwrap();
        assert_eq!(zero.i_d_ref, 0.0);
        assert_eq!(zero.i_q_ref, 0.0);
        // zero current: V* is the grid voltage over sqrt(2)
        assert!((zero.v_star - 120.0).abs() < 1e-9);
    }

    #[test]
    fn params_kv_overrides_defaults() {
        let p = FullOrderParams::<f64>::from_kv_str("R_g_ohm = 0.4\nk_pv = 0.3\n").unwrap();
        assert_eq!(p.r_g, 0.4);
        assert_eq!(p.k_pv, 0.3);
        assert_eq!(p.l_g, FullOrderParams::<f64>::defaults().l_g);
        assert!(FullOrderParams::<f64>::from_kv_str("C_F = -1\n").is_err());
    }

    #[test]
    fn comparison_zero_step_is_exact() {
        let full = FullOrderParams::<f64>::defaults();
        let simp = PlantParams::table1();
        let report = compare_models(&full, &simp, &gain(), 0.0, 0.0, 5e-3, 1e-5).unwrap();
        assert!(report.ss_full.norm() < 1e-9);
        assert!(report.ss_simplified.norm() < 1e-9);
        assert_eq!(report.settle_full_s, 0.0);
        assert_eq!(report.settle_simplified_s, 0.0);
    }

    #[test]
    fn comparison_rejects_mismatched_passives() {
        let mut full = FullOrderParams::<f64>::defaults();
        full.r_g = 0.5;
        let simp = PlantParams::table1();
        assert!(compare_models(&full, &simp, &gain(), 100.0, 0.0, 1e-3, 1e-5).is_err());
    }

    #[test]
    fn csv_header_contract() {
        let p = FullOrderParams::<f64>::defaults();
        let (x0, refr) = equilibrium_state(&p, Vec2::zero()).unwrap();
        let traj = integrate_fullorder(x0, &p, &gain(), &refr, 1e-4, 1e-5, 1e-5).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,i_gd,i_gq,i_id,i_iq,w_d,w_q,delta_pll,mag_ig\n"));
        assert_eq!(text.lines().count(), traj.states.len() + 1);
    }
}
