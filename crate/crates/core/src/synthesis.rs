//! Gain synthesis: LQR baseline via discrete Riccati iteration, and fitting a
//! certified static gain to trajectory data by spectral-norm-constrained
//! least squares.
//!
//! The fit solves `min_K sum_i ||-K dx_i - u_i||^2  s.t. sigma(A - BK) <= 1 - margin`
//! with the change of variables M = A - BK (so K = B^-1 (A - M)): the
//! objective becomes a smooth quadratic in M and the constraint a spectral
//! ball, handled by projected gradient descent with a closed-form projection.

use crate::certify::Gain;
use crate::error::{Error, Result};
use crate::linalg::{posdef4, Mat2, Vec2};
use crate::model::{parse_kv, parse_scalar, Input, LinearPlant, State};
use crate::scalar::{real, Real};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Quadratic stage-cost weights.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LqrWeights<T> {
    pub q: Mat2<T>,
    pub r_cost: Mat2<T>,
}

impl<T: Real> LqrWeights<T> {
    pub fn new(q: Mat2<T>, r_cost: Mat2<T>) -> Result<Self> {
        let w = Self { q, r_cost };
        w.validate()?;
        Ok(w)
    }

    /// The experiment weights: Q = diag(1, 0.1), R_cost = 5 B.
    pub fn experiment_defaults(plant: &LinearPlant<T>) -> Self {
        Self {
            q: Mat2::diag(T::one(), real(0.1)),
            r_cost: plant.b.scale(real(5.0)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let tol = real::<T>(1e-12);
        let sym = |m: Mat2<T>| (m.m[0][1] - m.m[1][0]).abs() <= tol * (T::one() + m.max_abs());
        if !sym(self.q) {
            return Err(Error::InvalidParameter {
                field: "Q",
                reason: "must be symmetric".into(),
            });
        }
        if !sym(self.r_cost) {
            return Err(Error::InvalidParameter {
                field: "R_cost",
                reason: "must be symmetric".into(),
            });
        }
        let (qmin, _) = self.q.sym_eigenvalues();
        if qmin < -tol {
            return Err(Error::InvalidParameter {
                field: "Q",
                reason: format!("must be PSD, min eigenvalue {qmin}"),
            });
        }
        let (rmin, _) = self.r_cost.sym_eigenvalues();
        if rmin <= T::zero() {
            return Err(Error::InvalidParameter {
                field: "R_cost",
                reason: format!("must be PD, min eigenvalue {rmin}"),
            });
        }
        Ok(())
    }

    /// Parse from `key=value` text. `Q` takes 4 row-major floats; `R_cost`
    /// takes 4 floats or the literal `5B` (five times the plant's B).
    pub fn from_kv_str(text: &str, plant: &LinearPlant<T>) -> Result<Self> {
        let map = parse_kv(text)?;
        let parse_mat = |key: &str| -> Result<Option<Mat2<T>>> {
            let Some(v) = map.get(key) else { return Ok(None) };
            let vals: Vec<T> = v
                .split_whitespace()
                .map(|s| {
                    parse_scalar(s)
                        .ok_or_else(|| Error::Config(format!("bad number in `{key}`: {s}")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != 4 {
                return Err(Error::Config(format!("`{key}` needs 4 floats, got {}", vals.len())));
            }
            Ok(Some(Mat2::new(vals[0], vals[1], vals[2], vals[3])))
        };
        let q = parse_mat("Q")?
            .ok_or_else(|| Error::Config("missing key `Q`".into()))?;
        let r_cost = match map.get("R_cost").map(|s| s.trim()) {
            Some("5B") => plant.b.scale(real(5.0)),
            Some(_) => parse_mat("R_cost")?.unwrap(),
            None => return Err(Error::Config("missing key `R_cost`".into())),
        };
        Self::new(q, r_cost)
    }

    pub fn load(path: &std::path::Path, plant: &LinearPlant<T>) -> Result<Self> {
        Self::from_kv_str(&std::fs::read_to_string(path)?, plant)
    }
}

/// One regression sample: state deviation and the input deviation applied.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Sample<T> {
    pub traj_id: usize,
    pub t: usize,
    pub delta_x: State<T>,
    pub u: Input<T>,
}

/// Collection of (delta_x, u) pairs with provenance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset<T> {
    pub samples: Vec<Sample<T>>,
}

impl<T> Default for Dataset<T> {
    fn default() -> Self {
        Self { samples: Vec::new() }
    }
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, traj_id: usize, t: usize, delta_x: State<T>, u: Input<T>) {
        self.samples.push(Sample { traj_id, t, delta_x, u });
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Domain("dataset is empty".into()));
        }
        for s in &self.samples {
            if !(s.delta_x.is_finite() && s.u.is_finite()) {
                return Err(Error::Domain(format!(
                    "non-finite sample at traj {} t {}",
                    s.traj_id, s.t
                )));
            }
        }
        Ok(())
    }

    /// CSV with header `traj_id,t,dx_d,dx_q,u_v,u_delta`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "traj_id,t,dx_d,dx_q,u_v,u_delta")?;
        for s in &self.samples {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                s.traj_id, s.t, s.delta_x.x, s.delta_x.y, s.u.x, s.u.y
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("").trim();
        if header != "traj_id,t,dx_d,dx_q,u_v,u_delta" {
            return Err(Error::Config(format!("unexpected dataset header `{header}`")));
        }
        let mut samples = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(Error::Config(format!("dataset line {}: need 6 columns", lineno + 2)));
            }
            let num = |i: usize| -> Result<T> {
                parse_scalar(cols[i]).ok_or_else(|| {
                    Error::Config(format!("dataset line {}: bad number `{}`", lineno + 2, cols[i]))
                })
            };
            samples.push(Sample {
                traj_id: cols[0]
                    .parse()
                    .map_err(|_| Error::Config(format!("dataset line {}: bad traj_id", lineno + 2)))?,
                t: cols[1]
                    .parse()
                    .map_err(|_| Error::Config(format!("dataset line {}: bad t", lineno + 2)))?,
                delta_x: Vec2::new(num(2)?, num(3)?),
                u: Vec2::new(num(4)?, num(5)?),
            });
        }
        Ok(Self { samples })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }
}

/// Discrete-time LQR gain by Riccati iteration from P = Q:
/// `P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA`, `K = (R + B'PB)^-1 B'PA`.
pub fn lqr_gain<T: Real>(plant: &LinearPlant<T>, weights: &LqrWeights<T>) -> Result<Gain<T>> {
    weights.validate()?;
    let (a, b) = (plant.a, plant.b);
    let riccati_step = |p: Mat2<T>| -> Result<(Mat2<T>, Mat2<T>)> {
        let btp = b.transpose() * p;
        let s = weights.r_cost + btp * b;
        let s_inv = s
            .inverse()
            .ok_or_else(|| Error::Solver("R + B'PB singular".into()))?;
        let k = s_inv * (btp * a);
        let next = weights.q + a.transpose() * p * a - (a.transpose() * (btp.transpose() * k));
        Ok((next, k))
    };
    let mut p = weights.q;
    for _ in 0..1_000_000 {
        let (next, _) = riccati_step(p)?;
        let change = (next - p).frobenius_norm();
        let scale = T::one() + p.frobenius_norm();
        p = next;
        if change < real::<T>(1e-12) * scale {
            let (_, k) = riccati_step(p)?;
            let mut gain = Gain::from_matrix(k);
            // attach a certificate only when feasible; the LQR recipe does not
            // guarantee sigma(A - BK) < 1 for arbitrary weights
            if let Ok(certified) = gain.certified(plant) {
                gain = certified;
            }
            return Ok(gain);
        }
    }
    Err(Error::Solver("Riccati iteration did not converge in 1e6 steps".into()))
}

/// Convergence parameters of the projected-gradient fit.
const FIT_REL_TOL: f64 = 1e-12;
const FIT_CHECK_WINDOW: usize = 100;
const FIT_MAX_ITERS: usize = 2_000_000;

/// Sufficient statistics of the fitting objective in the M-variable:
/// with c_i = -B^-1 A dx_i - u_i and W = B^-T B^-1,
/// f(M) = tr(W M G M^T) + 2 tr((B^-T C)^T M) + sum ||c_i||^2,
/// grad f(M) = 2 W M G + 2 B^-T C, where G = sum dx dx', C = sum c dx'.
struct FitStats<T> {
    g: Mat2<T>,
    w: Mat2<T>,
    btc: Mat2<T>,
    const_term: T,
}

impl<T: Real> FitStats<T> {
    fn build(plant: &LinearPlant<T>, dataset: &Dataset<T>) -> Result<Self> {
        let b_inv = plant
            .b
            .inverse()
            .ok_or_else(|| Error::Domain("B not invertible".into()))?;
        let mut g = Mat2::zero();
        let mut c_mat = Mat2::zero();
        let mut const_term = T::zero();
        for s in &dataset.samples {
            let c = -(b_inv * (plant.a * s.delta_x)) - s.u;
            g = g + s.delta_x.outer(s.delta_x);
            c_mat = c_mat + c.outer(s.delta_x);
            const_term += c.norm_sq();
        }
        Ok(Self {
            g,
            w: b_inv.transpose() * b_inv,
            btc: b_inv.transpose() * c_mat,
            const_term,
        })
    }

    fn objective(&self, m: Mat2<T>) -> T {
        let quad = (self.w * m * self.g * m.transpose()).trace();
        let lin = (self.btc.transpose() * m).trace();
        quad + lin + lin + self.const_term
    }

    fn gradient(&self, m: Mat2<T>) -> Mat2<T> {
        (self.w * m * self.g + self.btc).scale(real(2.0))
    }
}

/// Fit a certified gain to a dataset of (delta_x, u) pairs (least squares on
/// `u ~ -K delta_x`, spectral constraint `sigma(A - BK) <= 1 - margin`).
pub fn fit_gain<T: Real>(
    plant: &LinearPlant<T>,
    dataset: &Dataset<T>,
    margin: T,
) -> Result<Gain<T>> {
    dataset.validate()?;
    if !(margin > T::zero() && margin < T::one()) {
        return Err(Error::Domain(format!("margin must be in (0, 1), got {margin}")));
    }
    let radius = T::one() - margin;
    let stats = FitStats::build(plant, dataset)?;
    let (_, g_max) = stats.g.sym_eigenvalues();
    if g_max <= T::zero() {
        // all delta_x are zero: objective is constant in K; return K = 0
        return Gain::from_matrix(Mat2::zero()).certified(plant);
    }
    let (_, w_max) = stats.w.sym_eigenvalues();
    // gradient Lipschitz constant 2 * lmax(W) * lmax(G) -> guaranteed descent
    let step = (real::<T>(2.0) * g_max * w_max).recip();

    // start from the unconstrained minimizer when G is invertible
    // (W M G = -B^-T C  =>  M = -B C G^-1), else from M = A (K = 0)
    let m0 = match stats.g.inverse() {
        Some(g_inv) if stats.g.det() > real::<T>(1e-14) * g_max * g_max => {
            let c_mat = plant.b.transpose() * stats.btc; // recover C = B^T (B^-T C)
            -(plant.b * c_mat * g_inv)
        }
        _ => plant.a,
    };
    let mut m = m0.clip_spectral_norm(radius);
    let mut obj = stats.objective(m);
    let mut obj_at_check = obj;
    let mut iters = 0usize;
    loop {
        for _ in 0..FIT_CHECK_WINDOW {
            let next = (m - stats.gradient(m).scale(step)).clip_spectral_norm(radius);
            let next_obj = stats.objective(next);
            m = next;
            obj = next_obj;
            iters += 1;
        }
        let scale = obj_at_check.abs().max(real(1e-30));
        if (obj_at_check - obj) < real::<T>(FIT_REL_TOL) * scale {
            break;
        }
        obj_at_check = obj;
        if iters >= FIT_MAX_ITERS {
            return Err(Error::Solver(format!(
                "fit did not converge after {iters} iterations (objective {obj}, last window decrease {})",
                obj_at_check - obj
            )));
        }
    }
    let b_inv = plant.b.inverse().expect("checked above");
    let k = b_inv * (plant.a - m);
    Gain::from_matrix(k).certified(plant)
}

/// Feasibility via the equivalent 4x4 linear matrix inequality
/// `[I, M^T; M, I] > 0` with M = A - BK, checked by Cholesky.
pub fn schur_equivalence_check<T: Real>(plant: &LinearPlant<T>, k: &Mat2<T>) -> bool {
    let m = plant.a - plant.b * *k;
    let block = [
        [T::one(), T::zero(), m.m[0][0], m.m[1][0]],
        [T::zero(), T::one(), m.m[0][1], m.m[1][1]],
        [m.m[0][0], m.m[0][1], T::one(), T::zero()],
        [m.m[1][0], m.m[1][1], T::zero(), T::one()],
    ];
    let pd = posdef4(&block);
    // away from the sigma = 1 boundary the two routes must agree
    debug_assert!(
        (m.spectral_norm() - T::one()).abs() < real(1e-9)
            || pd == (m.spectral_norm() < T::one()),
        "Schur route disagrees with the spectral-norm route"
    );
    pd
}
