//! Stability certificates for static gains on the saturated plant.
//!
//! Feasibility of a gain K means the closed-loop matrix M = A - BK satisfies
//! (A - BK)^T (A - BK) - I < 0 (negative definite), i.e. sigma_max(M) < 1.
//! With the circular Lyapunov function V(z) = z^T z this guarantees global
//! convergence to any interior reference despite the magnitude saturation.

use crate::error::{Error, Result};
use crate::linalg::{Mat2, Vec2};
use crate::model::{LinearPlant, PlantParams, State, Trajectory};
use crate::scalar::{real, Real};
use serde::{Deserialize, Serialize};

/// Strictness slack for "< 1": feasible means lambda_max(M^T M) <= 1 - EPS_CERT.
pub const EPS_CERT: f64 = 1e-9;

/// A static feedback gain with an optional certificate record.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Gain<T> {
    /// Row-major 2x2 feedback matrix, `u = u_ref - K (x - x_ref)`.
    #[serde(rename = "K")]
    pub k: Mat2<T>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub certificate: Option<Certificate<T>>,
}

/// Certificate issued against a specific plant.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Certificate<T> {
    /// Spectral norm of A - BK.
    pub sigma_closed: T,
    /// 1 - sigma_closed.
    pub margin: T,
}

impl<T: Real> Gain<T> {
    pub fn from_matrix(k: Mat2<T>) -> Self {
        Self {
            k,
            certificate: None,
        }
    }

    /// Attach (or refresh) the certificate for this plant. Errors if the gain
    /// is not feasible.
    pub fn certified(mut self, plant: &LinearPlant<T>) -> Result<Self> {
        let report = certify_gain(plant, &self.k);
        if !report.feasible {
            return Err(Error::Domain(format!(
                "gain not certifiable: sigma(A-BK) = {}",
                report.sigma_closed
            )));
        }
        self.certificate = Some(Certificate {
            sigma_closed: report.sigma_closed,
            margin: T::one() - report.sigma_closed,
        });
        Ok(self)
    }

    /// Load a gain from a JSON file with key `K` (2x2 row-major).
    pub fn load(path: &std::path::Path) -> Result<Self>
    where
        T: serde::de::DeserializeOwned,
    {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()>
    where
        T: Serialize,
    {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Outcome of the spectral-norm certificate check.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CertificateReport<T> {
    pub feasible: bool,
    /// sigma_max(A - BK).
    pub sigma_closed: T,
    /// Eigenvalues of (A-BK)^T (A-BK) - I, ascending.
    pub shifted_gram_eigenvalues: (T, T),
}

/// Evaluate the stability certificate: M = A - BK must have all eigenvalues
/// of M^T M strictly below 1 (closed-form 2x2 quadratic).
pub fn certify_gain<T: Real>(plant: &LinearPlant<T>, k: &Mat2<T>) -> CertificateReport<T> {
    let m = plant.a - plant.b * *k;
    let (lo, hi) = m.gram().sym_eigenvalues();
    CertificateReport {
        feasible: hi <= T::one() - real(EPS_CERT),
        sigma_closed: hi.max(T::zero()).sqrt(),
        shifted_gram_eigenvalues: (lo - T::one(), hi - T::one()),
    }
}

/// Robustness report for a resistance increase.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustnessReport<T> {
    /// lambda_min of Ahat^T + K^T Bhat^T + Ahat + Bhat K at the nominal R.
    /// Positive means the dt-free first-order condition holds, which is
    /// preserved (exactly, by matrix arithmetic) under any increase of R.
    pub first_order_margin: T,
    pub first_order_holds: bool,
    /// (R value, feasible, sigma_closed) for each sampled resistance.
    pub samples: Vec<(T, bool, T)>,
    pub all_samples_feasible: bool,
}

/// Continuous-time-style matrices of the resistance-robustness argument:
/// `Ahat = [[R/L, w], [-w, R/L]]`, `Bhat = diag(sqrt2/L, sqrt2 E/L)`, so that
/// A = I - dt*Ahat and B = dt*Bhat.
pub fn hat_matrices<T: Real>(params: &PlantParams<T>) -> (Mat2<T>, Mat2<T>) {
    let sqrt2 = real::<T>(std::f64::consts::SQRT_2);
    (
        Mat2::new(
            params.r / params.l,
            params.omega_nom,
            -params.omega_nom,
            params.r / params.l,
        ),
        Mat2::diag(sqrt2 / params.l, sqrt2 * params.e / params.l),
    )
}

/// Check that a gain certified at the nominal resistance stays certified as
/// the resistance grows: (a) the dt-free first-order condition
/// `Ahat^T + K^T Bhat^T + Ahat + Bhat K > 0`, whose margin only improves with
/// R since raising R adds `2 dR / L * I`; (b) the exact certificate sampled on
/// `[R, R + r_grid_max]`.
pub fn certify_robust<T: Real>(
    params: &PlantParams<T>,
    k: &Mat2<T>,
    r_grid_max: T,
    n_samples: usize,
) -> Result<RobustnessReport<T>> {
    if r_grid_max < T::zero() {
        return Err(Error::Domain(format!(
            "r_grid_max must be >= 0, got {r_grid_max}"
        )));
    }
    if n_samples == 0 {
        return Err(Error::Domain("n_samples must be >= 1".into()));
    }
    let nominal = crate::model::build_plant(params)?;
    if !certify_gain(&nominal, k).feasible {
        return Err(Error::Domain(
            "certify_robust requires a gain certified at the nominal R".into(),
        ));
    }
    let (a_hat, b_hat) = hat_matrices(params);
    let s = a_hat + (b_hat * *k);
    let sym = s + s.transpose();
    let (first_order_margin, _) = sym.sym_eigenvalues();

    let mut samples = Vec::with_capacity(n_samples);
    let mut all_feasible = true;
    for i in 0..n_samples {
        let frac = if n_samples == 1 {
            T::zero()
        } else {
            real::<T>(i as f64) / real::<T>((n_samples - 1) as f64)
        };
        let r = params.r + r_grid_max * frac;
        let mut p = *params;
        p.r = r;
        let plant = crate::model::build_plant(&p)?;
        let report = certify_gain(&plant, k);
        all_feasible &= report.feasible;
        samples.push((r, report.feasible, report.sigma_closed));
    }
    Ok(RobustnessReport {
        first_order_margin,
        first_order_holds: first_order_margin > T::zero(),
        samples,
        all_samples_feasible: all_feasible,
    })
}

/// Result of auditing a trajectory against the Lyapunov-decrease guarantee.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LyapunovAudit<T> {
    pub clean: bool,
    /// First step where the squared error failed to strictly decrease, if any.
    pub first_decrease_violation: Option<usize>,
    /// First saturated step where clipping failed to shrink the distance to
    /// the reference (requires pre-saturation recording), if any.
    pub first_saturation_violation: Option<usize>,
    /// Steps with error above tolerance that were checked.
    pub steps_checked: usize,
    /// Error-magnitude tolerance below which decrease is not required.
    pub tolerance: T,
}

/// Check strict decrease of the squared tracking error at every step where
/// the error exceeds `tolerance`; at saturated steps also check the clipping
/// inequality `||x_t - x_ref|| < ||presat_t - x_ref||` when pre-saturation
/// states were recorded.
pub fn audit_lyapunov<T: Real>(
    trajectory: &Trajectory<T>,
    x_ref: State<T>,
    tolerance: T,
) -> Result<LyapunovAudit<T>> {
    if trajectory.is_empty() {
        return Err(Error::Domain("audit_lyapunov: empty trajectory".into()));
    }
    let tol_sq = tolerance * tolerance;
    let mut first_decrease = None;
    let mut first_saturation = None;
    let mut checked = 0usize;
    for w in trajectory.records.windows(2) {
        let (prev, cur) = (&w[0], &w[1]);
        let v_prev = (prev.state - x_ref).norm_sq();
        let v_cur = (cur.state - x_ref).norm_sq();
        if v_prev > tol_sq {
            checked += 1;
            if v_cur >= v_prev && first_decrease.is_none() {
                first_decrease = Some(cur.t);
            }
        }
        if cur.saturated && v_prev > tol_sq {
            if let Some(presat) = &trajectory.presat {
                if let Some(Some(z)) = presat.get(cur.t) {
                    let d_pre = (*z - x_ref).norm();
                    let d_post = (cur.state - x_ref).norm();
                    if d_post >= d_pre && first_saturation.is_none() {
                        first_saturation = Some(cur.t);
                    }
                }
            }
        }
    }
    Ok(LyapunovAudit {
        clean: first_decrease.is_none() && first_saturation.is_none(),
        first_decrease_violation: first_decrease,
        first_saturation_violation: first_saturation,
        steps_checked: checked,
        tolerance,
    })
}

/// Search the saturation circle for a fixed point of the saturated closed
/// loop other than `x_ref`: a dense angular scan for sign changes of the
/// tangential residual, refined by bisection, keeping only candidates whose
/// update actually clips back onto the circle.
pub fn find_stuck_point<T: Real>(
    plant: &LinearPlant<T>,
    gain: &Gain<T>,
    x_ref: State<T>,
) -> Option<State<T>> {
    let u_ref = crate::model::equilibrium_input(plant, x_ref);
    let two_pi = real::<T>(2.0 * std::f64::consts::PI);
    let n = 3600usize;
    // Tangential component of the closed-loop update on the circle. A stuck
    // point has zero tangential motion and an outward (clipping) update.
    let residual = |theta: T| -> T {
        let x = Vec2::new(theta.cos(), theta.sin()).scale(plant.i_max);
        let u = u_ref - gain.k * (x - x_ref);
        let z = plant.a * x + plant.b * u;
        x.cross(z)
    };
    let is_stuck_at = |theta: T| -> Option<State<T>> {
        let x = Vec2::new(theta.cos(), theta.sin()).scale(plant.i_max);
        let u = u_ref - gain.k * (x - x_ref);
        let (next, clipped) = crate::model::step(plant, x, u);
        let moved = (next - x).norm();
        (clipped && moved < real::<T>(1e-6) * plant.i_max && (x - x_ref).norm() > real(1e-6))
            .then_some(next)
    };
    let step_angle = two_pi / real::<T>(n as f64);
    let mut prev_theta = T::zero();
    let mut prev_res = residual(prev_theta);
    for i in 1..=n {
        let theta = step_angle * real::<T>(i as f64);
        let res = residual(theta);
        if res == T::zero() {
            if let Some(p) = is_stuck_at(theta) {
                return Some(p);
            }
        } else if prev_res * res < T::zero() {
            // bisect the bracket down to 1e-10 rad
            let (mut lo, mut hi, mut flo) = (prev_theta, theta, prev_res);
            while hi - lo > real(1e-10) {
                let mid = (lo + hi) * real::<T>(0.5);
                let fm = residual(mid);
                if flo * fm <= T::zero() {
                    hi = mid;
                } else {
                    lo = mid;
                    flo = fm;
                }
            }
            let root = (lo + hi) * real::<T>(0.5);
            if let Some(p) = is_stuck_at(root) {
                return Some(p);
            }
        }
        prev_theta = theta;
        prev_res = res;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_plant, simulate, PlantParams, SimOptions};

    const K_BASE: [[f64; 2]; 2] = [[1.206, 0.0957], [0.096, 0.0671]];
    const K_FIT: [[f64; 2]; 2] = [[0.608, 0.027], [0.012, 0.026]];

    fn plant() -> LinearPlant<f64> {
        build_plant(&PlantParams::table1()).unwrap()
    }

    fn mat(m: [[f64; 2]; 2]) -> Mat2<f64> {
        Mat2 { m }
    }

    #[test]
    fn certify_known_gains() {
        let p = plant();
        let open = certify_gain(&p, &Mat2::zero());
        assert!(open.feasible);
        assert!((open.sigma_closed - 0.996_292_846_867_894_3).abs() < 1e-12);

        let base = certify_gain(&p, &mat(K_BASE));
        assert!(!base.feasible);
        assert!((base.sigma_closed - 1.005_012_279_683_495_5).abs() < 1e-10);
        assert!(base.shifted_gram_eigenvalues.1 > 0.0);

        let fit = certify_gain(&p, &mat(K_FIT));
        assert!(fit.feasible);
        assert!((fit.sigma_closed - 0.994_631_491_327_040_1).abs() < 1e-10);
        assert!(fit.shifted_gram_eigenvalues.1 < 0.0);
        assert!(fit.shifted_gram_eigenvalues.0 <= fit.shifted_gram_eigenvalues.1);
    }

    #[test]
    fn certificate_ignores_saturation_radius() {
        let mut p = plant();
        let before = certify_gain(&p, &mat(K_FIT));
        p.i_max = 123.0;
        let after = certify_gain(&p, &mat(K_FIT));
        assert_eq!(before.feasible, after.feasible);
        assert_eq!(before.sigma_closed, after.sigma_closed);
    }

    #[test]
    fn eigen_and_svd_routes_agree() {
        let p = plant();
        for k in [Mat2::zero(), mat(K_BASE), mat(K_FIT), mat([[0.3, -0.8], [1.1, 0.05]])] {
            let m = p.a - p.b * k;
            let via_eigen = certify_gain(&p, &k).sigma_closed;
            let via_svd = m.svd().s[0].max(m.svd().s[1].abs());
            assert!((via_eigen - via_svd).abs() < 1e-10);
        }
    }

    #[test]
    fn robustness_first_order_monotone() {
        let params = PlantParams::<f64>::table1();
        let report = certify_robust(&params, &mat(K_FIT), 3.7, 50).unwrap();
        assert!(report.first_order_holds);
        assert!(report.all_samples_feasible);
        // exact monotone increment: raising R by dR adds 2 dR / L to both
        // eigenvalues of the symmetric part
        let mut p2 = params;
        p2.r += 1.0;
        let (a1, b1) = hat_matrices(&params);
        let (a2, _) = hat_matrices(&p2);
        let s1 = a1 + b1 * mat(K_FIT);
        let s2 = a2 + b1 * mat(K_FIT);
        let sym1 = s1 + s1.transpose();
        let sym2 = s2 + s2.transpose();
        let diff = sym2 - sym1;
        let expected = 2.0 / params.l;
        assert!((diff.m[0][0] - expected).abs() < 1e-9 * expected);
        assert!((diff.m[1][1] - expected).abs() < 1e-9 * expected);
        assert!(diff.m[0][1].abs() < 1e-12 && diff.m[1][0].abs() < 1e-12);
    }

    #[test]
    fn robustness_open_loop_improves_with_r() {
        let params = PlantParams::<f64>::table1();
        let report = certify_robust(&params, &Mat2::zero(), 10.0, 20).unwrap();
        assert!(report.all_samples_feasible);
        for w in report.samples.windows(2) {
            assert!(w[1].2 <= w[0].2 + 1e-14, "sigma should not grow with R");
        }
    }

    #[test]
    fn robustness_requires_certified_nominal() {
        let params = PlantParams::<f64>::table1();
        assert!(certify_robust(&params, &mat(K_BASE), 1.0, 5).is_err());
    }

    #[test]
    fn audit_certified_gain_clean() {
        let p = plant();
        let gain = Gain::from_matrix(mat(K_FIT)).certified(&p).unwrap();
        let opts = SimOptions {
            record_presat: true,
            ..SimOptions::default()
        };
        let x_ref = Vec2::new(2.0, -1.0);
        let u_ref = crate::model::equilibrium_input(&p, x_ref);
        let traj = simulate(&p, &gain, Vec2::new(-3.0, 2.5), x_ref, u_ref, &opts);
        assert!(traj.converged);
        let audit = audit_lyapunov(&traj, x_ref, 1e-4).unwrap();
        assert!(audit.clean, "{audit:?}");
        assert!(audit.steps_checked > 0);
    }

    #[test]
    fn audit_flags_stuck_baseline() {
        let p = plant();
        let gain = Gain::from_matrix(mat(K_BASE));
        let x_ref = Vec2::new(2.946_513_957_204_343_7, 2.946_513_957_204_343_7);
        let u_ref = crate::model::equilibrium_input(&p, x_ref);
        let opts = SimOptions {
            record_presat: true,
            ..SimOptions::default()
        };
        let traj = simulate(&p, &gain, Vec2::zero(), x_ref, u_ref, &opts);
        let audit = audit_lyapunov(&traj, x_ref, 1e-4).unwrap();
        assert!(!audit.clean, "baseline should violate strict decrease");
    }

    #[test]
    fn audit_constant_at_reference_clean() {
        let p = plant();
        let x_ref = Vec2::new(1.0, 1.0);
        let u_ref = crate::model::equilibrium_input(&p, x_ref);
        let gain = Gain::from_matrix(Mat2::zero());
        let traj = simulate(&p, &gain, x_ref, x_ref, u_ref, &SimOptions::default());
        let audit = audit_lyapunov(&traj, x_ref, 1e-4).unwrap();
        assert!(audit.clean);
        assert_eq!(audit.steps_checked, 0);
    }

    #[test]
    fn stuck_point_matches_simulation_stall() {
        let p = plant();
        let gain = Gain::from_matrix(mat(K_BASE));
        let x_ref = Vec2::new(2.946_513_957_204_343_7, 2.946_513_957_204_343_7);
        let stuck = find_stuck_point(&p, &gain, x_ref).expect("baseline gain has a stuck point");
        assert!((stuck.norm() - p.i_max).abs() < 1e-6);
        // simulate must stall at the same point
        let u_ref = crate::model::equilibrium_input(&p, x_ref);
        let traj = simulate(&p, &gain, Vec2::zero(), x_ref, u_ref, &SimOptions::default());
        let last = traj.last_state();
        // the stop rule halts a touch short of the exact fixed point
        assert!((last - stuck).norm() < 5e-3, "stall {last:?} vs fixed point {stuck:?}");
        assert!((last - x_ref).norm() > 1.0, "genuinely far from the reference");
    }

    #[test]
    fn no_stuck_point_for_certified_gain() {
        let p = plant();
        let gain = Gain::from_matrix(mat(K_FIT));
        assert!(find_stuck_point(&p, &gain, Vec2::new(2.0, 1.0)).is_none());
        let zero = Gain::from_matrix(Mat2::zero());
        assert!(find_stuck_point(&p, &zero, Vec2::zero()).is_none());
    }

    #[test]
    fn gain_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gain.json");
        let p = plant();
        let gain = Gain::from_matrix(mat(K_FIT)).certified(&p).unwrap();
        gain.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"K\""));
        let loaded = Gain::<f64>::load(&path).unwrap();
        assert_eq!(loaded.k, gain.k);
        let cert = loaded.certificate.unwrap();
        assert!((cert.sigma_closed - certify_gain(&p, &loaded.k).sigma_closed).abs() < 1e-10);
        // bare files without a certificate load too
        let bare = dir.path().join("bare.json");
        std::fs::write(&bare, "{\"K\": [[0.5, 0.0], [0.0, 0.5]]}").unwrap();
        let loaded = Gain::<f64>::load(&bare).unwrap();
        assert!(loaded.certificate.is_none());
        assert_eq!(loaded.k, Mat2::diag(0.5, 0.5));
    }
}
