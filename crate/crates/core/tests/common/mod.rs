//! Independent oracles for the acceptance suite. Everything here is written
//! against the math directly — not by calling back into the solver paths
//! under test — so agreement is meaningful.

#![allow(dead_code)]

use satinv::certify::Gain;
use satinv::linalg::{Mat2, Vec2};
use satinv::model::LinearPlant;
use satinv::mpc::OcpSpec;
use satinv::synthesis::Dataset;
use rand::Rng;

/// Largest singular value of a 2x2 matrix by the rotation-decomposition
/// identity: sigma_max = (hypot(a-d, b+c) + hypot(a+d, b-c)) / 2. This is a
/// different computation path from the library's Gram-eigenvalue route.
pub fn sigma_max_oracle(m: &Mat2<f64>) -> f64 {
    let [[a, b], [c, d]] = m.m;
    let s1 = (a - d).hypot(b + c);
    let s2 = (a + d).hypot(b - c);
    0.5 * (s1 + s2)
}

/// Exact finite-horizon LQ solution by dynamic programming, valid only while
/// the trajectory stays strictly inside the saturation disk. Cost convention
/// matches the OCP: state cost on x_1..x_T, input cost on u_0..u_{T-1},
/// zero terminal weight beyond Q.
pub fn dp_solve(spec: &OcpSpec<f64>) -> (Vec<Vec2<f64>>, Vec<Vec2<f64>>, f64) {
    let (a, b) = (spec.plant.a, spec.plant.b);
    let (q, r) = (spec.weights.q, spec.weights.r_cost);
    let tn = spec.horizon;
    let mut gains = vec![Mat2::zero(); tn];
    let mut p = Mat2::zero();
    for t in (0..tn).rev() {
        let w = q + p;
        let btw = b.transpose() * w;
        let k = (r + btw * b).inverse().expect("R + B'WB invertible") * (btw * a);
        gains[t] = k;
        p = a.transpose() * w * a - a.transpose() * (btw.transpose() * k);
    }
    let mut inputs = Vec::with_capacity(tn);
    let mut states = Vec::with_capacity(tn + 1);
    states.push(spec.x_init);
    let mut e = spec.x_init - spec.x_ref;
    let mut cost = 0.0;
    for k in gains {
        let u = -(k * e);
        e = a * e + b * u;
        cost += e.dot(q * e) + u.dot(r * u);
        inputs.push(u);
        states.push(e + spec.x_ref);
    }
    (inputs, states, cost)
}

/// Plain least-squares objective of a candidate gain on a dataset:
/// sum ||K dx + u||^2 (the fit models u ~ -K dx).
pub fn ls_objective(k: &Mat2<f64>, dataset: &Dataset<f64>) -> f64 {
    dataset
        .samples
        .iter()
        .map(|s| {
            let r = *k * s.delta_x + s.u;
            r.dot(r)
        })
        .sum()
}

/// Brute-force fit oracle: zooming grid search over the four gain entries,
/// rejecting candidates with sigma(A - BK) > 1 - margin. The problem is
/// convex (quadratic objective, norm-ball constraint affine in K), so the
/// zoom converges to the global optimum.
pub fn grid_search_fit(
    plant: &LinearPlant<f64>,
    dataset: &Dataset<f64>,
    margin: f64,
) -> (Mat2<f64>, f64) {
    let radius = 1.0 - margin;
    let feasible = |k: &Mat2<f64>| sigma_max_oracle(&(plant.a - plant.b * *k)) <= radius;
    // seed strictly inside the constraint: K with A - BK = c A, c < radius / sigma(A)
    let sigma_a = sigma_max_oracle(&plant.a);
    let mut center = if sigma_a <= 0.99 * radius {
        Mat2::zero()
    } else {
        let c = 0.99 * radius / sigma_a;
        plant.b.inverse().expect("B invertible") * plant.a.scale(1.0 - c)
    };
    assert!(feasible(&center), "oracle seed must be feasible");
    let mut best = ls_objective(&center, dataset);
    let mut half = 4.0;
    let steps = 7i32;
    for _ in 0..90 {
        let mut local_best = best;
        let mut local_center = center;
        // 7^4 grid over the box center +- half
        for i0 in -steps / 2..=steps / 2 {
            for i1 in -steps / 2..=steps / 2 {
                for i2 in -steps / 2..=steps / 2 {
                    for i3 in -steps / 2..=steps / 2 {
                        let d = half / (steps / 2) as f64;
                        let k = Mat2::new(
                            center.m[0][0] + i0 as f64 * d,
                            center.m[0][1] + i1 as f64 * d,
                            center.m[1][0] + i2 as f64 * d,
                            center.m[1][1] + i3 as f64 * d,
                        );
                        if !feasible(&k) {
                            continue;
                        }
                        let f = ls_objective(&k, dataset);
                        if f < local_best {
                            local_best = f;
                            local_center = k;
                        }
                    }
                }
            }
        }
        center = local_center;
        best = local_best;
        half *= 0.62;
    }
    (center, best)
}

/// A gain certified by construction: K = B^-1 (A - M) with M built from two
/// random rotations and singular values <= sigma_max, so
/// sigma(A - BK) = sigma(M) <= sigma_max exactly.
pub fn random_certified_gain<R: Rng>(
    plant: &LinearPlant<f64>,
    rng: &mut R,
    sigma_max: f64,
) -> Gain<f64> {
    let u = Mat2::rotation(rng.gen_range(0.0..std::f64::consts::TAU));
    let v = Mat2::rotation(rng.gen_range(0.0..std::f64::consts::TAU));
    let s1 = rng.gen_range(0.0..sigma_max);
    let s2 = rng.gen_range(0.0..s1.max(1e-12));
    let m = u * Mat2::diag(s1, s2) * v.transpose();
    let b_inv = plant.b.inverse().expect("B invertible");
    Gain::from_matrix(b_inv * (plant.a - m))
}
