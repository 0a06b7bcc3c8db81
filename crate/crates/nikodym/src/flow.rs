//! Hamiltonian geodesic flow on the cotangent bundle.
//!
//! The flow of `H(x, p) = 1/2 g^{ij}(x) p_i p_j` is integrated with
//! fixed-step classical RK4. Energy is monitored along the way; drift beyond
//! a hard tolerance aborts the shoot. Integration stops at the last in-chart
//! sample when the trajectory reaches the chart boundary.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::metric::CometricModel;

/// Hard cap on relative energy drift before the shoot is declared unstable.
pub const ENERGY_TOLERANCE: f64 = 1e-6;

/// Point on the cotangent bundle.
#[derive(Clone, Debug)]
pub struct CotangentState {
    pub x: DVector<f64>,
    pub p: DVector<f64>,
}

impl CotangentState {
    pub fn new(x: DVector<f64>, p: DVector<f64>) -> Result<Self> {
        if x.len() != p.len() || x.iter().chain(p.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "cotangent state".into() });
        }
        Ok(Self { x, p })
    }

    /// Construct and assert the unit-energy normalization `2H = 1` to 1e-12.
    pub fn unit_energy(model: &CometricModel, x: DVector<f64>, p: DVector<f64>) -> Result<Self> {
        let state = Self::new(x, p)?;
        let h = hamiltonian(model, &state)?;
        if (2.0 * h - 1.0).abs() > 1e-12 {
            return Err(Error::Usage(format!(
                "state is not unit-energy: 2H = {}",
                2.0 * h
            )));
        }
        Ok(state)
    }

    /// Rescale a direction covector so that `2H(x, p) = 1`.
    pub fn normalized_direction(
        model: &CometricModel,
        x: &DVector<f64>,
        dir: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let n = model.dim();
        let mut g = DMatrix::zeros(n, n);
        model.eval_into(x.as_slice(), &mut g);
        let q = (dir.transpose() * &g * dir)[(0, 0)];
        if !(q.is_finite() && q > 0.0) {
            return Err(Error::NonFinite { context: "direction normalization".into() });
        }
        Ok(dir / q.sqrt())
    }
}

/// One sample of a geodesic trajectory.
#[derive(Clone, Debug)]
pub struct TrajectorySample {
    pub s: f64,
    pub x: DVector<f64>,
    pub p: DVector<f64>,
    pub energy: f64,
}

/// Sampled geodesic from a single shoot.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub samples: Vec<TrajectorySample>,
    pub step: f64,
    pub model_fingerprint: u64,
    pub max_drift: f64,
    /// True when integration stopped at the chart boundary rather than at the
    /// requested parameter.
    pub hit_boundary: bool,
}

impl Trajectory {
    pub fn terminal(&self) -> &TrajectorySample {
        self.samples.last().expect("trajectory has at least the initial sample")
    }

    pub fn s_end(&self) -> f64 {
        self.terminal().s
    }
}

/// `H = 1/2 g^{ij} p_i p_j`.
pub fn hamiltonian(model: &CometricModel, state: &CotangentState) -> Result<f64> {
    model.check_chart(state.x.as_slice())?;
    Ok(hamiltonian_unchecked(model, state.x.as_slice(), state.p.as_slice()))
}

fn hamiltonian_unchecked(model: &CometricModel, x: &[f64], p: &[f64]) -> f64 {
    let n = model.dim();
    let mut g = DMatrix::zeros(n, n);
    model.eval_into(x, &mut g);
    let mut h = 0.0;
    for i in 0..n {
        for j in 0..n {
            h += g[(i, j)] * p[i] * p[j];
        }
    }
    0.5 * h
}

/// Right-hand side of the Hamiltonian system:
/// `dx/ds = g^{ij} p_j`, `dp_k/ds = -1/2 (d g^{ij}/d x_k) p_i p_j`.
pub fn hamiltonian_vector_field(
    model: &CometricModel,
    state: &CotangentState,
) -> Result<(DVector<f64>, DVector<f64>)> {
    model.check_chart(state.x.as_slice())?;
    let n = model.dim();
    let mut ws = FlowWorkspace::new(n);
    let mut z = vec![0.0; 2 * n];
    z[..n].copy_from_slice(state.x.as_slice());
    z[n..].copy_from_slice(state.p.as_slice());
    let mut out = vec![0.0; 2 * n];
    eval_field(model, &z, &mut out, &mut ws);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "hamiltonian vector field".into() });
    }
    Ok((
        DVector::from_row_slice(&out[..n]),
        DVector::from_row_slice(&out[n..]),
    ))
}

/// Scratch buffers reused across integrator stages.
pub(crate) struct FlowWorkspace {
    pub g: DMatrix<f64>,
    pub dg: Vec<DMatrix<f64>>,
    k: [Vec<f64>; 4],
    ztmp: Vec<f64>,
}

impl FlowWorkspace {
    pub fn new(n: usize) -> Self {
        Self {
            g: DMatrix::zeros(n, n),
            dg: vec![DMatrix::zeros(n, n); n],
            k: std::array::from_fn(|_| vec![0.0; 2 * n]),
            ztmp: vec![0.0; 2 * n],
        }
    }
}

/// Packed field evaluation on `z = [x; p]`. Stage points may poke slightly
/// outside the chart mid-step; the formulas extend smoothly, so no chart
/// check happens here.
pub(crate) fn eval_field(
    model: &CometricModel,
    z: &[f64],
    out: &mut [f64],
    ws: &mut FlowWorkspace,
) {
    let n = z.len() / 2;
    let (x, p) = z.split_at(n);
    model.eval_with_partials_into(x, &mut ws.g, &mut ws.dg);
    for i in 0..n {
        let mut v = 0.0;
        for j in 0..n {
            v += ws.g[(i, j)] * p[j];
        }
        out[i] = v;
    }
    for k in 0..n {
        let dgk = &ws.dg[k];
        let mut v = 0.0;
        for i in 0..n {
            for j in 0..n {
                v += dgk[(i, j)] * p[i] * p[j];
            }
        }
        out[n + k] = -0.5 * v;
    }
}

/// One classical RK4 step of size `h` on the packed state, in place.
pub(crate) fn rk4_step(
    model: &CometricModel,
    z: &mut [f64],
    h: f64,
    ws: &mut FlowWorkspace,
) {
    let len = z.len();
    let mut ztmp = std::mem::take(&mut ws.ztmp);
    let mut k = std::mem::replace(&mut ws.k, std::array::from_fn(|_| Vec::new()));

    eval_field(model, z, &mut k[0], ws);
    for i in 0..len {
        ztmp[i] = z[i] + 0.5 * h * k[0][i];
    }
    eval_field(model, &ztmp, &mut k[1], ws);
    for i in 0..len {
        ztmp[i] = z[i] + 0.5 * h * k[1][i];
    }
    eval_field(model, &ztmp, &mut k[2], ws);
    for i in 0..len {
        ztmp[i] = z[i] + h * k[2][i];
    }
    eval_field(model, &ztmp, &mut k[3], ws);
    for i in 0..len {
        z[i] += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
    }

    ws.ztmp = ztmp;
    ws.k = k;
}

/// Integrate the geodesic from `(x0, p0)` up to parameter `s_max` with
/// fixed-step RK4, sampling at every step (plus one final partial step when
/// `s_max` is not a step multiple). Stops at the last in-chart sample when
/// the boundary is reached.
pub fn geodesic_shoot(
    model: &CometricModel,
    x0: &DVector<f64>,
    p0: &DVector<f64>,
    s_max: f64,
    step: f64,
) -> Result<Trajectory> {
    geodesic_shoot_with_tol(model, x0, p0, s_max, step, ENERGY_TOLERANCE)
}

pub fn geodesic_shoot_with_tol(
    model: &CometricModel,
    x0: &DVector<f64>,
    p0: &DVector<f64>,
    s_max: f64,
    step: f64,
    energy_tol: f64,
) -> Result<Trajectory> {
    model.check_chart(x0.as_slice())?;
    if !(step > 0.0 && step.is_finite() && s_max > 0.0 && s_max.is_finite()) {
        return Err(Error::Usage(format!(
            "invalid shoot parameters: s_max = {s_max}, step = {step}"
        )));
    }
    let n = model.dim();
    let mut ws = FlowWorkspace::new(n);
    let mut z = vec![0.0; 2 * n];
    z[..n].copy_from_slice(x0.as_slice());
    z[n..].copy_from_slice(p0.as_slice());

    let h0 = hamiltonian_unchecked(model, &z[..n], &z[n..]);
    if !h0.is_finite() {
        return Err(Error::NonFinite { context: "initial energy".into() });
    }
    let energy_scale = h0.abs().max(1.0);

    let mut samples = vec![TrajectorySample {
        s: 0.0,
        x: x0.clone(),
        p: p0.clone(),
        energy: h0,
    }];
    let mut max_drift = 0.0f64;
    let mut hit_boundary = false;

    let mut s = 0.0;
    loop {
        let remaining = s_max - s;
        if remaining <= 1e-12 {
            break;
        }
        let h = remaining.min(step);
        let mut znext = z.clone();
        rk4_step(model, &mut znext, h, &mut ws);
        if !model.in_chart(&znext[..n]) {
            hit_boundary = true;
            break;
        }
        z = znext;
        s += h;
        let energy = hamiltonian_unchecked(model, &z[..n], &z[n..]);
        if !energy.is_finite() {
            return Err(Error::NonFinite { context: "energy along trajectory".into() });
        }
        let drift = (energy - h0).abs() / energy_scale;
        max_drift = max_drift.max(drift);
        if drift > energy_tol {
            return Err(Error::EnergyDrift { drift, tolerance: energy_tol });
        }
        samples.push(TrajectorySample {
            s,
            x: DVector::from_row_slice(&z[..n]),
            p: DVector::from_row_slice(&z[n..]),
            energy,
        });
    }

    if samples.len() == 1 && hit_boundary {
        return Err(Error::EmptyTrajectory);
    }
    Ok(Trajectory {
        samples,
        step,
        model_fingerprint: model.fingerprint(),
        max_drift,
        hit_boundary,
    })
}

/// Initial data of the shooting family: position `(0, a, 0)` with the offset
/// `a` in the tangential position slots, momentum `(sqrt(1 - |theta|^2),
/// theta, 0)` with the angles in the coupled tangential momentum slots.
pub fn shooting_initial(
    model: &CometricModel,
    a: &[f64],
    theta: &[f64],
) -> Result<(DVector<f64>, DVector<f64>)> {
    let geom = model.geometry();
    let n = geom.dim;
    if a.len() != geom.position_slots().len() {
        return Err(Error::Usage(format!(
            "offset must have {} components, got {}",
            geom.position_slots().len(),
            a.len()
        )));
    }
    if theta.len() != geom.theta_slots().len() {
        return Err(Error::Usage(format!(
            "angle must have {} components, got {}",
            geom.theta_slots().len(),
            theta.len()
        )));
    }
    let theta_sq: f64 = theta.iter().map(|t| t * t).sum();
    if theta_sq >= 1.0 {
        return Err(Error::Usage(format!("|theta|^2 = {theta_sq} must be < 1")));
    }
    let mut x0 = DVector::zeros(n);
    for (slot, &ai) in geom.position_slots().zip(a) {
        x0[slot] = ai;
    }
    let mut p0 = DVector::zeros(n);
    p0[0] = (1.0 - theta_sq).sqrt();
    for (slot, &ti) in geom.theta_slots().zip(theta) {
        p0[slot] = ti;
    }
    Ok((x0, p0))
}

/// Terminal position of the shooting-family geodesic at parameter `s`.
pub fn shooting_map(
    model: &CometricModel,
    a: &[f64],
    theta: &[f64],
    s: f64,
    step: f64,
) -> Result<DVector<f64>> {
    let traj = shooting_trajectory(model, a, theta, s, step)?;
    Ok(traj.terminal().x.clone())
}

/// Full trajectory behind `shooting_map`; errors when the chart boundary is
/// reached before `s`.
pub fn shooting_trajectory(
    model: &CometricModel,
    a: &[f64],
    theta: &[f64],
    s: f64,
    step: f64,
) -> Result<Trajectory> {
    let (x0, p0) = shooting_initial(model, a, theta)?;
    let traj = geodesic_shoot(model, &x0, &p0, s, step)?;
    if traj.hit_boundary && traj.s_end() + 1e-12 < s {
        return Err(Error::OutOfChart {
            point: traj.terminal().x.as_slice().to_vec(),
            halfwidth: model.halfwidth(),
        });
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::{CometricModel, PerturbationProfile};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(x: &[f64], p: &[f64]) -> CotangentState {
        CotangentState::new(DVector::from_row_slice(x), DVector::from_row_slice(p)).unwrap()
    }

    #[test]
    fn flat_hamiltonian_of_unit_momentum_is_half() {
        let m = CometricModel::flat(3, 0.5).unwrap();
        let h = hamiltonian(&m, &state(&[0.1, -0.2, 0.3], &[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(h, 0.5);
    }

    #[test]
    fn perturbed_axis_hamiltonian_ignores_vanishing_coupling_product() {
        let m = CometricModel::perturbed_flat(3, 0.5, 0.05).unwrap();
        let h = hamiltonian(&m, &state(&[0.2, 0.0, 0.0], &[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(h, 0.5, "coupling multiplies p2 p3 = 0");
    }

    #[test]
    fn perturbed_hamiltonian_matches_brute_force_double_sum() {
        // Independent oracle: assemble H by summing over all index pairs of
        // the evaluated cometric.
        let m = CometricModel::perturbed_flat(3, 0.5, 0.05).unwrap();
        let profile = PerturbationProfile::new(0.05).unwrap();
        let st = state(&[0.2, 0.0, 0.0], &[0.0, 1.0, 1.0]);
        let h = hamiltonian(&m, &st).unwrap();
        let g = crate::metric::cometric_eval(&m, st.x.as_slice()).unwrap();
        let mut oracle = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                oracle += g[(i, j)] * st.p[i] * st.p[j];
            }
        }
        oracle *= 0.5;
        assert!((h - oracle).abs() < 1e-15);
        // against the closed form 1/2 (g22 + g33) + alpha(0.2)
        let expected = 0.5 * (g[(1, 1)] + g[(2, 2)]) + profile.alpha(0.2);
        assert!((h - expected).abs() < 1e-15);
    }

    #[test]
    fn flat_field_is_straight() {
        let m = CometricModel::flat(3, 0.5).unwrap();
        let (dx, dp) = hamiltonian_vector_field(&m, &state(&[0.0, 0.1, 0.0], &[1.0, 0.0, 0.0]))
            .unwrap();
        assert_eq!(dx, DVector::from_row_slice(&[1.0, 0.0, 0.0]));
        assert_eq!(dp, DVector::zeros(3));
    }

    #[test]
    fn perturbed_field_vanishes_on_axis_solution() {
        let m = CometricModel::perturbed_flat(3, 0.5, 0.05).unwrap();
        let (dx, dp) =
            hamiltonian_vector_field(&m, &state(&[0.25, 0.1, 0.0], &[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(dx, DVector::from_row_slice(&[1.0, 0.0, 0.0]));
        assert_eq!(dp, DVector::zeros(3));
    }

    #[test]
    fn field_matches_finite_differences_of_hamiltonian() {
        // dx/ds = dH/dp and dp/ds = -dH/dx by central differences.
        let m = CometricModel::synthetic_taylor(5, 0.5, 3, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.4..0.4)).collect();
            let p: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let st = state(&x, &p);
            let (dx, dp) = hamiltonian_vector_field(&m, &st).unwrap();
            let h = 1e-6;
            for c in 0..5 {
                let mut xp = st.clone();
                xp.p[c] += h;
                let mut xm = st.clone();
                xm.p[c] -= h;
                let fd = (hamiltonian(&m, &xp).unwrap() - hamiltonian(&m, &xm).unwrap()) / (2.0 * h);
                assert!(
                    (fd - dx[c]).abs() <= 1e-6 * dx[c].abs().max(1.0),
                    "dH/dp{c}: fd {fd} vs {x:?}"
                );
                let mut yp = st.clone();
                yp.x[c] += h;
                let mut ym = st.clone();
                ym.x[c] -= h;
                let fd = -(hamiltonian(&m, &yp).unwrap() - hamiltonian(&m, &ym).unwrap())
                    / (2.0 * h);
                assert!(
                    (fd - dp[c]).abs() <= 1e-6 * dp[c].abs().max(1.0),
                    "-dH/dx{c}: fd {fd}"
                );
            }
        }
    }

    #[test]
    fn flat_shoot_is_exact_straight_line() {
        let m = CometricModel::flat(3, 0.5).unwrap();
        let traj = geodesic_shoot(
            &m,
            &DVector::from_row_slice(&[0.0, 0.1, 0.0]),
            &DVector::from_row_slice(&[1.0, 0.0, 0.0]),
            0.4,
            1e-3,
        )
        .unwrap();
        for sample in &traj.samples {
            assert!((sample.x[0] - sample.s).abs() <= 1e-12);
            assert!((sample.x[1] - 0.1).abs() <= 1e-12);
            assert!(sample.x[2].abs() <= 1e-12);
        }
        assert!(!traj.hit_boundary);
    }

    #[test]
    fn perturbed_shoot_keeps_axis_family_in_plane() {
        let m = CometricModel::perturbed_flat(3, 0.5, 0.05).unwrap();
        let traj = geodesic_shoot(
            &m,
            &DVector::from_row_slice(&[0.0, 0.1, 0.0]),
            &DVector::from_row_slice(&[1.0, 0.0, 0.0]),
            0.4,
            1e-3,
        )
        .unwrap();
        for sample in &traj.samples {
            assert!(sample.x[2].abs() <= 1e-9);
            assert!((sample.x[0] - sample.s).abs() <= 1e-9);
            assert!((sample.p[0] - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn tilted_launch_leaves_the_plane_upward() {
        // Positive coupling pushes the normal coordinate up for a positive
        // tangential angle; cross-checked with a half-step integration.
        let m = CometricModel::perturbed_flat(3, 0.5, 0.05).unwrap();
        let theta = 0.05f64;
        let p0 = DVector::from_row_slice(&[(1.0 - theta * theta).sqrt(), theta, 0.0]);
        let x0 = DVector::zeros(3);
        let coarse = geodesic_shoot(&m, &x0, &p0, 0.3, 1e-3).unwrap();
        let fine = geodesic_shoot(&m, &x0, &p0, 0.3, 5e-4).unwrap();
        for sample in coarse.samples.iter().skip(20) {
            assert!(
                sample.x[2] > 0.0,
                "normal coordinate should be positive at s = {}",
                sample.s
            );
        }
        let xc = coarse.terminal();
        let xf = fine.terminal();
        assert!((xc.x[2] - xf.x[2]).abs() <= 1e-12 + 1e-6 * xf.x[2].abs());
        assert!(xf.x[2] > 0.0);
    }

    #[test]
    fn shooting_map_reproduces_axis_family() {
        let m = CometricModel::perturbed_flat(3, 0.5, 0.05).unwrap();
        let x = shooting_map(&m, &[0.2], &[0.0], 0.35, 1e-3).unwrap();
        assert!((x[0] - 0.35).abs() <= 1e-10);
        assert!((x[1] - 0.2).abs() <= 1e-10);
        assert!(x[2].abs() <= 1e-10);
    }

    #[test]
    fn flat_shooting_map_is_linear_in_s() {
        let m = CometricModel::flat(3, 0.5).unwrap();
        let theta = 0.3f64;
        let x = shooting_map(&m, &[0.1], &[theta], 0.4, 1e-3).unwrap();
        let c = (1.0 - theta * theta).sqrt();
        assert!((x[0] - 0.4 * c).abs() <= 1e-11);
        assert!((x[1] - (0.1 + 0.4 * theta)).abs() <= 1e-11);
        assert!(x[2].abs() <= 1e-12);
    }

    #[test]
    fn five_dim_tilted_launch_has_positive_normal_coordinates() {
        // Step-halving oracle pins the terminal point to six digits.
        let m = CometricModel::perturbed_synthetic(5, 0.5, 3, 0.3, 0.05).unwrap();
        let a = [0.0, 0.0];
        let theta = [0.02, 0.02];
        let x1 = shooting_map(&m, &a, &theta, 0.2, 1e-3).unwrap();
        let x2 = shooting_map(&m, &a, &theta, 0.2, 5e-4).unwrap();
        for k in 3..5 {
            assert!(x1[k] > 0.0, "normal coordinate {k} = {:e}", x1[k]);
        }
        for k in 0..5 {
            assert!(
                (x1[k] - x2[k]).abs() <= 1e-6 * x2[k].abs().max(1e-9),
                "six-digit convergence on component {k}: {:e} vs {:e}",
                x1[k],
                x2[k]
            );
        }
    }

    #[test]
    fn energy_drift_scales_like_fourth_order() {
        // At the production step the drift sits at the rounding floor, far
        // below the tolerance; the fourth-order halving law is measured at
        // coarser steps where truncation dominates rounding.
        let m = CometricModel::perturbed_synthetic(5, 0.5, 3, 0.3, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.15..0.15)).collect();
        let dir: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x0 = DVector::from_row_slice(&x);
        let p0 = CotangentState::normalized_direction(&m, &x0, &DVector::from_row_slice(&dir))
            .unwrap();
        let production = geodesic_shoot(&m, &x0, &p0, 0.3, 1e-3).unwrap();
        assert!(production.max_drift < 1e-9);

        let coarse = geodesic_shoot(&m, &x0, &p0, 0.3, 0.02).unwrap();
        let fine = geodesic_shoot(&m, &x0, &p0, 0.3, 0.01).unwrap();
        let ratio = coarse.max_drift / fine.max_drift.max(1e-300);
        assert!(
            (12.0..=20.0).contains(&ratio),
            "halving ratio {ratio} (drift {:e} -> {:e})",
            coarse.max_drift,
            fine.max_drift
        );
    }

    #[test]
    fn forward_then_backward_returns_to_start() {
        let m = CometricModel::perturbed_synthetic(5, 0.5, 3, 0.3, 0.05).unwrap();
        let x0 = DVector::from_row_slice(&[0.05, 0.02, -0.03, 0.01, 0.0]);
        let dir = DVector::from_row_slice(&[1.0, 0.3, -0.2, 0.1, 0.2]);
        let p0 = CotangentState::normalized_direction(&m, &x0, &dir).unwrap();
        let fwd = geodesic_shoot(&m, &x0, &p0, 0.3, 1e-3).unwrap();
        let end = fwd.terminal();
        let back = geodesic_shoot(&m, &end.x, &(-end.p.clone()), 0.3, 1e-3).unwrap();
        let ret = back.terminal();
        assert!((ret.x.clone() - x0).amax() <= 1e-8);
        assert!((-ret.p.clone() - p0).amax() <= 1e-8);
    }

    #[test]
    fn flat_trajectories_commute_with_coordinate_permutations() {
        let m = CometricModel::flat(3, 0.5).unwrap();
        let x0 = DVector::from_row_slice(&[0.05, -0.1, 0.2]);
        let p0 = DVector::from_row_slice(&[0.6, 0.64, 0.48]);
        let perm = [2usize, 0, 1];
        let xp = DVector::from_row_slice(&[x0[perm[0]], x0[perm[1]], x0[perm[2]]]);
        let pp = DVector::from_row_slice(&[p0[perm[0]], p0[perm[1]], p0[perm[2]]]);
        let t1 = geodesic_shoot(&m, &x0, &p0, 0.2, 1e-3).unwrap();
        let t2 = geodesic_shoot(&m, &xp, &pp, 0.2, 1e-3).unwrap();
        let a = t1.terminal();
        let b = t2.terminal();
        for k in 0..3 {
            assert_eq!(a.x[perm[k]], b.x[k]);
        }
    }

    #[test]
    fn boundary_exit_is_flagged_and_immediate_exit_errors() {
        let m = CometricModel::flat(3, 0.5).unwrap();
        let traj = geodesic_shoot(
            &m,
            &DVector::from_row_slice(&[0.4, 0.0, 0.0]),
            &DVector::from_row_slice(&[1.0, 0.0, 0.0]),
            0.5,
            1e-3,
        )
        .unwrap();
        assert!(traj.hit_boundary);
        assert!(traj.s_end() < 0.11);

        let err = geodesic_shoot(
            &m,
            &DVector::from_row_slice(&[0.4999999, 0.0, 0.0]),
            &DVector::from_row_slice(&[1.0, 0.0, 0.0]),
            0.5,
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyTrajectory));
    }

    #[test]
    fn unstable_step_reports_energy_drift() {
        // A huge step on a curved model wrecks energy conservation.
        let m = CometricModel::constant_curvature(3, -1.0, 0.5).unwrap();
        let x0 = DVector::from_row_slice(&[0.05, 0.1, 0.0]);
        let dir = DVector::from_row_slice(&[0.3, 1.0, 0.4]);
        let p0 = CotangentState::normalized_direction(&m, &x0, &dir).unwrap();
        let err = geodesic_shoot(&m, &x0, &p0, 0.45, 0.15).unwrap_err();
        assert!(matches!(err, Error::EnergyDrift { .. }), "got {err}");
    }
}
