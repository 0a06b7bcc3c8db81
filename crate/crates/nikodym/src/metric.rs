//! Cometric models in the normal form adapted to a totally geodesic
//! submanifold, and the explicit coupling perturbation.
//!
//! A model evaluates the inverse metric tensor `g^{ij}(x)` and its first
//! partials on a single chart cube `U = (-delta0, delta0)^dim`. In adapted
//! coordinates the first `n_sub` coordinates are tangential to the
//! submanifold `{x' = 0}` (with `x'` the trailing normal coordinates), the
//! assembled cometric is block-diagonal `diag(1, gtilde, I)` at `x' = 0`, and
//! the tangential block has no linear term in `x'`. Those two facts make
//! every axis curve `s -> (s, a, 0)` a unit-speed geodesic and keep it one
//! after the perturbation is switched on.
//!
//! The perturbation adds `phi(x) * alpha(x1)` to a fixed set of
//! tangential-normal coupling slots. `alpha` vanishes identically for
//! `x1 <= 0`, so the perturbed model agrees with its base exactly on that
//! half of the chart.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Ambient dimensions up to this bound are supported by the fixed-size
/// evaluation scratch buffers.
pub const MAX_DIM: usize = 8;

/// Dimension parity of the construction; fully determined by the ambient
/// dimension, kept explicit so configs can state it and be validated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parity {
    Odd,
    Even,
}

impl std::fmt::Display for Parity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Parity::Odd => write!(f, "odd"),
            Parity::Even => write!(f, "even"),
        }
    }
}

/// Slot layout of the adapted chart: which coordinates are tangential,
/// which are normal, and which tangential momentum slots couple to which
/// normal slots under the perturbation.
///
/// All slot indices are 0-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub dim: usize,
    pub n_sub: usize,
}

impl Geometry {
    pub fn new(dim: usize) -> Result<Self> {
        if !(3..=MAX_DIM).contains(&dim) {
            return Err(Error::Usage(format!(
                "ambient dimension must be in 3..={MAX_DIM}, got {dim}"
            )));
        }
        // n_sub = ceil((dim + 1) / 2)
        Ok(Self { dim, n_sub: (dim + 2) / 2 })
    }

    pub fn parity(&self) -> Parity {
        if self.dim % 2 == 1 {
            Parity::Odd
        } else {
            Parity::Even
        }
    }

    /// Number of normal coordinates (equals the number of coupled pairs and
    /// the number of launch-angle parameters).
    pub fn normal_count(&self) -> usize {
        self.dim - self.n_sub
    }

    /// Tangential position slots indexed by the offset parameter `a`.
    pub fn position_slots(&self) -> std::ops::Range<usize> {
        1..self.n_sub
    }

    /// Tangential momentum slots indexed by the launch angle `theta`.
    /// These are exactly the slots the perturbation couples to the normals.
    pub fn theta_slots(&self) -> std::ops::Range<usize> {
        (self.n_sub - self.normal_count())..self.n_sub
    }

    pub fn normal_slots(&self) -> std::ops::Range<usize> {
        self.n_sub..self.dim
    }

    /// Coupled (tangential, normal) slot pairs, one per normal direction.
    pub fn coupling_pairs(&self) -> Vec<(usize, usize)> {
        let m = self.normal_count();
        (0..m)
            .map(|j| (self.n_sub - m + j, self.n_sub + j))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Perturbation profile
// ---------------------------------------------------------------------------

/// One-sided bump `alpha(t) = epsilon * exp(-1/t)` for `t > 0`, identically
/// zero for `t <= 0`, together with its derivative, antiderivative and the
/// chart cutoff `phi` (identically 1 on the working chart).
#[derive(Clone, Debug)]
pub struct PerturbationProfile {
    epsilon: f64,
    /// Cumulative integral of alpha at multiples of `GRID_STEP`.
    cumulative: Vec<f64>,
}

const GRID_STEP: f64 = 1e-3;
const GRID_END: f64 = 2.0;

impl PerturbationProfile {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(Error::Usage(format!(
                "perturbation amplitude must be finite and >= 0, got {epsilon}"
            )));
        }
        let n = (GRID_END / GRID_STEP).round() as usize;
        let mut cumulative = Vec::with_capacity(n + 1);
        cumulative.push(0.0);
        let mut acc = 0.0;
        for k in 0..n {
            let a = k as f64 * GRID_STEP;
            let b = (k + 1) as f64 * GRID_STEP;
            acc += adaptive_simpson(&|t| bump(epsilon, t), a, b, 1e-12, 64);
            cumulative.push(acc);
        }
        Ok(Self { epsilon, cumulative })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn alpha(&self, t: f64) -> f64 {
        bump(self.epsilon, t)
    }

    pub fn alpha_prime(&self, t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else {
            self.epsilon * (-t.recip()).exp() / (t * t)
        }
    }

    /// Antiderivative `int_0^t alpha`, from the cached cumulative grid plus an
    /// adaptive tail over the final partial cell.
    pub fn alpha_integral(&self, t: f64) -> f64 {
        if t <= 0.0 || self.epsilon == 0.0 {
            return 0.0;
        }
        let t = t.min(GRID_END);
        let k = ((t / GRID_STEP).floor() as usize).min(self.cumulative.len() - 1);
        let base = self.cumulative[k];
        let a = k as f64 * GRID_STEP;
        if t > a {
            base + adaptive_simpson(&|u| bump(self.epsilon, u), a, t, 1e-12, 64)
        } else {
            base
        }
    }

    /// Chart cutoff; identically 1 on the working chart.
    pub fn phi(&self, _x: &[f64]) -> f64 {
        1.0
    }
}

fn bump(epsilon: f64, t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        epsilon * (-t.recip()).exp()
    }
}

/// Recursive adaptive Simpson with a relative error control, so the result
/// stays proportionally accurate even where the integrand lives at extreme
/// scales (the bump spans hundreds of orders of magnitude near 0).
fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64, depth: usize) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        rel_tol: f64,
        depth: usize,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let refined = left + right;
        let err = (refined - whole).abs();
        if depth == 0 || err <= rel_tol * refined.abs().max(1e-300) {
            refined + (refined - whole) / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, rel_tol, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, rel_tol, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = simpson(fa, fm, fb, b - a);
    recurse(f, a, b, fa, fm, fb, whole, rel_tol, depth)
}

// ---------------------------------------------------------------------------
// Trigonometric coefficient functions
// ---------------------------------------------------------------------------

/// Smooth scalar coefficient `amp * sin(freq . x + phase)` with fused
/// value/gradient evaluation. Frequencies stay small so second derivatives
/// remain O(1).
#[derive(Clone, Debug)]
struct TrigCoeff {
    amp: f64,
    freq: Vec<f64>,
    phase: f64,
}

impl TrigCoeff {
    fn zero(nfreq: usize) -> Self {
        Self { amp: 0.0, freq: vec![0.0; nfreq], phase: 0.0 }
    }

    fn random(rng: &mut ChaCha8Rng, nfreq: usize, magnitude: f64) -> Self {
        let freq: Vec<f64> = (0..nfreq).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = magnitude * rng.gen_range(0.3..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        Self { amp, freq, phase }
    }

    #[inline]
    fn value(&self, x: &[f64]) -> f64 {
        if self.amp == 0.0 {
            return 0.0;
        }
        let mut arg = self.phase;
        for (w, xi) in self.freq.iter().zip(x) {
            arg += w * xi;
        }
        self.amp * arg.sin()
    }

    /// Returns the value; writes the gradient over this coefficient's own
    /// frequency dimensions into `grad`.
    #[inline]
    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        if self.amp == 0.0 {
            grad[..self.freq.len()].fill(0.0);
            return 0.0;
        }
        let mut arg = self.phase;
        for (w, xi) in self.freq.iter().zip(x) {
            arg += w * xi;
        }
        let (s, c) = arg.sin_cos();
        for (g, w) in grad.iter_mut().zip(&self.freq) {
            *g = self.amp * c * w;
        }
        self.amp * s
    }
}

// ---------------------------------------------------------------------------
// Taylor-form cometric
// ---------------------------------------------------------------------------

/// Cometric in adapted normal form. Writing `T` for the tangential slots,
/// `N` for the normal slots and `m = |N|`:
///
/// - `g^{00} = 1`, `g^{ij} = delta + gtilde` on `T \ {0}` at `x' = 0`;
/// - linear normal terms `x_l h^{ikl}` couple every slot `i` to normal `k`;
/// - quadratic normal terms `2 x_k x_l f^{ijkl}` correct the tangential
///   block, with the symmetries `f^{ijkl} = f^{jikl} = f^{ijlk}`.
///
/// Coefficients are bounded trigonometric polynomials drawn from a seeded
/// generator; a zero magnitude yields the flat model in normal form.
#[derive(Clone, Debug)]
pub struct TaylorCometric {
    geom: Geometry,
    delta0: f64,
    /// Upper-triangular pairs (i <= j) over tangential slots 1..n_sub.
    gtilde: Vec<TrigCoeff>,
    /// Flattened [i][k][l], i over all slots, k/l over local normal indices.
    h: Vec<TrigCoeff>,
    /// Upper-triangular tangential pairs x upper-triangular normal pairs.
    f: Vec<TrigCoeff>,
    seed: u64,
    magnitude: f64,
}

impl TaylorCometric {
    pub fn synthetic(dim: usize, delta0: f64, seed: u64, magnitude: f64) -> Result<Self> {
        let geom = Geometry::new(dim)?;
        check_halfwidth(delta0)?;
        let m = geom.normal_count();
        let nt = geom.n_sub;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let gt_pairs = (nt - 1) * nt / 2;
        // Keep the tangential block diagonally dominant: the sum of
        // off-identity amplitudes stays below 0.3.
        let gt_scale = 0.3 / (gt_pairs.max(1) as f64);
        let gtilde = (0..gt_pairs)
            .map(|_| TrigCoeff::random(&mut rng, nt, gt_scale * magnitude.min(1.0).max(0.0)))
            .collect();

        let h = (0..dim * m * m)
            .map(|_| TrigCoeff::random(&mut rng, dim, magnitude))
            .collect();
        let f_pairs_t = nt * (nt + 1) / 2;
        let f_pairs_n = m * (m + 1) / 2;
        let f = (0..f_pairs_t * f_pairs_n)
            .map(|_| TrigCoeff::random(&mut rng, dim, magnitude))
            .collect();

        Ok(Self { geom, delta0, gtilde, h, f, seed, magnitude })
    }

    /// Flat cometric written in normal form (all coefficients zero).
    pub fn flat(dim: usize, delta0: f64) -> Result<Self> {
        let geom = Geometry::new(dim)?;
        check_halfwidth(delta0)?;
        let m = geom.normal_count();
        let nt = geom.n_sub;
        Ok(Self {
            geom,
            delta0,
            gtilde: vec![TrigCoeff::zero(nt); (nt - 1) * nt / 2],
            h: vec![TrigCoeff::zero(dim); dim * m * m],
            f: vec![TrigCoeff::zero(dim); (nt * (nt + 1) / 2) * (m * (m + 1) / 2)],
            seed: 0,
            magnitude: 0.0,
        })
    }

    pub fn geometry(&self) -> Geometry {
        self.geom
    }

    #[inline]
    fn gt_index(&self, i: usize, j: usize) -> usize {
        // i <= j, both in 1..n_sub; dense upper triangle over 1..n_sub.
        let nt = self.geom.n_sub - 1; // block size
        let a = i - 1;
        let b = j - 1;
        a * nt - a * (a + 1) / 2 + b
    }

    #[inline]
    fn h_index(&self, i: usize, k: usize, l: usize) -> usize {
        let m = self.geom.normal_count();
        (i * m + k) * m + l
    }

    #[inline]
    fn f_index(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        let (k, l) = if k <= l { (k, l) } else { (l, k) };
        let nt = self.geom.n_sub;
        let m = self.geom.normal_count();
        let ti = i * nt - i * (i + 1) / 2 + j;
        let ni = k * m - k * (k + 1) / 2 + l;
        ti * (m * (m + 1) / 2) + ni
    }

    /// Coupling-row coefficient matrices along the axis `(s, 0, ..., 0)`:
    /// `Mh[k][l] = h^{(0)kl}`, `Mf[k][l] = f^{(0)(0)kl}` in local normal
    /// indices. These drive the reduced normal-block system.
    pub fn axis_coeffs(&self, s: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let m = self.geom.normal_count();
        let mut x = vec![0.0; self.geom.dim];
        x[0] = s;
        let mut mh = DMatrix::zeros(m, m);
        let mut mf = DMatrix::zeros(m, m);
        for k in 0..m {
            for l in 0..m {
                mh[(k, l)] = self.h[self.h_index(0, k, l)].value(&x);
                mf[(k, l)] = self.f[self.f_index(0, 0, k, l)].value(&x);
            }
        }
        (mh, mf)
    }

    fn eval_into(&self, x: &[f64], g: &mut DMatrix<f64>) {
        let dim = self.geom.dim;
        let nt = self.geom.n_sub;
        let m = self.geom.normal_count();
        g.fill(0.0);
        for i in 0..dim {
            g[(i, i)] = 1.0;
        }
        if self.magnitude == 0.0 {
            return;
        }
        for i in 1..nt {
            for j in i..nt {
                let v = self.gtilde[self.gt_index(i, j)].value(&x[..nt]);
                g[(i, j)] += v;
                if i != j {
                    g[(j, i)] += v;
                }
            }
        }
        for i in 0..dim {
            for k in 0..m {
                for l in 0..m {
                    let v = x[nt + l] * self.h[self.h_index(i, k, l)].value(x);
                    g[(i, nt + k)] += v;
                    g[(nt + k, i)] += v;
                }
            }
        }
        for i in 0..nt {
            for j in 0..nt {
                let mut acc = 0.0;
                for k in 0..m {
                    for l in 0..m {
                        acc += 2.0 * x[nt + k] * x[nt + l] * self.f[self.f_index(i, j, k, l)].value(x);
                    }
                }
                g[(i, j)] += acc;
            }
        }
    }

    fn eval_with_partials_into(&self, x: &[f64], g: &mut DMatrix<f64>, dg: &mut [DMatrix<f64>]) {
        let dim = self.geom.dim;
        let nt = self.geom.n_sub;
        let m = self.geom.normal_count();
        g.fill(0.0);
        for d in dg.iter_mut() {
            d.fill(0.0);
        }
        for i in 0..dim {
            g[(i, i)] = 1.0;
        }
        if self.magnitude == 0.0 {
            return;
        }

        let mut grad = [0.0f64; MAX_DIM];
        for i in 1..nt {
            for j in i..nt {
                let v = self.gtilde[self.gt_index(i, j)].value_grad(&x[..nt], &mut grad[..nt]);
                g[(i, j)] += v;
                if i != j {
                    g[(j, i)] += v;
                }
                for (c, gc) in grad[..nt].iter().enumerate() {
                    dg[c][(i, j)] += gc;
                    if i != j {
                        dg[c][(j, i)] += gc;
                    }
                }
            }
        }
        for i in 0..dim {
            for k in 0..m {
                for l in 0..m {
                    let hval = self.h[self.h_index(i, k, l)].value_grad(x, &mut grad[..dim]);
                    let xl = x[nt + l];
                    let v = xl * hval;
                    g[(i, nt + k)] += v;
                    g[(nt + k, i)] += v;
                    for c in 0..dim {
                        let mut dv = xl * grad[c];
                        if c == nt + l {
                            dv += hval;
                        }
                        dg[c][(i, nt + k)] += dv;
                        dg[c][(nt + k, i)] += dv;
                    }
                }
            }
        }
        // Quadratic tangential corrections: iterate canonical pairs once and
        // scatter with multiplicity.
        for i in 0..nt {
            for j in i..nt {
                for k in 0..m {
                    for l in k..m {
                        let fval = self.f[self.f_index(i, j, k, l)].value_grad(x, &mut grad[..dim]);
                        let xk = x[nt + k];
                        let xl = x[nt + l];
                        // Sum over ordered normal pairs: (k,l) and (l,k) when k != l.
                        let w = if k == l { 2.0 } else { 4.0 };
                        let v = w * xk * xl * fval;
                        g[(i, j)] += v;
                        if i != j {
                            g[(j, i)] += v;
                        }
                        for c in 0..dim {
                            let mut dv = w * xk * xl * grad[c];
                            if c == nt + k {
                                dv += w * xl * fval;
                            }
                            if c == nt + l {
                                dv += w * xk * fval;
                            }
                            dg[c][(i, j)] += dv;
                            if i != j {
                                dg[c][(j, i)] += dv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_halfwidth(delta0: f64) -> Result<()> {
    if !(delta0.is_finite() && delta0 > 0.0 && delta0 <= 1.0) {
        return Err(Error::Usage(format!(
            "chart half-width must lie in (0, 1], got {delta0}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Cometric model
// ---------------------------------------------------------------------------

/// A cometric model on the chart cube.
#[derive(Clone, Debug)]
pub enum CometricModel {
    Flat {
        dim: usize,
        delta0: f64,
    },
    /// Projective-type chart of a constant-curvature space:
    /// `g^{ij}(x) = (1 + K |x|^2)(delta_ij + K x_i x_j)`. Geodesics are
    /// straight lines as point sets, which makes flat-case cross-checks
    /// available. Note this chart is *not* in adapted normal form.
    ConstantCurvature {
        dim: usize,
        curvature: f64,
        delta0: f64,
    },
    Taylor(TaylorCometric),
    Perturbed {
        base: Box<CometricModel>,
        profile: PerturbationProfile,
        parity: Parity,
        /// Positivity threshold: the scanned minimum eigenvalue margin of the
        /// base over the chart; amplitudes below it keep the model positive
        /// definite on U.
        threshold: f64,
    },
}

impl CometricModel {
    pub fn flat(dim: usize, delta0: f64) -> Result<Self> {
        Geometry::new(dim)?;
        check_halfwidth(delta0)?;
        Ok(CometricModel::Flat { dim, delta0 })
    }

    pub fn constant_curvature(dim: usize, curvature: f64, delta0: f64) -> Result<Self> {
        Geometry::new(dim)?;
        check_halfwidth(delta0)?;
        if curvature == 0.0 {
            return Self::flat(dim, delta0);
        }
        if curvature < 0.0 && delta0 * delta0 * (dim as f64) * curvature.abs() >= 1.0 {
            return Err(Error::Usage(
                "chart too large for the negatively curved projective chart".into(),
            ));
        }
        Ok(CometricModel::ConstantCurvature { dim, curvature, delta0 })
    }

    pub fn synthetic_taylor(dim: usize, delta0: f64, seed: u64, magnitude: f64) -> Result<Self> {
        Ok(CometricModel::Taylor(TaylorCometric::synthetic(
            dim, delta0, seed, magnitude,
        )?))
    }

    /// Flat base plus coupling perturbation of amplitude `epsilon`.
    pub fn perturbed_flat(dim: usize, delta0: f64, epsilon: f64) -> Result<Self> {
        let base = Self::flat(dim, delta0)?;
        let geom = Geometry::new(dim)?;
        build_perturbed(base, PerturbationProfile::new(epsilon)?, geom.parity())
    }

    /// Synthetic Taylor base plus coupling perturbation.
    pub fn perturbed_synthetic(
        dim: usize,
        delta0: f64,
        seed: u64,
        magnitude: f64,
        epsilon: f64,
    ) -> Result<Self> {
        let base = Self::synthetic_taylor(dim, delta0, seed, magnitude)?;
        let geom = Geometry::new(dim)?;
        build_perturbed(base, PerturbationProfile::new(epsilon)?, geom.parity())
    }

    pub fn dim(&self) -> usize {
        match self {
            CometricModel::Flat { dim, .. } => *dim,
            CometricModel::ConstantCurvature { dim, .. } => *dim,
            CometricModel::Taylor(t) => t.geom.dim,
            CometricModel::Perturbed { base, .. } => base.dim(),
        }
    }

    pub fn halfwidth(&self) -> f64 {
        match self {
            CometricModel::Flat { delta0, .. } => *delta0,
            CometricModel::ConstantCurvature { delta0, .. } => *delta0,
            CometricModel::Taylor(t) => t.delta0,
            CometricModel::Perturbed { base, .. } => base.halfwidth(),
        }
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.dim()).expect("validated at construction")
    }

    pub fn in_chart(&self, x: &[f64]) -> bool {
        let h = self.halfwidth();
        x.len() == self.dim() && x.iter().all(|xi| xi.is_finite() && xi.abs() < h)
    }

    pub fn check_chart(&self, x: &[f64]) -> Result<()> {
        if self.in_chart(x) {
            Ok(())
        } else {
            Err(Error::OutOfChart { point: x.to_vec(), halfwidth: self.halfwidth() })
        }
    }

    /// Perturbation profile and coupled slot pairs, when present.
    pub fn perturbation(&self) -> Option<(&PerturbationProfile, Vec<(usize, usize)>)> {
        match self {
            CometricModel::Perturbed { profile, .. } => {
                Some((profile, self.geometry().coupling_pairs()))
            }
            _ => None,
        }
    }

    /// Positivity threshold reported by `build_perturbed`.
    pub fn positivity_threshold(&self) -> Option<f64> {
        match self {
            CometricModel::Perturbed { threshold, .. } => Some(*threshold),
            _ => None,
        }
    }

    /// Normal-form coefficient rows along the axis, for the reduced
    /// normal-block system: `(Mh, Mf, profile)`. Errors when the model is not
    /// in adapted normal form.
    pub fn axis_data(&self, s: f64) -> Result<(DMatrix<f64>, DMatrix<f64>, Option<&PerturbationProfile>)> {
        let m = self.geometry().normal_count();
        match self {
            CometricModel::Flat { .. } => {
                Ok((DMatrix::zeros(m, m), DMatrix::zeros(m, m), None))
            }
            CometricModel::Taylor(t) => {
                let (mh, mf) = t.axis_coeffs(s);
                Ok((mh, mf, None))
            }
            CometricModel::Perturbed { base, profile, .. } => {
                let (mh, mf, _) = base.axis_data(s)?;
                Ok((mh, mf, Some(profile)))
            }
            CometricModel::ConstantCurvature { .. } => Err(Error::UnsupportedModel),
        }
    }

    /// Fill `g` with the cometric at `x`. No chart check; callers on the hot
    /// path validate committed samples instead of integrator stages.
    pub fn eval_into(&self, x: &[f64], g: &mut DMatrix<f64>) {
        match self {
            CometricModel::Flat { dim, .. } => {
                g.fill(0.0);
                for i in 0..*dim {
                    g[(i, i)] = 1.0;
                }
            }
            CometricModel::ConstantCurvature { dim, curvature, .. } => {
                let k = *curvature;
                let r2: f64 = x.iter().map(|v| v * v).sum();
                let scale = 1.0 + k * r2;
                for i in 0..*dim {
                    for j in 0..*dim {
                        let kron = if i == j { 1.0 } else { 0.0 };
                        g[(i, j)] = scale * (kron + k * x[i] * x[j]);
                    }
                }
            }
            CometricModel::Taylor(t) => t.eval_into(x, g),
            CometricModel::Perturbed { base, profile, .. } => {
                base.eval_into(x, g);
                let v = profile.phi(x) * profile.alpha(x[0]);
                if v != 0.0 {
                    for (t, n) in self.geometry().coupling_pairs() {
                        g[(t, n)] += v;
                        g[(n, t)] += v;
                    }
                }
            }
        }
    }

    /// Fill `g` and the first partials `dg[c] = d g / d x_c`. Analytic for
    /// every variant.
    pub fn eval_with_partials_into(
        &self,
        x: &[f64],
        g: &mut DMatrix<f64>,
        dg: &mut [DMatrix<f64>],
    ) {
        match self {
            CometricModel::Flat { dim, .. } => {
                g.fill(0.0);
                for i in 0..*dim {
                    g[(i, i)] = 1.0;
                }
                for d in dg.iter_mut() {
                    d.fill(0.0);
                }
            }
            CometricModel::ConstantCurvature { dim, curvature, .. } => {
                let k = *curvature;
                let n = *dim;
                let r2: f64 = x.iter().map(|v| v * v).sum();
                let scale = 1.0 + k * r2;
                for i in 0..n {
                    for j in 0..n {
                        let kron = if i == j { 1.0 } else { 0.0 };
                        g[(i, j)] = scale * (kron + k * x[i] * x[j]);
                    }
                }
                for c in 0..n {
                    for i in 0..n {
                        for j in 0..n {
                            let kron = if i == j { 1.0 } else { 0.0 };
                            let mut v = 2.0 * k * x[c] * (kron + k * x[i] * x[j]);
                            if i == c {
                                v += scale * k * x[j];
                            }
                            if j == c {
                                v += scale * k * x[i];
                            }
                            dg[c][(i, j)] = v;
                        }
                    }
                }
            }
            CometricModel::Taylor(t) => t.eval_with_partials_into(x, g, dg),
            CometricModel::Perturbed { base, profile, .. } => {
                base.eval_with_partials_into(x, g, dg);
                let phi = profile.phi(x);
                let v = phi * profile.alpha(x[0]);
                let dv = phi * profile.alpha_prime(x[0]);
                if v != 0.0 || dv != 0.0 {
                    for (t, n) in self.geometry().coupling_pairs() {
                        g[(t, n)] += v;
                        g[(n, t)] += v;
                        dg[0][(t, n)] += dv;
                        dg[0][(n, t)] += dv;
                    }
                }
            }
        }
    }

    /// Canonical parameter descriptor; stable across runs, used for artifact
    /// headers and trajectory/model consistency checks.
    pub fn descriptor(&self) -> String {
        match self {
            CometricModel::Flat { dim, delta0 } => format!("flat(dim={dim},delta0={delta0})"),
            CometricModel::ConstantCurvature { dim, curvature, delta0 } => {
                format!("constant-curvature(dim={dim},K={curvature},delta0={delta0})")
            }
            CometricModel::Taylor(t) => format!(
                "taylor(dim={},delta0={},seed={},magnitude={})",
                t.geom.dim, t.delta0, t.seed, t.magnitude
            ),
            CometricModel::Perturbed { base, profile, parity, .. } => format!(
                "perturbed(base={},epsilon={},parity={})",
                base.descriptor(),
                profile.epsilon(),
                parity
            ),
        }
    }

    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.descriptor().hash(&mut h);
        h.finish()
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Evaluate the cometric at a chart point.
pub fn cometric_eval(model: &CometricModel, x: &[f64]) -> Result<DMatrix<f64>> {
    model.check_chart(x)?;
    let n = model.dim();
    let mut g = DMatrix::zeros(n, n);
    model.eval_into(x, &mut g);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "cometric evaluation".into() });
    }
    Ok(g)
}

/// Evaluate the first partials `dg[c] = d g^{ij} / d x_c` at a chart point.
pub fn cometric_partials(model: &CometricModel, x: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    model.check_chart(x)?;
    let n = model.dim();
    let mut g = DMatrix::zeros(n, n);
    let mut dg = vec![DMatrix::zeros(n, n); n];
    model.eval_with_partials_into(x, &mut g, &mut dg);
    if dg.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { context: "cometric partials".into() });
    }
    Ok(dg)
}

/// Central finite differences of the cometric, step 1e-6 with one Richardson
/// pass. Kept as the generic fallback and as an independent cross-check for
/// the analytic partials.
pub fn cometric_partials_fd(model: &CometricModel, x: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    model.check_chart(x)?;
    let n = model.dim();
    let h = 1e-6;
    let mut out = Vec::with_capacity(n);
    let mut gp = DMatrix::zeros(n, n);
    let mut gm = DMatrix::zeros(n, n);
    let mut xs = x.to_vec();
    for c in 0..n {
        let mut diff_at = |step: f64, gp: &mut DMatrix<f64>, gm: &mut DMatrix<f64>| {
            xs[c] = x[c] + step;
            model.eval_into(&xs, gp);
            xs[c] = x[c] - step;
            model.eval_into(&xs, gm);
            xs[c] = x[c];
            (gp.clone() - gm.clone()) / (2.0 * step)
        };
        let d1 = diff_at(h, &mut gp, &mut gm);
        let d2 = diff_at(h / 2.0, &mut gp, &mut gm);
        out.push(d2.map(|v| v * 4.0 / 3.0) - d1.map(|v| v / 3.0));
    }
    Ok(out)
}

/// Wrap a base model with the coupling perturbation. Reports (and enforces)
/// the amplitude threshold below which positive definiteness holds on the
/// chart, obtained by scanning the minimum eigenvalue of the base over a
/// sample grid.
pub fn build_perturbed(
    base: CometricModel,
    profile: PerturbationProfile,
    parity: Parity,
) -> Result<CometricModel> {
    if matches!(base, CometricModel::Perturbed { .. }) {
        return Err(Error::Usage("cannot perturb an already perturbed model".into()));
    }
    let geom = Geometry::new(base.dim())?;
    if geom.parity() != parity {
        return Err(Error::Usage(format!(
            "parity {parity} is inconsistent with dimension {}",
            base.dim()
        )));
    }
    let threshold = min_eigenvalue_on_grid(&base);
    let admissible = profile.epsilon() < threshold; // false for NaN thresholds too
    if !admissible {
        return Err(Error::AmplitudeTooLarge { epsilon: profile.epsilon(), threshold });
    }
    Ok(CometricModel::Perturbed { base: Box::new(base), profile, parity, threshold })
}

/// Minimum eigenvalue of the base cometric over a uniform sample grid that
/// includes the closed-cube boundary (the linear normal-coordinate terms
/// peak there). The coupling matrix has unit operator norm, so this margin
/// bounds admissible amplitudes.
fn min_eigenvalue_on_grid(base: &CometricModel) -> f64 {
    let dim = base.dim();
    let h = base.halfwidth();
    let per_axis = if dim <= 3 { 9 } else { 5 };
    let mut g = DMatrix::zeros(dim, dim);
    let mut x = vec![0.0; dim];
    let mut idx = vec![0usize; dim];
    let mut min_eig = f64::INFINITY;
    loop {
        for (c, &i) in idx.iter().enumerate() {
            x[c] = -h + i as f64 * (2.0 * h / (per_axis - 1) as f64);
        }
        base.eval_into(&x, &mut g);
        let eig = g.clone().symmetric_eigen().eigenvalues;
        for v in eig.iter() {
            min_eig = min_eig.min(*v);
        }
        // odometer
        let mut c = 0;
        loop {
            idx[c] += 1;
            if idx[c] < per_axis {
                break;
            }
            idx[c] = 0;
            c += 1;
            if c == dim {
                return min_eig;
            }
        }
    }
}
