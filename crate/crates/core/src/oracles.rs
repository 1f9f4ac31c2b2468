//! Independent reference machinery used to validate the SAV integrators:
//! an ETDRK4 integrator, dense assembly of the full linear systems, rate
//! estimation, level-set radius extraction and a stabilized semi-implicit
//! comparator for the nonlocal crystal model.

use std::fmt::Write as _;

use log::warn;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{invalid, Result, SavError};
use crate::flow::{GradientFlow, Vector};
use crate::models::{ModelSpec, Nonlinearity};
use crate::sav::{bdf_coefficients, step_count, BdfPredictor, CnPredictor, Scheme, BLOW_UP_LIMIT};
use crate::spectral::{transform_backward, transform_forward, Field, SpectralField};

/// Largest number of unknowns the dense oracles will assemble.
pub const DENSE_LIMIT: usize = 4096;

/// Below this `|z|` the φ-functions are summed as power series.
const SERIES_RADIUS: f64 = 1.0;

/// `(φ1(z), φ2(z), φ3(z))` with `φk(z) = Σ_j z^j/(j+k)!`.
pub fn phi_functions(z: f64) -> (f64, f64, f64) {
    if z.abs() < SERIES_RADIUS {
        // terms decay like 1/j!, 30 terms reach machine precision for |z| < 1
        let (mut p1, mut p2, mut p3) = (0.0, 0.0, 0.0);
        let mut term = 1.0; // z^j / j!
        for j in 0..30 {
            let jf = j as f64;
            p1 += term / (jf + 1.0);
            p2 += term / ((jf + 1.0) * (jf + 2.0));
            p3 += term / ((jf + 1.0) * (jf + 2.0) * (jf + 3.0));
            term *= z / (jf + 1.0);
        }
        (p1, p2, p3)
    } else {
        let e = z.exp();
        let p1 = (e - 1.0) / z;
        let p2 = (e - 1.0 - z) / (z * z);
        let p3 = (e - 1.0 - z - 0.5 * z * z) / (z * z * z);
        (p1, p2, p3)
    }
}

struct EtdCoefficients {
    e: Vec<f64>,
    e2: Vec<f64>,
    q: Vec<f64>,
    f1: Vec<f64>,
    f2: Vec<f64>,
    f3: Vec<f64>,
}

impl EtdCoefficients {
    fn new(lambda: &[f64], h: f64) -> Self {
        let n = lambda.len();
        let mut c = EtdCoefficients {
            e: Vec::with_capacity(n),
            e2: Vec::with_capacity(n),
            q: Vec::with_capacity(n),
            f1: Vec::with_capacity(n),
            f2: Vec::with_capacity(n),
            f3: Vec::with_capacity(n),
        };
        for &l in lambda {
            let z = h * l;
            let (p1, p2, p3) = phi_functions(z);
            let (half, _, _) = phi_functions(0.5 * z);
            c.e.push(z.exp());
            c.e2.push((0.5 * z).exp());
            c.q.push(0.5 * h * half);
            c.f1.push(h * (p1 - 3.0 * p2 + 4.0 * p3));
            c.f2.push(h * (p2 - 2.0 * p3));
            c.f3.push(h * (-p2 + 4.0 * p3));
        }
        c
    }
}

/// Fourth-order exponential time differencing for `u' = Λu + N(u)` with a
/// diagonal `Λ`, on coefficient vectors. Runs `steps` steps of size `h`.
pub fn etdrk4_diagonal(
    lambda: &[f64],
    u0: Vec<Complex64>,
    h: f64,
    steps: usize,
    mut nonlinear: impl FnMut(&[Complex64]) -> Result<Vec<Complex64>>,
) -> Result<Vec<Complex64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid("dt", "must be positive"));
    }
    if lambda.len() != u0.len() {
        return Err(invalid("lambda", "length differs from the state"));
    }
    let c = EtdCoefficients::new(lambda, h);
    let n = u0.len();
    let mut u = u0;
    for step in 0..steps {
        let nu = nonlinear(&u)?;
        let a: Vec<Complex64> = (0..n).map(|k| c.e2[k] * u[k] + c.q[k] * nu[k]).collect();
        let na = nonlinear(&a)?;
        let b: Vec<Complex64> = (0..n).map(|k| c.e2[k] * u[k] + c.q[k] * na[k]).collect();
        let nb = nonlinear(&b)?;
        let cc: Vec<Complex64> = (0..n)
            .map(|k| c.e2[k] * a[k] + c.q[k] * (2.0 * nb[k] - nu[k]))
            .collect();
        let nc = nonlinear(&cc)?;
        for k in 0..n {
            u[k] = c.e[k] * u[k]
                + c.f1[k] * nu[k]
                + 2.0 * c.f2[k] * (na[k] + nb[k])
                + c.f3[k] * nc[k];
        }
        if u.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(SavError::BlowUp {
                step: step + 1,
                t: (step + 1) as f64 * h,
                reason: "non-finite ETDRK4 state".into(),
            });
        }
    }
    Ok(u)
}

/// ETDRK4 reference for a single-field model: `Λ = G L` and `N = G U[φ]`.
pub fn etdrk4_run(model: &ModelSpec, phi0: &Field, dt: f64, t_final: f64) -> Result<Field> {
    if !crate::spectral::same_grid(model.grid(), phi0.grid()) {
        return Err(SavError::GridMismatch("ETDRK4 initial field"));
    }
    let steps = step_count(dt, t_final)?;
    let grid = model.grid().clone();
    let g = model.g_symbol().values().to_vec();
    let u0 = transform_forward(phi0).coeffs().to_vec();
    let nonlinear = |coeffs: &[Complex64]| -> Result<Vec<Complex64>> {
        let phi = transform_backward(&SpectralField::new(grid.clone(), coeffs.to_vec())?);
        if phi.max_abs() > BLOW_UP_LIMIT {
            return Err(SavError::BlowUp {
                step: 0,
                t: f64::NAN,
                reason: "ETDRK4 stage exceeded the blow-up limit".into(),
            });
        }
        let u = model.variational_derivative(&phi);
        let mut out = transform_forward(&u).coeffs().to_vec();
        for (c, gk) in out.iter_mut().zip(&g) {
            *c *= gk;
        }
        Ok(out)
    };
    let u = etdrk4_diagonal(model.gl_values(), u0, dt, steps, nonlinear)?;
    Ok(transform_backward(&SpectralField::new(grid, u)?))
}

fn dense_guard(n: usize) -> Result<()> {
    if n > DENSE_LIMIT {
        return Err(SavError::DenseTooLarge {
            limit: DENSE_LIMIT,
            got: n,
        });
    }
    Ok(())
}

/// Columns of a linear operator, obtained by applying it to unit vectors.
fn assemble<S: Vector>(like: &S, op: impl Fn(&S) -> S) -> DMatrix<f64> {
    let n = like.flat_len();
    let mut m = DMatrix::zeros(n, n);
    let mut unit = vec![0.0; n];
    for j in 0..n {
        unit[j] = 1.0;
        let col = op(&like.from_flat_like(&unit)).to_flat();
        m.set_column(j, &DVector::from_vec(col));
        unit[j] = 0.0;
    }
    m
}

fn row_functional<F: GradientFlow>(flow: &F, b: &F::State) -> Vec<f64> {
    let n = b.flat_len();
    let mut unit = vec![0.0; n];
    (0..n)
        .map(|j| {
            unit[j] = 1.0;
            let v = flow.inner(b, &b.from_flat_like(&unit));
            unit[j] = 0.0;
            v
        })
        .collect()
}

fn lu_solve(m: DMatrix<f64>, rhs: Vec<f64>) -> Result<Vec<f64>> {
    let x = m
        .lu()
        .solve(&DVector::from_vec(rhs))
        .ok_or_else(|| invalid("dense system", "singular"))?;
    Ok(x.iter().copied().collect())
}

/// Solves `(I − cGL)x − κ G b (b, x) = rhs` by dense factorization.
pub fn dense_solve_oracle<F: GradientFlow>(
    flow: &F,
    c: f64,
    rank_one: Option<(f64, &F::State)>,
    rhs: &F::State,
) -> Result<F::State> {
    let n = rhs.flat_len();
    dense_guard(n)?;
    let mut m = assemble(rhs, |x| {
        let mut y = x.clone();
        y.axpy(-c, &flow.apply_g(&flow.apply_l(x)));
        y
    });
    if let Some((kappa, b)) = rank_one {
        let gb = DVector::from_vec(flow.apply_g(b).to_flat());
        let row = DVector::from_vec(row_functional(flow, b));
        m -= kappa * &gb * row.transpose();
    }
    let x = lu_solve(m, rhs.to_flat())?;
    Ok(rhs.from_flat_like(&x))
}

/// `U[φ̄]/√(E1[φ̄] + shift)`.
fn weight<F: GradientFlow>(flow: &F, phibar: &F::State) -> Result<F::State> {
    let e1 = flow.nonlinear_energy(phibar) + flow.shift();
    if !(e1 > 0.0) {
        return Err(SavError::NonPositiveEnergy { value: e1 });
    }
    let mut b = flow.variational_derivative(phibar);
    b.scale(1.0 / e1.sqrt());
    Ok(b)
}

/// One SAV step of `scheme` computed by assembling and factorizing the full
/// `(φ, μ, r)` system. Predictors that themselves need a linear solve are
/// evaluated with the same dense machinery.
pub fn dense_sav_step<F: GradientFlow>(
    flow: &F,
    scheme: Scheme,
    phis: &[F::State],
    rs: &[f64],
    dt: f64,
) -> Result<(F::State, f64)> {
    let needed = scheme.history_depth();
    if phis.len() < needed || rs.len() < needed {
        return Err(SavError::History {
            needed,
            available: phis.len().min(rs.len()),
        });
    }
    let n = phis[0].flat_len();
    dense_guard(2 * n + 1)?;
    let p = phis;
    let phibar = match scheme {
        Scheme::FirstOrder => p[0].clone(),
        Scheme::CrankNicolson(CnPredictor::Extrapolation) => {
            F::State::lincomb(&[(1.5, &p[0]), (-0.5, &p[1])])
        }
        Scheme::CrankNicolson(CnPredictor::HalfStep) => {
            let mut rhs = flow.apply_g(&flow.variational_derivative(&p[0]));
            rhs.scale(0.5 * dt);
            rhs.axpy(1.0, &p[0]);
            dense_solve_oracle(flow, 0.5 * dt, None, &rhs)?
        }
        Scheme::Bdf2 => F::State::lincomb(&[(2.0, &p[0]), (-1.0, &p[1])]),
        Scheme::Bdf3(BdfPredictor::A) => {
            F::State::lincomb(&[(3.0, &p[0]), (-3.0, &p[1]), (1.0, &p[2])])
        }
        Scheme::Bdf3(BdfPredictor::B) => dense_sav_step(flow, Scheme::Bdf2, phis, rs, dt)?.0,
        Scheme::Bdf4(BdfPredictor::A) => F::State::lincomb(&[
            (4.0, &p[0]),
            (-6.0, &p[1]),
            (4.0, &p[2]),
            (-1.0, &p[3]),
        ]),
        Scheme::Bdf4(BdfPredictor::B) => {
            dense_sav_step(flow, Scheme::Bdf3(BdfPredictor::A), phis, rs, dt)?.0
        }
    };
    let b = weight(flow, &phibar)?;

    // a φ − Δt G μ = h_φ
    // μ − θ L φ − θ b r = (1 − θ)(L φⁿ + b rⁿ)
    // a r − (a/2)(b, φ) = h_r − ½(b, h_φ)
    let (a, theta, h_phi, h_r) = match scheme {
        Scheme::CrankNicolson(_) => (1.0, 0.5, p[0].clone(), rs[0]),
        _ => {
            let (alpha, h) = bdf_coefficients(scheme.order());
            let terms: Vec<(f64, &F::State)> = h.iter().copied().zip(p.iter()).collect();
            let h_r = h.iter().zip(rs).map(|(c, r)| c * r).sum();
            (alpha, 1.0, F::State::lincomb(&terms), h_r)
        }
    };
    let gm = assemble(&p[0], |x| flow.apply_g(x));
    let lm = assemble(&p[0], |x| flow.apply_l(x));
    let bv = DVector::from_vec(b.to_flat());
    let brow = DVector::from_vec(row_functional(flow, &b));
    let size = 2 * n + 1;
    let mut m = DMatrix::<f64>::zeros(size, size);
    for i in 0..n {
        m[(i, i)] = a;
        m[(n + i, n + i)] = 1.0;
        m[(n + i, 2 * n)] = -theta * bv[i];
        m[(2 * n, i)] = -0.5 * a * brow[i];
    }
    m[(2 * n, 2 * n)] = a;
    m.view_mut((0, n), (n, n)).copy_from(&(-dt * &gm));
    m.view_mut((n, 0), (n, n)).copy_from(&(-theta * &lm));

    let mut rhs = vec![0.0; size];
    rhs[..n].copy_from_slice(&h_phi.to_flat());
    if theta < 1.0 {
        let mut explicit = flow.apply_l(&p[0]);
        explicit.axpy(rs[0], &b);
        for (slot, v) in rhs[n..2 * n].iter_mut().zip(explicit.to_flat()) {
            *slot = (1.0 - theta) * v;
        }
    }
    rhs[2 * n] = h_r - 0.5 * flow.inner(&b, &h_phi);
    let x = lu_solve(m, rhs)?;
    Ok((p[0].from_flat_like(&x[..n]), x[2 * n]))
}

/// Observed convergence behaviour of a sequence of runs.
#[derive(Clone, Debug, PartialEq)]
pub struct RateEstimate {
    pub dts: Vec<f64>,
    pub errors: Vec<f64>,
    /// `slopes[i]` is the order between runs `i` and `i + 1`.
    pub slopes: Vec<f64>,
    /// Least-squares slope of `log error` against `log Δt`.
    pub fitted_slope: f64,
    /// False if some error failed to decrease with `Δt`.
    pub monotone: bool,
}

impl RateEstimate {
    pub fn from_errors(dts: Vec<f64>, errors: Vec<f64>) -> Result<Self> {
        if dts.len() < 3 || dts.len() != errors.len() {
            return Err(invalid("dts", "need at least 3 step sizes with matching errors"));
        }
        if dts.windows(2).any(|w| !(w[1] < w[0])) || dts.iter().any(|&d| !(d > 0.0)) {
            return Err(invalid("dts", "must be positive and strictly decreasing"));
        }
        if errors.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(invalid("errors", "must be positive and finite"));
        }
        let slopes: Vec<f64> = dts
            .windows(2)
            .zip(errors.windows(2))
            .map(|(d, e)| (e[0] / e[1]).ln() / (d[0] / d[1]).ln())
            .collect();
        let xs: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
        let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
        let k = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let monotone = errors.windows(2).all(|w| w[1] < w[0]);
        if !monotone {
            warn!("errors do not decrease monotonically: {errors:?}");
        }
        Ok(RateEstimate {
            dts,
            errors,
            slopes,
            fitted_slope: sxy / sxx,
            monotone,
        })
    }

    /// `dt,error,slope` with an empty slope on the first row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dt,error,slope\n");
        for (i, (d, e)) in self.dts.iter().zip(&self.errors).enumerate() {
            let slope = if i == 0 {
                String::new()
            } else {
                format!("{:.6}", self.slopes[i - 1])
            };
            writeln!(s, "{d:e},{e:e},{slope}").unwrap();
        }
        s
    }
}

/// Runs `runner` for each step size and measures the `L²` distance to
/// `reference` at the common final time.
pub fn convergence_rate<F: GradientFlow>(
    flow: &F,
    dts: &[f64],
    reference: &F::State,
    mut runner: impl FnMut(f64) -> Result<F::State>,
) -> Result<RateEstimate> {
    let mut errors = Vec::with_capacity(dts.len());
    for &dt in dts {
        let mut d = runner(dt)?;
        d.axpy(-1.0, reference);
        errors.push(flow.inner(&d, &d).sqrt());
    }
    RateEstimate::from_errors(dts.to_vec(), errors)
}

/// Radius `√(A/π)` of the region where `φ > level`, with `A` counted in
/// grid cells.
pub fn extract_radius(phi: &Field, level: f64) -> Result<f64> {
    if phi.grid().dim() != 2 {
        return Err(SavError::InvalidGrid("radius extraction needs a 2-D field".into()));
    }
    let inside = phi.values().iter().filter(|&&v| v > level).count();
    if inside == 0 {
        return Err(SavError::DegenerateLevelSet("empty"));
    }
    if inside == phi.values().len() {
        return Err(SavError::DegenerateLevelSet("full"));
    }
    let area = inside as f64 * phi.grid().cell_volume();
    Ok((area / std::f64::consts::PI).sqrt())
}

/// Sharp-interface radius `√(R0² − 2t)`.
pub fn radius_theory(r0: f64, t: f64) -> f64 {
    (r0 * r0 - 2.0 * t).max(0.0).sqrt()
}

/// Stabilization weights of the semi-implicit comparator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsiParams {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl Default for SsiParams {
    fn default() -> Self {
        SsiParams {
            a1: 0.0,
            a2: 1.0,
            a3: 0.0,
        }
    }
}

/// Per-mode multipliers `(m_old, m_cubic)` with
/// `φ̂ⁿ⁺¹ = m_old φ̂ⁿ + m_cubic (φⁿ)³^`.
pub fn ssi_multipliers(lambda: f64, eps: f64, dt: f64, p: &SsiParams) -> (f64, f64) {
    let l2 = lambda * lambda;
    let l3 = l2 * lambda;
    let implicit =
        1.0 - dt * ((1.0 + p.a1) * (1.0 - eps) * lambda + 2.0 * (1.0 - p.a2) * l2 + (1.0 + p.a3) * l3);
    let explicit = 1.0 - dt * (p.a1 * (1.0 - eps) * lambda - 2.0 * p.a2 * l2 + p.a3 * l3);
    (explicit / implicit, dt * lambda / implicit)
}

/// One step of the stabilized semi-implicit scheme for the nonlocal crystal
/// model; the cubic term is multiplied by `L_δ` as in the flow itself.
pub fn ssi_step(model: &ModelSpec, phi: &Field, dt: f64, p: &SsiParams) -> Result<Field> {
    let Nonlinearity::PhaseFieldCrystal { eps } = *model.nonlinearity() else {
        return Err(invalid("model", "SSI comparator needs the nonlocal crystal model"));
    };
    if !crate::spectral::same_grid(model.grid(), phi.grid()) {
        return Err(SavError::GridMismatch("SSI state"));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid("dt", "must be positive"));
    }
    let lambda = model.g_symbol().values();
    let old = transform_forward(phi);
    let cubic = transform_forward(&phi.map(|v| v * v * v));
    let coeffs = old
        .coeffs()
        .iter()
        .zip(cubic.coeffs())
        .zip(lambda)
        .map(|((o, c), &l)| {
            let (mo, mc) = ssi_multipliers(l, eps, dt, p);
            mo * o + mc * c
        })
        .collect();
    let next = transform_backward(&SpectralField::new(phi.grid().clone(), coeffs)?);
    if !next.is_finite() || next.max_abs() > BLOW_UP_LIMIT {
        return Err(SavError::BlowUp {
            step: 0,
            t: f64::NAN,
            reason: "SSI state left the admissible range".into(),
        });
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{gl_model, npfc_model};
    use crate::sav::{advance, SavState};
    use crate::spectral::{Grid, KernelSpec, OperatorSymbol};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn noise(grid: &Arc<Grid>, seed: u64, amp: f64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..grid.len()).map(|_| rng.gen_range(-amp..amp)).collect();
        Field::new(grid.clone(), v).unwrap()
    }

    fn exact_phi(z: f64) -> (f64, f64, f64) {
        // long-double-free reference: closed forms evaluated where they are
        // well conditioned, compared only for moderate |z|
        let e = z.exp();
        (
            (e - 1.0) / z,
            (e - 1.0 - z) / (z * z),
            (e - 1.0 - z - 0.5 * z * z) / (z * z * z),
        )
    }

    #[test]
    fn phi_functions_are_smooth_through_zero() {
        let (a, b, c) = phi_functions(0.0);
        assert_eq!((a, b, c), (1.0, 0.5, 1.0 / 6.0));
        for z in [1e-8, 1e-6, -1e-6] {
            let (p1, p2, p3) = phi_functions(z);
            assert!((p1 - (1.0 + z / 2.0)).abs() < 1e-10);
            assert!((p2 - (0.5 + z / 6.0)).abs() < 1e-10);
            assert!((p3 - (1.0 / 6.0 + z / 24.0)).abs() < 1e-10);
        }
        // both branches agree across the switch
        for z in [-0.999_999_9, 0.999_999_9] {
            let s = phi_functions(z);
            let c = exact_phi(z * 1.000_000_2);
            assert!((s.0 - c.0).abs() < 1e-6 && (s.1 - c.1).abs() < 1e-6 && (s.2 - c.2).abs() < 1e-6);
        }
        // φ1 ≈ −1/z and φ3 ≈ −1/(2z) for large negative z
        let (p1, _, p3) = phi_functions(-1e8);
        assert!((p1 - 1e-8).abs() < 1e-20 && (p3 - 0.5e-8).abs() < 1e-15);
    }

    #[test]
    fn etdrk4_is_exact_for_linear_problems() {
        let lambda = [-3.0, 0.0, -1e6, 0.7];
        let u0: Vec<Complex64> = (1..=4).map(|k| Complex64::new(k as f64, -1.0)).collect();
        let u = etdrk4_diagonal(&lambda, u0.clone(), 0.1, 1, |x| {
            Ok(vec![Complex64::default(); x.len()])
        })
        .unwrap();
        for k in 0..4 {
            let want = u0[k] * (0.1 * lambda[k]).exp();
            assert!((u[k] - want).norm() < 1e-13 * want.norm().max(1.0));
        }
    }

    #[test]
    fn etdrk4_matches_logistic_solution() {
        // u' = −u + u² has u(t) = 1 / (1 + (1/u0 − 1) eᵗ)
        let u0 = 0.1;
        let u = etdrk4_diagonal(&[-1.0], vec![Complex64::new(u0, 0.0)], 1e-3, 1000, |x| {
            Ok(vec![x[0] * x[0]])
        })
        .unwrap();
        let exact = 1.0 / (1.0 + (1.0 / u0 - 1.0) * 1f64.exp());
        assert!((u[0].re - exact).abs() < 1e-10, "{} vs {exact}", u[0].re);
    }

    #[test]
    fn etdrk4_converges_at_fourth_order() {
        let grid = Grid::periodic(&[16, 16]).unwrap();
        let model = gl_model(&grid, 0.3, 1.0, 0.0, 1.0).unwrap();
        let phi0 = Field::from_fn(&grid, |x| 0.5 * x[0].sin() * x[1].sin() + 0.2 * x[1].cos());
        let t = 0.1;
        let runs: Vec<Field> = [0.02, 0.01, 0.005, 0.0025]
            .iter()
            .map(|&dt| etdrk4_run(&model, &phi0, dt, t).unwrap())
            .collect();
        let diff = |a: &Field, b: &Field| {
            let mut d = a.clone();
            d.axpy(-1.0, b);
            d.l2_norm()
        };
        let e1 = diff(&runs[0], &runs[1]);
        let e2 = diff(&runs[1], &runs[2]);
        let e3 = diff(&runs[2], &runs[3]);
        for (a, b) in [(e1, e2), (e2, e3)] {
            let order = (a / b).log2();
            assert!((order - 4.0).abs() < 0.3, "order {order}");
        }
    }

    #[test]
    fn dense_solve_reduces_to_identity_and_spectral_solve() {
        let grid = Grid::periodic(&[8, 8]).unwrap();
        let model = gl_model(&grid, 0.3, 1.0, 1.0, 1.0).unwrap();
        let rhs = noise(&grid, 1, 1.0);
        let same = dense_solve_oracle(&model, 0.0, None, &rhs).unwrap();
        assert_eq!(same.values(), rhs.values());
        let dense = dense_solve_oracle(&model, 0.01, None, &rhs).unwrap();
        let spectral = crate::sav::solve_constant_coeff(&model, 0.01, &rhs);
        let mut d = dense.clone();
        d.axpy(-1.0, &spectral);
        assert!(d.max_abs() < 1e-11 * spectral.max_abs().max(1.0));
    }

    #[test]
    fn dense_guard_triggers() {
        let grid = Grid::periodic(&[64, 64, 4]).unwrap();
        let model = ModelSpec::linear(
            OperatorSymbol::constant(&grid, 1.0).unwrap(),
            OperatorSymbol::constant(&grid, -1.0).unwrap(),
        )
        .unwrap();
        let rhs = Field::zeros(&grid);
        assert!(matches!(
            dense_solve_oracle(&model, 0.1, None, &rhs),
            Err(SavError::DenseTooLarge { .. })
        ));
    }

    #[test]
    fn dense_steps_match_reduced_updates() {
        let grid = Grid::periodic(&[8, 8]).unwrap();
        let model = gl_model(&grid, 0.4, 1.0, 1.0, 1.0).unwrap();
        let schemes = [
            "be", "cn", "cn-half", "bdf2", "bdf3a", "bdf3b", "bdf4a", "bdf4b",
        ];
        for (i, label) in schemes.iter().enumerate() {
            let scheme = Scheme::from_label(label).unwrap();
            let phis: Vec<Field> = (0..4).map(|k| noise(&grid, 10 * i as u64 + k, 0.8)).collect();
            let rs: Vec<f64> = phis.iter().map(|p| model.sav_variable(p).unwrap()).collect();
            let (a, ra) = advance(&model, scheme, &phis, &rs, 0.05).unwrap();
            let (b, rb) = dense_sav_step(&model, scheme, &phis, &rs, 0.05).unwrap();
            let mut d = a.clone();
            d.axpy(-1.0, &b);
            assert!(d.max_abs() < 1e-10 * a.max_abs(), "{label}: {}", d.max_abs());
            assert!((ra - rb).abs() < 1e-10 * ra.abs(), "{label}: r");
        }
    }

    #[test]
    fn rate_estimate_recovers_power_law() {
        let dts = vec![0.1, 0.05, 0.025, 0.0125];
        let errors: Vec<f64> = dts.iter().map(|d| 3.0 * d * d).collect();
        let r = RateEstimate::from_errors(dts, errors).unwrap();
        assert!((r.fitted_slope - 2.0).abs() < 1e-12);
        assert!(r.slopes.iter().all(|s| (s - 2.0).abs() < 1e-12));
        assert!(r.monotone);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("1e-1,") && lines[1].ends_with(','));
        assert!(lines[2].ends_with(",2.000000"));
        assert!(RateEstimate::from_errors(vec![0.1, 0.2, 0.3], vec![1.0; 3]).is_err());
        let flat = RateEstimate::from_errors(vec![0.3, 0.2, 0.1], vec![1.0, 2.0, 1.0]).unwrap();
        assert!(!flat.monotone);
    }

    #[test]
    fn cn_rate_from_etdrk4_reference() {
        let grid = Grid::periodic(&[16, 16]).unwrap();
        let model = gl_model(&grid, 0.3, 1.0, 0.0, 1.0).unwrap();
        let phi0 = Field::from_fn(&grid, |x| 0.3 * x[0].sin() * x[1].sin());
        let t = 0.05;
        let reference = etdrk4_run(&model, &phi0, 1e-5, t).unwrap();
        let dts = [0.01, 0.005, 0.0025];
        let est = convergence_rate(&model, &dts, &reference, |dt| {
            let scheme = Scheme::CrankNicolson(CnPredictor::HalfStep);
            Ok(crate::sav::run(&model, scheme, phi0.clone(), dt, t, 1000)?
                .state
                .phi()
                .clone())
        })
        .unwrap();
        assert!((est.fitted_slope - 2.0).abs() < 0.2, "{est:?}");
    }

    #[test]
    fn radius_of_constructed_disc() {
        let grid = Grid::new(&[512, 512], &[256.0, 256.0]).unwrap();
        let disc = Field::from_fn(&grid, |x| {
            let (a, b) = (x[0] - 128.0, x[1] - 128.0);
            if a * a + b * b < 50.0 * 50.0 {
                1.0
            } else {
                0.0
            }
        });
        let r = extract_radius(&disc, 0.5).unwrap();
        assert!((r - 50.0).abs() < 0.5, "{r}");
        let smaller = Field::from_fn(&grid, |x| {
            let (a, b) = (x[0] - 128.0, x[1] - 128.0);
            if a * a + b * b < 49.5 * 49.5 {
                1.0
            } else {
                0.0
            }
        });
        assert!(extract_radius(&smaller, 0.5).unwrap() < r);
        assert!(matches!(
            extract_radius(&Field::constant(&grid, 1.0), 0.5),
            Err(SavError::DegenerateLevelSet("full"))
        ));
        assert!(extract_radius(&Field::constant(&grid, 0.0), 0.5).is_err());
        assert!((radius_theory(100.0, 1000.0) - 8000f64.sqrt()).abs() < 1e-12);
    }

    fn npfc() -> ModelSpec {
        let grid = Grid::new(&[16, 16], &[50.0, 50.0]).unwrap();
        npfc_model(&grid, 0.025, &KernelSpec::default()).unwrap()
    }

    #[test]
    fn ssi_leaves_zero_stationary() {
        let model = npfc();
        let z = Field::zeros(model.grid());
        let next = ssi_step(&model, &z, 1.0, &SsiParams::default()).unwrap();
        assert_eq!(next.max_abs(), 0.0);
    }

    #[test]
    fn ssi_mode_multipliers_match_hand_derivation() {
        // a1 = 0, a2 = 1, a3 = 0:
        // φ̂ⁿ⁺¹ (1 − Δt((1−ε)λ + λ³)) = φ̂ⁿ (1 + 2Δtλ²) + Δtλ (φ³)^
        let (eps, dt) = (0.025, 0.7);
        for lambda in [0.0, -0.3, -2.0, -17.5] {
            let (mo, mc) = ssi_multipliers(lambda, eps, dt, &SsiParams::default());
            let den = 1.0 - dt * ((1.0 - eps) * lambda + lambda.powi(3));
            assert!((mo - (1.0 + 2.0 * dt * lambda * lambda) / den).abs() < 1e-14);
            assert!((mc - dt * lambda / den).abs() < 1e-14);
        }
        let model = npfc();
        let phi = noise(model.grid(), 3, 0.3);
        let next = ssi_step(&model, &phi, dt, &SsiParams::default()).unwrap();
        let a = transform_forward(&phi);
        let c = transform_forward(&phi.map(|v| v.powi(3)));
        let got = transform_forward(&next);
        for (k, &l) in model.g_symbol().values().iter().enumerate() {
            let (mo, mc) = ssi_multipliers(l, eps, dt, &SsiParams::default());
            let want = mo * a.coeffs()[k] + mc * c.coeffs()[k];
            assert!((got.coeffs()[k] - want).norm() < 1e-13);
        }
    }

    #[test]
    fn ssi_rejects_other_models() {
        let grid = Grid::periodic(&[8, 8]).unwrap();
        let model = gl_model(&grid, 0.3, 1.0, 1.0, 1.0).unwrap();
        assert!(ssi_step(&model, &Field::zeros(&grid), 1.0, &SsiParams::default()).is_err());
    }

    #[test]
    fn dense_single_level_state_round_trip() {
        let grid = Grid::periodic(&[8, 8]).unwrap();
        let model = gl_model(&grid, 0.4, 1.0, 0.0, 1.0).unwrap();
        let s = SavState::new(&model, noise(&grid, 2, 0.5), 0.1, Scheme::FirstOrder).unwrap();
        let next = crate::sav::step_first_order(&model, &s).unwrap();
        let (b, r) = dense_sav_step(&model, Scheme::FirstOrder, s.phi_history(), s.r_history(), 0.1)
            .unwrap();
        let mut d = b.clone();
        d.axpy(-1.0, next.phi());
        assert!(d.max_abs() < 1e-10);
        assert!((r - next.r()).abs() < 1e-10);
    }
}
