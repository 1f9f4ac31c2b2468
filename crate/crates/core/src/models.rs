//! Catalog of single-field gradient flows on periodic grids.
//!
//! Each model fixes the split `E = ½(φ, Lφ) + E1[φ]`, the dissipation
//! symbol `G`, and the pointwise or pseudo-spectral evaluation of `E1` and
//! `U = δE1/δφ`. Nonlinear terms are evaluated by collocation; an optional
//! 2/3-rule filter can be applied to `U`.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{invalid, Result, SavError};
use crate::flow::{EnergyReport, GradientFlow};
use crate::spectral::{
    apply_multiplier, apply_multiplier_fn, dealias, derivative, dot, same_grid, Field, Grid,
    KernelSpec, OperatorSymbol, SymbolSign,
};

#[derive(Clone, Debug, PartialEq)]
pub enum Nonlinearity {
    /// `E1 = 0`; the flow is linear.
    None,
    /// `E1 = (1/4ε²)∫(φ² − 1 − β)²`
    GinzburgLandau { eps: f64, beta: f64 },
    /// `E1 = ∫(¼φ⁴ − (ε/2)φ²)`
    PhaseFieldCrystal { eps: f64 },
    /// `E1 = ∫(−½ ln(1 + |∇φ|²) + (α/2)|Δφ|²) + C0`
    Epitaxy { alpha: f64, c0: f64 },
}

#[derive(Clone, Debug)]
pub struct ModelSpec {
    name: String,
    grid: Arc<Grid>,
    l: OperatorSymbol,
    g: OperatorSymbol,
    gl: Vec<f64>,
    nonlinearity: Nonlinearity,
    /// Part of a split nonlocal quadratic form moved into `E1`.
    explicit_part: Option<OperatorSymbol>,
    shift: f64,
    dealias: bool,
    params: BTreeMap<String, f64>,
}

fn require(name: &'static str, ok: bool, reason: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(invalid(name, reason))
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    require(name, v.is_finite() && v > 0.0, format!("must be positive, got {v}"))
}

impl ModelSpec {
    /// Builds a model from explicit symbols. `l` must be nonnegative and `g`
    /// nonpositive.
    pub fn new(
        name: impl Into<String>,
        l: OperatorSymbol,
        g: OperatorSymbol,
        nonlinearity: Nonlinearity,
    ) -> Result<Self> {
        if !same_grid(l.grid(), g.grid()) {
            return Err(SavError::GridMismatch("model symbols"));
        }
        let l = l.with_sign(SymbolSign::Nonnegative)?;
        let g = g.with_sign(SymbolSign::Nonpositive)?;
        let gl = l.values().iter().zip(g.values()).map(|(a, b)| a * b).collect();
        Ok(ModelSpec {
            name: name.into(),
            grid: l.grid().clone(),
            l,
            g,
            gl,
            nonlinearity,
            explicit_part: None,
            shift: 1.0,
            dealias: false,
            params: BTreeMap::new(),
        })
    }

    /// Linear flow `φ_t = G L φ` (`E1 ≡ 0`).
    pub fn linear(l: OperatorSymbol, g: OperatorSymbol) -> Result<Self> {
        Self::new("linear", l, g, Nonlinearity::None)
    }

    pub fn with_shift(mut self, shift: f64) -> Result<Self> {
        positive("shift_delta", shift)?;
        self.shift = shift;
        Ok(self)
    }

    pub fn with_dealias(mut self, on: bool) -> Self {
        self.dealias = on;
        self
    }

    fn with_params(mut self, params: &[(&str, f64)]) -> Self {
        for &(k, v) in params {
            self.params.insert(k.to_string(), v);
        }
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn l_symbol(&self) -> &OperatorSymbol {
        &self.l
    }

    pub fn g_symbol(&self) -> &OperatorSymbol {
        &self.g
    }

    /// Mode-wise product `g(k) l(k)`.
    pub fn gl_values(&self) -> &[f64] {
        &self.gl
    }

    pub fn nonlinearity(&self) -> &Nonlinearity {
        &self.nonlinearity
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn shift_delta(&self) -> f64 {
        self.shift
    }

    /// True when `G` vanishes at the zero mode, so the mean is conserved.
    pub fn conserves_mass(&self) -> bool {
        self.g.values()[0] == 0.0
    }

    fn pointwise_e1(&self, phi: &Field) -> f64 {
        match self.nonlinearity {
            Nonlinearity::None => 0.0,
            Nonlinearity::GinzburgLandau { eps, beta } => {
                let c = 0.25 / (eps * eps);
                let s: f64 = phi
                    .values()
                    .iter()
                    .map(|&p| {
                        let w = p * p - 1.0 - beta;
                        w * w
                    })
                    .sum();
                c * s * self.grid.cell_volume()
            }
            Nonlinearity::PhaseFieldCrystal { eps } => {
                let s: f64 = phi
                    .values()
                    .iter()
                    .map(|&p| 0.25 * p.powi(4) - 0.5 * eps * p * p)
                    .sum();
                s * self.grid.cell_volume()
            }
            Nonlinearity::Epitaxy { alpha, c0 } => {
                let grad2 = self.gradient_squared(phi);
                let lap = self.laplacian(phi);
                let s: f64 = grad2
                    .iter()
                    .zip(lap.values())
                    .map(|(&g2, &d)| -0.5 * g2.ln_1p() + 0.5 * alpha * d * d)
                    .sum();
                s * self.grid.cell_volume() + c0
            }
        }
    }

    fn gradients(&self, phi: &Field) -> Vec<Field> {
        (0..self.grid.dim()).map(|a| derivative(phi, a)).collect()
    }

    fn gradient_squared(&self, phi: &Field) -> Vec<f64> {
        let grads = self.gradients(phi);
        let mut g2 = vec![0.0; self.grid.len()];
        for d in &grads {
            for (s, v) in g2.iter_mut().zip(d.values()) {
                *s += v * v;
            }
        }
        g2
    }

    fn laplacian(&self, phi: &Field) -> Field {
        let lap = OperatorSymbol::minus_laplacian(&self.grid);
        apply_multiplier_fn(phi, |k| -lap.values()[k])
    }

    fn pointwise_u(&self, phi: &Field) -> Field {
        match self.nonlinearity {
            Nonlinearity::None => Field::zeros(&self.grid),
            Nonlinearity::GinzburgLandau { eps, beta } => {
                let c = 1.0 / (eps * eps);
                phi.map(|p| c * p * (p * p - 1.0 - beta))
            }
            Nonlinearity::PhaseFieldCrystal { eps } => phi.map(|p| p * p * p - eps * p),
            Nonlinearity::Epitaxy { alpha, .. } => {
                let grads = self.gradients(phi);
                let g2 = self.gradient_squared(phi);
                let mut out = {
                    let lap = OperatorSymbol::minus_laplacian(&self.grid);
                    apply_multiplier_fn(phi, |k| alpha * lap.values()[k] * lap.values()[k])
                };
                for (axis, d) in grads.iter().enumerate() {
                    let q = Field::from_values_unchecked(
                        self.grid.clone(),
                        d.values()
                            .iter()
                            .zip(&g2)
                            .map(|(v, s)| v / (1.0 + s))
                            .collect(),
                    );
                    out.axpy(1.0, &derivative(&q, axis));
                }
                out
            }
        }
    }
}

impl GradientFlow for ModelSpec {
    type State = Field;

    fn inner(&self, a: &Field, b: &Field) -> f64 {
        dot(a, b)
    }

    fn apply_g(&self, x: &Field) -> Field {
        apply_multiplier(x, self.g.values())
    }

    fn apply_l(&self, x: &Field) -> Field {
        apply_multiplier(x, self.l.values())
    }

    fn solve_shifted(&self, c: f64, rhs: &Field) -> Field {
        let gl = &self.gl;
        apply_multiplier_fn(rhs, |k| 1.0 / (1.0 - c * gl[k]))
    }

    fn solve_shifted_g(&self, c: f64, b: &Field) -> Field {
        let (gl, g) = (&self.gl, self.g.values());
        apply_multiplier_fn(b, |k| g[k] / (1.0 - c * gl[k]))
    }

    fn solve_shifted_affine(&self, c_impl: f64, c_expl: f64, x: &Field) -> Field {
        let gl = &self.gl;
        apply_multiplier_fn(x, |k| (1.0 + c_expl * gl[k]) / (1.0 - c_impl * gl[k]))
    }

    fn nonlinear_energy(&self, phi: &Field) -> f64 {
        let mut e = self.pointwise_e1(phi);
        if let Some(ln2) = &self.explicit_part {
            e += 0.5 * dot(phi, &apply_multiplier(phi, ln2.values()));
        }
        e
    }

    fn shift(&self) -> f64 {
        self.shift
    }

    fn variational_derivative(&self, phi: &Field) -> Field {
        let mut u = self.pointwise_u(phi);
        if let Some(ln2) = &self.explicit_part {
            u.axpy(1.0, &apply_multiplier(phi, ln2.values()));
        }
        if self.dealias {
            dealias(&u)
        } else {
            u
        }
    }

    fn mass(&self, phi: &Field) -> f64 {
        phi.mean()
    }
}

/// Ginzburg–Landau family: `L = −Δ + β/ε²`, `G = −γ(−Δ)^s`. `s = 0` gives
/// Allen–Cahn, `s = 1` Cahn–Hilliard.
pub fn gl_model(grid: &Arc<Grid>, eps: f64, beta: f64, s: f64, gamma: f64) -> Result<ModelSpec> {
    positive("eps", eps)?;
    positive("beta", beta)?;
    positive("gamma", gamma)?;
    let lap = OperatorSymbol::minus_laplacian(grid);
    let l = lap.map(|k2| k2 + beta / (eps * eps));
    let g = OperatorSymbol::fractional_laplacian(grid, s)?.scaled(-gamma);
    let name = if s == 0.0 {
        "allen-cahn"
    } else if s == 1.0 {
        "cahn-hilliard"
    } else {
        "fractional-cahn-hilliard"
    };
    Ok(ModelSpec::new(name, l, g, Nonlinearity::GinzburgLandau { eps, beta })?.with_params(&[
        ("eps", eps),
        ("beta", beta),
        ("s", s),
        ("gamma", gamma),
    ]))
}

/// Nonlocal phase-field crystal: `L = (L_δ + 1)²`, `G = L_δ`.
pub fn npfc_model(grid: &Arc<Grid>, eps: f64, kernel: &KernelSpec) -> Result<ModelSpec> {
    require("eps", eps.is_finite(), "must be finite")?;
    let ld = OperatorSymbol::nonlocal(grid, kernel)?;
    let l = ld.map(|v| (v + 1.0) * (v + 1.0));
    Ok(
        ModelSpec::new("npfc", l, ld, Nonlinearity::PhaseFieldCrystal { eps })?.with_params(&[
            ("eps", eps),
            ("c1", kernel.c1),
            ("c2", kernel.c2),
            ("alpha1", kernel.alpha1),
            ("alpha2", kernel.alpha2),
            ("delta", kernel.delta),
        ]),
    )
}

/// Epitaxial growth without slope selection: `L = (η² − α)Δ²`, `G = −M`.
pub fn mbe_model(
    grid: &Arc<Grid>,
    eta2: f64,
    alpha: f64,
    mobility: f64,
    c0: f64,
) -> Result<ModelSpec> {
    positive("eta2", eta2)?;
    positive("mobility", mobility)?;
    positive("c0", c0)?;
    require(
        "alpha",
        alpha > 0.0 && alpha < eta2,
        format!("must lie in (0, eta2), got {alpha}"),
    )?;
    let lap = OperatorSymbol::minus_laplacian(grid);
    let l = lap.map(|k2| (eta2 - alpha) * k2 * k2);
    let g = OperatorSymbol::constant(grid, -mobility)?;
    Ok(
        ModelSpec::new("mbe", l, g, Nonlinearity::Epitaxy { alpha, c0 })?.with_params(&[
            ("eta2", eta2),
            ("alpha", alpha),
            ("mobility", mobility),
            ("c0", c0),
        ]),
    )
}

/// Moves a nonlocal quadratic form `½(φ, (L_{n1} + L_{n2})φ)` into a model:
/// `L_{n1}` joins the implicit operator, `L_{n2}` is handled through `E1`.
pub fn split_nonlocal(
    base: &ModelSpec,
    ln1: &OperatorSymbol,
    ln2: &OperatorSymbol,
) -> Result<ModelSpec> {
    let ln1 = ln1.clone().with_sign(SymbolSign::Nonnegative)?;
    let l = base.l.add(&ln1)?;
    let mut out = ModelSpec::new(base.name.clone(), l, base.g.clone(), base.nonlinearity.clone())?;
    out.explicit_part = match &base.explicit_part {
        Some(p) => Some(p.add(ln2)?),
        None => {
            if !same_grid(ln2.grid(), &base.grid) {
                return Err(SavError::GridMismatch("split_nonlocal"));
            }
            Some(ln2.clone())
        }
    };
    out.shift = base.shift;
    out.dealias = base.dealias;
    out.params = base.params.clone();
    Ok(out)
}

pub fn energy(model: &ModelSpec, phi: &Field) -> Result<EnergyReport> {
    if !same_grid(model.grid(), phi.grid()) {
        return Err(SavError::GridMismatch("energy"));
    }
    model.energy(phi)
}

pub fn variational_derivative(model: &ModelSpec, phi: &Field) -> Result<Field> {
    if !same_grid(model.grid(), phi.grid()) {
        return Err(SavError::GridMismatch("variational_derivative"));
    }
    Ok(model.variational_derivative(phi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{PI, TAU};

    fn smooth_random(grid: &Arc<Grid>, seed: u64, amp: f64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Field::zeros(grid);
        for _ in 0..6 {
            let (a, b, c): (f64, f64, f64) = (
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.0..TAU),
                rng.gen_range(0.0..TAU),
            );
            let (m, n) = (rng.gen_range(0..4) as f64, rng.gen_range(0..4) as f64);
            let g = Field::from_fn(grid, |x| {
                a * amp * ((m * x[0] + b).sin() + (n * x[1] + c).cos())
            });
            f.axpy(1.0, &g);
        }
        f
    }

    /// Central-difference check of `(U[φ], v)` against `E1`.
    fn gateaux_error(model: &ModelSpec, phi: &Field, v: &Field, h: f64) -> f64 {
        let mut plus = phi.clone();
        plus.axpy(h, v);
        let mut minus = phi.clone();
        minus.axpy(-h, v);
        let fd = (model.nonlinear_energy(&plus) - model.nonlinear_energy(&minus)) / (2.0 * h);
        let exact = dot(&model.variational_derivative(phi), v);
        (fd - exact).abs()
    }

    #[test]
    fn gl_examples() {
        let g = Grid::periodic(&[8, 8]).unwrap();
        let m = gl_model(&g, 0.1, 1.0, 1.0, 1.0).unwrap();
        let u = m.variational_derivative(&Field::constant(&g, 1.0));
        assert!(u.values().iter().all(|&v| (v + 100.0).abs() < 1e-10));
        let u = m.variational_derivative(&Field::constant(&g, 2.0));
        assert!(u.values().iter().all(|&v| (v - 400.0).abs() < 1e-10));
        let zero = Field::zeros(&g);
        assert!(m.variational_derivative(&zero).max_abs() == 0.0);
        let e1 = m.nonlinear_energy(&zero);
        assert!((e1 - 100.0 * 4.0 * PI * PI).abs() < 1e-9);
        assert!((e1 - 3947.842).abs() < 1e-3);
        let rep = energy(&m, &zero).unwrap();
        assert_eq!(rep.quadratic_part, 0.0);
        assert_eq!(rep.total, rep.quadratic_part + rep.e1_part);
        assert!((m.g_symbol().value_at(&[1, 1]).unwrap() + 2.0).abs() < 1e-14);
        assert!(m.conserves_mass());
        assert!(!gl_model(&g, 0.1, 1.0, 0.0, 1.0).unwrap().conserves_mass());
    }

    #[test]
    fn gl_energy_matches_direct_quadrature_of_tanh_circle() {
        let n = 128;
        let g = Grid::periodic(&[n, n]).unwrap();
        let (eps, beta) = (0.2, 1.0);
        let m = gl_model(&g, eps, beta, 0.0, 1.0).unwrap();
        let w = eps * 2f64.sqrt();
        let rad = |x: [f64; 3]| ((x[0] - PI).powi(2) + (x[1] - PI).powi(2)).sqrt();
        let phi = Field::from_fn(&g, |x| ((1.5 - rad(x)) / w).tanh());
        // ½|∇φ|² + (1/4ε²)(φ² − 1)² with the analytic gradient of the profile
        let h = TAU / n as f64;
        let direct: f64 = g
            .coordinates()
            .iter()
            .map(|&x| {
                let p = ((1.5 - rad(x)) / w).tanh();
                let dp = (1.0 - p * p) / w;
                0.5 * dp * dp + 0.25 / (eps * eps) * (p * p - 1.0).powi(2)
            })
            .sum::<f64>()
            * h
            * h;
        let constant = (2.0 * beta + beta * beta) / (4.0 * eps * eps) * g.volume();
        let model_total = m.original_energy(&phi) - constant;
        assert!(
            (model_total - direct).abs() < 1e-8 * direct,
            "{model_total} vs {direct}"
        );
    }

    #[test]
    fn npfc_constant_field_energy() {
        let g = Grid::new(&[16, 16], &[50.0, 50.0]).unwrap();
        let kernel = KernelSpec::default();
        let eps = 0.025;
        let m = npfc_model(&g, eps, &kernel).unwrap();
        assert!((m.l_symbol().values()[0] - 1.0).abs() < 1e-15);
        let pbar = 0.07;
        let phi = Field::constant(&g, pbar);
        // direct free energy: L_δ annihilates constants
        let direct = g.volume() * (0.25 * pbar.powi(4) + 0.5 * (1.0 - eps) * pbar * pbar);
        assert!((m.original_energy(&phi) - direct).abs() < 1e-12 * direct.abs().max(1.0));
        let rep = m.energy(&phi).unwrap();
        assert!(rep.e1_part.is_finite() && rep.e1_part > 0.0);
    }

    #[test]
    fn npfc_energy_matches_direct_free_energy() {
        let g = Grid::new(&[32, 32], &[50.0, 50.0]).unwrap();
        let eps = 0.025;
        let m = npfc_model(&g, eps, &KernelSpec::default()).unwrap();
        let q = TAU * 3.0 / 50.0;
        let phi = Field::from_fn(&g, |x| 0.07 + 0.1 * (q * x[0]).cos() * (q * x[1]).cos());
        let ld = m.g_symbol();
        let lphi = apply_multiplier(&phi, ld.values());
        let direct: f64 = phi
            .values()
            .iter()
            .zip(lphi.values())
            .map(|(&p, &lp)| {
                0.25 * p.powi(4) + 0.5 * (1.0 - eps) * p * p + p * lp + 0.5 * lp * lp
            })
            .sum::<f64>()
            * g.cell_volume();
        assert!((m.original_energy(&phi) - direct).abs() < 1e-12 * direct.abs());
    }

    #[test]
    fn mbe_examples() {
        let g = Grid::periodic(&[64]).unwrap();
        let (alpha, c0) = (0.5, 3.0);
        let m = mbe_model(&g, 1.0, alpha, 1.0, c0).unwrap();
        let zero = Field::zeros(&g);
        assert_eq!(m.nonlinear_energy(&zero), c0);
        assert_eq!(m.variational_derivative(&zero).max_abs(), 0.0);

        // dense 1-D quadrature of −½ ln(1 + sin²x) + (α/2) cos²x
        let phi = Field::from_fn(&g, |x| x[0].cos());
        let n = 20000;
        let h = TAU / n as f64;
        let quad: f64 = (0..n)
            .map(|j| {
                let x = j as f64 * h;
                -0.5 * x.sin().powi(2).ln_1p() + 0.5 * alpha * x.cos().powi(2)
            })
            .sum::<f64>()
            * h;
        assert!((m.nonlinear_energy(&phi) - (quad + c0)).abs() < 1e-10);

        // small amplitude: U ≈ α φ_xxxx + φ_xx = (α − 1) φ
        let a = 1e-6;
        let phi = Field::from_fn(&g, |x| a * x[0].cos());
        let u = m.variational_derivative(&phi);
        for (x, v) in g.coordinates().iter().zip(u.values()) {
            assert!((v - (alpha - 1.0) * a * x[0].cos()).abs() < 1e-15);
        }
        assert!(mbe_model(&g, 1.0, 1.5, 1.0, 1.0).is_err());
    }

    fn all_models() -> Vec<(ModelSpec, f64)> {
        let g2 = Grid::periodic(&[16, 16]).unwrap();
        let pfc_grid = Grid::new(&[16, 16], &[50.0, 50.0]).unwrap();
        vec![
            (gl_model(&g2, 0.3, 1.0, 0.0, 1.0).unwrap(), 0.5),
            (gl_model(&g2, 0.3, 1.0, 1.0, 1.0).unwrap(), 0.5),
            (gl_model(&g2, 0.3, 1.0, 0.5, 1.0).unwrap(), 0.5),
            (npfc_model(&pfc_grid, 0.025, &KernelSpec::default()).unwrap(), 0.3),
            (mbe_model(&g2, 1.0, 0.5, 1.0, 1.0).unwrap(), 0.3),
        ]
    }

    #[test]
    fn gateaux_identity_is_second_order() {
        for (m, amp) in all_models() {
            for seed in 0..10 {
                let phi = smooth_random(m.grid(), seed, amp);
                let v = smooth_random(m.grid(), 100 + seed, 1.0);
                let e3 = gateaux_error(&m, &phi, &v, 1e-3);
                let e4 = gateaux_error(&m, &phi, &v, 1e-4);
                let ratio = e3 / e4;
                assert!(
                    (50.0..=200.0).contains(&ratio),
                    "{} seed {seed}: {e3:e} {e4:e}",
                    m.name()
                );
            }
        }
    }

    #[test]
    fn symbols_have_required_signs() {
        for (m, _) in all_models() {
            assert!(m.l_symbol().values().iter().all(|&v| v >= -1e-12));
            assert!(m.g_symbol().values().iter().all(|&v| v <= 1e-12));
        }
    }

    #[test]
    fn split_invariance() {
        let g = Grid::periodic(&[16, 16]).unwrap();
        let base = gl_model(&g, 0.3, 1.0, 1.0, 1.0).unwrap();
        let kernel = KernelSpec::default();
        let ln = OperatorSymbol::nonlocal(&g, &kernel).unwrap().scaled(-0.5);
        let zero = OperatorSymbol::zero(&g);
        let implicit = split_nonlocal(&base, &ln, &zero).unwrap();
        let explicit = split_nonlocal(&base, &zero, &ln).unwrap();
        let half = ln.scaled(0.5);
        let mixed = split_nonlocal(&base, &half, &half).unwrap();
        for seed in 0..10 {
            let phi = smooth_random(&g, seed, 0.7);
            let e = implicit.energy(&phi).unwrap().total;
            for other in [&explicit, &mixed] {
                let o = other.energy(&phi).unwrap().total;
                assert!((e - o).abs() <= 1e-10 * e.abs());
            }
            let u = implicit.variational_derivative(&phi);
            let u0 = base.variational_derivative(&phi);
            assert!(u.values().iter().zip(u0.values()).all(|(a, b)| a == b));
        }
        assert!(split_nonlocal(&base, &ln.scaled(-1.0), &zero).is_err());
    }

    #[test]
    fn constant_coefficient_solve_by_mode() {
        let g = Grid::periodic(&[8, 8]).unwrap();
        let m = gl_model(&g, 1.0, 1.0, 0.0, 1.0).unwrap();
        let b = Field::from_fn(&g, |x| x[0].cos());
        let x = m.solve_shifted(0.1, &b);
        for (a, v) in x.values().iter().zip(b.values()) {
            assert!((a - v / 1.2).abs() < 1e-14);
        }
        let ch = gl_model(&g, 1.0, 1.0, 1.0, 1.0).unwrap();
        let c = Field::constant(&g, 0.3);
        let x = ch.solve_shifted(5.0, &c);
        assert!(x.values().iter().all(|v| (v - 0.3).abs() < 1e-15));
    }
}
