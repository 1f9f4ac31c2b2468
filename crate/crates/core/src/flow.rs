//! Abstract gradient flow `φ_t = G μ`, `μ = Lφ + U[φ]`, with the energy split
//! `E = ½(φ, Lφ) + E1[φ]`. The SAV integrators are written against this trait
//! so the same step code serves scalar, multi-component and tensor states.

use crate::error::{Result, SavError};
use crate::spectral::Field;

/// Linear-space operations needed by the integrators.
pub trait Vector: Clone + Send + Sync {
    /// `self += a * x`
    fn axpy(&mut self, a: f64, x: &Self);
    fn scale(&mut self, a: f64);
    fn max_abs(&self) -> f64;
    fn all_finite(&self) -> bool;
    /// Number of real unknowns.
    fn flat_len(&self) -> usize;
    fn to_flat(&self) -> Vec<f64>;
    /// A vector shaped like `self` holding `data`.
    fn from_flat_like(&self, data: &[f64]) -> Self;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.scale(0.0);
        z
    }

    /// `Σ c_i x_i`; `terms` must be nonempty.
    fn lincomb(terms: &[(f64, &Self)]) -> Self {
        let (c0, x0) = terms[0];
        let mut out = x0.clone();
        out.scale(c0);
        for &(c, x) in &terms[1..] {
            out.axpy(c, x);
        }
        out
    }
}

impl Vector for Field {
    fn axpy(&mut self, a: f64, x: &Self) {
        Field::axpy(self, a, x)
    }

    fn scale(&mut self, a: f64) {
        Field::scale(self, a)
    }

    fn max_abs(&self) -> f64 {
        Field::max_abs(self)
    }

    fn all_finite(&self) -> bool {
        self.is_finite()
    }

    fn flat_len(&self) -> usize {
        self.values().len()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.values().to_vec()
    }

    fn from_flat_like(&self, data: &[f64]) -> Self {
        Field::from_values_unchecked(self.grid().clone(), data.to_vec())
    }
}

/// Energy decomposition `total = quadratic_part + e1_part`, where `e1_part`
/// includes the positivity shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyReport {
    pub quadratic_part: f64,
    pub e1_part: f64,
    pub total: f64,
}

pub trait GradientFlow: Send + Sync {
    type State: Vector;

    /// The `L²(Ω)` inner product on states.
    fn inner(&self, a: &Self::State, b: &Self::State) -> f64;
    fn apply_g(&self, x: &Self::State) -> Self::State;
    fn apply_l(&self, x: &Self::State) -> Self::State;
    /// `(I − c G L)⁻¹ rhs` for `c ≥ 0`.
    fn solve_shifted(&self, c: f64, rhs: &Self::State) -> Self::State;
    /// `E1[φ]` without the shift.
    fn nonlinear_energy(&self, x: &Self::State) -> f64;
    /// Positive constant added to `E1` under the square root.
    fn shift(&self) -> f64;
    /// `U[φ] = δE1/δφ`.
    fn variational_derivative(&self, x: &Self::State) -> Self::State;

    /// Conserved-quantity diagnostic written to ledgers.
    fn mass(&self, _x: &Self::State) -> f64 {
        0.0
    }

    /// `(I − c G L)⁻¹ G b`.
    fn solve_shifted_g(&self, c: f64, b: &Self::State) -> Self::State {
        self.solve_shifted(c, &self.apply_g(b))
    }

    /// `(I − c_impl G L)⁻¹ (I + c_expl G L) x`.
    fn solve_shifted_affine(&self, c_impl: f64, c_expl: f64, x: &Self::State) -> Self::State {
        let mut rhs = x.clone();
        rhs.axpy(c_expl, &self.apply_g(&self.apply_l(x)));
        self.solve_shifted(c_impl, &rhs)
    }

    fn quadratic_energy(&self, x: &Self::State) -> f64 {
        0.5 * self.inner(x, &self.apply_l(x))
    }

    fn energy(&self, x: &Self::State) -> Result<EnergyReport> {
        let quadratic_part = self.quadratic_energy(x);
        let e1_part = self.nonlinear_energy(x) + self.shift();
        let total = quadratic_part + e1_part;
        if !total.is_finite() {
            return Err(SavError::NonFinite("energy"));
        }
        Ok(EnergyReport {
            quadratic_part,
            e1_part,
            total,
        })
    }

    /// Original energy `½(φ, Lφ) + E1[φ]` without the shift.
    fn original_energy(&self, x: &Self::State) -> f64 {
        self.quadratic_energy(x) + self.nonlinear_energy(x)
    }

    /// `√(E1[φ] + shift)`, rejecting nonpositive arguments.
    fn sav_variable(&self, x: &Self::State) -> Result<f64> {
        let value = self.nonlinear_energy(x) + self.shift();
        if !value.is_finite() {
            return Err(SavError::NonFinite("nonlinear energy"));
        }
        if value <= 0.0 {
            return Err(SavError::NonPositiveEnergy { value });
        }
        Ok(value.sqrt())
    }
}
