//! Vector-valued gradient flows.
//!
//! [`CoupledModel`] carries the quadratic energy `½ Σ d_ij (φ_i, Lφ_j)` with
//! a symmetric positive definite coupling `D`; its constant-coefficient solves
//! decouple after rotating into the eigenbasis of `D`. [`QTensorModel`] is the
//! Landau–de Gennes relaxation written in the five independent components of a
//! symmetric traceless tensor, with one 5×5 solve per Fourier mode.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use log::warn;
use nalgebra::{SMatrix, SVector};
use num_complex::Complex64;

use crate::error::{invalid, Result, SavError};
use crate::flow::{GradientFlow, Vector};
use crate::sav::{CnPredictor, SavState};
use crate::spectral::{
    apply_multiplier, apply_multiplier_fn, derivative, dot, read_snapshot_from, same_grid,
    transform_forward, write_snapshot_to, Field, Grid, OperatorSymbol, SpectralField, SymbolSign,
};

const JACOBI_TOL: f64 = 1e-14;

/// Symmetric positive definite `k×k` matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingMatrix {
    k: usize,
    entries: Vec<f64>,
}

impl CouplingMatrix {
    pub fn new(k: usize, entries: Vec<f64>) -> Result<Self> {
        if k == 0 || entries.len() != k * k {
            return Err(SavError::NotPositiveDefinite(format!(
                "expected {} entries for k = {k}",
                k * k
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(SavError::NonFinite("coupling matrix"));
        }
        for i in 0..k {
            for j in 0..i {
                if (entries[i * k + j] - entries[j * k + i]).abs() > 1e-14 {
                    return Err(SavError::NotPositiveDefinite(format!(
                        "entries ({i},{j}) and ({j},{i}) differ"
                    )));
                }
            }
        }
        let m = CouplingMatrix { k, entries };
        let (_, lambda) = jacobi(&m);
        if lambda[0] <= 0.0 {
            return Err(SavError::NotPositiveDefinite(format!(
                "smallest eigenvalue {:e}",
                lambda[0]
            )));
        }
        Ok(m)
    }

    pub fn identity(k: usize) -> Self {
        let mut entries = vec![0.0; k * k];
        for i in 0..k {
            entries[i * k + i] = 1.0;
        }
        CouplingMatrix { k, entries }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.k + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

/// Orthonormal eigenvectors (columns of a row-major `k×k` matrix) and
/// ascending eigenvalues with `D = E Λ Eᵀ`.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    pub vectors: Vec<f64>,
    pub values: Vec<f64>,
}

pub fn eigen_decompose(d: &CouplingMatrix) -> EigenDecomposition {
    let (vectors, values) = jacobi(d);
    EigenDecomposition { vectors, values }
}

/// Cyclic Jacobi rotations, sweeping until the off-diagonal mass is below
/// `JACOBI_TOL` relative to the Frobenius norm.
fn jacobi(d: &CouplingMatrix) -> (Vec<f64>, Vec<f64>) {
    let k = d.k;
    let mut a = d.entries.clone();
    let mut v = CouplingMatrix::identity(k).entries;
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _ in 0..100 {
        let off: f64 = (0..k)
            .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * k + j] * a[i * k + j])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * norm {
            break;
        }
        for p in 0..k {
            for q in p + 1..k {
                let apq = a[p * k + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * k + q] - a[p * k + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..k {
                    let (arp, arq) = (a[r * k + p], a[r * k + q]);
                    a[r * k + p] = c * arp - s * arq;
                    a[r * k + q] = s * arp + c * arq;
                }
                for r in 0..k {
                    let (apr, aqr) = (a[p * k + r], a[q * k + r]);
                    a[p * k + r] = c * apr - s * aqr;
                    a[q * k + r] = s * apr + c * aqr;
                }
                for r in 0..k {
                    let (vrp, vrq) = (v[r * k + p], v[r * k + q]);
                    v[r * k + p] = c * vrp - s * vrq;
                    v[r * k + q] = s * vrp + c * vrq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| a[i * k + i].total_cmp(&a[j * k + j]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * k + i]).collect();
    let mut vectors = vec![0.0; k * k];
    for (col, &src) in order.iter().enumerate() {
        // fix the sign so the largest component of each eigenvector is positive
        let big = (0..k)
            .max_by(|&x, &y| v[x * k + src].abs().total_cmp(&v[y * k + src].abs()))
            .unwrap();
        let sign = if v[big * k + src] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..k {
            vectors[r * k + col] = sign * v[r * k + src];
        }
    }
    (vectors, values)
}

/// `k` component fields on one grid.
#[derive(Clone, Debug)]
pub struct MultiField {
    components: Vec<Field>,
}

impl MultiField {
    pub fn new(components: Vec<Field>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| invalid("components", "need at least one field"))?;
        for c in &components[1..] {
            if !same_grid(first.grid(), c.grid()) {
                return Err(SavError::GridMismatch("multi-field components"));
            }
        }
        Ok(MultiField { components })
    }

    pub fn components(&self) -> &[Field] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &Field {
        &self.components[i]
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.components[0].grid()
    }

    /// Component-mixing `ψ_i = Σ_j m_ij φ_j` with a row-major `k×k` matrix.
    fn mix(&self, m: &[f64], transpose: bool) -> MultiField {
        let k = self.components.len();
        let components = (0..k)
            .map(|i| {
                let terms: Vec<(f64, &Field)> = (0..k)
                    .map(|j| {
                        let c = if transpose { m[j * k + i] } else { m[i * k + j] };
                        (c, &self.components[j])
                    })
                    .collect();
                Field::lincomb(&terms)
            })
            .collect();
        MultiField { components }
    }
}

impl Vector for MultiField {
    fn axpy(&mut self, a: f64, x: &Self) {
        for (s, o) in self.components.iter_mut().zip(&x.components) {
            s.axpy(a, o);
        }
    }

    fn scale(&mut self, a: f64) {
        self.components.iter_mut().for_each(|c| c.scale(a));
    }

    fn max_abs(&self) -> f64 {
        self.components.iter().fold(0.0, |m, c| m.max(c.max_abs()))
    }

    fn all_finite(&self) -> bool {
        self.components.iter().all(|c| c.is_finite())
    }

    fn flat_len(&self) -> usize {
        self.components.iter().map(|c| c.values().len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.components
            .iter()
            .flat_map(|c| c.values().iter().copied())
            .collect()
    }

    fn from_flat_like(&self, data: &[f64]) -> Self {
        let n = self.components[0].values().len();
        MultiField {
            components: self
                .components
                .iter()
                .enumerate()
                .map(|(i, c)| c.from_flat_like(&data[i * n..(i + 1) * n]))
                .collect(),
        }
    }
}

/// Coupled Ginzburg–Landau system:
/// `E = ½ Σ d_ij (φ_i, Lφ_j) + Σ_i (1/4ε²)∫(φ_i² − 1 − β)² + (χ/2) Σ_{i<j} ∫φ_i²φ_j²`.
#[derive(Clone, Debug)]
pub struct CoupledModel {
    grid: Arc<Grid>,
    d: CouplingMatrix,
    eigen: EigenDecomposition,
    l: OperatorSymbol,
    g: OperatorSymbol,
    gl: Vec<f64>,
    eps: f64,
    beta: f64,
    chi: f64,
    shift: f64,
}

impl CoupledModel {
    pub fn new(
        d: CouplingMatrix,
        l: OperatorSymbol,
        g: OperatorSymbol,
        eps: f64,
        beta: f64,
        chi: f64,
    ) -> Result<Self> {
        if !same_grid(l.grid(), g.grid()) {
            return Err(SavError::GridMismatch("coupled model symbols"));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(invalid("eps", "must be positive"));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(invalid("beta", format!("must be positive, got {beta}")));
        }
        if !(chi >= 0.0 && chi.is_finite()) {
            return Err(invalid("chi", "must be nonnegative"));
        }
        let l = l.with_sign(SymbolSign::Nonnegative)?;
        let g = g.with_sign(SymbolSign::Nonpositive)?;
        let gl = l.values().iter().zip(g.values()).map(|(a, b)| a * b).collect();
        let eigen = eigen_decompose(&d);
        Ok(CoupledModel {
            grid: l.grid().clone(),
            d,
            eigen,
            l,
            g,
            gl,
            eps,
            beta,
            chi,
            shift: 1.0,
        })
    }

    /// `L = −Δ + β/ε²`, `G = −γ(−Δ)^s` shared by all components.
    pub fn ginzburg_landau(
        grid: &Arc<Grid>,
        d: CouplingMatrix,
        eps: f64,
        beta: f64,
        s: f64,
        gamma: f64,
        chi: f64,
    ) -> Result<Self> {
        let l = OperatorSymbol::minus_laplacian(grid).map(|k2| k2 + beta / (eps * eps));
        let g = OperatorSymbol::fractional_laplacian(grid, s)?.scaled(-gamma);
        Self::new(d, l, g, eps, beta, chi)
    }

    pub fn with_shift(mut self, shift: f64) -> Result<Self> {
        if !(shift > 0.0 && shift.is_finite()) {
            return Err(invalid("shift_delta", "must be positive"));
        }
        self.shift = shift;
        Ok(self)
    }

    pub fn coupling(&self) -> &CouplingMatrix {
        &self.d
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn k(&self) -> usize {
        self.d.k()
    }
}

impl GradientFlow for CoupledModel {
    type State = MultiField;

    fn inner(&self, a: &MultiField, b: &MultiField) -> f64 {
        a.components
            .iter()
            .zip(&b.components)
            .map(|(x, y)| dot(x, y))
            .sum()
    }

    fn apply_g(&self, x: &MultiField) -> MultiField {
        MultiField {
            components: x
                .components
                .iter()
                .map(|c| apply_multiplier(c, self.g.values()))
                .collect(),
        }
    }

    fn apply_l(&self, x: &MultiField) -> MultiField {
        let lx = MultiField {
            components: x
                .components
                .iter()
                .map(|c| apply_multiplier(c, self.l.values()))
                .collect(),
        };
        lx.mix(self.d.entries(), false)
    }

    fn solve_shifted(&self, c: f64, rhs: &MultiField) -> MultiField {
        // (I − c G L D) ψ = rhs  ⇔  ψ̃_i − c λ_i G L ψ̃_i = (Eᵀ rhs)_i
        let rotated = rhs.mix(&self.eigen.vectors, true);
        let gl = &self.gl;
        let solved = MultiField {
            components: rotated
                .components
                .iter()
                .zip(&self.eigen.values)
                .map(|(f, &lam)| apply_multiplier_fn(f, |k| 1.0 / (1.0 - c * lam * gl[k])))
                .collect(),
        };
        solved.mix(&self.eigen.vectors, false)
    }

    fn nonlinear_energy(&self, x: &MultiField) -> f64 {
        let n = self.grid.len();
        let c = 0.25 / (self.eps * self.eps);
        let mut total = 0.0;
        for p in 0..n {
            let mut sq = 0.0;
            let mut cross = 0.0;
            for comp in &x.components {
                let v = comp.values()[p];
                let w = v * v - 1.0 - self.beta;
                total += c * w * w;
                cross += sq * v * v;
                sq += v * v;
            }
            total += 0.5 * self.chi * cross;
        }
        total * self.grid.cell_volume()
    }

    fn shift(&self) -> f64 {
        self.shift
    }

    fn variational_derivative(&self, x: &MultiField) -> MultiField {
        let n = self.grid.len();
        let c = 1.0 / (self.eps * self.eps);
        let mut sum_sq = vec![0.0; n];
        for comp in &x.components {
            for (s, v) in sum_sq.iter_mut().zip(comp.values()) {
                *s += v * v;
            }
        }
        MultiField {
            components: x
                .components
                .iter()
                .map(|comp| {
                    let values = comp
                        .values()
                        .iter()
                        .zip(&sum_sq)
                        .map(|(&v, &s)| {
                            c * v * (v * v - 1.0 - self.beta) + self.chi * v * (s - v * v)
                        })
                        .collect();
                    Field::from_values_unchecked(self.grid.clone(), values)
                })
                .collect(),
        }
    }

    fn mass(&self, x: &MultiField) -> f64 {
        x.components.iter().map(|c| c.mean()).sum()
    }
}

/// One SAV/CN step of a coupled system.
pub fn step_cn_multi(
    model: &CoupledModel,
    state: &SavState<MultiField>,
    predictor: CnPredictor,
) -> Result<SavState<MultiField>> {
    crate::sav::step_cn(model, state, predictor)
}

/// Components of a symmetric traceless 3×3 tensor field in the chart
/// `(Q11, Q22, Q12, Q13, Q23)`; `Q33 = −Q11 − Q22`.
#[derive(Clone, Debug)]
pub struct QTensorField {
    components: [Field; 5],
}

impl QTensorField {
    pub fn new(components: [Field; 5]) -> Result<Self> {
        let g = components[0].grid();
        if g.dim() != 3 {
            return Err(SavError::InvalidGrid("Q-tensor fields live on 3-D grids".into()));
        }
        for c in &components[1..] {
            if !same_grid(g, c.grid()) {
                return Err(SavError::GridMismatch("Q-tensor components"));
            }
        }
        Ok(QTensorField { components })
    }

    pub fn zeros(grid: &Arc<Grid>) -> Result<Self> {
        Self::new(std::array::from_fn(|_| Field::zeros(grid)))
    }

    /// Spatially constant tensor from its full 3×3 matrix (symmetric part of
    /// the traceless projection).
    pub fn constant(grid: &Arc<Grid>, q: [[f64; 3]; 3]) -> Result<Self> {
        let tr = (q[0][0] + q[1][1] + q[2][2]) / 3.0;
        let x = [
            q[0][0] - tr,
            q[1][1] - tr,
            0.5 * (q[0][1] + q[1][0]),
            0.5 * (q[0][2] + q[2][0]),
            0.5 * (q[1][2] + q[2][1]),
        ];
        Self::new(std::array::from_fn(|i| Field::constant(grid, x[i])))
    }

    pub fn components(&self) -> &[Field; 5] {
        &self.components
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.components[0].grid()
    }

    /// Full tensor at grid point `p`.
    pub fn tensor_at(&self, p: usize) -> [[f64; 3]; 3] {
        chart_to_tensor(&std::array::from_fn(|i| self.components[i].values()[p]))
    }
}

pub fn chart_to_tensor(x: &[f64; 5]) -> [[f64; 3]; 3] {
    [
        [x[0], x[2], x[3]],
        [x[2], x[1], x[4]],
        [x[3], x[4], -x[0] - x[1]],
    ]
}

pub fn tensor_to_chart(q: &[[f64; 3]; 3]) -> [f64; 5] {
    [q[0][0], q[1][1], q[0][1], q[0][2], q[1][2]]
}

/// Frobenius inner product `A : B` in chart coordinates.
pub fn chart_inner(a: &[f64; 5], b: &[f64; 5]) -> f64 {
    2.0 * a[0] * b[0] + a[0] * b[1] + a[1] * b[0] + 2.0 * a[1] * b[1]
        + 2.0 * (a[2] * b[2] + a[3] * b[3] + a[4] * b[4])
}

impl Vector for QTensorField {
    fn axpy(&mut self, a: f64, x: &Self) {
        for (s, o) in self.components.iter_mut().zip(&x.components) {
            s.axpy(a, o);
        }
    }

    fn scale(&mut self, a: f64) {
        self.components.iter_mut().for_each(|c| c.scale(a));
    }

    fn max_abs(&self) -> f64 {
        self.components.iter().fold(0.0, |m, c| m.max(c.max_abs()))
    }

    fn all_finite(&self) -> bool {
        self.components.iter().all(|c| c.is_finite())
    }

    fn flat_len(&self) -> usize {
        5 * self.components[0].values().len()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.components
            .iter()
            .flat_map(|c| c.values().iter().copied())
            .collect()
    }

    fn from_flat_like(&self, data: &[f64]) -> Self {
        let n = self.components[0].values().len();
        QTensorField {
            components: std::array::from_fn(|i| {
                self.components[i].from_flat_like(&data[i * n..(i + 1) * n])
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QTensorParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub a1: f64,
    pub c0: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl Default for QTensorParams {
    fn default() -> Self {
        let a = -0.2;
        QTensorParams {
            a,
            b: 1.0,
            c: 1.0,
            a1: a + 1.0,
            c0: 1.0,
            l1: 1.0,
            l2: 0.5,
            l3: 0.5,
        }
    }
}

impl QTensorParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.a, self.b, self.c, self.a1, self.c0, self.l1, self.l2, self.l3,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(SavError::NonFinite("Q-tensor parameters"));
        }
        if self.c <= 0.0 {
            return Err(invalid("c", "must be positive"));
        }
        if self.l1 <= 0.0 || self.l1 + self.l2 + self.l3 <= 0.0 {
            return Err(invalid("L1", "need L1 > 0 and L1 + L2 + L3 > 0"));
        }
        if self.a1 <= 0.0 || self.c0 <= 0.0 {
            return Err(invalid("a1", "a1 and C0 must be positive"));
        }
        Ok(())
    }
}

type Mat5 = SMatrix<f64, 5, 5>;
type Vec5 = SVector<f64, 5>;

/// Fourier symbol of the anisotropic elastic term
/// `Q ↦ k_i (Qk)_j + k_j (Qk)_i − ⅔ (k·Qk) δ_ij` in chart coordinates.
pub fn elastic_symbol(k: [f64; 3]) -> Mat5 {
    let [k1, k2, k3] = k;
    let (a, b) = (4.0 / 3.0, 2.0 / 3.0);
    Mat5::from_row_slice(&[
        a * k1 * k1 + b * k3 * k3,
        -b * k2 * k2 + b * k3 * k3,
        b * k1 * k2,
        b * k1 * k3,
        -a * k2 * k3,
        //
        -b * k1 * k1 + b * k3 * k3,
        a * k2 * k2 + b * k3 * k3,
        b * k1 * k2,
        -a * k1 * k3,
        b * k2 * k3,
        //
        k1 * k2,
        k1 * k2,
        k1 * k1 + k2 * k2,
        k2 * k3,
        k1 * k3,
        //
        0.0,
        -k1 * k3,
        k2 * k3,
        k1 * k1 + k3 * k3,
        k1 * k2,
        //
        -k2 * k3,
        0.0,
        k1 * k3,
        k1 * k2,
        k2 * k2 + k3 * k3,
    ])
}

/// Symbol of `𝓛 = a1 + δE_e/δQ` at wavevector `k`.
fn operator_symbol(k: [f64; 3], p: &QTensorParams) -> Mat5 {
    operator_symbol_split(k, k, p)
}

/// As [`operator_symbol`], with the anisotropic part evaluated at `k_odd`.
fn operator_symbol_split(k: [f64; 3], k_odd: [f64; 3], p: &QTensorParams) -> Mat5 {
    let k2 = k.iter().map(|x| x * x).sum::<f64>();
    Mat5::identity() * (p.a1 + p.l1 * k2) + elastic_symbol(k_odd) * (0.5 * (p.l2 + p.l3))
}

/// `I + λ𝓛` at wavevector `k`, checked for invertibility.
pub fn qtensor_mode_matrix(k: [f64; 3], lambda: f64, p: &QTensorParams) -> Result<Mat5> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid("lambda", "must be positive"));
    }
    let m = Mat5::identity() + operator_symbol(k, p) * lambda;
    let singular = || SavError::SingularMode(k.map(|x| x.round() as i64));
    let inv = m.try_inverse().ok_or_else(singular)?;
    let cond = m.norm() * inv.norm();
    if !cond.is_finite() || cond > 1e14 {
        return Err(singular());
    }
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct QTensorModel {
    grid: Arc<Grid>,
    params: QTensorParams,
    /// Per mode: the wavevector, and the same with Nyquist components
    /// zeroed for the mixed-derivative products.
    wavevectors: Vec<([f64; 3], [f64; 3])>,
    shift: f64,
}

impl QTensorModel {
    pub fn new(grid: &Arc<Grid>, params: QTensorParams) -> Result<Self> {
        params.validate()?;
        if grid.dim() != 3 {
            return Err(SavError::InvalidGrid("Q-tensor model needs a 3-D grid".into()));
        }
        Ok(QTensorModel {
            grid: grid.clone(),
            params,
            wavevectors: grid
                .wavevectors()
                .into_iter()
                .enumerate()
                .map(|(mode, k)| {
                    let idx = grid.unravel(mode);
                    let odd = std::array::from_fn(|a| {
                        if grid.is_nyquist(a, idx[a]) {
                            0.0
                        } else {
                            k[a]
                        }
                    });
                    (k, odd)
                })
                .collect(),
            shift: 1.0,
        })
    }

    pub fn with_shift(mut self, shift: f64) -> Result<Self> {
        if !(shift > 0.0 && shift.is_finite()) {
            return Err(invalid("shift_delta", "must be positive"));
        }
        self.shift = shift;
        Ok(self)
    }

    pub fn params(&self) -> &QTensorParams {
        &self.params
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// `f_b(Q) = (a/2) tr Q² − (b/3) tr Q³ + (c/4)(tr Q²)²` at one point.
    pub fn bulk_density(&self, x: &[f64; 5]) -> f64 {
        let q = chart_to_tensor(x);
        let (t2, t3) = traces(&q);
        let p = &self.params;
        0.5 * p.a * t2 - p.b / 3.0 * t3 + 0.25 * p.c * t2 * t2
    }

    /// Traceless projection of `∂f_b/∂Q` at one point, in chart form.
    pub fn bulk_derivative(&self, x: &[f64; 5]) -> [f64; 5] {
        let q = chart_to_tensor(x);
        let q2 = matmul(&q, &q);
        let (t2, _) = traces(&q);
        let p = &self.params;
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let delta = if i == j { t2 / 3.0 } else { 0.0 };
                out[i][j] = p.a * q[i][j] - p.b * (q2[i][j] - delta) + p.c * t2 * q[i][j];
            }
        }
        tensor_to_chart(&out)
    }

    fn shifted_density(&self, x: &[f64; 5]) -> f64 {
        let (t2, _) = traces(&chart_to_tensor(x));
        self.bulk_density(x) - 0.5 * self.params.a1 * t2 + self.params.c0
    }

    /// Doubles `C0` until the shifted bulk density is positive at every grid
    /// point of `q`. Returns the number of doublings.
    pub fn ensure_positive_density(&mut self, q: &QTensorField) -> usize {
        let mut bumps = 0;
        loop {
            let min = (0..self.grid.len())
                .map(|p| self.shifted_density(&point(q, p)))
                .fold(f64::INFINITY, f64::min);
            if min > 0.0 || bumps >= 60 {
                return bumps;
            }
            self.params.c0 *= 2.0;
            bumps += 1;
            warn!(
                "shifted bulk density {min:e} not positive; C0 doubled to {}",
                self.params.c0
            );
        }
    }

    fn map_modes(
        &self,
        x: &QTensorField,
        f: impl Fn([f64; 3], [f64; 3]) -> Option<Mat5>,
    ) -> QTensorField {
        let spectra: Vec<SpectralField> = x.components.iter().map(transform_forward).collect();
        let n = self.grid.len();
        let mut out: Vec<Vec<Complex64>> = vec![vec![Complex64::default(); n]; 5];
        for (mode, &(k, k_odd)) in self.wavevectors.iter().enumerate() {
            let re = Vec5::from_fn(|i, _| spectra[i].coeffs()[mode].re);
            let im = Vec5::from_fn(|i, _| spectra[i].coeffs()[mode].im);
            let (yr, yi) = match f(k, k_odd) {
                Some(m) => (m * re, m * im),
                None => (re, im),
            };
            for i in 0..5 {
                out[i][mode] = Complex64::new(yr[i], yi[i]);
            }
        }
        let mut it = out.into_iter();
        QTensorField {
            components: std::array::from_fn(|_| {
                let coeffs = it.next().unwrap();
                SpectralField::new(self.grid.clone(), coeffs)
                    .unwrap()
                    .to_field_with_residue()
                    .0
            }),
        }
    }
}

fn point(q: &QTensorField, p: usize) -> [f64; 5] {
    std::array::from_fn(|i| q.components[i].values()[p])
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// `(tr Q², tr Q³)`
fn traces(q: &[[f64; 3]; 3]) -> (f64, f64) {
    let q2 = matmul(q, q);
    let t2 = q2[0][0] + q2[1][1] + q2[2][2];
    let q3 = matmul(&q2, q);
    (t2, q3[0][0] + q3[1][1] + q3[2][2])
}

impl GradientFlow for QTensorModel {
    type State = QTensorField;

    fn inner(&self, a: &QTensorField, b: &QTensorField) -> f64 {
        let [a11, a22, a12, a13, a23] = &a.components;
        let [b11, b22, b12, b13, b23] = &b.components;
        2.0 * dot(a11, b11) + dot(a11, b22) + dot(a22, b11) + 2.0 * dot(a22, b22)
            + 2.0 * (dot(a12, b12) + dot(a13, b13) + dot(a23, b23))
    }

    fn apply_g(&self, x: &QTensorField) -> QTensorField {
        let mut out = x.clone();
        out.scale(-1.0);
        out
    }

    fn apply_l(&self, x: &QTensorField) -> QTensorField {
        let p = self.params;
        self.map_modes(x, |k, k_odd| Some(operator_symbol_split(k, k_odd, &p)))
    }

    fn solve_shifted(&self, c: f64, rhs: &QTensorField) -> QTensorField {
        if c == 0.0 {
            return rhs.clone();
        }
        let p = self.params;
        self.map_modes(rhs, |k, k_odd| {
            let m = Mat5::identity() + operator_symbol_split(k, k_odd, &p) * c;
            // I + c𝓛 is positive definite in the Frobenius metric
            Some(m.try_inverse().expect("mode matrix is invertible for valid parameters"))
        })
    }

    fn nonlinear_energy(&self, x: &QTensorField) -> f64 {
        let s: f64 = (0..self.grid.len())
            .map(|p| self.shifted_density(&point(x, p)))
            .sum();
        s * self.grid.cell_volume()
    }

    fn shift(&self) -> f64 {
        self.shift
    }

    fn variational_derivative(&self, x: &QTensorField) -> QTensorField {
        let n = self.grid.len();
        let mut out: [Vec<f64>; 5] = std::array::from_fn(|_| Vec::with_capacity(n));
        for p in 0..n {
            let y = point(x, p);
            let d = self.bulk_derivative(&y);
            for i in 0..5 {
                out[i].push(d[i] - self.params.a1 * y[i]);
            }
        }
        let mut it = out.into_iter();
        QTensorField {
            components: std::array::from_fn(|_| {
                Field::from_values_unchecked(self.grid.clone(), it.next().unwrap())
            }),
        }
    }
}

/// One SAV/CN step of the Q-tensor relaxation. `C0` is raised first if the
/// shifted bulk density is not positive on the current state, and the
/// auxiliary variable history is re-initialized for the new constant.
pub fn step_cn_qtensor(
    model: &mut QTensorModel,
    state: &SavState<QTensorField>,
    predictor: CnPredictor,
) -> Result<SavState<QTensorField>> {
    if model.ensure_positive_density(state.phi()) == 0 {
        return crate::sav::step_cn(model, state, predictor);
    }
    let phis = state.phi_history().to_vec();
    let rs = phis
        .iter()
        .map(|q| model.sav_variable(q))
        .collect::<Result<Vec<_>>>()?;
    let mut reset = SavState::from_history(phis, rs, state.t, state.dt, state.scheme)?;
    reset.step = state.step;
    crate::sav::step_cn(model, &reset, predictor)
}

/// Writes `SAVQ1 3 N1 N2 N3 L1 L2 L3` followed by five field blocks.
pub fn write_qtensor_snapshot(path: impl AsRef<Path>, q: &QTensorField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let g = q.grid();
    let p = g.points();
    let l = g.lengths();
    writeln!(
        w,
        "SAVQ1 3 {} {} {} {} {} {}",
        p[0], p[1], p[2], l[0], l[1], l[2]
    )?;
    for c in &q.components {
        write_snapshot_to(&mut w, c)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_qtensor_snapshot(path: impl AsRef<Path>) -> Result<QTensorField> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if !line.starts_with("SAVQ1 3 ") {
        return Err(SavError::Snapshot("missing SAVQ1 header".into()));
    }
    let mut fields = Vec::with_capacity(5);
    for _ in 0..5 {
        fields.push(read_snapshot_from(&mut r)?);
    }
    let header_grid: Vec<&str> = line.split_whitespace().skip(2).collect();
    let g = fields[0].grid();
    let expected: Vec<String> = g
        .points()
        .iter()
        .map(|n| n.to_string())
        .chain(g.lengths().iter().map(|l| l.to_string()))
        .collect();
    if header_grid != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(SavError::Snapshot("block grid differs from header".into()));
    }
    let arr: [Field; 5] = fields.try_into().unwrap();
    QTensorField::new(arr)
}

/// Elastic variational derivative evaluated directly from the tensor formula
/// with spectral derivatives; used to cross-check the mode matrices.
pub fn elastic_derivative_direct(q: &QTensorField, p: &QTensorParams) -> QTensorField {
    let grid = q.grid().clone();
    let n = grid.len();
    let full: Vec<Vec<Field>> = (0..3)
        .map(|i| {
            (0..3)
                .map(|j| {
                    let values = (0..n).map(|pt| q.tensor_at(pt)[i][j]).collect();
                    Field::from_values_unchecked(grid.clone(), values)
                })
                .collect()
        })
        .collect();
    let dd = |f: &Field, a: usize, b: usize| derivative(&derivative(f, a), b);
    // ∂_{kl} Q_kl
    let mut div2 = Field::zeros(&grid);
    for k in 0..3 {
        for l in 0..3 {
            div2.axpy(1.0, &dd(&full[k][l], k, l));
        }
    }
    let lap = OperatorSymbol::minus_laplacian(&grid);
    let mut comps: Vec<Field> = Vec::with_capacity(5);
    for (i, j) in [(0, 0), (1, 1), (0, 1), (0, 2), (1, 2)] {
        let mut e = apply_multiplier(&full[i][j], lap.values());
        e.scale(p.l1);
        let mut aniso = Field::zeros(&grid);
        for k in 0..3 {
            aniso.axpy(1.0, &dd(&full[j][k], i, k));
            aniso.axpy(1.0, &dd(&full[i][k], j, k));
        }
        if i == j {
            aniso.axpy(-2.0 / 3.0, &div2);
        }
        e.axpy(-0.5 * (p.l2 + p.l3), &aniso);
        comps.push(e);
    }
    let arr: [Field; 5] = comps.try_into().unwrap();
    QTensorField { components: arr }
}
