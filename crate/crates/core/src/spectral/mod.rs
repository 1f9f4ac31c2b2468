//! Periodic uniform grids, real fields, and their Fourier representation.
//!
//! Fields are stored row-major. The forward transform is normalised so that
//! the zero-mode coefficient equals the mean of the field; the inverse
//! transform is the plain Fourier sum. Wavenumbers follow the usual FFT
//! ordering with the Nyquist index mapped to `+N/2`.

mod nonlocal;
mod snapshot;
mod symbol;

pub use nonlocal::{gauss_legendre, KernelSpec};
pub use snapshot::{read_snapshot, read_snapshot_from, write_snapshot, write_snapshot_to};
pub use symbol::{symbol_fractional_laplacian, symbol_nonlocal, OperatorSymbol, SymbolSign};

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Result, SavError};

pub struct Grid {
    points: Vec<usize>,
    lengths: Vec<f64>,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("points", &self.points)
            .field("lengths", &self.lengths)
            .finish()
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.points == other.points && self.lengths == other.lengths
    }
}

impl Grid {
    pub fn new(points: &[usize], lengths: &[f64]) -> Result<Arc<Grid>> {
        if points.is_empty() || points.len() > 3 {
            return Err(SavError::InvalidGrid(format!(
                "dimension must be 1, 2 or 3, got {}",
                points.len()
            )));
        }
        if points.len() != lengths.len() {
            return Err(SavError::InvalidGrid(
                "points and lengths differ in dimension".into(),
            ));
        }
        for &n in points {
            if n < 4 || n % 2 != 0 {
                return Err(SavError::InvalidGrid(format!(
                    "points per dimension must be even and >= 4, got {n}"
                )));
            }
        }
        for &l in lengths {
            if !(l.is_finite() && l > 0.0) {
                return Err(SavError::InvalidGrid(format!(
                    "box lengths must be positive, got {l}"
                )));
            }
        }
        let mut planner = FftPlanner::new();
        let forward = points.iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let inverse = points.iter().map(|&n| planner.plan_fft_inverse(n)).collect();
        Ok(Arc::new(Grid {
            points: points.to_vec(),
            lengths: lengths.to_vec(),
            forward,
            inverse,
        }))
    }

    /// Grid on `[0, 2π)^dim`, where wavenumbers are integers.
    pub fn periodic(points: &[usize]) -> Result<Arc<Grid>> {
        Self::new(points, &vec![TAU; points.len()])
    }

    pub fn dim(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[usize] {
        &self.points
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    /// Total number of grid points.
    pub fn len(&self) -> usize {
        self.points.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    /// Quadrature weight of one grid point.
    pub fn cell_volume(&self) -> f64 {
        self.volume() / self.len() as f64
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.points[axis] as f64
    }

    /// Integer frequency of storage index `j` along `axis`, in `(-N/2, N/2]`.
    pub fn frequency(&self, axis: usize, j: usize) -> i64 {
        let n = self.points[axis];
        if j <= n / 2 {
            j as i64
        } else {
            j as i64 - n as i64
        }
    }

    pub fn is_nyquist(&self, axis: usize, j: usize) -> bool {
        j == self.points[axis] / 2
    }

    /// Physical wavenumber `2π m / L` of storage index `j` along `axis`.
    pub fn wavenumber(&self, axis: usize, j: usize) -> f64 {
        TAU * self.frequency(axis, j) as f64 / self.lengths[axis]
    }

    /// Multi-index of a flat row-major position.
    pub fn unravel(&self, mut flat: usize) -> [usize; 3] {
        let mut idx = [0usize; 3];
        for axis in (0..self.dim()).rev() {
            idx[axis] = flat % self.points[axis];
            flat /= self.points[axis];
        }
        idx
    }

    /// Physical wavevector (zero-padded to three components) of each mode,
    /// in storage order.
    pub fn wavevectors(&self) -> Vec<[f64; 3]> {
        (0..self.len())
            .map(|flat| {
                let idx = self.unravel(flat);
                let mut k = [0.0; 3];
                for (axis, kk) in k.iter_mut().enumerate().take(self.dim()) {
                    *kk = self.wavenumber(axis, idx[axis]);
                }
                k
            })
            .collect()
    }

    /// Integer frequencies of each mode, in storage order.
    pub fn frequencies(&self) -> Vec<[i64; 3]> {
        (0..self.len())
            .map(|flat| {
                let idx = self.unravel(flat);
                let mut m = [0i64; 3];
                for (axis, mm) in m.iter_mut().enumerate().take(self.dim()) {
                    *mm = self.frequency(axis, idx[axis]);
                }
                m
            })
            .collect()
    }

    /// Coordinates `x_j = j L / N` of each grid point, in storage order.
    pub fn coordinates(&self) -> Vec<[f64; 3]> {
        (0..self.len())
            .map(|flat| {
                let idx = self.unravel(flat);
                let mut x = [0.0; 3];
                for (axis, xx) in x.iter_mut().enumerate().take(self.dim()) {
                    *xx = idx[axis] as f64 * self.spacing(axis);
                }
                x
            })
            .collect()
    }

    fn transform_in_place(&self, data: &mut [Complex64], inverse: bool) {
        let plans = if inverse { &self.inverse } else { &self.forward };
        let dim = self.dim();
        let mut line = Vec::new();
        for axis in 0..dim {
            let n = self.points[axis];
            let fft = &plans[axis];
            let stride: usize = self.points[axis + 1..].iter().product();
            if stride == 1 {
                fft.process(data);
                continue;
            }
            let outer: usize = self.points[..axis].iter().product();
            let block = n * stride;
            line.resize(block, Complex64::default());
            for o in 0..outer {
                let chunk = &mut data[o * block..(o + 1) * block];
                // gather the strided lines contiguously, transform, scatter back
                for i in 0..n {
                    for s in 0..stride {
                        line[s * n + i] = chunk[i * stride + s];
                    }
                }
                fft.process(&mut line);
                for i in 0..n {
                    for s in 0..stride {
                        chunk[i * stride + s] = line[s * n + i];
                    }
                }
            }
        }
    }
}

pub(crate) fn same_grid(a: &Arc<Grid>, b: &Arc<Grid>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

/// Real samples of a function on a grid.
#[derive(Clone, Debug)]
pub struct Field {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(SavError::InvalidGrid(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SavError::NonFinite("field values"));
        }
        Ok(Field { grid, values })
    }

    pub fn zeros(grid: &Arc<Grid>) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: &Arc<Grid>, value: f64) -> Self {
        Field {
            grid: grid.clone(),
            values: vec![value; grid.len()],
        }
    }

    /// Samples `f(x)` at the grid coordinates.
    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn([f64; 3]) -> f64) -> Self {
        let values = grid.coordinates().into_iter().map(f).collect();
        Field {
            grid: grid.clone(),
            values,
        }
    }

    pub(crate) fn from_values_unchecked(grid: Arc<Grid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Field { grid, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &Field) {
        debug_assert!(same_grid(&self.grid, &x.grid));
        for (s, v) in self.values.iter_mut().zip(&x.values) {
            *s += a * v;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.values.iter_mut().for_each(|v| *v *= a);
    }

    /// Discrete `L²(Ω)` norm.
    pub fn l2_norm(&self) -> f64 {
        (self.grid.cell_volume() * self.values.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    /// Quadrature of `∫_Ω f`.
    pub fn integral(&self) -> f64 {
        self.grid.cell_volume() * self.values.iter().sum::<f64>()
    }
}

/// Fourier coefficients of a field, in the same layout as the samples.
#[derive(Clone, Debug)]
pub struct SpectralField {
    grid: Arc<Grid>,
    coeffs: Vec<Complex64>,
}

impl SpectralField {
    pub fn new(grid: Arc<Grid>, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != grid.len() {
            return Err(SavError::InvalidGrid(format!(
                "expected {} coefficients, got {}",
                grid.len(),
                coeffs.len()
            )));
        }
        Ok(SpectralField { grid, coeffs })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    /// Inverse transform returning the field together with the largest
    /// imaginary part discarded by the Hermitian projection.
    pub fn to_field_with_residue(&self) -> (Field, f64) {
        let mut data = self.coeffs.clone();
        self.grid.transform_in_place(&mut data, true);
        let residue = data.iter().fold(0.0f64, |m, c| m.max(c.im.abs()));
        let values = data.into_iter().map(|c| c.re).collect();
        (Field::from_values_unchecked(self.grid.clone(), values), residue)
    }
}

pub fn transform_forward(f: &Field) -> SpectralField {
    let mut data: Vec<Complex64> = f.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    f.grid.transform_in_place(&mut data, false);
    let scale = 1.0 / f.grid.len() as f64;
    data.iter_mut().for_each(|c| *c *= scale);
    SpectralField {
        grid: f.grid.clone(),
        coeffs: data,
    }
}

pub fn transform_backward(s: &SpectralField) -> Field {
    s.to_field_with_residue().0
}

/// Multiplies every Fourier coefficient of `f` by the real multiplier
/// `multiplier[k]` and transforms back. Used by operator symbols and solves.
pub(crate) fn apply_multiplier(f: &Field, multiplier: &[f64]) -> Field {
    let mut data: Vec<Complex64> = f.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let grid = &f.grid;
    grid.transform_in_place(&mut data, false);
    let scale = 1.0 / grid.len() as f64;
    for (c, m) in data.iter_mut().zip(multiplier) {
        *c *= m * scale;
    }
    grid.transform_in_place(&mut data, true);
    Field::from_values_unchecked(grid.clone(), data.into_iter().map(|c| c.re).collect())
}

/// Applies a real multiplier produced per mode by `f`.
pub(crate) fn apply_multiplier_fn(f: &Field, m: impl Fn(usize) -> f64) -> Field {
    let mut data: Vec<Complex64> = f.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let grid = &f.grid;
    grid.transform_in_place(&mut data, false);
    let scale = 1.0 / grid.len() as f64;
    for (k, c) in data.iter_mut().enumerate() {
        *c *= m(k) * scale;
    }
    grid.transform_in_place(&mut data, true);
    Field::from_values_unchecked(grid.clone(), data.into_iter().map(|c| c.re).collect())
}

/// Spectral derivative `∂f/∂x_axis`. The Nyquist mode of an odd-order
/// derivative is set to zero so the result stays real.
pub fn derivative(f: &Field, axis: usize) -> Field {
    let grid = f.grid.clone();
    let mut data: Vec<Complex64> = f.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    grid.transform_in_place(&mut data, false);
    let scale = 1.0 / grid.len() as f64;
    for (flat, c) in data.iter_mut().enumerate() {
        let j = grid.unravel(flat)[axis];
        let k = if grid.is_nyquist(axis, j) {
            0.0
        } else {
            grid.wavenumber(axis, j)
        };
        *c *= Complex64::new(0.0, k * scale);
    }
    grid.transform_in_place(&mut data, true);
    Field::from_values_unchecked(grid, data.into_iter().map(|c| c.re).collect())
}

/// Zeroes every mode with `|m| > N/3` along any axis.
pub fn dealias(f: &Field) -> Field {
    let grid = f.grid.clone();
    let freqs = grid.frequencies();
    let cut: Vec<i64> = grid.points().iter().map(|&n| (n / 3) as i64).collect();
    apply_multiplier_fn(f, |k| {
        let keep = freqs[k]
            .iter()
            .zip(&cut)
            .all(|(m, c)| m.abs() <= *c);
        if keep {
            1.0
        } else {
            0.0
        }
    })
}

pub fn apply_symbol(sym: &OperatorSymbol, f: &Field) -> Result<Field> {
    if !same_grid(sym.grid(), &f.grid) {
        return Err(SavError::GridMismatch("apply_symbol"));
    }
    Ok(apply_multiplier(f, sym.values()))
}

/// Discrete `(f, g) = ∫_Ω f g` by the trapezoid (equal-weight) rule.
pub fn inner_product(f: &Field, g: &Field) -> Result<f64> {
    if !same_grid(&f.grid, &g.grid) {
        return Err(SavError::GridMismatch("inner_product"));
    }
    Ok(dot(f, g))
}

pub(crate) fn dot(f: &Field, g: &Field) -> f64 {
    f.grid.cell_volume() * f.values.iter().zip(&g.values).map(|(a, b)| a * b).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: &Arc<Grid>, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Field::new(grid.clone(), values).unwrap()
    }

    #[test]
    fn rejects_odd_or_tiny_grids() {
        assert!(Grid::periodic(&[6, 7]).is_err());
        assert!(Grid::periodic(&[2]).is_err());
        assert!(Grid::periodic(&[4, 4, 4, 4]).is_err());
        assert!(Grid::new(&[8], &[-1.0]).is_err());
    }

    #[test]
    fn wavenumbers_follow_fft_ordering() {
        let g = Grid::new(&[8], &[4.0]).unwrap();
        let m: Vec<i64> = (0..8).map(|j| g.frequency(0, j)).collect();
        assert_eq!(m, vec![0, 1, 2, 3, 4, -3, -2, -1]);
        assert!((g.wavenumber(0, 1) - TAU / 4.0).abs() < 1e-15);
    }

    #[test]
    fn constant_field_has_only_mean_mode() {
        let g = Grid::periodic(&[8, 6 + 2]).unwrap();
        let s = transform_forward(&Field::constant(&g, 3.0));
        assert!((s.coeffs()[0] - Complex64::new(3.0, 0.0)).norm() < 1e-14);
        assert!(s.coeffs()[1..].iter().all(|c| c.norm() < 1e-14));
    }

    #[test]
    fn cosine_splits_into_two_halves() {
        let g = Grid::periodic(&[16]).unwrap();
        let s = transform_forward(&Field::from_fn(&g, |x| x[0].cos()));
        for (j, c) in s.coeffs().iter().enumerate() {
            let expected = if j == 1 || j == 15 { 0.5 } else { 0.0 };
            assert!((c - Complex64::new(expected, 0.0)).norm() < 1e-14, "mode {j}");
        }
    }

    #[test]
    fn round_trip_is_identity() {
        for points in [vec![8], vec![8, 8], vec![4, 6, 8], vec![32, 16]] {
            let g = Grid::periodic(&points).unwrap();
            let f = random_field(&g, 7);
            let back = transform_backward(&transform_forward(&f));
            let err = f
                .values()
                .iter()
                .zip(back.values())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err <= 1e-12 * f.max_abs(), "{points:?}: {err}");
        }
    }

    #[test]
    fn parseval_holds() {
        let g = Grid::new(&[8, 12], &[3.0, 5.0]).unwrap();
        let f = random_field(&g, 1);
        let h = random_field(&g, 2);
        let direct = inner_product(&f, &h).unwrap();
        let (fs, hs) = (transform_forward(&f), transform_forward(&h));
        let spectral: f64 = fs
            .coeffs()
            .iter()
            .zip(hs.coeffs())
            .map(|(a, b)| (a * b.conj()).re)
            .sum::<f64>()
            * g.volume();
        assert!((direct - spectral).abs() <= 1e-10 * direct.abs().max(1.0));
    }

    #[test]
    fn inner_product_examples() {
        let g = Grid::periodic(&[8, 8]).unwrap();
        let one = Field::constant(&g, 1.0);
        assert!((inner_product(&one, &one).unwrap() - TAU * TAU).abs() < 1e-12);

        let g1 = Grid::periodic(&[4]).unwrap();
        let s = Field::from_fn(&g1, |x| x[0].sin());
        let c = Field::from_fn(&g1, |x| x[0].cos());
        assert!(inner_product(&s, &c).unwrap().abs() < 1e-12);

        let f = Field::from_fn(&g, |x| 0.07 + 0.05 * x[0].sin() * x[1].sin());
        let mean = inner_product(&f, &one).unwrap() / g.volume();
        assert!((mean - 0.07).abs() < 1e-14);
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let a = Grid::periodic(&[8]).unwrap();
        let b = Grid::periodic(&[16]).unwrap();
        let err = inner_product(&Field::zeros(&a), &Field::zeros(&b));
        assert!(matches!(err, Err(SavError::GridMismatch(_))));
    }

    #[test]
    fn derivative_of_sine() {
        let g = Grid::new(&[32], &[3.0]).unwrap();
        let k = TAU / 3.0;
        let f = Field::from_fn(&g, |x| (2.0 * k * x[0]).sin());
        let d = derivative(&f, 0);
        for (x, v) in g.coordinates().iter().zip(d.values()) {
            assert!((v - 2.0 * k * (2.0 * k * x[0]).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn dealias_drops_high_modes() {
        let g = Grid::periodic(&[12]).unwrap();
        let f = Field::from_fn(&g, |x| x[0].cos() + (5.0 * x[0]).cos());
        let d = dealias(&f);
        for (x, v) in g.coordinates().iter().zip(d.values()) {
            assert!((v - x[0].cos()).abs() < 1e-13);
        }
    }
}
